"""Acceptance gate: ten end-to-end criteria, one pass/fail line each.

Each ``criterion_N`` returns ``(passed, report)``; the report holds only
deterministic quantities so that criterion 10 can compare serialized
reports byte for byte.  Runtimes are checked against their budgets but kept
out of the reports.
"""
from __future__ import annotations

import json
import time

import numpy as np
import pytest

from screenlab import amort as A
from screenlab import conditions as C
from screenlab import dist as D
from screenlab import oracle as O
from screenlab import pricing as P
from screenlab.conditions import _clean

from conftest import ACCEPTANCE_LINES

BIMODAL = D.UniformMixture1D(((0.45, 0.0, 0.2), (0.45, 0.8, 1.0), (0.1, 0.0, 1.0)))
SQUARE = D.Curve.from_function(lambda t: t**2, 0.0, 1.0, 201)


def criterion_1():
    # favorite value U[0,1], ratio independent and uniform on [0,1]
    fam = D.UniformAboveCurve(D.Uniform1D(0.0, 1.0), D.Curve(np.array([0.0, 1.0]), np.array([0.0, 0.0])))
    g = D.build_grid(fam, (128, 128))
    fld = A.build_extension_2d(g, "formula")
    v = g.t1
    m = fld.mask
    e1 = float(np.max(np.abs(fld.phi1 - (2 * v - 1))[m]))
    e2 = float(np.max(np.abs(fld.phi2 - g.theta * (2 * v - 1))[m]))
    return e1 <= 1e-6 and e2 <= 1e-3, {"phi1_err": e1, "phi2_err": e2}


def criterion_2():
    g = D.grid_from_cartesian(lambda a, b: np.where(b >= a / 2, 2.0, 1.0), (0.0, 1.0), (64, 64))
    c = D.equi_quantile(g, 0.5)
    cell = c.anchor / (g.shape[1] - 1)
    err = np.abs(c.second - 5 * c.anchor / 8)
    cells = float(np.max(err[1:] / cell[1:]))
    return cells <= 2.0, {"max_error_cells": cells, "max_error": float(err.max())}


def criterion_3():
    fam = D.IidUniform(0.0, 1.0)
    rep = C.certify(D.build_grid(fam, (64, 64)), "unit_demand")
    inst = O.discretize(fam, 231, "first")
    gap = O.revenue_gap(inst, lottery_tol=1e-6)
    cont = P.optimal_uniform_price(P.favorite_problem(fam))
    ok = rep.overall_verdict == C.PASS and gap["relative_gap"] <= 0.02 and not gap["lottery_support"]
    return ok, {
        "certify": rep.overall_verdict, "k": inst.k, "lp_opt": gap["lp_opt"], "best_uniform_same_instance": gap["best_simple"],
        "relative_gap": gap["relative_gap"], "lottery_support": gap["lottery_support"],
        "continuous_best_uniform": cont["revenue"], "relative_gap_vs_continuous": (gap["lp_opt"] - cont["revenue"]) / cont["revenue"],
    }


def criterion_4():
    fam = D.IidUniform(5.0, 6.0)
    rep = C.certify(D.build_grid(fam, (64, 64)), "unit_demand")
    fosd = rep.check("fosd_ratio")
    nec = rep.check("necessary_uniform")
    tv, ps = nec.details["test_values"], nec.details["stationary_prices"]
    inst = O.discretize(fam, 121)
    gap = O.revenue_gap(inst)
    cont = P.optimal_uniform_price(P.favorite_problem(fam))
    ok = (fosd.verdict == C.FAIL and fosd.witness is not None and nec.verdict == C.FAIL
          and abs(tv[0] - 3.29) < 0.01 and abs(ps[0] - 5.097) < 1e-3
          and gap["absolute_gap"] > 1e-3 and gap["lp_opt"] - cont["revenue"] > 1e-3 and gap["lottery_support"])
    return ok, {
        "fosd": fosd.verdict, "fosd_witness": fosd.witness, "necessary_test_value": tv[0], "stationary_price": ps[0],
        "k": inst.k, "lp_opt": gap["lp_opt"], "best_uniform_same_instance": gap["best_simple"],
        "continuous_best_uniform": cont["revenue"], "absolute_gap": gap["absolute_gap"], "lottery_support": gap["lottery_support"],
    }


def criterion_5():
    fam = D.TruncatedUniformSimplex(0.0, 1.0)
    rep = C.certify(D.to_sum_ratio(fam, (64, 64)), "additive")
    inst = O.discretize(fam, 231, setting=O.MULTI_PRODUCT, cost_form="max")
    gap = O.revenue_gap(inst)
    cont = P.optimal_bundle_price(P.sum_problem(fam))
    ok = rep.overall_verdict == C.PASS and gap["simple_family"] == "bundle_price" and gap["relative_gap"] <= 0.02
    return ok, {
        "certify": rep.overall_verdict, "k": inst.k, "lp_opt": gap["lp_opt"], "best_bundle_same_instance": gap["best_simple"],
        "relative_gap": gap["relative_gap"], "continuous_best_bundle": cont["revenue"],
        "relative_gap_vs_continuous": (gap["lp_opt"] - cont["revenue"]) / cont["revenue"],
    }


def criterion_6():
    fam = D.PerfectlyCorrelated(BIMODAL, SQUARE)
    g = D.build_grid(fam, (128, 64))
    irn = A.build_ironed_quantile(g)
    dom = A.verify_ironed_dominance(irn)
    d = dom.details
    inst = O.discretize(fam, 200)
    gap = O.revenue_gap(inst)
    ok = dom.verdict == C.PASS and gap["relative_gap"] <= 0.02
    return ok, {
        "pooled_intervals": irn.breakpoints, "monotone_min": d["monotone_min"], "cap_min": d["cap_min"],
        "dominance_min": d["dominance_min"], "k": inst.k, "lp_opt": gap["lp_opt"],
        "best_uniform_same_instance": gap["best_simple"], "relative_gap": gap["relative_gap"],
    }


def _cross(fam, n):
    fld = A.build_extension_2d(D.build_grid(fam, (n, n)), "formula")
    return fld.diagnostics["cross_phi2_sup"]


def criterion_7():
    fams = {
        "iid_uniform": D.IidUniform(0.0, 1.0),
        "uniform_above_curve": D.UniformAboveCurve(D.Uniform1D(0.0, 1.0), D.Curve(np.array([0.0, 1.0]), np.array([0.0, 0.5]))),
    }
    out, ok = {}, True
    for name, fam in fams.items():
        d32, d64 = _cross(fam, 32), _cross(fam, 64)
        ratio = d64 / d32
        ok &= ratio <= 0.5 * 1.2
        out[name] = {"sup_diff_32": d32, "sup_diff_64": d64, "ratio": ratio}
    return bool(ok), out


def golden_instances():
    return {
        "iid_uniform_01": O.discretize(D.IidUniform(0.0, 1.0), 120, "first"),
        "iid_uniform_56": O.discretize(D.IidUniform(5.0, 6.0), 121),
        "simplex_bundle": O.discretize(D.TruncatedUniformSimplex(0.0, 1.0), 120, setting=O.MULTI_PRODUCT),
        "bimodal_correlated": O.discretize(D.PerfectlyCorrelated(BIMODAL, SQUARE), 120),
    }


def criterion_8():
    rng = np.random.default_rng(20240601)
    out, ok = {}, True
    for name, inst in golden_instances().items():
        anchor = "sum" if inst.setting == O.MULTI_PRODUCT else "favorite"
        phi, _ = A.discrete_extension(inst.types, inst.probs, anchor)
        margins = []
        for sol in O.random_ic_mechanisms(inst, 10, rng):
            vs = A.discrete_virtual_surplus(phi, inst.probs, sol.x)
            margins.append(vs - float(inst.probs @ sol.p))
        ok &= min(margins) >= -1e-6
        out[name] = {"k": inst.k, "min_margin": min(margins), "n_mechanisms": len(margins)}
    return bool(ok), out


def criterion_9():
    rng = np.random.default_rng(7)
    kink = float(rng.uniform(0.3, 0.45))
    s1, s2 = float(rng.uniform(0.6, 0.9)), float(rng.uniform(0.05, 0.3))
    p = kink + 0.05
    x = np.array([0.0, kink, 2 * p])
    curve = D.Curve(x, np.array([0.0, s1 * kink, s1 * kink + s2 * (2 * p - kink)]))
    ce = P.construct_counterexample(curve, p)
    slope = ce.loglog_slope()
    ok = ce.gain > 0 and abs(slope - 1.0) <= 0.2
    return bool(ok), {"price": p, "gain": ce.gain, "epsilon": ce.epsilon, "loglog_slope": slope,
                      "uniform_revenue": ce.uniform_revenue, "menu_revenue": ce.menu_revenue}


CRITERIA = {i: globals()[f"criterion_{i}"] for i in range(1, 10)}
BUDGET = {1: 5.0, 2: 1.0, 3: 60.0, 4: 120.0, 5: 60.0, 6: 60.0, 7: 60.0, 8: 300.0, 9: 30.0}
_REPORTS: dict = {}


def _serialize(rep) -> bytes:
    return json.dumps(_clean(rep), sort_keys=True, indent=2).encode()


@pytest.mark.parametrize("num", list(CRITERIA))
def test_criterion(num):
    t0 = time.perf_counter()
    ok, rep = CRITERIA[num]()
    dt = time.perf_counter() - t0
    _REPORTS[num] = _serialize(rep)
    in_time = dt < BUDGET[num]
    passed = bool(ok) and in_time
    flat = {f"{k}.{kk}": vv for k, v in rep.items() if isinstance(v, dict) for kk, vv in v.items()}
    flat.update(rep)
    brief = ", ".join(f"{k}={v:.6g}" for k, v in flat.items() if isinstance(v, float))
    line = f"criterion {num}: {'PASS' if passed else 'FAIL'} ({dt:.1f}s / budget {BUDGET[num]:.0f}s) {brief}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok, rep
    assert in_time, f"runtime {dt:.1f}s exceeds {BUDGET[num]}s"


def test_criterion_10_determinism():
    """Rerun every criterion and compare serialized reports byte for byte."""
    t0 = time.perf_counter()
    diffs = []
    for num, fn in CRITERIA.items():
        first = _REPORTS.get(num) or _serialize(fn()[1])
        if _serialize(fn()[1]) != first:
            diffs.append(num)
    line = f"criterion 10: {'PASS' if not diffs else 'FAIL'} ({time.perf_counter() - t0:.1f}s) nondeterministic={diffs}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert not diffs
