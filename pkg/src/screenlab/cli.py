"""Command-line front end: ``screenlab {certify,counterexample,oracle}``.

Exit codes: 0 success, 1 conditions failed (or no improvement found),
2 oracle contradiction or LP failure, 3 input error.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import amort, conditions, dist, oracle, pricing
from .conditions import _clean

log = logging.getLogger("screenlab")

EXIT_OK, EXIT_FAILED, EXIT_ORACLE, EXIT_INPUT = 0, 1, 2, 3
MODES = ("unit_demand", "additive", "unit_demand_ironed")


class InputError(ValueError):
    pass


def write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(_clean(obj), sort_keys=True, indent=2) + "\n")


def _threads() -> int:
    raw = os.environ.get("SCREENLAB_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise InputError(f"SCREENLAB_THREADS must be an integer, got {raw!r}")
    if n < 1:
        raise InputError("SCREENLAB_THREADS must be positive")
    return n


def load_config(path) -> dict:
    if path is None:
        raise InputError("--config is required")
    p = Path(path)
    if not p.is_file():
        raise InputError(f"config file not found: {p}")
    try:
        cfg = json.loads(p.read_text())
    except json.JSONDecodeError as e:
        raise InputError(f"malformed JSON in {p}: {e}")
    if not isinstance(cfg, dict):
        raise InputError("config must be a JSON object")
    return cfg


def _resolution(cfg, args):
    if args.grid is not None:
        return (args.grid, args.grid)
    r = cfg.get("resolution", 64)
    if isinstance(r, int):
        return (r, r)
    if isinstance(r, (list, tuple)) and len(r) == 2:
        return (int(r[0]), int(r[1]))
    raise InputError("resolution must be an integer or a pair")


def _mode(cfg, args) -> str:
    mode = args.mode or cfg.get("mode", "unit_demand")
    if mode not in MODES:
        raise InputError(f"mode must be one of {MODES}")
    return mode


def _out_dir(cfg, args) -> Path:
    out = Path(args.out or cfg.get("output_dir", "screenlab_out"))
    out.mkdir(parents=True, exist_ok=True)
    return out


# ---------------------------------------------------------------------------
# certify


def _amortization_checks(mode, grid, sgrid, cost, out: Path) -> dict:
    res = {}
    if mode == "unit_demand":
        fld = amort.build_extension_2d(grid, "formula")
        for chk in (amort.verify_divergence(fld, grid), amort.verify_boundary(fld, grid),
                    amort.verify_tangency(fld, grid), amort.verify_vsm_uniform(fld, grid, cost)):
            res[chk.name] = chk.to_dict()
        res["construction"] = {"verdict": "pass", "margin": 0.0, "witness": None, "details": fld.diagnostics}
        amort.dump_field(fld, out / "field.csv")
    elif mode == "additive":
        ext = amort.build_sum_extension(sgrid)
        can = amort.build_sum_canonical(sgrid)
        for chk in (amort.verify_divergence(can, sgrid), amort.verify_shift_condition(can),
                    amort.verify_vsm_bundle(ext, cost)):
            res[chk.name] = chk.to_dict()
        amort.dump_field(ext, out / "field.csv")
        amort.dump_field(can, out / "field_canonical.csv")
    else:
        irn = amort.build_ironed_quantile(grid)
        chk = amort.verify_ironed_dominance(irn)
        res[chk.name] = chk.to_dict()
        res["ironing"] = {"verdict": "pass", "margin": 0.0, "witness": None,
                          "details": {"pooled_intervals": irn.breakpoints, **{k: v for k, v in irn.diagnostics.items() if not isinstance(v, list)}}}
        with open(out / "ironed.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["q1", "q2", "t1", "t2", "phi1", "phi1_bar", "phi2", "phi2_bar"])
            for i in range(len(irn.q1)):
                for j in range(len(irn.q2)):
                    w.writerow([repr(float(v)) for v in (irn.q1[i], irn.q2[j], irn.t1[i], irn.t2[i, j], irn.phi1[i],
                                                         irn.phi1_bar[i], irn.phi2[i, j], irn.phi2_bar[i, j])])
    return res


def cmd_certify(args) -> int:
    cfg = load_config(args.config)
    try:
        family = dist.parse_family(cfg["distribution"])
    except KeyError:
        raise InputError("config needs a 'distribution' entry")
    mode = _mode(cfg, args)
    res = _resolution(cfg, args)
    cost = float(cfg.get("cost", 0.0))
    tol = float(args.tolerance) if args.tolerance is not None else float(cfg.get("tolerance", conditions.DEFAULT_TOL))
    out = _out_dir(cfg, args)
    if mode == "additive":
        sgrid = dist.to_sum_ratio(family, res)
        grid = sgrid
    else:
        grid = dist.build_grid(family, res)
        sgrid = None
    report = conditions.certify(grid, mode, tol)
    write_json(out / "certification.json", report.to_dict())
    try:
        am = _amortization_checks(mode, grid, sgrid, cost, out)
    except ValueError as e:  # construction preconditions (e.g. empty interior columns)
        am = {"construction": {"verdict": "inconclusive", "margin": 0.0, "witness": None, "details": {"error": str(e)}}}
    write_json(out / "amortization.json", am)
    code = EXIT_OK if report.overall_verdict == conditions.PASS else EXIT_FAILED
    ocfg = cfg.get("oracle", {}) or {}
    if ocfg.get("enabled", False) or args.oracle_k is not None:
        k = int(args.oracle_k or ocfg.get("k_target", 121))
        setting = oracle.MULTI_PRODUCT if mode == "additive" else oracle.MULTI_OUTCOME
        cost_form = ocfg.get("cost_form", "max" if mode == "additive" else "sum")
        try:
            inst = oracle.discretize(family, k, ocfg.get("branches"), setting, cost, cost_form)
            gap = oracle.revenue_gap(inst)
        except oracle.OracleError as e:
            write_json(out / "oracle.json", {"error": str(e)})
            return EXIT_ORACLE
        sol = gap.pop("solution")
        sol.to_csv(out / "solution.csv", inst.types)
        gap_tol = float(ocfg.get("gap_tolerance", 0.02))
        gap.update(ic_residual=sol.ic_residual, ir_residual=sol.ir_residual, gap_tolerance=gap_tol,
                   branches=inst.metadata.get("branches"), seed=args.seed if args.seed is not None else cfg.get("seed", 0))
        contradiction = report.overall_verdict == conditions.PASS and gap["relative_gap"] > gap_tol
        gap["contradicts_certificate"] = contradiction
        write_json(out / "oracle.json", gap)
        if contradiction:
            return EXIT_ORACLE
    return code


# ---------------------------------------------------------------------------
# counterexample


def cmd_counterexample(args) -> int:
    cfg = load_config(args.config)
    mode = _mode(cfg, args)
    out = _out_dir(cfg, args)
    if "point" not in cfg:
        raise InputError("config needs a 'point'")
    point = float(cfg["point"])
    try:
        if mode == "additive":
            ce = pricing.construct_bundle_counterexample(dist._curve_from(cfg["theta"]), point)
        else:
            ce = pricing.construct_counterexample(dist._curve_from(cfg["curve"]), point)
    except KeyError as e:
        raise InputError(f"config is missing {e}")
    except RuntimeError as e:
        write_json(out / "counterexample.json", {"error": str(e)})
        return EXIT_FAILED
    ce.menu.save(out / "menu.json")
    write_json(out / "counterexample.json", ce.to_dict())
    return EXIT_OK


# ---------------------------------------------------------------------------
# oracle


def cmd_oracle(args) -> int:
    cfg = load_config(args.config)
    try:
        inst = oracle.DiscreteInstance.from_json(cfg)
    except (KeyError, ValueError) as e:
        raise InputError(f"bad instance file: {e}")
    if inst.k > oracle.K_MAX:
        raise InputError(f"k={inst.k} exceeds the desk-scale cap {oracle.K_MAX}")
    out = _out_dir(cfg, args)
    try:
        sol = oracle.solve_optimal_mechanism(inst)
    except oracle.OracleError as e:
        write_json(out / "oracle.json", {"error": str(e)})
        return EXIT_ORACLE
    rep = oracle.verify_ic(sol, inst)
    rep.update(objective=sol.objective, k=inst.k, lottery_support=sol.lottery_support(), status=sol.status)
    sol.to_csv(out / "solution.csv", inst.types)
    write_json(out / "oracle.json", rep)
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="screenlab", description="Certify and test simple pricing for two-outcome screening.")
    sub = ap.add_subparsers(dest="command", required=True)
    for name, fn, helptext in (
        ("certify", cmd_certify, "check sufficient conditions, build amortizations, optionally run the LP oracle"),
        ("counterexample", cmd_counterexample, "build a menu that beats uniform (or bundle) pricing"),
        ("oracle", cmd_oracle, "solve the optimal-mechanism LP for an instance file"),
    ):
        p = sub.add_parser(name, help=helptext)
        p.add_argument("--config", help="JSON config (instance file for 'oracle')")
        p.add_argument("--out", help="output directory")
        p.add_argument("--grid", type=int, help="grid resolution per axis")
        p.add_argument("--oracle-k", type=int, dest="oracle_k", help="number of discrete types for the LP oracle")
        p.add_argument("--seed", type=int, help="random seed")
        p.add_argument("--mode", choices=MODES)
        p.add_argument("--tolerance", type=float, help="tolerance for the condition checks")
        p.add_argument("-v", "--verbose", action="store_true")
        p.set_defaults(func=fn)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        _threads()
        if args.seed is not None:
            np.random.seed(args.seed)
        return args.func(args)
    except InputError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INPUT
    except ValueError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
