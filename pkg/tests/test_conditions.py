import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from screenlab import conditions as C
from screenlab import dist as D

SQUARE = D.Curve.from_function(lambda t: t**2, 0.0, 1.0, 201)


def test_check_result_witness_contract():
    with pytest.raises(ValueError):
        C.CheckResult("x", C.FAIL, -1.0)
    with pytest.raises(ValueError):
        C.CheckResult("x", C.PASS, 1.0, witness=[[0.0]])
    with pytest.raises(ValueError):
        C.CheckResult("x", "maybe", 0.0)


def test_uniform_unit_interval_certifies():
    rep = C.certify(D.build_grid(D.IidUniform(0.0, 1.0), (64, 64)), "unit_demand")
    assert rep.overall_verdict == C.PASS
    assert rep.check("necessary_uniform").verdict != C.FAIL


def test_shifted_uniform_fails_with_witnesses():
    rep = C.certify(D.build_grid(D.IidUniform(5.0, 6.0), (64, 64)), "unit_demand")
    assert rep.overall_verdict == C.FAIL
    fosd = rep.check("fosd_ratio")
    assert fosd.verdict == C.FAIL and len(fosd.witness) == 2
    # witness columns: lower anchor has the smaller conditional CDF (dominance reversed)
    (v_lo, th), (v_hi, _) = fosd.witness
    assert v_lo < v_hi
    nec = rep.check("necessary_uniform")
    assert nec.details["stationary_prices"][0] == pytest.approx(5.0972, abs=1e-3)
    assert nec.details["test_values"][0] == pytest.approx(3.29, abs=0.01)


def test_simplex_additive_certifies():
    rep = C.certify(D.to_sum_ratio(D.TruncatedUniformSimplex(0.0, 1.0), (64, 64)), "additive")
    assert rep.overall_verdict == C.PASS


def test_irregular_marginal_fails_regularity():
    bimodal = D.UniformMixture1D(((0.45, 0.0, 0.2), (0.45, 0.8, 1.0), (0.1, 0.0, 1.0)))
    g = D.build_grid(D.PerfectlyCorrelated(bimodal, SQUARE), (128, 32))
    r = C.check_regular_favorite(D.favorite_marginal(g))
    assert r.verdict == C.FAIL
    assert r.violation > 0


def test_ironed_mode_convex_and_nonconvex_curves():
    g = D.build_grid(D.PerfectlyCorrelated(D.Uniform1D(0.0, 1.0), SQUARE), (64, 32))
    assert C.certify(g, "unit_demand_ironed").overall_verdict == C.PASS
    concave = D.Curve.from_function(np.sqrt, 0.0, 1.0, 201)
    # sqrt lies above the diagonal: use half of it to stay on the t1 >= t2 branch
    half = D.Curve(concave.x, 0.5 * concave.y * np.minimum(1.0, concave.x / np.maximum(0.5 * concave.y, 1e-12)))
    g2 = D.build_grid(D.PerfectlyCorrelated(D.Uniform1D(0.0, 1.0), half), (64, 32))
    r = C.check_convex_equiquantile(g2)
    assert r.verdict == C.FAIL and r.witness is not None


def test_ratio_monotone_curve():
    x = np.linspace(0.01, 1.0, 50)
    assert C.check_ratio_monotone_curve(x, x**2).verdict == C.PASS
    r = C.check_ratio_monotone_curve(x, np.sqrt(x) * 0.5)
    assert r.verdict == C.FAIL


def test_report_json_is_sorted_and_stable():
    rep = C.certify(D.build_grid(D.IidUniform(5.0, 6.0), (32, 32)), "unit_demand")
    s = rep.to_json()
    d = json.loads(s)
    assert list(d) == sorted(d)
    assert d["overall"]["verdict"] == "fail"
    assert s == C.certify(D.build_grid(D.IidUniform(5.0, 6.0), (32, 32)), "unit_demand").to_json()


def test_log_supermodular_product_density():
    g = D.build_grid(D.IidUniform(0.0, 1.0), (32, 32))
    assert C.check_mr_log_supermodular(g).verdict in (C.PASS, C.INCONCLUSIVE)


def test_unknown_mode_rejected():
    with pytest.raises(ValueError):
        C.certify(D.build_grid(D.IidUniform(0.0, 1.0), (16, 16)), "bogus")


@settings(max_examples=15, deadline=None)
@given(a=st.floats(0.0, 0.3), w=st.floats(0.5, 2.0))
def test_uniform_verdict_matches_support_offset(a, w):
    # the ratio of iid uniforms on [a, b] is FOSD-increasing in v iff a == 0
    rep = C.certify(D.build_grid(D.IidUniform(a, a + w), (32, 32)), "unit_demand")
    fosd = rep.check("fosd_ratio")
    if a / w > 0.05:
        assert fosd.verdict == C.FAIL
    assert (fosd.verdict == C.FAIL) == (fosd.witness is not None)


def test_sequential_fosd_three_outcomes():
    g = D.grid3_from_function(lambda v, a, b: v**2, (0.0, 1.0), 16)
    assert C.check_sequential_fosd(g).verdict == C.PASS
    bad = D.grid3_from_function(lambda v, a, b: v**2 * np.exp(-3 * v * a), (0.0, 1.0), 16)
    r = C.check_sequential_fosd(bad)
    assert r.verdict == C.FAIL and r.witness is not None
