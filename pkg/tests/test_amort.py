import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from screenlab import amort as A
from screenlab import conditions as C
from screenlab import dist as D
from screenlab import oracle as O

SQUARE = D.Curve.from_function(lambda t: t**2, 0.0, 1.0, 201)
BIMODAL = D.UniformMixture1D(((0.45, 0.0, 0.2), (0.45, 0.8, 1.0), (0.1, 0.0, 1.0)))
INDEPENDENT_RATIO = D.UniformAboveCurve(D.Uniform1D(0.0, 1.0), D.Curve(np.array([0.0, 1.0]), np.array([0.0, 0.0])))


@pytest.fixture(scope="module")
def uni64():
    return D.build_grid(D.IidUniform(0.0, 1.0), (64, 64))


def test_independent_ratio_closed_form():
    g = D.build_grid(INDEPENDENT_RATIO, (48, 48))
    f = A.build_extension_2d(g, "formula")
    m = f.mask
    assert np.max(np.abs(f.phi1 - (2 * g.t1 - 1))[m]) < 1e-9
    assert np.max(np.abs(f.phi2 - g.theta * (2 * g.t1 - 1))[m]) < 1e-6


@pytest.mark.parametrize("method", ["formula", "integrated"])
def test_divergence_boundary_tangency(uni64, method):
    f = A.build_extension_2d(uni64, method)
    assert f.construction_tag == (A.FORMULA if method == "formula" else A.INTEGRATED)
    for chk in (A.verify_divergence(f, uni64), A.verify_boundary(f, uni64), A.verify_tangency(f, uni64)):
        assert chk.verdict == C.PASS, (chk.name, chk.details)


def test_integrated_build_solves_divergence_to_roundoff(uni64):
    f = A.build_extension_2d(uni64, "integrated")
    assert A.verify_divergence(f, uni64).details["sup"] < 1e-9


def test_phi_identity_enforced(uni64):
    f = A.build_extension_2d(uni64)
    with pytest.raises(ValueError):
        A.AmortizationField(f.anchor, f.t1, f.t2, f.f, f.lambda1, f.lambda2, f.phi1 + 1.0, f.phi2, f.mask, f.construction_tag, f.coords)


def test_cross_difference_shrinks_with_refinement():
    d = [A.build_extension_2d(D.build_grid(D.IidUniform(0.0, 1.0), (n, n))).diagnostics["cross_phi2_sup"] for n in (32, 64, 128)]
    assert d[1] <= 0.6 * d[0] and d[2] <= 0.6 * d[1]


def test_vsm_uniform_pass_and_fail(uni64):
    f = A.build_extension_2d(uni64)
    r = A.verify_vsm_uniform(f, uni64)
    assert r.verdict == C.PASS
    assert r.details["threshold"] == pytest.approx(3 ** -0.5, abs=0.03)
    g56 = D.build_grid(D.IidUniform(5.0, 6.0), (64, 64))
    r56 = A.verify_vsm_uniform(A.build_extension_2d(g56), g56)
    assert r56.verdict == C.FAIL and r56.witness is not None


def test_sum_pipeline_on_simplex():
    sg = D.to_sum_ratio(D.TruncatedUniformSimplex(0.0, 1.0), (64, 64))
    ext, can = A.build_sum_extension(sg), A.build_sum_canonical(sg)
    assert A.verify_shift_condition(can).verdict == C.PASS
    vb = A.verify_vsm_bundle(ext)
    assert vb.verdict == C.PASS
    assert vb.details["bundle_price"] == pytest.approx(3 ** -0.5, abs=0.02)
    assert A.verify_divergence(can, sg).verdict == C.PASS


def test_shift_condition_fails_for_spreading_ratio():
    s = np.linspace(0.0, 1.0, 11)
    fam = D.SumRatioUniform(D.Uniform1D(0.0, 1.0), D.Curve(s, 0.8 * s))
    can = A.build_sum_canonical(D.to_sum_ratio(fam, (48, 48)))
    r = A.verify_shift_condition(can)
    assert r.verdict == C.FAIL and r.witness is not None


def test_ironing_regular_is_identity():
    g = D.build_grid(D.PerfectlyCorrelated(D.Uniform1D(0.0, 1.0), SQUARE), (64, 32))
    irn = A.build_ironed_quantile(g)
    assert np.allclose(irn.phi1_bar, irn.phi1)
    assert irn.breakpoints == []
    assert A.verify_ironed_dominance(irn).verdict == C.PASS


@pytest.mark.parametrize("n", [64, 128])
def test_ironing_bimodal_pools_upper_quantiles(n):
    g = D.build_grid(D.PerfectlyCorrelated(BIMODAL, SQUARE), (n, 32))
    irn = A.build_ironed_quantile(g)
    assert irn.breakpoints, "expected a pooled interval"
    assert irn.diagnostics["integral_phi1"] == pytest.approx(irn.diagnostics["integral_phi1_bar"], abs=1e-12)
    assert np.all(np.asarray(irn.diagnostics["H_hull"]) >= np.asarray(irn.diagnostics["H_integral"]) - 1e-12)
    r = A.verify_ironed_dominance(irn)
    assert r.verdict == C.PASS, r.details
    assert np.all(irn.correction <= 1e-15)


def test_ironing_nonconvex_curve_fails_with_witness():
    x = np.linspace(0.0, 1.0, 201)
    kinked = D.Curve(x, np.where(x < 0.5, 0.9 * x, 0.45 + 0.1 * (x - 0.5)))
    g = D.build_grid(D.PerfectlyCorrelated(BIMODAL, kinked), (128, 32))
    r = A.verify_ironed_dominance(A.build_ironed_quantile(g))
    assert r.verdict == C.FAIL and r.witness is not None


def test_dump_field(tmp_path, uni64):
    f = A.build_extension_2d(uni64)
    csv_path, js = A.dump_field(f, tmp_path / "field.csv")
    head = csv_path.read_text().splitlines()[0]
    assert head == "t1,t2,lambda1,lambda2,phi1,phi2"
    meta = json.loads(js.read_text())
    assert meta["construction_tag"] == A.FORMULA


def test_virtual_surplus_upper_bounds_uniform_price_revenue(uni64):
    f = A.build_extension_2d(uni64)
    p = 3 ** -0.5
    buy = uni64.t1 >= p
    x1 = np.where(buy, 1.0, 0.0)
    vs = A.virtual_surplus(f, uni64, x1, np.zeros_like(x1))
    assert vs == pytest.approx(p * (1 - p**2), abs=5e-3)


# ---------------------------------------------------------------------------
# pool adjacent violators


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(-5, 5), min_size=1, max_size=40), st.data())
def test_pava_properties(y, data):
    y = np.array(y)
    w = np.array(data.draw(st.lists(st.floats(0.01, 3.0), min_size=len(y), max_size=len(y))))
    fit, blocks = A.pava_nonincreasing(y, w)
    assert np.all(np.diff(fit) <= 1e-12)
    assert np.sum(w * fit) == pytest.approx(np.sum(w * y), abs=1e-9)
    # cumulative sums of the fit majorize those of the data
    assert np.all(np.cumsum(w * fit) >= np.cumsum(w * y) - 1e-9)
    assert blocks[0][0] == 0 and blocks[-1][1] == len(y)
    again, _ = A.pava_nonincreasing(fit, w)
    assert np.allclose(again, fit)


def test_pava_leaves_monotone_data_alone():
    y = np.array([3.0, 2.0, 2.0, -1.0])
    fit, blocks = A.pava_nonincreasing(y, np.ones(4))
    assert np.array_equal(fit, y)


# ---------------------------------------------------------------------------
# exact discrete amortization


def _random_instance(draw, setting):
    k = draw(st.integers(2, 7))
    T = np.array(draw(st.lists(st.tuples(st.integers(0, 6), st.integers(0, 6)), min_size=k, max_size=k, unique=True)), float) / 6
    w = np.array(draw(st.lists(st.integers(1, 5), min_size=k, max_size=k)), float)
    return O.DiscreteInstance(T, w / w.sum(), setting)


@settings(max_examples=25, deadline=None)
@given(st.data(), st.sampled_from([O.MULTI_OUTCOME, O.MULTI_PRODUCT]))
def test_discrete_amortization_bounds_revenue(data, setting):
    inst = _random_instance(data.draw, setting)
    anchor = "sum" if setting == O.MULTI_PRODUCT else "favorite"
    phi, _ = A.discrete_extension(inst.types, inst.probs, anchor)
    rng = np.random.default_rng(data.draw(st.integers(0, 2**16)))
    sols = [O.solve_optimal_mechanism(inst)] + O.random_ic_mechanisms(inst, 3, rng)
    for sol in sols:
        vs = A.discrete_virtual_surplus(phi, inst.probs, sol.x)
        assert vs >= float(inst.probs @ sol.p) - 1e-9
