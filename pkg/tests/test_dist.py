import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from screenlab import dist as D


def test_iid_uniform_favorite_marginal_is_v_squared():
    g = D.build_grid(D.IidUniform(0.0, 1.0), (65, 33))
    m = D.favorite_marginal(g)
    assert np.allclose(m.F, g.anchor**2, atol=1e-3)
    assert abs(D.trapz(m.f, m.v) - 1.0) < 1e-8


def test_iid_uniform_conditional_ratio_is_uniform():
    g = D.build_grid(D.IidUniform(0.0, 1.0), (33, 33))
    i = 20
    assert np.allclose(g.cond_cdf[i], g.theta[i], atol=1e-12)


def test_grid_rejects_bad_inputs():
    with pytest.raises(ValueError):
        D.IidUniform(1.0, 0.5)
    with pytest.raises(ValueError):
        D.build_grid(D.IidUniform(0.0, 1.0), (4, 4))
    with pytest.raises(ValueError):
        D.parse_family({"kind": "nope"})


def test_curve_interpolates_and_serializes():
    c = D.Curve(np.array([0.0, 1.0, 2.0]), np.array([0.0, 0.5, 0.6]))
    assert c(0.5) == pytest.approx(0.25)
    assert c.slope(1.5) == pytest.approx(0.1)
    assert D._curve_from(c.to_dict())(1.5) == pytest.approx(0.55)


def test_parse_family_round_trip():
    for spec in (D.IidUniform(5.0, 6.0), D.TruncatedUniformSimplex(0.0, 1.0)):
        assert D.parse_family(spec.to_dict()) == spec


def test_perfectly_correlated_band_follows_curve():
    curve = D.Curve.from_function(lambda t: t**2, 0.0, 1.0, 101)
    g = D.build_grid(D.PerfectlyCorrelated(D.Uniform1D(0.0, 1.0), curve), (64, 32))
    i = 40
    mid = g.t2[i, len(g.theta[i]) // 2]
    assert abs(mid - g.anchor[i] ** 2) <= 1.0 / 31 + 1e-9


def test_equi_quantile_two_band_triangle():
    g = D.grid_from_cartesian(lambda a, b: np.where(b >= a / 2, 2.0, 1.0), (0.0, 1.0), (64, 64))
    c = D.equi_quantile(g, 0.5)
    assert np.allclose(c.second, 5 * c.anchor / 8, atol=2 / 63)
    assert np.allclose(c.slope[2:-2], 5 / 8, atol=1e-6)


def test_quantile_map_jacobian_and_inverse():
    g = D.build_grid(D.IidUniform(0.0, 1.0), (65, 65))
    qm = D.quantile_map(g)
    assert qm.jacobian_error < 0.05
    q1, q2 = qm.forward(40, 0.3)
    t1, t2 = qm.inverse(q1, q2)
    assert t1 == pytest.approx(g.anchor[40], abs=1e-9)
    assert t2 == pytest.approx(0.3, abs=1e-3)


def test_sum_ratio_grid_of_simplex_is_uniform_bundle_triangle():
    sg = D.to_sum_ratio(D.TruncatedUniformSimplex(0.0, 1.0), (65, 33))
    m = D.sum_marginal(sg)
    # bundle value of uniform draws on the triangle: F(s) = s^2
    assert np.allclose(m.F, sg.anchor**2, atol=2e-3)


def test_raw_grid_round_trip(tmp_path):
    g = D.build_grid(D.IidUniform(0.0, 1.0), (17, 9))
    p = tmp_path / "g.csv"
    D.write_raw_grid(g, p)
    g2 = D.read_raw_grid(p)
    assert np.allclose(g2.density, g.density)
    assert np.allclose(g2.theta, g.theta)


def test_cartesian_density_mirrors_branches():
    g = D.build_grid(D.IidUniform(0.0, 1.0), (33, 33))
    a = D.cartesian_density(g, np.array([0.7]), np.array([0.3]))
    b = D.cartesian_density(g, np.array([0.3]), np.array([0.7]))
    assert a[0] == pytest.approx(b[0])
    assert a[0] == pytest.approx(2.0, rel=1e-2)  # per-branch density on the half square


def test_sample_moments():
    rng = np.random.default_rng(0)
    t = D.sample(D.IidUniform(0.0, 1.0), 20000, rng)
    assert np.allclose(t.mean(0), 0.5, atol=0.01)
    s = D.sample(D.TruncatedUniformSimplex(0.0, 1.0), 5000, rng)
    assert np.all(s.sum(1) <= 1.0 + 1e-12)


@settings(max_examples=25, deadline=None)
@given(a=st.floats(0.0, 5.0), w=st.floats(0.2, 3.0))
def test_marginal_cdf_monotone_and_normalized(a, w):
    g = D.build_grid(D.IidUniform(a, a + w), (24, 12))
    F = g.marginal_cdf
    assert F[0] == pytest.approx(0.0, abs=1e-12) and F[-1] == pytest.approx(1.0)
    assert np.all(np.diff(F) >= -1e-12)
    cc = g.cond_cdf[g.valid_columns]
    assert np.all(np.diff(cc, axis=1) >= -1e-12)


@settings(max_examples=20, deadline=None)
@given(st.floats(0.05, 0.95))
def test_column_quantile_inverts_cdf(q):
    g = D.build_grid(D.IidUniform(0.0, 1.0), (16, 16))
    i = 10
    th = g.column_quantile(i, q)[0]
    assert g.column_cdf_at(i, th) == pytest.approx(q, abs=1e-9)
