import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from screenlab import dist as D
from screenlab import pricing as P

SQRT3 = 3**-0.5


def test_uniform_price_unit_square():
    out = P.optimal_uniform_price(P.favorite_problem(D.IidUniform(0.0, 1.0)))
    assert out["price"] == pytest.approx(SQRT3, abs=1e-4)
    assert out["revenue"] == pytest.approx(2 / (3 * 3**0.5), abs=1e-6)


def test_uniform_price_shifted_square():
    out = P.optimal_uniform_price(D.IidUniform(5.0, 6.0))
    assert out["price"] == pytest.approx(5.0972, abs=1e-3)
    assert out["revenue"] == pytest.approx(5.0490, abs=1e-3)


def test_bundle_prices():
    sx = P.optimal_bundle_price(D.TruncatedUniformSimplex(0.0, 1.0))
    assert sx["revenue"] == pytest.approx(2 / (3 * 3**0.5), abs=1e-5)
    sq = P.optimal_bundle_price(D.IidUniform(0.0, 1.0))
    assert sq["price"] == pytest.approx((2 / 3) ** 0.5, abs=1e-3)
    assert sq["revenue"] == pytest.approx(0.5443, abs=1e-3)


def test_one_d_monopoly_with_cost():
    prob = P.OneDProblem.from_dist(D.Uniform1D(0.0, 1.0), cost=0.2)
    m = P.myerson_1d(prob)
    assert m["threshold"] == pytest.approx(0.6, abs=1e-6)
    assert m["revenue"] == pytest.approx(0.16, abs=1e-6)


def test_point_mass_problem():
    assert P.myerson_1d(P.OneDProblem.point_mass(2.0))["revenue"] == pytest.approx(2.0)


def test_menu_validation():
    with pytest.raises(ValueError):
        P.MenuMechanism(np.array([[0.7, 0.7]]), np.array([1.0]))
    with pytest.raises(ValueError):
        P.MenuMechanism(np.array([[1.0, 0.0]]), np.array([1.0, 2.0]))
    P.MenuMechanism(np.array([[1.0, 1.0]]), np.array([1.0]), P.ADDITIVE)


def test_menu_json_round_trip(tmp_path):
    m = P.lottery_menu(5.1, 0.01)
    m.save(tmp_path / "m.json")
    m2 = P.MenuMechanism.load(tmp_path / "m.json")
    assert np.array_equal(m.allocations, m2.allocations) and np.array_equal(m.prices, m2.prices)


def test_choose_breaks_ties_towards_highest_price():
    m = P.MenuMechanism(np.array([[1.0, 0.0], [0.5, 0.5]]), np.array([0.5, 0.25]))
    # type (0.5, 0.0): both options give zero utility, as does not buying
    assert m.choose(np.array([[0.5, 0.0]]))[0] == 0
    assert m.choose(np.array([[0.1, 0.1]]))[0] == -1


def test_polygon_grid_and_sample_agree():
    fam = D.IidUniform(0.0, 1.0)
    menu = P.lottery_menu(0.6, 0.05)
    exact = P.menu_revenue(menu, fam)
    grid = P.menu_revenue(menu, D.build_grid(fam, (257, 129)))
    rng = np.random.default_rng(1)
    mc = P.menu_revenue(menu, D.sample(fam, 200000, rng))
    assert grid == pytest.approx(exact, abs=5e-3)
    assert mc == pytest.approx(exact, abs=5e-3)


def test_uniform_menu_revenue_matches_one_d():
    p = SQRT3
    assert P.menu_revenue(P.MenuMechanism.uniform(p), D.IidUniform(0.0, 1.0)) == pytest.approx(p * (1 - p * p), abs=1e-12)


def test_half_half_lottery_beats_uniform_on_shifted_square():
    fam = D.IidUniform(5.0, 6.0)
    p = P.optimal_uniform_price(fam)["price"]
    base = P.menu_revenue(P.MenuMechanism.uniform(p), fam)
    gains = [P.menu_revenue(P.lottery_menu(p, e), fam) - base for e in (0.02, 0.01, 0.005)]
    assert all(g > 0 for g in gains)
    # gain grows like eps^2 at leading order
    assert gains[1] / gains[2] == pytest.approx(4.0, rel=0.1)


def test_counterexample_beats_uniform():
    x = np.linspace(0.0, 1.0, 401)
    curve = D.Curve(x, np.where(x < 0.4, 0.8 * x, 0.32 + 0.2 * (x - 0.4)))
    ce = P.construct_counterexample(curve, 0.45)
    assert ce.gain > 0
    assert ce.loglog_slope() == pytest.approx(1.0, abs=0.2)
    d = ce.to_dict()
    assert d["gain"] == pytest.approx(ce.gain) and len(d["menu"]) == 2


def test_counterexample_guard_rejects_ratio_monotone_curve():
    curve = D.Curve(np.array([0.0, 1.0]), np.array([0.0, 0.5]))
    with pytest.raises(ValueError):
        P.construct_counterexample(curve, 0.4)


def test_bundle_counterexample():
    s = np.linspace(0.0, 2.0, 401)
    cb = P.construct_bundle_counterexample(D.Curve(s, 0.2 + 0.25 * s), 0.6)
    assert cb.gain > 0
    assert cb.loglog_slope() == pytest.approx(1.0, abs=0.2)
    with pytest.raises(ValueError):
        P.construct_bundle_counterexample(D.Curve(s, 0.7 - 0.25 * s), 0.6)


def test_two_agent_monte_carlo_matches_closed_form():
    m = P.marginal_from_dist(D.Uniform1D(0.0, 1.0))
    out = P.monte_carlo_revenue([m, m], 100000, np.random.default_rng(0))
    assert out["revenue"] == pytest.approx(5 / 12, abs=4 * out["stderr"] + 1e-3)


def test_multi_agent_rejects_irregular():
    bimodal = P.marginal_from_dist(D.UniformMixture1D(((0.45, 0.0, 0.2), (0.45, 0.8, 1.0), (0.1, 0.0, 1.0))))
    with pytest.raises(ValueError):
        P.multi_agent_allocate([bimodal], np.array([[0.5]]))


@settings(max_examples=40, deadline=None)
@given(st.lists(st.tuples(st.floats(0, 1), st.floats(0, 1), st.floats(0, 2)), min_size=1, max_size=5),
       st.lists(st.tuples(st.floats(0, 3), st.floats(0, 3)), min_size=1, max_size=20))
def test_choose_is_utility_maximizing(opts, types):
    X = np.array([[a, b] for a, b, _ in opts])
    X = X / np.maximum(X.sum(1, keepdims=True), 1.0)
    menu = P.MenuMechanism(X, np.array([p for *_, p in opts]))
    T = np.array(types)
    ch = menu.choose(T)
    U = np.column_stack([np.zeros(len(T)), T @ X.T - menu.prices])
    got = U[np.arange(len(T)), ch + 1]
    assert np.all(got >= U.max(1) - 1e-9)


@settings(max_examples=20, deadline=None)
@given(st.floats(0.2, 5.0), st.floats(0.0, 3.0))
def test_uniform_price_scale_covariance(s, a):
    base = P.optimal_uniform_price(D.IidUniform(a, a + 1.0))
    scaled = P.optimal_uniform_price(D.IidUniform(s * a, s * (a + 1.0)))
    assert scaled["revenue"] == pytest.approx(s * base["revenue"], rel=1e-4)
    assert scaled["price"] == pytest.approx(s * base["price"], rel=1e-3)


def test_multi_agent_threshold_payments_are_truthful():
    dists = [D.Uniform1D(0.0, 1.0), D.Uniform1D(0.0, 2.0)]
    margs = [P.marginal_from_dist(d) for d in dists]
    rng = np.random.default_rng(5)
    V = np.column_stack([d.ppf(rng.uniform(size=200)) for d in dists])
    truth = P.multi_agent_allocate(margs, V)
    for agent in (0, 1):
        u_true = np.where(truth["winner"] == agent, V[:, agent] - truth["payment"], 0.0)
        assert np.all(u_true >= -1e-9)
        for lie in np.linspace(0.0, 2.0, 21):
            W = V.copy()
            W[:, agent] = lie
            out = P.multi_agent_allocate(margs, W)
            u_lie = np.where(out["winner"] == agent, V[:, agent] - out["payment"], 0.0)
            assert np.all(u_true >= u_lie - 1e-6)
