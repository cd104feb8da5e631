"""One-dimensional projections: posted prices, menus and counterexamples.

Menus are evaluated exactly where the type distribution allows it (uniform
densities on polygons, one-dimensional perfectly correlated paths) and by
grid quadrature otherwise.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .amort import pava_nonincreasing
from .dist import (
    TINY,
    Curve,
    IidUniform,
    Marginal1D,
    PerfectlyCorrelated,
    Power1D,
    RatioGrid,
    SumRatioGrid,
    SumRatioUniform,
    TruncatedUniformSimplex,
    Uniform1D,
    UniformAboveCurve,
    build_grid,
    favorite_marginal,
    sum_marginal,
    to_sum_ratio,
)

UNIT_DEMAND = "unit_demand"
ADDITIVE = "additive"


# ---------------------------------------------------------------------------
# single-dimensional problems


@dataclass(frozen=True, eq=False)
class OneDProblem:
    v: np.ndarray
    F: np.ndarray
    f: np.ndarray
    cost: float = 0.0

    def __post_init__(self):
        v, F, f = (np.asarray(a, dtype=float) for a in (self.v, self.F, self.f))
        if v.ndim != 1 or v.shape != F.shape or v.shape != f.shape:
            raise ValueError("v, F, f must be matching 1-D arrays")
        if np.any(np.diff(v) < 0) or np.any(np.diff(F) < -1e-12) or F[0] < -1e-12 or abs(F[-1] - 1) > 1e-8:
            raise ValueError("CDF must be monotone from 0 to 1 on an increasing grid")
        object.__setattr__(self, "v", v)
        object.__setattr__(self, "F", np.clip(F, 0.0, 1.0))
        object.__setattr__(self, "f", f)

    @classmethod
    def from_marginal(cls, marg: Marginal1D, cost: float = 0.0) -> "OneDProblem":
        return cls(marg.v, marg.F, marg.f, cost)

    @classmethod
    def from_dist(cls, d, n: int = 4097, cost: float = 0.0) -> "OneDProblem":
        """Tabulate an analytic 1-D distribution (anything with lo/hi/cdf/pdf)."""
        knots = [d.lo, d.hi]
        for c in getattr(d, "components", ()):
            knots += [c[1], c[2]]
        v = np.unique(np.concatenate([np.linspace(d.lo, d.hi, n), knots]))
        return cls(v, d.cdf(v), d.pdf(v), cost)

    @classmethod
    def point_mass(cls, v0: float, cost: float = 0.0) -> "OneDProblem":
        return cls(np.array([v0]), np.array([1.0]), np.array([np.inf]), cost)

    def phi(self) -> np.ndarray:
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.where(self.f > TINY, self.v - (1.0 - self.F) / np.maximum(self.f, TINY), -np.inf)

    def demand(self, p):
        return 1.0 - np.interp(p, self.v, self.F, left=0.0, right=1.0)


def _best_price(prob: OneDProblem) -> tuple[float, float]:
    """Maximize ``(p - c)(1 - F(p))`` exactly for piecewise-linear ``F``."""
    v, F, c = prob.v, prob.F, prob.cost
    if len(v) == 1:
        return (float(v[0]), float(v[0] - c)) if v[0] > c else (float(v[0]), 0.0)
    cands = [v]
    dv = np.diff(v)
    dF = np.diff(F)
    ok = (dv > 0) & (dF > 0)
    s = np.where(ok, dF / np.where(dv > 0, dv, 1.0), 1.0)
    # on a segment: (p - c)(1 - F_k - s (p - v_k)); stationary point
    ps = 0.5 * ((1.0 - F[:-1] + s * v[:-1]) / s + c)
    inside = ok & (ps > v[:-1]) & (ps < v[1:])
    cands.append(ps[inside])
    p = np.concatenate(cands)
    rev = (p - c) * prob.demand(p)
    k = int(np.argmax(rev))
    if rev[k] <= 0:
        return float(max(c, v[-1])), 0.0
    return float(p[k]), float(rev[k])


def myerson_1d(prob: OneDProblem) -> dict:
    """Virtual values, their ironed version and the optimal posted price."""
    phi = prob.phi()
    finite = np.isfinite(phi)
    ironed = phi.copy()
    if finite.sum() >= 2:
        idx = np.flatnonzero(finite)
        q = 1.0 - prob.F[idx]
        order = np.argsort(q, kind="stable")
        qs = q[order]
        w = np.zeros_like(qs)
        d = np.diff(qs)
        w[:-1] += 0.5 * d
        w[1:] += 0.5 * d
        fit, _ = pava_nonincreasing(phi[idx][order], np.maximum(w, TINY))
        ironed[idx[order]] = fit
    price, revenue = _best_price(prob)
    above = np.flatnonzero(finite & (ironed >= prob.cost))
    phi_threshold = float(prob.v[above[0]]) if above.size else None
    return {
        "phi": phi,
        "phi_ironed": ironed,
        "threshold": price,
        "revenue": revenue,
        "phi_threshold": phi_threshold,
    }


def favorite_problem(spec, n: int = 4097, cost: float = 0.0, grid_resolution=(257, 64)) -> OneDProblem:
    """Favorite-value problem of a family (analytic where known)."""
    if isinstance(spec, IidUniform):
        return OneDProblem.from_dist(Power1D(2.0, spec.b, spec.a), n, cost)
    if isinstance(spec, (PerfectlyCorrelated, UniformAboveCurve)):
        return OneDProblem.from_dist(spec.fmax, n, cost)
    if isinstance(spec, RatioGrid):
        return OneDProblem.from_marginal(favorite_marginal(spec), cost)
    return OneDProblem.from_marginal(favorite_marginal(build_grid(spec, grid_resolution)), cost)


class _TriangularSum:
    """Sum of two independent U[a, b] values."""

    def __init__(self, a, b):
        self.a, self.b = a, b
        self.lo, self.hi = 2 * a, 2 * b

    def cdf(self, s):
        z = np.clip((np.asarray(s, dtype=float) - 2 * self.a) / (self.b - self.a), 0.0, 2.0)
        return np.where(z <= 1, 0.5 * z**2, 1 - 0.5 * (2 - z) ** 2)

    def pdf(self, s):
        z = (np.asarray(s, dtype=float) - 2 * self.a) / (self.b - self.a)
        return np.where((z >= 0) & (z <= 2), np.where(z <= 1, z, 2 - z), 0.0) / (self.b - self.a)


def sum_problem(spec, n: int = 4097, cost: float = 0.0, grid_resolution=(257, 64)) -> OneDProblem:
    """Bundle-value problem of a family (analytic where known)."""
    if isinstance(spec, TruncatedUniformSimplex):
        return OneDProblem.from_dist(Power1D(2.0, spec.a + spec.b, 2 * spec.a), n, cost)
    if isinstance(spec, IidUniform):
        return OneDProblem.from_dist(_TriangularSum(spec.a, spec.b), n, cost)
    if isinstance(spec, SumRatioUniform):
        return OneDProblem.from_dist(spec.fsum, n, cost)
    if isinstance(spec, SumRatioGrid):
        return OneDProblem.from_marginal(sum_marginal(spec), cost)
    return OneDProblem.from_marginal(sum_marginal(to_sum_ratio(spec, grid_resolution)), cost)


def optimal_uniform_price(marg, cost: float = 0.0) -> dict:
    """Best price posted on every outcome, from the favorite-value marginal.

    ``marg`` may be a :class:`Marginal1D`, a :class:`OneDProblem` or a family.
    """
    prob = _as_problem(marg, cost, favorite_problem)
    out = myerson_1d(prob)
    return {"price": out["threshold"], "revenue": out["revenue"]}


def optimal_bundle_price(fsum, cost: float = 0.0) -> dict:
    """Best grand-bundle price, from the bundle-value marginal."""
    prob = _as_problem(fsum, cost, sum_problem)
    out = myerson_1d(prob)
    return {"price": out["threshold"], "revenue": out["revenue"]}


def _as_problem(obj, cost, from_family) -> OneDProblem:
    if isinstance(obj, OneDProblem):
        return OneDProblem(obj.v, obj.F, obj.f, cost)
    if isinstance(obj, Marginal1D):
        return OneDProblem.from_marginal(obj, cost)
    if hasattr(obj, "cdf") and hasattr(obj, "lo") and not hasattr(obj, "v_range"):
        return OneDProblem.from_dist(obj, cost=cost)
    return from_family(obj, cost=cost)


# ---------------------------------------------------------------------------
# menus


@dataclass(frozen=True, eq=False)
class MenuMechanism:
    allocations: np.ndarray  # (K, m)
    prices: np.ndarray       # (K,)
    setting: str = UNIT_DEMAND

    def __post_init__(self):
        X = np.atleast_2d(np.asarray(self.allocations, dtype=float))
        p = np.atleast_1d(np.asarray(self.prices, dtype=float))
        if len(X) != len(p):
            raise ValueError("one price per option")
        if not np.all(np.isfinite(p)):
            raise ValueError("prices must be finite")
        if np.any(X < -1e-12) or np.any(X > 1 + 1e-12):
            raise ValueError("allocation probabilities must lie in [0, 1]")
        if self.setting == UNIT_DEMAND and np.any(X.sum(axis=1) > 1 + 1e-12):
            raise ValueError("unit-demand allocations must lie in the simplex")
        if self.setting not in (UNIT_DEMAND, ADDITIVE):
            raise ValueError(f"unknown setting {self.setting!r}")
        object.__setattr__(self, "allocations", X)
        object.__setattr__(self, "prices", p)

    @classmethod
    def uniform(cls, price: float, m: int = 2) -> "MenuMechanism":
        return cls(np.eye(m), np.full(m, price), UNIT_DEMAND)

    def to_json(self) -> list:
        return [{"allocation": x.tolist(), "price": float(p)} for x, p in zip(self.allocations, self.prices)]

    @classmethod
    def from_json(cls, data: list, setting: str = UNIT_DEMAND) -> "MenuMechanism":
        return cls(np.array([o["allocation"] for o in data], dtype=float), np.array([o["price"] for o in data]), setting)

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_json(), indent=2))

    @classmethod
    def load(cls, path, setting: str = UNIT_DEMAND) -> "MenuMechanism":
        return cls.from_json(json.loads(Path(path).read_text()), setting)

    def option_cost(self, cost: float) -> np.ndarray:
        """Production cost of each option: ``c * sum(x)`` for unit demand,
        ``c * max(x)`` for additive (bundle sold at a single marginal cost)."""
        X = self.allocations
        return cost * (X.sum(axis=1) if self.setting == UNIT_DEMAND else X.max(axis=1))

    def choose(self, types: np.ndarray, tol: float = 1e-12) -> np.ndarray:
        """Index of the utility-maximizing option per type (-1 = no purchase).
        Ties go to the highest price."""
        T = np.atleast_2d(np.asarray(types, dtype=float))
        U = T @ self.allocations.T - self.prices
        U = np.column_stack([np.zeros(len(T)), U])
        P = np.concatenate([[0.0], self.prices])
        best = U.max(axis=1, keepdims=True)
        scale = tol * (1.0 + np.abs(best))
        score = np.where(U >= best - scale, P[None, :], -np.inf)
        return np.argmax(score, axis=1) - 1


def _profit(menu: MenuMechanism, choice: np.ndarray, cost: float) -> np.ndarray:
    gain = menu.prices - menu.option_cost(cost)
    return np.where(choice >= 0, gain[np.maximum(choice, 0)], 0.0)


# -- exact evaluation on polygons with uniform density


def _clip(poly: np.ndarray, a: np.ndarray, b: float) -> np.ndarray:
    """Keep the part of a convex polygon with ``a . x <= b``."""
    if len(poly) == 0:
        return poly
    out = []
    n = len(poly)
    for k in range(n):
        P, Q = poly[k], poly[(k + 1) % n]
        fp, fq = a @ P - b, a @ Q - b
        if fp <= 0:
            out.append(P)
        if (fp < 0 < fq) or (fq < 0 < fp):
            t = fp / (fp - fq)
            out.append(P + t * (Q - P))
    return np.array(out) if out else np.zeros((0, 2))


def _area(poly: np.ndarray) -> float:
    if len(poly) < 3:
        return 0.0
    x, y = poly[:, 0], poly[:, 1]
    return 0.5 * abs(float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1))))


def menu_revenue_polygon(menu: MenuMechanism, base: np.ndarray, cost: float = 0.0) -> float:
    """Exact revenue for types uniform on a convex polygon ``base``."""
    X = np.vstack([np.zeros((1, menu.allocations.shape[1])), menu.allocations])
    P = np.concatenate([[0.0], menu.prices])
    gain = np.concatenate([[0.0], menu.prices - menu.option_cost(cost)])
    total = _area(base)
    rev = 0.0
    for j in range(1, len(X)):
        poly = np.asarray(base, dtype=float)
        for k in range(len(X)):
            if k == j:
                continue
            a = X[k] - X[j]
            if np.max(np.abs(a)) < 1e-15:
                if P[j] > P[k] + 1e-15 or (abs(P[j] - P[k]) <= 1e-15 and k < j):
                    poly = np.zeros((0, 2))
                    break
                continue
            # option j preferred: x_j t - p_j >= x_k t - p_k
            poly = _clip(poly, a, P[k] - P[j])
        rev += gain[j] * _area(poly)
    return rev / total


def family_polygon(spec) -> np.ndarray:
    if isinstance(spec, IidUniform):
        a, b = spec.a, spec.b
        return np.array([[a, a], [b, a], [b, b], [a, b]], dtype=float)
    if isinstance(spec, TruncatedUniformSimplex):
        a, b = spec.a, spec.b
        return np.array([[a, a], [b, a], [a, b]], dtype=float)
    raise ValueError("no polygon form for this family")


# -- exact evaluation along a piecewise-linear path of types


@dataclass(frozen=True, eq=False)
class PathInstance:
    """Types ``(T1(r), T2(r))`` piecewise linear in ``r ~ dist``."""

    r: np.ndarray
    T1: np.ndarray
    T2: np.ndarray
    dist: object

    def types(self, r):
        return np.column_stack([np.interp(r, self.r, self.T1), np.interp(r, self.r, self.T2)])

    def to_dict(self):
        return {"kind": "path", "r": self.r.tolist(), "t1": self.T1.tolist(), "t2": self.T2.tolist(), "dist": self.dist.to_dict()}

    @classmethod
    def from_correlated(cls, spec: PerfectlyCorrelated) -> "PathInstance":
        lo, hi = spec.fmax.lo, spec.fmax.hi
        x = spec.curve.x
        r = np.unique(np.concatenate([[lo, hi], x[(x > lo) & (x < hi)]]))
        return cls(r, r.copy(), spec.curve(r), spec.fmax)


def menu_revenue_path(menu: MenuMechanism, inst: PathInstance, cost: float = 0.0) -> float:
    """Exact revenue: on each linear piece the choice changes only where two
    option utilities cross."""
    X = np.vstack([np.zeros((1, 2)), menu.allocations])
    P = np.concatenate([[0.0], menu.prices])
    lo, hi = inst.dist.lo, inst.dist.hi
    if inst.r[0] > lo + 1e-12 or inst.r[-1] < hi - 1e-12:
        raise ValueError("path does not cover the support of the distribution")
    r = inst.r[(inst.r > lo) & (inst.r < hi)]
    knots = np.concatenate([[lo], r, [hi]])
    rev = 0.0
    for a, b in zip(knots[:-1], knots[1:]):
        Ta, Tb = inst.types(np.array([a, b]))
        ua = X @ Ta - P
        ub = X @ Tb - P
        cuts = [a, b]
        K = len(X)
        for i in range(K):
            for j in range(i + 1, K):
                da, db = ua[i] - ua[j], ub[i] - ub[j]
                if (da < 0 < db) or (db < 0 < da):
                    cuts.append(a + (b - a) * da / (da - db))
        cuts = np.unique(cuts)
        mids = 0.5 * (cuts[:-1] + cuts[1:])
        ch = menu.choose(inst.types(mids))
        mass = inst.dist.cdf(cuts[1:]) - inst.dist.cdf(cuts[:-1])
        rev += float(np.sum(_profit(menu, ch, cost) * mass))
    return rev


# -- quadrature on a grid


def menu_revenue_grid(menu: MenuMechanism, grid: RatioGrid, cost: float = 0.0, branches: tuple | None = None) -> float:
    """Grid quadrature (trapezoid in anchor and second value) over both branches."""
    from .amort import node_weights

    w = node_weights(grid) * grid.f_cart
    bw = grid.branch_weights if branches is None else branches
    T = np.column_stack([grid.t1.ravel(), grid.t2.ravel()])
    rev = 0.0
    for b, wt in enumerate(bw):
        if wt == 0:
            continue
        types = T if b == 0 else T[:, ::-1]
        rev += wt * float(np.sum(w.ravel() * _profit(menu, menu.choose(types), cost)))
    return rev / float(np.sum(w))


def menu_revenue(menu: MenuMechanism, source, cost: float = 0.0, **kw) -> float:
    """Expected revenue of a menu; exact for uniform polygons and paths."""
    if isinstance(source, PathInstance):
        return menu_revenue_path(menu, source, cost)
    if isinstance(source, PerfectlyCorrelated):
        return menu_revenue_path(menu, PathInstance.from_correlated(source), cost)
    if isinstance(source, (IidUniform, TruncatedUniformSimplex)):
        return menu_revenue_polygon(menu, family_polygon(source), cost)
    if isinstance(source, RatioGrid):
        return menu_revenue_grid(menu, source, cost, kw.get("branches"))
    if isinstance(source, np.ndarray) and source.ndim == 2:
        probs = kw.get("probs")
        probs = np.full(len(source), 1.0 / len(source)) if probs is None else np.asarray(probs)
        return float(np.sum(probs * _profit(menu, menu.choose(source), cost)))
    raise ValueError(f"cannot evaluate a menu on {type(source).__name__}")


def lottery_menu(price: float, eps: float) -> MenuMechanism:
    """Uniform price plus a half-half lottery at a slightly lower price."""
    return MenuMechanism(np.array([[1.0, 0.0], [0.0, 1.0], [0.5, 0.5]]), np.array([price, price, price - eps]))


# ---------------------------------------------------------------------------
# counterexamples


def _ratio_slope(curve: Curve, p: float) -> float:
    """Central difference of ``C(t)/t`` at ``p``."""
    h = 1e-7 * max(1.0, p)
    return float((curve(p + h) / (p + h) - curve(p - h) / (p - h)) / (2 * h))


def _ladder(p: float, k_max: int = 30):
    return [p * 2.0**-k for k in range(1, k_max + 1)]


@dataclass(frozen=True, eq=False)
class Counterexample:
    family: object
    instance: PathInstance
    menu: MenuMechanism
    uniform_revenue: float
    menu_revenue: float
    epsilon: float
    ladder: list = field(default_factory=list)  # (eps, gain, leading-order reference)

    @property
    def gain(self) -> float:
        return self.menu_revenue - self.uniform_revenue

    def loglog_slope(self, n_small: int = 8) -> float:
        """Slope of log(gain) against log(eps) over the smallest ladder steps."""
        pts = [(e, g) for e, g, _ in self.ladder if g > 0]
        pts = sorted(pts)[:n_small]
        if len(pts) < 2:
            return float("nan")
        e, g = np.log(np.array(pts)).T
        return float(np.polyfit(e, g, 1)[0])

    def to_dict(self) -> dict:
        fam = self.family.to_dict() if hasattr(self.family, "to_dict") else self.family
        return {
            "family": fam,
            "branches": "first",
            "menu": self.menu.to_json(),
            "setting": self.menu.setting,
            "uniform_revenue": self.uniform_revenue,
            "menu_revenue": self.menu_revenue,
            "gain": self.gain,
            "epsilon": self.epsilon,
            "loglog_slope": self.loglog_slope(),
            "ladder": [{"epsilon": e, "gain": g, "leading_order": lo} for e, g, lo in self.ladder],
        }


def construct_counterexample(curve: Curve, p: float, k_max: int = 30) -> Counterexample:
    """Discounted second outcome beats uniform pricing on a correlated instance.

    The favorite value is ``U[0, 2p]`` (regular, monopoly price ``p``) and the
    second value is ``curve(t1)``; outcome 1 is the favorite for every type.
    The menu adds outcome 2 at ``curve(p) - eps`` to the price ``p``.
    """
    if not (p > 0):
        raise ValueError("p must be positive")
    if curve.x[0] > 1e-12 or curve.x[-1] < 2 * p - 1e-12:
        raise ValueError("curve must be sampled on [0, 2p]")
    if _ratio_slope(curve, p) >= -1e-12:
        raise ValueError("curve(t)/t must be strictly decreasing at p")
    fam = PerfectlyCorrelated(Uniform1D(0.0, 2 * p), curve)
    inst = PathInstance.from_correlated(fam)
    base = menu_revenue_path(MenuMechanism(np.array([[1.0, 0.0]]), np.array([p])), inst)
    cp = float(curve(p))
    fp = 1.0 / (2 * p)
    rows = []
    for eps in _ladder(cp, k_max):
        menu = MenuMechanism(np.array([[1.0, 0.0], [0.0, 1.0]]), np.array([p, cp - eps]))
        rows.append((eps, menu_revenue_path(menu, inst) - base, fp * eps * p))
    eps, gain, _ = max(rows, key=lambda r: r[1])
    if not gain > 0:
        raise RuntimeError("no improving discount found on the epsilon ladder")
    menu = MenuMechanism(np.array([[1.0, 0.0], [0.0, 1.0]]), np.array([p, cp - eps]))
    return Counterexample(fam, inst, menu, base, base + gain, eps, rows)


def construct_bundle_counterexample(theta: Curve, s0: float, k_max: int = 30) -> Counterexample:
    """Additive analogue: a ratio ``theta(s)`` that increases at ``s0``.

    Bundle value ``s ~ U[0, 2 s0]`` with split ``(s, s theta)/(1 + theta)``;
    the grand bundle at ``s0`` is improved by adding one item alone at a
    slight discount (both items are searched).
    """
    if theta.x[0] > 1e-12 or theta.x[-1] < 2 * s0 - 1e-12:
        raise ValueError("theta must be sampled on [0, 2 s0]")
    h = 1e-7 * max(1.0, s0)
    if max(theta(s0 + h) - theta(s0), theta(s0) - theta(s0 - h)) <= 1e-12 * h:
        raise ValueError("theta(s) must be strictly increasing at s0")
    d = Uniform1D(0.0, 2 * s0)
    # the type path is nonlinear in s even for piecewise-linear theta: sample densely
    r = np.unique(np.concatenate([np.linspace(0.0, 2 * s0, 1025), [s0], theta.x[(theta.x > 0) & (theta.x < 2 * s0)]]))
    th = theta(r)
    inst = PathInstance(r, r / (1 + th), r * th / (1 + th), d)
    bundle = MenuMechanism(np.array([[1.0, 1.0]]), np.array([s0]), ADDITIVE)
    base = menu_revenue_path(bundle, inst)
    t0 = inst.types(np.array([s0]))[0]
    fp = 1.0 / (2 * s0)
    best = None
    for item in (0, 1):
        rows = []
        x = np.zeros(2)
        x[item] = 1.0
        for eps in _ladder(float(t0[item]), k_max):
            menu = MenuMechanism(np.array([[1.0, 1.0], x]), np.array([s0, t0[item] - eps]), ADDITIVE)
            rows.append((eps, menu_revenue_path(menu, inst) - base, fp * eps * s0))
        top = max(rows, key=lambda r: r[1])
        if best is None or top[1] > best[0][1]:
            best = (top, rows, x)
    (eps, gain, _), rows, x = best
    if not gain > 0:
        raise RuntimeError("no improving item price found on the epsilon ladder")
    item = int(np.argmax(x))
    menu = MenuMechanism(np.array([[1.0, 1.0], x]), np.array([s0, t0[item] - eps]), ADDITIVE)
    return Counterexample(inst.to_dict(), inst, menu, base, base + gain, eps, rows)


# ---------------------------------------------------------------------------
# several agents


def _phi_table(marg: Marginal1D):
    phi = marg.phi()
    ok = np.isfinite(phi)
    v, ph = marg.v[ok], phi[ok]
    if np.any(np.diff(ph) < -1e-9 * max(1.0, float(np.max(np.abs(ph))))):
        raise ValueError("irregular marginal: use the ironed single-agent pipeline")
    return v, np.maximum.accumulate(ph)


def multi_agent_allocate(marginals: list, values: np.ndarray, cost: float = 0.0) -> dict:
    """Serve the agent with the highest favorite-value virtual value.

    ``values`` has shape ``(n_samples, n_agents)`` (favorite values).  The
    winner pays the smallest value at which they would still win.
    Ties go to the lowest index; nobody is served if every ``phi < c``.
    """
    V = np.atleast_2d(np.asarray(values, dtype=float))
    tabs = [_phi_table(m) for m in marginals]
    if V.shape[1] != len(tabs):
        raise ValueError("one column of values per agent")
    PHI = np.column_stack([np.interp(V[:, i], *tabs[i]) for i in range(len(tabs))])
    winner = np.argmax(PHI, axis=1)
    top = PHI[np.arange(len(V)), winner]
    served = top >= cost
    winner = np.where(served, winner, -1)
    pay = np.zeros(len(V))
    for n in np.flatnonzero(served):
        w = winner[n]
        others = np.delete(PHI[n], w)
        target = max(cost, float(others.max())) if others.size else cost
        v_tab, ph_tab = tabs[w]
        # smallest v with phi_w(v) >= target (strict beats for lower-index rivals)
        k = int(np.searchsorted(ph_tab, target, side="left"))
        if k == 0:
            pay[n] = v_tab[0]
        elif k >= len(ph_tab):
            pay[n] = V[n, w]
        else:
            x0, x1, y0, y1 = v_tab[k - 1], v_tab[k], ph_tab[k - 1], ph_tab[k]
            pay[n] = x1 if y1 == y0 else x0 + (target - y0) * (x1 - x0) / (y1 - y0)
        pay[n] = min(pay[n], V[n, w])
    return {"winner": winner, "payment": pay, "phi": PHI}


def monte_carlo_revenue(marginals: list, n: int, rng: np.random.Generator, cost: float = 0.0, dists=None) -> dict:
    """Monte-Carlo revenue of :func:`multi_agent_allocate`.

    Values are drawn by inverse-CDF sampling from each marginal (or from the
    analytic ``dists`` when given)."""
    U = rng.uniform(size=(n, len(marginals)))
    if dists is not None:
        V = np.column_stack([d.ppf(U[:, i]) for i, d in enumerate(dists)])
    else:
        V = np.column_stack([np.interp(U[:, i], m.F, m.v) for i, m in enumerate(marginals)])
    out = multi_agent_allocate(marginals, V, cost)
    profit = np.where(out["winner"] >= 0, out["payment"] - cost, 0.0)
    return {"revenue": float(profit.mean()), "stderr": float(profit.std(ddof=1) / np.sqrt(n)), "n": n}


def marginal_from_dist(d, n: int = 4097) -> Marginal1D:
    prob = OneDProblem.from_dist(d, n)
    return Marginal1D(prob.v, prob.F, prob.f)
