"""Exact optimal mechanisms on finite type sets (linear programming oracle).

The LP has allocation and payment variables per type, every ordered-pair
incentive constraint, participation constraints and the feasibility set of the
setting.  It is solved with HiGHS (deterministic) or, for small problems and
cross-checks, with the dense two-phase simplex below (Bland's rule).
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp
from scipy.optimize import linprog

from .dist import (
    TINY,
    IidUniform,
    PerfectlyCorrelated,
    RatioGrid,
    TruncatedUniformSimplex,
    cartesian_density,
)
from .pricing import MenuMechanism, _area, _clip

MULTI_OUTCOME = "multi_outcome"
MULTI_PRODUCT = "multi_product"
K_MAX = 1000


class OracleError(RuntimeError):
    """The LP solver failed (iteration limit, numerical trouble, infeasibility)."""


@dataclass(frozen=True, eq=False)
class DiscreteInstance:
    types: np.ndarray  # (k, m)
    probs: np.ndarray  # (k,)
    setting: str = MULTI_OUTCOME
    cost: float = 0.0
    cost_form: str = "sum"
    h: float = 0.0
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        T = np.atleast_2d(np.asarray(self.types, dtype=float))
        p = np.asarray(self.probs, dtype=float).ravel()
        if len(T) < 1 or len(p) != len(T):
            raise ValueError("need k >= 1 types with one probability each")
        if np.any(p < 0) or abs(p.sum() - 1.0) > 1e-12:
            raise ValueError("probabilities must be non-negative and sum to one")
        if self.setting not in (MULTI_OUTCOME, MULTI_PRODUCT):
            raise ValueError(f"unknown setting {self.setting!r}")
        if self.cost_form not in ("sum", "max"):
            raise ValueError("cost_form must be 'sum' or 'max'")
        object.__setattr__(self, "types", T)
        object.__setattr__(self, "probs", p)

    @property
    def k(self) -> int:
        return len(self.types)

    @property
    def m(self) -> int:
        return self.types.shape[1]

    def scaled(self, s: float) -> "DiscreteInstance":
        return DiscreteInstance(self.types * s, self.probs, self.setting, self.cost * s, self.cost_form, self.h * s, dict(self.metadata))

    def to_json(self) -> dict:
        return {
            "types": self.types.tolist(),
            "probs": self.probs.tolist(),
            "setting": self.setting,
            "cost": self.cost,
            "cost_form": self.cost_form,
        }

    @classmethod
    def from_json(cls, d: dict) -> "DiscreteInstance":
        probs = np.asarray(d["probs"], dtype=float)
        return cls(np.asarray(d["types"], dtype=float), probs / probs.sum() if abs(probs.sum() - 1) < 1e-9 else probs,
                   d.get("setting", MULTI_OUTCOME), float(d.get("cost", 0.0)), d.get("cost_form", "sum"))

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_json(), sort_keys=True, indent=2))

    @classmethod
    def load(cls, path) -> "DiscreteInstance":
        return cls.from_json(json.loads(Path(path).read_text()))


@dataclass(frozen=True, eq=False)
class MechanismSolution:
    x: np.ndarray
    p: np.ndarray
    objective: float
    ic_residual: float
    ir_residual: float
    status: str = "optimal"
    duals: np.ndarray | None = None
    info: dict = field(default_factory=dict)

    def lottery_support(self, tol: float = 1e-6) -> bool:
        return bool(np.any((self.x > tol) & (self.x < 1 - tol)))

    def to_csv(self, path, types: np.ndarray):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t1", "t2", "x1", "x2", "p"])
            for t, x, p in zip(types, self.x, self.p):
                w.writerow([repr(float(v)) for v in (*t[:2], *x[:2], p)])


@dataclass(frozen=True, eq=False)
class LPProblem:
    """``min c.z`` subject to ``A_ub z <= b_ub``, ``A_eq z = b_eq`` and bounds."""

    c: np.ndarray
    A_ub: object
    b_ub: np.ndarray
    bounds: list
    A_eq: object = None
    b_eq: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        n = len(self.c)
        if self.A_ub is not None and (self.A_ub.shape[1] != n or self.A_ub.shape[0] != len(self.b_ub)):
            raise ValueError("inequality block has inconsistent dimensions")
        if self.A_eq is not None and (self.A_eq.shape[1] != n or self.A_eq.shape[0] != len(self.b_eq)):
            raise ValueError("equality block has inconsistent dimensions")
        if len(self.bounds) != n:
            raise ValueError("one bound pair per variable")


# ---------------------------------------------------------------------------
# discretization


def _density_sorted(spec, t1, t2):
    hi, lo = np.maximum(t1, t2), np.minimum(t1, t2)
    if isinstance(spec, RatioGrid):
        return cartesian_density(spec, hi, lo)
    dens = np.asarray(spec.density(hi, lo), dtype=float) * np.ones_like(hi)
    if hasattr(spec, "support"):
        dens = np.where(spec.support(hi, lo), dens, 0.0)
    return np.where(np.isfinite(dens), dens, 0.0)


def _bbox(spec):
    if isinstance(spec, RatioGrid):
        A = spec.anchor
        if hasattr(spec, "s_nodes"):
            return 0.0, float(A[-1])
        return float(min(A[0] * spec.theta[:, 0].min(), A[0])), float(A[-1])
    if isinstance(spec, (IidUniform, TruncatedUniformSimplex)):
        return spec.a, spec.b
    return 0.0, spec.v_range()[1]


def _support_polygon(spec):
    """Support as a counter-clockwise convex polygon for constant-density families."""
    if isinstance(spec, IidUniform):
        a, b = spec.a, spec.b
        return np.array([[a, a], [b, a], [b, b], [a, b]], dtype=float)
    if isinstance(spec, TruncatedUniformSimplex):
        a, b = spec.a, spec.b
        return np.array([[a, a], [b, a], [a, b]], dtype=float)
    return None


def _cells(spec, n, branches, sub: int = 8):
    """Types at the lower-left corners of an ``n x n`` cell partition of the
    bounding box, with the probability mass of each cell."""
    lo, hi = _bbox(spec)
    h = (hi - lo) / n
    corners = lo + h * np.arange(n)
    poly = _support_polygon(spec)
    mass = np.zeros((n, n))
    if poly is not None:
        if branches == "first":
            poly = _clip(poly, np.array([-1.0, 1.0]), 0.0)
        edges = [(poly[k], poly[(k + 1) % len(poly)]) for k in range(len(poly))]
        for i in range(n):
            for j in range(n):
                x0, y0 = corners[i], corners[j]
                piece = np.array([[x0, y0], [x0 + h, y0], [x0 + h, y0 + h], [x0, y0 + h]])
                for P, Q in edges:
                    nrm = np.array([Q[1] - P[1], P[0] - Q[0]])
                    piece = _clip(piece, nrm, float(nrm @ P))
                mass[i, j] = _area(piece)
    else:
        off = (np.arange(sub) + 0.5) * h / sub
        for i in range(n):
            X, Y = np.broadcast_arrays(corners[i] + off[:, None, None], corners[None, :, None] + off[None, None, :])
            d = _density_sorted(spec, X, Y)
            if branches == "first":
                d = np.where(X > Y, d, np.where(X == Y, 0.5 * d, 0.0))
            mass[i] = d.sum(axis=(0, 2)) * (h / sub) ** 2
    T1, T2 = np.meshgrid(corners, corners, indexing="ij")
    keep = mass > 1e-12 * float(mass.max())
    return np.column_stack([T1[keep], T2[keep]]), mass[keep], h


def discretize(source, k_target: int, branches: str | None = None, setting: str = MULTI_OUTCOME,
               cost: float = 0.0, cost_form: str = "sum") -> DiscreteInstance:
    """Partition the bounding box into ``n x n`` cells (smallest ``n`` with at
    least ``k_target`` cells of positive mass); each cell becomes one type at
    its lower-left corner carrying the cell's probability.

    ``branches="first"`` keeps only ``t1 >= t2`` (cells cut by the diagonal
    keep their lower half); ``"both"`` keeps the whole symmetric support.
    Perfectly correlated families are discretized along their curve.
    Rounding values down to the cell corner keeps the revenue of simple
    mechanisms from being inflated by the discretization.
    """
    if k_target < 16:
        raise ValueError("k_target must be at least 16")
    if k_target > K_MAX:
        raise ValueError(f"k_target above the desk-scale cap {K_MAX}")
    if isinstance(source, PerfectlyCorrelated):
        lo, hi = source.fmax.lo, source.fmax.hi
        edges = np.linspace(lo, hi, k_target + 1)
        v = edges[:-1]
        mass = np.diff(source.fmax.cdf(edges))
        keep = mass > 0
        types = np.column_stack([v, source.curve(v)])[keep]
        probs = mass[keep] / mass[keep].sum()
        if branches == "both":
            types = np.vstack([types, types[:, ::-1]])
            probs = np.concatenate([probs, probs]) / 2
        return DiscreteInstance(types, probs, setting, cost, cost_form, edges[1] - edges[0],
                                {"branches": branches or "first", "kind": "curve"})
    branches = branches or "both"
    if branches not in ("first", "both"):
        raise ValueError("branches must be 'first' or 'both'")
    n = max(2, int(np.sqrt(k_target)) - 1)
    while True:
        types, mass, h = _cells(source, n, branches)
        if len(types) >= k_target:
            break
        n += 1
        if n > 400:
            raise ValueError("cannot reach k_target on this support")
    return DiscreteInstance(types, mass / mass.sum(), setting, cost, cost_form, h, {"branches": branches, "n_axis": n})


# ---------------------------------------------------------------------------
# LP assembly and solution


def build_lp(inst: DiscreteInstance) -> LPProblem:
    """Variables ``[x (k*m), p (k), z (k, max-cost only)]``."""
    T, pi = inst.types, inst.probs
    k, m = T.shape
    use_z = inst.cost_form == "max" and inst.cost != 0
    nx, npv = k * m, k
    n = nx + npv + (k if use_z else 0)
    xi = lambda a, i: a * m + i
    pj = lambda a: nx + a
    c = np.zeros(n)
    c[nx:nx + k] = -pi
    if inst.cost != 0:
        if use_z:
            c[nx + npv:] = inst.cost * pi
        else:
            for a in range(k):
                c[a * m:(a + 1) * m] += inst.cost * pi[a]
    rows, cols, vals, rhs = [], [], [], []
    r = 0
    # IC: t_a.x_b - p_b - t_a.x_a + p_a <= 0 for all ordered pairs a != b
    A_idx = np.repeat(np.arange(k), k)
    B_idx = np.tile(np.arange(k), k)
    off = A_idx != B_idx
    A_idx, B_idx = A_idx[off], B_idx[off]
    n_ic = len(A_idx)
    ridx = np.arange(n_ic)
    for i in range(m):
        rows += [ridx, ridx]
        cols += [B_idx * m + i, A_idx * m + i]
        vals += [T[A_idx, i], -T[A_idx, i]]
    rows += [ridx, ridx]
    cols += [nx + B_idx, nx + A_idx]
    vals += [-np.ones(n_ic), np.ones(n_ic)]
    rhs.append(np.zeros(n_ic))
    r = n_ic
    # IR: p_a - t_a.x_a <= 0
    ra = r + np.arange(k)
    for i in range(m):
        rows.append(ra)
        cols.append(np.arange(k) * m + i)
        vals.append(-T[:, i])
    rows.append(ra)
    cols.append(nx + np.arange(k))
    vals.append(np.ones(k))
    rhs.append(np.zeros(k))
    r += k
    if inst.setting == MULTI_OUTCOME:
        rs = r + np.arange(k)
        for i in range(m):
            rows.append(rs)
            cols.append(np.arange(k) * m + i)
            vals.append(np.ones(k))
        rhs.append(np.ones(k))
        r += k
    if use_z:
        for i in range(m):
            rz = r + np.arange(k)
            rows += [rz, rz]
            cols += [np.arange(k) * m + i, nx + npv + np.arange(k)]
            vals += [np.ones(k), -np.ones(k)]
            rhs.append(np.zeros(k))
            r += k
    A = sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(r, n))
    b = np.concatenate(rhs)
    bounds = [(0.0, 1.0)] * nx + [(None, None)] * npv + [(0.0, 1.0)] * (k if use_z else 0)
    meta = {"k": k, "m": m, "n_ic": n_ic, "ic_pairs": (A_idx, B_idx), "use_z": use_z}
    return LPProblem(c, A, b, bounds, meta=meta)


def solve_lp(prob: LPProblem, method: str = "highs", max_iter: int = 200000) -> dict:
    """Solve an LP; returns ``{"x", "fun", "status", "duals", "gap"}``."""
    if method == "bland":
        A = prob.A_ub.toarray() if sp.issparse(prob.A_ub) else prob.A_ub
        Ae = prob.A_eq.toarray() if prob.A_eq is not None and sp.issparse(prob.A_eq) else prob.A_eq
        return simplex_bland(prob.c, A, prob.b_ub, prob.bounds, Ae, prob.b_eq, max_iter=max_iter)
    if method != "highs":
        raise ValueError("method must be 'highs' or 'bland'")
    res = linprog(prob.c, A_ub=prob.A_ub, b_ub=prob.b_ub, A_eq=prob.A_eq, b_eq=prob.b_eq, bounds=prob.bounds,
                  method="highs", options={"presolve": True, "primal_feasibility_tolerance": 1e-10,
                                           "dual_feasibility_tolerance": 1e-10, "maxiter": max_iter})
    status = {0: "optimal", 1: "iteration_limit", 2: "infeasible", 3: "unbounded"}.get(res.status, "numerical")
    out = {"x": res.x, "fun": res.fun, "status": status, "duals": None, "gap": None, "message": res.message}
    if res.status == 0:
        y = res.ineqlin.marginals
        lo = np.array([b[0] if b[0] is not None else 0.0 for b in prob.bounds])
        hi = np.array([b[1] if b[1] is not None else 0.0 for b in prob.bounds])
        dual = float(prob.b_ub @ y + lo @ res.lower.marginals + hi @ res.upper.marginals)
        if prob.A_eq is not None:
            dual += float(prob.b_eq @ res.eqlin.marginals)
        out["duals"] = y
        out["gap"] = abs(res.fun - dual) / max(1.0, abs(res.fun))
    return out


def simplex_bland(c, A_ub, b_ub, bounds, A_eq=None, b_eq=None, max_iter: int = 50000, tol: float = 1e-10) -> dict:
    """Dense two-phase tableau simplex with Bland's anti-cycling rule.

    Deterministic for identical input; intended for small problems.
    """
    c = np.asarray(c, dtype=float)
    n = len(c)
    A_ub = np.zeros((0, n)) if A_ub is None else np.asarray(A_ub, dtype=float)
    b_ub = np.zeros(0) if b_ub is None else np.asarray(b_ub, dtype=float)
    A_eq = np.zeros((0, n)) if A_eq is None else np.asarray(A_eq, dtype=float)
    b_eq = np.zeros(0) if b_eq is None else np.asarray(b_eq, dtype=float)
    # substitute x = offset + M y with y >= 0
    cols, offset = [], np.zeros(n)
    extra_rows = []  # (column in y, upper bound)
    M = []
    for j, (l, u) in enumerate(bounds):
        e = np.zeros(n)
        e[j] = 1.0
        if l is not None and np.isfinite(l):
            offset[j] = l
            M.append(e)
            if u is not None and np.isfinite(u):
                extra_rows.append((len(M) - 1, u - l))
        elif u is not None and np.isfinite(u):
            offset[j] = u
            M.append(-e)
        else:
            M.append(e)
            M.append(-e)
    M = np.array(M).T  # n x ny
    ny = M.shape[1]
    Aub = A_ub @ M
    bub = b_ub - A_ub @ offset
    if extra_rows:
        E = np.zeros((len(extra_rows), ny))
        for r, (col, ub) in enumerate(extra_rows):
            E[r, col] = 1.0
        Aub = np.vstack([Aub, E])
        bub = np.concatenate([bub, [ub for _, ub in extra_rows]])
    Aeq = A_eq @ M
    beq = b_eq - A_eq @ offset
    m_ub, m_eq = len(bub), len(beq)
    # standard form: [Aub I; Aeq 0] [y; s] = b
    A = np.zeros((m_ub + m_eq, ny + m_ub))
    A[:m_ub, :ny] = Aub
    A[:m_ub, ny:] = np.eye(m_ub)
    A[m_ub:, :ny] = Aeq
    b = np.concatenate([bub, beq])
    neg = b < 0
    A[neg] *= -1
    b[neg] *= -1
    mr, nv = A.shape
    cost = np.concatenate([c @ M, np.zeros(m_ub)])
    # phase 1 tableau with artificials
    T = np.zeros((mr + 1, nv + mr + 1))
    T[:mr, :nv] = A
    T[:mr, nv:nv + mr] = np.eye(mr)
    T[:mr, -1] = b
    basis = list(range(nv, nv + mr))
    T[-1, :nv] = -A.sum(axis=0)
    T[-1, -1] = -b.sum()
    iters = 0

    def run(T, basis, n_cols):
        nonlocal iters
        while True:
            if iters >= max_iter:
                return "iteration_limit"
            red = T[-1, :n_cols]
            cand = np.flatnonzero(red < -tol)
            if cand.size == 0:
                return "optimal"
            q = int(cand[0])
            col = T[:-1, q]
            pos = np.flatnonzero(col > tol)
            if pos.size == 0:
                return "unbounded"
            ratios = T[pos, -1] / col[pos]
            best = ratios.min()
            ties = pos[ratios <= best + tol * max(1.0, abs(best))]
            r = int(min(ties, key=lambda i: basis[i]))
            T[r] /= T[r, q]
            for i in range(len(T)):
                if i != r and T[i, q] != 0:
                    T[i] -= T[i, q] * T[r]
            basis[r] = q
            iters += 1

    st = run(T, basis, nv + mr)
    if st != "optimal":
        return {"x": None, "fun": None, "status": st, "duals": None, "gap": None, "iterations": iters}
    if -T[-1, -1] > 1e-8 * max(1.0, float(np.abs(b).max(initial=0.0))):
        return {"x": None, "fun": None, "status": "infeasible", "duals": None, "gap": None, "iterations": iters}
    # drive artificials out of the basis
    keep_rows = []
    for r in range(mr):
        if basis[r] >= nv:
            nz = np.flatnonzero(np.abs(T[r, :nv]) > tol)
            if nz.size == 0:
                continue  # redundant row
            q = int(nz[0])
            T[r] /= T[r, q]
            for i in range(len(T)):
                if i != r and T[i, q] != 0:
                    T[i] -= T[i, q] * T[r]
            basis[r] = q
        keep_rows.append(r)
    T2 = np.zeros((len(keep_rows) + 1, nv + 1))
    T2[:-1, :nv] = T[keep_rows, :nv]
    T2[:-1, -1] = T[keep_rows, -1]
    basis = [basis[r] for r in keep_rows]
    T2[-1, :nv] = cost
    for r, j in enumerate(basis):
        if T2[-1, j] != 0:
            T2[-1] -= T2[-1, j] * T2[r]
    st = run(T2, basis, nv)
    if st != "optimal":
        return {"x": None, "fun": None, "status": st, "duals": None, "gap": None, "iterations": iters}
    yv = np.zeros(nv)
    for r, j in enumerate(basis):
        yv[j] = T2[r, -1]
    x = offset + M @ yv[:ny]
    return {"x": x, "fun": float(c @ x), "status": "optimal", "duals": None, "gap": 0.0, "iterations": iters}


def _ic_ir(inst: DiscreteInstance, x: np.ndarray, p: np.ndarray) -> tuple[float, float, tuple]:
    U = inst.types @ x.T - p[None, :]  # U[a, b]: type a reporting b
    own = np.diag(U)
    V = U - own[:, None]
    np.fill_diagonal(V, -np.inf)
    a, b = np.unravel_index(int(np.argmax(V)), V.shape)
    ic = float(max(V[a, b], 0.0)) if inst.k > 1 else 0.0
    ir = float(max(-own.min(), 0.0))
    return ic, ir, (int(a), int(b))


def _profit(inst: DiscreteInstance, x: np.ndarray, p: np.ndarray) -> float:
    costs = inst.cost * (x.sum(axis=1) if inst.cost_form == "sum" else x.max(axis=1))
    return float(np.sum(inst.probs * (p - costs)))


def _solution(inst, x, p, status="optimal", duals=None, info=None) -> MechanismSolution:
    x = np.clip(x, 0.0, 1.0)
    ic, ir, _ = _ic_ir(inst, x, p)
    return MechanismSolution(x, p, _profit(inst, x, p), ic, ir, status, duals, dict(info or {}))


def solve_optimal_mechanism(inst: DiscreteInstance, method: str = "highs", perturb: np.ndarray | None = None) -> MechanismSolution:
    """Revenue-optimal mechanism over all IC and IR mechanisms on the type set.

    ``perturb`` (shape ``(k, m)``) adds a linear term in the allocation to the
    objective; its solutions are still feasible IC mechanisms.
    """
    if inst.k > K_MAX:
        raise ValueError(f"k={inst.k} exceeds the desk-scale cap {K_MAX}")
    lp = build_lp(inst)
    c = lp.c
    if perturb is not None:
        c = c.copy()
        c[: inst.k * inst.m] -= np.asarray(perturb, dtype=float).ravel()
        lp = LPProblem(c, lp.A_ub, lp.b_ub, lp.bounds, meta=lp.meta)
    res = solve_lp(lp, method)
    if res["status"] != "optimal":
        raise OracleError(f"LP failed: {res['status']} ({res.get('message', '')})")
    z = res["x"]
    k, m = inst.k, inst.m
    x = z[: k * m].reshape(k, m)
    p = z[k * m: k * m + k]
    sol = _solution(inst, x, p, "optimal", res["duals"], {"duality_gap": res["gap"], "method": method})
    if sol.ic_residual > 1e-8 * max(1.0, float(np.abs(inst.types).max())) or sol.ir_residual > 1e-8 * max(1.0, float(np.abs(inst.types).max())):
        raise OracleError(f"LP solution infeasible: IC {sol.ic_residual:.3g}, IR {sol.ir_residual:.3g}")
    return sol


def _threshold_search(inst, values, alloc) -> MechanismSolution:
    cands = np.unique(values)
    best = None
    for price in cands:
        buy = values >= price - 1e-12 * max(1.0, abs(price))
        x = np.where(buy[:, None], alloc, 0.0)
        p = np.where(buy, price, 0.0)
        val = _profit(inst, x, p)
        if best is None or val > best[0] + 1e-15:
            best = (val, x, p, price)
    val, x, p, price = best
    if val <= 0:
        x, p, price = np.zeros_like(x), np.zeros(inst.k), None
    return _solution(inst, x, p, "optimal", info={"price": price})


def solve_restricted(inst: DiscreteInstance, family: str, menu: MenuMechanism | None = None) -> MechanismSolution:
    """Best mechanism of a simple family on the same type set.

    ``uniform_price``: one price on every outcome (each buyer takes a
    favorite outcome); ``bundle_price``: one price for all items together;
    ``given_menu``: evaluate ``menu``.  Prices are enumerated at the type
    value breakpoints, which is exact for discrete types.
    """
    T = inst.types
    k, m = T.shape
    if family == "uniform_price":
        if inst.setting != MULTI_OUTCOME:
            raise ValueError("uniform pricing applies to the multi-outcome setting")
        fav = np.argmax(T, axis=1)
        alloc = np.zeros((k, m))
        alloc[np.arange(k), fav] = 1.0
        return _threshold_search(inst, T.max(axis=1), alloc)
    if family == "bundle_price":
        if inst.setting != MULTI_PRODUCT:
            raise ValueError("bundle pricing applies to the multi-product setting")
        return _threshold_search(inst, T.sum(axis=1), np.ones((k, m)))
    if family == "given_menu":
        if menu is None:
            raise ValueError("given_menu needs a menu")
        ch = menu.choose(T)
        x = np.where(ch[:, None] >= 0, menu.allocations[np.maximum(ch, 0)], 0.0)
        p = np.where(ch >= 0, menu.prices[np.maximum(ch, 0)], 0.0)
        return _solution(inst, x, p, "optimal", info={"menu": menu.to_json()})
    raise ValueError(f"unknown restricted family {family!r}")


def revenue_gap(inst: DiscreteInstance, simple: str | None = None, lottery_tol: float = 1e-6, method: str = "highs") -> dict:
    """LP optimum against the best simple mechanism on the same types."""
    simple = simple or ("uniform_price" if inst.setting == MULTI_OUTCOME else "bundle_price")
    opt = solve_optimal_mechanism(inst, method)
    best = solve_restricted(inst, simple)
    gap = opt.objective - best.objective
    scale = max(1.0, float(np.abs(inst.types).max()))
    if gap < -1e-8 * scale:
        raise OracleError(f"simple mechanism beats the LP optimum by {-gap:.3g}")
    return {
        "lp_opt": opt.objective,
        "best_simple": best.objective,
        "simple_family": simple,
        "simple_price": best.info.get("price"),
        "absolute_gap": gap,
        "relative_gap": gap / abs(best.objective) if best.objective else (0.0 if gap <= 1e-12 else float("inf")),
        "lottery_support": opt.lottery_support(lottery_tol),
        "k": inst.k,
        "solution": opt,
    }


def verify_ic(sol: MechanismSolution, inst: DiscreteInstance) -> dict:
    """Worst IC and IR violations; for multi-product instances also the
    monotonicity of ``x1 - x2`` in the ratio along constant-sum lines."""
    ic, ir, pair = _ic_ir(inst, sol.x, sol.p)
    out = {"ic_residual": ic, "ir_residual": ir, "worst_pair": list(pair)}
    if inst.setting == MULTI_PRODUCT:
        T = inst.types
        s = T.sum(axis=1)
        key = np.round(s / max(1.0, float(s.max())), 9)
        worst = 0.0
        where = None
        for g in np.unique(key):
            idx = np.flatnonzero(key == g)
            if len(idx) < 2:
                continue
            idx = idx[np.argsort(T[idx, 1] - T[idx, 0], kind="stable")]
            d = sol.x[idx, 0] - sol.x[idx, 1]
            inc = np.diff(d)
            if inc.size and inc.max() > worst:
                worst = float(inc.max())
                j = int(np.argmax(inc))
                where = [T[idx[j]].tolist(), T[idx[j + 1]].tolist()]
        out["sum_line_increase"] = worst
        out["sum_line_witness"] = where
    return out


def random_ic_mechanisms(inst: DiscreteInstance, n: int, rng: np.random.Generator, scale: float = 0.5) -> list:
    """Feasible IC mechanisms from LPs with randomly perturbed objectives."""
    sols = []
    vmax = float(np.abs(inst.types).max())
    for _ in range(n):
        pert = rng.normal(0.0, scale * vmax, size=(inst.k, inst.m)) * inst.probs[:, None]
        sols.append(solve_optimal_mechanism(inst, perturb=pert))
    return sols
