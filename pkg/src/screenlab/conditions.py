"""Sufficient and necessary conditions for optimality of simple mechanisms.

Every check returns a :class:`CheckResult` with a verdict in
``{"pass", "fail", "inconclusive"}``, a signed worst-case slack (``margin``,
positive means satisfied) and, on failure, a witness: the pair of grid points
where the violated inequality was observed.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .dist import (
    TINY,
    MaxRatioGrid,
    MaxRatioGrid3,
    RatioGrid,
    SumRatioGrid,
    Marginal1D,
    column_quantile,
    cumtrapz,
    equi_quantile,
    favorite_marginal,
    sum_marginal,
    to_sum_ratio,
    trapz,
)

PASS, FAIL, INCONCLUSIVE = "pass", "fail", "inconclusive"
DEFAULT_TOL = 1e-9


def _clean(x):
    if isinstance(x, (bool, np.bool_)):
        return bool(x)
    if isinstance(x, (float, np.floating)):
        x = float(x)
        return x if np.isfinite(x) else None
    if isinstance(x, (int, np.integer)):
        return int(x)
    if isinstance(x, (list, tuple, np.ndarray)):
        return [_clean(y) for y in x]
    if isinstance(x, dict):
        return {str(k): _clean(v) for k, v in x.items()}
    return x


@dataclass
class CheckResult:
    name: str
    verdict: str
    margin: float
    witness: list | None = None
    violation: float | None = None
    details: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.verdict not in (PASS, FAIL, INCONCLUSIVE):
            raise ValueError(f"bad verdict {self.verdict!r}")
        if self.verdict == FAIL and self.witness is None:
            raise ValueError("a failed check must carry a witness")
        if self.verdict == PASS and self.witness is not None:
            raise ValueError("a passed check cannot carry a witness")

    @property
    def passed(self) -> bool:
        return self.verdict == PASS

    def to_dict(self) -> dict:
        d = {"verdict": self.verdict, "margin": self.margin, "witness": self.witness}
        if self.violation is not None:
            d["violation"] = self.violation
        if self.details:
            d["details"] = self.details
        return _clean(d)


@dataclass
class CertificationReport:
    mode: str
    checks: list
    required: tuple
    overall_verdict: str
    notes: list = field(default_factory=list)

    def check(self, name: str) -> CheckResult:
        for c in self.checks:
            if c.name == name:
                return c
        raise KeyError(name)

    def to_dict(self) -> dict:
        out = {c.name: c.to_dict() for c in self.checks}
        out["overall"] = {
            "verdict": self.overall_verdict,
            "margin": min((c.margin for c in self.checks if c.name in self.required), default=0.0),
            "witness": None,
            "details": {"mode": self.mode, "required": list(self.required), "notes": list(self.notes)},
        }
        return _clean(out)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)


# ---------------------------------------------------------------------------
# one-dimensional regularity


def check_regular_favorite(marg: Marginal1D, tol: float | None = None, name: str = "regular_favorite") -> CheckResult:
    """Monotonicity of ``phi(v) = v - (1-F(v))/f(v)`` on the marginal's nodes."""
    v = marg.v
    scale = max(float(np.max(np.abs(v))), 1.0)
    tol = DEFAULT_TOL * scale if tol is None else tol
    phi = marg.phi()
    ok = np.isfinite(phi)
    idx = np.flatnonzero(ok)
    interior_zero = [int(k) for k in np.flatnonzero(~ok) if 0 < k < len(v) - 1 and idx.size and idx[0] < k < idx[-1]]
    if idx.size < 2:
        return CheckResult(name, INCONCLUSIVE, 0.0, details={"reason": "fewer than two nodes with positive density"})
    d = np.diff(phi[idx])
    k = int(np.argmin(d))
    margin = float(d[k])
    details = {"zero_density_nodes": interior_zero[:20]}
    if margin < -tol:
        a, b = idx[k], idx[k + 1]
        return CheckResult(name, FAIL, margin, [[float(v[a])], [float(v[b])]], float(-margin), details)
    if interior_zero:
        return CheckResult(name, INCONCLUSIVE, margin, details=details)
    return CheckResult(name, PASS, margin, details=details)


# ---------------------------------------------------------------------------
# conditional ratio distributions


def _conditional_monotone(grid: RatioGrid, direction: str, tol: float, name: str) -> CheckResult:
    """Compare conditional ratio CDFs of adjacent columns at every grid ratio.

    ``direction="non_increasing"``: F(theta|a) must not increase with the
    anchor; ``"non_decreasing"``: must not decrease.
    """
    cols = np.flatnonzero(grid.valid_columns)
    sign = 1.0 if direction == "non_increasing" else -1.0
    worst, wit = -np.inf, None
    for i, k in zip(cols[:-1], cols[1:]):
        th = np.union1d(grid.theta[i], grid.theta[k])
        Fi = grid.column_cdf_at(i, th)
        Fk = grid.column_cdf_at(k, th)
        d = sign * (Fk - Fi)  # positive means violation
        j = int(np.argmax(d))
        if d[j] > worst:
            worst = float(d[j])
            wit = [[float(grid.anchor[i]), float(th[j])], [float(grid.anchor[k]), float(th[j])]]
    if wit is None:
        return CheckResult(name, INCONCLUSIVE, 0.0, details={"reason": "fewer than two columns with mass"})
    if worst > tol:
        return CheckResult(name, FAIL, -worst, wit, worst, {"branch": 0})
    return CheckResult(name, PASS, -worst)


def check_fosd_ratio(grid: MaxRatioGrid, tol: float = DEFAULT_TOL) -> CheckResult:
    """F(theta | v) non-increasing in the favorite value for every theta."""
    return _conditional_monotone(grid, "non_increasing", tol, "fosd_ratio")


def check_fosd_sum(grid: SumRatioGrid, tol: float = DEFAULT_TOL) -> CheckResult:
    """F(theta | s) non-decreasing in the bundle value for every theta."""
    return _conditional_monotone(grid, "non_decreasing", tol, "fosd_sum")


def check_sequential_fosd(grid, tol: float = DEFAULT_TOL, levels: Sequence[float] | None = None) -> CheckResult:
    """Sequential first-order dominance for up to three outcomes.

    For two outcomes this is :func:`check_fosd_ratio`.  For three outcomes the
    marginal ratio CDF of outcome 2 must be non-increasing in ``v`` and, at
    every quantile level of outcome 2's ratio, so must the conditional ratio
    CDF of outcome 3.
    """
    if isinstance(grid, MaxRatioGrid):
        r = check_fosd_ratio(grid, tol)
        return CheckResult("sequential_fosd", r.verdict, r.margin, r.witness, r.violation, r.details)
    m = getattr(grid, "m", None)
    if m is None or m > 3:
        raise ValueError("sequential FOSD is supported for at most three outcomes")
    assert isinstance(grid, MaxRatioGrid3)
    th = grid.theta
    levels = np.linspace(0.05, 0.95, 19) if levels is None else np.asarray(levels, dtype=float)
    cols = np.flatnonzero(grid.valid_columns)
    # stage 1: theta2 given v
    g2 = grid.theta2_density[cols]
    F2 = cumtrapz(g2, th)
    F2 = F2 / F2[:, -1:]
    d = F2[1:] - F2[:-1]
    worst, wit = float(np.max(d)), None
    i, j = np.unravel_index(int(np.argmax(d)), d.shape)
    if worst > tol:
        wit = [[float(grid.v[cols[i]]), float(th[j]), None], [float(grid.v[cols[i + 1]]), float(th[j]), None]]
    # stage 2: theta3 given v and the quantile of theta2
    F3 = cumtrapz(grid.density[cols], th)  # (n, n2, n3)
    tot = F3[:, :, -1:]
    with np.errstate(divide="ignore", invalid="ignore"):
        F3 = np.where(tot > TINY, F3 / np.where(tot > TINY, tot, 1.0), np.nan)
    stage2 = []
    for q in levels:
        rows = []
        for r, c in enumerate(cols):
            x = column_quantile(F2[r], th, q)[0]
            k = int(np.clip(np.searchsorted(th, x) - 1, 0, len(th) - 2))
            w = (x - th[k]) / (th[k + 1] - th[k])
            a, b = F3[r, k], F3[r, k + 1]
            if np.any(np.isnan(a)):
                a = b
            if np.any(np.isnan(b)):
                b = a
            rows.append((1 - w) * a + w * b)
        rows = np.array(rows)
        stage2.append(rows)
        dd = rows[1:] - rows[:-1]
        if np.all(np.isnan(dd)):
            continue
        val = float(np.nanmax(dd))
        if val > worst:
            worst = val
            ii, jj = np.unravel_index(int(np.nanargmax(dd)), dd.shape)
            wit = [[float(grid.v[cols[ii]]), float(q), float(th[jj])], [float(grid.v[cols[ii + 1]]), float(q), float(th[jj])]]
    if worst > tol:
        return CheckResult("sequential_fosd", FAIL, -worst, wit, worst, {"m": 3})
    return CheckResult("sequential_fosd", PASS, -worst, details={"m": 3})


# ---------------------------------------------------------------------------
# curves


def check_ratio_monotone_curve(
    anchor,
    second,
    direction: str = "non_decreasing",
    as_ratio: bool = True,
    tol: float = DEFAULT_TOL,
) -> CheckResult:
    """Monotonicity of ``second/anchor`` (or of ``second`` itself).

    Unit demand needs the ratio ``C(t1)/t1`` non-decreasing; the additive
    analogue needs the split ratio ``theta(s)`` non-increasing.
    """
    a = np.asarray(anchor, dtype=float)
    y = np.asarray(second, dtype=float)
    if len(a) < 3:
        raise ValueError("need at least three curve samples")
    if direction not in ("non_decreasing", "non_increasing"):
        raise ValueError("direction must be non_decreasing or non_increasing")
    keep = a > TINY if as_ratio else np.ones_like(a, dtype=bool)
    a, y = a[keep], y[keep]
    r = y / a if as_ratio else y
    d = np.diff(r)
    if direction == "non_increasing":
        d = -d
    k = int(np.argmin(d))
    margin = float(d[k])
    name = f"ratio_monotone_{direction}"
    if margin < -tol:
        wit = [[float(a[k]), float(y[k])], [float(a[k + 1]), float(y[k + 1])]]
        return CheckResult(name, FAIL, margin, wit, -margin)
    return CheckResult(name, PASS, margin)


def _second_differences(a: np.ndarray, y: np.ndarray):
    s = np.diff(y) / np.diff(a)
    return np.diff(s)


def check_convex_equiquantile(grid: MaxRatioGrid, levels: Sequence[float] | None = None, tol: float = DEFAULT_TOL) -> CheckResult:
    """Convexity of equi-quantile curves (slope increments non-negative)."""
    name = "convex_equiquantile"
    if grid.metadata.get("perfectly_correlated"):
        c = grid.metadata["curve"]
        curves = [(None, np.asarray(c["x"]), np.asarray(c["y"]))]
    else:
        levels = np.round(np.arange(1, 10) / 10.0, 10) if levels is None else levels
        curves = []
        for q in levels:
            eq = equi_quantile(grid, float(q))
            curves.append((float(q), eq.anchor, eq.second))
    worst, wit, wq = np.inf, None, None
    for q, a, y in curves:
        if len(a) < 3:
            continue
        dd = _second_differences(a, y)
        k = int(np.argmin(dd))
        if dd[k] < worst:
            worst = float(dd[k])
            wit = [[float(a[k]), float(y[k])], [float(a[k + 2]), float(y[k + 2])]]
            wq = q
    if wit is None:
        return CheckResult(name, INCONCLUSIVE, 0.0, details={"reason": "curves too short"})
    if worst < -tol:
        return CheckResult(name, FAIL, worst, wit, -worst, {"q": wq})
    return CheckResult(name, PASS, worst)


# ---------------------------------------------------------------------------
# log-supermodularity of the max-ratio density


def _common_theta_density(grid: RatioGrid):
    th = grid.theta
    if np.allclose(th, th[0][None, :], atol=1e-14, rtol=0):
        inside = np.ones(th.shape, dtype=bool)
        return th[0], grid.density.copy(), inside
    n_t = th.shape[1]
    common = np.linspace(float(th[:, 0].min()), float(th[:, -1].max()), n_t)
    dens = np.zeros((th.shape[0], n_t))
    inside = np.zeros_like(dens, dtype=bool)
    for i in range(th.shape[0]):
        lo, hi = th[i, 0], th[i, -1]
        m = (common >= lo - 1e-12) & (common <= hi + 1e-12)
        inside[i] = m
        if hi > lo:
            dens[i, m] = np.interp(common[m], th[i], grid.density[i])
        else:
            dens[i, m] = grid.density[i, 0]
    return common, dens, inside


def check_mr_log_supermodular(grid: MaxRatioGrid, tol: float = DEFAULT_TOL) -> CheckResult:
    """``f(v,th) f(v',th') >= f(v,th') f(v',th)`` on adjacent 2x2 cells."""
    name = "mr_log_supermodular"
    th, f, inside = _common_theta_density(grid)
    v = grid.anchor
    a, b = f[:-1, :-1], f[1:, 1:]    # (v, th), (v', th')
    c, d = f[:-1, 1:], f[1:, :-1]    # (v, th'), (v', th)
    lhs, rhs = a * b, c * d
    norm = np.maximum(np.maximum(lhs, rhs), TINY)
    rel = (lhs - rhs) / norm
    active = np.maximum(lhs, rhs) > TINY
    zero_inside = np.zeros_like(active)
    for arr, ins in ((a, inside[:-1, :-1]), (b, inside[1:, 1:]), (c, inside[:-1, 1:]), (d, inside[1:, :-1])):
        zero_inside |= (arr <= TINY) & ins
    rel = np.where(active, rel, 0.0)
    i, j = np.unravel_index(int(np.argmin(rel)), rel.shape)
    margin = float(rel[i, j])
    wit = [[float(v[i]), float(th[j])], [float(v[i + 1]), float(th[j + 1])]]
    if margin < -tol:
        if zero_inside[i, j]:
            return CheckResult(name, INCONCLUSIVE, margin, details={"reason": "zero density inside the support", "cell": wit})
        return CheckResult(name, FAIL, margin, wit, -margin)
    return CheckResult(name, PASS, margin)


def mr_log_supermodular_pairwise(grid: MaxRatioGrid) -> float:
    """Worst relative slack of the supermodularity inequality over all rectangles."""
    _, f, _ = _common_theta_density(grid)
    n_v, n_t = f.shape
    worst = np.inf
    for i in range(n_v - 1):
        for k in range(i + 1, n_v):
            fi, fk = f[i], f[k]
            lhs = fi[:, None] * fk[None, :]   # f(v, th_j) f(v', th_l)
            rhs = fi[None, :] * fk[:, None]   # f(v, th_l) f(v', th_j)
            rel = (lhs - rhs) / np.maximum(np.maximum(lhs, rhs), TINY)
            upper = np.triu(np.ones((n_t, n_t), dtype=bool), 1)
            worst = min(worst, float(rel[upper].min()))
    return worst


# ---------------------------------------------------------------------------
# necessary condition for uniform pricing


def _diagonal_density(grid: MaxRatioGrid) -> np.ndarray:
    on_diag = grid.theta[:, -1] >= 1.0 - 1e-12
    return np.where(on_diag, grid.f_cart[:, -1], 0.0)


def _fo_roots(marg: Marginal1D) -> list:
    """Roots of ``v - (1-F)/f`` located by sign changes and refined by bisection."""
    phi = marg.phi()
    v = marg.v
    ok = np.flatnonzero(np.isfinite(phi))
    roots = []

    def g(x):
        f = marg.pdf(x)
        return x - (1.0 - marg.cdf(x)) / f if f > TINY else -np.inf

    for a, b in zip(ok[:-1], ok[1:]):
        pa, pb = phi[a], phi[b]
        if pa == 0.0:
            roots.append(float(v[a]))
        elif pa < 0 < pb or pa > 0 > pb:
            lo, hi = float(v[a]), float(v[b])
            glo = g(lo)
            for _ in range(80):
                mid = 0.5 * (lo + hi)
                gm = g(mid)
                if (gm < 0) == (glo < 0):
                    lo, glo = mid, gm
                else:
                    hi = mid
            roots.append(0.5 * (lo + hi))
    if len(ok) and phi[ok[-1]] == 0.0:
        roots.append(float(v[ok[-1]]))
    return sorted(set(roots))


def check_necessary_uniform(grid: MaxRatioGrid, marg: Marginal1D | None = None) -> CheckResult:
    """Lottery test: uniform pricing is provably suboptimal when, at every
    stationary price ``p``, ``p - 2 * int_p^vbar f(t,t) dt / f(p,p) > 0``.

    Verdict ``fail`` means "uniform pricing provably suboptimal"; otherwise
    the test is ``inconclusive`` (it is only a necessary condition).
    """
    name = "necessary_uniform"
    marg = marg or favorite_marginal(grid)
    diag = _diagonal_density(grid)
    v = grid.anchor
    roots = _fo_roots(marg)
    if not roots:
        return CheckResult(name, INCONCLUSIVE, 0.0, details={"reason": "no stationary price found"})
    tests = []
    for p in roots:
        fp = float(np.interp(p, v, diag))
        if fp <= TINY:
            return CheckResult(name, INCONCLUSIVE, 0.0, details={"reason": "zero diagonal density at a stationary price", "price": p})
        mask = v > p
        xs = np.concatenate([[p], v[mask]])
        ys = np.concatenate([[fp], diag[mask]])
        integral = float(trapz(ys, xs))
        tests.append((p, p - 2.0 * integral / fp))
    tmin = min(t for _, t in tests)
    details = {
        "stationary_prices": [p for p, _ in tests],
        "test_values": [t for _, t in tests],
        "support_scale": float(v[-1]),
    }
    if tmin > 0:
        p = min(tests, key=lambda x: x[1])[0]
        wit = [[p, p], [float(v[-1]), float(v[-1])]]
        return CheckResult(name, FAIL, -tmin, wit, tmin, details)
    return CheckResult(name, INCONCLUSIVE, -tmin, details=details)


# ---------------------------------------------------------------------------
# certification


def certify(grid, mode: str = "unit_demand", tol: float = DEFAULT_TOL) -> CertificationReport:
    """Run the checks required by ``mode`` and assemble a report.

    ``unit_demand``: regular favorite marginal + FOSD of the ratio.
    ``additive``: regular bundle marginal + FOSD of the ratio given the bundle value.
    ``unit_demand_ironed``: convex equi-quantile curves only.
    The necessary-condition test is added for the unit-demand modes.
    """
    notes = []
    if mode == "unit_demand":
        if not isinstance(grid, MaxRatioGrid):
            raise ValueError("unit_demand mode needs a max-ratio grid")
        checks = [check_regular_favorite(favorite_marginal(grid)), check_fosd_ratio(grid, tol), check_necessary_uniform(grid)]
        required = ("regular_favorite", "fosd_ratio")
    elif mode == "unit_demand_ironed":
        if not isinstance(grid, MaxRatioGrid):
            raise ValueError("unit_demand_ironed mode needs a max-ratio grid")
        checks = [check_convex_equiquantile(grid, tol=tol), check_necessary_uniform(grid)]
        required = ("convex_equiquantile",)
    elif mode == "additive":
        sgrid = grid if isinstance(grid, SumRatioGrid) else to_sum_ratio(grid)
        checks = [check_regular_favorite(sum_marginal(sgrid), name="regular_sum"), check_fosd_sum(sgrid, tol)]
        required = ("regular_sum", "fosd_sum")
    else:
        raise ValueError(f"unknown mode {mode!r}")
    if any(c.name == "necessary_uniform" for c in checks):
        notes.append("necessary test evaluated on the native support (no rescaling to [0,1])")
    req = [c for c in checks if c.name in required]
    if any(c.verdict == FAIL for c in checks):
        overall = FAIL
    elif all(c.verdict == PASS for c in req):
        overall = PASS
    else:
        overall = INCONCLUSIVE
    return CertificationReport(mode, checks, required, overall, notes)
