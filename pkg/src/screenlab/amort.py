"""Amortizations of revenue (virtual-value vector fields) and their checks.

A field stores, at every grid node ``t``, a flow vector ``lam`` and the
amortized values ``phi = t - lam / f``.  Constructions:

* ``extension2d_formula`` / ``extension2d_integrated`` -- flow along the curves
  of constant conditional quantile given the favorite value;
* ``sum_extension`` / ``sum_canonical`` -- the bundle-value analogues;
* ``ironed_quantile`` -- the quantile-space ironed field for irregular
  favorite-value marginals (see :class:`IronedField`).

All derivatives are second order (centred in the interior, three-point
one-sided at edges), so verification tolerances are stated as ``C * h``.
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .conditions import FAIL, PASS, CheckResult
from .dist import (
    TINY,
    MaxRatioGrid,
    RatioGrid,
    SumRatioGrid,
    column_quantile,
    equi_quantile,
    trapz,
)

FORMULA = "extension2d_formula"
INTEGRATED = "extension2d_integrated"
SUM_EXTENSION = "sum_extension"
SUM_CANONICAL = "sum_canonical"


@dataclass(frozen=True, eq=False)
class AmortizationField:
    anchor: np.ndarray
    t1: np.ndarray
    t2: np.ndarray
    f: np.ndarray
    lambda1: np.ndarray
    lambda2: np.ndarray
    phi1: np.ndarray
    phi2: np.ndarray
    mask: np.ndarray
    construction_tag: str
    coords: str  # "max_ratio" or "sum_ratio"
    slope: np.ndarray | None = None  # tangent slope dt2/d(anchor) of the quantile curve
    diagnostics: dict = field(default_factory=dict)

    def __post_init__(self):
        m = self.mask
        with np.errstate(invalid="ignore"):
            r1 = self.t1 - self.lambda1 / np.where(m, self.f, 1.0)
            r2 = self.t2 - self.lambda2 / np.where(m, self.f, 1.0)
        scale = max(1.0, float(np.max(np.abs(self.t1))))
        err = max(_masked_max(np.abs(r1 - self.phi1), m), _masked_max(np.abs(r2 - self.phi2), m))
        if err > 1e-6 * scale:
            raise ValueError(f"phi is inconsistent with lambda/f (error {err:.3g})")

    @property
    def h(self) -> float:
        return float(np.max(np.diff(self.anchor)))


def _masked_max(a, m) -> float:
    return float(np.max(a[m])) if np.any(m) else 0.0


# ---------------------------------------------------------------------------
# derivative operators


def _lagrange_weights(x0, x1, x2):
    w0 = (2 * x0 - x1 - x2) / ((x0 - x1) * (x0 - x2))
    w1 = (x0 - x2) / ((x1 - x0) * (x1 - x2))
    w2 = (x0 - x1) / ((x2 - x0) * (x2 - x1))
    return w0, w1, w2


def d_anchor_fixed_t2(anchor: np.ndarray, T2: np.ndarray, valid: np.ndarray, values: np.ndarray):
    """Derivative along the anchor at fixed ``t2``.

    Neighbouring columns are interpolated at the node's ``t2``; a neighbour is
    used only where its support covers that ``t2``.  Centred where possible,
    otherwise three-point one-sided, otherwise two-point.  Returns the
    derivative and a mask of nodes where no neighbour was available.
    """
    n_a, n_t = T2.shape
    out = np.zeros_like(values, dtype=float)
    orphan = np.zeros(values.shape, dtype=bool)
    span = float(np.max(T2) - np.min(T2)) or 1.0
    eps = 1e-10 * span

    def sample(c, y):
        if c < 0 or c >= n_a or not valid[c]:
            return None, np.zeros_like(y, dtype=bool)
        lo, hi = T2[c, 0], T2[c, -1]
        cov = (y >= lo - eps) & (y <= hi + eps)
        if hi - lo <= 0:
            vals = np.full_like(y, values[c, 0])
        else:
            vals = np.interp(y, T2[c], values[c])
            # linear extrapolation beyond the column ends (used only as a fallback)
            top, bot = y > hi, y < lo
            if top.any():
                sl = (values[c, -1] - values[c, -2]) / (T2[c, -1] - T2[c, -2])
                vals[top] = values[c, -1] + sl * (y[top] - hi)
            if bot.any():
                sl = (values[c, 1] - values[c, 0]) / (T2[c, 1] - T2[c, 0])
                vals[bot] = values[c, 0] + sl * (y[bot] - lo)
        return vals, cov

    for i in range(n_a):
        if not valid[i]:
            continue
        y = T2[i]
        f0 = values[i]
        a0 = anchor[i]
        s = {k: sample(i + k, y) for k in (-2, -1, 1, 2)}
        res = np.full(n_t, np.nan)
        # centred
        (fm, cm), (fp, cp) = s[-1], s[1]
        m = cm & cp
        if m.any():
            w0, w1, w2 = _lagrange_weights(a0, anchor[i - 1], anchor[i + 1])
            res[m] = w0 * f0[m] + w1 * fm[m] + w2 * fp[m]
        # forward three-point
        fp2, cp2 = s[2]
        m2 = np.isnan(res) & cp & cp2
        if m2.any():
            w0, w1, w2 = _lagrange_weights(a0, anchor[i + 1], anchor[i + 2])
            res[m2] = w0 * f0[m2] + w1 * fp[m2] + w2 * fp2[m2]
        fm2, cm2 = s[-2]
        m3 = np.isnan(res) & cm & cm2
        if m3.any():
            w0, w1, w2 = _lagrange_weights(a0, anchor[i - 1], anchor[i - 2])
            res[m3] = w0 * f0[m3] + w1 * fm[m3] + w2 * fm2[m3]
        m4 = np.isnan(res) & cp
        if m4.any():
            res[m4] = (fp[m4] - f0[m4]) / (anchor[i + 1] - a0)
        m5 = np.isnan(res) & cm
        if m5.any():
            res[m5] = (f0[m5] - fm[m5]) / (a0 - anchor[i - 1])
        orphan[i] = np.isnan(res)
        # no neighbour covers t2: extrapolate the nearest neighbouring column
        if fm is not None:
            m6 = np.isnan(res)
            res[m6] = (f0[m6] - fm[m6]) / (a0 - anchor[i - 1])
        elif fp is not None:
            m6 = np.isnan(res)
            res[m6] = (fp[m6] - f0[m6]) / (anchor[i + 1] - a0)
        out[i] = np.where(np.isnan(res), 0.0, res)
    return out, orphan


def _quantile_curve_slopes(grid: RatioGrid, valid: np.ndarray) -> np.ndarray:
    """Slope d t2 / d anchor of the constant-conditional-quantile curve through each node."""
    A, T2 = grid.anchor, grid.t2
    n_a, n_t = T2.shape
    cdf = grid.cond_cdf
    slope = np.zeros((n_a, n_t))
    sum_coords = isinstance(grid, SumRatioGrid)

    def second(c, q):
        th = column_quantile(cdf[c], grid.theta[c], q)
        return A[c] * th / (1 + th) if sum_coords else A[c] * th

    for i in np.flatnonzero(valid):
        q = cdf[i]
        y0 = T2[i]
        has = lambda k: 0 <= i + k < n_a and valid[i + k]
        if has(-1) and has(1):
            pts = (-1, 1)
        elif has(1) and has(2):
            pts = (1, 2)
        elif has(-1) and has(-2):
            pts = (-1, -2)
        elif has(1):
            slope[i] = (second(i + 1, q) - y0) / (A[i + 1] - A[i])
            continue
        elif has(-1):
            slope[i] = (y0 - second(i - 1, q)) / (A[i] - A[i - 1])
            continue
        else:
            continue
        w0, w1, w2 = _lagrange_weights(A[i], A[i + pts[0]], A[i + pts[1]])
        slope[i] = w0 * y0 + w1 * second(i + pts[0], q) + w2 * second(i + pts[1], q)
    return slope


def core_columns(grid: RatioGrid, kappa: float = 0.25) -> np.ndarray:
    """Columns whose marginal density is at least ``kappa`` times its maximum.

    and that lie at least a ``kappa`` fraction of the range away from the left
    end.  Near a vanishing marginal density ``(1-F)/f`` is singular, and near
    the left end the ratio Jacobian makes ``f`` blow up; finite differences
    lose their order there, so verification statistics are reported on this
    fixed, well-conditioned core.
    """
    fm = grid.marginal_density
    a = grid.anchor
    idx = np.flatnonzero(grid.valid_columns)
    lo, hi = a[idx[0]], a[idx[-1]]
    return (fm >= kappa * float(np.max(fm))) & (a >= lo + kappa * (hi - lo))


# ---------------------------------------------------------------------------
# two-dimensional extension of the favorite-value amortization


def _extension_common(grid: MaxRatioGrid):
    valid = grid.valid_columns.copy()
    F, fm = grid.marginal_cdf, grid.marginal_density
    ratio = np.where(valid, (1.0 - F) / np.where(valid, fm, 1.0), 0.0)  # (1-F)/f_max
    f = grid.f_cart
    mask = valid[:, None] & (f > TINY)
    lam1 = np.where(mask, f * ratio[:, None], 0.0)
    return valid, ratio, f, mask, lam1


def _formula_parts(grid: MaxRatioGrid):
    valid, ratio, f, mask, lam1 = _extension_common(grid)
    slope = _quantile_curve_slopes(grid, valid)
    lam2 = np.where(mask, lam1 * slope, 0.0)
    phi1 = np.where(mask, grid.t1 - ratio[:, None], grid.t1)
    phi2 = np.where(mask, grid.t2 - ratio[:, None] * slope, grid.t2)
    return valid, f, mask, lam1, lam2, phi1, phi2, slope


def _integrated_parts(grid: MaxRatioGrid):
    valid, ratio, f, mask, lam1 = _extension_common(grid)
    T2 = grid.t2
    D1, orphan = d_anchor_fixed_t2(grid.anchor, T2, valid, lam1)
    g = -np.where(mask, f, 0.0) - D1
    # bottom boundary t2 = b(t1): zero normal flow gives lam2 = lam1 * b'
    bottom = T2[:, 0]
    bprime = np.zeros_like(bottom)
    idx = np.flatnonzero(valid)
    if len(idx) >= 3:
        bprime[idx] = np.gradient(bottom[idx], grid.anchor[idx], edge_order=2)
    elif len(idx) == 2:
        bprime[idx] = np.gradient(bottom[idx], grid.anchor[idx])
    lam2 = np.zeros_like(lam1)
    for i in idx:
        y = T2[i]
        seg = 0.5 * (g[i, 1:] + g[i, :-1]) * np.diff(y)
        lam2[i] = lam1[i, 0] * bprime[i] + np.concatenate([[0.0], np.cumsum(seg)])
    lam2 = np.where(mask, lam2, 0.0)
    with np.errstate(divide="ignore", invalid="ignore"):
        phi1 = np.where(mask, grid.t1 - ratio[:, None], grid.t1)
        phi2 = np.where(mask, grid.t2 - lam2 / np.where(mask, f, 1.0), grid.t2)
    return valid, f, mask, lam1, lam2, phi1, phi2, orphan


def build_extension_2d(grid: MaxRatioGrid, method: str = "formula", kappa: float = 0.25) -> AmortizationField:
    """Two-dimensional extension of the favorite-value amortization.

    ``formula``: ``lam1 = f (1-F_max)/f_max`` and ``lam2 = lam1 * dC_q/dt1``.
    ``integrated``: same ``lam1``; ``lam2`` integrated upward in ``t2`` from
    the bottom boundary so that ``div lam = -f`` holds for the discrete
    operator used by :func:`verify_divergence`.
    """
    if not isinstance(grid, MaxRatioGrid):
        raise ValueError("the two-dimensional extension needs a max-ratio grid")
    if method not in ("formula", "integrated"):
        raise ValueError("method must be 'formula' or 'integrated'")
    fparts = _formula_parts(grid)
    iparts = _integrated_parts(grid)
    valid = fparts[0]
    interior = np.flatnonzero(~valid)
    interior = [int(i) for i in interior if 0 < i < len(valid) - 1 and valid[:i].any() and valid[i + 1:].any()]
    if interior:
        raise ValueError(f"favorite-value density vanishes at interior columns {interior[:5]}")
    core = core_columns(grid, kappa)[:, None] & fparts[2]
    diff_l2 = np.abs(fparts[4] - iparts[4])
    diff_p2 = np.abs(fparts[6] - iparts[6])
    diag = {
        "cross_lambda2_sup": _masked_max(diff_l2, core),
        "cross_phi2_sup": _masked_max(diff_p2, core),
        "cross_phi2_sup_all": _masked_max(diff_p2, fparts[2]),
        "core_kappa": kappa,
        "singular_left_boundary": bool(not valid[0]),
        "h": grid.h,
    }
    if method == "formula":
        _, f, mask, l1, l2, p1, p2, slope = fparts
        tag = FORMULA
    else:
        _, f, mask, l1, l2, p1, p2, orphan = iparts
        slope = fparts[7]
        tag = INTEGRATED
        diag["orphan_nodes"] = int(np.sum(orphan & mask))
    return AmortizationField(grid.anchor, grid.t1, grid.t2, f, l1, l2, p1, p2, mask, tag, "max_ratio", slope, diag)


# ---------------------------------------------------------------------------
# verification


def divergence_residual(field: AmortizationField, grid: RatioGrid) -> tuple[np.ndarray, np.ndarray]:
    """Staggered residual of ``div lam + f`` on the cells ``(i, j+1/2)``.

    Returns the residual array of shape ``(n_a, n_t-1)`` and the mask of cells
    with both end nodes on the support.
    """
    valid = grid.valid_columns
    A = field.lambda1 + field.lambda2 if field.coords == "sum_ratio" else field.lambda1
    DA, _ = d_anchor_fixed_t2(grid.anchor, grid.t2, valid, A)
    y = grid.t2
    dy = np.diff(y, axis=1)
    ok = field.mask[:, 1:] & field.mask[:, :-1] & (dy > 0)
    with np.errstate(divide="ignore", invalid="ignore"):
        d2 = np.diff(field.lambda2, axis=1) / np.where(dy > 0, dy, 1.0)
    r = d2 + 0.5 * (DA[:, 1:] + DA[:, :-1]) + 0.5 * (field.f[:, 1:] + field.f[:, :-1])
    return np.where(ok, r, 0.0), ok


def verify_divergence(field: AmortizationField, grid: RatioGrid, C: float = 10.0, kappa: float = 0.25) -> CheckResult:
    """Check ``div lam = -f`` with sup residual at most ``C * h * max f``."""
    r, ok = divergence_residual(field, grid)
    core = ok & core_columns(grid, kappa)[:, None]
    h = grid.h
    fscale = _masked_max(field.f, field.mask) or 1.0
    absr = np.abs(r)
    sup = _masked_max(absr, core)
    l2 = float(np.sqrt(np.mean(absr[core] ** 2))) if core.any() else 0.0
    bound = C * h * fscale
    details = {"sup": sup, "l2": l2, "h": h, "C_est": sup / (h * fscale), "C": C, "sup_all": _masked_max(absr, ok)}
    if sup > bound:
        i, j = np.unravel_index(int(np.argmax(np.where(core, absr, -1.0))), absr.shape)
        wit = [[float(field.t1[i, j]), float(field.t2[i, j])], [float(field.t1[i, j + 1]), float(field.t2[i, j + 1])]]
        return CheckResult("divergence", FAIL, bound - sup, wit, sup, details)
    return CheckResult("divergence", PASS, bound - sup, details=details)


def _boundary_normals(P: np.ndarray, inward: np.ndarray) -> np.ndarray:
    """Unit normals of a polyline ``P`` (k,2), oriented away from ``inward``."""
    if len(P) >= 3:
        tan = np.gradient(P, axis=0, edge_order=2)
    else:
        tan = np.gradient(P, axis=0)
    n = np.column_stack([tan[:, 1], -tan[:, 0]])
    n /= np.maximum(np.linalg.norm(n, axis=1, keepdims=True), TINY)
    flip = np.sum(n * inward, axis=1) > 0
    n[flip] *= -1
    return n


def verify_boundary(field: AmortizationField, grid: RatioGrid, C: float = 10.0, kappa: float = 0.25) -> CheckResult:
    """Zero normal flow on top, bottom and right boundaries; inflow on the left."""
    valid = grid.valid_columns & field.mask.any(axis=1)
    idx = np.flatnonzero(valid)
    core = core_columns(grid, kappa)
    lam = np.stack([field.lambda1, field.lambda2], axis=-1)
    scale = float(np.max(np.linalg.norm(lam[core][field.mask[core]], axis=-1))) if np.any(field.mask[core]) else 1.0
    scale = max(scale, TINY)
    h = grid.h
    tol = C * h * scale
    worst = {}
    wits = {}
    P_top = np.column_stack([field.t1[idx, -1], field.t2[idx, -1]])
    P_bot = np.column_stack([field.t1[idx, 0], field.t2[idx, 0]])
    for name, P, j, inward in (("top", P_top, -1, P_bot - P_top), ("bottom", P_bot, 0, P_top - P_bot)):
        n = _boundary_normals(P, inward)
        flux = np.sum(lam[idx, j] * n, axis=1)
        use = core[idx] & field.mask[idx, j]
        vals = np.where(use, np.abs(flux), 0.0)
        k = int(np.argmax(vals))
        worst[name] = float(vals[k])
        wits[name] = [[float(P[k, 0]), float(P[k, 1])], [float(P[k, 0]), float(P[k, 1])]]
    sum_coords = field.coords == "sum_ratio"
    out_dir = np.array([1.0, 1.0]) / np.sqrt(2) if sum_coords else np.array([1.0, 0.0])
    right = idx[-1]
    fr = lam[right][field.mask[right]] @ out_dir if field.mask[right].any() else np.zeros(1)
    worst["right"] = float(np.max(np.abs(fr)))
    wits["right"] = [[float(field.t1[right, 0]), float(field.t2[right, 0])], [float(field.t1[right, -1]), float(field.t2[right, -1])]]
    left = idx[0]
    fl = lam[left][field.mask[left]] @ (-out_dir) if field.mask[left].any() else np.zeros(1)
    worst["left_outflow"] = float(max(np.max(fl), 0.0))
    wits["left_outflow"] = [[float(field.t1[left, 0]), float(field.t2[left, 0])], [float(field.t1[left, -1]), float(field.t2[left, -1])]]
    details = {k: v for k, v in worst.items()}
    details.update(scale=scale, h=h, C=C, singleton_left_boundary=bool(not grid.valid_columns[0]))
    name, val = max(worst.items(), key=lambda kv: kv[1])
    if val > tol:
        return CheckResult("boundary", FAIL, tol - val, wits[name], val, dict(details, side=name))
    return CheckResult("boundary", PASS, tol - val, details=details)


def verify_tangency(field: AmortizationField, grid: RatioGrid, C: float = 10.0, kappa: float = 0.25) -> CheckResult:
    """Flow parallel to the equi-quantile tangent ``(1, slope)``."""
    slope = field.slope if field.slope is not None else _quantile_curve_slopes(grid, grid.valid_columns)
    if field.coords == "sum_ratio":
        # tangent in (t1, t2) of a curve parametrised by s: (1 - slope, slope)
        tx, ty = 1.0 - slope, slope
    else:
        tx, ty = np.ones_like(slope), slope
    norm_t = np.sqrt(tx**2 + ty**2)
    perp = np.abs(field.lambda1 * ty - field.lambda2 * tx) / norm_t
    mag = np.hypot(field.lambda1, field.lambda2)
    core = core_columns(grid, kappa)[:, None] & field.mask
    scale = _masked_max(mag, core) or 1.0
    use = core & (mag > 1e-9 * scale)
    dev = np.where(use, perp / scale, 0.0)
    ang = np.where(use, np.arcsin(np.clip(perp / np.maximum(mag, TINY), 0, 1)), 0.0)
    sup = float(dev.max()) if use.any() else 0.0
    h = grid.h
    details = {"max_weighted_deviation": sup, "max_angle": float(ang.max()) if use.any() else 0.0, "h": h, "C": C, "skipped_nodes": int(np.sum(core & ~use))}
    if sup > C * h:
        i, j = np.unravel_index(int(np.argmax(dev)), dev.shape)
        wit = [[float(field.t1[i, j]), float(field.t2[i, j])], [float(field.t1[i, j]), float(field.t2[i, j])]]
        return CheckResult("tangency", FAIL, C * h - sup, wit, sup, details)
    return CheckResult("tangency", PASS, C * h - sup, details=details)


def verify_vsm_uniform(field: AmortizationField, grid: MaxRatioGrid, cost: float = 0.0, tol: float = 1e-9) -> CheckResult:
    """Pointwise optimality of uniform pricing for the virtual surplus.

    (i) ``t2 lam1 <= t1 lam2``; (ii) ``phi1 >= phi2`` where ``phi1 >= c``;
    (iii) ``phi2 <= c`` where ``phi1 <= c``; (iv) ``{phi1 >= c}`` is an
    up-set in ``t1``.  Reports the implied uniform price.
    """
    m = field.mask
    t1, t2 = field.t1, field.t2
    l1, l2, p1, p2 = field.lambda1, field.lambda2, field.phi1, field.phi2
    scale = np.abs(t2 * l1) + np.abs(t1 * l2) + TINY
    tscale = max(1.0, float(np.max(t1)))
    parts = {}
    g1 = np.where(m, (t1 * l2 - t2 * l1) / scale, np.inf)
    parts["angle"] = g1
    serve = m & (p1 >= cost)
    parts["favorite_dominates"] = np.where(serve, (p1 - p2) / tscale, np.inf)
    parts["second_below_cost"] = np.where(m & (p1 <= cost), (cost - p2) / tscale, np.inf)
    # (iv): indicator of phi1 >= c must be non-decreasing along t1
    colphi = np.array([p1[i][m[i]].min() if m[i].any() else np.nan for i in range(len(field.anchor))])
    ind = np.where(np.isnan(colphi), np.nan, (colphi >= cost).astype(float))
    okc = ~np.isnan(ind)
    upset = np.diff(ind[okc])
    worst_upset = float(upset.min()) if upset.size else 0.0
    results = {}
    witness = None
    failed = None
    for name, arr in parts.items():
        k = np.unravel_index(int(np.argmin(arr)), arr.shape)
        v = float(arr[k]) if np.isfinite(arr[k]) else 0.0
        results[name] = v
        if v < -tol and failed is None:
            failed = name
            witness = [[float(t1[k]), float(t2[k])], [float(t1[k]), float(t2[k])]]
    results["upset"] = worst_upset
    if worst_upset < 0 and failed is None:
        failed = "upset"
        a = field.anchor[okc]
        k = int(np.argmin(upset))
        witness = [[float(a[k]), 0.0], [float(a[k + 1]), 0.0]]
    # implied uniform price: first t1 where phi1 crosses the cost
    price = None
    a = field.anchor[okc]
    cp = colphi[okc]
    above = np.flatnonzero(cp >= cost)
    if above.size:
        k = int(above[0])
        if k == 0:
            price = float(a[0])
        else:
            x0, x1, y0, y1 = a[k - 1], a[k], cp[k - 1], cp[k]
            price = float(x0 + (cost - y0) * (x1 - x0) / (y1 - y0)) if np.isfinite(y0) else float(x1)
    details = {"components": results, "threshold": price, "cost": cost}
    margin = min(results.values())
    if failed:
        details["failed"] = failed
        return CheckResult("vsm_uniform", FAIL, margin, witness, -margin, details)
    return CheckResult("vsm_uniform", PASS, margin, details=details)


# ---------------------------------------------------------------------------
# additive (bundle) constructions


def _sum_common(grid: SumRatioGrid):
    if not isinstance(grid, SumRatioGrid):
        raise ValueError("sum constructions need a sum-ratio grid")
    valid = grid.valid_columns & (grid.anchor > TINY)
    F, fs = grid.marginal_cdf, grid.marginal_density
    ratio = np.where(valid, (1.0 - F) / np.where(valid, fs, 1.0), 0.0)
    f = grid.f_cart
    mask = valid[:, None] & (f > TINY)
    phisum = np.where(valid, grid.anchor - ratio, np.nan)
    return valid, ratio, f, mask, phisum


def build_sum_extension(grid: SumRatioGrid) -> AmortizationField:
    """``phi_i = (t_i / s) * phi_sum(s)`` with ``lam_i = (t_i - phi_i) f``."""
    valid, ratio, f, mask, phisum = _sum_common(grid)
    s = grid.anchor[:, None]
    with np.errstate(invalid="ignore", divide="ignore"):
        p1 = np.where(mask, grid.t1 / s * phisum[:, None], grid.t1)
        p2 = np.where(mask, grid.t2 / s * phisum[:, None], grid.t2)
    l1 = np.where(mask, (grid.t1 - p1) * f, 0.0)
    l2 = np.where(mask, (grid.t2 - p2) * f, 0.0)
    ident = _masked_max(np.abs(p1 + p2 - phisum[:, None]), mask)
    if ident > 1e-9 * max(1.0, float(grid.anchor[-1])):
        raise AssertionError("phi1 + phi2 must equal phi_sum")
    diag = {"phi_sum": phisum.tolist(), "h": grid.h}
    return AmortizationField(grid.anchor, grid.t1, grid.t2, f, l1, l2, p1, p2, mask, SUM_EXTENSION, "sum_ratio", None, diag)


def build_sum_canonical(grid: SumRatioGrid) -> AmortizationField:
    """Flow tangent to the constant-quantile curves given the bundle value.

    ``lam = f (1-F_sum)/f_sum * tau`` where ``tau = dt/ds`` along the curve
    (so ``tau1 + tau2 = 1``).
    """
    valid, ratio, f, mask, phisum = _sum_common(grid)
    slope = _quantile_curve_slopes(grid, valid)  # d t2 / d s
    tau2 = slope
    tau1 = 1.0 - slope
    m = f * ratio[:, None]
    l1 = np.where(mask, m * tau1, 0.0)
    l2 = np.where(mask, m * tau2, 0.0)
    p1 = np.where(mask, grid.t1 - ratio[:, None] * tau1, grid.t1)
    p2 = np.where(mask, grid.t2 - ratio[:, None] * tau2, grid.t2)
    flagged = int(np.sum(mask & ~np.isfinite(slope)))
    diag = {"degenerate_tangent_nodes": flagged, "h": grid.h}
    return AmortizationField(grid.anchor, grid.t1, grid.t2, f, l1, l2, p1, p2, mask, SUM_CANONICAL, "sum_ratio", slope, diag)


def verify_shift_condition(field: AmortizationField, tol: float = 1e-9) -> CheckResult:
    """``t2 lam1 >= t1 lam2`` at every node (bundle pipeline)."""
    m = field.mask
    scale = np.abs(field.t2 * field.lambda1) + np.abs(field.t1 * field.lambda2) + TINY
    g = np.where(m, (field.t2 * field.lambda1 - field.t1 * field.lambda2) / scale, np.inf)
    k = np.unravel_index(int(np.argmin(g)), g.shape)
    margin = float(g[k]) if np.isfinite(g[k]) else 0.0
    if margin < -tol:
        wit = [[float(field.t1[k]), float(field.t2[k])], [float(field.t1[k]), float(field.t2[k])]]
        return CheckResult("shift_condition", FAIL, margin, wit, -margin)
    return CheckResult("shift_condition", PASS, margin)


def verify_vsm_bundle(field: AmortizationField, cost: float = 0.0, tol: float = 1e-9) -> CheckResult:
    """Same-sign components, sum depending on ``s`` only and non-decreasing in ``s``."""
    m = field.mask
    p1, p2 = field.phi1, field.phi2
    tot = p1 + p2
    scale = max(1.0, float(np.max(field.anchor)))
    same_sign = np.where(m, np.minimum(p1 * p2, 0.0), 0.0)
    sign_viol = float(-same_sign.min())
    rows = [i for i in range(len(field.anchor)) if m[i].any()]
    spread = max((float(np.ptp(tot[i][m[i]])) for i in rows), default=0.0)
    colsum = np.array([float(np.mean(tot[i][m[i]])) for i in rows])
    s = field.anchor[rows]
    d = np.diff(colsum)
    mono = float(d.min()) if d.size else 0.0
    above = np.flatnonzero(colsum >= cost)
    price = None
    if above.size:
        k = int(above[0])
        price = float(s[0]) if k == 0 else float(s[k - 1] + (cost - colsum[k - 1]) * (s[k] - s[k - 1]) / (colsum[k] - colsum[k - 1]))
    details = {"sign_violation": sign_viol, "sum_spread": spread, "monotone_slack": mono, "bundle_price": price, "cost": cost}
    margin = min(-sign_viol, -spread, mono)
    if sign_viol > tol * scale:
        k = np.unravel_index(int(np.argmin(same_sign)), same_sign.shape)
        wit = [[float(field.t1[k]), float(field.t2[k])], [float(field.t1[k]), float(field.t2[k])]]
        return CheckResult("vsm_bundle", FAIL, margin, wit, sign_viol, dict(details, failed="same_sign"))
    if spread > tol * scale:
        i = max(rows, key=lambda r: float(np.ptp(tot[r][m[r]])))
        wit = [[float(field.t1[i, 0]), float(field.t2[i, 0])], [float(field.t1[i, -1]), float(field.t2[i, -1])]]
        return CheckResult("vsm_bundle", FAIL, margin, wit, spread, dict(details, failed="depends_on_split"))
    if mono < -tol * scale:
        k = int(np.argmin(d))
        wit = [[float(s[k]), float(colsum[k])], [float(s[k + 1]), float(colsum[k + 1])]]
        return CheckResult("vsm_bundle", FAIL, margin, wit, -mono, dict(details, failed="monotone"))
    return CheckResult("vsm_bundle", PASS, margin, details=details)


# ---------------------------------------------------------------------------
# quantile-space ironing


def pava_nonincreasing(y: np.ndarray, w: np.ndarray) -> tuple[np.ndarray, list]:
    """Weighted least-squares non-increasing fit (pool adjacent violators).

    Equivalently, the slopes of the smallest concave majorant of the
    cumulative sums of ``w * y``.  Returns the fit and the pooled blocks as
    ``(start, stop)`` index pairs.
    """
    y = np.asarray(y, dtype=float)
    w = np.asarray(w, dtype=float)
    vals, wts, starts = [], [], []
    for k in range(len(y)):
        vals.append(y[k])
        wts.append(w[k])
        starts.append(k)
        while len(vals) > 1 and vals[-2] < vals[-1]:
            v2, w2 = vals.pop(), wts.pop()
            starts.pop()
            v1, w1 = vals[-1], wts[-1]
            tot = w1 + w2
            vals[-1] = (v1 * w1 + v2 * w2) / tot if tot > 0 else 0.5 * (v1 + v2)
            wts[-1] = tot
    out = np.empty_like(y)
    blocks = []
    bounds = starts + [len(y)]
    for b, v in enumerate(vals):
        out[bounds[b]:bounds[b + 1]] = v
        blocks.append((bounds[b], bounds[b + 1]))
    return out, blocks


def _trap_weights(x: np.ndarray) -> np.ndarray:
    w = np.zeros_like(x)
    d = np.diff(x)
    w[:-1] += 0.5 * d
    w[1:] += 0.5 * d
    return w


@dataclass(frozen=True, eq=False)
class IronedField:
    """Ironed amortization on the quantile grid (columns x conditional levels).

    Columns are ordered by increasing quantile ``q1 = 1 - F_max(t1)`` (that is,
    decreasing ``t1``); rows are levels ``q2`` of the conditional quantile.
    """

    q1: np.ndarray
    q2: np.ndarray
    t1: np.ndarray         # (n_c,)
    t2: np.ndarray         # (n_c, n_q)
    phi1: np.ndarray       # (n_c,)
    phi1_bar: np.ndarray   # (n_c,)
    phi2: np.ndarray       # (n_c, n_q)
    phi2_bar: np.ndarray   # (n_c, n_q)
    mu: np.ndarray         # (n_c, n_q)
    dmu_dq1: np.ndarray    # (n_c, n_q)
    correction: np.ndarray  # suffix integral of (phi1_bar - phi1), (n_c,)
    weights: np.ndarray    # quadrature weights in q1
    breakpoints: list      # q1 intervals that were pooled
    diagnostics: dict = field(default_factory=dict)

    @property
    def theta(self) -> np.ndarray:
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.where(self.t1[:, None] > 0, self.t2 / self.t1[:, None], 0.0)


def build_ironed_quantile(grid: MaxRatioGrid, n_levels: int | None = None) -> IronedField:
    """Quantile-space ironing of the favorite-value amortization.

    ``phi1_bar`` is the slope of the smallest concave majorant of
    ``H(q1) = int_0^q1 phi1 dq`` (computed by pooling adjacent violators with
    trapezoid weights); ``phi2_bar`` keeps the flow correction tangent to the
    constant-``q2`` curves:
    ``phi2_bar = phi2 + mu (phi1_bar - phi1) - G dmu/dq1`` with
    ``G(q1) = int_{q >= q1} (phi1_bar - phi1) dq``.
    """
    valid = grid.valid_columns
    idx = np.flatnonzero(valid)
    if len(idx) < 3:
        raise ValueError("need at least three columns with mass")
    interior_gap = [int(i) for i in np.flatnonzero(~valid) if idx[0] < i < idx[-1]]
    if interior_gap:
        raise ValueError(f"quantile map is not invertible: empty columns {interior_gap[:5]}")
    n_q = n_levels or grid.shape[1]
    levels = np.linspace(0.0, 1.0, n_q)  # conditional CDF levels; q2 = 1 - level
    v = grid.anchor[idx]
    F = grid.marginal_cdf[idx]
    fm = grid.marginal_density[idx]
    phi1_v = v - (1.0 - F) / fm
    T2 = np.empty((len(idx), n_q))
    MU = np.empty_like(T2)
    for j, u in enumerate(levels):
        eq = equi_quantile(grid, float(u))
        T2[:, j] = eq.second
        MU[:, j] = eq.slope
    # order by increasing q1 (decreasing t1)
    order = np.argsort(1.0 - F, kind="stable")
    q1 = (1.0 - F)[order]
    t1 = v[order]
    t2 = T2[order]
    mu = MU[order]
    phi1 = phi1_v[order]
    w = _trap_weights(q1)
    phi1_bar, blocks = pava_nonincreasing(phi1, w)
    d = phi1_bar - phi1
    wd = w * d
    suffix_excl = np.concatenate([np.cumsum(wd[::-1])[::-1][1:], [0.0]])
    G = suffix_excl + 0.5 * wd
    dmu = np.empty_like(mu)
    for j in range(n_q):
        dmu[:, j] = np.gradient(mu[:, j], q1, edge_order=2) if len(q1) > 2 else np.gradient(mu[:, j], q1)
    phi2 = t2 - mu * (t1 - phi1)[:, None]
    phi2_bar = phi2 + mu * d[:, None] - G[:, None] * dmu
    H = np.concatenate([[0.0], np.cumsum(0.5 * (phi1[1:] + phi1[:-1]) * np.diff(q1))])
    Hbar = np.concatenate([[0.0], np.cumsum(0.5 * (phi1_bar[1:] + phi1_bar[:-1]) * np.diff(q1))])
    pooled = [(float(q1[a]), float(q1[b - 1])) for a, b in blocks if b - a > 1]
    diag = {
        "H_revenue_curve": (q1 * t1).tolist(),
        "H_integral": H.tolist(),
        "H_hull": Hbar.tolist(),
        "integral_phi1": float(np.sum(w * phi1)),
        "integral_phi1_bar": float(np.sum(w * phi1_bar)),
        "mu_kinks": int(np.sum(np.abs(np.diff(dmu, axis=0)) > 1e3 * (np.abs(dmu).mean() + TINY))),
    }
    return IronedField(q1, 1.0 - levels, t1, t2, phi1, phi1_bar, phi2, phi2_bar, mu, dmu, G, w, pooled, diag)


def verify_ironed_dominance(ironed: IronedField, tol: float = 1e-9) -> CheckResult:
    """``theta * phi1_bar >= phi2_bar`` and ``phi1_bar <= t1`` at all nodes;
    also reports monotonicity of ``phi1_bar`` in ``q1``."""
    th = ironed.theta
    scale = max(1.0, float(np.max(ironed.t1)))
    dom = th * ironed.phi1_bar[:, None] - ironed.phi2_bar
    # the origin carries no ratio; both sides vanish there
    degenerate = ironed.t1 <= TINY * scale
    dom = np.where(degenerate[:, None], np.inf, dom)
    cap = ironed.t1 - ironed.phi1_bar
    mono = -np.diff(ironed.phi1_bar)
    details = {
        "dominance_min": float(dom.min()),
        "cap_min": float(cap.min()),
        "monotone_min": float(mono.min()) if mono.size else 0.0,
    }
    margin = min(details.values())
    details["degenerate_columns"] = int(degenerate.sum())
    if details["dominance_min"] < -tol * scale:
        i, j = np.unravel_index(int(np.argmin(dom)), dom.shape)
        wit = [[float(ironed.t1[i]), float(ironed.t2[i, j])], [float(ironed.q1[i]), float(ironed.q2[j])]]
        return CheckResult("ironed_dominance", FAIL, margin, wit, -details["dominance_min"], dict(details, failed="dominance"))
    if details["cap_min"] < -tol * scale:
        i = int(np.argmin(cap))
        wit = [[float(ironed.t1[i]), 0.0], [float(ironed.q1[i]), 0.0]]
        return CheckResult("ironed_dominance", FAIL, margin, wit, -details["cap_min"], dict(details, failed="cap"))
    if details["monotone_min"] < -tol * scale:
        i = int(np.argmin(mono))
        wit = [[float(ironed.t1[i]), 0.0], [float(ironed.t1[i + 1]), 0.0]]
        return CheckResult("ironed_dominance", FAIL, margin, wit, -details["monotone_min"], dict(details, failed="monotone"))
    return CheckResult("ironed_dominance", PASS, margin, details=details)


# ---------------------------------------------------------------------------
# virtual surplus


def node_weights(grid: RatioGrid) -> np.ndarray:
    """Quadrature weights for ``dt1 dt2`` at the grid nodes (trapezoid in
    ``t2`` within columns, trapezoid across anchors)."""
    wa = _trap_weights(grid.anchor)
    wy = np.array([_trap_weights(grid.t2[i]) for i in range(len(grid.anchor))])
    return wa[:, None] * wy


def virtual_surplus(field: AmortizationField, grid: RatioGrid, x1: np.ndarray, x2: np.ndarray) -> float:
    """``E[x . phi]`` on one branch for an allocation given at the nodes."""
    w = node_weights(grid) * np.where(field.mask, field.f, 0.0)
    return float(np.sum(w * (x1 * field.phi1 + x2 * field.phi2)))


def discrete_extension(types: np.ndarray, probs: np.ndarray, anchor: str = "favorite") -> tuple[np.ndarray, dict]:
    """Exact amortization for a finite type set.

    Types are grouped by their anchor (favorite value, per branch, or bundle
    value); mass above each group flows to the next group and is split across
    its members by matching conditional quantiles (comonotone coupling in the
    second value).  The resulting vector virtual values satisfy
    ``sum_t p(t) x(t).phi(t) >= sum_t p(t) price(t)`` for every IC and IR
    mechanism on this type set.
    """
    T = np.asarray(types, dtype=float)
    pi = np.asarray(probs, dtype=float)
    k = len(T)
    out_flow = np.zeros((k, 2))  # sum_k w_lk (t_k - t_l)
    scale = max(1.0, float(np.max(np.abs(T))))
    rnd = lambda x: np.round(x / scale, 9)
    edges = []
    if anchor == "favorite":
        both = bool(np.any(T[:, 1] > T[:, 0] + 1e-12 * scale))
        diag = np.abs(T[:, 0] - T[:, 1]) <= 1e-12 * scale
        branches = []
        b0 = np.flatnonzero(T[:, 0] >= T[:, 1] - 1e-12 * scale)
        m0 = np.where(diag[b0] & both, 0.5, 1.0) * pi[b0]
        branches.append((b0, T[b0][:, 0], T[b0][:, 1], m0))
        if both:
            b1 = np.flatnonzero(T[:, 1] >= T[:, 0] - 1e-12 * scale)
            m1 = np.where(diag[b1], 0.5, 1.0) * pi[b1]
            branches.append((b1, T[b1][:, 1], T[b1][:, 0], m1))
    elif anchor == "sum":
        ids = np.arange(k)
        branches = [(ids, T[:, 0] + T[:, 1], T[:, 1], pi.copy())]
    else:
        raise ValueError("anchor must be 'favorite' or 'sum'")
    for ids, a, y, m in branches:
        keys = rnd(a)
        groups = [np.flatnonzero(keys == g) for g in np.unique(keys)]
        groups = [g[np.argsort(y[g], kind="stable")] for g in groups]
        masses = np.array([m[g].sum() for g in groups])
        above = np.concatenate([np.cumsum(masses[::-1])[::-1][1:], [0.0]])
        for gi in range(len(groups) - 1):
            W = above[gi]
            if W <= 0:
                continue
            src, dst = groups[gi], groups[gi + 1]
            cs = m[src] / masses[gi] if masses[gi] > 0 else np.full(len(src), 1.0 / len(src))
            cd = m[dst] / masses[gi + 1] if masses[gi + 1] > 0 else np.full(len(dst), 1.0 / len(dst))
            # north-west corner rule = comonotone coupling
            a_i = b_i = 0
            ra, rb = cs[0], cd[0]
            while a_i < len(src) and b_i < len(dst):
                amt = min(ra, rb)
                if amt > 0:
                    l, kk = ids[src[a_i]], ids[dst[b_i]]
                    wgt = W * amt
                    out_flow[l] += wgt * (T[kk] - T[l])
                    edges.append((int(l), int(kk), float(wgt)))
                ra -= amt
                rb -= amt
                if ra <= 1e-15:
                    a_i += 1
                    ra = cs[a_i] if a_i < len(src) else 0.0
                if rb <= 1e-15:
                    b_i += 1
                    rb = cd[b_i] if b_i < len(dst) else 0.0
    with np.errstate(divide="ignore", invalid="ignore"):
        phi = np.where(pi[:, None] > 0, T - out_flow / np.where(pi[:, None] > 0, pi[:, None], 1.0), T)
    return phi, {"edges": edges, "anchor": anchor}


def discrete_virtual_surplus(phi: np.ndarray, probs: np.ndarray, x: np.ndarray) -> float:
    return float(np.sum(np.asarray(probs) * np.sum(np.asarray(x) * phi, axis=1)))


def dump_field(fld: AmortizationField, path: str | Path) -> tuple[Path, Path]:
    """Write ``t1,t2,lambda1,lambda2,phi1,phi2`` rows for on-support nodes and
    a JSON sidecar with the diagnostics."""
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t1", "t2", "lambda1", "lambda2", "phi1", "phi2"])
        for idx in zip(*np.nonzero(fld.mask)):
            w.writerow([repr(float(a[idx])) for a in (fld.t1, fld.t2, fld.lambda1, fld.lambda2, fld.phi1, fld.phi2)])
    side = path.with_suffix(".json")
    meta = {"construction_tag": fld.construction_tag, "coords": fld.coords, "diagnostics": fld.diagnostics}
    side.write_text(json.dumps(meta, sort_keys=True, indent=2, default=float))
    return path, side
