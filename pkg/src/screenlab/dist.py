"""Discretized type distributions for two-outcome screening problems.

Types are pairs ``(t1, t2)`` of non-negative values.  The canonical storage is
a *ratio grid*: a set of anchor columns (the favorite value ``v = max(t)`` or
the bundle value ``s = t1 + t2``) and, per column, a grid of ratios
``theta = min(t)/max(t)`` with its own support interval.  Densities are kept
in the ratio coordinates and all quadrature is trapezoidal.

Only the branch ``t1 >= t2`` is stored; the mirror branch is implied by
max-symmetry (``branch_weights`` records the split, default one half each).
"""
from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy import integrate

TINY = 1e-12

__all__ = [
    "TypePoint",
    "Uniform1D",
    "Power1D",
    "UniformMixture1D",
    "Curve",
    "IidUniform",
    "PerfectlyCorrelated",
    "UniformAboveCurve",
    "ProductLogDensity",
    "TruncatedUniformSimplex",
    "SumRatioUniform",
    "RawGrid",
    "parse_family",
    "parse_dist1d",
    "RatioGrid",
    "MaxRatioGrid",
    "SumRatioGrid",
    "Marginal1D",
    "FavoriteMarginal",
    "EquiQuantileCurve",
    "QuantileMap",
    "build_grid",
    "grid_from_cartesian",
    "favorite_marginal",
    "sum_marginal",
    "conditional_ratio_cdf",
    "equi_quantile",
    "quantile_map",
    "to_sum_ratio",
    "cartesian_density",
    "sample",
    "read_raw_grid",
    "write_raw_grid",
    "cumtrapz",
    "column_quantile",
    "MaxRatioGrid3",
    "grid3_from_function",
    "symmetrize",
]


# ---------------------------------------------------------------------------
# small numerical helpers


def cumtrapz(y: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Cumulative trapezoid along the last axis, starting at 0."""
    y = np.asarray(y, dtype=float)
    x = np.asarray(x, dtype=float)
    dx = np.diff(x, axis=-1)
    seg = 0.5 * (y[..., 1:] + y[..., :-1]) * dx
    out = np.zeros_like(y)
    out[..., 1:] = np.cumsum(seg, axis=-1)
    return out


def trapz(y: np.ndarray, x: np.ndarray) -> np.ndarray:
    return integrate.trapezoid(y, x, axis=-1)


def column_quantile(cdf: np.ndarray, x: np.ndarray, q: float | np.ndarray) -> np.ndarray:
    """Left-continuous inverse of a non-decreasing piecewise-linear CDF.

    Returns the smallest ``x`` with ``cdf(x) >= q``; flat stretches resolve to
    their left end.
    """
    q = np.atleast_1d(np.asarray(q, dtype=float))
    idx = np.searchsorted(cdf, q - 1e-14, side="left")
    idx = np.clip(idx, 0, len(cdf) - 1)
    out = np.empty_like(q)
    for k, (i, qq) in enumerate(zip(idx, q)):
        if i == 0:
            out[k] = x[0]
            continue
        c0, c1 = cdf[i - 1], cdf[i]
        if c1 - c0 <= 0:
            out[k] = x[i]
        else:
            w = (qq - c0) / (c1 - c0)
            out[k] = x[i - 1] + min(max(w, 0.0), 1.0) * (x[i] - x[i - 1])
    return out


# ---------------------------------------------------------------------------
# one-dimensional distributions (favorite value or bundle value)


@dataclass(frozen=True)
class Uniform1D:
    lo: float
    hi: float

    def __post_init__(self):
        if not self.hi > self.lo:
            raise ValueError("uniform needs hi > lo")

    def pdf(self, x):
        x = np.asarray(x, dtype=float)
        return np.where((x >= self.lo) & (x <= self.hi), 1.0 / (self.hi - self.lo), 0.0)

    def cdf(self, x):
        x = np.asarray(x, dtype=float)
        return np.clip((x - self.lo) / (self.hi - self.lo), 0.0, 1.0)

    def ppf(self, u):
        return self.lo + np.asarray(u, dtype=float) * (self.hi - self.lo)

    def to_dict(self):
        return {"kind": "uniform", "lo": self.lo, "hi": self.hi}


@dataclass(frozen=True)
class Power1D:
    """``F(x) = ((x - lo)/(hi - lo))**k`` on ``[lo, hi]``."""

    k: float
    hi: float = 1.0
    lo: float = 0.0

    def pdf(self, x):
        x = np.asarray(x, dtype=float)
        z = np.clip((x - self.lo) / (self.hi - self.lo), 0.0, 1.0)
        inside = (x >= self.lo) & (x <= self.hi)
        return np.where(inside, self.k * z ** (self.k - 1) / (self.hi - self.lo), 0.0)

    def cdf(self, x):
        z = np.clip((np.asarray(x, dtype=float) - self.lo) / (self.hi - self.lo), 0.0, 1.0)
        return z**self.k

    def ppf(self, u):
        return self.lo + (self.hi - self.lo) * np.asarray(u, dtype=float) ** (1.0 / self.k)

    def to_dict(self):
        return {"kind": "power", "k": self.k, "lo": self.lo, "hi": self.hi}


@dataclass(frozen=True)
class UniformMixture1D:
    """Finite mixture of uniform distributions; CDF is piecewise linear."""

    components: tuple  # ((weight, lo, hi), ...)

    def __post_init__(self):
        w = sum(c[0] for c in self.components)
        if abs(w - 1.0) > 1e-9 or any(c[0] < 0 or c[2] <= c[1] for c in self.components):
            raise ValueError("mixture weights must sum to 1 with hi > lo")

    @property
    def lo(self):
        return min(c[1] for c in self.components)

    @property
    def hi(self):
        return max(c[2] for c in self.components)

    def pdf(self, x):
        x = np.asarray(x, dtype=float)
        out = np.zeros_like(x)
        for w, a, b in self.components:
            out = out + np.where((x >= a) & (x <= b), w / (b - a), 0.0)
        return out

    def cdf(self, x):
        x = np.asarray(x, dtype=float)
        out = np.zeros_like(x)
        for w, a, b in self.components:
            out = out + w * np.clip((x - a) / (b - a), 0.0, 1.0)
        return out

    def ppf(self, u):
        knots = np.unique(np.array([c[1] for c in self.components] + [c[2] for c in self.components]))
        return np.interp(np.asarray(u, dtype=float), self.cdf(knots), knots)

    def to_dict(self):
        return {"kind": "mixture", "components": [list(c) for c in self.components]}


def parse_dist1d(d: dict):
    kind = d.get("kind")
    if kind == "uniform":
        return Uniform1D(float(d["lo"]), float(d["hi"]))
    if kind == "power":
        return Power1D(float(d["k"]), float(d.get("hi", 1.0)), float(d.get("lo", 0.0)))
    if kind == "mixture":
        comps = tuple((float(c[0]), float(c[1]), float(c[2])) for c in d["components"])
        return UniformMixture1D(comps)
    raise ValueError(f"unknown one-dimensional distribution kind: {kind!r}")


# ---------------------------------------------------------------------------
# curves


@dataclass(frozen=True, eq=False)
class Curve:
    """Piecewise-linear curve through samples ``(x, y)``, ``x`` increasing."""

    x: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        x = np.asarray(self.x, dtype=float)
        y = np.asarray(self.y, dtype=float)
        if x.ndim != 1 or x.shape != y.shape or len(x) < 2:
            raise ValueError("curve needs matching 1-D sample arrays of length >= 2")
        if np.any(np.diff(x) <= 0):
            raise ValueError("curve anchors must be strictly increasing")
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "y", y)

    @classmethod
    def from_function(cls, fn: Callable, lo: float, hi: float, n: int = 2001) -> "Curve":
        x = np.linspace(lo, hi, n)
        return cls(x, np.asarray(fn(x), dtype=float))

    def __call__(self, t):
        return np.interp(t, self.x, self.y)

    def slope(self, t):
        d = np.gradient(self.y, self.x, edge_order=2) if len(self.x) > 2 else np.gradient(self.y, self.x)
        return np.interp(t, self.x, d)

    def to_dict(self):
        return {"x": self.x.tolist(), "y": self.y.tolist()}


def _curve_from(obj) -> Curve:
    if isinstance(obj, Curve):
        return obj
    if isinstance(obj, dict):
        return Curve(np.asarray(obj["x"]), np.asarray(obj["y"]))
    arr = np.asarray(obj, dtype=float)
    return Curve(arr[:, 0], arr[:, 1])


# ---------------------------------------------------------------------------
# family specifications


@dataclass(frozen=True)
class IidUniform:
    a: float
    b: float
    kind: str = field(default="iid_uniform", init=False)

    def __post_init__(self):
        if not (self.b > self.a >= 0):
            raise ValueError("IidUniform needs b > a >= 0")

    def v_range(self):
        return self.a, self.b

    def theta_bounds(self, v):
        v = np.asarray(v, dtype=float)
        lo = np.where(v > 0, self.a / np.maximum(v, TINY), 0.0)
        return np.minimum(lo, 1.0), np.ones_like(v)

    def density(self, t1, t2):
        return np.full(np.broadcast(t1, t2).shape, 2.0 / (self.b - self.a) ** 2)

    def support(self, t1, t2):
        return (t2 >= self.a - 1e-12) & (t1 <= self.b + 1e-12) & (t2 <= t1 + 1e-12)

    def s_range(self):
        return 2 * self.a, 2 * self.b

    def to_dict(self):
        return {"kind": self.kind, "a": self.a, "b": self.b}


@dataclass(frozen=True, eq=False)
class PerfectlyCorrelated:
    """Favorite value ``v ~ F_max`` and second value pinned to ``C_cor(v)``."""

    fmax: object
    curve: Curve
    kind: str = field(default="perfectly_correlated", init=False)

    def __post_init__(self):
        _check_curve_below_diagonal(self.curve)

    def v_range(self):
        return self.fmax.lo, self.fmax.hi

    def ratio(self, v):
        v = np.asarray(v, dtype=float)
        return np.where(v > 0, self.curve(v) / np.maximum(v, TINY), 0.0)

    def theta_bounds(self, v, width):
        c = np.clip(self.ratio(v), 0.0, 1.0)
        lo = np.clip(c - width / 2, 0.0, 1.0 - width)
        return lo, lo + width

    def to_dict(self):
        return {"kind": self.kind, "fmax": self.fmax.to_dict(), "curve": self.curve.to_dict()}


@dataclass(frozen=True, eq=False)
class UniformAboveCurve:
    """Favorite value ``v ~ F_max``; other value uniform on ``[C(v), v]``."""

    fmax: object
    curve: Curve
    kind: str = field(default="uniform_above_curve", init=False)

    def __post_init__(self):
        _check_curve_below_diagonal(self.curve)

    def v_range(self):
        return self.fmax.lo, self.fmax.hi

    def theta_bounds(self, v):
        v = np.asarray(v, dtype=float)
        lo = np.where(v > 0, self.curve(v) / np.maximum(v, TINY), 0.0)
        return np.clip(lo, 0.0, 1.0), np.ones_like(v)

    def density(self, t1, t2):
        t1 = np.asarray(t1, dtype=float)
        width = t1 - self.curve(t1)
        with np.errstate(divide="ignore", invalid="ignore"):
            d = np.where(width > TINY, self.fmax.pdf(t1) / np.maximum(width, TINY), 0.0)
        return np.broadcast_to(d, np.broadcast(t1, t2).shape).copy()

    def support(self, t1, t2):
        lo, hi = self.v_range()
        return (t1 >= lo - 1e-12) & (t1 <= hi + 1e-12) & (t2 >= self.curve(t1) - 1e-12) & (t2 <= t1 + 1e-12)

    def s_range(self):
        lo, hi = self.v_range()
        return lo + float(self.curve(lo)), 2 * hi

    def to_dict(self):
        return {"kind": self.kind, "fmax": self.fmax.to_dict(), "curve": self.curve.to_dict()}


@dataclass(frozen=True, eq=False)
class ProductLogDensity:
    """Independent values with density proportional to ``exp(h(log x))`` on (0, hi].

    ``h`` is piecewise linear through ``(u_k, h_k)`` in log-space and is
    extended linearly beyond its end samples.
    """

    u: np.ndarray
    h: np.ndarray
    hi: float = 1.0
    kind: str = field(default="product_log_density", init=False)

    def __post_init__(self):
        u = np.asarray(self.u, dtype=float)
        h = np.asarray(self.h, dtype=float)
        object.__setattr__(self, "u", u)
        object.__setattr__(self, "h", h)
        slopes = np.diff(h) / np.diff(u)
        if np.any(slopes < -1e-12) or np.any(np.diff(slopes) < -1e-12):
            raise ValueError("h must be non-decreasing and convex")

    def _h(self, uu):
        uu = np.asarray(uu, dtype=float)
        s0 = (self.h[1] - self.h[0]) / (self.u[1] - self.u[0])
        s1 = (self.h[-1] - self.h[-2]) / (self.u[-1] - self.u[-2])
        out = np.interp(uu, self.u, self.h)
        out = np.where(uu < self.u[0], self.h[0] + s0 * (uu - self.u[0]), out)
        out = np.where(uu > self.u[-1], self.h[-1] + s1 * (uu - self.u[-1]), out)
        return out

    @cached_property
    def _norm(self):
        val, _ = integrate.quad(lambda x: float(np.exp(self._h(math.log(x)))), 0.0, self.hi, limit=200)
        return val

    def pdf1(self, x):
        x = np.asarray(x, dtype=float)
        with np.errstate(divide="ignore"):
            lx = np.log(np.maximum(x, 1e-300))
        return np.where((x > 0) & (x <= self.hi), np.exp(self._h(lx)) / self._norm, 0.0)

    def v_range(self):
        return 0.0, self.hi

    def theta_bounds(self, v):
        v = np.asarray(v, dtype=float)
        return np.zeros_like(v), np.ones_like(v)

    def density(self, t1, t2):
        return 2.0 * self.pdf1(t1) * self.pdf1(t2)

    def support(self, t1, t2):
        return (t2 >= 0) & (t1 <= self.hi + 1e-12) & (t2 <= t1 + 1e-12)

    def s_range(self):
        return 0.0, 2 * self.hi

    def to_dict(self):
        return {"kind": self.kind, "u": self.u.tolist(), "h": self.h.tolist(), "hi": self.hi}


@dataclass(frozen=True)
class TruncatedUniformSimplex:
    """Uniform on ``[a,b]^2`` truncated to ``t1 + t2 <= a + b``."""

    a: float
    b: float
    kind: str = field(default="truncated_uniform_simplex", init=False)

    def __post_init__(self):
        if not (self.b > self.a >= 0):
            raise ValueError("TruncatedUniformSimplex needs b > a >= 0")

    def v_range(self):
        return self.a, self.b

    def theta_bounds(self, v):
        v = np.asarray(v, dtype=float)
        vs = np.maximum(v, TINY)
        lo = np.where(v > 0, self.a / vs, 0.0)
        hi = np.where(v > 0, np.minimum(v, self.a + self.b - v) / vs, 1.0)
        hi = np.maximum(hi, lo)
        return np.clip(lo, 0, 1), np.clip(hi, 0, 1)

    def density(self, t1, t2):
        return np.full(np.broadcast(t1, t2).shape, 4.0 / (self.b - self.a) ** 2)

    def support(self, t1, t2):
        e = 1e-12
        return (t2 >= self.a - e) & (t1 <= self.b + e) & (t2 <= t1 + e) & (t1 + t2 <= self.a + self.b + e)

    def s_range(self):
        return 2 * self.a, self.a + self.b

    def to_dict(self):
        return {"kind": self.kind, "a": self.a, "b": self.b}


@dataclass(frozen=True, eq=False)
class SumRatioUniform:
    """Bundle value ``s ~ F_sum``; given ``s`` the split is uniform on the
    segment ``t1 + t2 = s`` restricted to ``min/max >= theta_lo(s)``."""

    fsum: object
    theta_lo: Curve
    kind: str = field(default="sum_ratio_uniform", init=False)

    def s_range(self):
        return self.fsum.lo, self.fsum.hi

    def sr_bounds(self, s):
        lo = np.clip(self.theta_lo(s), 0.0, 1.0)
        return lo, np.ones_like(lo)

    def sr_density(self, s, th):
        lo, _ = self.sr_bounds(s)
        z = 1.0 / (1.0 + lo) - 0.5
        with np.errstate(divide="ignore", invalid="ignore"):
            d = np.where(z > TINY, self.fsum.pdf(s) / (1.0 + th) ** 2 / np.maximum(z, TINY), 0.0)
        return d

    def density(self, t1, t2):
        s = t1 + t2
        th = np.where(t1 > 0, t2 / np.maximum(t1, TINY), 0.0)
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.where(s > 0, self.sr_density(s, th) * (1 + th) ** 2 / np.maximum(s, TINY), 0.0)

    def support(self, t1, t2):
        s = t1 + t2
        th = np.where(t1 > 0, t2 / np.maximum(t1, TINY), 1.0)
        lo, hi = self.s_range()
        return (s >= lo - 1e-12) & (s <= hi + 1e-12) & (th >= self.theta_lo(s) - 1e-12) & (t2 <= t1 + 1e-12)

    def to_dict(self):
        return {"kind": self.kind, "fsum": self.fsum.to_dict(), "theta_lo": self.theta_lo.to_dict()}


@dataclass(frozen=True)
class RawGrid:
    path: str
    kind: str = field(default="raw_grid", init=False)

    def to_dict(self):
        return {"kind": self.kind, "path": self.path}


def _check_curve_below_diagonal(curve: Curve):
    if np.any(curve.y > curve.x + 1e-12) or np.any(curve.y < -1e-12):
        raise ValueError("curve samples must satisfy 0 <= C(t1) <= t1")


def parse_family(d: dict):
    """Build a family specification from its JSON form."""
    kind = d.get("kind")
    if kind == "iid_uniform":
        return IidUniform(float(d["a"]), float(d["b"]))
    if kind == "perfectly_correlated":
        return PerfectlyCorrelated(parse_dist1d(d["fmax"]), _curve_from(d["curve"]))
    if kind == "uniform_above_curve":
        return UniformAboveCurve(parse_dist1d(d["fmax"]), _curve_from(d["curve"]))
    if kind == "product_log_density":
        return ProductLogDensity(np.asarray(d["u"]), np.asarray(d["h"]), float(d.get("hi", 1.0)))
    if kind == "truncated_uniform_simplex":
        return TruncatedUniformSimplex(float(d["a"]), float(d["b"]))
    if kind == "sum_ratio_uniform":
        return SumRatioUniform(parse_dist1d(d["fsum"]), _curve_from(d["theta_lo"]))
    if kind == "raw_grid":
        return RawGrid(str(d["path"]))
    raise ValueError(f"unknown distribution kind: {kind!r}")


# ---------------------------------------------------------------------------
# grids


@dataclass(frozen=True)
class TypePoint:
    coords: tuple

    def __post_init__(self):
        c = tuple(float(x) for x in self.coords)
        if len(c) < 1 or not all(math.isfinite(x) and x >= 0 for x in c):
            raise ValueError("type coordinates must be finite and non-negative")
        object.__setattr__(self, "coords", c)

    def as_array(self) -> np.ndarray:
        return np.asarray(self.coords)


def _freeze(a) -> np.ndarray:
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class RatioGrid:
    """Density on anchor columns with per-column ratio grids.

    ``theta[i]`` is the increasing ratio grid of column ``i`` and
    ``density[i, j]`` the density in (anchor, ratio) coordinates on the branch
    ``t1 >= t2``, normalised to integrate to one over that branch.
    """

    anchor: np.ndarray
    theta: np.ndarray
    density: np.ndarray
    branch_weights: tuple = (0.5, 0.5)
    scale: float = 1.0
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        a, th, d = _freeze(self.anchor), _freeze(self.theta), _freeze(self.density)
        if a.ndim != 1 or th.shape != d.shape or th.shape[0] != a.shape[0]:
            raise ValueError("grid arrays have inconsistent shapes")
        if np.any(np.diff(a) <= 0) or np.any(np.diff(th, axis=1) < 0):
            raise ValueError("grid nodes must be sorted")
        if np.any(d < 0) or not np.all(np.isfinite(d)):
            raise ValueError("density must be finite and non-negative")
        object.__setattr__(self, "anchor", a)
        object.__setattr__(self, "theta", th)
        object.__setattr__(self, "density", d)
        total = float(trapz(self.marginal_density, a))
        if abs(total - 1.0) > 1e-8:
            raise ValueError(f"density integrates to {total}, not 1")

    # coordinates -----------------------------------------------------------
    @property
    def shape(self):
        return self.density.shape

    @property
    def h(self) -> float:
        """Anchor mesh width."""
        return float(np.max(np.diff(self.anchor)))

    def jacobian(self) -> np.ndarray:  # pragma: no cover - overridden
        raise NotImplementedError

    @cached_property
    def t1(self) -> np.ndarray:
        raise NotImplementedError

    @cached_property
    def t2(self) -> np.ndarray:
        raise NotImplementedError

    @cached_property
    def f_cart(self) -> np.ndarray:
        """Cartesian density (per branch) at the nodes."""
        jac = self.jacobian()
        with np.errstate(divide="ignore", invalid="ignore"):
            f = np.where(jac > TINY, self.density / np.maximum(jac, TINY), 0.0)
        return f

    # marginals ---------------------------------------------------------------
    @cached_property
    def marginal_density(self) -> np.ndarray:
        return trapz(self.density, self.theta)

    @cached_property
    def marginal_cdf(self) -> np.ndarray:
        F = cumtrapz(self.marginal_density, self.anchor)
        return np.clip(F / F[-1], 0.0, 1.0)

    @cached_property
    def valid_columns(self) -> np.ndarray:
        return self.marginal_density > TINY

    @cached_property
    def cond_cdf(self) -> np.ndarray:
        """Conditional ratio CDF per column; NaN rows for massless columns."""
        c = cumtrapz(self.density, self.theta)
        tot = c[:, -1:]
        with np.errstate(divide="ignore", invalid="ignore"):
            out = np.where(tot > TINY, c / np.where(tot > TINY, tot, 1.0), np.nan)
        out[self.valid_columns, -1] = 1.0
        return np.clip(out, 0.0, 1.0)

    def column_cdf_at(self, i: int, th) -> np.ndarray:
        """Conditional CDF of column ``i`` at ratios ``th`` (0 below, 1 above)."""
        th = np.asarray(th, dtype=float)
        cdf = self.cond_cdf[i]
        x = self.theta[i]
        if x[-1] - x[0] <= 0:
            return np.where(th >= x[0], 1.0, 0.0)
        return np.interp(th, x, cdf, left=0.0, right=1.0)

    def column_quantile(self, i: int, q) -> np.ndarray:
        return column_quantile(self.cond_cdf[i], self.theta[i], q)


class MaxRatioGrid(RatioGrid):
    """Density in (favorite value v, ratio theta = min/max) coordinates."""

    @property
    def v_nodes(self):
        return self.anchor

    @property
    def theta_nodes(self):
        return self.theta

    def jacobian(self):
        return np.broadcast_to(self.anchor[:, None], self.shape)

    @cached_property
    def t1(self):
        return np.broadcast_to(self.anchor[:, None], self.shape).copy()

    @cached_property
    def t2(self):
        return self.anchor[:, None] * self.theta


class SumRatioGrid(RatioGrid):
    """Density in (bundle value s, ratio theta = min/max) coordinates."""

    @property
    def s_nodes(self):
        return self.anchor

    @property
    def theta_nodes(self):
        return self.theta

    @property
    def F_sum(self):
        return self.marginal_cdf

    @property
    def f_sum(self):
        return self.marginal_density

    def jacobian(self):
        return self.anchor[:, None] / (1.0 + self.theta) ** 2

    @cached_property
    def t1(self):
        return self.anchor[:, None] / (1.0 + self.theta)

    @cached_property
    def t2(self):
        return self.anchor[:, None] * self.theta / (1.0 + self.theta)


@dataclass(frozen=True, eq=False)
class Marginal1D:
    """One-dimensional marginal (favorite value or bundle value)."""

    v: np.ndarray
    F: np.ndarray
    f: np.ndarray

    def __post_init__(self):
        for name in ("v", "F", "f"):
            object.__setattr__(self, name, _freeze(getattr(self, name)))
        if np.any(np.diff(self.F) < -1e-12) or abs(self.F[-1] - 1.0) > 1e-8 or self.F[0] < -1e-12:
            raise ValueError("CDF must be non-decreasing from 0 to 1")
        if np.any(self.f < 0):
            raise ValueError("density must be non-negative")

    @property
    def F_max(self):
        return self.F

    @property
    def f_max(self):
        return self.f

    def cdf(self, x):
        return np.interp(x, self.v, self.F, left=0.0, right=1.0)

    def pdf(self, x):
        return np.interp(x, self.v, self.f, left=0.0, right=0.0)

    def phi(self) -> np.ndarray:
        """``v - (1-F)/f`` at the nodes; ``-inf`` where ``f`` vanishes."""
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.where(self.f > TINY, self.v - (1.0 - self.F) / np.maximum(self.f, TINY), -np.inf)


FavoriteMarginal = Marginal1D


@dataclass(frozen=True, eq=False)
class EquiQuantileCurve:
    q: float
    anchor: np.ndarray   # t1 (max-ratio) or s (sum-ratio)
    second: np.ndarray   # t2 on the curve
    theta: np.ndarray    # ratio on the curve
    slope: np.ndarray    # d second / d anchor
    conditioning: str    # "favorite" or "sum"

    @property
    def samples(self):
        return list(zip(self.anchor.tolist(), self.second.tolist()))


@dataclass(frozen=True, eq=False)
class QuantileMap:
    anchor: np.ndarray
    q1: np.ndarray          # per column
    q2: np.ndarray          # per node
    t2: np.ndarray          # per node
    jacobian_error: float   # max relative |det - f|/f at interior nodes
    non_invertible: tuple   # columns with flat CDF stretches

    def forward(self, i: int, t2: float) -> tuple[float, float]:
        return float(self.q1[i]), float(np.interp(t2, self.t2[i], self.q2[i]))

    def inverse(self, q1: float, q2: float) -> tuple[float, float]:
        """Map quantiles back to values (left-continuous convention)."""
        order = np.argsort(self.q1, kind="stable")
        t1 = float(np.interp(q1, self.q1[order], self.anchor[order]))
        a = self.anchor
        i = int(np.clip(np.searchsorted(a, t1) - 1, 0, len(a) - 2))
        w = min(max((t1 - a[i]) / (a[i + 1] - a[i]), 0.0), 1.0)
        t2 = 0.0
        for c, wt in ((i, 1.0 - w), (i + 1, w)):
            if wt > 0:
                t2 += wt * float(column_quantile(1.0 - self.q2[c], self.t2[c], 1.0 - q2)[0])
        return t1, t2


# ---------------------------------------------------------------------------
# builders


def _normalised(cls, anchor, theta, dens, **kw):
    tot = float(trapz(trapz(dens, theta), anchor))
    if not (tot > 0 and math.isfinite(tot)):
        raise ValueError("density is not normalizable")
    return cls(anchor, theta, dens / tot, **kw)


def grid_from_cartesian(
    density_fn: Callable,
    v_range: tuple,
    resolution: tuple,
    theta_bounds: Callable | None = None,
    metadata: dict | None = None,
) -> MaxRatioGrid:
    """Evaluate a Cartesian density ``f(t1, t2)`` on a max-ratio grid.

    ``theta_bounds(v) -> (lo, hi)`` gives the per-column ratio support
    (default ``[0, 1]``).
    """
    n_v, n_t = resolution
    if n_v < 8 or n_t < 8:
        raise ValueError("resolution must be at least 8 per axis")
    v = np.linspace(v_range[0], v_range[1], n_v)
    if theta_bounds is None:
        lo, hi = np.zeros(n_v), np.ones(n_v)
    else:
        lo, hi = (np.asarray(x, dtype=float) for x in theta_bounds(v))
    u = np.linspace(0.0, 1.0, n_t)
    theta = lo[:, None] + (hi - lo)[:, None] * u[None, :]
    dens = np.asarray(density_fn(v[:, None] * np.ones_like(theta), v[:, None] * theta), dtype=float)
    dens = np.where(np.isfinite(dens), dens, 0.0) * v[:, None]
    return _normalised(MaxRatioGrid, v, theta, dens, metadata=dict(metadata or {}))


def build_grid(spec, resolution: tuple = (64, 64)) -> MaxRatioGrid:
    """Discretize a family specification in max-ratio coordinates."""
    n_v, n_t = resolution
    if n_v < 8 or n_t < 8:
        raise ValueError("resolution must be at least 8 per axis")
    meta = {"family": spec.to_dict() if hasattr(spec, "to_dict") else None}
    if isinstance(spec, RawGrid):
        g = read_raw_grid(spec.path)
        if not isinstance(g, MaxRatioGrid):
            raise ValueError("raw grid is in sum-ratio coordinates; use to_sum_ratio")
        return g
    if isinstance(spec, PerfectlyCorrelated):
        width = 1.0 / (n_t - 1)
        v = np.linspace(*spec.v_range(), n_v)
        lo, hi = spec.theta_bounds(v, width)
        u = np.linspace(0.0, 1.0, n_t)
        theta = lo[:, None] + (hi - lo)[:, None] * u[None, :]
        dens = np.broadcast_to((spec.fmax.pdf(v) / width)[:, None], theta.shape).copy()
        meta.update(band_width=width, curve=spec.curve.to_dict(), perfectly_correlated=True)
        return _normalised(MaxRatioGrid, v, theta, dens, metadata=meta)
    if isinstance(spec, SumRatioUniform):
        raise ValueError("sum-ratio family; build it with to_sum_ratio")
    return grid_from_cartesian(spec.density, spec.v_range(), resolution, spec.theta_bounds, meta)


def _sr_bounds_by_probe(spec, s: np.ndarray, n_probe: int = 2049):
    """Per-column ratio support of a Cartesian family in sum coordinates."""
    th = np.linspace(0.0, 1.0, n_probe)
    lo = np.zeros_like(s)
    hi = np.ones_like(s)
    for i, si in enumerate(s):
        t1 = si / (1 + th)
        inside = spec.support(t1, th * t1)
        if not inside.any():
            lo[i] = hi[i] = 0.0
            continue
        idx = np.flatnonzero(inside)
        a, b = idx[0], idx[-1]

        def edge(k_in, k_out):
            x_in, x_out = th[k_in], th[k_out]
            for _ in range(50):
                m = 0.5 * (x_in + x_out)
                t1m = si / (1 + m)
                if spec.support(np.array(t1m), np.array(m * t1m)):
                    x_in = m
                else:
                    x_out = m
            return x_in

        lo[i] = th[a] if a == 0 else edge(a, a - 1)
        hi[i] = th[b] if b == n_probe - 1 else edge(b, b + 1)
    return lo, hi


def to_sum_ratio(source, resolution: tuple | None = None) -> SumRatioGrid:
    """Re-express a distribution in (bundle value, ratio) coordinates."""
    if isinstance(source, RawGrid):
        g = read_raw_grid(source.path)
        if isinstance(g, SumRatioGrid):
            return g
        source = g
    if isinstance(source, SumRatioGrid):
        return source
    if isinstance(source, MaxRatioGrid):
        fam = source.metadata.get("family")
        if fam and fam.get("kind") not in (None, "raw_grid"):
            return to_sum_ratio(parse_family(fam), resolution or source.shape)
        return _sum_from_grid(source, resolution or source.shape)
    if isinstance(source, PerfectlyCorrelated):
        raise ValueError("perfectly correlated families have no sum-ratio density")
    if getattr(source, "m", 2) != 2:
        raise ValueError("sum-ratio coordinates need exactly two outcomes")
    n_s, n_t = resolution or (64, 64)
    if n_s < 8 or n_t < 8:
        raise ValueError("resolution must be at least 8 per axis")
    s = np.linspace(*source.s_range(), n_s)
    if isinstance(source, SumRatioUniform):
        lo, hi = source.sr_bounds(s)
    else:
        lo, hi = _sr_bounds_by_probe(source, s)
    u = np.linspace(0.0, 1.0, n_t)
    theta = lo[:, None] + (hi - lo)[:, None] * u[None, :]
    if isinstance(source, SumRatioUniform):
        dens = source.sr_density(s[:, None] * np.ones_like(theta), theta)
    else:
        t1 = s[:, None] / (1 + theta)
        dens = source.density(t1, theta * t1) * s[:, None] / (1 + theta) ** 2
    dens = np.where(np.isfinite(dens), dens, 0.0)
    meta = {"family": source.to_dict()}
    return _normalised(SumRatioGrid, s, theta, dens, metadata=meta)


def _sum_from_grid(grid: MaxRatioGrid, resolution) -> SumRatioGrid:
    n_s, n_t = resolution
    smax = float(np.max(grid.t1 + grid.t2))
    smin = float(np.min(grid.t1 + grid.t2))
    s = np.linspace(smin, smax, n_s)
    th_probe = np.linspace(0.0, 1.0, 513)
    lo = np.zeros(n_s)
    hi = np.ones(n_s)
    for i, si in enumerate(s):
        t1 = si / (1 + th_probe)
        f = cartesian_density(grid, t1, th_probe * t1)
        idx = np.flatnonzero(f > TINY)
        if len(idx):
            lo[i], hi[i] = th_probe[idx[0]], th_probe[idx[-1]]
    u = np.linspace(0.0, 1.0, n_t)
    theta = lo[:, None] + (hi - lo)[:, None] * u[None, :]
    t1 = s[:, None] / (1 + theta)
    dens = cartesian_density(grid, t1, theta * t1) * s[:, None] / (1 + theta) ** 2
    return _normalised(SumRatioGrid, s, theta, dens, metadata={"family": None})


# ---------------------------------------------------------------------------
# queries


def favorite_marginal(grid: RatioGrid) -> Marginal1D:
    """Distribution of the favorite value (anchor marginal of a max-ratio grid)."""
    return Marginal1D(grid.anchor, grid.marginal_cdf, grid.marginal_density)


def sum_marginal(grid: SumRatioGrid) -> Marginal1D:
    """Distribution of the bundle value."""
    return Marginal1D(grid.anchor, grid.marginal_cdf, grid.marginal_density)


def conditional_ratio_cdf(grid: RatioGrid, v: float, branch: int = 0) -> Callable:
    """``theta -> F(theta | anchor = v)``, linear between neighbouring columns."""
    if branch not in (0, 1):
        raise ValueError("branch must be 0 or 1")
    a = grid.anchor
    if not (a[0] - 1e-12 <= v <= a[-1] + 1e-12):
        raise ValueError("conditioning value outside the support")
    i = int(np.clip(np.searchsorted(a, v) - 1, 0, len(a) - 2))
    w = (v - a[i]) / (a[i + 1] - a[i])
    if w < 1e-12:
        cols, wts = [i], [1.0]
    elif w > 1 - 1e-12:
        cols, wts = [i + 1], [1.0]
    else:
        cols, wts = [i, i + 1], [1 - w, w]
    for c in cols:
        if not grid.valid_columns[c]:
            raise ValueError("favorite-value density vanishes at this column")

    def F(th):
        return sum(wt * grid.column_cdf_at(c, th) for c, wt in zip(cols, wts))

    return F


def equi_quantile(grid: RatioGrid, q: float) -> EquiQuantileCurve:
    """Curve along which the conditional CDF of ``t2`` equals ``q``."""
    if not (0.0 <= q <= 1.0):
        raise ValueError("q must lie in [0, 1]")
    valid = grid.valid_columns
    if not valid.any():
        raise ValueError("grid has no mass")
    idx = np.flatnonzero(valid)
    th = np.array([grid.column_quantile(i, q)[0] for i in idx])
    a = grid.anchor[idx]
    if isinstance(grid, SumRatioGrid):
        second = a * th / (1 + th)
        cond = "sum"
    else:
        second = a * th
        cond = "favorite"
    if len(a) >= 3:
        slope = np.gradient(second, a, edge_order=2)
    elif len(a) == 2:
        slope = np.gradient(second, a)
    else:
        slope = np.zeros_like(a)
    return EquiQuantileCurve(float(q), a, second, th, slope, cond)


def quantile_map(grid: RatioGrid) -> QuantileMap:
    """Forward/inverse quantile tables with a numerical Jacobian check."""
    q1 = 1.0 - grid.marginal_cdf
    cdf = np.where(np.isnan(grid.cond_cdf), 0.0, grid.cond_cdf)
    q2 = 1.0 - cdf
    t2 = grid.t2
    non_inv = []
    for i in np.flatnonzero(grid.valid_columns):
        inner = grid.density[i, 1:-1]
        if np.any(inner <= TINY):
            non_inv.append(int(i))
    # Jacobian: dq1/dt1 * dq2/dt2 (dq1/dt2 = 0) should equal f
    dq1 = np.gradient(q1, grid.anchor, edge_order=2)
    err = 0.0
    f = grid.f_cart
    for i in range(1, len(grid.anchor) - 1):
        if not grid.valid_columns[i] or t2[i, -1] - t2[i, 0] <= 0:
            continue
        dq2 = np.gradient(q2[i], t2[i])
        det = dq1[i] * dq2
        if isinstance(grid, SumRatioGrid):
            # (s, t2) coordinates have unit Jacobian w.r.t. (t1, t2)
            pass
        inner = slice(1, -1)
        ff = f[i, inner]
        ok = ff > 1e-6 * max(f.max(), TINY)
        if ok.any():
            err = max(err, float(np.max(np.abs(det[inner][ok] - ff[ok]) / ff[ok])))
    return QuantileMap(grid.anchor, q1, q2, t2, err, tuple(non_inv))


def cartesian_density(grid: RatioGrid, t1, t2) -> np.ndarray:
    """Per-branch Cartesian density at arbitrary points (0 off support).

    Points with ``t2 > t1`` are mirrored onto the stored branch.
    """
    t1 = np.asarray(t1, dtype=float)
    t2 = np.asarray(t2, dtype=float)
    hi_, lo_ = np.maximum(t1, t2), np.minimum(t1, t2)
    if isinstance(grid, SumRatioGrid):
        a = hi_ + lo_
        jac_fn = lambda aa, th: aa / (1 + th) ** 2
    else:
        a = hi_
        jac_fn = lambda aa, th: aa
    with np.errstate(divide="ignore", invalid="ignore"):
        th = np.where(hi_ > 0, lo_ / np.maximum(hi_, TINY), 1.0)
    A = grid.anchor
    out = np.zeros(np.broadcast(t1, t2).shape)
    flat_a, flat_th = np.broadcast_to(a, out.shape).ravel(), np.broadcast_to(th, out.shape).ravel()
    res = np.zeros(flat_a.size)
    i = np.clip(np.searchsorted(A, flat_a) - 1, 0, len(A) - 2)
    w = (flat_a - A[i]) / (A[i + 1] - A[i])
    inside = (flat_a >= A[0] - 1e-12) & (flat_a <= A[-1] + 1e-12)
    for k in np.flatnonzero(inside):
        ii, ww, tt = i[k], min(max(w[k], 0.0), 1.0), flat_th[k]
        lo_b = (1 - ww) * grid.theta[ii, 0] + ww * grid.theta[ii + 1, 0]
        hi_b = (1 - ww) * grid.theta[ii, -1] + ww * grid.theta[ii + 1, -1]
        if tt < lo_b - 1e-9 or tt > hi_b + 1e-9:
            continue
        vals = []
        for c in (ii, ii + 1):
            x = grid.theta[c]
            vals.append(np.interp(tt, x, grid.density[c]) if x[-1] > x[0] else grid.density[c, 0])
        d = (1 - ww) * vals[0] + ww * vals[1]
        jac = jac_fn(flat_a[k], tt)
        res[k] = d / jac if jac > TINY else 0.0
    return res.reshape(out.shape)


# ---------------------------------------------------------------------------
# sampling


def sample(spec, n: int, rng: np.random.Generator) -> np.ndarray:
    """Draw ``n`` types (both branches, equally likely) from a family."""
    if isinstance(spec, IidUniform):
        return rng.uniform(spec.a, spec.b, size=(n, 2))
    if isinstance(spec, TruncatedUniformSimplex):
        out = np.empty((0, 2))
        while len(out) < n:
            x = rng.uniform(spec.a, spec.b, size=(2 * n, 2))
            out = np.vstack([out, x[x.sum(1) <= spec.a + spec.b]])
        return out[:n]
    if isinstance(spec, (PerfectlyCorrelated, UniformAboveCurve)):
        v = spec.fmax.ppf(rng.uniform(size=n))
        if isinstance(spec, PerfectlyCorrelated):
            t2 = spec.curve(v)
        else:
            c = spec.curve(v)
            t2 = c + rng.uniform(size=n) * (v - c)
        t = np.column_stack([v, t2])
    elif isinstance(spec, ProductLogDensity):
        xs = np.linspace(0.0, spec.hi, 20001)
        cdf = cumtrapz(spec.pdf1(xs), xs)
        cdf /= cdf[-1]
        return np.interp(rng.uniform(size=(n, 2)), cdf, xs)
    elif isinstance(spec, SumRatioUniform):
        knots = np.linspace(spec.fsum.lo, spec.fsum.hi, 20001)
        s = np.interp(rng.uniform(size=n), spec.fsum.cdf(knots), knots)
        lo = np.clip(spec.theta_lo(s), 0, 1)
        # uniform on the segment: t2 uniform between the ratio bounds
        t2_lo = s * lo / (1 + lo)
        t2 = t2_lo + rng.uniform(size=n) * (s / 2 - t2_lo)
        t = np.column_stack([s - t2, t2])
    else:
        raise ValueError(f"sampling not supported for {type(spec).__name__}")
    swap = rng.uniform(size=n) < 0.5
    t[swap] = t[swap][:, ::-1]
    return t


# ---------------------------------------------------------------------------
# raw grid files


def read_raw_grid(path: str | Path) -> RatioGrid:
    """Read a ``v,theta,density`` (or ``s,theta,density``) CSV file."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = [h.strip() for h in next(reader)]
        if header not in (["v", "theta", "density"], ["s", "theta", "density"]):
            raise ValueError("raw grid header must be v,theta,density or s,theta,density")
        rows = np.array([[float(x) for x in r] for r in reader if r], dtype=float)
    anchors = np.unique(rows[:, 0])
    cols = [rows[rows[:, 0] == a] for a in anchors]
    n_t = len(cols[0])
    if any(len(c) != n_t for c in cols):
        raise ValueError("every anchor column needs the same number of ratio nodes")
    theta = np.array([c[np.argsort(c[:, 1]), 1] for c in cols])
    dens = np.array([c[np.argsort(c[:, 1]), 2] for c in cols])
    cls = SumRatioGrid if header[0] == "s" else MaxRatioGrid
    meta = {"family": {"kind": "raw_grid", "path": str(path)}}
    return _normalised(cls, anchors, theta, dens, metadata=meta)


def write_raw_grid(grid: RatioGrid, path: str | Path) -> None:
    head = "s" if isinstance(grid, SumRatioGrid) else "v"
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([head, "theta", "density"])
        for i, a in enumerate(grid.anchor):
            for th, d in zip(grid.theta[i], grid.density[i]):
                w.writerow([repr(float(a)), repr(float(th)), repr(float(d))])


def symmetrize(d1: np.ndarray, d2: np.ndarray, anchor: np.ndarray, theta: np.ndarray):
    """Rescale two branch densities so their favorite-value marginals agree.

    Returns the branch-averaged density and the branch weights.
    """
    m1, m2 = trapz(d1, theta), trapz(d2, theta)
    w1, w2 = float(trapz(m1, anchor)), float(trapz(m2, anchor))
    g1, g2 = m1 / w1, m2 / w2
    if np.max(np.abs(g1 - g2)) > 1e-9:
        warnings.warn("branch marginals differ; symmetrizing per branch", stacklevel=2)
    avg = 0.5 * (g1 + g2)
    with np.errstate(divide="ignore", invalid="ignore"):
        r1 = np.where(m1 > TINY, avg / np.maximum(m1, TINY), 0.0)
        r2 = np.where(m2 > TINY, avg / np.maximum(m2, TINY), 0.0)
    s1, s2 = d1 * r1[:, None], d2 * r2[:, None]
    return 0.5 * (s1 + s2), (w1 / (w1 + w2), w2 / (w1 + w2))


# ---------------------------------------------------------------------------
# three outcomes (favorite outcome 1, ratios of outcomes 2 and 3)


@dataclass(frozen=True, eq=False)
class MaxRatioGrid3:
    """Density over (v, theta2, theta3) for one favorite-outcome branch.

    Both ratios share the node grid ``theta`` on [0, 1].
    """

    v: np.ndarray
    theta: np.ndarray
    density: np.ndarray  # (n_v, n_t, n_t)
    m: int = 3

    def __post_init__(self):
        v, th, d = _freeze(self.v), _freeze(self.theta), _freeze(self.density)
        if d.shape != (len(v), len(th), len(th)):
            raise ValueError("density shape must be (n_v, n_theta, n_theta)")
        if np.any(d < 0):
            raise ValueError("density must be non-negative")
        object.__setattr__(self, "v", v)
        object.__setattr__(self, "theta", th)
        object.__setattr__(self, "density", d)

    @cached_property
    def theta2_density(self) -> np.ndarray:
        """Joint density of (v, theta2) with theta3 integrated out."""
        return trapz(self.density, self.theta)

    @cached_property
    def valid_columns(self) -> np.ndarray:
        return trapz(self.theta2_density, self.theta) > TINY


def grid3_from_function(fn: Callable, v_range: tuple, n: int = 32) -> MaxRatioGrid3:
    """Evaluate ``fn(v, theta2, theta3)`` (max-ratio density) on a cube grid."""
    if n < 8:
        raise ValueError("resolution must be at least 8 per axis")
    v = np.linspace(v_range[0], v_range[1], n)
    th = np.linspace(0.0, 1.0, n)
    V, A, B = np.meshgrid(v, th, th, indexing="ij")
    d = np.asarray(fn(V, A, B), dtype=float)
    tot = float(trapz(trapz(trapz(d, th), th), v))
    if not tot > 0:
        raise ValueError("density is not normalizable")
    return MaxRatioGrid3(v, th, d / tot)
