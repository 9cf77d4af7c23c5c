"""Score distributions on the cosine interval [-1, 1].

Three families are supported:

* ``Beta(alpha, beta)`` rescaled from [0, 1] to [-1, 1],
* ``TruncExp(tau)`` with density proportional to ``exp(x / tau)``,
* ``SphericalMarginal(base, dim_n)`` which multiplies the base density by the
  surface-measure factor ``(1 - x^2)^((n - 3) / 2)`` of an isotropic
  distribution on the unit sphere in ``R^n`` and renormalises.

Every member reduces to an unnormalised kernel
``(1 + x)^p (1 - x)^q exp(c x)``, which is what the quadrature integrates.
"""
from __future__ import annotations

import functools
import math
from dataclasses import dataclass, replace
from typing import Union

import numpy as np

from .quadrature import DEFAULT_SPEC, QuadratureSpec, integrate_segments

__all__ = [
    "Beta",
    "TruncExp",
    "SphericalMarginal",
    "ScoreDistribution",
    "CdfTable",
    "DomainError",
    "GRID_SIZE",
    "grid",
    "density",
    "cdf",
    "quadrature_cdf",
    "build_cdf_table",
    "inverse_cdf",
    "infonce_inverse_cdf",
]

GRID_SIZE = 1001


class DomainError(ValueError):
    """Argument outside the domain of a density, CDF or quantile."""


@dataclass(frozen=True)
class Beta:
    alpha: float
    beta: float

    def __post_init__(self):
        if not (self.alpha > 0 and self.beta > 0 and math.isfinite(self.alpha)
                and math.isfinite(self.beta)):
            raise ValueError(f"Beta parameters must be positive, got {self}")


@dataclass(frozen=True)
class TruncExp:
    tau: float

    def __post_init__(self):
        if not (self.tau > 0 and math.isfinite(self.tau)):
            raise ValueError(f"TruncExp temperature must be positive, got {self}")


@dataclass(frozen=True)
class SphericalMarginal:
    base: Union[Beta, TruncExp]
    dim_n: int

    def __post_init__(self):
        if not isinstance(self.base, (Beta, TruncExp)):
            raise TypeError("SphericalMarginal base must be Beta or TruncExp")
        if int(self.dim_n) != self.dim_n or self.dim_n < 3:
            raise ValueError(f"dim_n must be an integer >= 3, got {self.dim_n}")
        m = (self.dim_n - 3) / 2
        if isinstance(self.base, Beta) and (
                self.base.alpha + m <= 0 or self.base.beta + m <= 0):
            raise ValueError("spherical factor makes the density non-integrable")


ScoreDistribution = Union[Beta, TruncExp, SphericalMarginal]


@dataclass(frozen=True)
class _Kernel:
    """``(1 + x)^p (1 - x)^q exp(c x)`` on [-1, 1]; integrable iff p, q > -1."""

    p: float
    q: float
    c: float

    @functools.cached_property
    def shift(self) -> float:
        # log-space offset so the regular part of the kernel peaks near 1
        x = np.linspace(-1, 1, 4003)[1:-1]
        return float(np.max(self.c * x + max(self.p, 0) * np.log1p(x)
                            + max(self.q, 0) * np.log1p(-x)))

    def log_regular(self, x, with_p=True, with_q=True):
        out = self.c * x - self.shift
        with np.errstate(divide="ignore", invalid="ignore"):
            if with_p and self.p != 0:
                out = out + self.p * np.log1p(x)
            if with_q and self.q != 0:
                out = out + self.q * np.log1p(-x)
        return out

    def __call__(self, x):
        x = np.clip(x, -1.0, 1.0)
        return np.exp(self.log_regular(x))


def _kernel(dist: ScoreDistribution) -> _Kernel:
    if isinstance(dist, Beta):
        return _Kernel(dist.alpha - 1.0, dist.beta - 1.0, 0.0)
    if isinstance(dist, TruncExp):
        return _Kernel(0.0, 0.0, 1.0 / dist.tau)
    if isinstance(dist, SphericalMarginal):
        inner = _kernel(dist.base)
        m = (dist.dim_n - 3) / 2
        return _Kernel(inner.p + m, inner.q + m, inner.c)
    raise TypeError(f"not a score distribution: {dist!r}")


def _kernel_masses(kern: _Kernel, points, spec: QuadratureSpec):
    """Unnormalised mass of the kernel on each segment between sorted points.

    Points must lie in [-1, 1]. The interval is split at 0; a half whose
    endpoint exponent is negative is integrated after the substitution
    ``u = (1 + x)^(p + 1)`` (or the mirrored one on the right), which absorbs
    the singular power exactly.
    """
    points = np.asarray(points, dtype=float)
    pts = np.unique(np.concatenate([points, [0.0]]))
    zero_at = int(np.searchsorted(pts, 0.0))
    half_spec = replace(spec, abs_tol=spec.abs_tol / 2)
    masses = np.concatenate([
        _half_masses(kern, pts[:zero_at + 1], half_spec, side=-1),
        _half_masses(kern, pts[zero_at:], half_spec, side=+1),
    ])
    cum = np.concatenate([[0.0], np.cumsum(masses)])
    return np.diff(cum[np.searchsorted(pts, points)])


def _half_masses(kern: _Kernel, pts, spec, side):
    if pts.size < 2:
        return np.zeros(0)
    exponent = kern.p if side < 0 else kern.q
    if exponent >= 0:
        vals, _ = integrate_segments(kern, pts, spec)
        return vals
    e1 = exponent + 1.0
    if side < 0:
        u = (1.0 + pts) ** e1

        def g(uu):
            x = np.clip(uu, 0.0, None) ** (1.0 / e1) - 1.0
            return np.exp(kern.log_regular(x, with_p=False)) / e1

        vals, _ = integrate_segments(g, u, spec)
        return vals
    w = (1.0 - pts) ** e1

    def h(ww):
        x = 1.0 - np.clip(ww, 0.0, None) ** (1.0 / e1)
        return np.exp(kern.log_regular(x, with_q=False)) / e1

    vals, _ = integrate_segments(h, w[::-1], spec)
    return vals[::-1]


@functools.lru_cache(maxsize=1024)
def _log_normaliser(kern: _Kernel, spec: QuadratureSpec) -> float:
    total = float(_kernel_masses(kern, [-1.0, 1.0], spec).sum())
    return math.log(total) + kern.shift


def _check_domain(x, name):
    x = np.asarray(x, dtype=float)
    if np.any(~np.isfinite(x)) or np.any(x < -1) or np.any(x > 1):
        raise DomainError(f"{name} must lie in [-1, 1]")
    return x


def density(dist: ScoreDistribution, x, spec: QuadratureSpec = DEFAULT_SPEC):
    """Normalised density of ``dist`` at ``x`` (scalar or array in [-1, 1])."""
    x = _check_domain(x, "x")
    kern = _kernel(dist)
    base = dist.base if isinstance(dist, SphericalMarginal) else dist
    if isinstance(base, Beta):
        # closed-form normaliser: Beta(p+1, q+1) on [0,1], Jacobian 1/2
        a, b = kern.p + 1, kern.q + 1
        log_z = math.lgamma(a) + math.lgamma(b) - math.lgamma(a + b) \
            + (a + b - 1) * math.log(2.0)
        with np.errstate(divide="ignore", invalid="ignore"):
            logf = np.zeros_like(x)
            if kern.p != 0:
                logf = logf + kern.p * np.log1p(x)
            if kern.q != 0:
                logf = logf + kern.q * np.log1p(-x)
        out = np.exp(logf - log_z)
    elif isinstance(dist, TruncExp):
        tau = dist.tau
        out = np.exp((x - 1.0) / tau) / (-tau * math.expm1(-2.0 / tau))
    else:
        out = np.exp(kern.log_regular(x) + kern.shift - _log_normaliser(kern, spec))
    return out[()] if out.ndim == 0 else out


def _truncexp_cdf(tau, t):
    return np.exp((t - 1.0) / tau) * (-np.expm1(-(t + 1.0) / tau)) / (-math.expm1(-2.0 / tau))


def quadrature_cdf(dist: ScoreDistribution, t, spec: QuadratureSpec = DEFAULT_SPEC):
    """CDF by quadrature for any family (no closed-form shortcut)."""
    t = np.clip(np.asarray(t, dtype=float), -1.0, 1.0)
    flat = t.ravel()
    if flat.size == 0:
        return t.copy()
    order = np.argsort(flat, kind="stable")
    srt = flat[order]
    pts = np.unique(np.concatenate([[-1.0], srt, [1.0]]))
    kern = _kernel(dist)
    masses = _kernel_masses(kern, pts, spec)
    cum = np.concatenate([[0.0], np.cumsum(masses)])
    total = cum[-1]
    vals = np.empty_like(flat)
    vals[order] = cum[np.searchsorted(pts, srt)] / total
    out = np.clip(vals, 0.0, 1.0).reshape(t.shape)
    return out[()] if out.ndim == 0 else out


def cdf(dist: ScoreDistribution, t, spec: QuadratureSpec = DEFAULT_SPEC):
    """P(X < t) for ``X ~ dist``; ``t`` outside [-1, 1] saturates to 0 or 1.

    The plain truncated exponential uses its closed form; every other
    family goes through quadrature.
    """
    t = np.asarray(t, dtype=float)
    if np.any(np.isnan(t)):
        raise DomainError("t must not be NaN")
    if isinstance(dist, TruncExp):
        out = np.clip(_truncexp_cdf(dist.tau, np.clip(t, -1.0, 1.0)), 0.0, 1.0)
        return out[()] if out.ndim == 0 else out
    _kernel(dist)  # type check
    return quadrature_cdf(dist, t, spec)


def grid() -> np.ndarray:
    """The fixed table abscissae ``i / 500 - 1`` for ``i = 0..1000``."""
    return np.arange(GRID_SIZE) / 500.0 - 1.0


@dataclass(frozen=True, eq=False)
class CdfTable:
    """CDF values on the fixed 1001-point grid over [-1, 1]."""

    grid_values: np.ndarray
    source: ScoreDistribution

    def __post_init__(self):
        v = np.array(self.grid_values, dtype=float)
        if v.shape != (GRID_SIZE,):
            raise ValueError(f"CdfTable needs {GRID_SIZE} values, got {v.shape}")
        if np.any(np.diff(v) < 0) or v[0] < 0 or np.any(v > 1):
            raise ValueError("CdfTable values must be nondecreasing within [0, 1]")
        if abs(v[-1] - 1.0) > 1e-9:
            raise ValueError("CdfTable must end at 1")
        v.setflags(write=False)
        object.__setattr__(self, "grid_values", v)


@functools.lru_cache(maxsize=8192)
def _table_values(dist, spec) -> np.ndarray:
    if isinstance(dist, TruncExp):
        vals = _truncexp_cdf(dist.tau, grid())
        vals = vals / vals[-1]
    else:
        masses = _kernel_masses(_kernel(dist), grid(), spec)
        cum = np.concatenate([[0.0], np.cumsum(masses)])
        vals = cum / cum[-1]
    vals = np.maximum.accumulate(np.clip(vals, 0.0, 1.0))
    vals.setflags(write=False)
    return vals


def build_cdf_table(dist: ScoreDistribution, spec: QuadratureSpec = DEFAULT_SPEC) -> CdfTable:
    """Tabulate the CDF of ``dist`` on the 1001-point grid.

    Tables are memoised per (distribution, spec); the cache is internally
    locked by ``functools.lru_cache`` and entries are read-only arrays.
    """
    _kernel(dist)
    return CdfTable(_table_values(dist, spec), dist)


def inverse_cdf(table: CdfTable, p):
    """Piecewise-linear quantile from a CDF table.

    ``p`` at or above the last entry maps to 1, at or below the first entry
    to -1; otherwise the bracketing grid cells are interpolated linearly.
    On a half of [-1, 1] whose endpoint is singular the interpolation is
    linear in the endpoint power ``(1 -+ x)^(e + 1)`` instead of in ``x``.
    """
    p = np.asarray(p, dtype=float)
    if np.any(~np.isfinite(p)) or np.any(p < 0) or np.any(p > 1):
        raise DomainError("p must lie in [0, 1]")
    values = table.grid_values
    right = np.clip(np.searchsorted(values, p, side="left"), 1, GRID_SIZE - 1)
    left = right - 1
    vl, vr = values[left], values[right]
    with np.errstate(divide="ignore", invalid="ignore"):
        pos = (right * (p - vl) + left * (vr - p)) / (vr - vl)
    out = pos / 500.0 - 1.0
    # Near a singular endpoint the CDF follows (1 -+ x)^(e + 1); interpolating
    # in that coordinate instead of x keeps the roundtrip error at grid level.
    kern = _kernel(table.source)
    xl, xr = left / 500.0 - 1.0, right / 500.0 - 1.0
    with np.errstate(divide="ignore", invalid="ignore"):
        w = (p - vl) / (vr - vl)
        if kern.q < 0:
            e = kern.q + 1.0
            ul, ur = (1.0 - xl) ** e, (1.0 - xr) ** e
            upper = 1.0 - (ul + (ur - ul) * w) ** (1.0 / e)
            out = np.where(xl >= 0.0, upper, out)
        if kern.p < 0:
            e = kern.p + 1.0
            ul, ur = (1.0 + xl) ** e, (1.0 + xr) ** e
            lower = (ul + (ur - ul) * w) ** (1.0 / e) - 1.0
            out = np.where(xr <= 0.0, lower, out)
    out = np.where(p >= values[-1], 1.0, np.where(p <= values[0], -1.0, out))
    return out[()] if out.ndim == 0 else out


def infonce_inverse_cdf(p, n: int, tau: float, spec: QuadratureSpec = DEFAULT_SPEC):
    """Quantile of the spherical marginal of the truncated exponential.

    The integrand is ``exp(x / tau) * (1 - x**2) ** ((n - 3) / 2)``, a
    Beta-exponential kernel with both shape parameters ``(n - 1) / 2``.
    """
    return inverse_cdf(build_cdf_table(SphericalMarginal(TruncExp(tau), n), spec), p)
