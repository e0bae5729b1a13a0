"""S-shaped valuation curves, bounded noise, and the derived region points.

A curve u maps [0, K + c] into [0, K]: nondecreasing, continuously
differentiable, convex below its inflection and concave above it.  The scalar
constants derived here (a, b, d, e, m1, g, b1 and the total-distortion
analogues a_alt, b_alt) delimit the regions of the Q-value box in which
equilibria of the distorted dynamics are provably unique, stable or unstable.

For the logistic form u(x) = L / (1 + exp(-gamma (x - x0))) everything is
closed form: u' = gamma u (L - u) / L, so u'(x) = 1/alpha reduces to the
quadratic u (L - u) = L / (alpha gamma), mapped back through the logistic
inverse x = x0 + log(u / (L - u)) / gamma.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.interpolate import PchipInterpolator

_EXP_CLIP = 700.0  # exp overflow guard; clipped branch underflows u to 0


@dataclass
class SCurve:
    """Nondecreasing C^1 valuation map on [0, K + c] with codomain cap K."""

    form: str                       # "logistic" | "steep" | "tabulated"
    domain: tuple[float, float]
    cap: float                      # codomain bound (the constant K)
    L: float | None = None
    gamma: float | None = None
    x0: float | None = None
    x_table: np.ndarray | None = None
    u_table: np.ndarray | None = None
    _interp: PchipInterpolator | None = field(default=None, repr=False)
    _dinterp: PchipInterpolator | None = field(default=None, repr=False)

    def __post_init__(self):
        lo, hi = self.domain
        if not (math.isfinite(lo) and math.isfinite(hi) and lo < hi):
            raise ValueError(f"bad domain {self.domain}")
        if self.form in ("logistic", "steep"):
            for name in ("L", "gamma", "x0"):
                val = getattr(self, name)
                if val is None or not math.isfinite(val):
                    raise ValueError(f"logistic parameter {name} must be finite, got {val}")
            if self.L <= 0.0 or self.gamma <= 0.0:
                raise ValueError("need L > 0 and gamma > 0")
        elif self.form == "tabulated":
            x = np.asarray(self.x_table, dtype=float)
            u = np.asarray(self.u_table, dtype=float)
            if x.ndim != 1 or x.shape != u.shape or x.size < 2:
                raise ValueError("tabulated curve needs matching 1-d x/u tables, length >= 2")
            if np.any(np.diff(x) <= 0.0):
                raise ValueError("tabulated x grid must be strictly increasing")
            if np.any(np.diff(u) < 0.0):
                raise ValueError("tabulated u values must be nondecreasing")
            self.x_table, self.u_table = x, u
            self._interp = PchipInterpolator(x, u, extrapolate=False)
            self._dinterp = self._interp.derivative()
        else:
            raise ValueError(f"unknown curve form {self.form!r}")
        grid = np.linspace(lo, hi, 2048)
        vals = self.u(grid)
        if vals.min() < -1e-12 or vals.max() > self.cap + 1e-9:
            raise ValueError("curve leaves the codomain [0, cap] on its domain")
        if np.any(np.diff(vals) < -1e-10):
            raise ValueError("curve is not nondecreasing on its domain")

    def _clamp(self, x):
        lo, hi = self.domain
        x = np.asarray(x, dtype=float)
        if np.any(x < lo - 1e-12) or np.any(x > hi + 1e-12):
            warnings.warn("curve evaluated outside its domain; argument clamped",
                          RuntimeWarning, stacklevel=3)
        return np.clip(x, lo, hi)

    def u(self, x) -> np.ndarray:
        """Curve value, vectorized; arguments clamped to the domain."""
        x = self._clamp(x)
        if self._interp is not None:
            return np.asarray(self._interp(x), dtype=float)
        e = np.exp(np.minimum(-self.gamma * (x - self.x0), _EXP_CLIP))
        return self.L / (1.0 + e)

    def du(self, x) -> np.ndarray:
        """Curve derivative, vectorized and analytic."""
        x = self._clamp(x)
        if self._dinterp is not None:
            return np.asarray(self._dinterp(x), dtype=float)
        e = np.exp(np.minimum(-self.gamma * (x - self.x0), _EXP_CLIP))
        return self.gamma * self.L * e / (1.0 + e) ** 2

    def u_scalar(self, x: float) -> float:
        """Scalar fast path for per-step use in the stochastic iteration."""
        if self._interp is not None:
            return float(self.u(x))
        lo, hi = self.domain
        x = lo if x < lo else hi if x > hi else x
        t = -self.gamma * (x - self.x0)
        return self.L / (1.0 + math.exp(t if t < _EXP_CLIP else _EXP_CLIP))

    def max_slope(self) -> tuple[float, float]:
        """(argmax, max) of u' over the domain."""
        lo, hi = self.domain
        if self._interp is None:
            m1 = min(max(self.x0, lo), hi)
            return m1, float(self.du(m1))
        grid = np.linspace(lo, hi, 20001)
        dv = self.du(grid)
        j = int(np.argmax(dv))
        return float(grid[j]), float(dv[j])


def logistic_curve(L: float, gamma: float, x0: float, K: float, c: float = 0.0) -> SCurve:
    return SCurve(form="logistic", domain=(0.0, K + c), cap=K, L=L, gamma=gamma, x0=x0)


def steep_curve(K: float, alpha: float, x0: float, c: float = 0.0,
                level: float = 5e-4, L: float | None = None) -> SCurve:
    """Near-step logistic: steepness chosen so that u at the lower slope
    crossing (u' = 1/alpha) equals `level`, i.e. u is essentially 0 below the
    rise and essentially L above it."""
    if L is None:
        L = K
    if not 0.0 < level < L / 2.0:
        raise ValueError("level must lie in (0, L/2)")
    gamma = L / (alpha * level * (L - level))
    return SCurve(form="steep", domain=(0.0, K + c), cap=K, L=L, gamma=gamma, x0=x0)


def tabulated_curve(points, K: float, c: float = 0.0) -> SCurve:
    pts = np.asarray(points, dtype=float)
    return SCurve(form="tabulated", domain=(0.0, K + c), cap=K,
                  x_table=pts[:, 0], u_table=pts[:, 1])


# ---------------------------------------------------------------------------
# bounded noise: raised-cosine density on [-c, c]
# ---------------------------------------------------------------------------

@dataclass
class NoiseModel:
    """Zero-mean noise with density (1 + cos(pi y / c)) / (2c) on [-c, c].

    The density is continuously differentiable on the closed support (it and
    its derivative vanish at +-c).  c = 0 is the allowed degenerate mode in
    which the noise is identically zero.
    """

    c: float

    def __post_init__(self):
        if not (math.isfinite(self.c) and self.c >= 0.0):
            raise ValueError(f"noise half-width must be finite and >= 0, got {self.c}")

    def density(self, y) -> np.ndarray:
        if self.c == 0.0:
            raise ValueError("degenerate noise (c = 0) has no density")
        y = np.asarray(y, dtype=float)
        inside = np.abs(y) <= self.c
        out = np.zeros_like(y)
        out[inside] = (1.0 + np.cos(np.pi * y[inside] / self.c)) / (2.0 * self.c)
        return out

    def cdf(self, y) -> np.ndarray:
        if self.c == 0.0:
            return (np.asarray(y, dtype=float) >= 0.0).astype(float)
        y = np.clip(np.asarray(y, dtype=float), -self.c, self.c)
        t = y / self.c
        return 0.5 * (1.0 + t + np.sin(np.pi * t) / np.pi)

    def sample(self, rng: np.random.Generator, size=None) -> np.ndarray | float:
        """Inverse-CDF sampling: vectorized Newton refined to 1e-12, with a
        bisection fallback for points the Newton sweep leaves unresolved."""
        if self.c == 0.0:
            return 0.0 if size is None else np.zeros(size)
        u = rng.random(size if size is not None else 1)
        y = self.c * (2.0 * u - 1.0)  # linear-CDF seed
        for _ in range(60):
            f = self.cdf(y) - u
            if np.all(np.abs(f) <= 1e-12):
                break
            d = np.maximum(self.density(y), 1e-300)
            y = np.clip(y - f / d, -self.c, self.c)
        bad = np.abs(self.cdf(y) - u) > 1e-12
        if np.any(bad):
            lo = np.full(bad.sum(), -self.c)
            hi = np.full(bad.sum(), self.c)
            ub = u[bad]
            for _ in range(200):
                mid = 0.5 * (lo + hi)
                high = self.cdf(mid) >= ub
                hi[high] = mid[high]
                lo[~high] = mid[~high]
            y[bad] = 0.5 * (lo + hi)
        return y if size is not None else float(y[0])

    def nodes(self, order: int) -> tuple[np.ndarray, np.ndarray]:
        """Gauss-Legendre nodes on [-c, c] with weights premultiplied by the
        density, so that sum(w * f(y)) approximates E[f(noise)].  For c = 0
        this degenerates to the single node 0 with weight 1."""
        if order < 1:
            raise ValueError("quadrature order must be >= 1")
        if self.c == 0.0:
            return np.zeros(1), np.ones(1)
        x, w = np.polynomial.legendre.leggauss(int(order))
        y = self.c * x
        return y, self.c * w * self.density(y)

    def variance(self) -> float:
        return self.c ** 2 * (1.0 / 3.0 - 2.0 / math.pi ** 2)


# ---------------------------------------------------------------------------
# region points
# ---------------------------------------------------------------------------

@dataclass
class RegionPoints:
    """Slope-crossing abscissas of u' against 1/alpha, all clamped to [0, K].

    a/b bound the outer zone where u' < 1/alpha, d/e the inner zone where
    u' > 1/alpha, and m1 is where u' peaks.  g is the fixed point of
    u1(x) = k_min + alpha u(x - c) above b + c when one exists, and b1 the
    smallest point with u1(b1) >= b1.  a_alt/b_alt are the rescaled bounds
    used when the whole return (not just the future part) is distorted.
    """

    steep_region_exists: bool
    max_slope: float
    m1: float
    a: float | None = None
    b: float | None = None
    d: float | None = None
    e: float | None = None
    g: float | None = None
    b1: float | None = None
    a_alt: float | None = None
    b_alt: float | None = None
    reduced_precision: bool = False


def _bisect(fn, lo: float, hi: float, tol: float = 1e-13, iters: int = 200) -> float:
    flo = fn(lo)
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        if hi - lo <= tol:
            return mid
        if fn(mid) * flo > 0.0:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def critical_points(curve: SCurve, alpha: float, c: float, K: float) -> RegionPoints:
    """Locate a, b, d, e, m1 for the given discount.

    Logistic forms use the closed-form quadratic; other forms bisect
    u' - 1/alpha on each flank of the slope peak (falling back to a flagged
    grid scan if a flank is not monotone enough for bisection).
    """
    thresh = 1.0 / alpha
    m1_raw, peak = curve.max_slope()
    m1 = min(max(m1_raw, 0.0), K)
    if peak < thresh:
        return RegionPoints(steep_region_exists=False, max_slope=peak, m1=m1)

    reduced = False
    if curve._interp is None:
        L, gam, x0 = curve.L, curve.gamma, curve.x0
        disc = L * L - 4.0 * L / (alpha * gam)
        if disc <= 0.0:  # peak == thresh within rounding
            x_lo = x_hi = x0
        else:
            root = math.sqrt(disc)
            u_lo, u_hi = (L - root) / 2.0, (L + root) / 2.0
            x_lo = x0 + math.log(u_lo / (L - u_lo)) / gam
            x_hi = x0 + math.log(u_hi / (L - u_hi)) / gam
    else:
        lo_dom, hi_dom = curve.domain

        def slope_gap(x):
            return float(curve.du(x)) - thresh

        # flanks must change sign monotonically around the peak
        n_flank = 512
        left = np.linspace(lo_dom, m1_raw, n_flank)
        right = np.linspace(m1_raw, hi_dom, n_flank)
        dleft = curve.du(left)
        dright = curve.du(right)
        if np.any(np.diff(dleft) < -1e-9) or np.any(np.diff(dright) > 1e-9):
            reduced = True
            grid = np.linspace(lo_dom, hi_dom, 100001)
            above = curve.du(grid) > thresh
            idx = np.flatnonzero(above)
            x_lo, x_hi = float(grid[idx[0]]), float(grid[idx[-1]])
        else:
            x_lo = _bisect(slope_gap, lo_dom, m1_raw) if slope_gap(lo_dom) < 0 else lo_dom
            x_hi = _bisect(slope_gap, m1_raw, hi_dom) if slope_gap(hi_dom) < 0 else hi_dom

    a = min(max(x_lo, 0.0), K)
    b = min(max(x_hi, 0.0), K)
    return RegionPoints(steep_region_exists=True, max_slope=peak, m1=m1,
                        a=a, b=b, d=a, e=b, reduced_precision=reduced)


def u1_eval(curve: SCurve, k_min: float, alpha: float, c: float, x) -> np.ndarray:
    """Lower-envelope map k_min + alpha * u(x - c)."""
    return k_min + alpha * curve.u(np.asarray(x, dtype=float) - c)


def u2_eval(curve: SCurve, k_max: float, alpha: float, c: float, x) -> np.ndarray:
    """Upper-envelope map k_max + alpha * u(x + c)."""
    return k_max + alpha * curve.u(np.asarray(x, dtype=float) + c)


def find_g_and_b1(curve: SCurve, k_min: float, k_max: float, alpha: float,
                  c: float, K: float, points: RegionPoints,
                  grid_size: int = 100001) -> RegionPoints:
    """Augment region points with g, b1 and the total-distortion bounds.

    g is the unique root of u1(x) - x on (b + c, K]: u1 has slope
    alpha * u'(x - c) < 1 there, so at most one crossing exists, and it does
    exist exactly when u1(b + c) >= b + c.  b1 is the smallest grid point
    with u1(b1) >= b1 (absence is encoded as None, never raised).
    """
    if not points.steep_region_exists:
        return points
    a, b = points.a, points.b
    pts = replace(points)
    pts.a_alt = (a - k_max) / alpha
    pts.b_alt = (b - k_min) / alpha

    def gap(x):
        return float(u1_eval(curve, k_min, alpha, c, x)) - x

    start = b + c
    if start <= K:
        g0 = gap(start)
        if g0 == 0.0:
            pts.g = start
        elif g0 > 0.0:
            # slope of u1 is below 1 past b + c, so the crossing is unique
            pts.g = K if gap(K) >= 0.0 else _bisect(gap, start, K)

    xs = np.linspace(c, K, grid_size)
    ok = np.flatnonzero(u1_eval(curve, k_min, alpha, c, xs) >= xs)
    if ok.size:
        pts.b1 = float(xs[ok[0]])
    return pts
