"""Shared numerical kernels: graded grids, finite differences, quadrature
with analytic tail corrections, banded solves, and log-log slope fits.

Everything here works on radial profiles sampled on strictly increasing
grids. Grids are geometric (rho_j = rho_0 * q^j) so that power-law and
Gaussian profiles are resolved uniformly in log rho.
"""

from __future__ import annotations

import numpy as np
from scipy import special
from scipy.integrate import simpson
from scipy.linalg import solve_banded


def geometric_grid(start: float, stop: float, ratio: float = 1.02) -> np.ndarray:
    """Strictly increasing geometric grid from start to stop (both included).

    The number of points is chosen so the spacing ratio does not exceed
    ``ratio``; the grid is then generated exactly in log space.
    """
    if not (start > 0 and stop > start and ratio > 1):
        raise ValueError(f"bad grid request: start={start}, stop={stop}, ratio={ratio}")
    npts = int(np.ceil(np.log(stop / start) / np.log(ratio))) + 1
    npts = max(npts, 8)
    grid = np.exp(np.linspace(np.log(start), np.log(stop), npts))
    # exp(log x) can miss x by an ulp; endpoints must be exact so that
    # segment seams and breakpoint nodes match bitwise downstream.
    grid[0] = start
    grid[-1] = stop
    return grid


def refine_grid(grid: np.ndarray) -> np.ndarray:
    """Insert log-space midpoints, halving the spacing (q -> sqrt(q))."""
    lg = np.log(grid)
    mids = 0.5 * (lg[:-1] + lg[1:])
    return np.exp(np.sort(np.concatenate([lg, mids])))


def geometric_grid_with_breaks(start: float, stop: float, ratio: float,
                               breaks=()):
    """Geometric grid with nodes placed exactly at interior breakpoints.

    Returns (grid, marks) where marks are the indices of the segment
    edges (first 0, last len(grid)-1).  Composite quadrature applied per
    segment then never straddles a curvature kink, whose contribution
    otherwise decays only like h^3 times the derivative jump.
    """
    cuts = sorted({float(b) for b in breaks
                   if start * (1 + 1e-12) < b < stop * (1 - 1e-12)})
    edges = [float(start), *cuts, float(stop)]
    parts = []
    marks = [0]
    for i, (lo, hi) in enumerate(zip(edges[:-1], edges[1:])):
        p = geometric_grid(lo, hi, ratio)
        if i:
            p = p[1:]
        parts.append(p)
        marks.append(marks[-1] + len(p) - (1 if i == 0 else 0))
    return np.concatenate(parts), np.asarray(marks)


def integrate_broken(values: np.ndarray, grid: np.ndarray, marks) -> float:
    """Sum of integrate over the [marks_k, marks_{k+1}] node segments."""
    return float(sum(integrate(values[a:b + 1], grid[a:b + 1])
                     for a, b in zip(marks[:-1], marks[1:])))


def deriv1(values: np.ndarray, grid: np.ndarray) -> np.ndarray:
    """First derivative on a nonuniform grid, central second order inside,
    one-sided second order at the ends."""
    y, x = np.asarray(values, float), np.asarray(grid, float)
    out = np.empty_like(y)
    hm = x[1:-1] - x[:-2]
    hp = x[2:] - x[1:-1]
    # exact for quadratics on nonuniform spacing
    out[1:-1] = (y[2:] * hm**2 - y[:-2] * hp**2 + y[1:-1] * (hp**2 - hm**2)) / (
        hm * hp * (hm + hp))
    h0, h1 = x[1] - x[0], x[2] - x[1]
    out[0] = (-(2 * h0 + h1) * y[0] / (h0 * (h0 + h1))
              + (h0 + h1) * y[1] / (h0 * h1)
              - h0 * y[2] / (h1 * (h0 + h1)))
    hN, hM = x[-1] - x[-2], x[-2] - x[-3]
    out[-1] = ((2 * hN + hM) * y[-1] / (hN * (hN + hM))
               - (hN + hM) * y[-2] / (hN * hM)
               + hN * y[-3] / (hM * (hN + hM)))
    return out


def deriv2(values: np.ndarray, grid: np.ndarray) -> np.ndarray:
    """Second derivative on a nonuniform grid (three-point formula inside,
    copied inward at the two ends)."""
    y, x = np.asarray(values, float), np.asarray(grid, float)
    out = np.empty_like(y)
    hm = x[1:-1] - x[:-2]
    hp = x[2:] - x[1:-1]
    out[1:-1] = 2 * (y[:-2] * hp - y[1:-1] * (hp + hm) + y[2:] * hm) / (
        hm * hp * (hm + hp))
    out[0] = out[1]
    out[-1] = out[-2]
    return out


def integrate(values: np.ndarray, grid: np.ndarray) -> float:
    """Simpson quadrature, evaluated in log space on positive grids.

    int f drho = int (f rho) dlog(rho), and radial grids here are
    geometric, so the log variable is uniformly spaced where the
    composite rule has its clean fourth-order error.  In rho itself the
    panel asymmetry h_{i+1}/h_i = ratio leaves a third-order error term
    that never cancels.
    """
    values = np.asarray(values, float)
    grid = np.asarray(grid, float)
    if grid[0] <= 0.0:
        return float(simpson(values, x=grid))
    return float(simpson(values * grid, x=np.log(grid)))


def power_tail(last_value: float, last_x: float, decay: float) -> float:
    """integral_{last_x}^inf of last_value * (x/last_x)^(-decay) dx.

    Requires decay > 1; the caller supplies the fitted local decay rate of
    the integrand.
    """
    if decay <= 1:
        raise ValueError(f"non-integrable tail: decay={decay}")
    return last_value * last_x / (decay - 1)


def fit_local_decay(values: np.ndarray, grid: np.ndarray, window: int = 8) -> float:
    """Log-log slope of |values| over the last ``window`` grid points.

    Returns the decay exponent p with values ~ x^(-p). Returns +inf when
    the tail is numerically zero (compact support).
    """
    v = np.abs(np.asarray(values, float)[-window:])
    x = np.asarray(grid, float)[-window:]
    scale = np.max(np.abs(values)) if np.max(np.abs(values)) > 0 else 1.0
    if np.max(v) <= 1e-300 or np.max(v) < 1e-200 * scale:
        return np.inf
    good = v > 0
    if good.sum() < 3:
        return np.inf
    slope = np.polyfit(np.log(x[good]), np.log(v[good]), 1)[0]
    return -slope


def tail_correction(fv: np.ndarray, grid: np.ndarray, min_decay: float = 1.05) -> float:
    """Analytic continuation of a power-law integrand beyond the grid.

    ``fv`` are integrand samples (already including the volume density).
    The local decay is fitted on the last nodes; a fitted decay below
    ``min_decay`` raises, since the integral is then numerically divergent.
    Mixed-sign or vanishing tails contribute zero.
    """
    p = fit_local_decay(fv, grid)
    if not np.isfinite(p):
        return 0.0
    if p < min_decay:
        raise ValueError(f"integrand tail decays like x^-{p:.3f}: not integrable")
    tail_window = fv[-8:]
    if np.any(tail_window > 0) and np.any(tail_window < 0):
        return 0.0
    return power_tail(float(fv[-1]), float(grid[-1]), p)


def gaussian_moment(k: float, r: float, tau: float) -> float:
    """integral_r^inf rho^k exp(-rho^2/(4 tau)) drho, exact.

    Equals 2^k tau^((k+1)/2) GammaUpper((k+1)/2, r^2/(4 tau)).
    """
    a = (k + 1) / 2
    x = r * r / (4 * tau)
    return float(2**k * tau**a * special.gammaincc(a, x) * special.gamma(a))


def solve_tridiagonal(lower: np.ndarray, diag: np.ndarray, upper: np.ndarray,
                      rhs: np.ndarray) -> np.ndarray:
    """Solve a tridiagonal system. lower/upper have length n-1."""
    n = len(diag)
    ab = np.zeros((3, n))
    ab[0, 1:] = upper
    ab[1, :] = diag
    ab[2, :-1] = lower
    return solve_banded((1, 1), ab, rhs)


def omega_sphere(n: int) -> float:
    """Volume of the unit round sphere S^(n-1)."""
    return float(2 * np.pi ** (n / 2) / special.gamma(n / 2))


def fit_loglog_slope(x: np.ndarray, y: np.ndarray) -> tuple[float, float, float]:
    """Least-squares slope of log|y| against log x with a leave-one-out band.

    Returns (slope, band_low, band_high); the band is the min/max of the
    leave-one-out slopes widened by the fit's standard error. Points where
    y vanishes are dropped.
    """
    x = np.asarray(x, float)
    y = np.asarray(y, float)
    good = (np.abs(y) > 0) & np.isfinite(y) & (x > 0)
    lx, ly = np.log(x[good]), np.log(np.abs(y[good]))
    if lx.size < 3:
        raise ValueError("need at least 3 nonzero points for a slope fit")
    coef, res = np.polyfit(lx, ly, 1, cov=False), None
    slope = float(coef[0])
    fitted = np.polyval(coef, lx)
    dof = max(lx.size - 2, 1)
    serr = float(np.sqrt(np.sum((ly - fitted) ** 2) / dof / np.sum((lx - lx.mean()) ** 2)))
    loo = []
    for i in range(lx.size):
        keep = np.arange(lx.size) != i
        loo.append(np.polyfit(lx[keep], ly[keep], 1)[0])
    lo = min(min(loo), slope) - serr
    hi = max(max(loo), slope) + serr
    return slope, float(lo), float(hi)


def smoothstep(t: np.ndarray | float):
    """Quintic smoothstep S with S(t<=0)=0, S(t>=1)=1, C^2 across the ends.

    Returns (S, S', S'') evaluated elementwise.
    """
    t = np.asarray(t, float)
    u = np.clip(t, 0.0, 1.0)
    s = u**3 * (10 - 15 * u + 6 * u**2)
    d1 = 30 * u**2 * (1 - u) ** 2
    d2 = 60 * u * (1 - u) * (1 - 2 * u)
    inside = (t > 0) & (t < 1)
    d1 = np.where(inside, d1, 0.0)
    d2 = np.where(inside, d2, 0.0)
    return s, d1, d2


def log1p_minus(w):
    """log(1+w) - w without cancellation: series for small w, direct otherwise.

    The result is O(w^2); the direct expression loses all precision when
    w is below roundoff scale.
    """
    w = np.asarray(w, float)
    out = np.empty_like(w)
    small = np.abs(w) < 0.01
    ws = w[small]
    # alternating series -w^2/2 + w^3/3 - ... through w^9 (error < w^10/10)
    acc = np.zeros_like(ws)
    for k in range(9, 1, -1):
        acc = ws * acc + ((-1) ** (k + 1)) / k
    out[small] = ws * ws * acc
    wb = w[~small]
    out[~small] = np.log1p(wb) - wb
    return out
