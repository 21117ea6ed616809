"""Euclidean-gauge asymptotic data and the arclength (radial) gauge.

The asymptotic chart records h = g - g_e in a Euclidean orthonormal frame
on a ladder of sphere radii, together with the two boundary fluxes
entering the mass integrand.  The radial gauge re-parameterizes the
radial coordinate by arclength so that h(ds, .) = 0 identically.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.integrate import cumulative_simpson
from scipy.interpolate import PchipInterpolator

from .geometry import Block, Core, GeometryModel, Profile
from .numerics import fit_local_decay, geometric_grid

GAUGE_TOL = 1e-8


@dataclass(frozen=True)
class AsymptoticChart:
    """Per-radius asymptotic data of h = g - g_e in a Euclidean unit frame.

    block_traces[i] holds mult_i * w_i, the trace of h over the i-th
    angular block; tr_angular is their sum and tr_h = h_rr + tr_angular.
    div_flux = <div_e h, nu> and grad_tr_flux = <grad_e tr_e h, nu>; the
    mass integrand is their difference.  In radial gauge div_flux does
    not vanish in general (it equals -tr_angular / rho), so the gauge
    flag tests only the h(d_rho, .) components.
    """

    ladder: np.ndarray
    n: int
    gamma_order: int
    h_rr: np.ndarray
    h_rho_omega: np.ndarray
    block_traces: tuple[np.ndarray, ...]
    tr_angular: np.ndarray
    tr_h: np.ndarray
    div_flux: np.ndarray
    grad_tr_flux: np.ndarray
    radial_gauge: bool
    max_violation: float
    angular_measure: float

    @property
    def mass_integrand(self) -> np.ndarray:
        return self.div_flux - self.grad_tr_flux

    def mass_at_radius(self) -> np.ndarray:
        """Sphere integral of the mass integrand at each ladder radius."""
        area = self.angular_measure * self.ladder ** (self.n - 1)
        return area * self.mass_integrand

    def mass_one_term_at_radius(self) -> np.ndarray:
        """Divergence-flux-only variant of the sphere integral."""
        area = self.angular_measure * self.ladder ** (self.n - 1)
        return area * self.div_flux

    def rows(self) -> list[dict]:
        out = []
        for j, r in enumerate(self.ladder):
            row = {
                "radius": float(r),
                "h_rr": float(self.h_rr[j]),
                "h_rho_omega": float(self.h_rho_omega[j]),
                "tr_angular": float(self.tr_angular[j]),
                "tr_h": float(self.tr_h[j]),
                "div_flux": float(self.div_flux[j]),
                "grad_tr_flux": float(self.grad_tr_flux[j]),
                "mass_integrand": float(self.mass_integrand[j]),
            }
            for i, bt in enumerate(self.block_traces):
                row[f"block_trace_{i}"] = float(bt[j])
            out.append(row)
        return out


def default_ladder(g: GeometryModel, r_min: float | None = None, rungs: int = 7) -> np.ndarray:
    if r_min is None:
        r_min = max(8.0, 4.0 * g.rho_core, 16.0 * g.grid_start)
    return r_min * 2.0 ** np.arange(rungs)


def chart_validity_radius(g: GeometryModel) -> float:
    """Radius beyond which the asymptotic chart data is meaningful."""
    return max(2.0 * g.rho_core, 4.0 * g.grid_start)


def asymptotic_chart(g: GeometryModel, ladder=None) -> AsymptoticChart:
    """Extract h and its first-order boundary invariants on a radius ladder.

    Uses the exact perturbation profiles carried by the model; a model
    without them falls back to finite differences of the coefficient
    functions across the ladder rungs.
    """
    if ladder is None:
        ladder = default_ladder(g)
    ladder = np.asarray(ladder, dtype=float)
    if ladder.ndim != 1 or len(ladder) < 2:
        raise ValueError("ladder must contain at least two radii")
    if np.any(np.diff(ladder) <= 0):
        raise ValueError("ladder radii must be strictly increasing")
    r_valid = chart_validity_radius(g)
    if ladder[0] < r_valid:
        raise ValueError(
            f"ladder radius {ladder[0]:g} below chart validity radius {r_valid:g}"
        )

    if g.pert is not None:
        (mult_r, hp), *wps = g.pert
        h_rr = np.asarray(hp.val(ladder), dtype=float)
        dh_rr = np.asarray(hp.d1(ladder), dtype=float)
        traces = []
        dtraces = []
        for mult, wp in wps:
            traces.append(mult * np.asarray(wp.val(ladder), dtype=float))
            dtraces.append(mult * np.asarray(wp.d1(ladder), dtype=float))
    else:
        # Fallback: difference the coefficient functions on the ladder.
        h_rr = g.grr(ladder) - 1.0
        dh_rr = np.gradient(g.grr(ladder), ladder) if len(ladder) > 2 else np.zeros_like(ladder)
        traces, dtraces = [], []
        for blk in g.blocks:
            w = (blk.B.val(ladder) / ladder) ** 2 - 1.0
            dw = 2.0 * blk.B.val(ladder) / ladder**2 * blk.B.d1(ladder) \
                - 2.0 * blk.B.val(ladder) ** 2 / ladder**3
            traces.append(blk.mult * w)
            dtraces.append(blk.mult * dw)

    tr_angular = np.sum(traces, axis=0) if traces else np.zeros_like(ladder)
    dtr_angular = np.sum(dtraces, axis=0) if dtraces else np.zeros_like(ladder)
    tr_h = h_rr + tr_angular

    n = g.n
    div_flux = dh_rr + ((n - 1) * h_rr - tr_angular) / ladder
    grad_tr_flux = dh_rr + dtr_angular

    h_rho_omega = np.zeros_like(ladder)
    violation = float(max(np.max(np.abs(h_rr)), np.max(np.abs(h_rho_omega))))
    return AsymptoticChart(
        ladder=ladder,
        n=n,
        gamma_order=g.gamma_order,
        h_rr=h_rr,
        h_rho_omega=h_rho_omega,
        block_traces=tuple(np.asarray(t) for t in traces),
        tr_angular=tr_angular,
        tr_h=tr_h,
        div_flux=div_flux,
        grad_tr_flux=grad_tr_flux,
        radial_gauge=violation <= GAUGE_TOL,
        max_violation=violation,
        angular_measure=g.angular_measure,
    )


def check_radial_gauge(chart: AsymptoticChart, tol: float = GAUGE_TOL) -> tuple[bool, float]:
    """True iff the h(d_rho, .) components vanish at every ladder radius.

    The divergence flux is reported in the chart but deliberately not
    tested here: for a non-flat metric in radial gauge it equals
    -tr_angular / rho, which is nonzero whenever the angular blocks
    carry a perturbation.
    """
    return chart.max_violation <= tol, chart.max_violation


def _arclength_table(g: GeometryModel, ratio: float = 1.004):
    """Tabulate s(rho) = rho - int_rho^inf (sqrt(g_rr) - 1) dt.

    The integration constant is fixed by s/rho -> 1.  The integrand is
    evaluated in difference form, expm1(log1p(h_rr)/2), so the tail is
    accurate at machine precision relative to the profile itself.  For
    a bolt core the integrand diverges like (rho - a)^{-1/2}; that
    segment is tabulated in the substitution variable xi = sqrt(rho - a)
    where the integrand is smooth.
    """
    (_, hp) = g.pert[0]

    def e1(rho):
        rho = np.asarray(rho, dtype=float)
        with np.errstate(divide="ignore", over="ignore"):
            return np.expm1(0.5 * np.log1p(hp.val(rho)))

    hi = g.grid_stop
    if g.core is Core.BOLT:
        a = g.rho_core
        span = 0.25 * a
        xi = np.linspace(1e-5 * math.sqrt(span), math.sqrt(span), 481)
        rho_sing = a + xi * xi
        rho_geo = geometric_grid(a + span, hi, ratio)
        vals_geo = e1(rho_geo)
        decay = fit_local_decay(vals_geo, rho_geo)
        tail = _integrable_tail(vals_geo[-1], rho_geo[-1], decay)
        cum_geo = cumulative_simpson(vals_geo * rho_geo, x=np.log(rho_geo),
                                     initial=0.0)
        I_geo = (cum_geo[-1] - cum_geo) + tail
        # int_xi^top 2 t e1(a + t^2) dt, cumulative from the top.
        integ = 2.0 * xi * e1(rho_sing)
        cum_sing = cumulative_simpson(integ, x=xi, initial=0.0)
        I_sing = (cum_sing[-1] - cum_sing) + I_geo[0]
        rho = np.concatenate([rho_sing[:-1], rho_geo])
        I = np.concatenate([I_sing[:-1], I_geo])
        s = rho - I
        s_core = float(a - I_sing[0])
        return rho, s, I, s_core
    rho = geometric_grid(g.grid_start, hi, ratio)
    vals = e1(rho)
    decay = fit_local_decay(vals, rho)
    tail = _integrable_tail(vals[-1], rho[-1], decay)
    cum = cumulative_simpson(vals * rho, x=np.log(rho), initial=0.0)
    I = (cum[-1] - cum) + tail
    s = rho - I
    return rho, s, I, None


def _integrable_tail(last_val, last_rho, decay):
    """Power-law continuation of int_rho^inf of a fitted-tail integrand."""
    if not np.isfinite(decay) or abs(last_val) < 1e-300:
        return 0.0
    if decay <= 1.0 + 1e-9:
        raise ValueError("non-integrable g_rr perturbation: arclength undefined")
    return last_val * last_rho / (decay - 1.0)


def to_radial_gauge(g: GeometryModel, ladder=None) -> tuple[GeometryModel, AsymptoticChart]:
    """Re-parameterize by arclength so that h(ds, .) = 0 exactly.

    Returns the model in the new chart together with its asymptotic
    chart.  Requires declared order beta > 1 so the arclength defect
    integral converges; the new chart keeps the declared order.
    """
    if g.is_radial_gauge():
        chart = asymptotic_chart(g, ladder)
        return g, chart
    if not (g.beta > 1.0):
        raise ValueError("radial gauge requires declared order beta > 1")

    rho_t, s_t, I_t, s_core = _arclength_table(g)
    rho_of_s_spline = PchipInterpolator(s_t, rho_t, extrapolate=False)
    s_of_rho_spline = PchipInterpolator(rho_t, s_t, extrapolate=False)

    (_, hp) = g.pert[0]
    decay = fit_local_decay(np.expm1(0.5 * np.log1p(hp.val(rho_t))), rho_t)
    amp_top = float(np.expm1(0.5 * np.log1p(hp.val(rho_t[-1]))) * rho_t[-1] ** decay) \
        if np.isfinite(decay) else 0.0

    def I_of_rho(rho):
        rho = np.asarray(rho, dtype=float)
        out = np.empty_like(rho)
        inside = rho <= rho_t[-1]
        lowclip = np.clip(rho, rho_t[0], rho_t[-1])
        base = PchipInterpolator(rho_t, I_t)(lowclip)
        out[inside] = base[inside]
        if np.any(~inside) and np.isfinite(decay):
            out[~inside] = amp_top * rho[~inside] ** (1.0 - decay) / (decay - 1.0)
        elif np.any(~inside):
            out[~inside] = 0.0
        return out

    rho_lo = rho_t[0]

    def rho_of_s(s):
        s = np.asarray(s, dtype=float)
        out = np.empty_like(s)
        inside = (s >= s_t[0]) & (s <= s_t[-1])
        out[inside] = rho_of_s_spline(s[inside])
        hi = s > s_t[-1]
        if np.any(hi):
            # One fixed-point sweep of rho = s + I(rho); I is tiny out here.
            r0 = s[hi] + I_of_rho(s[hi])
            out[hi] = s[hi] + I_of_rho(r0)
        lo = s < s_t[0]
        if np.any(lo):
            out[lo] = rho_lo
        return np.clip(out, rho_lo, None)

    def compose(fn):
        return lambda s: fn(rho_of_s(s))

    def A_val(rho):
        return np.exp(0.5 * np.log1p(hp.val(rho)))

    def A_d1(rho):
        return A_val(rho) * hp.d1(rho) / (2.0 * (1.0 + hp.val(rho)))

    def composed_profile(p: Profile) -> Profile:
        def val(s):
            return p.val(rho_of_s(s))

        def d1(s):
            rho = rho_of_s(s)
            return p.d1(rho) / A_val(rho)

        def d2(s):
            rho = rho_of_s(s)
            A = A_val(rho)
            return (p.d2(rho) - p.d1(rho) * A_d1(rho) / A) / A**2

        return Profile(val, d1, d2)

    def e1_val(rho):
        return np.expm1(0.5 * np.log1p(hp.val(rho)))

    def delta_val(rho):
        return I_of_rho(rho) / rho

    def delta_d1(rho):
        return (-e1_val(rho) - delta_val(rho)) / rho

    def delta_d2(rho):
        return (-A_d1(rho) - 2.0 * delta_d1(rho)) / rho

    def composed_pert(wp: Profile) -> Profile:
        # w_new(s) = (1 + w(rho)) (rho/s)^2 - 1 in exact difference form:
        # expm1(log1p(w) - 2 log1p(-delta)), delta = I/rho, s = rho(1-delta).
        def L_parts(rho):
            w = wp.val(rho)
            d = delta_val(rho)
            L = np.log1p(w) - 2.0 * np.log1p(-d)
            Lp = wp.d1(rho) / (1.0 + w) + 2.0 * delta_d1(rho) / (1.0 - d)
            Lpp = (wp.d2(rho) / (1.0 + w) - (wp.d1(rho) / (1.0 + w)) ** 2
                   + 2.0 * delta_d2(rho) / (1.0 - d)
                   + 2.0 * (delta_d1(rho) / (1.0 - d)) ** 2)
            return L, Lp, Lpp

        def val(s):
            L, _, _ = L_parts(rho_of_s(s))
            return np.expm1(L)

        def d1(s):
            rho = rho_of_s(s)
            L, Lp, _ = L_parts(rho)
            return np.exp(L) * Lp / A_val(rho)

        def d2(s):
            rho = rho_of_s(s)
            A = A_val(rho)
            L, Lp, Lpp = L_parts(rho)
            return np.exp(L) * (Lp * Lp + Lpp - Lp * A_d1(rho) / A) / A**2

        return Profile(val, d1, d2)

    new_blocks = tuple(Block(blk.mult, composed_profile(blk.B)) for blk in g.blocks)
    new_pert = [(1, Profile.zero())]
    for (mult, wp) in g.pert[1:]:
        new_pert.append((mult, composed_pert(wp)))

    base_scal = g.scal
    new_scal = compose(base_scal)

    grid_stop_new = float(s_t[-1])
    if g.core is Core.BOLT and s_core is not None:
        rho_core_new = float(s_core)
        grid_start_new = float(s_t[0])
    else:
        grid_start_new = float(s_of_rho_spline(max(g.grid_start, rho_t[0])))
        if g.rho_core >= rho_t[0]:
            rho_core_new = float(s_of_rho_spline(min(g.rho_core, rho_t[-1])))
        else:
            rho_core_new = g.rho_core
        # A neck (e.g. a reflecting wall at the inversion radius) can sit
        # at arclength 0 exactly; keep the chart start strictly positive.
        grid_start_new = max(grid_start_new, 1e-9 * float(s_t[-1]))
        rho_core_new = max(rho_core_new, 0.0)

    params = dict(g.family_params)
    params["gauge"] = "radial"
    # Kink radii ride along through the arclength chart.
    breaks_new = tuple(float(s_of_rho_spline(b)) for b in g.breakpoints
                       if rho_t[0] <= b <= rho_t[-1])
    gauged = GeometryModel(
        n=g.n,
        gamma_order=g.gamma_order,
        core=g.core,
        rho_core=rho_core_new,
        beta=g.beta,
        family=g.family,
        family_params=params,
        A=Profile.constant(1.0),
        blocks=new_blocks,
        scal=new_scal,
        pert=tuple(new_pert),
        grid_start=grid_start_new,
        grid_stop=grid_stop_new,
        hopf=g.hopf,
        breakpoints=breaks_new,
    )
    chart = asymptotic_chart(gauged, ladder)
    return gauged, chart
