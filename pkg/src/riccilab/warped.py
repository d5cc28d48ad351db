"""Rotationally symmetric Ricci flow: g = phi(x)^2 dx^2 + w(x)^2 g_{S^2}.

The x coordinate lives on [0, 1]; arclength is ds = phi dx. Everything
geometric is expressed through the two profile functions, so the flow
reduces to a 1D parabolic system:

    dw/dt      = w_ss - (1 - w_s^2)/w
    dlog(phi)/dt = 2 w_ss / w

where subscripts denote arclength derivatives.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from scipy.integrate import cumulative_trapezoid
from scipy.interpolate import PchipInterpolator
from scipy.ndimage import gaussian_filter1d, minimum_filter1d

from .errors import (
    DivergenceError,
    ParameterError,
    PinchedProfileError,
)
from .grid import _deriv1

TOPOLOGY_MODES = ("closed-sphere", "cylinder-segment", "cap")
END_CONDITIONS = ("frozen", "periodic")


@dataclass(frozen=True)
class WarpedProfile:
    """Metric of revolution sampled on a uniform x-grid over [0, 1].

    topology_mode:
      closed-sphere    poles at both ends (w = 0, |dw/ds| = 1 there)
      cylinder-segment open at both ends (w > 0 everywhere)
      cap              pole at x = 0, open at x = 1
    end_condition applies to open ends only: frozen holds them fixed,
    periodic identifies x = 0 with x = 1 (cylinder-segment only).
    """

    phi: np.ndarray
    w: np.ndarray
    topology_mode: str = "closed-sphere"
    end_condition: str = "frozen"

    def __post_init__(self):
        phi = np.asarray(self.phi, dtype=float)
        w = np.asarray(self.w, dtype=float)
        object.__setattr__(self, "phi", phi)
        object.__setattr__(self, "w", w)
        if phi.ndim != 1 or phi.shape != w.shape:
            raise ParameterError("phi and w must be 1D arrays of equal length")
        if phi.size < 8:
            raise ParameterError("profile needs at least 8 nodes")
        if self.topology_mode not in TOPOLOGY_MODES:
            raise ParameterError(f"unknown topology_mode {self.topology_mode!r}")
        if self.end_condition not in END_CONDITIONS:
            raise ParameterError(f"unknown end_condition {self.end_condition!r}")
        if self.end_condition == "periodic" and self.topology_mode != "cylinder-segment":
            raise ParameterError("periodic ends only make sense for cylinder-segment")
        if np.min(phi) <= 0:
            raise ParameterError("phi must be positive everywhere")
        inner = w[self._interior_slice()]
        if inner.size and np.min(inner) <= 0:
            node = int(np.argmin(w[1:-1])) + 1
            raise PinchedProfileError(node, float(np.min(inner)))
        if self.topology_mode == "closed-sphere":
            if w[0] != 0.0 or w[-1] != 0.0:
                raise ParameterError("closed-sphere mode requires w = 0 at both ends")
        elif self.topology_mode == "cap":
            if w[0] != 0.0:
                raise ParameterError("cap mode requires w = 0 at x = 0")
            if w[-1] <= 0:
                raise ParameterError("cap mode requires w > 0 at x = 1")
        else:
            if w[0] <= 0 or w[-1] <= 0:
                raise ParameterError("cylinder-segment mode requires w > 0 at the ends")

    def _interior_slice(self):
        if self.topology_mode == "closed-sphere":
            return slice(1, -1)
        if self.topology_mode == "cap":
            return slice(1, None)
        return slice(None)

    @property
    def n_nodes(self) -> int:
        return self.phi.size

    @property
    def dx(self) -> float:
        return 1.0 / (self.n_nodes - 1)

    @property
    def periodic(self) -> bool:
        return self.end_condition == "periodic"

    def arclength(self) -> np.ndarray:
        """s(x) = integral of phi dx from the left end."""
        return cumulative_trapezoid(self.phi, dx=self.dx, initial=0.0)

    def total_length(self) -> float:
        s = self.arclength()
        if self.periodic:
            # wrap-around cell between the last and first node
            return float(s[-1] + 0.5 * (self.phi[-1] + self.phi[0]) * self.dx)
        return float(s[-1])

    def min_spacing(self) -> float:
        """Smallest arclength cell, the quantity entering the CFL bound."""
        mids = 0.5 * (self.phi[1:] + self.phi[:-1]) * self.dx
        return float(np.min(mids))

    def d_ds(self, f: np.ndarray, parity: int = 1) -> np.ndarray:
        """First arclength derivative of a nodal field.

        Fourth-order stencils. At poles the field is extended by mirror
        symmetry (parity +1 for even fields such as u = w^2 or phi, -1 for
        odd ones such as w): symmetric stencils keep the delicate pole
        regularity u ~ s^2 self-correcting, where one-sided rows let it
        drift. parity applies only at pole ends; open ends stay one-sided.
        """
        if self.periodic:
            return _deriv1_quartic(f, self.dx, True) / self.phi
        pole_l = self.topology_mode in ("closed-sphere", "cap")
        pole_r = self.topology_mode == "closed-sphere"
        return (
            _deriv1_quartic_mirror(
                f,
                self.dx,
                parity if pole_l else 0,
                parity if pole_r else 0,
            )
            / self.phi
        )

    def d2_ds2(self, f: np.ndarray, parity: int = 1) -> np.ndarray:
        return self.d_ds(self.d_ds(f, parity), -parity)


def _deriv1_quartic(f: np.ndarray, h: float, periodic: bool) -> np.ndarray:
    """Fourth-order first derivative of a 1D nodal field."""
    f = np.asarray(f, dtype=float)
    if periodic:
        return (
            np.roll(f, 2) - 8 * np.roll(f, 1) + 8 * np.roll(f, -1) - np.roll(f, -2)
        ) / (12 * h)
    out = np.empty_like(f)
    out[2:-2] = (f[:-4] - 8 * f[1:-3] + 8 * f[3:-1] - f[4:]) / (12 * h)
    out[0] = (-25 * f[0] + 48 * f[1] - 36 * f[2] + 16 * f[3] - 3 * f[4]) / (12 * h)
    out[1] = (-3 * f[0] - 10 * f[1] + 18 * f[2] - 6 * f[3] + f[4]) / (12 * h)
    out[-2] = (3 * f[-1] + 10 * f[-2] - 18 * f[-3] + 6 * f[-4] - f[-5]) / (12 * h)
    out[-1] = (25 * f[-1] - 48 * f[-2] + 36 * f[-3] - 16 * f[-4] + 3 * f[-5]) / (12 * h)
    return out


def _deriv1_quartic_mirror(f: np.ndarray, h: float, parity_l: int, parity_r: int) -> np.ndarray:
    """Fourth-order first derivative with mirror ghost nodes at pole ends.

    parity +1/-1 extends the field evenly/oddly about the end node; 0 keeps
    the one-sided stencil of _deriv1_quartic at that end.
    """
    out = _deriv1_quartic(f, h, False)
    if parity_l:
        g = parity_l * f[1:3]
        out[0] = (g[1] - 8 * g[0] + 8 * f[1] - f[2]) / (12 * h)
        out[1] = (g[0] - 8 * f[0] + 8 * f[2] - f[3]) / (12 * h)
    if parity_r:
        g = parity_r * f[-3:-1]
        out[-1] = (f[-3] - 8 * f[-2] + 8 * g[1] - g[0]) / (12 * h)
        out[-2] = (f[-4] - 8 * f[-3] + 8 * f[-1] - g[1]) / (12 * h)
    return out


def _pole_fill(values: np.ndarray, pole_left: bool, pole_right: bool) -> np.ndarray:
    """Replace pole-node entries by quadratic extrapolation from the interior.

    Curvature expressions are 0/0 at a smooth pole; the limit exists and a
    3-point extrapolation reproduces it to the stencil's order.
    """
    out = values.copy()
    if pole_left:
        out[0] = 3 * values[1] - 3 * values[2] + values[3]
    if pole_right:
        out[-1] = 3 * values[-2] - 3 * values[-3] + values[-4]
    return out


def _poles(p: WarpedProfile):
    left = p.topology_mode in ("closed-sphere", "cap")
    right = p.topology_mode == "closed-sphere"
    return left, right


def warped_curvatures(p: WarpedProfile) -> dict:
    """Per-node curvature of the ansatz.

    Returns K_sph (sectional curvature of the cross-sphere planes),
    K_mix (radial/spherical mixed planes), the two distinct unit-frame
    Ricci eigenvalues, and the scalar curvature
    R = -4 w_ss / w + 2 (1 - w_s^2) / w^2.
    """
    pole_l, pole_r = _poles(p)
    w = p.w
    ws = p.d_ds(w, parity=-1)
    wss = p.d_ds(ws, parity=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        k_sph = (1.0 - ws**2) / w**2
        k_mix = -wss / w
    k_sph = _pole_fill(k_sph, pole_l, pole_r)
    k_mix = _pole_fill(k_mix, pole_l, pole_r)
    ric_radial = 2.0 * k_mix
    ric_sphere = k_mix + k_sph
    scalar = 2.0 * k_sph + 4.0 * k_mix
    return {
        "K_sph": k_sph,
        "K_mix": k_mix,
        "Ric_radial": ric_radial,
        "Ric_sphere": ric_sphere,
        "R": scalar,
    }


def _log_phi_rate(p: WarpedProfile):
    """The x-gauge rate d(log phi)/dt = 2 w_ss / w = (u_ss - u_s^2/(2u))/u.

    A 0/0 limit at poles (value -2 K_mix there), filled by extrapolation.
    """
    pole_l, pole_r = _poles(p)
    u = p.w**2
    us = p.d_ds(u, parity=1)
    uss = p.d_ds(us, parity=-1)
    with np.errstate(divide="ignore", invalid="ignore"):
        q = (uss - us**2 / (2.0 * u)) / u
    q = _pole_fill(q, pole_l, pole_r)
    if pole_l:
        q[1] = 3 * q[2] - 3 * q[3] + q[4]
    if pole_r:
        q[-2] = 3 * q[-3] - 3 * q[-4] + q[-5]
    return u, us, uss, q


def _rates_u(p: WarpedProfile):
    """Time derivatives (du/dt, dphi/dt) in the squared-radius variable u = w^2.

    The material-gauge reduction is exactly du/dt = u_ss - 2, a uniformly
    parabolic equation with no 1/w terms. Topologies with poles are stepped
    in the normalized-arclength gauge instead: each node is pinned at a
    fixed fraction of total arclength, so phi changes only by the uniform
    factor Ldot/L and u picks up the tangential term V u_s with

        V(s) = (s/L) * I(L) - I(s),      I(s) = integral_0^s 2 w_ss / w ds'.

    Integrating the smooth rate 2 w_ss / w (= -2 K_mix) makes V noise-
    damping, where the pointwise x-gauge phi equation amplifies grid-scale
    perturbations near poles (it has no diffusion of its own).
    """
    pole_l, pole_r = _poles(p)
    u, us, uss, q = _log_phi_rate(p)
    du = uss - 2.0
    if pole_l or pole_r:
        s = p.arclength()
        length = s[-1]
        integ = cumulative_trapezoid(q, s, initial=0.0)
        v = (s / length) * integ[-1] - integ
        du = du + v * us
        dphi = p.phi * (integ[-1] / length)
        if pole_l:
            du[0] = 0.0
        if pole_r:
            du[-1] = 0.0
        if p.topology_mode == "cap":
            du[-1] = 0.0
    else:
        dphi = p.phi * q
        if p.topology_mode == "cylinder-segment" and not p.periodic:
            du[0] = du[-1] = 0.0
            dphi[0] = dphi[-1] = 0.0
    if not np.all(np.isfinite(du)) or not np.all(np.isfinite(dphi)):
        raise DivergenceError("non-finite time derivative", last_snapshot=p)
    return du, dphi


def warped_rhs(p: WarpedProfile):
    """Time derivatives (dw/dt, dphi/dt) of the reduced Ricci flow.

    dw/dt = w_ss - (1 - w_s^2)/w and dphi/dt = phi * 2 w_ss / w, i.e. the
    x-gauge rates with no tangential motion. Pole nodes get zero rate
    (their values are fixed by the regularity conditions).
    """
    _, _, uss, q = _log_phi_rate(p)
    du = uss - 2.0
    dphi = p.phi * q
    dw = np.zeros_like(du)
    pole_l, pole_r = _poles(p)
    lo = 1 if pole_l else 0
    hi = -1 if pole_r else None
    sl = slice(lo, hi)
    dw[sl] = du[sl] / (2.0 * p.w[sl])
    if pole_l:
        dphi[0] = 0.0
    if pole_r:
        dphi[-1] = 0.0
    if p.topology_mode == "cylinder-segment" and not p.periodic:
        dw[0] = dw[-1] = 0.0
        dphi[0] = dphi[-1] = 0.0
    return dw, dphi


def _enforce_boundaries(p: WarpedProfile) -> WarpedProfile:
    """Pin w = 0 at poles.

    The slope condition |dw/ds| = 1 is not imposed directly: with mirror
    stencils, holding u = w^2 at zero forces u_ss -> 2 at the pole (the
    Dirichlet consistency condition of du/dt = u_ss - 2), so the regular
    cone angle is restored dynamically.
    """
    pole_l, pole_r = _poles(p)
    if not (pole_l or pole_r):
        return p
    w = p.w.copy()
    if pole_l:
        w[0] = 0.0
    if pole_r:
        w[-1] = 0.0
    return replace(p, w=w)


@dataclass(frozen=True)
class StepControl:
    """Integration knobs for a warped-profile run."""

    cfl_fraction: float = 0.4
    max_R_threshold: float | None = None  # None: resolved to 1e4 x initial max R
    regrid_interval: int = 0  # 0 disables re-parametrization
    snapshot_every: int = 50
    extinction_floor: float = 0.02
    max_steps: int = 2_000_000

    def __post_init__(self):
        if not 0 < self.cfl_fraction < 1:
            raise ParameterError("cfl_fraction must lie in (0, 1)")
        if self.max_R_threshold is not None and self.max_R_threshold <= 0:
            raise ParameterError("max_R_threshold must be positive")
        if self.regrid_interval < 0 or self.snapshot_every < 1:
            raise ParameterError("bad cadence settings")


@dataclass(frozen=True)
class TerminalStatus:
    kind: str  # running | singular | extinct
    time: float | None = None
    location: int | None = None  # argmax-R node for singular stops


@dataclass
class FlowHistory:
    """Time-stamped snapshots of one flow, plus how the run ended."""

    times: list = field(default_factory=list)
    snapshots: list = field(default_factory=list)
    step_indices: list = field(default_factory=list)
    terminal_status: TerminalStatus = TerminalStatus("running")
    metadata: dict = field(default_factory=dict)
    monitors: object = None

    def append(self, t: float, p: WarpedProfile, step_index: int):
        if self.times and t <= self.times[-1]:
            raise ParameterError("snapshot times must be strictly increasing")
        self.times.append(float(t))
        self.snapshots.append(p)
        self.step_indices.append(int(step_index))


def max_stable_dt(p: WarpedProfile, control: StepControl) -> float:
    """Explicit-step bound: diffusive in u, advective in the gauge motion."""
    ds = p.min_spacing()
    dt = control.cfl_fraction * ds**2
    if p.topology_mode in ("closed-sphere", "cap"):
        _, _, _, q = _log_phi_rate(p)
        s = p.arclength()
        integ = cumulative_trapezoid(q, s, initial=0.0)
        vmax = float(np.max(np.abs((s / s[-1]) * integ[-1] - integ)))
        if vmax > 0:
            dt = min(dt, control.cfl_fraction * ds / vmax)
    return dt


def step(p: WarpedProfile, dt: float, control: StepControl) -> WarpedProfile:
    """One explicit midpoint (RK2) step of the reduced flow."""
    if dt <= 0:
        raise ParameterError("dt must be positive")
    if dt > max_stable_dt(p, control) * (1 + 1e-12):
        raise ParameterError(
            f"dt={dt:.3e} violates the CFL bound {max_stable_dt(p, control):.3e}"
        )
    u = p.w**2
    du1, dphi1 = _rates_u(p)
    try:
        mid = _enforce_boundaries(
            replace(
                p,
                w=np.sqrt(np.maximum(u + 0.5 * dt * du1, 0.0)),
                phi=p.phi + 0.5 * dt * dphi1,
            )
        )
        du2, dphi2 = _rates_u(mid)
        new_u = u + dt * du2
        new_phi = p.phi + dt * dphi2
        if not (np.all(np.isfinite(new_u)) and np.all(np.isfinite(new_phi))):
            raise DivergenceError("non-finite state after step", last_snapshot=p)
        new_w = np.sqrt(np.maximum(new_u, 0.0))
        return _enforce_boundaries(replace(p, w=new_w, phi=new_phi))
    except ParameterError as exc:
        # the substep left the admissible cone (e.g. phi <= 0): blow-up, not misuse
        raise DivergenceError(f"state left admissible range: {exc}", last_snapshot=p)


def regrid(p: WarpedProfile, focus=None, n_new: int | None = None) -> WarpedProfile:
    """Re-parametrize x along arclength with extra node density where R is large.

    Node positions equidistribute m(s) = 1/L + sqrt(max(R, 0)), which keeps
    O(1) nodes per curvature radius: a collapsing neck (R ~ 2/w^2) retains
    local spacing O(w) instead of starving, while flat stretches relax to
    uniform arclength. Doubles as the tangential regauging that keeps the
    phi profile smooth (the x-gauge phi equation has no diffusion of its
    own and grows grid-scale sawteeth if never re-meshed).

    focus, when given, is a sequence of (center, halfwidth, height) triples
    added to the density as flat-topped bumps — used to concentrate nodes
    around a prospective cut site beyond what curvature alone demands.
    n_new resamples onto a different node count.

    Profiles move by monotone cubic (PCHIP) interpolation; endpoint values
    are preserved exactly. Geometry is untouched up to interpolation error.
    """
    if p.periodic:
        return p
    n = p.n_nodes
    n_out = n if n_new is None else int(n_new)
    if n_out < 5:
        raise ParameterError("n_new must be at least 5")
    s = p.arclength()
    length = s[-1]
    # Density from the cross-sphere sectional curvature, not R: K_sph needs
    # only first derivatives of w, so interpolation noise feeds back one
    # order more weakly than through w_ss, and in a neck K_sph ~ R/2 still
    # tracks the collapse scale. Smoothing over a fixed arclength fraction
    # removes the remaining node-scale ripple before it can steer spacing.
    scalar = warped_curvatures(p)["K_sph"]
    dens = 1.0 / length + np.sqrt(np.maximum(scalar, 0.0))
    s_u = np.linspace(0.0, length, 2 * n - 1)
    sigma = max(3.0, 0.005 * (2 * n - 1))
    dens_u = np.interp(s_u, s, dens)
    if focus is not None:
        for center, halfwidth, height in focus:
            dens_u += height * np.exp(-(((s_u - center) / halfwidth) ** 4))
    dens_u = gaussian_filter1d(dens_u, sigma=sigma, mode="nearest")
    cum = cumulative_trapezoid(dens_u, s_u, initial=0.0)
    targets = np.linspace(0.0, cum[-1], n_out)
    # monotone C^1 inversion of the mass map: piecewise-linear inversion
    # leaves the same sawtooth wherever the density ramps steeply
    s_eq = PchipInterpolator(cum, s_u)(targets)
    s_eq[0], s_eq[-1] = 0.0, length
    # Blend in cell widths, not positions: a convex combination of two
    # positive spacing fields stays positive, so the remapped grid is
    # monotone no matter how far nodes must migrate. The edge ramp keeps
    # near-pole cells at (renormalized) current widths, where the profile
    # is most sensitive to interpolation.
    m = max(8, min(24, n_out // 8))
    wgt = np.ones(n_out - 1)
    edge = _smoothstep((np.arange(2 * m, dtype=float) - m) / m)
    wgt[:2 * m] = edge
    wgt[-2 * m:] = np.minimum(wgt[-2 * m:], edge[::-1])
    if n_out == n:
        ds_cur = np.diff(s)
    else:
        ds_cur = np.interp(s_eq[:-1], s[:-1], np.diff(s) * ((n - 1) / (n_out - 1)))
    ds_t = wgt * np.diff(s_eq) + (1.0 - wgt) * ds_cur
    ds_t *= length / ds_t.sum()
    s_new = np.concatenate([[0.0], np.cumsum(ds_t)])
    s_new[-1] = length
    # interpolate the pole-regularized quotient v = u / prod (d_pole / L)^2
    # of u = w^2: u itself vanishes like s^2 at a pole, and raw-u
    # interpolation error there compounds over repeated regrids into
    # curvature blow-up (the curvatures divide by s^2)
    pole_l, pole_r = _poles(p)

    def pole_weight(si):
        wgt = np.ones_like(si)
        if pole_l:
            wgt *= (si / length) ** 2
        if pole_r:
            wgt *= ((length - si) / length) ** 2
        return wgt
    with np.errstate(divide="ignore", invalid="ignore"):
        v = p.w**2 / pole_weight(s)
    if pole_l:
        v[0] = 3.0 * v[1] - 3.0 * v[2] + v[3]
    if pole_r:
        v[-1] = 3.0 * v[-2] - 3.0 * v[-3] + v[-4]
    u_new = np.maximum(PchipInterpolator(s, v)(s_new) * pole_weight(s_new), 0.0)
    w_new = np.sqrt(u_new)
    w_new[0], w_new[-1] = p.w[0], p.w[-1]
    phi_new = np.gradient(s_new, 1.0 / (n_out - 1))
    if np.min(phi_new) <= 0:
        return p  # degenerate redistribution: skip this regrid
    return _enforce_boundaries(
        WarpedProfile(phi_new, w_new, p.topology_mode, p.end_condition)
    )


def _smoothstep(t: np.ndarray) -> np.ndarray:
    t = np.clip(t, 0.0, 1.0)
    return t * t * (3.0 - 2.0 * t)


def _pole_margin_slice(p: WarpedProfile, margin: int = 4) -> slice:
    """Interior slice excluding the pole-adjacent nodes on pole-ended grids."""
    pole_l, pole_r = _poles(p)
    return slice(margin if pole_l else 0, -margin if pole_r else None)


def _stop_scan_rmax(p: WarpedProfile, r: np.ndarray):
    """(max R, argmax) for the curvature cutoff, robust to unresolved spikes.

    R is eroded over three cells before the scan: a curvature feature
    confined to one or two grid cells is below the stencil's resolution
    and is finite-difference noise (kinks, regrid seams), while genuine
    necks and caps vary smoothly over many cells and pass unchanged.
    Pole-adjacent nodes are excluded for the same reason.
    """
    core = _pole_margin_slice(p)
    eroded = minimum_filter1d(r, size=3, mode="nearest")[core]
    return float(np.max(eroded)), int(np.argmax(eroded)) + (core.start or 0)


def run(
    p: WarpedProfile,
    control: StepControl,
    t_end: float,
    t_start: float = 0.0,
    step_index: int = 0,
    history: FlowHistory | None = None,
) -> FlowHistory:
    """Advance the flow to t_end, extinction, or the curvature cutoff.

    Deterministic: the step size is a pure function of the current state,
    and cadences key off the global step index, so a resumed run retraces
    an uninterrupted one bit for bit.
    """
    if t_end <= t_start:
        raise ParameterError("t_end must exceed the current time")
    hist = history if history is not None else FlowHistory()
    hist.metadata.setdefault("topology_mode", p.topology_mode)
    hist.metadata.setdefault("end_condition", p.end_condition)
    curv = warped_curvatures(p)
    r_cut = control.max_R_threshold
    if r_cut is None:
        r_cut = 1e4 * float(np.max(curv["R"][_pole_margin_slice(p)]))
        if r_cut <= 0:
            r_cut = np.inf
    hist.metadata.setdefault("max_R_threshold", float(r_cut))
    t = t_start
    if not hist.times:
        hist.append(t, p, step_index)
    while t < t_end:
        curv = warped_curvatures(p)
        # assess the cutoff away from pole ends: the curvature limit there is
        # extrapolated through a 0/0, and the adjacent stencils see only
        # noise once w is grid-scale; genuine tip curvature spans many nodes
        core = _pole_margin_slice(p)
        r_max = float(np.max(curv["R"][core]))
        argmax = int(np.argmax(curv["R"][core])) + (core.start or 0)
        inner = p.w[p._interior_slice()]
        if float(np.max(p.w)) < control.extinction_floor:
            hist.terminal_status = TerminalStatus("extinct", t)
            break
        if r_max >= r_cut:
            hist.terminal_status = TerminalStatus("singular", t, argmax)
            break
        if inner.size and float(np.min(inner)) <= 0:
            node = int(np.argmin(p.w[1:-1])) + 1
            hist.terminal_status = TerminalStatus("singular", t, node)
            break
        dt = max_stable_dt(p, control)
        if r_max > 0:
            dt = min(dt, 0.1 / r_max)
        dt = min(dt, t_end - t)
        try:
            p = step(p, dt, control)
        except PinchedProfileError as exc:
            hist.terminal_status = TerminalStatus("singular", t, exc.node)
            break
        t += dt
        step_index += 1
        if control.regrid_interval and step_index % control.regrid_interval == 0:
            p = regrid(p)
        if step_index % control.snapshot_every == 0 or t >= t_end:
            hist.append(t, p, step_index)
        if step_index >= control.max_steps:
            raise DivergenceError(
                "step budget exhausted", last_snapshot=p, last_time=t
            )
    else:
        hist.terminal_status = TerminalStatus("running", t)
    if hist.times[-1] < t and hist.terminal_status.kind != "running":
        hist.append(t, p, step_index)
    return hist


def save_checkpoint(path, p: WarpedProfile, t: float, step_index: int, control: StepControl):
    """Bit-exact state dump: profile, clock, step counter, and control knobs."""
    np.savez(
        path,
        format=np.array("riccilab-checkpoint-1"),
        phi=p.phi,
        w=p.w,
        topology_mode=np.array(p.topology_mode),
        end_condition=np.array(p.end_condition),
        t=np.float64(t),
        step_index=np.int64(step_index),
        cfl_fraction=np.float64(control.cfl_fraction),
        max_R_threshold=np.float64(
            control.max_R_threshold if control.max_R_threshold is not None else np.nan
        ),
        regrid_interval=np.int64(control.regrid_interval),
        snapshot_every=np.int64(control.snapshot_every),
        extinction_floor=np.float64(control.extinction_floor),
        max_steps=np.int64(control.max_steps),
    )


def load_checkpoint(path):
    with np.load(path, allow_pickle=False) as z:
        if str(z["format"]) != "riccilab-checkpoint-1":
            raise ParameterError(f"unrecognized checkpoint format in {path}")
        p = WarpedProfile(
            z["phi"], z["w"], str(z["topology_mode"]), str(z["end_condition"])
        )
        thr = float(z["max_R_threshold"])
        control = StepControl(
            cfl_fraction=float(z["cfl_fraction"]),
            max_R_threshold=None if np.isnan(thr) else thr,
            regrid_interval=int(z["regrid_interval"]),
            snapshot_every=int(z["snapshot_every"]),
            extinction_floor=float(z["extinction_floor"]),
            max_steps=int(z["max_steps"]),
        )
        return p, float(z["t"]), int(z["step_index"]), control


def embed_profile(p: WarpedProfile, x_window=(0.2, 0.8), n_theta=33, n_psi=9):
    """Express the ansatz as an explicit 3D chart metric for cross-checking.

    Coordinates (x, theta, psi) with g = diag(phi^2, w^2, w^2 sin^2 theta);
    theta stays away from the sphere's coordinate poles and x away from any
    profile poles so the chart is non-degenerate.
    """
    from .grid import GridMetric

    n = p.n_nodes
    i0 = int(round(x_window[0] * (n - 1)))
    i1 = int(round(x_window[1] * (n - 1)))
    if i1 - i0 < 5:
        raise ParameterError("x window too narrow for the chart stencils")
    phi = p.phi[i0 : i1 + 1]
    w = p.w[i0 : i1 + 1]
    theta = np.linspace(0.6, np.pi - 0.6, n_theta)
    psi = np.linspace(0.0, 1.0, n_psi)
    nx = phi.size
    g = np.zeros((nx, n_theta, n_psi, 3, 3))
    g[..., 0, 0] = (phi**2)[:, None, None]
    g[..., 1, 1] = (w**2)[:, None, None]
    g[..., 2, 2] = (w**2)[:, None, None] * (np.sin(theta) ** 2)[None, :, None]
    return GridMetric(
        (p.dx, theta[1] - theta[0], psi[1] - psi[0]),
        g,
        (False, False, False),
    ), slice(i0, i1 + 1)
