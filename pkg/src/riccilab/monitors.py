"""Controlled quantities along a flow history and their inequality checks.

Every monitor is a pure function of the recorded snapshots: the scalar
minimum ODE bound, the negative-curvature pinching ratio, the Harnack
deficit, the volume envelope, marker distance contraction, and the
minimal cross-sphere energy W2 together with its decay inequality.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .errors import ParameterError
from .warped import FlowHistory, WarpedProfile, _pole_fill, _poles, warped_curvatures


def total_volume(p: WarpedProfile) -> float:
    """Volume of the warped metric: integral of 4 pi w^2 along arclength."""
    vol = np.trapezoid(4.0 * np.pi * p.w**2 * p.phi, dx=p.dx)
    if p.periodic:
        vol += 4.0 * np.pi * 0.5 * (p.w[-1] ** 2 * p.phi[-1] + p.w[0] ** 2 * p.phi[0]) * p.dx
    return float(vol)


def rescale_profile(p: WarpedProfile, lam: float) -> WarpedProfile:
    """Scale the metric g -> lam^2 g (both phi and w pick up a factor lam)."""
    from dataclasses import replace

    if lam <= 0:
        raise ParameterError("scale factor must be positive")
    return replace(p, phi=lam * p.phi, w=lam * p.w)


def scalar_time_derivative(p: WarpedProfile) -> np.ndarray:
    """dR/dt along the flow: Laplacian of R plus 2 |Ric|^2.

    The radial Laplacian of a rotationally symmetric scalar is
    f_ss + 2 (w_s / w) f_s; the drift term is a 0/0 limit at poles.
    """
    curv = warped_curvatures(p)
    r = curv["R"]
    rs = p.d_ds(r, parity=1)
    rss = p.d_ds(rs, parity=-1)
    ws = p.d_ds(p.w, parity=-1)
    pole_l, pole_r = _poles(p)
    with np.errstate(divide="ignore", invalid="ignore"):
        drift = 2.0 * ws * rs / p.w
    drift = _pole_fill(drift, pole_l, pole_r)
    ric_sq = curv["Ric_radial"] ** 2 + 2.0 * curv["Ric_sphere"] ** 2
    return rss + drift + 2.0 * ric_sq


def min_sectional(p: WarpedProfile) -> np.ndarray:
    curv = warped_curvatures(p)
    return np.minimum(curv["K_sph"], curv["K_mix"])


def _pinching_ratio(p: WarpedProfile):
    """Per-node max(0, -min sectional) / (1 + |R|); returns (max, at-argmax-R)."""
    curv = warped_curvatures(p)
    ratio = np.maximum(0.0, -np.minimum(curv["K_sph"], curv["K_mix"])) / (
        1.0 + np.abs(curv["R"])
    )
    return float(np.max(ratio)), float(ratio[int(np.argmax(curv["R"]))])


def _w2(p: WarpedProfile) -> float:
    """Area of the smallest stationary cross-sphere.

    A cross-sphere is a minimal surface exactly where w_s = 0 (its mean
    curvature is 2 w_s / w), so the homotopically relevant minimal-sphere
    energy is the least area among the interior critical points of w.
    The near-pole spheres, though smaller, bound tiny balls and carry no
    energy; they are excluded. The critical radius is refined by a
    parabola through the three nodes straddling each sign change of w_s.
    """
    ws = p.d_ds(p.w, parity=-1)
    lo = 1 if p.topology_mode in ("closed-sphere", "cap") else 0
    hi = p.n_nodes - 2 if p.topology_mode == "closed-sphere" else p.n_nodes - 1
    best = None
    for i in range(lo, hi):
        if ws[i] == 0.0 or ws[i] * ws[i + 1] < 0.0:
            j = i if abs(ws[i]) <= abs(ws[i + 1]) else i + 1
            j = min(max(j, 1), p.n_nodes - 2)
            a, b, c = p.w[j - 1], p.w[j], p.w[j + 1]
            denom = a - 2.0 * b + c
            wstar = b - (c - a) ** 2 / (8.0 * denom) if abs(denom) > 1e-14 * max(abs(b), 1.0) else b
            best = wstar if best is None else min(best, wstar)
    if best is None:
        best = float(np.min(p.w[p._interior_slice()]))
    return float(4.0 * np.pi * best**2)


def marker_distances(p: WarpedProfile, markers) -> np.ndarray:
    """Pairwise arclength distances between fixed coordinate points."""
    xs = np.asarray(markers, dtype=float)
    if xs.size < 2 or np.any(xs < 0) or np.any(xs > 1):
        raise ParameterError("need >= 2 markers with coordinates in [0, 1]")
    grid = np.linspace(0.0, 1.0, p.n_nodes)
    s = np.interp(xs, grid, p.arclength())
    return np.abs(s[:, None] - s[None, :])[np.triu_indices(xs.size, k=1)]


def harnack_expression(p: WarpedProfile, t: float) -> np.ndarray:
    """Per-node infimum over vector fields V of dR/dt + R/t + 2 dR.V + 2 Ric(V,V).

    With positive Ricci the infimum is closed-form,
    dR/dt + R/t - (1/2) dR . Ric^{-1} . dR (only the radial slot of dR is
    nonzero in this symmetry class). Where the radial Ricci eigenvalue is
    not positive the quadratic has no interior minimum; those nodes fall
    back to sampling V over a fixed grid of radial magnitudes.
    """
    if t <= 0:
        raise ParameterError("the expression is defined for t > 0")
    curv = warped_curvatures(p)
    r = curv["R"]
    rs = p.d_ds(r, parity=1)
    base = scalar_time_derivative(p) + r / t
    ric_rr = curv["Ric_radial"]
    out = np.empty_like(r)
    ok = ric_rr > 1e-12
    out[ok] = base[ok] - 0.5 * rs[ok] ** 2 / ric_rr[ok]
    if not np.all(ok):
        bad = ~ok
        scale = (np.abs(rs[bad]) + 1.0) / (np.abs(ric_rr[bad]) + 1.0)
        v = np.linspace(-1.0, 1.0, 41)[None, :] * scale[:, None]
        sampled = base[bad, None] + 2.0 * rs[bad, None] * v + 2.0 * ric_rr[bad, None] * v**2
        out[bad] = sampled.min(axis=1)
    return out


@dataclass
class MonitorTrace:
    """Per-snapshot record of every monitored scalar."""

    times: np.ndarray
    r_min: np.ndarray
    r_max: np.ndarray
    total_volume: np.ndarray
    pinching_ratio: np.ndarray
    pinching_at_rmax: np.ndarray
    w2: np.ndarray
    harnack_deficit: np.ndarray
    marker_distances: np.ndarray  # (n_snapshots, n_pairs); may have 0 pairs
    min_spacing: float
    dt_step: float
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        n = len(self.times)
        for name in ("r_min", "r_max", "total_volume", "pinching_ratio",
                     "pinching_at_rmax", "w2", "harnack_deficit"):
            if len(getattr(self, name)) != n:
                raise ParameterError(f"{name} length does not match snapshot count")
        if np.any(self.total_volume <= 0):
            raise ParameterError("total volume must stay positive")


def build_trace(history: FlowHistory, markers=()) -> MonitorTrace:
    """Evaluate every monitor on each snapshot of a warped-profile history."""
    if not history.snapshots:
        raise ParameterError("history has no snapshots")
    times = np.asarray(history.times, dtype=float)
    n = times.size
    r_min = np.empty(n)
    r_max = np.empty(n)
    vol = np.empty(n)
    pinch = np.empty(n)
    pinch_rmax = np.empty(n)
    w2 = np.full(n, np.nan)
    harnack = np.full(n, np.nan)
    dists = np.zeros((n, max(0, len(markers) * (len(markers) - 1) // 2)))
    for i, p in enumerate(history.snapshots):
        curv = warped_curvatures(p)
        r_min[i] = float(np.min(curv["R"]))
        r_max[i] = float(np.max(curv["R"]))
        vol[i] = total_volume(p)
        pinch[i], pinch_rmax[i] = _pinching_ratio(p)
        if p.topology_mode == "closed-sphere":
            w2[i] = _w2(p)
        if times[i] > 0:
            harnack[i] = float(np.min(harnack_expression(p, times[i])))
        if len(markers) >= 2:
            dists[i] = marker_distances(p, markers)
    steps = np.asarray(history.step_indices, dtype=float)
    dsteps = np.diff(steps)
    dt_step = float(np.max(np.diff(times)[dsteps > 0] / dsteps[dsteps > 0])) if np.any(dsteps > 0) else 0.0
    return MonitorTrace(
        times=times,
        r_min=r_min,
        r_max=r_max,
        total_volume=vol,
        pinching_ratio=pinch,
        pinching_at_rmax=pinch_rmax,
        w2=w2,
        harnack_deficit=harnack,
        marker_distances=dists,
        min_spacing=min(p.min_spacing() for p in history.snapshots),
        dt_step=dt_step,
        metadata=dict(history.metadata),
    )


@dataclass(frozen=True)
class IntervalVerdict:
    """Outcome of one ODE-inequality check on a snapshot interval."""

    t_start: float
    t_end: float
    observed_rate: float
    bound: float
    tolerance: float
    passed: bool


def _ode_tol(trace: MonitorTrace, bounds: np.ndarray) -> float:
    """Discretization allowance: spatial truncation plus time-stepping error."""
    scale = float(np.max(np.abs(bounds))) if len(bounds) else 0.0
    return 10.0 * scale * trace.min_spacing**2 + scale * trace.dt_step + 1e-12


def check_rmin_ode(trace: MonitorTrace) -> list[IntervalVerdict]:
    """Per-interval check of dR_min/dt >= (2/3) R_min^2."""
    if len(trace.times) < 2:
        raise ParameterError("need at least two snapshots")
    bounds = (2.0 / 3.0) * trace.r_min[:-1] ** 2
    tol = _ode_tol(trace, bounds)
    out = []
    for i in range(len(bounds)):
        dt = trace.times[i + 1] - trace.times[i]
        rate = (trace.r_min[i + 1] - trace.r_min[i]) / dt
        out.append(
            IntervalVerdict(
                trace.times[i], trace.times[i + 1], rate, bounds[i], tol,
                rate >= bounds[i] - tol,
            )
        )
    return out


def pinching_trace(history: FlowHistory):
    """Series of the max pinching ratio and the ratio at the argmax-R node."""
    if not history.snapshots:
        raise ParameterError("history has no snapshots")
    pairs = [_pinching_ratio(p) for p in history.snapshots]
    return np.array([a for a, _ in pairs]), np.array([b for _, b in pairs])


def harnack_deficit(history: FlowHistory, t: float) -> float:
    """Minimum over nodes of the V-minimized differential Harnack expression.

    Meaningful only on runs with nonnegative sectional curvature from t = 0
    (the hypothesis of the inequality); t must be positive.
    """
    if t <= 0:
        raise ParameterError("t must be positive")
    times = np.asarray(history.times)
    i = int(np.argmin(np.abs(times - t)))
    return float(np.min(harnack_expression(history.snapshots[i], float(times[i]))))


def volume_bound_check(trace: MonitorTrace, nonneg_curvature: bool = False):
    """Vol(t) <= Vol(0) exp(-R_min(0) t), plus monotone decay when curvature >= 0."""
    if len(trace.times) < 2:
        raise ParameterError("need at least two snapshots")
    envelope = trace.total_volume[0] * np.exp(-trace.r_min[0] * trace.times)
    tol = 10.0 * trace.min_spacing**2 + trace.dt_step * max(abs(trace.r_min[0]), 1.0)
    ok = bool(np.all(trace.total_volume <= envelope * (1.0 + tol)))
    if nonneg_curvature:
        ok = ok and bool(np.all(np.diff(trace.total_volume) <= tol * trace.total_volume[:-1]))
    return ok


def distance_contraction_check(history: FlowHistory, markers) -> bool:
    """Marker-pair geodesic distances non-increasing along the run.

    Valid under nonnegative sectional curvature; markers are fixed
    coordinates in [0, 1].
    """
    if len(history.snapshots) < 2:
        raise ParameterError("need at least two snapshots")
    d = np.array([marker_distances(p, markers) for p in history.snapshots])
    h = min(p.min_spacing() for p in history.snapshots)
    tol = 10.0 * h**2 + 1e-10
    return bool(np.all(np.diff(d, axis=0) <= tol))


def w2_trace(history: FlowHistory) -> np.ndarray:
    """Minimal cross-sphere area 4 pi min_interior(w)^2 per snapshot."""
    if not history.snapshots:
        raise ParameterError("history has no snapshots")
    if any(p.topology_mode != "closed-sphere" for p in history.snapshots):
        raise ParameterError("minimal-sphere energy needs closed-sphere topology")
    return np.array([_w2(p) for p in history.snapshots])


def check_w2_ode(trace: MonitorTrace) -> list[IntervalVerdict]:
    """Per-interval check of dW2/dt <= -4 pi - (1/2) R_min W2."""
    if len(trace.times) < 2:
        raise ParameterError("need at least two snapshots")
    if np.any(np.isnan(trace.w2)):
        raise ParameterError("minimal-sphere energy needs closed-sphere topology")
    bounds = -4.0 * np.pi - 0.5 * trace.r_min[:-1] * trace.w2[:-1]
    tol = _ode_tol(trace, bounds)
    out = []
    for i in range(len(bounds)):
        dt = trace.times[i + 1] - trace.times[i]
        rate = (trace.w2[i + 1] - trace.w2[i]) / dt
        out.append(
            IntervalVerdict(
                trace.times[i], trace.times[i + 1], rate, bounds[i], tol,
                rate <= bounds[i] + tol,
            )
        )
    return out


def records(trace: MonitorTrace) -> list[dict]:
    """Structured log: one flat record per snapshot."""
    out = []
    for i, t in enumerate(trace.times):
        rec = {
            "time": float(t),
            "r_min": float(trace.r_min[i]),
            "r_max": float(trace.r_max[i]),
            "total_volume": float(trace.total_volume[i]),
            "pinching_ratio": float(trace.pinching_ratio[i]),
            "w2": float(trace.w2[i]),
            "harnack_deficit": float(trace.harnack_deficit[i]),
        }
        for j, d in enumerate(trace.marker_distances[i]):
            rec[f"marker_dist_{j}"] = float(d)
        out.append(rec)
    return out


def write_csv(trace: MonitorTrace, path) -> None:
    """Export the trace as delimited rows, one per snapshot."""
    rows = records(trace)
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0].keys()))
        writer.writeheader()
        writer.writerows(rows)
