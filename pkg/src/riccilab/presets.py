"""Named starting configurations for the flow backends."""

from __future__ import annotations

import numpy as np

from .errors import ParameterError
from .grid import GridMetric
from .warped import StepControl, WarpedProfile

SCENARIOS = ("round-sphere", "cylinder-segment", "dumbbell", "flat-torus-perturbed")


def round_sphere(n_nodes: int = 257, radius: float = 1.0) -> WarpedProfile:
    """Round 3-sphere: w = rho sin(s / rho), total arclength pi rho."""
    if radius <= 0:
        raise ParameterError("radius must be positive")
    x = np.linspace(0.0, 1.0, n_nodes)
    w = radius * np.sin(np.pi * x)
    w[0] = w[-1] = 0.0
    return WarpedProfile(np.full(n_nodes, np.pi * radius), w, "closed-sphere")


def cylinder_segment(
    n_nodes: int = 513,
    w0: float = 1.0,
    length: float = 8.0,
    end_condition: str = "frozen",
) -> WarpedProfile:
    """Product cylinder of cross-radius w0.

    The default length keeps the frozen-end boundary layers (diffusion
    width ~ 2 sqrt(t)) away from the center through t = 0.4, so the center
    tracks the exact shrinking law to well under a percent.
    """
    if w0 <= 0 or length <= 0:
        raise ParameterError("w0 and length must be positive")
    return WarpedProfile(
        np.full(n_nodes, length), np.full(n_nodes, w0), "cylinder-segment", end_condition
    )


def _smootherstep(t: np.ndarray) -> np.ndarray:
    t = np.clip(t, 0.0, 1.0)
    return t**3 * (10.0 - 15.0 * t + 6.0 * t * t)


def _bulb_chain_profile(n_nodes, bulb_radius, neck_radii, neck_length, blend_length,
                        tent_slope, dimple_depth, dimple_width, tent_smoothing,
                        depart_angle):
    """Bulbs of one radius joined by thin, nearly cylindrical necks.

    Each neck is flat in u = w^2 apart from (a) a tent-shaped taper of small
    slope toward its center, which gives the curvature a monotone gradient
    along each horn so a target curvature level is crossed at a well-defined
    interior sphere, and (b) a narrow dip at the center that seeds slightly
    negative mixed sectional curvature at the future blowup node and fixes
    the pinch location. Built piecewise in u with smooth blends; the bulbs
    are exact sphere caps so the poles are regular.
    """
    rho = bulb_radius
    s_arc = rho * depart_angle  # where the sphere cap hands off to the blend
    seg = s_arc + blend_length
    if not np.pi / 2 < depart_angle < np.pi:
        raise ParameterError("depart_angle must lie in (pi/2, pi)")
    # interior bulb: blend up, sphere belly through the equator, blend down
    interior_gap = 2 * blend_length + rho * (2 * depart_angle - np.pi)
    centers = []
    pos = seg
    for k, w0 in enumerate(neck_radii):
        centers.append(pos + neck_length / 2)
        pos += neck_length
        if k < len(neck_radii) - 1:
            pos += interior_gap
    L = pos + seg
    s = np.linspace(0.0, L, n_nodes)

    def u_neck(si, c, w0):
        arg = neck_length / 2 - (np.sqrt((si - c) ** 2 + tent_smoothing**2) - tent_smoothing)
        tent = tent_slope * 0.5 * (arg + np.sqrt(arg**2 + tent_smoothing**2))
        dip = dimple_depth * np.exp(-(((si - c) / dimple_width) ** 2))
        return w0**2 - tent - dip

    # sphere-cap value measured from the nearest pole or interior bulb belly
    u = np.empty(n_nodes)
    for i, si in enumerate(s):
        # distance to nearest neck region
        best = None
        for c, w0 in zip(centers, neck_radii):
            d = si - c
            if best is None or abs(d) < abs(best[0]):
                best = (d, c, w0)
        d, c, w0 = best
        half = neck_length / 2
        if abs(d) <= half:
            u[i] = u_neck(si, c, w0)
            continue
        edge = c + np.sign(d) * half  # neck end on this side
        t_out = abs(si - edge)  # distance from the neck into blend + bulb
        if t_out <= blend_length:
            S = _smootherstep(t_out / blend_length)
            theta = depart_angle + (blend_length - t_out) / rho
            u_sph = (rho * np.sin(np.clip(theta, 0.0, np.pi))) ** 2
            # smooth floor at the neck value: the extended sphere arc passes
            # through zero, and blending below w0^2 would seed a spurious
            # waist inside the shoulder
            un = u_neck(si, c, w0)
            d = u_sph - un
            kappa = w0**2 * (1.0 - t_out / blend_length)  # vanishes at the sphere join
            u_sph = un + 0.5 * (d + np.sqrt(d * d + kappa**2))
            u[i] = (1.0 - S) * un + S * u_sph
        else:
            theta = depart_angle - (t_out - blend_length) / rho
            u[i] = (rho * np.sin(np.clip(theta, 0.0, np.pi))) ** 2
    w = np.sqrt(np.maximum(u, 0.0))
    w[0] = w[-1] = 0.0
    return WarpedProfile(np.full(n_nodes, L), w, "closed-sphere")


def dumbbell(
    n_nodes: int = 1025,
    bulb_radius: float = 1.25,
    neck_radius: float = 0.2,
    neck_length: float = 5.5,
    blend_length: float = 1.4,
    tent_slope: float = 9e-4,
    dimple_depth: float = 2e-4,
    dimple_width: float = 0.07,
    tent_smoothing: float = 0.1,
    depart_angle: float = 2.4,
) -> WarpedProfile:
    """Two spherical bulbs joined by a thin, nearly cylindrical neck.

    The neck pinches at its center well before the bulbs shrink, giving a
    localized singularity with the neck region staying close to a shrinking
    cylinder — the geometry the cut-and-glue pipeline is designed for.
    """
    if not 0 < neck_radius < bulb_radius:
        raise ParameterError("need 0 < neck_radius < bulb_radius")
    return _bulb_chain_profile(
        n_nodes, bulb_radius, [neck_radius], neck_length, blend_length,
        tent_slope, dimple_depth, dimple_width, tent_smoothing, depart_angle,
    )


def bulb_chain(
    n_bulbs: int = 3,
    n_nodes: int = 1537,
    bulb_radius: float = 1.25,
    neck_radius: float = 0.2,
    neck_stagger: float = 0.01,
    **kwargs,
) -> WarpedProfile:
    """A chain of bulbs joined by thin necks of slightly staggered radii.

    The stagger makes the necks pinch at distinct times, so each triggers
    its own surgery event.
    """
    if n_bulbs < 2:
        raise ParameterError("need at least 2 bulbs")
    radii = [neck_radius + k * neck_stagger for k in range(n_bulbs - 1)]
    defaults = dict(
        neck_length=5.5, blend_length=1.4, tent_slope=9e-4,
        dimple_depth=2e-4, dimple_width=0.07, tent_smoothing=0.1,
        depart_angle=2.4,
    )
    defaults.update(kwargs)
    return _bulb_chain_profile(n_nodes, bulb_radius, radii, **defaults)


def flat_torus_perturbed(
    n_nodes: int = 16,
    eps: float = 1e-3,
    k: int = 2,
    period: float = 2.0 * np.pi,
) -> GridMetric:
    """Flat 3-torus plus eps sin(k x) on the yy component."""
    if eps < 0 or k < 1:
        raise ParameterError("need eps >= 0 and integer k >= 1")
    h = period / n_nodes
    x = np.arange(n_nodes) * h
    X = x[:, None, None] * np.ones((1, n_nodes, n_nodes))
    g = np.zeros((n_nodes, n_nodes, n_nodes, 3, 3))
    g[..., 0, 0] = 1.0
    g[..., 1, 1] = 1.0 + eps * np.sin(k * X)
    g[..., 2, 2] = 1.0
    return GridMetric((h, h, h), g, (True, True, True))


def default_control(scenario: str) -> StepControl:
    """Step control tuned per scenario."""
    if scenario == "round-sphere":
        return StepControl(regrid_interval=100, snapshot_every=200)
    if scenario == "cylinder-segment":
        return StepControl(regrid_interval=0, snapshot_every=200)
    if scenario == "dumbbell":
        return StepControl(regrid_interval=50, snapshot_every=200)
    raise ParameterError(f"no warped-profile control for scenario {scenario!r}")


def build(scenario: str, n_nodes: int | None = None):
    """Construct the initial state for a named scenario."""
    if scenario == "round-sphere":
        return round_sphere(n_nodes or 257)
    if scenario == "cylinder-segment":
        return cylinder_segment(n_nodes or 513)
    if scenario == "dumbbell":
        return dumbbell(n_nodes or 1025)
    if scenario == "flat-torus-perturbed":
        return flat_torus_perturbed(n_nodes or 16)
    raise ParameterError(f"unknown scenario {scenario!r}; choose from {SCENARIOS}")
