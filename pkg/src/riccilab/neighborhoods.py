"""Local-geometry taxonomy of near-singular profiles.

Classifies points at high curvature into necks, round components, compact
positively curved components, and caps, after rescaling so the scalar
curvature at the point equals one; locates horns (high-curvature neck
chains hanging off the low-curvature region) and the cut sites inside them.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DomainError, NotHighCurvatureError, ParameterError, ResolutionError
from .warped import WarpedProfile, warped_curvatures

DEFAULT_EPS = 1e-2
DEFAULT_C = 10.0


@dataclass(frozen=True)
class NeighborhoodLabel:
    """Outcome of classifying one point."""

    kind: str  # eps_neck | c_component | eps_round | cap | unclassified
    scale: float
    quality: float
    extent: tuple  # (first node, last node) inclusive; () when unclassified
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.scale <= 0 or self.quality < 0:
            raise ParameterError("scale must be positive and quality nonnegative")
        if self.kind != "unclassified" and not self.extent:
            raise ParameterError("classified labels need a nonempty extent")


def curvature_scale(p: WarpedProfile, node: int) -> float:
    """R(node)^{-1/2}, the length unit that normalizes curvature to one."""
    r = warped_curvatures(p)["R"]
    if not 0 <= node < p.n_nodes:
        raise DomainError(f"node {node} outside grid")
    if r[node] <= 0:
        raise NotHighCurvatureError(f"R = {r[node]:.3g} <= 0 at node {node}")
    return float(r[node] ** -0.5)


def _round_quality(curv) -> float:
    """Relative spread of all sectional curvatures around a positive mean."""
    ks = np.concatenate([curv["K_sph"], curv["K_mix"]])
    mean = float(np.mean(ks))
    if mean <= 0:
        return np.inf
    return float(np.max(np.abs(ks - mean)) / mean)


def _neck_quality(p: WarpedProfile, node: int, scale: float, eps: float):
    """Sup-norm distance to a constant-radius cylinder on the rescaled window.

    The window spans arclength 2/eps in units where R(node) = 1. Returns
    (quality, extent) or (inf, ()) when the window leaves the grid.
    """
    s = p.arclength()
    half = scale / eps
    lo, hi = s[node] - half, s[node] + half
    if lo < s[0] - 1e-12 or hi > s[-1] + 1e-12:
        return np.inf, ()
    inside = np.nonzero((s >= lo) & (s <= hi))[0]
    if inside.size < 5:
        return np.inf, ()
    w = p.w[inside]
    ws = p.d_ds(p.w, parity=-1)[inside]
    wss = p.d_ds(p.d_ds(p.w, parity=-1), parity=1)[inside]
    wbar = float(np.mean(w))
    if wbar <= 0:
        return np.inf, ()
    q = max(
        float(np.max(np.abs(w - wbar)) / wbar),
        float(np.max(np.abs(ws))),
        float(np.max(np.abs(w * wss))),
    )
    return q, (int(inside[0]), int(inside[-1]))


def classify_point(
    p: WarpedProfile,
    node: int,
    eps: float = DEFAULT_EPS,
    C: float = DEFAULT_C,
) -> NeighborhoodLabel:
    """Assign the most specific local-model label to one point.

    Tested in order: round component, compact positively curved component,
    neck, cap adjacent to a neck; otherwise unclassified. All thresholds
    are applied in units rescaled so R(node) = 1, which makes both the
    label and the quality exactly scale-equivariant.
    """
    if not 0 < eps <= 0.1:
        raise ParameterError("eps must lie in (0, 0.1]")
    if C < 1:
        raise ParameterError("C must be >= 1")
    scale = curvature_scale(p, node)
    curv = warped_curvatures(p)
    meta = {"eps": eps, "C": C, "spatial_only": True}
    whole = (0, p.n_nodes - 1)

    if p.topology_mode == "closed-sphere":
        q_round = _round_quality(curv)
        if q_round <= eps:
            return NeighborhoodLabel("eps_round", scale, q_round, whole, meta)
        ks = np.concatenate([curv["K_sph"], curv["K_mix"]])
        if np.all(ks > 0):
            diam_hat = p.total_length() / scale
            k_hat = ks * scale**2
            q_c = max(diam_hat, 1.0 / diam_hat, float(np.max(k_hat)), float(1.0 / np.min(k_hat))) / C
            if q_c <= 1.0:
                return NeighborhoodLabel("c_component", scale, q_c, whole, meta)

    q_neck, extent = _neck_quality(p, node, scale, eps)
    if q_neck <= eps:
        return NeighborhoodLabel("eps_neck", scale, q_neck, extent, meta)

    s = p.arclength()
    pole_positions = []
    if p.topology_mode in ("closed-sphere", "cap"):
        pole_positions.append(s[0])
    if p.topology_mode == "closed-sphere":
        pole_positions.append(s[-1])
    for sp in pole_positions:
        if abs(s[node] - sp) > C * scale:
            continue
        # look for a neck centered just beyond the cap region
        lo_d, hi_d = C * scale, (C + 2.0 / eps) * scale
        candidates = np.nonzero((np.abs(s - sp) >= lo_d) & (np.abs(s - sp) <= hi_d))[0]
        for j in candidates:
            if curv["R"][j] <= 0:
                continue
            qj, extj = _neck_quality(p, int(j), float(curv["R"][j] ** -0.5), eps)
            if qj <= eps:
                pole_node = 0 if sp == s[0] else p.n_nodes - 1
                lo = min(pole_node, extj[0], node)
                hi = max(pole_node, extj[1], node)
                return NeighborhoodLabel("cap", scale, qj, (lo, hi), meta)

    return NeighborhoodLabel("unclassified", scale, np.inf, (), meta)


@dataclass(frozen=True)
class HornDescriptor:
    """One maximal high-curvature range hanging off the low-curvature region."""

    nodes: tuple  # (first, last) inclusive
    mouth: str  # 'left' or 'right': the side adjacent to low curvature
    double: bool  # half of a neck region with low curvature on both sides
    w_monotone: bool  # w non-increasing from mouth toward the singular end
    neck_fraction: float  # fraction of interior nodes classifying as eps_neck


def find_horns(
    p: WarpedProfile,
    r_threshold: float,
    eps: float = 0.1,
    C: float = DEFAULT_C,
):
    """Split the profile at curvature scale r_threshold into horns and remainders.

    Nodes with R > r_threshold^{-2} are high-curvature. Each connected
    high range adjacent to the low region on one side is a horn with its
    mouth there; adjacency on both sides splits the range at the waist
    into two horns (a double horn). Ranges with no low-curvature neighbor
    are reported separately as isolated components. Returns
    (horns, isolated_ranges); the horn ranges, isolated ranges, and the
    low-curvature region partition the node set.
    """
    if r_threshold <= 0:
        raise ParameterError("r_threshold must be positive")
    curv = warped_curvatures(p)
    high = curv["R"] > r_threshold**-2
    if not np.any(high):
        return [], []
    horns = []
    isolated = []
    n = p.n_nodes
    i = 0
    while i < n:
        if not high[i]:
            i += 1
            continue
        j = i
        while j + 1 < n and high[j + 1]:
            j += 1
        left_low = i > 0
        right_low = j < n - 1
        if not left_low and not right_low:
            isolated.append((i, j))
        elif left_low and right_low:
            waist = i + int(np.argmin(p.w[i : j + 1]))
            if waist == i:
                horns.append(_describe_horn(p, curv, (i, j), "right", True, eps, C))
            elif waist == j:
                horns.append(_describe_horn(p, curv, (i, j), "left", True, eps, C))
            else:
                horns.append(_describe_horn(p, curv, (i, waist), "left", True, eps, C))
                horns.append(_describe_horn(p, curv, (waist + 1, j), "right", True, eps, C))
        else:
            mouth = "left" if left_low else "right"
            horns.append(_describe_horn(p, curv, (i, j), mouth, False, eps, C))
        i = j + 1
    return horns, isolated


def _describe_horn(p, curv, rng, mouth, double, eps, C):
    lo, hi = rng
    w = p.w[lo : hi + 1]
    mono = bool(np.all(np.diff(w) <= 1e-12)) if mouth == "left" else bool(
        np.all(np.diff(w) >= -1e-12)
    )
    interior = range(lo + 1, hi)
    if len(interior):
        hits = 0
        for k in interior:
            if curv["R"][k] <= 0:
                continue
            q, _ = _neck_quality(p, k, float(curv["R"][k] ** -0.5), eps)
            hits += q <= eps
        frac = hits / len(interior)
    else:
        frac = 0.0
    return HornDescriptor((lo, hi), mouth, double, mono, float(frac))


@dataclass(frozen=True)
class SurgerySite:
    """Cross-sphere selected for cutting: node, arclength, scale, neck quality."""

    node: int
    s_location: float
    scale: float
    quality: float
    horn: HornDescriptor


def find_delta_neck(
    p: WarpedProfile,
    horn: HornDescriptor,
    h: float,
    delta: float,
) -> SurgerySite | None:
    """Locate the outermost cross-sphere in the horn with R = h^{-2}.

    Walks from the mouth inward to the first crossing of the target
    curvature, then certifies a delta-quality neck there. Ties (uniform
    curvature) resolve to the outermost node, which maximizes the retained
    region. Returns None when the horn never reaches the target curvature.
    """
    if h <= 0 or delta <= 0:
        raise ParameterError("h and delta must be positive")
    curv = warped_curvatures(p)
    r_target = h**-2
    lo, hi = horn.nodes
    order = range(lo, hi + 1) if horn.mouth == "left" else range(hi, lo - 1, -1)
    order = list(order)
    node = None
    for k in order:
        if curv["R"][k] >= r_target:
            node = k
            break
    if node is None:
        return None
    scale = float(curv["R"][node] ** -0.5)
    s = p.arclength()
    window = (np.abs(s - s[node]) <= scale / delta).sum()
    if window < 16.0 / delta:
        raise ResolutionError(
            f"only {window} nodes across the candidate neck; need {16.0 / delta:.0f}"
        )
    quality, _ = _neck_quality(p, node, scale, min(delta, 0.1))
    if quality > delta:
        return None
    return SurgerySite(int(node), float(s[node]), scale, float(quality), horn)


def classification_report(p: WarpedProfile, eps: float = DEFAULT_EPS, C: float = DEFAULT_C):
    """Per-node records (node, kind, scale, quality) for export."""
    curv = warped_curvatures(p)
    out = []
    for i in range(p.n_nodes):
        if curv["R"][i] <= 0:
            out.append({"node": i, "kind": "not_high_curvature", "scale": None, "quality": None})
            continue
        lab = classify_point(p, i, eps, C)
        out.append(
            {"node": i, "kind": lab.kind, "scale": lab.scale,
             "quality": None if not np.isfinite(lab.quality) else lab.quality}
        )
    return out
