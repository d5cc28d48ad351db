"""Coordinate-chart tensor calculus on gridded metrics.

All curvature quantities are computed from the metric components by
second-order finite differences (central stencils in the interior,
one-sided second-order stencils at non-periodic boundaries).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateMetricError, DegeneratePlaneError, ParameterError

COND_LIMIT = 1e12  # metric condition number beyond which curvature is meaningless


@dataclass(frozen=True)
class GridMetric:
    """Metric components g_{ab} sampled on a uniform coordinate grid.

    components has shape (*dims, d, d) with d in {2, 3}; spacing and
    periodic have one entry per grid axis.
    """

    spacing: tuple
    components: np.ndarray
    periodic: tuple

    def __post_init__(self):
        g = np.asarray(self.components, dtype=float)
        object.__setattr__(self, "components", g)
        object.__setattr__(self, "spacing", tuple(float(h) for h in self.spacing))
        object.__setattr__(self, "periodic", tuple(bool(p) for p in self.periodic))
        d = g.shape[-1]
        if g.ndim < 3 or g.shape[-2] != d or d not in (2, 3):
            raise ParameterError(f"metric components must have shape (*dims, d, d) with d in (2,3); got {g.shape}")
        if len(self.dims) != d:
            raise ParameterError(f"grid must have {d} axes for a {d}x{d} metric; got dims {self.dims}")
        if len(self.spacing) != d or len(self.periodic) != d:
            raise ParameterError("spacing/periodic must have one entry per axis")
        if any(h <= 0 for h in self.spacing):
            raise ParameterError(f"spacing must be positive, got {self.spacing}")
        if not np.allclose(g, np.swapaxes(g, -1, -2), rtol=0, atol=1e-12 * max(1.0, float(np.max(np.abs(g))))):
            raise ParameterError("metric components must be symmetric at every node")
        eigs = np.linalg.eigvalsh(g)
        if np.min(eigs) <= 0:
            node = np.unravel_index(int(np.argmin(eigs[..., 0])), self.dims)
            raise ParameterError(f"metric not positive definite at node {node}")

    @property
    def dims(self):
        return self.components.shape[:-2]

    @property
    def ndim_space(self):
        return self.components.shape[-1]


def _deriv1(field, axis, h, periodic):
    """Second-order first derivative of a gridded field along one axis."""
    f = np.asarray(field, dtype=float)
    if periodic:
        return (np.roll(f, -1, axis) - np.roll(f, 1, axis)) / (2 * h)
    out = np.empty_like(f)
    fwd = [slice(None)] * f.ndim

    def ix(i):
        s = list(fwd)
        s[axis] = i
        return tuple(s)

    interior = list(fwd)
    interior[axis] = slice(1, -1)
    up = list(fwd)
    up[axis] = slice(2, None)
    dn = list(fwd)
    dn[axis] = slice(None, -2)
    out[tuple(interior)] = (f[tuple(up)] - f[tuple(dn)]) / (2 * h)
    # third-order one-sided ends so composed derivatives stay second order
    out[ix(0)] = (-11 * f[ix(0)] + 18 * f[ix(1)] - 9 * f[ix(2)] + 2 * f[ix(3)]) / (6 * h)
    out[ix(-1)] = (11 * f[ix(-1)] - 18 * f[ix(-2)] + 9 * f[ix(-3)] - 2 * f[ix(-4)]) / (6 * h)
    return out


def _deriv2(field, axis, h, periodic):
    """Second-order pure second derivative along one axis."""
    f = np.asarray(field, dtype=float)
    if periodic:
        return (np.roll(f, -1, axis) - 2 * f + np.roll(f, 1, axis)) / h**2

    def ix(i):
        s = [slice(None)] * f.ndim
        s[axis] = i
        return tuple(s)

    out = np.empty_like(f)
    interior = [slice(None)] * f.ndim
    interior[axis] = slice(1, -1)
    up = [slice(None)] * f.ndim
    up[axis] = slice(2, None)
    dn = [slice(None)] * f.ndim
    dn[axis] = slice(None, -2)
    out[tuple(interior)] = (f[tuple(up)] - 2 * f[ix(slice(1, -1))] + f[tuple(dn)]) / h**2
    out[ix(0)] = (2 * f[ix(0)] - 5 * f[ix(1)] + 4 * f[ix(2)] - f[ix(3)]) / h**2
    out[ix(-1)] = (2 * f[ix(-1)] - 5 * f[ix(-2)] + 4 * f[ix(-3)] - f[ix(-4)]) / h**2
    return out


def _check_stencil(m: GridMetric):
    for n in m.dims:
        if n < 5:
            raise ParameterError(f"grid needs >= 5 nodes per axis for central stencils, got dims {m.dims}")


def _grad_components(m: GridMetric, field):
    """Stack of coordinate derivatives: out[..., c] = d_c field (field may be tensor-valued)."""
    f = np.asarray(field, dtype=float)
    d = m.ndim_space
    parts = [_deriv1(f, ax, m.spacing[ax], m.periodic[ax]) for ax in range(d)]
    return np.stack(parts, axis=-1)


def inverse_metric(m: GridMetric) -> np.ndarray:
    """Per-node inverse g^{ab}; raises if any node is numerically degenerate."""
    g = m.components
    eigs = np.linalg.eigvalsh(g)
    cond = np.abs(eigs[..., -1]) / np.maximum(np.abs(eigs[..., 0]), 1e-300)
    worst = np.unravel_index(int(np.argmax(cond)), m.dims)
    if cond[worst] > COND_LIMIT:
        raise DegenerateMetricError(worst, cond[worst])
    return np.linalg.inv(g)


def christoffel(m: GridMetric) -> np.ndarray:
    """Christoffel symbols; out[..., a, b, c] = Gamma^a_{bc}."""
    _check_stencil(m)
    ginv = inverse_metric(m)
    # D[..., c, a, b] = d_c g_{ab}
    D = np.stack(
        [_deriv1(m.components, ax, m.spacing[ax], m.periodic[ax]) for ax in range(m.ndim_space)],
        axis=-3,
    )
    # T[..., b, c, d] = d_b g_{cd} + d_c g_{bd} - d_d g_{bc}
    T = D + np.swapaxes(D, -3, -2) - np.moveaxis(D, -3, -1)
    return 0.5 * np.einsum("...ad,...bcd->...abc", ginv, T)


def _riemann_lowered_core(m: GridMetric, gamma) -> np.ndarray:
    """Fully lowered Riemann tensor straight from second partials of g.

    Differencing g twice directly (instead of differencing the Christoffel
    field) keeps second-order accuracy up to non-periodic boundaries, where
    composed one-sided stencils would lose an order.
    """
    g = m.components
    d = m.ndim_space
    # D2[..., a, b, c, e] = d_a d_b g_{ce}
    D2 = np.empty(m.dims + (d, d, d, d))
    for c in range(d):
        for e in range(c, d):
            block = _second_partials(m, g[..., c, e])
            D2[..., c, e] = block
            if e != c:
                D2[..., e, c] = block
    half = 0.5 * (
        np.einsum("...acbf->...abcf", D2)
        + np.einsum("...bfac->...abcf", D2)
        - np.einsum("...afbc->...abcf", D2)
        - np.einsum("...bcaf->...abcf", D2)
    )
    gam_low = np.einsum("...ed,...dbc->...ebc", g, gamma)
    quad = np.einsum("...eac,...ebf->...abcf", gam_low, gamma)
    return half + quad - np.swapaxes(quad, -1, -2)


def riemann(m: GridMetric, gamma=None) -> np.ndarray:
    """Riemann tensor with one upper index: out[..., a, b, c, d] = Riem_{abc}^d.

    Sign convention is pinned by the round-sphere oracle: contracting the
    first lower index with the upper one yields the Ricci tensor with
    Ric(S^2, K=1) = +g.
    """
    if gamma is None:
        gamma = christoffel(m)
    low = _riemann_lowered_core(m, gamma)
    return np.einsum("...abcf,...fd->...abcd", low, inverse_metric(m))


def ricci(m: GridMetric, riem=None) -> np.ndarray:
    """Ricci tensor Ric_{bc} = Riem_{abc}^a."""
    if riem is None:
        riem = riemann(m)
    return np.einsum("...abca->...bc", riem)


def scalar_curvature(m: GridMetric, ric=None) -> np.ndarray:
    """Scalar curvature R = g^{bc} Ric_{bc}."""
    if ric is None:
        ric = ricci(m)
    return np.einsum("...bc,...bc->...", inverse_metric(m), ric)


@dataclass(frozen=True)
class CurvatureField:
    """All curvature pieces of a metric chart computed in one pass."""

    christoffel: np.ndarray
    riemann: np.ndarray
    ricci: np.ndarray
    scalar: np.ndarray


def curvature_field(m: GridMetric) -> CurvatureField:
    gamma = christoffel(m)
    riem = riemann(m, gamma)
    ric = np.einsum("...abca->...bc", riem)
    scal = np.einsum("...bc,...bc->...", inverse_metric(m), ric)
    return CurvatureField(gamma, riem, ric, scal)


def riemann_lowered(m: GridMetric, riem=None) -> np.ndarray:
    """Fully lowered Riemann tensor Riem_{abce} = Riem_{abc}^d g_{de}."""
    if riem is None:
        return _riemann_lowered_core(m, christoffel(m))
    return np.einsum("...abcd,...de->...abce", riem, m.components)


def sectional_curvature(m: GridMetric, node, X, Y, riem_low=None) -> float:
    """Sectional curvature of span(X, Y) at a grid node.

    X, Y may be any linearly independent pair; they are orthonormalized
    internally under g(node) (Gram-Schmidt), so K depends only on the plane.
    """
    node = tuple(int(i) for i in node)
    g = m.components[node]
    X = np.asarray(X, dtype=float)
    Y = np.asarray(Y, dtype=float)

    def dot(u, v):
        return float(u @ g @ v)

    nx = np.sqrt(dot(X, X))
    if nx == 0:
        raise DegeneratePlaneError("X is zero")
    u = X / nx
    v = Y - dot(Y, u) * u
    nv = np.sqrt(max(dot(v, v), 0.0))
    if nv <= 1e-12 * np.sqrt(dot(Y, Y)):
        raise DegeneratePlaneError("X and Y are linearly dependent")
    v = v / nv
    if riem_low is None:
        riem_low = riemann_lowered(m)
    rl = riem_low[node]
    return float(np.einsum("abce,a,b,c,e->", rl, u, v, v, u))


def laplace_beltrami(m: GridMetric, f) -> np.ndarray:
    """Laplace-Beltrami of a scalar: g^{ab} d_a d_b f - g^{ab} Gamma^c_{ab} d_c f."""
    f = np.asarray(f, dtype=float)
    if f.shape != m.dims:
        raise ParameterError(f"scalar field shape {f.shape} does not match grid {m.dims}")
    ginv = inverse_metric(m)
    gamma = christoffel(m)
    hess = _second_partials(m, f)
    df = _grad_components(m, f)
    return np.einsum("...ab,...ab->...", ginv, hess) - np.einsum(
        "...ab,...cab,...c->...", ginv, gamma, df
    )


def _second_partials(m: GridMetric, f):
    """Symmetric matrix of coordinate second partials d_a d_b f."""
    d = m.ndim_space
    df = [_deriv1(f, ax, m.spacing[ax], m.periodic[ax]) for ax in range(d)]
    out = np.empty(m.dims + (d, d))
    for a in range(d):
        out[..., a, a] = _deriv2(f, a, m.spacing[a], m.periodic[a])
        for b in range(a + 1, d):
            mixed = 0.5 * (
                _deriv1(df[a], b, m.spacing[b], m.periodic[b])
                + _deriv1(df[b], a, m.spacing[a], m.periodic[a])
            )
            out[..., a, b] = mixed
            out[..., b, a] = mixed
    return out


def hessian(m: GridMetric, f) -> np.ndarray:
    """Covariant Hessian Hess(f)_{ab} = d_a d_b f - Gamma^c_{ab} d_c f."""
    f = np.asarray(f, dtype=float)
    if f.shape != m.dims:
        raise ParameterError(f"scalar field shape {f.shape} does not match grid {m.dims}")
    gamma = christoffel(m)
    df = _grad_components(m, f)
    return _second_partials(m, f) - np.einsum("...cab,...c->...ab", gamma, df)


def gradient(m: GridMetric, f) -> np.ndarray:
    """Gradient vector field (grad f)^a = g^{ab} d_b f."""
    return np.einsum("...ab,...b->...a", inverse_metric(m), _grad_components(m, f))


def deformation_tensor(m: GridMetric, X) -> np.ndarray:
    """Deformation tensor pi_{ab} = nabla_a X_b + nabla_b X_a of a vector field X^a."""
    X = np.asarray(X, dtype=float)
    if X.shape != m.dims + (m.ndim_space,):
        raise ParameterError(f"vector field shape {X.shape} does not match grid {m.dims}")
    X_low = np.einsum("...ab,...b->...a", m.components, X)
    gamma = christoffel(m)
    # dX[..., a, b] = d_a X_b
    dX = np.stack(
        [_deriv1(X_low, ax, m.spacing[ax], m.periodic[ax]) for ax in range(m.ndim_space)],
        axis=-2,
    )
    covX = dX - np.einsum("...cab,...c->...ab", gamma, X_low)
    return covX + np.swapaxes(covX, -1, -2)


def _volume_weights(m: GridMetric):
    w = np.ones(m.dims)
    for ax, (n, per) in enumerate(zip(m.dims, m.periodic)):
        axw = np.ones(n)
        if not per:
            axw[0] = axw[-1] = 0.5  # trapezoid ends
        shape = [1] * len(m.dims)
        shape[ax] = n
        w = w * axw.reshape(shape)
    return w


def total_volume(m: GridMetric) -> float:
    """Riemannian volume: integral of sqrt(det g) over the chart."""
    dens = np.sqrt(np.linalg.det(m.components))
    cell = float(np.prod(m.spacing))
    return float(np.sum(dens * _volume_weights(m)) * cell)


def rescale(m: GridMetric, lam: float) -> GridMetric:
    """Algebraic rescaling g -> lam^2 g (coordinates untouched)."""
    if lam <= 0:
        raise ParameterError(f"rescale factor must be positive, got {lam}")
    return GridMetric(m.spacing, lam**2 * m.components, m.periodic)


def save_metric(m: GridMetric, path) -> None:
    """Write the chart to a self-describing .npz container."""
    np.savez(
        path,
        format=np.array("riccilab-gridmetric-1"),
        spacing=np.asarray(m.spacing, dtype=float),
        periodic=np.asarray(m.periodic, dtype=bool),
        components=m.components.astype(np.float64),
    )


def load_metric(path) -> GridMetric:
    """Read and validate a chart written by save_metric."""
    with np.load(path, allow_pickle=False) as z:
        if str(z["format"]) != "riccilab-gridmetric-1":
            raise ParameterError(f"unrecognized metric-chart file format in {path}")
        return GridMetric(tuple(z["spacing"]), z["components"], tuple(z["periodic"]))
