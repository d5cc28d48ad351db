"""Exception types shared across the package."""


class RicciLabError(Exception):
    """Base class for all package-specific errors."""


class DegenerateMetricError(RicciLabError):
    """Metric is numerically singular (condition number too large) at a node."""

    def __init__(self, node, cond):
        self.node = tuple(node)
        self.cond = float(cond)
        super().__init__(f"metric degenerate at node {self.node} (cond={cond:.3e})")


class DegeneratePlaneError(RicciLabError):
    """The two vectors handed to sectional_curvature are linearly dependent."""


class ParameterError(RicciLabError):
    """A parameter is outside its documented range."""


class PinchedProfileError(RicciLabError):
    """w <= 0 at an interior node: the profile has pinched (a singularity, not a bug)."""

    def __init__(self, node, w):
        self.node = int(node)
        super().__init__(f"profile pinched at node {node} (w={w:.3e})")


class DivergenceError(RicciLabError):
    """NaN/Inf appeared in the evolving state; carries the last valid snapshot."""

    def __init__(self, message, last_snapshot=None, last_time=None):
        self.last_snapshot = last_snapshot
        self.last_time = last_time
        super().__init__(message)


class ResolutionError(RicciLabError):
    """Grid too coarse for the requested operation; re-grid and retry."""


class NotHighCurvatureError(RicciLabError):
    """Curvature scale requested where R <= 0."""


class DomainError(RicciLabError):
    """A path/ball/query leaves the computational domain."""


class UnsafeSurgeryError(RicciLabError):
    """The requested cut sphere does not lie inside the delta-neck."""


class BlendFailureError(RicciLabError):
    """Post-glue curvature certificate grossly violated."""


class ConstructionError(RicciLabError):
    """Standard-cap construction failed its curvature certificate."""

    def __init__(self, message, node=None):
        self.node = node
        super().__init__(message)
