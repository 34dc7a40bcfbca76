"""Exception types shared across the package."""


class InvalidTopologyError(ValueError):
    """Topology request is malformed (too few nodes, bad shape, disconnected)."""


class TopologyGenerationError(RuntimeError):
    """Random topology generation failed (e.g. no connected draw within budget)."""


class InvalidParameterError(ValueError):
    """Scalar parameter outside its admissible range."""


class NotPrimitiveError(ValueError):
    """Combination matrix has a repeated unit-modulus eigenvalue."""


class NotPsdError(ValueError):
    """Matrix has an eigenvalue below the negative tolerance."""


class RequiresPsdError(ValueError):
    """Method needs a positive semi-definite combination matrix."""


class UnstableMethodError(RuntimeError):
    """A coupling block has spectral radius >= 1 for the requested method."""

    def __init__(self, message: str, eigenvalue: float | None = None):
        super().__init__(message)
        self.eigenvalue = eigenvalue


class InvalidStateError(ValueError):
    """Solver state dimensions or invariants violated."""


class NumericOverflowError(RuntimeError):
    """Iterates became non-finite or exceeded the divergence guard."""

    def __init__(self, message: str, iteration: int | None = None):
        super().__init__(message)
        self.iteration = iteration


class UnavailableError(RuntimeError):
    """Requested quantity cannot be produced (missing data, no convergence)."""


class NotApplicableError(ValueError):
    """Monitor invoked outside its validity regime (e.g. stochastic run)."""


class ConfigError(ValueError):
    """Run or suite configuration failed validation."""
