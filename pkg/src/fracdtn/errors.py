"""Exception hierarchy shared by the library and the CLI exit-code mapping."""


class FracDtnError(Exception):
    """Base class for all library errors."""


class ValidationError(FracDtnError, ValueError):
    """Bad input: malformed grid, shape, field or configuration."""


class GeometryError(ValidationError):
    """A domain partition invariant does not hold."""


class EllipticityError(ValidationError):
    """Tensor field is not symmetric or violates the ellipticity bounds."""


class IllPosedError(FracDtnError):
    """Zero is (numerically) an eigenvalue of the constrained interior system."""


class NumericalError(FracDtnError):
    """A numerical routine failed or produced an untrustworthy result."""


class SpectralError(NumericalError):
    """Eigendecomposition failed or produced significantly negative eigenvalues."""


class QuadratureError(NumericalError):
    """Heat-semigroup quadrature did not converge."""
