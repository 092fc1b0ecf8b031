"""
Exception hierarchy for hpscatter.

Library code raises these; the command-line driver maps them to exit codes
through the ``exit_code`` class attribute (0 ok, 2 configuration or validation
error, 3 series divergence, 4 internal numerical failure).
"""

from typing import Optional


class HpScatterError(Exception):
    """Base class for every error raised by the solver"""

    exit_code = 4


class ConfigError(HpScatterError, ValueError):
    """Invalid run configuration or inconsistent option combination"""

    exit_code = 2


class MeshError(HpScatterError, ValueError):
    """Mesh failed to load or violates a topology invariant"""

    exit_code = 2


class MeshParseError(MeshError):
    pass


class DegenerateTriangleError(MeshError):
    def __init__(self, message: str, triangle: Optional[int] = None):
        super().__init__(message)
        self.triangle = triangle


class NonManifoldEdgeError(MeshError):
    def __init__(self, message: str, edge: Optional[tuple] = None):
        super().__init__(message)
        self.edge = edge


class EmptyBasisError(MeshError):
    """Mesh has no interior edge, so no RWG function can be built"""


class FormulationError(HpScatterError, ValueError):
    """Integral-equation formulation is not valid for the given surface"""

    exit_code = 2


class GeometryDomainError(HpScatterError, ValueError):
    """Kernel evaluated at a point where it is singular"""


class DimensionError(HpScatterError, ValueError):
    """Vector length does not match the operator size"""


class NumericalError(HpScatterError):
    """Internal numerical failure"""


class SingularBlockError(NumericalError):
    """A near-field diagonal block could not be factorized"""

    def __init__(self, message: str, leaf: int):
        super().__init__(message)
        self.leaf = leaf


class SingularMatrixError(NumericalError):
    pass


class DenseCapExceededError(HpScatterError):
    """Dense oracle path requested for a system larger than the configured cap"""

    exit_code = 2


class SeriesDivergenceError(HpScatterError):
    """Power series iteration ratio reached the divergence threshold"""

    exit_code = 3

    def __init__(self, message: str, angle: Optional[float] = None, report=None):
        super().__init__(message)
        self.angle = angle
        self.report = report
