"""Exception and warning types shared across the package."""


class NacnetError(Exception):
    """Base class for all package errors."""


# -- geometry ---------------------------------------------------------------

class DegenerateTranslation(NacnetError):
    """Translation has (near-)zero norm; the essential matrix is undefined."""


class ZeroMatrix(NacnetError):
    """Matrix has (near-)zero Frobenius norm; projection is undefined."""


# -- triangulation ----------------------------------------------------------

class EpipoleCoincidence(NacnetError):
    """An input point coincides with its epipole; the correction cost is degenerate."""


class NumericalFailure(NacnetError):
    """A numerical procedure produced no usable candidate."""


class RankDeficient(NacnetError):
    """Triangulation system is rank deficient (parallel rays)."""


# -- dlt --------------------------------------------------------------------

class InsufficientPoints(NacnetError):
    """Fewer points (or fewer effectively-weighted points) than the solver needs."""


class DegenerateSpectrum(NacnetError):
    """Eigenvalue gap too small; the minimal eigenvector (or its gradient) is ill-defined."""


class DegenerateSpectrumWarning(UserWarning):
    """Spectrum gap below the uniqueness threshold; solution may be non-unique."""


# -- autodiff ---------------------------------------------------------------

class ShapeMismatch(NacnetError):
    """Operands have incompatible shapes or dtypes for the requested op."""


class NonFiniteValue(NacnetError):
    """A forward op produced NaN or Inf."""


class NotScalar(NacnetError):
    """backward() requires a scalar loss tensor."""


class DoubleBackward(NacnetError):
    """backward() was called twice on the same tape."""


# -- synthdata --------------------------------------------------------------

class ParamError(NacnetError):
    """Invalid generation parameters."""


class ResampleExhausted(NacnetError):
    """Rejection sampling failed too many times for at least one point."""


# -- file I/O ---------------------------------------------------------------

class IoError(NacnetError):
    """File could not be read or written."""


class VersionMismatch(IoError):
    """File format version is not supported."""


class ChecksumMismatch(IoError):
    """File payload is truncated or corrupted."""


# -- training / config ------------------------------------------------------

class ConfigError(NacnetError):
    """Invalid or inconsistent run configuration."""


class IncompatibleConfig(ConfigError):
    """Checkpoint configuration does not match the requested model."""


# -- evaluation -------------------------------------------------------------

class EmptyInput(NacnetError):
    """Metric or benchmark invoked on an empty input."""
