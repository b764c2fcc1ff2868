"""Exception hierarchy shared by all modules."""


class CalderonError(RuntimeError):
    """Base class for every failure raised by the package."""


class DomainError(CalderonError):
    """Invalid domain descriptor or insufficient grid resolution."""


class DirichletEigenvalueError(CalderonError):
    """The discrete Dirichlet operator is singular or nearly so."""

    def __init__(self, message, condition=float("inf")):
        super().__init__(f"Dirichlet eigenvalue proximity: {message} (condition estimate {condition:.3e})")
        self.condition = condition


class ResonantFrequencyError(CalderonError):
    """A Fourier symbol vanishes on the wavenumber lattice."""

    def __init__(self, wavenumber, value):
        super().__init__(f"resonant frequency: symbol {value:.3e} at lattice wavenumber {tuple(wavenumber)}")
        self.wavenumber = tuple(wavenumber)


class FrequencyError(CalderonError):
    """Complex frequency requested below the configured minimum t."""


class CgoError(CalderonError):
    """Remainder equation could not be solved to tolerance."""

    def __init__(self, message, contraction=float("nan")):
        super().__init__(f"{message} (measured contraction factor {contraction:.4f})")
        self.contraction = contraction


class SingleLayerError(CalderonError):
    """Single-layer assembly or inversion failure."""


class ContractionError(CalderonError):
    """Neumann-series contraction cap exceeded."""

    def __init__(self, message, ratio):
        super().__init__(f"{message} (measured ratio {ratio:.4f})")
        self.ratio = ratio


class ProjectionError(CalderonError):
    """Convex projection did not converge."""


class ContainerError(CalderonError):
    """Corrupt or incompatible binary container."""


class ConfigError(CalderonError):
    """Invalid experiment configuration."""
