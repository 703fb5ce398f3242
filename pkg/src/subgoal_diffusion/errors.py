"""Exception types shared across the package."""


class ConfigurationError(ValueError):
    """Invalid static configuration: bad dimensions, bad schedule ranges."""


class InputError(ValueError):
    """Invalid runtime input: empty cloud, out-of-range timestep, shape mismatch."""


class UsageError(RuntimeError):
    """API misuse, e.g. backward called without a cached forward."""


class SamplingError(RuntimeError):
    """Non-finite values encountered during reverse diffusion sampling."""


class DataError(RuntimeError):
    """Dataset, trace, or checkpoint integrity failure."""


class TrainingError(RuntimeError):
    """Non-finite loss or parameter values during optimization."""
