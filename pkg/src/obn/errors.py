"""Exception types raised across the package."""


class DimensionError(ValueError):
    """Tensor shapes are incompatible with the requested operation."""


class ConfigError(ValueError):
    """An invalid geometry, network description, or run configuration."""


class RankError(ConfigError):
    """A filter basis has more elements than its ambient dimension k*k*S."""


class NameParseError(ConfigError):
    def __init__(self, message, name, position):
        self.name = name
        self.position = position
        super().__init__(f"{message} at position {position} in {name!r}")


class ModeError(ValueError):
    """An analysis mode was requested on an input that does not support it."""


class TapeError(RuntimeError):
    """Backward consumed an activation record that belongs to another layer."""


class FormatError(ValueError):
    """A data or checkpoint file does not match its binary layout."""


class NumericalError(FloatingPointError):
    def __init__(self, message, layer=None):
        self.layer = layer
        super().__init__(message if layer is None else f"{message} (first non-finite output: {layer})")
