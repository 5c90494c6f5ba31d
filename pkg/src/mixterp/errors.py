"""Exception hierarchy. Every error carries a short machine-parseable category
used by the CLI for its one-line failure reports."""


class MixterpError(Exception):
    category = "internal"


class ConfigError(MixterpError):
    """Bad or unknown configuration key/value."""
    category = "config"


class DataFormatError(MixterpError):
    """Malformed input file (CSV schema, raster header, checkpoint)."""
    category = "data"


class ParameterError(MixterpError):
    """Invalid distribution or model parameter."""
    category = "parameter"


class ShapeError(MixterpError):
    """Incompatible tensor shapes; names the offending graph node."""
    category = "shape"

    def __init__(self, node: str, message: str):
        super().__init__(f"node '{node}': {message}")
        self.node = node


class NumericError(MixterpError):
    """Non-finite values where finite ones are required."""
    category = "numeric"


class UsageError(MixterpError):
    """Operation invoked with inconsistent arguments or missing inputs."""
    category = "usage"
