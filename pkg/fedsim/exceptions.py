# Base class for every error raised by the simulator
class FedsimError(Exception):
    pass


# Incompatible tensor shapes for an op (message names the op and the dims)
class ShapeError(FedsimError, ValueError):
    def __init__(self, op, message):
        self.op = op
        super().__init__(f"{op}: {message}")


# NaN or Inf found in a loss, activation, gradient or update
class NonFiniteError(FedsimError, ArithmeticError):
    pass


# Misuse of the compute graph (non-scalar loss, second backward)
class GraphError(FedsimError, RuntimeError):
    pass


class DatasetError(FedsimError, ValueError):
    pass


class DatasetMissing(DatasetError):
    pass


class AggregationError(FedsimError, ValueError):
    pass


class AttackError(FedsimError, ValueError):
    pass


class CheckpointError(FedsimError, ValueError):
    pass


class SchemaError(FedsimError, ValueError):
    pass


# Invalid experiment configuration, with DRF-style field-level detail
class ConfigError(FedsimError, ValueError):
    def __init__(self, detail):
        self.detail = detail
        super().__init__(format_detail(detail))


# Flatten a nested DRF error dict into "a.b: message" lines
def format_detail(detail, prefix=""):
    if isinstance(detail, dict):
        return "\n".join(format_detail(value, f"{prefix}{key}.") for key, value in detail.items())
    elif isinstance(detail, list):
        if all(isinstance(item, str) for item in detail):
            return f"{prefix.rstrip('.')}: {' '.join(str(item) for item in detail)}"
        return "\n".join(format_detail(item, f"{prefix}{i}.") for i, item in enumerate(detail) if item)
    else:
        return f"{prefix.rstrip('.')}: {detail}"
