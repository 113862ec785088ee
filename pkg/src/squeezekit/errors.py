"""Exception hierarchy shared by every squeezekit module.

Each class carries a short ``tag`` which the CLI uses as a stable one-line
prefix (``error[shape]: ...``).
"""


class SqueezeKitError(Exception):
    tag = "error"


class ShapeError(SqueezeKitError, ValueError):
    tag = "shape"


class ParameterError(SqueezeKitError, ValueError):
    tag = "parameter"


class MetaparameterError(ParameterError):
    tag = "metaparameter"


class BypassError(SqueezeKitError, ValueError):
    tag = "bypass"


class ValidationError(SqueezeKitError, ValueError):
    tag = "validation"

    def __init__(self, violations):
        self.violations = list(violations)
        super().__init__("; ".join(self.violations))


class PreconditionError(SqueezeKitError, RuntimeError):
    tag = "precondition"


class ConfigurationError(SqueezeKitError, ValueError):
    tag = "configuration"


class FormatError(SqueezeKitError, ValueError):
    tag = "format"


class ParseError(FormatError):
    tag = "parse"

    def __init__(self, message, line=None, key=None):
        self.line = line
        self.key = key
        where = []
        if line is not None:
            where.append(f"line {line}")
        if key is not None:
            where.append(f"key {key!r}")
        prefix = (", ".join(where) + ": ") if where else ""
        super().__init__(prefix + message)
