"""Exception hierarchy. Everything raised on purpose derives from MovFNetError."""


class MovFNetError(Exception):
    pass


class FormatError(MovFNetError, ValueError):
    """Malformed NPY/ZIP/container input. ``field`` names the offending header field."""

    def __init__(self, message, field=None):
        super().__init__(message)
        self.field = field


class BadMagic(FormatError):
    pass


class UnsupportedDtype(FormatError):
    pass


class FortranOrder(FormatError):
    pass


class TruncatedPayload(FormatError):
    pass


class BadZip(FormatError):
    pass


class MissingEntry(MovFNetError, KeyError):
    def __init__(self, name):
        super().__init__(name)
        self.name = name

    def __str__(self):
        return f"missing entry {self.name!r}"


class MissingTensor(MissingEntry):
    def __str__(self):
        return f"checkpoint is missing tensor {self.name!r}"


class VersionMismatch(FormatError):
    pass


class NonPositiveSigma(MovFNetError, ValueError):
    pass


class KernelLargerThanAxisWithReflect(MovFNetError, ValueError):
    pass


class NonFiniteInput(MovFNetError, ValueError):
    pass


class MultiChannelInput(MovFNetError, ValueError):
    pass


class ShapeMismatch(MovFNetError, ValueError):
    pass


class EvenDimensionWithStride(MovFNetError, ValueError):
    pass


class StaleCache(MovFNetError, RuntimeError):
    pass


class LabelOutOfRange(MovFNetError, ValueError):
    pass


class UnknownChannelTransformType(MovFNetError, ValueError):
    pass


class ConfigError(MovFNetError, ValueError):
    def __init__(self, message, lineno=None, path=None):
        parts = [str(path)] if path is not None else []
        if lineno is not None:
            parts.append(f"line {lineno}")
        loc = ", ".join(parts)
        super().__init__(f"{loc}: {message}" if loc else message)
        self.lineno = lineno
