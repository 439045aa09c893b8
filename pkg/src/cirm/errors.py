"""Exception hierarchy shared across the package."""


class CirmError(Exception):
    """Base class for every error raised by this package."""


class ShapeError(CirmError, ValueError):
    pass


class NonFiniteError(CirmError, FloatingPointError):
    pass


class GraphError(CirmError, KeyError):
    """Unbound leaf, unknown node, or a request the graph cannot satisfy."""

    def __str__(self):
        return str(self.args[0]) if self.args else ""


class ConfigError(CirmError, ValueError):
    pass


class ModelFileError(CirmError):
    pass


class ChecksumError(ModelFileError):
    pass


class FormatVersionError(ModelFileError):
    pass


class InputError(CirmError, ValueError):
    """Bad user-facing input: empty sequences, overlong prompts, bad tokens."""


class ManifestMismatchError(CirmError):
    """An intervention manifest was built for a different model."""


class CorpusFormatError(CirmError, ValueError):
    pass


class DivergenceError(CirmError, FloatingPointError):
    pass


class StageError(CirmError):
    """A pipeline stage is missing an input produced by an earlier stage."""

    def __init__(self, message, producer=None):
        super().__init__(message)
        self.producer = producer


class LineageError(CirmError):
    """An artifact's recorded inputs no longer match the files on disk."""
