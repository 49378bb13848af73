"""Exception hierarchy shared across the package.

CLI exit-code mapping: ConfigError (and other ValueError) -> 2,
FormatError / OSError -> 3.
"""


class ConfigError(ValueError):
    """Invalid configuration or violated operation precondition."""


class ShapeError(ValueError):
    """Dimension or modality-count mismatch between volumetric operands."""


class FormatError(Exception):
    """Corrupt or unreadable binary file.

    Carries the file path and, when known, the byte offset of the
    offending content.
    """

    def __init__(self, path, message, offset=None):
        self.path = str(path)
        self.offset = offset
        where = f"{self.path}" if offset is None else f"{self.path} (offset {offset})"
        super().__init__(f"{where}: {message}")
