"""Exception hierarchy shared by every stage of the pipeline."""


class S2STError(Exception):
    """Base class; ``exit_code`` is what the CLI returns when it escapes."""

    exit_code = 2


class ConfigError(S2STError):
    exit_code = 1


class InvalidAudio(S2STError):
    pass


class InvalidSpectrogram(S2STError):
    pass


class ShapeError(S2STError):
    pass


class VocabError(S2STError):
    pass


class DataError(S2STError):
    pass


class AlignmentError(S2STError):
    pass


class ParseError(DataError):
    def __init__(self, message, line=None):
        super().__init__(message if line is None else f"line {line}: {message}")
        self.line = line


class ItemError(DataError):
    def __init__(self, item_id, message):
        super().__init__(f"{item_id}: {message}")
        self.item_id = item_id


class NumericError(S2STError):
    exit_code = 3
