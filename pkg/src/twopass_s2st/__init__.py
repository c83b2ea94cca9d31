"""Two-pass speech-to-speech translation: speech -> text -> discrete speech tokens -> streamed audio."""

__version__ = "0.1.0"

from .audio import MelConfig, MelSpectrogram, Waveform, griffin_lim, log_mel, resample  # noqa: E402
from .config import Config, load_config  # noqa: E402
from .errors import (  # noqa: E402
    AlignmentError, ConfigError, DataError, InvalidAudio, InvalidSpectrogram, ItemError, NumericError,
    ParseError, S2STError, ShapeError, VocabError,
)
from .text import CharTokenizer, TextSequence  # noqa: E402

__all__ = [
    "AlignmentError", "CharTokenizer", "Config", "ConfigError", "DataError", "InvalidAudio",
    "InvalidSpectrogram", "ItemError", "MelConfig", "MelSpectrogram", "NumericError", "ParseError",
    "S2STError", "ShapeError", "TextSequence", "VocabError", "Waveform", "griffin_lim", "load_config",
    "log_mel", "resample", "__version__",
]
