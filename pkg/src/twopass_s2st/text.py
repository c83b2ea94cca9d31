"""Character-level text vocabulary and token sequences."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

from .errors import VocabError

PAD, BOS, EOS, UNK = 0, 1, 2, 3
SPECIALS = {"<pad>": PAD, "<bos>": BOS, "<eos>": EOS, "<unk>": UNK}


@dataclass
class TextSequence:
    """Token ids of one text; ``token_ids`` carries a trailing EOS when terminated."""

    token_ids: list[int]
    prompt_prefix: list[int] = field(default_factory=list)
    truncated: bool = False

    def __post_init__(self):
        self.token_ids = [int(t) for t in self.token_ids]
        self.prompt_prefix = [int(t) for t in self.prompt_prefix]

    @property
    def content(self) -> list[int]:
        ids = self.token_ids
        return ids[:-1] if ids and ids[-1] == EOS else list(ids)

    def __len__(self):
        return len(self.token_ids)


class CharTokenizer:
    """Maps characters to ids; ids 0-3 are reserved for PAD/BOS/EOS/UNK.

    ``vocab_size`` is the embedding-table size; it may exceed the number of
    characters actually seen.
    """

    def __init__(self, chars, vocab_size: int = 256):
        chars = sorted(set(chars))
        if len(chars) + len(SPECIALS) > vocab_size:
            raise VocabError(f"{len(chars)} characters do not fit a vocabulary of {vocab_size}")
        self.vocab_size = vocab_size
        self.char_to_id = {c: i + len(SPECIALS) for i, c in enumerate(chars)}
        self.id_to_char = {i: c for c, i in self.char_to_id.items()}

    @classmethod
    def from_texts(cls, texts, vocab_size: int = 256):
        return cls({c for t in texts for c in t}, vocab_size)

    def encode(self, text: str, add_eos: bool = True, prompt: str = "") -> TextSequence:
        ids = [self.char_to_id.get(c, UNK) for c in text]
        if add_eos:
            ids.append(EOS)
        prefix = [self.char_to_id.get(c, UNK) for c in prompt]
        return TextSequence(ids, prefix)

    def decode(self, seq) -> str:
        ids = seq.content if isinstance(seq, TextSequence) else seq
        return "".join(self.id_to_char.get(i, "") for i in ids if i >= len(SPECIALS))

    def to_json(self) -> str:
        return json.dumps({"vocab_size": self.vocab_size, "specials": SPECIALS,
                           "chars": self.char_to_id}, sort_keys=True, ensure_ascii=False)

    @classmethod
    def from_json(cls, text: str):
        data = json.loads(text)
        tok = cls([], data["vocab_size"])
        tok.char_to_id = {c: int(i) for c, i in data["chars"].items()}
        tok.id_to_char = {i: c for c, i in tok.char_to_id.items()}
        return tok

    def save(self, path) -> None:
        Path(path).write_text(self.to_json(), encoding="utf-8")

    @classmethod
    def load(cls, path):
        return cls.from_json(Path(path).read_text(encoding="utf-8"))


def check_ids(ids, vocab_size: int, what: str = "token") -> None:
    for i in ids:
        if not 0 <= i < vocab_size:
            raise VocabError(f"{what} id {i} outside vocabulary of size {vocab_size}")
