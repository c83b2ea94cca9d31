"""Triplet corpora: JSON-lines manifests, ingestion and a synthetic tone corpus.

Synthetic "speech" renders each character as a short sine tone (spaces are
silence), so an utterance's tone pattern spells its text. Source sentences
come from a toy lexicon; the target is the word-reversed, lexicon-mapped
sentence.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .audio import MelSpectrogram, Waveform, log_mel, read_wav, resample, write_wav
from .config import AudioConfig, TokenizerConfig
from .errors import DataError, InvalidAudio, ItemError, ParseError
from .speech_tokens import Codebook, SpeechTokenSequence, tokenize, train_codebook
from .text import CharTokenizer

log = logging.getLogger(__name__)

LEXICON = {
    "le": "the", "chat": "cat", "chien": "dog", "noir": "black", "blanc": "white",
    "mange": "eats", "boit": "drinks", "pain": "bread", "lait": "milk", "petit": "small",
    "grand": "big", "rouge": "red",
}
ALPHABET = " abcdefghijklmnopqrstuvwxyz"
REQUIRED_FIELDS = ("id", "source_audio", "target_text", "target_audio")
SPLITS = ("train", "dev", "test")


def translate_rule(source_text: str) -> str:
    return " ".join(LEXICON[w] for w in reversed(source_text.split()))


@dataclass(frozen=True)
class ToneVoice:
    sample_rate: int
    char_seconds: float
    base_hz: float
    step_hz: float
    amplitude: float = 0.4


SOURCE_VOICE = ToneVoice(16000, 0.06, 250.0, 110.0)
# 80 ms per character = two 25 Hz speech tokens
TARGET_VOICE = ToneVoice(22050, 0.08, 300.0, 120.0)


def render_tones(text: str, voice: ToneVoice, rng: np.random.Generator) -> Waveform:
    n = int(round(voice.char_seconds * voice.sample_rate))
    fade = max(1, int(0.005 * voice.sample_rate))
    envelope = np.ones(n)
    ramp = 0.5 - 0.5 * np.cos(np.linspace(0, np.pi, fade))
    envelope[:fade] = ramp
    envelope[-fade:] = ramp[::-1]
    t = np.arange(n) / voice.sample_rate
    parts = []
    for ch in text:
        idx = ALPHABET.index(ch)
        if ch == " ":
            seg = np.zeros(n)
        else:
            amp = voice.amplitude * (1 + 0.1 * (rng.random() - 0.5))
            seg = amp * envelope * np.sin(2 * np.pi * (voice.base_hz + voice.step_hz * idx) * t)
        parts.append(seg)
    x = np.concatenate(parts) + 1e-3 * rng.standard_normal(n * len(text))
    return Waveform(np.clip(x, -1, 1), voice.sample_rate)


def synthetic_sentences(n_items: int, seed: int) -> list[str]:
    words = sorted(LEXICON)
    rng = np.random.default_rng(seed)
    seen, out = set(), []
    while len(out) < n_items:
        # at least four words, so corpus BLEU-4 has 4-grams to count
        k = int(rng.integers(4, 6))
        sent = " ".join(words[i] for i in rng.choice(len(words), size=k, replace=False))
        if sent not in seen:
            seen.add(sent)
            out.append(sent)
    return out


def make_synthetic_corpus(n_items: int, seed: int, out_dir, splits=None) -> Path:
    """Write WAV files and ``manifest.jsonl`` under ``out_dir``; returns the manifest path.

    ``splits`` optionally gives one split name per item (default: all train).
    """
    if n_items < 1:
        raise DataError("n_items must be >= 1")
    out_dir = Path(out_dir)
    (out_dir / "audio").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng([seed, 1])
    splits = list(splits) if splits is not None else ["train"] * n_items
    lines = []
    for i, src_text in enumerate(synthetic_sentences(n_items, seed)):
        item_id = f"syn{i:04d}"
        tgt_text = translate_rule(src_text)
        src = render_tones(src_text, SOURCE_VOICE, rng)
        tgt = render_tones(tgt_text, TARGET_VOICE, rng)
        write_wav(out_dir / "audio" / f"{item_id}_src.wav", src)
        write_wav(out_dir / "audio" / f"{item_id}_tgt.wav", tgt)
        lines.append({
            "id": item_id, "source_audio": f"audio/{item_id}_src.wav", "source_lang": "xx",
            "source_text": src_text, "target_text": tgt_text, "target_audio": f"audio/{item_id}_tgt.wav",
            "target_lang": "en", "split": splits[i],
        })
    manifest = out_dir / "manifest.jsonl"
    with open(manifest, "w", encoding="utf-8") as fh:
        for line in lines:
            fh.write(json.dumps(line, sort_keys=True) + "\n")
    return manifest


# -- ingestion --------------------------------------------------------------


@dataclass
class TranslationTriplet:
    id: str
    source_audio: Path
    target_text: str
    target_audio: Path
    source_lang: str = ""
    target_lang: str = "en"
    split: str = "train"
    source_text: str = ""


@dataclass
class Item:
    triplet: TranslationTriplet
    source: Waveform
    target: Waveform
    source_mel: MelSpectrogram
    target_mel: MelSpectrogram

    @property
    def id(self) -> str:
        return self.triplet.id

    @property
    def target_text(self) -> str:
        return self.triplet.target_text


@dataclass
class Dataset:
    items: list[Item]
    audio: AudioConfig
    errors: list[ItemError] = field(default_factory=list)
    codebook: Codebook | None = None
    _tokenizer: CharTokenizer | None = None

    def __len__(self):
        return len(self.items)

    def split(self, name: str) -> "Dataset":
        return Dataset([it for it in self.items if it.triplet.split == name], self.audio, [],
                       self.codebook, self.tokenizer)

    @property
    def tokenizer(self) -> CharTokenizer:
        if self._tokenizer is None:
            self._tokenizer = CharTokenizer.from_texts([it.target_text for it in self.items])
        return self._tokenizer

    @tokenizer.setter
    def tokenizer(self, tok: CharTokenizer) -> None:
        self._tokenizer = tok

    def fit_codebook(self, cfg: TokenizerConfig, seed: int = 0) -> Codebook:
        self.codebook = train_codebook([it.target_mel for it in self.items], cfg.speech_vocab, seed,
                                       cfg.kmeans_iters, cfg.token_rate)
        return self.codebook

    def speech_tokens(self, item: Item) -> SpeechTokenSequence:
        if self.codebook is None:
            raise DataError("no codebook fitted for this dataset")
        return tokenize(item.target_mel, self.codebook)

    def summary(self) -> str:
        s = f"{len(self.items)} items"
        if self.errors:
            s += f", {len(self.errors)} skipped: " + "; ".join(str(e) for e in self.errors)
        return s

    def feature_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for it in self.items:
            out[f"{it.id}/source_mel"] = it.source_mel.frames
            out[f"{it.id}/target_mel"] = it.target_mel.frames
        return out

    def save_features(self, path) -> None:
        np.savez(path, **self.feature_arrays())


def _parse_line(raw: str, lineno: int, base: Path) -> TranslationTriplet:
    try:
        rec = json.loads(raw)
    except json.JSONDecodeError as exc:
        raise ParseError(f"invalid JSON: {exc.msg}", lineno) from None
    if not isinstance(rec, dict):
        raise ParseError("expected a JSON object", lineno)
    missing = [k for k in REQUIRED_FIELDS if k not in rec]
    if missing:
        raise ParseError(f"missing field(s) {', '.join(missing)}", lineno)
    split = rec.get("split", "train")
    if split not in SPLITS:
        raise ParseError(f"unknown split {split!r}", lineno)
    return TranslationTriplet(
        id=str(rec["id"]), source_audio=base / rec["source_audio"], target_text=str(rec["target_text"]),
        target_audio=base / rec["target_audio"], source_lang=rec.get("source_lang", ""),
        target_lang=rec.get("target_lang", "en"), split=split, source_text=rec.get("source_text", ""),
    )


def load_item(trip: TranslationTriplet, audio: AudioConfig) -> Item:
    src_cfg, tgt_cfg = audio.source_mel(), audio.target_mel()
    try:
        src = resample(read_wav(trip.source_audio), src_cfg.sample_rate)
        tgt = resample(read_wav(trip.target_audio), tgt_cfg.sample_rate)
        return Item(trip, src, tgt, log_mel(src, src_cfg), log_mel(tgt, tgt_cfg))
    except InvalidAudio as exc:
        raise ItemError(trip.id, str(exc)) from exc


def ingest(manifest_path, audio: AudioConfig | None = None) -> Dataset:
    """Read a JSON-lines manifest, load and resample audio, compute features.

    Unreadable audio skips the item (recorded in ``Dataset.errors``); a
    malformed manifest line is fatal.
    """
    audio = audio or AudioConfig()
    path = Path(manifest_path)
    try:
        lines = path.read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise DataError(f"cannot read manifest {path}: {exc}") from exc
    triplets = [_parse_line(raw, i, path.parent) for i, raw in enumerate(lines, 1) if raw.strip()]
    if not triplets:
        raise DataError(f"manifest {path} is empty")
    ids = [t.id for t in triplets]
    if len(set(ids)) != len(ids):
        raise DataError("duplicate item ids in manifest")
    items, errors = [], []
    for trip in sorted(triplets, key=lambda t: t.id):
        try:
            items.append(load_item(trip, audio))
        except ItemError as exc:
            log.warning("skipping %s", exc)
            errors.append(exc)
    if not items:
        raise DataError(f"no usable items in {path}: " + "; ".join(str(e) for e in errors))
    return Dataset(items, audio, errors)
