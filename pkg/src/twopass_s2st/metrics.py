"""Corpus BLEU, ASR-BLEU and an embedding-cosine stand-in for semantic similarity.

Similarity numbers come from a simple embedding proxy and are labelled
``proxy=True``; they are not comparable with scores from a learned
speech-translation quality model.
"""

from __future__ import annotations

import hashlib
import logging
import math
import re
from collections import Counter
from dataclasses import asdict, dataclass, field
from typing import Callable, Protocol, Sequence

import numpy as np

from .audio import MelSpectrogram, Waveform, log_mel, resample
from .errors import ConfigError, DataError
from .speech_tokens import Codebook, tokenize
from .text import TextSequence

log = logging.getLogger(__name__)

MAX_ORDER = 4
_PUNCT = re.compile(r"([^\w\s])")


def normalize(text: str) -> list[str]:
    """Lowercase, split punctuation off words, split on whitespace."""
    return _PUNCT.sub(r" \1 ", text.lower()).split()


def ngram_counts(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


@dataclass
class BleuReport:
    score: float
    precisions: list[float]
    matches: list[int]
    totals: list[int]
    brevity_penalty: float
    candidate_length: int
    reference_length: int
    transcriber: str | None = None
    n_items: int = 0
    skipped: int = 0

    def to_dict(self) -> dict:
        return asdict(self)


def _as_text(x, decode) -> str:
    if isinstance(x, str):
        return x
    if isinstance(x, TextSequence):
        if decode is None:
            raise ConfigError("TextSequence inputs need a decode function")
        return decode(x)
    return " ".join(x)


def corpus_bleu(candidates, references, decode: Callable | None = None) -> BleuReport:
    """Corpus-level BLEU-4 with clipped counts and brevity penalty ``min(1, exp(1 - r/c))``."""
    if len(candidates) != len(references):
        raise DataError(f"{len(candidates)} candidates but {len(references)} references")
    if not candidates:
        raise DataError("empty corpus")
    matches = [0] * MAX_ORDER
    totals = [0] * MAX_ORDER
    c_len = r_len = 0
    for cand, ref in zip(candidates, references):
        c = normalize(_as_text(cand, decode))
        r = normalize(_as_text(ref, decode))
        c_len += len(c)
        r_len += len(r)
        for n in range(1, MAX_ORDER + 1):
            cc, rc = ngram_counts(c, n), ngram_counts(r, n)
            matches[n - 1] += sum(min(k, rc[g]) for g, k in cc.items())
            totals[n - 1] += max(0, len(c) - n + 1)
    precisions = [m / t if t else 0.0 for m, t in zip(matches, totals)]
    if c_len == 0:
        bp = 0.0
    elif c_len >= r_len:
        bp = 1.0
    else:
        bp = math.exp(1.0 - r_len / c_len)
    if min(precisions) == 0.0 or bp == 0.0:
        score = 0.0
    else:
        score = 100.0 * bp * math.exp(sum(math.log(p) for p in precisions) / MAX_ORDER)
    return BleuReport(score, precisions, matches, totals, bp, c_len, r_len, n_items=len(candidates))


# -- ASR-BLEU ---------------------------------------------------------------


class Transcriber(Protocol):
    name: str

    def __call__(self, w: Waveform) -> str: ...


def _waveform_key(w: Waveform) -> str:
    pcm = np.round(np.clip(w.samples, -1, 1) * 32767).astype("<i2")
    return hashlib.sha256(pcm.tobytes() + str(w.sample_rate).encode()).hexdigest()


def _time_normalised(frames: np.ndarray, n: int = 64) -> np.ndarray:
    src = np.linspace(0.0, 1.0, len(frames))
    dst = np.linspace(0.0, 1.0, n)
    return np.stack([np.interp(dst, src, frames[:, d]) for d in range(frames.shape[1])], axis=1)


class CorpusOracleTranscriber:
    """Returns the gold text of the corpus utterance that a waveform matches.

    An exact sample match wins; otherwise the utterance whose log-mel (time
    normalised to a fixed frame count) is closest in mean squared distance.
    """

    name = "corpus-oracle"

    def __init__(self, entries, mel_config):
        """entries: iterable of ``(text, Waveform)`` gold pairs."""
        self.mel_config = mel_config
        self.texts: list[str] = []
        self.keys: dict[str, str] = {}
        feats = []
        for text, w in entries:
            w = resample(w, mel_config.sample_rate)
            self.keys[_waveform_key(w)] = text
            self.texts.append(text)
            feats.append(_time_normalised(log_mel(w, mel_config).frames))
        if not feats:
            raise DataError("oracle transcriber needs at least one corpus entry")
        self.features = np.stack(feats)

    def __call__(self, w: Waveform) -> str:
        if len(w) == 0:
            return ""
        w = resample(w, self.mel_config.sample_rate)
        hit = self.keys.get(_waveform_key(w))
        if hit is not None:
            return hit
        f = _time_normalised(log_mel(w, self.mel_config).frames)
        dists = ((self.features - f[None]) ** 2).mean(axis=(1, 2))
        return self.texts[int(np.argmin(dists))]


def asr_bleu(translated_audio: Sequence[Waveform], references: Sequence[str], transcriber: Transcriber) -> BleuReport:
    """Transcribe each waveform and score the transcripts against the references."""
    if len(translated_audio) != len(references):
        raise DataError(f"{len(translated_audio)} waveforms but {len(references)} references")
    hyps, refs, skipped = [], [], 0
    for i, (w, ref) in enumerate(zip(translated_audio, references)):
        try:
            hyp = transcriber(w)
        except Exception as exc:  # a failing item must not sink the corpus score
            log.warning("transcriber %s failed on item %d: %s", getattr(transcriber, "name", "?"), i, exc)
            skipped += 1
            continue
        hyps.append(hyp.text if hasattr(hyp, "text") else hyp)
        refs.append(ref)
    if not hyps:
        raise DataError("transcriber failed on every item")
    report = corpus_bleu(hyps, refs)
    report.transcriber = getattr(transcriber, "name", type(transcriber).__name__)
    report.skipped = skipped
    return report


# -- semantic similarity proxy ----------------------------------------------


@dataclass
class SimilarityReport:
    scores: list[float]
    mode: str
    mean: float = 0.0
    proxy: bool = True
    terms: list[dict] = field(default_factory=list)

    def __post_init__(self):
        self.mean = float(np.mean(self.scores)) if self.scores else 0.0

    @property
    def score(self) -> float:
        return self.mean

    def to_dict(self) -> dict:
        return asdict(self)


class CodebookEmbedder:
    """Audio: codebook centroids of the tokenised audio (minus the codebook mean),
    averaged within ``segments`` equal time spans and concatenated.
    Text: mean of fixed random per-token vectors of the same width."""

    def __init__(self, codebook: Codebook, segments: int = 4, text_vocab: int = 256, seed: int = 0):
        self.codebook = codebook
        self.segments = segments
        self.dim = codebook.width * segments
        self.offset = codebook.centroids.mean(axis=0)
        rng = np.random.default_rng(seed)
        self.text_table = rng.standard_normal((text_vocab, self.dim))

    def embed_audio(self, w: Waveform) -> np.ndarray:
        cfg = self.codebook.mel_config
        if len(w) == 0:
            return np.zeros(self.dim)
        w = resample(w, cfg.sample_rate)
        if len(w) < cfg.win_length:
            return np.zeros(self.dim)
        ids = tokenize(log_mel(w, cfg), self.codebook).token_ids
        vecs = self.codebook.centroids[ids] - self.offset
        parts = np.array_split(vecs, self.segments)
        return np.concatenate([p.mean(axis=0) if len(p) else np.zeros(self.codebook.width) for p in parts])

    def embed_text(self, t: TextSequence) -> np.ndarray:
        ids = [i for i in t.content if 0 <= i < len(self.text_table)]
        if not ids:
            return np.zeros(self.dim)
        return self.text_table[ids].mean(axis=0)

    def __call__(self, x) -> np.ndarray:
        if isinstance(x, Waveform):
            return self.embed_audio(x)
        if isinstance(x, TextSequence):
            return self.embed_text(x)
        if isinstance(x, MelSpectrogram):
            raise ConfigError("embed waveforms or text, not spectrograms")
        return np.asarray(x, dtype=np.float64)


def cosine(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape == b.shape and np.array_equal(a, b) and np.any(a):
        return 1.0
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        return 0.0
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


MODES = ("unsupervised", "qe", "ref")


def semantic_similarity(src, hyp, ref=None, mode: str = "qe", embedder: Callable | None = None) -> SimilarityReport:
    """Cosine similarity between embeddings for one source/hypothesis pair.

    ``qe`` and ``unsupervised`` compare source with hypothesis (unsupervised
    requires audio on both sides); ``ref`` averages sim(hyp, ref) and
    sim(hyp, src).
    """
    if mode not in MODES:
        raise ConfigError(f"unknown similarity mode {mode!r}")
    if embedder is None:
        raise ConfigError("no embedder registered")
    if mode == "unsupervised" and not (isinstance(src, Waveform) and isinstance(hyp, Waveform)):
        raise ConfigError("unsupervised mode compares audio with audio")
    e_hyp, e_src = embedder(hyp), embedder(src)
    hs = cosine(e_hyp, e_src)
    if mode != "ref":
        return SimilarityReport([hs], mode, terms=[{"hyp_src": hs}])
    if ref is None:
        raise ConfigError("ref mode needs a reference")
    hr = cosine(e_hyp, embedder(ref))
    return SimilarityReport([(hr + hs) / 2], mode, terms=[{"hyp_ref": hr, "hyp_src": hs}])


def corpus_similarity(items, mode: str, embedder) -> SimilarityReport:
    """``items``: iterable of ``(src, hyp, ref)``; scores per item plus their mean."""
    scores, terms = [], []
    for src, hyp, ref in items:
        r = semantic_similarity(src, hyp, ref, mode, embedder)
        scores.extend(r.scores)
        terms.extend(r.terms)
    return SimilarityReport(scores, mode, terms=terms)
