"""Discrete speech units: a k-means codebook over target mel frames pooled to 25 Hz."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .audio import TARGET_MEL, MelConfig, MelSpectrogram
from .config import frames_per_token
from .errors import ConfigError, DataError, VocabError

TOKEN_RATE = 25


@dataclass
class SpeechTokenSequence:
    token_ids: list[int]
    rate: int = TOKEN_RATE
    truncated: bool = False

    def __post_init__(self):
        self.token_ids = [int(t) for t in self.token_ids]
        if any(t < 0 for t in self.token_ids):
            raise VocabError("speech token ids must be non-negative")

    def __len__(self):
        return len(self.token_ids)

    @property
    def duration(self) -> float:
        return len(self.token_ids) / self.rate


@dataclass
class Codebook:
    centroids: np.ndarray  # (V_speech, D_unit)
    mel_config: MelConfig = field(default=TARGET_MEL)
    rate: int = TOKEN_RATE

    def __post_init__(self):
        self.centroids = np.asarray(self.centroids, dtype=np.float64)
        if not np.all(np.isfinite(self.centroids)):
            raise DataError("codebook has non-finite centroids")
        if len(np.unique(self.centroids, axis=0)) != len(self.centroids):
            raise DataError("codebook has duplicate centroids")

    @property
    def size(self) -> int:
        return self.centroids.shape[0]

    @property
    def width(self) -> int:
        return self.centroids.shape[1]

    @property
    def frames_per_token(self) -> int:
        return frames_per_token(self.mel_config, self.rate)

    def meta(self) -> dict:
        c = self.mel_config
        return {"rate": self.rate, "mel": {
            "sample_rate": c.sample_rate, "n_fft": c.n_fft, "win_length": c.win_length,
            "hop_length": c.hop_length, "n_mels": c.n_mels, "f_min": c.f_min, "f_max": c.f_max,
            "padding": c.padding, "floor_epsilon": c.floor_epsilon}}

    @classmethod
    def from_meta(cls, centroids, meta: dict) -> "Codebook":
        return cls(centroids, MelConfig(**meta["mel"]), meta["rate"])


def pool_frames(frames: np.ndarray, group: int) -> np.ndarray:
    """Average consecutive groups of ``group`` frames; the last group may be short.

    Groups of identical frames pool to exactly that frame.
    """
    frames = np.asarray(frames, dtype=np.float64)
    n = frames.shape[0]
    out = np.empty((-(-n // group), frames.shape[1]))
    for j, start in enumerate(range(0, n, group)):
        g = frames[start : start + group]
        out[j] = g[0] + (g - g[0]).mean(axis=0)
    return out


def pooled_frames(m: MelSpectrogram, rate: int = TOKEN_RATE) -> np.ndarray:
    return pool_frames(m.frames, frames_per_token(m.config, rate))


def _sq_dists(x: np.ndarray, c: np.ndarray) -> np.ndarray:
    # direct differences so exact ties stay exact
    return ((x[:, None, :] - c[None, :, :]) ** 2).sum(axis=-1)


def nearest(x: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    """Index of the nearest centroid per row; ties go to the lowest index."""
    if len(x) == 0:
        return np.zeros(0, dtype=np.int64)
    return np.argmin(_sq_dists(x, centroids), axis=1)


def _kmeans_pp_add(x, centroids, count, rng):
    centroids = list(centroids)
    for _ in range(count):
        if centroids:
            d = _sq_dists(x, np.asarray(centroids)).min(axis=1)
        else:
            d = np.ones(len(x))
        total = d.sum()
        if total <= 0:
            raise DataError("not enough distinct pooled frames for the requested codebook size")
        centroids.append(x[rng.choice(len(x), p=d / total)])
    return np.asarray(centroids)


def _lloyd(x, centroids, iters):
    for _ in range(iters):
        assign = nearest(x, centroids)
        new = centroids.copy()
        for k in range(len(centroids)):
            members = x[assign == k]
            if len(members):
                # anchored mean: a cluster of identical frames lands exactly on them
                new[k] = members[0] + (members - members[0]).mean(axis=0)
        if np.array_equal(new, centroids):
            break
        # a move that would raise the error (or collide) is rejected
        if quantization_error(x, new) > quantization_error(x, centroids) or \
                len(np.unique(new, axis=0)) < len(new):
            break
        centroids = new
    return centroids


def quantization_error(x: np.ndarray, centroids: np.ndarray) -> float:
    """Mean squared distance from each row to its nearest centroid."""
    return float(_sq_dists(x, centroids).min(axis=1).mean())


def fit_kmeans(x: np.ndarray, k: int, seed: int = 0, iters: int = 100, incremental: bool = True) -> np.ndarray:
    """k-means++ seeding plus Lloyd iterations, deterministic in ``seed``.

    With ``incremental`` the codebook is grown one centroid at a time, each
    level warm-started from the previous one. A fit of size ``k`` therefore
    passes through every smaller fit with the same seed, so the error never
    increases with ``k``.
    """
    x = np.asarray(x, dtype=np.float64)
    if len(np.unique(x, axis=0)) < k:
        raise DataError(f"need at least {k} distinct pooled frames, have {len(np.unique(x, axis=0))}")
    rng = np.random.default_rng(seed)
    if not incremental:
        return _lloyd(x, _kmeans_pp_add(x, [], k, rng), iters)
    centroids = np.zeros((0, x.shape[1]))
    for _ in range(k):
        centroids = _lloyd(x, _kmeans_pp_add(x, centroids, 1, rng), iters)
    return centroids


def train_codebook(corpus, v_speech: int = 64, seed: int = 0, iters: int = 100,
                   rate: int = TOKEN_RATE, incremental: bool = True) -> Codebook:
    """Fit a codebook on a list of target-side :class:`MelSpectrogram`."""
    corpus = list(corpus)
    if not corpus:
        raise DataError("empty corpus")
    cfg = corpus[0].config
    if any(m.config != cfg for m in corpus):
        raise ConfigError("all spectrograms in the corpus must share one mel config")
    pooled = np.concatenate([pooled_frames(m, rate) for m in corpus])
    if len(pooled) < v_speech:
        raise DataError(f"corpus yields {len(pooled)} pooled frames, fewer than V_speech={v_speech}")
    return Codebook(fit_kmeans(pooled, v_speech, seed, iters, incremental), cfg, rate)


def tokenize(m: MelSpectrogram, codebook: Codebook) -> SpeechTokenSequence:
    if m.n_mels != codebook.width:
        raise ConfigError(f"spectrogram has {m.n_mels} mel channels, codebook expects {codebook.width}")
    if m.config.sample_rate != codebook.mel_config.sample_rate:
        raise ConfigError("spectrogram and codebook were built for different sample rates")
    ids = nearest(pooled_frames(m, codebook.rate), codebook.centroids)
    return SpeechTokenSequence(ids.tolist(), codebook.rate)


def detokenize(s: SpeechTokenSequence, codebook: Codebook) -> MelSpectrogram:
    """Centroid lookup, each token repeated to the frontend frame rate."""
    ids = np.asarray(s.token_ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= codebook.size):
        raise VocabError(f"speech token outside [0, {codebook.size})")
    fpt = codebook.frames_per_token
    frames = np.repeat(codebook.centroids[ids], fpt, axis=0).reshape(-1, codebook.width)
    cfg = codebook.mel_config
    return MelSpectrogram(frames, cfg, n_samples=len(ids) * fpt * cfg.hop_length)


def export_jsonl(items, path) -> None:
    """Write ``(item_id, SpeechTokenSequence)`` pairs as JSON lines."""
    with open(path, "w", encoding="utf-8") as fh:
        for item_id, seq in items:
            fh.write(json.dumps({"id": item_id, "rate": seq.rate, "tokens": seq.token_ids}) + "\n")
