"""Chunk-wise conditional flow matching from speech tokens to mel, then to audio.

Every ``K`` speech tokens form a chunk. A chunk's mel frames are generated
by integrating a learned velocity field from Gaussian noise, conditioned on
the chunk's tokens, the last few mel frames of earlier chunks and a speaker
embedding. The flow works on per-channel standardised log-mel.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Iterator

import numpy as np
import torch
from torch import nn
import torch.nn.functional as F

from .audio import TARGET_MEL, MelConfig, MelSpectrogram, Waveform, griffin_lim, log_mel, resample
from .config import CFMConfig
from .errors import AlignmentError, ConfigError, InvalidAudio, S2STError, VocabError
from .layers import Stack, init_weights, key_padding_mask, sinusoidal, timestep_embedding
from .speech_tokens import SpeechTokenSequence

SPEAKER_PROJECTION_SEED = 20240917


# -- chunking ---------------------------------------------------------------


@dataclass
class ChunkSchedule:
    K: int
    chunks: list[list[int]]
    boundaries: list[tuple[int, int]]


def chunk(s: SpeechTokenSequence | list[int], K: int) -> ChunkSchedule:
    if K < 1:
        raise ConfigError(f"chunk size must be >= 1, got {K}")
    ids = list(s.token_ids if isinstance(s, SpeechTokenSequence) else s)
    bounds = [(i, min(i + K, len(ids))) for i in range(0, len(ids), K)]
    return ChunkSchedule(K, [ids[a:b] for a, b in bounds], bounds)


# -- speaker embedding ------------------------------------------------------


@dataclass
class SpeakerEmbedding:
    vector: np.ndarray
    source: str = ""

    def __post_init__(self):
        self.vector = np.asarray(self.vector, dtype=np.float64)
        if not np.all(np.isfinite(self.vector)):
            raise ValueError("speaker embedding is not finite")
        if abs(np.linalg.norm(self.vector) - 1.0) > 1e-6:
            raise ValueError("speaker embedding must have unit norm")


def _speaker_projection(in_dim: int, out_dim: int) -> np.ndarray:
    rng = np.random.default_rng(SPEAKER_PROJECTION_SEED)
    return rng.standard_normal((in_dim, out_dim)) / np.sqrt(in_dim)


def speaker_embed(reference: Waveform, dim: int = 64, mel_config: MelConfig = TARGET_MEL,
                  source: str = "") -> SpeakerEmbedding:
    """Per-channel mean and std of the reference's log-mel, fixed random projection, L2 norm."""
    if reference.duration < 0.5:
        raise InvalidAudio(f"speaker reference is {reference.duration:.3f} s, need at least 0.5 s")
    w = resample(reference, mel_config.sample_rate)
    frames = log_mel(w, mel_config).frames
    stats = np.concatenate([frames.mean(axis=0), frames.std(axis=0)])
    v = stats @ _speaker_projection(stats.size, dim)
    return SpeakerEmbedding(v / np.linalg.norm(v), source)


# -- velocity network -------------------------------------------------------


class VelocityNet(nn.Module):
    """Transformer over ``[context start ; past mel frames ; noisy chunk frames]``.

    Chunk frames carry their token embedding, a time embedding and the
    projected speaker vector. Attention is unrestricted inside that window;
    nothing from later chunks is ever part of it.
    """

    def __init__(self, cfg: CFMConfig, n_mels: int, speech_vocab: int, frames_per_token: int):
        super().__init__()
        w = cfg.width
        self.cfg = cfg
        self.n_mels = n_mels
        self.speech_vocab = speech_vocab
        self.frames_per_token = frames_per_token
        self.in_proj = nn.Linear(n_mels, w)
        self.ctx_proj = nn.Linear(n_mels, w)
        self.ctx_start = nn.Parameter(torch.zeros(w))
        self.segment = nn.Embedding(2, w)
        self.token_embed = nn.Embedding(speech_vocab, w)
        self.time_mlp = nn.Sequential(nn.Linear(w, w), nn.SiLU(), nn.Linear(w, w))
        self.spk_proj = nn.Linear(cfg.speaker_dim, w)
        self.stack = Stack(w, cfg.heads, cfg.layers)
        self.ln_f = nn.LayerNorm(w)
        self.out = nn.Linear(w, n_mels)
        self.register_buffer("mel_mean", torch.zeros(n_mels))
        self.register_buffer("mel_std", torch.ones(n_mels))
        init_weights(self)
        nn.init.normal_(self.ctx_start, std=0.02)

    def set_normalization(self, frames: np.ndarray) -> None:
        frames = np.asarray(frames, dtype=np.float64)
        self.mel_mean.copy_(torch.as_tensor(frames.mean(axis=0)))
        self.mel_std.copy_(torch.as_tensor(np.maximum(frames.std(axis=0), 1e-3)))

    def normalize(self, frames) -> torch.Tensor:
        x = torch.as_tensor(np.asarray(frames), dtype=self.mel_mean.dtype)
        return (x - self.mel_mean) / self.mel_std

    def denormalize(self, x: torch.Tensor) -> np.ndarray:
        return (x * self.mel_std + self.mel_mean).detach().cpu().numpy().astype(np.float64)

    def forward(self, x_t, t, tokens, token_lens, context, context_lens, speaker):
        """Velocity for the chunk frames, shape ``(B, F, n_mels)``.

        x_t ``(B, F, n_mels)`` with ``F = max(token_lens) * frames_per_token``;
        context ``(B, C, n_mels)`` normalised; speaker ``(B, speaker_dim)``.
        """
        b = x_t.shape[0]
        fpt = self.frames_per_token
        frame_lens = token_lens * fpt
        tok = self.token_embed(tokens).repeat_interleave(fpt, dim=1)
        cond = self.time_mlp(timestep_embedding(t, self.cfg.width)) + self.spk_proj(speaker)
        h = self.in_proj(x_t) + tok + cond[:, None, :] + self.segment.weight[1]
        c = self.ctx_proj(context) + self.segment.weight[0]

        total_lens = 1 + context_lens + frame_lens
        total = int(total_lens.max())
        rows = []
        for i in range(b):
            cl, fl = int(context_lens[i]), int(frame_lens[i])
            row = torch.cat([self.ctx_start[None], c[i, :cl], h[i, :fl]], dim=0)
            rows.append(F.pad(row, (0, 0, 0, total - row.shape[0])))
        x = torch.stack(rows) + sinusoidal(total, self.cfg.width, h.dtype, h.device)
        valid = key_padding_mask(total_lens, total)
        x = self.ln_f(self.stack(x, valid[:, None, :].expand(-1, total, -1)))
        out = []
        for i in range(b):
            start, fl = 1 + int(context_lens[i]), int(frame_lens[i])
            out.append(F.pad(x[i, start : start + fl], (0, 0, 0, x_t.shape[1] - fl)))
        return self.out(torch.stack(out))

    def zero_output(self) -> None:
        nn.init.zeros_(self.out.weight)
        nn.init.zeros_(self.out.bias)


# -- flow matching ----------------------------------------------------------


def interpolate(x0: torch.Tensor, x1: torch.Tensor, t: torch.Tensor) -> torch.Tensor:
    """Point on the straight path from noise ``x0`` (t=0) to data ``x1`` (t=1)."""
    t = t.reshape(t.shape + (1,) * (x0.dim() - t.dim()))
    return (1 - t) * x0 + t * x1


def target_velocity(x0: torch.Tensor, x1: torch.Tensor) -> torch.Tensor:
    return x1 - x0


def flow_matching_loss(predict: Callable, x1: torch.Tensor, mask: torch.Tensor | None = None,
                       generator: torch.Generator | None = None) -> torch.Tensor:
    """Mean squared error between ``predict(x_t, t)`` and ``x1 - x0``.

    ``t ~ U(0, 1)`` per item and ``x0 ~ N(0, I)``; ``mask`` (``x1.shape[:-1]``)
    selects the frames that count.
    """
    b = x1.shape[0]
    t = torch.rand(b, generator=generator, dtype=x1.dtype)
    x0 = torch.randn(x1.shape, generator=generator, dtype=x1.dtype)
    err = (predict(interpolate(x0, x1, t), t) - target_velocity(x0, x1)) ** 2
    if mask is None:
        return err.mean()
    m = mask[..., None].to(err.dtype)
    return (err * m).sum() / (m.sum() * x1.shape[-1])


@dataclass
class ChunkExample:
    tokens: list[int]
    mel: np.ndarray  # gold raw log-mel slice, (len(tokens) * fpt, n_mels)
    context: np.ndarray  # raw log-mel frames of earlier chunks, (C, n_mels)
    speaker: np.ndarray


def _check_tokens(tokens, model: VelocityNet):
    for t in tokens:
        if not 0 <= t < model.speech_vocab:
            raise VocabError(f"speech token {t} outside [0, {model.speech_vocab})")


def _pack(model: VelocityNet, examples: list[ChunkExample]):
    fpt = model.frames_per_token
    dtype = model.mel_mean.dtype
    for ex in examples:
        if len(ex.tokens) == 0:
            raise AlignmentError("empty chunk")
        _check_tokens(ex.tokens, model)
    tok_lens = torch.tensor([len(ex.tokens) for ex in examples])
    tokens = torch.zeros(len(examples), int(tok_lens.max()), dtype=torch.long)
    ctx_lens = torch.tensor([len(ex.context) for ex in examples])
    context = torch.zeros(len(examples), max(1, int(ctx_lens.max())), model.n_mels, dtype=dtype)
    for i, ex in enumerate(examples):
        tokens[i, : len(ex.tokens)] = torch.as_tensor(ex.tokens)
        if len(ex.context):
            context[i, : len(ex.context)] = model.normalize(ex.context)
    speaker = torch.as_tensor(np.stack([ex.speaker for ex in examples]), dtype=dtype)
    return tokens, tok_lens, context, ctx_lens, speaker, tok_lens * fpt


def cfm_train_step(batch: list[ChunkExample], model: VelocityNet, seed: int) -> torch.Tensor:
    """Flow-matching loss on a batch of chunks with noise and times drawn from ``seed``."""
    fpt = model.frames_per_token
    for ex in batch:
        if ex.mel.shape[0] != len(ex.tokens) * fpt:
            raise AlignmentError(
                f"chunk of {len(ex.tokens)} tokens needs {len(ex.tokens) * fpt} mel frames, got {ex.mel.shape[0]}")
    tokens, tok_lens, context, ctx_lens, speaker, frame_lens = _pack(model, batch)
    x1 = torch.zeros(len(batch), int(frame_lens.max()), model.n_mels, dtype=model.mel_mean.dtype)
    for i, ex in enumerate(batch):
        x1[i, : ex.mel.shape[0]] = model.normalize(ex.mel)
    gen = torch.Generator().manual_seed(int(seed))

    def predict(x_t, t):
        return model(x_t, t, tokens, tok_lens, context, ctx_lens, speaker)

    return flow_matching_loss(predict, x1, key_padding_mask(frame_lens, x1.shape[1]), gen)


def chunk_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([int(seed), int(index)]).generate_state(1)[0])


@torch.no_grad()
def cfm_generate_chunk(tokens: list[int], context: np.ndarray, spk: SpeakerEmbedding, model: VelocityNet,
                       ode_steps: int = 10, seed: int = 0) -> np.ndarray:
    """Euler-integrate the velocity field from seeded noise; returns raw log-mel frames."""
    if ode_steps < 1:
        raise ConfigError("ode_steps must be >= 1")
    ex = ChunkExample(list(tokens), np.zeros((0, model.n_mels)), np.asarray(context).reshape(-1, model.n_mels),
                      spk.vector)
    tok, tok_lens, ctx, ctx_lens, speaker, frame_lens = _pack(model, [ex])
    gen = torch.Generator().manual_seed(int(seed))
    x = torch.randn((1, int(frame_lens[0]), model.n_mels), generator=gen, dtype=model.mel_mean.dtype)
    dt = 1.0 / ode_steps
    for i in range(ode_steps):
        t = torch.full((1,), i * dt, dtype=x.dtype)
        x = x + dt * model(x, t, tok, tok_lens, ctx, ctx_lens, speaker)
    return model.denormalize(x[0])


# -- synthesis --------------------------------------------------------------


@dataclass
class SynthesisSettings:
    chunk_size: int = 25
    ode_steps: int = 10
    context_frames: int = 50
    griffin_lim_iterations: int = 32
    seed: int = 0


@dataclass
class Segment:
    index: int
    start_token: int
    end_token: int
    mel: np.ndarray
    waveform: Waveform


@dataclass
class SynthesisResult:
    segments: list[Segment] = field(default_factory=list)

    @property
    def waveform(self) -> Waveform:
        if not self.segments:
            return Waveform(np.zeros(0), TARGET_MEL.sample_rate)
        rate = self.segments[0].waveform.sample_rate
        return Waveform(np.concatenate([s.waveform.samples for s in self.segments]), rate)

    @property
    def mel(self) -> np.ndarray:
        if not self.segments:
            return np.zeros((0, 0))
        return np.concatenate([s.mel for s in self.segments])


class _ChunkSynthesizer:
    def __init__(self, spk, model, settings, mel_config):
        self.spk = spk
        self.model = model
        self.s = settings
        self.mel_config = mel_config
        self.history = np.zeros((0, model.n_mels))
        self.index = 0
        self.position = 0

    def __call__(self, tokens: list[int]) -> Segment:
        c = self.s.context_frames
        context = self.history[-c:] if c > 0 else self.history[:0]
        mel = cfm_generate_chunk(tokens, context, self.spk, self.model, self.s.ode_steps,
                                 chunk_seed(self.s.seed, self.index))
        wave = griffin_lim(MelSpectrogram(mel, self.mel_config), self.s.griffin_lim_iterations)
        seg = Segment(self.index, self.position, self.position + len(tokens), mel, wave)
        self.history = np.concatenate([self.history, mel])
        self.index += 1
        self.position += len(tokens)
        return seg


def synthesize(tokens: SpeechTokenSequence, spk: SpeakerEmbedding, model: VelocityNet,
               settings: SynthesisSettings = SynthesisSettings(),
               mel_config: MelConfig = TARGET_MEL) -> SynthesisResult:
    """Non-streaming synthesis of a complete token sequence."""
    synth = _ChunkSynthesizer(spk, model, settings, mel_config)
    schedule = chunk(tokens, settings.chunk_size)
    return SynthesisResult([synth(c) for c in schedule.chunks])


class StreamError(S2STError):
    def __init__(self, position: int, cause: BaseException):
        super().__init__(f"token stream failed after {position} tokens: {cause}")
        self.position = position


def stream_synthesize(token_stream: Iterable[int], spk: SpeakerEmbedding, model: VelocityNet,
                      settings: SynthesisSettings = SynthesisSettings(),
                      mel_config: MelConfig = TARGET_MEL) -> Iterator[Segment]:
    """Yield one audio segment per completed chunk while tokens are still arriving.

    A segment is produced as soon as its K-th token has been pulled from the
    stream; a short final chunk is flushed when the stream ends.
    """
    if settings.chunk_size < 1:
        raise ConfigError("chunk size must be >= 1")
    synth = _ChunkSynthesizer(spk, model, settings, mel_config)
    buffer: list[int] = []
    consumed = 0
    it = iter(token_stream)
    while True:
        try:
            tok = next(it)
        except StopIteration:
            break
        except Exception as exc:
            raise StreamError(consumed, exc) from exc
        consumed += 1
        buffer.append(int(tok))
        if len(buffer) == settings.chunk_size:
            yield synth(buffer)
            buffer = []
    if buffer:
        yield synth(buffer)
