"""Speech-to-text translation: speech encoder, speech adapter and text LM."""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn
import torch.nn.functional as F

from .audio import MelSpectrogram
from .config import S2TTConfig
from .errors import ConfigError, ShapeError, VocabError
from .layers import PrefixLM, Stack, init_weights, key_padding_mask, pad_ids, sequence_nll, sinusoidal
from .text import BOS, EOS, TextSequence, check_ids


@dataclass
class EncodedSpeech:
    features: torch.Tensor  # (T_w, D_w)
    mask: torch.Tensor  # (T_w,) bool


@dataclass
class AdaptedFeatures:
    features: torch.Tensor  # (T_a, D_a)


class SpeechEncoder(nn.Module):
    """Strided conv subsampler, sinusoidal positions, pre-norm transformer blocks."""

    def __init__(self, n_mels: int, width: int, heads: int, layers: int, stride: int = 2):
        super().__init__()
        self.n_mels = n_mels
        self.stride = stride
        self.width = width
        self.conv = nn.Conv1d(n_mels, width, kernel_size=3, stride=stride, padding=1)
        self.stack = Stack(width, heads, layers)
        init_weights(self)

    def output_lengths(self, lengths: torch.Tensor) -> torch.Tensor:
        return (lengths + 2 - 3) // self.stride + 1

    def forward(self, mels: torch.Tensor, lengths: torch.Tensor):
        """mels ``(B, T1, n_mels)`` -> features ``(B, T_w, D_w)`` and valid lengths."""
        if mels.shape[-1] != self.n_mels:
            raise ConfigError(f"encoder expects {self.n_mels} mel channels, got {mels.shape[-1]}")
        mask_in = key_padding_mask(lengths, mels.shape[1])
        x = (mels * mask_in[..., None]).transpose(1, 2)
        x = self.conv(x).transpose(1, 2)
        out_lens = self.output_lengths(lengths)
        x = x + sinusoidal(x.shape[1], self.width, x.dtype, x.device)
        valid = key_padding_mask(out_lens, x.shape[1])
        allowed = valid[:, None, :].expand(-1, x.shape[1], -1)
        return self.stack(x, allowed), out_lens


class SpeechAdapter(nn.Module):
    """Frame stacking followed by four affine layers, each passed through LeakyReLU.

    The activation is applied after the fourth layer too, so the output is
    ``H_4 = LeakyReLU(H_3 W_4 + b_4)``.
    """

    def __init__(self, in_width: int, out_width: int, hidden: int | None = None,
                 stack_factor: int = 4, negative_slope: float = 0.1, stack_padding: str = "pad"):
        super().__init__()
        hidden = hidden or out_width
        widths = [in_width * stack_factor, hidden, hidden, hidden, out_width]
        self.layers = nn.ModuleList(nn.Linear(a, b) for a, b in zip(widths[:-1], widths[1:]))
        self.stack_factor = stack_factor
        self.negative_slope = negative_slope
        self.stack_padding = stack_padding
        init_weights(self)

    def output_lengths(self, lengths: torch.Tensor) -> torch.Tensor:
        return -(-lengths // self.stack_factor)

    def stack_frames(self, x: torch.Tensor) -> torch.Tensor:
        b, t, d = x.shape
        rem = t % self.stack_factor
        if rem:
            if self.stack_padding != "pad":
                raise ShapeError(f"{t} frames not divisible by stack factor {self.stack_factor}")
            x = F.pad(x, (0, 0, 0, self.stack_factor - rem))
        return x.reshape(b, -1, d * self.stack_factor)

    def forward(self, x: torch.Tensor, lengths: torch.Tensor | None = None) -> torch.Tensor:
        if lengths is not None:
            x = x * key_padding_mask(lengths, x.shape[1])[..., None]
        h = self.stack_frames(x)
        if h.shape[-1] != self.layers[0].in_features:
            raise ShapeError(f"adapter input width {h.shape[-1]} != {self.layers[0].in_features}")
        for layer in self.layers:
            h = F.leaky_relu(layer(h), self.negative_slope)
        return h


class S2TTModel(nn.Module):
    def __init__(self, cfg: S2TTConfig, n_mels: int = 80):
        super().__init__()
        self.cfg = cfg
        self.encoder = SpeechEncoder(n_mels, cfg.encoder_width, cfg.encoder_heads,
                                     cfg.encoder_layers, cfg.subsample_stride)
        self.adapter = SpeechAdapter(cfg.encoder_width, cfg.lm_width, cfg.adapter_hidden or None,
                                     cfg.stack_factor, cfg.negative_slope, cfg.stack_padding)
        self.lm = PrefixLM(cfg.text_vocab_size, cfg.text_vocab_size, cfg.lm_width, cfg.lm_heads, cfg.lm_layers)
        self.vocab_size = cfg.text_vocab_size

    def speech_prefix(self, mels, mel_lens):
        enc, enc_lens = self.encoder(mels, mel_lens)
        return self.adapter(enc, enc_lens), self.adapter.output_lengths(enc_lens)

    def _prefix_with_prompt(self, adapted, adapted_lens, prompt_ids):
        if not prompt_ids:
            return adapted, adapted_lens
        b = adapted.shape[0]
        prompt = self.lm.embed(torch.as_tensor(prompt_ids, dtype=torch.long))
        prefix = torch.cat([prompt[None].expand(b, -1, -1), adapted], dim=1)
        return prefix, adapted_lens + len(prompt_ids)

    def text_logits(self, adapted, adapted_lens, targets: list[list[int]], prompt_ids=()):
        """Teacher-forced logits; ``targets[i]`` is predicted from ``[BOS] + targets[i][:-1]``."""
        for t in targets:
            check_ids(t, self.vocab_size)
        prefix, prefix_lens = self._prefix_with_prompt(adapted, adapted_lens, list(prompt_ids))
        inputs, lens = pad_ids([[BOS] + list(t[:-1]) for t in targets])
        return self.lm(prefix, prefix_lens, inputs, lens)

    def batch_loss(self, mels, mel_lens, targets, prompt_ids=()) -> torch.Tensor:
        """Summed token NLL per item, averaged over the batch."""
        adapted, alens = self.speech_prefix(mels, mel_lens)
        logits = self.text_logits(adapted, alens, targets, prompt_ids)
        tgt, lens = pad_ids(targets)
        return sequence_nll(logits, tgt, lens).mean()


def _mel_tensor(m: MelSpectrogram, dtype) -> torch.Tensor:
    return torch.as_tensor(m.frames, dtype=dtype)


def encode_speech(m: MelSpectrogram, model: S2TTModel) -> EncodedSpeech:
    dtype = next(model.parameters()).dtype
    x = _mel_tensor(m, dtype)[None]
    feats, lens = model.encoder(x, torch.tensor([x.shape[1]]))
    return EncodedSpeech(feats[0], torch.ones(int(lens[0]), dtype=torch.bool))


def adapt(e: EncodedSpeech, adapter: SpeechAdapter, stack_factor: int | None = None) -> AdaptedFeatures:
    if stack_factor is not None and stack_factor != adapter.stack_factor:
        raise ShapeError(f"adapter was built for stack factor {adapter.stack_factor}, not {stack_factor}")
    lens = torch.tensor([int(e.mask.sum())])
    return AdaptedFeatures(adapter(e.features[None], lens)[0])


def s2tt_loss(a: AdaptedFeatures, t: TextSequence, model: S2TTModel) -> torch.Tensor:
    """Summed cross-entropy of ``t.token_ids`` given the adapted speech prefix."""
    if len(t.token_ids) == 0:
        raise VocabError("empty target sequence")
    logits = s2tt_logits(a, t, model)
    tgt = torch.as_tensor(t.token_ids)[None]
    return sequence_nll(logits, tgt, torch.tensor([len(t.token_ids)]))[0]


def s2tt_logits(a: AdaptedFeatures, t: TextSequence, model: S2TTModel) -> torch.Tensor:
    """``(1, L, V)`` logits where row ``l`` predicts ``t.token_ids[l]``."""
    check_ids(t.prompt_prefix, model.vocab_size)
    feats = a.features[None]
    return model.text_logits(feats, torch.tensor([feats.shape[1]]), [t.token_ids], t.prompt_prefix)


def _next_logprobs(model: S2TTModel, a: AdaptedFeatures, prefixes: list[list[int]], prompt) -> torch.Tensor:
    feats = a.features[None].expand(len(prefixes), -1, -1)
    alens = torch.full((len(prefixes),), feats.shape[1])
    # a dummy final target makes the inputs [BOS] + prefix
    logits = model.text_logits(feats, alens, [p + [EOS] for p in prefixes], prompt)
    last = torch.tensor([len(p) for p in prefixes])
    return torch.log_softmax(logits[torch.arange(len(prefixes)), last], dim=-1)


@torch.no_grad()
def translate_text(a: AdaptedFeatures, model: S2TTModel, mode: str = "greedy", max_len: int = 64,
                   beam_size: int = 4, prompt_ids=()) -> TextSequence:
    """Autoregressive decoding until EOS or ``max_len`` generated tokens.

    Greedy takes the arg-max (lowest id on ties). Beam search ranks finished
    hypotheses by log-probability divided by length. ``truncated`` is set
    when no EOS was produced.
    """
    if max_len <= 0:
        raise ValueError("max_len must be positive")
    prompt = list(prompt_ids)
    if mode == "greedy":
        return _greedy(a, model, max_len, prompt)
    if mode != "beam":
        raise ConfigError(f"unknown decode mode {mode!r}")
    if beam_size < 1:
        raise ValueError("beam size must be >= 1")
    return _beam(a, model, max_len, beam_size, prompt)


def _greedy(a, model, max_len, prompt) -> TextSequence:
    seq: list[int] = []
    for _ in range(max_len):
        tok = int(torch.argmax(_next_logprobs(model, a, [seq], prompt)[0]))
        seq.append(tok)
        if tok == EOS:
            return TextSequence(seq, prompt)
    return TextSequence(seq, prompt, truncated=True)


def _beam(a, model, max_len, k, prompt) -> TextSequence:
    beams: list[tuple[list[int], float]] = [([], 0.0)]
    finished: list[tuple[list[int], float]] = []
    for _ in range(max_len):
        logp = _next_logprobs(model, a, [seq for seq, _ in beams], prompt)
        cands = []
        for bi, (seq, score) in enumerate(beams):
            top = torch.argsort(-logp[bi], stable=True)[:k]
            cands.extend((score + float(logp[bi, tok]), seq + [int(tok)]) for tok in top)
        cands.sort(key=lambda c: -c[0])  # stable: earlier beam, then lower id, wins ties
        beams = []
        for score, seq in cands:
            if seq[-1] == EOS:
                finished.append((seq, score))
            else:
                beams.append((seq, score))
            if len(beams) == k:
                break
        if len(finished) >= k or not beams:
            break
    if finished:
        best = max(finished, key=lambda f: f[1] / len(f[0]))
        return TextSequence(best[0], prompt)
    best = max(beams, key=lambda b: b[1] / len(b[0]))
    return TextSequence(best[0], prompt, truncated=True)
