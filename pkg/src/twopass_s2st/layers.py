"""Transformer building blocks shared by the encoder, both LMs and the flow network."""

from __future__ import annotations

import math

import torch
from torch import nn
import torch.nn.functional as F

INIT_STD = 0.02


def init_weights(module: nn.Module) -> None:
    for m in module.modules():
        if isinstance(m, (nn.Linear, nn.Conv1d)):
            nn.init.normal_(m.weight, std=INIT_STD)
            if m.bias is not None:
                nn.init.zeros_(m.bias)
        elif isinstance(m, nn.Embedding):
            nn.init.normal_(m.weight, std=INIT_STD)


def sinusoidal(length: int, dim: int, dtype=torch.float32, device=None) -> torch.Tensor:
    pos = torch.arange(length, dtype=torch.float64, device=device)[:, None]
    freq = torch.exp(-math.log(10000.0) * torch.arange(0, dim, 2, dtype=torch.float64, device=device) / dim)
    out = torch.zeros(length, dim, dtype=torch.float64, device=device)
    out[:, 0::2] = torch.sin(pos * freq)
    out[:, 1::2] = torch.cos(pos * freq)[:, : dim // 2]
    return out.to(dtype)


def timestep_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    """Sinusoidal features of a scalar time ``t`` in [0, 1], shape ``(B, dim)``."""
    half = dim // 2
    freq = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=t.dtype, device=t.device) / half)
    ang = 1000.0 * t[:, None] * freq[None, :]
    return torch.cat([torch.sin(ang), torch.cos(ang)], dim=-1)


class SelfAttention(nn.Module):
    def __init__(self, d_model: int, n_heads: int):
        super().__init__()
        if d_model % n_heads:
            raise ValueError(f"d_model={d_model} not divisible by n_heads={n_heads}")
        self.n_heads = n_heads
        self.qkv = nn.Linear(d_model, 3 * d_model)
        self.out = nn.Linear(d_model, d_model)

    def forward(self, x: torch.Tensor, allowed: torch.Tensor | None = None) -> torch.Tensor:
        # allowed: (B, T, T) bool, True where query may attend to key
        b, t, d = x.shape
        h = self.n_heads
        q, k, v = self.qkv(x).view(b, t, 3, h, d // h).permute(2, 0, 3, 1, 4)
        scores = q @ k.transpose(-1, -2) / math.sqrt(d // h)
        if allowed is not None:
            scores = scores.masked_fill(~allowed[:, None], float("-inf"))
        attn = torch.softmax(scores, dim=-1)
        return self.out((attn @ v).transpose(1, 2).reshape(b, t, d))


class Block(nn.Module):
    """Pre-norm transformer block: attention and feed-forward residual branches."""

    def __init__(self, d_model: int, n_heads: int, ff_mult: int = 4):
        super().__init__()
        self.ln1 = nn.LayerNorm(d_model)
        self.attn = SelfAttention(d_model, n_heads)
        self.ln2 = nn.LayerNorm(d_model)
        self.ff = nn.Sequential(nn.Linear(d_model, ff_mult * d_model), nn.GELU(),
                                nn.Linear(ff_mult * d_model, d_model))

    def forward(self, x, allowed=None):
        x = x + self.attn(self.ln1(x), allowed)
        return x + self.ff(self.ln2(x))

    def zero_residual_branches(self) -> None:
        for lin in (self.attn.out, self.ff[2]):
            nn.init.zeros_(lin.weight)
            nn.init.zeros_(lin.bias)


class Stack(nn.Module):
    def __init__(self, d_model: int, n_heads: int, n_layers: int):
        super().__init__()
        self.blocks = nn.ModuleList(Block(d_model, n_heads) for _ in range(n_layers))

    def forward(self, x, allowed=None):
        for block in self.blocks:
            x = block(x, allowed)
        return x


def key_padding_mask(lengths: torch.Tensor, total: int) -> torch.Tensor:
    """``(B, total)`` bool, True for valid positions."""
    return torch.arange(total, device=lengths.device)[None, :] < lengths[:, None]


def prefix_causal_mask(prefix_lens: torch.Tensor, total_lens: torch.Tensor, total: int) -> torch.Tensor:
    """Prefix positions are visible to every query; later positions are causal.

    Padding keys are never visible. Shape ``(B, total, total)``.
    """
    idx = torch.arange(total, device=prefix_lens.device)
    valid_key = idx[None, None, :] < total_lens[:, None, None]
    in_prefix = idx[None, None, :] < prefix_lens[:, None, None]
    causal = idx[None, None, :] <= idx[None, :, None]
    return valid_key & (in_prefix | causal)


class PrefixLM(nn.Module):
    """Decoder-only LM over ``[prefix vectors ; token embeddings]``.

    The prefix (speech features or text embeddings) is fully visible; the
    token part is causally masked. Each batch item is packed left-aligned so
    its outputs do not depend on what else is in the batch.
    """

    def __init__(self, vocab_in: int, vocab_out: int, d_model: int, n_heads: int, n_layers: int):
        super().__init__()
        self.embed = nn.Embedding(vocab_in, d_model)
        self.stack = Stack(d_model, n_heads, n_layers)
        self.ln_f = nn.LayerNorm(d_model)
        self.head = nn.Linear(d_model, vocab_out)
        self.d_model = d_model
        init_weights(self)

    def forward(self, prefix, prefix_lens, tokens, token_lens):
        """Logits ``(B, L, vocab_out)`` for every token position.

        prefix: ``(B, P, d)``; tokens: ``(B, L)`` input ids (already shifted).
        """
        b = tokens.shape[0]
        emb = self.embed(tokens)
        total_lens = prefix_lens + token_lens
        total = int(total_lens.max())
        rows = []
        for i in range(b):
            p, n = int(prefix_lens[i]), int(token_lens[i])
            row = torch.cat([prefix[i, :p], emb[i, :n]], dim=0)
            rows.append(F.pad(row, (0, 0, 0, total - p - n)))
        x = torch.stack(rows) + sinusoidal(total, self.d_model, emb.dtype, emb.device)
        x = self.ln_f(self.stack(x, prefix_causal_mask(prefix_lens, total_lens, total)))
        length = tokens.shape[1]
        out = []
        for i in range(b):
            p, n = int(prefix_lens[i]), int(token_lens[i])
            out.append(F.pad(x[i, p : p + n], (0, 0, 0, length - n)))
        return self.head(torch.stack(out))


def sequence_nll(logits: torch.Tensor, targets: torch.Tensor, lengths: torch.Tensor) -> torch.Tensor:
    """Per-item summed negative log-likelihood, shape ``(B,)``."""
    logp = torch.log_softmax(logits, dim=-1)
    picked = logp.gather(-1, targets.clamp(min=0)[..., None])[..., 0]
    mask = key_padding_mask(lengths, targets.shape[1])
    return -(picked * mask).sum(dim=1)


def pad_ids(seqs, pad: int = 0) -> tuple[torch.Tensor, torch.Tensor]:
    lens = torch.tensor([len(s) for s in seqs], dtype=torch.long)
    out = torch.full((len(seqs), max(1, int(lens.max()))), pad, dtype=torch.long)
    for i, s in enumerate(seqs):
        out[i, : len(s)] = torch.as_tensor(list(s), dtype=torch.long)
    return out, lens
