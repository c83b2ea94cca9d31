"""Text-to-speech-token language model.

Speech ids ``0 .. V_speech-1`` are codebook entries; ``V_speech`` is the
speech EOS and ``V_speech + 1`` the speech BOS. The output head covers the
codebook plus EOS (BOS is never predicted).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterator

import torch
from torch import nn

from .config import TTSConfig
from .errors import VocabError
from .layers import PrefixLM, init_weights, pad_ids, sequence_nll
from .speech_tokens import TOKEN_RATE, SpeechTokenSequence
from .text import TextSequence, check_ids


@dataclass
class TtsExample:
    text: TextSequence
    speech_tokens: SpeechTokenSequence


class TtsTokenLM(nn.Module):
    def __init__(self, cfg: TTSConfig, speech_vocab: int, text_vocab: int):
        super().__init__()
        self.cfg = cfg
        self.speech_vocab = speech_vocab
        self.text_vocab = text_vocab
        self.eos = speech_vocab
        self.bos = speech_vocab + 1
        self.text_embed = nn.Embedding(text_vocab, cfg.width)
        self.lm = PrefixLM(speech_vocab + 2, speech_vocab + 1, cfg.width, cfg.heads, cfg.layers)
        init_weights(self.text_embed)

    @property
    def output_size(self) -> int:
        return self.speech_vocab + 1

    def logits(self, texts: list[list[int]], targets: list[list[int]]) -> torch.Tensor:
        """Teacher-forced logits; row ``i`` of item ``b`` predicts ``targets[b][i]``."""
        for t in texts:
            check_ids(t, self.text_vocab, "text")
            if not t:
                raise VocabError("empty text conditioning")
        for s in targets:
            check_ids(s, self.output_size, "speech")
        text_ids, text_lens = pad_ids(texts)
        prefix = self.text_embed(text_ids)
        inputs, lens = pad_ids([[self.bos] + list(s[:-1]) for s in targets])
        return self.lm(prefix, text_lens, inputs, lens)

    def batch_loss(self, texts, targets) -> torch.Tensor:
        tgt, lens = pad_ids(targets)
        return sequence_nll(self.logits(texts, targets), tgt, lens).mean()


def tts_loss(ex: TtsExample, model: TtsTokenLM) -> torch.Tensor:
    """Summed cross-entropy over ``ex.speech_tokens`` (which carries its EOS during training)."""
    if not ex.speech_tokens.token_ids:
        raise VocabError("empty speech token sequence")
    return model.batch_loss([ex.text.token_ids], [ex.speech_tokens.token_ids])


def with_eos(tokens: SpeechTokenSequence, model: TtsTokenLM) -> SpeechTokenSequence:
    return SpeechTokenSequence(tokens.token_ids + [model.eos], tokens.rate)


class TokenStream:
    """Incremental speech-token generator (single consumer).

    Iterating yields token ids one at a time as they are produced; after
    exhaustion ``truncated`` says whether ``max_tokens`` cut generation off.
    """

    def __init__(self, text: TextSequence, model: TtsTokenLM, max_tokens: int,
                 temperature: float = 0.0, seed: int = 0):
        if max_tokens <= 0:
            raise ValueError("max_tokens must be positive")
        check_ids(text.token_ids, model.text_vocab, "text")
        self.text = list(text.token_ids)
        self.model = model
        self.max_tokens = max_tokens
        self.temperature = temperature
        self.generator = torch.Generator().manual_seed(int(seed))
        self.tokens: list[int] = []
        self.truncated = False
        self.done = False
        self.confidences: list[float] = []

    def __iter__(self) -> Iterator[int]:
        return self

    @torch.no_grad()
    def __next__(self) -> int:
        if self.done:
            raise StopIteration
        if len(self.tokens) >= self.max_tokens:
            self.truncated = True
            self.done = True
            raise StopIteration
        logits = self.model.logits([self.text], [self.tokens + [self.model.eos]])[0, len(self.tokens)]
        probs = torch.softmax(logits.double(), dim=-1)
        if self.temperature > 0:
            p = torch.softmax(logits.double() / self.temperature, dim=-1)
            tok = int(torch.multinomial(p, 1, generator=self.generator))
        else:
            tok = int(torch.argmax(logits))
        self.confidences.append(float(probs[tok]))
        if tok == self.model.eos:
            self.done = True
            raise StopIteration
        self.tokens.append(tok)
        return tok

    def result(self) -> SpeechTokenSequence:
        for _ in self:
            pass
        return SpeechTokenSequence(list(self.tokens), TOKEN_RATE, self.truncated)


def generate_tokens(text: TextSequence, model: TtsTokenLM, max_tokens: int = 250,
                    temperature: float = 0.0, seed: int = 0,
                    on_token: Callable[[int, int], None] | None = None) -> SpeechTokenSequence:
    """Generate speech tokens until EOS; ``on_token(index, id)`` fires per token."""
    stream = TokenStream(text, model, max_tokens, temperature, seed)
    for i, tok in enumerate(stream):
        if on_token is not None:
            on_token(i, tok)
    return SpeechTokenSequence(list(stream.tokens), TOKEN_RATE, stream.truncated)
