"""End-to-end two-pass translation: source speech -> target text -> target speech."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import torch

from .audio import Waveform, log_mel, resample
from .checkpoint import Checkpoint
from .config import Config
from .errors import ConfigError
from .s2tt import S2TTModel, adapt, encode_speech, s2tt_logits, translate_text
from .speech_tokens import Codebook, SpeechTokenSequence
from .synth import Segment, SynthesisSettings, VelocityNet, speaker_embed, stream_synthesize
from .text import CharTokenizer, TextSequence
from .training import codebook_from, load_model, tokenizer_from
from .tts_lm import TokenStream, TtsTokenLM

LOW_CONFIDENCE = 0.5


@dataclass
class Pipeline:
    s2tt: S2TTModel
    tts: TtsTokenLM
    cfm: VelocityNet
    tokenizer: CharTokenizer
    codebook: Codebook
    cfg: Config

    @classmethod
    def from_checkpoints(cls, s2tt: Checkpoint, tts: Checkpoint, cfm: Checkpoint) -> "Pipeline":
        for ck, stage in ((s2tt, "s2tt"), (tts, "tts"), (cfm, "cfm")):
            if ck.stage != stage:
                raise ConfigError(f"expected a {stage} checkpoint, got {ck.stage}")
        if not (s2tt.extras["vocab"] == tts.extras["vocab"] == cfm.extras["vocab"]):
            raise ConfigError("stage checkpoints were trained with different text vocabularies")
        if not np.array_equal(tts.tensors["codebook.centroids"], cfm.tensors["codebook.centroids"]):
            raise ConfigError("tts and cfm checkpoints use different codebooks")
        if not (s2tt.config["audio"] == tts.config["audio"] == cfm.config["audio"]):
            raise ConfigError("stage checkpoints disagree on the audio config")
        s2tt_model, s2tt_cfg = load_model(s2tt)
        tts_model, tts_cfg = load_model(tts)
        cfm_model, cfm_cfg = load_model(cfm)
        # each stage keeps its own section; the pipeline view merges them
        cfg = Config.from_dict(s2tt.config)
        cfg.tts = tts_cfg.tts
        cfg.cfm = cfm_cfg.cfm
        cfg.tokenizer = cfm_cfg.tokenizer
        return cls(s2tt_model, tts_model, cfm_model, tokenizer_from(s2tt), codebook_from(tts), cfg)

    @classmethod
    def load(cls, ckpt_dir) -> "Pipeline":
        d = Path(ckpt_dir)
        return cls.from_checkpoints(*(Checkpoint.load(d / f"{s}.ckpt") for s in ("s2tt", "tts", "cfm")))

    def synthesis_settings(self, K: int | None = None, seed: int = 0) -> SynthesisSettings:
        c = self.cfg.cfm
        return SynthesisSettings(K or c.chunk_size, c.ode_steps, c.context_frames,
                                 self.cfg.audio.griffin_lim_iterations, seed)


@dataclass
class TranslationResult:
    text: str
    text_sequence: TextSequence
    speech_tokens: SpeechTokenSequence
    segments: list[Segment]
    confidence: float
    low_confidence: bool
    seeds: dict = field(default_factory=dict)

    @property
    def waveform(self) -> Waveform:
        if not self.segments:
            return Waveform(np.zeros(0), 22050)
        return Waveform(np.concatenate([s.waveform.samples for s in self.segments]),
                        self.segments[0].waveform.sample_rate)


@torch.no_grad()
def speech_to_text(source: Waveform, p: Pipeline) -> tuple[TextSequence, float]:
    """First pass; returns the decoded sequence and mean probability of its tokens."""
    src_cfg = p.cfg.audio.source_mel()
    mel = log_mel(resample(source, src_cfg.sample_rate), src_cfg)
    adapted = adapt(encode_speech(mel, p.s2tt), p.s2tt.adapter)
    c = p.cfg.s2tt
    prompt = p.tokenizer.encode(c.prompt, add_eos=False).token_ids if c.prompt else []
    text = translate_text(adapted, p.s2tt, c.decode, c.max_len, c.beam_size, prompt)
    probs = torch.softmax(s2tt_logits(adapted, text, p.s2tt)[0].double(), dim=-1)
    chosen = probs[torch.arange(len(text.token_ids)), torch.as_tensor(text.token_ids)]
    return text, float(chosen.mean())


def translate_end_to_end(source: Waveform, p: Pipeline, K: int | None = None, spk_ref: Waveform | None = None,
                         seed: int = 0, on_segment: Callable[[Segment, int], None] | None = None) -> TranslationResult:
    """Speech in, (text, speech) out; speech tokens are synthesised chunk by chunk as they arrive.

    ``spk_ref`` defaults to the source utterance. ``on_segment(segment,
    tokens_generated_so_far)`` is called as each chunk's audio is ready.
    """
    text, confidence = speech_to_text(source, p)
    spk = speaker_embed(spk_ref if spk_ref is not None else source, p.cfg.cfm.speaker_dim,
                        p.cfg.audio.target_mel())
    stream = TokenStream(text, p.tts, p.cfg.tts.max_tokens, p.cfg.tts.temperature, seed)
    settings = p.synthesis_settings(K, seed)
    segments = []
    for seg in stream_synthesize(stream, spk, p.cfm, settings, p.cfg.audio.target_mel()):
        segments.append(seg)
        if on_segment is not None:
            on_segment(seg, len(stream.tokens))
    decoded = p.tokenizer.decode(text)
    low = not decoded or text.truncated or confidence < LOW_CONFIDENCE
    tokens = SpeechTokenSequence(list(stream.tokens), p.codebook.rate, stream.truncated)
    return TranslationResult(decoded, text, tokens, segments, confidence, low,
                             {"tts": seed, "cfm": seed, "chunk_size": settings.chunk_size})
