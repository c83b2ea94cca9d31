"""Training loops for the three trainable stages (s2tt, tts, cfm).

Batches and flow-matching noise are drawn from generators keyed on
``(seed, step)``, so a run resumed from a checkpoint replays exactly the
same sequence of losses as an uninterrupted one.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np
import torch
from torch import nn

from .checkpoint import Checkpoint
from .config import Config
from .corpus import Dataset
from .errors import ConfigError, DataError, NumericError
from .s2tt import S2TTModel
from .speech_tokens import Codebook
from .synth import ChunkExample, VelocityNet, cfm_train_step, chunk, chunk_seed, speaker_embed
from .text import CharTokenizer
from .tts_lm import TtsTokenLM

log = logging.getLogger(__name__)

STAGES = ("s2tt", "tts", "cfm")


def build_model(stage: str, cfg: Config, speech_vocab: int | None = None) -> nn.Module:
    if stage == "s2tt":
        return S2TTModel(cfg.s2tt, cfg.audio.n_mels)
    if speech_vocab is None:
        raise ConfigError(f"stage {stage} needs the speech vocabulary size")
    if stage == "tts":
        return TtsTokenLM(cfg.tts, speech_vocab, cfg.s2tt.text_vocab_size)
    if stage == "cfm":
        return VelocityNet(cfg.cfm, cfg.audio.n_mels, speech_vocab, cfg.frames_per_token)
    raise ConfigError(f"unknown stage {stage!r}")


def align_frames(frames: np.ndarray, n: int) -> np.ndarray:
    """Trim, or pad by repeating the last frame, to exactly ``n`` frames."""
    if len(frames) >= n:
        return frames[:n]
    return np.concatenate([frames, np.repeat(frames[-1:], n - len(frames), axis=0)])


def chunk_examples(dataset: Dataset, cfg: Config) -> list[ChunkExample]:
    fpt = cfg.frames_per_token
    out = []
    for item in dataset.items:
        tokens = dataset.speech_tokens(item).token_ids
        mel = align_frames(item.target_mel.frames, len(tokens) * fpt)
        spk = speaker_embed(item.source, cfg.cfm.speaker_dim, cfg.audio.target_mel()).vector
        for a, b in chunk(tokens, cfg.cfm.chunk_size).boundaries:
            ctx_start = max(0, a * fpt - cfg.cfm.context_frames) if cfg.cfm.context_frames > 0 else a * fpt
            out.append(ChunkExample(tokens[a:b], mel[a * fpt : b * fpt], mel[ctx_start : a * fpt], spk))
    return out


@dataclass
class StageData:
    examples: list
    loss: Callable[[nn.Module, list, int], torch.Tensor]


def stage_data(stage: str, cfg: Config, dataset: Dataset) -> StageData:
    tok = dataset.tokenizer
    if stage == "s2tt":
        prompt = tok.encode(cfg.s2tt.prompt, add_eos=False).token_ids if cfg.s2tt.prompt else []
        examples = [(torch.as_tensor(it.source_mel.frames, dtype=torch.float32),
                     tok.encode(it.target_text).token_ids) for it in dataset.items]

        def loss(model, batch, seed):
            lens = torch.tensor([m.shape[0] for m, _ in batch])
            mels = torch.zeros(len(batch), int(lens.max()), batch[0][0].shape[1])
            for i, (m, _) in enumerate(batch):
                mels[i, : m.shape[0]] = m
            return model.batch_loss(mels, lens, [t for _, t in batch], prompt)

        return StageData(examples, loss)

    if dataset.codebook is None:
        raise DataError(f"stage {stage} needs a fitted codebook")
    if stage == "tts":
        eos = dataset.codebook.size
        examples = [(tok.encode(it.target_text).token_ids, dataset.speech_tokens(it).token_ids + [eos])
                    for it in dataset.items]
        return StageData(examples, lambda model, batch, seed: model.batch_loss(
            [t for t, _ in batch], [s for _, s in batch]))
    if stage == "cfm":
        return StageData(chunk_examples(dataset, cfg), lambda model, batch, seed: cfm_train_step(batch, model, seed))
    raise ConfigError(f"unknown stage {stage!r}")


def batch_indices(n: int, batch_size: int, seed: int, step: int) -> list[int]:
    if batch_size >= n:
        return list(range(n))
    rng = np.random.default_rng([seed, step])
    return sorted(rng.choice(n, size=batch_size, replace=False).tolist())


# -- checkpoint conversion --------------------------------------------------


def _trainable(model: nn.Module, frozen: list[str]) -> list[tuple[str, nn.Parameter]]:
    params = []
    for name, p in model.named_parameters():
        if any(name == f or name.startswith(f + ".") for f in frozen):
            p.requires_grad_(False)
        else:
            params.append((name, p))
    return params


def make_checkpoint(stage, cfg: Config, model, optimizer, names, step, dataset_extras) -> Checkpoint:
    tensors = {f"model.{k}": v.detach().cpu().numpy().copy() for k, v in model.state_dict().items()}
    opt_steps = {}
    if optimizer is not None:
        state = optimizer.state_dict()["state"]
        for i, name in enumerate(names):
            if i in state:
                tensors[f"optim.{name}.exp_avg"] = state[i]["exp_avg"].numpy().copy()
                tensors[f"optim.{name}.exp_avg_sq"] = state[i]["exp_avg_sq"].numpy().copy()
                opt_steps[name] = float(state[i]["step"])
    extras = dict(dataset_extras)
    extras["optim_steps"] = opt_steps
    codebook = extras.pop("_codebook", None)
    if codebook is not None:
        tensors["codebook.centroids"] = codebook.centroids
        extras["codebook"] = codebook.meta()
    return Checkpoint(stage, step, cfg.train(stage).seed, cfg.to_dict(), tensors, extras)


def _dataset_extras(stage: str, dataset: Dataset) -> dict:
    extras = {"vocab": dataset.tokenizer.to_json()}
    if stage != "s2tt":
        extras["_codebook"] = dataset.codebook
    return extras


def codebook_from(ckpt: Checkpoint) -> Codebook | None:
    if "codebook.centroids" not in ckpt.tensors:
        return None
    return Codebook.from_meta(ckpt.tensors["codebook.centroids"], ckpt.extras["codebook"])


def load_model(ckpt: Checkpoint) -> tuple[nn.Module, Config]:
    cfg = Config.from_dict(ckpt.config)
    codebook = codebook_from(ckpt)
    model = build_model(ckpt.stage, cfg, codebook.size if codebook else None)
    state = {k: torch.as_tensor(v) for k, v in ckpt.with_prefix("model.").items()}
    model.load_state_dict(state)
    model.eval()
    return model, cfg


def tokenizer_from(ckpt: Checkpoint) -> CharTokenizer:
    return CharTokenizer.from_json(ckpt.extras["vocab"])


def _restore_optimizer(optimizer, names, ckpt: Checkpoint) -> None:
    sd = optimizer.state_dict()
    for i, name in enumerate(names):
        key = f"optim.{name}.exp_avg"
        if key in ckpt.tensors:
            sd["state"][i] = {
                "step": torch.tensor(ckpt.extras["optim_steps"][name]),
                "exp_avg": torch.as_tensor(ckpt.tensors[key]).clone(),
                "exp_avg_sq": torch.as_tensor(ckpt.tensors[f"optim.{name}.exp_avg_sq"]).clone(),
            }
    optimizer.load_state_dict(sd)


# -- the loop ---------------------------------------------------------------


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    losses: list[tuple[int, float]]
    model: nn.Module


def train(stage: str, cfg: Config, dataset: Dataset, out_dir=None, resume: Checkpoint | str | Path | None = None,
          max_steps: int | None = None) -> TrainResult:
    """AdamW on the stage loss; returns the final checkpoint and the loss trajectory.

    With ``out_dir`` set, a checkpoint is written every ``checkpoint_every``
    steps plus at the end, the loss curve goes to ``<stage>_loss.csv`` and
    the resolved config to ``<stage>_config.ini``. A non-finite loss raises
    :class:`NumericError` and leaves the last written checkpoint untouched.
    """
    if stage not in STAGES:
        raise ConfigError(f"unknown stage {stage!r}")
    tc = cfg.train(stage)
    total_steps = tc.max_steps if max_steps is None else max_steps
    torch.use_deterministic_algorithms(True)
    data = stage_data(stage, cfg, dataset)
    if not data.examples:
        raise DataError(f"no training examples for stage {stage}")

    torch.manual_seed(tc.seed)
    speech_vocab = dataset.codebook.size if dataset.codebook is not None else None
    model = build_model(stage, cfg, speech_vocab)
    start = 0
    if resume is not None:
        ckpt = resume if isinstance(resume, Checkpoint) else Checkpoint.load(resume)
        if ckpt.stage != stage:
            raise ConfigError(f"cannot resume {stage} from a {ckpt.stage} checkpoint")
        model.load_state_dict({k: torch.as_tensor(v) for k, v in ckpt.with_prefix("model.").items()})
        start = ckpt.step
    elif stage == "cfm":
        model.set_normalization(np.concatenate([ex.mel for ex in data.examples]))
    model.train()

    named = _trainable(model, tc.frozen)
    names = [n for n, _ in named]
    optimizer = torch.optim.AdamW([p for _, p in named], lr=tc.learning_rate, betas=(tc.beta1, tc.beta2),
                                  eps=tc.eps, weight_decay=tc.weight_decay)
    if resume is not None:
        _restore_optimizer(optimizer, names, ckpt)
    extras = _dataset_extras(stage, dataset)

    out = Path(out_dir) if out_dir is not None else None
    writer = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        cfg.save(out / f"{stage}_config.ini")
        csv_path = out / f"{stage}_loss.csv"
        fresh = resume is None or not csv_path.exists()
        fh = open(csv_path, "w" if fresh else "a", newline="")
        writer = csv.writer(fh)
        if fresh:
            writer.writerow(["step", "loss"])

    losses: list[tuple[int, float]] = []
    ckpt_path = out / f"{stage}.ckpt" if out is not None else None
    try:
        for step in range(start, total_steps):
            batch = [data.examples[i] for i in batch_indices(len(data.examples), tc.batch_size, tc.seed, step)]
            loss = data.loss(model, batch, chunk_seed(tc.seed, step))
            value = float(loss.detach())
            if not math.isfinite(value):
                raise NumericError(f"{stage}: non-finite loss at step {step + 1}; "
                                   f"last good checkpoint: {ckpt_path if ckpt_path and ckpt_path.exists() else 'none'}")
            optimizer.zero_grad(set_to_none=True)
            loss.backward()
            if tc.grad_clip > 0:
                torch.nn.utils.clip_grad_norm_([p for _, p in named], tc.grad_clip)
            optimizer.step()
            losses.append((step + 1, value))
            if writer is not None and (step + 1) % tc.log_every == 0:
                writer.writerow([step + 1, repr(value)])
            if (step + 1) % max(1, tc.log_every * 100) == 0:
                log.info("%s step %d loss %.5f", stage, step + 1, value)
            if ckpt_path is not None and (step + 1) % tc.checkpoint_every == 0:
                make_checkpoint(stage, cfg, model, optimizer, names, step + 1, extras).save(ckpt_path)
    finally:
        if writer is not None:
            fh.close()

    model.eval()
    final = make_checkpoint(stage, cfg, model, optimizer, names, max(start, total_steps), extras)
    if ckpt_path is not None:
        final.save(ckpt_path)
        from .plotting import loss_curve_figure

        loss_curve_figure(out / f"{stage}_loss.csv", out / f"{stage}_loss.png", title=f"{stage} training loss")
    return TrainResult(final, losses, model)
