"""Run configuration: INI file sections, environment overrides and profiles.

Every section maps onto a dataclass. Values are resolved in this order:
dataclass defaults, profile overrides, config file, environment variables
named ``TWOPASS__<SECTION>__<KEY>`` (section dots become underscores, e.g.
``TWOPASS__TRAIN_S2TT__MAX_STEPS=500``).
"""

from __future__ import annotations

import configparser
import dataclasses
import io
import os
from dataclasses import dataclass, field
from pathlib import Path

from .audio import FLOOR_EPSILON, MelConfig
from .errors import ConfigError

ENV_PREFIX = "TWOPASS__"


@dataclass
class AudioConfig:
    n_mels: int = 80
    floor_epsilon: float = FLOOR_EPSILON
    padding: str = "same"
    source_sample_rate: int = 16000
    source_n_fft: int = 400
    source_win_length: int = 400
    source_hop_length: int = 160
    target_sample_rate: int = 22050
    target_n_fft: int = 1024
    target_win_length: int = 1024
    target_hop_length: int = 441
    griffin_lim_iterations: int = 32

    def source_mel(self) -> MelConfig:
        return MelConfig(self.source_sample_rate, self.source_n_fft, self.source_win_length,
                         self.source_hop_length, self.n_mels, padding=self.padding,
                         floor_epsilon=self.floor_epsilon)

    def target_mel(self) -> MelConfig:
        return MelConfig(self.target_sample_rate, self.target_n_fft, self.target_win_length,
                         self.target_hop_length, self.n_mels, padding=self.padding,
                         floor_epsilon=self.floor_epsilon)


@dataclass
class S2TTConfig:
    encoder_layers: int = 2
    encoder_width: int = 256
    encoder_heads: int = 4
    subsample_stride: int = 2
    stack_factor: int = 4
    stack_padding: str = "pad"
    adapter_hidden: int = 0  # 0 -> lm_width
    negative_slope: float = 0.1
    lm_layers: int = 4
    lm_width: int = 256
    lm_heads: int = 4
    text_vocab_size: int = 256
    prompt: str = ""
    max_len: int = 64
    decode: str = "greedy"
    beam_size: int = 4


@dataclass
class TokenizerConfig:
    speech_vocab: int = 64
    token_rate: int = 25
    kmeans_iters: int = 100


@dataclass
class TTSConfig:
    layers: int = 4
    width: int = 256
    heads: int = 4
    max_tokens: int = 250
    temperature: float = 0.0


@dataclass
class CFMConfig:
    chunk_size: int = 25
    width: int = 256
    layers: int = 2
    heads: int = 4
    ode_steps: int = 10
    context_frames: int = 50
    speaker_dim: int = 64


@dataclass
class TrainConfig:
    stage: str = "s2tt"
    learning_rate: float = 1e-5
    batch_size: int = 32
    max_steps: int = 100_000
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    grad_clip: float = 1.0
    seed: int = 0
    checkpoint_every: int = 1000
    log_every: int = 1
    freeze: str = ""

    @property
    def frozen(self) -> list[str]:
        return [s.strip() for s in self.freeze.split(",") if s.strip()]


@dataclass
class RunConfig:
    profile: str = "desk"
    seed: int = 0


FULL_TRAIN = {
    "s2tt": dict(learning_rate=1e-5, batch_size=32, max_steps=100_000),
    "tts": dict(learning_rate=1e-5, batch_size=128, max_steps=100_000),
    "cfm": dict(learning_rate=1e-5, batch_size=128, max_steps=100_000),
}

DESK_TRAIN = {
    "s2tt": dict(learning_rate=1e-3, batch_size=8, max_steps=3000, checkpoint_every=500),
    "tts": dict(learning_rate=1e-3, batch_size=8, max_steps=3000, checkpoint_every=500),
    "cfm": dict(learning_rate=1e-3, batch_size=8, max_steps=3000, checkpoint_every=500),
}


def _train_defaults(stage: str, profile: str) -> TrainConfig:
    table = FULL_TRAIN if profile == "full" else DESK_TRAIN
    return TrainConfig(stage=stage, **table[stage])


@dataclass
class Config:
    run: RunConfig = field(default_factory=RunConfig)
    audio: AudioConfig = field(default_factory=AudioConfig)
    s2tt: S2TTConfig = field(default_factory=S2TTConfig)
    tokenizer: TokenizerConfig = field(default_factory=TokenizerConfig)
    tts: TTSConfig = field(default_factory=TTSConfig)
    cfm: CFMConfig = field(default_factory=CFMConfig)
    train_s2tt: TrainConfig = field(default_factory=lambda: _train_defaults("s2tt", "desk"))
    train_tts: TrainConfig = field(default_factory=lambda: _train_defaults("tts", "desk"))
    train_cfm: TrainConfig = field(default_factory=lambda: _train_defaults("cfm", "desk"))

    def train(self, stage: str) -> TrainConfig:
        try:
            return getattr(self, f"train_{stage}")
        except AttributeError:
            raise ConfigError(f"unknown stage {stage!r}") from None

    @property
    def frames_per_token(self) -> int:
        return frames_per_token(self.audio.target_mel(), self.tokenizer.token_rate)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "Config":
        cfg = cls()
        for section, values in data.items():
            _apply(cfg, section, values)
        return cfg

    def to_ini(self) -> str:
        parser = configparser.ConfigParser(interpolation=None)
        for f in dataclasses.fields(self):
            name = f.name.replace("train_", "train.")
            parser[name] = {k: _fmt(v) for k, v in dataclasses.asdict(getattr(self, f.name)).items()}
        buf = io.StringIO()
        parser.write(buf)
        return buf.getvalue()

    def save(self, path) -> None:
        Path(path).write_text(self.to_ini(), encoding="utf-8")


def frames_per_token(mel: MelConfig, token_rate: int) -> int:
    fpt, rem = divmod(mel.sample_rate, mel.hop_length * token_rate)
    if rem or fpt < 1:
        raise ConfigError(
            f"target hop {mel.hop_length} at {mel.sample_rate} Hz does not divide into {token_rate} tokens/s"
        )
    return fpt


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _coerce(tp, raw, key):
    if not isinstance(raw, str):
        return raw
    tp = str(tp)
    try:
        if tp == "bool":
            return raw.strip().lower() in ("1", "true", "yes", "on")
        if tp == "int":
            return int(raw)
        if tp == "float":
            return float(raw)
        if tp.startswith("float"):  # float | None
            return None if raw.strip().lower() in ("", "none") else float(raw)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {tp}") from None
    return raw


def _apply(cfg: Config, section: str, values: dict) -> None:
    attr = section.replace(".", "_").lower()
    if not hasattr(cfg, attr):
        raise ConfigError(f"unknown config section [{section}]")
    target = getattr(cfg, attr)
    types = {f.name: f.type for f in dataclasses.fields(target)}
    for key, raw in values.items():
        key = key.lower()
        if key not in types:
            raise ConfigError(f"unknown key {key!r} in [{section}]")
        setattr(target, key, _coerce(types[key], raw, f"{section}.{key}"))


def load_config(path=None, overrides: dict | None = None, env=None) -> Config:
    """Resolve a :class:`Config` from defaults, an optional INI file and the environment."""
    env = os.environ if env is None else env
    parser = configparser.ConfigParser(interpolation=None)
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file {p} not found")
        try:
            parser.read_string(p.read_text(encoding="utf-8"), source=str(p))
        except configparser.Error as exc:
            raise ConfigError(str(exc)) from exc

    profile = parser.get("run", "profile", fallback="desk")
    profile = env.get(f"{ENV_PREFIX}RUN__PROFILE", profile)
    if profile not in ("desk", "full"):
        raise ConfigError(f"profile must be desk or full, got {profile!r}")
    cfg = Config()
    for stage in ("s2tt", "tts", "cfm"):
        setattr(cfg, f"train_{stage}", _train_defaults(stage, profile))

    for section in parser.sections():
        _apply(cfg, section, dict(parser[section]))
    for name, raw in sorted(env.items()):
        if not name.startswith(ENV_PREFIX):
            continue
        parts = name[len(ENV_PREFIX):].split("__")
        if len(parts) != 2:
            raise ConfigError(f"malformed override {name}; expected {ENV_PREFIX}<SECTION>__<KEY>")
        _apply(cfg, parts[0].lower(), {parts[1].lower(): raw})
    for dotted, value in (overrides or {}).items():
        section, _, key = dotted.rpartition(".")
        _apply(cfg, section, {key: value})
    for stage in ("s2tt", "tts", "cfm"):
        cfg.train(stage).stage = stage
    return cfg
