"""Audio I/O and DSP: resampling, log-Mel features and Griffin-Lim inversion.

Everything here is a pure function of its inputs. Spectrogram frames are
time-major (``frames x n_mels``).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np
from scipy.io import wavfile
from scipy.signal import get_window, resample_poly

from .errors import InvalidAudio, InvalidSpectrogram

SOURCE_RATE = 16000
TARGET_RATE = 22050
FLOOR_EPSILON = 1e-10


@dataclass
class Waveform:
    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64).reshape(-1)
        if int(self.sample_rate) != self.sample_rate or self.sample_rate <= 0:
            raise InvalidAudio(f"sample rate must be a positive integer, got {self.sample_rate}")
        self.sample_rate = int(self.sample_rate)
        if not np.all(np.isfinite(self.samples)):
            raise InvalidAudio("waveform contains non-finite samples")

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate

    def __len__(self):
        return len(self.samples)


@dataclass(frozen=True)
class MelConfig:
    """STFT + mel filterbank settings.

    ``padding="same"`` pads the signal so that the frame count is
    ``ceil(n_samples / hop_length)``; ``"none"`` frames the raw signal and
    needs at least ``n_fft`` samples. Either way the count is
    ``1 + floor((padded_len - n_fft) / hop_length)``.
    """

    sample_rate: int = SOURCE_RATE
    n_fft: int = 400
    win_length: int = 400
    hop_length: int = 160
    n_mels: int = 80
    f_min: float = 0.0
    f_max: float | None = None
    padding: str = "same"
    floor_epsilon: float = FLOOR_EPSILON

    @property
    def hop_seconds(self) -> float:
        return self.hop_length / self.sample_rate

    @property
    def frames_per_second(self) -> float:
        return self.sample_rate / self.hop_length

    def n_frames(self, n_samples: int) -> int:
        if self.padding == "same":
            return -(-n_samples // self.hop_length)
        if n_samples < self.n_fft:
            return 0
        return 1 + (n_samples - self.n_fft) // self.hop_length


# Whisper-style source frontend and a 50 fps target frontend (two frames per
# 25 Hz speech token).
SOURCE_MEL = MelConfig()
TARGET_MEL = MelConfig(sample_rate=TARGET_RATE, n_fft=1024, win_length=1024, hop_length=441)


@dataclass
class MelSpectrogram:
    frames: np.ndarray
    config: MelConfig = field(default=SOURCE_MEL)
    n_samples: int | None = None

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float64)
        if self.frames.ndim != 2:
            raise InvalidSpectrogram(f"expected frames x n_mels, got shape {self.frames.shape}")
        if self.frames.shape[1] != self.config.n_mels:
            raise InvalidSpectrogram(
                f"{self.frames.shape[1]} mel channels but config says {self.config.n_mels}"
            )
        if self.n_samples is None:
            self.n_samples = self.frames.shape[0] * self.config.hop_length

    @property
    def n_mels(self) -> int:
        return self.config.n_mels

    @property
    def hop_seconds(self) -> float:
        return self.config.hop_seconds

    @property
    def sample_rate(self) -> int:
        return self.config.sample_rate

    @property
    def duration(self) -> float:
        return self.n_samples / self.config.sample_rate

    def __len__(self):
        return self.frames.shape[0]


# -- resampling -------------------------------------------------------------


def resample(w: Waveform, target_rate: int) -> Waveform:
    if target_rate <= 0:
        raise InvalidAudio(f"target rate must be positive, got {target_rate}")
    if len(w.samples) == 0:
        raise InvalidAudio("cannot resample an empty waveform")
    if w.sample_rate == target_rate:
        return Waveform(w.samples.copy(), w.sample_rate)
    g = math.gcd(int(target_rate), w.sample_rate)
    up, down = int(target_rate) // g, w.sample_rate // g
    out = resample_poly(w.samples, up, down, window=("kaiser", 5.0))
    return Waveform(np.clip(out, -1.0, 1.0), int(target_rate))


# -- mel filterbank ---------------------------------------------------------


def hz_to_mel(f):
    """Slaney mel scale: linear below 1 kHz, logarithmic above."""
    f = np.asarray(f, dtype=np.float64)
    f_sp = 200.0 / 3
    min_log_hz = 1000.0
    min_log_mel = min_log_hz / f_sp
    logstep = math.log(6.4) / 27.0
    return np.where(
        f >= min_log_hz,
        min_log_mel + np.log(np.maximum(f, min_log_hz) / min_log_hz) / logstep,
        f / f_sp,
    )


def mel_to_hz(m):
    m = np.asarray(m, dtype=np.float64)
    f_sp = 200.0 / 3
    min_log_hz = 1000.0
    min_log_mel = min_log_hz / f_sp
    logstep = math.log(6.4) / 27.0
    return np.where(m >= min_log_mel, min_log_hz * np.exp(logstep * (m - min_log_mel)), f_sp * m)


def mel_band_edges(cfg: MelConfig) -> np.ndarray:
    """``n_mels + 2`` edge frequencies; filter ``i`` is centred on entry ``i + 1``."""
    f_max = cfg.sample_rate / 2 if cfg.f_max is None else cfg.f_max
    mels = np.linspace(hz_to_mel(cfg.f_min), hz_to_mel(f_max), cfg.n_mels + 2)
    return mel_to_hz(mels)


@lru_cache(maxsize=16)
def mel_filterbank(cfg: MelConfig) -> np.ndarray:
    """Unnormalised triangular filters, shape ``(n_mels, n_fft // 2 + 1)``."""
    freqs = np.arange(cfg.n_fft // 2 + 1) * cfg.sample_rate / cfg.n_fft
    edges = mel_band_edges(cfg)
    lower = edges[:-2, None]
    center = edges[1:-1, None]
    upper = edges[2:, None]
    rising = (freqs[None, :] - lower) / (center - lower)
    falling = (upper - freqs[None, :]) / (upper - center)
    fb = np.maximum(0.0, np.minimum(rising, falling))
    fb.setflags(write=False)
    return fb


@lru_cache(maxsize=16)
def _filterbank_pinv(cfg: MelConfig) -> np.ndarray:
    inv = np.linalg.pinv(mel_filterbank(cfg))
    inv.setflags(write=False)
    return inv


# -- STFT -------------------------------------------------------------------


@lru_cache(maxsize=16)
def _analysis_window(n_fft: int, win_length: int) -> np.ndarray:
    w = get_window("hann", win_length, fftbins=True)
    left = (n_fft - win_length) // 2
    out = np.zeros(n_fft)
    out[left : left + win_length] = w
    out.setflags(write=False)
    return out


def _pad_amounts(cfg: MelConfig, n_samples: int) -> tuple[int, int]:
    if cfg.padding == "none":
        return 0, 0
    n_frames = cfg.n_frames(n_samples)
    left = (cfg.n_fft - cfg.hop_length) // 2
    total = (n_frames - 1) * cfg.hop_length + cfg.n_fft
    return left, total - left - n_samples


def _frame(x: np.ndarray, n_fft: int, hop: int) -> np.ndarray:
    n_frames = 1 + (len(x) - n_fft) // hop
    idx = np.arange(n_fft)[None, :] + hop * np.arange(n_frames)[:, None]
    return x[idx]


def _stft_padded(x: np.ndarray, cfg: MelConfig) -> np.ndarray:
    window = _analysis_window(cfg.n_fft, cfg.win_length)
    return np.fft.rfft(_frame(x, cfg.n_fft, cfg.hop_length) * window, axis=1)


def _istft_padded(spec: np.ndarray, cfg: MelConfig) -> np.ndarray:
    """Least-squares inverse of ``_stft_padded`` (weighted overlap-add)."""
    window = _analysis_window(cfg.n_fft, cfg.win_length)
    frames = np.fft.irfft(spec, n=cfg.n_fft, axis=1) * window
    length = (spec.shape[0] - 1) * cfg.hop_length + cfg.n_fft
    out = np.zeros(length)
    norm = np.zeros(length)
    sq = window**2
    for i, frame in enumerate(frames):
        s = i * cfg.hop_length
        out[s : s + cfg.n_fft] += frame
        norm[s : s + cfg.n_fft] += sq
    nz = norm > 1e-12
    out[nz] /= norm[nz]
    out[~nz] = 0.0
    return out


def power_spectrogram(w: Waveform, cfg: MelConfig) -> np.ndarray:
    if len(w.samples) == 0:
        raise InvalidAudio("empty waveform")
    if len(w.samples) < cfg.win_length:
        raise InvalidAudio(f"waveform has {len(w.samples)} samples, shorter than one {cfg.win_length}-sample window")
    left, right = _pad_amounts(cfg, len(w.samples))
    x = np.pad(w.samples, (left, right))
    return np.abs(_stft_padded(x, cfg)) ** 2


def log_mel(w: Waveform, cfg: MelConfig = SOURCE_MEL) -> MelSpectrogram:
    if w.sample_rate != cfg.sample_rate:
        raise InvalidAudio(f"waveform is {w.sample_rate} Hz but mel config expects {cfg.sample_rate} Hz")
    power = power_spectrogram(w, cfg)
    mel = power @ mel_filterbank(cfg).T
    return MelSpectrogram(np.log(mel + cfg.floor_epsilon), cfg, n_samples=len(w.samples))


# -- Griffin-Lim ------------------------------------------------------------


def _spectral_distance(target_mag: np.ndarray, spec: np.ndarray) -> float:
    # weight interior rfft bins twice so the measure matches the full spectrum
    weights = np.full(target_mag.shape[1], 2.0)
    weights[0] = 1.0
    if target_mag.shape[1] % 2 == 1:
        weights[-1] = 1.0
    diff = (target_mag - np.abs(spec)) ** 2 @ weights
    ref = target_mag**2 @ weights
    denom = math.sqrt(ref.sum())
    return math.sqrt(diff.sum()) / denom if denom > 0 else 0.0


@dataclass
class GriffinLimResult:
    waveform: Waveform
    convergence: list[float]


def griffin_lim_with_history(m: MelSpectrogram, iterations: int = 32) -> GriffinLimResult:
    """Griffin-Lim from a log-Mel spectrogram, recording spectral convergence.

    The linear magnitude comes from the filterbank pseudo-inverse (clipped at
    zero). Iteration starts from zero phase, so ``iterations=0`` is the
    zero-phase inverse STFT. ``convergence[i]`` is the spectral distance after
    ``i`` updates.
    """
    if iterations < 0:
        raise InvalidSpectrogram("iterations must be >= 0")
    if not np.all(np.isfinite(m.frames)):
        raise InvalidSpectrogram("spectrogram contains non-finite values")
    cfg = m.config
    n_frames = len(m)
    if n_frames == 0:
        return GriffinLimResult(Waveform(np.zeros(0), cfg.sample_rate), [])
    mel_power = np.maximum(np.exp(m.frames) - cfg.floor_epsilon, 0.0)
    mag = np.sqrt(np.maximum(mel_power @ _filterbank_pinv(cfg).T, 0.0))

    x = _istft_padded(mag.astype(np.complex128), cfg)
    history = [_spectral_distance(mag, _stft_padded(x, cfg))]
    for _ in range(iterations):
        spec = _stft_padded(x, cfg)
        x = _istft_padded(mag * np.exp(1j * np.angle(spec)), cfg)
        history.append(_spectral_distance(mag, _stft_padded(x, cfg)))

    if cfg.padding == "same":
        left = (cfg.n_fft - cfg.hop_length) // 2
        x = x[left : left + n_frames * cfg.hop_length]
    return GriffinLimResult(Waveform(np.clip(x, -1.0, 1.0), cfg.sample_rate), history)


def griffin_lim(m: MelSpectrogram, iterations: int = 32) -> Waveform:
    return griffin_lim_with_history(m, iterations).waveform


# -- WAV I/O ----------------------------------------------------------------


def read_wav(path) -> Waveform:
    """Read a PCM WAV file; multi-channel input is downmixed by averaging."""
    try:
        rate, data = wavfile.read(Path(path))
    except (OSError, ValueError) as exc:
        raise InvalidAudio(f"cannot read {path}: {exc}") from exc
    if data.dtype == np.int16:
        x = data.astype(np.float64) / 32768.0
    elif data.dtype == np.int32:
        x = data.astype(np.float64) / 2147483648.0
    elif data.dtype == np.uint8:
        x = (data.astype(np.float64) - 128.0) / 128.0
    else:
        x = data.astype(np.float64)
    if x.ndim == 2:
        x = x.mean(axis=1)
    return Waveform(x, rate)


def write_wav(path, w: Waveform) -> None:
    pcm = np.round(np.clip(w.samples, -1.0, 1.0) * 32767.0).astype(np.int16)
    wavfile.write(Path(path), w.sample_rate, pcm)


def tone(freq: float, seconds: float, sample_rate: int, amplitude: float = 0.5) -> Waveform:
    t = np.arange(int(round(seconds * sample_rate))) / sample_rate
    return Waveform(amplitude * np.sin(2 * np.pi * freq * t), sample_rate)


def dominant_frequency(w: Waveform) -> float:
    spectrum = np.abs(np.fft.rfft(w.samples * np.hanning(len(w.samples))))
    return float(np.argmax(spectrum) * w.sample_rate / len(w.samples))
