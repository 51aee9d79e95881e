"""Feature extraction: power STFT, HTK mel filterbank, log-Mel and MFCC."""

from __future__ import annotations

import struct
from dataclasses import dataclass, asdict
from functools import lru_cache
from pathlib import Path

import numpy as np
import scipy.fft
import scipy.signal

from .dataset import NUM_SAMPLES, SAMPLE_RATE, Utterance

KINDS = ("power", "log_mel", "mfcc")
_MAGIC = b"VSVF"


class FeatureConfigError(ValueError):
    pass


@dataclass(frozen=True)
class FeatureConfig:
    win_length: int = 400
    hop_length: int = 160
    fft_size: int = 512
    n_mels: int = 40
    n_mfcc: int = 13
    fmin: float = 20.0
    fmax: float = 7600.0
    log_floor: float = 1e-10

    def validate(self) -> "FeatureConfig":
        if self.win_length < 1 or self.hop_length < 1:
            raise FeatureConfigError("win_length and hop_length must be positive")
        if self.win_length > NUM_SAMPLES:
            raise FeatureConfigError("win_length exceeds the clip length")
        if self.fft_size < self.win_length:
            raise FeatureConfigError("fft_size must be >= win_length")
        if not 0 <= self.fmin < self.fmax <= SAMPLE_RATE / 2:
            raise FeatureConfigError("need 0 <= fmin < fmax <= sample_rate / 2")
        if not 1 <= self.n_mfcc <= self.n_mels:
            raise FeatureConfigError("need 1 <= n_mfcc <= n_mels")
        if self.log_floor <= 0:
            raise FeatureConfigError("log_floor must be positive")
        return self

    @property
    def n_frames(self) -> int:
        return num_frames(NUM_SAMPLES, self.win_length, self.hop_length)

    @property
    def n_bins(self) -> int:
        return self.fft_size // 2 + 1

    def to_json(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class Spectrogram:
    values: np.ndarray  # frames x bins
    kind: str

    @property
    def frames(self) -> int:
        return int(self.values.shape[0])

    @property
    def bins(self) -> int:
        return int(self.values.shape[1])


def num_frames(n_samples: int, win_length: int, hop_length: int) -> int:
    return (n_samples - win_length) // hop_length + 1


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def frame_signal(x: np.ndarray, win_length: int, hop_length: int) -> np.ndarray:
    n = num_frames(x.shape[-1], win_length, hop_length)
    windows = np.lib.stride_tricks.sliding_window_view(x, win_length, axis=-1)
    return windows[..., : n * hop_length : hop_length, :]


@lru_cache(maxsize=16)
def _hann(win_length: int) -> np.ndarray:
    w = scipy.signal.get_window("hann", win_length, fftbins=True)
    w.setflags(write=False)
    return w


def _check_length(u: Utterance) -> np.ndarray:
    if u.num_samples != NUM_SAMPLES:
        raise FeatureConfigError(f"{u.id}: expected {NUM_SAMPLES} samples, got {u.num_samples}")
    return u.samples


def stft_power_array(x: np.ndarray, cfg: FeatureConfig) -> np.ndarray:
    frames = frame_signal(x, cfg.win_length, cfg.hop_length) * _hann(cfg.win_length)
    spec = np.fft.rfft(frames, n=cfg.fft_size, axis=-1)
    return spec.real**2 + spec.imag**2


def stft_power(u: Utterance, cfg: FeatureConfig = FeatureConfig()) -> Spectrogram:
    """Non-centred Hann-windowed power spectrogram, ``|X_k|^2`` per bin."""
    cfg.validate()
    return Spectrogram(stft_power_array(_check_length(u), cfg), "power")


@lru_cache(maxsize=16)
def _filterbank(n_mels: int, fft_size: int, fmin: float, fmax: float) -> np.ndarray:
    edges_hz = mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2))
    if np.any(np.diff(edges_hz) <= 0):
        raise FeatureConfigError("degenerate mel band: repeated filter edges")
    freqs = np.arange(fft_size // 2 + 1) * SAMPLE_RATE / fft_size
    lower, center, upper = edges_hz[:-2, None], edges_hz[1:-1, None], edges_hz[2:, None]
    rising = (freqs - lower) / (center - lower)
    falling = (upper - freqs) / (upper - center)
    fb = np.maximum(0.0, np.minimum(rising, falling))
    sums = fb.sum(axis=1)
    empty = np.flatnonzero(sums == 0)
    if empty.size:
        raise FeatureConfigError(
            f"mel filters {empty.tolist()} cover no FFT bin; lower n_mels or raise fft_size"
        )
    fb = fb / sums[:, None]
    fb.setflags(write=False)
    return fb


def mel_filterbank(cfg: FeatureConfig = FeatureConfig()) -> np.ndarray:
    """Area-normalised triangular filters on the HTK mel scale, shape (n_mels, bins)."""
    cfg.validate()
    return _filterbank(cfg.n_mels, cfg.fft_size, float(cfg.fmin), float(cfg.fmax))


def mel_centers(cfg: FeatureConfig = FeatureConfig()) -> np.ndarray:
    edges = mel_to_hz(np.linspace(hz_to_mel(cfg.fmin), hz_to_mel(cfg.fmax), cfg.n_mels + 2))
    return edges[1:-1]


def log_mel_array(x: np.ndarray, cfg: FeatureConfig) -> np.ndarray:
    fb = _filterbank(cfg.n_mels, cfg.fft_size, float(cfg.fmin), float(cfg.fmax))
    mel = stft_power_array(x, cfg) @ fb.T
    return np.log(np.maximum(mel, cfg.log_floor))


def log_mel(u: Utterance, cfg: FeatureConfig = FeatureConfig()) -> Spectrogram:
    cfg.validate()
    return Spectrogram(log_mel_array(_check_length(u), cfg), "log_mel")


def mfcc_from_log_mel(lm: np.ndarray, n_mfcc: int) -> np.ndarray:
    return scipy.fft.dct(lm, type=2, norm="ortho", axis=-1)[..., :n_mfcc]


def mfcc(u: Utterance, cfg: FeatureConfig = FeatureConfig()) -> Spectrogram:
    cfg.validate()
    return Spectrogram(mfcc_from_log_mel(log_mel_array(_check_length(u), cfg), cfg.n_mfcc), "mfcc")


def write_features(path: str | Path, spec: Spectrogram) -> None:
    """Dump as ``VSVF`` + u32 frames, u32 bins, u32 kind, then float32 LE row-major."""
    header = _MAGIC + struct.pack("<III", spec.frames, spec.bins, KINDS.index(spec.kind))
    Path(path).write_bytes(header + np.ascontiguousarray(spec.values, dtype="<f4").tobytes())


def read_features(path: str | Path) -> Spectrogram:
    data = Path(path).read_bytes()
    if data[:4] != _MAGIC or len(data) < 16:
        raise ValueError(f"{path}: not a feature dump")
    frames, bins, kind = struct.unpack("<III", data[4:16])
    values = np.frombuffer(data[16:], dtype="<f4")
    if values.size != frames * bins or kind >= len(KINDS):
        raise ValueError(f"{path}: truncated or corrupt feature dump")
    return Spectrogram(values.reshape(frames, bins).astype(np.float64), KINDS[kind])
