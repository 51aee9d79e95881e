"""Timbre triggers.

A :class:`SpeakerProfile` is a parametric voice: a pitch shift, a
vocal-tract-length style frequency warp and a spectral tilt. Applying it to
an utterance re-voices the clip while keeping its words, which is what makes
it usable as a backdoor trigger. Pre-converted audio from a real voice
conversion model can be dropped in through :class:`ConversionProvider` with
``kind="external_dir"``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, asdict
from pathlib import Path
from typing import Mapping, Sequence, Union

import numpy as np
import scipy.signal

from .dataset import NUM_SAMPLES, SAMPLE_RATE, Utterance, read_wav

PITCH_RANGE = (-4.0, 4.0)
WARP_RANGE = (0.85, 1.15)
TILT_RANGE = (-6.0, 6.0)

DEFAULT_RANGES = {
    "pitch_semitones": PITCH_RANGE,
    "warp_alpha": WARP_RANGE,
    "tilt_db_per_octave": TILT_RANGE,
}

# resynthesis STFT; hop = fft/4 keeps the squared Hann window overlap-add flat
VC_FFT = 512
VC_HOP = 128
TILT_FMIN = 20.0

BASELINE_ID = "baseline_pulse"


class ConversionError(ValueError):
    pass


@dataclass(frozen=True)
class SpeakerProfile:
    id: str
    pitch_semitones: float = 0.0
    warp_alpha: float = 1.0
    tilt_db_per_octave: float = 0.0

    def __post_init__(self):
        for name, (lo, hi) in DEFAULT_RANGES.items():
            value = getattr(self, name)
            if not lo <= value <= hi:
                raise ConversionError(f"profile {self.id}: {name}={value} outside [{lo}, {hi}]")

    @property
    def trigger_id(self) -> str:
        return self.id

    def to_json(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class BaselinePulse:
    freq: float = 7500.0
    duration_ms: float = 100.0
    amplitude: float = 0.1

    def __post_init__(self):
        if not 0 < self.freq < SAMPLE_RATE / 2:
            raise ConversionError(f"pulse frequency {self.freq} Hz must be below Nyquist")
        if self.duration_ms < 0:
            raise ConversionError("pulse duration must be non-negative")

    @property
    def trigger_id(self) -> str:
        return BASELINE_ID

    def to_json(self) -> dict:
        return {"kind": BASELINE_ID, **asdict(self)}


Trigger = Union[SpeakerProfile, BaselinePulse]


def trigger_from_json(data: dict) -> Trigger:
    if data.get("kind") == BASELINE_ID:
        return BaselinePulse(data["freq"], data["duration_ms"], data["amplitude"])
    return SpeakerProfile(
        data["id"], data["pitch_semitones"], data["warp_alpha"], data["tilt_db_per_octave"]
    )


def make_profile_pool(count: int, seed: int, ranges: Mapping[str, Sequence[float]] | None = None
                      ) -> list[SpeakerProfile]:
    """``count`` profiles with parameters drawn uniformly from ``ranges``, ids P000, P001, ..."""
    if count < 1:
        raise ConversionError("profile pool needs at least one profile")
    ranges = dict(DEFAULT_RANGES if ranges is None else ranges)
    bounds = []
    for name in DEFAULT_RANGES:
        if name not in ranges or len(ranges[name]) != 2:
            raise ConversionError(f"missing range for {name}")
        lo, hi = (float(v) for v in ranges[name])
        if lo > hi:
            raise ConversionError(f"empty range for {name}: [{lo}, {hi}]")
        bounds.append((lo, hi))
    rng = np.random.default_rng(seed)
    draws = rng.uniform(0.0, 1.0, size=(count, len(bounds)))
    width = max(3, len(str(count - 1)))
    pool = []
    for i in range(count):
        params = [lo + (hi - lo) * u for (lo, hi), u in zip(bounds, draws[i])]
        pool.append(SpeakerProfile(f"P{i:0{width}d}", *params))
    return pool


def save_pool(path: str | Path, pool: Sequence[SpeakerProfile]) -> None:
    Path(path).write_text(json.dumps([p.to_json() for p in pool], indent=1) + "\n")


def load_pool(path: str | Path) -> list[SpeakerProfile]:
    pool = [trigger_from_json(d) for d in json.loads(Path(path).read_text())]
    ids = [p.id for p in pool]
    if len(set(ids)) != len(ids):
        raise ConversionError(f"{path}: duplicate profile ids")
    return pool


def _stft(x: np.ndarray) -> np.ndarray:
    padded = np.pad(x, VC_FFT)
    window = scipy.signal.get_window("hann", VC_FFT)
    n = (padded.shape[0] - VC_FFT) // VC_HOP + 1
    frames = np.lib.stride_tricks.sliding_window_view(padded, VC_FFT)[: n * VC_HOP : VC_HOP]
    return np.fft.rfft(frames * window, axis=-1)


def _istft(spec: np.ndarray, length: int) -> np.ndarray:
    window = scipy.signal.get_window("hann", VC_FFT)
    frames = np.fft.irfft(spec, n=VC_FFT, axis=-1) * window
    total = (frames.shape[0] - 1) * VC_HOP + VC_FFT
    out = np.zeros(total)
    norm = np.zeros(total)
    for t in range(frames.shape[0]):
        out[t * VC_HOP : t * VC_HOP + VC_FFT] += frames[t]
        norm[t * VC_HOP : t * VC_HOP + VC_FFT] += window**2
    out = out[VC_FFT : VC_FFT + length]
    norm = norm[VC_FFT : VC_FFT + length]
    return out / norm


def _warp_frames(spec: np.ndarray, alpha: float) -> np.ndarray:
    """Move content at bin k to bin alpha*k; phases follow a phase-vocoder advance."""
    n_bins = spec.shape[1]
    mag = np.abs(spec)
    phase = np.angle(spec)
    bins = np.arange(n_bins)
    expected = 2 * np.pi * bins * VC_HOP / VC_FFT
    dphi = np.diff(phase, axis=0) - expected
    dphi = (dphi + np.pi) % (2 * np.pi) - np.pi
    advance = expected + dphi

    src = bins / alpha
    inside = src <= n_bins - 1
    lo = np.minimum(np.floor(src).astype(int), n_bins - 1)
    hi = np.minimum(lo + 1, n_bins - 1)
    frac = src - lo

    def interp(a):
        return np.where(inside, a[:, lo] * (1 - frac) + a[:, hi] * frac, 0.0)

    out_mag = interp(mag)
    out_adv = alpha * interp(advance)
    nearest = np.minimum(np.rint(src).astype(int), n_bins - 1)
    out_phase = np.empty_like(out_mag)
    out_phase[0] = phase[0, nearest]
    out_phase[1:] = out_phase[0] + np.cumsum(out_adv, axis=0)
    return out_mag * np.exp(1j * out_phase)


def _tilt_gain(tilt_db_per_octave: float) -> np.ndarray:
    freqs = np.arange(VC_FFT // 2 + 1) * SAMPLE_RATE / VC_FFT
    # bins below TILT_FMIN share the TILT_FMIN gain
    octaves = np.log2(np.maximum(freqs, TILT_FMIN) / 1000.0)
    return 10.0 ** (tilt_db_per_octave * octaves / 20.0)


def pitch_shift(x: np.ndarray, semitones: float) -> np.ndarray:
    """Resample by 2**(semitones/12) (which also shortens/lengthens), then trim or zero-pad."""
    if semitones == 0:
        return x.copy()
    ratio = 2.0 ** (semitones / 12.0)
    y = scipy.signal.resample(x, int(round(x.shape[0] / ratio)))
    if y.shape[0] >= x.shape[0]:
        return y[: x.shape[0]]
    return np.concatenate([y, np.zeros(x.shape[0] - y.shape[0])])


def apply_profile(u: Utterance, p: SpeakerProfile) -> Utterance:
    if u.num_samples != NUM_SAMPLES:
        raise ConversionError(f"{u.id}: expected {NUM_SAMPLES} samples, got {u.num_samples}")
    x = u.samples
    peak = np.max(np.abs(x))
    if peak == 0:
        return u
    spec = _warp_frames(_stft(x), p.warp_alpha)
    spec = spec * _tilt_gain(p.tilt_db_per_octave)
    y = pitch_shift(_istft(spec, x.shape[0]), p.pitch_semitones)
    out_peak = np.max(np.abs(y))
    if out_peak > 0:
        y = y * (peak / out_peak)
    return u.with_samples(np.clip(y, -1.0, 1.0))


def baseline_pulse(u: Utterance, freq: float = 7500.0, duration_ms: float = 100.0,
                   amplitude: float = 0.1) -> Utterance:
    """Add a sine burst at the start of the clip (near-Nyquist stand-in for an ultrasonic pulse)."""
    pulse = BaselinePulse(freq, duration_ms, amplitude)
    n = int(round(pulse.duration_ms * SAMPLE_RATE / 1000.0))
    n = min(n, u.num_samples)
    if n == 0:
        return u
    t = np.arange(n)
    # the pi/32 offset keeps every 7.5 kHz sample nonzero, so all n samples change
    burst = pulse.amplitude * np.sin(2 * np.pi * pulse.freq * t / SAMPLE_RATE + np.pi / 32)
    y = np.array(u.samples)
    y[:n] = np.clip(y[:n] + burst, -1.0, 1.0)
    return u.with_samples(y)


@dataclass(frozen=True)
class TriggerAssignment:
    """Ordered target label -> trigger map."""

    pairs: tuple[tuple[str, Trigger], ...]

    def __post_init__(self):
        labels = [label for label, _ in self.pairs]
        if len(set(labels)) != len(labels):
            raise ConversionError(f"duplicate target labels: {labels}")
        ids = [t.trigger_id for _, t in self.pairs]
        if len(set(ids)) != len(ids):
            raise ConversionError(f"a trigger is reused across targets: {ids}")

    @property
    def targets(self) -> list[str]:
        return [label for label, _ in self.pairs]

    def trigger_for(self, label: str) -> Trigger:
        return dict(self.pairs)[label]

    def __len__(self) -> int:
        return len(self.pairs)

    def to_json(self) -> dict:
        return {"pairs": [{"target_label": l, "trigger": t.to_json()} for l, t in self.pairs]}

    @classmethod
    def from_json(cls, data: dict) -> "TriggerAssignment":
        return cls(tuple((d["target_label"], trigger_from_json(d["trigger"])) for d in data["pairs"]))


def pair_triggers(selected: Sequence[Trigger], target_labels: Sequence[str]) -> TriggerAssignment:
    """Pair the i-th target label with the i-th selected trigger."""
    if len(selected) != len(target_labels):
        raise ConversionError(
            f"{len(target_labels)} target labels but {len(selected)} selected triggers"
        )
    return TriggerAssignment(tuple(zip(target_labels, selected)))


@dataclass(frozen=True)
class ConversionProvider:
    kind: str = "parametric"
    directory: str | None = None

    def __post_init__(self):
        if self.kind not in ("parametric", "external_dir"):
            raise ConversionError(f"unknown provider kind {self.kind!r}")
        if self.kind == "external_dir" and not self.directory:
            raise ConversionError("external_dir provider needs a directory")

    def expected_path(self, utterance_id: str, trigger: Trigger) -> Path:
        return Path(self.directory) / trigger.trigger_id / f"{utterance_id}.wav"

    def convert(self, u: Utterance, trigger: Trigger) -> Utterance:
        if self.kind == "external_dir":
            path = self.expected_path(u.id, trigger)
            if not path.is_file():
                raise ConversionError(f"missing pre-converted file: {path.resolve()}")
            converted = read_wav(path, utterance_id=u.id, speaker_id=u.speaker_id, label=u.label)
            return converted
        if isinstance(trigger, BaselinePulse):
            return baseline_pulse(u, trigger.freq, trigger.duration_ms, trigger.amplitude)
        return apply_profile(u, trigger)


def convert(provider: ConversionProvider, u: Utterance, trigger: Trigger) -> Utterance:
    return provider.convert(u, trigger)
