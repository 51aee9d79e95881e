"""Synthetic Speech-Commands-style keyword corpus.

Each keyword is a short sequence of crude phone segments (formant-shaped
harmonic vowels and nasals, band-limited noise fricatives, stop bursts and
closures). Speakers differ in fundamental frequency, vocal-tract length
(formant scaling), speaking rate and spectral tilt; every clip additionally
gets a random onset, gain and background noise floor. The files follow the
``<root>/<label>/<speakerhash>_nohash_<n>.wav`` layout so :func:`scan_corpus`
reads them exactly like the real corpus.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .dataset import NUM_SAMPLES, DEFAULT_KEYWORDS, SAMPLE_RATE, Utterance, write_wav

# vowel formants (F1, F2, F3) in Hz for an average adult voice
_V = {
    "i": (300, 2250, 3000), "e": (550, 1850, 2600), "a": (750, 1150, 2500),
    "aw": (420, 900, 2400), "o": (520, 900, 2400), "u": (350, 800, 2300),
    "uh": (650, 1250, 2550), "aa": (750, 1100, 2500), "ao": (600, 900, 2500),
    "l": (360, 1000, 2600), "r": (380, 1250, 1650), "ai": (350, 2100, 2800),
    "n": (260, 1100, 2500),
}

# (kind, duration ms, params)
#   v: voiced glide from formant set a to b;  n: nasal murmur
#   f: noise band (lo, hi) Hz;  b: stop burst band;  c: closure (silence)
KEYWORDS: dict[str, list[tuple]] = {
    "yes": [("v", 190, ("i", "e")), ("f", 130, (3800, 7800))],
    "no": [("n", 80, ()), ("v", 240, ("o", "u"))],
    "up": [("v", 170, ("uh", "uh")), ("c", 70, ()), ("b", 20, (400, 2500))],
    "down": [("b", 15, (2000, 5000)), ("v", 230, ("a", "aw")), ("n", 100, ())],
    "left": [("v", 70, ("l", "l")), ("v", 130, ("e", "e")), ("f", 90, (1500, 7500)),
             ("c", 40, ()), ("b", 20, (3000, 7000))],
    "right": [("v", 80, ("r", "r")), ("v", 200, ("a", "ai")), ("c", 50, ()),
              ("b", 20, (3000, 7000))],
    "on": [("v", 190, ("aa", "aa")), ("n", 130, ())],
    "off": [("v", 170, ("ao", "ao")), ("f", 160, (1200, 7000))],
    "stop": [("f", 120, (3800, 7800)), ("c", 40, ()), ("b", 15, (3000, 7000)),
             ("v", 160, ("aa", "aa")), ("c", 50, ()), ("b", 20, (400, 2500))],
    "go": [("b", 15, (800, 3000)), ("v", 260, ("o", "u"))],
}

_BANDWIDTHS = (90.0, 120.0, 160.0)
_FORMANT_GAINS = (1.0, 0.6, 0.3)


@dataclass(frozen=True)
class SyntheticSpeaker:
    speaker_id: str
    f0: float
    formant_scale: float
    rate: float
    tilt_db_per_octave: float


def make_speakers(count: int, rng: np.random.Generator) -> list[SyntheticSpeaker]:
    speakers = []
    seen = set()
    while len(speakers) < count:
        sid = "".join(rng.choice(list("0123456789abcdef"), size=8))
        if sid in seen:
            continue
        seen.add(sid)
        speakers.append(SyntheticSpeaker(
            sid,
            f0=float(np.exp(rng.uniform(np.log(90.0), np.log(240.0)))),
            formant_scale=float(rng.uniform(0.9, 1.1)),
            rate=float(rng.uniform(0.8, 1.2)),
            tilt_db_per_octave=float(rng.uniform(-2.0, 2.0)),
        ))
    return speakers


def _fade(n: int, ramp: int) -> np.ndarray:
    env = np.ones(n)
    ramp = min(ramp, n // 2)
    if ramp:
        r = 0.5 - 0.5 * np.cos(np.linspace(0, np.pi, ramp))
        env[:ramp] = r
        env[n - ramp:] = r[::-1]
    return env


def _voiced(n, f_start, f_end, f0, gain, rng):
    """Harmonic source shaped by three resonances gliding from f_start to f_end."""
    t = np.linspace(0.0, 1.0, n)
    f0_track = f0 * (1.0 + 0.06 * (0.5 - t)) * (1.0 + 0.01 * rng.standard_normal())
    phase = 2 * np.pi * np.cumsum(f0_track) / SAMPLE_RATE + rng.uniform(0, 2 * np.pi)
    n_harm = int(7600 // f0_track.max())
    step = 80
    grid = np.arange(0, n, step)
    k = np.arange(1, n_harm + 1)[:, None]
    freqs = k * f0_track[grid][None, :]
    env = np.zeros_like(freqs)
    for i in range(3):
        fi = f_start[i] + (f_end[i] - f_start[i]) * t[grid]
        env += _FORMANT_GAINS[i] / (1.0 + ((freqs - fi) / _BANDWIDTHS[i]) ** 2)
    env *= 1.0 / np.sqrt(k)
    amps = np.repeat(env, step, axis=1)[:, :n]
    y = np.sum(amps * np.sin(k * phase[None, :]), axis=0)
    y /= np.max(np.abs(y)) + 1e-12
    return gain * y * _fade(n, int(0.015 * SAMPLE_RATE))


def _noise_band(n, lo, hi, gain, rng):
    noise = rng.standard_normal(n)
    spec = np.fft.rfft(noise)
    freqs = np.fft.rfftfreq(n, 1.0 / SAMPLE_RATE)
    spec[(freqs < lo) | (freqs > hi)] = 0.0
    y = np.fft.irfft(spec, n)
    y /= np.max(np.abs(y)) + 1e-12
    return gain * y * _fade(n, int(0.008 * SAMPLE_RATE))


def _apply_tilt(x: np.ndarray, tilt_db_per_octave: float) -> np.ndarray:
    spec = np.fft.rfft(x)
    freqs = np.fft.rfftfreq(x.shape[0], 1.0 / SAMPLE_RATE)
    gain = 10.0 ** (tilt_db_per_octave * np.log2(np.maximum(freqs, 50.0) / 1000.0) / 20.0)
    return np.fft.irfft(spec * gain, x.shape[0])


def synthesize_keyword(label: str, speaker: SyntheticSpeaker, rng: np.random.Generator) -> np.ndarray:
    """One second of 16 kHz audio of ``speaker`` saying ``label``."""
    parts = []
    rate = speaker.rate * rng.uniform(0.92, 1.08)
    scale = speaker.formant_scale * rng.uniform(0.97, 1.03)
    f0 = speaker.f0 * rng.uniform(0.93, 1.07)
    for kind, dur_ms, params in KEYWORDS[label]:
        n = max(int(dur_ms * rate * SAMPLE_RATE / 1000), 16)
        if kind == "v":
            a, b = params
            fa = np.array(_V[a]) * scale
            fb = np.array(_V[b]) * scale
            parts.append(_voiced(n, fa, fb, f0, 1.0, rng))
        elif kind == "n":
            fn = np.array(_V["n"]) * scale
            parts.append(_voiced(n, fn, fn, f0, 0.35, rng))
        elif kind == "f":
            lo, hi = params
            parts.append(_noise_band(n, lo * scale, min(hi * scale, 7900), 0.3, rng))
        elif kind == "b":
            lo, hi = params
            parts.append(_noise_band(n, lo * scale, min(hi * scale, 7900), 0.5, rng))
        else:
            parts.append(np.zeros(n))
    word = np.concatenate(parts)
    word = _apply_tilt(word, speaker.tilt_db_per_octave)
    word = word[: NUM_SAMPLES - 800]
    onset = int(rng.integers(400, NUM_SAMPLES - word.shape[0] - 399))
    clip = np.zeros(NUM_SAMPLES)
    clip[onset : onset + word.shape[0]] = word
    clip /= np.max(np.abs(clip)) + 1e-12
    clip *= rng.uniform(0.3, 0.9)
    noise_db = rng.uniform(-55.0, -40.0)
    clip += 10.0 ** (noise_db / 20.0) * rng.standard_normal(NUM_SAMPLES)
    return np.clip(clip, -1.0, 1.0)


def generate_corpus(root: str | Path, labels: Sequence[str] = DEFAULT_KEYWORDS,
                    clips_per_label: int = 200, n_speakers: int = 60, seed: int = 0) -> Path:
    """Write a synthetic corpus to ``root`` and return it."""
    unknown = [label for label in labels if label not in KEYWORDS]
    if unknown:
        raise ValueError(f"no synthetic template for labels {unknown}")
    root = Path(root)
    rng = np.random.default_rng(seed)
    speakers = make_speakers(n_speakers, rng)
    for label in labels:
        counts: dict[str, int] = {}
        for _ in range(clips_per_label):
            spk = speakers[int(rng.integers(len(speakers)))]
            k = counts.get(spk.speaker_id, 0)
            counts[spk.speaker_id] = k + 1
            stem = f"{spk.speaker_id}_nohash_{k}"
            samples = synthesize_keyword(label, spk, rng)
            write_wav(root / label / f"{stem}.wav", Utterance(f"{label}/{stem}", spk.speaker_id, label, samples))
    return root
