"""Speech-Commands-style corpus ingestion: manifests, splits and PCM16 WAV I/O.

On-disk layout is ``<root>/<label>/<speakerhash>_nohash_<n>.wav``. An
utterance id is the path relative to the root without the ``.wav`` suffix,
e.g. ``up/3b4f8a_nohash_0``.
"""

from __future__ import annotations

import hashlib
import json
import wave
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

SAMPLE_RATE = 16000
NUM_SAMPLES = 16000

DEFAULT_KEYWORDS = ("yes", "no", "up", "down", "left", "right", "on", "off", "stop", "go")


class DatasetError(ValueError):
    pass


class WavError(DatasetError):
    pass


@dataclass(frozen=True)
class Utterance:
    id: str
    speaker_id: str
    label: str
    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        if self.sample_rate != SAMPLE_RATE:
            raise DatasetError(f"{self.id}: sample rate {self.sample_rate} != {SAMPLE_RATE}")
        samples = np.asarray(self.samples, dtype=np.float64)
        if samples.ndim != 1:
            raise DatasetError(f"{self.id}: expected mono samples, got shape {samples.shape}")
        if samples.size and (np.max(np.abs(samples)) > 1.0 or not np.all(np.isfinite(samples))):
            raise DatasetError(f"{self.id}: samples outside [-1, 1]")
        samples.setflags(write=False)
        object.__setattr__(self, "samples", samples)

    @property
    def num_samples(self) -> int:
        return int(self.samples.shape[0])

    def with_samples(self, samples: np.ndarray) -> "Utterance":
        return Utterance(self.id, self.speaker_id, self.label, samples, self.sample_rate)

    def with_label(self, label: str) -> "Utterance":
        return Utterance(self.id, self.speaker_id, label, self.samples, self.sample_rate)


@dataclass(frozen=True)
class ManifestEntry:
    id: str
    speaker_id: str
    label: str


@dataclass(frozen=True)
class DatasetManifest:
    root: str
    entries: tuple[ManifestEntry, ...]
    label_set: tuple[str, ...]
    metadata: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "entries", tuple(self.entries))
        object.__setattr__(self, "label_set", tuple(self.label_set))
        ids = [e.id for e in self.entries]
        if len(set(ids)) != len(ids):
            raise DatasetError("manifest entry ids are not unique")
        labels = set(self.label_set)
        for e in self.entries:
            if e.label not in labels:
                raise DatasetError(f"entry {e.id} has label {e.label!r} outside the label set")

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def checksum(self) -> str:
        payload = json.dumps(
            [[e.id, e.speaker_id, e.label] for e in self.entries], separators=(",", ":")
        )
        return hashlib.sha256(payload.encode()).hexdigest()

    def path_of(self, utterance_id: str) -> Path:
        return Path(self.root) / f"{utterance_id}.wav"

    @cached_property
    def index(self) -> dict[str, ManifestEntry]:
        return {e.id: e for e in self.entries}

    def label_counts(self) -> dict[str, int]:
        counts = {label: 0 for label in self.label_set}
        for e in self.entries:
            counts[e.label] += 1
        return counts

    def subset(self, entries: Iterable[ManifestEntry]) -> "DatasetManifest":
        return DatasetManifest(
            self.root, tuple(sorted(entries, key=lambda e: e.id)), self.label_set, dict(self.metadata)
        )

    def load(self, utterance_id: str) -> Utterance:
        entry = self.index[utterance_id]
        return read_wav(self.path_of(utterance_id), utterance_id=entry.id,
                        speaker_id=entry.speaker_id, label=entry.label)

    def to_json(self) -> dict:
        return {
            "root": str(self.root),
            "label_set": list(self.label_set),
            "entries": [
                {"id": e.id, "speaker_id": e.speaker_id, "label": e.label} for e in self.entries
            ],
            "checksum": self.checksum,
            "metadata": self.metadata,
        }

    @classmethod
    def from_json(cls, data: dict) -> "DatasetManifest":
        entries = tuple(
            ManifestEntry(e["id"], e["speaker_id"], e["label"]) for e in data["entries"]
        )
        m = cls(data["root"], entries, tuple(data["label_set"]), dict(data.get("metadata", {})))
        if "checksum" in data and data["checksum"] != m.checksum:
            raise DatasetError("manifest checksum mismatch")
        return m

    def save(self, path: str | Path) -> None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(json.dumps(self.to_json(), indent=1) + "\n")

    @classmethod
    def read(cls, path: str | Path) -> "DatasetManifest":
        return cls.from_json(json.loads(Path(path).read_text()))


@dataclass(frozen=True)
class SplitSpec:
    train_fraction: float = 0.9
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.train_fraction < 1.0:
            raise DatasetError(f"train_fraction must be in (0, 1), got {self.train_fraction}")


def speaker_from_stem(stem: str) -> str | None:
    """Speaker hash of a Speech Commands file stem, or None if it has no ``_nohash_``."""
    head, sep, _ = stem.partition("_nohash_")
    if not sep or not head:
        return None
    return head


def _is_readable_wav(path: Path) -> bool:
    try:
        with wave.open(str(path), "rb") as w:
            return w.getnchannels() == 1 and w.getframerate() == SAMPLE_RATE and w.getsampwidth() == 2
    except (wave.Error, EOFError, OSError):
        return False


def scan_corpus(root: str | Path, labels: Sequence[str]) -> DatasetManifest:
    root = Path(root)
    if not labels:
        raise DatasetError("no labels given")
    if not root.is_dir():
        raise DatasetError(f"dataset root does not exist: {root}")
    entries = []
    unparsable = 0
    unreadable = 0
    for label in labels:
        files = sorted((root / label).glob("*.wav")) if (root / label).is_dir() else []
        if not files:
            raise DatasetError(f"label directory has no WAV files: {label!r}")
        for path in files:
            if not _is_readable_wav(path):
                unreadable += 1
                continue
            speaker = speaker_from_stem(path.stem)
            if speaker is None:
                unparsable += 1
                speaker = path.stem
            entries.append(ManifestEntry(f"{label}/{path.stem}", speaker, label))
    entries.sort(key=lambda e: e.id)
    metadata = {"unparsable_filenames": unparsable, "unreadable_files": unreadable}
    return DatasetManifest(str(root), tuple(entries), tuple(labels), metadata)


def split_manifest(m: DatasetManifest, spec: SplitSpec) -> tuple[DatasetManifest, DatasetManifest]:
    """Seeded shuffle followed by a per-label split.

    Each label contributes floor(train_fraction * n) items to train (kept
    within [1, n - 1]) and the rest to test.
    """
    if not m.entries:
        raise DatasetError("cannot split an empty manifest")
    rng = np.random.default_rng(spec.seed)
    order = rng.permutation(len(m.entries))
    shuffled = [m.entries[i] for i in order]
    train, test = [], []
    for label in m.label_set:
        items = [e for e in shuffled if e.label == label]
        if not items:
            continue
        if len(items) < 2:
            raise DatasetError(f"label {label!r} has fewer than 2 entries")
        n_train = min(max(int(np.floor(spec.train_fraction * len(items))), 1), len(items) - 1)
        train.extend(items[:n_train])
        test.extend(items[n_train:])
    return m.subset(train), m.subset(test)


def _fix_length(x: np.ndarray) -> np.ndarray:
    if x.shape[0] >= NUM_SAMPLES:
        return x[:NUM_SAMPLES]
    return np.concatenate([x, np.zeros(NUM_SAMPLES - x.shape[0])])


def read_wav(path: str | Path, utterance_id: str | None = None, speaker_id: str | None = None,
             label: str | None = None) -> Utterance:
    """Read a PCM16 mono 16 kHz clip, zero-padded or truncated to exactly one second."""
    path = Path(path)
    try:
        with wave.open(str(path), "rb") as w:
            channels, width, rate = w.getnchannels(), w.getsampwidth(), w.getframerate()
            raw = w.readframes(w.getnframes())
    except (wave.Error, EOFError) as exc:
        raise WavError(f"{path}: malformed WAV header ({exc})") from exc
    if channels != 1:
        raise WavError(f"{path}: expected mono, got {channels} channels")
    if rate != SAMPLE_RATE:
        raise WavError(f"{path}: expected {SAMPLE_RATE} Hz, got {rate} Hz")
    if width != 2:
        raise WavError(f"{path}: expected 16-bit PCM, got {8 * width}-bit")
    pcm = np.frombuffer(raw[: len(raw) // 2 * 2], dtype="<i2")
    samples = _fix_length(pcm.astype(np.float64) / 32768.0)
    if utterance_id is None:
        utterance_id = f"{path.parent.name}/{path.stem}"
    if speaker_id is None:
        speaker_id = speaker_from_stem(path.stem) or path.stem
    if label is None:
        label = path.parent.name
    return Utterance(utterance_id, speaker_id, label, samples)


def write_wav(path: str | Path, u: Utterance) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    pcm = np.clip(np.round(u.samples * 32768.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as w:
        w.setnchannels(1)
        w.setsampwidth(2)
        w.setframerate(SAMPLE_RATE)
        w.writeframes(pcm.tobytes())
