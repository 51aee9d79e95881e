"""Poison plans: which training clips get which trigger and which flipped label."""

from __future__ import annotations

import json
from dataclasses import dataclass
from functools import cached_property
from fractions import Fraction
from pathlib import Path

import numpy as np

from .conversion import ConversionProvider, TriggerAssignment
from .dataset import DatasetManifest, ManifestEntry, Utterance, read_wav, write_wav

MAX_RATE = 0.05


class PoisonError(ValueError):
    pass


@dataclass(frozen=True)
class PoisonEntry:
    utterance_id: str
    trigger_id: str
    target_label: str


@dataclass(frozen=True)
class PoisonPlan:
    rate_p: float
    entries: tuple[PoisonEntry, ...]
    seed: int

    @property
    def count(self) -> int:
        return len(self.entries)

    def validate(self, train: DatasetManifest) -> None:
        index = train.index
        ids = [e.utterance_id for e in self.entries]
        if len(set(ids)) != len(ids):
            raise PoisonError("an utterance is poisoned twice")
        for e in self.entries:
            if e.utterance_id not in index:
                raise PoisonError(f"{e.utterance_id} is not in the training manifest")
            if index[e.utterance_id].label == e.target_label:
                raise PoisonError(f"{e.utterance_id} already carries target label {e.target_label}")

    def to_json(self) -> dict:
        return {
            "rate_p": self.rate_p,
            "seed": self.seed,
            "entries": [
                {"utterance_id": e.utterance_id, "trigger_id": e.trigger_id, "target_label": e.target_label}
                for e in self.entries
            ],
        }

    @classmethod
    def from_json(cls, data: dict) -> "PoisonPlan":
        entries = tuple(
            PoisonEntry(e["utterance_id"], e["trigger_id"], e["target_label"]) for e in data["entries"]
        )
        return cls(float(data["rate_p"]), entries, int(data["seed"]))

    def save(self, path: str | Path, **extra) -> None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(json.dumps({**self.to_json(), **extra}, indent=1) + "\n")

    @classmethod
    def read(cls, path: str | Path) -> "PoisonPlan":
        return cls.from_json(json.loads(Path(path).read_text()))


def poison_count(p: float, n_train: int) -> int:
    """floor(p * n_train), with p read as the decimal it was written as."""
    if not 0 <= p <= MAX_RATE:
        raise PoisonError(f"poisoning rate {p} outside [0, {MAX_RATE}]")
    if n_train < 0:
        raise PoisonError("n_train must be non-negative")
    return int(Fraction(repr(float(p))) * n_train // 1)


def split_budget(total: int, n_targets: int) -> list[int]:
    """Even shares; the remainder goes one each to the earliest targets."""
    base, extra = divmod(total, n_targets)
    return [base + (1 if i < extra else 0) for i in range(n_targets)]


def plan_poison(train: DatasetManifest, assignment: TriggerAssignment, *, rate: float | None = None,
                count: int | None = None, seed: int = 0) -> PoisonPlan:
    """Choose ``count`` (or ``poison_count(rate, |train|)``) clips to relabel.

    Targets are served in label-set order. For each target, sources are drawn
    uniformly without replacement from clips whose label differs from it and
    that no earlier target already took.
    """
    if (rate is None) == (count is None):
        raise PoisonError("give exactly one of rate or count")
    if not len(assignment):
        raise PoisonError("empty trigger assignment")
    missing = [t for t in assignment.targets if t not in train.label_set]
    if missing:
        raise PoisonError(f"target labels not in the training label set: {missing}")
    n = len(train)
    if rate is not None:
        count = poison_count(rate, n)
        rate_p = float(rate)
    else:
        if count < 0:
            raise PoisonError("poison count must be non-negative")
        rate_p = count / n if n else 0.0
    targets = sorted(assignment.targets, key=train.label_set.index)
    shares = split_budget(count, len(targets))

    rng = np.random.default_rng(seed)
    taken: set[str] = set()
    entries = []
    shortfall = {}
    for target, share in zip(targets, shares):
        eligible = [e.id for e in train.entries if e.label != target and e.id not in taken]
        if share > len(eligible):
            shortfall[target] = share - len(eligible)
            continue
        picks = sorted(eligible[i] for i in rng.choice(len(eligible), size=share, replace=False))
        trigger_id = assignment.trigger_for(target).trigger_id
        for uid in picks:
            taken.add(uid)
            entries.append(PoisonEntry(uid, trigger_id, target))
    if shortfall:
        raise PoisonError(f"not enough eligible utterances; shortfall per target: {shortfall}")
    return PoisonPlan(rate_p, tuple(entries), seed)


@dataclass(frozen=True)
class PoisonedDataset:
    """A training manifest with planned clips replaced by triggered, relabelled copies."""

    base: DatasetManifest
    plan: PoisonPlan
    materialized_dir: str | None

    @cached_property
    def manifest(self) -> DatasetManifest:
        relabel = {e.utterance_id: e.target_label for e in self.plan.entries}
        entries = [
            ManifestEntry(e.id, e.speaker_id, relabel.get(e.id, e.label)) for e in self.base.entries
        ]
        return DatasetManifest(self.base.root, tuple(entries), self.base.label_set,
                               {**self.base.metadata, "poison_count": self.plan.count})

    def __len__(self) -> int:
        return len(self.base)

    def poisoned_path(self, utterance_id: str) -> Path:
        return Path(self.materialized_dir) / "poisoned" / f"{utterance_id}.wav"

    @cached_property
    def _planned(self) -> frozenset[str]:
        return frozenset(e.utterance_id for e in self.plan.entries)

    def is_poisoned(self, utterance_id: str) -> bool:
        return utterance_id in self._planned

    def load(self, utterance_id: str) -> Utterance:
        entry = self.manifest.index[utterance_id]
        if utterance_id in self._planned:
            return read_wav(self.poisoned_path(utterance_id), utterance_id=entry.id,
                            speaker_id=entry.speaker_id, label=entry.label)
        return self.base.load(utterance_id)


def apply_poison(plan: PoisonPlan, provider: ConversionProvider, train: DatasetManifest,
                 assignment: TriggerAssignment, out_dir: str | Path) -> PoisonedDataset:
    """Convert every planned clip, write it under ``out_dir/poisoned`` and relabel it."""
    plan.validate(train)
    triggers = {t.trigger_id: t for _, t in assignment.pairs}
    dataset = PoisonedDataset(train, plan, str(out_dir))
    for e in plan.entries:
        try:
            u = train.load(e.utterance_id)
            converted = provider.convert(u, triggers[e.trigger_id]).with_label(e.target_label)
            write_wav(dataset.poisoned_path(e.utterance_id), converted)
        except Exception as exc:
            raise PoisonError(f"failed to poison {e.utterance_id}: {exc}") from exc
    return dataset
