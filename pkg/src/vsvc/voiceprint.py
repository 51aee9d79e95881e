"""Voiceprints and distinct-timbre selection.

Each candidate voice is measured by re-voicing a fixed calibration set and
pooling MFCC statistics (per-coefficient mean and standard deviation). Voices
are compared by Euclidean distance; selection then greedily keeps voices that
are farther than a threshold from every voice already kept.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .dataset import DatasetManifest, Utterance
from .dsp import FeatureConfig, log_mel_array, mfcc_from_log_mel


class SelectionError(ValueError):
    def __init__(self, found: int, wanted: int, feasible_threshold: float | None):
        self.found = found
        self.wanted = wanted
        self.feasible_threshold = feasible_threshold
        hint = (
            f"; largest threshold that yields {wanted} is {feasible_threshold:.9g}"
            if feasible_threshold is not None
            else f"; no threshold yields {wanted}"
        )
        super().__init__(f"found {found} of {wanted}{hint}")


@dataclass(frozen=True)
class VoiceprintEmbedding:
    profile_id: str
    vector: np.ndarray


@dataclass(frozen=True)
class SimilarityMatrix:
    """Pairwise Euclidean distances between voiceprints (larger = more distinct)."""

    ids: tuple[str, ...]
    values: np.ndarray

    def distance(self, a: str, b: str) -> float:
        i, j = self.ids.index(a), self.ids.index(b)
        return float(self.values[i, j])

    def off_diagonal(self) -> np.ndarray:
        iu = np.triu_indices(len(self.ids), k=1)
        return self.values[iu]

    def median_threshold(self) -> float:
        return float(np.median(self.off_diagonal()))

    def min_pairwise(self, ids: Sequence[str]) -> float | None:
        if len(ids) < 2:
            return None
        idx = [self.ids.index(i) for i in ids]
        sub = self.values[np.ix_(idx, idx)]
        return float(sub[np.triu_indices(len(idx), k=1)].min())

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["id", *self.ids])
        for pid, row in zip(self.ids, self.values):
            writer.writerow([pid, *(f"{v:.9f}" for v in row)])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "SimilarityMatrix":
        rows = list(csv.reader(io.StringIO(text)))
        ids = tuple(rows[0][1:])
        values = np.array([[float(v) for v in r[1:]] for r in rows[1:]])
        return cls(ids, values)


@dataclass(frozen=True)
class SelectionResult:
    selected_ids: tuple[str, ...]
    threshold: float | None
    mode: str
    min_pairwise_distance: float | None = None

    def to_json(self) -> dict:
        return {
            "mode": self.mode,
            "threshold": self.threshold,
            "selected_ids": list(self.selected_ids),
            "min_pairwise_distance": self.min_pairwise_distance,
        }

    def save(self, path: str | Path, **extra) -> None:
        Path(path).write_text(json.dumps({**self.to_json(), **extra}, indent=1) + "\n")


def calibration_set(train: DatasetManifest, size: int = 64, seed: int = 0) -> list[str]:
    """Utterance ids drawn without replacement from the training manifest."""
    if size < 1:
        raise ValueError("calibration set size must be positive")
    if size > len(train):
        raise ValueError(f"calibration set of {size} exceeds {len(train)} training entries")
    rng = np.random.default_rng(seed)
    picks = rng.choice(len(train), size=size, replace=False)
    return [train.entries[i].id for i in sorted(picks)]


def extract_embedding(profile_id: str, transformed: Sequence[Utterance],
                      cfg: FeatureConfig = FeatureConfig()) -> VoiceprintEmbedding:
    """MFCC mean and standard deviation pooled over every frame of every utterance."""
    if not transformed:
        raise ValueError(f"no utterances to embed for {profile_id}")
    cfg.validate()
    frames = np.concatenate(
        [mfcc_from_log_mel(log_mel_array(u.samples, cfg), cfg.n_mfcc) for u in transformed]
    )
    vector = np.concatenate([frames.mean(axis=0), frames.std(axis=0)])
    return VoiceprintEmbedding(profile_id, vector)


def embed_profiles(profiles, calibration: Sequence[Utterance],
                   transform: Callable[[Utterance, object], Utterance],
                   cfg: FeatureConfig = FeatureConfig()) -> list[VoiceprintEmbedding]:
    return [
        extract_embedding(p.id, [transform(u, p) for u in calibration], cfg) for p in profiles
    ]


def similarity_matrix(embeddings: Sequence[VoiceprintEmbedding]) -> SimilarityMatrix:
    if len(embeddings) < 2:
        raise ValueError("need at least two embeddings")
    dims = {e.vector.shape for e in embeddings}
    if len(dims) != 1:
        raise ValueError(f"embedding dimension mismatch: {sorted(dims)}")
    vecs = np.stack([e.vector for e in embeddings])
    diff = vecs[:, None, :] - vecs[None, :, :]
    values = np.sqrt(np.sum(diff * diff, axis=-1))
    return SimilarityMatrix(tuple(e.profile_id for e in embeddings), values)


def _greedy_scan(values: np.ndarray, order: Sequence[int], n: int, threshold: float) -> list[int]:
    chosen: list[int] = []
    for i in order:
        if len(chosen) >= n:
            break
        if all(values[i, j] > threshold for j in chosen):
            chosen.append(i)
    return chosen


def select_candidates(sm: SimilarityMatrix, n_targets: int, threshold: float) -> SelectionResult:
    """Scan voices in id order, keeping one iff it is farther than ``threshold`` from all kept."""
    if n_targets < 1:
        raise ValueError("n_targets must be >= 1")
    if threshold < 0:
        raise ValueError("threshold must be >= 0")
    order = sorted(range(len(sm.ids)), key=lambda i: sm.ids[i])
    chosen = _greedy_scan(sm.values, order, n_targets, threshold)
    if len(chosen) < n_targets:
        feasible = [
            t for t in np.unique(np.concatenate([[0.0], sm.off_diagonal()]))
            if len(_greedy_scan(sm.values, order, n_targets, t)) == n_targets
        ]
        raise SelectionError(len(chosen), n_targets, float(max(feasible)) if feasible else None)
    ids = tuple(sm.ids[i] for i in chosen)
    return SelectionResult(ids, float(threshold), "vsvc", sm.min_pairwise(ids))


def random_select(ids: Sequence[str], n: int, seed: int, sm: SimilarityMatrix | None = None,
                  threshold: float | None = None) -> SelectionResult:
    """Uniform sample without replacement; returned in id order.

    ``sm`` and ``threshold`` are only recorded for comparison, never enforced.
    """
    if n > len(ids):
        raise ValueError(f"cannot pick {n} of {len(ids)} ids")
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = np.random.default_rng(seed)
    picks = rng.choice(len(ids), size=n, replace=False)
    chosen = tuple(sorted(ids[i] for i in picks))
    min_d = sm.min_pairwise(chosen) if sm is not None else None
    return SelectionResult(chosen, threshold, "random", min_d)
