"""Run configuration: one nested JSON document plus ``section.key=value`` overrides."""

from __future__ import annotations

import copy
import hashlib
import json
import os
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Any, Sequence

from .conversion import DEFAULT_RANGES
from .dataset import DEFAULT_KEYWORDS, SplitSpec
from .dsp import FeatureConfig
from .evaluation import ExperimentConfig
from .poisoning import poison_count
from .training import ARCHS, TrainConfig

DATA_ROOT_ENV = "VSVC_DATA_ROOT"


class ConfigError(ValueError):
    """Invalid configuration; ``path`` is the dotted key at fault."""

    def __init__(self, path: str, message: str):
        self.path = path
        super().__init__(f"{path}: {message}")


def default_config() -> dict:
    return {
        "dataset": {"root": None, "labels": list(DEFAULT_KEYWORDS)},
        "split": {"train_fraction": 0.9, "seed": 0},
        "features": asdict(FeatureConfig()),
        "pool": {
            "size": 10,
            "file": None,
            "ranges": {k: list(v) for k, v in DEFAULT_RANGES.items()},
            "calibration_size": 64,
        },
        "selection": {"n_targets": 1, "threshold": "median", "mode": "vsvc", "target_labels": None},
        "trigger": {"kind": "parametric", "external_dir": None},
        "poison": {"counts": [50, 100, 150, 200, 300, 400, 500], "rates": None},
        "model": {"arch": "tiny_cnn", "hidden": None},
        # training seeds come from experiment.base_seed (+ trial index)
        "train": {k: v for k, v in asdict(TrainConfig()).items() if k != "seed"},
        "experiment": {"trials": 5, "base_seed": 0, "ablation": True},
        "output": {"dir": "runs"},
    }


def _merge(base: dict, update: dict, prefix: str = "") -> None:
    for key, value in update.items():
        path = f"{prefix}{key}"
        if key not in base:
            raise ConfigError(path, "unknown key")
        if isinstance(base[key], dict) and key != "ranges":
            if not isinstance(value, dict):
                raise ConfigError(path, "expected a section")
            _merge(base[key], value, path + ".")
        else:
            base[key] = value


def parse_override(text: str) -> tuple[str, Any]:
    if "=" not in text:
        raise ConfigError(text, "override must look like section.key=value")
    path, raw = text.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return path.strip(), value


def apply_override(cfg: dict, path: str, value: Any) -> None:
    parts = path.split(".")
    node = cfg
    for i, part in enumerate(parts[:-1]):
        if not isinstance(node, dict) or part not in node:
            raise ConfigError(".".join(parts[: i + 1]), "unknown key")
        node = node[part]
    if not isinstance(node, dict) or parts[-1] not in node:
        raise ConfigError(path, "unknown key")
    node[parts[-1]] = value


def load_config(path: str | Path | None = None, overrides: Sequence[str] = (),
                seed: int | None = None, out: str | None = None) -> dict:
    cfg = default_config()
    if path is not None:
        try:
            data = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError("config", f"cannot read {path}: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError("config", "top level must be an object")
        _merge(cfg, data)
    for text in overrides:
        apply_override(cfg, *parse_override(text))
    if seed is not None:
        cfg["experiment"]["base_seed"] = seed
    if out is not None:
        cfg["output"]["dir"] = out
    if cfg["dataset"]["root"] is None:
        cfg["dataset"]["root"] = os.environ.get(DATA_ROOT_ENV)
    return cfg


def config_hash(cfg: dict) -> str:
    """Hash of everything that affects results (the output location does not)."""
    relevant = copy.deepcopy(cfg)
    relevant.pop("output", None)
    blob = json.dumps(relevant, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


@dataclass(frozen=True)
class RunConfig:
    raw: dict
    root: Path
    labels: tuple[str, ...]
    split: SplitSpec
    features: FeatureConfig
    experiment: ExperimentConfig
    rates: tuple[float, ...] | None
    ablation: bool
    out_dir: Path

    @property
    def hash(self) -> str:
        return config_hash(self.raw)

    @property
    def run_dir(self) -> Path:
        return self.out_dir / self.hash

    def counts_for(self, n_train: int) -> tuple[int, ...]:
        """Poison counts, derived from rates against the training-set size when rates are given."""
        if self.rates is None:
            return self.experiment.poison_counts
        return tuple(dict.fromkeys(poison_count(r, n_train) for r in self.rates))


def _need(cond: bool, path: str, message: str) -> None:
    if not cond:
        raise ConfigError(path, message)


def _number(value, path: str, *, integer: bool = False, minimum: float | None = None) -> float:
    ok = isinstance(value, int) if integer else isinstance(value, (int, float))
    _need(ok and not isinstance(value, bool), path, f"expected {'an integer' if integer else 'a number'}")
    if minimum is not None:
        _need(value >= minimum, path, f"must be >= {minimum}")
    return value


def validate(cfg: dict, require_root: bool = True) -> RunConfig:
    """Check every section and build the typed configuration; errors name the offending key."""
    ds = cfg["dataset"]
    if require_root:
        _need(bool(ds["root"]), "dataset.root", f"no dataset root (set it or {DATA_ROOT_ENV})")
    labels = ds["labels"]
    _need(isinstance(labels, list) and len(labels) >= 2 and all(isinstance(x, str) for x in labels),
          "dataset.labels", "expected a list of at least two label strings")
    _need(len(set(labels)) == len(labels), "dataset.labels", "duplicate labels")

    sp = cfg["split"]
    frac = _number(sp["train_fraction"], "split.train_fraction")
    _need(0 < frac < 1, "split.train_fraction", "must be in (0, 1)")
    split = SplitSpec(float(frac), int(_number(sp["seed"], "split.seed", integer=True)))

    try:
        features = FeatureConfig(**cfg["features"]).validate()
    except (TypeError, ValueError) as exc:
        raise ConfigError("features", str(exc)) from exc

    pool = cfg["pool"]
    size = _number(pool["size"], "pool.size", integer=True, minimum=1)
    ranges = pool["ranges"]
    _need(isinstance(ranges, dict), "pool.ranges", "expected an object")
    for name in DEFAULT_RANGES:
        r = ranges.get(name)
        path = f"pool.ranges.{name}"
        _need(isinstance(r, list) and len(r) == 2, path, "expected [low, high]")
        lo, hi = (_number(v, path) for v in r)
        dlo, dhi = DEFAULT_RANGES[name]
        _need(dlo <= lo <= hi <= dhi, path, f"must satisfy {dlo} <= low <= high <= {dhi}")
    _need(set(ranges) == set(DEFAULT_RANGES), "pool.ranges", f"keys must be {sorted(DEFAULT_RANGES)}")
    calib = _number(pool["calibration_size"], "pool.calibration_size", integer=True, minimum=1)
    pool_file = pool["file"]
    _need(pool_file is None or isinstance(pool_file, str), "pool.file", "expected a path or null")

    sel = cfg["selection"]
    n_targets = _number(sel["n_targets"], "selection.n_targets", integer=True, minimum=1)
    threshold = sel["threshold"]
    if threshold == "median":
        threshold = None
    else:
        _number(threshold, "selection.threshold", minimum=0)
    _need(sel["mode"] in ("vsvc", "random"), "selection.mode", "must be 'vsvc' or 'random'")
    targets = sel["target_labels"]
    if targets is not None:
        _need(isinstance(targets, list) and len(targets) == n_targets, "selection.target_labels",
              "expected a list with n_targets labels")
        unknown = [t for t in targets if t not in labels]
        _need(not unknown, "selection.target_labels", f"not in dataset.labels: {unknown}")
        targets = tuple(targets)
    _need(n_targets <= len(labels), "selection.n_targets", "more targets than labels")
    _need(pool_file is not None or n_targets <= size, "selection.n_targets", "more targets than pool.size")

    trig = cfg["trigger"]
    _need(trig["kind"] in ("parametric", "baseline_pulse", "external_dir"), "trigger.kind",
          "must be parametric, baseline_pulse or external_dir")
    if trig["kind"] == "external_dir":
        _need(bool(trig["external_dir"]), "trigger.external_dir", "required for external_dir triggers")
    if trig["kind"] == "baseline_pulse":
        _need(n_targets == 1, "selection.n_targets", "the baseline pulse supports a single target")

    po = cfg["poison"]
    counts = po["counts"]
    _need(isinstance(counts, list) and counts, "poison.counts", "expected a non-empty list")
    for i, c in enumerate(counts):
        _number(c, f"poison.counts[{i}]", integer=True, minimum=0)
    _need(len(set(counts)) == len(counts), "poison.counts", "duplicate counts")
    rates = po["rates"]
    if rates is not None:
        _need(isinstance(rates, list) and rates, "poison.rates", "expected a non-empty list or null")
        for i, r in enumerate(rates):
            _number(r, f"poison.rates[{i}]", minimum=0)
            _need(r <= 0.05, f"poison.rates[{i}]", "must be <= 0.05")
        rates = tuple(float(r) for r in rates)

    model = cfg["model"]
    _need(model["arch"] in ARCHS, "model.arch", f"must be one of {ARCHS}")
    hidden = model["hidden"]
    if hidden is not None:
        _need(isinstance(hidden, list) and all(isinstance(h, int) and h > 0 for h in hidden),
              "model.hidden", "expected a list of positive integers")
        hidden = tuple(hidden)

    tr = cfg["train"]
    _number(tr["lr"], "train.lr")
    _need(tr["lr"] > 0, "train.lr", "must be > 0")
    _number(tr["momentum"], "train.momentum", minimum=0)
    _number(tr["epochs"], "train.epochs", integer=True, minimum=1)
    _number(tr["batch_size"], "train.batch_size", integer=True, minimum=1)
    _number(tr["weight_decay"], "train.weight_decay", minimum=0)
    _need(tr["dtype"] in ("float32", "float64"), "train.dtype", "must be float32 or float64")
    try:
        train = TrainConfig(**tr, seed=int(cfg["experiment"]["base_seed"]))
    except (TypeError, ValueError) as exc:
        raise ConfigError("train", str(exc)) from exc

    ex = cfg["experiment"]
    trials = _number(ex["trials"], "experiment.trials", integer=True, minimum=1)
    base_seed = _number(ex["base_seed"], "experiment.base_seed", integer=True)
    _need(isinstance(ex["ablation"], bool), "experiment.ablation", "expected true or false")

    try:
        experiment = ExperimentConfig(
            poison_counts=tuple(counts), n_targets=n_targets, selection_mode=sel["mode"], trials=trials,
            base_seed=base_seed, target_labels=targets, threshold=threshold, trigger_kind=trig["kind"],
            external_dir=trig["external_dir"], pool_size=size, pool_file=pool_file,
            pool_ranges={k: tuple(v) for k, v in ranges.items()}, calibration_size=calib,
            arch=model["arch"], hidden=hidden, train=train, features=features,
        )
    except ValueError as exc:
        raise ConfigError("experiment", str(exc)) from exc
    return RunConfig(cfg, Path(ds["root"] or "."), tuple(labels), split, features, experiment, rates,
                     ex["ablation"], Path(cfg["output"]["dir"]))
