"""Attack metrics and the repeated-trial experiment driver.

A trial is: profile pool -> calibration embeddings -> trigger selection ->
target pairing -> one poisoned model per poison count (plus one clean model)
-> clean accuracy, attack success rate and accuracy variance. Trials are
independent and seeded ``base_seed + i``.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import tempfile
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .conversion import (
    DEFAULT_RANGES,
    BaselinePulse,
    ConversionProvider,
    TriggerAssignment,
    load_pool,
    make_profile_pool,
    pair_triggers,
    save_pool,
)
from .dataset import DatasetManifest
from .dsp import FeatureConfig, log_mel_array
from .poisoning import apply_poison, plan_poison
from .training import ModelSpec, TrainConfig, TrainedModel, fit
from .voiceprint import (
    SelectionResult,
    calibration_set,
    embed_profiles,
    random_select,
    select_candidates,
    similarity_matrix,
)

log = logging.getLogger(__name__)

SELECTION_MODES = ("vsvc", "random")
TRIGGER_KINDS = ("parametric", "baseline_pulse", "external_dir")
CSV_COLUMNS = ("trial", "mode", "n_targets", "poison_count", "target_label", "asr",
               "clean_acc_clean", "clean_acc_poisoned", "av", "seed")


class EvaluationError(ValueError):
    pass


class StageError(RuntimeError):
    """A trial failed; ``stage`` names the pipeline step that raised."""

    def __init__(self, stage: str, trial: int, cause: BaseException):
        self.stage = stage
        self.trial = trial
        super().__init__(f"[{stage}] trial {trial}: {cause}")


# ---------------------------------------------------------------- metrics

def features_of(dataset, ids: Sequence[str], cfg: FeatureConfig) -> np.ndarray:
    """Stacked log-mel features (float32) of ``ids`` loaded from a manifest or poisoned dataset."""
    out = np.empty((len(ids), cfg.n_frames, cfg.n_mels), dtype=np.float32)
    for i, uid in enumerate(ids):
        out[i] = log_mel_array(dataset.load(uid).samples, cfg)
    return out


def _label_indices(model: TrainedModel, labels: Sequence[str]) -> np.ndarray:
    index = {label: i for i, label in enumerate(model.label_map)}
    missing = sorted(set(labels) - set(index))
    if missing:
        raise EvaluationError(f"labels not in the model's label map: {missing}")
    return np.array([index[label] for label in labels], dtype=np.int64)


def accuracy_from_predictions(predicted: Sequence, truth: Sequence) -> float:
    if len(truth) == 0:
        raise EvaluationError("empty evaluation set")
    return float(np.mean(np.asarray(predicted) == np.asarray(truth)))


def asr_from_predictions(predicted: Sequence, target) -> float:
    """Fraction of triggered, non-target inputs predicted as ``target``."""
    if len(predicted) == 0:
        raise EvaluationError("no eligible triggered utterances")
    return float(np.mean(np.asarray(predicted) == target))


def accuracy_variance(acc_clean_model: float, acc_poisoned_model: float) -> float:
    for v in (acc_clean_model, acc_poisoned_model):
        if not 0.0 <= v <= 1.0:
            raise EvaluationError(f"accuracy {v} outside [0, 1]")
    return abs(acc_clean_model - acc_poisoned_model)


def clean_accuracy(model: TrainedModel, test: DatasetManifest, feat_cfg: FeatureConfig = FeatureConfig(),
                   features: np.ndarray | None = None) -> float:
    if not len(test):
        raise EvaluationError("empty test manifest")
    x = features_of(test, [e.id for e in test.entries], feat_cfg) if features is None else features
    truth = _label_indices(model, [e.label for e in test.entries])
    return accuracy_from_predictions(model.predict_indices(x), truth)


def triggered_features(test: DatasetManifest, target: str, trigger, provider: ConversionProvider,
                       feat_cfg: FeatureConfig) -> np.ndarray:
    """Features of every test utterance not labelled ``target``, converted with ``trigger``."""
    ids = [e.id for e in test.entries if e.label != target]
    if not ids:
        raise EvaluationError(f"no test utterances outside target {target!r}")
    out = np.empty((len(ids), feat_cfg.n_frames, feat_cfg.n_mels), dtype=np.float32)
    for i, uid in enumerate(ids):
        out[i] = log_mel_array(provider.convert(test.load(uid), trigger).samples, feat_cfg)
    return out


def attack_success_rate(model: TrainedModel, test: DatasetManifest, assignment: TriggerAssignment,
                        provider: ConversionProvider, feat_cfg: FeatureConfig = FeatureConfig(),
                        triggered: Mapping[str, np.ndarray] | None = None) -> dict[str, float]:
    """Per-target ASR over the full eligible test set."""
    missing = [t for t in assignment.targets if t not in model.label_map]
    if missing:
        raise EvaluationError(f"targets not in the model's label map: {missing}")
    result = {}
    for target, trigger in assignment.pairs:
        x = (triggered or {}).get(target)
        if x is None:
            x = triggered_features(test, target, trigger, provider, feat_cfg)
        result[target] = asr_from_predictions(model.predict_indices(x), model.label_map.index(target))
    return result


def semantic_preservation(model: TrainedModel, test: DatasetManifest, trigger,
                          provider: ConversionProvider, feat_cfg: FeatureConfig = FeatureConfig()) -> float:
    """Accuracy of ``model`` on the whole test set after conversion with ``trigger``."""
    ids = [e.id for e in test.entries]
    x = np.stack([log_mel_array(provider.convert(test.load(i), trigger).samples, feat_cfg) for i in ids])
    truth = _label_indices(model, [e.label for e in test.entries])
    return accuracy_from_predictions(model.predict_indices(x), truth)


@dataclass(frozen=True)
class AttackMetrics:
    per_target_asr: dict[str, float]
    clean_accuracy_poisoned_model: float
    clean_accuracy_clean_model: float

    def __post_init__(self):
        values = [*self.per_target_asr.values(), self.clean_accuracy_poisoned_model,
                  self.clean_accuracy_clean_model]
        if not self.per_target_asr:
            raise EvaluationError("metrics need at least one target")
        if any(not 0.0 <= v <= 1.0 for v in values):
            raise EvaluationError(f"fraction outside [0, 1] in {values}")

    @property
    def mean_asr(self) -> float:
        return float(np.mean(list(self.per_target_asr.values())))

    @property
    def accuracy_variance(self) -> float:
        return accuracy_variance(self.clean_accuracy_clean_model, self.clean_accuracy_poisoned_model)

    def to_json(self) -> dict:
        return {
            "per_target_asr": dict(self.per_target_asr),
            "mean_asr": self.mean_asr,
            "clean_accuracy_clean_model": self.clean_accuracy_clean_model,
            "clean_accuracy_poisoned_model": self.clean_accuracy_poisoned_model,
            "accuracy_variance": self.accuracy_variance,
        }


# ---------------------------------------------------------------- experiments

@dataclass(frozen=True)
class ExperimentConfig:
    poison_counts: tuple[int, ...] = (50, 100, 150, 200, 300, 400, 500)
    n_targets: int = 1
    selection_mode: str = "vsvc"
    trials: int = 5
    base_seed: int = 0
    target_labels: tuple[str, ...] | None = None
    threshold: float | None = None
    trigger_kind: str = "parametric"
    external_dir: str | None = None
    pool_size: int = 10
    pool_file: str | None = None
    pool_ranges: dict = field(default_factory=lambda: {k: tuple(v) for k, v in DEFAULT_RANGES.items()})
    calibration_size: int = 64
    arch: str = "tiny_cnn"
    hidden: tuple[int, ...] | None = None
    train: TrainConfig = TrainConfig()
    features: FeatureConfig = FeatureConfig()

    def __post_init__(self):
        if self.trials < 1:
            raise EvaluationError("trials must be >= 1")
        if self.n_targets < 1:
            raise EvaluationError("n_targets must be >= 1")
        if self.selection_mode not in SELECTION_MODES:
            raise EvaluationError(f"selection_mode must be one of {SELECTION_MODES}")
        if self.trigger_kind not in TRIGGER_KINDS:
            raise EvaluationError(f"trigger_kind must be one of {TRIGGER_KINDS}")
        if self.trigger_kind == "baseline_pulse" and self.n_targets != 1:
            raise EvaluationError("the baseline pulse supports a single target only")
        if self.trigger_kind == "external_dir" and not self.external_dir:
            raise EvaluationError("external_dir trigger kind needs external_dir")
        if any(c < 0 for c in self.poison_counts):
            raise EvaluationError("poison counts must be non-negative")
        if len(set(self.poison_counts)) != len(self.poison_counts):
            raise EvaluationError("duplicate poison counts")
        if self.threshold is not None and self.threshold < 0:
            raise EvaluationError("threshold must be >= 0")
        if self.target_labels is not None and len(self.target_labels) != self.n_targets:
            raise EvaluationError(f"{len(self.target_labels)} target labels for n_targets={self.n_targets}")
        if self.pool_file is None and self.pool_size < self.n_targets:
            raise EvaluationError(f"pool of {self.pool_size} cannot supply {self.n_targets} triggers")
        self.features.validate()

    def model_spec(self, n_classes: int) -> ModelSpec:
        return ModelSpec(self.arch, (self.features.n_frames, self.features.n_mels), n_classes, self.hidden)

    def provider(self) -> ConversionProvider:
        if self.trigger_kind == "external_dir":
            return ConversionProvider("external_dir", self.external_dir)
        return ConversionProvider("parametric")

    def with_mode(self, mode: str) -> "ExperimentConfig":
        return replace(self, selection_mode=mode)

    def to_json(self) -> dict:
        d = asdict(self)
        d["poison_counts"] = list(self.poison_counts)
        d["pool_ranges"] = {k: list(v) for k, v in self.pool_ranges.items()}
        return d


@dataclass(frozen=True)
class ExperimentData:
    train: DatasetManifest
    test: DatasetManifest

    def __post_init__(self):
        if not len(self.train) or not len(self.test):
            raise EvaluationError("train and test manifests must be non-empty")
        if self.train.label_set != self.test.label_set:
            raise EvaluationError("train and test label sets differ")


@dataclass
class TrialRecord:
    trial: int
    seed: int
    mode: str
    selection: SelectionResult | None = None
    targets: tuple[str, ...] = ()
    metrics: dict[int, AttackMetrics] = field(default_factory=dict)
    error: str | None = None

    def to_json(self) -> dict:
        return {
            "trial": self.trial,
            "seed": self.seed,
            "mode": self.mode,
            "selection": None if self.selection is None else self.selection.to_json(),
            "targets": list(self.targets),
            "metrics": {str(c): m.to_json() for c, m in self.metrics.items()},
            "error": self.error,
        }


@dataclass
class TrialResult:
    config: ExperimentConfig
    trials: list[TrialRecord]

    @property
    def complete(self) -> bool:
        return all(t.error is None for t in self.trials)

    @property
    def failures(self) -> list[str]:
        return [t.error for t in self.trials if t.error is not None]

    def aggregate(self) -> dict:
        """Mean and population standard deviation per metric and count over successful trials."""
        out = {}
        ok = [t for t in self.trials if t.error is None]
        for count in self.config.poison_counts:
            series = {
                "mean_asr": [t.metrics[count].mean_asr for t in ok],
                "clean_accuracy_clean_model": [t.metrics[count].clean_accuracy_clean_model for t in ok],
                "clean_accuracy_poisoned_model": [t.metrics[count].clean_accuracy_poisoned_model for t in ok],
                "accuracy_variance": [t.metrics[count].accuracy_variance for t in ok],
            }
            out[str(count)] = {
                name: {"mean": float(np.mean(v)) if v else None, "std": float(np.std(v)) if v else None}
                for name, v in series.items()
            }
        return out

    def rows(self) -> list[dict]:
        rows = []
        for t in self.trials:
            if t.error is not None:
                continue
            for count in self.config.poison_counts:
                m = t.metrics[count]
                for target in t.targets:
                    rows.append({
                        "trial": t.trial, "mode": t.mode, "n_targets": self.config.n_targets,
                        "poison_count": count, "target_label": target,
                        "asr": m.per_target_asr[target],
                        "clean_acc_clean": m.clean_accuracy_clean_model,
                        "clean_acc_poisoned": m.clean_accuracy_poisoned_model,
                        "av": m.accuracy_variance, "seed": t.seed,
                    })
        return rows

    def to_json(self) -> dict:
        return {
            "mode": self.config.selection_mode,
            "complete": self.complete,
            "failures": self.failures,
            "trials": [t.to_json() for t in self.trials],
            "aggregate": self.aggregate(),
        }


def results_csv(rows: Sequence[dict]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_COLUMNS)
    for r in rows:
        writer.writerow([f"{r[c]:.6f}" if isinstance(r[c], float) else r[c] for c in CSV_COLUMNS])
    return buf.getvalue()


# clean models and clean train features are shared between paired runs in one process
_CLEAN_CACHE: dict[tuple, TrainedModel] = {}
_FEATURE_CACHE: dict[tuple, np.ndarray] = {}


def _cached_features(dataset: DatasetManifest, cfg: FeatureConfig) -> np.ndarray:
    key = (str(dataset.root), dataset.checksum, json.dumps(cfg.to_json(), sort_keys=True))
    if key not in _FEATURE_CACHE:
        if len(_FEATURE_CACHE) >= 4:
            _FEATURE_CACHE.pop(next(iter(_FEATURE_CACHE)))
        _FEATURE_CACHE[key] = features_of(dataset, [e.id for e in dataset.entries], cfg)
    return _FEATURE_CACHE[key]


def _clean_model(spec: ModelSpec, data: ExperimentData, x: np.ndarray, y: np.ndarray,
                 cfg: ExperimentConfig, train_cfg: TrainConfig) -> TrainedModel:
    key = (str(data.train.root), data.train.checksum, json.dumps(spec.to_json()),
           json.dumps(asdict(train_cfg), sort_keys=True), json.dumps(cfg.features.to_json(), sort_keys=True))
    if key not in _CLEAN_CACHE:
        if len(_CLEAN_CACHE) >= 16:
            _CLEAN_CACHE.pop(next(iter(_CLEAN_CACHE)))
        _CLEAN_CACHE[key] = fit(spec, x, y, data.train.label_set, train_cfg)
    return _CLEAN_CACHE[key]


def clear_caches() -> None:
    _CLEAN_CACHE.clear()
    _FEATURE_CACHE.clear()


def pick_targets(cfg: ExperimentConfig, labels: Sequence[str], seed: int) -> list[str]:
    if cfg.target_labels is not None:
        unknown = [t for t in cfg.target_labels if t not in labels]
        if unknown:
            raise EvaluationError(f"target labels not in the label set: {unknown}")
        return list(cfg.target_labels)
    if cfg.n_targets > len(labels):
        raise EvaluationError(f"{cfg.n_targets} targets but only {len(labels)} labels")
    rng = np.random.default_rng([seed, 2])
    picks = sorted(rng.choice(len(labels), size=cfg.n_targets, replace=False))
    return [labels[i] for i in picks]


def select_triggers(cfg: ExperimentConfig, data: ExperimentData, provider: ConversionProvider,
                     seed: int, trial_dir: Path | None):
    """Return (selection, triggers) for one trial."""
    if cfg.trigger_kind == "baseline_pulse":
        pulse = BaselinePulse()
        return SelectionResult((pulse.trigger_id,), None, "baseline"), [pulse]
    if cfg.pool_file is not None:
        pool = load_pool(cfg.pool_file)
    else:
        pool = make_profile_pool(cfg.pool_size, seed, cfg.pool_ranges)
    if len(pool) < cfg.n_targets:
        raise EvaluationError(f"pool of {len(pool)} cannot supply {cfg.n_targets} triggers")
    by_id = {p.id: p for p in pool}
    calib_ids = calibration_set(data.train, min(cfg.calibration_size, len(data.train)), seed)
    calib = [data.train.load(i) for i in calib_ids]
    sm = similarity_matrix(embed_profiles(pool, calib, provider.convert, cfg.features))
    threshold = sm.median_threshold() if cfg.threshold is None else float(cfg.threshold)
    ids = sorted(by_id)
    if cfg.selection_mode == "random":
        selection = random_select(ids, cfg.n_targets, seed, sm, threshold)
    elif cfg.n_targets == 1:
        # a single trigger has nothing to be distinct from; it is a uniform pick
        single = random_select(ids, 1, seed, sm, threshold)
        selection = SelectionResult(single.selected_ids, threshold, "vsvc", None)
    else:
        selection = select_candidates(sm, cfg.n_targets, threshold)
    if trial_dir is not None:
        save_pool(trial_dir / "pool.json", pool)
        (trial_dir / "similarity.csv").write_text(sm.to_csv())
        (trial_dir / "calibration.json").write_text(json.dumps(calib_ids, indent=1) + "\n")
    return selection, [by_id[i] for i in selection.selected_ids]


def run_trial(cfg: ExperimentConfig, data: ExperimentData, trial: int, out_dir: str | Path | None = None,
              workdir: str | Path | None = None, stamp: Mapping | None = None) -> TrialRecord:
    """One seeded trial; raises StageError naming the failing stage.

    ``stamp`` is extra metadata (e.g. a config hash) embedded in every JSON artifact and checkpoint.
    """
    stamp = dict(stamp or {})
    seed = cfg.base_seed + trial
    record = TrialRecord(trial, seed, cfg.selection_mode)
    trial_dir = None
    if out_dir is not None:
        trial_dir = Path(out_dir) / cfg.selection_mode / f"trial_{trial:02d}"
        trial_dir.mkdir(parents=True, exist_ok=True)
    provider = cfg.provider()
    labels = list(data.train.label_set)
    spec = cfg.model_spec(len(labels))
    train_cfg = replace(cfg.train, seed=seed)
    stage = "select"
    with tempfile.TemporaryDirectory(dir=workdir) as scratch:
        try:
            selection, triggers = select_triggers(cfg, data, provider, seed, trial_dir)
            record.selection = selection
            stage = "pair"
            targets = pick_targets(cfg, labels, seed)
            assignment = pair_triggers(triggers, targets)
            record.targets = tuple(targets)
            if trial_dir is not None:
                selection.save(trial_dir / "selection.json", **stamp)
                (trial_dir / "assignment.json").write_text(
                    json.dumps({**stamp, **assignment.to_json()}, indent=1) + "\n")

            stage = "features"
            x_train = _cached_features(data.train, cfg.features)
            y_train = np.array([labels.index(e.label) for e in data.train.entries])
            x_test = _cached_features(data.test, cfg.features)
            y_test = np.array([labels.index(e.label) for e in data.test.entries])
            triggered = {t: triggered_features(data.test, t, trig, provider, cfg.features)
                         for t, trig in assignment.pairs}

            stage = "train_clean"
            clean = _clean_model(spec, data, x_train, y_train, cfg, train_cfg)
            acc_clean = accuracy_from_predictions(clean.predict_indices(x_test), y_test)
            if trial_dir is not None:
                clean.save(trial_dir / "clean.ckpt", **stamp)

            row_of = {e.id: i for i, e in enumerate(data.train.entries)}
            for count in cfg.poison_counts:
                stage = f"poison[{count}]"
                plan = plan_poison(data.train, assignment, count=count, seed=seed)
                if count == 0:
                    model = clean
                else:
                    poison_dir = (trial_dir or Path(scratch)) / f"count_{count}"
                    poisoned = apply_poison(plan, provider, data.train, assignment, poison_dir)
                    x = x_train.copy()
                    y = y_train.copy()
                    for e in plan.entries:
                        x[row_of[e.utterance_id]] = log_mel_array(
                            poisoned.load(e.utterance_id).samples, cfg.features)
                        y[row_of[e.utterance_id]] = labels.index(e.target_label)
                    stage = f"train[{count}]"
                    model = fit(spec, x, y, labels, train_cfg)
                if trial_dir is not None:
                    plan.save(trial_dir / f"plan_{count}.json", **stamp)
                stage = f"evaluate[{count}]"
                acc = accuracy_from_predictions(model.predict_indices(x_test), y_test)
                asr = attack_success_rate(model, data.test, assignment, provider, cfg.features, triggered)
                record.metrics[count] = AttackMetrics(asr, acc, acc_clean)
                log.info("trial %d %s count %d: asr %.3f acc %.3f (clean %.3f)", trial,
                         cfg.selection_mode, count, record.metrics[count].mean_asr, acc, acc_clean)
        except Exception as exc:
            raise StageError(stage, trial, exc) from exc
    return record


def _run_trial_safe(args) -> TrialRecord:
    cfg, data, trial, out_dir, stamp = args
    try:
        return run_trial(cfg, data, trial, out_dir, stamp=stamp)
    except StageError as exc:
        log.error("%s", exc)
        return TrialRecord(trial, cfg.base_seed + trial, cfg.selection_mode, error=str(exc))


def run_experiment(cfg: ExperimentConfig, data: ExperimentData, out_dir: str | Path | None = None,
                   jobs: int = 1, stamp: Mapping | None = None) -> TrialResult:
    """All trials; a failing trial is recorded and the rest still run."""
    tasks = [(cfg, data, i, out_dir, stamp) for i in range(cfg.trials)]
    if jobs > 1 and cfg.trials > 1:
        with ProcessPoolExecutor(max_workers=min(jobs, cfg.trials)) as pool:
            records = list(pool.map(_run_trial_safe, tasks))
    else:
        records = [_run_trial_safe(t) for t in tasks]
    result = TrialResult(cfg, records)
    if out_dir is not None:
        write_results(result, Path(out_dir) / cfg.selection_mode, stamp)
    return result


def write_results(result: TrialResult, directory: Path, stamp: Mapping | None = None) -> None:
    directory.mkdir(parents=True, exist_ok=True)
    (directory / "results.csv").write_text(results_csv(result.rows()))
    (directory / "aggregate.json").write_text(
        json.dumps({**(stamp or {}), **result.to_json()}, indent=1) + "\n")


def ablation_compare(cfg: ExperimentConfig, data: ExperimentData, out_dir: str | Path | None = None,
                     jobs: int = 1, stamp: Mapping | None = None
                     ) -> tuple[TrialResult, TrialResult, list[dict]]:
    """Paired vsvc and random runs with identical seeds; returns both and a side-by-side table."""
    vsvc = run_experiment(cfg.with_mode("vsvc"), data, out_dir, jobs, stamp)
    rand = run_experiment(cfg.with_mode("random"), data, out_dir, jobs, stamp)
    table = []
    for result in (vsvc, rand):
        agg = result.aggregate()
        for count in cfg.poison_counts:
            a = agg[str(count)]
            table.append({
                "mode": result.config.selection_mode,
                "poison_count": count,
                "mean_asr": a["mean_asr"]["mean"],
                "std_asr": a["mean_asr"]["std"],
                "mean_av": a["accuracy_variance"]["mean"],
                "trials_ok": sum(t.error is None for t in result.trials),
            })
    return vsvc, rand, table


def ablation_csv(table: Sequence[dict]) -> str:
    cols = ("mode", "poison_count", "mean_asr", "std_asr", "mean_av", "trials_ok")
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(cols)
    for r in table:
        writer.writerow(["" if r[c] is None else f"{r[c]:.6f}" if isinstance(r[c], float) else r[c]
                         for c in cols])
    return buf.getvalue()
