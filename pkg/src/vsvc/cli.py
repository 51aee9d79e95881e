"""Command-line entry point: ``vsvc <subcommand>``.

Every subcommand reads the same JSON config (``--config``) with ``--set``
overrides and writes under ``<out>/<config hash>/``. Exit codes: 0 success,
1 invalid configuration, 2 runtime failure, 3 experiment finished with
failed trials.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .config import ConfigError, RunConfig, load_config, validate
from .conversion import TriggerAssignment, pair_triggers
from .dataset import DatasetManifest, scan_corpus, split_manifest
from .evaluation import (
    AttackMetrics,
    ExperimentData,
    StageError,
    TrialRecord,
    TrialResult,
    ablation_compare,
    ablation_csv,
    accuracy_from_predictions,
    attack_success_rate,
    features_of,
    pick_targets,
    results_csv,
    run_experiment,
    select_triggers,
    write_results,
)
from .poisoning import PoisonedDataset, apply_poison, plan_poison
from .training import TrainedModel, fit

log = logging.getLogger("vsvc")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME, EXIT_PARTIAL = 0, 1, 2, 3


class RuntimeFailure(RuntimeError):
    def __init__(self, stage: str, message: str):
        self.stage = stage
        super().__init__(f"[{stage}] {message}")


def _write_json(path: Path, data: dict, rc: RunConfig) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps({"config_hash": rc.hash, **data}, indent=1) + "\n")


def _prepare_run_dir(rc: RunConfig) -> Path:
    run_dir = rc.run_dir
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "config.json").write_text(
        json.dumps({"config_hash": rc.hash, "config": rc.raw}, indent=1, sort_keys=True) + "\n")
    return run_dir


def _manifests(rc: RunConfig) -> tuple[DatasetManifest, DatasetManifest, DatasetManifest]:
    try:
        full = scan_corpus(rc.root, rc.labels)
        train, test = split_manifest(full, rc.split)
    except ValueError as exc:
        raise RuntimeFailure("scan", str(exc)) from exc
    return full, train, test


def _selection(rc: RunConfig, train: DatasetManifest, test: DatasetManifest, run_dir: Path):
    cfg = rc.experiment
    data = ExperimentData(train, test)
    try:
        selection, triggers = select_triggers(cfg, data, cfg.provider(), cfg.base_seed, run_dir)
        targets = pick_targets(cfg, list(train.label_set), cfg.base_seed)
        assignment = pair_triggers(triggers, targets)
    except Exception as exc:
        raise RuntimeFailure("select", str(exc)) from exc
    return selection, assignment


def cmd_scan(rc: RunConfig, run_dir: Path) -> int:
    full, train, test = _manifests(rc)
    for name, m in (("manifest", full), ("train", train), ("test", test)):
        _write_json(run_dir / f"{name}.json", m.to_json(), rc)
    print(f"{len(full)} utterances, {len(full.label_set)} labels -> {run_dir / 'manifest.json'}")
    if full.metadata.get("unparsable_filenames"):
        print(f"warning: {full.metadata['unparsable_filenames']} filenames without _nohash_", file=sys.stderr)
    return EXIT_OK


def cmd_select(rc: RunConfig, run_dir: Path) -> int:
    _, train, test = _manifests(rc)
    selection, assignment = _selection(rc, train, test, run_dir)
    _write_json(run_dir / "selection.json", selection.to_json(), rc)
    _write_json(run_dir / "assignment.json", assignment.to_json(), rc)
    print(f"selected {', '.join(selection.selected_ids)} for {', '.join(assignment.targets)}")
    return EXIT_OK


def _poison_all(rc: RunConfig, train, assignment, run_dir: Path) -> dict[int, PoisonedDataset]:
    cfg = rc.experiment
    out = {}
    for count in rc.counts_for(len(train)):
        try:
            plan = plan_poison(train, assignment, count=count, seed=cfg.base_seed)
            out[count] = apply_poison(plan, cfg.provider(), train, assignment, run_dir / f"count_{count}")
        except Exception as exc:
            raise RuntimeFailure(f"poison[{count}]", str(exc)) from exc
        _write_json(run_dir / f"count_{count}" / "plan.json", plan.to_json(), rc)
    return out


def cmd_poison(rc: RunConfig, run_dir: Path) -> int:
    _, train, test = _manifests(rc)
    _, assignment = _selection(rc, train, test, run_dir)
    _write_json(run_dir / "assignment.json", assignment.to_json(), rc)
    for count, ds in _poison_all(rc, train, assignment, run_dir).items():
        print(f"count {count}: {ds.plan.count} poisoned files in {run_dir / f'count_{count}' / 'poisoned'}")
    return EXIT_OK


def _train_features(rc: RunConfig, dataset) -> tuple[np.ndarray, np.ndarray]:
    m = dataset.manifest if isinstance(dataset, PoisonedDataset) else dataset
    labels = list(m.label_set)
    x = features_of(dataset, [e.id for e in m.entries], rc.features)
    return x, np.array([labels.index(e.label) for e in m.entries])


def cmd_train(rc: RunConfig, run_dir: Path) -> int:
    _, train, test = _manifests(rc)
    _, assignment = _selection(rc, train, test, run_dir)
    _write_json(run_dir / "assignment.json", assignment.to_json(), rc)
    cfg = rc.experiment
    spec = cfg.model_spec(len(train.label_set))
    train_cfg = cfg.train
    datasets: dict[str, object] = {"clean": train}
    for count, ds in _poison_all(rc, train, assignment, run_dir).items():
        if count:
            datasets[f"count_{count}"] = ds
    for name, ds in datasets.items():
        try:
            x, y = _train_features(rc, ds)
            model = fit(spec, x, y, train.label_set, train_cfg)
        except Exception as exc:
            raise RuntimeFailure(f"train[{name}]", str(exc)) from exc
        path = run_dir / "models" / f"{name}.ckpt"
        path.parent.mkdir(parents=True, exist_ok=True)
        model.save(path, config_hash=rc.hash)
        print(f"{name}: final loss {model.train_log[-1][0]:.4f} -> {path}")
    return EXIT_OK


def cmd_eval(rc: RunConfig, run_dir: Path) -> int:
    _, train, test = _manifests(rc)
    assignment_path = run_dir / "assignment.json"
    if not assignment_path.is_file():
        raise RuntimeFailure("eval", f"missing {assignment_path}; run `train` first")
    assignment = TriggerAssignment.from_json(json.loads(assignment_path.read_text()))
    cfg = rc.experiment
    labels = list(test.label_set)
    x_test = features_of(test, [e.id for e in test.entries], rc.features)
    y_test = np.array([labels.index(e.label) for e in test.entries])

    def load(name: str) -> TrainedModel:
        path = run_dir / "models" / f"{name}.ckpt"
        if not path.is_file():
            raise RuntimeFailure("eval", f"missing checkpoint {path}; run `train` first")
        return TrainedModel.load(path)

    clean = load("clean")
    acc_clean = accuracy_from_predictions(clean.predict_indices(x_test), y_test)
    record = TrialRecord(0, cfg.base_seed, cfg.selection_mode, targets=tuple(assignment.targets))
    counts = rc.counts_for(len(train))
    for count in counts:
        model = clean if count == 0 else load(f"count_{count}")
        acc = accuracy_from_predictions(model.predict_indices(x_test), y_test)
        try:
            asr = attack_success_rate(model, test, assignment, cfg.provider(), rc.features)
        except Exception as exc:
            raise RuntimeFailure(f"evaluate[{count}]", str(exc)) from exc
        record.metrics[count] = AttackMetrics(asr, acc, acc_clean)
    result = TrialResult(_with_counts(cfg, counts), [record])
    (run_dir / "results.csv").write_text(results_csv(result.rows()))
    _write_json(run_dir / "aggregate.json", result.to_json(), rc)
    print(results_csv(result.rows()), end="")
    return EXIT_OK


def _with_counts(cfg, counts):
    return replace(cfg, poison_counts=tuple(counts))


def cmd_experiment(rc: RunConfig, run_dir: Path, jobs: int) -> int:
    _, train, test = _manifests(rc)
    cfg = _with_counts(rc.experiment, rc.counts_for(len(train)))
    data = ExperimentData(train, test)
    stamp = {"config_hash": rc.hash}
    if rc.ablation:
        vsvc, rand, table = ablation_compare(cfg, data, run_dir, jobs, stamp)
        results = [vsvc, rand]
        (run_dir / "ablation.csv").write_text(ablation_csv(table))
    else:
        results = [run_experiment(cfg, data, run_dir, jobs, stamp)]
    rows = [row for r in results for row in r.rows()]
    (run_dir / "results.csv").write_text(results_csv(rows))
    _write_json(run_dir / "aggregate.json",
                {r.config.selection_mode: r.to_json() for r in results}, rc)
    failures = [f for r in results for f in r.failures]
    for r in results:
        write_results(r, run_dir / r.config.selection_mode, stamp)
    print(f"{len(rows)} result rows -> {run_dir / 'results.csv'}")
    if rc.ablation:
        print(ablation_csv(table), end="")
    if failures:
        for f in failures:
            print(f"trial failed: {f}", file=sys.stderr)
        return EXIT_PARTIAL
    return EXIT_OK


def cmd_synth(args) -> int:
    from .synth import generate_corpus
    labels = args.labels.split(",") if args.labels else None
    kwargs = {"labels": labels} if labels else {}
    root = generate_corpus(args.root, clips_per_label=args.clips, n_speakers=args.speakers,
                           seed=args.synth_seed, **kwargs)
    print(f"wrote synthetic corpus to {root}")
    return EXIT_OK


COMMANDS = ("scan", "select", "poison", "train", "eval", "experiment")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run configuration")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="K=V",
                        help="override a config value, e.g. selection.threshold=2.5 (repeatable)")
    common.add_argument("--jobs", type=int, default=os.cpu_count() or 1,
                        help="parallel trials for `experiment` (default: CPU count)")
    common.add_argument("--out", help="output directory (default: config output.dir)")
    common.add_argument("--seed", type=int, help="base seed (overrides experiment.base_seed)")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="vsvc", description="Timbre-trigger backdoor experiments for keyword spotting.")
    sub = parser.add_subparsers(dest="command", required=True)
    helps = {
        "scan": "scan the corpus and write manifest/train/test JSON",
        "select": "embed the profile pool and select distinct triggers",
        "poison": "plan and materialise poisoned audio for each count",
        "train": "train the clean model and one poisoned model per count",
        "eval": "evaluate trained checkpoints (clean accuracy, ASR, AV)",
        "experiment": "repeated-trial sweep plus the vsvc/random ablation",
    }
    for name in COMMANDS:
        sub.add_parser(name, parents=[common], help=helps[name])
    synth = sub.add_parser("synth", help="write a synthetic keyword corpus")
    synth.add_argument("root")
    synth.add_argument("--clips", type=int, default=200, help="clips per label")
    synth.add_argument("--speakers", type=int, default=60)
    synth.add_argument("--labels", help="comma-separated labels (default: the ten command words)")
    synth.add_argument("--seed", dest="synth_seed", type=int, default=0)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "synth":
        return cmd_synth(args)
    try:
        raw = load_config(args.config, args.overrides, args.seed, args.out)
        rc = validate(raw)
        if args.jobs < 1:
            raise ConfigError("--jobs", "must be >= 1")
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        run_dir = _prepare_run_dir(rc)
        if args.command == "experiment":
            return cmd_experiment(rc, run_dir, args.jobs)
        return {"scan": cmd_scan, "select": cmd_select, "poison": cmd_poison,
                "train": cmd_train, "eval": cmd_eval}[args.command](rc, run_dir)
    except (RuntimeFailure, StageError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except OSError as exc:
        print(f"error: [io] {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
