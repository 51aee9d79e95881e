"""Acceptance suite: one PASS/FAIL line per criterion.

Criteria 6 and 7 train real models on the ten-keyword mini corpus and take
several minutes; they share clean models through the in-process cache.
"""

import json
import math
import time
from collections import Counter
from decimal import Decimal

import numpy as np
import pytest

from vsvc.cli import main
from vsvc.conversion import BaselinePulse, SpeakerProfile, apply_profile, baseline_pulse, pair_triggers
from vsvc.dataset import DEFAULT_KEYWORDS, DatasetManifest, ManifestEntry
from vsvc.evaluation import (
    ExperimentConfig,
    ExperimentData,
    ablation_compare,
    accuracy_variance,
    asr_from_predictions,
    clear_caches,
    run_experiment,
)
from vsvc.poisoning import plan_poison, poison_count, split_budget
from vsvc.training import ModelSpec, TrainConfig, cross_entropy, init_params, logits_of, loss_and_grad, param_layout
from vsvc.voiceprint import SelectionError, VoiceprintEmbedding, select_candidates, similarity_matrix

from .conftest import sine, utt
from .test_voiceprint import reference_select

STRONG_RANGES = {"pitch_semitones": (3.0, 4.0), "warp_alpha": (1.1, 1.15), "tilt_db_per_octave": (4.0, 6.0)}
E2E_TRAIN = TrainConfig(epochs=10)
E2E_TRIALS = 5


def report(capsys, n, ok, detail):
    with capsys.disabled():
        print(f"\ncriterion {n}: {'PASS' if ok else 'FAIL'} - {detail}")


# ---------------------------------------------------------------- 1

def test_criterion_1_selection_matches_reference(capsys):
    rng = np.random.default_rng(2024)
    start = time.perf_counter()
    mismatches = 0
    for _ in range(1000):
        k = int(rng.integers(2, 11))
        n = int(rng.integers(1, k + 1))
        ids = [f"P{i:03d}" for i in rng.permutation(k)]
        sm = similarity_matrix([VoiceprintEmbedding(i, rng.standard_normal(26)) for i in ids])
        t = float(np.quantile(sm.off_diagonal(), rng.uniform()))
        ref = reference_select(sm.ids, sm.values, n, t)
        try:
            got = list(select_candidates(sm, n, t).selected_ids)
        except SelectionError:
            got = None
        if got != (ref if len(ref) == n else None):
            mismatches += 1
    elapsed = time.perf_counter() - start
    ok = mismatches == 0 and elapsed < 10
    report(capsys, 1, ok, f"1000 instances, {mismatches} mismatches, {elapsed:.2f} s (limit 10 s)")
    assert ok


# ---------------------------------------------------------------- 2

def _manifest(n, labels=DEFAULT_KEYWORDS):
    entries = tuple(ManifestEntry(f"{labels[i % len(labels)]}/s{i:05d}_nohash_0", f"s{i:05d}",
                                  labels[i % len(labels)]) for i in range(n))
    return DatasetManifest("/synthetic", tuple(sorted(entries, key=lambda e: e.id)), tuple(labels))


def test_criterion_2_poison_counts(capsys):
    rates = ("0.002", "0.005", "0.0063", "0.01", "0.02")
    sizes = (1000, 21314, 23682)
    problems = []
    manifests = {n: _manifest(n) for n in sizes}
    profiles = [SpeakerProfile(f"P{i:03d}") for i in range(3)]
    for n in sizes:
        train = manifests[n]
        for text in rates:
            expected = int(Decimal(text) * n // 1)
            if poison_count(float(text), n) != expected:
                problems.append(f"count({text}, {n})")
            for n_targets in (1, 3):
                a = pair_triggers(profiles[:n_targets], list(DEFAULT_KEYWORDS[:n_targets]))
                plan = plan_poison(train, a, rate=float(text), seed=0)
                per = Counter(e.target_label for e in plan.entries)
                if plan.count != expected or [per[t] for t in a.targets] != split_budget(expected, n_targets):
                    problems.append(f"plan({text}, {n}, N={n_targets})")
    anchor = plan_poison(manifests[23682], pair_triggers(profiles[:1], ["yes"]), count=150, seed=0)
    anchor_ok = anchor.count == 150 and f"{100 * anchor.rate_p:.2f}" == "0.63"
    ok = not problems and anchor_ok
    report(capsys, 2, ok, f"{len(rates) * len(sizes)} (p, n) pairs, problems {problems or 'none'}; "
                          f"anchor 150 -> {100 * anchor.rate_p:.4f}%")
    assert ok


# ---------------------------------------------------------------- 3

def test_criterion_3_gradient_checks(capsys):
    start = time.perf_counter()
    rng = np.random.default_rng(7)
    worst = {}
    for arch in ("linear", "mlp", "tiny_cnn"):
        spec = ModelSpec(arch, (98, 40), 10)
        layout = param_layout(spec)
        offsets = np.cumsum([0] + [int(np.prod(s)) for _, s in layout])
        worst[arch] = 0.0
        for point in range(20):
            params = init_params(spec, point) + 0.01 * rng.standard_normal(offsets[-1])
            x = rng.standard_normal((4, 98, 40))
            y = rng.integers(0, 10, 4)
            _, g = loss_and_grad(spec, params, x, y)
            # two coordinates from every tensor so each layer is exercised
            coords = [int(rng.integers(lo, hi)) for lo, hi in zip(offsets[:-1], offsets[1:]) for _ in range(2)]
            for i in coords:
                up, down = params.copy(), params.copy()
                up[i] += 1e-6
                down[i] -= 1e-6
                num = (cross_entropy(logits_of(spec, up, x), y) - cross_entropy(logits_of(spec, down, x), y)) / 2e-6
                rel = abs(g[i] - num) / max(abs(g[i]) + abs(num), 1e-6)
                worst[arch] = max(worst[arch], rel)
    elapsed = time.perf_counter() - start
    ok = max(worst.values()) < 1e-4 and elapsed < 60
    detail = ", ".join(f"{a} {w:.2e}" for a, w in worst.items())
    report(capsys, 3, ok, f"max relative error {detail} (limit 1e-4); {elapsed:.1f} s (limit 60 s)")
    assert ok


# ---------------------------------------------------------------- 4

def test_criterion_4_metric_identities(capsys):
    ce = cross_entropy(np.zeros((5, 10)), np.arange(5))
    rng = np.random.default_rng(0)
    pairs = rng.uniform(0, 1, (1000, 2))
    symmetric = all(accuracy_variance(a, b) == accuracy_variance(b, a) for a, b in pairs)
    asr = asr_from_predictions(["t", "t", "x", "t"], "t")
    ok = abs(ce - math.log(10)) <= 1e-9 and symmetric and asr == 0.75
    report(capsys, 4, ok, f"CE uniform {ce:.12f} vs ln 10 {math.log(10):.12f}; AV symmetric {symmetric}; "
                          f"ASR 3-of-4 = {asr}")
    assert ok


# ---------------------------------------------------------------- 5

def _peak_hz(x):
    mag = np.abs(np.fft.rfft(x * np.hanning(len(x))))
    return float(np.argmax(mag)) * 16000 / len(x)


def test_criterion_5_signal_oracles(capsys):
    bin_hz = 16000 / 512
    x = 0.5 * sine(440.0) + 0.1 * np.random.default_rng(0).uniform(-1, 1, 16000)
    identity_err = float(np.max(np.abs(apply_profile(utt(x), SpeakerProfile("id")).samples - x)))
    pitch = _peak_hz(apply_profile(utt(0.5 * sine(440.0)), SpeakerProfile("p", pitch_semitones=2.0)).samples)
    warp = _peak_hz(apply_profile(utt(0.5 * sine(2000.0)), SpeakerProfile("w", warp_alpha=1.1)).samples)
    pulse = baseline_pulse(utt(np.zeros(16000)), **{k: v for k, v in vars(BaselinePulse()).items()})
    changed = int(np.count_nonzero(pulse.samples))
    ok = (identity_err <= 1e-3 and abs(pitch - 440 * 2 ** (2 / 12)) <= bin_hz
          and abs(warp - 2200) <= bin_hz and changed == 1600)
    report(capsys, 5, ok, f"identity err {identity_err:.2e}; pitch peak {pitch:.1f} Hz (want 493.9); "
                          f"warp peak {warp:.1f} Hz (want 2200); pulse changed {changed} samples")
    assert ok


# ---------------------------------------------------------------- 6

@pytest.fixture(scope="module")
def mini_data(mini_split):
    clear_caches()
    return ExperimentData(*mini_split)


@pytest.fixture(scope="module")
def e2e(mini_data):
    n_train = len(mini_data.train)
    low, high = poison_count(0.002, n_train), poison_count(0.02, n_train)
    cfg = ExperimentConfig(poison_counts=(0, low, high), n_targets=1, trials=E2E_TRIALS,
                           pool_ranges=STRONG_RANGES, train=E2E_TRAIN)
    start = time.perf_counter()
    result = run_experiment(cfg, mini_data)
    return result, low, high, time.perf_counter() - start


@pytest.mark.slow
def test_criterion_6_end_to_end_attack(capsys, e2e, mini_data):
    result, low, high, elapsed = e2e
    n_train = len(mini_data.train)
    trials = [t for t in result.trials if t.error is None]
    acc = [t.metrics[0].clean_accuracy_clean_model for t in trials]
    av = [t.metrics[c].accuracy_variance for t in trials for c in result.config.poison_counts if c <= n_train // 100]
    asr_high = [t.metrics[high].mean_asr for t in trials]
    wins = sum(t.metrics[high].mean_asr > t.metrics[low].mean_asr for t in trials)
    a = len(trials) == E2E_TRIALS and min(acc) >= 0.60
    b = max(av) <= 0.02
    c = float(np.mean(asr_high)) >= 0.85
    d = wins >= 4
    runtime = elapsed <= 600
    ok = a and b and c and d and runtime
    report(capsys, 6, ok,
           f"(a) min clean acc {min(acc):.3f} >= 0.60 {a}; (b) max AV at <=1% {max(av):.4f} <= 0.02 {b}; "
           f"(c) mean ASR at 2% ({high}) {np.mean(asr_high):.3f} >= 0.85 {c}; "
           f"(d) ASR(2%) > ASR(0.2%, {low}) in {wins}/5 {d}; runtime {elapsed:.0f} s <= 600 {runtime}")
    assert ok


@pytest.mark.slow
def test_clean_model_false_trigger_rate(e2e, capsys):
    # count 0 is the clean model; the bound applies to the aggregate over trials
    result = e2e[0]
    rates = [t.metrics[0].mean_asr for t in result.trials if t.error is None]
    mean = float(np.mean(rates))
    with capsys.disabled():
        print(f"\nclean-model false-trigger rate: mean {mean:.3f} (limit 0.2), "
              f"per trial {[round(r, 3) for r in rates]}")
    assert len(rates) == E2E_TRIALS and mean <= 0.2


# ---------------------------------------------------------------- 7

ABLATION_COUNT = 18


@pytest.mark.slow
def test_criterion_7_ablation(capsys, e2e, mini_data):
    cfg = ExperimentConfig(poison_counts=(ABLATION_COUNT,), n_targets=3, trials=E2E_TRIALS, pool_size=20,
                           train=E2E_TRAIN)
    vsvc, rand, _ = ablation_compare(cfg, mini_data)
    wins = 0
    pairs = []
    for a, b in zip(vsvc.trials, rand.trials):
        if a.error is None and b.error is None:
            va, vb = a.metrics[ABLATION_COUNT].mean_asr, b.metrics[ABLATION_COUNT].mean_asr
            wins += va >= vb
            pairs.append(f"{va:.3f}/{vb:.3f}")
    separated = all(t.error is None and t.selection.min_pairwise_distance > t.selection.threshold
                    for t in vsvc.trials)
    violated = sum(t.error is None and t.selection.min_pairwise_distance <= t.selection.threshold
                   for t in rand.trials)
    ok = wins >= 4 and separated and violated >= 1
    report(capsys, 7, ok, f"vsvc >= random at count {ABLATION_COUNT} in {wins}/5 trials (vsvc/random {pairs}); "
                          f"vsvc separated > T in all trials {separated}; random violations {violated}")
    assert ok


# ---------------------------------------------------------------- 8

def test_criterion_8_determinism(capsys, tmp_path, small_corpus):
    cfg = {
        "dataset": {"root": str(small_corpus), "labels": ["yes", "no", "up"]},
        "split": {"train_fraction": 0.75},
        "pool": {"size": 6, "calibration_size": 8},
        "selection": {"n_targets": 2},
        "poison": {"counts": [0, 2, 4]},
        "model": {"arch": "tiny_cnn"},
        "train": {"epochs": 2, "batch_size": 8},
        "experiment": {"trials": 2},
    }
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(cfg))
    outputs = []
    for run in ("a", "b"):
        clear_caches()
        code = main(["experiment", "--config", str(path), "--out", str(tmp_path / run), "--jobs", "1"])
        run_dir = next(d for d in (tmp_path / run).iterdir() if d.is_dir())
        outputs.append((code, (run_dir / "results.csv").read_bytes()))
    same = outputs[0][1] == outputs[1][1]
    rows = outputs[0][1].count(b"\n") - 1
    ok = outputs[0][0] == outputs[1][0] == 0 and same and rows > 0
    report(capsys, 8, ok, f"exit codes {outputs[0][0]}/{outputs[1][0]}; results.csv byte-identical {same} "
                          f"({rows} rows)")
    assert ok
