"""Timbre-trigger backdoor attacks on keyword spotting, at desk scale."""

from .conversion import BaselinePulse, ConversionProvider, SpeakerProfile, apply_profile, baseline_pulse
from .dataset import DatasetManifest, SplitSpec, Utterance, read_wav, scan_corpus, split_manifest, write_wav
from .dsp import FeatureConfig, log_mel, mfcc, stft_power
from .evaluation import AttackMetrics, ExperimentConfig, ablation_compare, run_experiment
from .poisoning import PoisonPlan, apply_poison, plan_poison, poison_count
from .training import ModelSpec, TrainConfig, TrainedModel, fit
from .voiceprint import SimilarityMatrix, random_select, select_candidates

__version__ = "0.1.0"

__all__ = [
    "AttackMetrics", "BaselinePulse", "ConversionProvider", "DatasetManifest", "ExperimentConfig",
    "FeatureConfig", "ModelSpec", "PoisonPlan", "SimilarityMatrix", "SpeakerProfile", "SplitSpec",
    "TrainConfig", "TrainedModel", "Utterance", "ablation_compare", "apply_poison", "apply_profile",
    "baseline_pulse", "fit", "log_mel", "mfcc", "plan_poison", "poison_count", "random_select",
    "read_wav", "run_experiment", "scan_corpus", "select_candidates", "split_manifest", "stft_power",
    "write_wav",
]
