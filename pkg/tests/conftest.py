import numpy as np
import pytest

from vsvc.dataset import DEFAULT_KEYWORDS, SplitSpec, Utterance, scan_corpus, split_manifest
from vsvc.synth import generate_corpus


def sine(freq, amplitude=0.5, n=16000, sr=16000, phase=0.0):
    t = np.arange(n) / sr
    return amplitude * np.sin(2 * np.pi * freq * t + phase)


def utt(samples, uid="yes/abc_nohash_0", label="yes", speaker="abc"):
    return Utterance(uid, speaker, label, np.asarray(samples, dtype=float))


@pytest.fixture(scope="session")
def small_corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("small")
    generate_corpus(root, labels=("yes", "no", "up"), clips_per_label=12, n_speakers=6, seed=3)
    return root


@pytest.fixture(scope="session")
def small_split(small_corpus):
    m = scan_corpus(small_corpus, ["yes", "no", "up"])
    return m, *split_manifest(m, SplitSpec(0.75, 0))


@pytest.fixture(scope="session")
def mini_corpus(tmp_path_factory):
    """Ten keywords x 200 clips, the end-to-end subset."""
    root = tmp_path_factory.mktemp("mini")
    generate_corpus(root, labels=DEFAULT_KEYWORDS, clips_per_label=200, seed=0)
    return root


@pytest.fixture(scope="session")
def mini_split(mini_corpus):
    m = scan_corpus(mini_corpus, DEFAULT_KEYWORDS)
    return split_manifest(m, SplitSpec(0.9, 0))
