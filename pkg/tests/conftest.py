import numpy as np
import pytest

from src.dsp import make_config
from src.mixgen import ManifestConfig, build_manifest, synthesize_toy_corpus


@pytest.fixture
def stft_config():
    return make_config(256, 128)


@pytest.fixture
def small_config():
    return make_config(16, 8)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def toy_corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("corpus")
    synthesize_toy_corpus(str(root), num_speakers=4, utterances_per_speaker=5, duration=0.25, seed=7)
    return str(root)


@pytest.fixture(scope="session")
def toy_manifest(toy_corpus):
    config = ManifestConfig(num_speakers=2, counts={"train": 6, "valid": 2, "test": 3}, seed=3)
    return build_manifest(toy_corpus, config)
