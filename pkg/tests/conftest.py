import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))  # for oracles.py

import textmage as tm


@pytest.fixture(scope="session")
def synth_dataset(tmp_path_factory):
    """Small synthetic dataset with two distinct captions per image."""
    out = tmp_path_factory.mktemp("synth")
    return tm.generate_synthetic_dataset(10, seed=5, out_dir=out)


@pytest.fixture(scope="session")
def overfit_dataset(tmp_path_factory):
    """8 images / 16 captions with duplicated captions (unambiguous targets)."""
    out = tmp_path_factory.mktemp("overfit")
    return tm.generate_synthetic_dataset(8, seed=7, out_dir=out, distinct_captions=False)
