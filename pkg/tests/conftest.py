"""Pytest fixtures shared across all test files."""

import numpy as np
import pytest

from ehr import Dataset, DdiMatrix, EntityVocab, PatientRecord, Split, SyntheticConfig, Visit, generate_synthetic
from models import Hyperparams
from stratify import BucketSet, StratParams, build_buckets, count_cooccurrence


@pytest.fixture(autouse=True)
def isolated_log_dir(monkeypatch, tmp_path):
    """Keep any log output from a test inside its temporary directory."""
    monkeypatch.setenv("STRATMED_LOG_DIR", str(tmp_path / "logs"))


@pytest.fixture
def rng():
    """Seeded generator for test inputs."""
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_dataset():
    """Six hand-built patients over 5 diagnoses, 3 procedures, and 4 medications."""
    vocab = EntityVocab(num_diag=5, num_proc=3, num_med=4)
    patients = (
        PatientRecord("a", (Visit.of([0, 1], [0], [0, 1]), Visit.of([1, 2], [], [1, 2]))),
        PatientRecord("b", (Visit.of([0], [1], [0]),)),
        PatientRecord("c", (Visit.of([2, 3], [2], [2, 3]), Visit.of([3], [2], [3]))),
        PatientRecord("d", (Visit.of([0, 4], [0, 1], [0, 1]),)),
        PatientRecord("e", (Visit.of([1], [], [1]), Visit.of([1, 4], [1], [1, 3]))),
        PatientRecord("f", (Visit.of([2], [0], [2]),)),
    )
    split = {
        "a": Split.TRAIN,
        "b": Split.TRAIN,
        "c": Split.TRAIN,
        "d": Split.TRAIN,
        "e": Split.VAL,
        "f": Split.TEST,
    }
    return Dataset(vocab, patients, split)


@pytest.fixture
def tiny_ddi():
    """One interaction between medications 0 and 1."""
    return DdiMatrix.from_edges(4, [(0, 1)])


@pytest.fixture
def tiny_hyper():
    """Small, fast model settings."""
    return Hyperparams(dim=4, epochs=2, pretrain_epochs=1, lr=0.01, dropout=0.0, seed=3)


@pytest.fixture
def tiny_buckets(tiny_dataset):
    """Stratified buckets over the tiny dataset's train split."""
    params = StratParams(q_mm=2, q_md=2, q_mp=2, theta_fraction=0.2)
    return build_buckets(count_cooccurrence(tiny_dataset, Split.TRAIN), params)


@pytest.fixture
def small_synthetic():
    """A 40-patient synthetic corpus with a small vocabulary."""
    config = SyntheticConfig(
        num_patients=40,
        num_diag=12,
        num_proc=6,
        num_med=8,
        diag_min=1,
        diag_max=3,
        proc_min=0,
        proc_max=2,
        meds_per_diag=2,
        seed=5,
    )
    return generate_synthetic(config)


@pytest.fixture
def small_params():
    """Stratification settings sized for the small synthetic vocabulary."""
    return StratParams(q_mm=4, q_md=6, q_mp=4, theta_fraction=0.02)


@pytest.fixture
def small_buckets(small_synthetic, small_params) -> BucketSet:
    """Buckets built on the small synthetic corpus."""
    dataset, _ = small_synthetic
    return build_buckets(count_cooccurrence(dataset, Split.TRAIN), small_params)
