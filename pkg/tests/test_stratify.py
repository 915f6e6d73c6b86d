"""Tests for co-occurrence counting, layer planning, buckets, and distribution export."""

import numpy as np
import pytest

from ehr import (
    Dataset,
    EntityVocab,
    PatientRecord,
    Split,
    SyntheticConfig,
    Visit,
    generate_synthetic,
)
from errors import ConfigError, DataError, ShapeError
from stratify import (
    ERASED,
    BucketKind,
    BucketSet,
    CoOccurrence,
    StratParams,
    build_buckets,
    build_mapping_bucket,
    build_safety_bucket,
    count_cooccurrence,
    count_visits,
    export_distribution,
    flat_bucket,
    layer_sizes,
    relevance_lookup,
    theta_for,
)


def _mapping_cooc(med_diag, total_visits=10):
    """Counts with only a med-diag matrix of interest."""
    med_diag = np.asarray(med_diag, dtype=np.int64)
    meds = med_diag.shape[0]
    return CoOccurrence(
        np.zeros((meds, meds), dtype=np.int64),
        med_diag,
        np.ones((meds, 1), dtype=np.int64),
        total_visits,
        total_visits,
    )


def test_count_two_visits_sharing_medications():
    """Two visits with meds {0, 1} give pair and occurrence counts of 2."""
    vocab = EntityVocab(4, 1, 2)
    cooc = count_visits([Visit.of([0], [], [0, 1]), Visit.of([1], [], [0, 1])], vocab)
    assert cooc.med_med[0, 1] == 2
    assert cooc.med_med[0, 0] == 2
    assert cooc.total_visits == 2


def test_count_single_medication_diagnosis_pair():
    """One visit with med 0 and diagnosis 3 counts that pair once."""
    cooc = count_visits([Visit.of([3], [], [0])], EntityVocab(4, 1, 2))
    assert cooc.med_diag[0, 3] == 1
    assert cooc.med_diag.sum() == 1


def test_count_visits_without_medications_is_zero():
    """Visits with empty medication sets contribute nothing."""
    cooc = count_visits([Visit.of([0], [0], []), Visit.of([1], [], [])], EntityVocab(2, 1, 3))
    assert not cooc.med_med.any()
    assert not cooc.med_diag.any()
    assert not cooc.med_proc.any()


def test_count_cooccurrence_uses_one_split(tiny_dataset):
    """Only train visits are counted, but the all-split total is kept."""
    cooc = count_cooccurrence(tiny_dataset, Split.TRAIN)
    assert cooc.total_visits == 6
    assert cooc.all_visits == 9
    assert cooc.med_diag[0, 0] == 3
    assert cooc.med_proc[3, 2] == 2
    merged = cooc.merge(count_cooccurrence(tiny_dataset, Split.TEST))
    assert merged.total_visits == 7


def test_layer_sizes_for_the_full_medication_domain():
    """131 x 131 pairs with q = 60, k = 2 give nine layers."""
    plan = layer_sizes(131 * 131, 60, 2)
    assert plan.sizes == (60, 120, 240, 480, 960, 1920, 3840, 7680, 1861)
    assert plan.n == 9
    assert not plan.undersized


def test_layer_sizes_edge_cases():
    """Exact geometric sums and tiny domains."""
    assert layer_sizes(60, 60, 2).sizes == (60,)
    assert layer_sizes(60 * 3, 60, 2).sizes == (60, 120)
    small = layer_sizes(5, 60, 2)
    assert small.sizes == (5,)
    assert small.undersized


def test_layer_sizes_rejects_bad_arguments():
    """Empty domains and non-growing pyramids are config errors."""
    with pytest.raises(ConfigError, match="at least one pair") as info:
        layer_sizes(0, 4, 2)
    assert info.value.exit_code == 2
    with pytest.raises(ConfigError, match="k > 1"):
        layer_sizes(10, 4, 1)


def test_four_layer_relevances_decrease_linearly():
    """A four-layer bucket scores layers 1.0, 0.75, 0.5, 0.25."""
    cooc = _mapping_cooc(np.arange(8, 0, -1).reshape(2, 4))
    params = StratParams(q_md=1, k=2, theta_fraction=0.0, rho_md=1.0)
    bucket = build_mapping_bucket(cooc, params, "diag")
    assert bucket.sizes == (1, 2, 4, 1)
    assert bucket.relevances == (1.0, 0.75, 0.5, 0.25)


def test_default_rho_caps_top_relevance():
    """With rho = 0.8 the top layer scores 0.8."""
    cooc = _mapping_cooc(np.arange(8, 0, -1).reshape(2, 4))
    bucket = build_mapping_bucket(cooc, StratParams(q_md=1, theta_fraction=0.0), "diag")
    assert bucket.n == 4
    assert bucket.relevances[0] == pytest.approx(0.8)


def test_theta_from_visit_count():
    """0.03% of 15,032 visits is 4.5096; pairs counted 4 times are erased."""
    cooc = _mapping_cooc([[5, 4], [10, 0]], total_visits=15032)
    params = StratParams(q_md=1)
    assert theta_for(cooc, params) == pytest.approx(4.5096)
    bucket = build_mapping_bucket(cooc, params, "diag")
    assert bucket.layer_of[0, 1] == ERASED
    assert bucket.layer_of[1, 1] == ERASED
    assert bucket.layer_of[1, 0] == 0
    assert bucket.erased_count == 2


def test_theta_basis_all_uses_every_split():
    """The 'all' basis scales theta by the all-split visit total."""
    cooc = CoOccurrence(np.zeros((1, 1)), np.ones((1, 1)), np.ones((1, 1)), 10, 40)
    assert theta_for(cooc, StratParams(theta_fraction=0.5, theta_basis="all")) == 20.0


def test_zero_theta_keeps_every_pair():
    """theta = 0 erases nothing and covers the whole domain."""
    cooc = _mapping_cooc([[0, 3, 1], [2, 0, 0]])
    bucket = build_mapping_bucket(cooc, StratParams(q_md=2, theta_fraction=0.0), "diag")
    assert bucket.erased_count == 0
    assert sum(bucket.sizes) == 6


def test_all_pairs_erased_is_a_config_error():
    """A threshold above every count leaves nothing to stratify."""
    cooc = _mapping_cooc([[1, 1]], total_visits=100)
    with pytest.raises(ConfigError, match="theta_fraction"):
        build_mapping_bucket(cooc, StratParams(theta_fraction=0.5), "diag")


def test_mapping_layers_partition_kept_pairs(small_buckets):
    """Layer sizes match the non-erased pairs and relevance strictly decreases."""
    for bucket in (small_buckets.diag, small_buckets.proc):
        kept = bucket.layer_of[bucket.layer_of != ERASED]
        assert np.bincount(kept, minlength=bucket.n).tolist() == list(bucket.sizes)
        assert all(a > b for a, b in zip(bucket.relevances, bucket.relevances[1:], strict=False))


def test_mapping_top_layer_holds_the_largest_counts(small_buckets):
    """Every top-layer pair is counted at least as often as any lower-layer pair."""
    bucket = small_buckets.diag
    top = bucket.counts[bucket.layer_of == 0]
    rest = bucket.counts[bucket.layer_of > 0]
    assert rest.size == 0 or top.min() >= rest.max()


def test_safety_bucket_covers_every_ordered_pair(tiny_buckets):
    """The safety bucket erases nothing and is symmetric."""
    safety = tiny_buckets.safety
    assert safety.kind == BucketKind.SAFETY
    assert safety.erased_count == 0
    assert safety.sizes == (2, 4, 8, 2)
    np.testing.assert_array_equal(safety.layer_of, safety.layer_of.T)


def test_highest_count_pair_is_in_the_top_layer(tiny_buckets):
    """Medications 0 and 1 occur most often and take the top safety layer."""
    assert relevance_lookup(tiny_buckets.safety, (0, 0)) == (1, 1.0)
    assert relevance_lookup(tiny_buckets.safety, (1, 1)) == (1, 1.0)


def test_tiny_mapping_bucket_shapes(tiny_buckets):
    """Theta of 1.2 over six train visits keeps pairs seen at least twice."""
    assert tiny_buckets.diag.sizes == (2, 3)
    assert tiny_buckets.proc.sizes == (2, 2)
    assert relevance_lookup(tiny_buckets.diag, (0, 0)) == (1, pytest.approx(0.8))
    assert relevance_lookup(tiny_buckets.diag, (0, 1)) is None


def test_relevance_lookup_outside_domain():
    """Pairs outside the matrix are rejected."""
    bucket = flat_bucket(BucketKind.MAPPING_PROC, np.zeros((2, 2), dtype=np.int64))
    with pytest.raises(ShapeError, match="outside") as info:
        relevance_lookup(bucket, (2, 0))
    assert info.value.exit_code == 4


def test_equal_counts_break_ties_deterministically():
    """With identical counts the layering is a fixed function of pair order."""
    cooc = _mapping_cooc(np.ones((3, 3), dtype=np.int64))
    params = StratParams(q_md=2, theta_fraction=0.0)
    first = build_mapping_bucket(cooc, params, "diag")
    second = build_mapping_bucket(cooc, params, "diag")
    np.testing.assert_array_equal(first.layer_of, second.layer_of)
    assert first.layer_of[0, 0] == 0
    assert first.layer_of[0, 1] == 0
    assert first.layer_of[2, 2] == 2


def test_rebuild_is_deterministic(small_synthetic, small_params):
    """Identical data and settings give identical buckets."""
    dataset, _ = small_synthetic
    first = build_buckets(count_cooccurrence(dataset), small_params)
    second = build_buckets(count_cooccurrence(dataset), small_params)
    assert first.digest() == second.digest()


def test_flat_buckets_have_one_layer(tiny_dataset):
    """Disabling stratification gives single-layer buckets at relevance 1."""
    buckets = build_buckets(count_cooccurrence(tiny_dataset), StratParams(), stratified=False)
    for bucket in (buckets.safety, buckets.diag, buckets.proc):
        assert bucket.n == 1
        assert bucket.relevances == (1.0,)
        assert bucket.erased_count == 0


def test_stratification_flattens_a_long_tail():
    """Relevance is far less skewed than the min-max-normalized raw counts."""
    counts = np.floor(1000 / np.arange(1, 401) ** 1.5).astype(np.int64).reshape(10, 40)
    bucket = build_mapping_bucket(_mapping_cooc(counts), StratParams(q_md=10, theta_fraction=0.0), "diag")
    stats = bucket.flattening()
    assert stats["count_skewness"] > 0
    assert stats["relevance_skewness"] < stats["count_skewness"]


def test_generated_corpus_relevance_is_less_skewed_than_counts():
    """On a long-tailed generated corpus the layering cuts skewness, not variance."""
    dataset, _ = generate_synthetic(SyntheticConfig(num_patients=300, seed=0))
    bucket = build_safety_bucket(count_cooccurrence(dataset), StratParams())
    stats = bucket.flattening()
    assert stats["count_skewness"] > 2.0
    assert 0.0 < stats["relevance_skewness"] < stats["count_skewness"]


def test_bucket_set_save_and_load(tmp_path, tiny_buckets):
    """A saved bucket set reloads with the same digest and summaries."""
    path = tmp_path / "buckets.json"
    tiny_buckets.save(path)
    loaded = BucketSet.load(path)
    assert loaded.digest() == tiny_buckets.digest()
    assert loaded.summaries() == tiny_buckets.summaries()


def test_bucket_set_load_errors(tmp_path):
    """Missing or malformed bucket files are data errors."""
    with pytest.raises(DataError, match="Rerun the stratify stage"):
        BucketSet.load(tmp_path / "missing.json")
    path = tmp_path / "bad.json"
    path.write_text('{"safety": {"kind": "safety"}, "diag": {}, "proc": {}}', encoding="utf-8")
    with pytest.raises(DataError, match="Malformed bucket record"):
        BucketSet.load(path)


def test_invalid_params_are_config_errors():
    """Non-growing pyramids and unknown theta bases are rejected."""
    with pytest.raises(ConfigError, match="strat.k"):
        StratParams(k=1.0).validate()
    with pytest.raises(ConfigError, match="theta_basis"):
        StratParams(theta_basis="val").validate()
    with pytest.raises(ConfigError, match="q_mm"):
        StratParams(q_mm=0).validate()


def test_export_zero_counts_before_mode(tmp_path):
    """Exporting an all-zero count matrix writes an all-zero CSV."""
    path = tmp_path / "before.csv"
    export_distribution(np.zeros((2, 3), dtype=np.int64), "before", path)
    assert path.read_text(encoding="utf-8") == "0,1,2\n0,0,0\n0,0,0\n"


def test_export_after_mode_writes_relevance(tmp_path):
    """After-mode rows hold per-pair relevance with erased pairs at zero."""
    cooc = _mapping_cooc([[5, 4], [10, 0]], total_visits=15032)
    bucket = build_mapping_bucket(cooc, StratParams(q_md=1), "diag")
    path = tmp_path / "after.csv"
    export_distribution(bucket, "after", path)
    assert path.read_text(encoding="utf-8") == "0,1\n0.4,0.0\n0.8,0.0\n"


def test_export_rejects_unknown_modes(tmp_path):
    """Only before and after exports exist."""
    with pytest.raises(ConfigError, match="before"):
        export_distribution(np.zeros((1, 1)), "during", tmp_path / "x.csv")
    with pytest.raises(ConfigError, match="RelevanceBucket"):
        export_distribution(np.zeros((1, 1)), "after", tmp_path / "x.csv")


def test_safety_layers_put_a_pair_and_its_mirror_together():
    """Asymmetric boundaries still produce one layer per unordered pair."""
    vocab = EntityVocab(1, 1, 3)
    visits = [Visit.of([0], [], [0, 1, 2]), Visit.of([0], [], [0, 1])]
    dataset = Dataset(
        vocab,
        tuple(PatientRecord(f"p{n}", (v,)) for n, v in enumerate(visits)),
        {"p0": Split.TRAIN, "p1": Split.TRAIN},
    )
    bucket = build_safety_bucket(count_cooccurrence(dataset), StratParams(q_mm=2))
    np.testing.assert_array_equal(bucket.layer_of, bucket.layer_of.T)
    assert bucket.layer_of[1, 0] == 0
    assert bucket.sizes == (3, 3, 3)
    assert bucket.summary()["layer_sizes"] == [3, 3, 3]


def test_safety_sizes_count_layer_members():
    """Reported sizes equal layer membership; a layer emptied by mirroring is removed."""
    med_med = np.array([[5, 1], [1, 4]], dtype=np.int64)
    cooc = CoOccurrence(
        med_med, np.ones((2, 1), dtype=np.int64), np.ones((2, 1), dtype=np.int64), 5, 5
    )
    assert layer_sizes(4, 1, 2.0).sizes == (1, 2, 1)
    bucket = build_safety_bucket(cooc, StratParams(q_mm=1))
    assert bucket.sizes == (1, 3)
    assert bucket.relevances == (1.0, 0.5)
    np.testing.assert_array_equal(bucket.layer_of, [[0, 1], [1, 1]])
    assert list(np.bincount(bucket.layer_of.ravel())) == list(bucket.sizes)
