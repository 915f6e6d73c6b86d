"""Tests for embeddings, linear and GRU layers, and the two graph layers."""

import numpy as np
import pytest

from ehr import DdiMatrix
from errors import ShapeError
from layers import (
    Activation,
    EmbeddingTable,
    GcnMfLayer,
    GcnSwLayer,
    GruLayer,
    LinearLayer,
    aggregate_mean,
    embed_lookup,
    embed_sum,
    gcn_mf_forward,
    gcn_sw_forward,
    gru_forward,
    linear_forward,
)
from numerics import Parameter, Tape, backward, grad_check
from stratify import ERASED, BucketKind, RelevanceBucket

DIM = 4


def _safety_bucket():
    """Three medications: (0, 1) in the top layer, everything else below."""
    layer_of = np.array([[1, 0, 1], [0, 1, 1], [1, 1, 1]])
    return RelevanceBucket(BucketKind.SAFETY, layer_of, (2, 7), (1.0, 0.5), np.zeros((3, 3), dtype=np.int64))


def _mapping_bucket():
    """Three medications by four diagnoses with two erased columns for medication 0."""
    layer_of = np.array(
        [
            [0, ERASED, 1, ERASED],
            [1, 1, ERASED, ERASED],
            [ERASED, 0, 1, ERASED],
        ]
    )
    return RelevanceBucket(
        BucketKind.MAPPING_DIAG, layer_of, (2, 4), (0.8, 0.4), np.zeros((3, 4), dtype=np.int64)
    )


def _gru_oracle(layer, xs):
    """Plain numpy GRU used as an independent reference."""

    def sigmoid(v):
        return 1.0 / (1.0 + np.exp(-v))

    w = {g: p.values for g, p in layer.w.items()}
    u = {g: p.values for g, p in layer.u.items()}
    b = {g: p.values for g, p in layer.b.items()}
    h = np.zeros(layer.hidden)
    for x in xs:
        z = sigmoid(x @ w["z"] + h @ u["z"] + b["z"])
        r = sigmoid(x @ w["r"] + h @ u["r"] + b["r"])
        candidate = np.tanh(x @ w["h"] + (r * h) @ u["h"] + b["h"])
        h = (1.0 - z) * candidate + z * h
    return h


def test_empty_lookup_has_no_rows():
    """Looking up no ids gives a [0 x dim] tensor and a zero sum."""
    table = EmbeddingTable("embed", 5, DIM, seed=0)
    tape = Tape()
    assert embed_lookup(tape, table, []).shape == (0, DIM)
    np.testing.assert_array_equal(embed_sum(tape, table, []).values, np.zeros(DIM))


def test_lookup_gradient_touches_only_looked_up_rows():
    """All-ones upstream gradient lands on looked-up rows; duplicates accumulate."""
    table = EmbeddingTable("embed", 5, DIM, seed=0)
    tape = Tape()
    backward(tape.sum(embed_lookup(tape, table, [1, 3, 1])))
    grad = table.weight.gradient
    np.testing.assert_array_equal(grad[1], np.full(DIM, 2.0))
    np.testing.assert_array_equal(grad[3], np.ones(DIM))
    assert not grad[[0, 2, 4]].any()


def test_lookup_rejects_unknown_ids():
    """Ids beyond the table are shape errors, reported as training failures."""
    table = EmbeddingTable("embed", 2, DIM, seed=0)
    with pytest.raises(ShapeError, match="out of range") as info:
        embed_lookup(Tape(), table, [2])
    assert info.value.exit_code == 4


def test_embed_sum_equals_multi_hot_product():
    """Summing looked-up rows matches multi-hot times the table."""
    table = EmbeddingTable("embed", 5, DIM, seed=2)
    multi_hot = np.array([1.0, 0.0, 1.0, 1.0, 0.0])
    np.testing.assert_allclose(
        embed_sum(Tape(), table, [0, 2, 3]).values, multi_hot @ table.weight.values, rtol=1e-12, atol=1e-14
    )


def test_zero_linear_with_sigmoid_gives_half():
    """Zero weights and bias through a sigmoid output 0.5 everywhere."""
    layer = LinearLayer("mlp", 3, 5, seed=0, activation=Activation.SIGMOID)
    layer.weight.values[...] = 0.0
    tape = Tape()
    out = linear_forward(tape, layer, tape.constant([0.3, -1.0, 2.0]))
    np.testing.assert_array_equal(out.values, np.full(5, 0.5))


def test_linear_in_eval_mode_matches_affine_oracle(rng):
    """With dropout inactive the layer is x W + b."""
    layer = LinearLayer("mlp", 3, 2, seed=1, dropout=0.5)
    layer.bias.values[...] = [0.1, -0.2]
    x = rng.normal(size=3)
    tape = Tape()
    out = linear_forward(tape, layer, tape.constant(x))
    np.testing.assert_allclose(out.values, x @ layer.weight.values + layer.bias.values, rtol=1e-12, atol=1e-14)


def test_relu_linear_is_never_negative(rng):
    """A relu layer clamps negative pre-activations."""
    layer = LinearLayer("mlp", 6, 8, seed=4, activation=Activation.RELU)
    tape = Tape()
    out = linear_forward(tape, layer, tape.constant(rng.normal(size=(5, 6))))
    assert out.values.min() >= 0.0


def test_linear_input_shape_mismatch():
    """An input of the wrong width is a shape error."""
    layer = LinearLayer("mlp", 3, 2, seed=0)
    tape = Tape()
    with pytest.raises(ShapeError):
        linear_forward(tape, layer, tape.constant(np.ones(4)))


def test_linear_gradient(rng):
    """Linear layer gradients match finite differences within 1e-6."""
    layer = LinearLayer("mlp", 4, 3, seed=5, activation=Activation.SIGMOID)
    x = rng.normal(size=4)

    def loss(tape):
        return tape.sum(linear_forward(tape, layer, tape.constant(x)))

    report = grad_check(loss, layer.parameters(), tolerance=1e-6)
    assert report.passed, report


def test_zero_gru_stays_at_zero():
    """All-zero weights gate a zero candidate onto a zero state."""
    layer = GruLayer("rnn", 3, DIM, seed=0)
    for p in layer.parameters():
        p.values[...] = 0.0
    tape = Tape()
    out = gru_forward(tape, layer, [tape.constant([1.0, -2.0, 0.5]), tape.constant([3.0, 0.0, 1.0])])
    np.testing.assert_array_equal(out.values, np.zeros(DIM))


def test_gru_matches_reference_cell(rng):
    """The tape GRU agrees with a plain numpy GRU over two steps."""
    layer = GruLayer("rnn", 3, DIM, seed=6)
    for p in layer.b.values():
        p.values[...] = rng.normal(size=DIM)
    xs = [rng.normal(size=3), rng.normal(size=3)]
    tape = Tape()
    out = gru_forward(tape, layer, [tape.constant(xs[0])])
    np.testing.assert_allclose(out.values, _gru_oracle(layer, xs[:1]), rtol=1e-12, atol=1e-14)
    tape = Tape()
    out = gru_forward(tape, layer, [tape.constant(x) for x in xs])
    np.testing.assert_allclose(out.values, _gru_oracle(layer, xs), rtol=1e-12, atol=1e-14)


def test_gru_rejects_empty_sequence():
    """A GRU needs at least one step."""
    with pytest.raises(ShapeError, match="nonempty"):
        gru_forward(Tape(), GruLayer("rnn", 3, DIM, seed=0), [])


def test_gru_gradient_over_five_steps(rng):
    """GRU gradients through five steps pass a 1e-5 check."""
    layer = GruLayer("rnn", 3, DIM, seed=7)
    xs = rng.normal(size=(5, 3))
    inputs = Parameter("inputs", xs)

    def loss(tape):
        seq = tape.param(inputs)
        steps = [tape.reshape(tape.gather(seq, [t]), (3,)) for t in range(5)]
        return tape.sum(gru_forward(tape, layer, steps))

    report = grad_check(loss, [*layer.parameters(), inputs], tolerance=1e-5)
    assert report.passed, report


def test_aggregate_mean_examples(rng):
    """Row means of one row, of opposite rows, and of a random block."""
    tape = Tape()
    v = rng.normal(size=DIM)
    np.testing.assert_array_equal(aggregate_mean(tape, tape.constant([v])).values, v)
    np.testing.assert_allclose(aggregate_mean(tape, tape.constant([v, -v])).values, np.zeros(DIM), atol=1e-15)
    rows = rng.normal(size=(5, DIM))
    np.testing.assert_allclose(aggregate_mean(tape, tape.constant(rows)).values, rows.sum(axis=0) / 5)
    np.testing.assert_array_equal(aggregate_mean(tape, tape.zeros(0, DIM)).values, np.zeros(DIM))


def test_gcn_sw_initial_weights_equal_relevance():
    """Edge weights start exactly at each layer's relevance."""
    bucket = _safety_bucket()
    layer = GcnSwLayer("gcn", bucket, DIM, lambda_init=0.5, seed=0)
    np.testing.assert_array_equal(layer.edge_weight.values[:, 0], bucket.relevances)
    assert layer.ddi_lambda.values[0] == 0.5


def test_gcn_sw_single_medication(rng):
    """One medication has no edges: the output is relu of its transform."""
    bucket = _safety_bucket()
    layer = GcnSwLayer("gcn", bucket, DIM, lambda_init=0.5, seed=1)
    table = rng.normal(size=(3, DIM))
    tape = Tape()
    updated, e_m = gcn_sw_forward(tape, layer, [2], tape.constant(table), bucket, DdiMatrix.from_edges(3, []))
    expected = np.maximum(table[2] @ layer.weight.values, 0.0)
    np.testing.assert_allclose(updated.values[0], expected, rtol=1e-12, atol=1e-14)
    np.testing.assert_allclose(e_m.values, expected, rtol=1e-12, atol=1e-14)


def test_gcn_sw_empty_medications_give_zero():
    """No previous medications yield a zero summary vector."""
    bucket = _safety_bucket()
    layer = GcnSwLayer("gcn", bucket, DIM, lambda_init=0.5, seed=1)
    tape = Tape()
    updated, e_m = gcn_sw_forward(tape, layer, [], tape.zeros(3, DIM), bucket, DdiMatrix.from_edges(3, []))
    assert updated.shape == (0, DIM)
    np.testing.assert_array_equal(e_m.values, np.zeros(DIM))


def test_gcn_sw_messages_scale_by_layer_weight():
    """With lambda 0 and an identity transform each message is scaled by its layer weight."""
    bucket = _safety_bucket()
    layer = GcnSwLayer("gcn", bucket, DIM, lambda_init=0.0, seed=2)
    layer.weight.values[...] = np.eye(DIM)
    table = np.array([[1.0, 2.0, 0.5, 1.0], [0.5, 0.5, 1.0, 2.0], [2.0, 1.0, 1.0, 0.5]])
    tape = Tape()
    updated, _ = gcn_sw_forward(tape, layer, [0, 2], tape.constant(table), bucket, DdiMatrix.from_edges(3, []))
    # (0, 2) sits in the 0.5 layer
    np.testing.assert_allclose(updated.values[0], table[0] + 0.5 * table[2])
    np.testing.assert_allclose(updated.values[1], table[2] + 0.5 * table[0])
    tape = Tape()
    top, _ = gcn_sw_forward(tape, layer, [0, 1], tape.constant(table), bucket, DdiMatrix.from_edges(3, []))
    np.testing.assert_allclose(top.values[0], table[0] + 1.0 * table[1])


def test_gcn_sw_interaction_lowers_the_weight_by_lambda():
    """An interacting pair's message shrinks by exactly lambda times the neighbor."""
    bucket = _safety_bucket()
    layer = GcnSwLayer("gcn", bucket, DIM, lambda_init=0.5, seed=3)
    layer.weight.values[...] = np.eye(DIM)
    table = np.array([[1.0, 2.0, 0.5, 1.0], [0.5, 0.5, 1.0, 2.0], [2.0, 1.0, 1.0, 0.5]])
    outputs = []
    for edges in ([], [(0, 1)]):
        tape = Tape()
        updated, _ = gcn_sw_forward(tape, layer, [0, 1], tape.constant(table), bucket, DdiMatrix.from_edges(3, edges))
        outputs.append(updated.values)
    np.testing.assert_allclose(outputs[0][0] - outputs[1][0], 0.5 * table[1])
    np.testing.assert_allclose(outputs[0][1] - outputs[1][1], 0.5 * table[0])


def test_gcn_sw_is_permutation_equivariant(rng):
    """Reordering medication ids reorders node outputs and keeps the summary."""
    bucket = _safety_bucket()
    layer = GcnSwLayer("gcn", bucket, DIM, lambda_init=0.3, seed=4)
    table = rng.normal(size=(3, DIM))
    ddi = DdiMatrix.from_edges(3, [(1, 2)])
    tape = Tape()
    first, first_mean = gcn_sw_forward(tape, layer, [0, 1, 2], tape.constant(table), bucket, ddi)
    tape = Tape()
    second, second_mean = gcn_sw_forward(tape, layer, [2, 0, 1], tape.constant(table), bucket, ddi)
    np.testing.assert_allclose(second.values, first.values[[2, 0, 1]], rtol=1e-12, atol=1e-15)
    np.testing.assert_allclose(second_mean.values, first_mean.values, rtol=1e-12, atol=1e-15)


def test_gcn_sw_rejects_mismatched_edge_table():
    """An edge table sized for another bucket is a shape error."""
    layer = GcnSwLayer("gcn", _safety_bucket(), DIM, lambda_init=0.5, seed=0)
    other = RelevanceBucket(BucketKind.SAFETY, np.zeros((3, 3), dtype=np.int64), (9,), (1.0,), np.zeros((3, 3)))
    tape = Tape()
    with pytest.raises(ShapeError, match="layers"):
        gcn_sw_forward(tape, layer, [0, 1], tape.zeros(3, DIM), other, DdiMatrix.from_edges(3, []))


def test_gcn_sw_gradient(rng):
    """Graph, penalty, transform, and input gradients pass a 1e-5 check."""
    bucket = _safety_bucket()
    layer = GcnSwLayer("gcn", bucket, DIM, lambda_init=0.4, seed=5)
    table = Parameter("table", rng.normal(size=(3, DIM)))
    ddi = DdiMatrix.from_edges(3, [(0, 2)])

    def loss(tape):
        updated, e_m = gcn_sw_forward(tape, layer, [0, 1, 2], tape.param(table), bucket, ddi)
        return tape.add(tape.sum(tape.tanh(updated)), tape.sum(e_m))

    report = grad_check(loss, [*layer.parameters(), table], tolerance=1e-5)
    assert report.passed, report


def test_gcn_mf_initial_features_broadcast_relevance():
    """Each edge feature row starts at its layer's relevance across the width."""
    layer = GcnMfLayer("gcn", _mapping_bucket(), DIM, seed=0)
    np.testing.assert_array_equal(layer.edge_feature.values, [[0.8] * DIM, [0.4] * DIM])


def test_gcn_mf_one_edge_identity():
    """One medication, one diagnosis, unit features, identity transform: relu of the medication."""
    bucket = RelevanceBucket(
        BucketKind.MAPPING_DIAG, np.array([[0]]), (1,), (1.0,), np.ones((1, 1), dtype=np.int64)
    )
    layer = GcnMfLayer("gcn", bucket, DIM, seed=0)
    layer.weight.values[...] = np.eye(DIM)
    med = np.array([[0.5, -1.0, 2.0, -0.1]])
    tape = Tape()
    updated, e_set = gcn_mf_forward(tape, layer, [0], [0], tape.constant(med), tape.constant(np.ones((1, DIM))), bucket)
    np.testing.assert_array_equal(updated.values[0], np.maximum(med[0], 0.0))
    np.testing.assert_array_equal(e_set.values, np.maximum(med[0], 0.0))


def test_gcn_mf_without_edges_keeps_targets(rng):
    """All-erased pairs and an empty medication set both fall back to the inputs."""
    bucket = _mapping_bucket()
    layer = GcnMfLayer("gcn", bucket, DIM, seed=1)
    targets = rng.normal(size=(4, DIM))
    meds = rng.normal(size=(3, DIM))
    tape = Tape()
    updated, e_set = gcn_mf_forward(tape, layer, [0], [1, 3], tape.constant(meds[[0]]), tape.constant(targets), bucket)
    np.testing.assert_array_equal(updated.values, targets[[1, 3]])
    np.testing.assert_allclose(e_set.values, targets[[1, 3]].mean(axis=0))
    tape = Tape()
    empty, empty_set = gcn_mf_forward(tape, layer, [], [1, 3], tape.zeros(0, DIM), tape.constant(targets), bucket)
    np.testing.assert_array_equal(empty.values, updated.values)
    np.testing.assert_array_equal(empty_set.values, e_set.values)


def test_gcn_mf_unconnected_targets_keep_their_embedding(rng):
    """Diagnosis 3 has no edges and passes through while others are updated."""
    bucket = _mapping_bucket()
    layer = GcnMfLayer("gcn", bucket, DIM, seed=2)
    targets = rng.normal(size=(4, DIM))
    meds = rng.normal(size=(3, DIM))
    tape = Tape()
    updated, _ = gcn_mf_forward(tape, layer, [0, 1, 2], [0, 3], tape.constant(meds), tape.constant(targets), bucket)
    np.testing.assert_array_equal(updated.values[1], targets[3])
    assert updated.values[0].min() >= 0.0


def test_gcn_mf_locality(rng):
    """Zeroing one medication changes nothing for targets it does not reach."""
    bucket = _mapping_bucket()
    layer = GcnMfLayer("gcn", bucket, DIM, seed=3)
    targets = rng.normal(size=(4, DIM))
    meds = rng.normal(size=(3, DIM))
    zeroed = meds.copy()
    zeroed[0] = 0.0
    outputs = []
    for embeds in (meds, zeroed):
        tape = Tape()
        updated, _ = gcn_mf_forward(
            tape, layer, [0, 1, 2], [0, 1, 2, 3], tape.constant(embeds), tape.constant(targets), bucket
        )
        outputs.append(updated.values)
    # medication 0 reaches diagnoses 0 and 2 only
    np.testing.assert_allclose(outputs[0][[1, 3]], outputs[1][[1, 3]], rtol=1e-12, atol=1e-15)


def test_gcn_mf_rejects_misaligned_medication_rows():
    """Medication embeddings must have one row per medication id."""
    bucket = _mapping_bucket()
    layer = GcnMfLayer("gcn", bucket, DIM, seed=0)
    tape = Tape()
    with pytest.raises(ShapeError, match="rows"):
        gcn_mf_forward(tape, layer, [0, 1], [0], tape.zeros(3, DIM), tape.zeros(4, DIM), bucket)


def test_gcn_mf_gradient(rng):
    """Feature, transform, and input gradients pass a 1e-5 check."""
    bucket = _mapping_bucket()
    layer = GcnMfLayer("gcn", bucket, DIM, seed=4)
    layer.edge_feature.values[...] = rng.uniform(0.2, 1.0, size=layer.edge_feature.shape)
    meds = Parameter("meds", rng.normal(size=(3, DIM)))
    targets = Parameter("targets", rng.normal(size=(4, DIM)))

    def loss(tape):
        updated, e_set = gcn_mf_forward(
            tape, layer, [0, 1, 2], [0, 1, 2, 3], tape.param(meds), tape.param(targets), bucket
        )
        return tape.add(tape.sum(tape.tanh(updated)), tape.sum(e_set))

    report = grad_check(loss, [*layer.parameters(), meds, targets], tolerance=1e-5)
    assert report.passed, report
