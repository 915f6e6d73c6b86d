"""Trainable building blocks: embeddings, linear maps, GRU, and the two graph layers."""

from __future__ import annotations

from collections.abc import Sequence
from enum import StrEnum

import numpy as np

from ehr import DdiMatrix
from errors import ShapeError
from numerics import Parameter, Tape, Tensor, derive_seed, uniform_init
from stratify import ERASED, RelevanceBucket

INIT_RANGE = 0.1


def _uniform(name: str, shape: tuple[int, ...], seed: int, stream: int) -> Parameter:
    return Parameter(name, uniform_init(shape, -INIT_RANGE, INIT_RANGE, derive_seed(seed, stream)))


class Activation(StrEnum):
    """Output nonlinearity of a linear layer."""

    NONE = "none"
    RELU = "relu"
    SIGMOID = "sigmoid"


class EmbeddingTable:
    """One embedding row per entity id."""

    def __init__(self, name: str, rows: int, dim: int, seed: int):
        """Initialize rows uniformly in ``[-0.1, 0.1)``."""
        self.weight = _uniform(name, (rows, dim), seed, 0)

    @property
    def rows(self) -> int:
        """Number of entities."""
        return self.weight.shape[0]

    @property
    def dim(self) -> int:
        """Embedding width."""
        return self.weight.shape[1]

    def parameters(self) -> list[Parameter]:
        """Trainable parameters."""
        return [self.weight]


def embed_lookup(tape: Tape, table: EmbeddingTable, ids: Sequence[int]) -> Tensor:
    """Rows of ``table`` for ``ids``, shape ``[len(ids), dim]``."""
    return tape.gather(tape.param(table.weight), list(ids))


def embed_sum(tape: Tape, table: EmbeddingTable, ids: Sequence[int]) -> Tensor:
    """Multi-hot vector times table: the sum of the looked-up rows."""
    return tape.row_sum(embed_lookup(tape, table, ids))


class LinearLayer:
    """Affine map with input dropout and an optional activation."""

    def __init__(
        self,
        name: str,
        in_dim: int,
        out_dim: int,
        seed: int,
        activation: Activation = Activation.NONE,
        dropout: float = 0.0,
    ):
        """Initialize weights uniformly and the bias at zero."""
        self.weight = _uniform(f"{name}.weight", (in_dim, out_dim), seed, 0)
        self.bias = Parameter(f"{name}.bias", np.zeros(out_dim))
        self.activation = Activation(activation)
        self.dropout = dropout

    def parameters(self) -> list[Parameter]:
        """Trainable parameters."""
        return [self.weight, self.bias]


def linear_forward(tape: Tape, layer: LinearLayer, x: Tensor) -> Tensor:
    """``activation(dropout(x) @ W + b)``; dropout only acts on training tapes."""
    x = tape.dropout(x, layer.dropout)
    y = tape.add(tape.matmul(x, tape.param(layer.weight)), tape.param(layer.bias))
    if layer.activation is Activation.RELU:
        return tape.relu(y)
    if layer.activation is Activation.SIGMOID:
        return tape.sigmoid(y)
    return y


class GruLayer:
    """Gated recurrent unit with update, reset, and candidate gates."""

    def __init__(self, name: str, in_dim: int, hidden: int, seed: int):
        """Initialize gate weights uniformly and gate biases at zero."""
        self.hidden = hidden
        self.w = {g: _uniform(f"{name}.w_{g}", (in_dim, hidden), seed, i) for i, g in enumerate("zrh")}
        self.u = {
            g: _uniform(f"{name}.u_{g}", (hidden, hidden), seed, 3 + i) for i, g in enumerate("zrh")
        }
        self.b = {g: Parameter(f"{name}.b_{g}", np.zeros(hidden)) for g in "zrh"}

    def parameters(self) -> list[Parameter]:
        """Trainable parameters."""
        return [*self.w.values(), *self.u.values(), *self.b.values()]


def gru_forward(tape: Tape, layer: GruLayer, sequence: Sequence[Tensor]) -> Tensor:
    """Run the sequence in order from a zero state and return the final hidden state."""
    if not sequence:
        raise ShapeError("gru_forward needs a nonempty sequence")
    w = {g: tape.param(p) for g, p in layer.w.items()}
    u = {g: tape.param(p) for g, p in layer.u.items()}
    b = {g: tape.param(p) for g, p in layer.b.items()}

    def gate(g: str, x: Tensor, h: Tensor) -> Tensor:
        return tape.add(tape.add(tape.matmul(x, w[g]), tape.matmul(h, u[g])), b[g])

    h = tape.zeros(layer.hidden)
    for x in sequence:
        z = tape.sigmoid(gate("z", x, h))
        r = tape.sigmoid(gate("r", x, h))
        candidate = tape.tanh(gate("h", x, tape.mul(r, h)))
        # (1 - z) * candidate + z * h
        h = tape.add(candidate, tape.mul(z, tape.sub(h, candidate)))
    return h


class GcnSwLayer:
    """Medication graph layer with one learnable weight per safety layer.

    ``edge_weight`` starts at each layer's relevance; ``ddi_lambda`` scales the
    interaction penalty subtracted from every edge weight.
    """

    def __init__(self, name: str, bucket: RelevanceBucket, dim: int, lambda_init: float, seed: int):
        """Seed the edge table from ``bucket`` relevances."""
        self.edge_weight = Parameter(
            f"{name}.edge_weight", np.asarray(bucket.relevances, dtype=np.float64).reshape(-1, 1)
        )
        self.ddi_lambda = Parameter(f"{name}.lambda", np.array([lambda_init]))
        self.weight = _uniform(f"{name}.weight", (dim, dim), seed, 0)

    def parameters(self) -> list[Parameter]:
        """Trainable parameters."""
        return [self.edge_weight, self.ddi_lambda, self.weight]


def _check_table(edge_table: Parameter, bucket: RelevanceBucket) -> None:
    if edge_table.shape[0] != bucket.n:
        raise ShapeError(
            f"{edge_table.name} has {edge_table.shape[0]} rows but the {bucket.kind} bucket "
            f"has {bucket.n} layers"
        )


def gcn_sw_forward(
    tape: Tape,
    layer: GcnSwLayer,
    med_ids: Sequence[int],
    med_table: Tensor,
    bucket: RelevanceBucket,
    ddi: DdiMatrix,
) -> tuple[Tensor, Tensor]:
    """Message passing over the complete graph of ``med_ids``.

    Edge ``(i, j)`` weighs ``edge_weight[layer(i, j)] - lambda * ddi[i, j]``.
    Node ``j`` becomes ``relu(e_j W + mean_i w_ij e_i W)``. Returns the updated
    node embeddings and their mean.
    """
    _check_table(layer.edge_weight, bucket)
    dim = med_table.shape[1]
    ids = list(med_ids)
    if not ids:
        return tape.zeros(0, dim), tape.zeros(dim)
    transformed = tape.matmul(tape.gather(med_table, ids), tape.param(layer.weight))
    count = len(ids)
    if count == 1:
        updated = tape.relu(transformed)
        return updated, tape.row_mean(updated)

    pair_layers = bucket.layer_of[np.ix_(ids, ids)]
    relevance = tape.reshape(tape.gather(tape.param(layer.edge_weight), pair_layers.ravel()), (count, count))
    interactions = tape.constant(ddi.matrix[np.ix_(ids, ids)].astype(np.float64))
    weights = tape.sub(relevance, tape.mul(interactions, tape.param(layer.ddi_lambda)))
    weights = tape.mul(weights, tape.constant(1.0 - np.eye(count)))
    # row j of weights^T @ transformed sums w_ij * e_i W over neighbors i
    messages = tape.scale(tape.matmul(tape.transpose(weights), transformed), 1.0 / (count - 1))
    updated = tape.relu(tape.add(transformed, messages))
    return updated, tape.row_mean(updated)


class GcnMfLayer:
    """Bipartite medication-to-target layer with one feature vector per mapping layer."""

    def __init__(self, name: str, bucket: RelevanceBucket, dim: int, seed: int):
        """Seed each edge feature row with its layer's relevance across ``dim``."""
        features = np.repeat(np.asarray(bucket.relevances, dtype=np.float64)[:, None], dim, axis=1)
        self.edge_feature = Parameter(f"{name}.edge_feature", features)
        self.weight = _uniform(f"{name}.weight", (dim, dim), seed, 0)

    def parameters(self) -> list[Parameter]:
        """Trainable parameters."""
        return [self.edge_feature, self.weight]


def gcn_mf_forward(
    tape: Tape,
    layer: GcnMfLayer,
    med_ids: Sequence[int],
    target_ids: Sequence[int],
    med_embeds: Tensor,
    target_table: Tensor,
    bucket: RelevanceBucket,
) -> tuple[Tensor, Tensor]:
    """Project medication information onto diagnosis or procedure nodes.

    ``med_embeds`` row ``a`` belongs to ``med_ids[a]``. Each non-erased pair is a
    directed edge med -> target carrying ``(e_med * feature[layer]) W``; a target
    becomes ``relu`` of its mean incoming message, with no self term. Targets
    with no incoming edge keep their input embedding.
    """
    _check_table(layer.edge_feature, bucket)
    dim = target_table.shape[1]
    targets = list(target_ids)
    original = tape.gather(target_table, targets)
    if not targets:
        return original, tape.zeros(dim)
    meds = list(med_ids)
    if meds and med_embeds.shape[0] != len(meds):
        raise ShapeError(
            f"med_embeds has {med_embeds.shape[0]} rows for {len(meds)} medications"
        )
    pair_layers = bucket.layer_of[np.ix_(meds, targets)] if meds else np.empty((0, len(targets)))
    src, dst = np.nonzero(pair_layers != ERASED)
    if src.size == 0:
        return original, tape.row_mean(original)

    modulated = tape.mul(
        tape.gather(med_embeds, src),
        tape.gather(tape.param(layer.edge_feature), pair_layers[src, dst].astype(np.intp)),
    )
    messages = tape.matmul(modulated, tape.param(layer.weight))
    degree = np.bincount(dst, minlength=len(targets))
    incidence = np.zeros((len(targets), src.size))
    incidence[dst, np.arange(src.size)] = 1.0 / degree[dst]
    pooled = tape.relu(tape.matmul(tape.constant(incidence), messages))
    connected = (degree > 0).astype(np.float64)[:, None]
    updated = tape.add(
        tape.mul(pooled, tape.constant(connected)),
        tape.mul(original, tape.constant(1.0 - connected)),
    )
    return updated, tape.row_mean(updated)


def aggregate_mean(tape: Tape, rows: Tensor) -> Tensor:
    """Row mean of an ``[n, dim]`` tensor; zero vector when ``n == 0``."""
    return tape.row_mean(rows)
