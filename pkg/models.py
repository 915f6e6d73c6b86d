"""Pre-training model, the stratified recommendation model, losses, and training loops."""

from __future__ import annotations

import json
import logging
from collections.abc import Sequence
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from ehr import Dataset, DdiMatrix, EntityVocab, PatientRecord, Split, Visit, multi_hot
from errors import ConfigError, DataError, ShapeError
from layers import (
    Activation,
    EmbeddingTable,
    GcnMfLayer,
    GcnSwLayer,
    GruLayer,
    LinearLayer,
    embed_sum,
    gcn_mf_forward,
    gcn_sw_forward,
    gru_forward,
    linear_forward,
)
from metrics import evaluate
from numerics import (
    AdamState,
    Parameter,
    Tape,
    Tensor,
    adam_step,
    atomic_write,
    backward,
    derive_seed,
    load_checkpoint,
    make_rng,
    restore_parameters,
    save_checkpoint,
)
from stratify import BucketSet

PROB_CLIP = 1e-12

STREAM_SHUFFLE_PRETRAIN = 101
STREAM_SHUFFLE_MAIN = 102
STREAM_DROPOUT_PRETRAIN = 103
STREAM_DROPOUT_MAIN = 104


@dataclass(frozen=True)
class Hyperparams:
    """Model width, loss weights, and optimizer settings."""

    dim: int = 64
    delta: float = 0.5
    beta: float = 0.95
    gamma: float = 0.06
    lr: float = 0.0005
    weight_decay: float = 0.05
    epochs: int = 15
    pretrain_epochs: int = 15
    dropout: float = 0.5
    kp: float = 0.05
    ddi_lambda_init: float = 0.5
    seed: int = 0

    def validate(self) -> None:
        """Raise ``ConfigError`` on out-of-range settings."""
        if self.dim < 1:
            raise ConfigError(f"model.dim must be at least 1, got {self.dim}")
        if not 0 < self.delta < 1:
            raise ConfigError(f"model.delta must be in (0, 1), got {self.delta}")
        for name in ("beta", "gamma"):
            if not 0 <= getattr(self, name) <= 1:
                raise ConfigError(f"model.{name} must be in [0, 1], got {getattr(self, name)}")
        if self.lr < 0 or self.weight_decay < 0:
            raise ConfigError("model.lr and model.weight_decay must be >= 0")
        if self.epochs < 1 or self.pretrain_epochs < 0:
            raise ConfigError("model.epochs must be >= 1 and model.pretrain_epochs >= 0")
        if not 0 <= self.dropout < 1:
            raise ConfigError(f"model.dropout must be in [0, 1), got {self.dropout}")


@dataclass(frozen=True)
class AblationFlags:
    """Which components to remove. ``wo_sg`` implies ``wo_s``."""

    wo_p: bool = False
    wo_s: bool = False
    wo_sg: bool = False

    def normalized(self) -> AblationFlags:
        """Return flags with ``wo_sg`` forcing ``wo_s``."""
        return AblationFlags(self.wo_p, self.wo_s or self.wo_sg, self.wo_sg)

    @property
    def label(self) -> str:
        """Short variant name for reports."""
        names = [f.name for f in fields(self) if getattr(self, f.name)]
        if self.wo_sg and "wo_s" in names:
            names.remove("wo_s")
        return "+".join(names) or "full"


@dataclass
class TrainingLog:
    """Per-epoch training trace."""

    epoch_losses: list[float] = field(default_factory=list)
    val_jaccard: list[float] = field(default_factory=list)
    best_epoch: int = 0
    graph_grad_max: float = 0.0


@dataclass(frozen=True)
class Prediction:
    """Probabilities and the thresholded medication set."""

    probabilities: np.ndarray
    med_set: tuple[int, ...]


def _prime_representation(
    tape: Tape,
    tables: tuple[EmbeddingTable, EmbeddingTable, EmbeddingTable],
    visit: Visit,
    prev_meds: Sequence[int],
) -> Tensor:
    """Concatenate summed diagnosis, procedure, and previous-medication embeddings."""
    diag, proc, med = tables
    return tape.concat(
        [embed_sum(tape, diag, visit.diag_ids), embed_sum(tape, proc, visit.proc_ids), embed_sum(tape, med, prev_meds)]
    )


def _require_diagnoses(visit: Visit) -> None:
    if not visit.diag_ids:
        raise DataError("visit has no diagnoses; a health state needs at least one")


class PretrainModel:
    """Entity embeddings trained through a single visit-level MLP."""

    def __init__(self, vocab: EntityVocab, hyper: Hyperparams):
        """Initialize tables and the MLP from ``hyper.seed``."""
        self.vocab = vocab
        self.hyper = hyper
        self.e_d = EmbeddingTable("embed.diag", vocab.num_diag, hyper.dim, derive_seed(hyper.seed, 10))
        self.e_p = EmbeddingTable("embed.proc", vocab.num_proc, hyper.dim, derive_seed(hyper.seed, 11))
        self.e_m = EmbeddingTable("embed.med", vocab.num_med, hyper.dim, derive_seed(hyper.seed, 12))
        self.mlp = LinearLayer(
            "pretrain.mlp",
            3 * hyper.dim,
            vocab.num_med,
            derive_seed(hyper.seed, 13),
            Activation.RELU,
            hyper.dropout,
        )

    @property
    def tables(self) -> tuple[EmbeddingTable, EmbeddingTable, EmbeddingTable]:
        """Diagnosis, procedure, and medication tables."""
        return self.e_d, self.e_p, self.e_m

    def parameters(self) -> list[Parameter]:
        """Trainable parameters."""
        return [*(t.weight for t in self.tables), *self.mlp.parameters()]

    def sidecar(self) -> dict[str, object]:
        """Metadata written beside a checkpoint."""
        return {"model": "pretrain", "hyperparams": asdict(self.hyper)}


def pretrain_forward(
    tape: Tape, model: PretrainModel, visit: Visit, prev_meds: Sequence[int]
) -> Tensor:
    """Medication probabilities for one visit from its entities and the previous prescription."""
    _require_diagnoses(visit)
    representation = _prime_representation(tape, model.tables, visit, prev_meds)
    return tape.sigmoid(linear_forward(tape, model.mlp, representation))


class StratMedModel:
    """Graph-augmented longitudinal model over relevance-stratified buckets."""

    def __init__(
        self,
        vocab: EntityVocab,
        buckets: BucketSet,
        ddi: DdiMatrix,
        hyper: Hyperparams,
        ablation: AblationFlags | None = None,
    ):
        """Build every layer; graph edge tables start from bucket relevances.

        Under ``wo_s`` the given buckets are replaced by flat single-layer ones.
        """
        self.vocab = vocab
        self.ddi = ddi
        self.hyper = hyper
        self.ablation = (ablation or AblationFlags()).normalized()
        if self.ablation.wo_s:
            buckets = buckets.flattened()
        self.buckets = buckets
        expected = {
            "safety": (vocab.num_med, vocab.num_med),
            "diag": (vocab.num_med, vocab.num_diag),
            "proc": (vocab.num_med, vocab.num_proc),
        }
        for name, shape in expected.items():
            actual = getattr(buckets, name).layer_of.shape
            if actual != shape:
                raise ShapeError(f"{name} bucket covers {actual} pairs, vocabulary needs {shape}")
        if ddi.size != vocab.num_med:
            raise ShapeError(f"DDI matrix has size {ddi.size}, vocabulary has {vocab.num_med} medications")

        dim, seed = hyper.dim, hyper.seed
        self.e_d = EmbeddingTable("embed.diag", vocab.num_diag, dim, derive_seed(seed, 10))
        self.e_p = EmbeddingTable("embed.proc", vocab.num_proc, dim, derive_seed(seed, 11))
        self.e_m = EmbeddingTable("embed.med", vocab.num_med, dim, derive_seed(seed, 12))
        self.gcn_sw = GcnSwLayer("gcn_sw", buckets.safety, dim, hyper.ddi_lambda_init, derive_seed(seed, 20))
        self.gcn_diag = GcnMfLayer("gcn_mf.diag", buckets.diag, dim, derive_seed(seed, 21))
        self.gcn_proc = GcnMfLayer("gcn_mf.proc", buckets.proc, dim, derive_seed(seed, 22))
        self.rnn_d = GruLayer("rnn_d", dim, dim, derive_seed(seed, 30))
        self.rnn_p = GruLayer("rnn_p", dim, dim, derive_seed(seed, 31))
        self.rnn_m = GruLayer("rnn_m", dim, dim, derive_seed(seed, 32))
        self.mlp = LinearLayer(
            "stratmed.mlp", 3 * dim, vocab.num_med, derive_seed(seed, 33), Activation.SIGMOID, hyper.dropout
        )

    @property
    def tables(self) -> tuple[EmbeddingTable, EmbeddingTable, EmbeddingTable]:
        """Diagnosis, procedure, and medication tables."""
        return self.e_d, self.e_p, self.e_m

    def graph_parameters(self) -> list[Parameter]:
        """Parameters of the three graph layers."""
        return [*self.gcn_sw.parameters(), *self.gcn_diag.parameters(), *self.gcn_proc.parameters()]

    def parameters(self) -> list[Parameter]:
        """Trainable parameters."""
        return [
            *(t.weight for t in self.tables),
            *self.graph_parameters(),
            *self.rnn_d.parameters(),
            *self.rnn_p.parameters(),
            *self.rnn_m.parameters(),
            *self.mlp.parameters(),
        ]

    def predict_proba(self, history: Sequence[Visit]) -> np.ndarray:
        """Probabilities for the last visit of ``history`` in evaluation mode."""
        probs, _ = stratmed_forward(Tape(), self, history)
        return probs.values

    def predict(self, history: Sequence[Visit]) -> Prediction:
        """Probabilities and the ``delta``-thresholded set for the last visit."""
        probs = self.predict_proba(history)
        return Prediction(probs, predict_set(probs, self.hyper.delta))

    def sidecar(self) -> dict[str, object]:
        """Metadata written beside a checkpoint."""
        return {
            "model": "stratmed",
            "hyperparams": asdict(self.hyper),
            "ablation": asdict(self.ablation),
            "bucket_digest": self.buckets.digest(),
        }


def stratmed_forward(
    tape: Tape, model: StratMedModel, history: Sequence[Visit]
) -> tuple[Tensor, list[Tensor]]:
    """Medication probabilities for the last visit of ``history``.

    Every visit gets a graph representation (previous meds through GCN-SW,
    then projected onto its diagnoses and procedures by GCN-MF) plus the
    pre-training style representation as a residual. The result is cut into
    diagnosis, procedure, and medication thirds, each run through its own GRU.
    The medication third of visit ``s`` is built from the meds of visit ``s-1``,
    so it is zero for the first visit. Returns the probabilities and the
    residual inputs of every visit.
    """
    if not history:
        raise DataError("stratmed_forward needs at least one visit")
    visits = [Visit.of(v.diag_ids, v.proc_ids, v.med_ids) for v in history]
    primes: list[Tensor] = []
    streams: tuple[list[Tensor], list[Tensor], list[Tensor]] = ([], [], [])
    buckets = model.buckets
    for s, visit in enumerate(visits):
        _require_diagnoses(visit)
        prev_meds = visits[s - 1].med_ids if s else ()
        prime = _prime_representation(tape, model.tables, visit, prev_meds)
        primes.append(prime)
        if model.ablation.wo_sg:
            combined = prime
        else:
            med_nodes, e_m = gcn_sw_forward(
                tape, model.gcn_sw, prev_meds, tape.param(model.e_m.weight), buckets.safety, model.ddi
            )
            _, e_d = gcn_mf_forward(
                tape, model.gcn_diag, prev_meds, visit.diag_ids, med_nodes, tape.param(model.e_d.weight), buckets.diag
            )
            _, e_p = gcn_mf_forward(
                tape, model.gcn_proc, prev_meds, visit.proc_ids, med_nodes, tape.param(model.e_p.weight), buckets.proc
            )
            combined = tape.add(tape.concat([e_d, e_p, e_m]), prime)
        for stream, segment in zip(streams, tape.split(combined, 3), strict=True):
            stream.append(segment)
    hidden = tape.concat(
        [
            gru_forward(tape, model.rnn_d, streams[0]),
            gru_forward(tape, model.rnn_p, streams[1]),
            gru_forward(tape, model.rnn_m, streams[2]),
        ]
    )
    return linear_forward(tape, model.mlp, hidden), primes


def predict_set(probabilities: np.ndarray, delta: float) -> tuple[int, ...]:
    """Ids whose probability reaches ``delta``."""
    return tuple(int(i) for i in np.flatnonzero(np.asarray(probabilities) >= delta))


def _truth_vector(truth: np.ndarray | Sequence[float], pred: Tensor) -> np.ndarray:
    target = np.asarray(truth, dtype=np.float64)
    if target.shape != pred.shape:
        raise ShapeError(f"prediction shape {pred.shape} does not match truth shape {target.shape}")
    return target


def bce_loss(tape: Tape, pred: Tensor, truth: np.ndarray | Sequence[float]) -> Tensor:
    """Summed binary cross-entropy with probabilities clipped to ``[1e-12, 1 - 1e-12]``."""
    target = _truth_vector(truth, pred)
    p = tape.clip(pred, PROB_CLIP, 1.0 - PROB_CLIP)
    hits = tape.mul(tape.constant(target), tape.log(p))
    misses = tape.mul(tape.constant(1.0 - target), tape.log(tape.sub(tape.constant(1.0), p)))
    return tape.scale(tape.sum(tape.add(hits, misses)), -1.0)


def margin_loss(tape: Tape, pred: Tensor, truth: np.ndarray | Sequence[float]) -> Tensor:
    """Hinge over every (positive, negative) pair, divided by the medication count."""
    target = _truth_vector(truth, pred)
    positives = np.flatnonzero(target == 1)
    negatives = np.flatnonzero(target == 0)
    if positives.size == 0 or negatives.size == 0:
        return tape.constant(0.0)
    pos = tape.reshape(tape.gather(pred, positives), (positives.size, 1))
    neg = tape.reshape(tape.gather(pred, negatives), (1, negatives.size))
    hinge = tape.relu(tape.sub(tape.constant(1.0), tape.sub(pos, neg)))
    return tape.scale(tape.sum(hinge), 1.0 / target.size)


def ddi_loss(tape: Tape, pred: Tensor, ddi: DdiMatrix) -> Tensor:
    """``sum_ij a_ij p_i p_j`` over the symmetric interaction matrix."""
    if pred.shape != (ddi.size,):
        raise ShapeError(f"prediction shape {pred.shape} does not match {ddi.size} medications")
    neighbours = tape.matmul(tape.constant(ddi.matrix.astype(np.float64)), pred)
    return tape.sum(tape.mul(pred, neighbours))


def combine_terms(
    tape: Tape, bce: Tensor, margin: Tensor, ddi: Tensor | None, beta: float, gamma: float
) -> Tensor:
    """``beta * (gamma * bce + (1 - gamma) * margin) + (1 - beta) * ddi``."""
    accuracy = tape.scale(tape.add(tape.scale(bce, gamma), tape.scale(margin, 1.0 - gamma)), beta)
    if beta == 1.0 or ddi is None:
        return accuracy
    return tape.add(accuracy, tape.scale(ddi, 1.0 - beta))


def combined_loss(
    tape: Tape,
    pred: Tensor,
    truth: np.ndarray | Sequence[float],
    ddi: DdiMatrix,
    beta: float,
    gamma: float,
) -> Tensor:
    """Weighted sum of the accuracy losses and the interaction penalty."""
    if not (0 <= beta <= 1 and 0 <= gamma <= 1):
        raise ConfigError(f"beta and gamma must be in [0, 1], got beta={beta}, gamma={gamma}")
    interaction = ddi_loss(tape, pred, ddi) if beta < 1.0 else None
    return combine_terms(
        tape, bce_loss(tape, pred, truth), margin_loss(tape, pred, truth), interaction, beta, gamma
    )


def _train_patients(dataset: Dataset) -> list[PatientRecord]:
    patients = dataset.patients_in(Split.TRAIN)
    if not patients:
        raise DataError("training split is empty. Check the dataset split labels.")
    return patients


def train_pretrain(
    dataset: Dataset, ddi: DdiMatrix, hyper: Hyperparams
) -> tuple[PretrainModel, TrainingLog]:
    """Train the pre-training model one visit at a time with the combined loss."""
    hyper.validate()
    patients = _train_patients(dataset)
    model = PretrainModel(dataset.vocab, hyper)
    params = model.parameters()
    state = AdamState(lr=hyper.lr, weight_decay=hyper.weight_decay)
    rng = make_rng(hyper.seed, STREAM_SHUFFLE_PRETRAIN)
    log = TrainingLog()
    step = 0
    for epoch in range(1, hyper.pretrain_epochs + 1):
        total = 0.0
        visits = 0
        for p_index in rng.permutation(len(patients)):
            history = patients[int(p_index)].visits
            for t, visit in enumerate(history):
                step += 1
                tape = Tape(training=True, seed=derive_seed(hyper.seed, STREAM_DROPOUT_PRETRAIN, step))
                prev_meds = history[t - 1].med_ids if t else ()
                probs = pretrain_forward(tape, model, visit, prev_meds)
                target = multi_hot(visit.med_ids, dataset.vocab.num_med)
                loss = combined_loss(tape, probs, target, ddi, hyper.beta, hyper.gamma)
                total += loss.item()
                visits += 1
                backward(loss)
                adam_step(params, state)
        log.epoch_losses.append(total / visits)
        logging.info("pretrain epoch %d/%d loss=%.6f", epoch, hyper.pretrain_epochs, total / visits)
    log.best_epoch = hyper.pretrain_epochs
    return model, log


def transfer_embeddings(pretrained: PretrainModel, main: StratMedModel) -> None:
    """Copy the pre-trained embedding tables into ``main``."""
    for source, target in zip(pretrained.tables, main.tables, strict=True):
        if source.weight.shape != target.weight.shape:
            raise ShapeError(
                f"cannot transfer {source.weight.name}: shape {source.weight.shape} "
                f"vs {target.weight.shape}"
            )
        target.weight.values[...] = source.weight.values


def train_main(
    dataset: Dataset,
    buckets: BucketSet,
    ddi: DdiMatrix,
    hyper: Hyperparams,
    ablation: AblationFlags | None = None,
    pretrained: PretrainModel | None = None,
) -> tuple[StratMedModel, TrainingLog]:
    """Train the stratified model and keep the epoch with the best validation Jaccard.

    Each visit of each training patient is one step, predicted from the true
    history up to and including it. Without a validation split the last epoch
    is kept.
    """
    hyper.validate()
    patients = _train_patients(dataset)
    model = StratMedModel(dataset.vocab, buckets, ddi, hyper, ablation)
    if pretrained is not None and not model.ablation.wo_p:
        transfer_embeddings(pretrained, model)
    params = model.parameters()
    graph_params = model.graph_parameters()
    state = AdamState(lr=hyper.lr, weight_decay=hyper.weight_decay)
    rng = make_rng(hyper.seed, STREAM_SHUFFLE_MAIN)
    has_val = bool(dataset.patients_in(Split.VAL))
    log = TrainingLog()
    best: list[np.ndarray] | None = None
    best_score = -1.0
    step = 0
    for epoch in range(1, hyper.epochs + 1):
        total = 0.0
        visits = 0
        for p_index in rng.permutation(len(patients)):
            history = patients[int(p_index)].visits
            for t, visit in enumerate(history):
                step += 1
                tape = Tape(training=True, seed=derive_seed(hyper.seed, STREAM_DROPOUT_MAIN, step))
                probs, _ = stratmed_forward(tape, model, history[: t + 1])
                target = multi_hot(visit.med_ids, dataset.vocab.num_med)
                loss = combined_loss(tape, probs, target, ddi, hyper.beta, hyper.gamma)
                total += loss.item()
                visits += 1
                backward(loss)
                for p in graph_params:
                    log.graph_grad_max = max(log.graph_grad_max, float(np.abs(p.gradient).max()))
                adam_step(params, state)
        log.epoch_losses.append(total / visits)
        if has_val:
            score = evaluate(model, dataset, Split.VAL, ddi, hyper.delta).jaccard
            log.val_jaccard.append(score)
            logging.info(
                "train epoch %d/%d loss=%.6f val_jaccard=%.4f", epoch, hyper.epochs, total / visits, score
            )
            if score > best_score:
                best_score = score
                log.best_epoch = epoch
                best = [p.values.copy() for p in params]
        else:
            logging.info("train epoch %d/%d loss=%.6f", epoch, hyper.epochs, total / visits)
            log.best_epoch = epoch
    if best is not None:
        for p, values in zip(params, best, strict=True):
            p.values[...] = values
    logging.info("Selected epoch %d (%s)", log.best_epoch, model.ablation.label)
    return model, log


def sidecar_path(path: Path) -> Path:
    """Return the JSON metadata file written beside a model checkpoint."""
    return path.with_name(path.name + ".json")


def save_model(model: PretrainModel | StratMedModel, path: Path, best_epoch: int = 0) -> None:
    """Write the parameter checkpoint and its JSON sidecar."""
    save_checkpoint(model.parameters(), path)
    meta = {**model.sidecar(), "best_epoch": best_epoch}
    atomic_write(sidecar_path(path), json.dumps(meta, indent=2, sort_keys=True).encode("utf-8"))


def _read_sidecar(path: Path, kind: str) -> dict[str, object]:
    try:
        meta = json.loads(sidecar_path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as e:
        raise DataError(f"Failed to read model sidecar for {path}. Retrain the model.") from e
    if meta.get("model") != kind:
        raise DataError(f"{path} holds a {meta.get('model')!r} model, expected {kind!r}")
    return meta


def load_pretrained(path: Path, vocab: EntityVocab) -> PretrainModel:
    """Rebuild a pre-training model from ``save_model`` output."""
    meta = _read_sidecar(path, "pretrain")
    model = PretrainModel(vocab, Hyperparams(**meta["hyperparams"]))  # type: ignore[arg-type]
    restore_parameters(model.parameters(), load_checkpoint(path))
    return model


def load_model(path: Path, vocab: EntityVocab, buckets: BucketSet, ddi: DdiMatrix) -> StratMedModel:
    """Rebuild a stratified model; the buckets must match the ones it was trained on."""
    meta = _read_sidecar(path, "stratmed")
    model = StratMedModel(
        vocab,
        buckets,
        ddi,
        Hyperparams(**meta["hyperparams"]),  # type: ignore[arg-type]
        AblationFlags(**meta["ablation"]),  # type: ignore[arg-type]
    )
    if meta.get("bucket_digest") != model.buckets.digest():
        raise DataError(f"{path} was trained on different buckets. Rerun the stratify stage.")
    restore_parameters(model.parameters(), load_checkpoint(path))
    return model
