"""Co-occurrence counting and pyramid relevance stratification.

A bucket sorts every entity pair of one relationship type by how often the two
entities appear together in training visits, then cuts the sorted list into
layers whose sizes grow geometrically from the top. Each layer gets one
relevance score; the top (smallest, most correlated) layer scores highest.
Mapping buckets first erase pairs seen fewer than ``theta`` times.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import math
from collections.abc import Iterable
from dataclasses import dataclass, fields
from enum import StrEnum
from pathlib import Path

import numpy as np

from ehr import Dataset, EntityVocab, Split, Visit
from errors import ConfigError, DataError, ShapeError
from numerics import atomic_write

ERASED = -1


class BucketKind(StrEnum):
    """Relationship type a bucket stratifies."""

    SAFETY = "safety"
    MAPPING_DIAG = "mapping-diag"
    MAPPING_PROC = "mapping-proc"


@dataclass(frozen=True, eq=False)
class CoOccurrence:
    """Visit-level co-occurrence counts between medications and other entities."""

    med_med: np.ndarray
    med_diag: np.ndarray
    med_proc: np.ndarray
    total_visits: int
    all_visits: int

    def merge(self, other: CoOccurrence) -> CoOccurrence:
        """Add the counts of two disjoint visit sets."""
        if self.med_diag.shape != other.med_diag.shape or self.med_proc.shape != other.med_proc.shape:
            raise ShapeError("cannot merge co-occurrence counts over different vocabularies")
        return CoOccurrence(
            self.med_med + other.med_med,
            self.med_diag + other.med_diag,
            self.med_proc + other.med_proc,
            self.total_visits + other.total_visits,
            self.all_visits + other.all_visits,
        )


def count_visits(visits: Iterable[Visit], vocab: EntityVocab) -> CoOccurrence:
    """Count co-occurrences over ``visits``; the med-med diagonal holds med occurrence counts."""
    med_med = np.zeros((vocab.num_med, vocab.num_med), dtype=np.int64)
    med_diag = np.zeros((vocab.num_med, vocab.num_diag), dtype=np.int64)
    med_proc = np.zeros((vocab.num_med, vocab.num_proc), dtype=np.int64)
    total = 0
    for visit in visits:
        meds = np.asarray(visit.med_ids, dtype=np.intp)
        med_med[np.ix_(meds, meds)] += 1
        med_diag[np.ix_(meds, np.asarray(visit.diag_ids, dtype=np.intp))] += 1
        med_proc[np.ix_(meds, np.asarray(visit.proc_ids, dtype=np.intp))] += 1
        total += 1
    return CoOccurrence(med_med, med_diag, med_proc, total, total)


def count_cooccurrence(dataset: Dataset, split: Split | None = Split.TRAIN) -> CoOccurrence:
    """Count co-occurrences over one split, recording the all-split visit total too."""
    cooc = count_visits(dataset.visits_in(split), dataset.vocab)
    logging.info(
        "Counted co-occurrences over %d %s visits",
        cooc.total_visits,
        split or "all",
    )
    return CoOccurrence(
        cooc.med_med, cooc.med_diag, cooc.med_proc, cooc.total_visits, dataset.num_visits
    )


@dataclass(frozen=True)
class StratParams:
    """Pyramid shape and erasure settings for the three buckets."""

    q_mm: int = 60
    q_md: int = 150
    q_mp: int = 150
    k: float = 2.0
    theta_fraction: float = 0.0003
    rho_md: float = 0.8
    rho_mp: float = 0.8
    theta_basis: str = "train"

    def validate(self) -> None:
        """Raise ``ConfigError`` on out-of-range settings."""
        for name in ("q_mm", "q_md", "q_mp"):
            if getattr(self, name) < 1:
                raise ConfigError(f"strat.{name} must be at least 1")
        if self.k <= 1:
            raise ConfigError(f"strat.k must be > 1, got {self.k}")
        if self.theta_fraction < 0:
            raise ConfigError("strat.theta_fraction must be >= 0")
        for name in ("rho_md", "rho_mp"):
            if not 0 < getattr(self, name) <= 1:
                raise ConfigError(f"strat.{name} must be in (0, 1]")
        if self.theta_basis not in ("train", "all"):
            raise ConfigError(f"strat.theta_basis must be 'train' or 'all', got {self.theta_basis!r}")


@dataclass(frozen=True)
class LayerPlan:
    """Layer sizes from top to bottom; ``undersized`` flags a domain smaller than ``q``."""

    sizes: tuple[int, ...]
    undersized: bool = False

    @property
    def n(self) -> int:
        """Number of layers."""
        return len(self.sizes)


def layer_sizes(total: int, q: int, k: float) -> LayerPlan:
    """Split ``total`` pairs into layers of size ``round(q * k**i)``.

    Layers are added while they fit; whatever is left becomes the final layer.
    """
    if total < 1:
        raise ConfigError(f"layer_sizes needs at least one pair, got {total}")
    if q < 1 or k <= 1:
        raise ConfigError(f"layer_sizes needs q >= 1 and k > 1, got q={q}, k={k}")
    if total < q:
        logging.warning("Pair domain of %d is smaller than the top layer size %d", total, q)
        return LayerPlan((total,), undersized=True)
    sizes: list[int] = []
    remaining = total
    while remaining:
        size = math.floor(q * k ** len(sizes) + 0.5)
        if size > remaining:
            size = remaining
        sizes.append(size)
        remaining -= size
    return LayerPlan(tuple(sizes))


def _skewness(x: np.ndarray) -> float:
    if x.size == 0:
        return 0.0
    std = float(x.std())
    if std == 0.0:
        return 0.0
    return float(np.mean(((x - x.mean()) / std) ** 3))


@dataclass(frozen=True, eq=False)
class RelevanceBucket:
    """Layer assignment for every pair of one relationship type.

    ``layer_of[i, j]`` is the 0-based layer of pair ``(i, j)`` or ``ERASED``.
    ``relevances[l]`` is the score of layer ``l``. ``counts`` are the raw
    co-occurrence counts the layering was built from.
    """

    kind: BucketKind
    layer_of: np.ndarray
    sizes: tuple[int, ...]
    relevances: tuple[float, ...]
    counts: np.ndarray
    undersized: bool = False

    @property
    def n(self) -> int:
        """Number of layers."""
        return len(self.sizes)

    @property
    def erased_count(self) -> int:
        """Number of pairs erased below ``theta``."""
        return int(np.count_nonzero(self.layer_of == ERASED))

    def relevance_matrix(self) -> np.ndarray:
        """Per-pair relevance, 0 where erased."""
        table = np.asarray(self.relevances, dtype=np.float64)
        return np.where(self.layer_of >= 0, table[np.maximum(self.layer_of, 0)], 0.0)

    def flattening(self) -> dict[str, float]:
        """Spread of relevance vs. min-max-normalized counts over non-erased pairs."""
        kept = self.layer_of >= 0
        relevance = self.relevance_matrix()[kept]
        raw = self.counts[kept].astype(np.float64)
        span = raw.max() - raw.min() if raw.size else 0.0
        normalized = (raw - raw.min()) / span if span else np.zeros_like(raw)
        return {
            "relevance_variance": float(relevance.var()) if relevance.size else 0.0,
            "relevance_skewness": _skewness(relevance),
            "count_variance": float(normalized.var()) if normalized.size else 0.0,
            "count_skewness": _skewness(normalized),
        }

    def summary(self) -> dict[str, object]:
        """Summary record used in reports and model sidecars."""
        return {
            "kind": str(self.kind),
            "n": self.n,
            "layer_sizes": list(self.sizes),
            "relevances": list(self.relevances),
            "erased": self.erased_count,
            "undersized": self.undersized,
            "flattening": self.flattening(),
        }

    def to_json(self) -> dict[str, object]:
        """Serialize summary, layer matrix, and counts."""
        return {
            **self.summary(),
            "layer_of": self.layer_of.tolist(),
            "counts": self.counts.tolist(),
        }

    @classmethod
    def from_json(cls, data: dict[str, object]) -> RelevanceBucket:
        """Rebuild a bucket written by ``to_json``."""
        try:
            return cls(
                BucketKind(data["kind"]),
                np.asarray(data["layer_of"], dtype=np.int64),
                tuple(int(s) for s in data["layer_sizes"]),  # type: ignore[union-attr]
                tuple(float(r) for r in data["relevances"]),  # type: ignore[union-attr]
                np.asarray(data["counts"], dtype=np.int64),
                bool(data.get("undersized", False)),
            )
        except (KeyError, TypeError, ValueError) as e:
            raise DataError(f"Malformed bucket record ({e}). Rebuild with the stratify stage.") from e


def _relevances(n: int, rho: float) -> tuple[float, ...]:
    return tuple(rho * (n - i) / n for i in range(n))


def _assign(order: np.ndarray, plan: LayerPlan, shape: tuple[int, ...]) -> np.ndarray:
    layer_flat = np.full(math.prod(shape), ERASED, dtype=np.int64)
    layer_flat[order] = np.repeat(np.arange(plan.n), plan.sizes)
    return layer_flat.reshape(shape)


def build_safety_bucket(cooc: CoOccurrence, params: StratParams) -> RelevanceBucket:
    """Stratify all ordered med-med pairs, diagonal included.

    Ties sort by the unordered pair ``(min, max)`` so a pair and its mirror are
    adjacent; when a layer boundary falls between them, both take the upper
    layer of the canonical ``(i, j), i <= j`` entry. Layer sizes are counted
    after mirroring, and a layer left empty by it is removed.
    """
    counts = cooc.med_med
    size = counts.shape[0]
    rows, cols = np.indices(counts.shape)
    rows, cols, flat = rows.ravel(), cols.ravel(), counts.ravel()
    order = np.lexsort((rows, np.maximum(rows, cols), np.minimum(rows, cols), -flat))
    plan = layer_sizes(size * size, params.q_mm, params.k)
    layers = _assign(order, plan, counts.shape)
    layers = np.triu(layers) + np.tril(layers.T, -1)
    used = np.unique(layers)
    if used.size < plan.n:
        logging.info("Safety bucket: %d of %d layers emptied by mirroring", plan.n - used.size, plan.n)
        layers = np.searchsorted(used, layers).astype(np.int64)
    sizes = tuple(int(s) for s in np.bincount(layers.ravel(), minlength=used.size))
    bucket = RelevanceBucket(
        BucketKind.SAFETY, layers, sizes, _relevances(used.size, 1.0), counts.copy(), plan.undersized
    )
    logging.info("Safety bucket: %d layers over %d pairs", bucket.n, size * size)
    return bucket


def theta_for(cooc: CoOccurrence, params: StratParams) -> float:
    """Erasure threshold: ``theta_fraction`` times the chosen visit total."""
    visits = cooc.total_visits if params.theta_basis == "train" else cooc.all_visits
    return params.theta_fraction * visits


def build_mapping_bucket(cooc: CoOccurrence, params: StratParams, kind: str) -> RelevanceBucket:
    """Stratify med-diag (``kind="diag"``) or med-proc pairs after erasing rare pairs."""
    if kind == "diag":
        counts, q, rho, bucket_kind = cooc.med_diag, params.q_md, params.rho_md, BucketKind.MAPPING_DIAG
    elif kind == "proc":
        counts, q, rho, bucket_kind = cooc.med_proc, params.q_mp, params.rho_mp, BucketKind.MAPPING_PROC
    else:
        raise ConfigError(f"mapping bucket kind must be 'diag' or 'proc', got {kind!r}")
    theta = theta_for(cooc, params)
    flat = counts.ravel()
    kept = np.flatnonzero(flat >= theta)
    if kept.size == 0:
        raise ConfigError(
            f"Every med-{kind} pair falls below theta={theta:.4f}; stratification is degenerate. "
            "Lower strat.theta_fraction."
        )
    rows, cols = np.divmod(kept, counts.shape[1])
    order = kept[np.lexsort((cols, rows, -flat[kept]))]
    plan = layer_sizes(int(kept.size), q, params.k)
    layers = _assign(order, plan, counts.shape)
    bucket = RelevanceBucket(
        bucket_kind, layers, plan.sizes, _relevances(plan.n, rho), counts.copy(), plan.undersized
    )
    logging.info(
        "Mapping bucket %s: theta=%.4f erased %d of %d pairs, %d layers",
        bucket_kind,
        theta,
        bucket.erased_count,
        flat.size,
        bucket.n,
    )
    return bucket


def flat_bucket(kind: BucketKind, counts: np.ndarray) -> RelevanceBucket:
    """Single-layer bucket with relevance 1.0 and no erasure."""
    layers = np.zeros(counts.shape, dtype=np.int64)
    return RelevanceBucket(kind, layers, (int(counts.size),), (1.0,), counts.copy())


def relevance_lookup(bucket: RelevanceBucket, pair: tuple[int, int]) -> tuple[int, float] | None:
    """Return ``(1-based layer, relevance)`` for a pair, or ``None`` when erased."""
    i, j = pair
    rows, cols = bucket.layer_of.shape
    if not (0 <= i < rows and 0 <= j < cols):
        raise ShapeError(f"pair {pair} is outside the {rows}x{cols} {bucket.kind} domain")
    layer = int(bucket.layer_of[i, j])
    if layer == ERASED:
        return None
    return layer + 1, bucket.relevances[layer]


@dataclass(frozen=True, eq=False)
class BucketSet:
    """The safety bucket and the two mapping buckets a model is built on."""

    safety: RelevanceBucket
    diag: RelevanceBucket
    proc: RelevanceBucket

    def flattened(self) -> BucketSet:
        """Single-layer buckets at relevance 1.0 over the same counts."""
        return BucketSet(*(flat_bucket(b.kind, b.counts) for b in (self.safety, self.diag, self.proc)))

    def summaries(self) -> dict[str, dict[str, object]]:
        """Summary record per bucket."""
        return {f.name: getattr(self, f.name).summary() for f in fields(self)}

    def digest(self) -> str:
        """SHA-256 over the canonical JSON of every layer matrix and relevance list."""
        payload = json.dumps(
            {
                f.name: [getattr(self, f.name).layer_of.tolist(), list(getattr(self, f.name).relevances)]
                for f in fields(self)
            },
            sort_keys=True,
            separators=(",", ":"),
        )
        return hashlib.sha256(payload.encode("utf-8")).hexdigest()

    def save(self, path: Path) -> None:
        """Write all three buckets as one JSON document."""
        doc = {f.name: getattr(self, f.name).to_json() for f in fields(self)}
        atomic_write(path, json.dumps(doc, separators=(",", ":")).encode("utf-8"))

    @classmethod
    def load(cls, path: Path) -> BucketSet:
        """Read buckets written by ``save``."""
        try:
            doc = json.loads(path.read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as e:
            raise DataError(f"Failed to read buckets from {path}. Rerun the stratify stage.") from e
        return cls(*(RelevanceBucket.from_json(doc[f.name]) for f in fields(cls)))


def build_buckets(cooc: CoOccurrence, params: StratParams, *, stratified: bool = True) -> BucketSet:
    """Build all three buckets; ``stratified=False`` gives flat single-layer buckets."""
    params.validate()
    if not stratified:
        logging.info("Stratification disabled: using flat single-layer buckets")
        return BucketSet(
            flat_bucket(BucketKind.SAFETY, cooc.med_med),
            flat_bucket(BucketKind.MAPPING_DIAG, cooc.med_diag),
            flat_bucket(BucketKind.MAPPING_PROC, cooc.med_proc),
        )
    return BucketSet(
        build_safety_bucket(cooc, params),
        build_mapping_bucket(cooc, params, "diag"),
        build_mapping_bucket(cooc, params, "proc"),
    )


def export_distribution(source: RelevanceBucket | np.ndarray, mode: str, path: Path) -> None:
    """Write a count (``before``) or relevance (``after``) matrix as CSV.

    The first row holds the column ids; each following row is one matrix row.
    """
    if mode == "before":
        matrix = source.counts if isinstance(source, RelevanceBucket) else np.asarray(source)
        cell = str
    elif mode == "after":
        if not isinstance(source, RelevanceBucket):
            raise ConfigError("after-mode export needs a RelevanceBucket")
        matrix = source.relevance_matrix()
        cell = repr
    else:
        raise ConfigError(f"export mode must be 'before' or 'after', got {mode!r}")
    if matrix.ndim != 2:
        raise ShapeError(f"distribution export needs a 2-D matrix, got shape {matrix.shape}")
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(range(matrix.shape[1]))
    for row in matrix.tolist():
        writer.writerow(cell(v) for v in row)
    atomic_write(path, buffer.getvalue().encode("utf-8"))
