"""Per-visit recommendation metrics and bootstrap test-set evaluation."""

from __future__ import annotations

import csv
import io
import json
import logging
import math
from collections.abc import Iterable, Sequence
from dataclasses import dataclass, field
from itertools import combinations
from typing import Protocol

import numpy as np

from ehr import Dataset, DdiMatrix, PatientRecord, Split, Visit
from errors import ConfigError, DataError
from numerics import make_rng

METRIC_NAMES = ("jaccard", "ddi", "f1", "prauc", "avg_drugs")
STREAM_BOOTSTRAP = 201


class Predictor(Protocol):
    """Anything that scores medications for the last visit of a history."""

    def predict_proba(self, history: Sequence[Visit]) -> np.ndarray:
        """Return one probability per medication."""
        ...


def jaccard_visit(pred: Iterable[int], truth: Iterable[int]) -> float:
    """Intersection over union; two empty sets score 1."""
    p, t = set(pred), set(truth)
    union = p | t
    if not union:
        return 1.0
    return len(p & t) / len(union)


def f1_visit(pred: Iterable[int], truth: Iterable[int]) -> float:
    """Harmonic mean of precision and recall; 0 for an empty prediction."""
    p, t = set(pred), set(truth)
    if not t:
        raise DataError("F1 is undefined for an empty true medication set")
    hits = len(p & t)
    if not p or not hits:
        return 0.0
    precision = hits / len(p)
    recall = hits / len(t)
    return 2 * precision * recall / (precision + recall)


def prauc_visit(probabilities: Sequence[float] | np.ndarray, truth: Iterable[int]) -> float:
    """Area under the precision-recall curve from a ranked sweep.

    Medications are ranked by descending probability, ties by ascending id;
    each true medication at rank ``k`` adds ``precision@k / |truth|``.
    """
    t = set(truth)
    if not t:
        raise DataError("PRAUC is undefined for an empty true medication set")
    scores = np.asarray(probabilities, dtype=np.float64)
    order = np.argsort(-scores, kind="stable")
    area = 0.0
    hits = 0
    for rank, med in enumerate(order, start=1):
        if int(med) in t:
            hits += 1
            area += hits / rank / len(t)
    return area


def interacting_pairs(pred: Iterable[int], ddi: DdiMatrix) -> tuple[int, int]:
    """Return ``(interacting, total)`` unordered pair counts within one set."""
    meds = sorted(set(pred))
    total = 0
    hits = 0
    for i, j in combinations(meds, 2):
        total += 1
        hits += int(ddi.matrix[i, j])
    return hits, total


def ddi_rate(pred_sets: Iterable[Iterable[int]], ddi: DdiMatrix) -> float:
    """Interacting pairs over all pairs, summed across every predicted set."""
    hits = 0
    total = 0
    for pred in pred_sets:
        h, n = interacting_pairs(pred, ddi)
        hits += h
        total += n
    return hits / total if total else 0.0


def avg_drugs(pred_sets: Iterable[Iterable[int]]) -> float:
    """Mean predicted set size."""
    sizes = [len(set(s)) for s in pred_sets]
    return sum(sizes) / len(sizes) if sizes else 0.0


@dataclass(frozen=True)
class VisitScore:
    """Metric inputs and per-visit scores for one predicted visit."""

    patient_id: str
    pred: tuple[int, ...]
    jaccard: float
    f1: float
    prauc: float
    ddi_hits: int
    ddi_pairs: int


@dataclass(frozen=True)
class MetricStat:
    """Mean and sample standard deviation over bootstrap rounds."""

    mean: float
    std: float = 0.0


@dataclass(frozen=True)
class MetricsReport:
    """The five metrics, either from one evaluation or aggregated over rounds."""

    jaccard: float
    ddi: float
    f1: float
    prauc: float
    avg_drugs: float
    stats: dict[str, MetricStat] = field(default_factory=dict)
    per_patient: dict[str, float] = field(default_factory=dict)
    rounds: int = 1
    seed: int | None = None
    visits: int = 0

    def to_json(self) -> dict[str, object]:
        """Report record with ``{mean, std}`` per metric."""
        doc: dict[str, object] = {}
        for name in METRIC_NAMES:
            stat = self.stats.get(name, MetricStat(getattr(self, name)))
            doc[name] = {"mean": stat.mean, "std": stat.std}
        doc["rounds"] = self.rounds
        doc["seed"] = self.seed
        if self.per_patient:
            doc["per_patient"] = dict(self.per_patient)
        return doc

    def dumps(self) -> str:
        """JSON text of ``to_json``."""
        return json.dumps(self.to_json(), indent=2, sort_keys=True) + "\n"

    def csv_row(self, label: str = "") -> str:
        """Header plus one flat row: label, then mean and std per metric."""
        buffer = io.StringIO()
        writer = csv.writer(buffer, lineterminator="\n")
        doc = self.to_json()
        writer.writerow(["variant", *(f"{n}_{k}" for n in METRIC_NAMES for k in ("mean", "std"))])
        writer.writerow(
            [label, *(repr(doc[n][k]) for n in METRIC_NAMES for k in ("mean", "std"))]  # type: ignore[index]
        )
        return buffer.getvalue()


def score_patient(model: Predictor, patient: PatientRecord, ddi: DdiMatrix, delta: float) -> list[VisitScore]:
    """Score every visit of one patient from its true history."""
    scores = []
    for t, visit in enumerate(patient.visits):
        probs = model.predict_proba(patient.visits[: t + 1])
        pred = tuple(int(i) for i in np.flatnonzero(probs >= delta))
        hits, pairs = interacting_pairs(pred, ddi)
        scores.append(
            VisitScore(
                patient.patient_id,
                pred,
                jaccard_visit(pred, visit.med_ids),
                f1_visit(pred, visit.med_ids),
                prauc_visit(probs, visit.med_ids),
                hits,
                pairs,
            )
        )
    return scores


def summarize(scores: Sequence[VisitScore]) -> MetricsReport:
    """Per-visit means, the corpus-level DDI rate, and per-patient means."""
    if not scores:
        raise DataError("no visits to evaluate")
    pairs = sum(s.ddi_pairs for s in scores)
    by_patient: dict[str, list[VisitScore]] = {}
    for s in scores:
        by_patient.setdefault(s.patient_id, []).append(s)
    per_patient = {
        name: float(np.mean([np.mean([getattr(s, name) for s in group]) for group in by_patient.values()]))
        for name in ("jaccard", "f1", "prauc")
    }
    return MetricsReport(
        jaccard=float(np.mean([s.jaccard for s in scores])),
        ddi=sum(s.ddi_hits for s in scores) / pairs if pairs else 0.0,
        f1=float(np.mean([s.f1 for s in scores])),
        prauc=float(np.mean([s.prauc for s in scores])),
        avg_drugs=avg_drugs(s.pred for s in scores),
        per_patient=per_patient,
        visits=len(scores),
    )


def evaluate(
    model: Predictor, dataset: Dataset, split: Split | None, ddi: DdiMatrix, delta: float = 0.5
) -> MetricsReport:
    """Score every visit of one split given its true prior visits."""
    patients = dataset.patients_in(split)
    if not patients:
        raise DataError(f"{split or 'dataset'} split has no patients to evaluate")
    return summarize([s for p in patients for s in score_patient(model, p, ddi, delta)])


def bootstrap_evaluate(
    model: Predictor,
    dataset: Dataset,
    ddi: DdiMatrix,
    rounds: int = 10,
    fraction: float = 0.8,
    seed: int = 0,
    delta: float = 0.5,
    *,
    replace: bool = True,
    split: Split = Split.TEST,
) -> MetricsReport:
    """Resample test patients ``rounds`` times and report mean and sample std.

    Each round draws ``ceil(fraction * n)`` patients; every patient is scored
    once up front, so rounds only re-aggregate.
    """
    if rounds < 1:
        raise ConfigError(f"bootstrap rounds must be >= 1, got {rounds}")
    if not 0 < fraction <= 1:
        raise ConfigError(f"bootstrap fraction must be in (0, 1], got {fraction}")
    patients = dataset.patients_in(split)
    if not patients:
        raise DataError(f"{split} split is empty; nothing to bootstrap")
    scored = [score_patient(model, p, ddi, delta) for p in patients]
    size = math.ceil(fraction * len(patients))
    rng = make_rng(seed, STREAM_BOOTSTRAP)
    reports = []
    for _ in range(rounds):
        picks = rng.choice(len(patients), size=size, replace=replace)
        reports.append(summarize([s for i in picks for s in scored[int(i)]]))
    stats = {}
    for name in METRIC_NAMES:
        values = np.array([getattr(r, name) for r in reports])
        std = float(values.std(ddof=1)) if rounds > 1 else 0.0
        stats[name] = MetricStat(float(values.mean()), std)
    logging.info(
        "Bootstrap %d rounds x %d patients: jaccard=%.4f+-%.4f ddi=%.4f",
        rounds,
        size,
        stats["jaccard"].mean,
        stats["jaccard"].std,
        stats["ddi"].mean,
    )
    return MetricsReport(
        **{name: stats[name].mean for name in METRIC_NAMES},
        stats=stats,
        rounds=rounds,
        seed=seed,
        visits=sum(len(s) for s in scored),
    )
