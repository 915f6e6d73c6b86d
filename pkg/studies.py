"""Experiment protocols: distortion, robustness, sensitivity, ablation, and case studies.

Each protocol is a grid of independent cells (one model fit per cell). Cells
run in order, or in worker processes when ``workers > 1``; results are merged
in cell order so the output does not depend on the worker count.
"""

from __future__ import annotations

import csv
import io
import json
import logging
from collections.abc import Callable, Sequence
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, fields, replace
from pathlib import Path
from typing import TypeVar

import numpy as np

from config import RunConfig
from ehr import Dataset, DdiMatrix, Split, distort_dataset, filter_low_frequency, shuffle_labels
from errors import DataError
from metrics import METRIC_NAMES, evaluate
from models import AblationFlags, StratMedModel
from numerics import atomic_write
from pipeline import fit
from stratify import BucketSet

CellT = TypeVar("CellT")
RowT = TypeVar("RowT")

STRATIFIED_VARIANTS = {"full": AblationFlags(), "wo_s": AblationFlags(wo_s=True)}
ABLATION_VARIANTS = ("full", "wo_p", "wo_s", "wo_sg", "no_ddi", "shuffled")


def run_cells(fn: Callable[[CellT], RowT], cells: Sequence[CellT], workers: int = 1) -> list[RowT]:
    """Evaluate ``fn`` on every cell, in worker processes when ``workers > 1``."""
    logging.info("Running %d study cells with %d worker(s)", len(cells), workers)
    if workers <= 1 or len(cells) <= 1:
        return [fn(cell) for cell in cells]
    with ProcessPoolExecutor(max_workers=workers) as executor:
        return list(executor.map(fn, cells))


def write_rows(path: Path, header: Sequence[str], rows: Sequence[Sequence[object]]) -> None:
    """Write a CSV with a header row."""
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow(repr(v) if isinstance(v, float) else v for v in row)
    atomic_write(path, buffer.getvalue().encode("utf-8"))


def _with_seed(config: RunConfig, seed: int) -> RunConfig:
    return replace(config, model=replace(config.model, seed=seed))


@dataclass(frozen=True)
class DistortionCell:
    """One model fit of the distortion study."""

    config: RunConfig
    dataset: Dataset
    ddi: DdiMatrix
    level: int
    variant: str
    seed: int


@dataclass(frozen=True)
class DistortionRow:
    """Train and test Jaccard for one level and variant, averaged over seeds."""

    level: int
    variant: str
    train_jaccard: float
    test_jaccard: float
    gap: float


def distortion_cell(cell: DistortionCell) -> tuple[float, float]:
    """Distort, fit, and score one cell on the train and test splits."""
    config = _with_seed(cell.config, cell.seed)
    dataset = distort_dataset(cell.dataset, cell.level, cell.seed)
    result = fit(dataset, cell.ddi, config.strat, config.model, STRATIFIED_VARIANTS[cell.variant])
    delta = config.model.delta
    train = evaluate(result.model, dataset, Split.TRAIN, cell.ddi, delta).jaccard
    test = evaluate(result.model, dataset, Split.TEST, cell.ddi, delta).jaccard
    logging.info(
        "distortion level=%d variant=%s seed=%d train=%.4f test=%.4f",
        cell.level,
        cell.variant,
        cell.seed,
        train,
        test,
    )
    return train, test


def distortion_study(
    config: RunConfig, dataset: Dataset, ddi: DdiMatrix, path: Path | None = None
) -> list[DistortionRow]:
    """Train/test Jaccard gap per distortion level for the stratified and flat variants."""
    study = config.study
    cells = [
        DistortionCell(config, dataset, ddi, level, variant, seed)
        for level in study.levels
        for variant in STRATIFIED_VARIANTS
        for seed in study.seeds
    ]
    results = run_cells(distortion_cell, cells, config.run.workers)
    rows = []
    per_group = len(study.seeds)
    for start in range(0, len(cells), per_group):
        group = results[start : start + per_group]
        train = float(np.mean([r[0] for r in group]))
        test = float(np.mean([r[1] for r in group]))
        cell = cells[start]
        rows.append(DistortionRow(cell.level, cell.variant, train, test, train - test))
    if path is not None:
        write_rows(path, [f.name for f in fields(DistortionRow)], [_astuple(r) for r in rows])
    return rows


@dataclass(frozen=True)
class RobustnessCell:
    """One model fit of the robustness study, scored at every threshold."""

    config: RunConfig
    dataset: Dataset
    ddi: DdiMatrix
    variant: str
    seed: int


@dataclass(frozen=True)
class RobustnessRow:
    """Mean test Jaccard change after filtering frequent entities."""

    mu: int
    variant: str
    jaccard_delta: float


def robustness_cell(cell: RobustnessCell) -> list[float]:
    """Fit once, then score the test split filtered at each threshold against the unfiltered one."""
    config = _with_seed(cell.config, cell.seed)
    result = fit(cell.dataset, cell.ddi, config.strat, config.model, STRATIFIED_VARIANTS[cell.variant])
    delta = config.model.delta
    test_only = cell.dataset.with_patients(cell.dataset.patients_in(Split.TEST))
    base = evaluate(result.model, test_only, Split.TEST, cell.ddi, delta).jaccard
    deltas = []
    for mu in config.study.mus:
        filtered = filter_low_frequency(test_only, mu)
        if not filtered.patients:
            logging.warning("Filtering at mu=%s%% removed every test visit", mu)
            deltas.append(float("nan"))
            continue
        score = evaluate(result.model, filtered, Split.TEST, cell.ddi, delta).jaccard
        deltas.append(score - base)
    return deltas


def robustness_study(
    config: RunConfig, dataset: Dataset, ddi: DdiMatrix, path: Path | None = None
) -> list[RobustnessRow]:
    """Jaccard change under low-frequency filtering of the test split."""
    cells = [
        RobustnessCell(config, dataset, ddi, variant, seed)
        for variant in STRATIFIED_VARIANTS
        for seed in config.study.seeds
    ]
    results = run_cells(robustness_cell, cells, config.run.workers)
    rows = []
    for v_index, variant in enumerate(STRATIFIED_VARIANTS):
        group = results[v_index * len(config.study.seeds) : (v_index + 1) * len(config.study.seeds)]
        for m_index, mu in enumerate(config.study.mus):
            rows.append(RobustnessRow(mu, variant, float(np.mean([g[m_index] for g in group]))))
    rows.sort(key=lambda r: (r.mu, list(STRATIFIED_VARIANTS).index(r.variant)))
    if path is not None:
        write_rows(path, [f.name for f in fields(RobustnessRow)], [_astuple(r) for r in rows])
    return rows


@dataclass(frozen=True)
class SensitivityCell:
    """One model fit at a given pair of top-layer sizes."""

    config: RunConfig
    dataset: Dataset
    ddi: DdiMatrix
    q_mm: int
    q_map: int
    seed: int


@dataclass(frozen=True)
class SensitivityRow:
    """Mean test Jaccard and DDI rate for one top-layer size pair."""

    q_mm: int
    q_map: int
    jaccard: float
    ddi_rate: float


def sensitivity_cell(cell: SensitivityCell) -> tuple[float, float]:
    """Fit with the cell's top-layer sizes and score the test split."""
    config = _with_seed(cell.config, cell.seed)
    params = replace(config.strat, q_mm=cell.q_mm, q_md=cell.q_map, q_mp=cell.q_map)
    result = fit(cell.dataset, cell.ddi, params, config.model, AblationFlags())
    report = evaluate(result.model, cell.dataset, Split.TEST, cell.ddi, config.model.delta)
    return report.jaccard, report.ddi


def sensitivity_study(
    config: RunConfig, dataset: Dataset, ddi: DdiMatrix, path: Path | None = None
) -> list[SensitivityRow]:
    """Grid over the medication and mapping top-layer sizes."""
    study = config.study
    cells = [
        SensitivityCell(config, dataset, ddi, q_mm, q_map, seed)
        for q_mm in study.q_mm_grid
        for q_map in study.q_map_grid
        for seed in study.seeds
    ]
    results = run_cells(sensitivity_cell, cells, config.run.workers)
    rows = []
    per_group = len(study.seeds)
    for start in range(0, len(cells), per_group):
        group = results[start : start + per_group]
        cell = cells[start]
        rows.append(
            SensitivityRow(
                cell.q_mm,
                cell.q_map,
                float(np.mean([g[0] for g in group])),
                float(np.mean([g[1] for g in group])),
            )
        )
    if path is not None:
        write_rows(path, [f.name for f in fields(SensitivityRow)], [_astuple(r) for r in rows])
    return rows


@dataclass(frozen=True)
class AblationCell:
    """One model fit of an ablation variant."""

    config: RunConfig
    dataset: Dataset
    ddi: DdiMatrix
    variant: str
    seed: int


@dataclass(frozen=True)
class AblationRow:
    """Mean test metrics of one variant and the largest graph-parameter gradient seen."""

    variant: str
    jaccard: float
    ddi: float
    f1: float
    prauc: float
    avg_drugs: float
    graph_grad_max: float


def ablation_cell(cell: AblationCell) -> tuple[list[float], float]:
    """Fit one variant on the distorted data and score the test split.

    ``shuffled`` is the full model fitted on training visits whose medication
    sets were permuted; it is scored on the untouched test split.
    """
    config = _with_seed(cell.config, cell.seed)
    hyper = config.model
    flags = AblationFlags()
    if cell.variant == "no_ddi":
        hyper = replace(hyper, beta=1.0)
    elif cell.variant not in ("full", "shuffled"):
        flags = AblationFlags(**{cell.variant: True})
    dataset = distort_dataset(cell.dataset, config.study.ablation_level, cell.seed)
    train_data = shuffle_labels(dataset, cell.seed) if cell.variant == "shuffled" else dataset
    result = fit(train_data, cell.ddi, config.strat, hyper, flags)
    report = evaluate(result.model, dataset, Split.TEST, cell.ddi, hyper.delta)
    return [getattr(report, name) for name in METRIC_NAMES], result.log.graph_grad_max


def ablation_study(
    config: RunConfig, dataset: Dataset, ddi: DdiMatrix, path: Path | None = None
) -> list[AblationRow]:
    """Compare the full model with each component removed, the DDI term off, and shuffled labels."""
    seeds = config.study.seeds
    cells = [
        AblationCell(config, dataset, ddi, variant, seed)
        for variant in ABLATION_VARIANTS
        for seed in seeds
    ]
    results = run_cells(ablation_cell, cells, config.run.workers)
    rows = []
    for v_index, variant in enumerate(ABLATION_VARIANTS):
        group = results[v_index * len(seeds) : (v_index + 1) * len(seeds)]
        means = np.mean([g[0] for g in group], axis=0)
        rows.append(AblationRow(variant, *(float(m) for m in means), max(g[1] for g in group)))
    if path is not None:
        write_rows(path, [f.name for f in fields(AblationRow)], [_astuple(r) for r in rows])
    return rows


def _astuple(row: object) -> tuple[object, ...]:
    return tuple(getattr(row, f.name) for f in fields(row))  # type: ignore[arg-type]


@dataclass(frozen=True)
class CaseStudy:
    """Relevance matrices and prediction breakdown for one visit.

    Matrix rows are the visit's diagnoses; columns are ``meds``, the union of
    predicted and true medications.
    """

    patient_id: str
    visit_index: int
    diagnoses: tuple[int, ...]
    meds: tuple[int, ...]
    raw_counts: np.ndarray
    relevance: np.ndarray
    predicted: tuple[int, ...]
    truth: tuple[int, ...]
    correct: tuple[int, ...]
    over: tuple[int, ...]
    missed: tuple[int, ...]
    main_reason: dict[int, int | None]
    added: tuple[int, ...] | None = None
    removed: tuple[int, ...] | None = None

    def to_json(self) -> dict[str, object]:
        """JSON record with matrices as nested lists."""
        doc: dict[str, object] = {
            "patient_id": self.patient_id,
            "visit_index": self.visit_index,
            "diagnoses": list(self.diagnoses),
            "meds": list(self.meds),
            "raw_counts": self.raw_counts.tolist(),
            "relevance": self.relevance.tolist(),
            "predicted": list(self.predicted),
            "truth": list(self.truth),
            "correct": list(self.correct),
            "over": list(self.over),
            "missed": list(self.missed),
            "main_reason": {str(m): d for m, d in self.main_reason.items()},
        }
        if self.added is not None:
            doc["added"] = list(self.added)
            doc["removed"] = list(self.removed or ())
        return doc

    def write(self, out_dir: Path) -> Path:
        """Write the JSON record and one CSV per matrix; return the JSON path."""
        stem = f"{self.patient_id}-{self.visit_index}"
        for name, matrix in (("raw", self.raw_counts), ("relevance", self.relevance)):
            write_rows(
                out_dir / f"{stem}-{name}.csv",
                ["diag", *self.meds],
                [[d, *row] for d, row in zip(self.diagnoses, matrix.tolist(), strict=True)],
            )
        path = out_dir / f"{stem}.json"
        atomic_write(path, (json.dumps(self.to_json(), indent=2) + "\n").encode("utf-8"))
        return path


def case_study(
    model: StratMedModel,
    dataset: Dataset,
    buckets: BucketSet,
    patient_id: str,
    visit_index: int,
    baseline: StratMedModel | None = None,
) -> CaseStudy:
    """Explain one visit's prediction through the diagnosis-medication bucket.

    With ``baseline`` (the flat-bucket model) the medications the stratified
    model added or removed relative to it are reported too.
    """
    patient = next((p for p in dataset.patients if p.patient_id == patient_id), None)
    if patient is None:
        raise DataError(f"Unknown patient {patient_id!r}. Check the dataset's patient ids.")
    if not 0 <= visit_index < len(patient.visits):
        raise DataError(
            f"Patient {patient_id} has {len(patient.visits)} visits; visit {visit_index} does not exist"
        )
    history = patient.visits[: visit_index + 1]
    visit = history[-1]
    predicted = model.predict(history).med_set
    truth = visit.med_ids
    meds = tuple(sorted(set(predicted) | set(truth)))
    diagnoses = visit.diag_ids
    grid = np.ix_(list(meds), list(diagnoses))
    raw = buckets.diag.counts[grid].T
    relevance = buckets.diag.relevance_matrix()[grid].T
    main_reason: dict[int, int | None] = {}
    for col, med in enumerate(meds):
        if med not in predicted:
            continue
        column = relevance[:, col]
        main_reason[med] = diagnoses[int(np.argmax(column))] if column.size and column.max() > 0 else None
    added = removed = None
    if baseline is not None:
        flat = set(baseline.predict(history).med_set)
        added = tuple(sorted(set(predicted) - flat))
        removed = tuple(sorted(flat - set(predicted)))
    return CaseStudy(
        patient_id,
        visit_index,
        diagnoses,
        meds,
        raw,
        relevance,
        predicted,
        truth,
        tuple(sorted(set(predicted) & set(truth))),
        tuple(sorted(set(predicted) - set(truth))),
        tuple(sorted(set(truth) - set(predicted))),
        main_reason,
        added,
        removed,
    )
