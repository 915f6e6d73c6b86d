"""EHR records, their file formats, the synthetic generator, and dataset transforms."""

from __future__ import annotations

import csv
import json
import logging
import math
from collections.abc import Iterable, Sequence
from dataclasses import dataclass, fields
from enum import StrEnum
from pathlib import Path

import numpy as np

from errors import ConfigError, DataError
from numerics import SEED_LIMIT, atomic_write, make_rng

SPLIT_RATIOS = (2 / 3, 1 / 6, 1 / 6)
COMMON_TIER_FRACTION = 0.1
RARE_TIER_FRACTION = 0.6
DISTORTION_LEVELS = (100, 110, 120, 130, 140)
LOW_FREQUENCY_THRESHOLDS = (5, 10, 15, 20)
RATIO_TOLERANCE = 1e-9

# Sub-stream ids for make_rng so each seeded operation draws independently.
STREAM_GENERATE = 1
STREAM_SPLIT = 2
STREAM_DISTORT_DIAG = 3
STREAM_DISTORT_PROC = 4
STREAM_SHUFFLE_LABELS = 5


class Split(StrEnum):
    """Patient-level partition label."""

    TRAIN = "train"
    VAL = "val"
    TEST = "test"


SPLIT_ORDER = (Split.TRAIN, Split.VAL, Split.TEST)


@dataclass(frozen=True)
class EntityVocab:
    """Sizes of the diagnosis, procedure, and medication id spaces."""

    num_diag: int
    num_proc: int
    num_med: int

    def __post_init__(self) -> None:
        """Reject empty vocabularies."""
        for f in fields(self):
            if getattr(self, f.name) < 1:
                raise DataError(f"{f.name} must be at least 1, got {getattr(self, f.name)}")


def canonical_ids(ids: Iterable[int]) -> tuple[int, ...]:
    """Return ids sorted ascending with duplicates removed."""
    return tuple(sorted({int(i) for i in ids}))


@dataclass(frozen=True)
class Visit:
    """One clinical visit: diagnosis, procedure, and medication id sets."""

    diag_ids: tuple[int, ...]
    proc_ids: tuple[int, ...]
    med_ids: tuple[int, ...]

    @classmethod
    def of(cls, diag: Iterable[int], proc: Iterable[int], med: Iterable[int]) -> Visit:
        """Build a visit from unordered id collections."""
        return cls(canonical_ids(diag), canonical_ids(proc), canonical_ids(med))

    def validate(self, vocab: EntityVocab, where: str = "visit") -> None:
        """Check ordering, bounds, and non-emptiness against ``vocab``."""
        if not self.diag_ids:
            raise DataError(f"{where}: visit has no diagnoses")
        if not self.med_ids:
            raise DataError(f"{where}: visit has no medications")
        for label, ids, size in (
            ("diag", self.diag_ids, vocab.num_diag),
            ("proc", self.proc_ids, vocab.num_proc),
            ("med", self.med_ids, vocab.num_med),
        ):
            if any(b <= a for a, b in zip(ids, ids[1:], strict=False)):
                raise DataError(f"{where}: {label} ids must be strictly increasing")
            for i in ids:
                if not 0 <= i < size:
                    raise DataError(
                        f"{where}: {label} id {i} out of range for vocabulary size {size}"
                    )


@dataclass(frozen=True)
class PatientRecord:
    """A patient's visits in chronological order."""

    patient_id: str
    visits: tuple[Visit, ...]

    def __post_init__(self) -> None:
        """Reject patients without visits."""
        if not self.visits:
            raise DataError(f"patient {self.patient_id}: empty visit list")


@dataclass(frozen=True)
class Dataset:
    """Patients, their vocabulary, and the patient-level split."""

    vocab: EntityVocab
    patients: tuple[PatientRecord, ...]
    split: dict[str, Split]

    def validate(self) -> None:
        """Check unique ids, complete split coverage, and every visit."""
        ids = [p.patient_id for p in self.patients]
        if len(set(ids)) != len(ids):
            raise DataError("patient ids must be unique")
        if set(self.split) != set(ids):
            raise DataError("split must assign every patient exactly once")
        for patient in self.patients:
            for t, visit in enumerate(patient.visits):
                visit.validate(self.vocab, f"patient {patient.patient_id} visit {t}")

    def patients_in(self, split: Split | None) -> list[PatientRecord]:
        """Return patients of one split in file order; ``None`` selects all."""
        if split is None:
            return list(self.patients)
        return [p for p in self.patients if self.split[p.patient_id] == split]

    def visits_in(self, split: Split | None) -> list[Visit]:
        """Return every visit of one split in file order."""
        return [v for p in self.patients_in(split) for v in p.visits]

    @property
    def num_visits(self) -> int:
        """Total visit count across all splits."""
        return sum(len(p.visits) for p in self.patients)

    def with_patients(self, patients: Sequence[PatientRecord]) -> Dataset:
        """Return a dataset with the same vocab and split labels for ``patients``."""
        kept = tuple(patients)
        return Dataset(self.vocab, kept, {p.patient_id: self.split[p.patient_id] for p in kept})


@dataclass(frozen=True, eq=False)
class DdiMatrix:
    """Symmetric 0/1 drug-drug interaction matrix with a zero diagonal."""

    matrix: np.ndarray

    def __post_init__(self) -> None:
        """Check symmetry, the zero diagonal, and 0/1 entries."""
        a = self.matrix
        if a.ndim != 2 or a.shape[0] != a.shape[1]:
            raise DataError(f"DDI matrix must be square, got shape {a.shape}")
        if not np.isin(a, (0, 1)).all():
            raise DataError("DDI matrix entries must be 0 or 1")
        if not np.array_equal(a, a.T):
            raise DataError("DDI matrix must be symmetric")
        if np.any(np.diag(a)):
            raise DataError("DDI matrix must have a zero diagonal")

    @classmethod
    def from_edges(cls, size: int, edges: Iterable[tuple[int, int]]) -> DdiMatrix:
        """Build a matrix from undirected edges, symmetrizing them."""
        a = np.zeros((size, size), dtype=np.int8)
        for i, j in edges:
            if i == j or not (0 <= i < size and 0 <= j < size):
                raise DataError(f"invalid DDI edge ({i}, {j}) for {size} medications")
            a[i, j] = a[j, i] = 1
        return cls(a)

    @property
    def size(self) -> int:
        """Number of medications."""
        return self.matrix.shape[0]

    def edges(self) -> list[tuple[int, int]]:
        """Return undirected edges as ``(i, j)`` with ``i < j``."""
        rows, cols = np.nonzero(np.triu(self.matrix, k=1))
        return [(int(i), int(j)) for i, j in zip(rows, cols, strict=True)]

    def __eq__(self, other: object) -> bool:
        """Compare entries elementwise."""
        return isinstance(other, DdiMatrix) and np.array_equal(self.matrix, other.matrix)

    __hash__ = None  # type: ignore[assignment]


@dataclass(frozen=True)
class SyntheticConfig:
    """Parameters of the seeded long-tailed EHR generator."""

    num_patients: int = 500
    num_diag: int = 200
    num_proc: int = 80
    num_med: int = 131
    mean_visits: float = 2.5
    diag_min: int = 1
    diag_max: int = 6
    proc_min: int = 0
    proc_max: int = 3
    diag_exponent: float = 1.2
    proc_exponent: float = 1.2
    med_exponent: float = 1.0
    meds_per_diag: int = 3
    noise_rate: float = 0.1
    ddi_density: float = 0.05
    seed: int = 0

    def validate(self) -> None:
        """Raise ``ConfigError`` for out-of-range or infeasible settings."""
        if self.num_patients < 1:
            raise ConfigError("synth.num_patients must be at least 1")
        if min(self.num_diag, self.num_proc, self.num_med) < 1:
            raise ConfigError("synthetic vocabulary sizes must be at least 1")
        if self.mean_visits < 1:
            raise ConfigError(f"synth.mean_visits must be >= 1, got {self.mean_visits}")
        if not 1 <= self.diag_min <= self.diag_max <= self.num_diag:
            raise ConfigError(
                f"diagnosis set size range [{self.diag_min}, {self.diag_max}] "
                f"is infeasible for {self.num_diag} diagnoses"
            )
        if not 0 <= self.proc_min <= self.proc_max <= self.num_proc:
            raise ConfigError(
                f"procedure set size range [{self.proc_min}, {self.proc_max}] "
                f"is infeasible for {self.num_proc} procedures"
            )
        if not 1 <= self.meds_per_diag <= self.num_med:
            raise ConfigError(
                f"synth.meds_per_diag={self.meds_per_diag} is infeasible for {self.num_med} medications"
            )
        for name in ("diag_exponent", "proc_exponent", "med_exponent"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"synth.{name} must be > 0")
        for name in ("noise_rate", "ddi_density"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ConfigError(f"synth.{name} must be in [0, 1]")
        if not 0 <= self.seed < SEED_LIMIT:
            raise ConfigError("synth.seed must be an unsigned 64-bit integer")

    @property
    def vocab(self) -> EntityVocab:
        """The vocabulary the generator draws from."""
        return EntityVocab(self.num_diag, self.num_proc, self.num_med)


def multi_hot(ids: Iterable[int], size: int) -> np.ndarray:
    """Return a float64 vector with ones at ``ids``."""
    out = np.zeros(size)
    for i in ids:
        if not 0 <= i < size:
            raise DataError(f"id {i} out of range for multi-hot size {size}")
        out[i] = 1.0
    return out


def load_dataset(path: Path) -> Dataset:
    """Read a JSON-lines dataset: a vocabulary header, then one patient per line."""
    try:
        lines = path.read_text(encoding="utf-8").splitlines()
    except OSError as e:
        raise DataError(f"Failed to read dataset {path}. Check that the file exists.") from e
    if not lines:
        raise DataError(f"{path}: line 1: missing vocabulary header")
    try:
        header = json.loads(lines[0])
        vocab = EntityVocab(int(header["num_diag"]), int(header["num_proc"]), int(header["num_med"]))
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
        raise DataError(f"{path}: line 1: malformed vocabulary header ({e})") from e

    patients: list[PatientRecord] = []
    split: dict[str, Split] = {}
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        where = f"{path}: line {lineno}"
        try:
            record = json.loads(line)
            patient_id = str(record["patient_id"])
            label = Split(record["split"])
            visits = tuple(
                Visit.of(v["diag"], v.get("proc", ()), v["med"]) for v in record["visits"]
            )
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
            raise DataError(f"{where}: malformed patient record ({e})") from e
        if not visits:
            raise DataError(f"{where}: patient {patient_id} has an empty visit list")
        for t, visit in enumerate(visits):
            visit.validate(vocab, f"{where} visit {t}")
        if patient_id in split:
            raise DataError(f"{where}: duplicate patient id {patient_id}")
        patients.append(PatientRecord(patient_id, visits))
        split[patient_id] = label
    logging.info("Loaded %d patients from %s", len(patients), path)
    return Dataset(vocab, tuple(patients), split)


def dataset_lines(dataset: Dataset) -> list[str]:
    """Serialize a dataset to its JSON-lines records."""
    vocab = dataset.vocab
    lines = [
        json.dumps(
            {"num_diag": vocab.num_diag, "num_proc": vocab.num_proc, "num_med": vocab.num_med},
            separators=(",", ":"),
        )
    ]
    for patient in dataset.patients:
        record = {
            "patient_id": patient.patient_id,
            "split": str(dataset.split[patient.patient_id]),
            "visits": [
                {"diag": list(v.diag_ids), "proc": list(v.proc_ids), "med": list(v.med_ids)}
                for v in patient.visits
            ],
        }
        lines.append(json.dumps(record, separators=(",", ":")))
    return lines


def save_dataset(dataset: Dataset, path: Path) -> None:
    """Write ``dataset`` in the format ``load_dataset`` reads."""
    payload = "".join(line + "\n" for line in dataset_lines(dataset)).encode("utf-8")
    atomic_write(path, payload)


def load_ddi(path: Path, num_med: int) -> DdiMatrix:
    """Read a CSV of undirected ``i,j`` edges with ``0 <= i < j < num_med``."""
    edges: list[tuple[int, int]] = []
    try:
        with path.open(encoding="utf-8", newline="") as handle:
            for lineno, row in enumerate(csv.reader(handle), start=1):
                if not row or not "".join(row).strip():
                    continue
                try:
                    i, j = (int(x) for x in row)
                except ValueError as e:
                    raise DataError(f"{path}: line {lineno}: expected 'i,j', got {row}") from e
                if not 0 <= i < j < num_med:
                    raise DataError(
                        f"{path}: line {lineno}: edge ({i}, {j}) must satisfy 0 <= i < j < {num_med}"
                    )
                edges.append((i, j))
    except OSError as e:
        raise DataError(f"Failed to read DDI file {path}. Check that the file exists.") from e
    return DdiMatrix.from_edges(num_med, edges)


def save_ddi(ddi: DdiMatrix, path: Path) -> None:
    """Write the DDI edge list as ``i,j`` lines."""
    atomic_write(path, "".join(f"{i},{j}\n" for i, j in ddi.edges()).encode("utf-8"))


def _zipf_probabilities(size: int, exponent: float, rng: np.random.Generator) -> np.ndarray:
    """Power-law popularity over a shuffled id space."""
    weights = 1.0 / np.arange(1, size + 1, dtype=np.float64) ** exponent
    probs = np.empty(size)
    probs[rng.permutation(size)] = weights / weights.sum()
    return probs


def _draw_set(rng: np.random.Generator, probs: np.ndarray, lo: int, hi: int) -> tuple[int, ...]:
    count = int(rng.integers(lo, hi + 1))
    if count == 0:
        return ()
    return canonical_ids(rng.choice(probs.size, size=count, replace=False, p=probs))


def generate_synthetic(config: SyntheticConfig) -> tuple[Dataset, DdiMatrix]:
    """Generate a long-tailed EHR corpus and a DDI matrix from ``config``.

    Each diagnosis owns a latent set of ``meds_per_diag`` medications; a visit's
    prescription is the union of its diagnoses' sets, with each medication
    swapped for a popularity-weighted random one at ``noise_rate``. DDI edges
    favour medication pairs that rarely appear together in those prescriptions.
    """
    config.validate()
    rng = make_rng(config.seed, STREAM_GENERATE)
    vocab = config.vocab
    diag_p = _zipf_probabilities(vocab.num_diag, config.diag_exponent, rng)
    proc_p = _zipf_probabilities(vocab.num_proc, config.proc_exponent, rng)
    med_p = _zipf_probabilities(vocab.num_med, config.med_exponent, rng)
    latent = [
        canonical_ids(rng.choice(vocab.num_med, size=config.meds_per_diag, replace=False, p=med_p))
        for _ in range(vocab.num_diag)
    ]

    width = len(str(config.num_patients - 1))
    patients = []
    for n in range(config.num_patients):
        visit_count = 1 + int(rng.poisson(config.mean_visits - 1.0))
        visits = []
        for _ in range(visit_count):
            diag = _draw_set(rng, diag_p, config.diag_min, config.diag_max)
            proc = _draw_set(rng, proc_p, config.proc_min, config.proc_max)
            prescribed = sorted({m for d in diag for m in latent[d]})
            noisy = rng.random(len(prescribed)) < config.noise_rate
            swaps = rng.choice(vocab.num_med, size=len(prescribed), p=med_p)
            meds = [int(s) if flip else m for m, flip, s in zip(prescribed, noisy, swaps, strict=True)]
            visits.append(Visit(diag, proc, canonical_ids(meds)))
        patients.append(PatientRecord(f"p{n:0{width}d}", tuple(visits)))

    ids = [p.patient_id for p in patients]
    split = assign_splits(ids, SPLIT_RATIOS, config.seed)
    dataset = Dataset(vocab, tuple(patients), split)
    ddi = _sample_ddi(dataset, config.ddi_density, rng)
    logging.info(
        "Generated %d patients, %d visits, %d DDI edges (seed=%d)",
        len(patients),
        dataset.num_visits,
        len(ddi.edges()),
        config.seed,
    )
    return dataset, ddi


def _sample_ddi(dataset: Dataset, density: float, rng: np.random.Generator) -> DdiMatrix:
    size = dataset.vocab.num_med
    together = np.zeros((size, size), dtype=np.int64)
    for visit in dataset.visits_in(None):
        meds = np.asarray(visit.med_ids, dtype=np.intp)
        together[np.ix_(meds, meds)] += 1
    rows, cols = np.triu_indices(size, k=1)
    edge_count = round(density * rows.size)
    if edge_count == 0:
        return DdiMatrix(np.zeros((size, size), dtype=np.int8))
    weights = 1.0 / (1.0 + together[rows, cols])
    picks = rng.choice(rows.size, size=edge_count, replace=False, p=weights / weights.sum())
    return DdiMatrix.from_edges(size, zip(rows[picks].tolist(), cols[picks].tolist(), strict=True))


def split_sizes(count: int, ratios: Sequence[float]) -> list[int]:
    """Floor each share, then hand the remainder to the largest fractional parts."""
    if len(ratios) != len(SPLIT_ORDER):
        raise ConfigError(f"expected {len(SPLIT_ORDER)} split ratios, got {len(ratios)}")
    if any(r < 0 for r in ratios) or abs(sum(ratios) - 1.0) > RATIO_TOLERANCE:
        raise ConfigError(f"split ratios must be non-negative and sum to 1, got {tuple(ratios)}")
    buckets = sum(1 for r in ratios if r > 0)
    if count < buckets:
        raise DataError(f"cannot split {count} patients into {buckets} non-empty buckets")
    exact = [r * count for r in ratios]
    sizes = [math.floor(x + RATIO_TOLERANCE) for x in exact]
    order = sorted(range(len(ratios)), key=lambda b: (-(exact[b] - sizes[b]), b))
    for b in order[: count - sum(sizes)]:
        sizes[b] += 1
    return sizes


def assign_splits(ids: Sequence[str], ratios: Sequence[float], seed: int) -> dict[str, Split]:
    """Randomly assign patient ids to splits with ``split_sizes`` bucket sizes."""
    sizes = split_sizes(len(ids), ratios)
    order = make_rng(seed, STREAM_SPLIT).permutation(len(ids))
    labels = [label for label, size in zip(SPLIT_ORDER, sizes, strict=True) for _ in range(size)]
    return {ids[int(i)]: label for i, label in zip(order, labels, strict=True)}


def split_dataset(dataset: Dataset, ratios: Sequence[float] = SPLIT_RATIOS, seed: int = 0) -> Dataset:
    """Reassign the patient-level split."""
    ids = [p.patient_id for p in dataset.patients]
    return Dataset(dataset.vocab, dataset.patients, assign_splits(ids, ratios, seed))


def occurrence_counts(visits: Iterable[Visit], size: int, kind: str) -> np.ndarray:
    """Count how many visits contain each id of one entity class."""
    counts = np.zeros(size, dtype=np.int64)
    for visit in visits:
        ids = getattr(visit, f"{kind}_ids")
        counts[list(ids)] += 1
    return counts


def entity_tiers(counts: np.ndarray) -> np.ndarray:
    """Label ids 0 (common), 1 (moderate), or 2 (rare) by descending frequency.

    The top 10% of ids are common, the bottom 60% rare; ties rank lower ids first.
    """
    size = counts.size
    order = np.argsort(-counts, kind="stable")
    common = math.ceil(COMMON_TIER_FRACTION * size)
    rare = math.floor(RARE_TIER_FRACTION * size)
    tiers = np.ones(size, dtype=np.int8)
    tiers[order[:common]] = 0
    tiers[order[size - rare :]] = 2
    return tiers


def _rebuild(dataset: Dataset, visit_map: dict[tuple[int, int], Visit]) -> Dataset:
    patients = []
    for p_index, patient in enumerate(dataset.patients):
        visits = tuple(
            visit_map.get((p_index, t), visit)
            for t, visit in enumerate(patient.visits)
        )
        visits = tuple(v for v in visits if v.diag_ids)
        if visits:
            patients.append(PatientRecord(patient.patient_id, visits))
    dropped = len(dataset.patients) - len(patients)
    if dropped:
        logging.info("Dropped %d patients left without visits", dropped)
    return dataset.with_patients(patients)


def distort_dataset(dataset: Dataset, level: int, seed: int = 0) -> Dataset:
    """Thin the moderate-frequency tier to exaggerate the long tail.

    Diagnoses and procedures are tiered on the train split. For each class,
    ``(level - 100)%`` of the moderate tier's occurrences are deleted uniformly
    at random across the dataset; visits left without diagnoses are dropped.
    """
    if level not in DISTORTION_LEVELS:
        raise ConfigError(f"distortion level must be one of {DISTORTION_LEVELS}, got {level}")
    if level == 100:
        return dataset
    fraction = (level - 100) / 100
    train_visits = dataset.visits_in(Split.TRAIN)
    removed: dict[str, set[tuple[int, int, int]]] = {}
    for kind, size, stream in (
        ("diag", dataset.vocab.num_diag, STREAM_DISTORT_DIAG),
        ("proc", dataset.vocab.num_proc, STREAM_DISTORT_PROC),
    ):
        tiers = entity_tiers(occurrence_counts(train_visits, size, kind))
        occurrences = [
            (p_index, t, i)
            for p_index, patient in enumerate(dataset.patients)
            for t, visit in enumerate(patient.visits)
            for i in getattr(visit, f"{kind}_ids")
            if tiers[i] == 1
        ]
        target = round(fraction * len(occurrences))
        picks = make_rng(seed, stream).choice(len(occurrences), size=target, replace=False)
        removed[kind] = {occurrences[int(k)] for k in picks}
        logging.info(
            "Distortion %d%%: removing %d of %d moderate %s occurrences",
            level,
            target,
            len(occurrences),
            kind,
        )

    visit_map = {}
    for p_index, patient in enumerate(dataset.patients):
        for t, visit in enumerate(patient.visits):
            diag = tuple(i for i in visit.diag_ids if (p_index, t, i) not in removed["diag"])
            proc = tuple(i for i in visit.proc_ids if (p_index, t, i) not in removed["proc"])
            if diag != visit.diag_ids or proc != visit.proc_ids:
                visit_map[(p_index, t)] = Visit(diag, proc, visit.med_ids)
    return _rebuild(dataset, visit_map)


def filter_low_frequency(dataset: Dataset, mu: float, total_visits: int | None = None) -> Dataset:
    """Erase diagnoses and procedures present in at least ``mu``% of all visits.

    An entity is retained only when its visit count is strictly below ``mu``%
    of ``total_visits`` (default: the visits of ``dataset``). Medications are
    untouched; visits left without diagnoses are dropped.

    Dropped visits shrink the default total, so refiltering an already filtered
    dataset can erase more. Pass the original total to refilter with the same
    reference; ``filter(filter(d, mu1), mu2, d.num_visits)`` equals
    ``filter(d, mu1)`` for every ``mu2 >= mu1``.
    """
    if not 0 < mu <= 100:
        raise ConfigError(f"low-frequency threshold must be in (0, 100], got {mu}")
    visits = dataset.visits_in(None)
    total = len(visits) if total_visits is None else total_visits
    if total < len(visits):
        raise ConfigError(
            f"reference visit total {total} is smaller than the {len(visits)} visits being filtered"
        )
    keep = {}
    for kind, size in (("diag", dataset.vocab.num_diag), ("proc", dataset.vocab.num_proc)):
        counts = occurrence_counts(visits, size, kind)
        keep[kind] = counts * 100 < mu * total
    visit_map = {}
    for p_index, patient in enumerate(dataset.patients):
        for t, visit in enumerate(patient.visits):
            diag = tuple(i for i in visit.diag_ids if keep["diag"][i])
            proc = tuple(i for i in visit.proc_ids if keep["proc"][i])
            if diag != visit.diag_ids or proc != visit.proc_ids:
                visit_map[(p_index, t)] = Visit(diag, proc, visit.med_ids)
    logging.info(
        "Low-frequency filter mu=%s%% erased %d diagnoses and %d procedures",
        mu,
        int((~keep["diag"]).sum()),
        int((~keep["proc"]).sum()),
    )
    return _rebuild(dataset, visit_map)


def shuffle_labels(dataset: Dataset, seed: int = 0) -> Dataset:
    """Permute medication sets across training visits; val and test stay intact.

    Diagnoses and procedures keep their places, so a model fitted on the result
    sees real inputs paired with unrelated prescriptions.
    """
    positions = [
        (p_index, t)
        for p_index, patient in enumerate(dataset.patients)
        if dataset.split[patient.patient_id] == Split.TRAIN
        for t in range(len(patient.visits))
    ]
    if not positions:
        raise DataError("Cannot shuffle labels: the training split is empty.")
    meds = [dataset.patients[p].visits[t].med_ids for p, t in positions]
    order = make_rng(seed, STREAM_SHUFFLE_LABELS).permutation(len(positions))
    visit_map = {}
    for (p_index, t), source in zip(positions, order, strict=True):
        visit = dataset.patients[p_index].visits[t]
        visit_map[(p_index, t)] = Visit(visit.diag_ids, visit.proc_ids, meds[int(source)])
    logging.info("Shuffled medication sets across %d training visits", len(positions))
    return _rebuild(dataset, visit_map)
