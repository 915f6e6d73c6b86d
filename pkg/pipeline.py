"""Pipeline stages with content-hash caching, stage timing, and the run manifest."""

from __future__ import annotations

import hashlib
import importlib
import json
import logging
import os
import time
from collections.abc import Iterator
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field
from enum import IntEnum
from pathlib import Path

import numpy as np

from config import RunConfig, config_hash
from ehr import (
    Dataset,
    DdiMatrix,
    Split,
    dataset_lines,
    generate_synthetic,
    load_dataset,
    load_ddi,
    save_dataset,
    save_ddi,
)
from errors import StratMedError
from metrics import MetricsReport, bootstrap_evaluate
from models import (
    AblationFlags,
    Hyperparams,
    PretrainModel,
    StratMedModel,
    TrainingLog,
    load_model,
    load_pretrained,
    save_model,
    sidecar_path,
    train_main,
    train_pretrain,
)
from numerics import atomic_write
from stratify import BucketSet, StratParams, build_buckets, count_cooccurrence

PERF_LOGGING = os.environ.get("STRATMED_PERF") == "1"

try:
    _build_info = importlib.import_module("build_info")
    APP_VERSION = str(getattr(_build_info, "BUILD_VERSION", "0.1.0"))
    BUILD_ID = str(getattr(_build_info, "BUILD_ID", "source"))
    BUILD_NUMPY = str(getattr(_build_info, "BUILD_NUMPY", np.__version__))
except ImportError:
    APP_VERSION = "0.1.0"
    BUILD_ID = "source"
    BUILD_NUMPY = np.__version__


def perf_log(operation: str, duration: float, extra: str = "") -> None:
    """Log performance metrics if perf logging is enabled."""
    if PERF_LOGGING:
        logging.info("PERF %s: %.6f%s %s", operation, duration, "s", extra)


class PerfTimer:
    """Context manager for timing operations."""

    def __init__(self, operation: str, extra: str = ""):
        """Initialize timer with operation name and extra metadata."""
        self.operation = operation
        self.extra = extra
        self.start_time: float | None = None
        self.duration = 0.0

    def __enter__(self):
        """Start timing and return self."""
        self.start_time = time.perf_counter()
        return self

    def __exit__(self, exc_type, exc_val, exc_tb):
        """Stop timing and log performance metric."""
        if self.start_time is not None:
            self.duration = time.perf_counter() - self.start_time
            perf_log(self.operation, self.duration, self.extra)
        return False


class Stage(IntEnum):
    """Pipeline stages in execution order."""

    GEN_DATA = 1
    STRATIFY = 2
    PRETRAIN = 3
    TRAIN = 4
    EVALUATE = 5

    @property
    def label(self) -> str:
        """CLI spelling of the stage."""
        return self.name.lower().replace("_", "-")


@dataclass
class ExperimentManifest:
    """What a run did: config hash, code version, stage timings, and artifacts."""

    config_hash: str
    code_version: str = APP_VERSION
    build_id: str = BUILD_ID
    numpy_version: str = np.__version__
    build_numpy: str = BUILD_NUMPY
    stage_seconds: dict[str, float] = field(default_factory=dict)
    cache_hits: list[str] = field(default_factory=list)
    artifacts: dict[str, str] = field(default_factory=dict)
    total_seconds: float = 0.0
    best_epoch: int | None = None

    def write(self, path: Path) -> None:
        """Write the manifest as JSON, atomically."""
        atomic_write(path, (json.dumps(asdict(self), indent=2, sort_keys=True) + "\n").encode("utf-8"))


def digest(*parts: object) -> str:
    """SHA-256 over the canonical JSON of ``parts``."""
    payload = json.dumps(parts, sort_keys=True, default=str, separators=(",", ":"))
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()


def dataset_digest(dataset: Dataset) -> str:
    """Content hash of a dataset's serialized form."""
    return hashlib.sha256("\n".join(dataset_lines(dataset)).encode("utf-8")).hexdigest()


def ddi_digest(ddi: DdiMatrix) -> str:
    """Content hash of a DDI edge list."""
    return digest(ddi.size, ddi.edges())


def load_data(config: RunConfig) -> tuple[Dataset, DdiMatrix]:
    """Read the configured dataset files or generate synthetic data."""
    if config.uses_synthetic:
        return generate_synthetic(config.synth)
    assert config.data.dataset_path is not None and config.data.ddi_path is not None
    dataset = load_dataset(config.data.dataset_path)
    dataset.validate()
    return dataset, load_ddi(config.data.ddi_path, dataset.vocab.num_med)


def stratify(dataset: Dataset, params: StratParams, ablation: AblationFlags) -> BucketSet:
    """Count train-split co-occurrences and build the buckets for ``ablation``."""
    cooc = count_cooccurrence(dataset, Split.TRAIN)
    return build_buckets(cooc, params, stratified=not ablation.normalized().wo_s)


@dataclass
class FitResult:
    """Everything ``fit`` produced."""

    buckets: BucketSet
    pretrained: PretrainModel | None
    model: StratMedModel
    log: TrainingLog


def fit(
    dataset: Dataset,
    ddi: DdiMatrix,
    params: StratParams,
    hyper: Hyperparams,
    ablation: AblationFlags,
) -> FitResult:
    """Stratify, pre-train (unless ablated), and train without touching the disk."""
    ablation = ablation.normalized()
    buckets = stratify(dataset, params, ablation)
    pretrained = None if ablation.wo_p else train_pretrain(dataset, ddi, hyper)[0]
    model, log = train_main(dataset, buckets, ddi, hyper, ablation, pretrained)
    return FitResult(buckets, pretrained, model, log)


@dataclass
class PipelineResult:
    """Artifacts of the stages that ran."""

    dataset: Dataset | None = None
    ddi: DdiMatrix | None = None
    buckets: BucketSet | None = None
    pretrained: PretrainModel | None = None
    model: StratMedModel | None = None
    log: TrainingLog | None = None
    report: MetricsReport | None = None


class Pipeline:
    """Runs the stages for one config under ``run.out_dir``, reusing cached artifacts.

    Each stage's cache key hashes its inputs, so a rerun with the same config
    and data loads results instead of recomputing them.
    """

    def __init__(self, config: RunConfig):
        """Prepare output locations and an empty manifest."""
        self.config = config
        self.out_dir = config.run.out_dir
        self.cache_dir = self.out_dir / "cache"
        self.manifest = ExperimentManifest(config_hash(config), build_numpy=BUILD_NUMPY)
        if BUILD_NUMPY != np.__version__:
            logging.warning(
                "numpy %s differs from the build's numpy %s; results may not match earlier runs",
                np.__version__,
                BUILD_NUMPY,
            )

    @contextmanager
    def _stage(self, stage: Stage) -> Iterator[None]:
        logging.info("Stage %s started", stage.label)
        try:
            with PerfTimer(stage.label) as timer:
                yield
        except StratMedError as e:
            e.stage = e.stage or stage.label
            raise
        self.manifest.stage_seconds[stage.label] = timer.duration
        logging.info("Stage %s finished in %.3fs", stage.label, timer.duration)

    def _hit(self, stage: Stage, path: Path) -> None:
        logging.info("Stage %s: cache hit %s", stage.label, path)
        self.manifest.cache_hits.append(stage.label)

    def _artifact(self, name: str, path: Path) -> None:
        self.manifest.artifacts[name] = str(path)

    def gen_data(self) -> tuple[Dataset, DdiMatrix]:
        """Load or generate the dataset and DDI matrix."""
        config = self.config
        with self._stage(Stage.GEN_DATA):
            if not config.uses_synthetic:
                dataset, ddi = load_data(config)
                self._artifact("dataset", Path(str(config.data.dataset_path)))
                self._artifact("ddi", Path(str(config.data.ddi_path)))
                return dataset, ddi
            data_dir = self.out_dir / "data"
            dataset_path, ddi_path = data_dir / "dataset.jsonl", data_dir / "ddi.csv"
            key_path = self.cache_dir / "data.key"
            key = digest(asdict(config.synth))
            self._artifact("dataset", dataset_path)
            self._artifact("ddi", ddi_path)
            if _read_key(key_path) == key and dataset_path.exists() and ddi_path.exists():
                self._hit(Stage.GEN_DATA, dataset_path)
                dataset = load_dataset(dataset_path)
                return dataset, load_ddi(ddi_path, dataset.vocab.num_med)
            dataset, ddi = generate_synthetic(config.synth)
            save_dataset(dataset, dataset_path)
            save_ddi(ddi, ddi_path)
            atomic_write(key_path, key.encode("utf-8"))
            return dataset, ddi

    def stratify(self, dataset: Dataset) -> BucketSet:
        """Load or build the relevance buckets."""
        with self._stage(Stage.STRATIFY):
            key = digest(dataset_digest(dataset), asdict(self.config.strat), self.config.ablation.wo_s)
            path = self.cache_dir / f"buckets-{key[:16]}.json"
            self._artifact("buckets", path)
            if path.exists():
                self._hit(Stage.STRATIFY, path)
                return BucketSet.load(path)
            buckets = stratify(dataset, self.config.strat, self.config.ablation)
            buckets.save(path)
            summary = json.dumps(buckets.summaries(), indent=2, sort_keys=True) + "\n"
            atomic_write(self.out_dir / "report" / "buckets.json", summary.encode("utf-8"))
            return buckets

    def _pretrain_key(self, dataset: Dataset, ddi: DdiMatrix) -> str:
        return digest(dataset_digest(dataset), ddi_digest(ddi), asdict(self.config.model))

    def pretrain(self, dataset: Dataset, ddi: DdiMatrix) -> PretrainModel | None:
        """Load or train the pre-training model; ``None`` under ``wo_p``."""
        if self.config.ablation.wo_p:
            logging.info("Stage pretrain skipped (wo_p)")
            return None
        with self._stage(Stage.PRETRAIN):
            path = self.cache_dir / f"pretrain-{self._pretrain_key(dataset, ddi)[:16]}.ckpt"
            self._artifact("pretrain", path)
            if path.exists() and sidecar_path(path).exists():
                self._hit(Stage.PRETRAIN, path)
                return load_pretrained(path, dataset.vocab)
            model, log = train_pretrain(dataset, ddi, self.config.model)
            save_model(model, path, log.best_epoch)
            return model

    def train(
        self,
        dataset: Dataset,
        ddi: DdiMatrix,
        buckets: BucketSet,
        pretrained: PretrainModel | None,
    ) -> tuple[StratMedModel, TrainingLog]:
        """Load or train the stratified model."""
        config = self.config
        with self._stage(Stage.TRAIN):
            upstream = None if pretrained is None else self._pretrain_key(dataset, ddi)
            key = digest(
                dataset_digest(dataset),
                ddi_digest(ddi),
                buckets.digest(),
                asdict(config.model),
                asdict(config.ablation),
                upstream,
            )
            path = self.cache_dir / f"model-{key[:16]}.ckpt"
            self._artifact("model", path)
            if path.exists() and sidecar_path(path).exists():
                self._hit(Stage.TRAIN, path)
                model = load_model(path, dataset.vocab, buckets, ddi)
                meta = json.loads(sidecar_path(path).read_text(encoding="utf-8"))
                log = TrainingLog(best_epoch=int(meta.get("best_epoch", 0)))
            else:
                model, log = train_main(dataset, buckets, ddi, config.model, config.ablation, pretrained)
                save_model(model, path, log.best_epoch)
            self.manifest.best_epoch = log.best_epoch
            return model, log

    def evaluate(self, model: StratMedModel, dataset: Dataset, ddi: DdiMatrix) -> MetricsReport:
        """Bootstrap the test split and write the JSON and CSV reports."""
        settings = self.config.eval
        with self._stage(Stage.EVALUATE):
            report = bootstrap_evaluate(
                model,
                dataset,
                ddi,
                rounds=settings.rounds,
                fraction=settings.fraction,
                seed=self.config.run.seed,
                delta=self.config.model.delta,
                replace=settings.replace,
            )
            report_dir = self.out_dir / "report"
            atomic_write(report_dir / "metrics.json", report.dumps().encode("utf-8"))
            atomic_write(
                report_dir / "metrics.csv",
                report.csv_row(self.config.ablation.label).encode("utf-8"),
            )
            self._artifact("report", report_dir / "metrics.json")
            return report

    def run(self, until: Stage = Stage.EVALUATE) -> PipelineResult:
        """Run every stage up to ``until`` and write ``manifest.json``."""
        result = PipelineResult()
        start = time.perf_counter()
        try:
            result.dataset, result.ddi = self.gen_data()
            if until >= Stage.STRATIFY:
                result.buckets = self.stratify(result.dataset)
            if until >= Stage.PRETRAIN:
                result.pretrained = self.pretrain(result.dataset, result.ddi)
            if until >= Stage.TRAIN:
                assert result.buckets is not None
                result.model, result.log = self.train(
                    result.dataset, result.ddi, result.buckets, result.pretrained
                )
            if until >= Stage.EVALUATE:
                assert result.model is not None
                result.report = self.evaluate(result.model, result.dataset, result.ddi)
        finally:
            self.manifest.total_seconds = time.perf_counter() - start
            self.manifest.write(self.out_dir / "manifest.json")
        return result


def _read_key(path: Path) -> str | None:
    try:
        return path.read_text(encoding="utf-8").strip()
    except OSError:
        return None
