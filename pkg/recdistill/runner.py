"""
Experiment orchestration: configuration, staged pipeline and sweeps.

Every stage writes into ``<output_dir>/<kind>/<fingerprint[:12]>`` and marks
itself done with a ``manifest.json`` listing each file and its sha256. A
stage whose manifest is complete is skipped on the next run.
"""
import json
import logging
import queue
import shutil
import threading
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Any, Dict, Iterator, List, Optional, Sequence

import numpy as np
import pandas as pd
from filelock import FileLock
from omegaconf import OmegaConf
from omegaconf.errors import OmegaConfBaseException as OmegaConfBaseError

from . import corpus
from .corpus import PopularityBins, SequenceSample
from .distill import DistillConfig, run_record, train_base, train_student
from .errors import (
    ConfigError,
    DataError,
    EvaluationError,
    ParameterError,
    RecDistillError,
    StaleArtifactError,
    TrainingError,
)
from .fingerprint import derive_seed, file_sha256, fingerprint
from .metrics import MetricReport, aggregate_seeds, grouped_report, rank_all, read_report, write_report
from .plotting import plot_sweep
from .seqmodel import ModelSpec, TrainConfig, load_checkpoint, save_checkpoint, write_trace
from .synthbench import (
    OracleHandle,
    WorldSpec,
    build_world,
    generate,
    load_world,
    oracle_gap,
    save_world,
)
from .teacher import (
    SoftLogitCache,
    TeacherConfig,
    TeacherResult,
    train_data_level,
    train_model_level,
    train_popularity_baseline,
    train_training_level,
)

logger = logging.getLogger(__name__)

METHODS = ("base", "softrec_pop", "csrec_m", "csrec_d", "csrec_t")
ARCHITECTURES = ("gru", "attention")
SWEEPS = {
    "teacher_count": [1, 2, 3, 4],
    "subsample_ratio": [0.5, 0.6, 0.7, 0.8, 0.9, 1.0],
    "temperature": [1, 3, 6, 9],
    "beta": [0.25, 0.5, 0.75],
    "expectation_term": ["with", "without"],
}
# teacher fields that can change each method's cache
TEACHER_FIELDS = {
    "softrec_pop": (),
    "csrec_m": ("m", "seeds", "average", "allow_shared_seeds"),
    "csrec_d": ("m", "p", "seeds", "average", "allow_shared_seeds"),
    "csrec_t": ("p", "alpha", "seeds", "expectation_term", "top_k", "noise_dim", "allow_shared_seeds"),
}
MANIFEST = "manifest.json"
FAILED = "FAILED"


@dataclass
class DatasetConfig:
    path: Optional[str] = None
    synth: Optional[WorldSpec] = None
    sep: Optional[str] = None
    min_interactions: int = 5
    max_len: int = 20
    remove_fraction: float = 0.0
    remove_seed: int = 0
    popular_fraction: float = 0.2
    train_prefixes: bool = True


@dataclass
class ExperimentConfig:
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    architecture: str = "gru"
    method: str = "base"
    teacher: TeacherConfig = field(default_factory=TeacherConfig)
    distill: DistillConfig = field(default_factory=DistillConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    cutoffs: List[int] = field(default_factory=lambda: [10, 20])
    delta: float = 4.0
    seeds: List[int] = field(default_factory=lambda: [0, 1, 2])
    output_dir: str = "runs"
    embedding_size: int = 64
    dropout: Optional[float] = None
    tie_weights: bool = False
    length_buckets: Optional[List[int]] = None
    mask_history: bool = False

    def validate(self) -> "ExperimentConfig":
        if self.method not in METHODS:
            raise ConfigError(f"method must be one of {METHODS}, got {self.method!r}")
        if self.architecture not in ARCHITECTURES:
            raise ConfigError(f"architecture must be one of {ARCHITECTURES}, got {self.architecture!r}")
        if (self.dataset.path is None) == (self.dataset.synth is None):
            raise ConfigError("dataset needs exactly one of 'path' or 'synth'")
        if not self.seeds:
            raise ConfigError("at least one seed is required")
        if not self.cutoffs or min(self.cutoffs) < 1:
            raise ConfigError("cutoffs must be positive")
        if self.dataset.max_len < 2 or self.dataset.min_interactions < 1:
            raise ConfigError("max_len must be >= 2 and min_interactions >= 1")
        return self

    def model_spec(self, num_items: int) -> ModelSpec:
        return ModelSpec(
            architecture=self.architecture,
            num_items=num_items,
            max_len=self.dataset.max_len,
            embedding_size=self.embedding_size,
            dropout=self.dropout,
            tie_weights=self.tie_weights,
        )


def load_config(path: Optional[str] = None, overrides: Optional[Dict[str, Any]] = None) -> ExperimentConfig:
    """Merge a JSON file and overrides onto the defaults; unknown keys are rejected."""
    try:
        merged = OmegaConf.structured(ExperimentConfig)
        if path is not None:
            text = Path(path).read_text(encoding="utf-8")
            merged = OmegaConf.merge(merged, OmegaConf.create(json.loads(text)))
        if overrides:
            merged = OmegaConf.merge(merged, OmegaConf.create(overrides))
        cfg = OmegaConf.to_object(merged)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON: {e}") from None
    except (OmegaConfBaseError, RecDistillError, ValueError) as e:
        raise ConfigError(str(e)) from None
    return cfg.validate()


def _train_fields(cfg: TrainConfig) -> dict:
    fields = asdict(cfg)
    fields.pop("progress", None)
    return fields


# stage bookkeeping


class Stage:
    def __init__(self, root: Path, kind: str, fp: str, config: dict):
        self.kind = kind
        self.fingerprint = fp
        self.config = config
        self.dir = root / kind / fp[:12]
        self.lock = FileLock(str(root / "locks" / f"{kind}-{fp[:12]}.lock"))

    @property
    def manifest_path(self) -> Path:
        return self.dir / MANIFEST

    def manifest(self) -> Optional[dict]:
        if not self.manifest_path.is_file():
            return None
        return json.loads(self.manifest_path.read_text(encoding="utf-8"))

    def is_complete(self) -> bool:
        """True when a complete manifest matches; raises if recorded files changed."""
        manifest = self.manifest()
        if not manifest or not manifest.get("complete"):
            return False
        if manifest.get("fingerprint") != self.fingerprint:
            raise StaleArtifactError(f"{self.dir} belongs to a different configuration")
        for name, digest in manifest["files"].items():
            path = self.dir / name
            if not path.is_file() or file_sha256(path) != digest:
                raise StaleArtifactError(f"{path} changed since its manifest was written")
        return True

    def reset(self) -> None:
        if self.dir.exists():
            shutil.rmtree(self.dir)
        self.dir.mkdir(parents=True)

    def finish(self, extra: Optional[dict] = None) -> None:
        (self.dir / FAILED).unlink(missing_ok=True)
        files = {
            p.relative_to(self.dir).as_posix(): file_sha256(p)
            for p in sorted(self.dir.rglob("*"))
            if p.is_file() and p.name not in (MANIFEST, FAILED)
        }
        manifest = {
            "stage": self.kind,
            "fingerprint": self.fingerprint,
            "config": self.config,
            "files": files,
            "complete": True,
            **(extra or {}),
        }
        self.manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True), encoding="utf-8")


@contextmanager
def open_stage(stage: Stage, resume: bool) -> Iterator[bool]:
    """
    Hold the stage lock; yield True when the work must run. A failure
    leaves partial files and a ``FAILED`` marker with the error text.
    """
    stage.dir.parent.mkdir(parents=True, exist_ok=True)
    Path(stage.lock.lock_file).parent.mkdir(parents=True, exist_ok=True)
    with stage.lock:
        if resume and stage.is_complete():
            logger.info("Skipping complete %s stage %s", stage.kind, stage.dir.name)
            yield False
            return
        stage.reset()
        try:
            yield True
        except BaseException as e:
            (stage.dir / FAILED).write_text(f"{type(e).__name__}: {e}\n", encoding="utf-8")
            raise


def _write_json(path: Path, data: Any) -> None:
    path.write_text(json.dumps(data, indent=2, sort_keys=True), encoding="utf-8")


def _read_json(path: Path) -> Any:
    return json.loads(path.read_text(encoding="utf-8"))


def _check_stop(stop_event) -> None:
    if stop_event is not None and stop_event.is_set():
        raise TrainingError("stopped before the stage completed")


def _emit(log_queue: Optional[queue.Queue], msg: str) -> None:
    if log_queue:
        log_queue.put(msg)
    else:
        logger.info(msg)


# prepare


@dataclass
class PreparedData:
    directory: Path
    fingerprint: str
    train: List[SequenceSample]
    valid: List[SequenceSample]
    test: List[SequenceSample]
    bins: PopularityBins
    stats: Dict[str, Any]
    handle: Optional[OracleHandle] = None

    @property
    def num_items(self) -> int:
        return int(self.stats["items"])


def data_fingerprint(cfg: ExperimentConfig) -> str:
    dataset = asdict(cfg.dataset)
    if cfg.dataset.path is not None:
        source = Path(cfg.dataset.path)
        if not source.is_file():
            raise DataError(f"interaction file not found: {source}")
        dataset["path"] = file_sha256(source)
    return fingerprint("data", dataset)


def _ordered_ids(path: Path) -> np.ndarray:
    mapping = corpus.read_id_map(path)
    raw = sorted(mapping, key=mapping.get)
    return np.array([int(r) for r in raw], dtype=np.int64) - 1


def _load_prepared(directory: Path, fp: str) -> PreparedData:
    parts = {split: corpus.read_split(directory / f"{split}.txt", split) for split in corpus.SPLITS}
    handle = None
    if (directory / "world.npz").is_file():
        handle = OracleHandle(load_world(directory / "world"),
                              _ordered_ids(directory / "users.map"),
                              _ordered_ids(directory / "items.map"))
    return PreparedData(
        directory, fp, parts["train"], parts["valid"], parts["test"],
        PopularityBins.load(directory / "popularity.json"),
        _read_json(directory / "stats.json"), handle,
    )


def cmd_prepare(cfg: ExperimentConfig, resume: bool = True, log_queue=None) -> PreparedData:
    """Filter, split and describe the dataset; synthetic specs generate a world first."""
    ds = cfg.dataset
    fp = data_fingerprint(cfg)
    stage = Stage(Path(cfg.output_dir), "data", fp, asdict(ds))
    with open_stage(stage, resume) as run:
        if run:
            out = stage.dir
            if ds.synth is not None:
                _emit(log_queue, f"Generating synthetic world ({ds.synth.num_users} users, "
                                 f"{ds.synth.num_items} items, swap {ds.synth.swap_prob})")
                world = build_world(ds.synth)
                log, _ = generate(world, seq_len=ds.synth.seq_len)
                corpus.write_interactions(log, out / "interactions.tsv")
                save_world(world, ds.synth, out / "world")
            else:
                _emit(log_queue, f"Loading interactions from {ds.path}")
                log = corpus.load_interactions(ds.path, sep=ds.sep)
            log = corpus.filter_min_interactions(log, ds.min_interactions)
            if ds.remove_fraction > 0:
                log = corpus.remove_users(log, ds.remove_fraction, ds.remove_seed, ds.min_interactions)
            corpus.write_id_maps(log, out)
            parts = corpus.partition(corpus.build_sequences(log, ds.max_len, ds.train_prefixes))
            for split, samples in parts.items():
                corpus.write_split(samples, out / f"{split}.txt")
            corpus.popularity_bins(parts["train"], log.catalog_size, ds.popular_fraction).save(
                out / "popularity.json")
            stats = {**log.stats(), **{f"{k}_samples": len(v) for k, v in parts.items()}}
            _write_json(out / "stats.json", stats)
            _emit(log_queue, f"Prepared {stats['users']} users, {stats['items']} items, "
                             f"{stats['interactions']} interactions (sparsity {stats['sparsity']:.4f})")
            stage.finish()
    return _load_prepared(stage.dir, fp)


def _require_prepared(cfg: ExperimentConfig, resume: bool, log_queue) -> PreparedData:
    fp = data_fingerprint(cfg)
    stage = Stage(Path(cfg.output_dir), "data", fp, asdict(cfg.dataset))
    if resume and stage.manifest() is not None and stage.is_complete():
        return _load_prepared(stage.dir, fp)
    return cmd_prepare(cfg, resume=resume, log_queue=log_queue)


# train


def member_seeds(cfg: ExperimentConfig, seed: int) -> List[int]:
    """Explicit teacher seeds first, then ``derive_seed(seed, "teacher", method, k)``."""
    count = 2 if cfg.method == "csrec_t" else cfg.teacher.m
    seeds = list(cfg.teacher.seeds[:count])
    seeds += [derive_seed(seed, "teacher", cfg.method, k) for k in range(len(seeds), count)]
    return seeds


def teacher_fingerprint(cfg: ExperimentConfig, data: PreparedData, seed: int) -> str:
    teacher = {k: v for k, v in asdict(cfg.teacher).items() if k in TEACHER_FIELDS[cfg.method]}
    teacher["seeds"] = member_seeds(cfg, seed) if cfg.method != "softrec_pop" else []
    return fingerprint("teacher", cfg.method, teacher, cfg.model_spec(data.num_items),
                       _train_fields(cfg.train), data.fingerprint)


def student_fingerprint(cfg: ExperimentConfig, data: PreparedData, seed: int) -> str:
    teacher_fp = None if cfg.method == "base" else teacher_fingerprint(cfg, data, seed)
    distill = None if cfg.method == "base" else asdict(replace(cfg.distill, seed=seed))
    return fingerprint("student", cfg.method, teacher_fp, distill, seed,
                       cfg.model_spec(data.num_items), _train_fields(cfg.train), data.fingerprint)


def _fit_teacher(cfg: ExperimentConfig, data: PreparedData, seed: int, log_queue, stop_event) -> TeacherResult:
    spec = cfg.model_spec(data.num_items)
    if cfg.method == "softrec_pop":
        return train_popularity_baseline(data.train, data.num_items)
    teacher_cfg = replace(cfg.teacher, seeds=member_seeds(cfg, seed))
    trainer = {
        "csrec_m": train_model_level,
        "csrec_d": train_data_level,
        "csrec_t": train_training_level,
    }[cfg.method]
    return trainer(teacher_cfg, data.train, data.valid, spec, cfg.train,
                   log_queue=log_queue, stop_event=stop_event)


def run_teacher(cfg: ExperimentConfig, data: PreparedData, seed: int, resume: bool = True,
                log_queue=None, stop_event=None) -> SoftLogitCache:
    fp = teacher_fingerprint(cfg, data, seed)
    stage = Stage(Path(cfg.output_dir), "teachers", fp, {"method": cfg.method, "seed": seed,
                                                          "teacher": asdict(cfg.teacher)})
    with open_stage(stage, resume) as run:
        if run:
            _emit(log_queue, f"[seed {seed}] training {cfg.method} teacher")
            result = _fit_teacher(cfg, data, seed, log_queue, stop_event)
            _check_stop(stop_event)
            out = stage.dir
            fits = []
            for k, (model, fit_result) in enumerate(zip(result.members, result.fits[-len(result.members):])):
                save_checkpoint(model, out / f"member_{k}.ckpt")
                write_trace(fit_result, out / f"member_{k}_trace.csv")
            if result.side is not None:
                save_checkpoint(result.side, out / "side.ckpt")
                write_trace(result.fits[0], out / "side_trace.csv")
            for k, fit_result in enumerate(result.fits):
                samples = len(result.subsets[k]) if k < len(result.subsets) else len(data.train)
                fits.append({"fit": k, "best_epoch": fit_result.best_epoch,
                             "best_valid_ndcg": fit_result.best_valid_ndcg, "samples": int(samples)})
            result.cache.meta["members"] = [f"member_{k}.ckpt" for k in range(len(result.members))]
            result.cache.save(out / "cache.bin")
            if data.handle is not None:
                _write_json(out / "teacher_gap.json",
                            {"oracle_gap": oracle_gap(result, data.handle, data.test)})
            stage.finish({"fits": fits})
    return SoftLogitCache.load(stage.dir / "cache.bin")


def run_student(cfg: ExperimentConfig, data: PreparedData, seed: int, cache: Optional[SoftLogitCache],
                resume: bool = True, log_queue=None, stop_event=None) -> Path:
    fp = student_fingerprint(cfg, data, seed)
    record = {"method": cfg.method, "seed": seed}
    if cache is not None:
        record.update(run_record(cache, replace(cfg.distill, seed=seed)))
    stage = Stage(Path(cfg.output_dir), "students", fp, record)
    with open_stage(stage, resume) as run:
        if run:
            _emit(log_queue, f"[seed {seed}] training {cfg.method} student")
            spec = cfg.model_spec(data.num_items)
            if cache is None:
                result = train_base(spec, data.train, data.valid, cfg.train, seed,
                                    log_queue=log_queue, stop_event=stop_event)
            else:
                result = train_student(spec, cache, replace(cfg.distill, seed=seed), data.train,
                                       data.valid, cfg.train, log_queue=log_queue, stop_event=stop_event)
            _check_stop(stop_event)
            save_checkpoint(result.model, stage.dir / "student.ckpt")
            write_trace(result, stage.dir / "trace.csv")
            stage.finish({"best_epoch": result.best_epoch, "best_valid_ndcg": result.best_valid_ndcg})
    return stage.dir


def cmd_train(cfg: ExperimentConfig, resume: bool = True, log_queue=None, progress_queue=None,
              stop_event=None) -> List[Path]:
    """Teacher stage (unless base) then student stage, once per seed."""
    data = _require_prepared(cfg, resume, log_queue)
    student_dirs = []
    for done, seed in enumerate(cfg.seeds, start=1):
        if stop_event is not None and stop_event.is_set():
            _emit(log_queue, "Stop requested; leaving remaining seeds untrained")
            break
        cache = None
        if cfg.method != "base":
            cache = run_teacher(cfg, data, seed, resume, log_queue, stop_event)
        student_dirs.append(run_student(cfg, data, seed, cache, resume, log_queue, stop_event))
        if progress_queue:
            progress_queue.put((done, len(cfg.seeds)))
    return student_dirs


# evaluate


def _teacher_gap(cfg: ExperimentConfig, data: PreparedData, seed: int) -> Optional[float]:
    path = Path(cfg.output_dir) / "teachers" / teacher_fingerprint(cfg, data, seed)[:12] / "teacher_gap.json"
    return _read_json(path)["oracle_gap"] if path.is_file() else None


def evaluate_seed(cfg: ExperimentConfig, data: PreparedData, seed: int) -> MetricReport:
    directory = Path(cfg.output_dir) / "students" / student_fingerprint(cfg, data, seed)[:12]
    manifest = directory / MANIFEST
    if not manifest.is_file() or not _read_json(manifest).get("complete"):
        raise EvaluationError(f"no trained {cfg.method} student for seed {seed}")
    model = load_checkpoint(directory / "student.ckpt")
    results = rank_all(model, data.test, data.bins, cfg.mask_history)
    report = grouped_report(results, data.bins, cfg.length_buckets, cfg.cutoffs, cfg.delta)
    if data.handle is not None:
        gap = oracle_gap(model, data.handle, data.test)
        report.extras["oracle_gap"] = gap
        teacher_gap = gap if cfg.method == "base" else _teacher_gap(cfg, data, seed)
        if teacher_gap is not None:
            report.extras["teacher_oracle_gap"] = teacher_gap
    return report


def cmd_evaluate(cfg: ExperimentConfig, resume: bool = True, log_queue=None) -> MetricReport:
    data = _require_prepared(cfg, resume, log_queue)
    reports = [evaluate_seed(cfg, data, seed) for seed in cfg.seeds]
    aggregate = aggregate_seeds(reports)
    fp = fingerprint("report", [student_fingerprint(cfg, data, s) for s in cfg.seeds],
                     cfg.cutoffs, cfg.delta, cfg.length_buckets, cfg.mask_history)
    stage = Stage(Path(cfg.output_dir), "reports", fp, {"method": cfg.method, "seeds": cfg.seeds})
    with open_stage(stage, resume=False):
        for seed, report in zip(cfg.seeds, reports):
            write_report(report, stage.dir / f"seed_{seed}.json")
        write_report(aggregate, stage.dir / "report.json")
        stage.finish()
    _emit(log_queue, f"{cfg.method} over seeds {cfg.seeds}:\n{aggregate.table()}")
    return aggregate


# ablate


_SWITCH = {"with": True, "true": True, "1": True, "yes": True,
           "without": False, "false": False, "0": False, "no": False}


def apply_sweep(cfg: ExperimentConfig, sweep: str, value: Any) -> ExperimentConfig:
    """Config for one sweep point; a value of the wrong kind raises ``ParameterError``."""
    if sweep not in SWEEPS:
        raise ConfigError(f"unknown sweep {sweep!r}; choose from {sorted(SWEEPS)}")
    try:
        if sweep == "teacher_count":
            if float(value) != int(float(value)):
                raise ValueError("not a whole number")
            return replace(cfg, teacher=replace(cfg.teacher, m=int(float(value))))
        if sweep == "subsample_ratio":
            return replace(cfg, teacher=replace(cfg.teacher, p=float(value)))
        if sweep == "temperature":
            return replace(cfg, distill=replace(cfg.distill, temperature=float(value)))
        if sweep == "beta":
            return replace(cfg, distill=replace(cfg.distill, beta=float(value)))
        enabled = _SWITCH[str(value).strip().lower()]
        return replace(cfg, teacher=replace(cfg.teacher, expectation_term=enabled))
    except (TypeError, ValueError, KeyError) as e:
        raise ParameterError(f"bad {sweep} value {value!r}: {e}") from None


def sweep_fingerprint(cfg: ExperimentConfig, sweep: str, values: Sequence[Any]) -> str:
    return fingerprint("sweep", asdict(cfg), sweep, [str(v) for v in values])


def cmd_ablate(cfg: ExperimentConfig, sweep: str, values: Optional[Sequence[Any]] = None,
               resume: bool = True, log_queue=None, progress_queue=None, stop_event=None) -> pd.DataFrame:
    """
    Run train and evaluate per sweep value and write a long CSV of
    ``sweep_value, metric, mean, std`` into a ``sweeps`` stage. Failed
    points are logged and listed in a sidecar JSON; the sweep carries on.
    """
    if sweep not in SWEEPS:
        raise ConfigError(f"unknown sweep {sweep!r}; choose from {sorted(SWEEPS)}")
    values = list(values) if values else list(SWEEPS[sweep])
    stage = Stage(Path(cfg.output_dir), "sweeps", sweep_fingerprint(cfg, sweep, values),
                  {"sweep": sweep, "method": cfg.method, "values": [str(v) for v in values]})
    name = f"{sweep}-{cfg.method}"
    with open_stage(stage, resume) as run:
        if run:
            rows, failures = [], []
            for done, value in enumerate(values, start=1):
                if stop_event is not None and stop_event.is_set():
                    break
                _emit(log_queue, f"Sweep {sweep} = {value}")
                try:
                    point = apply_sweep(cfg, sweep, value)
                    cmd_train(point, resume, log_queue, stop_event=stop_event)
                    report = cmd_evaluate(point, resume, log_queue)
                except RecDistillError as e:
                    logger.warning("Sweep point %s=%s failed: %s", sweep, value, e)
                    failures.append({"sweep_value": str(value), "error": f"{type(e).__name__}: {e}"})
                    continue
                for metric, mean in {**report.values, **report.extras}.items():
                    rows.append({"sweep_value": value, "metric": metric, "mean": mean,
                                 "std": report.std.get(metric, 0.0)})
                if progress_queue:
                    progress_queue.put((done, len(values)))
            _check_stop(stop_event)
            frame = pd.DataFrame(rows, columns=["sweep_value", "metric", "mean", "std"])
            frame.to_csv(stage.dir / f"{name}.csv", index=False, lineterminator="\n")
            _write_json(stage.dir / f"{name}.failures.json", failures)
            stage.finish({"failed_points": len(failures)})
            _emit(log_queue, f"Wrote sweep results to {stage.dir / (name + '.csv')} "
                             f"({len(failures)} failed points)")
            return frame
    _emit(log_queue, f"Sweep results already in {stage.dir / (name + '.csv')}")
    return pd.read_csv(stage.dir / f"{name}.csv")


# report


def cmd_report(cfg: ExperimentConfig, csv: Optional[str] = None, plot: Optional[str] = None,
               log_queue=None) -> List[str]:
    """Render stored aggregate reports as tables; optionally plot a sweep CSV."""
    tables = []
    for path in sorted((Path(cfg.output_dir) / "reports").glob("*/report.json")):
        manifest = _read_json(path.parent / MANIFEST) if (path.parent / MANIFEST).is_file() else {}
        method = manifest.get("config", {}).get("method", "?")
        table = f"{path.parent.name} ({method})\n{read_report(path).table()}"
        tables.append(table)
        _emit(log_queue, table)
    if csv is not None:
        target = plot or str(Path(csv).with_suffix(".png"))
        plot_sweep(csv, target)
        _emit(log_queue, f"Saved sweep plot to {target}")
    if not tables and csv is None:
        _emit(log_queue, f"No reports under {cfg.output_dir}")
    return tables


class ExperimentWorker(threading.Thread):
    """Run one CLI command in a background thread, reporting through queues."""

    def __init__(
        self,
        command: str,
        cfg: ExperimentConfig,
        resume: bool = True,
        sweep: Optional[str] = None,
        values: Optional[Sequence[Any]] = None,
        csv: Optional[str] = None,
        plot: Optional[str] = None,
        log_queue: Optional[queue.Queue] = None,
        progress_queue: Optional[queue.Queue] = None,
    ):
        super().__init__(daemon=True)
        if command not in ("prepare", "train", "evaluate", "ablate", "report"):
            raise ParameterError(f"unknown command {command!r}")
        self.command = command
        self.cfg = cfg
        self.resume = resume
        self.sweep = sweep
        self.values = values
        self.csv = csv
        self.plot = plot
        self.log_queue = log_queue
        self.progress_queue = progress_queue
        self.stop_event = threading.Event()
        self.result = None
        self.error: Optional[BaseException] = None

    def _log(self, msg: str) -> None:
        if self.log_queue:
            self.log_queue.put(msg)
        else:
            print(msg)

    def run(self) -> None:
        try:
            if self.command == "prepare":
                data = cmd_prepare(self.cfg, self.resume, self.log_queue)
                self.result = data.stats
            elif self.command == "train":
                self.result = cmd_train(self.cfg, self.resume, self.log_queue, self.progress_queue,
                                        self.stop_event)
            elif self.command == "evaluate":
                self.result = cmd_evaluate(self.cfg, self.resume, self.log_queue)
            elif self.command == "ablate":
                if self.sweep is None:
                    raise ConfigError("ablate needs --sweep")
                self.result = cmd_ablate(self.cfg, self.sweep, self.values, self.resume,
                                         self.log_queue, self.progress_queue, self.stop_event)
            else:
                self.result = cmd_report(self.cfg, self.csv, self.plot, self.log_queue)
        except Exception as e:
            self.error = e
            self._log(f"{self.command} failed: {e}")
            logger.debug("%s failed", self.command, exc_info=True)

    def stop(self) -> None:
        self._log("Stopping after the current training epoch...")
        self.stop_event.set()
