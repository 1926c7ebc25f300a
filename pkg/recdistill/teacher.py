"""
Confident teacher modules.

Each ``train_*`` function returns a ``TeacherResult`` whose ``SoftLogitCache``
holds one dense logit row per training sample, in training-sample order:

* model level: mean of ``m`` same-architecture models trained with different seeds
* data level: mean of ``m`` models each trained on its own ``p``-subsample
* training level: a main model co-trained against a frozen side model and a
  low-rank noise model with the robust loss
* popularity baseline: log of the smoothed training-target distribution
"""
import json
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Union

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .corpus import SequenceSample, as_arrays, samples_fingerprint, subsample_indices
from .errors import (
    DataError,
    NumericError,
    ParameterError,
    ShapeError,
    TeacherError,
    TrainingError,
)
from .fingerprint import derive_seed, fingerprint
from .seqmodel import (
    FitResult,
    ModelSpec,
    SequentialRecommender,
    TrainConfig,
    cross_entropy_loss,
    fit,
    predict_logits,
    resolve_device,
)

logger = logging.getLogger(__name__)

PROVENANCES = ("model_level", "data_level", "training_level", "popularity_baseline")
CLAMP = 1e-12


@dataclass
class TeacherConfig:
    m: int = 2
    p: float = 0.8
    alpha: float = 0.5
    seeds: List[int] = field(default_factory=list)
    expectation_term: bool = True
    average: str = "logits"
    top_k: Optional[int] = None
    noise_dim: int = 64
    allow_shared_seeds: bool = False

    def __post_init__(self):
        if self.m < 1:
            raise ParameterError(f"teacher count m must be >= 1, got {self.m}")
        if not 0.0 < self.p <= 1.0:
            raise ParameterError(f"subsample ratio p must be in (0, 1], got {self.p}")
        if not 0.0 <= self.alpha <= 1.0:
            raise ParameterError(f"alpha must be in [0, 1], got {self.alpha}")
        if self.average not in ("logits", "probs"):
            raise ParameterError(f"average must be 'logits' or 'probs', got {self.average!r}")
        if self.top_k is not None and self.top_k < 1:
            raise ParameterError("top_k must be positive when set")
        if self.noise_dim < 1:
            raise ParameterError("noise_dim must be positive")

    def member_seeds(self, count: int, stage: str) -> List[int]:
        seeds = list(self.seeds[:count])
        seeds += [derive_seed(0, stage, k) for k in range(len(seeds), count)]
        if not self.allow_shared_seeds and len(set(seeds)) != len(seeds):
            raise ParameterError(f"member seeds must be distinct, got {seeds}")
        return seeds


_CACHE_MAGIC = b"RDLC"
_CACHE_VERSION = 1
_CACHE_HEADER = np.dtype([
    ("magic", "S4"),
    ("version", "<u2"),
    ("provenance", "u1"),
    ("samples", "<u4"),
    ("num_items", "<u4"),
    ("teacher_count", "<u2"),
    ("fingerprint", "S64"),
])


@dataclass
class SoftLogitCache:
    """Dense teacher logits ``e_u``; row ``k`` belongs to training sample ``k``."""
    logits: np.ndarray
    provenance: str
    teacher_count: int
    fingerprint: str
    data_fingerprint: str = ""
    meta: Dict = field(default_factory=dict)

    def __post_init__(self):
        if self.provenance not in PROVENANCES:
            raise ParameterError(f"unknown provenance {self.provenance!r}")
        self.logits = np.ascontiguousarray(self.logits, dtype=np.float32)
        if self.logits.ndim != 2:
            raise ShapeError("cache logits must be a [samples, items] matrix")
        if not np.isfinite(self.logits).all():
            raise NumericError("cache contains non-finite logits")

    def __len__(self) -> int:
        return self.logits.shape[0]

    @property
    def num_items(self) -> int:
        return self.logits.shape[1]

    def entry(self, index: int) -> np.ndarray:
        return self.logits[index]

    def tensor(self) -> torch.Tensor:
        return torch.from_numpy(self.logits)

    def save(self, path: Union[str, Path]) -> None:
        """Binary rows plus a ``.json`` sidecar with seeds, p, alpha and member paths."""
        path = Path(path)
        header = np.array([(
            _CACHE_MAGIC, _CACHE_VERSION, PROVENANCES.index(self.provenance),
            len(self), self.num_items, self.teacher_count, self.fingerprint.encode("ascii"),
        )], dtype=_CACHE_HEADER)
        with open(path, "wb") as f:
            header.tofile(f)
            self.logits.astype("<f4").tofile(f)
        sidecar = {
            "provenance": self.provenance,
            "teacher_count": self.teacher_count,
            "fingerprint": self.fingerprint,
            "data_fingerprint": self.data_fingerprint,
            **self.meta,
        }
        path.with_suffix(".json").write_text(json.dumps(sidecar, indent=2), encoding="utf-8")

    @classmethod
    def load(cls, path: Union[str, Path]) -> "SoftLogitCache":
        path = Path(path)
        if not path.is_file():
            raise DataError(f"cache file not found: {path}")
        with open(path, "rb") as f:
            header = np.fromfile(f, dtype=_CACHE_HEADER, count=1)
            if header.size != 1 or header["magic"][0] != _CACHE_MAGIC:
                raise DataError(f"{path} is not a logit cache")
            h = header[0]
            rows, cols = int(h["samples"]), int(h["num_items"])
            logits = np.fromfile(f, dtype="<f4", count=rows * cols)
        if logits.size != rows * cols:
            raise DataError(f"{path}: truncated cache")
        meta = {}
        sidecar = path.with_suffix(".json")
        if sidecar.is_file():
            meta = json.loads(sidecar.read_text(encoding="utf-8"))
        data_fp = meta.pop("data_fingerprint", "")
        for key in ("provenance", "teacher_count", "fingerprint"):
            meta.pop(key, None)
        return cls(
            logits.reshape(rows, cols),
            PROVENANCES[int(h["provenance"])],
            int(h["teacher_count"]),
            h["fingerprint"].decode("ascii"),
            data_fp,
            meta,
        )


class NoiseModel(nn.Module):
    """
    Low-rank global noise matrix ``h = column_softmax(M @ N)``.

    ``h[i, j]`` approximates the chance of observing item ``i`` when the
    user actually preferred ``j``; every column is a distribution over ``i``.
    Factor entries start with standard deviation ``1/sqrt(dim)`` unless
    ``init_std`` is given, which keeps ``M @ N`` small and ``h`` near uniform.
    """

    def __init__(self, num_items: int, dim: int = 64, seed: int = 0, init_std: Optional[float] = None):
        super().__init__()
        if dim >= num_items:
            raise ParameterError(f"noise rank {dim} must be below the catalog size {num_items}")
        std = 1.0 / math.sqrt(dim) if init_std is None else init_std
        if std <= 0:
            raise ParameterError("init_std must be positive")
        gen = torch.Generator().manual_seed(seed)
        self.M = nn.Parameter(torch.randn(num_items, dim, generator=gen) * std)
        self.N = nn.Parameter(torch.randn(dim, num_items, generator=gen) * std)
        self.underflow_count = 0

    def matrix(self) -> torch.Tensor:
        return torch.softmax(self.M @ self.N, dim=0)

    def log_rows(self, observed: torch.Tensor) -> torch.Tensor:
        """``log h[i, :]`` for each observed 1-based item ``i``, floored at 1e-12."""
        rows = self.matrix()[observed.long() - 1]
        underflow = int((rows < CLAMP).sum())
        if underflow:
            self.underflow_count += underflow
            logger.warning("Clamped %d noise-matrix entries (total %d)", underflow, self.underflow_count)
        return torch.log(rows.clamp_min(CLAMP))


def kl_divergence(p, q) -> torch.Tensor:
    """``sum_k p_k (log p_k - log q_k)`` over the last axis, with 0 log 0 = 0."""
    p = p if isinstance(p, torch.Tensor) else torch.as_tensor(p, dtype=torch.float64)
    q = q if isinstance(q, torch.Tensor) else torch.as_tensor(q, dtype=p.dtype)
    if p.shape != q.shape:
        raise ShapeError(f"distribution shapes differ: {tuple(p.shape)} vs {tuple(q.shape)}")
    q = q.to(p.dtype)
    return (torch.xlogy(p, p) - torch.xlogy(p, q.clamp_min(CLAMP))).sum(dim=-1)


def robust_loss(
    logits_g1: torch.Tensor,
    logits_g2: torch.Tensor,
    targets: Union[int, torch.Tensor],
    noise: NoiseModel,
    alpha: float,
    expectation_term: bool = True,
    top_k: Optional[int] = None,
) -> torch.Tensor:
    """
    ``alpha KL(P2||P1) + (1 - alpha) KL(P1||P2) - sum_j log h[i, j] P1(j)``,
    averaged over the batch. ``logits_g2`` is treated as a constant.
    """
    if logits_g1.dim() == 1:
        logits_g1, logits_g2 = logits_g1.unsqueeze(0), logits_g2.unsqueeze(0)
    if logits_g1.shape != logits_g2.shape:
        raise ShapeError("main and side logits must have the same shape")
    if not 0.0 <= alpha <= 1.0:
        raise ParameterError(f"alpha must be in [0, 1], got {alpha}")
    if not (bool(torch.isfinite(logits_g1).all()) and bool(torch.isfinite(logits_g2).all())):
        raise NumericError("robust loss received non-finite logits")
    targets = torch.as_tensor(targets, device=logits_g1.device).reshape(-1)

    log_p1 = F.log_softmax(logits_g1, dim=-1)
    log_p2 = F.log_softmax(logits_g2.detach(), dim=-1)
    p1, p2 = log_p1.exp(), log_p2.exp()
    loss = alpha * (p2 * (log_p2 - log_p1)).sum(-1) + (1.0 - alpha) * (p1 * (log_p1 - log_p2)).sum(-1)
    if expectation_term:
        weights = p1
        if top_k is not None and top_k < p1.size(-1):
            keep = p1.topk(top_k, dim=-1).indices
            weights = torch.zeros_like(p1).scatter(-1, keep, p1.gather(-1, keep))
        loss = loss - (noise.log_rows(targets) * weights).sum(-1)
    return loss.mean()


def ensemble_logits(member_logits: Sequence[torch.Tensor], average: str = "logits") -> np.ndarray:
    """Mean of raw member logits, or log of the mean member softmax."""
    stacked = torch.stack([torch.as_tensor(m) for m in member_logits]).double()
    if average == "probs":
        merged = torch.logsumexp(F.log_softmax(stacked, dim=-1), dim=0) - math.log(len(member_logits))
    else:
        merged = stacked.mean(dim=0)
    return merged.float().numpy()


@dataclass
class TeacherResult:
    cache: SoftLogitCache
    members: List[SequentialRecommender] = field(default_factory=list)
    average: str = "logits"
    subsets: List[np.ndarray] = field(default_factory=list)
    fits: List[FitResult] = field(default_factory=list)
    side: Optional[SequentialRecommender] = None
    noise: Optional[NoiseModel] = None
    prior: Optional[np.ndarray] = None

    def predict(self, samples: Sequence[SequenceSample]) -> np.ndarray:
        """Teacher logits for arbitrary (e.g. held-out) samples."""
        if self.prior is not None:
            return np.tile(self.prior.astype(np.float32), (len(samples), 1))
        return ensemble_logits([predict_logits(m, samples) for m in self.members], self.average)


def _cache_fingerprint(provenance: str, cfg: TeacherConfig, spec: ModelSpec,
                       train_cfg: Optional[TrainConfig], data_fp: str) -> str:
    return fingerprint(provenance, cfg, spec, train_cfg, data_fp)


def _train_member(spec: ModelSpec, seed: int, train, valid, train_cfg: TrainConfig,
                  log_queue=None, stop_event=None) -> FitResult:
    model = spec.build(seed)
    return fit(model, train, valid, replace(train_cfg, seed=seed),
               log_queue=log_queue, stop_event=stop_event)


def _log(log_queue, msg: str) -> None:
    if log_queue:
        log_queue.put(msg)
    else:
        logger.info(msg)


def train_model_level(
    cfg: TeacherConfig,
    train: Sequence[SequenceSample],
    valid: Sequence[SequenceSample],
    spec: ModelSpec,
    train_cfg: TrainConfig,
    log_queue=None,
    stop_event=None,
) -> TeacherResult:
    seeds = cfg.member_seeds(cfg.m, "model_level")
    fits = []
    for k, seed in enumerate(seeds):
        _log(log_queue, f"Model-level member {k + 1}/{cfg.m} (seed {seed})")
        try:
            fits.append(_train_member(spec, seed, train, valid, train_cfg, log_queue, stop_event))
        except TrainingError as e:
            raise TeacherError(f"model-level member {k} failed: {e}") from e
    members = [f.model for f in fits]
    data_fp = samples_fingerprint(train)
    cache = SoftLogitCache(
        ensemble_logits([predict_logits(m, train) for m in members], cfg.average),
        "model_level", cfg.m,
        _cache_fingerprint("model_level", cfg, spec, train_cfg, data_fp), data_fp,
        {"seeds": seeds, "average": cfg.average},
    )
    full = np.arange(len(train))
    return TeacherResult(cache, members, cfg.average, [full] * cfg.m, fits)


def train_data_level(
    cfg: TeacherConfig,
    train: Sequence[SequenceSample],
    valid: Sequence[SequenceSample],
    spec: ModelSpec,
    train_cfg: TrainConfig,
    log_queue=None,
    stop_event=None,
) -> TeacherResult:
    seeds = cfg.member_seeds(cfg.m, "data_level")
    fits, subsets = [], []
    for k, seed in enumerate(seeds):
        index = subsample_indices(len(train), cfg.p, derive_seed(seed, "subsample"))
        subsets.append(index)
        _log(log_queue, f"Data-level member {k + 1}/{cfg.m} on {len(index)}/{len(train)} samples")
        try:
            fits.append(_train_member(spec, seed, [train[i] for i in index], valid, train_cfg,
                                      log_queue, stop_event))
        except TrainingError as e:
            raise TeacherError(f"data-level member {k} failed: {e}") from e
    members = [f.model for f in fits]
    data_fp = samples_fingerprint(train)
    cache = SoftLogitCache(
        ensemble_logits([predict_logits(m, train) for m in members], cfg.average),
        "data_level", cfg.m,
        _cache_fingerprint("data_level", cfg, spec, train_cfg, data_fp), data_fp,
        {"seeds": seeds, "p": cfg.p, "average": cfg.average,
         "subset_sizes": [int(len(s)) for s in subsets]},
    )
    return TeacherResult(cache, members, cfg.average, subsets, fits)


def train_training_level(
    cfg: TeacherConfig,
    train: Sequence[SequenceSample],
    valid: Sequence[SequenceSample],
    spec: ModelSpec,
    train_cfg: TrainConfig,
    log_queue=None,
    stop_event=None,
) -> TeacherResult:
    """
    Pretrain the side model on a ``p``-subsample, freeze it, then train the
    main model and the noise model jointly on ``ce + robust_loss``.
    """
    side_seed, main_seed = cfg.member_seeds(2, "training_level")
    index = subsample_indices(len(train), cfg.p, derive_seed(side_seed, "subsample"))
    _log(log_queue, f"Pretraining side teacher on {len(index)}/{len(train)} samples")
    try:
        side_fit = _train_member(spec, side_seed, [train[i] for i in index], valid, train_cfg,
                                 log_queue, stop_event)
    except TrainingError as e:
        raise TeacherError(f"side teacher failed: {e}") from e
    side = side_fit.model
    side.requires_grad_(False)
    side.eval()
    frozen = {k: v.clone() for k, v in side.state_dict().items()}

    device = resolve_device(train_cfg.device)
    side_logits = predict_logits(side, train).to(device)
    noise = NoiseModel(spec.num_items, cfg.noise_dim, seed=derive_seed(main_seed, "noise"))

    def loss_fn(logits, targets, index):
        reg = robust_loss(logits, side_logits[index], targets, noise, cfg.alpha,
                          expectation_term=cfg.expectation_term, top_k=cfg.top_k)
        return cross_entropy_loss(logits, targets) + reg

    _log(log_queue, "Training main teacher with the robust loss")
    main = spec.build(main_seed)
    try:
        main_fit = fit(main, train, valid, replace(train_cfg, seed=main_seed), loss_fn,
                       extra_modules=[noise], log_queue=log_queue, stop_event=stop_event)
    except TrainingError as e:
        raise TeacherError(f"main teacher failed: {e}") from e
    for name, value in side.state_dict().items():
        if not torch.equal(value.cpu(), frozen[name].cpu()):
            raise TeacherError(f"side teacher parameter {name} changed during main training")

    data_fp = samples_fingerprint(train)
    cache = SoftLogitCache(
        predict_logits(main, train).numpy(),
        "training_level", 2,
        _cache_fingerprint("training_level", cfg, spec, train_cfg, data_fp), data_fp,
        {"seeds": [side_seed, main_seed], "p": cfg.p, "alpha": cfg.alpha,
         "expectation_term": cfg.expectation_term, "noise_underflow": noise.underflow_count},
    )
    return TeacherResult(cache, [main], "logits", [index, np.arange(len(train))],
                         [side_fit, main_fit], side=side, noise=noise)


def popularity_prior(train: Sequence[SequenceSample], num_items: int) -> np.ndarray:
    """Log of the +1 smoothed training-target distribution."""
    _, targets = as_arrays(train)
    counts = np.bincount(targets, minlength=num_items + 1)[1:].astype(np.float64)
    return np.log((counts + 1.0) / (counts.sum() + num_items))


def train_popularity_baseline(train: Sequence[SequenceSample], num_items: int) -> TeacherResult:
    if not train:
        raise ParameterError("popularity teacher needs a non-empty training set")
    prior = popularity_prior(train, num_items)
    data_fp = samples_fingerprint(train)
    cache = SoftLogitCache(
        np.tile(prior.astype(np.float32), (len(train), 1)),
        "popularity_baseline", 1,
        fingerprint("popularity_baseline", num_items, data_fp), data_fp,
    )
    return TeacherResult(cache, prior=prior)


def max_ensemble_error(result: TeacherResult, train: Sequence[SequenceSample],
                       count: int = 100, seed: int = 0) -> float:
    """Largest gap between sampled cache rows and a fresh merge of the members' logits."""
    rng = np.random.default_rng(seed)
    picked = rng.choice(len(train), size=min(count, len(train)), replace=False)
    subset = [train[i] for i in picked]
    recomputed = ensemble_logits([predict_logits(m, subset) for m in result.members], result.average)
    return float(np.abs(result.cache.logits[picked] - recomputed).max())
