"""Soft labels from cached teacher logits and student training."""
import logging
from dataclasses import dataclass, replace
from typing import Sequence, Union

import numpy as np
import torch
import torch.nn.functional as F

from .corpus import SequenceSample, samples_fingerprint
from .errors import ConsistencyError, InputError, NumericError, ParameterError
from .seqmodel import FitResult, ModelSpec, TrainConfig, cross_entropy_loss, fit, resolve_device
from .teacher import SoftLogitCache, kl_divergence

logger = logging.getLogger(__name__)

KL_DIRECTIONS = ("student_first", "teacher_first")


@dataclass
class DistillConfig:
    temperature: float = 1.0
    beta: float = 0.5
    seed: int = 0
    kl_direction: str = "student_first"

    def __post_init__(self):
        if self.temperature <= 0:
            raise ParameterError(f"temperature must be > 0, got {self.temperature}")
        if not 0.0 <= self.beta <= 1.0:
            raise ParameterError(f"beta must be in [0, 1], got {self.beta}")
        if self.kl_direction not in KL_DIRECTIONS:
            raise ParameterError(f"kl_direction must be one of {KL_DIRECTIONS}")


def _as_tensor(values) -> torch.Tensor:
    if isinstance(values, torch.Tensor):
        return values
    return torch.as_tensor(np.asarray(values, dtype=np.float64))


def make_soft_labels(e_u, target: Union[int, torch.Tensor], temperature: float) -> torch.Tensor:
    """
    ``0.5 * (softmax(e_u / T) + onehot(target))``.

    Works on a single ``[|I|]`` vector or a ``[B, |I|]`` batch; targets are
    1-based. Temperature only touches the teacher part.
    """
    if temperature <= 0:
        raise ParameterError(f"temperature must be > 0, got {temperature}")
    e_u = _as_tensor(e_u)
    single = e_u.dim() == 1
    if single:
        e_u = e_u.unsqueeze(0)
    if not bool(torch.isfinite(e_u).all()):
        raise NumericError("teacher logits contain non-finite values")
    targets = torch.as_tensor(target, dtype=torch.long, device=e_u.device).reshape(-1)
    if bool((targets < 1).any()) or bool((targets > e_u.size(1)).any()):
        raise InputError(f"targets must be in [1, {e_u.size(1)}]")
    onehot = F.one_hot(targets - 1, e_u.size(1)).to(e_u.dtype)
    r = 0.5 * (torch.softmax(e_u / temperature, dim=-1) + onehot)
    return r[0] if single else r


def soft_label_entropy(e_u, temperature: float) -> torch.Tensor:
    """Entropy of the tempered teacher distribution ``softmax(e_u / T)``."""
    if temperature <= 0:
        raise ParameterError(f"temperature must be > 0, got {temperature}")
    log_p = F.log_softmax(_as_tensor(e_u) / temperature, dim=-1)
    return -(log_p.exp() * log_p).sum(dim=-1)


def student_loss(
    student_logits: torch.Tensor,
    target: Union[int, torch.Tensor],
    r_u: torch.Tensor,
    beta: float,
    kl_direction: str = "student_first",
) -> torch.Tensor:
    """``(1 - beta) * ce + beta * KL(P_f || r_u)``, batch mean."""
    if not 0.0 <= beta <= 1.0:
        raise ParameterError(f"beta must be in [0, 1], got {beta}")
    ce = cross_entropy_loss(student_logits, target)
    if beta == 0.0:
        return ce
    logits = student_logits.unsqueeze(0) if student_logits.dim() == 1 else student_logits
    r_u = r_u.unsqueeze(0) if r_u.dim() == 1 else r_u
    p_f = torch.softmax(logits, dim=-1)
    if kl_direction == "teacher_first":
        kl = kl_divergence(r_u.to(p_f.dtype), p_f)
    elif kl_direction == "student_first":
        kl = kl_divergence(p_f, r_u.to(p_f.dtype))
    else:
        raise ParameterError(f"unknown kl_direction {kl_direction!r}")
    return (1.0 - beta) * ce + beta * kl.mean()


def check_cache(cache: SoftLogitCache, train: Sequence[SequenceSample], num_items: int) -> None:
    """Raise ``ConsistencyError`` unless ``cache`` has one row per training sample."""
    if len(cache) != len(train):
        raise ConsistencyError(f"cache holds {len(cache)} rows for {len(train)} training samples")
    if cache.num_items != num_items:
        raise ConsistencyError(f"cache covers {cache.num_items} items, model expects {num_items}")
    if cache.data_fingerprint and cache.data_fingerprint != samples_fingerprint(train):
        raise ConsistencyError("cache was built for a different training set")


def train_base(
    spec: ModelSpec,
    train: Sequence[SequenceSample],
    valid: Sequence[SequenceSample],
    train_cfg: TrainConfig,
    seed: int,
    log_queue=None,
    stop_event=None,
) -> FitResult:
    """Plain cross-entropy training from a fresh model."""
    model = spec.build(seed)
    return fit(model, train, valid, replace(train_cfg, seed=seed),
               log_queue=log_queue, stop_event=stop_event)


def train_student(
    spec: ModelSpec,
    cache: SoftLogitCache,
    cfg: DistillConfig,
    train: Sequence[SequenceSample],
    valid: Sequence[SequenceSample],
    train_cfg: TrainConfig,
    log_queue=None,
    stop_event=None,
) -> FitResult:
    """
    Fit a fresh student on ``student_loss`` with soft labels built per batch
    from the cached teacher logits. With ``beta == 0`` this is exactly
    ``train_base`` under the same seed.
    """
    check_cache(cache, train, spec.num_items)
    teacher_logits = cache.tensor().to(resolve_device(train_cfg.device))

    def loss_fn(logits, targets, index):
        if cfg.beta == 0.0:
            return cross_entropy_loss(logits, targets)
        r_u = make_soft_labels(teacher_logits[index], targets, cfg.temperature)
        return student_loss(logits, targets, r_u, cfg.beta, cfg.kl_direction)

    logger.info("Training student (T=%s, beta=%s, seed=%d) on %s cache",
                cfg.temperature, cfg.beta, cfg.seed, cache.provenance)
    model = spec.build(cfg.seed)
    return fit(model, train, valid, replace(train_cfg, seed=cfg.seed), loss_fn,
               log_queue=log_queue, stop_event=stop_event)


def run_record(cache: SoftLogitCache, cfg: DistillConfig) -> dict:
    """Provenance fields written to a student run manifest."""
    return {
        "cache_fingerprint": cache.fingerprint,
        "provenance": cache.provenance,
        "temperature": cfg.temperature,
        "beta": cfg.beta,
        "seed": cfg.seed,
        "kl_direction": cfg.kl_direction,
    }
