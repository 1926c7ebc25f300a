"""
Synthetic sequential worlds with a known preference distribution.

A world holds user and item factors. For a user ``u`` whose last logged item
is ``j`` the oracle logits are ``(1 - mix) * <U_u, V_i> + mix * <V_j, V_i>``
and ``P(i | s_u)`` is their softmax. Each observation is swapped, with
probability ``swap_prob``, for a Zipf-popularity draw over the other items.
"""
import json
import logging
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
import torch
from scipy.special import log_softmax, softmax, xlogy

from .corpus import PAD, InteractionLog, SequenceSample, from_events
from .errors import DataError, GenerationError, HandleMismatchError, InputError, ParameterError
from .seqmodel import predict_logits

logger = logging.getLogger(__name__)

RATING_THRESHOLD = 4.0
_START_TIME = 1_000_000


@dataclass
class WorldSpec:
    num_users: int = 500
    num_items: int = 200
    k: int = 8
    mix: float = 0.5
    swap_prob: float = 0.3
    popularity_exponent: float = 1.0
    seq_len: int = 10
    seed: int = 0
    scale: float = 2.0

    def __post_init__(self):
        if not 1 <= self.k < min(self.num_users, self.num_items):
            raise ParameterError(f"k must be in [1, min(|U|, |I|)), got {self.k}")
        if not 0.0 <= self.swap_prob <= 1.0:
            raise ParameterError(f"swap_prob must be in [0, 1], got {self.swap_prob}")
        if not 0.0 <= self.mix <= 1.0:
            raise ParameterError(f"mix must be in [0, 1], got {self.mix}")
        if self.seq_len < 3:
            raise ParameterError(f"seq_len must be >= 3, got {self.seq_len}")
        if self.scale <= 0:
            raise ParameterError("scale must be positive")


@dataclass
class OracleWorld:
    user_factors: np.ndarray
    item_factors: np.ndarray
    mix: float = 0.5
    swap_prob: float = 0.3
    popularity_exponent: float = 1.0
    popularity_order: Optional[np.ndarray] = None
    seed: int = 0

    def __post_init__(self):
        self.user_factors = np.asarray(self.user_factors, dtype=np.float64)
        self.item_factors = np.asarray(self.item_factors, dtype=np.float64)
        if self.user_factors.shape[1] != self.item_factors.shape[1]:
            raise ParameterError("user and item factors need the same rank")
        if self.popularity_order is None:
            self.popularity_order = np.arange(self.num_items)
        self.popularity_order = np.asarray(self.popularity_order, dtype=np.int64)

    @property
    def num_users(self) -> int:
        return self.user_factors.shape[0]

    @property
    def num_items(self) -> int:
        return self.item_factors.shape[0]

    def popularity(self) -> np.ndarray:
        """Zipf weights: the item at ``popularity_order[r]`` gets ``(r + 1) ** -exponent``."""
        weights = np.empty(self.num_items)
        weights[self.popularity_order] = (np.arange(self.num_items) + 1.0) ** -self.popularity_exponent
        return weights / weights.sum()

    def logits(self, user: int, last_item: Optional[int]) -> np.ndarray:
        """Oracle logits over world items; indices are 0-based."""
        affinity = self.item_factors @ self.user_factors[user]
        if last_item is None:
            return affinity
        similarity = self.item_factors @ self.item_factors[last_item]
        return (1.0 - self.mix) * affinity + self.mix * similarity

    def distribution(self, user: int, last_item: Optional[int]) -> np.ndarray:
        probs = softmax(self.logits(user, last_item))
        if not np.isfinite(probs).all():
            raise GenerationError(f"non-finite oracle probabilities for user {user}")
        return probs


def build_world(spec: WorldSpec) -> OracleWorld:
    rng = np.random.default_rng(spec.seed)
    std = np.sqrt(spec.scale) / spec.k ** 0.25
    users = rng.normal(0.0, std, size=(spec.num_users, spec.k))
    items = rng.normal(0.0, std, size=(spec.num_items, spec.k))
    order = rng.permutation(spec.num_items)
    return OracleWorld(users, items, spec.mix, spec.swap_prob, spec.popularity_exponent, order, spec.seed)


@dataclass
class OracleHandle:
    """Binds a world to the dense ids of one generated (and maybe filtered) log."""
    world: OracleWorld
    user_ids: np.ndarray
    item_ids: np.ndarray

    @classmethod
    def from_log(cls, world: OracleWorld, log: InteractionLog) -> "OracleHandle":
        try:
            users = np.array([int(u) for u in log.raw_users], dtype=np.int64) - 1
            items = np.array([int(i) for i in log.raw_items], dtype=np.int64) - 1
        except ValueError:
            raise HandleMismatchError("log ids do not come from a synthetic world") from None
        if users.min() < 0 or users.max() >= world.num_users or items.min() < 0 \
                or items.max() >= world.num_items:
            raise HandleMismatchError("log ids fall outside the world")
        return cls(world, users, items)


def generate(world: OracleWorld, users: Optional[Sequence[int]] = None, seq_len: int = 10
             ) -> Tuple[InteractionLog, OracleHandle]:
    """
    Sample each user's history from the oracle, corrupting observations.

    Ratings are uniform in [4, 5] for clean observations and uniform in
    [1, 3] for swapped ones. Every user draws from ``default_rng([seed, u])``,
    so a user's history does not depend on which other users are generated.
    """
    if seq_len < 3:
        raise ParameterError(f"seq_len must be >= 3, got {seq_len}")
    if world.num_items < 2:
        raise ParameterError("a world needs at least two items")
    users = list(range(world.num_users)) if users is None else [int(u) for u in users]
    popularity = world.popularity()
    rows = []
    for u in users:
        rng = np.random.default_rng([world.seed, u])
        last = None
        for t in range(seq_len):
            clean = int(rng.choice(world.num_items, p=world.distribution(u, last)))
            if rng.random() < world.swap_prob:
                weights = popularity.copy()
                weights[clean] = 0.0
                logged = int(rng.choice(world.num_items, p=weights / weights.sum()))
                rating = rng.uniform(1.0, 3.0)
            else:
                logged, rating = clean, rng.uniform(4.0, 5.0)
            rows.append((str(u + 1), str(logged + 1), _START_TIME + t, rating))
            last = logged
    frame = pd.DataFrame(rows, columns=["user", "item", "timestamp", "rating"])
    log = from_events(frame)
    corrupted = float((frame["rating"] < RATING_THRESHOLD).mean())
    logger.info("Generated %d events for %d users; corrupted fraction %.3f",
                len(frame), len(users), corrupted)
    return log, OracleHandle.from_log(world, log)


def _last_item(sequence: Sequence[int]) -> Optional[int]:
    for item in reversed(sequence):
        if item != PAD:
            return int(item)
    return None


def oracle_distribution(handle: OracleHandle, sequence, user_id: Optional[int] = None) -> np.ndarray:
    """
    Exact ``P(i | s_u)`` over the handle's dense catalog, renormalized over
    the items the log retained. ``sequence`` may be a ``SequenceSample``.
    """
    if isinstance(sequence, SequenceSample):
        user_id, sequence = sequence.user_id, sequence.sequence
    if user_id is None:
        raise InputError("oracle queries need the user id")
    n_items = len(handle.item_ids)
    if not 1 <= user_id <= len(handle.user_ids):
        raise HandleMismatchError(f"user {user_id} is not in this handle")
    if any(i != PAD and not 1 <= i <= n_items for i in sequence):
        raise HandleMismatchError("sequence references items outside this handle")
    last = _last_item(sequence)
    world_last = None if last is None else int(handle.item_ids[last - 1])
    logits = handle.world.logits(int(handle.user_ids[user_id - 1]), world_last)[handle.item_ids]
    probs = softmax(logits)
    if not np.isfinite(probs).all():
        raise GenerationError("non-finite oracle probabilities")
    return probs


def oracle_matrix(handle: OracleHandle, contexts: Sequence[SequenceSample]) -> np.ndarray:
    return np.stack([oracle_distribution(handle, s) for s in contexts])


def _predicted_logits(predictor, contexts: Sequence[SequenceSample]) -> np.ndarray:
    if hasattr(predictor, "predict"):
        return np.asarray(predictor.predict(contexts), dtype=np.float64)
    if isinstance(predictor, torch.nn.Module):
        return predict_logits(predictor, contexts).double().numpy()
    if hasattr(predictor, "logits"):
        return np.asarray(predictor.logits, dtype=np.float64)
    if isinstance(predictor, torch.Tensor):
        return predictor.detach().double().cpu().numpy()
    return np.asarray(predictor, dtype=np.float64)


def oracle_gap(predictor, handle: OracleHandle, contexts: Sequence[SequenceSample]) -> float:
    """
    Mean ``KL(oracle || softmax(prediction))`` over ``contexts``.

    ``predictor`` is a model, a teacher result, a logit cache whose rows line
    up with ``contexts``, or a raw ``[N, |I|]`` logit array.
    """
    if not contexts:
        raise InputError("oracle gap needs at least one context")
    predicted = _predicted_logits(predictor, contexts)
    if predicted.shape != (len(contexts), len(handle.item_ids)):
        raise HandleMismatchError(f"prediction shape {predicted.shape} does not match the handle")
    oracle = oracle_matrix(handle, contexts)
    kl = (xlogy(oracle, oracle) - oracle * log_softmax(predicted, axis=1)).sum(axis=1)
    return float(kl.mean())


def save_world(world: OracleWorld, spec: Optional[WorldSpec], path: Union[str, Path]) -> None:
    """Factors as ``.npz`` plus a ``.json`` sidecar with the generating spec."""
    path = Path(path)
    np.savez(path.with_suffix(".npz"), user_factors=world.user_factors,
             item_factors=world.item_factors, popularity_order=world.popularity_order)
    meta = {
        "mix": world.mix,
        "swap_prob": world.swap_prob,
        "popularity_exponent": world.popularity_exponent,
        "seed": world.seed,
        "spec": asdict(spec) if spec is not None else None,
    }
    path.with_suffix(".json").write_text(json.dumps(meta, indent=2), encoding="utf-8")


def load_world(path: Union[str, Path]) -> OracleWorld:
    path = Path(path)
    npz, sidecar = path.with_suffix(".npz"), path.with_suffix(".json")
    if not npz.is_file() or not sidecar.is_file():
        raise DataError(f"world files missing for {path}")
    meta = json.loads(sidecar.read_text(encoding="utf-8"))
    with np.load(npz) as data:
        return OracleWorld(
            data["user_factors"], data["item_factors"], meta["mix"], meta["swap_prob"],
            meta["popularity_exponent"], data["popularity_order"], meta["seed"],
        )
