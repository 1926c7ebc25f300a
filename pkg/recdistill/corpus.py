"""Interaction-log ingestion, filtering, sequence building and splits."""
import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, FrozenSet, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from .errors import (
    DataError,
    EmptyAfterFilterError,
    EmptyInputError,
    ParameterError,
    ParseError,
)
from .fingerprint import fingerprint

logger = logging.getLogger(__name__)

PAD = 0
SPLITS = ("train", "valid", "test")
PathLike = Union[str, Path]


@dataclass
class InteractionLog:
    """
    Time-ordered interaction events with dense ids.

    ``events`` has columns user, item, timestamp, rating (NaN when absent),
    sorted by user then timestamp. Dense id ``k`` maps to ``raw_users[k - 1]``
    and ``raw_items[k - 1]``; id 0 is reserved for padding.
    """
    events: pd.DataFrame
    raw_users: np.ndarray
    raw_items: np.ndarray

    @property
    def user_count(self) -> int:
        return len(self.raw_users)

    @property
    def catalog_size(self) -> int:
        return len(self.raw_items)

    @property
    def has_ratings(self) -> bool:
        return len(self.events) > 0 and bool(self.events["rating"].notna().all())

    @property
    def sparsity(self) -> float:
        cells = self.user_count * self.catalog_size
        return 1.0 - len(self.events) / cells if cells else 1.0

    def histories(self) -> Iterator[Tuple[int, np.ndarray, np.ndarray]]:
        """Yield ``(user, items, ratings)`` per user, oldest event first."""
        for user, group in self.events.groupby("user", sort=True):
            yield int(user), group["item"].to_numpy(), group["rating"].to_numpy()

    def stats(self) -> Dict[str, float]:
        return {
            "users": self.user_count,
            "items": self.catalog_size,
            "interactions": int(len(self.events)),
            "sparsity": round(self.sparsity, 6),
            "has_ratings": self.has_ratings,
        }


@dataclass(frozen=True)
class SequenceSample:
    user_id: int
    sequence: Tuple[int, ...]
    target: int
    split: str
    target_rating: Optional[float] = None

    @property
    def history_length(self) -> int:
        """Number of non-padding positions in the input."""
        return sum(1 for i in self.sequence if i != PAD)


@dataclass(frozen=True)
class PopularityBins:
    popular_items: FrozenSet[int]
    niche_items: FrozenSet[int]
    counts: Tuple[int, ...] = ()

    def is_popular(self, item: int) -> bool:
        return item in self.popular_items

    def kind(self, item: int) -> str:
        return "popular-type" if item in self.popular_items else "niche-type"

    def to_dict(self) -> dict:
        return {
            "popular_items": sorted(self.popular_items),
            "niche_items": sorted(self.niche_items),
            "counts": list(self.counts),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "PopularityBins":
        return cls(
            frozenset(int(i) for i in data["popular_items"]),
            frozenset(int(i) for i in data["niche_items"]),
            tuple(int(c) for c in data.get("counts", ())),
        )

    def save(self, path: PathLike) -> None:
        Path(path).write_text(json.dumps(self.to_dict()), encoding="utf-8")

    @classmethod
    def load(cls, path: PathLike) -> "PopularityBins":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def _is_number(text: str) -> bool:
    try:
        float(text)
        return True
    except ValueError:
        return False


def _sorted_unique(values: pd.Series) -> np.ndarray:
    uniques = pd.unique(values)
    if all(_is_number(v) for v in uniques):
        return np.array(sorted(uniques, key=float), dtype=object)
    return np.array(sorted(uniques), dtype=object)


def from_events(frame: pd.DataFrame) -> InteractionLog:
    """Build a log from raw ``user, item, timestamp, rating`` columns."""
    if frame.empty:
        raise EmptyInputError("no interaction events")
    users = frame["user"].astype(str)
    items = frame["item"].astype(str)
    raw_users = _sorted_unique(users)
    raw_items = _sorted_unique(items)
    user_ids = {raw: k for k, raw in enumerate(raw_users, start=1)}
    item_ids = {raw: k for k, raw in enumerate(raw_items, start=1)}
    rating = frame["rating"] if "rating" in frame else pd.Series(np.nan, index=frame.index)
    events = pd.DataFrame({
        "user": users.map(user_ids).to_numpy(dtype=np.int64),
        "item": items.map(item_ids).to_numpy(dtype=np.int64),
        "timestamp": frame["timestamp"].to_numpy(dtype=np.int64),
        "rating": rating.to_numpy(dtype=float),
        "_order": np.arange(len(frame)),
    })
    events = events.sort_values(["user", "timestamp", "_order"]).drop(columns="_order")
    return InteractionLog(events.reset_index(drop=True), raw_users, raw_items)


def _parse_row(path: str, lineno: int, fields: List[str]) -> Tuple[str, str, int, float]:
    if len(fields) not in (3, 4):
        raise ParseError(path, lineno, f"expected 3 or 4 fields, got {len(fields)}")
    user, item, stamp = fields[0], fields[1], fields[2]
    if not user or not item:
        raise ParseError(path, lineno, "empty user or item id")
    try:
        timestamp = int(stamp) if stamp.lstrip("-").isdigit() else int(float(stamp))
    except ValueError:
        raise ParseError(path, lineno, f"timestamp is not a number: {stamp!r}") from None
    rating = math.nan
    if len(fields) == 4 and fields[3] not in ("", "-"):
        try:
            rating = float(fields[3])
        except ValueError:
            raise ParseError(path, lineno, f"rating is not a number: {fields[3]!r}") from None
        if not 0.0 <= rating <= 5.0:
            raise ParseError(path, lineno, f"rating {rating} outside [0, 5]")
    return user, item, timestamp, rating


def load_interactions(
    path: PathLike,
    sep: Optional[str] = None,
    map_dir: Optional[PathLike] = None,
) -> InteractionLog:
    """
    Read a tab- or comma-separated ``user, item, timestamp[, rating]`` file.

    A leading line is a header only when none of its fields is numeric; any
    other first line must parse as an event. When ``map_dir`` is given the
    raw-to-dense id maps are written there.
    """
    path = Path(path)
    if not path.is_file():
        raise DataError(f"interaction file not found: {path}")
    lines = path.read_text(encoding="utf-8").splitlines()
    numbered = [(i, ln) for i, ln in enumerate(lines, start=1) if ln.strip()]
    if not numbered:
        raise EmptyInputError(f"{path} is empty")

    if sep is None:
        sep = "\t" if "\t" in numbered[0][1] else ","
    head = [f.strip() for f in numbered[0][1].split(sep)]
    if len(head) >= 3 and not any(_is_number(f) for f in head):
        rest = [[f.strip() for f in ln.split(sep)] for _, ln in numbered[1:]]
        users = {r[0] for r in rest}
        items = {r[1] for r in rest if len(r) > 1}
        if head[0] in users or head[1] in items:
            raise ParseError(str(path), numbered[0][0], "first row looks like an event but does not parse")
        numbered = numbered[1:]
    if not numbered:
        raise EmptyInputError(f"{path} has a header but no events")

    rows = [_parse_row(str(path), i, [f.strip() for f in ln.split(sep)]) for i, ln in numbered]
    frame = pd.DataFrame(rows, columns=["user", "item", "timestamp", "rating"])
    log = from_events(frame)
    logger.info("Loaded %d events (%d users, %d items) from %s",
                len(log.events), log.user_count, log.catalog_size, path)
    if map_dir is not None:
        write_id_maps(log, map_dir)
    return log


def _redensify(events: pd.DataFrame, raw_users: np.ndarray, raw_items: np.ndarray) -> InteractionLog:
    users = np.sort(events["user"].unique())
    items = np.sort(events["item"].unique())
    user_map = np.zeros(len(raw_users) + 1, dtype=np.int64)
    item_map = np.zeros(len(raw_items) + 1, dtype=np.int64)
    user_map[users] = np.arange(1, len(users) + 1)
    item_map[items] = np.arange(1, len(items) + 1)
    remapped = events.assign(
        user=user_map[events["user"].to_numpy()],
        item=item_map[events["item"].to_numpy()],
    ).reset_index(drop=True)
    return InteractionLog(remapped, raw_users[users - 1], raw_items[items - 1])


def filter_min_interactions(log: InteractionLog, k: int = 5) -> InteractionLog:
    """Drop users and items with fewer than ``k`` events until nothing changes."""
    if k < 1:
        raise ParameterError(f"k must be >= 1, got {k}")
    events = log.events
    rounds = 0
    while len(events):
        user_counts = events.groupby("user")["item"].transform("size")
        item_counts = events.groupby("item")["user"].transform("size")
        keep = (user_counts >= k) & (item_counts >= k)
        if keep.all():
            break
        events = events[keep]
        rounds += 1
    if events.empty:
        raise EmptyAfterFilterError(f"no events left after filtering with k={k}")
    logger.debug("Filter reached fixpoint after %d rounds", rounds)
    return _redensify(events, log.raw_users, log.raw_items)


def _make_sample(user: int, items: np.ndarray, target: int, rating: float,
                 split: str, max_len: int) -> SequenceSample:
    history = tuple(int(i) for i in items[-max_len:])
    padded = (PAD,) * (max_len - len(history)) + history
    target_rating = None if rating is None or np.isnan(rating) else float(rating)
    return SequenceSample(int(user), padded, int(target), split, target_rating)


def build_sequences(log: InteractionLog, max_len: int, prefixes: bool = False) -> List[SequenceSample]:
    """
    Leave-one-out samples per user.

    The last event is the test target and the second-to-last the validation
    target, each with up to ``max_len`` preceding items. Earlier history is
    cut oldest-first into non-overlapping windows of ``max_len + 1`` items.
    A window gives one training sample for its last item, or with
    ``prefixes`` one sample per item after the first, each fed only the
    window items before it. Either way an event is the target of at most
    one sample. Events sharing a timestamp keep file order, so an input may
    carry the same timestamp as its target but never a later one.
    """
    if max_len < 2:
        raise ParameterError(f"max_len must be >= 2, got {max_len}")
    samples: List[SequenceSample] = []
    skipped = 0
    for user, items, ratings in log.histories():
        n = len(items)
        if n < 3:
            skipped += 1
            continue
        train_part = items[: n - 2]
        for start in range(0, len(train_part), max_len + 1):
            window = train_part[start: start + max_len + 1]
            if len(window) < 2:
                continue
            first = 1 if prefixes else len(window) - 1
            for k in range(first, len(window)):
                samples.append(_make_sample(user, window[:k], window[k], ratings[start + k], "train", max_len))
        samples.append(_make_sample(user, items[: n - 2], items[n - 2], ratings[n - 2], "valid", max_len))
        samples.append(_make_sample(user, items[: n - 1], items[n - 1], ratings[n - 1], "test", max_len))
    if skipped:
        logger.warning("Skipped %d users with fewer than 3 events", skipped)
    return samples


def partition(samples: Sequence[SequenceSample]) -> Dict[str, List[SequenceSample]]:
    out: Dict[str, List[SequenceSample]] = {name: [] for name in SPLITS}
    for s in samples:
        out[s.split].append(s)
    return out


def subsample_indices(n: int, p: float, seed: int) -> np.ndarray:
    """Sorted indices of a uniform ``floor(p * n)`` sample without replacement."""
    if not 0.0 < p <= 1.0:
        raise ParameterError(f"subsample ratio must be in (0, 1], got {p}")
    size = math.floor(p * n + 1e-9)
    if size == 0:
        raise ParameterError(f"subsample of ratio {p} from {n} samples is empty")
    rng = np.random.default_rng(seed)
    return np.sort(rng.choice(n, size=size, replace=False))


def subsample(samples: Sequence[SequenceSample], p: float, seed: int) -> List[SequenceSample]:
    if any(s.split != "train" for s in samples):
        raise ParameterError("subsample operates on the training split only")
    return [samples[i] for i in subsample_indices(len(samples), p, seed)]


def popularity_bins(
    train: Sequence[SequenceSample],
    catalog_size: int,
    popular_fraction: float = 0.2,
) -> PopularityBins:
    """Top ``popular_fraction`` of items by training frequency, ties by ascending id."""
    if not train:
        raise EmptyInputError("popularity bins need a non-empty training set")
    seqs, targets = as_arrays(train)
    if max(seqs.max(), targets.max()) > catalog_size:
        raise ParameterError("sample references an item outside the catalog")
    counts = np.bincount(seqs.ravel(), minlength=catalog_size + 1)
    counts += np.bincount(targets, minlength=catalog_size + 1)
    counts[PAD] = 0
    ids = np.arange(1, catalog_size + 1)
    order = np.lexsort((ids, -counts[1:]))
    n_popular = math.ceil(popular_fraction * catalog_size - 1e-9)
    popular = frozenset(int(i) for i in ids[order[:n_popular]])
    niche = frozenset(int(i) for i in ids) - popular
    return PopularityBins(popular, niche, tuple(int(c) for c in counts[1:]))


def remove_users(
    log: InteractionLog,
    fraction: float,
    seed: int,
    min_interactions: Optional[int] = 5,
) -> InteractionLog:
    """Uniformly drop ``floor(fraction * |U|)`` users, then re-filter."""
    if not 0.0 <= fraction < 1.0:
        raise ParameterError(f"fraction must be in [0, 1), got {fraction}")
    n_drop = math.floor(fraction * log.user_count + 1e-9)
    rng = np.random.default_rng(seed)
    dropped = rng.choice(np.arange(1, log.user_count + 1), size=n_drop, replace=False)
    events = log.events[~log.events["user"].isin(dropped)]
    if events.empty:
        raise EmptyAfterFilterError("removing users left no events")
    out = _redensify(events, log.raw_users, log.raw_items)
    if min_interactions:
        out = filter_min_interactions(out, min_interactions)
    logger.info("Removed %d users; %d remain, sparsity %.4f", n_drop, out.user_count, out.sparsity)
    return out


def as_arrays(samples: Sequence[SequenceSample]) -> Tuple[np.ndarray, np.ndarray]:
    """Stack samples into ``(sequences [N, L], targets [N])`` int64 arrays."""
    seqs = np.array([s.sequence for s in samples], dtype=np.int64)
    targets = np.array([s.target for s in samples], dtype=np.int64)
    return seqs, targets


def samples_fingerprint(samples: Sequence[SequenceSample]) -> str:
    seqs, targets = as_arrays(samples)
    users = np.array([s.user_id for s in samples], dtype=np.int64)
    return fingerprint(seqs.tolist(), targets.tolist(), users.tolist())


def write_split(samples: Sequence[SequenceSample], path: PathLike) -> None:
    """One record per line: ``user TAB sequence TAB target TAB rating-or-dash``."""
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for s in samples:
            rating = "-" if s.target_rating is None else repr(s.target_rating)
            seq = " ".join(str(i) for i in s.sequence)
            f.write(f"{s.user_id}\t{seq}\t{s.target}\t{rating}\n")


def read_split(path: PathLike, split: str) -> List[SequenceSample]:
    samples = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            fields = line.rstrip("\n").split("\t")
            if len(fields) != 4:
                raise ParseError(str(path), lineno, f"expected 4 fields, got {len(fields)}")
            try:
                seq = tuple(int(i) for i in fields[1].split())
                rating = None if fields[3] == "-" else float(fields[3])
                samples.append(SequenceSample(int(fields[0]), seq, int(fields[2]), split, rating))
            except ValueError as e:
                raise ParseError(str(path), lineno, str(e)) from None
    return samples


def write_id_maps(log: InteractionLog, directory: PathLike) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for name, raw in (("users.map", log.raw_users), ("items.map", log.raw_items)):
        with open(directory / name, "w", encoding="utf-8", newline="\n") as f:
            for dense, raw_id in enumerate(raw, start=1):
                f.write(f"{raw_id}\t{dense}\n")


def read_id_map(path: PathLike) -> Dict[str, int]:
    mapping = {}
    with open(path, encoding="utf-8") as f:
        for line in f:
            if line.strip():
                raw, dense = line.rstrip("\n").split("\t")
                mapping[raw] = int(dense)
    return mapping


def write_interactions(log: InteractionLog, path: PathLike) -> None:
    """Write events with raw ids in the tab-separated input format."""
    events = log.events
    frame = pd.DataFrame({
        "user": log.raw_users[events["user"].to_numpy() - 1],
        "item": log.raw_items[events["item"].to_numpy() - 1],
        "timestamp": events["timestamp"].to_numpy(),
        "rating": events["rating"].map(lambda r: "-" if np.isnan(r) else repr(float(r))),
    })
    frame.to_csv(path, sep="\t", header=False, index=False, lineterminator="\n")
