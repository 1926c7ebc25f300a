"""Full-catalog ranking metrics, rating-filtered variants and grouped reports."""
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
import torch
from tabulate import tabulate

from .corpus import PAD, PopularityBins, SequenceSample, as_arrays
from .errors import ConsistencyError, EvaluationError, UndefinedMetricError
from .seqmodel import SequentialRecommender, predict_logits, target_ranks

logger = logging.getLogger(__name__)

DEFAULT_DELTA = 4.0


@dataclass(frozen=True)
class RankResult:
    user_id: int
    rank: int
    target: int
    target_rating: Optional[float] = None
    popularity_type: Optional[str] = None
    history_length: int = 0


def rank_logits(
    logits: Union[torch.Tensor, np.ndarray],
    samples: Sequence[SequenceSample],
    bins: Optional[PopularityBins] = None,
    mask_history: bool = False,
) -> List[RankResult]:
    """Rank each sample's target against its row of ``logits``."""
    logits = torch.as_tensor(logits).clone()
    if logits.size(0) != len(samples):
        raise EvaluationError(f"{logits.size(0)} logit rows for {len(samples)} samples")
    seqs, targets = as_arrays(samples)
    if mask_history:
        rows, cols = np.nonzero(seqs != PAD)
        items = seqs[rows, cols]
        keep = items != targets[rows]
        logits[torch.from_numpy(rows[keep]), torch.from_numpy(items[keep] - 1)] = -math.inf
    ranks = target_ranks(logits, torch.from_numpy(targets)).tolist()
    return [
        RankResult(
            s.user_id, int(r), s.target, s.target_rating,
            bins.kind(s.target) if bins is not None else None,
            s.history_length,
        )
        for s, r in zip(samples, ranks)
    ]


def rank_all(
    model: SequentialRecommender,
    eval_samples: Sequence[SequenceSample],
    bins: Optional[PopularityBins] = None,
    mask_history: bool = False,
) -> List[RankResult]:
    """Rank targets among all items by descending logit, ties by ascending id."""
    if not eval_samples:
        return []
    return rank_logits(predict_logits(model, eval_samples), eval_samples, bins, mask_history)


def _ranks(results: Sequence[RankResult]) -> np.ndarray:
    if not results:
        raise UndefinedMetricError("metric undefined on an empty result set")
    return np.array([r.rank for r in results], dtype=np.float64)


def _gains(ranks: np.ndarray, n: int) -> np.ndarray:
    return np.where(ranks <= n, 1.0 / np.log2(ranks + 1.0), 0.0)


def recall_at_n(results: Sequence[RankResult], n: int) -> float:
    if n < 1:
        raise ValueError("n must be >= 1")
    return float((_ranks(results) <= n).mean() * 100.0)


def ndcg_at_n(results: Sequence[RankResult], n: int) -> float:
    if n < 1:
        raise ValueError("n must be >= 1")
    return float(_gains(_ranks(results), n).mean() * 100.0)


def filtered_metrics(results: Sequence[RankResult], n: int, delta: float = DEFAULT_DELTA
                     ) -> Tuple[float, float]:
    """Recall+ and NDCG+ over the users whose target is rated at least ``delta``."""
    if any(r.target_rating is None for r in results):
        raise EvaluationError("filtered metrics need a rating on every result")
    liked = [r for r in results if r.target_rating >= delta]
    if not liked:
        raise UndefinedMetricError(f"no target rated >= {delta}")
    return recall_at_n(liked, n), ndcg_at_n(liked, n)


@dataclass
class MetricReport:
    """
    Metric values in percent keyed ``Recall@10``, ``NDCG+@20`` and so on.

    ``std`` is filled by ``aggregate_seeds``; ``groups`` maps a group name to
    its sub-report, or to None when the group is empty.
    """
    values: Dict[str, float] = field(default_factory=dict)
    count: int = 0
    groups: Dict[str, Optional["MetricReport"]] = field(default_factory=dict)
    std: Dict[str, float] = field(default_factory=dict)
    seeds: int = 1
    extras: Dict[str, float] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "values": self.values,
            "std": self.std,
            "count": self.count,
            "seeds": self.seeds,
            "extras": self.extras,
            "groups": {k: (g.to_dict() if g is not None else None) for k, g in self.groups.items()},
        }

    @classmethod
    def from_dict(cls, data: dict) -> "MetricReport":
        return cls(
            values={k: float(v) for k, v in data.get("values", {}).items()},
            count=int(data.get("count", 0)),
            groups={k: (cls.from_dict(g) if g is not None else None)
                    for k, g in data.get("groups", {}).items()},
            std={k: float(v) for k, v in data.get("std", {}).items()},
            seeds=int(data.get("seeds", 1)),
            extras={k: float(v) for k, v in data.get("extras", {}).items()},
        )

    def rows(self) -> List[dict]:
        """Flat records: one per metric and group."""
        out = []
        for group, report in [("overall", self), *self.groups.items()]:
            if report is None:
                out.append({"group": group, "metric": None, "mean": None, "std": None,
                            "count": 0, "seeds": self.seeds})
                continue
            for metric, value in {**report.values, **report.extras}.items():
                out.append({"group": group, "metric": metric, "mean": value,
                            "std": report.std.get(metric, 0.0), "count": report.count,
                            "seeds": report.seeds})
        return out

    def table(self) -> str:
        headers = ["group", "count"] + list(self.values) + list(self.extras)
        body = []
        for group, report in [("overall", self), *self.groups.items()]:
            if report is None:
                body.append([group, 0] + ["undefined"] * (len(headers) - 2))
                continue
            cells = []
            for metric in headers[2:]:
                value = report.values.get(metric, report.extras.get(metric))
                if value is None:
                    cells.append("-")
                elif report.std.get(metric):
                    cells.append(f"{value:.3f} ± {report.std[metric]:.3f}")
                else:
                    cells.append(f"{value:.3f}")
            body.append([group, report.count] + cells)
        return tabulate(body, headers=headers, tablefmt="github")


def evaluate(
    results: Sequence[RankResult],
    cutoffs: Sequence[int] = (10, 20),
    delta: float = DEFAULT_DELTA,
) -> MetricReport:
    """Plain metrics for every cutoff, plus filtered ones when ratings exist."""
    values: Dict[str, float] = {}
    for n in cutoffs:
        values[f"Recall@{n}"] = recall_at_n(results, n)
        values[f"NDCG@{n}"] = ndcg_at_n(results, n)
    if all(r.target_rating is not None for r in results):
        for n in cutoffs:
            try:
                values[f"Recall+@{n}"], values[f"NDCG+@{n}"] = filtered_metrics(results, n, delta)
            except UndefinedMetricError as e:
                logger.warning("Skipping filtered metrics: %s", e)
                break
    return MetricReport(values, count=len(results))


def length_bucket_edges(results: Sequence[RankResult]) -> List[int]:
    """Quartile upper edges of true history length, deduplicated."""
    lengths = np.array([r.history_length for r in results])
    edges = np.unique(np.floor(np.quantile(lengths, [0.25, 0.5, 0.75])).astype(int))
    return [int(e) for e in edges if e < lengths.max()]


def _length_groups(results: Sequence[RankResult], edges: Sequence[int]) -> Dict[str, List[RankResult]]:
    bounds = sorted(set(int(e) for e in edges))
    groups: Dict[str, List[RankResult]] = {}
    low = 0
    for high in bounds:
        groups[f"length {low}-{high}"] = [r for r in results if low <= r.history_length <= high]
        low = high + 1
    groups[f"length >={low}"] = [r for r in results if r.history_length >= low]
    return groups


def grouped_report(
    results: Sequence[RankResult],
    bins: PopularityBins,
    length_buckets: Optional[Sequence[int]] = None,
    cutoffs: Sequence[int] = (10, 20),
    delta: float = DEFAULT_DELTA,
) -> MetricReport:
    """
    Overall report with sub-reports per target popularity type and per
    history-length bucket. ``length_buckets`` are inclusive upper edges;
    lengths above the last edge form a final bucket.
    """
    report = evaluate(results, cutoffs, delta)
    tagged = [r if r.popularity_type else RankResult(
        r.user_id, r.rank, r.target, r.target_rating, bins.kind(r.target), r.history_length)
        for r in results]
    groups: Dict[str, List[RankResult]] = {
        kind: [r for r in tagged if r.popularity_type == kind]
        for kind in ("popular-type", "niche-type")
    }
    edges = length_buckets if length_buckets is not None else length_bucket_edges(results)
    groups.update(_length_groups(results, edges))
    for name, members in groups.items():
        report.groups[name] = evaluate(members, cutoffs, delta) if members else None
    return report


def aggregate_seeds(reports: Sequence[MetricReport]) -> MetricReport:
    """Per-metric mean and sample standard deviation across seeds."""
    if not reports:
        raise ConsistencyError("no reports to aggregate")
    keys = set(reports[0].values) | set(reports[0].extras)
    for r in reports[1:]:
        if set(r.values) | set(r.extras) != keys:
            raise ConsistencyError("reports carry different metric sets")

    def stats(name: str, pick) -> Tuple[float, float]:
        data = np.array([pick(r)[name] for r in reports], dtype=np.float64)
        std = float(data.std(ddof=1)) if len(data) > 1 else 0.0
        return float(data.mean()), std

    out = MetricReport(count=reports[0].count, seeds=len(reports))
    for name in reports[0].values:
        out.values[name], out.std[name] = stats(name, lambda r: r.values)
    for name in reports[0].extras:
        out.extras[name], out.std[name] = stats(name, lambda r: r.extras)
    for group in reports[0].groups:
        members = [r.groups.get(group) for r in reports]
        out.groups[group] = None if any(m is None for m in members) else aggregate_seeds(members)
    return out


def write_report(report: MetricReport, json_path: Union[str, Path],
                 csv_path: Optional[Union[str, Path]] = None) -> None:
    """JSON with nested groups plus the flat CSV mirror."""
    json_path = Path(json_path)
    json_path.write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True), encoding="utf-8")
    csv_path = Path(csv_path) if csv_path is not None else json_path.with_suffix(".csv")
    pd.DataFrame(report.rows(), columns=["group", "metric", "mean", "std", "count", "seeds"]).to_csv(
        csv_path, index=False, lineterminator="\n")


def read_report(json_path: Union[str, Path]) -> MetricReport:
    return MetricReport.from_dict(json.loads(Path(json_path).read_text(encoding="utf-8")))
