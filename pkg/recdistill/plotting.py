"""Sweep figures from the long-format ablation CSV."""
import logging
from pathlib import Path
from typing import Optional, Sequence, Union

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import pandas as pd  # noqa: E402

from .errors import DataError  # noqa: E402

logger = logging.getLogger(__name__)

plt.rcParams["savefig.dpi"] = 150
plt.rcParams["savefig.bbox"] = "tight"

REQUIRED_COLUMNS = ("sweep_value", "metric", "mean", "std")


def read_sweep(csv_path: Union[str, Path]) -> pd.DataFrame:
    if not Path(csv_path).is_file():
        raise DataError(f"sweep file not found: {csv_path}")
    frame = pd.read_csv(csv_path)
    missing = [c for c in REQUIRED_COLUMNS if c not in frame.columns]
    if missing:
        raise DataError(f"{csv_path}: missing columns {missing}")
    return frame


def plot_sweep(
    csv_path: Union[str, Path],
    out_path: Union[str, Path],
    metrics: Optional[Sequence[str]] = None,
) -> Path:
    """One error-bar line per metric across sweep values."""
    frame = read_sweep(csv_path)
    metrics = list(metrics) if metrics else [m for m in frame["metric"].unique() if "@" in str(m)]
    fig, ax = plt.subplots(figsize=(6, 4))
    for metric in metrics:
        rows = frame[frame["metric"] == metric]
        if rows.empty:
            logger.warning("No rows for metric %s in %s", metric, csv_path)
            continue
        labels = rows["sweep_value"].astype(str).tolist()
        ax.errorbar(range(len(labels)), rows["mean"], yerr=rows["std"], marker="o", capsize=3, label=metric)
        ax.set_xticks(range(len(labels)))
        ax.set_xticklabels(labels)
    ax.set_xlabel(Path(csv_path).stem.split("-")[0])
    ax.set_ylabel("percent")
    ax.grid(alpha=0.3)
    ax.legend(frameon=False, fontsize="small")
    out_path = Path(out_path)
    fig.savefig(out_path)
    plt.close(fig)
    return out_path
