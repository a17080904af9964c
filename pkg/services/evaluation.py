"""
Leave-one-out ranking evaluation.
Hit ratio, NDCG and MRR at fixed cutoffs against sampled negatives, early
stopping on validation H@5, paired significance tests and the full-ranking
latency benchmark.
"""

import logging
import time
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
import psutil
from scipy import stats

from models import param_count
from services.dataset import InteractionDataset, NegativePool

logger = logging.getLogger(__name__)

CUTOFFS = (5, 10, 20)
METRICS = ("H", "M", "N")
MISS = 0
EVAL_CHUNK = 512


def rank_metrics(p: int, n: int) -> Tuple[float, float, float]:
    """
    (H, M, NDCG) for a held-out item at 1-based rank ``p`` and cutoff ``n``.

    A miss is any p outside 1..n (``MISS`` included).
    """
    if p < 1 or p > n:
        return 0.0, 0.0, 0.0
    return 1.0, 1.0 / p, float(np.log(2.0) / np.log(p + 1.0))


def _metric_arrays(positions: np.ndarray, n: int) -> Dict[str, np.ndarray]:
    p = positions.astype(np.float64)
    hit = (positions >= 1) & (positions <= n)
    safe = np.where(hit, p, 1.0)
    return {
        "H": hit.astype(np.float64),
        "M": np.where(hit, 1.0 / safe, 0.0),
        "N": np.where(hit, np.log(2.0) / np.log(safe + 1.0), 0.0),
    }


@dataclass
class EvalReport:
    """
    Metrics per (metric, cutoff) as per-repeat values (mean over users), plus
    the (num_users, repeats) table of 1-based hit positions.
    """

    phase: str
    values: Dict[Tuple[str, int], np.ndarray]
    hit_positions: np.ndarray

    @property
    def repeats(self) -> int:
        return self.hit_positions.shape[1]

    def mean(self, metric: str, cutoff: int) -> float:
        return float(np.mean(self.values[(metric, cutoff)]))

    def per_user(self, metric: str = "H", cutoff: int = 5) -> np.ndarray:
        """Per-user metric averaged over repeats; the pairing unit of significance tests."""
        return _metric_arrays(self.hit_positions, cutoff)[metric].mean(axis=1)

    def summary(self) -> Dict[str, float]:
        return {f"{m}@{n}": self.mean(m, n) for n in CUTOFFS for m in METRICS}

    def hits_frame(self) -> pd.DataFrame:
        users, repeats = np.indices(self.hit_positions.shape)
        return pd.DataFrame({
            "user": users.reshape(-1),
            "repeat": repeats.reshape(-1),
            "position": self.hit_positions.reshape(-1),
        })


def hit_positions(model, dataset: InteractionDataset, pool: NegativePool, phase: str = "test") -> np.ndarray:
    """
    1-based rank of each user's held-out item among its negatives, per repeat.

    Scores are sorted descending, ties broken by ascending item id.
    """
    if phase not in ("validation", "test"):
        raise ValueError(f"phase must be validation or test, got {phase!r}")
    held = dataset.val_item if phase == "validation" else dataset.test_item
    positions = np.empty((dataset.num_users, pool.repeats), dtype=np.int64)
    for start in range(0, dataset.num_users, EVAL_CHUNK):
        users = np.arange(start, min(start + EVAL_CHUNK, dataset.num_users))
        held_scores = model.score_matrix(users, held[users][:, None])[:, 0]
        for r in range(pool.repeats):
            negs = pool.negatives[users, r, :]
            valid = negs >= 0
            neg_scores = model.score_matrix(users, np.where(valid, negs, 0))
            target = held_scores[:, None]
            ahead = (neg_scores > target) | ((neg_scores == target) & (negs < held[users][:, None]))
            positions[users, r] = 1 + np.sum(ahead & valid, axis=1)
    return positions


def evaluate(model, dataset: InteractionDataset, pool: NegativePool, phase: str = "test") -> EvalReport:
    """
    Rank the held-out item of every user against the pooled negatives.

    Metrics are averaged over users per repeat; ``EvalReport.mean`` averages
    the repeats.
    """
    positions = hit_positions(model, dataset, pool, phase)
    values = {}
    for n in CUTOFFS:
        arrays = _metric_arrays(positions, n)
        for metric in METRICS:
            values[(metric, n)] = arrays[metric].mean(axis=0)
    report = EvalReport(phase=phase, values=values, hit_positions=positions)
    logger.debug(f"{phase} evaluation: H@5={report.mean('H', 5):.4f} N@5={report.mean('N', 5):.4f}")
    return report


def eval_report_frame(report: EvalReport, method: str, phi: float) -> pd.DataFrame:
    """Long CSV layout: method, phi, metric, cutoff, repeat, value."""
    rows = []
    for (metric, cutoff), per_repeat in sorted(report.values.items(), key=lambda kv: (kv[0][1], kv[0][0])):
        for r, value in enumerate(per_repeat):
            rows.append({"method": method, "phi": phi, "metric": metric,
                         "cutoff": cutoff, "repeat": r, "value": float(value)})
    return pd.DataFrame(rows, columns=["method", "phi", "metric", "cutoff", "repeat", "value"])


def early_stop(history: Sequence[float], patience: int = 30, max_epochs: int = 1000) -> Tuple[bool, int]:
    """
    Stop once the best validation score is ``patience`` epochs old.

    Returns:
        (stop, best epoch) with epochs counted from 1; the first maximum wins
    """
    if len(history) == 0:
        raise ValueError("history must not be empty")
    best_epoch = int(np.argmax(history)) + 1
    stop = len(history) - best_epoch >= patience or len(history) >= max_epochs
    return stop, best_epoch


@dataclass
class EarlyStopping:
    """Incremental wrapper around ``early_stop`` for training loops."""

    patience: int = 30
    max_epochs: int = 1000
    history: List[float] = field(default_factory=list)

    def update(self, value: float) -> bool:
        """Record one epoch's validation score; True when training should stop."""
        self.history.append(float(value))
        stop, _ = early_stop(self.history, self.patience, self.max_epochs)
        return stop

    @property
    def best_epoch(self) -> int:
        return early_stop(self.history, self.patience, self.max_epochs)[1]

    @property
    def improved(self) -> bool:
        """Whether the latest epoch is the best so far."""
        return bool(self.history) and self.best_epoch == len(self.history)


def paired_ttest(a: Sequence[float], b: Sequence[float]) -> float:
    """
    Two-sided paired t-test p-value.

    Zero variance of the differences gives p=1 for a zero mean difference and
    p=0 (with a warning) otherwise.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.size < 2:
        raise ValueError("paired t-test needs two equal-length samples of size >= 2")
    diff = a - b
    if np.all(diff == diff[0]):
        if diff[0] == 0:
            return 1.0
        logger.warning(f"Paired t-test: constant non-zero difference {diff[0]:.6g}; reporting p=0")
        return 0.0
    return float(stats.ttest_rel(a, b).pvalue)


@dataclass
class LatencyReport:
    """Full-ranking wall time (median over repeats), parameter count and H@5 relative to the teacher."""

    wall_time: float
    param_count: int
    h5_ratio: float
    times: List[float] = field(default_factory=list)
    memory_mb: float = 0.0

    def to_dict(self) -> Dict[str, object]:
        return {
            "wall_time": self.wall_time,
            "param_count": self.param_count,
            "h5_ratio": self.h5_ratio,
            "times": list(self.times),
            "memory_mb": self.memory_mb,
        }


def _rank_all_users(model, dataset: InteractionDataset) -> None:
    for start in range(0, dataset.num_users, EVAL_CHUNK):
        users = np.arange(start, min(start + EVAL_CHUNK, dataset.num_users))
        scores = model.score_matrix(users)
        scores[dataset.train_mask(users)] = -np.inf
        np.argsort(-scores, axis=1, kind="stable")


def bench_latency(model, dataset: InteractionDataset, repeats: int = 3, h5_ratio: float = 1.0,
                  teacher_h5: Optional[float] = None, h5: Optional[float] = None) -> LatencyReport:
    """
    Time full ranked recommendation lists for every user.

    ``h5_ratio`` may be given directly or derived from ``h5 / teacher_h5``.
    """
    if repeats < 1:
        raise ValueError("repeats must be >= 1")
    if h5 is not None:
        if teacher_h5 is None or not teacher_h5 > 0:
            logger.warning(f"Teacher H@5 is {teacher_h5}; H@5 ratio left undefined")
            h5_ratio = float("nan")
        else:
            h5_ratio = h5 / teacher_h5
    times = []
    for _ in range(repeats):
        started = time.perf_counter()
        _rank_all_users(model, dataset)
        times.append(time.perf_counter() - started)
    memory_mb = psutil.Process().memory_info().rss / (1024 * 1024)
    report = LatencyReport(wall_time=float(np.median(times)), param_count=param_count(model),
                           h5_ratio=h5_ratio, times=times, memory_mb=memory_mb)
    logger.info(f"Latency: {report.wall_time:.4f}s median over {repeats}, {report.param_count} params")
    return report
