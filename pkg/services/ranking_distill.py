"""
Relaxed ranking distillation.
Samples interesting items from the top of the teacher's ranking and
uninteresting items from strictly below them, then trains the student with a
list-wise likelihood that keeps the exact order of the interesting items only.
"""

import logging
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy.special import logsumexp

from config import ConfigError
from services.dataset import InteractionDataset
from services.kd_baselines import sample_positions
from services.random_streams import stream

logger = logging.getLogger(__name__)

CACHE_CHUNK = 256


@dataclass
class RrdConfig:
    """K interesting items, L uninteresting items (defaults to K), rank temperature T, weight, ablation mode."""

    k: int = 10
    l: int = -1
    temperature: float = 10.0
    weight: float = 1e-3
    mode: str = "relaxed"

    def __post_init__(self):
        if self.l < 0:
            self.l = self.k

    def validate(self, cache_size: Optional[int] = None) -> "RrdConfig":
        if self.k < 1:
            raise ConfigError("RRD needs K >= 1")
        if self.temperature <= 0:
            raise ConfigError("RRD temperature must be > 0")
        if self.mode not in ("relaxed", "full_ranking", "interesting_only"):
            raise ConfigError(f"unknown RRD mode {self.mode!r}")
        if cache_size is not None and self.k > cache_size:
            raise ConfigError(f"K={self.k} exceeds the teacher cache size {cache_size}")
        return self


@dataclass
class TeacherSnapshot:
    """
    Frozen teacher: the model, its per-user top-C unobserved items and scores,
    and the metadata needed to refuse a mismatched dataset.
    """

    model: object
    top_items: np.ndarray
    top_scores: np.ndarray
    base_model: str
    teacher_dim: int
    checksum: str = ""

    @property
    def cache_size(self) -> int:
        return self.top_items.shape[1]

    def taps(self, users: np.ndarray, items: np.ndarray):
        return self.model.taps(users, items)

    def scores(self, users: np.ndarray, items: np.ndarray) -> np.ndarray:
        return self.model.score_matrix(users, items)


@dataclass
class DistillSample:
    user: int
    interesting: np.ndarray
    uninteresting: np.ndarray
    epoch: int


def build_teacher_snapshot(model, dataset: InteractionDataset, cache_size: int = 500,
                           checksum: str = "", min_k: int = 1) -> TeacherSnapshot:
    """
    Rank every user's training-unseen items with the frozen teacher and cache the top C.

    C shrinks to the smallest per-user count of unseen items; a C below ``min_k``
    cannot feed the samplers and is refused.
    """
    unseen = dataset.num_items - np.array([len(t) for t in dataset.train])
    c = int(min(cache_size, unseen.min()))
    if c < cache_size:
        logger.warning(f"Teacher cache shrunk from {cache_size} to {c} items")
    if c < min_k:
        raise ConfigError(f"teacher cache size {c} is smaller than K={min_k}")

    top_items = np.empty((dataset.num_users, c), dtype=np.int64)
    top_scores = np.empty((dataset.num_users, c))
    for start in range(0, dataset.num_users, CACHE_CHUNK):
        users = np.arange(start, min(start + CACHE_CHUNK, dataset.num_users))
        scores = model.score_matrix(users)
        scores[dataset.train_mask(users)] = -np.inf
        kth = -np.partition(-scores, c - 1, axis=1)[:, c - 1]
        for row, u in enumerate(users):
            cand = np.flatnonzero(scores[row] >= kth[row])
            order = np.lexsort((cand, -scores[row, cand]))[:c]
            top_items[u] = cand[order]
            top_scores[u] = scores[row, cand[order]]
    logger.info(f"Cached teacher top-{c} lists for {dataset.num_users} users")
    return TeacherSnapshot(model=model, top_items=top_items, top_scores=top_scores,
                           base_model=model.base_model, teacher_dim=model.dim, checksum=checksum)


def sample_interesting(snapshot: TeacherSnapshot, user: int, cfg: RrdConfig,
                       rng: np.random.Generator) -> np.ndarray:
    """K cached items drawn with p_k proportional to e^{-k/T}, in teacher order."""
    positions = sample_positions(snapshot.cache_size, cfg.k, cfg.temperature, rng)
    return snapshot.top_items[user, positions]


def _order_by_teacher(snapshot: TeacherSnapshot, user: int, items: np.ndarray) -> np.ndarray:
    if len(items) < 2:
        return items
    scores = snapshot.scores(np.array([user]), items[None, :])[0]
    return items[np.lexsort((items, -scores))]


def sample_uninteresting(snapshot: TeacherSnapshot, user: int, interesting: np.ndarray, cfg: RrdConfig,
                         rng: np.random.Generator, dataset: InteractionDataset,
                         ordered: bool = True) -> np.ndarray:
    """
    L unseen items drawn uniformly from those ranked strictly below the worst interesting item.

    Items outside the cached top C are eligible. Fewer eligible items than L
    shrinks the draw with a warning. With ``ordered`` the result is sorted by
    teacher score.
    """
    if cfg.l == 0:
        return np.empty(0, dtype=np.int64)
    cache = snapshot.top_items[user]
    worst = int(np.flatnonzero(np.isin(cache, interesting)).max())
    blocked = np.union1d(dataset.train[user], cache[:worst + 1])
    n_eligible = dataset.num_items - len(blocked)

    if n_eligible <= 4 * cfg.l:
        eligible = np.setdiff1d(np.arange(dataset.num_items), blocked, assume_unique=True)
        n = min(cfg.l, len(eligible))
        if n < cfg.l:
            logger.warning(f"User {user}: only {len(eligible)} uninteresting items eligible, wanted {cfg.l}")
        picked = rng.choice(eligible, size=n, replace=False) if n else np.empty(0, dtype=np.int64)
    else:
        chosen: List[int] = []
        seen = set()
        while len(chosen) < cfg.l:
            for item in rng.integers(dataset.num_items, size=2 * (cfg.l - len(chosen))):
                pos = np.searchsorted(blocked, item)
                if (pos < len(blocked) and blocked[pos] == item) or item in seen:
                    continue
                seen.add(int(item))
                chosen.append(int(item))
                if len(chosen) == cfg.l:
                    break
        picked = np.array(chosen, dtype=np.int64)
    return _order_by_teacher(snapshot, user, picked) if ordered else picked


def resample_epoch(snapshot: TeacherSnapshot, dataset: InteractionDataset, cfg: RrdConfig,
                   epoch: int, seed: int) -> List[DistillSample]:
    """
    Fresh samples for every user, reproducible from (seed, epoch, user).

    Uninteresting lists come back in teacher order.
    """
    samples = []
    for u in range(dataset.num_users):
        rng = stream(seed, "rrd", epoch, u)
        interesting = sample_interesting(snapshot, u, cfg, rng)
        uninteresting = sample_uninteresting(snapshot, u, interesting, cfg, rng, dataset, ordered=False)
        samples.append(DistillSample(u, interesting, uninteresting, epoch))

    if cfg.l > 0:
        users, _, un, mask = stack_samples(samples)
        scores = np.where(mask, snapshot.scores(users, un), -np.inf)
        for row, sample in enumerate(samples):
            n = len(sample.uninteresting)
            order = np.lexsort((un[row, :n], -scores[row, :n]))
            sample.uninteresting = un[row, :n][order]
    return samples


def stack_samples(samples: Sequence[DistillSample]) -> Tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Pad samples into (users, interesting (n,K), uninteresting (n,L), mask (n,L))."""
    users = np.array([s.user for s in samples], dtype=np.int64)
    interesting = np.stack([s.interesting for s in samples]).astype(np.int64)
    width = max((len(s.uninteresting) for s in samples), default=0)
    un = np.zeros((len(samples), width), dtype=np.int64)
    mask = np.zeros((len(samples), width), dtype=bool)
    for row, s in enumerate(samples):
        un[row, :len(s.uninteresting)] = s.uninteresting
        mask[row, :len(s.uninteresting)] = True
    return users, interesting, un, mask


def _plackett_luce(ordered: np.ndarray, valid: np.ndarray, tail: Optional[np.ndarray]):
    """
    Negative log-likelihood of ``ordered`` (n, m) appearing in that order,
    each step's denominator extended by exp(tail).

    Returns:
        (per-row loss, d/d ordered, d/d tail log-mass or None)
    """
    x = np.where(valid, ordered, -np.inf)
    suffix = np.logaddexp.accumulate(x[:, ::-1], axis=1)[:, ::-1]
    denom = suffix if tail is None else np.logaddexp(suffix, tail[:, None])
    loss = np.where(valid, denom - x, 0.0).sum(axis=1)

    # P[n, k, j] = exp(x_j - denom_k) for k <= j, both valid
    m = x.shape[1]
    upper = np.triu(np.ones((m, m), dtype=bool))
    pair = upper[None] & valid[:, :, None] & valid[:, None, :]
    probs = np.where(pair, np.exp(x[:, None, :] - denom[:, :, None]), 0.0)
    dx = probs.sum(axis=1) - valid
    dtail = None
    if tail is not None:
        dtail = np.where(valid, np.exp(tail[:, None] - denom), 0.0).sum(axis=1)
    return loss, dx, dtail


def listwise_nll(inter_scores: np.ndarray, un_scores: np.ndarray, un_mask: np.ndarray,
                 mode: str = "relaxed"):
    """
    Per-user list-wise loss and gradients on raw student scores.

    relaxed: sum_k [log(sum_{i>=k} e^{r_i} + sum_j e^{r_j}) - r_k] with j over the
    uninteresting items; the uninteresting log-mass is taken over sorted scores
    so the loss is bitwise independent of their order.
    full_ranking: the same likelihood over interesting then uninteresting items
    in order, no relaxation.
    interesting_only: the interesting items alone.

    Returns:
        (loss (n,), d_inter (n,K), d_un (n,L))
    """
    n, k = inter_scores.shape
    d_un = np.zeros(un_scores.shape)
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        if mode == "relaxed":
            masked = np.sort(np.where(un_mask, un_scores, -np.inf), axis=1)
            if masked.shape[1]:
                tail = logsumexp(masked, axis=1)
            else:
                tail = np.full(n, -np.inf)
            loss, d_inter, dtail = _plackett_luce(inter_scores, np.ones((n, k), dtype=bool), tail)
            if masked.shape[1]:
                share = np.where(un_mask, np.exp(un_scores - tail[:, None]), 0.0)
                d_un = np.where(np.isfinite(tail)[:, None], share * dtail[:, None], 0.0)
        elif mode == "full_ranking":
            ordered = np.concatenate([inter_scores, un_scores], axis=1)
            valid = np.concatenate([np.ones((n, k), dtype=bool), un_mask], axis=1)
            loss, dx, _ = _plackett_luce(ordered, valid, None)
            d_inter, d_un = dx[:, :k], dx[:, k:]
        elif mode == "interesting_only":
            loss, d_inter, _ = _plackett_luce(inter_scores, np.ones((n, k), dtype=bool), None)
        else:
            raise ConfigError(f"unknown RRD mode {mode!r}")
    return loss, d_inter, d_un


def rrd_loss_arrays(model, users: np.ndarray, interesting: np.ndarray, uninteresting: np.ndarray,
                    un_mask: np.ndarray, mode: str = "relaxed", weight: float = 1.0) -> float:
    """Batch RRD loss on stacked samples; mean over users, gradients scaled by ``weight``."""
    n, k = interesting.shape
    width = uninteresting.shape[1]
    items = np.concatenate([interesting, uninteresting], axis=1)
    logits, cache = model.forward(np.repeat(users, k + width), items.reshape(-1))
    logits = logits.reshape(n, k + width)
    loss, d_inter, d_un = listwise_nll(logits[:, :k], logits[:, k:], un_mask, mode)
    dlogits = np.concatenate([d_inter, d_un], axis=1) * (weight / n)
    model.backward(cache, dlogits.reshape(-1))
    return float(loss.sum() / n)


def rrd_loss(model, samples: Sequence[DistillSample], mode: str = "relaxed", weight: float = 1.0) -> float:
    """
    -(1/|B|) sum_u log p(interesting in teacher order, above every uninteresting item).
    """
    if not samples:
        return 0.0
    users, interesting, un, mask = stack_samples(samples)
    return rrd_loss_arrays(model, users, interesting, un, mask, mode, weight)
