"""
Prediction-based distillation baselines: ranking distillation (RD) and
collaborative distillation (CD).
Both train the student on the teacher's top-ranked unobserved items.
"""

import logging
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np
from scipy.special import expit

from config import ConfigError
from services.dataset import InteractionDataset, sample_negatives_matrix
from services.random_streams import stream

logger = logging.getLogger(__name__)

# BPR scores are unbounded; min-max targets are kept off the 0/1 endpoints
CD_TARGET_EPS = 1e-3


@dataclass
class RdConfig:
    """RD hyperparameters: list length, position temperature, weight, warm-up, dynamic negatives."""

    k: int = 10
    temperature: float = 10.0
    weight: float = 1e-2
    warmup_epochs: int = 30
    n_dyn_negatives: int = 50

    def validate(self, total_epochs: Optional[int] = None) -> "RdConfig":
        if self.k < 1:
            raise ConfigError("RD needs K >= 1")
        if self.temperature <= 0:
            raise ConfigError("RD temperature must be > 0")
        if total_epochs is not None and self.warmup_epochs >= total_epochs:
            raise ConfigError("RD warm-up must be shorter than training")
        return self


@dataclass
class CdConfig:
    """CD hyperparameters: sample size, rank temperature, weight."""

    k: int = 10
    temperature: float = 10.0
    weight: float = 1e-2

    def validate(self) -> "CdConfig":
        if self.k < 1:
            raise ConfigError("CD needs K >= 1")
        if self.temperature <= 0:
            raise ConfigError("CD temperature must be > 0")
        return self


def position_weights(k: int, temperature: float) -> np.ndarray:
    """Normalised e^{-rank/T} over ranks 1..k."""
    ranks = np.arange(1, k + 1, dtype=np.float64)
    w = np.exp(-(ranks - 1.0) / temperature)
    return w / w.sum()


def rd_dynamic_weights(model, users: np.ndarray, topk: np.ndarray, cfg: RdConfig, epoch: int,
                       dataset: Optional[InteractionDataset] = None,
                       rng: Optional[np.random.Generator] = None) -> np.ndarray:
    """
    Ranking-discrepancy weights b_k, treated as constants by the loss.

    During warm-up every weight is 1. Afterwards b_k is proportional to the
    student's estimated rank of item k among ``n_dyn_negatives`` sampled
    unobserved items, rescaled to mean 1 per user.
    """
    if epoch < cfg.warmup_epochs:
        return np.ones(topk.shape)
    if dataset is None or rng is None:
        raise ValueError("dynamic RD weights need the dataset and an rng after warm-up")
    negatives = sample_negatives_matrix(dataset, users, cfg.n_dyn_negatives, rng)
    top_scores = model.score_matrix(users, topk)
    neg_scores = model.score_matrix(users, negatives)
    est_rank = 1.0 + np.sum(neg_scores[:, None, :] > top_scores[:, :, None], axis=2)
    return est_rank / est_rank.mean(axis=1, keepdims=True)


def rd_loss(model, users: np.ndarray, topk: np.ndarray, cfg: RdConfig, epoch: int,
            dataset: Optional[InteractionDataset] = None, rng: Optional[np.random.Generator] = None,
            weight: float = 1.0) -> float:
    """
    RD loss: -sum_k w_k log sigmoid(student score(u, pi_k)), mean over users.

    Args:
        model: Student recommender
        users: Users of the minibatch
        topk: (len(users), K) teacher top-K unobserved items, teacher order
        cfg: RdConfig
        epoch: Current epoch (0-based); selects warm-up behaviour
        dataset, rng: Needed after warm-up to sample dynamic-weight negatives
        weight: Gradient scale (lambda)

    Returns:
        Unweighted loss value
    """
    topk = np.asarray(topk)
    if topk.ndim != 2 or topk.shape[1] == 0 or topk.shape[0] == 0:
        raise ValueError("RD needs a non-empty teacher ranking")
    n, k = topk.shape
    w = position_weights(k, cfg.temperature)[None, :] * rd_dynamic_weights(model, users, topk, cfg, epoch, dataset, rng)
    logits, cache = model.forward(np.repeat(users, k), topk.reshape(-1))
    logits = logits.reshape(n, k)
    loss = float(np.sum(w * np.logaddexp(0.0, -logits)) / n)
    dlogits = -w * expit(-logits) * (weight / n)
    model.backward(cache, dlogits.reshape(-1))
    return loss


def sample_positions(c: int, k: int, temperature: float, rng: np.random.Generator) -> np.ndarray:
    """``k`` distinct 0-based ranks out of ``c``, drawn with p proportional to e^{-rank/T}, ascending."""
    if k > c:
        raise ValueError(f"cannot draw {k} items from {c} candidates")
    if k == c:
        return np.arange(c)
    return np.sort(rng.choice(c, size=k, replace=False, p=position_weights(c, temperature)))


def cd_sample(teacher_ranking: np.ndarray, k: int, temperature: float,
              rng: np.random.Generator) -> np.ndarray:
    """
    Draw ``k`` distinct items with probability proportional to e^{-rank/T}.

    Returns:
        The drawn items in teacher order
    """
    teacher_ranking = np.asarray(teacher_ranking)
    return teacher_ranking[sample_positions(len(teacher_ranking), k, temperature, rng)]


def cd_targets(base_model: str, cached_scores: np.ndarray, positions: np.ndarray) -> np.ndarray:
    """
    Teacher relevance q for items at ``positions`` of a user's cached list.

    NeuMF logits map through the sigmoid; BPR scores are min-max normalised
    over the cached list.
    """
    picked = cached_scores[positions]
    if base_model == "neumf":
        return expit(picked)
    lo, hi = cached_scores.min(), cached_scores.max()
    scaled = (picked - lo) / (hi - lo) if hi > lo else np.full(picked.shape, 0.5)
    return np.clip(scaled, CD_TARGET_EPS, 1.0 - CD_TARGET_EPS)


def cd_resample_epoch(top_items: np.ndarray, top_scores: np.ndarray, base_model: str, cfg: CdConfig,
                      seed: int, epoch: int) -> Tuple[np.ndarray, np.ndarray]:
    """Per-user CD samples and teacher targets for one epoch, shape (num_users, K)."""
    num_users, c = top_items.shape
    if cfg.k > c:
        raise ConfigError(f"CD K={cfg.k} exceeds the teacher cache size {c}")
    items = np.empty((num_users, cfg.k), dtype=np.int64)
    targets = np.empty((num_users, cfg.k))
    for u in range(num_users):
        positions = sample_positions(c, cfg.k, cfg.temperature, stream(seed, "kd", epoch, u))
        items[u] = top_items[u, positions]
        targets[u] = cd_targets(base_model, top_scores[u], positions)
    return items, targets


def cd_loss(model, users: np.ndarray, items: np.ndarray, q: np.ndarray, weight: float = 1.0) -> float:
    """
    CD loss: weighted binary cross-entropy towards teacher relevance q, summed
    over the sampled list and averaged over users.
    """
    items = np.asarray(items)
    n, k = items.shape
    logits, cache = model.forward(np.repeat(users, k), items.reshape(-1))
    logits = logits.reshape(n, k)
    loss = float(np.sum(q * np.logaddexp(0.0, -logits) + (1.0 - q) * np.logaddexp(0.0, logits)) / n)
    dlogits = (expit(logits) - q) * (weight / n)
    model.backward(cache, dlogits.reshape(-1))
    return loss
