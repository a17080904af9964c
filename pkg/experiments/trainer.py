#!/usr/bin/env python3
"""
Training loops for teachers and distilled students.
One epoch draws fresh negatives and distillation samples, anneals the expert
temperature, runs minibatch Adam on the joint objective and scores the
validation split for early stopping.
"""

import sys
import os
sys.path.append(os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

import logging
import time
from dataclasses import dataclass, field
from typing import Dict, Optional

import numpy as np
import pandas as pd

from config import ConfigError, ExperimentConfig
from models import ModelConfig, Recommender, bpr_loss, build_model, neumf_bce_loss
from services.dataset import InteractionDataset, NegativePool, dataset_checksum, sample_negatives_matrix
from services.distill_experts import ExpertBank, TemperatureSchedule, anneal, build_expert_banks, de_loss
from services.evaluation import EarlyStopping, EvalReport, evaluate
from services.gradcore import AdamState, NumericalError, ParamStore, adam_step
from services.kd_baselines import CdConfig, RdConfig, cd_loss, cd_resample_epoch, rd_loss
from services.random_streams import stream
from services.ranking_distill import (RrdConfig, TeacherSnapshot, build_teacher_snapshot,
                                      resample_epoch, rrd_loss_arrays, stack_samples)

logger = logging.getLogger(__name__)


def model_config(cfg: ExperimentConfig) -> ModelConfig:
    return ModelConfig(
        base_model=cfg.base_model,
        phi=cfg.phi,
        teacher_dim=cfg.resolved_teacher_dim,
        neumf_layers=cfg.neumf_layers,
        neumf_tap=cfg.neumf_tap,
        epochs=cfg.epochs,
        batch_size=cfg.batch_size,
        learning_rate=cfg.learning_rate,
        l2=cfg.l2,
    )


@dataclass
class TrainingResult:
    """Best-epoch model (float32-rounded), its store, training history and validation report."""

    params: ParamStore
    model: Recommender
    best_epoch: int
    history: pd.DataFrame
    validation: Optional[EvalReport] = None
    banks: Dict[str, ExpertBank] = field(default_factory=dict)


@dataclass
class EpochSamples:
    """Per-epoch distillation material indexed by user id."""

    tau: float = 1.0
    rrd: Optional[tuple] = None
    cd_items: Optional[np.ndarray] = None
    cd_targets: Optional[np.ndarray] = None


class DistillationTrainer:
    """
    Trains one recommender on the base loss plus the distillation terms of ``cfg.method``.

    Args:
        cfg: Validated experiment configuration
        dataset: Leave-one-out dataset
        pool: Evaluation negatives (validation split is scored every epoch)
        teacher: Frozen teacher; required by every method except ``none``
        dim: Model width; the student width of ``cfg`` by default
        method: Overrides ``cfg.method`` (teacher training uses ``none``)
    """

    def __init__(self, cfg: ExperimentConfig, dataset: InteractionDataset, pool: NegativePool,
                 teacher: Optional[TeacherSnapshot] = None, dim: Optional[int] = None,
                 method: Optional[str] = None):
        self.cfg = cfg
        self.dataset = dataset
        self.pool = pool
        self.teacher = teacher
        self.method = method or cfg.method
        if self.method != "none" and teacher is None:
            raise ConfigError(f"method {self.method!r} needs a teacher")

        self.params = ParamStore()
        self.model = build_model(model_config(cfg), self.params, dataset.num_users, dataset.num_items,
                                 rng=stream(cfg.seed, "init"), dim=cfg.student_dim if dim is None else dim)
        self.banks: Dict[str, ExpertBank] = {}
        if self.method in ("de", "de-rrd"):
            self.banks = build_expert_banks(self.params, self.model, teacher.model, cfg.num_experts,
                                            cfg.de_mode, stream(cfg.seed, "de_init"), cfg.tau_grad_floor)
        self.optimizer = AdamState(learning_rate=cfg.learning_rate)
        self.schedule = TemperatureSchedule(cfg.epochs, cfg.tau_0, cfg.tau_p)
        self.rrd_cfg = RrdConfig(k=cfg.rrd_k, l=cfg.rrd_l, temperature=cfg.rrd_t,
                                 weight=cfg.weight_rrd, mode=cfg.rrd_mode)
        self.rd_cfg = RdConfig(k=cfg.rd_k, temperature=cfg.rd_t, weight=cfg.lambda_kd,
                               warmup_epochs=cfg.rd_warmup_epochs, n_dyn_negatives=cfg.rd_dyn_negatives)
        self.cd_cfg = CdConfig(k=cfg.cd_k, temperature=cfg.cd_t, weight=cfg.lambda_kd)
        if teacher is not None:
            if self.method in ("rrd", "de-rrd"):
                self.rrd_cfg.validate(teacher.cache_size)
            if self.method == "rd":
                self.rd_cfg.validate(cfg.epochs)
                if self.rd_cfg.k > teacher.cache_size:
                    raise ConfigError(f"RD K={self.rd_cfg.k} exceeds the teacher cache size {teacher.cache_size}")
            if self.method == "cd":
                self.cd_cfg.validate()

    @property
    def terms(self):
        return {
            "none": (),
            "rd": ("rd",),
            "cd": ("cd",),
            "de": ("de",),
            "rrd": ("rrd",),
            "de-rrd": ("de", "rrd"),
        }[self.method]

    def term_weight(self, term: str) -> float:
        if term == "de":
            return self.cfg.weight_de
        if term == "rrd":
            return self.cfg.weight_rrd
        return self.cfg.lambda_kd

    def prepare_epoch(self, epoch: int) -> EpochSamples:
        """Resample distillation material and anneal the temperature for ``epoch`` (0-based)."""
        samples = EpochSamples(tau=anneal(self.schedule, epoch))
        if "rrd" in self.terms:
            samples.rrd = stack_samples(resample_epoch(self.teacher, self.dataset, self.rrd_cfg, epoch, self.cfg.seed))
        if "cd" in self.terms:
            samples.cd_items, samples.cd_targets = cd_resample_epoch(
                self.teacher.top_items, self.teacher.top_scores, self.cfg.base_model, self.cd_cfg,
                self.cfg.seed, epoch)
        return samples

    def batch_losses(self, users: np.ndarray, pos: np.ndarray, neg: np.ndarray, epoch: int,
                     samples: EpochSamples, gumbel_rng: Optional[np.random.Generator] = None,
                     kd_rng: Optional[np.random.Generator] = None) -> Dict[str, float]:
        """
        Evaluate every loss component on one minibatch, accumulating gradients.

        Returns:
            Unweighted component values keyed ``base`` and the method's terms
        """
        model = self.model
        if self.cfg.base_model == "bpr":
            losses = {"base": bpr_loss(model, users, pos, neg)}
        else:
            pair_users = np.concatenate([users, users])
            items = np.concatenate([pos, neg])
            labels = np.concatenate([np.ones(len(pos)), np.zeros(len(neg))])
            losses = {"base": neumf_bce_loss(model, pair_users, items, labels)}

        batch_users = np.unique(users)
        for term in self.terms:
            weight = self.term_weight(term)
            if term == "de":
                tap_users = np.concatenate([users, users])
                tap_items = np.concatenate([pos, neg])
                losses["de"] = de_loss(self.banks, model.taps(tap_users, tap_items),
                                       self.teacher.taps(tap_users, tap_items), samples.tau, gumbel_rng,
                                       model, squared=self.cfg.de_squared_norm, weight=weight)
            elif term == "rrd":
                _, interesting, un, mask = samples.rrd
                losses["rrd"] = rrd_loss_arrays(model, batch_users, interesting[batch_users], un[batch_users],
                                                mask[batch_users], self.rrd_cfg.mode, weight)
            elif term == "rd":
                topk = self.teacher.top_items[batch_users, :self.rd_cfg.k]
                losses["rd"] = rd_loss(model, batch_users, topk, self.rd_cfg, epoch, self.dataset, kd_rng, weight)
            elif term == "cd":
                losses["cd"] = cd_loss(model, batch_users, samples.cd_items[batch_users],
                                       samples.cd_targets[batch_users], weight)
        return losses

    def train_epoch(self, epoch: int) -> Dict[str, float]:
        """One pass over the shuffled training pairs; returns mean component losses."""
        ds = self.dataset
        seed = self.cfg.seed
        samples = self.prepare_epoch(epoch)
        order = stream(seed, "shuffle", epoch).permutation(ds.num_train)
        users_all = ds.train_users[order]
        pos_all = ds.train_items[order]
        neg_all = sample_negatives_matrix(ds, users_all, 1, stream(seed, "negatives", epoch))[:, 0]
        gumbel_rng = stream(seed, "gumbel", epoch)
        kd_rng = stream(seed, "kd", epoch)

        totals = {"base": 0.0, **{t: 0.0 for t in self.terms}}
        batches = 0
        for start in range(0, ds.num_train, self.cfg.batch_size):
            stop = start + self.cfg.batch_size
            users, pos, neg = users_all[start:stop], pos_all[start:stop], neg_all[start:stop]
            self.params.zero_grads()
            losses = self.batch_losses(users, pos, neg, epoch, samples, gumbel_rng, kd_rng)
            total = losses["base"] + sum(self.term_weight(t) * losses[t] for t in self.terms)
            if not np.isfinite(total):
                raise NumericalError(f"non-finite loss at epoch {epoch + 1}, batch {batches + 1}: "
                                     + ", ".join(f"{k}={v:.4g}" for k, v in losses.items()))
            adam_step(self.params, self.optimizer)
            for key, value in losses.items():
                totals[key] += value
            batches += 1

        means = {k: v / max(batches, 1) for k, v in totals.items()}
        kd = sum(self.term_weight(t) * means[t] for t in self.terms)
        means["kd_ratio"] = abs(kd) / abs(means["base"]) if means["base"] else float("nan")
        means["tau"] = samples.tau
        return means

    def fit(self) -> TrainingResult:
        """Train until early stopping, then restore and round the best epoch's state."""
        stopper = EarlyStopping(patience=self.cfg.patience, max_epochs=self.cfg.epochs)
        keep = self.model.tensor_names + [n for bank in self.banks.values() for n in bank.tensor_names]
        best_state = self.params.state_dict(keep)
        rows = []
        label = f"{self.cfg.base_model}/{self.method}/d={self.model.dim}"

        for epoch in range(self.cfg.epochs):
            started = time.time()
            means = self.train_epoch(epoch)
            val_h5 = evaluate(self.model, self.dataset, self.pool, "validation").mean("H", 5)
            stop = stopper.update(val_h5)
            if stopper.improved:
                best_state = self.params.state_dict(keep)
            rows.append({"epoch": epoch + 1, **{f"{k}_loss": means[k] for k in ("base",) + self.terms},
                         "kd_ratio": means["kd_ratio"], "tau": means["tau"], "val_h5": val_h5,
                         "seconds": time.time() - started})
            terms = " ".join(f"{t}={means[t]:.4f}" for t in self.terms)
            logger.info(f"[{label}] epoch {epoch + 1}: base={means['base']:.4f} {terms} "
                        f"kd/base={means['kd_ratio']:.3f} tau={means['tau']:.3g} val_H@5={val_h5:.4f}")
            if stop:
                break

        best_epoch = stopper.best_epoch
        self.params.load_state_dict(best_state)
        self.params.to_storage_precision(keep)
        validation = evaluate(self.model, self.dataset, self.pool, "validation")
        logger.info(f"[{label}] best epoch {best_epoch}, val_H@5={validation.mean('H', 5):.4f}")
        return TrainingResult(params=self.params, model=self.model, best_epoch=best_epoch,
                              history=pd.DataFrame(rows), validation=validation, banks=self.banks)


def teacher_min_k(cfg: ExperimentConfig) -> int:
    """Longest teacher list any distillation method of ``cfg`` will draw from."""
    return max(cfg.rrd_k, cfg.rd_k, cfg.cd_k)


def train_teacher(cfg: ExperimentConfig, dataset: InteractionDataset, pool: NegativePool):
    """
    Train the full-width base model and cache its top-C unobserved items.

    Returns:
        (TrainingResult, TeacherSnapshot)
    """
    trainer = DistillationTrainer(cfg, dataset, pool, dim=cfg.resolved_teacher_dim, method="none")
    result = trainer.fit()
    snapshot = build_teacher_snapshot(result.model, dataset, cfg.cache_size,
                                      checksum=dataset_checksum(dataset), min_k=teacher_min_k(cfg))
    return result, snapshot


def distill(cfg: ExperimentConfig, teacher: Optional[TeacherSnapshot], dataset: InteractionDataset,
            pool: NegativePool) -> TrainingResult:
    """
    Train a student of width ``cfg.student_dim`` under ``cfg.method``.

    Raises:
        ConfigError: teacher built on another dataset or another base model
    """
    if teacher is not None:
        checksum = dataset_checksum(dataset)
        if teacher.checksum and teacher.checksum != checksum:
            raise ConfigError(f"teacher cache was built on dataset {teacher.checksum}, current is {checksum}")
        if teacher.base_model != cfg.base_model:
            raise ConfigError(f"teacher is {teacher.base_model}, config asks for {cfg.base_model}")
    return DistillationTrainer(cfg, dataset, pool, teacher=teacher).fit()
