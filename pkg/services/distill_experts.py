"""
Distillation experts: latent-knowledge transfer from teacher hidden layers.
A selection network scores M experts from the teacher representation, one
expert is picked through a Gumbel-Softmax relaxation, and the picked expert
reconstructs the teacher representation from the student's.
"""

import logging
from dataclasses import dataclass
from typing import List, Mapping, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy.special import log_softmax, softmax

from config import ConfigError
from models import TapBatch, glorot_uniform
from services.gradcore import ParamStore

logger = logging.getLogger(__name__)

SELECTION_MODES = ("selection", "attention", "average")

# CLI ablation name -> (bank mode, force single expert)
ABLATIONS = {
    "selection": ("selection", False),
    "attention": ("attention", False),
    "one_expert_large": ("average", False),
    "one_expert_small": ("selection", True),
}


@dataclass
class TemperatureSchedule:
    """Geometric decay tau(p) = tau_0 * (tau_P / tau_0) ** (p / P)."""

    total_epochs: int
    tau_0: float = 1.0
    tau_p: float = 1e-10


@dataclass
class SelectionOutcome:
    """Specialisation scores, relaxed one-hot selection and the Gumbel noise used."""

    alpha: np.ndarray
    s: np.ndarray
    gumbel: np.ndarray


def anneal(schedule: TemperatureSchedule, epoch: int) -> float:
    """Temperature at ``epoch``; epochs past the end clamp to tau_P."""
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    if epoch > schedule.total_epochs:
        logger.warning(f"Epoch {epoch} beyond schedule end {schedule.total_epochs}; clamping temperature")
        return schedule.tau_p
    return schedule.tau_0 * (schedule.tau_p / schedule.tau_0) ** (epoch / schedule.total_epochs)


def gumbel_softmax(log_alpha: np.ndarray, gumbel: np.ndarray, tau) -> np.ndarray:
    """Relaxed one-hot sample softmax((log alpha + g) / tau) along the last axis; tau may broadcast."""
    if np.any(np.asarray(tau) <= 0):
        raise ValueError("temperature must be > 0")
    return softmax((log_alpha + gumbel) / tau, axis=-1)


class ExpertBank:
    """
    M two-layer experts d_s -> (d_s + d_t) // 2 -> d_t with ReLU, and a
    linear selection network d_t -> M, registered under ``prefix`` in a store.

    ``grad_tau_floor`` bounds the temperature used in the selection-network
    gradient; the forward pass always uses the scheduled temperature.
    """

    def __init__(self, params: ParamStore, prefix: str, num_experts: int, student_dim: int,
                 teacher_dim: int, side: str = "user", mode: str = "selection",
                 rng: Optional[np.random.Generator] = None, grad_tau_floor: float = 0.0):
        if mode not in SELECTION_MODES:
            raise ConfigError(f"unknown expert selection mode {mode!r}")
        if num_experts < 1:
            raise ConfigError("an expert bank needs at least one expert")
        self.params = params
        self.prefix = prefix
        self.num_experts = num_experts
        self.student_dim = student_dim
        self.teacher_dim = teacher_dim
        self.hidden_dim = (student_dim + teacher_dim) // 2
        self.side = side
        self.mode = mode
        self.grad_tau_floor = grad_tau_floor

        m, ds, dh, dt = num_experts, student_dim, self.hidden_dim, teacher_dim
        if self._name("w1") not in params:
            if rng is None:
                raise ValueError("rng is required to initialise a new expert bank")
            params.add(self._name("w1"), glorot_uniform(rng, ds, dh, shape=(m, ds, dh)))
            params.add(self._name("b1"), np.zeros((m, dh)))
            params.add(self._name("w2"), glorot_uniform(rng, dh, dt, shape=(m, dh, dt)))
            params.add(self._name("b2"), np.zeros((m, dt)))
            params.add(self._name("sel_w"), glorot_uniform(rng, dt, m))
            params.add(self._name("sel_b"), np.zeros(m))
        if params[self._name("w1")].shape != (m, ds, dh) or params[self._name("w2")].shape != (m, dh, dt):
            raise ConfigError(f"expert bank {prefix!r} does not match widths {ds}->{dh}->{dt}")

    def _name(self, part: str) -> str:
        return f"{self.prefix}.{part}"

    @property
    def tensor_names(self) -> List[str]:
        return [self._name(p) for p in ("w1", "b1", "w2", "b2", "sel_w", "sel_b")]

    def specialization(self, h_t: np.ndarray) -> np.ndarray:
        """Normalised specialisation scores alpha, no noise."""
        e = h_t @ self.params[self._name("sel_w")] + self.params[self._name("sel_b")]
        return softmax(e, axis=1)

    def forward(self, h_t: np.ndarray, h_s: np.ndarray, tau: float,
                rng: Optional[np.random.Generator] = None, gumbel: Optional[np.ndarray] = None):
        """
        Reconstruct teacher representations.

        Args:
            h_t: (n, d_t) teacher taps (never receive gradients)
            h_s: (n, d_s) student taps
            tau: Gumbel-Softmax temperature
            rng: Noise source for the selection mode
            gumbel: Explicit (n, M) noise, overrides ``rng``

        Returns:
            (reconstruction (n, d_t), SelectionOutcome, cache for backward)
        """
        if tau <= 0:
            raise ValueError("temperature must be > 0")
        if h_t.shape[1] != self.teacher_dim or h_s.shape[1] != self.student_dim:
            raise ConfigError(f"tap widths {h_s.shape[1]}/{h_t.shape[1]} do not match bank "
                              f"{self.student_dim}/{self.teacher_dim}")
        p = self.params
        a1 = np.einsum("nd,mdh->nmh", h_s, p[self._name("w1")]) + p[self._name("b1")][None]
        r1 = np.maximum(a1, 0.0)
        out = np.einsum("nmh,mht->nmt", r1, p[self._name("w2")]) + p[self._name("b2")][None]

        e = h_t @ p[self._name("sel_w")] + p[self._name("sel_b")]
        log_alpha = log_softmax(e, axis=1)
        alpha = np.exp(log_alpha)
        n, m = alpha.shape
        if self.mode == "selection":
            if gumbel is None:
                if rng is None:
                    raise ValueError("selection mode needs an rng or explicit noise")
                gumbel = rng.gumbel(size=(n, m))
            s = gumbel_softmax(log_alpha, gumbel, tau)
        elif self.mode == "attention":
            gumbel = np.zeros((n, m))
            s = alpha
        else:
            gumbel = np.zeros((n, m))
            s = np.full((n, m), 1.0 / m)

        recon = np.einsum("nm,nmt->nt", s, out)
        cache = {"h_t": h_t, "h_s": h_s, "a1": a1, "r1": r1, "out": out,
                 "alpha": alpha, "s": s, "tau": tau}
        return recon, SelectionOutcome(alpha=alpha, s=s, gumbel=gumbel), cache

    def backward(self, cache, drecon: np.ndarray) -> np.ndarray:
        """Accumulate expert and selection gradients; return the gradient w.r.t. h_s."""
        p = self.params
        s, out = cache["s"], cache["out"]
        ds = np.einsum("nt,nmt->nm", drecon, out)
        dout = s[:, :, None] * drecon[:, None, :]

        p.grad(self._name("w2"))[...] += np.einsum("nmh,nmt->mht", cache["r1"], dout)
        p.grad(self._name("b2"))[...] += dout.sum(axis=0)
        da1 = np.einsum("nmt,mht->nmh", dout, p[self._name("w2")]) * (cache["a1"] > 0)
        p.grad(self._name("w1"))[...] += np.einsum("nd,nmh->mdh", cache["h_s"], da1)
        p.grad(self._name("b1"))[...] += da1.sum(axis=0)
        dh_s = np.einsum("nmh,mdh->nd", da1, p[self._name("w1")])

        alpha = cache["alpha"]
        if self.mode == "selection":
            dz = s * (ds - np.sum(ds * s, axis=1, keepdims=True))
            dlog_alpha = dz / max(cache["tau"], self.grad_tau_floor)
        elif self.mode == "attention":
            dlog_alpha = alpha * ds
        else:
            dlog_alpha = None
        if dlog_alpha is not None:
            de = dlog_alpha - alpha * np.sum(dlog_alpha, axis=1, keepdims=True)
            p.grad(self._name("sel_w"))[...] += cache["h_t"].T @ de
            p.grad(self._name("sel_b"))[...] += de.sum(axis=0)
        return dh_s


def build_expert_banks(params: ParamStore, model, teacher_model, num_experts: int, ablation: str,
                       rng: np.random.Generator, grad_tau_floor: float = 0.0) -> dict:
    """One bank per tap side of the student, widths taken from both models' taps."""
    if ablation not in ABLATIONS:
        raise ConfigError(f"unknown DE ablation {ablation!r}")
    mode, single = ABLATIONS[ablation]
    m = 1 if single else num_experts
    banks = {}
    for side in model.tap_sides:
        if side not in teacher_model.tap_sides:
            raise ConfigError(f"teacher has no {side!r} tap")
        banks[side] = ExpertBank(params, f"de.{side}", m, model.tap_width(side),
                                 teacher_model.tap_width(side), side=side, mode=mode, rng=rng,
                                 grad_tau_floor=grad_tau_floor)
    return banks


def select_and_reconstruct(bank: ExpertBank, h_t: np.ndarray, h_s: np.ndarray, tau: float,
                           rng: Optional[np.random.Generator] = None) -> Tuple[np.ndarray, SelectionOutcome]:
    """Single-entity reconstruction: returns (vector d_t, SelectionOutcome)."""
    if tau <= 0:
        raise ValueError("temperature must be > 0")
    recon, outcome, _ = bank.forward(np.atleast_2d(h_t), np.atleast_2d(h_s), tau, rng)
    return recon[0], SelectionOutcome(outcome.alpha[0], outcome.s[0], outcome.gumbel[0])


def de_loss(banks: Mapping[str, ExpertBank], student_taps: Sequence[TapBatch],
            teacher_taps: Sequence[TapBatch], tau: float, rng: Optional[np.random.Generator],
            model, squared: bool = False, weight: float = 1.0) -> float:
    """
    Mean over entities of ||h_t - sum_m s_m E_m(h_s)||_2 (squared if asked).

    Each side's entities go through that side's bank; gradients flow to the
    experts, the selection network and, through ``model.backprop_tap``, the
    student. Teacher taps are read only.
    """
    total = sum(len(t.keys) for t in student_taps)
    if total == 0:
        return 0.0
    loss = 0.0
    for s_tap, t_tap in zip(student_taps, teacher_taps):
        if s_tap.side != t_tap.side or len(s_tap.keys) != len(t_tap.keys):
            raise ConfigError("student and teacher taps are not aligned")
        bank = banks[s_tap.side]
        recon, _, cache = bank.forward(t_tap.values, s_tap.values, tau, rng)
        diff = t_tap.values - recon
        if squared:
            per_entity = np.sum(diff * diff, axis=1)
            drecon = -2.0 * diff
        else:
            per_entity = np.linalg.norm(diff, axis=1)
            safe = np.where(per_entity > 0, per_entity, 1.0)
            drecon = np.where(per_entity[:, None] > 0, -diff / safe[:, None], 0.0)
        loss += float(per_entity.sum())
        dh_s = bank.backward(cache, drecon * (weight / total))
        model.backprop_tap(s_tap, dh_s)
    return loss / total


def export_expert_assignments(bank: ExpertBank, entity_ids: Sequence, h_t: np.ndarray,
                              entity_type: Optional[str] = None) -> pd.DataFrame:
    """
    Deterministic expert map: argmax of alpha per entity plus the alpha vector.

    Columns: entity_type, entity_id, expert, alpha_0 .. alpha_{M-1}.
    """
    alpha = bank.specialization(h_t)
    frame = pd.DataFrame({
        "entity_type": entity_type or bank.side,
        "entity_id": list(entity_ids),
        "expert": np.argmax(alpha, axis=1),
    })
    for m in range(bank.num_experts):
        frame[f"alpha_{m}"] = alpha[:, m]
    return frame
