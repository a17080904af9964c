"""
Parameter store, Adam optimizer and finite-difference gradient oracle.
Every loss in the project accumulates hand-derived gradients into a
ParamStore; finite_diff_check is the contract they are held to.
"""

import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, List, Optional, Tuple

import numpy as np

logger = logging.getLogger(__name__)

FD_STEP = 1e-4


class NumericalError(Exception):
    """Raised when a gradient or a loss stops being finite."""
    pass


@dataclass
class Tensor:
    values: np.ndarray
    grad: np.ndarray


class ParamStore:
    """Named float64 tensors with gradient slots, shared by a model and its distillation heads."""

    def __init__(self):
        self._tensors: Dict[str, Tensor] = {}
        self.step = 0

    def add(self, name: str, values: np.ndarray) -> np.ndarray:
        if name in self._tensors:
            raise KeyError(f"tensor {name!r} already registered")
        values = np.array(values, dtype=np.float64)
        self._tensors[name] = Tensor(values, np.zeros_like(values))
        return values

    def __contains__(self, name: str) -> bool:
        return name in self._tensors

    def __getitem__(self, name: str) -> np.ndarray:
        return self._tensors[name].values

    def __len__(self) -> int:
        return len(self._tensors)

    def grad(self, name: str) -> np.ndarray:
        return self._tensors[name].grad

    def names(self, prefix: Optional[str] = None) -> List[str]:
        return [n for n in self._tensors if prefix is None or n.startswith(prefix)]

    def items(self) -> Iterable[Tuple[str, Tensor]]:
        return self._tensors.items()

    def zero_grads(self) -> None:
        for tensor in self._tensors.values():
            tensor.grad.fill(0.0)

    def num_params(self, names: Optional[Iterable[str]] = None) -> int:
        names = self._tensors if names is None else names
        return int(sum(self._tensors[n].values.size for n in names))

    def state_dict(self, names: Optional[Iterable[str]] = None) -> Dict[str, np.ndarray]:
        names = self._tensors if names is None else names
        return {n: self._tensors[n].values.copy() for n in names}

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        """Copy values in place so arrays held by models stay valid."""
        for name, values in state.items():
            target = self._tensors[name].values
            if target.shape != values.shape:
                raise ValueError(f"shape mismatch for {name}: {target.shape} vs {values.shape}")
            np.copyto(target, values)

    def to_storage_precision(self, names: Optional[Iterable[str]] = None) -> None:
        """Round values to float32 so a snapshot round-trip is exact."""
        for name in (self._tensors if names is None else names):
            values = self._tensors[name].values
            np.copyto(values, values.astype(np.float32).astype(np.float64))


@dataclass
class AdamState:
    """Adam hyperparameters and per-tensor moment estimates."""

    learning_rate: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: ParamStore, state: AdamState) -> ParamStore:
    """
    Apply one bias-corrected Adam update to every tensor in ``params``.

    Gradients are left untouched; the caller zeroes them.

    Raises:
        NumericalError: if any gradient entry is non-finite (no tensor is updated)
    """
    for name, tensor in params.items():
        if not np.all(np.isfinite(tensor.grad)):
            raise NumericalError(f"non-finite gradient in tensor {name!r} at step {params.step + 1}")

    params.step += 1
    t = params.step
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    step_size = state.learning_rate / bc1 if bc1 > 0 else state.learning_rate

    for name, tensor in params.items():
        g = tensor.grad
        if name not in state.m:
            state.m[name] = np.zeros_like(tensor.values)
            state.v[name] = np.zeros_like(tensor.values)
        m = state.m[name]
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        denom = np.sqrt(v * (1.0 / bc2)) + state.epsilon if bc2 > 0 else np.sqrt(v) + state.epsilon
        tensor.values -= step_size * m / denom
    return params


@dataclass
class GradCheckReport:
    """Outcome of a finite-difference gradient check."""

    passed: bool
    max_error: float
    checked: int
    worst: Optional[Tuple[str, int]] = None
    skipped: List[Tuple[str, int]] = field(default_factory=list)
    per_tensor: Dict[str, float] = field(default_factory=dict)


def finite_diff_check(loss: Callable[[ParamStore], float], params: ParamStore, tol: float = 1e-4,
                      n_coords: int = 100, h: float = FD_STEP,
                      rng: Optional[np.random.Generator] = None,
                      names: Optional[List[str]] = None) -> GradCheckReport:
    """
    Compare accumulated gradients against central differences.

    ``loss`` must evaluate the scalar loss at the current values and accumulate
    its gradient into ``params``; it is called once for the analytic gradient
    and twice per sampled coordinate. Any randomness inside it must be
    re-seeded on every call.

    Args:
        loss: Scalar loss of the store
        params: Store under test
        tol: Maximum allowed |g_analytic - g_fd| / max(1, |g_fd|)
        n_coords: Coordinates sampled across the checked tensors
        h: Perturbation size
        rng: Coordinate sampler (seed 0 if omitted)
        names: Tensors to check (all by default)

    Returns:
        GradCheckReport
    """
    rng = rng or np.random.default_rng(0)
    names = names or params.names()

    params.zero_grads()
    loss(params)
    analytic = {n: params.grad(n).copy() for n in names}

    per_tensor = max(1, int(np.ceil(n_coords / len(names))))
    max_error = 0.0
    worst = None
    checked = 0
    skipped = []
    errors: Dict[str, float] = {}

    for name in names:
        values = params[name]
        flat = values.reshape(-1)
        count = min(per_tensor, flat.size)
        coords = rng.choice(flat.size, size=count, replace=False)
        errors[name] = 0.0
        for idx in coords:
            original = flat[idx]
            flat[idx] = original + h
            params.zero_grads()
            plus = loss(params)
            flat[idx] = original - h
            params.zero_grads()
            minus = loss(params)
            flat[idx] = original
            if not (np.isfinite(plus) and np.isfinite(minus)):
                skipped.append((name, int(idx)))
                continue
            fd = (plus - minus) / (2.0 * h)
            ga = analytic[name].reshape(-1)[idx]
            err = abs(ga - fd) / max(1.0, abs(fd))
            errors[name] = max(errors[name], err)
            checked += 1
            if err > max_error:
                max_error = err
                worst = (name, int(idx))

    params.zero_grads()
    report = GradCheckReport(passed=max_error <= tol, max_error=max_error, checked=checked,
                             worst=worst, skipped=skipped, per_tensor=errors)
    if skipped:
        logger.warning(f"Gradient check skipped {len(skipped)} coordinates with non-finite loss")
    if not report.passed:
        logger.warning(f"Gradient check failed: max error {max_error:.3e} at {worst}")
    return report
