"""Central finite-difference oracle for the reverse-mode engine."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from plat.autodiff.tensor import Tensor


@dataclass
class GradCheckReport:
    max_rel_err: float
    tol: float
    n_checked: int
    worst: tuple[int, int] | None = None  # (input index, flat element index)
    per_input: list[float] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return self.max_rel_err <= self.tol

    def __str__(self) -> str:
        verdict = "PASS" if self.passed else "FAIL"
        return f"{verdict} max_rel_err={self.max_rel_err:.3e} tol={self.tol:.1e} n={self.n_checked}"


def numerical_grad(f: Callable[[], Tensor], x: Tensor, step: float = 1e-6,
                   indices: np.ndarray | None = None) -> np.ndarray:
    """(f(x+h e_i) - f(x-h e_i)) / 2h per element of ``x`` (mutated in place, restored).

    With ``indices`` only those flat positions are probed; the rest stay 0.
    """
    flat = x.data.reshape(-1)
    out = np.zeros_like(flat)
    for i in (range(flat.size) if indices is None else indices):
        orig = flat[i]
        flat[i] = orig + step
        fp = f().item()
        flat[i] = orig - step
        fm = f().item()
        flat[i] = orig
        out[i] = (fp - fm) / (2 * step)
    return out.reshape(x.shape)


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> np.ndarray:
    """|a - n| / max(|a|, |n|, floor); the floor keeps near-zero grads from dominating."""
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denom


def grad_check(
    f: Callable[..., Tensor],
    inputs: Tensor | Sequence[Tensor],
    step: float = 1e-6,
    tol: float = 1e-4,
    floor: float = 1e-6,
    max_elements: int | None = None,
    seed: int = 0,
) -> GradCheckReport:
    """Compare backward() gradients of scalar ``f(*inputs)`` against central differences.

    Each input must be a leaf with ``requires_grad=True``. A report is always
    returned; ``report.passed`` is true iff the max relative error is <= tol.
    ``max_elements`` probes a seeded random subset of each larger input.
    """
    rng = np.random.default_rng(seed)
    if isinstance(inputs, Tensor):
        inputs = [inputs]
    inputs = list(inputs)
    for t in inputs:
        t.grad = None
    loss = f(*inputs)
    loss.backward()
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in inputs]

    worst_err, worst, per_input, n = 0.0, None, [], 0
    for j, t in enumerate(inputs):
        idx = None
        if max_elements is not None and t.data.size > max_elements:
            idx = np.sort(rng.choice(t.data.size, size=max_elements, replace=False))
        numeric = numerical_grad(lambda: f(*inputs), t, step, idx)
        err = relative_error(analytic[j], numeric, floor)
        if idx is not None:
            err = err.reshape(-1)[idx]
        n += err.size
        m = float(err.max()) if err.size else 0.0
        per_input.append(m)
        if m > worst_err or worst is None:
            arg = int(err.argmax()) if err.size else 0
            worst_err, worst = m, (j, int(idx[arg]) if idx is not None else arg)
    for t in inputs:
        t.grad = None
    return GradCheckReport(worst_err, tol, n, worst, per_input)
