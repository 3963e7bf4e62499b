"""Dense float64 tensor substrate with explicit forward/backward ops.

There is no autodiff tape: every operation here comes as a forward
function plus an explicit backward function, and the model modules
compose them by hand.  Gradients accumulate into ``Tensor.grad``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class DimensionError(ValueError):
    """Raised when operand shapes do not line up."""


class TrainingDivergedError(RuntimeError):
    """Raised when a training loop produces a non-finite loss or gradient."""


class Tensor:
    """A named bag of float64 values with an optional gradient accumulator."""

    __slots__ = ("data", "grad", "name")

    def __init__(self, data, name: str = ""):
        self.data = np.array(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def zero_grad(self) -> None:
        self.grad = None

    def add_grad(self, g: np.ndarray) -> None:
        g = np.asarray(g, dtype=np.float64)
        if g.shape != self.data.shape:
            raise DimensionError(
                f"gradient shape {g.shape} != parameter shape {self.data.shape}"
                + (f" for {self.name!r}" if self.name else "")
            )
        if self.grad is None:
            self.grad = g.copy()
        else:
            self.grad += g

    def grad_or_zero(self) -> np.ndarray:
        return np.zeros_like(self.data) if self.grad is None else self.grad

    def __repr__(self) -> str:
        tag = f" {self.name!r}" if self.name else ""
        return f"Tensor{tag}(shape={self.data.shape})"


# ---------------------------------------------------------------------------
# core ops


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of two rank-2 tensors."""
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise DimensionError("matmul expects rank-2 operands")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"inner dimensions disagree: {a.shape} x {b.shape}")
    return Tensor(a.data @ b.data)


def matmul_backward(grad_out: np.ndarray, a: Tensor, b: Tensor) -> None:
    """Accumulate dA = dC.B^T and dB = A^T.dC into the operand grads."""
    grad_out = np.asarray(grad_out, dtype=np.float64)
    a.add_grad(grad_out @ b.data.T)
    b.add_grad(a.data.T @ grad_out)


def linear(x: np.ndarray, w: Tensor, b: Tensor) -> np.ndarray:
    """Affine map x @ W + b for a batch of row vectors."""
    if x.shape[-1] != w.shape[0]:
        raise DimensionError(f"linear: input dim {x.shape[-1]} != weight rows {w.shape[0]}")
    return x @ w.data + b.data


def linear_backward(grad_out: np.ndarray, x: np.ndarray, w: Tensor, b: Tensor) -> np.ndarray:
    w.add_grad(x.T @ grad_out)
    b.add_grad(grad_out.sum(axis=0))
    return grad_out @ w.data.T


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def relu_backward(grad_out: np.ndarray, x: np.ndarray) -> np.ndarray:
    return grad_out * (x > 0.0)


def dropout(x: np.ndarray, rate: float, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Inverted dropout; returns (output, keep mask scaled for backward)."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if rate == 0.0:
        mask = np.ones_like(x)
    else:
        mask = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return x * mask, mask


def dropout_backward(grad_out: np.ndarray, mask: np.ndarray) -> np.ndarray:
    return grad_out * mask


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def softmax(logits: np.ndarray) -> np.ndarray:
    return np.exp(log_softmax(logits))


def cross_entropy(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean cross-entropy over a batch; labels are class indices.

    Returns (loss, dloss/dlogits) so callers get the backward for free.
    """
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise DimensionError(f"cross_entropy: logits {logits.shape} vs labels {labels.shape}")
    n = logits.shape[0]
    logp = log_softmax(logits)
    loss = -logp[np.arange(n), labels].mean()
    dlogits = np.exp(logp)
    dlogits[np.arange(n), labels] -= 1.0
    dlogits /= n
    return float(loss), dlogits


# ---------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    """Per-parameter Adam moments plus the shared hyperparameters.

    ``l2_lambda`` implements weight decay on the gradient side: lambda * param
    is added to each gradient before the moment update.
    """

    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    l2_lambda: float = 0.0
    step_count: int = 0
    first_moment: list[np.ndarray] = field(default_factory=list)
    second_moment: list[np.ndarray] = field(default_factory=list)

    @classmethod
    def for_params(cls, params: list[Tensor], lr: float, l2_lambda: float = 0.0,
                   beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> "AdamState":
        state = cls(lr=lr, beta1=beta1, beta2=beta2, eps=eps, l2_lambda=l2_lambda)
        state.first_moment = [np.zeros_like(p.data) for p in params]
        state.second_moment = [np.zeros_like(p.data) for p in params]
        return state


def adam_step(params: list[Tensor], grads: list[np.ndarray] | None, state: AdamState) -> None:
    """One Adam update with bias correction, in place on ``params``.

    ``grads`` defaults to each parameter's accumulated ``.grad``.  Non-finite
    gradients abort with :class:`TrainingDivergedError` so the caller can
    surface the divergence.
    """
    if grads is None:
        grads = [p.grad_or_zero() for p in params]
    if len(params) != len(grads) or len(params) != len(state.first_moment):
        raise DimensionError("adam_step: params, grads and state are not aligned")
    state.step_count += 1
    t = state.step_count
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    for p, g, m, v in zip(params, grads, state.first_moment, state.second_moment):
        g = np.asarray(g, dtype=np.float64)
        if g.shape != p.data.shape:
            raise DimensionError(f"adam_step: grad shape {g.shape} != param shape {p.data.shape}")
        if not np.all(np.isfinite(g)):
            raise TrainingDivergedError(f"non-finite gradient for parameter {p.name!r}")
        if state.l2_lambda != 0.0:
            g = g + state.l2_lambda * p.data
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p.data -= state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)


# ---------------------------------------------------------------------------
# gradient checking


def finite_diff_check(f, params: list[Tensor], h: float = 1e-5,
                      max_entries_per_param: int | None = None,
                      rng: np.random.Generator | None = None) -> float:
    """Compare analytic gradients against central differences.

    ``f`` takes no arguments, runs forward + backward on the current values of
    ``params`` (leaving analytic gradients in ``param.grad``) and returns the
    scalar loss.  Returns the maximum over checked entries of

        |analytic - central| / max(1, |central|).

    ``max_entries_per_param`` subsamples large parameters (seeded via ``rng``)
    to keep the check affordable.
    """
    if not 1e-6 <= h <= 1e-4:
        raise ValueError(f"step size h={h} outside [1e-6, 1e-4]")
    for p in params:
        p.zero_grad()
    f()
    analytic = [p.grad_or_zero().copy() for p in params]

    worst = 0.0
    for p, ana in zip(params, analytic):
        flat = p.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries_per_param is not None and flat.size > max_entries_per_param:
            if rng is None:
                rng = np.random.default_rng(0)
            idx = rng.choice(flat.size, size=max_entries_per_param, replace=False)
        for i in idx:
            orig = flat[i]
            flat[i] = orig + h
            loss_plus = f()
            flat[i] = orig - h
            loss_minus = f()
            flat[i] = orig
            numeric = (loss_plus - loss_minus) / (2.0 * h)
            err = abs(ana.reshape(-1)[i] - numeric) / max(1.0, abs(numeric))
            worst = max(worst, err)
    # restore analytic grads for the unperturbed point
    for p in params:
        p.zero_grad()
    f()
    return worst


def glorot_uniform(rng: np.random.Generator, fan_in: int, fan_out: int,
                   shape: tuple[int, ...]) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)
