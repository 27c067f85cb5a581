"""Dense numeric kernels with hand-written backward passes.

Matrices are plain 2-D numpy arrays. Precision follows the parameters:
float32 for production, float64 for gradient checks.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

BN_EPS = 1e-5
BN_MOMENTUM = 0.1
BCE_CLAMP = 1e-7


class DimensionError(ValueError):
    pass


class StateError(RuntimeError):
    pass


class ValidationError(ValueError):
    pass


@dataclass
class ParamTensor:
    name: str
    value: np.ndarray
    grad: np.ndarray = field(init=False)

    def __post_init__(self):
        self.grad = np.zeros_like(self.value)

    @property
    def shape(self):
        return self.value.shape

    @property
    def size(self) -> int:
        return int(self.value.size)

    def zero_grad(self):
        self.grad[...] = 0


@dataclass
class BatchNormState:
    gamma: ParamTensor
    beta: ParamTensor
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = BN_MOMENTUM
    eps: float = BN_EPS

    @classmethod
    def create(cls, name: str, dim: int, dtype=np.float32) -> "BatchNormState":
        return cls(
            gamma=ParamTensor(f"{name}.gamma", np.ones((1, dim), dtype=dtype)),
            beta=ParamTensor(f"{name}.beta", np.zeros((1, dim), dtype=dtype)),
            running_mean=np.zeros((1, dim), dtype=dtype),
            running_var=np.ones((1, dim), dtype=dtype),
        )


def _check_2d(x: np.ndarray, what: str):
    if x.ndim != 2:
        raise DimensionError(f"{what} must be 2-D, got shape {x.shape}")


# -- linear -------------------------------------------------------------------

def linear_forward(x: np.ndarray, w: ParamTensor, b: ParamTensor | None):
    """Return ``(x @ w + b, cache)``."""
    _check_2d(x, "linear input")
    if x.shape[1] != w.shape[0]:
        raise DimensionError(
            f"linear {w.name}: input shape {x.shape} does not match weight shape {w.shape}"
        )
    out = x @ w.value
    if b is not None:
        if b.shape != (1, w.shape[1]):
            raise DimensionError(
                f"linear {b.name}: bias shape {b.shape} does not match weight shape {w.shape}"
            )
        out = out + b.value
    return out, (x, w, b)


def linear_backward(grad_out: np.ndarray, cache) -> np.ndarray:
    """Accumulate weight/bias gradients and return the input gradient."""
    if cache is None:
        raise StateError("linear_backward called without a cached forward pass")
    x, w, b = cache
    w.grad += x.T @ grad_out
    if b is not None:
        b.grad += grad_out.sum(axis=0, keepdims=True)
    return grad_out @ w.value.T


# -- activations --------------------------------------------------------------

def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


def relu_backward(grad_out: np.ndarray, x: np.ndarray) -> np.ndarray:
    # subgradient at 0 is 0
    return grad_out * (x > 0)


def sigmoid(x: np.ndarray) -> np.ndarray:
    """Logistic function, split by sign so exp never overflows."""
    x = np.asarray(x)
    out = np.empty_like(x, dtype=np.result_type(x, np.float32))
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid_backward(grad_out: np.ndarray, out: np.ndarray) -> np.ndarray:
    return grad_out * out * (1 - out)


# -- batch norm ---------------------------------------------------------------

def batchnorm_forward(x: np.ndarray, state: BatchNormState, mode: str = "train"):
    """Normalise per feature. Returns ``(out, cache)``; cache is None in eval mode."""
    _check_2d(x, "batchnorm input")
    if x.shape[1] != state.gamma.shape[1]:
        raise DimensionError(
            f"batchnorm {state.gamma.name}: input shape {x.shape} vs {state.gamma.shape}"
        )
    if mode == "eval":
        inv_std = 1.0 / np.sqrt(state.running_var + state.eps)
        x_hat = (x - state.running_mean) * inv_std
        return x_hat * state.gamma.value + state.beta.value, None
    if mode != "train":
        raise ValueError(f"unknown mode {mode!r}")
    n = x.shape[0]
    if n < 2:
        raise ValidationError(f"batchnorm {state.gamma.name}: degenerate batch of {n} row(s)")
    mean = x.mean(axis=0, keepdims=True)
    centered = x - mean
    var = (centered * centered).mean(axis=0, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + state.eps)
    x_hat = centered * inv_std
    m = state.momentum
    state.running_mean[...] = (1 - m) * state.running_mean + m * mean
    state.running_var[...] = (1 - m) * state.running_var + m * var
    out = x_hat * state.gamma.value + state.beta.value
    return out, (x_hat, inv_std, state)


def batchnorm_backward(grad_out: np.ndarray, cache) -> np.ndarray:
    if cache is None:
        raise StateError("batchnorm_backward needs a train-mode forward cache")
    x_hat, inv_std, state = cache
    state.gamma.grad += (grad_out * x_hat).sum(axis=0, keepdims=True)
    state.beta.grad += grad_out.sum(axis=0, keepdims=True)
    g = grad_out * state.gamma.value
    n = g.shape[0]
    return (inv_std / n) * (
        n * g - g.sum(axis=0, keepdims=True) - x_hat * (g * x_hat).sum(axis=0, keepdims=True)
    )


# -- loss ---------------------------------------------------------------------

def bce_loss(p: np.ndarray, y: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean binary cross-entropy and its gradient w.r.t. ``p``."""
    p = np.asarray(p)
    y = np.asarray(y)
    if p.shape != y.shape:
        raise DimensionError(f"bce: probabilities {p.shape} vs labels {y.shape}")
    if not np.all((y == 0) | (y == 1)):
        raise ValidationError("bce: labels must be 0 or 1")
    n = p.size
    pc = np.clip(p, BCE_CLAMP, 1 - BCE_CLAMP)
    loss = -np.mean(y * np.log(pc) + (1 - y) * np.log(1 - pc))
    grad = (pc - y) / (pc * (1 - pc)) / n
    return float(loss), grad.astype(p.dtype, copy=False)
