"""Dense layer primitives, losses, the Adam optimizer, and a gradient checker.

Everything operates on row-major float64 numpy arrays and is a pure function
of its inputs: identical calls give bit-identical results.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Callable

import numpy as np

from .errors import DimensionError, NumericError

Array = np.ndarray

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPSILON = 1e-8


def _as_matrix(values, name: str) -> Array:
    out = np.asarray(values, dtype=np.float64)
    if out.ndim != 2:
        raise DimensionError(f"{name} must be 2-D, got shape {out.shape}")
    return out


def _as_vector(values, name: str) -> Array:
    out = np.asarray(values, dtype=np.float64)
    if out.ndim != 1:
        raise DimensionError(f"{name} must be 1-D, got shape {out.shape}")
    return out


def affine_forward(inputs, weights, bias) -> Array:
    """out[i, j] = sum_k inputs[i, k] * weights[k, j] + bias[j]."""
    x = _as_matrix(inputs, "inputs")
    w = _as_matrix(weights, "weights")
    b = _as_vector(bias, "bias")
    if x.shape[1] != w.shape[0]:
        raise DimensionError(f"inputs {x.shape} do not conform with weights {w.shape}")
    if b.shape[0] != w.shape[1]:
        raise DimensionError(f"bias {b.shape} does not conform with weights {w.shape}")
    return x @ w + b


def affine_backward(inputs, weights, upstream_grad) -> tuple[Array, Array, Array]:
    """Gradients of affine_forward: (d_inputs, d_weights, d_bias)."""
    x = _as_matrix(inputs, "inputs")
    w = _as_matrix(weights, "weights")
    g = _as_matrix(upstream_grad, "upstream_grad")
    if g.shape != (x.shape[0], w.shape[1]) or x.shape[1] != w.shape[0]:
        raise DimensionError(
            f"upstream {g.shape} does not conform with inputs {x.shape} and weights {w.shape}"
        )
    return g @ w.T, x.T @ g, g.sum(axis=0)


def relu(inputs) -> Array:
    x = np.asarray(inputs, dtype=np.float64)
    return np.maximum(x, 0.0)


def relu_backward(inputs, upstream_grad) -> Array:
    """Subgradient at exactly zero is zero."""
    x = np.asarray(inputs, dtype=np.float64)
    g = np.asarray(upstream_grad, dtype=np.float64)
    if x.shape != g.shape:
        raise DimensionError(f"upstream {g.shape} does not match inputs {x.shape}")
    return np.where(x > 0.0, g, 0.0)


def softmax(logits) -> Array:
    """Max-subtracted softmax over a single logits vector."""
    z = _as_vector(logits, "logits")
    if z.shape[0] < 2:
        raise DimensionError("softmax needs at least 2 logits")
    if not np.all(np.isfinite(z)):
        raise NumericError(f"non-finite logits: {z}")
    shifted = z - z.max()
    exp = np.exp(shifted)
    return exp / exp.sum()


def nll_loss(probs, label: int) -> float:
    """Negative log-likelihood of the true class."""
    p = _as_vector(probs, "probs")
    if not 0 <= label < p.shape[0]:
        raise IndexError(f"label {label} out of range for {p.shape[0]} classes")
    return float(-np.log(p[label]))


def nll_loss_grad(probs, label: int) -> Array:
    """Gradient of nll_loss w.r.t. the logits that produced `probs`: probs - onehot."""
    p = _as_vector(probs, "probs")
    if not 0 <= label < p.shape[0]:
        raise IndexError(f"label {label} out of range for {p.shape[0]} classes")
    grad = p.copy()
    grad[label] -= 1.0
    return grad


@dataclass(frozen=True)
class AdamState:
    """Optimizer state over a flat parameter vector."""

    first_moment: Array
    second_moment: Array
    step_count: int
    learning_rate: float
    beta1: float = ADAM_BETA1
    beta2: float = ADAM_BETA2
    epsilon: float = ADAM_EPSILON


def init_adam_state(
    num_params: int,
    learning_rate: float = 1e-3,
    beta1: float = ADAM_BETA1,
    beta2: float = ADAM_BETA2,
    epsilon: float = ADAM_EPSILON,
) -> AdamState:
    return AdamState(
        first_moment=np.zeros(num_params),
        second_moment=np.zeros(num_params),
        step_count=0,
        learning_rate=learning_rate,
        beta1=beta1,
        beta2=beta2,
        epsilon=epsilon,
    )


def adam_update(params, grads, state: AdamState) -> tuple[Array, AdamState]:
    """One bias-corrected Adam step; returns new params and state."""
    p = _as_vector(params, "params")
    g = _as_vector(grads, "grads")
    if p.shape != g.shape or p.shape != state.first_moment.shape:
        raise DimensionError(
            f"params {p.shape}, grads {g.shape}, state {state.first_moment.shape} disagree"
        )
    t = state.step_count + 1
    m = state.beta1 * state.first_moment + (1.0 - state.beta1) * g
    v = state.beta2 * state.second_moment + (1.0 - state.beta2) * g * g
    m_hat = m / (1.0 - state.beta1**t)
    v_hat = v / (1.0 - state.beta2**t)
    new_params = p - state.learning_rate * m_hat / (np.sqrt(v_hat) + state.epsilon)
    return new_params, replace(state, first_moment=m, second_moment=v, step_count=t)


@dataclass(frozen=True)
class GradCheckResult:
    max_rel_error: float
    passed: bool
    num_checked: int
    worst_index: int


def grad_check(
    objective: Callable[[Array], tuple[float, Array]],
    params,
    tolerance: float = 1e-4,
    step: float = 1e-5,
    max_checked: int = 10_000,
    seed: int = 0,
) -> GradCheckResult:
    """Compare an analytic gradient against central finite differences.

    `objective(params) -> (loss, grad)` must be deterministic. Every parameter
    is probed; above `max_checked` parameters a seeded random subsample is
    used. The relative error per parameter is
    |analytic - numeric| / max(1, |analytic| + |numeric|).
    """
    theta = _as_vector(params, "params").copy()
    loss0, analytic = objective(theta)
    analytic = _as_vector(analytic, "gradient").copy()
    if not np.isfinite(loss0) or not np.all(np.isfinite(analytic)):
        raise NumericError("objective returned non-finite loss or gradient")
    if analytic.shape != theta.shape:
        raise DimensionError(f"gradient {analytic.shape} does not match params {theta.shape}")

    n = theta.shape[0]
    if n > max_checked:
        indices = np.random.default_rng(seed).choice(n, size=max_checked, replace=False)
        indices.sort()
    else:
        indices = np.arange(n)

    max_err = 0.0
    worst = -1
    for idx in indices:
        saved = theta[idx]
        theta[idx] = saved + step
        loss_plus = objective(theta)[0]
        theta[idx] = saved - step
        loss_minus = objective(theta)[0]
        theta[idx] = saved
        if not np.isfinite(loss_plus) or not np.isfinite(loss_minus):
            raise NumericError(f"non-finite loss while probing parameter {idx}")
        numeric = (loss_plus - loss_minus) / (2.0 * step)
        err = abs(analytic[idx] - numeric) / max(1.0, abs(analytic[idx]) + abs(numeric))
        if err > max_err:
            max_err = err
            worst = int(idx)
    return GradCheckResult(
        max_rel_error=max_err,
        passed=max_err <= tolerance,
        num_checked=len(indices),
        worst_index=worst,
    )
