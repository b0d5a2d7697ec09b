"""Numerical kernel: flat-parameter tanh MLP with hand-written reverse-mode
gradients, Adam, a finite-difference oracle, and a counter-based RNG.

Parameters for a network live in one flat float64 vector laid out layer by
layer, weights first (row-major, shape (fan_out, fan_in)) then biases. All
functions here are pure: they never mutate their inputs and identical inputs
produce bit-identical outputs, which is what makes single-worker runs
replayable end to end.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import ConfigurationError, NonFiniteUpdateError

_MASK64 = (1 << 64) - 1
_SPLITMIX_GAMMA = 0x9E3779B97F4A7C15


def _mix64(z: int) -> int:
    """splitmix64 finalizer: full-avalanche scrambling of a 64-bit word."""
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9 & _MASK64
    z = (z ^ (z >> 27)) * 0x94D049BB133111EB & _MASK64
    return z ^ (z >> 31)


class Rng:
    """splitmix64 counter generator: 64-bit state, one increment per draw.

    Single-owner by convention: never share an instance between workers.
    """

    __slots__ = ("state",)

    def __init__(self, state: int):
        self.state = state & _MASK64

    def clone(self) -> "Rng":
        return Rng(self.state)

    def next_u64(self) -> int:
        self.state = (self.state + _SPLITMIX_GAMMA) & _MASK64
        return _mix64(self.state)

    def uniform(self) -> float:
        """Uniform draw in [0, 1) with 53 random bits."""
        return (self.next_u64() >> 11) * 2.0**-53

    def uniform_in(self, low: float, high: float) -> float:
        return low + (high - low) * self.uniform()

    def normal(self) -> float:
        """Standard normal via Box-Muller (cosine branch) from two uniforms."""
        # (0, 1] so the log argument never hits zero.
        u1 = ((self.next_u64() >> 11) + 1) * 2.0**-53
        u2 = self.uniform()
        return math.sqrt(-2.0 * math.log(u1)) * math.cos(2.0 * math.pi * u2)

    def randint_below(self, n: int) -> int:
        """Uniform integer in [0, n). Modulo bias is ~n/2^64, irrelevant here."""
        return self.next_u64() % n

    def shuffle(self, indices: np.ndarray) -> None:
        """In-place Fisher-Yates shuffle driven by this generator."""
        for i in range(len(indices) - 1, 0, -1):
            j = self.randint_below(i + 1)
            indices[i], indices[j] = indices[j], indices[i]


def derive_worker_rng(base_seed: int, worker_id: int) -> Rng:
    """Deterministic per-worker stream: splitmix scrambling of base_seed XOR worker_id.

    Distinct worker ids yield distinct streams for a fixed seed. Orchestrator-side
    streams (init, learner, eval) use reserved ids >= 2**32 so they never collide
    with worker ids.
    """
    return Rng(_mix64((base_seed ^ worker_id) & _MASK64))


def derive_iteration_rng(base_seed: int, worker_id: int, version: int) -> Rng:
    """Per-(worker, iteration) stream, derived from the worker's base stream.

    Workers free-run past the sample quota until the stop signal reaches them,
    so the number of RNG draws an iteration consumes is timing-dependent.
    Re-deriving the stream at every BEGIN pins each iteration's sample stream
    to (seed, worker, version) alone, which is what makes single-worker runs
    bit-reproducible end to end.
    """
    base = _mix64((base_seed ^ worker_id) & _MASK64)
    return Rng(_mix64((base + (version + 1) * _SPLITMIX_GAMMA) & _MASK64))


# Reserved non-worker stream ids (worker ids are always < 2**32).
INIT_STREAM = 1 << 32
LEARNER_STREAM = (1 << 32) + 1
EVAL_STREAM = (1 << 32) + 2


@dataclass(frozen=True)
class MlpLayout:
    """Shape of a tanh MLP: tanh on hidden layers, identity on the output."""

    input_dim: int
    hidden_dims: tuple[int, ...]
    output_dim: int

    def __post_init__(self) -> None:
        dims = (self.input_dim, *self.hidden_dims, self.output_dim)
        if any(d < 1 for d in dims):
            raise ConfigurationError(f"all layer dims must be >= 1, got {dims}")

    @property
    def dims(self) -> tuple[int, ...]:
        return (self.input_dim, *self.hidden_dims, self.output_dim)

    @property
    def param_count(self) -> int:
        dims = self.dims
        return sum((dims[i] + 1) * dims[i + 1] for i in range(len(dims) - 1))


def _check_params(params: np.ndarray, layout: MlpLayout) -> None:
    if params.shape != (layout.param_count,):
        raise ConfigurationError(
            f"parameter vector has length {params.shape}, layout needs ({layout.param_count},)"
        )


def _layer_views(params: np.ndarray, layout: MlpLayout) -> list[tuple[np.ndarray, np.ndarray]]:
    """(W, b) views per layer into the flat vector; W has shape (fan_out, fan_in)."""
    dims = layout.dims
    out = []
    ofs = 0
    for i in range(len(dims) - 1):
        fi, fo = dims[i], dims[i + 1]
        w = params[ofs : ofs + fi * fo].reshape(fo, fi)
        ofs += fi * fo
        b = params[ofs : ofs + fo]
        ofs += fo
        out.append((w, b))
    return out


def init_mlp_params(layout: MlpLayout, rng: Rng) -> np.ndarray:
    """Uniform +-sqrt(6/(fan_in+fan_out)) weights, zero biases, drawn layer by layer."""
    dims = layout.dims
    params = np.zeros(layout.param_count, dtype=np.float64)
    ofs = 0
    for i in range(len(dims) - 1):
        fi, fo = dims[i], dims[i + 1]
        bound = math.sqrt(6.0 / (fi + fo))
        for k in range(fi * fo):
            params[ofs + k] = rng.uniform_in(-bound, bound)
        ofs += fi * fo + fo  # biases stay zero
    return params


def mlp_forward_batch(params: np.ndarray, layout: MlpLayout, inputs: np.ndarray) -> np.ndarray:
    """Forward pass on a (batch, input_dim) matrix; returns (batch, output_dim)."""
    if inputs.ndim != 2 or inputs.shape[1] != layout.input_dim:
        raise ConfigurationError(
            f"input batch has shape {inputs.shape}, layout needs (*, {layout.input_dim})"
        )
    _check_params(params, layout)
    layers = _layer_views(params, layout)
    h = inputs
    for i, (w, b) in enumerate(layers):
        z = h @ w.T + b
        h = np.tanh(z) if i < len(layers) - 1 else z
    return h


def mlp_forward(params: np.ndarray, layout: MlpLayout, x: np.ndarray) -> np.ndarray:
    """Single-vector forward pass (routed through the batch path)."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (layout.input_dim,):
        raise ConfigurationError(f"input has shape {x.shape}, layout needs ({layout.input_dim},)")
    return mlp_forward_batch(params, layout, x[None, :])[0]


def _forward_activations(
    params: np.ndarray, layout: MlpLayout, inputs: np.ndarray
) -> list[np.ndarray]:
    """Per-layer activations [input, h1, ..., output] for the backward pass."""
    layers = _layer_views(params, layout)
    acts = [inputs]
    h = inputs
    for i, (w, b) in enumerate(layers):
        z = h @ w.T + b
        h = np.tanh(z) if i < len(layers) - 1 else z
        acts.append(h)
    return acts


def mlp_backward_batch(
    params: np.ndarray, layout: MlpLayout, inputs: np.ndarray, output_grads: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Reverse-mode gradient of sum_batch(output . output_grad) w.r.t. params and inputs.

    Returns (param_grad, input_grads) with param_grad flat in layout order and
    input_grads of shape (batch, input_dim).
    """
    if output_grads.shape != (inputs.shape[0], layout.output_dim):
        raise ConfigurationError(
            f"output_grads shape {output_grads.shape} does not match "
            f"({inputs.shape[0]}, {layout.output_dim})"
        )
    _check_params(params, layout)
    layers = _layer_views(params, layout)
    acts = _forward_activations(params, layout, inputs)

    param_grad = np.zeros_like(params)
    grad_views = _layer_views(param_grad, layout)

    delta = output_grads
    for i in range(len(layers) - 1, -1, -1):
        w, _ = layers[i]
        gw, gb = grad_views[i]
        if i < len(layers) - 1:
            delta = delta * (1.0 - acts[i + 1] ** 2)  # tanh'(z) = 1 - tanh(z)^2
        gw += delta.T @ acts[i]
        gb += delta.sum(axis=0)
        delta = delta @ w
    return param_grad, delta


def mlp_backward(
    params: np.ndarray, layout: MlpLayout, x: np.ndarray, output_grad: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Single-vector exact gradient of (output . output_grad) w.r.t. params and input."""
    x = np.asarray(x, dtype=np.float64)
    output_grad = np.asarray(output_grad, dtype=np.float64)
    if x.shape != (layout.input_dim,):
        raise ConfigurationError(f"input has shape {x.shape}, layout needs ({layout.input_dim},)")
    param_grad, input_grads = mlp_backward_batch(params, layout, x[None, :], output_grad[None, :])
    return param_grad, input_grads[0]


def finite_diff_grad(
    f: Callable[[np.ndarray], float], params: np.ndarray, eps: float
) -> np.ndarray:
    """Central-difference gradient oracle: (f(p+eps*e_i) - f(p-eps*e_i)) / 2eps.

    Slow by design; only ever calls f, never the analytic backward path.
    """
    if eps <= 0:
        raise ConfigurationError("eps must be > 0")
    grad = np.zeros_like(params)
    for i in range(len(params)):
        p_hi = params.copy()
        p_lo = params.copy()
        p_hi[i] += eps
        p_lo[i] -= eps
        grad[i] = (f(p_hi) - f(p_lo)) / (2.0 * eps)
    return grad


@dataclass(frozen=True)
class AdamState:
    """First/second moment accumulators plus the bias-correction step count."""

    m: np.ndarray
    v: np.ndarray
    t: int


def init_adam(n_params: int) -> AdamState:
    return AdamState(m=np.zeros(n_params), v=np.zeros(n_params), t=0)


def adam_step(
    state: AdamState,
    params: np.ndarray,
    grad: np.ndarray,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> tuple[np.ndarray, AdamState]:
    """One bias-corrected adaptive-moment update; returns (new params, new state)."""
    if params.shape != grad.shape or state.m.shape != params.shape:
        raise ConfigurationError("params, grad and Adam state must share one shape")
    if lr <= 0 or not (0 <= beta1 < 1) or not (0 <= beta2 < 1):
        raise ConfigurationError("need lr > 0 and 0 <= beta1, beta2 < 1")
    if not np.all(np.isfinite(grad)):
        raise NonFiniteUpdateError("gradient contains non-finite entries; update rejected")
    t = state.t + 1
    m = beta1 * state.m + (1.0 - beta1) * grad
    v = beta2 * state.v + (1.0 - beta2) * grad * grad
    m_hat = m / (1.0 - beta1**t)
    v_hat = v / (1.0 - beta2**t)
    new_params = params - lr * m_hat / (np.sqrt(v_hat) + eps)
    return new_params, AdamState(m=m, v=v, t=t)
