"""Policy and value heads over the MLP kernel, plus the versioned parameter
snapshot that travels on the policy queue.

Discrete action spaces get a categorical head (logits), continuous ones a
diagonal Gaussian with a trainable state-independent log-std. Policy and value
networks are separate. Snapshots are immutable and encode to a stable
little-endian binary format for queue transport and checkpoints.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, replace

import numpy as np

from .envs import ContinuousSpace, DiscreteSpace, EnvSpec
from .errors import ConfigurationError, SnapshotDecodeError
from .nn_core import (
    INIT_STREAM,
    MlpLayout,
    Rng,
    derive_worker_rng,
    init_mlp_params,
    mlp_forward,
    mlp_forward_batch,
)

LOG_STD_INIT = -0.5
_LOG_2PI = math.log(2.0 * math.pi)

_MAGIC = b"PSNP"
_FORMAT_VERSION = 1


@dataclass(frozen=True, eq=False)
class ParameterSnapshot:
    """Flat policy/value parameters plus a monotonically increasing version."""

    version: int
    policy_layout: MlpLayout
    value_layout: MlpLayout
    policy_params: np.ndarray
    value_params: np.ndarray
    log_std: np.ndarray | None  # continuous heads only

    @property
    def is_discrete(self) -> bool:
        return self.log_std is None

    def advance(
        self,
        policy_params: np.ndarray | None = None,
        value_params: np.ndarray | None = None,
        log_std: np.ndarray | None = None,
    ) -> "ParameterSnapshot":
        """Next-version snapshot; omitted fields carry over unchanged."""
        return replace(
            self,
            version=self.version + 1,
            policy_params=self.policy_params if policy_params is None else policy_params,
            value_params=self.value_params if value_params is None else value_params,
            log_std=self.log_std if log_std is None else log_std,
        )


@dataclass(frozen=True, eq=False)
class DistParams:
    """Either categorical logits or a diagonal Gaussian (mean, log_std)."""

    logits: np.ndarray | None = None
    mean: np.ndarray | None = None
    log_std: np.ndarray | None = None

    @property
    def is_discrete(self) -> bool:
        return self.logits is not None


def init_policy(env_spec: EnvSpec, hidden_dims: tuple[int, ...], seed: int) -> ParameterSnapshot:
    """Version-0 snapshot with scaled-uniform weights drawn from the init stream."""
    if not hidden_dims:
        raise ConfigurationError("hidden_dims must be nonempty")
    space = env_spec.action_space
    act_dim = space.n if isinstance(space, DiscreteSpace) else space.dim
    policy_layout = MlpLayout(env_spec.obs_dim, tuple(hidden_dims), act_dim)
    value_layout = MlpLayout(env_spec.obs_dim, tuple(hidden_dims), 1)
    rng = derive_worker_rng(seed, INIT_STREAM)
    policy_params = init_mlp_params(policy_layout, rng)
    value_params = init_mlp_params(value_layout, rng)
    log_std = None
    if isinstance(space, ContinuousSpace):
        log_std = np.full(space.dim, LOG_STD_INIT)
    return ParameterSnapshot(
        version=0,
        policy_layout=policy_layout,
        value_layout=value_layout,
        policy_params=policy_params,
        value_params=value_params,
        log_std=log_std,
    )


def policy_forward(snap: ParameterSnapshot, obs: np.ndarray) -> DistParams:
    out = mlp_forward(snap.policy_params, snap.policy_layout, obs)
    if snap.is_discrete:
        return DistParams(logits=out)
    return DistParams(mean=out, log_std=snap.log_std)


def policy_forward_batch(snap: ParameterSnapshot, obs: np.ndarray) -> np.ndarray:
    """Raw head outputs for a (batch, obs_dim) matrix: logits or means."""
    return mlp_forward_batch(snap.policy_params, snap.policy_layout, obs)


def value_of(snap: ParameterSnapshot, obs: np.ndarray) -> float:
    return float(mlp_forward(snap.value_params, snap.value_layout, obs)[0])


def value_of_batch(snap: ParameterSnapshot, obs: np.ndarray) -> np.ndarray:
    return mlp_forward_batch(snap.value_params, snap.value_layout, obs)[:, 0]


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - np.max(logits)
    return shifted - math.log(float(np.sum(np.exp(shifted))))


def log_prob(dist: DistParams, action: int | np.ndarray) -> float:
    if dist.is_discrete:
        return float(_log_softmax(dist.logits)[int(action)])
    action = np.asarray(action, dtype=np.float64)
    inv_var = np.exp(-2.0 * dist.log_std)
    sq = (action - dist.mean) ** 2
    return float(np.sum(-0.5 * sq * inv_var - dist.log_std - 0.5 * _LOG_2PI))


def entropy(dist: DistParams) -> float:
    if dist.is_discrete:
        logp = _log_softmax(dist.logits)
        return float(-np.sum(np.exp(logp) * logp))
    return float(np.sum(dist.log_std + 0.5 * (_LOG_2PI + 1.0)))


def sample_action(dist: DistParams, rng: Rng) -> tuple[int | np.ndarray, float]:
    """Draw an action and its exact log-probability under `dist`.

    Discrete sampling inverts the softmax CDF on one uniform; continuous
    sampling is mean + exp(log_std) * z with z from Box-Muller. The returned
    logprob is computed by log_prob on the drawn action, so the two always
    agree bit-exactly.
    """
    if dist.is_discrete:
        logp = _log_softmax(dist.logits)
        probs = np.exp(logp)
        u = rng.uniform()
        acc = 0.0
        action = len(probs) - 1
        for i, p in enumerate(probs):
            acc += p
            if u < acc:
                action = i
                break
        return action, log_prob(dist, action)
    z = np.array([rng.normal() for _ in range(len(dist.mean))])
    action = dist.mean + np.exp(dist.log_std) * z
    return action, log_prob(dist, action)


def mode_action(dist: DistParams) -> int | np.ndarray:
    """Deterministic action for evaluation: argmax logits / Gaussian mean."""
    if dist.is_discrete:
        return int(np.argmax(dist.logits))
    return dist.mean.copy()


# --- snapshot transport ------------------------------------------------------


def _pack_layout(layout: MlpLayout) -> bytes:
    dims = layout.dims
    return struct.pack(f"<I{len(dims)}I", len(dims), *dims)


def encode_snapshot(snap: ParameterSnapshot) -> bytes:
    """Header (magic, format version, flags, snapshot version, layouts) followed
    by the little-endian float64 parameter arrays."""
    has_log_std = snap.log_std is not None
    parts = [
        _MAGIC,
        struct.pack("<BB", _FORMAT_VERSION, 1 if has_log_std else 0),
        struct.pack("<Q", snap.version),
        _pack_layout(snap.policy_layout),
        _pack_layout(snap.value_layout),
        struct.pack("<I", len(snap.log_std) if has_log_std else 0),
        np.ascontiguousarray(snap.policy_params, dtype="<f8").tobytes(),
        np.ascontiguousarray(snap.value_params, dtype="<f8").tobytes(),
    ]
    if has_log_std:
        parts.append(np.ascontiguousarray(snap.log_std, dtype="<f8").tobytes())
    return b"".join(parts)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise SnapshotDecodeError(
                f"snapshot buffer truncated: needed {self.pos + n} bytes, have {len(self.buf)}"
            )
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]


def decode_snapshot(buf: bytes) -> ParameterSnapshot:
    """Inverse of encode_snapshot. Raises SnapshotDecodeError on any malformed
    buffer rather than crashing or returning garbage."""
    r = _Reader(buf)
    if r.take(4) != _MAGIC:
        raise SnapshotDecodeError("bad magic; not a snapshot buffer")
    fmt, flags = struct.unpack("<BB", r.take(2))
    if fmt != _FORMAT_VERSION:
        raise SnapshotDecodeError(f"unsupported snapshot format version {fmt}")
    version = struct.unpack("<Q", r.take(8))[0]

    def read_layout() -> MlpLayout:
        n = r.u32()
        if n < 2 or n > 64:
            raise SnapshotDecodeError(f"implausible layout dim count {n}")
        dims = struct.unpack(f"<{n}I", r.take(4 * n))
        try:
            return MlpLayout(dims[0], tuple(dims[1:-1]), dims[-1])
        except ConfigurationError as exc:
            raise SnapshotDecodeError(f"invalid layout in snapshot: {exc}") from exc

    policy_layout = read_layout()
    value_layout = read_layout()
    if value_layout.output_dim != 1:
        raise SnapshotDecodeError("value layout must have output_dim 1")
    log_std_len = r.u32()
    if (flags & 1) == 0 and log_std_len != 0:
        raise SnapshotDecodeError("log_std length set but flag says discrete")

    def read_array(n: int) -> np.ndarray:
        return np.frombuffer(r.take(8 * n), dtype="<f8").astype(np.float64)

    policy_params = read_array(policy_layout.param_count)
    value_params = read_array(value_layout.param_count)
    log_std = read_array(log_std_len) if (flags & 1) else None
    if r.pos != len(buf):
        raise SnapshotDecodeError(f"{len(buf) - r.pos} trailing bytes after snapshot payload")
    for arr in (policy_params, value_params) + ((log_std,) if log_std is not None else ()):
        if not np.all(np.isfinite(arr)):
            raise SnapshotDecodeError("snapshot contains non-finite parameters")
    return ParameterSnapshot(
        version=version,
        policy_layout=policy_layout,
        value_layout=value_layout,
        policy_params=policy_params,
        value_params=value_params,
        log_std=log_std,
    )
