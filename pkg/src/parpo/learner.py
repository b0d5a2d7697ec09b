"""On-policy update path: generalized advantage estimation over trajectory
segments and the clipped-surrogate policy update with hand-derived gradients.

The learner recomputes state values itself at update time (samplers only ship
observations, actions, rewards and sampling log-probs). Truncated segments
(time limit or iteration cutoff) bootstrap from the value of their final
observation; truly terminated segments bootstrap zero.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ConfigurationError, NonFiniteUpdateError, ProtocolError
from .nn_core import AdamState, Rng, adam_step, mlp_backward_batch, mlp_forward_batch
from .policy import ParameterSnapshot, value_of

_LOG_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True, eq=False)
class Transition:
    """One environment step as sampled by a worker."""

    obs: np.ndarray
    action: int | np.ndarray
    reward: float
    terminated: bool
    time_limit: bool
    logprob_old: float


@dataclass(frozen=True, eq=False)
class Segment:
    """Contiguous transitions from one episode (or a truncated piece of one).

    `final_obs` is the observation following the last transition, present
    whenever the segment did not end in true termination; it is what the
    learner bootstraps from.
    """

    start: int
    end: int
    final_obs: np.ndarray | None


@dataclass(eq=False)
class ExperienceBatch:
    """Column-major view of one iteration's transitions plus segment structure."""

    version: int
    obs: np.ndarray  # (n, obs_dim)
    actions: np.ndarray  # (n,) int64 or (n, act_dim) float64
    rewards: np.ndarray
    terminated: np.ndarray  # bool
    time_limit: np.ndarray  # bool
    logprob_old: np.ndarray
    segments: list[Segment]

    def __len__(self) -> int:
        return len(self.rewards)

    @classmethod
    def from_transitions(
        cls, transitions: list[Transition], segments: list[Segment], version: int
    ) -> "ExperienceBatch":
        if not transitions:
            raise ConfigurationError("experience batch must contain at least one transition")
        first = transitions[0].action
        if isinstance(first, (int, np.integer)):
            actions = np.array([int(t.action) for t in transitions], dtype=np.int64)
        else:
            actions = np.stack([np.asarray(t.action, dtype=np.float64) for t in transitions])
        return cls(
            version=version,
            obs=np.stack([t.obs for t in transitions]),
            actions=actions,
            rewards=np.array([t.reward for t in transitions]),
            terminated=np.array([t.terminated for t in transitions], dtype=bool),
            time_limit=np.array([t.time_limit for t in transitions], dtype=bool),
            logprob_old=np.array([t.logprob_old for t in transitions]),
            segments=list(segments),
        )


@dataclass(frozen=True)
class PpoHyper:
    """Clipped-surrogate hyperparameters. Defaults are the declared baseline and
    get echoed into every run log."""

    gamma: float = 0.99
    gae_lambda: float = 0.95
    clip_eps: float = 0.2
    epochs: int = 10
    minibatch_size: int = 64
    lr: float = 3e-4
    vf_coef: float = 0.5
    ent_coef: float = 0.0
    max_grad_norm: float = 0.5

    def __post_init__(self) -> None:
        if not 0.0 < self.gamma <= 1.0:
            raise ConfigurationError("gamma must be in (0, 1]")
        if not 0.0 <= self.gae_lambda <= 1.0:
            raise ConfigurationError("gae_lambda must be in [0, 1]")
        if self.clip_eps <= 0.0:
            raise ConfigurationError("clip_eps must be > 0")
        if self.epochs < 0 or self.minibatch_size < 1:
            raise ConfigurationError("epochs must be >= 0 and minibatch_size >= 1")
        if self.lr <= 0.0 or self.max_grad_norm <= 0.0:
            raise ConfigurationError("lr and max_grad_norm must be > 0")


def default_hyper(env_kind: str) -> PpoHyper:
    """Baseline hyperparameters; pendulum gets a small entropy bonus."""
    return PpoHyper(ent_coef=0.01 if env_kind == "pendulum" else 0.0)


@dataclass
class UpdateStats:
    """Averages over all minibatch steps of one update."""

    surrogate_loss: float = 0.0
    value_loss: float = 0.0
    entropy: float = 0.0
    approx_kl: float = 0.0  # mean(logprob_old - logprob_new)
    clip_frac: float = 0.0
    grad_norm: float = 0.0
    total_loss: float = 0.0
    skipped: bool = False


def compute_gae(
    rewards: np.ndarray,
    values: np.ndarray,
    terminated_flags: np.ndarray,
    bootstrap_value: float,
    gamma: float,
    lam: float,
) -> tuple[np.ndarray, np.ndarray]:
    """Advantages and returns for one segment.

    delta_t = r_t + gamma * V_{t+1} * (1 - term_t) - V_t, with V_T taken to be
    `bootstrap_value`; A_t = delta_t + gamma * lam * (1 - term_t) * A_{t+1};
    returns_t = A_t + V_t.
    """
    rewards = np.asarray(rewards, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    terminated_flags = np.asarray(terminated_flags, dtype=bool)
    n = len(rewards)
    if n < 1 or len(values) != n or len(terminated_flags) != n:
        raise ConfigurationError("rewards, values and terminated flags must share length >= 1")
    advantages = np.zeros(n)
    next_adv = 0.0
    next_value = float(bootstrap_value)
    for t in range(n - 1, -1, -1):
        nonterminal = 0.0 if terminated_flags[t] else 1.0
        delta = rewards[t] + gamma * next_value * nonterminal - values[t]
        next_adv = delta + gamma * lam * nonterminal * next_adv
        advantages[t] = next_adv
        next_value = values[t]
    return advantages, advantages + values


def normalize_advantages(advantages: np.ndarray) -> np.ndarray:
    """Batch-wide standardization with population std; a size-1 batch maps to [0]."""
    advantages = np.asarray(advantages, dtype=np.float64)
    if len(advantages) == 1:
        return np.zeros(1)
    mean = float(np.mean(advantages))
    std = float(np.std(advantages))
    return (advantages - mean) / (std + 1e-8)


@dataclass(frozen=True, eq=False)
class Minibatch:
    """Slice of an iteration batch, advantages already normalized batch-wide."""

    obs: np.ndarray
    actions: np.ndarray
    logprob_old: np.ndarray
    advantages: np.ndarray
    returns: np.ndarray

    def __len__(self) -> int:
        return len(self.returns)


def _pack_theta(snap: ParameterSnapshot) -> np.ndarray:
    parts = [snap.policy_params, snap.value_params]
    if snap.log_std is not None:
        parts.append(snap.log_std)
    return np.concatenate(parts)


def _unpack_theta(snap: ParameterSnapshot, theta: np.ndarray) -> ParameterSnapshot:
    """Same-version snapshot with parameters replaced from the flat vector."""
    np_pol = snap.policy_layout.param_count
    np_val = snap.value_layout.param_count
    policy = theta[:np_pol]
    value = theta[np_pol : np_pol + np_val]
    log_std = theta[np_pol + np_val :] if snap.log_std is not None else None
    return replace(snap, policy_params=policy, value_params=value, log_std=log_std)


def ppo_loss_and_grad(
    snap: ParameterSnapshot, minibatch: Minibatch, hyper: PpoHyper
) -> tuple[float, np.ndarray, UpdateStats]:
    """Clipped-surrogate loss and its exact gradient w.r.t. the packed
    (policy, value, log_std) parameter vector.

    loss = -mean(min(rho*A, clip(rho, 1-eps, 1+eps)*A))
           + vf_coef * mean((V - returns)^2) - ent_coef * mean(entropy)
    with rho = exp(logprob_new - logprob_old).
    """
    n = len(minibatch)
    obs = minibatch.obs
    adv = minibatch.advantages
    lp_old = minibatch.logprob_old

    head = mlp_forward_batch(snap.policy_params, snap.policy_layout, obs)
    if snap.is_discrete:
        shifted = head - head.max(axis=1, keepdims=True)
        logp_all = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
        probs = np.exp(logp_all)
        actions = minibatch.actions.astype(np.int64)
        lp_new = logp_all[np.arange(n), actions]
        entropies = -(probs * logp_all).sum(axis=1)
    else:
        log_std = snap.log_std
        inv_var = np.exp(-2.0 * log_std)
        diff = minibatch.actions - head
        lp_new = (-0.5 * diff**2 * inv_var - log_std - 0.5 * _LOG_2PI).sum(axis=1)
        entropies = np.full(n, float(np.sum(log_std + 0.5 * (_LOG_2PI + 1.0))))

    ratio = np.exp(lp_new - lp_old)
    unclipped = ratio * adv
    clipped = np.clip(ratio, 1.0 - hyper.clip_eps, 1.0 + hyper.clip_eps) * adv
    surrogate = -float(np.mean(np.minimum(unclipped, clipped)))

    values = mlp_forward_batch(snap.value_params, snap.value_layout, obs)[:, 0]
    v_err = values - minibatch.returns
    value_loss = float(np.mean(v_err**2))
    mean_entropy = float(np.mean(entropies))
    loss = surrogate + hyper.vf_coef * value_loss - hyper.ent_coef * mean_entropy
    if not math.isfinite(loss):
        raise NonFiniteUpdateError(f"non-finite loss {loss!r}; aborting this update")

    # d(surrogate)/d(lp_new): active only where the unclipped branch is the min.
    use_unclipped = unclipped <= clipped
    g_lp = -(adv * ratio * use_unclipped) / n

    if snap.is_discrete:
        one_hot = np.zeros_like(probs)
        one_hot[np.arange(n), actions] = 1.0
        g_head = g_lp[:, None] * (one_hot - probs)
        # entropy term: dH/dlogits_j = -p_j (logp_j + H)
        g_head += (hyper.ent_coef / n) * probs * (logp_all + entropies[:, None])
        log_std_grad = None
    else:
        g_head = g_lp[:, None] * (diff * inv_var)
        g_log_std = (g_lp[:, None] * (diff**2 * inv_var - 1.0)).sum(axis=0)
        log_std_grad = g_log_std - hyper.ent_coef * np.ones(len(snap.log_std))
    policy_grad, _ = mlp_backward_batch(snap.policy_params, snap.policy_layout, obs, g_head)

    g_values = (2.0 * hyper.vf_coef / n) * v_err[:, None]
    value_grad, _ = mlp_backward_batch(snap.value_params, snap.value_layout, obs, g_values)

    parts = [policy_grad, value_grad]
    if log_std_grad is not None:
        parts.append(log_std_grad)
    grad = np.concatenate(parts)

    stats = UpdateStats(
        surrogate_loss=surrogate,
        value_loss=value_loss,
        entropy=mean_entropy,
        approx_kl=float(np.mean(lp_old - lp_new)),
        clip_frac=float(np.mean(np.abs(ratio - 1.0) > hyper.clip_eps)),
        grad_norm=float(np.linalg.norm(grad)),
        total_loss=loss,
    )
    return loss, grad, stats


def _segment_advantages(
    snap: ParameterSnapshot, batch: ExperienceBatch, hyper: PpoHyper
) -> tuple[np.ndarray, np.ndarray]:
    """Values recomputed under `snap`, then GAE per segment."""
    n = len(batch)
    advantages = np.empty(n)
    returns = np.empty(n)
    for seg in batch.segments:
        sl = slice(seg.start, seg.end)
        values = mlp_forward_batch(snap.value_params, snap.value_layout, batch.obs[sl])[:, 0]
        if batch.terminated[seg.end - 1]:
            bootstrap = 0.0
        else:
            if seg.final_obs is None:
                raise ConfigurationError("non-terminated segment is missing its final_obs")
            bootstrap = value_of(snap, seg.final_obs)
        adv, ret = compute_gae(
            batch.rewards[sl],
            values,
            batch.terminated[sl],
            bootstrap,
            hyper.gamma,
            hyper.gae_lambda,
        )
        advantages[sl] = adv
        returns[sl] = ret
    return advantages, returns


@dataclass
class _Aggregate:
    sums: dict = field(default_factory=dict)
    count: int = 0

    def add(self, stats: UpdateStats) -> None:
        for key in ("surrogate_loss", "value_loss", "entropy", "approx_kl", "clip_frac",
                    "grad_norm", "total_loss"):
            self.sums[key] = self.sums.get(key, 0.0) + getattr(stats, key)
        self.count += 1

    def mean(self) -> UpdateStats:
        if self.count == 0:
            return UpdateStats()
        return UpdateStats(**{k: v / self.count for k, v in self.sums.items()})


def ppo_update(
    snap: ParameterSnapshot,
    batch: ExperienceBatch,
    hyper: PpoHyper,
    adam: AdamState,
    rng: Rng,
) -> tuple[ParameterSnapshot, AdamState, UpdateStats]:
    """One full update: GAE, batch-wide advantage normalization, `epochs` passes
    of shuffled minibatches with global grad-norm clipping, version bump.

    A non-finite loss or gradient anywhere aborts the whole update: the entry
    parameters come back untouched (version still incremented) and the stats
    carry skipped=True.
    """
    if batch.version != snap.version:
        raise ProtocolError(
            f"batch version {batch.version} does not match snapshot version {snap.version}"
        )
    n = len(batch)
    if hyper.minibatch_size > n:
        raise ConfigurationError(
            f"minibatch_size {hyper.minibatch_size} exceeds batch size {n}"
        )

    advantages, returns = _segment_advantages(snap, batch, hyper)
    advantages = normalize_advantages(advantages)

    theta = _pack_theta(snap)
    cur_adam = adam
    cur_snap = snap
    agg = _Aggregate()
    indices = np.arange(n)
    try:
        for _ in range(hyper.epochs):
            rng.shuffle(indices)
            for start in range(0, n, hyper.minibatch_size):
                sel = indices[start : start + hyper.minibatch_size]
                mb = Minibatch(
                    obs=batch.obs[sel],
                    actions=batch.actions[sel],
                    logprob_old=batch.logprob_old[sel],
                    advantages=advantages[sel],
                    returns=returns[sel],
                )
                _, grad, stats = ppo_loss_and_grad(cur_snap, mb, hyper)
                norm = stats.grad_norm
                if norm > hyper.max_grad_norm:
                    grad = grad * (hyper.max_grad_norm / norm)
                theta, cur_adam = adam_step(cur_adam, theta, grad, hyper.lr)
                cur_snap = _unpack_theta(cur_snap, theta)
                agg.add(stats)
    except NonFiniteUpdateError:
        stats = agg.mean()
        stats.skipped = True
        return snap.advance(), adam, stats

    final = _unpack_theta(snap, theta)
    return final.advance(), cur_adam, agg.mean()
