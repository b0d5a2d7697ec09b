"""The iteration loop that owns the learner: broadcast a snapshot, gather the
sample quota from the experience queue, run the update, record the wall-clock
split between collection and learning.

One orchestrator control flow is the sole consumer of the experience queue and
the sole producer of snapshots and control signals. Collection time runs from
the BEGIN(v) broadcast to the moment the quota of version-v samples is in
hand; learning time brackets the update call only. Deterministic evaluation
after each update is excluded from both.
"""

from __future__ import annotations

import math
import multiprocessing as mp
import queue
import time
from collections import defaultdict
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Sequence, TextIO

import numpy as np

from .envs import EnvSpec, env_reset, env_step, make_env
from .errors import ConfigurationError, ProtocolError
from .learner import (
    ExperienceBatch,
    PpoHyper,
    Segment,
    UpdateStats,
    default_hyper,
    ppo_update,
)
from .nn_core import EVAL_STREAM, LEARNER_STREAM, derive_worker_rng, init_adam
from .policy import (
    ParameterSnapshot,
    encode_snapshot,
    init_policy,
    mode_action,
    policy_forward,
)
from .sampler import (
    DEFAULT_CHUNK_CAP,
    ControlSignal,
    ExperienceChunk,
    Mailbox,
    SignalKind,
    spawned_worker,
)

RUN_CSV_HEADER = (
    "iter,version,samples,collect_s,learn_s,dropped_stale,"
    "mean_return,std_return,eval_return,loss,vf_loss,entropy,approx_kl,clip_frac,grad_norm"
)


@dataclass(frozen=True)
class RunConfig:
    env_spec: EnvSpec
    n_workers: int = 1
    samples_per_iter: int = 4000
    n_iters: int = 50
    hyper: PpoHyper | None = None
    base_seed: int = 0
    chunk_cap: int = DEFAULT_CHUNK_CAP
    eval_episodes: int = 20
    hidden_dims: tuple[int, ...] = (64, 64)
    out_dir: Path | None = None
    checkpoint_every: int = 10
    stop_at_eval_return: float | None = None

    def __post_init__(self) -> None:
        if self.n_workers < 1:
            raise ConfigurationError("n_workers must be >= 1")
        if self.n_iters < 1:
            raise ConfigurationError("n_iters must be >= 1")
        if self.chunk_cap < 1:
            raise ConfigurationError("chunk_cap must be >= 1")
        if self.samples_per_iter < self.chunk_cap:
            raise ConfigurationError("samples_per_iter must be >= chunk_cap")
        if self.eval_episodes < 0:
            raise ConfigurationError("eval_episodes must be >= 0")

    def resolved_hyper(self) -> PpoHyper:
        return self.hyper if self.hyper is not None else default_hyper(self.env_spec.kind)


@dataclass(frozen=True)
class TimingRecord:
    iteration: int
    collect_time_s: float
    learn_time_s: float
    samples_gathered: int
    chunks_dropped_stale: int


@dataclass(frozen=True)
class IterationLog:
    iteration: int
    version: int
    timing: TimingRecord
    stats: UpdateStats
    mean_return: float
    std_return: float
    episodes_completed: int
    eval_return: float


@dataclass
class RunLog:
    config: RunConfig
    iterations: list[IterationLog]
    final_snapshot: ParameterSnapshot
    csv_path: Path | None = None
    checkpoint_path: Path | None = None


def broadcast(snap: ParameterSnapshot, mailboxes: Sequence[Mailbox]) -> None:
    """Post one encoded snapshot to every worker mailbox (latest-wins slots)."""
    payload = encode_snapshot(snap)
    for mailbox in mailboxes:
        mailbox.post(payload)


class WorkerPool:
    """Spawned sampler processes plus their queues.

    Mailboxes are primed before the processes start. Control signals are
    broadcast: every worker sees every signal, in order. The experience queue
    is bounded at 4 chunks per worker; producers block when it fills.
    """

    def __init__(
        self,
        env_spec: EnvSpec,
        n_workers: int,
        base_seed: int,
        chunk_cap: int = DEFAULT_CHUNK_CAP,
    ):
        self._ctx = mp.get_context("spawn")
        self.n_workers = n_workers
        self.experience_queue = self._ctx.Queue(maxsize=4 * n_workers)
        self.mailboxes = [Mailbox(self._ctx.Queue()) for _ in range(n_workers)]
        self.control_queues = [self._ctx.Queue() for _ in range(n_workers)]
        self._procs: list[mp.process.BaseProcess] = []
        self._env_spec = env_spec
        self._base_seed = base_seed
        self._chunk_cap = chunk_cap
        self._last_begin = -1
        self._closed = False

    def prime(self, snap: ParameterSnapshot) -> None:
        if snap.version != 0:
            raise ProtocolError(f"priming snapshot must be version 0, got {snap.version}")
        broadcast(snap, self.mailboxes)

    def start(self) -> None:
        for wid in range(self.n_workers):
            proc = self._ctx.Process(
                target=spawned_worker,
                args=(
                    wid,
                    self._env_spec,
                    self.mailboxes[wid],
                    self.experience_queue,
                    self.control_queues[wid],
                    self._base_seed,
                    self._chunk_cap,
                ),
                daemon=True,
            )
            proc.start()
            self._procs.append(proc)

    def _signal_all(self, signal: ControlSignal) -> None:
        for cq in self.control_queues:
            cq.put(signal)

    def post_snapshot(self, snap: ParameterSnapshot) -> None:
        if snap.version != self._last_begin + 1:
            raise ProtocolError(
                f"broadcast version {snap.version} must follow {self._last_begin}"
            )
        broadcast(snap, self.mailboxes)

    def begin(self, version: int) -> None:
        if version != self._last_begin + 1:
            raise ProtocolError(f"BEGIN({version}) must follow BEGIN({self._last_begin})")
        self._last_begin = version
        self._signal_all(ControlSignal(SignalKind.BEGIN, version))

    def stop_iter(self, version: int) -> None:
        self._signal_all(ControlSignal(SignalKind.STOP_ITER, version))

    def all_alive(self) -> bool:
        return all(p.is_alive() for p in self._procs)

    def shutdown(self, timeout_s: float = 10.0) -> None:
        """Broadcast SHUTDOWN, drain the experience queue so blocked producers
        can exit, join everyone; force-terminate stragglers. Idempotent."""
        if self._closed:
            return
        self._closed = True
        try:
            self._signal_all(ControlSignal(SignalKind.SHUTDOWN))
        except (OSError, ValueError):
            pass
        deadline = time.monotonic() + timeout_s
        while any(p.is_alive() for p in self._procs) and time.monotonic() < deadline:
            try:
                self.experience_queue.get(timeout=0.05)
            except queue.Empty:
                pass
        for p in self._procs:
            p.join(timeout=max(0.0, deadline - time.monotonic()))
        for p in self._procs:
            if p.is_alive():
                print(f"worker {p.name} did not exit within {timeout_s}s; terminating")
                p.terminate()
                p.join(timeout=5.0)
        # Drain leftovers so queue feeder threads can flush and exit.
        while True:
            try:
                self.experience_queue.get_nowait()
            except (queue.Empty, OSError, ValueError):
                break
        self.experience_queue.close()
        self.experience_queue.cancel_join_thread()
        for mailbox in self.mailboxes:
            mailbox.close()
        for cq in self.control_queues:
            cq.close()
            cq.cancel_join_thread()


@dataclass
class GatherStats:
    samples_gathered: int
    chunks_dropped_stale: int


def gather(
    version: int,
    quota: int,
    experience_queue,
    alive: Callable[[], bool] | None = None,
    poll_s: float = 0.2,
) -> tuple[list[ExperienceChunk], GatherStats]:
    """Accept version-matching chunks until `quota` transitions are in hand.

    Chunks tagged with an older version (overshoot from the previous iteration)
    are dropped and counted; a chunk from the future is a protocol violation.
    Arrival order is preserved, which keeps per-worker chunk order intact.
    """
    chunks: list[ExperienceChunk] = []
    total = 0
    dropped = 0
    while total < quota:
        try:
            chunk = experience_queue.get(timeout=poll_s)
        except queue.Empty:
            if alive is not None and not alive():
                raise ProtocolError("workers exited while gathering; aborting run")
            continue
        if chunk.version < version:
            dropped += 1
            continue
        if chunk.version > version:
            raise ProtocolError(
                f"received chunk for version {chunk.version} while gathering {version}"
            )
        chunks.append(chunk)
        total += len(chunk.transitions)
    return chunks, GatherStats(samples_gathered=total, chunks_dropped_stale=dropped)


def batch_from_chunks(chunks: Iterable[ExperienceChunk]) -> ExperienceBatch:
    """Concatenate chunks (arrival order) into one version-pure batch."""
    chunks = list(chunks)
    if not chunks:
        raise ConfigurationError("cannot build a batch from zero chunks")
    version = chunks[0].version
    transitions = []
    segments: list[Segment] = []
    for chunk in chunks:
        if chunk.version != version:
            raise ProtocolError("chunks with mixed versions in one batch")
        offset = len(transitions)
        transitions.extend(chunk.transitions)
        segments.extend(
            Segment(s.start + offset, s.end + offset, s.final_obs) for s in chunk.segments
        )
    return ExperienceBatch.from_transitions(transitions, segments, version)


def completed_episode_returns(chunks: Iterable[ExperienceChunk]) -> list[float]:
    """Returns of episodes that completed inside this batch; partial episodes
    at the iteration boundary are not counted."""
    acc: dict[int, float] = defaultdict(float)
    out: list[float] = []
    for chunk in chunks:
        for tr in chunk.transitions:
            acc[chunk.worker_id] += tr.reward
            if tr.terminated or tr.time_limit:
                out.append(acc[chunk.worker_id])
                acc[chunk.worker_id] = 0.0
    return out


def evaluate_policy(snap, env_spec: EnvSpec, episodes: int, rng) -> float:
    """Mean return of the deterministic (mode-action) policy over fresh episodes."""
    if episodes == 0:
        return float("nan")
    env = make_env(env_spec)
    total = 0.0
    for _ in range(episodes):
        obs = env_reset(env, rng)
        while True:
            action = mode_action(policy_forward(snap, obs))
            result = env_step(env, action)
            total += result.reward
            if result.terminated or result.time_limit:
                break
            obs = result.obs
    return total / episodes


def _fmt(x: float) -> str:
    return repr(float(x))


def format_run_csv_row(log: IterationLog) -> str:
    t, s = log.timing, log.stats
    fields = [
        str(log.iteration),
        str(log.version),
        str(t.samples_gathered),
        _fmt(t.collect_time_s),
        _fmt(t.learn_time_s),
        str(t.chunks_dropped_stale),
        _fmt(log.mean_return),
        _fmt(log.std_return),
        _fmt(log.eval_return),
        _fmt(s.total_loss),
        _fmt(s.value_loss),
        _fmt(s.entropy),
        _fmt(s.approx_kl),
        _fmt(s.clip_frac),
        _fmt(s.grad_norm),
    ]
    return ",".join(fields)


def _echo_config(config: RunConfig, path: Path) -> None:
    hyper = config.resolved_hyper()
    spec = config.env_spec
    lines = [
        "# run configuration echo",
        "# note: runs with different n_workers are not sample-identical (interleaving differs)",
        f"env={spec.kind}",
        f"workers={config.n_workers}",
        f"samples_per_iter={config.samples_per_iter}",
        f"iters={config.n_iters}",
        f"seed={config.base_seed}",
        f"chunk_cap={config.chunk_cap}",
        f"eval_episodes={config.eval_episodes}",
        f"hidden={','.join(str(h) for h in config.hidden_dims)}",
    ]
    if spec.kind == "busy":
        lines += [
            f"busy.step_cost_us={spec.step_cost_us}",
            f"busy.episode_len={spec.episode_len}",
            f"busy.obs_dim={spec.obs_dim}",
        ]
    lines += [
        f"hyper.gamma={hyper.gamma}",
        f"hyper.gae_lambda={hyper.gae_lambda}",
        f"hyper.clip_eps={hyper.clip_eps}",
        f"hyper.epochs={hyper.epochs}",
        f"hyper.minibatch_size={hyper.minibatch_size}",
        f"hyper.lr={hyper.lr}",
        f"hyper.vf_coef={hyper.vf_coef}",
        f"hyper.ent_coef={hyper.ent_coef}",
        f"hyper.max_grad_norm={hyper.max_grad_norm}",
    ]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def train(
    config: RunConfig,
    on_iteration: Callable[[IterationLog], None] | None = None,
) -> RunLog:
    """Run the full loop: spawn workers, prime the mailboxes with the version-0
    snapshot, then per iteration broadcast -> gather -> stop -> update -> log.

    Rows flush to the run CSV as they complete. A checkpoint (encoded snapshot)
    is written every `checkpoint_every` iterations and at exit. Worker death
    aborts the run with a diagnostic after the queues are drained.
    """
    hyper = config.resolved_hyper()
    snap = init_policy(config.env_spec, config.hidden_dims, config.base_seed)
    adam = init_adam(
        snap.policy_layout.param_count
        + snap.value_layout.param_count
        + (len(snap.log_std) if snap.log_std is not None else 0)
    )
    learner_rng = derive_worker_rng(config.base_seed, LEARNER_STREAM)
    eval_rng = derive_worker_rng(config.base_seed, EVAL_STREAM)

    csv_file: TextIO | None = None
    csv_path = checkpoint_path = None
    if config.out_dir is not None:
        out = Path(config.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        _echo_config(config, out / "config.txt")
        csv_path = out / "run.csv"
        checkpoint_path = out / "checkpoint.bin"
        csv_file = open(csv_path, "w", encoding="utf-8", newline="\n")
        csv_file.write(RUN_CSV_HEADER + "\n")
        csv_file.flush()

    pool = WorkerPool(config.env_spec, config.n_workers, config.base_seed, config.chunk_cap)
    logs: list[IterationLog] = []
    try:
        pool.prime(snap)
        pool.start()
        for it in range(config.n_iters):
            if it > 0:
                pool.post_snapshot(snap)
            t0 = time.perf_counter()
            pool.begin(snap.version)
            chunks, gstats = gather(
                snap.version, config.samples_per_iter, pool.experience_queue,
                alive=pool.all_alive,
            )
            collect_s = time.perf_counter() - t0
            pool.stop_iter(snap.version)

            batch = batch_from_chunks(chunks)
            episode_returns = completed_episode_returns(chunks)
            t1 = time.perf_counter()
            snap, adam, stats = ppo_update(snap, batch, hyper, adam, learner_rng)
            learn_s = time.perf_counter() - t1

            eval_return = evaluate_policy(snap, config.env_spec, config.eval_episodes, eval_rng)
            mean_ret = float(np.mean(episode_returns)) if episode_returns else float("nan")
            std_ret = float(np.std(episode_returns)) if episode_returns else float("nan")
            log = IterationLog(
                iteration=it,
                version=batch.version,
                timing=TimingRecord(
                    iteration=it,
                    collect_time_s=collect_s,
                    learn_time_s=learn_s,
                    samples_gathered=gstats.samples_gathered,
                    chunks_dropped_stale=gstats.chunks_dropped_stale,
                ),
                stats=stats,
                mean_return=mean_ret,
                std_return=std_ret,
                episodes_completed=len(episode_returns),
                eval_return=eval_return,
            )
            logs.append(log)
            if csv_file is not None:
                csv_file.write(format_run_csv_row(log) + "\n")
                csv_file.flush()
            if on_iteration is not None:
                on_iteration(log)
            if checkpoint_path is not None and (it + 1) % config.checkpoint_every == 0:
                checkpoint_path.write_bytes(encode_snapshot(snap))
            if (
                config.stop_at_eval_return is not None
                and not math.isnan(eval_return)
                and eval_return >= config.stop_at_eval_return
            ):
                break
    finally:
        pool.shutdown()
        if csv_file is not None:
            csv_file.close()
    if checkpoint_path is not None:
        checkpoint_path.write_bytes(encode_snapshot(snap))
    return RunLog(
        config=config,
        iterations=logs,
        final_snapshot=snap,
        csv_path=csv_path,
        checkpoint_path=checkpoint_path,
    )
