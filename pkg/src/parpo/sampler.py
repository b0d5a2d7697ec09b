"""Rollout workers: each owns a private environment and RNG stream, samples
under the newest parameter snapshot, and ships bounded experience chunks to
the shared experience queue.

The control protocol a worker obeys, in order of arrival:
  BEGIN(v)     a new snapshot is available in the mailbox; start producing
  STOP_ITER(v) the iteration has enough samples; drop any partial episode and
               go idle until the next BEGIN
  SHUTDOWN     exit cleanly

Workers check the control queue between chunks, so stop latency is bounded by
one chunk. Nothing mutable is ever shared: all cross-worker effects flow
through the queues.
"""

from __future__ import annotations

import queue
import sys
from dataclasses import dataclass
from enum import Enum
from typing import NamedTuple

from .envs import EnvSpec, EnvState, env_obs, env_reset, env_step, make_env
from .errors import ConfigurationError, ProtocolError
from .learner import Segment, Transition
from .nn_core import Rng, derive_iteration_rng
from .policy import ParameterSnapshot, decode_snapshot, policy_forward, sample_action

DEFAULT_CHUNK_CAP = 256


class SignalKind(Enum):
    BEGIN = "begin"
    STOP_ITER = "stop_iter"
    SHUTDOWN = "shutdown"


class ControlSignal(NamedTuple):
    kind: SignalKind
    version: int = -1


@dataclass(frozen=True, eq=False)
class ExperienceChunk:
    """A bounded run of transitions from one worker, version-tagged.

    `complete` is true when the final segment closed its episode (termination
    or horizon); false when a partial episode continues past this chunk.
    """

    worker_id: int
    version: int
    transitions: list[Transition]
    segments: list[Segment]
    complete: bool


class Mailbox:
    """Latest-wins snapshot slot: readers drain the backing queue and keep only
    the newest post, so a worker never acts on an outdated snapshot when a
    newer one has been posted."""

    def __init__(self, backing_queue):
        self._q = backing_queue

    def post(self, payload: bytes) -> None:
        self._q.put(payload)

    def read_latest(self, timeout: float | None = None):
        item = self._q.get(timeout=timeout)
        while True:
            try:
                item = self._q.get_nowait()
            except queue.Empty:
                return item

    def close(self) -> None:
        if hasattr(self._q, "close"):
            self._q.close()
            self._q.cancel_join_thread()


def collect_chunk(
    env: EnvState,
    snap: ParameterSnapshot,
    rng: Rng,
    chunk_cap: int,
    worker_id: int = 0,
) -> ExperienceChunk:
    """Step the env for up to chunk_cap transitions, resetting on episode end.

    Log-probabilities are recorded at sampling time. If the chunk cuts an
    episode mid-flight, the open segment carries the next observation so the
    learner can bootstrap.
    """
    if chunk_cap < 1:
        raise ConfigurationError("chunk_cap must be >= 1")
    transitions: list[Transition] = []
    segments: list[Segment] = []
    seg_start = 0
    obs = env_reset(env, rng) if env.needs_reset else env_obs(env)
    for i in range(chunk_cap):
        dist = policy_forward(snap, obs)
        action, logprob = sample_action(dist, rng)
        result = env_step(env, action)
        transitions.append(
            Transition(
                obs=obs,
                action=action,
                reward=result.reward,
                terminated=result.terminated,
                time_limit=result.time_limit,
                logprob_old=logprob,
            )
        )
        if result.terminated or result.time_limit:
            segments.append(
                Segment(seg_start, i + 1, None if result.terminated else result.obs)
            )
            seg_start = i + 1
            if i + 1 < chunk_cap:
                obs = env_reset(env, rng)
        else:
            obs = result.obs
    complete = seg_start == chunk_cap
    if not complete:
        segments.append(Segment(seg_start, chunk_cap, obs))
    return ExperienceChunk(
        worker_id=worker_id,
        version=snap.version,
        transitions=transitions,
        segments=segments,
        complete=complete,
    )


def worker_loop(
    worker_id: int,
    env_spec: EnvSpec,
    mailbox: Mailbox,
    experience_queue,
    control_queue,
    base_seed: int,
    chunk_cap: int = DEFAULT_CHUNK_CAP,
) -> None:
    """Run one sampler until SHUTDOWN. Queue objects are duck-typed (anything
    with put/get/get_nowait), so the loop runs identically under
    multiprocessing or in-process for tests."""
    env = make_env(env_spec)
    if env_spec.kind == "busy":
        from .envs import calibrate_busy_loop

        calibrate_busy_loop()  # pay the one-off cost before the first chunk

    rng: Rng | None = None
    snap: ParameterSnapshot | None = None
    last_served = -1
    try:
        while True:
            if snap is None:
                sig: ControlSignal | None = control_queue.get()
            else:
                try:
                    sig = control_queue.get_nowait()
                except queue.Empty:
                    sig = None

            if sig is not None:
                if sig.kind is SignalKind.SHUTDOWN:
                    return
                if sig.kind is SignalKind.STOP_ITER:
                    if snap is not None and sig.version >= snap.version:
                        snap = None
                        env.needs_reset = True  # discard the partial episode
                    continue
                if sig.kind is SignalKind.BEGIN:
                    if sig.version > last_served:
                        payload = mailbox.read_latest(timeout=60.0)
                        candidate = decode_snapshot(payload)
                        if candidate.version < sig.version:
                            raise ProtocolError(
                                f"worker {worker_id}: BEGIN({sig.version}) but mailbox "
                                f"holds version {candidate.version}"
                            )
                        snap = candidate
                        last_served = candidate.version
                        rng = derive_iteration_rng(base_seed, worker_id, candidate.version)
                        env.needs_reset = True  # every iteration starts a fresh episode
                    continue

            if snap is not None:
                chunk = collect_chunk(env, snap, rng, chunk_cap, worker_id=worker_id)
                experience_queue.put(chunk)
    except (EOFError, OSError, BrokenPipeError) as exc:
        print(f"worker {worker_id}: queue disconnected ({exc!r}); exiting", file=sys.stderr)
        return


def spawned_worker(
    worker_id: int,
    env_spec: EnvSpec,
    mailbox: Mailbox,
    experience_queue,
    control_queue,
    base_seed: int,
    chunk_cap: int,
) -> None:
    """Process entry point: worker_loop plus queue teardown that never blocks
    process exit on unflushed buffers."""
    try:
        worker_loop(
            worker_id, env_spec, mailbox, experience_queue, control_queue, base_seed, chunk_cap
        )
    finally:
        if hasattr(experience_queue, "cancel_join_thread"):
            experience_queue.cancel_join_thread()
