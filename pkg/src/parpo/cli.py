"""Command-line entry point: `train` runs the parallel loop on one env,
`bench` sweeps worker counts and emits the speedup/time-share report,
`eval` scores a checkpoint with the deterministic policy.

Config files are line-oriented `key=value` with `#` comments and namespaced
keys (`env=busy`, `busy.step_cost_us=200`, `hyper.lr=0.0003`). Command-line
flags override config-file values. WALLE_OUT_DIR, when set, is the default
root for output directories.

Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import os
import sys
import time
from dataclasses import replace
from pathlib import Path

from .bench import BenchConfig, run_bench, speedup_table, write_bench_csv, write_bench_json
from .envs import busy_spec, spec_for
from .errors import ConfigurationError, ProtocolError, SnapshotDecodeError
from .learner import PpoHyper, default_hyper
from .nn_core import EVAL_STREAM, derive_worker_rng
from .orchestrator import RunConfig, evaluate_policy, train
from .policy import decode_snapshot
from .sampler import DEFAULT_CHUNK_CAP

_CONFIG_KEYS = {
    "env": str,
    "workers": int,
    "samples_per_iter": int,
    "iters": int,
    "seed": int,
    "out": str,
    "chunk_cap": int,
    "eval_episodes": int,
    "stop_at_eval_return": float,
    "hidden": str,
    "busy.step_cost_us": int,
    "busy.episode_len": int,
    "busy.obs_dim": int,
    "hyper.gamma": float,
    "hyper.gae_lambda": float,
    "hyper.clip_eps": float,
    "hyper.epochs": int,
    "hyper.minibatch_size": int,
    "hyper.lr": float,
    "hyper.vf_coef": float,
    "hyper.ent_coef": float,
    "hyper.max_grad_norm": float,
}


def parse_config_file(path: Path) -> dict:
    """key=value lines, # comments, namespaced keys; unknown keys are errors."""
    values: dict = {}
    for lineno, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigurationError(f"{path}:{lineno}: expected key=value, got {raw!r}")
        key, _, value = line.partition("=")
        key = key.strip()
        value = value.strip()
        if key not in _CONFIG_KEYS:
            raise ConfigurationError(f"{path}:{lineno}: unknown config key {key!r}")
        try:
            values[key] = _CONFIG_KEYS[key](value)
        except ValueError as exc:
            raise ConfigurationError(f"{path}:{lineno}: bad value for {key}: {value!r}") from exc
    return values


def _parse_hidden(text: str) -> tuple[int, ...]:
    try:
        dims = tuple(int(part) for part in text.split(",") if part.strip())
    except ValueError as exc:
        raise ConfigurationError(f"bad hidden dims {text!r}") from exc
    if not dims:
        raise ConfigurationError("hidden dims must be nonempty")
    return dims


def _parse_worker_list(text: str) -> tuple[int, ...]:
    try:
        counts = tuple(int(part) for part in text.split(",") if part.strip())
    except ValueError as exc:
        raise ConfigurationError(f"bad worker list {text!r}") from exc
    if not counts:
        raise ConfigurationError("worker list must be nonempty")
    return counts


def _default_out(kind: str) -> Path:
    root = os.environ.get("WALLE_OUT_DIR", "runs")
    stamp = time.strftime("%Y%m%d-%H%M%S")
    return Path(root) / f"{kind}-{stamp}"


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="parpo",
        description="Parallel rollout-sampler PPO engine and throughput benchmark.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    tr = sub.add_parser("train", help="run the training loop")
    tr.add_argument("--env", choices=["cartpole", "pendulum", "busy"])
    tr.add_argument("--workers", type=int)
    tr.add_argument("--samples-per-iter", type=int)
    tr.add_argument("--iters", type=int)
    tr.add_argument("--seed", type=int)
    tr.add_argument("--out", type=Path)
    tr.add_argument("--config", type=Path, help="key=value config file; flags override it")
    tr.add_argument("--chunk-cap", type=int)
    tr.add_argument("--eval-episodes", type=int)
    tr.add_argument("--hidden", type=str, help="comma-separated hidden layer sizes")
    tr.add_argument("--stop-at-eval-return", type=float)
    tr.add_argument("--step-cost-us", type=int, help="busy env per-step CPU cost")
    tr.add_argument("--busy-episode-len", type=int)
    tr.add_argument("--busy-obs-dim", type=int)
    tr.add_argument("--lr", type=float)
    tr.add_argument("--gamma", type=float)
    tr.add_argument("--gae-lambda", type=float)
    tr.add_argument("--clip-eps", type=float)
    tr.add_argument("--epochs", type=int)
    tr.add_argument("--minibatch-size", type=int)
    tr.add_argument("--vf-coef", type=float)
    tr.add_argument("--ent-coef", type=float)
    tr.add_argument("--max-grad-norm", type=float)

    be = sub.add_parser("bench", help="sweep worker counts and report speedups")
    be.add_argument("--workers", type=str, default="1,2,4,8",
                    help="comma-separated worker counts, e.g. 1,2,4,8")
    be.add_argument("--trials", type=int, default=3)
    be.add_argument("--iters", type=int, default=5)
    be.add_argument("--step-cost-us", type=int, default=200)
    be.add_argument("--samples-per-iter", type=int, default=20000)
    be.add_argument("--busy-episode-len", type=int)
    be.add_argument("--busy-obs-dim", type=int)
    be.add_argument("--seed", type=int, default=0)
    be.add_argument("--chunk-cap", type=int, default=DEFAULT_CHUNK_CAP)
    be.add_argument("--out", type=Path)

    ev = sub.add_parser("eval", help="score a checkpoint deterministically")
    ev.add_argument("--checkpoint", type=Path, required=True)
    ev.add_argument("--episodes", type=int, default=20)
    ev.add_argument("--env", choices=["cartpole", "pendulum", "busy"], default="cartpole")
    ev.add_argument("--seed", type=int, default=0)
    ev.add_argument("--step-cost-us", type=int)
    ev.add_argument("--busy-episode-len", type=int)
    ev.add_argument("--busy-obs-dim", type=int)
    return parser


def _merged(args: argparse.Namespace, config: dict, flag: str, key: str, default):
    """Flag beats config file beats default."""
    value = getattr(args, flag, None)
    if value is not None:
        return value
    if key in config:
        return config[key]
    return default


def _env_spec_from(args: argparse.Namespace, config: dict):
    kind = _merged(args, config, "env", "env", "cartpole")
    if kind != "busy":
        return spec_for(kind)
    busy_kwargs = {}
    step_cost = _merged(args, config, "step_cost_us", "busy.step_cost_us", None)
    episode_len = _merged(args, config, "busy_episode_len", "busy.episode_len", None)
    obs_dim = _merged(args, config, "busy_obs_dim", "busy.obs_dim", None)
    if step_cost is not None:
        busy_kwargs["step_cost_us"] = step_cost
    if episode_len is not None:
        busy_kwargs["episode_len"] = episode_len
    if obs_dim is not None:
        busy_kwargs["obs_dim"] = obs_dim
    return busy_spec(**busy_kwargs)


def _hyper_from(args: argparse.Namespace, config: dict, env_kind: str) -> PpoHyper:
    base = default_hyper(env_kind)
    fields = {
        "gamma": ("gamma", "hyper.gamma"),
        "gae_lambda": ("gae_lambda", "hyper.gae_lambda"),
        "clip_eps": ("clip_eps", "hyper.clip_eps"),
        "epochs": ("epochs", "hyper.epochs"),
        "minibatch_size": ("minibatch_size", "hyper.minibatch_size"),
        "lr": ("lr", "hyper.lr"),
        "vf_coef": ("vf_coef", "hyper.vf_coef"),
        "ent_coef": ("ent_coef", "hyper.ent_coef"),
        "max_grad_norm": ("max_grad_norm", "hyper.max_grad_norm"),
    }
    overrides = {}
    for name, (flag, key) in fields.items():
        value = _merged(args, config, flag, key, None)
        if value is not None:
            overrides[name] = value
    return replace(base, **overrides)


def _cmd_train(args: argparse.Namespace) -> int:
    config_file: dict = {}
    if args.config is not None:
        config_file = parse_config_file(args.config)
    env_spec = _env_spec_from(args, config_file)
    hyper = _hyper_from(args, config_file, env_spec.kind)
    hidden_raw = _merged(args, config_file, "hidden", "hidden", "64,64")
    out = _merged(args, config_file, "out", "out", None)
    run_config = RunConfig(
        env_spec=env_spec,
        n_workers=_merged(args, config_file, "workers", "workers", 1),
        samples_per_iter=_merged(args, config_file, "samples_per_iter", "samples_per_iter", 4000),
        n_iters=_merged(args, config_file, "iters", "iters", 50),
        hyper=hyper,
        base_seed=_merged(args, config_file, "seed", "seed", 0),
        chunk_cap=_merged(args, config_file, "chunk_cap", "chunk_cap", DEFAULT_CHUNK_CAP),
        eval_episodes=_merged(args, config_file, "eval_episodes", "eval_episodes", 20),
        hidden_dims=_parse_hidden(hidden_raw) if isinstance(hidden_raw, str) else hidden_raw,
        out_dir=Path(out) if out is not None else _default_out("train"),
        stop_at_eval_return=_merged(
            args, config_file, "stop_at_eval_return", "stop_at_eval_return", None
        ),
    )

    def report(log) -> None:
        print(
            f"iter {log.iteration:3d} v{log.version:<3d} samples {log.timing.samples_gathered:6d} "
            f"collect {log.timing.collect_time_s:7.3f}s learn {log.timing.learn_time_s:7.3f}s "
            f"return {log.mean_return:8.2f} eval {log.eval_return:8.2f}",
            flush=True,
        )

    run_log = train(run_config, on_iteration=report)
    print(f"run CSV: {run_log.csv_path}")
    print(f"checkpoint: {run_log.checkpoint_path}")
    return 0


def _cmd_bench(args: argparse.Namespace) -> int:
    busy_kwargs = {"step_cost_us": args.step_cost_us}
    if args.busy_episode_len is not None:
        busy_kwargs["episode_len"] = args.busy_episode_len
    if args.busy_obs_dim is not None:
        busy_kwargs["obs_dim"] = args.busy_obs_dim
    out = args.out if args.out is not None else _default_out("bench")
    out.mkdir(parents=True, exist_ok=True)
    config = BenchConfig(
        worker_counts=_parse_worker_list(args.workers),
        trials=args.trials,
        iters_per_trial=args.iters,
        samples_per_iter=args.samples_per_iter,
        env_spec=busy_spec(**busy_kwargs),
        base_seed=args.seed,
        chunk_cap=args.chunk_cap,
        out_dir=out,
    )
    report = run_bench(config, verbose=True)
    csv_path = write_bench_csv(report, out / "bench.csv")
    json_path = write_bench_json(report, out / "bench.json")
    print(f"\nmachine: {report.machine['logical_cores']} logical / "
          f"{report.machine['physical_cores']} physical cores")
    print(f"{'N':>4} {'collect_s':>10} {'speedup':>8} {'collect%':>9} {'learn%':>7}")
    for row in speedup_table(report):
        flag = "  over-linear!" if row["over_linear"] else ""
        print(
            f"{row['n_workers']:>4} {row['median_collect_s']:>10.3f} "
            f"{row['speedup']:>8.3f} {row['collect_share_pct']:>9.1f} "
            f"{row['learn_share_pct']:>7.1f}{flag}"
        )
    print(f"\nbench CSV: {csv_path}")
    print(f"bench JSON: {json_path}")
    return 0


def _cmd_eval(args: argparse.Namespace) -> int:
    if args.episodes < 1:
        raise ConfigurationError("episodes must be >= 1")
    snap = decode_snapshot(Path(args.checkpoint).read_bytes())
    busy_kwargs = {}
    for flag, key in (
        ("step_cost_us", "step_cost_us"),
        ("busy_episode_len", "episode_len"),
        ("busy_obs_dim", "obs_dim"),
    ):
        value = getattr(args, flag)
        if value is not None:
            busy_kwargs[key] = value
    env_spec = spec_for(args.env, **busy_kwargs) if args.env == "busy" else spec_for(args.env)
    if env_spec.obs_dim != snap.policy_layout.input_dim:
        raise ConfigurationError(
            f"checkpoint expects obs_dim {snap.policy_layout.input_dim}, "
            f"env {args.env} provides {env_spec.obs_dim}"
        )
    rng = derive_worker_rng(args.seed, EVAL_STREAM)
    mean_return = evaluate_policy(snap, env_spec, args.episodes, rng)
    print(f"mean return over {args.episodes} deterministic episodes: {mean_return:.3f}")
    return 0


def cli_main(argv: list[str] | None = None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        if args.command == "train":
            return _cmd_train(args)
        if args.command == "bench":
            return _cmd_bench(args)
        return _cmd_eval(args)
    except (ConfigurationError, SnapshotDecodeError) as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 2
    except (ProtocolError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except KeyboardInterrupt:
        return 1


def main() -> None:
    raise SystemExit(cli_main())


if __name__ == "__main__":
    main()
