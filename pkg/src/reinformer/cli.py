"""Command-line entry point: dataset generation, training, evaluation, ablation.

Configuration precedence is CLI flag > config file > built-in default. Config
files are flat key=value text; keys use the flag names with dashes replaced
by underscores. Every run directory receives a manifest JSON with the
resolved config hash, dataset hash, seed, and code version; outputs carry no
timestamps so identical seeded invocations are byte-identical.

Exit codes: 0 success, 1 diagnostic failure, 2 usage or input error,
3 numeric abort.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys

import numpy as np

from . import __version__
from .checkpoint import load_model, save_model
from .data import compute_stats, load_dataset, save_dataset
from .diagnostics import GRADCHECK_TOLERANCE, run_gradcheck
from .envs import GridMaze, LineWorld, gen_lineworld_dataset, gen_stitch_dataset
from .errors import CheckpointError, ConfigError, ContractError, DatasetError, NumericsError
from .model import CATEGORICAL, GAUSSIAN, ContextStep, ModelConfig, ReinformerModel
from .rollout import evaluate, write_trace_csv
from .training import TrainConfig, train, write_metrics_csv

EXIT_OK = 0
EXIT_DIAGNOSTIC = 1
EXIT_USAGE = 2
EXIT_NUMERIC = 3

MODEL_KEYS = ("hidden_dim", "n_layers", "n_heads", "context_k", "max_timestep")
TRAIN_KEYS = ("m", "learning_rate", "steps", "batch_size", "seed", "grad_clip",
              "eval_interval", "weight_decay", "beta", "init_lambda")


class UsageError(Exception):
    pass


def _sha256_file(path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(65536), b""):
            digest.update(chunk)
    return digest.hexdigest()


def read_config_file(path) -> dict[str, str]:
    values = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            body = line.split("#", 1)[0].strip()
            if not body:
                continue
            if "=" not in body:
                raise UsageError(f"{path}: line {lineno}: expected key=value")
            key, value = body.split("=", 1)
            values[key.strip()] = value.strip()
    return values


def resolve_config(defaults: dict, file_values: dict[str, str], cli_values: dict) -> dict:
    """Merge by precedence: CLI flag > config file > default."""
    resolved = dict(defaults)
    for key, raw in file_values.items():
        if key not in resolved:
            raise UsageError(f"unknown config key {key!r}")
        base = defaults[key]
        if isinstance(base, bool):
            resolved[key] = raw.lower() in ("1", "true", "yes")
        elif isinstance(base, int) and not isinstance(base, bool):
            resolved[key] = int(raw)
        elif isinstance(base, float) or base is None:
            resolved[key] = None if raw.lower() == "none" else float(raw)
        else:
            resolved[key] = raw
    for key, value in cli_values.items():
        if value is not None:
            resolved[key] = value
    return resolved


def write_manifest(directory, config: dict, seed, dataset_path=None) -> None:
    manifest = {
        "code_version": __version__,
        "seed": seed,
        "config": {k: config[k] for k in sorted(config)},
        "config_hash": hashlib.sha256(
            json.dumps(config, sort_keys=True, default=str).encode()).hexdigest(),
    }
    if dataset_path is not None:
        manifest["dataset_hash"] = _sha256_file(dataset_path)
    with open(os.path.join(directory, "manifest.json"), "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def make_env(name: str, reward_shift: float = 0.0):
    if name == "maze":
        return GridMaze()
    if name == "lineworld":
        return LineWorld(reward_shift=reward_shift)
    raise UsageError(f"unknown environment {name!r}")


# ---------------------------------------------------------------------------
# gen-data
# ---------------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    rng = np.random.default_rng(args.seed)
    env = make_env(args.env, args.reward_shift)
    if args.env == "maze":
        dataset = gen_stitch_dataset(env, args.copies, rng=rng, noise=args.noise)
        action_meta = {"kind": CATEGORICAL, "count": env.n_actions}
    else:
        dataset = gen_lineworld_dataset(env, args.episodes, rng)
        action_meta = {"kind": GAUSSIAN, "dim": env.action_dim}
    try:
        save_dataset(args.out, dataset)
    except OSError as exc:
        raise UsageError(f"cannot write dataset to {args.out}: {exc}") from exc

    stats = compute_stats(dataset)
    sidecar = {
        "env": args.env,
        "n_trajectories": len(dataset),
        "state_dim": int(dataset[0].states.shape[1]),
        "action": action_meta,
        "return_min": stats.min_dataset_return,
        "return_max": stats.max_dataset_return,
        "state_mean": stats.state_mean.tolist(),
        "state_std": stats.state_std.tolist(),
        "step_limit": env.step_limit,
        "reward_shift": args.reward_shift,
        "seed": args.seed,
    }
    with open(stats_path(args.out), "w", encoding="utf-8") as fh:
        json.dump(sidecar, fh, indent=2, sort_keys=True)
        fh.write("\n")
    print(f"wrote {len(dataset)} trajectories to {args.out}")
    return EXIT_OK


def stats_path(dataset_path) -> str:
    return str(dataset_path) + ".stats.json"


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------


def _load_sidecar(dataset_path) -> dict | None:
    path = stats_path(dataset_path)
    if os.path.exists(path):
        with open(path, "r", encoding="utf-8") as fh:
            return json.load(fh)
    return None


def infer_model_config(dataset, sidecar, resolved: dict) -> ModelConfig:
    first = dataset[0]
    if sidecar is not None:
        kind = sidecar["action"]["kind"]
        action_dim = sidecar["action"].get("count", sidecar["action"].get("dim"))
        max_t = max(resolved["max_timestep"], sidecar.get("step_limit", 0) + 1)
    else:
        kind = CATEGORICAL if first.discrete else GAUSSIAN
        if first.discrete:
            action_dim = int(max(t.actions.max() for t in dataset)) + 1
        else:
            action_dim = first.actions.shape[1]
        max_t = max(resolved["max_timestep"], max(t.length for t in dataset) + 1)
    return ModelConfig(
        state_dim=first.states.shape[1], action_dim=int(action_dim),
        hidden_dim=resolved["hidden_dim"], n_layers=resolved["n_layers"],
        n_heads=resolved["n_heads"], context_k=resolved["context_k"],
        action_head_kind=kind, max_timestep=max_t)


def default_run_config() -> dict:
    model_defaults = {"hidden_dim": 64, "n_layers": 2, "n_heads": 4,
                      "context_k": 5, "max_timestep": 64}
    train_defaults = {k: getattr(TrainConfig, k) for k in TRAIN_KEYS}
    return {**model_defaults, **train_defaults}


def cmd_train(args) -> int:
    if not os.path.exists(args.data):
        raise UsageError(f"dataset not found: {args.data}")
    file_values = read_config_file(args.config) if args.config else {}
    cli_values = {k: getattr(args, k) for k in default_run_config()}
    resolved = resolve_config(default_run_config(), file_values, cli_values)

    dataset = load_dataset(args.data)
    sidecar = _load_sidecar(args.data)
    os.makedirs(args.out, exist_ok=True)

    resume_extras = None
    if args.resume:
        model, _, resume_extras = load_model(args.resume)
    else:
        model_cfg = infer_model_config(dataset, sidecar, resolved)
        model = ReinformerModel(model_cfg, np.random.default_rng(resolved["seed"]))

    train_cfg = TrainConfig(**{k: resolved[k] for k in TRAIN_KEYS})
    write_manifest(args.out, resolved, resolved["seed"], dataset_path=args.data)
    result = train(model, dataset, train_cfg, out_dir=args.out, resume_extras=resume_extras)
    print(f"trained {train_cfg.steps} steps; final total loss "
          f"{result.metrics[-1]['total_loss']:.4f}; outputs in {args.out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# eval
# ---------------------------------------------------------------------------


def cmd_eval(args) -> int:
    if not os.path.exists(args.ckpt):
        raise UsageError(f"checkpoint not found: {args.ckpt}")
    if args.mode == "dt" and args.g0 is None:
        raise UsageError("dt mode requires --g0 (the initial return to condition on)")
    model, stats, _ = load_model(args.ckpt)
    if stats is None:
        raise UsageError(f"{args.ckpt} carries no dataset statistics; cannot evaluate")
    env = make_env(args.env, args.reward_shift)
    report, records = evaluate(model, env, stats, args.mode, args.episodes,
                               seed=args.seed, g0=args.g0, greedy=not args.sample)
    payload = json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n"
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(payload)
    else:
        sys.stdout.write(payload)
    if args.trace:
        write_trace_csv(args.trace, records)
    return EXIT_OK


# ---------------------------------------------------------------------------
# ablate-m
# ---------------------------------------------------------------------------


def cmd_ablate_m(args) -> int:
    if not os.path.exists(args.data):
        raise UsageError(f"dataset not found: {args.data}")
    try:
        m_values = [float(v) for v in args.m_list.split(",") if v]
    except ValueError as exc:
        raise UsageError(f"bad --m-list: {exc}") from exc
    if not m_values:
        raise UsageError("--m-list is empty")

    dataset = load_dataset(args.data)
    sidecar = _load_sidecar(args.data)
    os.makedirs(args.out, exist_ok=True)
    env = make_env(args.env, args.reward_shift)

    resolved = default_run_config()
    resolved.update({"steps": args.steps, "seed": args.seed})
    rows = []
    for m in m_values:
        run_dir = os.path.join(args.out, f"m_{m}")
        os.makedirs(run_dir, exist_ok=True)
        resolved["m"] = m
        model_cfg = infer_model_config(dataset, sidecar, resolved)
        model = ReinformerModel(model_cfg, np.random.default_rng(args.seed))
        train_cfg = TrainConfig(**{k: resolved[k] for k in TRAIN_KEYS})
        write_manifest(run_dir, resolved, args.seed, dataset_path=args.data)
        result = train(model, dataset, train_cfg, out_dir=run_dir)
        report, records = evaluate(model, env, result.stats, "reinformer",
                                   args.episodes, seed=args.seed)

        start_state = result.stats.normalize(env.reset())
        pred_g_start = model.predict_return([], start_state, 0)
        margin = 0.1 * result.stats.return_range
        overshoot = any(g is not None and g > result.stats.max_dataset_return + margin
                        for record in records for g in record.predicted_g)
        rows.append((m, report.success_rate, report.mean_return,
                     result.metrics[-1]["return_loss"], pred_g_start, int(overshoot)))

    summary = os.path.join(args.out, "summary.csv")
    with open(summary, "w", encoding="utf-8") as fh:
        fh.write("m,success_rate,mean_return,final_return_loss,pred_g_start,overshoot\n")
        for row in rows:
            fh.write(",".join(repr(v) if isinstance(v, float) else str(v) for v in row) + "\n")
    print(f"wrote {summary}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# gradcheck
# ---------------------------------------------------------------------------


def cmd_gradcheck(args) -> int:
    results = run_gradcheck(seed=args.seed)
    worst = max(results, key=lambda r: r.error)
    failures = [r for r in results if not r.passed]
    for r in results:
        print(f"{'PASS' if r.passed else 'FAIL'} {r.name}: {r.error:.3e}")
    print(f"worst: {worst.name} ({worst.error:.3e}); tolerance {GRADCHECK_TOLERANCE:.0e}")
    if failures:
        print(f"gradcheck FAILED for: {', '.join(r.name for r in failures)}")
        return EXIT_DIAGNOSTIC
    return EXIT_OK


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="reinformer",
                                     description="Max-return sequence modeling workbench")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate an offline dataset")
    p.add_argument("--env", choices=("maze", "lineworld"), required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--copies", type=int, default=50, help="maze: copies of each route")
    p.add_argument("--episodes", type=int, default=200, help="lineworld: episode count")
    p.add_argument("--noise", type=float, default=None,
                   help="maze: probability of emitting a suffix variant instead of a full copy")
    p.add_argument("--reward-shift", type=float, default=0.0, dest="reward_shift")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a model on a dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config", default=None, help="key=value config file")
    p.add_argument("--resume", default=None, help="checkpoint to continue from")
    for key in ("m", "learning_rate", "grad_clip", "weight_decay", "beta", "init_lambda"):
        p.add_argument(f"--{key.replace('_', '-')}", type=float, default=None, dest=key)
    for key in ("steps", "batch_size", "seed", "eval_interval",
                "hidden_dim", "n_layers", "n_heads", "context_k", "max_timestep"):
        p.add_argument(f"--{key.replace('_', '-')}", type=int, default=None, dest=key)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--env", choices=("maze", "lineworld"), required=True)
    p.add_argument("--mode", choices=("reinformer", "naive", "dt"), default="reinformer")
    p.add_argument("--episodes", type=int, default=100)
    p.add_argument("--g0", type=float, default=None)
    p.add_argument("--trace", default=None, help="write a per-step trace CSV here")
    p.add_argument("--out", default=None, help="write the report JSON here instead of stdout")
    p.add_argument("--sample", action="store_true", help="sample actions instead of greedy")
    p.add_argument("--reward-shift", type=float, default=0.0, dest="reward_shift")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate-m", help="train and evaluate across expectile levels")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--env", choices=("maze", "lineworld"), default="maze")
    p.add_argument("--m-list", default="0.5,0.7,0.9,0.99,0.999", dest="m_list")
    p.add_argument("--steps", type=int, default=2000)
    p.add_argument("--episodes", type=int, default=100)
    p.add_argument("--reward-shift", type=float, default=0.0, dest="reward_shift")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_ablate_m)

    p = sub.add_parser("gradcheck", help="finite-difference check of every backward rule")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code not in (0, None) else EXIT_OK
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DatasetError, CheckpointError, ConfigError, ContractError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericsError as exc:
        print(f"numeric abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


def entry() -> None:
    sys.exit(main())
