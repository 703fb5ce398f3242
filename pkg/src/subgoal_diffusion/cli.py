"""Command-line surface: collect, train, eval, trace, and audit.

Every command is deterministic given its full flag set; all randomness flows
from --seed values. A key = value config file can preload any subcommand's
defaults; explicit flags override the file. Exit codes: 0 success, 1 domain
error (bad data, failed run), 2 usage error.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from . import __version__
from .demos import CollectConfig, collect_dataset, audit_dataset, load_dataset
from .env import TASK_NAMES, make_task
from .errors import (ConfigurationError, DataError, InputError, SamplingError,
                     TrainingError, UsageError)
from .figures import save_eval_figure, save_metrics_figure, save_trace_figure
from .ioutil import canonical_json, write_json
from .policy import ModelConfig, PolicyModel
from .runtime import (RuntimeConfig, audit_trace, evaluate, load_trace,
                      replay_trace, run_episode, write_trace)
from .training import (Adam, TrainConfig, dataset_meta, load_checkpoint,
                       make_samples, params_digest, save_checkpoint, train)


def _int_list(text: str) -> tuple:
    try:
        values = tuple(int(v) for v in text.split(",") if v.strip())
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated ints, got {text!r}") from exc
    if not values:
        raise argparse.ArgumentTypeError("expected at least one width")
    return values


def build_parser():
    parser = argparse.ArgumentParser(
        prog="subgoal-diffusion",
        description="Subgoal-conditioned diffusion policy on a 2D manipulation bench.")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)
    commands = {}

    p = sub.add_parser("collect", help="collect scripted, labeled demonstrations")
    p.add_argument("--task", choices=TASK_NAMES)
    p.add_argument("--out", help="dataset directory to create")
    p.add_argument("--episodes", type=int, default=30)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--cruise", type=float, default=None,
                   help="planner speed; default is the task's own")
    p.add_argument("--noise-std", type=float, default=0.005)
    p.add_argument("--close-dist", type=float, default=0.015)
    p.add_argument("--unreachable-handle", action="store_true")
    p.add_argument("--config", help="key = value file preloading these flags")
    p.set_defaults(func=cmd_collect)
    commands["collect"] = p

    p = sub.add_parser("train", help="train the denoiser and completion head")
    p.add_argument("--data", help="dataset directory")
    p.add_argument("--out", help="checkpoint file to write")
    p.add_argument("--epochs", type=int, default=500)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--learning-rate", type=float, default=1e-3)
    p.add_argument("--lambda-max", type=float, default=0.1)
    p.add_argument("--no-subgoal-conditioning", action="store_true",
                   help="ablation: zero the subgoal slice of the denoiser conditioning")
    p.add_argument("--pc-widths", type=_int_list, default=(64, 128),
                   help="point encoder widths, comma separated")
    p.add_argument("--denoiser-hidden", type=_int_list, default=(256, 256),
                   help="denoiser hidden widths, comma separated")
    p.add_argument("--eval-every", type=int, default=0,
                   help="run a small eval every N epochs (0 = never)")
    p.add_argument("--eval-episodes", type=int, default=5)
    p.add_argument("--log-every", type=int, default=0,
                   help="print a loss line every N epochs (0 = quiet)")
    p.add_argument("--config", help="key = value file preloading these flags")
    p.set_defaults(func=cmd_train)
    commands["train"] = p

    p = sub.add_parser("eval", help="closed-loop evaluation of a checkpoint")
    p.add_argument("--model", help="checkpoint file")
    p.add_argument("--task", choices=TASK_NAMES,
                   help="defaults to the task the checkpoint was trained on")
    p.add_argument("--episodes", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threshold", type=float, default=0.2,
                   help="advance when predicted p drops below this")
    p.add_argument("--execute-steps", type=int, default=4)
    p.add_argument("--subgoal-timeout", type=int, default=100)
    p.add_argument("--oracle-completion", action="store_true",
                   help="advance on the ground-truth checker instead of the head")
    p.add_argument("--unreachable-handle", action="store_true")
    p.add_argument("--out", help="write a json report (plus a .png) here")
    p.add_argument("--trace-dir", help="write one trace file per episode here")
    p.add_argument("--config", help="key = value file preloading these flags")
    p.set_defaults(func=cmd_eval)
    commands["eval"] = p

    p = sub.add_parser("trace", help="run one episode and write its trace")
    p.add_argument("--model")
    p.add_argument("--task", choices=TASK_NAMES)
    p.add_argument("--episode-seed", type=int)
    p.add_argument("--out", help="trace jsonl to write")
    p.add_argument("--seed", type=int, default=0, help="action-sampling rng seed")
    p.add_argument("--threshold", type=float, default=0.2)
    p.add_argument("--execute-steps", type=int, default=4)
    p.add_argument("--subgoal-timeout", type=int, default=100)
    p.add_argument("--oracle-completion", action="store_true")
    p.add_argument("--unreachable-handle", action="store_true")
    p.add_argument("--config", help="key = value file preloading these flags")
    p.set_defaults(func=cmd_trace)
    commands["trace"] = p

    p = sub.add_parser("audit", help="check dataset or trace invariants")
    group = p.add_mutually_exclusive_group(required=True)
    group.add_argument("--data", help="dataset directory to audit")
    group.add_argument("--trace", help="trace file to audit")
    p.set_defaults(func=cmd_audit)
    commands["audit"] = p

    return parser, commands


def _apply_config_file(parser_for_cmd, path) -> None:
    """Load key = value lines as defaults; explicit flags still win."""
    text = Path(path).read_text(encoding="utf-8")
    actions = {a.dest: a for a in parser_for_cmd._actions}
    overrides = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected key = value, got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        dest = key.replace("-", "_")
        if dest not in actions or dest in ("help", "config", "func", "command"):
            raise UsageError(f"{path}:{lineno}: unknown config key {key!r}")
        action = actions[dest]
        if isinstance(action, (argparse._StoreTrueAction, argparse._StoreFalseAction)):
            overrides[dest] = value.lower() in ("1", "true", "yes", "on")
        elif action.type is not None:
            try:
                overrides[dest] = action.type(value)
            except (ValueError, argparse.ArgumentTypeError) as exc:
                raise UsageError(f"{path}:{lineno}: bad value for {key}: {exc}") from exc
        else:
            overrides[dest] = value
    parser_for_cmd.set_defaults(**overrides)


def _print_kv(prefix: str, pairs) -> None:
    print(prefix + " " + " ".join(f"{k}={v}" for k, v in pairs))


def _require(args, *names) -> None:
    for name in names:
        if getattr(args, name.replace("-", "_"), None) is None:
            raise UsageError(f"--{name} is required (flag or config file)")


def cmd_collect(args) -> int:
    _require(args, "task", "out")
    cfg = CollectConfig(task_name=args.task, n_episodes=args.episodes,
                        base_seed=args.seed, cruise=args.cruise,
                        noise_std=args.noise_std, close_dist=args.close_dist,
                        unreachable_handle=args.unreachable_handle)
    report = collect_dataset(cfg, args.out)
    _print_kv("collect", [("task", args.task), ("kept", report.n_episodes),
                          ("attempted", report.n_attempts), ("out", report.path)])
    return 0


def cmd_train(args) -> int:
    _require(args, "data", "out")
    dataset = load_dataset(args.data)
    model_cfg = ModelConfig(pc_widths=args.pc_widths,
                            denoiser_hidden=args.denoiser_hidden)
    train_cfg = TrainConfig(epochs=args.epochs, batch_size=args.batch_size,
                            learning_rate=args.learning_rate,
                            lambda_max=args.lambda_max, seed=args.seed,
                            ablate_subgoal=args.no_subgoal_conditioning)
    model = PolicyModel(model_cfg, seed=args.seed)
    samples = make_samples(dataset, model_cfg)
    optimizer = Adam(model.store, train_cfg.learning_rate)
    meta = dataset_meta(dataset)

    history: list = []
    if args.eval_every and args.eval_every > 0:
        task = make_task(dataset.task_name)
        rcfg = RuntimeConfig(ablate_subgoal=train_cfg.ablate_subgoal,
                             rng_seed=train_cfg.seed)
        epoch = 0
        while epoch < train_cfg.epochs:
            upto = min(epoch + args.eval_every, train_cfg.epochs)
            history = train(model, samples, train_cfg, optimizer=optimizer,
                            start_epoch=epoch, end_epoch=upto, history=history,
                            log_every=args.log_every)
            epoch = upto
            seeds = range(10_000, 10_000 + args.eval_episodes)
            report = evaluate(model, task, seeds, rcfg)
            history[-1]["eval_success_rate"] = report.success_rate
            _print_kv("train-eval", [("epoch", upto),
                                     ("success_rate", f"{report.success_rate:.3f}")])
    else:
        history = train(model, samples, train_cfg, optimizer=optimizer,
                        log_every=args.log_every)

    out = Path(args.out)
    save_checkpoint(out, model, optimizer, train_cfg, history, meta)
    metrics_path = out.with_suffix(".metrics.jsonl")
    with open(metrics_path, "w", encoding="utf-8") as fh:
        header = {"format_version": 1, "kind": "metrics",
                  "model_config": model_cfg.to_dict(),
                  "train_config": train_cfg.to_dict(), "dataset": meta}
        fh.write(canonical_json(header) + "\n")
        for row in history:
            fh.write(canonical_json(row) + "\n")
    figure_path = save_metrics_figure(history, out.with_suffix(".metrics.png")) \
        if history else ""
    _print_kv("train", [("samples", len(samples)), ("epochs", len(history)),
                        ("l_total", f"{history[-1]['l_total']:.6f}" if history else "nan"),
                        ("checkpoint", str(out)), ("metrics", str(metrics_path)),
                        ("figure", figure_path),
                        ("params_digest", params_digest(model.store))])
    return 0


def _runtime_config(args, bundle):
    """Runtime config from flags, inheriting the checkpoint's ablation mode."""
    return RuntimeConfig(
        tau=args.threshold,
        execute_steps=args.execute_steps,
        subgoal_timeout=args.subgoal_timeout,
        oracle_completion=args.oracle_completion,
        ablate_subgoal=bundle.train_config.ablate_subgoal,
        rng_seed=args.seed)


def cmd_eval(args) -> int:
    _require(args, "model")
    if args.episodes < 1:
        raise InputError("--episodes must be >= 1")
    bundle = load_checkpoint(args.model)
    task_name = args.task or bundle.dataset["task"]
    task = make_task(task_name, unreachable_handle=args.unreachable_handle)
    rcfg = _runtime_config(args, bundle)
    seeds = range(args.seed, args.seed + args.episodes)
    report = evaluate(bundle.model, task, seeds, rcfg, trace_dir=args.trace_dir)
    mode = "oracle" if args.oracle_completion else "predicted"
    _print_kv("eval", [("task", task_name), ("episodes", report.n_episodes),
                       ("successes", report.n_success),
                       ("success_rate", f"{report.success_rate:.3f}"),
                       ("mean_steps", f"{report.mean_steps:.1f}"),
                       ("threshold", args.threshold), ("mode", mode),
                       ("ablate_subgoal", rcfg.ablate_subgoal)])
    for key in sorted(report.failure_histogram, key=int):
        _print_kv("failures", [("subgoal", key),
                               ("count", report.failure_histogram[key])])
    if args.out:
        payload = {
            "format_version": 1,
            "kind": "eval_report",
            "task": task_name,
            "mode": mode,
            "checkpoint": str(args.model),
            "checkpoint_params_digest": params_digest(bundle.model.store),
            "unreachable_handle": args.unreachable_handle,
            "n_episodes": report.n_episodes,
            "n_success": report.n_success,
            "success_rate": report.success_rate,
            "mean_steps": report.mean_steps,
            "failure_histogram": report.failure_histogram,
            "rows": report.rows,
            "config": rcfg.to_dict(),
        }
        write_json(args.out, payload)
        save_eval_figure(report, Path(args.out).with_suffix(".png"))
    return 0


def cmd_trace(args) -> int:
    _require(args, "model", "episode-seed", "out")
    bundle = load_checkpoint(args.model)
    task_name = args.task or bundle.dataset["task"]
    task = make_task(task_name, unreachable_handle=args.unreachable_handle)
    rcfg = _runtime_config(args, bundle)
    trace = run_episode(bundle.model, task, args.episode_seed, rcfg)
    write_trace(args.out, trace)
    figure = save_trace_figure(trace, Path(args.out).with_suffix(".png"))
    _print_kv("trace", [("task", task_name), ("episode_seed", args.episode_seed),
                        ("steps", trace.terminal["steps"]),
                        ("success", trace.terminal["success"]),
                        ("advances", len(trace.terminal["advances"])),
                        ("stall", trace.terminal["stall"]),
                        ("out", args.out), ("figure", figure)])
    return 0


def cmd_audit(args) -> int:
    if args.data:
        problems = audit_dataset(args.data)
        target = args.data
    else:
        trace = load_trace(args.trace)
        problems = audit_trace(trace)
        problems += replay_trace(trace)
        target = args.trace
    for problem in problems:
        print(f"problem: {problem}")
    if problems:
        _print_kv("audit", [("target", target), ("result", "fail"),
                            ("problems", len(problems))])
        return 1
    _print_kv("audit", [("target", target), ("result", "ok")])
    return 0


def _prescan(argv, commands):
    """Find the subcommand and --config value without a full parse."""
    command = None
    config = None
    for i, token in enumerate(argv):
        if command is None and token in commands:
            command = token
        if token == "--config" and i + 1 < len(argv):
            config = argv[i + 1]
        elif token.startswith("--config="):
            config = token.split("=", 1)[1]
    return command, config


def entry(argv=None) -> int:
    argv = list(sys.argv[1:]) if argv is None else list(argv)
    parser, commands = build_parser()
    command, config = _prescan(argv, commands)
    if command and config:
        try:
            _apply_config_file(commands[command], config)
        except OSError as exc:
            print(f"usage error: cannot read config file: {exc}", file=sys.stderr)
            return 2
        except UsageError as exc:
            print(f"usage error: {exc}", file=sys.stderr)
            return 2
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (InputError, ConfigurationError, UsageError) as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 2
    except (DataError, TrainingError, SamplingError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(entry())
