"""Command line entry point.

Exit codes: 0 success, 2 configuration error, 3 runtime failure.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from . import harness, marl
from .env import JUNCTION, RECEIVING
from .harness import ConfigError, EvalConfig, ExperimentReport, StrategyResult
from .heuristics import RECEIVING_HEURISTICS
from .marl import MarlError
from .topology import TopologyError

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3
TRACE_COLUMNS = ["step", "agent_id", "event", "requested_action", "applied_action", "override_cause", "reward_delta"]


def _common() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--config", default=None, help="YAML config file, or 'full' / 'desk'")
    p.add_argument("--seed", type=int, default=None, help="base seed (eval) / training seed")
    p.add_argument("--episodes", type=int, default=None, help="number of episodes to run")
    p.add_argument("--steps", type=int, default=None, help="override episode_steps")
    p.add_argument("--out", default=None, help="output file or directory")
    p.add_argument("--format", choices=("csv", "json"), default="json")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def build_parser() -> argparse.ArgumentParser:
    common = _common()
    parser = argparse.ArgumentParser(prog="conveyor-marl", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", parents=[common], help="heuristic or random roll-outs")
    p.add_argument("--strategy", nargs="+", default=list(RECEIVING_HEURISTICS), choices=RECEIVING_HEURISTICS)

    p = sub.add_parser("train", parents=[common], help="train MARL policies")
    p.add_argument("--learners", nargs="+", choices=(RECEIVING, JUNCTION), default=None)
    p.add_argument("--critic", choices=("joint", "separate"), default=None)
    p.add_argument("--heuristic", choices=RECEIVING_HEURISTICS, default=None, help="interleaved receiving heuristic")
    p.add_argument("--interleave", choices=marl.INTERLEAVE_MODES, default=None)
    p.add_argument("--frozen", default=None, help="first-iteration bundle to interleave (second iteration)")

    p = sub.add_parser("evaluate", parents=[common], help="evaluate a strategy or checkpoint")
    p.add_argument("--strategy", choices=harness.STRATEGIES, default="high")
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--assist", choices=harness.ASSIST_MODES, default="non_assisted")

    p = sub.add_parser("experiment", parents=[common], help="run an experiment preset")
    p.add_argument("preset", choices=harness.PRESETS)

    p = sub.add_parser("export-trace", parents=[common], help="dump the per-decision trace of one episode")
    p.add_argument("--strategy", choices=harness.STRATEGIES, default="high")
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--assist", choices=harness.ASSIST_MODES, default="non_assisted")
    return parser


def _run_config(args) -> harness.RunConfig:
    run = harness.load_config(args.config)
    if args.steps is not None:
        if args.steps < 1:
            raise ConfigError("--steps must be >= 1")
        run = replace(run, env=replace(run.env, episode_steps=args.steps))
    if args.episodes is not None:
        if args.episodes < 1:
            raise ConfigError("--episodes must be >= 1")
        if args.command == "train":
            run.train = {**run.train, "episodes": args.episodes}
        else:
            run.eval_episodes = args.episodes
    if args.seed is not None:
        run.eval_base_seed = args.seed
        run.train = {**run.train, "seed": args.seed}
    return run


def _emit(text: str, out) -> None:
    if out:
        Path(out).parent.mkdir(parents=True, exist_ok=True)
        Path(out).write_text(text)
    else:
        sys.stdout.write(text)


def _summary_lines(report: ExperimentReport) -> str:
    lines = []
    for s in report.strategies:
        m = s.summary
        lines.append(f"{s.name:24s} n={m.n:<4d} median={m.median:.1f} q1={m.q1:.1f} q3={m.q3:.1f} "
                     f"min={m.min:.0f} max={m.max:.0f}")
    for imp in report.improvements:
        lines.append(f"{imp['candidate']} vs {imp['baseline']}: {imp['percent']:+.2f}%")
    return "\n".join(lines) + "\n"


def cmd_simulate(args, run) -> int:
    env = run.make_env()
    seeds = list(range(run.eval_base_seed, run.eval_base_seed + run.eval_episodes))
    results = [StrategyResult(n, seeds, [harness.rollout_heuristic(env, n, s, run.heuristics) for s in seeds])
               for n in args.strategy]
    names = [r.name for r in results]
    report = ExperimentReport("simulate", run.config_hash({"preset": "simulate", "strategies": names}),
                              results, harness.default_pairs("simulate", names))
    if args.out:
        _emit(harness.export_report(report, args.format), args.out)
    sys.stdout.write(_summary_lines(report))
    return EXIT_OK


def cmd_train(args, run) -> int:
    over = {}
    if args.learners:
        over["learners"] = tuple(args.learners)
    if args.critic:
        over["critic_arch"] = args.critic
    if args.heuristic:
        over["receiving_heuristic"] = args.heuristic
    if args.interleave:
        over["interleave"] = args.interleave
    cfg = run.train_config(**over)
    if args.frozen:
        try:
            cfg = marl.make_second_iteration_config(args.frozen, cfg, run.topology)
        except (MarlError, OSError) as exc:
            raise ConfigError(str(exc)) from exc
    out = Path(args.out or "runs/train")
    result = marl.train(cfg, out_dir=out, env=run.make_env())
    print(f"best eval return {result.best_eval:.4f}; bundle written to {out / 'best'}")
    return EXIT_OK


def cmd_evaluate(args, run) -> int:
    ec = EvalConfig(args.strategy, args.assist, run.eval_episodes, run.eval_base_seed, checkpoint=args.checkpoint)
    totals = harness.run_eval(ec, run)
    name = args.strategy if args.assist == "non_assisted" else f"{args.strategy}_assisted"
    report = ExperimentReport("evaluate", run.config_hash({"preset": "evaluate", "strategy": name}),
                              [StrategyResult(name, ec.seeds, totals)], [])
    if args.out:
        _emit(harness.export_report(report, args.format), args.out)
    sys.stdout.write(_summary_lines(report))
    return EXIT_OK


def cmd_experiment(args, run) -> int:
    work = Path(args.out).with_suffix("") if args.out else None
    if work is not None:
        work = work.parent / f"{work.name}_artifacts"
    report = harness.run_experiment_preset(args.preset, run, work)
    text = harness.export_report(report, args.format)
    _emit(text, args.out)
    if args.out:
        sys.stdout.write(_summary_lines(report))
    return EXIT_OK if report.complete else EXIT_RUNTIME


def cmd_export_trace(args, run) -> int:
    env = run.make_env()
    seed = run.eval_base_seed
    if args.strategy.endswith("checkpoint"):
        if not args.checkpoint:
            raise ConfigError(f"strategy {args.strategy} needs --checkpoint")
        ps, manifest = harness.load_checkpoint_for_env(env, args.checkpoint, args.strategy)
        binding = marl.binding_from_manifest(env, manifest, run.heuristics)
        mode = "alternate_by_step" if args.assist == "assisted" else "actor_only"
        inter = marl.InterleavePolicy(mode, binding, manifest.get("parity", "global"))
        marl.collect_episode(env, ps, inter, seed=seed, greedy=True, store=False, record_trace=True)
    else:
        harness.rollout_heuristic(env, args.strategy, seed, run.heuristics, record_trace=True)
    rows = [r.as_dict() for r in env.state.trace]
    if args.format == "json":
        text = json.dumps({"seed": seed, "strategy": args.strategy, "records": rows}, indent=1) + "\n"
    else:
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=TRACE_COLUMNS, lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
        text = buf.getvalue()
    _emit(text, args.out)
    return EXIT_OK


COMMANDS = {
    "simulate": cmd_simulate,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "experiment": cmd_experiment,
    "export-trace": cmd_export_trace,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        run = _run_config(args)
        return COMMANDS[args.command](args, run)
    except (ConfigError, TopologyError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:
        logging.getLogger(__name__).debug("failure", exc_info=True)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
