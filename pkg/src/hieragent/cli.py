"""Command-line entry point.

Exit status: 0 on success, 1 on usage errors, 2 on runtime failures.
"""

from __future__ import annotations

import argparse
import contextlib
import json
import logging
import socket
import sys
from importlib import resources
from typing import Sequence

from . import bench, grpo, toy
from .clients import (
    ChatCompletionsClient,
    HeuristicPlanner,
    HeuristicToolcaller,
    NoisyPlanner,
    QuestionScriptPolicy,
)
from .config import EngineConfig, PolicyEndpoint, load_config
from .protocol import dumps_trajectories, serialize_trajectory
from .rollout import RunMode, ToolcallerConfig, run_rollout
from .search import CachedSearchClient, FixtureCorpus, HttpSearchClient


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def bundled(name: str) -> str:
    return str(resources.files("hieragent") / "data" / name)


@contextlib.contextmanager
def no_network():
    """Make any outbound socket connection fail for the duration."""

    def refuse(*args, **kwargs):
        raise OSError("network access is disabled by --offline")

    saved = socket.socket.connect, socket.socket.connect_ex, socket.create_connection
    socket.socket.connect = refuse
    socket.socket.connect_ex = refuse
    socket.create_connection = refuse
    try:
        yield
    finally:
        socket.socket.connect, socket.socket.connect_ex, socket.create_connection = saved


def make_policy(ep: PolicyEndpoint, role: str):
    if ep.kind == "heuristic":
        return HeuristicToolcaller() if role == "toolcaller" else HeuristicPlanner()
    if ep.kind == "noisy" and role == "planner":
        return NoisyPlanner()
    if ep.kind == "scripted":
        if not ep.script:
            raise UsageError(f"--{role} scripted needs a script file")
        with open(ep.script, encoding="utf-8") as fh:
            return QuestionScriptPolicy(json.load(fh))
    if ep.kind == "http":
        return ChatCompletionsClient(ep.model, ep.url, temperature=ep.temperature,
                                     max_tokens=ep.max_tokens)
    raise UsageError(f"unknown {role} policy kind {ep.kind!r}")


def make_toolcaller(cfg: EngineConfig) -> ToolcallerConfig:
    sb = cfg.search
    if sb.kind == "fixture":
        search = FixtureCorpus.from_jsonl(sb.corpus or bundled("corpus.jsonl"))
    elif sb.kind == "http":
        search = None if sb.replay else HttpSearchClient(sb.url)
    else:
        raise UsageError(f"unknown search backend {sb.kind!r}")
    if sb.cache_dir or sb.replay:
        search = CachedSearchClient(search, sb.cache_dir, replay=sb.replay)
    return ToolcallerConfig(make_policy(cfg.toolcaller_agent, "toolcaller"), search, cfg.toolcaller)


def check_offline(cfg: EngineConfig) -> None:
    if cfg.planner.kind == "http" or cfg.toolcaller_agent.kind == "http":
        raise UsageError("--offline forbids http policy endpoints")
    if cfg.search.kind == "http" and not cfg.search.replay:
        raise UsageError("--offline forbids live search; use the fixture corpus or --replay")


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", default=argparse.SUPPRESS, help="JSON config file")
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS)
    common.add_argument("--offline", action="store_true", default=argparse.SUPPRESS,
                        help="forbid live endpoints")

    engine = _Parser(add_help=False)
    engine.add_argument("--mode", choices=[m.value for m in RunMode])
    engine.add_argument("--max-rounds", type=int)
    engine.add_argument("--policy", choices=["heuristic", "noisy", "scripted", "http"])
    engine.add_argument("--script", help="JSON file mapping question -> list of emissions")
    engine.add_argument("--toolcaller", choices=["heuristic", "scripted", "http"])
    engine.add_argument("--toolcaller-script")
    engine.add_argument("--corpus", help="fixture corpus (JSON lines)")
    engine.add_argument("--search", choices=["fixture", "http"])
    engine.add_argument("--cache-dir")
    engine.add_argument("--replay", action="store_true", default=None)
    engine.add_argument("--concurrency", type=int)

    p = _Parser(prog="hieragent", parents=[common])
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    r = sub.add_parser("rollout", parents=[common, engine], help="run one question")
    r.add_argument("--question", required=True)
    r.add_argument("--prompt-id", default="cli")
    r.add_argument("--dump", help="append the trajectory as a JSON line")

    e = sub.add_parser("eval", parents=[common, engine], help="evaluate a dataset")
    e.add_argument("--dataset", required=True)
    e.add_argument("--format-hint")
    e.add_argument("--report-out", required=True)
    e.add_argument("--csv-out")
    e.add_argument("--trajectories-out")

    x = sub.add_parser("export-batch", parents=[common, engine], help="export GRPO training groups")
    x.add_argument("--dataset", default=None, help="questions (default: bundled fixture)")
    x.add_argument("--prompts", type=int, default=3)
    x.add_argument("--group-size", type=int, default=12)
    x.add_argument("--out", required=True)

    t = sub.add_parser("train-toy", parents=[common], help="GRPO on the tabular toy policy")
    t.add_argument("--steps", type=int, default=200)
    t.add_argument("--lr", type=float, default=2.0)
    t.add_argument("--beta", type=float)
    t.add_argument("--updates-per-batch", type=int, default=1)
    t.add_argument("--curve-out", required=True)

    m = sub.add_parser("mixture", parents=[common], help="build a training mixture file")
    m.add_argument("--hotpot", required=True)
    m.add_argument("--twowiki", required=True)
    m.add_argument("--total", type=int, default=180)
    m.add_argument("--ratio", type=float, required=True,
                   help="fraction drawn from HotpotQA")
    m.add_argument("--out", required=True)
    return p


def resolve_config(args) -> EngineConfig:
    cfg = load_config(getattr(args, "config", None))
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    if getattr(args, "mode", None):
        cfg.mode = args.mode
    if getattr(args, "max_rounds", None) is not None:
        if args.max_rounds < 1:
            raise UsageError("--max-rounds must be >= 1")
        cfg.limits.max_rounds = args.max_rounds
    if getattr(args, "policy", None):
        cfg.planner.kind = args.policy
    if getattr(args, "script", None):
        cfg.planner.script = args.script
    if getattr(args, "toolcaller", None):
        cfg.toolcaller_agent.kind = args.toolcaller
    if getattr(args, "toolcaller_script", None):
        cfg.toolcaller_agent.script = args.toolcaller_script
    if getattr(args, "corpus", None):
        cfg.search.corpus = args.corpus
    if getattr(args, "search", None):
        cfg.search.kind = args.search
    if getattr(args, "cache_dir", None):
        cfg.search.cache_dir = args.cache_dir
    if getattr(args, "replay", None):
        cfg.search.replay = True
    if getattr(args, "concurrency", None):
        cfg.concurrency = args.concurrency
    if getattr(args, "beta", None) is not None:
        cfg.grpo.kl_beta = args.beta
    try:
        RunMode(cfg.mode)
    except ValueError:
        raise UsageError(f"unknown mode {cfg.mode!r} in config") from None
    return cfg


def cmd_rollout(args, cfg: EngineConfig) -> int:
    mode = RunMode(cfg.mode)
    t = run_rollout(args.question, args.prompt_id, mode, make_policy(cfg.planner, "planner"),
                    make_toolcaller(cfg), cfg.limits, seed=cfg.seed)
    print(serialize_trajectory(t))
    print(f"# terminal={t.terminal.value} rounds_used={t.rounds_used}")
    if args.dump:
        with open(args.dump, "a", encoding="utf-8") as fh:
            fh.write(dumps_trajectories([t]))
    return 0


def cmd_eval(args, cfg: EngineConfig) -> int:
    data = bench.load_dataset(args.dataset, args.format_hint)
    mode = RunMode(cfg.mode)
    report = bench.evaluate(data, mode, make_policy(cfg.planner, "planner"), cfg,
                            make_toolcaller(cfg))
    report.write(args.report_out)
    if args.csv_out:
        report.write_csv(args.csv_out)
    if args.trajectories_out:
        with open(args.trajectories_out, "w", encoding="utf-8") as fh:
            for d in report.trajectories:
                fh.write(json.dumps(d, ensure_ascii=False, sort_keys=True) + "\n")
    print(f"{report.dataset} [{mode.value}] n={report.n} EM={report.em_pct:.1f} "
          f"CEM={report.cem_pct:.1f}")
    return 0


def cmd_export_batch(args, cfg: EngineConfig) -> int:
    if args.group_size < 2 or args.prompts < 1:
        raise UsageError("--group-size must be >= 2 and --prompts >= 1")
    data = bench.load_dataset(args.dataset or bundled("mini.jsonl"))[: args.prompts]
    if len(data) < args.prompts:
        raise UsageError(f"dataset has only {len(data)} questions")
    if cfg.planner.kind == "heuristic":
        cfg.planner.kind = "noisy"  # identical rollouts would give all-zero advantages
    policy = make_policy(cfg.planner, "planner")
    toolcaller = make_toolcaller(cfg)
    mode = RunMode(cfg.mode)
    cfg.grpo.group_size = args.group_size
    groups = bench.collect_training_groups(data, mode, policy, cfg, toolcaller)
    n = grpo.export_batch(groups, args.out, cfg.grpo)
    print(f"wrote {n} records in {len(groups)} groups to {args.out}")
    return 0


def cmd_train_toy(args, cfg: EngineConfig) -> int:
    if args.steps < 1:
        raise UsageError("--steps must be >= 1")
    result = toy.toy_policy_train(cfg=cfg.grpo, steps=args.steps, seed=cfg.seed, lr=args.lr,
                                  updates_per_batch=args.updates_per_batch)
    result.write_csv(args.curve_out)
    r = result.mean_rewards
    print(f"mean reward {r[0]:.3f} -> {r[-1]:.3f} over {len(r)} steps")
    return 0


def cmd_mixture(args, cfg: EngineConfig) -> int:
    hotpot = bench.load_dataset(args.hotpot, "hotpotqa")
    twowiki = bench.load_dataset(args.twowiki, "2wiki")
    mix = bench.sample_training_mixture(hotpot, twowiki, args.total, args.ratio, cfg.seed)
    bench.write_dataset(mix, args.out)
    print(f"wrote {len(mix)} samples to {args.out}")
    return 0


COMMANDS = {
    "rollout": cmd_rollout,
    "eval": cmd_eval,
    "export-batch": cmd_export_batch,
    "train-toy": cmd_train_toy,
    "mixture": cmd_mixture,
}


def main(argv: Sequence[str] | None = None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        cfg = resolve_config(args)
        offline = getattr(args, "offline", False)
        if offline:
            check_offline(cfg)
        with no_network() if offline else contextlib.nullcontext():
            return COMMANDS[args.command](args, cfg)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
