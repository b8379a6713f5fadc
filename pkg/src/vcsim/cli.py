"""Batch command-line surface.

Subcommands: ``tools``, ``validate``, ``stats``, ``score``, ``filter``,
``run``, ``rollout``, ``bounds``. All primary outputs are machine-readable
JSON/JSONL written atomically into the output directory; ``--pretty`` adds
human tables on stdout. Seeds are explicit (flag or config file), never
wall-clock, so reruns are byte-identical.

Exit codes: 0 success, 2 input error, 3 partial data error, 4 remote
failure, 64 usage.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional, Sequence

from . import bounds as bounds_mod
from .env import TaskSpec, TaskError, load_task_suite, replay_transcript, read_transcript, write_transcript
from .judgers import Judger, RuleJudger, make_judger
from .offline import ScoredRecord, StoredTrajectory, load_trajectory_dataset, score_dataset
from .reward import RewardConfig, RewardConfigError, filter_dataset
from .rollout import (
    GoldenPolicy,
    NOISE_MODES,
    NoisyPolicy,
    RemotePolicy,
    RolloutGroup,
    export_training_records,
    run_group,
    run_rollout,
)
from .tools import (
    MediaCatalog,
    RegistryError,
    ToolRegistry,
    data_path,
    load_catalog,
    load_registry,
)
from .trajectory import Trajectory, parse_trajectory, trajectory_stats

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_PARTIAL = 3
EXIT_REMOTE = 4
EXIT_USAGE = 64


class CliError(Exception):
    def __init__(self, message: str, exit_code: int = EXIT_INPUT):
        super().__init__(message)
        self.exit_code = exit_code


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):  # noqa: D102 - argparse hook
        raise _UsageError(message)


@dataclass
class CliConfig:
    """Paths and defaults shared by every subcommand."""

    tools_manifest: Optional[str] = None
    media_catalog: Optional[str] = None
    reward_config: Optional[str] = None
    task_suite: Optional[str] = None
    seed: Optional[int] = None
    judger: str = "rule"
    output_dir: str = "out"

    @classmethod
    def load(cls, path: Optional[str]) -> "CliConfig":
        if path is None:
            return cls()
        try:
            with open(path, "r", encoding="utf-8") as fh:
                raw = json.load(fh)
        except OSError as exc:
            raise CliError(f"cannot read config {path}: {exc}")
        except json.JSONDecodeError as exc:
            raise CliError(f"config {path} is not valid JSON: {exc}")
        known = {f for f in cls.__dataclass_fields__}  # noqa: C416
        unknown = set(raw) - known
        if unknown:
            raise CliError(f"config {path} has unknown keys: {sorted(unknown)}")
        return cls(**raw)


@dataclass
class Runtime:
    registry: ToolRegistry
    catalog: MediaCatalog
    reward_config: RewardConfig
    tasks: Optional[list[TaskSpec]]
    judger_kind: str
    seed: Optional[int]
    out_dir: Path
    pretty: bool

    def make_judger(self) -> Judger:
        return make_judger(self.judger_kind, self.registry)

    def require_seed(self) -> int:
        if self.seed is None:
            raise CliError("a seed is required (pass --seed or set it in the config)")
        return self.seed

    def require_tasks(self) -> list[TaskSpec]:
        if not self.tasks:
            raise CliError("a task suite is required (pass --suite or set it in the config)")
        return self.tasks


def _build_runtime(args: argparse.Namespace, need_suite: bool = False) -> Runtime:
    config = CliConfig.load(getattr(args, "config", None))
    tools_path = getattr(args, "tools", None) or config.tools_manifest or data_path("tools.json")
    catalog_path = getattr(args, "catalog", None) or config.media_catalog or data_path(
        "media_catalog.json"
    )
    reward_path = getattr(args, "reward_config", None) or config.reward_config
    suite_path = getattr(args, "suite", None) or config.task_suite
    seed = getattr(args, "seed", None)
    if seed is None:
        seed = config.seed
    judger_kind = getattr(args, "judger", None) or config.judger
    out_dir = Path(getattr(args, "out", None) or config.output_dir)

    try:
        registry = load_registry(tools_path)
        catalog = load_catalog(catalog_path)
        reward_config = (
            RewardConfig.from_file(reward_path) if reward_path else RewardConfig()
        )
        reward_config.validate()
        tasks = load_task_suite(suite_path) if suite_path else None
    except (RegistryError, RewardConfigError, TaskError, OSError) as exc:
        raise CliError(str(exc))
    if judger_kind not in ("rule", "remote"):
        raise CliError(f"unknown judger {judger_kind!r}; expected rule or remote")
    if need_suite and not tasks:
        raise CliError("this command needs a task suite (--suite)")
    return Runtime(
        registry=registry,
        catalog=catalog,
        reward_config=reward_config,
        tasks=tasks,
        judger_kind=judger_kind,
        seed=seed,
        out_dir=out_dir,
        pretty=bool(getattr(args, "pretty", False)),
    )


def _write_atomic(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", encoding="utf-8") as fh:
        fh.write(text)
    os.replace(tmp, path)


def _write_jsonl(path: Path, records: Sequence[dict]) -> None:
    body = "\n".join(json.dumps(r, sort_keys=True) for r in records)
    _write_atomic(path, body + ("\n" if records else ""))


def _write_json(path: Path, record: dict) -> None:
    _write_atomic(path, json.dumps(record, sort_keys=True, indent=2) + "\n")


def _load_inputs(paths: Sequence[str]) -> list[StoredTrajectory]:
    records: list[StoredTrajectory] = []
    for raw_path in paths:
        path = Path(raw_path)
        if not path.exists():
            raise CliError(f"input not found: {path}")
        if path.suffix == ".jsonl":
            try:
                records.extend(load_trajectory_dataset(path))
            except ValueError as exc:
                raise CliError(str(exc))
        else:
            records.append(
                StoredTrajectory(task_id=path.stem, source=path.read_text(encoding="utf-8"))
            )
    return records


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def cmd_tools(args: argparse.Namespace) -> int:
    runtime = _build_runtime(args)
    if runtime.pretty:
        width = max(len(n) for n in runtime.registry.names())
        for tool in runtime.registry:
            print(f"{tool.name:<{width}}  {tool.category:<26} -> {tool.output.modality}")
    else:
        for name in runtime.registry.names():
            print(name)
    return EXIT_OK


def cmd_validate(args: argparse.Namespace) -> int:
    runtime = _build_runtime(args)
    records = _load_inputs(args.inputs)
    out = []
    defect_total = 0
    for record in records:
        report = parse_trajectory(record.source, task_id=record.task_id)
        defect_total += len(report.defects)
        out.append(
            {
                "task_id": record.task_id,
                "ok": report.ok,
                "parsed": report.trajectory is not None,
                "defects": [
                    {"kind": d.kind, "position": d.position, "message": d.message}
                    for d in report.defects
                ],
            }
        )
    _write_jsonl(runtime.out_dir / "validate.jsonl", out)
    print(f"validated {len(out)} trajectories, {defect_total} defects")
    return EXIT_OK


def cmd_stats(args: argparse.Namespace) -> int:
    runtime = _build_runtime(args)
    records = _load_inputs(args.inputs)
    if not records:
        raise CliError("no trajectories to summarize")
    trajectories = []
    for record in records:
        report = parse_trajectory(record.source, task_id=record.task_id)
        if report.trajectory is not None:
            trajectories.append(report.trajectory)
        else:
            trajectories.append(Trajectory([], source=record.source, task_id=record.task_id))
    stats = trajectory_stats(trajectories)
    _write_json(runtime.out_dir / "stats.json", stats.to_dict())
    if runtime.pretty:
        print(f"trajectories:        {len(trajectories)}")
        print(f"mean steps:          {stats.mean_steps:.2f}")
        for k, v in stats.frac_steps_gt.items():
            print(f"frac steps > {k}:     {v:.2%}")
        print(f"mean token estimate: {stats.mean_token_estimate:.0f}")
        for k, v in stats.frac_tokens_gt.items():
            print(f"frac tokens > {k}: {v:.2%}")
    else:
        print(json.dumps(stats.to_dict(), sort_keys=True))
    return EXIT_OK


def _score_records(args: argparse.Namespace, runtime: Runtime) -> list[ScoredRecord]:
    records = _load_inputs(args.inputs)
    seed = runtime.require_seed()
    return score_dataset(
        records,
        runtime.require_tasks(),
        runtime.registry,
        runtime.catalog,
        runtime.reward_config,
        runtime.make_judger(),
        seed=seed,
    )


def cmd_score(args: argparse.Namespace) -> int:
    runtime = _build_runtime(args, need_suite=True)
    scored = _score_records(args, runtime)
    _write_jsonl(runtime.out_dir / "scores.jsonl", [s.to_dict() for s in scored])
    flagged = sum(1 for s in scored if s.error is not None)
    for record in scored:
        if record.breakdown is not None:
            print(f"{record.task_id}\ttotal={record.breakdown.total:.4f}")
        else:
            print(f"{record.task_id}\terror={record.error}")
    return EXIT_PARTIAL if flagged else EXIT_OK


def cmd_filter(args: argparse.Namespace) -> int:
    runtime = _build_runtime(args, need_suite=True)
    scored = _score_records(args, runtime)
    threshold = (
        args.threshold if args.threshold is not None else runtime.reward_config.filter_threshold
    )
    scoreable = [(s, s.breakdown) for s in scored if s.breakdown is not None]
    try:
        kept, dropped = filter_dataset(scoreable, threshold)
    except RewardConfigError as exc:
        raise CliError(str(exc))

    def rows(items):
        return [
            {"task_id": s.task_id, "source": s.source, "reward": b.to_dict()}
            for s, b in items
        ]

    _write_jsonl(runtime.out_dir / "kept.jsonl", rows(kept))
    _write_jsonl(runtime.out_dir / "dropped.jsonl", rows(dropped))
    flagged = sum(1 for s in scored if s.error is not None)
    print(f"kept {len(kept)}, dropped {len(dropped)} (threshold {threshold})")
    return EXIT_PARTIAL if flagged else EXIT_OK


def _make_policy(kind: str, task: TaskSpec, registry: ToolRegistry, seed: int):
    if kind == "golden":
        return GoldenPolicy(task, registry=registry, seed=seed)
    if kind.startswith("noisy:"):
        mode = kind.split(":", 1)[1]
        if mode not in NOISE_MODES:
            raise CliError(f"unknown noise mode {mode!r}; expected one of {NOISE_MODES}")
        return NoisyPolicy(task, mode, registry=registry, seed=seed)
    if kind == "remote":
        return RemotePolicy()
    raise CliError(f"unknown policy {kind!r}; expected golden, noisy:<mode>, or remote")


def cmd_rollout(args: argparse.Namespace) -> int:
    runtime = _build_runtime(args, need_suite=True)
    seed = runtime.require_seed()
    tasks = runtime.require_tasks()
    group_size = args.group_size
    judger_factory: Callable[[], Judger] = runtime.make_judger

    def one_group(item: tuple[int, TaskSpec]) -> RolloutGroup:
        index, task = item
        policy = _make_policy(args.policy, task, runtime.registry, seed)
        return run_group(
            task,
            policy,
            group_size,
            base_seed=seed + index * group_size,
            registry=runtime.registry,
            catalog=runtime.catalog,
            config=runtime.reward_config,
            judger_factory=judger_factory,
        )

    items = list(enumerate(tasks))
    try:
        if args.jobs > 1:
            with ThreadPoolExecutor(max_workers=args.jobs) as pool:
                groups = list(pool.map(one_group, items))
        else:
            groups = [one_group(item) for item in items]
    except Exception as exc:  # pragma: no cover - policy construction errors
        raise CliError(str(exc))

    count = export_training_records(groups, runtime.out_dir / "records.jsonl")
    remote_failures = sum(
        1 for g in groups for r in g.records if r.policy_failed
    )
    for group in groups:
        mean = sum(group.rewards) / len(group.rewards)
        summary = {
            "task_id": group.task_id,
            "mean_reward": mean,
            "rewards": group.rewards,
            "advantages": group.advantages,
        }
        if runtime.pretty:
            adv = ", ".join(f"{a:+.3f}" for a in group.advantages)
            print(f"{group.task_id:<24} mean={mean:.3f}  adv=[{adv}]")
        else:
            print(json.dumps(summary, sort_keys=True))
    print(f"exported {count} records -> {runtime.out_dir / 'records.jsonl'}")
    if remote_failures:
        print(f"{remote_failures} rollouts hit policy failures", file=sys.stderr)
        return EXIT_REMOTE
    return EXIT_OK


def cmd_run(args: argparse.Namespace) -> int:
    runtime = _build_runtime(args)
    if args.replay:
        events = read_transcript(args.replay)
        _, recomputed, recorded = replay_transcript(
            events,
            runtime.registry,
            runtime.catalog,
            runtime.reward_config,
            runtime.make_judger(),
        )
        print(json.dumps(recomputed.to_dict(), sort_keys=True))
        if recorded is not None:
            match = recorded.to_dict() == recomputed.to_dict()
            print(f"replay matches recorded breakdown: {match}")
            if not match:
                return EXIT_PARTIAL
        return EXIT_OK

    tasks = runtime.require_tasks()
    seed = runtime.require_seed()
    by_id = {t.task_id: t for t in tasks}
    if args.task not in by_id:
        raise CliError(f"task {args.task!r} not found in the suite")
    task = by_id[args.task]
    policy = _make_policy(args.policy, task, runtime.registry, seed)
    record = run_rollout(
        task,
        policy,
        seed,
        runtime.registry,
        runtime.catalog,
        runtime.reward_config,
        runtime.make_judger(),
    )
    write_transcript(runtime.out_dir / f"transcript_{task.task_id}_s{seed}.jsonl", record.events)
    if runtime.pretty:
        breakdown = record.breakdown
        for name in ("plan", "format", "tool", "result", "traj", "cons", "fine", "total"):
            print(f"{name:<8} {getattr(breakdown, name):.4f}")
        for facet, value in breakdown.facet_scores.items():
            print(f"  facet {facet:<28} {value:.4f}")
    else:
        print(json.dumps(record.breakdown.to_dict(), sort_keys=True))
    if record.policy_failed:
        return EXIT_REMOTE
    return EXIT_OK


def cmd_bounds(args: argparse.Namespace) -> int:
    runtime = _build_runtime(args)
    try:
        with open(args.inputs, "r", encoding="utf-8") as fh:
            raw = json.load(fh)
    except OSError as exc:
        raise CliError(f"cannot read bound inputs: {exc}")
    except json.JSONDecodeError as exc:
        raise CliError(f"bound inputs are not valid JSON: {exc}")
    defaulted = [k for k in ("delta", "alpha", "beta", "kappa") if k not in raw]
    try:
        inputs = bounds_mod.BoundInputs.from_dict(raw)
        report = bounds_mod.improvement_lower_bound(inputs)
    except bounds_mod.BoundInputError as exc:
        raise CliError(str(exc))
    if defaulted:
        print(
            "caveat: environment-specific scaling factors defaulted to 1: "
            + ", ".join(defaulted),
            file=sys.stderr,
        )
    _write_json(runtime.out_dir / "bounds_report.json", report.to_dict())
    print(json.dumps(report.to_dict(), sort_keys=True))
    if args.scan:
        grid = [i / (args.scan - 1) for i in range(args.scan)] if args.scan > 1 else [inputs.c_tool]
        scan = bounds_mod.monotonicity_scan(inputs, grid)
        _write_jsonl(
            runtime.out_dir / "bounds_scan.jsonl",
            [{"c_tool": c, "improvement_lower_bound": v} for c, v in scan],
        )
        if runtime.pretty:
            for c, v in scan:
                print(f"c_tool={c:.3f}  lower_bound={v:+.4f}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="CLI config JSON (paths, seed, judger)")
    parser.add_argument("--tools", help="tools manifest path (default: packaged)")
    parser.add_argument("--catalog", help="media catalog path (default: packaged)")
    parser.add_argument("--reward-config", dest="reward_config", help="reward config JSON")
    parser.add_argument("--suite", help="task suite JSONL")
    parser.add_argument("--out", help="output directory (default: out)")
    parser.add_argument("--seed", type=int, help="base seed (required for scoring/rollouts)")
    parser.add_argument("--judger", choices=("rule", "remote"), help="plan judger backend")
    parser.add_argument("--pretty", action="store_true", help="print human-readable tables")


def build_parser() -> _Parser:
    parser = _Parser(prog="vcsim", description=__doc__)
    sub = parser.add_subparsers(dest="command", metavar="command")

    p = sub.add_parser("tools", help="list the registered tools")
    _add_common(p)
    p.set_defaults(func=cmd_tools)

    p = sub.add_parser("validate", help="parse trajectories and report defects")
    _add_common(p)
    p.add_argument("inputs", nargs="+", help="trajectory .txt files or .jsonl datasets")
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("stats", help="dataset step/token statistics")
    _add_common(p)
    p.add_argument("inputs", nargs="+", help="trajectory .txt files or .jsonl datasets")
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("score", help="score trajectories against their tasks")
    _add_common(p)
    p.add_argument("inputs", nargs="+", help="trajectory .txt files or .jsonl datasets")
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("filter", help="score and partition by total reward")
    _add_common(p)
    p.add_argument("inputs", nargs="+", help="trajectory .txt files or .jsonl datasets")
    p.add_argument("--threshold", type=float, help="keep totals >= threshold")
    p.set_defaults(func=cmd_filter)

    p = sub.add_parser("run", help="run or replay a single episode")
    _add_common(p)
    p.add_argument("--task", help="task id from the suite")
    p.add_argument("--policy", default="golden", help="golden | noisy:<mode> | remote")
    p.add_argument("--replay", help="transcript JSONL to replay instead of running")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("rollout", help="run grouped rollouts over the suite")
    _add_common(p)
    p.add_argument("--policy", default="golden", help="golden | noisy:<mode> | remote")
    p.add_argument("--group-size", dest="group_size", type=int, default=4)
    p.add_argument("--jobs", type=int, default=1, help="concurrent groups")
    p.set_defaults(func=cmd_rollout)

    p = sub.add_parser("bounds", help="evaluate the transfer bound diagnostics")
    _add_common(p)
    p.add_argument("--inputs", required=True, help="bound inputs JSON document")
    p.add_argument("--scan", type=int, default=0, help="tool-capability grid points")
    p.set_defaults(func=cmd_bounds)

    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    if not getattr(args, "command", None):
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except _UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
