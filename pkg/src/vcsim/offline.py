"""Offline scoring of stored trajectories.

Stored trajectories carry the tool_result blocks of their original run, but
the asset attributes needed by the result/consistency components only exist
inside the simulator. Scoring therefore re-executes the recorded tool calls
against a fresh store, mapping asset ids announced in the recorded results
onto the ids produced by the re-simulation so that later calls keep their
references intact. Format is graded on the original text as written.
"""

from __future__ import annotations

import json
import logging
import random
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence, Union

from .env import TaskSpec
from .judgers import Judger, RuleJudger
from .reward import (
    RewardBreakdown,
    RewardConfig,
    compose_reward,
    score_consistency,
    score_format,
    score_plan,
    score_result,
    score_tool,
    score_traj_coherence,
)
from .tools import (
    AssetStore,
    MediaCatalog,
    ToolRegistry,
    ToolResult,
    UnknownToolError,
    execute_call,
)
from .trajectory import (
    Block,
    KIND_TOOL_CALL,
    KIND_TOOL_RESULT,
    ToolCallPayload,
    Trajectory,
    parse_trajectory,
)

logger = logging.getLogger(__name__)


@dataclass
class StoredTrajectory:
    task_id: str
    source: str


def load_trajectory_dataset(path: Union[str, Path]) -> list[StoredTrajectory]:
    """JSONL records ``{"task_id": ..., "source": ...}``, one per trajectory."""
    records = []
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                raw = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValueError(f"{path}:{line_no}: invalid JSON: {exc}") from exc
            if "source" not in raw:
                raise ValueError(f"{path}:{line_no}: record missing 'source'")
            records.append(
                StoredTrajectory(task_id=str(raw.get("task_id", "")), source=raw["source"])
            )
    return records


def _recorded_asset_ids(content: str) -> list[str]:
    """Asset ids announced by a recorded tool_result block, if parseable."""
    try:
        data = json.loads(content)
    except (json.JSONDecodeError, ValueError):
        return []
    assets = data.get("assets") if isinstance(data, dict) else None
    if not isinstance(assets, list):
        return []
    return [a["id"] for a in assets if isinstance(a, dict) and isinstance(a.get("id"), str)]


def _translate(value: object, id_map: dict[str, str]) -> object:
    if isinstance(value, str):
        return id_map.get(value, value)
    if isinstance(value, list):
        return [_translate(item, id_map) for item in value]
    return value


def rescore_trajectory(
    source: str,
    task: TaskSpec,
    registry: ToolRegistry,
    catalog: MediaCatalog,
    config: Optional[RewardConfig] = None,
    judger: Optional[Judger] = None,
    seed: int = 0,
) -> RewardBreakdown:
    """Score a stored trajectory text against its task.

    Deterministic given (source, task, registry, catalog, config, seed).
    Unparseable sources never fail: they score with degraded format and a
    zero plan gate, carrying an explanatory note.
    """
    config = config or RewardConfig()
    judger = judger or RuleJudger(registry)
    report = parse_trajectory(source, task_id=task.task_id)
    format_score = score_format(report, config)

    if report.trajectory is None:
        breakdown = compose_reward(
            plan=0.0,
            format_score=format_score,
            tool=1.0,
            result=0.0,
            traj=0.0,
            cons=1.0 if not task.consistency else 0.0,
            config=config,
            facet_scores={},
            notes=["trajectory unparseable; structural defects prevented re-simulation"],
        )
        return breakdown

    trajectory = report.trajectory
    store = AssetStore(namespace=f"{task.task_id}.rescore{seed}")
    rng = random.Random(seed)
    id_map: dict[str, str] = {}
    results: list[ToolResult] = []
    executed: list[str] = []
    notes: list[str] = []

    blocks = trajectory.blocks
    for index, block in enumerate(blocks):
        if block.kind != KIND_TOOL_CALL or block.payload is None:
            continue
        arguments = {
            key: _translate(value, id_map) for key, value in block.payload.arguments.items()
        }
        try:
            result = execute_call(
                registry, catalog, store, (block.payload.name, arguments), rng
            )
        except UnknownToolError:
            result = ToolResult(
                success=False,
                message=f"{block.payload.name} is not a registered tool",
            )
        results.append(result)
        executed.append(block.payload.name)
        follower = blocks[index + 1] if index + 1 < len(blocks) else None
        if follower is not None and follower.kind == KIND_TOOL_RESULT:
            recorded = _recorded_asset_ids(follower.content)
            for old_id, new_asset in zip(recorded, result.assets):
                id_map[old_id] = new_asset.id

    # Consistency checks references against re-simulated ids, so rewrite the
    # call payloads the same way execution saw them.
    rewritten = Trajectory(
        [
            (
                block
                if block.kind != KIND_TOOL_CALL or block.payload is None
                else _rewrite_call(block, id_map)
            )
            for block in blocks
        ],
        source=trajectory.source,
        task_id=trajectory.task_id,
    )

    plan_text = trajectory.plan_text()
    plan_score, facets = score_plan(plan_text, task, registry, judger)
    traj_score = score_traj_coherence(plan_text, executed, judger)
    drain = getattr(judger, "drain_notes", None)
    if callable(drain):
        notes.extend(drain())

    return compose_reward(
        plan=plan_score,
        format_score=format_score,
        tool=score_tool(results, config),
        result=score_result(task, store.assets(), config),
        traj=traj_score,
        cons=score_consistency(task, rewritten, store, registry),
        config=config,
        facet_scores=facets,
        notes=notes,
    )


def _rewrite_call(block: Block, id_map: dict[str, str]) -> Block:
    payload = block.payload
    arguments = {k: _translate(v, id_map) for k, v in payload.arguments.items()}
    new_payload = ToolCallPayload(payload.name, arguments)
    return Block(block.kind, block.content, payload=new_payload, span=block.span)


@dataclass
class ScoredRecord:
    task_id: str
    source: str
    breakdown: Optional[RewardBreakdown]
    error: Optional[str] = None  # set when no matching task exists

    def to_dict(self) -> dict:
        out: dict = {"task_id": self.task_id}
        if self.breakdown is not None:
            out["reward"] = self.breakdown.to_dict()
        if self.error is not None:
            out["error"] = self.error
        return out


def score_dataset(
    records: Sequence[StoredTrajectory],
    tasks: Sequence[TaskSpec],
    registry: ToolRegistry,
    catalog: MediaCatalog,
    config: Optional[RewardConfig] = None,
    judger: Optional[Judger] = None,
    seed: int = 0,
) -> list[ScoredRecord]:
    """Score every stored trajectory against its task (matched by task_id)."""
    by_id = {t.task_id: t for t in tasks}
    scored = []
    for record in records:
        task = by_id.get(record.task_id)
        if task is None:
            scored.append(
                ScoredRecord(
                    record.task_id,
                    record.source,
                    breakdown=None,
                    error=f"no task with id {record.task_id!r} in the suite",
                )
            )
            continue
        breakdown = rescore_trajectory(
            record.source, task, registry, catalog, config, judger, seed
        )
        scored.append(ScoredRecord(record.task_id, record.source, breakdown))
    return scored
