"""Episodic environment: task loading, reset/step/finalize, transcripts.

An episode owns an asset store and an accumulated block history. Actions are
whole text chunks (possibly several tagged blocks); each tool_call block is
executed against the simulator and answered with an env-authored tool_result
block. Malformed actions never abort an episode: their defects are recorded
and graded by the format component at finalize time.
"""

from __future__ import annotations

import json
import logging
import random
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Optional, Sequence, Union

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
    DEFECT_BAD_ORDERING,
    Defect,
    KIND_ANSWER,
    KIND_PLAN,
    KIND_TOOL_CALL,
    ParseReport,
    Trajectory,
    _ordering_defects,
    parse_trajectory,
    tool_result,
)

logger = logging.getLogger(__name__)

STATUS_RUNNING = "running"
STATUS_ANSWERED = "answered"
STATUS_TRUNCATED = "truncated"

OBS_TASK_PROMPT = "task_prompt"
OBS_TOOL_FEEDBACK = "tool_feedback"
OBS_TERMINAL = "terminal"

REQUIRED_MODALITIES = ("image", "video", "mixed")


class EpisodeError(RuntimeError):
    """Raised on lifecycle misuse (stepping or finalizing at the wrong time)."""


class TaskError(ValueError):
    """Raised when a task specification violates its invariants."""


@dataclass
class TaskSpec:
    task_id: str
    task_type: str = ""
    query: str = ""
    required_modality: Optional[str] = None
    required_count: Optional[int] = None
    required_duration_s: Optional[float] = None
    required_storyboards: Optional[int] = None
    consistency: bool = False
    max_steps: int = 50

    def validate(self) -> None:
        if not self.task_id:
            raise TaskError("task_id is required")
        if self.max_steps < 1:
            raise TaskError(f"{self.task_id}: max_steps must be >= 1")
        if self.required_modality is not None and self.required_modality not in REQUIRED_MODALITIES:
            raise TaskError(
                f"{self.task_id}: required_modality must be one of {REQUIRED_MODALITIES}"
            )
        requirements = (
            self.required_modality,
            self.required_count,
            self.required_duration_s,
            self.required_storyboards,
        )
        if all(r is None for r in requirements):
            raise TaskError(f"{self.task_id}: at least one requirement must be present")
        for name in ("required_count", "required_storyboards"):
            value = getattr(self, name)
            if value is not None and value < 1:
                raise TaskError(f"{self.task_id}: {name} must be >= 1")
        if self.required_duration_s is not None and self.required_duration_s <= 0:
            raise TaskError(f"{self.task_id}: required_duration_s must be > 0")

    def to_dict(self) -> dict:
        out: dict = {"task_id": self.task_id}
        if self.task_type:
            out["task_type"] = self.task_type
        if self.query:
            out["query"] = self.query
        for key in (
            "required_modality",
            "required_count",
            "required_duration_s",
            "required_storyboards",
        ):
            value = getattr(self, key)
            if value is not None:
                out[key] = value
        if self.consistency:
            out["consistency"] = True
        if self.max_steps != 50:
            out["max_steps"] = self.max_steps
        return out

    @classmethod
    def from_dict(cls, raw: Mapping) -> "TaskSpec":
        spec = cls(
            task_id=str(raw.get("task_id", "")),
            task_type=str(raw.get("task_type", "")),
            query=str(raw.get("query", "")),
            required_modality=raw.get("required_modality"),
            required_count=raw.get("required_count"),
            required_duration_s=raw.get("required_duration_s"),
            required_storyboards=raw.get("required_storyboards"),
            consistency=bool(raw.get("consistency", False)),
            max_steps=int(raw.get("max_steps", 50)),
        )
        spec.validate()
        return spec


def load_task_suite(path: Union[str, Path]) -> list[TaskSpec]:
    """Read a JSONL task suite; every record must validate."""
    tasks = []
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                raw = json.loads(line)
            except json.JSONDecodeError as exc:
                raise TaskError(f"{path}:{line_no}: invalid JSON: {exc}") from exc
            tasks.append(TaskSpec.from_dict(raw))
    return tasks


@dataclass
class Observation:
    kind: str
    text: str
    assets: list[dict] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"kind": self.kind, "text": self.text, "assets": list(self.assets)}


@dataclass
class EpisodeState:
    handle: str
    spec: TaskSpec
    registry: ToolRegistry
    catalog: MediaCatalog
    store: AssetStore
    seed: int
    rng: random.Random
    history: list[Block] = field(default_factory=list)
    defects: list[Defect] = field(default_factory=list)
    results: list[ToolResult] = field(default_factory=list)
    executed_names: list[str] = field(default_factory=list)
    step_count: int = 0
    status: str = STATUS_RUNNING

    def history_trajectory(self) -> Trajectory:
        return Trajectory(list(self.history), source="", task_id=self.spec.task_id)


def _tool_summary(registry: ToolRegistry) -> str:
    return ", ".join(registry.names())


def _constraints_text(spec: TaskSpec) -> str:
    parts = []
    if spec.required_modality:
        parts.append(f"modality={spec.required_modality}")
    if spec.required_count is not None:
        parts.append(f"count={spec.required_count}")
    if spec.required_duration_s is not None:
        parts.append(f"duration_s={spec.required_duration_s}")
    if spec.required_storyboards is not None:
        parts.append(f"storyboards={spec.required_storyboards}")
    if spec.consistency:
        parts.append("consistency=required")
    return ", ".join(parts)


def reset(
    spec: TaskSpec,
    registry: ToolRegistry,
    catalog: MediaCatalog,
    seed: int,
) -> tuple[EpisodeState, Observation]:
    """Start an episode: fresh store, seeded rng, task-prompt observation."""
    spec.validate()
    handle = f"{spec.task_id}.s{seed}"
    state = EpisodeState(
        handle=handle,
        spec=spec,
        registry=registry,
        catalog=catalog,
        store=AssetStore(namespace=handle),
        seed=seed,
        rng=random.Random(seed),
    )
    text = (
        f"Task: {spec.query}\n"
        f"Constraints: {_constraints_text(spec)}\n"
        f"Tools: {_tool_summary(registry)}"
    )
    return state, Observation(OBS_TASK_PROMPT, text)


def _result_block(result: ToolResult) -> Block:
    payload = {
        "success": result.success,
        "assets": [a.summary() for a in result.assets],
        "message": result.message,
    }
    return tool_result(json.dumps(payload, sort_keys=True))


def step(state: EpisodeState, action: str) -> tuple[Observation, bool]:
    """Apply one text action; executes tool calls and appends their results.

    Ordering defects are deliberately not taken from the per-action parse
    (an action holding a lone tool_call is fine mid-episode); they are
    re-derived over the whole history at finalize time.
    """
    if state.status != STATUS_RUNNING:
        raise EpisodeError(f"episode {state.handle} is {state.status}; cannot step")
    report = parse_trajectory(action)
    state.defects.extend(d for d in report.defects if d.kind != DEFECT_BAD_ORDERING)
    blocks = list(report.trajectory.blocks) if report.trajectory else []

    new_assets: list[dict] = []
    feedback: list[str] = []
    answered = False
    for block in blocks:
        state.history.append(block)
        if block.kind == KIND_ANSWER:
            answered = True
        if block.kind != KIND_TOOL_CALL or block.payload is None:
            continue
        if state.step_count >= state.spec.max_steps:
            feedback.append(f"{block.payload.name} skipped: step budget exhausted")
            continue
        try:
            result = execute_call(
                state.registry, state.catalog, state.store, block.payload, state.rng
            )
        except UnknownToolError:
            result = ToolResult(
                success=False, message=f"{block.payload.name} is not a registered tool"
            )
        state.results.append(result)
        state.executed_names.append(block.payload.name)
        state.step_count += 1
        state.history.append(_result_block(result))
        feedback.append(result.message)
        new_assets.extend(a.summary() for a in result.assets)

    if answered:
        state.status = STATUS_ANSWERED
    elif state.step_count >= state.spec.max_steps:
        state.status = STATUS_TRUNCATED

    done = state.status != STATUS_RUNNING
    if done:
        text = f"episode {state.status}; store holds {len(state.store)} assets"
        return Observation(OBS_TERMINAL, text, new_assets), True
    text = "\n".join(feedback) if feedback else "no tool calls executed"
    return Observation(OBS_TOOL_FEEDBACK, text, new_assets), False


def abort(state: EpisodeState) -> None:
    """Force-truncate a running episode (used when a policy fails mid-rollout)."""
    if state.status == STATUS_RUNNING:
        state.status = STATUS_TRUNCATED


def finalize(
    state: EpisodeState,
    config: Optional[RewardConfig] = None,
    judger: Optional[Judger] = None,
) -> RewardBreakdown:
    """Score the accumulated episode; requires a finished episode."""
    if state.status == STATUS_RUNNING:
        raise EpisodeError(f"episode {state.handle} is still running; cannot finalize")
    config = config or RewardConfig()
    judger = judger or RuleJudger(state.registry)

    trajectory = state.history_trajectory()
    defects = list(state.defects) + _ordering_defects(state.history)
    report = ParseReport(trajectory, defects)

    plan_text = trajectory.plan_text()
    plan_score, facets = score_plan(plan_text, state.spec, state.registry, judger)
    traj_score = score_traj_coherence(plan_text, state.executed_names, judger)

    notes = [f"status={state.status}", f"defects={len(defects)}"]
    drain = getattr(judger, "drain_notes", None)
    if callable(drain):
        notes.extend(drain())

    return compose_reward(
        plan=plan_score,
        format_score=score_format(report, config),
        tool=score_tool(state.results, config),
        result=score_result(state.spec, state.store.assets(), config),
        traj=traj_score,
        cons=score_consistency(state.spec, trajectory, state.store, state.registry),
        config=config,
        facet_scores=facets,
        notes=notes,
    )


# ---------------------------------------------------------------------------
# Transcripts
# ---------------------------------------------------------------------------

EVENT_RESET = "reset"
EVENT_STEP = "step"
EVENT_FINALIZE = "finalize"


def transcript_events(
    spec: TaskSpec, seed: int, actions: Sequence[str], breakdown: RewardBreakdown
) -> list[dict]:
    events = [{"event": EVENT_RESET, "payload": {"task": spec.to_dict(), "seed": seed}}]
    events.extend({"event": EVENT_STEP, "payload": {"action": a}} for a in actions)
    events.append({"event": EVENT_FINALIZE, "payload": {"breakdown": breakdown.to_dict()}})
    return events


def write_transcript(path: Union[str, Path], events: Iterable[dict]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for event in events:
            fh.write(json.dumps(event, sort_keys=True) + "\n")


def read_transcript(path: Union[str, Path]) -> list[dict]:
    events = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                events.append(json.loads(line))
    return events


def replay_transcript(
    events: Sequence[dict],
    registry: ToolRegistry,
    catalog: MediaCatalog,
    config: Optional[RewardConfig] = None,
    judger: Optional[Judger] = None,
) -> tuple[EpisodeState, RewardBreakdown, Optional[RewardBreakdown]]:
    """Re-run a recorded episode; returns (state, recomputed, recorded).

    The recomputed breakdown must be bit-identical to the recorded one for
    any transcript produced by this environment with the same configuration.
    """
    if not events or events[0].get("event") != EVENT_RESET:
        raise EpisodeError("transcript must start with a reset event")
    payload = events[0]["payload"]
    spec = TaskSpec.from_dict(payload["task"])
    state, _ = reset(spec, registry, catalog, int(payload["seed"]))
    recorded: Optional[RewardBreakdown] = None
    for event in events[1:]:
        kind = event.get("event")
        if kind == EVENT_STEP:
            if state.status == STATUS_RUNNING:
                step(state, event["payload"]["action"])
        elif kind == EVENT_FINALIZE:
            recorded = RewardBreakdown.from_dict(event["payload"]["breakdown"])
        else:
            raise EpisodeError(f"unknown transcript event: {kind!r}")
    abort(state)
    breakdown = finalize(state, config, judger)
    return state, breakdown, recorded
