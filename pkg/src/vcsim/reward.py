"""Trajectory reward engine.

The composite reward multiplies a plan-quality score into a weighted sum of
five execution components::

    total = plan * (w_tool*tool + w_format*format + w_result*result
                    + w_traj*traj + w_cons*cons)

so execution alone can never score well without a valid plan. Every
component lives in [0, 1]; numeric knobs (deductions, penalties, the
duration tolerance, the filter threshold) come from :class:`RewardConfig`.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Optional, Sequence, Union

from .tools import (
    AssetStore,
    MODALITY_IMAGE,
    MODALITY_VIDEO,
    MediaAsset,
    ToolRegistry,
    ToolResult,
)
from .trajectory import (
    DEFECT_BAD_ORDERING,
    DEFECT_EMPTY_BLOCK,
    DEFECT_INVALID_JSON,
    DEFECT_UNBALANCED_TAG,
    DEFECT_UNKNOWN_TAG,
    KIND_TOOL_CALL,
    ParseReport,
    Trajectory,
)

MODALITY_REQ_IMAGE = "image"
MODALITY_REQ_VIDEO = "video"
MODALITY_REQ_MIXED = "mixed"


class RewardConfigError(ValueError):
    """Raised when reward configuration violates its invariants."""


_DEFAULT_DEDUCTIONS = {
    DEFECT_UNBALANCED_TAG: 0.4,
    DEFECT_UNKNOWN_TAG: 0.4,
    DEFECT_INVALID_JSON: 0.3,
    DEFECT_BAD_ORDERING: 0.2,
    DEFECT_EMPTY_BLOCK: 0.1,
}


@dataclass
class RewardConfig:
    w_tool: float = 0.2
    w_format: float = 0.2
    w_result: float = 0.2
    w_traj: float = 0.2
    w_cons: float = 0.2
    duration_tolerance: float = 0.10
    format_deductions: dict = field(default_factory=lambda: dict(_DEFAULT_DEDUCTIONS))
    invalid_json_cap: float = 0.6
    penalty_intermediate: float = 0.2
    penalty_final: float = 0.5
    filter_threshold: float = 0.6

    def validate(self) -> None:
        weights = (self.w_tool, self.w_format, self.w_result, self.w_traj, self.w_cons)
        if any(w < 0 for w in weights):
            raise RewardConfigError("component weights must be non-negative")
        if abs(sum(weights) - 1.0) > 1e-9:
            raise RewardConfigError(f"component weights must sum to 1, got {sum(weights)}")
        if not 0.0 <= self.duration_tolerance < 1.0:
            raise RewardConfigError("duration tolerance must be in [0, 1)")
        for name, value in self.format_deductions.items():
            if not 0.0 <= value <= 1.0:
                raise RewardConfigError(f"format deduction {name} out of [0, 1]")
        for name, value in (
            ("invalid_json_cap", self.invalid_json_cap),
            ("penalty_intermediate", self.penalty_intermediate),
            ("penalty_final", self.penalty_final),
        ):
            if not 0.0 <= value <= 1.0:
                raise RewardConfigError(f"{name} out of [0, 1]")
        if not 0.0 <= self.filter_threshold <= 1.0:
            raise RewardConfigError("filter threshold must be in [0, 1]")

    @classmethod
    def from_dict(cls, raw: Mapping) -> "RewardConfig":
        config = cls()
        weights = raw.get("weights", {})
        for key in ("tool", "format", "result", "traj", "cons"):
            if key in weights:
                setattr(config, f"w_{key}", float(weights[key]))
        if "duration_tolerance" in raw:
            config.duration_tolerance = float(raw["duration_tolerance"])
        if "format_deductions" in raw:
            config.format_deductions = dict(_DEFAULT_DEDUCTIONS)
            config.format_deductions.update(
                {k: float(v) for k, v in raw["format_deductions"].items()}
            )
        if "invalid_json_cap" in raw:
            config.invalid_json_cap = float(raw["invalid_json_cap"])
        penalties = raw.get("tool_penalties", {})
        if "intermediate" in penalties:
            config.penalty_intermediate = float(penalties["intermediate"])
        if "final" in penalties:
            config.penalty_final = float(penalties["final"])
        if "filter_threshold" in raw:
            config.filter_threshold = float(raw["filter_threshold"])
        config.validate()
        return config

    @classmethod
    def from_file(cls, path: Union[str, Path]) -> "RewardConfig":
        with open(path, "r", encoding="utf-8") as fh:
            try:
                raw = json.load(fh)
            except json.JSONDecodeError as exc:
                raise RewardConfigError(f"reward config is not valid JSON: {exc}") from exc
        return cls.from_dict(raw)


@dataclass
class RewardBreakdown:
    """The component scores plus their composition."""

    plan: float
    format: float
    tool: float
    result: float
    traj: float
    cons: float
    fine: float
    total: float
    facet_scores: dict = field(default_factory=dict)
    notes: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "plan": self.plan,
            "format": self.format,
            "tool": self.tool,
            "result": self.result,
            "traj": self.traj,
            "cons": self.cons,
            "fine": self.fine,
            "total": self.total,
            "facet_scores": dict(self.facet_scores),
            "notes": list(self.notes),
        }

    @classmethod
    def from_dict(cls, raw: Mapping) -> "RewardBreakdown":
        return cls(
            plan=raw["plan"],
            format=raw["format"],
            tool=raw["tool"],
            result=raw["result"],
            traj=raw["traj"],
            cons=raw["cons"],
            fine=raw["fine"],
            total=raw["total"],
            facet_scores=dict(raw.get("facet_scores", {})),
            notes=list(raw.get("notes", [])),
        )


def _clamp01(value: float) -> float:
    return min(1.0, max(0.0, value))


def score_format(report: ParseReport, config: Optional[RewardConfig] = None) -> float:
    """1.0 for a defect-free parse, minus per-defect deductions, floored at 0.

    Invalid-JSON deductions are capped so a long trajectory with many bad
    payloads is not graded below a structurally broken one.
    """
    config = config or RewardConfig()
    counts: dict[str, int] = {}
    for defect in report.defects:
        counts[defect.kind] = counts.get(defect.kind, 0) + 1
    deduction = 0.0
    for kind, count in counts.items():
        per = config.format_deductions.get(kind, 0.0)
        amount = per * count
        if kind == DEFECT_INVALID_JSON:
            amount = min(amount, config.invalid_json_cap)
        deduction += amount
    return _clamp01(1.0 - deduction)


def score_tool(
    results: Sequence[ToolResult], config: Optional[RewardConfig] = None
) -> float:
    """Graded penalties: intermediate failures are cheaper than a failed final call."""
    config = config or RewardConfig()
    if not results:
        return 1.0
    score = 1.0
    for res in results[:-1]:
        if not res.success:
            score -= config.penalty_intermediate
    if not results[-1].success:
        score -= config.penalty_final
    return _clamp01(score)


def _required_modalities(required: Optional[str]) -> list[str]:
    if required == MODALITY_REQ_IMAGE:
        return [MODALITY_IMAGE]
    if required == MODALITY_REQ_VIDEO:
        return [MODALITY_VIDEO]
    if required == MODALITY_REQ_MIXED:
        return [MODALITY_IMAGE, MODALITY_VIDEO]
    return []


def score_result(
    task, final_assets: Sequence[MediaAsset], config: Optional[RewardConfig] = None
) -> float:
    """Mean over the task's applicable constraint dimensions.

    The modality dimension gates: if the required modality is missing the
    whole score is 0. Count and storyboard dimensions award partial credit
    ``min(produced, required) / required``; the duration dimension is 1
    inside the relative tolerance and decays linearly beyond it, judged
    against the best-matching produced video.
    """
    config = config or RewardConfig()
    dims: list[float] = []

    wanted = _required_modalities(task.required_modality)
    if wanted:
        have_all = all(any(a.modality == m for a in final_assets) for m in wanted)
        if not have_all:
            return 0.0
        dims.append(1.0)

    visual = [a for a in final_assets if a.modality in (wanted or (MODALITY_IMAGE, MODALITY_VIDEO))]
    videos = [a for a in final_assets if a.modality == MODALITY_VIDEO]

    if task.required_count is not None:
        produced = len(visual)
        dims.append(min(produced, task.required_count) / task.required_count)

    if task.required_duration_s is not None:
        target = float(task.required_duration_s)
        if not videos or target <= 0:
            dims.append(0.0)
        else:
            rel_err = min(abs((v.duration or 0.0) - target) / target for v in videos)
            tau = config.duration_tolerance
            dims.append(1.0 if rel_err <= tau else _clamp01(1.0 - (rel_err - tau)))

    if task.required_storyboards is not None:
        segments = len(videos)
        dims.append(min(segments, task.required_storyboards) / task.required_storyboards)

    if not dims:
        return 0.0
    return sum(dims) / len(dims)


def _visual_generation_calls(
    trajectory: Trajectory, registry: ToolRegistry
) -> list:
    calls = []
    for block in trajectory.blocks:
        if block.kind != KIND_TOOL_CALL or block.payload is None:
            continue
        tool = registry.get(block.payload.name)
        if tool is not None and tool.output.modality in (MODALITY_IMAGE, MODALITY_VIDEO):
            calls.append(block.payload)
    return calls


def _references_store_asset(arguments: Mapping, store: AssetStore) -> bool:
    for value in arguments.values():
        if isinstance(value, str) and value in store:
            return True
        if isinstance(value, list) and any(
            isinstance(item, str) and item in store for item in value
        ):
            return True
    return False


def score_consistency(
    task, trajectory: Trajectory, store: AssetStore, registry: ToolRegistry
) -> float:
    """Fraction of follow-up visual-generation calls that reference prior assets.

    Neutral (1.0) when the task does not require consistency or when at most
    one visual-generation call was made.
    """
    if not getattr(task, "consistency", False):
        return 1.0
    calls = _visual_generation_calls(trajectory, registry)
    if len(calls) <= 1:
        return 1.0
    followups = calls[1:]
    referencing = sum(
        1 for call in followups if _references_store_asset(call.arguments, store)
    )
    return referencing / len(followups)


def score_traj_coherence(plan_text: str, executed_calls: Sequence[str], judger) -> float:
    """Plan-to-execution alignment, delegated to the judger."""
    return judger.score_coherence(plan_text, list(executed_calls))


def score_plan(
    plan_text: str, task, registry: ToolRegistry, judger
) -> tuple[float, dict[str, float]]:
    """Five-facet plan quality; the score is the facet mean."""
    facets = judger.score_plan(plan_text, task, registry.names())
    for name, value in facets.items():
        if not 0.0 <= value <= 1.0:
            raise RewardConfigError(f"judger returned facet {name} out of [0, 1]: {value}")
    if not facets:
        return 0.0, {}
    return sum(facets.values()) / len(facets), dict(facets)


def compose_reward(
    plan: float,
    format_score: float,
    tool: float,
    result: float,
    traj: float,
    cons: float,
    config: Optional[RewardConfig] = None,
    facet_scores: Optional[Mapping[str, float]] = None,
    notes: Optional[Iterable[str]] = None,
) -> RewardBreakdown:
    """Combine components into the gated total; raises on out-of-range inputs."""
    config = config or RewardConfig()
    config.validate()
    components = {
        "plan": plan,
        "format": format_score,
        "tool": tool,
        "result": result,
        "traj": traj,
        "cons": cons,
    }
    for name, value in components.items():
        if not 0.0 <= value <= 1.0:
            raise RewardConfigError(f"component {name} out of [0, 1]: {value}")
    fine = (
        config.w_tool * tool
        + config.w_format * format_score
        + config.w_result * result
        + config.w_traj * traj
        + config.w_cons * cons
    )
    fine = _clamp01(fine)  # guards float roundoff at the boundary
    total = _clamp01(plan * fine)
    return RewardBreakdown(
        plan=plan,
        format=format_score,
        tool=tool,
        result=result,
        traj=traj,
        cons=cons,
        fine=fine,
        total=total,
        facet_scores=dict(facet_scores or {}),
        notes=list(notes or []),
    )


def filter_dataset(
    scored: Sequence[tuple[object, RewardBreakdown]], threshold: float
) -> tuple[list, list]:
    """Order-preserving partition into (kept, dropped) by total >= threshold."""
    if not 0.0 <= threshold <= 1.0:
        raise RewardConfigError(f"filter threshold out of [0, 1]: {threshold}")
    kept, dropped = [], []
    for item, breakdown in scored:
        if breakdown.total >= threshold:
            kept.append((item, breakdown))
        else:
            dropped.append((item, breakdown))
    return kept, dropped
