"""Plan and coherence judgers.

The engine scores plans through a judger so it can run fully offline. The
default :class:`RuleJudger` grades deterministically from a shipped keyword
rulebook; :class:`RemoteJudger` delegates to an external endpoint and falls
back to the rules on any transport problem, leaving a note for the reward
breakdown.
"""

from __future__ import annotations

import json
import os
import re
import urllib.error
import urllib.request
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Optional, Protocol, Sequence, Union

from .tools import ToolRegistry, data_path

FACET_REQUIREMENT = "requirement_fulfillment"
FACET_COHERENCE = "logical_coherence"
FACET_EXECUTABILITY = "pragmatic_executability"
FACET_ATOMICITY = "decomposition_atomicity"
FACET_OPTIMALITY = "expert_optimality"
FACETS = (
    FACET_REQUIREMENT,
    FACET_COHERENCE,
    FACET_EXECUTABILITY,
    FACET_ATOMICITY,
    FACET_OPTIMALITY,
)

JUDGER_URL_ENV = "VCSIM_JUDGER_URL"

_STEP_RE = re.compile(r"^\s*(?:\d+[.):]|[-*])\s+(.*\S)\s*$")
_TOOL_NAME_RE = re.compile(r"\btool_[a-z0-9_]+\b")


class Judger(Protocol):
    def score_plan(
        self, plan_text: str, task, tool_names: Sequence[str]
    ) -> dict[str, float]:
        ...

    def score_coherence(self, plan_text: str, executed_calls: Sequence[str]) -> float:
        ...


@dataclass
class PlanStep:
    text: str
    categories: frozenset[str]


def _load_rules(path: Optional[Union[str, Path]]) -> dict:
    with open(path or data_path("judger_rules.json"), "r", encoding="utf-8") as fh:
        return json.load(fh)


class RuleJudger:
    """Deterministic keyword-rule judger; a pure function of its inputs."""

    def __init__(
        self,
        registry: ToolRegistry,
        rules: Optional[Union[str, Path, dict]] = None,
    ):
        if rules is None or isinstance(rules, (str, Path)):
            rules = _load_rules(rules)
        self.registry = registry
        self.keyword_map: dict[str, list[str]] = rules["keyword_map"]
        self.stage_order: dict[str, int] = rules["stage_order"]
        self.modality_words: dict[str, list[str]] = rules["modality_words"]
        self.audio_task_keywords: list[str] = rules["audio_task_keywords"]
        self.consistency_keywords: list[str] = rules["consistency_keywords"]
        self.step_bands: dict = rules["step_bands"]
        self._phrase_res = {
            category: [re.compile(r"\b" + re.escape(p), re.IGNORECASE) for p in phrases]
            for category, phrases in self.keyword_map.items()
        }

    # -- plan structure ----------------------------------------------------

    def parse_steps(self, plan_text: str) -> list[PlanStep]:
        """Enumerated or bulleted lines; falls back to bare non-empty lines."""
        lines = plan_text.splitlines()
        stepped = [m.group(1) for m in (_STEP_RE.match(line) for line in lines) if m]
        if not stepped:
            stepped = [line.strip() for line in lines if line.strip()]
        return [PlanStep(text, self._categories_of(text)) for text in stepped]

    def _categories_of(self, text: str) -> frozenset[str]:
        matched = set()
        for category, patterns in self._phrase_res.items():
            if any(p.search(text) for p in patterns):
                matched.add(category)
        return frozenset(matched)

    @staticmethod
    def _contains_any(text: str, words: Sequence[str]) -> bool:
        low = text.lower()
        return any(re.search(r"\b" + re.escape(w), low) for w in words)

    # -- facets ------------------------------------------------------------

    def score_plan(
        self, plan_text: str, task, tool_names: Sequence[str]
    ) -> dict[str, float]:
        if not plan_text.strip():
            return {facet: 0.0 for facet in FACETS}
        steps = self.parse_steps(plan_text)
        if not steps:
            return {facet: 0.0 for facet in FACETS}
        registered = set(tool_names)
        return {
            FACET_REQUIREMENT: self._requirement(plan_text, steps, task),
            FACET_COHERENCE: self._coherence(steps),
            FACET_EXECUTABILITY: self._executability(steps, registered),
            FACET_ATOMICITY: self._atomicity(steps),
            FACET_OPTIMALITY: self._optimality(plan_text, steps, task),
        }

    def _requirement(self, plan_text: str, steps: Sequence[PlanStep], task) -> float:
        """Binary: the plan names the required modality and a consistent quantity."""
        required = getattr(task, "required_modality", None)
        if required == "mixed":
            wanted = ["image", "video"]
        elif required in ("image", "video"):
            wanted = [required]
        else:
            wanted = []
        for modality in wanted:
            if not self._contains_any(plan_text, self.modality_words[modality]):
                return 0.0
        generation = {"text_to_image", "image_to_image", "image_to_video"}
        gen_steps = sum(1 for s in steps if s.categories & generation)
        for quantity in (
            getattr(task, "required_count", None),
            getattr(task, "required_storyboards", None),
        ):
            if quantity is None:
                continue
            if str(quantity) not in plan_text and gen_steps != quantity:
                return 0.0
        return 1.0

    def _coherence(self, steps: Sequence[PlanStep]) -> float:
        """Producer steps must precede their consumers (stage ordering)."""
        stages = []
        for step in steps:
            ranked = [self.stage_order[c] for c in step.categories if c in self.stage_order]
            stages.append(min(ranked) if ranked else None)
        edges = violations = 0
        for i in range(len(stages)):
            for j in range(i + 1, len(stages)):
                if stages[i] is None or stages[j] is None or stages[i] == stages[j]:
                    continue
                edges += 1
                if stages[i] > stages[j]:
                    violations += 1
        if edges == 0:
            return 1.0
        return 1.0 - violations / edges

    def _executability(self, steps: Sequence[PlanStep], registered: set[str]) -> float:
        """Fraction of steps grounded in a registered tool name or category."""
        mappable = 0
        for step in steps:
            named = _TOOL_NAME_RE.findall(step.text)
            if named:
                if all(name in registered for name in named):
                    mappable += 1
                continue
            if any(self.registry.by_category(c) for c in step.categories):
                mappable += 1
        return mappable / len(steps)

    @staticmethod
    def _atomicity(steps: Sequence[PlanStep]) -> float:
        """Fraction of steps mapping to at most one tool category."""
        atomic = sum(1 for s in steps if len(s.categories) <= 1)
        return atomic / len(steps)

    def _optimality(self, plan_text: str, steps: Sequence[PlanStep], task) -> float:
        """Checklist mean of applicable task-specific best practices."""
        checks: list[float] = []
        if getattr(task, "consistency", False):
            checks.append(
                1.0 if self._contains_any(plan_text, self.consistency_keywords) else 0.0
            )
        task_text = f"{getattr(task, 'query', '')} {getattr(task, 'task_type', '')}"
        if self._contains_any(task_text, self.audio_task_keywords):
            has_audio_step = any("audio" in s.categories for s in steps)
            checks.append(1.0 if has_audio_step else 0.0)
        low, high = self._band(task)
        checks.append(1.0 if low <= len(steps) <= high else 0.0)
        return sum(checks) / len(checks)

    def _band(self, task) -> tuple[int, int]:
        by_type = self.step_bands.get("by_task_type", {})
        band = by_type.get(getattr(task, "task_type", ""))
        if band is None:
            by_modality = self.step_bands.get("by_modality", {})
            band = by_modality.get(getattr(task, "required_modality", None))
        if band is None:
            band = self.step_bands.get("default", [1, 24])
        return int(band[0]), int(band[1])

    # -- plan/execution alignment ------------------------------------------

    def score_coherence(self, plan_text: str, executed_calls: Sequence[str]) -> float:
        """0.5 * step coverage + 0.5 * (1 - normalized inversions)."""
        steps = self.parse_steps(plan_text)
        if not steps:
            return 0.0
        call_categories = [self.registry.category_of(name) for name in executed_calls]
        positions = []
        matched = 0
        for step in steps:
            pos = next(
                (i for i, cat in enumerate(call_categories) if cat and cat in step.categories),
                None,
            )
            if pos is not None:
                matched += 1
                positions.append(pos)
        coverage = matched / len(steps)
        if len(positions) >= 2:
            pairs = len(positions) * (len(positions) - 1) // 2
            inversions = sum(
                1
                for i in range(len(positions))
                for j in range(i + 1, len(positions))
                if positions[i] > positions[j]
            )
            order = 1.0 - inversions / pairs
        else:
            order = 1.0
        return 0.5 * coverage + 0.5 * order


class RemoteJudger:
    """Judger backed by an HTTP endpoint, with rule-based fallback.

    The endpoint address comes from the constructor or the
    ``VCSIM_JUDGER_URL`` environment variable. Requests are JSON::

        {"plan": ..., "task": {...}, "rubric_id": "plan_facets_v1"}
        -> {"facet_scores": {facet: score, ...}}

        {"plan": ..., "calls": [...], "rubric_id": "coherence_v1"}
        -> {"score": ...}

    Any transport error, timeout, or out-of-range response falls back to the
    rule judger and records a note (drained via :meth:`drain_notes`).
    """

    def __init__(
        self,
        fallback: RuleJudger,
        endpoint: Optional[str] = None,
        timeout: float = 5.0,
    ):
        self.endpoint = endpoint or os.environ.get(JUDGER_URL_ENV, "")
        self.timeout = timeout
        self.fallback = fallback
        self.notes: list[str] = []

    def drain_notes(self) -> list[str]:
        notes, self.notes = self.notes, []
        return notes

    def _post(self, payload: dict) -> dict:
        if not self.endpoint:
            raise RuntimeError(f"no judger endpoint configured ({JUDGER_URL_ENV})")
        request = urllib.request.Request(
            self.endpoint,
            data=json.dumps(payload).encode("utf-8"),
            headers={"Content-Type": "application/json"},
            method="POST",
        )
        with urllib.request.urlopen(request, timeout=self.timeout) as response:
            return json.loads(response.read().decode("utf-8"))

    def score_plan(
        self, plan_text: str, task, tool_names: Sequence[str]
    ) -> dict[str, float]:
        payload = {
            "plan": plan_text,
            "task": task.to_dict() if hasattr(task, "to_dict") else dict(task),
            "rubric_id": "plan_facets_v1",
        }
        try:
            response = self._post(payload)
            facets = response["facet_scores"]
            scores = {facet: float(facets[facet]) for facet in FACETS}
            if any(not 0.0 <= v <= 1.0 for v in scores.values()):
                raise ValueError("facet score out of range")
            return scores
        except Exception as exc:  # noqa: BLE001 - any transport problem falls back
            self.notes.append(f"remote judger unavailable, used rule judger: {exc}")
            return self.fallback.score_plan(plan_text, task, tool_names)

    def score_coherence(self, plan_text: str, executed_calls: Sequence[str]) -> float:
        payload = {
            "plan": plan_text,
            "calls": list(executed_calls),
            "rubric_id": "coherence_v1",
        }
        try:
            response = self._post(payload)
            score = float(response["score"])
            if not 0.0 <= score <= 1.0:
                raise ValueError("coherence score out of range")
            return score
        except Exception as exc:  # noqa: BLE001
            self.notes.append(f"remote judger unavailable, used rule judger: {exc}")
            return self.fallback.score_coherence(plan_text, executed_calls)


def make_judger(
    kind: str,
    registry: ToolRegistry,
    rules: Optional[Union[str, Path, dict]] = None,
    endpoint: Optional[str] = None,
) -> Judger:
    if kind == "rule":
        return RuleJudger(registry, rules)
    if kind == "remote":
        return RemoteJudger(RuleJudger(registry, rules), endpoint=endpoint)
    raise ValueError(f"unknown judger kind: {kind!r}")
