"""Group rollouts: scripted/remote policies, group-normalized advantages, export.

A rollout group runs G independent episodes of one task (seeds
``base_seed + i``) and normalizes their total rewards against the group mean,
so no learned critic is needed. Policy optimization itself is out of scope;
the exported JSONL records are the hand-off to an external trainer.
"""

from __future__ import annotations

import json
import logging
import math
import os
import re
import urllib.error
import urllib.request
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from statistics import fmean
from typing import Callable, Optional, Protocol, Sequence, Union

from .env import (
    EpisodeState,
    Observation,
    RewardBreakdown,
    RewardConfig,
    TaskSpec,
    abort,
    finalize,
    reset,
    step,
    transcript_events,
)
from .judgers import Judger, RuleJudger
from .tools import MediaCatalog, ToolRegistry, default_catalog, default_registry

logger = logging.getLogger(__name__)

POLICY_URL_ENV = "VCSIM_POLICY_URL"

ADVANTAGE_EPSILON = 1e-8


class PolicyError(RuntimeError):
    """Raised when a policy cannot produce an action."""


class Policy(Protocol):
    def generate(self, observations: Sequence[Observation]) -> str:
        ...


# ---------------------------------------------------------------------------
# Scripted policies
# ---------------------------------------------------------------------------

_ASSET_TOKEN_RE = re.compile(r'"@asset:(image|video|audio|text):(\d+)"')
_ASSET_LIST_TOKEN_RE = re.compile(r'"@assets:(image|video|audio|text):\*"')


def _call_action(tool: str, arguments: dict) -> str:
    payload = json.dumps({"name": tool, "arguments": arguments}, sort_keys=True)
    return f"<tool_call>{payload}</tool_call>"


@dataclass
class _Script:
    opening: str  # think + plan action
    calls: list[str]
    closing: str  # answer action

    def actions(self) -> list[str]:
        return [self.opening, *self.calls, self.closing]


class GoldenPolicy:
    """Reference-workflow policy: emits a conformant episode for a task.

    The script is derived from the task's constraints at construction time;
    ``generate`` is a pure function of the observation history, so one
    instance can safely drive many concurrent episodes. Asset ids are not
    known up front and are referenced via ``@asset:<modality>:<index>``
    placeholders resolved against the observations seen so far.
    """

    def __init__(
        self,
        task: TaskSpec,
        registry: Optional[ToolRegistry] = None,
        seed: int = 0,
        use_references: bool = True,
        count_override: Optional[int] = None,
    ):
        self.task = task
        self.registry = registry or default_registry()
        self.seed = seed
        self.script = self._build_script(use_references, count_override)

    # -- tool selection ------------------------------------------------------

    def _first_of_category(self, category: str) -> str:
        tools = self.registry.by_category(category)
        if not tools:
            raise PolicyError(f"no registered tool in category {category!r}")
        return tools[0].name

    def _music_tool(self) -> str:
        for tool in self.registry.by_category("audio"):
            takes_assets = any(
                p.type in ("asset_ref", "asset_ref_list") for p in tool.params
            )
            if tool.output.modality == "audio" and not takes_assets:
                return tool.name
        raise PolicyError("no audio generation tool registered")

    def _composite_tool(self) -> str:
        for tool in self.registry.by_category("audio"):
            if tool.output.modality == "video" and any(
                p.type == "asset_ref_list" and p.modality == "video"
                for p in tool.params
            ):
                return tool.name
        raise PolicyError("no video composition tool registered")

    # -- script construction ---------------------------------------------------

    def _audio_bearing(self) -> bool:
        text = f"{self.task.query} {self.task.task_type}".lower()
        keywords = (
            "music", "soundtrack", "voiceover", "voice-over",
            "narration", "song", "podcast", "mv", "audio", "concert",
        )
        return any(re.search(r"\b" + re.escape(k), text) for k in keywords)

    def _build_script(
        self, use_references: bool, count_override: Optional[int]
    ) -> _Script:
        task = self.task
        modality = task.required_modality
        if modality is None:
            modality = "video" if (task.required_duration_s or task.required_storyboards) else "image"
        if modality == "image":
            plan_lines, calls = self._image_workflow(use_references, count_override)
        elif modality == "video":
            plan_lines, calls = self._video_workflow(use_references, count_override)
        else:
            plan_lines, calls = self._mixed_workflow(count_override)
        plan_text = "\n".join(f"{i + 1}. {line}" for i, line in enumerate(plan_lines))
        opening = (
            f"<think>Constraints understood for task {task.task_id}; "
            f"selecting a reference workflow.</think>\n<plan>{plan_text}</plan>"
        )
        closing = f"<answer>Delivered the requested {modality} content.</answer>"
        return _Script(opening, [_call_action(t, a) for t, a in calls], closing)

    def _image_workflow(
        self, use_references: bool, count_override: Optional[int]
    ) -> tuple[list[str], list[tuple[str, dict]]]:
        task = self.task
        n = count_override if count_override is not None else (task.required_count or 1)
        t2i = self._first_of_category("text_to_image")
        calls: list[tuple[str, dict]] = []
        if task.consistency:
            edit = self._first_of_category("image_to_image")
            plan_lines = [
                "Generate the base image for the request.",
                f"Edit the base image to produce the {task.required_count or 1} "
                "consistent deliverables, reusing it as the style reference.",
            ]
            if n >= 1:
                calls.append((t2i, {"prompt": task.query}))
                for i in range(n):
                    if use_references:
                        calls.append(
                            (edit, {"image": "@asset:image:0", "prompt": f"consistent variation {i + 1}"})
                        )
                    else:
                        calls.append((t2i, {"prompt": f"{task.query} (variation {i + 1})"}))
        else:
            plan_lines = [
                f"Generate an image for each of the {n} requested deliverables."
            ]
            for i in range(n):
                calls.append((t2i, {"prompt": f"{task.query} (deliverable {i + 1})"}))
        return plan_lines, calls

    def _video_workflow(
        self, use_references: bool, count_override: Optional[int]
    ) -> tuple[list[str], list[tuple[str, dict]]]:
        task = self.task
        t2i = self._first_of_category("text_to_image")
        i2v = self._first_of_category("image_to_video")

        if task.required_count is not None or count_override is not None:
            # Separate deliverable clips, one per required video.
            clips = count_override if count_override is not None else task.required_count
            per = float(task.required_duration_s or 5.0)
            per = min(max(per, 3.0), 12.0)
            plan_lines = [
                f"Generate a keyframe image for each of the {task.required_count or clips} deliverables.",
                f"Animate each keyframe into a {per:g} second video clip.",
            ]
            calls: list[tuple[str, dict]] = []
            for i in range(clips or 0):
                calls.append((t2i, {"prompt": f"{task.query} (keyframe {i + 1})"}))
                calls.append(
                    (i2v, {"image": f"@asset:image:{i}", "duration": per, "prompt": f"clip {i + 1}"})
                )
            return plan_lines, calls

        segments = task.required_storyboards or 1
        total = task.required_duration_s
        if total is not None and task.required_storyboards is None:
            # Pick a segment count whose per-clip duration fits the tools.
            segments = max(1, math.ceil(total / 12.0))
        per = (total / segments) if total is not None else 5.0
        per = min(max(per, 3.0), 12.0)

        audio = self._audio_bearing()
        composite = segments > 1 or audio

        plan_lines = [f"Generate a keyframe image for each of the {segments} segments."]
        calls = []
        if task.consistency and segments > 1:
            edit = self._first_of_category("image_to_image")
            plan_lines = [
                "Generate the base keyframe image for the first segment.",
                f"Edit the base image into the other {segments} consistent keyframes, "
                "reusing it as the reference.",
            ]
            calls.append((t2i, {"prompt": f"{task.query} (base keyframe)"}))
            for i in range(1, segments):
                if use_references:
                    calls.append(
                        (edit, {"image": "@asset:image:0", "prompt": f"consistent keyframe {i + 1}"})
                    )
                else:
                    calls.append((t2i, {"prompt": f"{task.query} (keyframe {i + 1})"}))
        else:
            for i in range(segments):
                calls.append((t2i, {"prompt": f"{task.query} (keyframe {i + 1})"}))

        animate_line = f"Animate each keyframe into a {per:g} second video clip"
        if task.consistency:
            animate_line += ", reusing the keyframes as reference for consistency"
        plan_lines.append(animate_line + ".")
        for i in range(segments):
            calls.append(
                (i2v, {"image": f"@asset:image:{i}", "duration": per, "prompt": f"segment {i + 1}"})
            )

        if audio:
            music = self._music_tool()
            music_duration = min(max(float(total or 30.0), 5.0), 300.0)
            plan_lines.append(
                f"Generate a {music_duration:g} second music track for the soundtrack."
            )
            calls.append((music, {"prompt": f"{task.query} (soundtrack)", "duration": music_duration}))
        if composite:
            plan_lines.append("Composite the clips into the final video deliverable.")
            args: dict = {"videos": "@assets:video:*"}
            if audio:
                args["audio"] = "@asset:audio:0"
            calls.append((self._composite_tool(), args))
        return plan_lines, calls

    def _mixed_workflow(
        self, count_override: Optional[int]
    ) -> tuple[list[str], list[tuple[str, dict]]]:
        task = self.task
        duration = float(task.required_duration_s or 5.0)
        duration = min(max(duration, 3.0), 12.0)
        plan_lines = [
            "Generate an image of the subject.",
            f"Animate the image into a {duration:g} second video clip.",
        ]
        calls = [
            (self._first_of_category("text_to_image"), {"prompt": task.query}),
            (
                self._first_of_category("image_to_video"),
                {"image": "@asset:image:0", "duration": duration, "prompt": "bring it to life"},
            ),
        ]
        if count_override is not None:
            calls = calls[: max(0, count_override)]
        return plan_lines, calls

    # -- action emission ---------------------------------------------------

    def generate(self, observations: Sequence[Observation]) -> str:
        actions = self.script.actions()
        index = len(observations) - 1
        if index < 0 or index >= len(actions):
            raise PolicyError(
                f"scripted policy exhausted after {len(actions)} actions"
            )
        return self._resolve(actions[index], observations)

    @staticmethod
    def _resolve(action: str, observations: Sequence[Observation]) -> str:
        seen = [a for obs in observations for a in obs.assets]

        def by_modality(modality: str) -> list[str]:
            return [a["id"] for a in seen if a.get("modality") == modality]

        def sub_single(match: re.Match) -> str:
            modality, index = match.group(1), int(match.group(2))
            ids = by_modality(modality)
            value = ids[index] if index < len(ids) else f"missing:{modality}:{index}"
            return json.dumps(value)

        def sub_list(match: re.Match) -> str:
            ids = by_modality(match.group(1))
            return json.dumps(ids if ids else [f"missing:{match.group(1)}:0"])

        action = _ASSET_TOKEN_RE.sub(sub_single, action)
        return _ASSET_LIST_TOKEN_RE.sub(sub_list, action)


NOISE_MODES = ("drop_plan", "corrupt_json", "skip_references", "wrong_count")

_PLAN_BLOCK_RE = re.compile(r"\s*<plan>.*?</plan>", re.DOTALL)


class NoisyPolicy(GoldenPolicy):
    """GoldenPolicy with one targeted defect injected into its script.

    Modes: ``drop_plan`` removes the plan block; ``corrupt_json`` breaks the
    first tool-call payload; ``skip_references`` replaces reference-based
    follow-up generations with fresh ones; ``wrong_count`` under-produces by
    one deliverable while keeping the original plan text.
    """

    def __init__(
        self,
        task: TaskSpec,
        mode: str,
        registry: Optional[ToolRegistry] = None,
        seed: int = 0,
    ):
        if mode not in NOISE_MODES:
            raise ValueError(f"unknown noise mode {mode!r}; expected one of {NOISE_MODES}")
        super().__init__(task, registry=registry, seed=seed)
        self.mode = mode
        self.script = self._inject(self.script)

    def _inject(self, script: _Script) -> _Script:
        if self.mode == "drop_plan":
            opening = _PLAN_BLOCK_RE.sub("", script.opening)
            return _Script(opening, script.calls, script.closing)
        if self.mode == "corrupt_json":
            calls = list(script.calls)
            if calls:
                calls[0] = calls[0].replace("}</tool_call>", "</tool_call>", 1)
            return _Script(script.opening, calls, script.closing)
        if self.mode == "skip_references":
            variant = GoldenPolicy(
                self.task, registry=self.registry, seed=self.seed, use_references=False
            )
            return _Script(script.opening, variant.script.calls, script.closing)
        # wrong_count: drop one deliverable but keep the confident plan.
        target = max(0, (self.task.required_count or 1) - 1)
        variant = GoldenPolicy(
            self.task, registry=self.registry, seed=self.seed, count_override=target
        )
        return _Script(script.opening, variant.script.calls, script.closing)


class RemotePolicy:
    """Policy served by an HTTP endpoint.

    Request: ``{"history": [observation, ...]}``; response ``{"action": str}``.
    The endpoint comes from the constructor or ``VCSIM_POLICY_URL``. Any
    transport failure raises :class:`PolicyError`, which truncates only the
    affected rollout.
    """

    def __init__(self, endpoint: Optional[str] = None, timeout: float = 10.0):
        self.endpoint = endpoint or os.environ.get(POLICY_URL_ENV, "")
        self.timeout = timeout
        if not self.endpoint:
            raise PolicyError(f"no policy endpoint configured ({POLICY_URL_ENV})")

    def generate(self, observations: Sequence[Observation]) -> str:
        payload = {"history": [obs.to_dict() for obs in observations]}
        request = urllib.request.Request(
            self.endpoint,
            data=json.dumps(payload).encode("utf-8"),
            headers={"Content-Type": "application/json"},
            method="POST",
        )
        try:
            with urllib.request.urlopen(request, timeout=self.timeout) as response:
                data = json.loads(response.read().decode("utf-8"))
            action = data["action"]
        except Exception as exc:  # noqa: BLE001 - all transport failures surface the same way
            raise PolicyError(f"remote policy failed: {exc}") from exc
        if not isinstance(action, str):
            raise PolicyError("remote policy returned a non-string action")
        return action


# ---------------------------------------------------------------------------
# Group execution
# ---------------------------------------------------------------------------


@dataclass
class RolloutRecord:
    task_id: str
    seed: int
    events: list[dict]
    breakdown: RewardBreakdown
    policy_failed: bool = False

    @property
    def total(self) -> float:
        return self.breakdown.total


@dataclass
class RolloutGroup:
    task_id: str
    size: int
    rewards: list[float]
    advantages: list[float]
    records: list[RolloutRecord] = field(default_factory=list)


def compute_advantages(rewards: Sequence[float], epsilon: float = ADVANTAGE_EPSILON) -> list[float]:
    """Group-mean baseline with population-std normalization.

    ``a_i = (r_i - mean) / (std_pop + epsilon)``; an all-equal group yields
    exact zeros. Rewards must be non-empty and lie in [0, 1].
    """
    if not rewards:
        raise ValueError("compute_advantages requires a non-empty group")
    for r in rewards:
        if not 0.0 <= r <= 1.0:
            raise ValueError(f"reward out of [0, 1]: {r}")
    mean = fmean(rewards)
    std = math.sqrt(fmean([(r - mean) ** 2 for r in rewards]))
    return [(r - mean) / (std + epsilon) for r in rewards]


def run_rollout(
    spec: TaskSpec,
    policy: Policy,
    seed: int,
    registry: ToolRegistry,
    catalog: MediaCatalog,
    config: Optional[RewardConfig] = None,
    judger: Optional[Judger] = None,
    action_cap: Optional[int] = None,
) -> RolloutRecord:
    """One scored episode; policy failures truncate and score the partial history."""
    judger = judger or RuleJudger(registry)
    cap = action_cap if action_cap is not None else spec.max_steps * 2 + 8
    state, observation = reset(spec, registry, catalog, seed)
    observations = [observation]
    actions: list[str] = []
    policy_failed = False
    done = False
    while not done and len(actions) < cap:
        try:
            action = policy.generate(observations)
        except PolicyError as exc:
            logger.warning("policy failed on %s seed %d: %s", spec.task_id, seed, exc)
            policy_failed = True
            break
        actions.append(action)
        observation, done = step(state, action)
        observations.append(observation)
    abort(state)
    breakdown = finalize(state, config, judger)
    events = transcript_events(spec, seed, actions, breakdown)
    return RolloutRecord(
        task_id=spec.task_id,
        seed=seed,
        events=events,
        breakdown=breakdown,
        policy_failed=policy_failed,
    )


def run_group(
    spec: TaskSpec,
    policy: Union[Policy, Sequence[Policy]],
    group_size: int,
    base_seed: int,
    registry: Optional[ToolRegistry] = None,
    catalog: Optional[MediaCatalog] = None,
    config: Optional[RewardConfig] = None,
    judger: Optional[Judger] = None,
    judger_factory: Optional[Callable[[], Judger]] = None,
    parallel: bool = False,
    action_cap: Optional[int] = None,
) -> RolloutGroup:
    """Run G rollouts with seeds ``base_seed + i`` and group-normalize rewards.

    ``policy`` is either one policy shared by all rollouts or a sequence of
    exactly G policies. Rollouts never share mutable state, so ``parallel``
    mode produces records identical to serial execution.
    """
    if group_size < 1:
        raise ValueError("group_size must be >= 1")
    registry = registry or default_registry()
    catalog = catalog or default_catalog()
    if isinstance(policy, Sequence):
        policies = list(policy)
        if len(policies) != group_size:
            raise ValueError(
                f"got {len(policies)} policies for a group of {group_size}"
            )
    else:
        policies = [policy] * group_size

    def one(i: int) -> RolloutRecord:
        rollout_judger = judger_factory() if judger_factory is not None else judger
        return run_rollout(
            spec,
            policies[i],
            base_seed + i,
            registry,
            catalog,
            config,
            rollout_judger,
            action_cap,
        )

    if parallel and group_size > 1:
        with ThreadPoolExecutor(max_workers=group_size) as pool:
            records = list(pool.map(one, range(group_size)))
    else:
        records = [one(i) for i in range(group_size)]

    rewards = [r.total for r in records]
    return RolloutGroup(
        task_id=spec.task_id,
        size=group_size,
        rewards=rewards,
        advantages=compute_advantages(rewards),
        records=records,
    )


def export_training_records(
    groups: Sequence[RolloutGroup], destination: Union[str, Path]
) -> int:
    """Write one JSONL record per rollout; returns the record count.

    The file is written atomically (write-then-rename) and is byte-stable
    for identical inputs.
    """
    destination = Path(destination)
    lines = []
    for group in groups:
        for record, advantage in zip(group.records, group.advantages):
            lines.append(
                json.dumps(
                    {
                        "task_id": record.task_id,
                        "seed": record.seed,
                        "advantage": advantage,
                        "reward": record.breakdown.to_dict(),
                        "transcript": record.events,
                        "policy_failed": record.policy_failed,
                    },
                    sort_keys=True,
                )
            )
    tmp = destination.with_name(destination.name + ".tmp")
    with open(tmp, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + ("\n" if lines else ""))
    os.replace(tmp, destination)
    return len(lines)


def load_training_records(path: Union[str, Path]) -> list[dict]:
    records = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                records.append(json.loads(line))
    return records
