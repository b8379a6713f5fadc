"""Tagged trajectory model: parsing, serialization, and dataset statistics.

A trajectory is a flat sequence of tagged blocks:

    <think>...</think>
    <plan>1. ... 2. ...</plan>
    <tool_call>{"name": "...", "arguments": {...}}</tool_call>
    <tool_result>{"success": true, ...}</tool_result>
    <answer>...</answer>

Tags are literal lowercase names, never nested. The parser never raises on
malformed input; every problem is reported as a :class:`Defect` so that
format scoring can grade it. A parsed :class:`Trajectory` is returned
whenever the block structure could be segmented unambiguously; sources with
unbalanced or unknown tags yield ``trajectory=None``.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from statistics import fmean
from typing import Iterable, Mapping, Optional, Sequence

KIND_THINK = "think"
KIND_PLAN = "plan"
KIND_TOOL_CALL = "tool_call"
KIND_TOOL_RESULT = "tool_result"
KIND_ANSWER = "answer"

BLOCK_KINDS = (KIND_THINK, KIND_PLAN, KIND_TOOL_CALL, KIND_TOOL_RESULT, KIND_ANSWER)

DEFECT_UNBALANCED_TAG = "UnbalancedTag"
DEFECT_BAD_ORDERING = "BadOrdering"
DEFECT_INVALID_JSON = "InvalidJsonPayload"
DEFECT_EMPTY_BLOCK = "EmptyBlock"
DEFECT_UNKNOWN_TAG = "UnknownTag"

# Tag-shaped tokens: <name> or </name>. Anything else containing "<" is
# treated as plain text.
_TAG_RE = re.compile(r"</?([A-Za-z_][A-Za-z0-9_]*)>")


@dataclass(frozen=True)
class ToolCallPayload:
    """Structured record carried by a valid tool_call block."""

    name: str
    arguments: Mapping[str, object]

    def to_json(self) -> str:
        return json.dumps(
            {"name": self.name, "arguments": dict(self.arguments)}, sort_keys=True
        )


@dataclass(frozen=True)
class Block:
    """One tagged region of a trajectory.

    ``payload`` is present exactly when ``kind == "tool_call"`` and the
    content parsed as a JSON object with a tool name and an argument map.
    ``span`` holds (start, end) character offsets into the source for parsed
    blocks and is ``None`` for programmatically built ones.
    """

    kind: str
    content: str
    payload: Optional[ToolCallPayload] = None
    span: Optional[tuple[int, int]] = None


@dataclass(frozen=True)
class Defect:
    kind: str
    position: int
    message: str


@dataclass
class Trajectory:
    blocks: list[Block]
    source: str = ""
    task_id: str = ""

    def tool_calls(self) -> list[Block]:
        return [b for b in self.blocks if b.kind == KIND_TOOL_CALL]

    def plan_text(self) -> str:
        """All plan content joined in order (replanning concatenates)."""
        return "\n".join(b.content for b in self.blocks if b.kind == KIND_PLAN)


@dataclass
class ParseReport:
    trajectory: Optional[Trajectory]
    defects: list[Defect] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return self.trajectory is not None and not self.defects


def think(text: str) -> Block:
    return Block(KIND_THINK, text)


def plan(text: str) -> Block:
    return Block(KIND_PLAN, text)


def tool_call(name: str, arguments: Mapping[str, object]) -> Block:
    payload = ToolCallPayload(name, dict(arguments))
    return Block(KIND_TOOL_CALL, payload.to_json(), payload=payload)


def tool_result(text: str) -> Block:
    return Block(KIND_TOOL_RESULT, text)


def answer(text: str) -> Block:
    return Block(KIND_ANSWER, text)


def _parse_payload(content: str) -> Optional[ToolCallPayload]:
    try:
        data = json.loads(content)
    except (json.JSONDecodeError, ValueError):
        return None
    if not isinstance(data, dict):
        return None
    name = data.get("name")
    arguments = data.get("arguments")
    if not isinstance(name, str) or not name:
        return None
    if not isinstance(arguments, dict):
        return None
    return ToolCallPayload(name, arguments)


def parse_trajectory(source: str, task_id: str = "") -> ParseReport:
    """Parse tagged text into blocks, collecting defects instead of raising.

    Returns a report whose ``trajectory`` is ``None`` iff a structural defect
    (UnbalancedTag or UnknownTag) made block segmentation unreliable. Content
    defects (bad JSON, empty blocks, ordering violations) keep the trajectory
    available for downstream scoring.
    """
    defects: list[Defect] = []
    blocks: list[Block] = []
    structural = False

    def structural_defect(kind: str, position: int, message: str) -> None:
        nonlocal structural
        structural = True
        defects.append(Defect(kind, position, message))

    def flag_stray_text(start: int, end: int) -> None:
        gap = source[start:end]
        if gap.strip():
            at = start + (len(gap) - len(gap.lstrip()))
            structural_defect(DEFECT_UNKNOWN_TAG, at, "text outside any block")

    def close_block(kind: str, content: str, span: tuple[int, int]) -> None:
        payload = None
        if kind == KIND_TOOL_CALL:
            payload = _parse_payload(content)
            if payload is None:
                defects.append(
                    Defect(
                        DEFECT_INVALID_JSON,
                        span[0],
                        "tool_call content is not a JSON object with a tool "
                        "name and an argument map",
                    )
                )
        if not content.strip():
            defects.append(Defect(DEFECT_EMPTY_BLOCK, span[0], f"empty <{kind}> block"))
        blocks.append(Block(kind, content, payload=payload, span=span))

    def check_salvaged_payload(kind: str, content: str, at: int) -> None:
        # An unterminated tool_call still gets its content graded so the
        # report carries every discoverable problem.
        if kind == KIND_TOOL_CALL and _parse_payload(content) is None:
            defects.append(
                Defect(
                    DEFECT_INVALID_JSON,
                    at,
                    "unterminated tool_call content is not a valid payload",
                )
            )

    open_kind: Optional[str] = None
    open_at = 0
    content_start = 0
    cursor = 0

    for m in _TAG_RE.finditer(source):
        name = m.group(1)
        is_close = source[m.start() + 1] == "/"
        if open_kind is None:
            flag_stray_text(cursor, m.start())
            if is_close:
                structural_defect(
                    DEFECT_UNBALANCED_TAG,
                    m.start(),
                    f"closing </{name}> without an open block",
                )
            elif name in BLOCK_KINDS:
                open_kind = name
                open_at = m.start()
                content_start = m.end()
            else:
                structural_defect(
                    DEFECT_UNKNOWN_TAG, m.start(), f"unknown tag <{name}>"
                )
            cursor = m.end()
        else:
            if is_close and name == open_kind:
                close_block(open_kind, source[content_start : m.start()], (open_at, m.end()))
                open_kind = None
                cursor = m.end()
            elif not is_close and name in BLOCK_KINDS:
                # No nesting: the open block was never closed.
                structural_defect(
                    DEFECT_UNBALANCED_TAG,
                    open_at,
                    f"<{open_kind}> not closed before <{name}>",
                )
                check_salvaged_payload(
                    open_kind, source[content_start : m.start()], content_start
                )
                open_kind = name
                open_at = m.start()
                content_start = m.end()
                cursor = m.end()
            # Otherwise the token is part of the block content (a stray
            # closing tag of another kind or an unknown tag in prose).

    if open_kind is not None:
        structural_defect(
            DEFECT_UNBALANCED_TAG, open_at, f"<{open_kind}> never closed"
        )
        check_salvaged_payload(open_kind, source[content_start:], content_start)
    else:
        flag_stray_text(cursor, len(source))

    defects.extend(_ordering_defects(blocks))
    defects.sort(key=lambda d: (d.position, d.kind))
    trajectory = None if structural else Trajectory(blocks, source=source, task_id=task_id)
    return ParseReport(trajectory, defects)


def _ordering_defects(blocks: Sequence[Block]) -> list[Defect]:
    defects: list[Defect] = []
    answered_at: Optional[int] = None
    for i, block in enumerate(blocks):
        at = block.span[0] if block.span else i
        if answered_at is not None:
            defects.append(
                Defect(DEFECT_BAD_ORDERING, at, f"<{block.kind}> after <answer>")
            )
        elif block.kind == KIND_ANSWER:
            answered_at = i
        if block.kind == KIND_TOOL_RESULT and (
            i == 0 or blocks[i - 1].kind != KIND_TOOL_CALL
        ):
            defects.append(
                Defect(
                    DEFECT_BAD_ORDERING,
                    at,
                    "tool_result without an immediately preceding tool_call",
                )
            )
    first_call = next((b for b in blocks if b.kind == KIND_TOOL_CALL), None)
    if first_call is not None:
        before = blocks[: blocks.index(first_call)]
        if not any(b.kind == KIND_PLAN for b in before):
            at = first_call.span[0] if first_call.span else 0
            defects.append(
                Defect(DEFECT_BAD_ORDERING, at, "first tool_call precedes any plan")
            )
    return defects


_TAG_TOKENS = tuple(f"<{k}>" for k in BLOCK_KINDS) + tuple(
    f"</{k}>" for k in BLOCK_KINDS
)


def serialize_trajectory(trajectory: Trajectory) -> str:
    """Render blocks back to tagged text, one block per line.

    Raises ``ValueError`` when a block's content embeds one of the literal
    tag tokens, since such text cannot round-trip through the flat grammar.
    """
    parts = []
    for block in trajectory.blocks:
        if block.kind not in BLOCK_KINDS:
            raise ValueError(f"unknown block kind: {block.kind!r}")
        if any(token in block.content for token in _TAG_TOKENS):
            raise ValueError(
                f"content of <{block.kind}> block embeds a tag token and "
                "cannot be serialized"
            )
        parts.append(f"<{block.kind}>{block.content}</{block.kind}>")
    return "\n".join(parts)


def blocks_equal(a: Block, b: Block) -> bool:
    """Equality on (kind, content, payload), ignoring source spans."""
    return a.kind == b.kind and a.content == b.content and a.payload == b.payload


def trajectories_equal(a: Trajectory, b: Trajectory) -> bool:
    return len(a.blocks) == len(b.blocks) and all(
        blocks_equal(x, y) for x, y in zip(a.blocks, b.blocks)
    )


@dataclass
class TrajectoryStats:
    mean_steps: float
    frac_steps_gt: dict[int, float]
    mean_token_estimate: float
    frac_tokens_gt: dict[int, float]

    def to_dict(self) -> dict:
        return {
            "mean_steps": self.mean_steps,
            "frac_steps_gt": {str(k): v for k, v in self.frac_steps_gt.items()},
            "mean_token_estimate": self.mean_token_estimate,
            "frac_tokens_gt": {str(k): v for k, v in self.frac_tokens_gt.items()},
        }


def trajectory_stats(
    dataset: Iterable[Trajectory],
    step_thresholds: Sequence[int] = (20,),
    token_thresholds: Sequence[int] = (32000,),
) -> TrajectoryStats:
    """Dataset summary: tool-call step counts and whitespace token estimates.

    Steps are counted as tool_call blocks; the token estimate is the
    whitespace-delimited unit count of each source text (no tokenizer
    dependency). Raises ``ValueError`` on an empty dataset.
    """
    trajectories = list(dataset)
    if not trajectories:
        raise ValueError("trajectory_stats requires a non-empty dataset")
    steps = [len(t.tool_calls()) for t in trajectories]
    tokens = [len(t.source.split()) for t in trajectories]
    n = len(trajectories)
    return TrajectoryStats(
        mean_steps=fmean(steps),
        frac_steps_gt={k: sum(s > k for s in steps) / n for k in step_thresholds},
        mean_token_estimate=fmean(tokens),
        frac_tokens_gt={k: sum(t > k for t in tokens) / n for k in token_thresholds},
    )
