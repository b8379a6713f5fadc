"""Data-driven tool registry and procedural simulator.

Tools are declared in a JSON manifest (name, category, parameter schema,
output rule); the simulator validates calls against the schema, derives the
output media attributes from the rule's expressions, and samples a
placeholder file from the media catalog. Nothing is generated for real:
outputs are placeholder assets with physically consistent attributes.
"""

from __future__ import annotations

import hashlib
import json
import random
from dataclasses import dataclass, field
from functools import lru_cache
from importlib.resources import files
from pathlib import Path
from typing import Iterable, Iterator, Mapping, Optional, Sequence, Union

from .expr import Expr, ExprError, arg_refs, evaluate, input_refs, parse_expr
from .trajectory import ToolCallPayload

MODALITY_TEXT = "text"
MODALITY_IMAGE = "image"
MODALITY_VIDEO = "video"
MODALITY_AUDIO = "audio"
MODALITIES = (MODALITY_TEXT, MODALITY_IMAGE, MODALITY_VIDEO, MODALITY_AUDIO)

CATEGORIES = (
    "text_to_text",
    "text_to_image",
    "image_to_image",
    "image_to_video",
    "audio",
    "multimodal_understanding",
    "other",
)

PARAM_TYPES = (
    "string",
    "integer",
    "number",
    "boolean",
    "enum",
    "asset_ref",
    "asset_ref_list",
)

# Violation codes emitted by validate_call.
V_MISSING_REQUIRED = "MissingRequired"
V_UNKNOWN_PARAM = "UnknownParam"
V_WRONG_TYPE = "WrongType"
V_OUT_OF_RANGE = "OutOfRange"
V_NOT_IN_ENUM = "NotInEnum"
V_DANGLING_ASSET_REF = "DanglingAssetRef"
V_WRONG_MODALITY = "WrongModality"


class RegistryError(ValueError):
    """Raised when a tools manifest or media catalog fails to load."""


class UnknownToolError(KeyError):
    """Raised when a call names a tool absent from the registry."""


class DerivationError(RuntimeError):
    """Raised when an output rule produces physically invalid attributes."""


@dataclass(frozen=True)
class ParamSpec:
    name: str
    type: str
    required: bool = False
    default: object = None
    minimum: Optional[float] = None
    maximum: Optional[float] = None
    values: Optional[tuple] = None
    modality: Optional[str] = None  # accepted modality for asset refs


@dataclass(frozen=True)
class OutputRule:
    modality: str
    count: Expr
    count_src: str
    attributes: Mapping[str, Expr]
    attribute_srcs: Mapping[str, str]


@dataclass(frozen=True)
class ToolSpec:
    name: str
    category: str
    description: str
    params: tuple[ParamSpec, ...]
    output: OutputRule
    failure_rate: float = 0.0

    def param(self, name: str) -> Optional[ParamSpec]:
        for p in self.params:
            if p.name == name:
                return p
        return None


@dataclass(frozen=True)
class Provenance:
    tool: str
    args_digest: str
    inputs: tuple[str, ...]


@dataclass(frozen=True)
class MediaAsset:
    """A simulated media output with physically consistent attributes."""

    id: str
    modality: str
    width: Optional[int] = None
    height: Optional[int] = None
    duration: Optional[float] = None
    text_content: Optional[str] = None
    catalog_source: str = ""
    provenance: Optional[Provenance] = None

    def attribute(self, name: str) -> Optional[float]:
        if name in ("width", "height", "duration"):
            return getattr(self, name)
        return None

    def summary(self) -> dict:
        out: dict = {"id": self.id, "modality": self.modality}
        for attr in ("width", "height", "duration"):
            value = getattr(self, attr)
            if value is not None:
                out[attr] = value
        return out


@dataclass(frozen=True)
class Violation:
    code: str
    param: str
    message: str


@dataclass
class ValidationResult:
    ok: bool
    violations: list[Violation] = field(default_factory=list)


@dataclass
class ToolResult:
    success: bool
    assets: list[MediaAsset] = field(default_factory=list)
    message: str = ""
    violations: list[Violation] = field(default_factory=list)


class ToolRegistry:
    """Immutable name -> ToolSpec mapping, insertion ordered."""

    def __init__(self, tools: Iterable[ToolSpec]):
        self._tools: dict[str, ToolSpec] = {}
        for tool in tools:
            if tool.name in self._tools:
                raise RegistryError(f"duplicate tool name: {tool.name}")
            self._tools[tool.name] = tool

    def __len__(self) -> int:
        return len(self._tools)

    def __iter__(self) -> Iterator[ToolSpec]:
        return iter(self._tools.values())

    def __contains__(self, name: str) -> bool:
        return name in self._tools

    def get(self, name: str) -> Optional[ToolSpec]:
        return self._tools.get(name)

    def names(self) -> list[str]:
        return list(self._tools)

    def by_category(self, category: str) -> list[ToolSpec]:
        return [t for t in self._tools.values() if t.category == category]

    def category_of(self, name: str) -> Optional[str]:
        tool = self._tools.get(name)
        return tool.category if tool else None

    def with_failure_rates(self, rates: Mapping[str, float]) -> "ToolRegistry":
        """Copy of the registry with per-tool failure probabilities replaced."""
        tools = []
        for tool in self._tools.values():
            if tool.name in rates:
                rate = float(rates[tool.name])
                if not 0.0 <= rate <= 1.0:
                    raise RegistryError(
                        f"failure rate for {tool.name} out of [0, 1]: {rate}"
                    )
                tool = ToolSpec(
                    tool.name,
                    tool.category,
                    tool.description,
                    tool.params,
                    tool.output,
                    failure_rate=rate,
                )
            tools.append(tool)
        return ToolRegistry(tools)


@dataclass(frozen=True)
class CatalogEntry:
    id: str
    modality: str
    path: str
    tags: tuple[str, ...] = ()
    text: Optional[str] = None


class MediaCatalog:
    """Placeholder-file catalog; outputs sample uniformly per modality."""

    def __init__(self, entries: Iterable[CatalogEntry]):
        self._entries: dict[str, CatalogEntry] = {}
        for entry in entries:
            if entry.id in self._entries:
                raise RegistryError(f"duplicate catalog entry id: {entry.id}")
            self._entries[entry.id] = entry
        self._by_modality: dict[str, list[CatalogEntry]] = {m: [] for m in MODALITIES}
        for entry in self._entries.values():
            self._by_modality[entry.modality].append(entry)
        for m in self._by_modality:
            self._by_modality[m].sort(key=lambda e: e.id)

    def __len__(self) -> int:
        return len(self._entries)

    def get(self, entry_id: str) -> Optional[CatalogEntry]:
        return self._entries.get(entry_id)

    def by_modality(self, modality: str) -> list[CatalogEntry]:
        return list(self._by_modality.get(modality, []))


class AssetStore:
    """Per-episode asset map; ids never reused, entries immutable."""

    def __init__(self, namespace: str = "episode"):
        self.namespace = namespace
        self._assets: dict[str, MediaAsset] = {}
        self._counter = 0

    def next_id(self) -> str:
        self._counter += 1
        return f"{self.namespace}/a{self._counter:04d}"

    def add(self, asset: MediaAsset) -> None:
        if asset.id in self._assets:
            raise ValueError(f"asset id reused: {asset.id}")
        self._assets[asset.id] = asset

    def get(self, asset_id: str) -> Optional[MediaAsset]:
        return self._assets.get(asset_id)

    def __contains__(self, asset_id: str) -> bool:
        return asset_id in self._assets

    def __len__(self) -> int:
        return len(self._assets)

    def ids(self) -> list[str]:
        return list(self._assets)

    def assets(self) -> list[MediaAsset]:
        return list(self._assets.values())

    def by_modality(self, modality: str) -> list[MediaAsset]:
        return [a for a in self._assets.values() if a.modality == modality]


# ---------------------------------------------------------------------------
# Manifest loading
# ---------------------------------------------------------------------------


def _load_param(raw: dict, tool: str) -> ParamSpec:
    name = raw.get("name")
    if not isinstance(name, str) or not name:
        raise RegistryError(f"{tool}: parameter without a name")
    ptype = raw.get("type")
    if ptype not in PARAM_TYPES:
        raise RegistryError(f"{tool}: parameter {name} has invalid type {ptype!r}")
    values = raw.get("values")
    if ptype == "enum":
        if not isinstance(values, list) or not values:
            raise RegistryError(f"{tool}: enum parameter {name} needs values")
        values = tuple(values)
    elif values is not None:
        raise RegistryError(f"{tool}: only enum parameters take values ({name})")
    modality = raw.get("modality")
    if ptype in ("asset_ref", "asset_ref_list"):
        if modality not in MODALITIES:
            raise RegistryError(
                f"{tool}: asset parameter {name} must declare an accepted modality"
            )
    elif modality is not None:
        raise RegistryError(f"{tool}: modality is only valid on asset refs ({name})")
    minimum = raw.get("minimum")
    maximum = raw.get("maximum")
    if (minimum is not None or maximum is not None) and ptype not in (
        "integer",
        "number",
    ):
        raise RegistryError(f"{tool}: range bounds on non-numeric parameter {name}")
    spec = ParamSpec(
        name=name,
        type=ptype,
        required=bool(raw.get("required", False)),
        default=raw.get("default"),
        minimum=minimum,
        maximum=maximum,
        values=values,
        modality=modality,
    )
    if spec.default is not None:
        problem = _check_value(spec, spec.default, store=None)
        if problem is not None:
            raise RegistryError(f"{tool}: default for {name} is invalid: {problem.message}")
    return spec


def _load_output(raw: dict, tool: str, params: Sequence[ParamSpec]) -> OutputRule:
    modality = raw.get("modality")
    if modality not in MODALITIES:
        raise RegistryError(f"{tool}: output modality {modality!r} is invalid")
    declared = {p.name for p in params}
    asset_params = {p.name for p in params if p.type in ("asset_ref", "asset_ref_list")}

    def parse_checked(src: object, where: str, allow_inputs: bool) -> tuple[Expr, str]:
        if isinstance(src, (int, float)) and not isinstance(src, bool):
            src = str(src)
        if not isinstance(src, str):
            raise RegistryError(f"{tool}: {where} must be an expression string")
        try:
            expr = parse_expr(src)
        except ExprError as exc:
            raise RegistryError(f"{tool}: {where}: {exc}") from exc
        for ref in arg_refs(expr):
            if ref not in declared:
                raise RegistryError(
                    f"{tool}: {where} references undeclared parameter {ref!r}"
                )
        refs = input_refs(expr)
        if refs and not allow_inputs:
            raise RegistryError(f"{tool}: {where} may not reference input assets")
        for ref in refs:
            if ref not in asset_params:
                raise RegistryError(
                    f"{tool}: {where} references {ref!r}, which is not an asset parameter"
                )
        return expr, src

    count_expr, count_src = parse_checked(
        raw.get("count", "1"), "output count", allow_inputs=False
    )
    attributes: dict[str, Expr] = {}
    srcs: dict[str, str] = {}
    raw_attrs = raw.get("attributes", {})
    if not isinstance(raw_attrs, dict):
        raise RegistryError(f"{tool}: output attributes must be a mapping")
    for attr, src in raw_attrs.items():
        expr, text = parse_checked(src, f"attribute {attr}", allow_inputs=True)
        attributes[attr] = expr
        srcs[attr] = text
    return OutputRule(modality, count_expr, count_src, attributes, srcs)


def _load_tool(raw: dict) -> ToolSpec:
    name = raw.get("name")
    if not isinstance(name, str) or not name:
        raise RegistryError("tool entry without a name")
    category = raw.get("category")
    if category not in CATEGORIES:
        raise RegistryError(f"{name}: invalid category {category!r}")
    raw_params = raw.get("params", [])
    if not isinstance(raw_params, list):
        raise RegistryError(f"{name}: params must be a list")
    params = tuple(_load_param(p, name) for p in raw_params)
    seen: set[str] = set()
    for p in params:
        if p.name in seen:
            raise RegistryError(f"{name}: duplicate parameter {p.name}")
        seen.add(p.name)
    output_raw = raw.get("output")
    if not isinstance(output_raw, dict):
        raise RegistryError(f"{name}: missing output rule")
    output = _load_output(output_raw, name, params)
    failure_rate = raw.get("failure_rate", 0.0)
    if (
        isinstance(failure_rate, bool)
        or not isinstance(failure_rate, (int, float))
        or not 0.0 <= failure_rate <= 1.0
    ):
        raise RegistryError(f"{name}: failure_rate out of [0, 1]")
    return ToolSpec(
        name=name,
        category=category,
        description=str(raw.get("description", "")),
        params=params,
        output=output,
        failure_rate=float(failure_rate),
    )


def load_registry(manifest: Union[str, Path, dict]) -> ToolRegistry:
    """Load a tools manifest from a path or an already-parsed document."""
    if isinstance(manifest, (str, Path)):
        with open(manifest, "r", encoding="utf-8") as fh:
            try:
                manifest = json.load(fh)
            except json.JSONDecodeError as exc:
                raise RegistryError(f"tools manifest is not valid JSON: {exc}") from exc
    if not isinstance(manifest, dict) or not isinstance(manifest.get("tools"), list):
        raise RegistryError("tools manifest must be an object with a 'tools' list")
    return ToolRegistry(_load_tool(entry) for entry in manifest["tools"])


def load_catalog(manifest: Union[str, Path, dict], base_dir: Optional[Path] = None) -> MediaCatalog:
    """Load a media catalog; placeholder paths resolve against the manifest dir."""
    if isinstance(manifest, (str, Path)):
        path = Path(manifest)
        base_dir = base_dir or path.parent
        with open(path, "r", encoding="utf-8") as fh:
            try:
                manifest = json.load(fh)
            except json.JSONDecodeError as exc:
                raise RegistryError(f"media catalog is not valid JSON: {exc}") from exc
    if not isinstance(manifest, dict) or not isinstance(manifest.get("entries"), list):
        raise RegistryError("media catalog must be an object with an 'entries' list")
    entries = []
    for raw in manifest["entries"]:
        entry_id = raw.get("id")
        modality = raw.get("modality")
        path_str = raw.get("path")
        if not isinstance(entry_id, str) or not entry_id:
            raise RegistryError("catalog entry without an id")
        if modality not in MODALITIES:
            raise RegistryError(f"catalog entry {entry_id}: invalid modality {modality!r}")
        if not isinstance(path_str, str) or not path_str:
            raise RegistryError(f"catalog entry {entry_id}: missing placeholder path")
        resolved = Path(path_str)
        if base_dir is not None and not resolved.is_absolute():
            resolved = base_dir / resolved
        if not resolved.exists():
            raise RegistryError(
                f"catalog entry {entry_id}: placeholder file not found: {resolved}"
            )
        entries.append(
            CatalogEntry(
                id=entry_id,
                modality=modality,
                path=str(resolved),
                tags=tuple(raw.get("tags", [])),
                text=raw.get("text"),
            )
        )
    return MediaCatalog(entries)


def data_path(name: str) -> Path:
    """Path to a packaged data file."""
    return Path(str(files("vcsim").joinpath("data").joinpath(name)))


@lru_cache(maxsize=1)
def default_registry() -> ToolRegistry:
    return load_registry(data_path("tools.json"))


@lru_cache(maxsize=1)
def default_catalog() -> MediaCatalog:
    return load_catalog(data_path("media_catalog.json"))


# ---------------------------------------------------------------------------
# Call validation and execution
# ---------------------------------------------------------------------------


def _check_value(
    param: ParamSpec, value: object, store: Optional[AssetStore]
) -> Optional[Violation]:
    name = param.name
    if param.type == "string":
        if not isinstance(value, str):
            return Violation(V_WRONG_TYPE, name, f"{name} must be a string")
    elif param.type == "integer":
        if isinstance(value, bool) or not isinstance(value, int):
            return Violation(V_WRONG_TYPE, name, f"{name} must be an integer")
        return _check_range(param, value)
    elif param.type == "number":
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            return Violation(V_WRONG_TYPE, name, f"{name} must be a number")
        return _check_range(param, value)
    elif param.type == "boolean":
        if not isinstance(value, bool):
            return Violation(V_WRONG_TYPE, name, f"{name} must be a boolean")
    elif param.type == "enum":
        if value not in (param.values or ()):
            return Violation(
                V_NOT_IN_ENUM, name, f"{name} must be one of {list(param.values or ())}"
            )
    elif param.type == "asset_ref":
        return _check_ref(param, value, store)
    elif param.type == "asset_ref_list":
        if not isinstance(value, list) or not value:
            return Violation(
                V_WRONG_TYPE, name, f"{name} must be a non-empty list of asset ids"
            )
        for item in value:
            problem = _check_ref(param, item, store)
            if problem is not None:
                return problem
    return None


def _check_range(param: ParamSpec, value: float) -> Optional[Violation]:
    if param.minimum is not None and value < param.minimum:
        return Violation(
            V_OUT_OF_RANGE, param.name, f"{param.name} below minimum {param.minimum}"
        )
    if param.maximum is not None and value > param.maximum:
        return Violation(
            V_OUT_OF_RANGE, param.name, f"{param.name} above maximum {param.maximum}"
        )
    return None


def _check_ref(
    param: ParamSpec, value: object, store: Optional[AssetStore]
) -> Optional[Violation]:
    if not isinstance(value, str):
        return Violation(V_WRONG_TYPE, param.name, f"{param.name} must be an asset id")
    if store is None:
        return None
    asset = store.get(value)
    if asset is None:
        return Violation(
            V_DANGLING_ASSET_REF, param.name, f"{param.name} references missing asset {value!r}"
        )
    if asset.modality != param.modality:
        return Violation(
            V_WRONG_MODALITY,
            param.name,
            f"{param.name} expects a {param.modality} asset, got {asset.modality}",
        )
    return None


def validate_call(
    spec: ToolSpec, args: Mapping[str, object], store: AssetStore
) -> ValidationResult:
    """Check an argument map against the tool's schema and the asset store."""
    violations: list[Violation] = []
    declared = {p.name for p in spec.params}
    for name in args:
        if name not in declared:
            violations.append(
                Violation(V_UNKNOWN_PARAM, name, f"{name} is not a parameter of {spec.name}")
            )
    for param in spec.params:
        if param.name not in args:
            if param.required:
                violations.append(
                    Violation(
                        V_MISSING_REQUIRED,
                        param.name,
                        f"{param.name} is required by {spec.name}",
                    )
                )
            continue
        problem = _check_value(param, args[param.name], store)
        if problem is not None:
            violations.append(problem)
    return ValidationResult(ok=not violations, violations=violations)


def _resolved_args(spec: ToolSpec, args: Mapping[str, object]) -> dict:
    resolved = dict(args)
    for param in spec.params:
        if param.name not in resolved and param.default is not None:
            resolved[param.name] = param.default
    return resolved


def _bind_inputs(
    spec: ToolSpec, resolved: Mapping[str, object], store: AssetStore
) -> dict[str, list[MediaAsset]]:
    inputs: dict[str, list[MediaAsset]] = {}
    for param in spec.params:
        if param.type not in ("asset_ref", "asset_ref_list"):
            continue
        if param.name not in resolved:
            continue
        value = resolved[param.name]
        ids = value if isinstance(value, list) else [value]
        inputs[param.name] = [store.get(i) for i in ids]  # validated to exist
    return inputs


def _args_digest(resolved: Mapping[str, object]) -> str:
    canonical = json.dumps(resolved, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()[:12]


def _derive_int(tool: str, attr: str, value: float) -> int:
    if abs(value - round(value)) > 1e-9:
        raise DerivationError(f"{tool}: attribute {attr} must be integral, got {value}")
    return int(round(value))


def execute_call(
    registry: ToolRegistry,
    catalog: MediaCatalog,
    store: AssetStore,
    call: Union[ToolCallPayload, tuple[str, Mapping[str, object]]],
    rng: random.Random,
) -> ToolResult:
    """Simulate one tool call against the store.

    Deterministic given (registry, catalog, store contents, call, rng state).
    Validation problems and injected failures come back as unsuccessful
    results; an unregistered tool name is a caller error and raises.
    """
    if isinstance(call, ToolCallPayload):
        name, args = call.name, call.arguments
    else:
        name, args = call
    spec = registry.get(name)
    if spec is None:
        raise UnknownToolError(name)

    check = validate_call(spec, args, store)
    if not check.ok:
        summary = "; ".join(v.message for v in check.violations)
        return ToolResult(
            success=False,
            message=f"{name} rejected: {summary}",
            violations=check.violations,
        )

    # Failure draw happens before sampling so the rng consumption pattern is
    # stable whether or not the call succeeds.
    if rng.random() < spec.failure_rate:
        return ToolResult(success=False, message=f"{name} failed (simulated)")

    resolved = _resolved_args(spec, args)
    inputs = _bind_inputs(spec, resolved, store)
    rule = spec.output

    try:
        count_value = evaluate(rule.count, resolved, inputs)
    except ExprError as exc:
        raise DerivationError(f"{name}: output count: {exc}") from exc
    count = _derive_int(name, "count", count_value)
    if count < 1:
        raise DerivationError(f"{name}: output count must be >= 1, got {count}")

    entries = catalog.by_modality(rule.modality)
    if not entries:
        raise RegistryError(
            f"media catalog has no entries for modality {rule.modality!r} "
            f"needed by {name}"
        )

    digest = _args_digest(resolved)
    input_ids = tuple(a.id for assets in inputs.values() for a in assets)
    produced: list[MediaAsset] = []
    for _ in range(count):
        attrs: dict[str, float] = {}
        for attr, expr in rule.attributes.items():
            try:
                attrs[attr] = evaluate(expr, resolved, inputs)
            except ExprError as exc:
                raise DerivationError(f"{name}: attribute {attr}: {exc}") from exc
        entry = entries[rng.randrange(len(entries))]
        asset = _build_asset(spec, rule, attrs, entry, store, digest, input_ids)
        store.add(asset)
        produced.append(asset)

    label = f"{count} {rule.modality} asset" + ("s" if count != 1 else "")
    details = ", ".join(a.id for a in produced)
    return ToolResult(
        success=True,
        assets=produced,
        message=f"{name} ok: produced {label} ({details})",
    )


def _build_asset(
    spec: ToolSpec,
    rule: OutputRule,
    attrs: Mapping[str, float],
    entry: CatalogEntry,
    store: AssetStore,
    digest: str,
    input_ids: tuple[str, ...],
) -> MediaAsset:
    name = spec.name
    width = height = None
    duration = None
    text_content = None
    if "width" in attrs:
        width = _derive_int(name, "width", attrs["width"])
    if "height" in attrs:
        height = _derive_int(name, "height", attrs["height"])
    if "duration" in attrs:
        duration = float(attrs["duration"])

    if rule.modality == MODALITY_IMAGE:
        if not width or not height or width <= 0 or height <= 0:
            raise DerivationError(f"{name}: image output needs positive width/height")
        if duration is not None:
            raise DerivationError(f"{name}: image output cannot carry a duration")
    elif rule.modality in (MODALITY_VIDEO, MODALITY_AUDIO):
        if duration is None or duration <= 0:
            raise DerivationError(f"{name}: {rule.modality} output needs duration > 0")
    else:  # text
        text_content = entry.text or f"[{entry.id}]"

    return MediaAsset(
        id=store.next_id(),
        modality=rule.modality,
        width=width,
        height=height,
        duration=duration,
        text_content=text_content,
        catalog_source=entry.id,
        provenance=Provenance(tool=name, args_digest=digest, inputs=input_ids),
    )
