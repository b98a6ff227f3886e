"""Editing agent: tool registry, the pre/edit/val action stages and plan execution."""

from __future__ import annotations

from collections.abc import Iterable, Sequence
from dataclasses import dataclass, replace
from enum import Enum
from typing import TYPE_CHECKING

from . import masks
from .errors import BackendError, BackendMalformedResponse, PreconditionError, ToolUnavailable
from .images import ImageArtifact
from .labels import EditingMethod
from .planning import Instruction

if TYPE_CHECKING:
    from .backends.client import Backends

DEFAULT_RETRIES = 2


class Modality(str, Enum):
    TEXT_GUIDED = "text_guided"
    TEXT_AND_MASK = "text_and_mask"
    MASK_AND_REFERENCE = "mask_and_reference"

    @property
    def needs_mask(self) -> bool:
        return self is not Modality.TEXT_GUIDED


# Modality preference when the instruction names a region.
_REGION_ORDER = (Modality.TEXT_AND_MASK, Modality.MASK_AND_REFERENCE, Modality.TEXT_GUIDED)
_GLOBAL_ORDER = (Modality.TEXT_GUIDED, Modality.TEXT_AND_MASK, Modality.MASK_AND_REFERENCE)


@dataclass(frozen=True)
class ToolDescriptor:
    name: str
    modality: Modality
    supported_methods: frozenset[EditingMethod]
    priority: int
    endpoint: str = "/edit"

    def __post_init__(self) -> None:
        if not self.supported_methods:
            raise ValueError(f"tool {self.name} supports no methods")

    def to_json(self) -> dict:
        return {
            "name": self.name,
            "modality": self.modality.value,
            "supported_methods": sorted(m.value for m in self.supported_methods),
            "priority": self.priority,
            "endpoint": self.endpoint,
        }

    @classmethod
    def from_json(cls, data: dict) -> ToolDescriptor:
        return cls(
            data["name"],
            Modality(data["modality"]),
            frozenset(EditingMethod(m) for m in data["supported_methods"]),
            int(data["priority"]),
            data.get("endpoint", "/edit"),
        )


@dataclass(frozen=True)
class ToolRegistry:
    tools: tuple[ToolDescriptor, ...]

    def __post_init__(self) -> None:
        names = [t.name for t in self.tools]
        if len(set(names)) != len(names):
            raise ValueError("tool names must be unique")
        for method in EditingMethod:
            ranks = [t.priority for t in self.tools if method in t.supported_methods]
            if len(set(ranks)) != len(ranks):
                raise ValueError(f"duplicate priority among tools supporting {method.value}")

    def supporting(self, method: EditingMethod) -> list[ToolDescriptor]:
        return [t for t in self.tools if method in t.supported_methods]

    def by_name(self, name: str) -> ToolDescriptor:
        for tool in self.tools:
            if tool.name == name:
                return tool
        raise ToolUnavailable(f"no tool named {name!r}")

    def uncovered(self) -> list[EditingMethod]:
        return [m for m in EditingMethod if not self.supporting(m)]

    def check_complete(self) -> None:
        missing = self.uncovered()
        if missing:
            raise ToolUnavailable("no tool supports " + ", ".join(m.value for m in missing))

    def without(self, method: EditingMethod) -> ToolRegistry:
        """Copy with ``method`` removed from every tool (tools left empty are dropped)."""
        kept = []
        for t in self.tools:
            methods = t.supported_methods - {method}
            if methods:
                kept.append(replace(t, supported_methods=methods))
        return ToolRegistry(tuple(kept))

    def to_json(self) -> list[dict]:
        return [t.to_json() for t in self.tools]

    @classmethod
    def from_json(cls, data: Iterable[dict]) -> ToolRegistry:
        return cls(tuple(ToolDescriptor.from_json(d) for d in data))


M = EditingMethod


def default_registry() -> ToolRegistry:
    """The tool library: text-guided editors, mask-based inpainters and a
    reference-guided editor. Priorities are configuration, not ranking claims."""
    return ToolRegistry(
        (
            ToolDescriptor("magicbrush", Modality.TEXT_GUIDED, frozenset({M.ADD_OBJECT, M.REMOVE_OBJECT}), 0),
            ToolDescriptor("plug_and_play", Modality.TEXT_GUIDED, frozenset({M.CHANGE_BACKGROUND}), 1),
            ToolDescriptor("guide", Modality.TEXT_GUIDED, frozenset({M.CHANGE_EXPRESSION}), 2),
            ToolDescriptor("ip2p", Modality.TEXT_GUIDED, frozenset({M.CHANGE_FILTER}), 3),
            ToolDescriptor("rf_solver_edit", Modality.TEXT_GUIDED, frozenset({M.CHANGE_ATTRIBUTE, M.REPLACE_OBJECT}), 4),
            ToolDescriptor("sdxl_inpainting", Modality.TEXT_AND_MASK, frozenset({M.REPLACE_OBJECT}), 5),
            ToolDescriptor("mag_edit", Modality.TEXT_AND_MASK, frozenset({M.CHANGE_ATTRIBUTE}), 6),
            ToolDescriptor("mimicbrush", Modality.MASK_AND_REFERENCE, frozenset({M.ADD_OBJECT, M.REPLACE_OBJECT}), 7),
        )
    )


def tool_order(registry: ToolRegistry, instruction: Instruction, prior_available: bool = True) -> list[ToolDescriptor]:
    """All tools able to run ``instruction``, most preferred first."""
    order = _REGION_ORDER if instruction.region_hint and prior_available else _GLOBAL_ORDER
    rank = {m: i for i, m in enumerate(order)}
    return sorted(registry.supporting(instruction.method), key=lambda t: (rank[t.modality], t.priority, t.name))


def select_tool(registry: ToolRegistry, instruction: Instruction, prior_available: bool = True) -> ToolDescriptor:
    tools = tool_order(registry, instruction, prior_available)
    if not tools:
        raise ToolUnavailable(f"no tool supports {instruction.method.value}")
    return tools[0]


@dataclass(frozen=True)
class SpatialPrior:
    mask: dict | None
    source: str  # "detection" | "segmentation" | "none"
    target_entity: str | None = None

    def __post_init__(self) -> None:
        if self.source not in ("detection", "segmentation", "none"):
            raise ValueError(f"unknown prior source {self.source!r}")
        if (self.source == "none") != masks.is_empty(self.mask):
            raise ValueError("source must be 'none' exactly when the mask is empty")

    @classmethod
    def empty(cls, target: str | None = None) -> SpatialPrior:
        return cls(None, "none", target)


@dataclass(frozen=True)
class Attempt:
    attempt: int
    stage: str  # "pre" | "edit" | "val"
    tool: str
    status: str  # "ok" | "failed"
    detail: str = ""

    def to_json(self) -> dict:
        return {"attempt": self.attempt, "stage": self.stage, "tool": self.tool, "status": self.status, "detail": self.detail}

    @classmethod
    def from_json(cls, data: dict) -> Attempt:
        return cls(int(data["attempt"]), data["stage"], data["tool"], data["status"], data.get("detail", ""))


@dataclass(frozen=True)
class ActionTrace:
    instruction_index: int
    directive: str
    attempts: tuple[Attempt, ...]
    final_status: str
    output_hash: str

    @property
    def edit_calls(self) -> int:
        return sum(1 for a in self.attempts if a.stage == "edit")

    @property
    def failure_reason(self) -> str:
        failed = [a for a in self.attempts if a.status == "failed"]
        return failed[-1].detail if failed else ""

    def to_json(self) -> dict:
        return {
            "instruction_index": self.instruction_index,
            "directive": self.directive,
            "attempts": [a.to_json() for a in self.attempts],
            "final_status": self.final_status,
            "output_hash": self.output_hash,
        }

    @classmethod
    def from_json(cls, data: dict) -> ActionTrace:
        return cls(
            int(data["instruction_index"]),
            data["directive"],
            tuple(Attempt.from_json(a) for a in data["attempts"]),
            data["final_status"],
            data["output_hash"],
        )


def act_pre(instruction: Instruction, image: ImageArtifact, tool: ToolDescriptor, backends: Backends) -> SpatialPrior:
    phrase = instruction.region_hint or instruction.element.description
    if not tool.modality.needs_mask:
        return SpatialPrior.empty(phrase)
    boxes = backends.detect(image, phrase)
    if not boxes:
        return SpatialPrior.empty(phrase)
    best = max(boxes, key=lambda b: b["score"])
    rle = backends.segment(image, best["box"])
    if rle["size"] != [image.height, image.width]:
        raise BackendMalformedResponse("/segment", f"mask size {rle['size']} does not match image {image.height}x{image.width}")
    if masks.is_empty(rle):
        box_rle = masks.box_mask(image.height, image.width, best["box"])
        if masks.is_empty(box_rle):
            return SpatialPrior.empty(phrase)
        return SpatialPrior(box_rle, "detection", phrase)
    return SpatialPrior(rle, "segmentation", phrase)


def act_edit(
    instruction: Instruction,
    image: ImageArtifact,
    prior: SpatialPrior,
    tool: ToolDescriptor,
    backends: Backends,
    attempt: int = 0,
    directive: str | None = None,
) -> ImageArtifact:
    if instruction.method not in tool.supported_methods:
        raise PreconditionError(f"tool {tool.name} does not support {instruction.method.value}")
    if tool.modality.needs_mask and prior.source == "none":
        raise PreconditionError(f"tool {tool.name} needs a mask but no spatial prior is available")
    result = backends.edit(image, directive or instruction.text, tool.name, tool.modality.value, prior.mask, attempt)
    if (result.width, result.height) != (image.width, image.height):
        raise BackendMalformedResponse("/edit", f"resolution changed from {image.width}x{image.height} to {result.width}x{result.height}")
    return result


def act_val(
    instruction: Instruction,
    before: ImageArtifact,
    after: ImageArtifact,
    backends: Backends,
    tool: str,
    attempt: int = 0,
    directive: str | None = None,
) -> tuple[bool, str]:
    """Self-critic verdict: ``(True, reason)`` or ``(False, reason)``."""
    return backends.validate(before, after, directive or instruction.text, tool, attempt)


def _fallback_tool(registry: ToolRegistry, instruction: Instruction) -> ToolDescriptor | None:
    for tool in tool_order(registry, instruction, prior_available=False):
        if not tool.modality.needs_mask:
            return tool
    return None


def execute_instruction(
    instruction: Instruction,
    image: ImageArtifact,
    registry: ToolRegistry,
    backends: Backends,
    retries: int = DEFAULT_RETRIES,
) -> tuple[ImageArtifact, ActionTrace]:
    """Run one instruction with at most ``retries`` re-attempts.

    The first retry switches to the next tool supporting the method; later
    retries keep that tool and ask the planner to rephrase the directive.
    An empty detection on a mask tool reroutes to a text-guided tool without
    spending a retry. Backend failures are recorded, never raised.
    """
    attempts: list[Attempt] = []
    tools = tool_order(registry, instruction)
    directive = instruction.text
    if not tools:
        attempts.append(Attempt(0, "pre", "-", "failed", f"no tool supports {instruction.method.value}"))
        return image, ActionTrace(instruction.index, directive, tuple(attempts), "failed", image.content_hash)

    tool_idx = 0
    for attempt in range(retries + 1):
        if attempt == 1:
            tool_idx = (tool_idx + 1) % len(tools)
        elif attempt >= 2:
            try:
                directive = backends.revise_instruction(replace(instruction, text=directive), attempts[-1].detail, attempt)
            except BackendError as exc:
                attempts.append(Attempt(attempt, "pre", tools[tool_idx].name, "failed", f"revision failed: {exc}"))
                continue
        tool = tools[tool_idx]
        ok, reason = _attempt(instruction, image, registry, tool, backends, attempt, directive, attempts)
        if ok is not None:
            after = ok
            return after, ActionTrace(instruction.index, directive, tuple(attempts), "ok", after.content_hash)
    return image, ActionTrace(instruction.index, directive, tuple(attempts), "failed", image.content_hash)


def _attempt(instruction, image, registry, tool, backends, attempt, directive, attempts) -> tuple[ImageArtifact | None, str]:
    try:
        prior = act_pre(instruction, image, tool, backends)
    except BackendError as exc:
        attempts.append(Attempt(attempt, "pre", tool.name, "failed", str(exc)))
        return None, str(exc)
    if tool.modality.needs_mask and prior.source == "none":
        fallback = _fallback_tool(registry, instruction)
        if fallback is None:
            detail = f"no region found for '{prior.target_entity}' and no text-guided fallback"
            attempts.append(Attempt(attempt, "pre", tool.name, "failed", detail))
            return None, detail
        attempts.append(Attempt(attempt, "pre", tool.name, "ok", f"no region found for '{prior.target_entity}'; rerouting to {fallback.name}"))
        tool = fallback
    elif tool.modality.needs_mask:
        attempts.append(Attempt(attempt, "pre", tool.name, "ok", f"{prior.source} mask for '{prior.target_entity}'"))
    else:
        attempts.append(Attempt(attempt, "pre", tool.name, "ok", "no spatial prior needed"))

    try:
        after = act_edit(instruction, image, prior, tool, backends, attempt, directive)
    except BackendError as exc:
        attempts.append(Attempt(attempt, "edit", tool.name, "failed", str(exc)))
        return None, str(exc)
    attempts.append(Attempt(attempt, "edit", tool.name, "ok", after.content_hash))

    try:
        ok, reason = act_val(instruction, image, after, backends, tool.name, attempt, directive)
    except BackendError as exc:
        attempts.append(Attempt(attempt, "val", tool.name, "failed", str(exc)))
        return None, str(exc)
    attempts.append(Attempt(attempt, "val", tool.name, "ok" if ok else "failed", reason))
    return (after if ok else None), reason


def execute_plan(
    instructions: Sequence[Instruction],
    image: ImageArtifact,
    registry: ToolRegistry,
    backends: Backends,
    retries: int = DEFAULT_RETRIES,
) -> tuple[ImageArtifact, list[ActionTrace]]:
    """Execute instructions in order; a failed instruction leaves the image
    as it was and execution continues with the next one."""
    if retries < 0:
        raise ValueError("retry budget must be >= 0")
    current = image
    traces = []
    for ins in instructions:
        current, trace = execute_instruction(ins, current, registry, backends, retries)
        traces.append(trace)
    return current, traces
