"""Critic agent: emotion assessment and two-level instruction diagnosis."""

from __future__ import annotations

from collections.abc import Mapping, Sequence
from dataclasses import dataclass
from typing import TYPE_CHECKING

from .backends.client import distribution_from
from .editing import ActionTrace
from .errors import BackendMalformedResponse, IncompatiblePair
from .images import ImageArtifact
from .labels import MIKELS, EditingMethod, ElementKind, EmotionDistribution, EmotionLabel
from .planning import Element, Instruction

if TYPE_CHECKING:
    from .backends.client import Backends

DEFAULT_PASS_THRESHOLD = 0.5


def passes(distribution: EmotionDistribution, target: EmotionLabel | str, threshold: float = DEFAULT_PASS_THRESHOLD) -> bool:
    """Argmax (lexicographic tie-break) hits the target, or its mass reaches ``threshold``."""
    return distribution.argmax() == str(target) or distribution[target] >= threshold


@dataclass(frozen=True)
class EmotionAssessment:
    distribution: EmotionDistribution | None  # None for out-of-domain targets
    verdict: str
    rationale: tuple[str, ...]
    target: EmotionLabel
    source_similarity: float | None = None

    def __post_init__(self) -> None:
        if self.verdict not in ("pass", "fail"):
            raise ValueError(f"verdict must be pass or fail, got {self.verdict!r}")
        if not self.rationale:
            raise ValueError("rationale must be non-empty")

    @property
    def passed(self) -> bool:
        return self.verdict == "pass"

    def to_json(self) -> dict:
        dist = self.distribution.as_dict() if self.distribution else {label: 0.0 for label in MIKELS}
        return {
            "target": self.target.value,
            "verdict": self.verdict,
            "distribution": dist,
            "sentinel": self.distribution is None,
            "rationale": list(self.rationale),
            "source_similarity": self.source_similarity,
        }

    @classmethod
    def from_json(cls, data: dict) -> EmotionAssessment:
        dist = None if data["sentinel"] else EmotionDistribution.from_mapping(data["distribution"])
        return cls(dist, data["verdict"], tuple(data["rationale"]), EmotionLabel(data["target"]), data.get("source_similarity"))


def assess(
    image: ImageArtifact,
    target: EmotionLabel,
    backends: Backends,
    pass_threshold: float = DEFAULT_PASS_THRESHOLD,
    source: ImageArtifact | None = None,
) -> EmotionAssessment:
    reply = backends.critique(image, target, source)
    rationale = tuple(reply["rationale"])
    similarity = reply.get("source_similarity")
    if target.in_domain:
        if reply["distribution"] is None:
            raise BackendMalformedResponse("/critique", f"no distribution for in-domain target {target}")
        dist = distribution_from("/critique", reply["distribution"])
        verdict = "pass" if passes(dist, target, pass_threshold) else "fail"
        return EmotionAssessment(dist, verdict, rationale, target, similarity)
    if not isinstance(reply["verdict"], bool):
        raise BackendMalformedResponse("/critique", f"no boolean verdict for out-of-domain target {target}")
    return EmotionAssessment(None, "pass" if reply["verdict"] else "fail", rationale, target, similarity)


@dataclass(frozen=True)
class InstructionDiagnosis:
    instruction_index: int
    effective: bool
    executed: bool
    revised: Instruction | None = None
    error_note: str | None = None
    escalation: bool = False

    def __post_init__(self) -> None:
        ok = self.effective and self.executed and self.revised is None and self.error_note is None
        broken = self.effective and not self.executed and bool(self.error_note) and self.revised is None
        weak = not self.effective and self.revised is not None and self.error_note is None
        if not (ok or broken or weak):
            raise ValueError(f"inconsistent diagnosis for instruction {self.instruction_index}")

    @property
    def needs_rerun(self) -> bool:
        return not (self.effective and self.executed)

    def to_json(self) -> dict:
        return {
            "instruction_index": self.instruction_index,
            "effective": self.effective,
            "executed": self.executed,
            "revised": self.revised.to_json() if self.revised else None,
            "error_note": self.error_note,
            "escalation": self.escalation,
        }

    @classmethod
    def from_json(cls, data: dict) -> InstructionDiagnosis:
        revised = Instruction.from_json(data["revised"]) if data["revised"] else None
        return cls(data["instruction_index"], data["effective"], data["executed"], revised, data["error_note"], data["escalation"])


def _instruction_from(route: str, index: int, suggestion: dict, region_hint: str | None) -> Instruction:
    element = Element.free(suggestion["description"], ElementKind(suggestion["kind"]))
    method = EditingMethod(suggestion["method"])
    hint = region_hint if method in (EditingMethod.REPLACE_OBJECT, EditingMethod.CHANGE_ATTRIBUTE) else None
    try:
        return Instruction.make(index, element, method, hint)
    except IncompatiblePair as exc:
        raise BackendMalformedResponse(route, f"proposed instruction violates compatibility: {exc}") from exc


def diagnose(
    instructions: Sequence[Instruction],
    image: ImageArtifact,
    target: EmotionLabel,
    traces: Mapping[int, ActionTrace],
    backends: Backends,
) -> list[InstructionDiagnosis]:
    """One diagnosis per instruction, plus one escalation entry when every
    instruction looks fine yet the emotion was still not conveyed.

    ``traces`` maps instruction index to its most recent execution trace.
    Instructions whose trace failed are diagnosed as effective but not
    executed without consulting the backend.
    """
    out: list[InstructionDiagnosis] = []
    for ins in instructions:
        trace = traces.get(ins.index)
        if trace is not None and trace.final_status == "failed":
            out.append(InstructionDiagnosis(ins.index, True, False, error_note=trace.failure_reason or "execution failed"))
            continue
        eff = backends.judge_effectiveness(image, target, ins)
        if not eff["effective"]:
            if eff["revised"] is None:
                raise BackendMalformedResponse("/critique", f"instruction {ins.index} judged ineffective without a revision")
            revised = _instruction_from("/critique", ins.index, eff["revised"], ins.region_hint)
            out.append(InstructionDiagnosis(ins.index, False, False, revised=revised))
            continue
        ex = backends.judge_execution(image, target, ins)
        if ex["executed"]:
            out.append(InstructionDiagnosis(ins.index, True, True))
        else:
            out.append(InstructionDiagnosis(ins.index, True, False, error_note=ex["error_note"] or "instruction not visible in the image"))

    if all(not d.needs_rerun for d in out):
        esc = backends.escalate(image, target, instructions)
        hint = next((ins.region_hint for ins in instructions if ins.region_hint), None)
        extra = _instruction_from("/critique", len(instructions) + 1, esc["proposal"], hint)
        out.append(InstructionDiagnosis(extra.index, False, False, revised=extra, escalation=True))
    return out
