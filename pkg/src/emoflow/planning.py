"""Planning agent: source analysis, element/method pairing and plan-set assembly."""

from __future__ import annotations

from collections import Counter
from collections.abc import Sequence
from dataclasses import dataclass, field
from typing import TYPE_CHECKING

from .errors import BackendMalformedResponse, IncompatiblePair, PlanningFailed
from .images import ImageArtifact, ImageStore
from .knowledge import FactorNode
from .labels import EditingMethod, ElementKind, EmotionLabel

if TYPE_CHECKING:
    from .backends.client import Backends

DEFAULT_K = 5
DEFAULT_N_MAX = 4

M = EditingMethod
# Rows are ordered by preference: the first method is the default pairing.
_COMPATIBILITY: dict[ElementKind, tuple[EditingMethod, ...]] = {
    ElementKind.OBJECT: (M.ADD_OBJECT, M.REPLACE_OBJECT, M.CHANGE_ATTRIBUTE, M.REMOVE_OBJECT),
    ElementKind.BACKGROUND_SCENE: (M.CHANGE_BACKGROUND,),
    ElementKind.FACIAL_EXPRESSION: (M.CHANGE_EXPRESSION,),
    ElementKind.COLOR_TONE: (M.CHANGE_FILTER,),
    ElementKind.ATTRIBUTE: (M.CHANGE_ATTRIBUTE,),
    ElementKind.ACTION: (M.ADD_OBJECT, M.CHANGE_ATTRIBUTE),
}
_NEEDS_REGION = frozenset({M.REPLACE_OBJECT, M.CHANGE_ATTRIBUTE})


def compatible_methods(kind: ElementKind) -> frozenset[EditingMethod]:
    return frozenset(_COMPATIBILITY[ElementKind(kind)])


def preferred_methods(kind: ElementKind) -> tuple[EditingMethod, ...]:
    return _COMPATIBILITY[ElementKind(kind)]


@dataclass(frozen=True)
class Entity:
    name: str
    salience: float


@dataclass(frozen=True)
class SemanticCues:
    scene_summary: str
    entities: tuple[Entity, ...]
    source_emotion: EmotionLabel
    source_confidence: float
    cue_embedding: tuple[float, ...]

    def __post_init__(self) -> None:
        if not self.scene_summary.strip():
            raise ValueError("scene_summary must be non-empty")
        if not 0.0 <= self.source_confidence <= 1.0:
            raise ValueError("source_confidence must lie in [0, 1]")

    def to_json(self) -> dict:
        return {
            "scene_summary": self.scene_summary,
            "entities": [{"name": e.name, "salience": e.salience} for e in self.entities],
            "source_emotion": self.source_emotion.value,
            "source_confidence": self.source_confidence,
            "cue_embedding": list(self.cue_embedding),
        }

    @classmethod
    def from_json(cls, data: dict) -> SemanticCues:
        return cls(
            scene_summary=data["scene_summary"],
            entities=tuple(Entity(e["name"], float(e["salience"])) for e in data["entities"]),
            source_emotion=EmotionLabel.parse(data["source_emotion"]),
            source_confidence=float(data["source_confidence"]),
            cue_embedding=tuple(float(x) for x in data["cue_embedding"]),
        )


@dataclass(frozen=True)
class Element:
    """An editing element: a retrieved factor node or proposer free text."""

    id: str
    description: str
    kind: ElementKind
    node: FactorNode | None = field(default=None, compare=False, repr=False)

    @classmethod
    def from_node(cls, node: FactorNode) -> Element:
        return cls(node.id, node.description, node.kind, node)

    @classmethod
    def free(cls, description: str, kind: ElementKind) -> Element:
        description = description.strip()
        if not description:
            raise ValueError("element description must be non-empty")
        kind = ElementKind(kind)
        return cls(f"free:{kind.value}:{description}", description, kind)

    def to_json(self) -> dict:
        return {"id": self.id, "description": self.description, "kind": self.kind.value}

    @classmethod
    def from_json(cls, data: dict) -> Element:
        return cls(data["id"], data["description"], ElementKind(data["kind"]))


def format_instruction(element: Element, method: EditingMethod, region_hint: str | None = None) -> str:
    method = EditingMethod(method)
    if method not in compatible_methods(element.kind):
        raise IncompatiblePair(f"{method.value} cannot act on a {element.kind.value} element")
    desc = element.description
    target = region_hint or "the object"
    if method is M.CHANGE_BACKGROUND:
        return f"replace the background with {desc}"
    if method is M.ADD_OBJECT:
        return f"add {desc} to the scene"
    if method is M.REMOVE_OBJECT:
        return f"remove {desc}"
    if method is M.REPLACE_OBJECT:
        return f"replace {target} with {desc}"
    if method is M.CHANGE_EXPRESSION:
        return f"change the facial expression to {desc}"
    if method is M.CHANGE_FILTER:
        return f"apply a {desc} color tone"
    return f"change {target} to be {desc}"


@dataclass(frozen=True)
class Instruction:
    index: int
    element: Element
    method: EditingMethod
    text: str
    region_hint: str | None = None

    @classmethod
    def make(cls, index: int, element: Element, method: EditingMethod, region_hint: str | None = None) -> Instruction:
        method = EditingMethod(method)
        return cls(index, element, method, format_instruction(element, method, region_hint), region_hint)

    @property
    def key(self) -> tuple[str, str]:
        return (self.element.id, self.method.value)

    def validate(self) -> None:
        if not self.text.strip():
            raise ValueError(f"instruction {self.index} has empty text")
        if self.method not in compatible_methods(self.element.kind):
            raise IncompatiblePair(f"instruction {self.index}: {self.method.value} on {self.element.kind.value}")

    def to_json(self) -> dict:
        return {
            "index": self.index,
            "element": self.element.to_json(),
            "method": self.method.value,
            "text": self.text,
            "region_hint": self.region_hint,
        }

    @classmethod
    def from_json(cls, data: dict) -> Instruction:
        return cls(
            int(data["index"]),
            Element.from_json(data["element"]),
            EditingMethod(data["method"]),
            data["text"],
            data.get("region_hint"),
        )


@dataclass(frozen=True)
class EditPlan:
    plan_id: int
    instructions: tuple[Instruction, ...]
    rationale: str = ""

    def __post_init__(self) -> None:
        if not self.instructions:
            raise ValueError("a plan needs at least one instruction")
        for ins in self.instructions:
            ins.validate()
        if [ins.index for ins in self.instructions] != list(range(1, len(self.instructions) + 1)):
            raise ValueError("instruction indices must run contiguously from 1")
        keys = [ins.key for ins in self.instructions]
        if len(set(keys)) != len(keys):
            raise ValueError("duplicate (element, method) pair within a plan")

    @property
    def signature(self) -> Counter:
        return Counter(ins.key for ins in self.instructions)

    def to_json(self) -> dict:
        return {
            "plan_id": self.plan_id,
            "rationale": self.rationale,
            "instructions": [ins.to_json() for ins in self.instructions],
        }

    @classmethod
    def from_json(cls, data: dict) -> EditPlan:
        return cls(int(data["plan_id"]), tuple(Instruction.from_json(i) for i in data["instructions"]), data["rationale"])


@dataclass(frozen=True)
class PlanSet:
    plans: tuple[EditPlan, ...]
    target_emotion: EmotionLabel

    def __post_init__(self) -> None:
        sigs = [p.signature for p in self.plans]
        for i in range(len(sigs)):
            for j in range(i + 1, len(sigs)):
                if sigs[i] == sigs[j]:
                    raise ValueError(f"plans {self.plans[i].plan_id} and {self.plans[j].plan_id} are not distinct")


def analyze(image: ImageArtifact, store: ImageStore, backends: Backends) -> SemanticCues:
    store.check(image)
    reply = backends.analyze(image)
    embedding = backends.embed_text(reply["scene_summary"])
    try:
        return SemanticCues(
            scene_summary=reply["scene_summary"],
            entities=tuple(Entity(e["name"], float(e["salience"])) for e in reply["entities"]),
            source_emotion=EmotionLabel.parse(reply["source_emotion"]),
            source_confidence=float(reply["source_confidence"]),
            cue_embedding=tuple(embedding),
        )
    except ValueError as exc:
        raise BackendMalformedResponse("/analyze", str(exc)) from exc


def _mentions(description: str, names: Sequence[str]) -> bool:
    low = description.lower()
    return any(name.lower() in low for name in names if name)


def prioritize(pool: Sequence[FactorNode], cues: SemanticCues) -> list[FactorNode]:
    """Retrieval rank with a one-place boost for elements naming a scene entity."""
    names = [e.name for e in cues.entities]
    scored = []
    for rank, node in enumerate(pool):
        overlap = _mentions(node.description, names)
        scored.append((rank - 1 if overlap else rank, not overlap, rank, node))
    return [s[-1] for s in sorted(scored, key=lambda s: s[:3])]


def _region_hint(method: EditingMethod, cues: SemanticCues) -> str | None:
    if method not in _NEEDS_REGION or not cues.entities:
        return None
    top = min(cues.entities, key=lambda e: (-e.salience, e.name))
    return top.name


def _suggestions(raw: Sequence[dict]) -> list[tuple[Element, EditingMethod]]:
    out = []
    for s in raw:
        element = Element.free(s["description"], ElementKind(s["kind"]))
        method = EditingMethod(s["method"])
        if method not in compatible_methods(element.kind):
            method = preferred_methods(element.kind)[0]
        out.append((element, method))
    return out


def generate_plans(
    cues: SemanticCues,
    target: EmotionLabel,
    pool: Sequence[FactorNode],
    proposer: Backends,
    k: int = DEFAULT_K,
    n_max: int = DEFAULT_N_MAX,
    seed: int = 0,
) -> PlanSet:
    """Assemble ``k`` pairwise-distinct plans of at most ``n_max`` instructions.

    Plan ``i`` takes a rotating window of the prioritized element list, so
    consecutive plans overlap but differ. A collision with an accepted plan
    triggers proposer requests for replacement pairs, at most ``3 * k`` of them.
    """
    if k < 1 or n_max < 1:
        raise ValueError("k and n_max must be >= 1")

    pairs: list[tuple[Element, EditingMethod]] = []
    if target.in_domain:
        nodes = [n for n in pool if n.emotion == target]
        pairs = [(Element.from_node(n), preferred_methods(n.kind)[0]) for n in prioritize(nodes, cues)]
    if len(pairs) < k:
        wanted = max(k, n_max) - len(pairs) if target.in_domain else max(k, n_max)
        raw = proposer.propose(cues, target, wanted, seed, exclude=[e.id for e, _ in pairs])
        seen = {e.id for e, _ in pairs}
        for element, method in _suggestions(raw):
            if element.id not in seen:
                seen.add(element.id)
                pairs.append((element, method))
    if not pairs:
        raise PlanningFailed(f"no editing elements available for {target}")

    m = len(pairs)
    width = min(n_max, m) if k == 1 else min(n_max, max(1, m - 1))
    budget = 3 * k
    accepted: list[EditPlan] = []
    for plan_id in range(1, k + 1):
        start = plan_id - 1
        chosen = [pairs[(start + j) % m] for j in range(width)]
        plan = _assemble(plan_id, chosen, cues, target)
        while any(plan.signature == other.signature for other in accepted):
            if budget == 0:
                raise PlanningFailed(f"could not find {k} distinct plans for {target}")
            budget -= 1
            used = [e.id for e, _ in chosen]
            raw = proposer.propose(cues, target, 1, seed + (3 * k - budget), exclude=used)
            replacement = _pick_replacement(chosen, _suggestions(raw), accepted, cues, target, plan_id)
            if replacement is not None:
                chosen, plan = replacement
        accepted.append(plan)
    return PlanSet(tuple(accepted), target)


def _assemble(plan_id: int, chosen, cues: SemanticCues, target: EmotionLabel) -> EditPlan:
    instructions = tuple(
        Instruction.make(i, element, method, _region_hint(method, cues))
        for i, (element, method) in enumerate(chosen, start=1)
    )
    rationale = f"{target.value}: " + "; ".join(ins.text for ins in instructions)
    return EditPlan(plan_id, instructions, rationale)


def _pick_replacement(chosen, suggestions, accepted, cues, target, plan_id):
    """Swap the last pair of ``chosen`` for a suggested pair giving a fresh signature."""
    in_plan = {(e.id, m) for e, m in chosen[:-1]}
    for element, method in suggestions:
        methods = [method] + [alt for alt in preferred_methods(element.kind) if alt is not method]
        for alt in methods:
            if (element.id, alt) in in_plan:
                continue
            candidate = chosen[:-1] + [(element, alt)]
            plan = _assemble(plan_id, candidate, cues, target)
            if all(plan.signature != other.signature for other in accepted):
                return candidate, plan
    return None
