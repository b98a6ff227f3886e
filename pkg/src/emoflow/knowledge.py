"""Emotion-factor knowledge base.

Exemplar embeddings are grouped per emotion by average-linkage agglomerative
clustering over cosine similarity. Surviving clusters become ``FactorNode``s,
which the planner retrieves by L2 distance to the source image's cue embedding.
"""

from __future__ import annotations

import json
import math
import os
import statistics
from collections.abc import Callable, Sequence
from dataclasses import asdict, dataclass, field
from functools import cached_property
from itertools import combinations
from pathlib import Path

import jsonschema
import numpy as np

from .errors import DimensionMismatch, EmptyKnowledgeBase, IoFailure, SchemaViolation, ZeroVector
from .labels import MIKELS, ElementKind, EmotionLabel

DEFAULT_TOP_K = 5
DEFAULT_PER_KIND_CAP = 2


def _check_dims(a: Sequence[float], b: Sequence[float]) -> None:
    if len(a) != len(b):
        raise DimensionMismatch(f"vector dimensions differ: {len(a)} != {len(b)}")


def cosine_similarity(a: Sequence[float], b: Sequence[float]) -> float:
    _check_dims(a, b)
    va = np.asarray(a, dtype=float)
    vb = np.asarray(b, dtype=float)
    na = float(np.linalg.norm(va))
    nb = float(np.linalg.norm(vb))
    if na == 0.0 or nb == 0.0:
        raise ZeroVector("cosine similarity is undefined for a zero vector")
    if np.array_equal(va, vb):
        return 1.0  # exact, where the division below can round
    value = float(va @ vb) / (na * nb)
    return max(-1.0, min(1.0, value))


def l2_distance(a: Sequence[float], b: Sequence[float]) -> float:
    _check_dims(a, b)
    diff = np.asarray(a, dtype=float) - np.asarray(b, dtype=float)
    return float(math.sqrt(float(diff @ diff)))


@dataclass(frozen=True)
class ClusterParams:
    merge_threshold: float = 0.89
    min_cluster_size: int = 5
    # Hamming bits on a 64-bit perceptual hash.
    redundancy_distance_min: int = 8
    relevance_required: bool = False
    relevance_min: float = 0.5

    def __post_init__(self) -> None:
        if not 0.0 < self.merge_threshold <= 1.0:
            raise ValueError(f"merge_threshold must lie in (0, 1], got {self.merge_threshold}")
        if self.min_cluster_size < 1:
            raise ValueError("min_cluster_size must be >= 1")

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, data: dict) -> ClusterParams:
        return cls(**data)


@dataclass(frozen=True)
class ExemplarItem:
    id: str
    emotion: EmotionLabel
    embedding: tuple[float, ...]
    perceptual_hash: str | None = None
    relevance_score: float | None = None
    caption: str | None = None

    def __post_init__(self) -> None:
        if not self.emotion.in_domain:
            raise ValueError(f"exemplar {self.id} has out-of-domain emotion {self.emotion}")
        if not all(math.isfinite(x) for x in self.embedding):
            raise ValueError(f"exemplar {self.id} has a non-finite embedding component")

    @classmethod
    def from_json(cls, data: dict) -> ExemplarItem:
        return cls(
            id=str(data["id"]),
            emotion=EmotionLabel.parse(data["emotion"]),
            embedding=tuple(float(x) for x in data["embedding"]),
            perceptual_hash=data.get("perceptual_hash"),
            relevance_score=data.get("relevance_score"),
            caption=data.get("caption"),
        )


@dataclass(frozen=True)
class FactorNode:
    id: str
    emotion: EmotionLabel
    kind: ElementKind
    description: str
    embedding: tuple[float, ...]
    cluster_id: int
    cluster_size: int

    def __post_init__(self) -> None:
        if not self.description.strip():
            raise ValueError(f"node {self.id} has an empty description")
        if not all(math.isfinite(x) for x in self.embedding):
            raise ValueError(f"node {self.id} has a non-finite embedding component")


@dataclass(frozen=True)
class EmotionFactorTree:
    nodes: tuple[FactorNode, ...] = ()
    dimension: int = 0
    build_params: ClusterParams = field(default_factory=ClusterParams)

    def __post_init__(self) -> None:
        # Canonical order: grouped by emotion (Mikels order), stable within a group.
        ordered = tuple(sorted(self.nodes, key=lambda n: MIKELS.index(n.emotion.value) if n.emotion.in_domain else -1))
        object.__setattr__(self, "nodes", ordered)
        seen: set[str] = set()
        for node in self.nodes:
            if node.id in seen:
                raise ValueError(f"duplicate node id {node.id}")
            seen.add(node.id)
            if not node.emotion.in_domain:
                raise ValueError(f"node {node.id} has out-of-domain emotion {node.emotion}")
            if len(node.embedding) != self.dimension:
                raise DimensionMismatch(
                    f"node {node.id} has dimension {len(node.embedding)}, tree has {self.dimension}"
                )

    def nodes_for(self, emotion: EmotionLabel | str) -> tuple[FactorNode, ...]:
        return self._by_emotion.get(str(emotion), ())

    @cached_property
    def _by_emotion(self) -> dict[str, tuple[FactorNode, ...]]:
        groups: dict[str, list[FactorNode]] = {}
        for node in self.nodes:
            groups.setdefault(node.emotion.value, []).append(node)
        return {k: tuple(v) for k, v in groups.items()}

    @cached_property
    def _matrices(self) -> dict[str, np.ndarray]:
        return {
            emotion: np.array([n.embedding for n in nodes], dtype=float).reshape(len(nodes), self.dimension)
            for emotion, nodes in self._by_emotion.items()
        }


# -- clustering ---------------------------------------------------------------


@dataclass(frozen=True)
class Merge:
    """Cluster ``absorbed`` folded into ``kept`` (kept < absorbed) at ``similarity``."""

    kept: int
    absorbed: int
    similarity: float


def agglomerate(embeddings: Sequence[Sequence[float]], threshold: float) -> tuple[list[Merge], list[list[int]]]:
    """Average-linkage clustering over cosine similarity.

    Starts from singletons and repeatedly merges the most similar pair until
    the best remaining similarity drops below ``threshold``. Ties go to the
    lexicographically smallest (kept, absorbed) pair; a merged cluster keeps
    the smaller id. Returns the merge history and the final clusters as sorted
    lists of input indices.
    """
    n = len(embeddings)
    if n == 0:
        return [], []
    x = np.asarray(embeddings, dtype=float)
    if x.ndim != 2:
        raise DimensionMismatch("embeddings must share one dimension")
    norms = np.linalg.norm(x, axis=1)
    if np.any(norms == 0):
        raise ZeroVector("cannot cluster a zero embedding")
    x = x / norms[:, None]
    sim = x @ x.T
    sizes = np.ones(n)
    active = np.ones(n, dtype=bool)
    upper = np.triu(np.ones((n, n), dtype=bool), k=1)
    members: dict[int, list[int]] = {i: [i] for i in range(n)}
    history: list[Merge] = []

    while active.sum() > 1:
        mask = upper & active[:, None] & active[None, :]
        masked = np.where(mask, sim, -np.inf)
        flat = int(np.argmax(masked))
        i, j = divmod(flat, n)
        best = float(masked[i, j])
        if best < threshold:
            break
        total = sizes[i] + sizes[j]
        row = (sizes[i] * sim[i] + sizes[j] * sim[j]) / total
        sim[i, :] = row
        sim[:, i] = row
        sizes[i] = total
        active[j] = False
        members[i].extend(members.pop(j))
        history.append(Merge(i, j, best))

    clusters = [sorted(members[i]) for i in sorted(members)]
    return history, clusters


def hamming_hex(a: str, b: str) -> int:
    return bin(int(a, 16) ^ int(b, 16)).count("1")


def _is_redundant(items: Sequence[ExemplarItem], min_distance: int) -> bool:
    hashes = [it.perceptual_hash for it in items]
    if len(hashes) < 2 or any(h is None for h in hashes):
        return False
    distances = [hamming_hex(a, b) for a, b in combinations(hashes, 2)]
    return statistics.median(distances) < min_distance


def _is_relevant(items: Sequence[ExemplarItem], min_score: float) -> bool:
    scores = [it.relevance_score for it in items if it.relevance_score is not None]
    if not scores:
        return False
    return statistics.fmean(scores) >= min_score


# (emotion, member exemplars) -> (description, kind)
DescribeFn = Callable[[EmotionLabel, Sequence[ExemplarItem]], tuple[str, ElementKind]]


def build_tree(
    items: Sequence[ExemplarItem],
    params: ClusterParams,
    describe: DescribeFn,
    dimension: int | None = None,
) -> EmotionFactorTree:
    if not items:
        return EmotionFactorTree((), dimension or 0, params)
    dim = len(items[0].embedding)
    if dimension is not None and dimension != dim:
        raise DimensionMismatch(f"expected dimension {dimension}, exemplars have {dim}")
    for it in items:
        if len(it.embedding) != dim:
            raise DimensionMismatch(f"exemplar {it.id} has dimension {len(it.embedding)}, expected {dim}")

    nodes: list[FactorNode] = []
    for emotion in MIKELS:
        group = sorted((it for it in items if it.emotion.value == emotion), key=lambda it: it.id)
        if group:
            nodes.extend(_build_emotion(EmotionLabel(emotion), group, params, describe))
    return EmotionFactorTree(tuple(nodes), dim, params)


def _build_emotion(
    emotion: EmotionLabel,
    group: list[ExemplarItem],
    params: ClusterParams,
    describe: DescribeFn,
) -> list[FactorNode]:
    _, clusters = agglomerate([it.embedding for it in group], params.merge_threshold)
    nodes = []
    for cluster in clusters:
        if len(cluster) < params.min_cluster_size:
            continue
        members = [group[i] for i in cluster]
        if _is_redundant(members, params.redundancy_distance_min):
            continue
        if params.relevance_required and not _is_relevant(members, params.relevance_min):
            continue
        centroid = np.mean([m.embedding for m in members], axis=0)
        norm = float(np.linalg.norm(centroid))
        if norm == 0.0:
            raise ZeroVector(f"cluster {cluster[0]} of {emotion} has a zero centroid")
        description, kind = describe(emotion, members)
        nodes.append(
            FactorNode(
                id=f"{emotion.value}-{len(nodes):04d}",
                emotion=emotion,
                kind=ElementKind(kind),
                description=description,
                embedding=tuple(float(v) for v in centroid / norm),
                cluster_id=cluster[0],
                cluster_size=len(cluster),
            )
        )
    return nodes


# -- retrieval ----------------------------------------------------------------


def retrieve(
    tree: EmotionFactorTree,
    query: Sequence[float],
    target: EmotionLabel,
    k: int = DEFAULT_TOP_K,
    per_kind_cap: int | None = DEFAULT_PER_KIND_CAP,
) -> list[FactorNode]:
    """Nearest factor nodes for ``target``, ascending L2 distance, ties by id.

    At most ``per_kind_cap`` nodes of any one element kind are returned; nodes
    over the cap are passed over so later kinds can fill in.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    if not target.in_domain:
        raise ValueError(f"retrieval needs an in-domain emotion, got {target}")
    if len(query) != tree.dimension:
        raise DimensionMismatch(f"query has dimension {len(query)}, tree has {tree.dimension}")
    candidates = tree.nodes_for(target)
    if not candidates:
        raise EmptyKnowledgeBase(f"no factor nodes for {target}")

    diff = tree._matrices[target.value] - np.asarray(query, dtype=float)
    dists = np.sqrt(np.einsum("ij,ij->i", diff, diff))
    order = sorted(range(len(candidates)), key=lambda i: (dists[i], candidates[i].id))

    picked: list[FactorNode] = []
    per_kind: dict[ElementKind, int] = {}
    for i in order:
        node = candidates[i]
        if per_kind_cap is not None and per_kind.get(node.kind, 0) >= per_kind_cap:
            continue
        per_kind[node.kind] = per_kind.get(node.kind, 0) + 1
        picked.append(node)
        if len(picked) == k:
            break
    return picked


# -- persistence --------------------------------------------------------------

_TREE_SCHEMA = {
    "type": "object",
    "required": ["emotion", "dimension", "build_params", "nodes"],
    "properties": {
        "emotion": {"type": "string", "enum": list(MIKELS)},
        "dimension": {"type": "integer", "minimum": 0},
        "build_params": {
            "type": "object",
            "required": ["merge_threshold", "min_cluster_size", "redundancy_distance_min", "relevance_required"],
            "properties": {
                "merge_threshold": {"type": "number"},
                "min_cluster_size": {"type": "integer"},
                "redundancy_distance_min": {"type": "integer"},
                "relevance_required": {"type": "boolean"},
                "relevance_min": {"type": "number"},
            },
            "additionalProperties": False,
        },
        "nodes": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["id", "kind", "description", "embedding", "provenance"],
                "properties": {
                    "id": {"type": "string", "minLength": 1},
                    "kind": {"type": "string", "enum": [k.value for k in ElementKind]},
                    "description": {"type": "string", "minLength": 1},
                    "embedding": {"type": "array", "items": {"type": "number"}},
                    "provenance": {
                        "type": "object",
                        "required": ["cluster_id", "cluster_size"],
                        "properties": {
                            "cluster_id": {"type": "integer"},
                            "cluster_size": {"type": "integer", "minimum": 1},
                        },
                    },
                },
            },
        },
    },
}
_TREE_VALIDATOR = jsonschema.Draft202012Validator(_TREE_SCHEMA)


def _json_path(parts) -> str:
    out = ""
    for part in parts:
        out += f"[{part}]" if isinstance(part, int) else (f".{part}" if out else str(part))
    return out or "$"


def _schema_error(err: jsonschema.ValidationError) -> SchemaViolation:
    path = list(err.absolute_path)
    if err.validator == "required" and isinstance(err.instance, dict):
        missing = [name for name in err.validator_value if name not in err.instance]
        if missing:
            path.append(missing[0])
            return SchemaViolation(_json_path(path), "required field is missing")
    return SchemaViolation(_json_path(path), err.message)


def tree_to_json(tree: EmotionFactorTree, emotion: str) -> dict:
    return {
        "emotion": emotion,
        "dimension": tree.dimension,
        "build_params": tree.build_params.to_json(),
        "nodes": [
            {
                "id": n.id,
                "kind": n.kind.value,
                "description": n.description,
                "embedding": list(n.embedding),
                "provenance": {"cluster_id": n.cluster_id, "cluster_size": n.cluster_size},
            }
            for n in tree.nodes_for(emotion)
        ],
    }


def save_tree(tree: EmotionFactorTree, directory: str | os.PathLike[str]) -> list[Path]:
    """Write one JSON file per in-domain emotion (empty node lists included)."""
    out = Path(directory)
    written = []
    try:
        out.mkdir(parents=True, exist_ok=True)
        for emotion in MIKELS:
            path = out / f"{emotion}.json"
            text = json.dumps(tree_to_json(tree, emotion), indent=2, ensure_ascii=False) + "\n"
            path.write_text(text, encoding="utf-8")
            written.append(path)
    except OSError as exc:
        raise IoFailure(f"cannot write tree to {out}: {exc}") from exc
    return written


def load_tree(directory: str | os.PathLike[str]) -> EmotionFactorTree:
    src = Path(directory)
    docs = []
    for emotion in MIKELS:
        path = src / f"{emotion}.json"
        if not path.exists():
            continue
        try:
            doc = json.loads(path.read_text(encoding="utf-8"))
        except OSError as exc:
            raise IoFailure(f"cannot read {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise SchemaViolation("$", f"{path.name} is not valid JSON: {exc}") from exc
        errors = sorted(_TREE_VALIDATOR.iter_errors(doc), key=lambda e: list(e.absolute_path))
        if errors:
            raise _schema_error(errors[0])
        if doc["emotion"] != emotion:
            raise SchemaViolation("emotion", f"{path.name} declares emotion {doc['emotion']!r}")
        docs.append(doc)
    if not docs:
        raise IoFailure(f"no emotion-factor files found in {src}")

    dimension = docs[0]["dimension"]
    params = ClusterParams.from_json(docs[0]["build_params"])
    nodes = []
    for doc in docs:
        if doc["dimension"] != dimension:
            raise SchemaViolation("dimension", f"{doc['emotion']} has dimension {doc['dimension']}, expected {dimension}")
        for i, raw in enumerate(doc["nodes"]):
            if len(raw["embedding"]) != dimension:
                raise SchemaViolation(f"nodes[{i}].embedding", f"length {len(raw['embedding'])} != dimension {dimension}")
            nodes.append(
                FactorNode(
                    id=raw["id"],
                    emotion=EmotionLabel(doc["emotion"]),
                    kind=ElementKind(raw["kind"]),
                    description=raw["description"],
                    embedding=tuple(float(x) for x in raw["embedding"]),
                    cluster_id=raw["provenance"]["cluster_id"],
                    cluster_size=raw["provenance"]["cluster_size"],
                )
            )
    return EmotionFactorTree(tuple(nodes), dimension, params)
