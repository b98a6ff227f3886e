"""Evaluation metrics: emotion alignment (Emo-A, Emo-S, ESR), semantic
consistency (CLIP-I) and diversity (LPIPS via a backend, Sem-D)."""

from __future__ import annotations

import math
from collections.abc import Sequence
from dataclasses import dataclass, field
from itertools import combinations
from typing import TYPE_CHECKING

from .errors import BackendError, DimensionMismatch, InvalidDistribution
from .images import ImageArtifact
from .knowledge import cosine_similarity
from .labels import EmotionDistribution, EmotionLabel

if TYPE_CHECKING:
    from .backends.client import Backends

DEFAULT_EPSILON = 1e-6
ESR_RULE = "shifted iff KL(edit || source) > 0 and target mass strictly increases"


def _check(p: EmotionDistribution) -> EmotionDistribution:
    if not isinstance(p, EmotionDistribution):
        raise InvalidDistribution(f"expected an EmotionDistribution, got {type(p).__name__}")
    return p


def kl_divergence(p: EmotionDistribution, q: EmotionDistribution, epsilon: float = DEFAULT_EPSILON) -> float:
    """KL(p || q) after adding ``epsilon`` to every entry of both and renormalizing."""
    _check(p)
    _check(q)
    if epsilon <= 0:
        raise ValueError("epsilon must be > 0")
    ps = [x + epsilon for x in p.probs]
    qs = [x + epsilon for x in q.probs]
    zp, zq = math.fsum(ps), math.fsum(qs)
    total = math.fsum((a / zp) * math.log((a / zp) / (b / zq)) for a, b in zip(ps, qs))
    return max(total, 0.0)


def emo_s(p_src: EmotionDistribution, p_edit: EmotionDistribution, target: EmotionLabel) -> float:
    _check(p_src)
    _check(p_edit)
    if not target.in_domain:
        raise InvalidDistribution(f"Emo-S needs an in-domain target, got {target}")
    return p_edit[target] - p_src[target]


def is_shifted(p_src: EmotionDistribution, p_edit: EmotionDistribution, target: EmotionLabel, epsilon: float = DEFAULT_EPSILON) -> bool:
    return kl_divergence(p_edit, p_src, epsilon) > 0 and p_edit[target] > p_src[target]


def esr(pairs: Sequence[tuple[EmotionDistribution, EmotionDistribution, EmotionLabel]], epsilon: float = DEFAULT_EPSILON) -> float:
    if not pairs:
        raise ValueError("ESR needs at least one pair")
    return sum(is_shifted(src, edit, t, epsilon) for src, edit, t in pairs) / len(pairs)


def emo_a(images: Sequence[ImageArtifact], target: EmotionLabel, classifier: Backends) -> float:
    if not images:
        raise ValueError("Emo-A needs at least one image")
    hits = sum(classifier.classify(img).argmax() == target.value for img in images)
    return hits / len(images)


def sem_d(embeddings: Sequence[Sequence[float]]) -> float:
    """Mean cosine distance over unordered, non-self pairs."""
    if len(embeddings) < 2:
        raise ValueError("Sem-D needs at least two embeddings")
    dims = {len(e) for e in embeddings}
    if len(dims) != 1:
        raise DimensionMismatch(f"embeddings have mixed dimensions {sorted(dims)}")
    dists = [1.0 - cosine_similarity(a, b) for a, b in combinations(embeddings, 2)]
    return math.fsum(dists) / len(dists)


def clip_i(src_embedding: Sequence[float], edit_embedding: Sequence[float]) -> float:
    return cosine_similarity(src_embedding, edit_embedding)


def lpips_diversity(images: Sequence[ImageArtifact], perceptual: Backends) -> float:
    if len(images) < 2:
        raise ValueError("LPIPS diversity needs at least two images")
    dists = [perceptual.perceptual_distance(a, b) for a, b in combinations(images, 2)]
    return math.fsum(dists) / len(dists)


# -- reports ------------------------------------------------------------------


@dataclass(frozen=True)
class Sample:
    job_id: str
    branch: int
    source: ImageArtifact
    edited: ImageArtifact
    target: EmotionLabel


@dataclass
class MetricReport:
    emo_a: float | None
    emo_s: float | None
    esr: float | None
    clip_i: float | None
    lpips: float | None
    sem_d: float | None
    samples: list[dict] = field(default_factory=list)
    groups: list[dict] = field(default_factory=list)
    counts: dict[str, int] = field(default_factory=dict)

    def to_json(self) -> dict:
        return {
            "esr_rule": ESR_RULE,
            "aggregate": {
                "clip_i": self.clip_i,
                "emo_a": self.emo_a,
                "emo_s": self.emo_s,
                "esr": self.esr,
                "lpips": self.lpips,
                "sem_d": self.sem_d,
            },
            "counts": self.counts,
            "samples": self.samples,
            "groups": self.groups,
        }

    def table(self) -> str:
        def fmt(v: float | None) -> str:
            return "n/a" if v is None else f"{v:.4f}"

        head = ("CLIP-I", "Emo-A", "Emo-S", "ESR", "LPIPS", "Sem-D")
        vals = tuple(fmt(v) for v in (self.clip_i, self.emo_a, self.emo_s, self.esr, self.lpips, self.sem_d))
        widths = [max(len(h), len(v)) for h, v in zip(head, vals)]
        lines = [
            "  ".join(h.rjust(w) for h, w in zip(head, widths)),
            "  ".join(v.rjust(w) for v, w in zip(vals, widths)),
            f"samples: {self.counts.get('samples', 0)}  groups: {self.counts.get('groups', 0)}",
            f"ESR rule: {ESR_RULE}",
        ]
        return "\n".join(lines) + "\n"


def _mean(values: Sequence[float]) -> float | None:
    return math.fsum(values) / len(values) if values else None


def build_report(samples: Sequence[Sample], backends: Backends, with_lpips: bool = True) -> MetricReport:
    """Per-sample alignment/consistency scores and per-source diversity.

    Samples sharing a source image form one diversity group. Out-of-domain
    targets are left out of the emotion-distribution metrics.
    """
    rows = []
    for s in samples:
        src_emb = backends.embed_image(s.source)
        edit_emb = backends.embed_image(s.edited)
        row = {
            "job_id": s.job_id,
            "branch": s.branch,
            "target": s.target.value,
            "edited": s.edited.content_hash,
            "clip_i": clip_i(src_emb, edit_emb),
            "emo_a": None,
            "emo_s": None,
            "shifted": None,
        }
        if s.target.in_domain:
            p_src = backends.classify(s.source)
            p_edit = backends.classify(s.edited)
            row["emo_a"] = 1.0 if p_edit.argmax() == s.target.value else 0.0
            row["emo_s"] = emo_s(p_src, p_edit, s.target)
            row["shifted"] = 1.0 if is_shifted(p_src, p_edit, s.target) else 0.0
        rows.append((row, edit_emb))

    groups: dict[str, list[tuple[Sample, list[float]]]] = {}
    for s, (_, emb) in zip(samples, rows):
        groups.setdefault(s.source.content_hash, []).append((s, emb))
    group_rows = []
    for src_hash in sorted(groups):
        members = groups[src_hash]
        if len(members) < 2:
            continue
        entry = {"source": src_hash, "size": len(members), "sem_d": sem_d([emb for _, emb in members]), "lpips": None}
        if with_lpips:
            try:
                entry["lpips"] = lpips_diversity([m.edited for m, _ in members], backends)
            except BackendError:
                entry["lpips"] = None
        group_rows.append(entry)

    sample_rows = [r for r, _ in rows]
    lp = [g["lpips"] for g in group_rows if g["lpips"] is not None]
    return MetricReport(
        emo_a=_mean([r["emo_a"] for r in sample_rows if r["emo_a"] is not None]),
        emo_s=_mean([r["emo_s"] for r in sample_rows if r["emo_s"] is not None]),
        esr=_mean([r["shifted"] for r in sample_rows if r["shifted"] is not None]),
        clip_i=_mean([r["clip_i"] for r in sample_rows]),
        lpips=_mean(lp) if lp and len(lp) == len(group_rows) else None,
        sem_d=_mean([g["sem_d"] for g in group_rows]),
        samples=sample_rows,
        groups=group_rows,
        counts={"samples": len(sample_rows), "groups": len(group_rows)},
    )
