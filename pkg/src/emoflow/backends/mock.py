"""Deterministic, scriptable mock of every backend route.

Each reply is a pure function of ``(script, request content)``: scripted
entries are matched first, anything unmatched falls through to seeded
default generators. Sequenced entries index their ``responses`` list by a
request field (``attempt`` unless configured otherwise), which keeps replies
content-determined while still letting a fixture say "fail twice, then pass".
"""

from __future__ import annotations

import hashlib
import json
import threading
from collections.abc import Mapping
from dataclasses import dataclass
from pathlib import Path
from typing import Any

import numpy as np

from .. import masks
from ..errors import ImageUnreadable
from ..images import ImageStore
from ..labels import MIKELS
from .client import TransportTimeout
from .protocol import (
    PROTOCOL_VERSION,
    canonical_json,
    error_body,
    request_hash,
    schema_key,
    validation_errors,
)

EDIT_TRAILER = b"\n#emoflow-edit "

SCENES = (
    ("a quiet street at dusk", ("street lamp", "bench")),
    ("a family picnic in a park", ("family", "blanket")),
    ("a dog on a sandy beach", ("dog", "sea")),
    ("a cluttered office desk", ("laptop", "coffee mug")),
    ("a child playing in a snowy yard", ("child", "snowman")),
    ("a lone tree on a grassy hill", ("tree", "sky")),
)

VOCABULARY = (
    ("a warm golden sunset", "background_scene", "change_background"),
    ("soft pastel", "color_tone", "change_filter"),
    ("a bouquet of bright flowers", "object", "add_object"),
    ("a broad smile", "facial_expression", "change_expression"),
    ("dark storm clouds", "object", "add_object"),
    ("cold bluish", "color_tone", "change_filter"),
    ("a misty mountain range", "background_scene", "change_background"),
    ("sparkling fairy lights", "object", "add_object"),
    ("a tearful expression", "facial_expression", "change_expression"),
    ("weathered and worn", "attribute", "change_attribute"),
    ("people dancing", "action", "add_object"),
    ("a flock of birds in flight", "object", "add_object"),
    ("vivid saturated", "color_tone", "change_filter"),
    ("fireworks over the city", "background_scene", "change_background"),
    ("a wilted plant", "object", "add_object"),
    ("glowing and radiant", "attribute", "change_attribute"),
)


def _element_id(description: str, kind: str) -> str:
    return f"free:{kind}:{description}"


@dataclass(frozen=True)
class ScriptEntry:
    route: str
    match: Mapping[str, Any] | None = None
    hash: str | None = None
    response: Mapping[str, Any] | None = None
    patch: Mapping[str, Any] | None = None
    responses: tuple[Mapping[str, Any], ...] | None = None
    index_by: str = "attempt"
    error: Mapping[str, Any] | None = None
    delay_ms: int = 0

    def matches(self, route: str, key: str, body: Mapping[str, Any]) -> bool:
        if route != self.route:
            return False
        if self.hash is not None and self.hash != key:
            return False
        return self.match is None or _subset(self.match, body)

    @classmethod
    def from_json(cls, data: Mapping[str, Any]) -> ScriptEntry:
        responses = data.get("responses")
        return cls(
            route=data["route"],
            match=data.get("match"),
            hash=data.get("hash"),
            response=data.get("response"),
            patch=data.get("patch"),
            responses=tuple(responses) if responses is not None else None,
            index_by=data.get("index_by", "attempt"),
            error=data.get("error"),
            delay_ms=int(data.get("delay_ms", 0)),
        )

    def to_json(self) -> dict:
        out: dict[str, Any] = {"route": self.route}
        for name in ("match", "hash", "response", "patch", "error"):
            if getattr(self, name) is not None:
                out[name] = getattr(self, name)
        if self.responses is not None:
            out["responses"] = list(self.responses)
            out["index_by"] = self.index_by
        if self.delay_ms:
            out["delay_ms"] = self.delay_ms
        return out


def _subset(pattern: Any, value: Any) -> bool:
    if isinstance(pattern, Mapping):
        return isinstance(value, Mapping) and all(k in value and _subset(v, value[k]) for k, v in pattern.items())
    return pattern == value


@dataclass(frozen=True)
class MockScript:
    seed: int = 0
    dimension: int = 8
    strict_validation: bool = True
    target_mass: float = 0.6
    entries: tuple[ScriptEntry, ...] = ()

    @classmethod
    def from_json(cls, data: Mapping[str, Any]) -> MockScript:
        return cls(
            seed=int(data.get("seed", 0)),
            dimension=int(data.get("dimension", 8)),
            strict_validation=bool(data.get("strict_validation", True)),
            target_mass=float(data.get("target_mass", 0.6)),
            entries=tuple(ScriptEntry.from_json(e) for e in data.get("entries", ())),
        )

    @classmethod
    def load(cls, path: str | Path) -> MockScript:
        return cls.from_json(json.loads(Path(path).read_text(encoding="utf-8")))

    def to_json(self) -> dict:
        return {
            "seed": self.seed,
            "dimension": self.dimension,
            "strict_validation": self.strict_validation,
            "target_mass": self.target_mass,
            "entries": [e.to_json() for e in self.entries],
        }

    def plus(self, *entries: ScriptEntry) -> MockScript:
        """Copy with extra entries taking precedence over existing ones."""
        return MockScript(self.seed, self.dimension, self.strict_validation, self.target_mass, tuple(entries) + self.entries)


@dataclass(frozen=True)
class MockReply:
    status: int
    body: bytes
    delay_ms: int = 0


@dataclass
class LoggedRequest:
    route: str
    key: str
    body: dict
    status: int


class MockBackend:
    """Request handler shared by the in-process transport and the HTTP server."""

    def __init__(self, script: MockScript, store: ImageStore) -> None:
        self.script = script
        self.store = store
        self._lock = threading.Lock()
        self._log: list[LoggedRequest] = []
        self._cache: dict[tuple[str, str], MockReply] = {}

    @property
    def request_log(self) -> list[LoggedRequest]:
        with self._lock:
            return list(self._log)

    def calls(self, route: str) -> int:
        return sum(1 for r in self.request_log if r.route == route)

    def handle(self, route: str, raw: bytes) -> MockReply:
        try:
            body = json.loads(raw)
        except (json.JSONDecodeError, UnicodeDecodeError):
            return self._record(route, "", {}, MockReply(400, canonical_json(error_body("malformed_request", "body is not JSON"))))
        if not isinstance(body, dict):
            return self._record(route, "", {}, MockReply(400, canonical_json(error_body("malformed_request", "body must be an object"))))
        key = request_hash(body)
        try:
            skey = schema_key(route, body)
        except KeyError as exc:
            return self._record(route, key, body, MockReply(404, canonical_json(error_body("unknown_route", str(exc)))))
        if body.get("version") != PROTOCOL_VERSION:
            return self._record(route, key, body, MockReply(400, canonical_json(error_body("bad_version", f"expected {PROTOCOL_VERSION}"))))
        problems = validation_errors("request", skey, body)
        if problems:
            return self._record(route, key, body, MockReply(400, canonical_json(error_body("malformed_request", "; ".join(problems)))))

        with self._lock:
            cached = self._cache.get((route, key))
        if cached is None:
            cached = self._respond(route, key, body)
            with self._lock:
                self._cache.setdefault((route, key), cached)
                cached = self._cache[(route, key)]
        return self._record(route, key, body, cached)

    def _record(self, route: str, key: str, body: dict, reply: MockReply) -> MockReply:
        with self._lock:
            self._log.append(LoggedRequest(route, key, body, reply.status))
        return reply

    def _respond(self, route: str, key: str, body: dict) -> MockReply:
        entry = next((e for e in self.script.entries if e.matches(route, key, body)), None)
        outcome: Mapping[str, Any] | None = None
        delay = 0
        if entry is not None:
            delay = entry.delay_ms
            if entry.error is not None:
                outcome = {"error": entry.error}
            elif entry.responses is not None:
                idx = body.get(entry.index_by, 0)
                idx = idx if isinstance(idx, int) else 0
                outcome = entry.responses[min(max(idx, 0), len(entry.responses) - 1)]
            elif entry.response is not None:
                outcome = {"response": entry.response}
            elif entry.patch is not None:
                outcome = {"patch": entry.patch}
        if outcome is not None and "error" in outcome:
            err = outcome["error"]
            status = int(err.get("status", 500))
            return MockReply(status, canonical_json(error_body(err.get("code", "injected_failure"), err.get("message", "scripted failure"))), delay)
        if outcome is not None and "delay_ms" in outcome:
            delay = int(outcome["delay_ms"])
        try:
            if outcome is not None and "response" in outcome:
                payload = dict(outcome["response"])
            elif outcome is not None and ("patch" in outcome or set(outcome) <= {"delay_ms"}):
                payload = self._default(route, body)
                payload.update(outcome.get("patch", {}))
            elif outcome is not None:
                # Bare payload inside a ``responses`` sequence.
                payload = dict(outcome)
            else:
                payload = self._default(route, body)
        except ImageUnreadable as exc:
            return MockReply(422, canonical_json(error_body("unknown_image", str(exc))), delay)
        return MockReply(200, canonical_json(payload), delay)

    # -- seeded defaults ------------------------------------------------------

    def _rng(self, route: str, body: Mapping[str, Any]) -> np.random.Generator:
        content = {k: v for k, v in body.items() if k != "version"}
        digest = hashlib.sha256(f"{self.script.seed}:{route}:".encode() + canonical_json(content)).digest()
        return np.random.default_rng(int.from_bytes(digest[:8], "big"))

    def _default(self, route: str, body: dict) -> dict:
        rng = self._rng(route, body)
        mode = body.get("mode")
        if route == "/analyze":
            summary, entities = SCENES[int(rng.integers(len(SCENES)))]
            saliences = sorted((round(float(s), 3) for s in rng.uniform(0.3, 1.0, len(entities))), reverse=True)
            return {
                "scene_summary": summary,
                "entities": [{"name": n, "salience": s} for n, s in zip(entities, saliences)],
                "source_emotion": MIKELS[int(rng.integers(len(MIKELS)))],
                "source_confidence": round(float(rng.uniform(0.4, 0.95)), 3),
            }
        if route == "/embed":
            vec = rng.normal(size=self.script.dimension)
            return {"vector": [float(x) for x in vec / np.linalg.norm(vec)]}
        if route == "/plan-propose" and mode == "propose":
            return {"suggestions": self._suggest(rng, body["count"], set(body["exclude"]))}
        if route == "/plan-propose":
            return {"text": f"{body['instruction']['text']}, rendered more prominently"}
        if route == "/edit":
            return {"image": self._edit(body)}
        if route == "/detect":
            w, h = self._size(body["image"])
            return {"boxes": [{"box": [w / 4, h / 4, 3 * w / 4, 3 * h / 4], "score": 0.9}]}
        if route == "/segment":
            w, h = self._size(body["image"])
            return {"mask": masks.box_mask(h, w, body["box"])}
        if route == "/validate":
            if self.script.strict_validation and body["before"]["content_hash"] == body["after"]["content_hash"]:
                return {"verdict": "failed", "reason": "no visible change"}
            return {"verdict": "ok", "reason": "edit matches the directive"}
        if route == "/critique":
            return self._critique(rng, body)
        if route == "/classify":
            probs = rng.dirichlet(np.ones(len(MIKELS)))
            probs = probs / probs.sum()
            return {"distribution": {label: float(p) for label, p in zip(MIKELS, probs)}}
        if route == "/describe":
            desc, kind, _ = VOCABULARY[int(rng.integers(len(VOCABULARY)))]
            captions = [m.get("caption") for m in body["members"] if m.get("caption")]
            return {"description": captions[0] if captions else desc, "kind": kind}
        if route == "/perceptual-distance":
            a = int(body["a"]["content_hash"], 16)
            b = int(body["b"]["content_hash"], 16)
            return {"distance": bin(a ^ b).count("1") / 256.0}
        raise KeyError(route)

    def _suggest(self, rng: np.random.Generator, count: int, exclude: set[str]) -> list[dict]:
        n = len(VOCABULARY)
        start = int(rng.integers(n))
        out = []
        variant = 0
        while len(out) < count:
            for step in range(n):
                desc, kind, method = VOCABULARY[(start + step) % n]
                if variant:
                    desc = f"{desc} (variant {variant})"
                if _element_id(desc, kind) in exclude:
                    continue
                exclude = exclude | {_element_id(desc, kind)}
                out.append({"description": desc, "kind": kind, "method": method})
                if len(out) == count:
                    break
            variant += 1
        return out

    def _critique(self, rng: np.random.Generator, body: dict) -> dict:
        mode = body["mode"]
        target = body["target_emotion"]
        if mode == "assess":
            if target in MIKELS:
                rest = (1.0 - self.script.target_mass) / (len(MIKELS) - 1)
                dist = {label: (self.script.target_mass if label == target else rest) for label in MIKELS}
                verdict = None
            else:
                dist, verdict = None, True
            return {
                "distribution": dist,
                "verdict": verdict,
                "rationale": ["inspect the dominant visual elements", f"overall impression leans toward {target}"],
                "source_similarity": 0.8 if body.get("source") else None,
            }
        if mode == "effectiveness":
            return {"effective": True, "revised": None, "rationale": ["instruction supports the target emotion"]}
        if mode == "execution":
            return {"executed": True, "error_note": None, "rationale": ["edit is visible in the image"]}
        used = {ins["element"]["id"] for ins in body["plan"]}
        return {"proposal": self._suggest(rng, 1, used)[0], "rationale": ["existing edits are too subtle"]}

    def _size(self, ref: Mapping[str, Any]) -> tuple[int, int]:
        if "width" in ref and "height" in ref:
            return int(ref["width"]), int(ref["height"])
        art = self.store.artifact(ref["uri"])
        return art.width, art.height

    def _edit(self, body: dict) -> dict:
        src = self.store.read(body["image"]["uri"])
        note = canonical_json({"directive": body["directive"], "tool": body["tool"]})
        out = self.store.put(src + EDIT_TRAILER + note)
        meta = self.store.root / f"{out.content_hash}.edit.json"
        if not meta.exists():
            meta.write_text(
                json.dumps({"parent": body["image"]["content_hash"], "directive": body["directive"], "tool": body["tool"]}, sort_keys=True),
                encoding="utf-8",
            )
        return out.to_json()


class InProcessTransport:
    """Calls a MockBackend directly; scripted delays beyond the route timeout
    surface as timeouts without actually sleeping."""

    def __init__(self, backend: MockBackend) -> None:
        self.backend = backend

    def send(self, route, body, headers, timeout_s):
        reply = self.backend.handle(route, body)
        if reply.delay_ms / 1000.0 > timeout_s:
            raise TransportTimeout(f"{route} exceeded {timeout_s:.3f}s")
        return reply.status, reply.body
