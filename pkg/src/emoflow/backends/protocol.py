"""Wire protocol shared by the client and the mock server.

Every request is a JSON object carrying ``"version": "emoflow-proto/1"``.
Routes that multiplex several operations carry a ``mode`` field; the response
schema is looked up by ``(route, mode)``. Errors use the envelope
``{"error": {"code": ..., "message": ...}}``.
"""

from __future__ import annotations

import hashlib
import json
from typing import Any

import jsonschema

from ..labels import MIKELS, EditingMethod, ElementKind

PROTOCOL_VERSION = "emoflow-proto/1"

ROUTES = (
    "/analyze",
    "/plan-propose",
    "/edit",
    "/detect",
    "/segment",
    "/validate",
    "/critique",
    "/embed",
    "/classify",
    "/describe",
)
# Adapter extension used only by the LPIPS diversity metric.
EXTENSION_ROUTES = ("/perceptual-distance",)
ALL_ROUTES = ROUTES + EXTENSION_ROUTES

MODES = {
    "/plan-propose": ("propose", "revise"),
    "/critique": ("assess", "effectiveness", "execution", "escalate"),
}


def canonical_json(obj: Any) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False, allow_nan=False).encode("utf-8")


def request_hash(body: dict) -> str:
    """Content hash of a request; doubles as its idempotency key."""
    return hashlib.sha256(canonical_json(body)).hexdigest()


def error_body(code: str, message: str) -> dict:
    return {"error": {"code": code, "message": message}}


_IMAGE_REF = {
    "type": "object",
    "required": ["uri", "content_hash"],
    "properties": {
        "uri": {"type": "string", "pattern": "^cas://[0-9a-f]{64}$"},
        "content_hash": {"type": "string", "pattern": "^[0-9a-f]{64}$"},
        "width": {"type": "integer", "minimum": 1},
        "height": {"type": "integer", "minimum": 1},
    },
}
_IMAGE_OUT = {**_IMAGE_REF, "required": ["uri", "content_hash", "width", "height"]}
_UNIT = {"type": "number", "minimum": 0, "maximum": 1}
_TEXT = {"type": "string", "minLength": 1}
_KIND = {"type": "string", "enum": [k.value for k in ElementKind]}
_METHOD = {"type": "string", "enum": [m.value for m in EditingMethod]}
_SUGGESTION = {
    "type": "object",
    "required": ["description", "kind", "method"],
    "properties": {"description": _TEXT, "kind": _KIND, "method": _METHOD},
}
_RATIONALE = {"type": "array", "minItems": 1, "items": {"type": "string"}}
_DISTRIBUTION = {
    "type": "object",
    "required": list(MIKELS),
    "properties": {label: {"type": "number", "minimum": 0} for label in MIKELS},
    "additionalProperties": False,
}
_BOX = {"type": "array", "minItems": 4, "maxItems": 4, "items": {"type": "number"}}
_RLE = {
    "type": "object",
    "required": ["size", "counts"],
    "properties": {
        "size": {"type": "array", "minItems": 2, "maxItems": 2, "items": {"type": "integer", "minimum": 1}},
        "counts": {"type": "array", "items": {"type": "integer", "minimum": 0}},
    },
}
_INSTRUCTION = {
    "type": "object",
    "required": ["index", "element", "method", "text"],
    "properties": {
        "index": {"type": "integer", "minimum": 1},
        "element": {
            "type": "object",
            "required": ["id", "description", "kind"],
            "properties": {"id": _TEXT, "description": _TEXT, "kind": _KIND},
        },
        "method": _METHOD,
        "text": _TEXT,
        "region_hint": {"type": ["string", "null"]},
    },
}
_CUES = {
    "type": "object",
    "required": ["scene_summary", "entities", "source_emotion"],
    "properties": {
        "scene_summary": _TEXT,
        "entities": {"type": "array"},
        "source_emotion": _TEXT,
    },
}


def _obj(required: list[str], **props: Any) -> dict:
    return {"type": "object", "required": required, "properties": props}


def _req(required: list[str], **props: Any) -> dict:
    schema = _obj(["version", *required], version={"const": PROTOCOL_VERSION}, **props)
    return schema


REQUEST_SCHEMAS: dict[tuple[str, str | None], dict] = {
    ("/analyze", None): _req(["image"], image=_IMAGE_REF),
    ("/plan-propose", "propose"): _req(
        ["mode", "cues", "target_emotion", "count", "seed", "exclude"],
        mode={"const": "propose"},
        cues=_CUES,
        target_emotion=_TEXT,
        count={"type": "integer", "minimum": 1},
        seed={"type": "integer"},
        exclude={"type": "array", "items": {"type": "string"}},
    ),
    ("/plan-propose", "revise"): _req(
        ["mode", "instruction", "failure", "attempt"],
        mode={"const": "revise"},
        instruction=_INSTRUCTION,
        failure={"type": "string"},
        attempt={"type": "integer", "minimum": 0},
    ),
    ("/edit", None): _req(
        ["image", "directive", "tool", "modality", "mask", "attempt"],
        image=_IMAGE_REF,
        directive=_TEXT,
        tool=_TEXT,
        modality={"enum": ["text_guided", "text_and_mask", "mask_and_reference"]},
        mask={"anyOf": [_RLE, {"type": "null"}]},
        reference={"anyOf": [_IMAGE_REF, {"type": "null"}]},
        attempt={"type": "integer", "minimum": 0},
    ),
    ("/detect", None): _req(["image", "phrase"], image=_IMAGE_REF, phrase=_TEXT),
    ("/segment", None): _req(["image", "box"], image=_IMAGE_REF, box=_BOX),
    ("/validate", None): _req(
        ["before", "after", "directive", "tool", "attempt"],
        before=_IMAGE_REF,
        after=_IMAGE_REF,
        directive=_TEXT,
        tool=_TEXT,
        attempt={"type": "integer", "minimum": 0},
    ),
    ("/critique", "assess"): _req(
        ["mode", "image", "target_emotion"],
        mode={"const": "assess"},
        image=_IMAGE_REF,
        target_emotion=_TEXT,
        source={"anyOf": [_IMAGE_REF, {"type": "null"}]},
    ),
    ("/critique", "effectiveness"): _req(
        ["mode", "image", "target_emotion", "instruction"],
        mode={"const": "effectiveness"},
        image=_IMAGE_REF,
        target_emotion=_TEXT,
        instruction=_INSTRUCTION,
    ),
    ("/critique", "execution"): _req(
        ["mode", "image", "target_emotion", "instruction"],
        mode={"const": "execution"},
        image=_IMAGE_REF,
        target_emotion=_TEXT,
        instruction=_INSTRUCTION,
    ),
    ("/critique", "escalate"): _req(
        ["mode", "image", "target_emotion", "plan"],
        mode={"const": "escalate"},
        image=_IMAGE_REF,
        target_emotion=_TEXT,
        plan={"type": "array", "items": _INSTRUCTION},
    ),
    ("/embed", None): {
        **_req([], text=_TEXT, image=_IMAGE_REF),
        "oneOf": [{"required": ["text"]}, {"required": ["image"]}],
    },
    ("/classify", None): _req(["image"], image=_IMAGE_REF),
    ("/describe", None): _req(
        ["emotion", "members"],
        emotion=_TEXT,
        members={
            "type": "array",
            "minItems": 1,
            "items": _obj(["id"], id=_TEXT, caption={"type": ["string", "null"]}),
        },
    ),
    ("/perceptual-distance", None): _req(["a", "b"], a=_IMAGE_REF, b=_IMAGE_REF),
}

RESPONSE_SCHEMAS: dict[tuple[str, str | None], dict] = {
    ("/analyze", None): _obj(
        ["scene_summary", "entities", "source_emotion", "source_confidence"],
        scene_summary=_TEXT,
        entities={"type": "array", "items": _obj(["name", "salience"], name=_TEXT, salience=_UNIT)},
        source_emotion=_TEXT,
        source_confidence=_UNIT,
    ),
    ("/plan-propose", "propose"): _obj(["suggestions"], suggestions={"type": "array", "items": _SUGGESTION}),
    ("/plan-propose", "revise"): _obj(["text"], text=_TEXT),
    ("/edit", None): _obj(["image"], image=_IMAGE_OUT),
    ("/detect", None): _obj(
        ["boxes"], boxes={"type": "array", "items": _obj(["box", "score"], box=_BOX, score=_UNIT)}
    ),
    ("/segment", None): _obj(["mask"], mask=_RLE),
    ("/validate", None): _obj(["verdict", "reason"], verdict={"enum": ["ok", "failed"]}, reason={"type": "string"}),
    ("/critique", "assess"): _obj(
        ["distribution", "verdict", "rationale"],
        distribution={"anyOf": [_DISTRIBUTION, {"type": "null"}]},
        verdict={"type": ["boolean", "null"]},
        rationale=_RATIONALE,
        source_similarity={"anyOf": [_UNIT, {"type": "null"}]},
    ),
    ("/critique", "effectiveness"): _obj(
        ["effective", "revised", "rationale"],
        effective={"type": "boolean"},
        revised={"anyOf": [_SUGGESTION, {"type": "null"}]},
        rationale=_RATIONALE,
    ),
    ("/critique", "execution"): _obj(
        ["executed", "error_note", "rationale"],
        executed={"type": "boolean"},
        error_note={"type": ["string", "null"]},
        rationale=_RATIONALE,
    ),
    ("/critique", "escalate"): _obj(["proposal", "rationale"], proposal=_SUGGESTION, rationale=_RATIONALE),
    ("/embed", None): _obj(
        ["vector"], vector={"type": "array", "minItems": 1, "items": {"type": "number"}}
    ),
    ("/classify", None): _obj(["distribution"], distribution=_DISTRIBUTION),
    ("/describe", None): _obj(["description", "kind"], description=_TEXT, kind=_KIND),
    ("/perceptual-distance", None): _obj(["distance"], distance={"type": "number", "minimum": 0}),
}

ERROR_SCHEMA = _obj(["error"], error=_obj(["code", "message"], code=_TEXT, message={"type": "string"}))

_VALIDATORS = {
    ("request", key): jsonschema.Draft202012Validator(schema) for key, schema in REQUEST_SCHEMAS.items()
}
_VALIDATORS.update(
    {("response", key): jsonschema.Draft202012Validator(schema) for key, schema in RESPONSE_SCHEMAS.items()}
)


def schema_key(route: str, body: dict) -> tuple[str, str | None]:
    if route not in ALL_ROUTES:
        raise KeyError(f"unknown route {route}")
    if route in MODES:
        mode = body.get("mode")
        if mode not in MODES[route]:
            raise KeyError(f"{route} has no mode {mode!r}")
        return (route, mode)
    return (route, None)


def validation_errors(kind: str, key: tuple[str, str | None], body: Any) -> list[str]:
    validator = _VALIDATORS[(kind, key)]
    return [
        f"{'/'.join(str(p) for p in err.absolute_path) or '$'}: {err.message}"
        for err in sorted(validator.iter_errors(body), key=lambda e: list(e.absolute_path))
    ]
