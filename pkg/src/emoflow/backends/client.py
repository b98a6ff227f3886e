"""JSON-over-HTTP backend client and the typed facade the agents call."""

from __future__ import annotations

import json
import logging
import os
import time
from collections.abc import Mapping, Sequence
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Any, Protocol

import requests

from ..errors import BackendError, BackendMalformedResponse, BackendUnavailable, InvalidDistribution
from ..images import ImageArtifact
from ..labels import EmotionDistribution, EmotionLabel
from .protocol import PROTOCOL_VERSION, canonical_json, request_hash, schema_key, validation_errors

if TYPE_CHECKING:
    from ..planning import Instruction, SemanticCues

logger = logging.getLogger(__name__)

BACKEND_URL_ENV = "EMOFLOW_BACKEND_URL"
INPROCESS_URL = "inproc://mock"


class TransportTimeout(Exception):
    pass


class TransportError(Exception):
    pass


class Transport(Protocol):
    def send(self, route: str, body: bytes, headers: Mapping[str, str], timeout_s: float) -> tuple[int, bytes]: ...


@dataclass(frozen=True)
class BackendProfile:
    name: str = "mock"
    base_url: str = INPROCESS_URL
    timeouts_ms: Mapping[str, int] = field(default_factory=dict)
    default_timeout_ms: int = 30_000
    retries: int = 2
    idempotency_header: str = "Idempotency-Key"
    backoff_ms: int = 0
    dimension: int = 8

    def __post_init__(self) -> None:
        if self.retries < 0:
            raise ValueError("retry count must be >= 0")
        if self.default_timeout_ms <= 0 or any(v <= 0 for v in self.timeouts_ms.values()):
            raise ValueError("timeouts must be positive")

    def timeout_for(self, route: str) -> float:
        return self.timeouts_ms.get(route, self.default_timeout_ms) / 1000.0

    @classmethod
    def from_json(cls, name: str, data: Mapping[str, Any]) -> BackendProfile:
        return cls(
            name=name,
            base_url=data.get("base_url", INPROCESS_URL),
            timeouts_ms=dict(data.get("timeouts_ms", {})),
            default_timeout_ms=int(data.get("default_timeout_ms", 30_000)),
            retries=int(data.get("retries", 2)),
            idempotency_header=data.get("idempotency_header", "Idempotency-Key"),
            backoff_ms=int(data.get("backoff_ms", 0)),
            dimension=int(data.get("dimension", 8)),
        )

    def with_env_override(self) -> BackendProfile:
        url = os.environ.get(BACKEND_URL_ENV)
        if not url:
            return self
        return BackendProfile(
            self.name, url.rstrip("/"), self.timeouts_ms, self.default_timeout_ms,
            self.retries, self.idempotency_header, self.backoff_ms, self.dimension,
        )


class HttpTransport:
    def __init__(self, base_url: str) -> None:
        self.base_url = base_url.rstrip("/")
        self._session = requests.Session()

    def send(self, route, body, headers, timeout_s):
        try:
            resp = self._session.post(self.base_url + route, data=body, headers=dict(headers), timeout=timeout_s)
        except requests.Timeout as exc:
            raise TransportTimeout(str(exc)) from exc
        except requests.RequestException as exc:
            raise TransportError(str(exc)) from exc
        return resp.status_code, resp.content


class BackendClient:
    """Sends one protocol request, retrying timeouts, transport errors and 5xx.

    Every route is a pure function of its request content, so all requests
    are idempotent and retried the same way; the idempotency key is the
    request hash.
    """

    def __init__(self, profile: BackendProfile, transport: Transport) -> None:
        self.profile = profile
        self.transport = transport

    def call(self, route: str, payload: Mapping[str, Any]) -> dict:
        body = {"version": PROTOCOL_VERSION, **payload}
        key = schema_key(route, body)
        problems = validation_errors("request", key, body)
        if problems:
            raise BackendError(route, "invalid request: " + "; ".join(problems))
        raw = canonical_json(body)
        headers = {"Content-Type": "application/json", self.profile.idempotency_header: request_hash(body)}
        attempts = 1 + self.profile.retries
        last = ""
        for attempt in range(attempts):
            if attempt and self.profile.backoff_ms:
                time.sleep(self.profile.backoff_ms * (2 ** (attempt - 1)) / 1000.0)
            try:
                status, content = self.transport.send(route, raw, headers, self.profile.timeout_for(route))
            except TransportTimeout as exc:
                last = f"timeout ({exc})"
                continue
            except TransportError as exc:
                last = f"transport error ({exc})"
                continue
            if status >= 500:
                last = f"HTTP {status}: {_error_message(content)}"
                continue
            if status != 200:
                raise BackendError(route, f"HTTP {status}: {_error_message(content)}")
            try:
                reply = json.loads(content)
            except (json.JSONDecodeError, UnicodeDecodeError) as exc:
                raise BackendMalformedResponse(route, f"response is not JSON: {exc}") from exc
            problems = validation_errors("response", key, reply)
            if problems:
                raise BackendMalformedResponse(route, "; ".join(problems))
            return reply
        logger.warning("%s failed after %d attempts: %s", route, attempts, last)
        raise BackendUnavailable(route, f"gave up after {attempts} attempts: {last}")


def _error_message(content: bytes) -> str:
    try:
        err = json.loads(content)["error"]
        return f"{err['code']}: {err['message']}"
    except Exception:
        return content[:200].decode("utf-8", "replace")


def image_ref(image: ImageArtifact) -> dict:
    return {"uri": image.uri, "content_hash": image.content_hash, "width": image.width, "height": image.height}


def _artifact(route: str, ref: dict) -> ImageArtifact:
    if ref["uri"] != "cas://" + ref["content_hash"]:
        raise BackendMalformedResponse(route, "image uri and hash disagree")
    return ImageArtifact(ref["uri"], ref["content_hash"], ref["width"], ref["height"])


def distribution_from(route: str, raw: Mapping[str, float]) -> EmotionDistribution:
    try:
        return EmotionDistribution.from_mapping(raw)
    except InvalidDistribution as exc:
        raise BackendMalformedResponse(route, str(exc)) from exc


class Backends:
    """Typed view over the protocol routes, one method per model role."""

    def __init__(self, client: BackendClient) -> None:
        self.client = client

    @property
    def dimension(self) -> int:
        return self.client.profile.dimension

    def analyze(self, image: ImageArtifact) -> dict:
        return self.client.call("/analyze", {"image": image_ref(image)})

    def embed_text(self, text: str) -> list[float]:
        return self._vector(self.client.call("/embed", {"text": text}))

    def embed_image(self, image: ImageArtifact) -> list[float]:
        return self._vector(self.client.call("/embed", {"image": image_ref(image)}))

    def _vector(self, reply: dict) -> list[float]:
        vec = [float(x) for x in reply["vector"]]
        if len(vec) != self.dimension:
            raise BackendMalformedResponse("/embed", f"vector has dimension {len(vec)}, profile declares {self.dimension}")
        return vec

    def propose(self, cues: SemanticCues, target: EmotionLabel, count: int, seed: int, exclude: Sequence[str] = ()) -> list[dict]:
        reply = self.client.call(
            "/plan-propose",
            {
                "mode": "propose",
                "cues": {
                    "scene_summary": cues.scene_summary,
                    "entities": [{"name": e.name, "salience": e.salience} for e in cues.entities],
                    "source_emotion": cues.source_emotion.value,
                },
                "target_emotion": target.value,
                "count": count,
                "seed": seed,
                "exclude": list(exclude),
            },
        )
        return reply["suggestions"]

    def revise_instruction(self, instruction: Instruction, failure: str, attempt: int) -> str:
        reply = self.client.call(
            "/plan-propose",
            {"mode": "revise", "instruction": instruction.to_json(), "failure": failure, "attempt": attempt},
        )
        return reply["text"]

    def edit(
        self,
        image: ImageArtifact,
        directive: str,
        tool: str,
        modality: str,
        mask: dict | None,
        attempt: int,
        reference: ImageArtifact | None = None,
    ) -> ImageArtifact:
        payload = {
            "image": image_ref(image),
            "directive": directive,
            "tool": tool,
            "modality": modality,
            "mask": mask,
            "attempt": attempt,
        }
        if reference is not None:
            payload["reference"] = image_ref(reference)
        return _artifact("/edit", self.client.call("/edit", payload)["image"])

    def detect(self, image: ImageArtifact, phrase: str) -> list[dict]:
        return self.client.call("/detect", {"image": image_ref(image), "phrase": phrase})["boxes"]

    def segment(self, image: ImageArtifact, box: Sequence[float]) -> dict:
        return self.client.call("/segment", {"image": image_ref(image), "box": list(box)})["mask"]

    def validate(self, before: ImageArtifact, after: ImageArtifact, directive: str, tool: str, attempt: int) -> tuple[bool, str]:
        reply = self.client.call(
            "/validate",
            {"before": image_ref(before), "after": image_ref(after), "directive": directive, "tool": tool, "attempt": attempt},
        )
        return reply["verdict"] == "ok", reply["reason"]

    def critique(self, image: ImageArtifact, target: EmotionLabel, source: ImageArtifact | None = None) -> dict:
        return self.client.call(
            "/critique",
            {
                "mode": "assess",
                "image": image_ref(image),
                "target_emotion": target.value,
                "source": image_ref(source) if source is not None else None,
            },
        )

    def judge_effectiveness(self, image: ImageArtifact, target: EmotionLabel, instruction: Instruction) -> dict:
        return self.client.call(
            "/critique",
            {"mode": "effectiveness", "image": image_ref(image), "target_emotion": target.value, "instruction": instruction.to_json()},
        )

    def judge_execution(self, image: ImageArtifact, target: EmotionLabel, instruction: Instruction) -> dict:
        return self.client.call(
            "/critique",
            {"mode": "execution", "image": image_ref(image), "target_emotion": target.value, "instruction": instruction.to_json()},
        )

    def escalate(self, image: ImageArtifact, target: EmotionLabel, instructions: Sequence[Instruction]) -> dict:
        return self.client.call(
            "/critique",
            {
                "mode": "escalate",
                "image": image_ref(image),
                "target_emotion": target.value,
                "plan": [ins.to_json() for ins in instructions],
            },
        )

    def classify(self, image: ImageArtifact) -> EmotionDistribution:
        return distribution_from("/classify", self.client.call("/classify", {"image": image_ref(image)})["distribution"])

    def describe(self, emotion: EmotionLabel, members: Sequence[tuple[str, str | None]]) -> dict:
        return self.client.call(
            "/describe",
            {"emotion": emotion.value, "members": [{"id": i, "caption": c} for i, c in members]},
        )

    def perceptual_distance(self, a: ImageArtifact, b: ImageArtifact) -> float:
        return float(self.client.call("/perceptual-distance", {"a": image_ref(a), "b": image_ref(b)})["distance"])
