"""Content-addressed image handles.

Images never travel inline: every component refers to them as ``cas://<sha256>``
and resolves the reference against a shared blob directory.
"""

from __future__ import annotations

import hashlib
import io
import os
from dataclasses import dataclass
from pathlib import Path

from PIL import Image, UnidentifiedImageError

from .errors import ImageUnreadable

URI_PREFIX = "cas://"
WORKING_RESOLUTION = (512, 512)


@dataclass(frozen=True)
class ImageArtifact:
    uri: str
    content_hash: str
    width: int
    height: int

    def to_json(self) -> dict:
        return {"uri": self.uri, "content_hash": self.content_hash, "width": self.width, "height": self.height}

    @classmethod
    def from_json(cls, data: dict) -> ImageArtifact:
        return cls(data["uri"], data["content_hash"], int(data["width"]), int(data["height"]))


def sha256_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def image_size(data: bytes) -> tuple[int, int]:
    try:
        with Image.open(io.BytesIO(data)) as img:
            return img.size
    except (UnidentifiedImageError, OSError) as exc:
        raise ImageUnreadable(f"not a decodable image: {exc}") from exc


class ImageStore:
    """Blob directory keyed by sha256. Writes are idempotent, so concurrent
    writers of the same content are harmless."""

    def __init__(self, root: str | os.PathLike[str]) -> None:
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)

    def path_for(self, content_hash: str) -> Path:
        return self.root / content_hash

    def put(self, data: bytes) -> ImageArtifact:
        width, height = image_size(data)
        digest = sha256_bytes(data)
        target = self.path_for(digest)
        if not target.exists():
            tmp = target.with_name(f".{digest}.{os.getpid()}.{id(data)}.tmp")
            tmp.write_bytes(data)
            os.replace(tmp, target)
        return ImageArtifact(URI_PREFIX + digest, digest, width, height)

    def ingest(self, path: str | os.PathLike[str]) -> ImageArtifact:
        try:
            data = Path(path).read_bytes()
        except OSError as exc:
            raise ImageUnreadable(f"cannot read {path}: {exc}") from exc
        return self.put(data)

    def read(self, image: ImageArtifact | str) -> bytes:
        uri = image.uri if isinstance(image, ImageArtifact) else image
        if not uri.startswith(URI_PREFIX):
            raise ImageUnreadable(f"unsupported image reference {uri!r}")
        digest = uri[len(URI_PREFIX):]
        try:
            data = self.path_for(digest).read_bytes()
        except OSError as exc:
            raise ImageUnreadable(f"missing blob for {uri}") from exc
        if sha256_bytes(data) != digest:
            raise ImageUnreadable(f"blob for {uri} does not match its hash")
        return data

    def check(self, image: ImageArtifact) -> None:
        """Raise ImageUnreadable unless the blob exists and matches the handle."""
        if image.uri != URI_PREFIX + image.content_hash:
            raise ImageUnreadable(f"uri {image.uri!r} disagrees with hash {image.content_hash}")
        self.read(image)

    def artifact(self, uri: str) -> ImageArtifact:
        data = self.read(uri)
        width, height = image_size(data)
        return ImageArtifact(uri, sha256_bytes(data), width, height)


def blank_png(width: int = WORKING_RESOLUTION[0], height: int = WORKING_RESOLUTION[1], color=(128, 128, 128)) -> bytes:
    buf = io.BytesIO()
    Image.new("RGB", (width, height), color).save(buf, format="PNG")
    return buf.getvalue()
