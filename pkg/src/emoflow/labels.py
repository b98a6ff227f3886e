"""Emotion labels, element kinds, editing methods and emotion distributions."""

from __future__ import annotations

import math
from collections.abc import Mapping
from dataclasses import dataclass
from enum import Enum

from .errors import InvalidDistribution

# Mikels categories, in the canonical order used for vectors and tables.
MIKELS: tuple[str, ...] = (
    "amusement",
    "awe",
    "contentment",
    "excitement",
    "anger",
    "disgust",
    "fear",
    "sadness",
)
_MIKELS_SET = frozenset(MIKELS)

DISTRIBUTION_TOLERANCE = 1e-9


@dataclass(frozen=True, order=True)
class EmotionLabel:
    value: str

    def __post_init__(self) -> None:
        if not self.value or self.value != self.value.strip().lower():
            raise ValueError(f"emotion label must be trimmed lowercase text: {self.value!r}")

    @classmethod
    def parse(cls, text: str | EmotionLabel) -> EmotionLabel:
        if isinstance(text, EmotionLabel):
            return text
        value = str(text).strip().lower()
        if not value:
            raise ValueError("empty emotion label")
        return cls(value)

    @property
    def in_domain(self) -> bool:
        return self.value in _MIKELS_SET

    def __str__(self) -> str:
        return self.value


class ElementKind(str, Enum):
    OBJECT = "object"
    BACKGROUND_SCENE = "background_scene"
    ACTION = "action"
    FACIAL_EXPRESSION = "facial_expression"
    COLOR_TONE = "color_tone"
    ATTRIBUTE = "attribute"


class EditingMethod(str, Enum):
    REPLACE_OBJECT = "replace_object"
    ADD_OBJECT = "add_object"
    REMOVE_OBJECT = "remove_object"
    CHANGE_EXPRESSION = "change_expression"
    CHANGE_FILTER = "change_filter"
    CHANGE_BACKGROUND = "change_background"
    CHANGE_ATTRIBUTE = "change_attribute"


@dataclass(frozen=True)
class EmotionDistribution:
    """Probability mass over the eight in-domain labels."""

    probs: tuple[float, ...]

    def __post_init__(self) -> None:
        if len(self.probs) != len(MIKELS):
            raise InvalidDistribution(f"expected {len(MIKELS)} probabilities, got {len(self.probs)}")
        for label, p in zip(MIKELS, self.probs):
            if not math.isfinite(p) or p < 0:
                raise InvalidDistribution(f"probability for {label} is {p!r}")
        total = math.fsum(self.probs)
        if abs(total - 1.0) > DISTRIBUTION_TOLERANCE:
            raise InvalidDistribution(f"probabilities sum to {total!r}, not 1")

    @classmethod
    def from_mapping(cls, probs: Mapping[str, float]) -> EmotionDistribution:
        extra = set(probs) - _MIKELS_SET
        if extra:
            raise InvalidDistribution(f"unknown labels: {sorted(extra)}")
        missing = _MIKELS_SET - set(probs)
        if missing:
            raise InvalidDistribution(f"missing labels: {sorted(missing)}")
        return cls(tuple(float(probs[label]) for label in MIKELS))

    @classmethod
    def uniform(cls) -> EmotionDistribution:
        return cls((1.0 / len(MIKELS),) * len(MIKELS))

    def __getitem__(self, label: str | EmotionLabel) -> float:
        return self.probs[MIKELS.index(str(label))]

    def as_dict(self) -> dict[str, float]:
        return dict(zip(MIKELS, self.probs))

    def argmax(self) -> str:
        """Most probable label; ties go to the lexicographically smallest name."""
        best = max(self.probs)
        return min(label for label, p in zip(MIKELS, self.probs) if p == best)
