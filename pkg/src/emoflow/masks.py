"""Run-length encoded binary masks.

Encoding: ``{"size": [height, width], "counts": [...]}`` where ``counts`` are
alternating run lengths over the row-major flattened mask, starting with a run
of zeros (possibly of length 0).
"""

from __future__ import annotations

from collections.abc import Sequence

import numpy as np


def encode(mask: np.ndarray) -> dict:
    arr = np.asarray(mask, dtype=bool)
    h, w = arr.shape
    flat = arr.ravel()
    # Run boundaries, with a leading zero-length run when the mask starts set.
    edges = np.flatnonzero(flat[1:] != flat[:-1]) + 1
    bounds = np.concatenate(([0], edges, [flat.size]))
    counts = np.diff(bounds).tolist()
    if flat.size and flat[0]:
        counts.insert(0, 0)
    return {"size": [int(h), int(w)], "counts": [int(c) for c in counts]}


def decode(rle: dict) -> np.ndarray:
    h, w = rle["size"]
    if sum(rle["counts"]) != h * w:
        raise ValueError(f"run lengths cover {sum(rle['counts'])} pixels, mask has {h * w}")
    values = np.zeros(len(rle["counts"]), dtype=bool)
    values[1::2] = True
    return np.repeat(values, rle["counts"]).reshape(h, w)


def box_mask(height: int, width: int, box: Sequence[float]) -> dict:
    x0, y0, x1, y1 = (int(round(v)) for v in box)
    mask = np.zeros((height, width), dtype=bool)
    mask[max(0, y0):max(0, y1), max(0, x0):max(0, x1)] = True
    return encode(mask)


def is_empty(rle: dict | None) -> bool:
    return rle is None or sum(rle["counts"][1::2]) == 0
