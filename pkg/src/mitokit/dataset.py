"""Pseudo-GT mask construction, patch harvesting, and epoch sampling.

Point annotations become trainable segmentation targets by drawing
fixed-radius disks (17 px by default) at each mitotic point; imposter
points draw nothing.  Patches harvested from the images are labeled
positive when a mitotic point sits inside the window shrunk by a margin
(so a disk is never clipped to a sliver), and epochs re-balance the heavy
negative majority by keeping every positive and sampling an equal number
of negatives.
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass
from enum import Enum
from io import StringIO
from pathlib import Path

import numpy as np

from .core import AnnotationSet, BinaryMask, ImageRGB

__all__ = [
    "DISK_RADIUS",
    "Polarity",
    "PatchRecord",
    "FoldAssignment",
    "disk_mask",
    "harvest_patches",
    "epoch_sample",
    "make_folds",
    "patches_to_csv",
    "patches_from_csv",
]

DISK_RADIUS = 17
SEG_PATCH = 512
CLS_PATCH = 128


class Polarity(str, Enum):
    POSITIVE = "positive"
    NEGATIVE = "negative"


@dataclass(frozen=True)
class PatchRecord:
    """A patch window: host image, top-left origin, size, and polarity."""

    image_id: str
    x0: int
    y0: int
    size: int
    polarity: Polarity

    def __post_init__(self) -> None:
        if self.size < 1:
            raise ValueError(f"patch size must be >= 1, got {self.size}")


@dataclass(frozen=True)
class FoldAssignment:
    """Map image_id -> fold index; fold sizes balanced within one."""

    assignment: dict[str, int]
    k: int

    def fold_of(self, image_id: str) -> int:
        return self.assignment[image_id]

    def members(self, fold: int) -> list[str]:
        return sorted(i for i, f in self.assignment.items() if f == fold)


def disk_mask(
    ann: AnnotationSet,
    width: int,
    height: int,
    radius: float = DISK_RADIUS,
) -> BinaryMask:
    """Draw filled disks at each mitotic point; the pseudo-GT mask.

    A bit (x, y) is set iff some mitotic point p satisfies
    ``(x - p.x)^2 + (y - p.y)^2 <= radius^2``.  Disks clip at the borders
    and overlapping disks union.  Imposter points contribute nothing.
    """
    if radius < 1:
        raise ValueError(f"radius must be >= 1, got {radius}")
    bits = np.zeros((height, width), dtype=bool)
    r2 = float(radius) * float(radius)
    ceil_r = int(np.ceil(radius))
    for p in ann.mitotic_points():
        x_lo = max(0, int(np.floor(p.x)) - ceil_r)
        x_hi = min(width, int(np.ceil(p.x)) + ceil_r + 1)
        y_lo = max(0, int(np.floor(p.y)) - ceil_r)
        y_hi = min(height, int(np.ceil(p.y)) + ceil_r + 1)
        if x_lo >= x_hi or y_lo >= y_hi:
            continue
        ys = np.arange(y_lo, y_hi, dtype=np.float64) - p.y
        xs = np.arange(x_lo, x_hi, dtype=np.float64) - p.x
        bits[y_lo:y_hi, x_lo:x_hi] |= (
            ys[:, None] ** 2 + xs[None, :] ** 2 <= r2
        )
    return BinaryMask(bits)


def _grid_origins(extent: int, size: int, stride: int) -> list[int]:
    """Origins 0, stride, ... clamped so the final window touches the edge."""
    if extent <= size:
        return [0]
    origins = list(range(0, extent - size + 1, stride))
    if origins[-1] + size < extent:
        origins.append(extent - size)
    return origins


def harvest_patches(
    image: ImageRGB,
    ann: AnnotationSet,
    size: int = SEG_PATCH,
    stride: int = 256,
    margin: int = DISK_RADIUS,
) -> list[PatchRecord]:
    """Tile an image into patch records on a regular grid.

    The last row/column clamps to the image edge.  A record is positive
    iff at least one mitotic point lies inside the window shrunk by
    ``margin`` on each side; images smaller than ``size`` yield a single
    window at the origin (extraction reflect-pads).
    """
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    xs = _grid_origins(image.width, size, stride)
    ys = _grid_origins(image.height, size, stride)
    mitoses = ann.mitotic_points()
    records = []
    for y0 in ys:
        for x0 in xs:
            positive = any(
                x0 + margin <= p.x < x0 + size - margin
                and y0 + margin <= p.y < y0 + size - margin
                for p in mitoses
            )
            records.append(
                PatchRecord(
                    ann.image_id, x0, y0, size,
                    Polarity.POSITIVE if positive else Polarity.NEGATIVE,
                )
            )
    return records


def epoch_sample(
    records: list[PatchRecord],
    rng: np.random.Generator,
    negative_ratio: float = 1.0,
) -> list[PatchRecord]:
    """Build one balanced training epoch from a patch pool.

    Keeps every positive patch and draws ``min(N, round(ratio * P))``
    negatives uniformly without replacement, then shuffles the order.  A
    fresh generator draw per epoch yields a different negative subset.
    An all-negative pool (no positives) produces an empty epoch and a
    warning rather than silently training a degenerate model.
    """
    if negative_ratio < 0:
        raise ValueError(f"negative_ratio must be >= 0, got {negative_ratio}")
    positives = [r for r in records if r.polarity is Polarity.POSITIVE]
    negatives = [r for r in records if r.polarity is Polarity.NEGATIVE]
    if not positives:
        if negatives:
            warnings.warn(
                "epoch_sample: no positive patches in pool; emitting an empty epoch",
                stacklevel=2,
            )
        return []
    want = min(len(negatives), int(round(negative_ratio * len(positives))))
    chosen_idx = rng.choice(len(negatives), size=want, replace=False) if want else []
    epoch = positives + [negatives[i] for i in chosen_idx]
    order = rng.permutation(len(epoch))
    return [epoch[i] for i in order]


def make_folds(
    image_ids: list[str],
    k: int = 3,
    seed: int = 0,
) -> FoldAssignment:
    """Assign images to ``k`` cross-validation folds, balanced within one.

    Ids are sorted, shuffled deterministically by ``seed``, and dealt
    round-robin, so the assignment is independent of input order.
    """
    if k < 2:
        raise ValueError(f"need at least 2 folds, got {k}")
    ids = sorted(image_ids)
    if len(ids) != len(set(ids)):
        raise ValueError("duplicate image ids")
    if len(ids) < k:
        raise ValueError(f"fewer ids ({len(ids)}) than folds ({k})")
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(ids))
    assignment = {ids[int(j)]: i % k for i, j in enumerate(order)}
    return FoldAssignment(assignment, k)


# ---------------------------------------------------------------------------
# CSV serialization: image_id,x0,y0,size,polarity


def patches_to_csv(records: list[PatchRecord]) -> str:
    buf = StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["image_id", "x0", "y0", "size", "polarity"])
    for r in records:
        writer.writerow([r.image_id, r.x0, r.y0, r.size, r.polarity.value])
    return buf.getvalue()


def patches_from_csv(path: str | Path) -> list[PatchRecord]:
    from .core import DataError

    records = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        for lineno, row in enumerate(reader, start=2):
            try:
                records.append(
                    PatchRecord(
                        row["image_id"], int(row["x0"]), int(row["y0"]),
                        int(row["size"]), Polarity(row["polarity"]),
                    )
                )
            except (KeyError, ValueError, TypeError) as exc:
                raise DataError(f"{path}:{lineno}: bad patch row: {exc}") from exc
    return records
