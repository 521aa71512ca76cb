"""Domain types and file ingestion for the mitosis detection pipeline.

Defines the pixel carriers (:class:`ImageRGB`, :class:`ProbMap`,
:class:`BinaryMask`), point annotations, and detections, plus loaders for
the two on-disk formats the rest of the pipeline speaks:

* Annotation JSON::

      {"images": [{"id": "007", "mpp": 0.25,
                   "points": [{"x": 100.0, "y": 200.0, "label": "mitotic"}]}]}

  Labels are ``"mitotic"`` or ``"imposter"``.

* PMAP, a tiny binary container for probability maps: magic ``PMAP``,
  version byte ``1``, width and height as little-endian u32, then
  ``width * height`` IEEE-754 float32 little-endian values, row-major.
  Write/read round trips are bit-exact.

Images are PNG or plain (uncompressed/deflate) 8-bit RGB TIFF.  The
micrometers-per-pixel scale is read from a sidecar file ``<image>.mpp``
(same path, extension replaced, containing a single positive float) when
present, else defaults to 0.25 um/px.

All types are immutable after construction and safe to share across
threads; the loaders are reentrant.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

__all__ = [
    "DEFAULT_MPP",
    "DataError",
    "Label",
    "ImageRGB",
    "PointAnnotation",
    "AnnotationSet",
    "ProbMap",
    "BinaryMask",
    "Detection",
    "load_image",
    "save_image",
    "load_annotations",
    "save_annotations",
    "read_pmap",
    "write_pmap",
]

DEFAULT_MPP = 0.25

_PMAP_MAGIC = b"PMAP"
_PMAP_VERSION = 1


class DataError(Exception):
    """Malformed or unreadable input data (files, schemas, ranges)."""


class Label(str, Enum):
    """Annotation classes: true mitotic figures vs look-alike imposters."""

    MITOTIC = "mitotic"
    IMPOSTER = "imposter"


def _freeze(arr: np.ndarray) -> np.ndarray:
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class ImageRGB:
    """8-bit RGB raster with physical scale metadata.

    ``pixels`` is a (height, width, 3) uint8 array, row-major.  ``mpp`` is
    the micrometers-per-pixel scan resolution (0.25 um/px corresponds to a
    standard 40x scan).
    """

    pixels: np.ndarray
    mpp: float = DEFAULT_MPP

    def __post_init__(self) -> None:
        px = np.asarray(self.pixels)
        if px.dtype != np.uint8:
            raise ValueError(f"pixels must be uint8, got {px.dtype}")
        if px.ndim != 3 or px.shape[2] != 3:
            raise ValueError(f"pixels must have shape (h, w, 3), got {px.shape}")
        if px.shape[0] < 1 or px.shape[1] < 1:
            raise ValueError("image must be at least 1x1")
        if not (self.mpp > 0):
            raise ValueError(f"mpp must be positive, got {self.mpp}")
        object.__setattr__(self, "pixels", _freeze(px))

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, ImageRGB):
            return NotImplemented
        return self.mpp == other.mpp and np.array_equal(self.pixels, other.pixels)

    def __hash__(self) -> int:  # identity hash; content hashing is not needed
        return id(self)


@dataclass(frozen=True)
class PointAnnotation:
    """A labeled ground-truth point in pixel coordinates.

    Coordinates are reals: challenge-style centers derived from bounding
    boxes need not be integral.  ``x`` is the column, ``y`` the row.
    """

    x: float
    y: float
    label: Label = Label.MITOTIC

    def __post_init__(self) -> None:
        if not (math.isfinite(self.x) and math.isfinite(self.y)):
            raise ValueError(f"coordinates must be finite, got ({self.x}, {self.y})")
        if not isinstance(self.label, Label):
            raise ValueError(f"label must be a Label, got {self.label!r}")


@dataclass(frozen=True)
class AnnotationSet:
    """All point annotations for one image."""

    image_id: str
    points: tuple[PointAnnotation, ...] = ()
    mpp: float = DEFAULT_MPP

    def __post_init__(self) -> None:
        if not self.image_id:
            raise ValueError("image_id must be non-empty")
        if not (self.mpp > 0):
            raise ValueError(f"mpp must be positive, got {self.mpp}")
        object.__setattr__(self, "points", tuple(self.points))
        seen = set()
        for p in self.points:
            key = (p.x, p.y, p.label)
            if key in seen:
                raise ValueError(
                    f"duplicate annotation ({p.x}, {p.y}, {p.label.value}) "
                    f"in image {self.image_id!r}"
                )
            seen.add(key)

    def mitotic_points(self) -> list[PointAnnotation]:
        return [p for p in self.points if p.label is Label.MITOTIC]

    def check_bounds(self, width: int, height: int) -> None:
        """Reject points outside ``[0, width) x [0, height)``."""
        for p in self.points:
            if not (0 <= p.x < width and 0 <= p.y < height):
                raise DataError(
                    f"point ({p.x}, {p.y}) outside image {self.image_id!r} "
                    f"bounds {width}x{height}"
                )


@dataclass(frozen=True)
class ProbMap:
    """Per-pixel score grid in [0, 1], same geometry as the image it scores.

    Values are stored as float32 so PMAP serialization is bit-exact.
    """

    values: np.ndarray

    def __post_init__(self) -> None:
        v = np.asarray(self.values, dtype=np.float32)
        if v.ndim != 2 or v.shape[0] < 1 or v.shape[1] < 1:
            raise ValueError(f"values must be a non-empty 2-d grid, got shape {v.shape}")
        if not np.isfinite(v).all():
            raise ValueError("probability map contains non-finite values")
        lo, hi = float(v.min()), float(v.max())
        if lo < 0.0 or hi > 1.0:
            raise ValueError(f"probability values outside [0, 1]: min {lo}, max {hi}")
        object.__setattr__(self, "values", _freeze(v))

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def height(self) -> int:
        return self.values.shape[0]

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, ProbMap):
            return NotImplemented
        return np.array_equal(self.values, other.values)

    def __hash__(self) -> int:
        return id(self)


@dataclass(frozen=True)
class BinaryMask:
    """Boolean grid, row-major; the pseudo-GT and morphology currency."""

    bits: np.ndarray

    def __post_init__(self) -> None:
        b = np.asarray(self.bits)
        if b.dtype != np.bool_:
            b = b.astype(bool)
        if b.ndim != 2 or b.shape[0] < 1 or b.shape[1] < 1:
            raise ValueError(f"bits must be a non-empty 2-d grid, got shape {b.shape}")
        object.__setattr__(self, "bits", _freeze(b))

    @property
    def width(self) -> int:
        return self.bits.shape[1]

    @property
    def height(self) -> int:
        return self.bits.shape[0]

    def count(self) -> int:
        return int(self.bits.sum())

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, BinaryMask):
            return NotImplemented
        return np.array_equal(self.bits, other.bits)

    def __hash__(self) -> int:
        return id(self)


@dataclass(frozen=True)
class Detection:
    """A candidate or final detection: location plus confidence."""

    x: float
    y: float
    score: float

    def __post_init__(self) -> None:
        if not (0.0 <= self.score <= 1.0):
            raise ValueError(f"score must be in [0, 1], got {self.score}")


# ---------------------------------------------------------------------------
# image I/O


def _sidecar_mpp(path: Path) -> float | None:
    sidecar = path.with_suffix(".mpp")
    if not sidecar.is_file():
        return None
    try:
        value = float(sidecar.read_text().strip())
    except ValueError as exc:
        raise DataError(f"bad mpp sidecar {sidecar}: {exc}") from exc
    if not value > 0:
        raise DataError(f"bad mpp sidecar {sidecar}: mpp must be positive, got {value}")
    return value


def load_image(path: str | Path) -> ImageRGB:
    """Decode a PNG or simple 8-bit RGB TIFF into an :class:`ImageRGB`.

    Bit depths and channel counts other than 8-bit 3-channel are reported
    as errors, never silently coerced.  Pyramidal WSI formats are out of
    scope.
    """
    path = Path(path)
    if not path.is_file():
        raise DataError(f"image file not found: {path}")
    try:
        with Image.open(path) as im:
            if im.mode != "RGB":
                raise DataError(
                    f"unsupported format: {path} has mode {im.mode!r}; "
                    "only 8-bit RGB images are accepted"
                )
            pixels = np.asarray(im, dtype=np.uint8)
    except UnidentifiedImageError as exc:
        raise DataError(f"unsupported format: cannot decode {path}") from exc
    mpp = _sidecar_mpp(path)
    return ImageRGB(pixels, mpp=mpp if mpp is not None else DEFAULT_MPP)


def save_image(image: ImageRGB, path: str | Path) -> None:
    """Write an image as PNG (or TIFF, by extension)."""
    Image.fromarray(np.asarray(image.pixels)).save(Path(path))


# ---------------------------------------------------------------------------
# annotation I/O


def load_annotations(
    path: str | Path,
    image_sizes: dict[str, tuple[int, int]] | None = None,
) -> list[AnnotationSet]:
    """Parse the annotation JSON schema into one :class:`AnnotationSet` per image.

    ``image_sizes`` maps image_id to (width, height); when given, points
    outside the matching image bounds are rejected.  Without it coordinate
    range checks are skipped (the file alone does not know image extents).
    """
    path = Path(path)
    if not path.is_file():
        raise DataError(f"annotation file not found: {path}")
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise DataError(f"malformed annotation JSON {path}: {exc}") from exc

    if not isinstance(doc, dict) or not isinstance(doc.get("images"), list):
        raise DataError(f"malformed annotation JSON {path}: missing 'images' list")

    sets: list[AnnotationSet] = []
    seen_ids: set[str] = set()
    for entry in doc["images"]:
        image_id = entry.get("id")
        if not isinstance(image_id, str) or not image_id:
            raise DataError(f"{path}: image entry without a string 'id'")
        if image_id in seen_ids:
            raise DataError(f"{path}: duplicate image_id {image_id!r}")
        seen_ids.add(image_id)
        mpp = float(entry.get("mpp", DEFAULT_MPP))
        points = []
        for raw in entry.get("points", []):
            label_str = raw.get("label")
            try:
                label = Label(label_str)
            except ValueError:
                raise DataError(
                    f"{path}: unknown label {label_str!r} in image {image_id!r} "
                    f"(expected 'mitotic' or 'imposter')"
                ) from None
            points.append(PointAnnotation(float(raw["x"]), float(raw["y"]), label))
        try:
            ann = AnnotationSet(image_id, tuple(points), mpp=mpp)
        except ValueError as exc:
            raise DataError(f"{path}: {exc}") from exc
        if image_sizes is not None and image_id in image_sizes:
            w, h = image_sizes[image_id]
            ann.check_bounds(w, h)
        sets.append(ann)
    return sets


def save_annotations(sets: list[AnnotationSet], path: str | Path) -> None:
    """Write annotation sets in the JSON schema read by :func:`load_annotations`."""
    doc = {
        "images": [
            {
                "id": s.image_id,
                "mpp": s.mpp,
                "points": [
                    {"x": p.x, "y": p.y, "label": p.label.value} for p in s.points
                ],
            }
            for s in sets
        ]
    }
    Path(path).write_text(json.dumps(doc, indent=2) + "\n")


# ---------------------------------------------------------------------------
# PMAP binary format


def write_pmap(pmap: ProbMap, path: str | Path) -> None:
    """Serialize a probability map; bit-exact under :func:`read_pmap`."""
    header = struct.pack(
        "<4sBII", _PMAP_MAGIC, _PMAP_VERSION, pmap.width, pmap.height
    )
    values = np.ascontiguousarray(pmap.values, dtype="<f4")
    Path(path).write_bytes(header + values.tobytes())


def read_pmap(path: str | Path) -> ProbMap:
    """Read a PMAP file written by :func:`write_pmap`."""
    path = Path(path)
    if not path.is_file():
        raise DataError(f"pmap file not found: {path}")
    blob = path.read_bytes()
    header_size = struct.calcsize("<4sBII")
    if len(blob) < header_size:
        raise DataError(f"truncated pmap file: {path}")
    magic, version, width, height = struct.unpack("<4sBII", blob[:header_size])
    if magic != _PMAP_MAGIC:
        raise DataError(f"not a pmap file (bad magic): {path}")
    if version != _PMAP_VERSION:
        raise DataError(f"unsupported pmap version {version}: {path}")
    expected = header_size + 4 * width * height
    if len(blob) != expected:
        raise DataError(
            f"pmap payload size mismatch in {path}: "
            f"expected {expected} bytes, got {len(blob)}"
        )
    values = np.frombuffer(blob, dtype="<f4", offset=header_size).reshape(height, width)
    try:
        return ProbMap(values.copy())
    except ValueError as exc:
        raise DataError(f"invalid pmap values in {path}: {exc}") from exc
