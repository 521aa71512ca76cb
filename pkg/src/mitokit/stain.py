"""Stain deconvolution, normalization, and randomized stain augmentation.

H&E absorbances combine linearly in optical density (Beer-Lambert), so an
RGB image factors as ``od = M @ c`` per pixel, with ``M`` a 3x2 matrix of
unit-norm stain vectors (hematoxylin, eosin columns) and ``c`` the two
non-negative stain concentrations.  The stain matrix is estimated with the
Macenko method (SVD plane of tissue OD pixels, angle-percentile extremes);
concentrations come from an unconstrained least-squares solve clamped to
``c >= 0``, which is far cheaper than a constrained solver and accurate to
well under 1e-3 OD on realistic inputs.

Augmentation perturbs the *concentrations* (per-channel scale and offset)
rather than the stain vectors, which keeps hues plausible while simulating
lab-to-lab staining variation.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .core import ImageRGB, _freeze

__all__ = [
    "StainError",
    "InsufficientTissueError",
    "StainMatrix",
    "ConcentrationMap",
    "REFERENCE_HE",
    "rgb_to_od",
    "od_to_rgb",
    "estimate_stain_matrix",
    "deconvolve",
    "reconstruct",
    "augment_stain",
    "normalize_stain",
]

# OD below this is treated as transparent background (Macenko's beta)
TRANSPARENCY_OD = 0.15
# percentile (and its complement) of the OD polar angle taken as stain extremes
ANGLE_PERCENTILE = 1.0
# minimum number of tissue pixels required for a stable estimate
MIN_TISSUE_PIXELS = 100

_MIN_COLUMN_ANGLE_DEG = 1.0


class StainError(Exception):
    """Stain estimation or deconvolution failure."""


class InsufficientTissueError(StainError):
    """Too few pixels above the transparency threshold (e.g. a blank image)."""


@dataclass(frozen=True)
class StainMatrix:
    """3x2 matrix of unit-norm optical-density stain vectors.

    Column 0 is hematoxylin, column 1 eosin (by convention the hematoxylin
    column has the larger red-channel OD).
    """

    matrix: np.ndarray

    def __post_init__(self) -> None:
        m = np.asarray(self.matrix, dtype=np.float64)
        if m.shape != (3, 2):
            raise ValueError(f"stain matrix must be 3x2, got {m.shape}")
        if (m < 0).any():
            raise ValueError("stain vector components must be non-negative")
        norms = np.linalg.norm(m, axis=0)
        if not np.allclose(norms, 1.0, atol=1e-6):
            raise ValueError(f"stain columns must be unit norm, got norms {norms}")
        angle = _column_angle_deg(m)
        if angle <= _MIN_COLUMN_ANGLE_DEG:
            raise ValueError(f"stain columns nearly parallel ({angle:.3f} deg apart)")
        object.__setattr__(self, "matrix", _freeze(m))

    @property
    def hematoxylin(self) -> np.ndarray:
        return self.matrix[:, 0]

    @property
    def eosin(self) -> np.ndarray:
        return self.matrix[:, 1]

    def to_json(self) -> str:
        h = [float(f"{v:.9g}") for v in self.matrix[:, 0]]
        e = [float(f"{v:.9g}") for v in self.matrix[:, 1]]
        return json.dumps({"h": h, "e": e})

    @classmethod
    def from_json(cls, text: str) -> "StainMatrix":
        doc = json.loads(text)
        return cls(np.column_stack([doc["h"], doc["e"]]))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json() + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "StainMatrix":
        return cls.from_json(Path(path).read_text())

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, StainMatrix):
            return NotImplemented
        return np.array_equal(self.matrix, other.matrix)

    def __hash__(self) -> int:
        return id(self)


def _column_angle_deg(m: np.ndarray) -> float:
    cosang = float(np.clip(m[:, 0] @ m[:, 1], -1.0, 1.0))
    return math.degrees(math.acos(cosang))


def _unit(v: np.ndarray) -> np.ndarray:
    return v / np.linalg.norm(v)


# conventional H&E absorbance pair; fallback target when estimation fails
REFERENCE_HE = StainMatrix(
    np.column_stack([_unit(np.array([0.65, 0.70, 0.29])),
                     _unit(np.array([0.07, 0.99, 0.11]))])
)


@dataclass(frozen=True)
class ConcentrationMap:
    """Per-pixel non-negative stain concentrations, shape (h, w, 2)."""

    values: np.ndarray

    def __post_init__(self) -> None:
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 3 or v.shape[2] != 2:
            raise ValueError(f"concentrations must have shape (h, w, 2), got {v.shape}")
        if (v < 0).any():
            raise ValueError("concentrations must be non-negative")
        object.__setattr__(self, "values", _freeze(v))

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def height(self) -> int:
        return self.values.shape[0]


def rgb_to_od(image: ImageRGB | np.ndarray) -> np.ndarray:
    """Convert 8-bit RGB to optical density: ``od = -ln(max(I, 1) / 255)``.

    The ``max(I, 1)`` clamp bounds OD at ``ln 255``; white maps to 0.
    """
    px = image.pixels if isinstance(image, ImageRGB) else np.asarray(image)
    clamped = np.maximum(px.astype(np.float64), 1.0)
    return -np.log(clamped / 255.0)


def od_to_rgb(od: np.ndarray, mpp: float | None = None) -> ImageRGB:
    """Invert :func:`rgb_to_od`: ``I = round(255 * exp(-od))``, clamped to [0, 255]."""
    od = np.asarray(od, dtype=np.float64)
    if (od < 0).any():
        raise ValueError("optical density must be non-negative")
    intensity = np.rint(255.0 * np.exp(-od))
    pixels = np.clip(intensity, 0, 255).astype(np.uint8)
    if mpp is None:
        return ImageRGB(pixels)
    return ImageRGB(pixels, mpp=mpp)


def estimate_stain_matrix(
    image: ImageRGB,
    beta: float = TRANSPARENCY_OD,
    alpha: float = ANGLE_PERCENTILE,
    min_pixels: int = MIN_TISSUE_PIXELS,
) -> StainMatrix:
    """Estimate the H&E stain matrix of an image with the Macenko method.

    Pixels with any OD channel below ``beta`` are discarded as transparent
    background; the remaining OD vectors are projected onto their two
    leading right-singular directions, and the directions at the ``alpha``
    and ``100 - alpha`` percentiles of the polar angle in that plane become
    the stain vectors.

    Raises :class:`InsufficientTissueError` when fewer than ``min_pixels``
    tissue pixels remain (blank white/black control images take this path),
    and :class:`StainError` when the tissue is effectively single-stain and
    no two distinct directions exist.
    """
    od = rgb_to_od(image).reshape(-1, 3)
    tissue = od[(od >= beta).all(axis=1)]
    if tissue.shape[0] < min_pixels:
        raise InsufficientTissueError(
            f"insufficient tissue: {tissue.shape[0]} pixels above OD {beta} "
            f"(need {min_pixels})"
        )

    # right-singular vectors of the OD matrix via its 3x3 Gram matrix
    eigvals, eigvecs = np.linalg.eigh(tissue.T @ tissue)
    basis = eigvecs[:, [2, 1]]
    proj = tissue @ basis
    # orient the leading axis with the data so angles stay clear of the
    # arctan2 branch cut
    if proj[:, 0].mean() < 0:
        basis = basis * np.array([-1.0, 1.0])
        proj = proj * np.array([-1.0, 1.0])

    phi = np.arctan2(proj[:, 1], proj[:, 0])
    lo, hi = np.percentile(phi, [alpha, 100.0 - alpha])
    extremes = []
    for angle in (lo, hi):
        v = basis @ np.array([math.cos(angle), math.sin(angle)])
        if v.sum() < 0:
            v = -v
        v = np.clip(v, 0.0, None)
        norm = np.linalg.norm(v)
        if norm < 1e-12:
            raise StainError("degenerate stain direction (zero after sign fix)")
        extremes.append(v / norm)

    v0, v1 = extremes
    # hematoxylin convention: first column has the larger red-channel OD
    if v0[0] >= v1[0]:
        columns = np.column_stack([v0, v1])
    else:
        columns = np.column_stack([v1, v0])
    if _column_angle_deg(columns) <= _MIN_COLUMN_ANGLE_DEG:
        raise StainError(
            "degenerate stain estimate: single-stain image, columns "
            f"{_column_angle_deg(columns):.3f} deg apart"
        )
    return StainMatrix(columns)


def deconvolve(image: ImageRGB, m: StainMatrix) -> ConcentrationMap:
    """Per-pixel least-squares stain separation, clamped to ``c >= 0``.

    Solves ``od ~= M @ c`` through the 2x3 pseudo-inverse of ``M``; interior
    solutions leave the residual orthogonal to both stain vectors.
    """
    od = rgb_to_od(image)
    pinv = np.linalg.pinv(m.matrix)  # (2, 3)
    conc = od.reshape(-1, 3) @ pinv.T
    conc = np.clip(conc, 0.0, None)
    return ConcentrationMap(conc.reshape(image.height, image.width, 2))


def reconstruct(c: ConcentrationMap, m: StainMatrix, mpp: float | None = None) -> ImageRGB:
    """Compose concentrations back into an RGB image: ``od = M @ c`` per pixel."""
    od = c.values.reshape(-1, 2) @ m.matrix.T
    return od_to_rgb(od.reshape(c.height, c.width, 3), mpp=mpp)


def augment_stain(
    image: ImageRGB,
    sigma: float = 0.2,
    rng: np.random.Generator | None = None,
) -> ImageRGB:
    """Randomly perturb per-stain concentrations to simulate staining variation.

    Each stain channel ``i`` is remapped as ``c_i * a_i + b_i`` with
    ``a_i ~ U[1 - sigma, 1 + sigma]`` and ``b_i ~ U[-sigma, +sigma]`` (in
    OD-concentration units), clamped to stay non-negative.  Deterministic
    given the generator state; ``sigma = 0`` collapses to the plain
    deconvolve/reconstruct round trip.
    """
    if not (0.0 <= sigma <= 1.0):
        raise ValueError(f"sigma must be in [0, 1], got {sigma}")
    if rng is None:
        rng = np.random.default_rng()
    m = estimate_stain_matrix(image)
    conc = deconvolve(image, m)
    scale = rng.uniform(1.0 - sigma, 1.0 + sigma, size=2)
    offset = rng.uniform(-sigma, sigma, size=2)
    perturbed = np.clip(conc.values * scale + offset, 0.0, None)
    return reconstruct(ConcentrationMap(perturbed), m, mpp=image.mpp)


def normalize_stain(image: ImageRGB, target: StainMatrix) -> ImageRGB:
    """Re-express an image in a target stain basis.

    Deconvolves with the image's own estimated matrix and reconstructs with
    ``target``, aligning staining appearance across scanners and labs.
    """
    own = estimate_stain_matrix(image)
    conc = deconvolve(image, own)
    return reconstruct(conc, target, mpp=image.mpp)
