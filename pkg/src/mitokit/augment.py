"""Seed-driven geometric and photometric patch augmentation.

Each augmentation in a spec fires independently with its probability and
draws its parameter uniformly from its range, so two runs with the same
seed replay bit-identically.  Geometric transforms are applied to the
image (bilinear) and its paired mask (nearest-neighbor) alike, with
reflect padding throughout; photometric transforms touch the image only.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

import numpy as np
from scipy import ndimage

from .core import BinaryMask, ImageRGB
from .stain import InsufficientTissueError, augment_stain

__all__ = [
    "AugmentKind",
    "AugmentStep",
    "AugmentSpec",
    "apply",
    "elastic_deform",
    "unsharp",
    "default_spec",
]

# smoothing radius (px) for the elastic displacement field inside apply()
ELASTIC_FIELD_SIGMA = 4.0


class AugmentKind(str, Enum):
    FLIP_H = "flip_h"
    FLIP_V = "flip_v"
    ROTATE90 = "rotate90"
    ROTATE_FREE = "rotate_free"
    SHEAR = "shear"
    ZOOM = "zoom"
    ELASTIC = "elastic"
    BRIGHTNESS = "brightness"
    CONTRAST = "contrast"
    BLUR = "blur"
    SHARPEN = "sharpen"
    COLOR_JITTER = "color_jitter"
    SATURATION = "saturation"
    STAIN = "stain"


_GEOMETRIC = {
    AugmentKind.FLIP_H,
    AugmentKind.FLIP_V,
    AugmentKind.ROTATE90,
    AugmentKind.ROTATE_FREE,
    AugmentKind.SHEAR,
    AugmentKind.ZOOM,
    AugmentKind.ELASTIC,
}

# hard parameter bounds per kind; spec ranges must stay inside these
_PARAM_LIMITS: dict[AugmentKind, tuple[float, float]] = {
    AugmentKind.FLIP_H: (0.0, 0.0),
    AugmentKind.FLIP_V: (0.0, 0.0),
    AugmentKind.ROTATE90: (0.0, 3.0),       # quarter turns, integer draw
    AugmentKind.ROTATE_FREE: (-180.0, 180.0),  # degrees
    AugmentKind.SHEAR: (-45.0, 45.0),       # degrees
    AugmentKind.ZOOM: (0.25, 4.0),          # scale factor
    AugmentKind.ELASTIC: (0.0, 50.0),       # displacement magnitude, px
    AugmentKind.BRIGHTNESS: (-255.0, 255.0),  # additive levels
    AugmentKind.CONTRAST: (0.1, 4.0),       # factor about mid-gray
    AugmentKind.BLUR: (0.0, 10.0),          # Gaussian radius, px
    AugmentKind.SHARPEN: (0.0, 5.0),        # unsharp amount
    AugmentKind.COLOR_JITTER: (-255.0, 255.0),  # per-channel additive levels
    AugmentKind.SATURATION: (0.0, 4.0),     # factor
    AugmentKind.STAIN: (0.0, 1.0),          # concentration sigma
}


@dataclass(frozen=True)
class AugmentStep:
    """One augmentation: kind, firing probability, parameter range."""

    kind: AugmentKind
    p: float
    lo: float = 0.0
    hi: float = 0.0

    def __post_init__(self) -> None:
        if not (0.0 <= self.p <= 1.0):
            raise ValueError(f"probability must be in [0, 1], got {self.p}")
        if self.lo > self.hi:
            raise ValueError(f"empty parameter range [{self.lo}, {self.hi}]")
        lim_lo, lim_hi = _PARAM_LIMITS[self.kind]
        if self.lo < lim_lo or self.hi > lim_hi:
            raise ValueError(
                f"{self.kind.value} range [{self.lo}, {self.hi}] outside "
                f"limits [{lim_lo}, {lim_hi}]"
            )


@dataclass(frozen=True)
class AugmentSpec:
    """Ordered augmentation list; applied in list order, never shuffled."""

    steps: tuple[AugmentStep, ...] = field(default_factory=tuple)

    def __post_init__(self) -> None:
        object.__setattr__(self, "steps", tuple(self.steps))


def default_spec() -> AugmentSpec:
    """The stock training-time augmentation list.

    Magnitudes are house defaults: quarter-turn plus free rotation in
    +/-15 deg, shear +/-10 deg, zoom 0.8-1.2, brightness +/-25 levels,
    contrast x0.75-1.25, blur radius up to 2 px, sharpen amount up to 1,
    color jitter +/-10 levels per channel, saturation x0.75-1.25, stain
    concentration sigma 0.2.
    """
    k = AugmentKind
    return AugmentSpec((
        AugmentStep(k.FLIP_H, 0.5),
        AugmentStep(k.FLIP_V, 0.5),
        AugmentStep(k.ROTATE90, 0.5, 1, 3),
        AugmentStep(k.ROTATE_FREE, 0.3, -15.0, 15.0),
        AugmentStep(k.SHEAR, 0.3, -10.0, 10.0),
        AugmentStep(k.ZOOM, 0.3, 0.8, 1.2),
        AugmentStep(k.ELASTIC, 0.3, 0.0, 10.0),
        AugmentStep(k.BRIGHTNESS, 0.3, -25.0, 25.0),
        AugmentStep(k.CONTRAST, 0.3, 0.75, 1.25),
        AugmentStep(k.BLUR, 0.2, 0.0, 2.0),
        AugmentStep(k.SHARPEN, 0.2, 0.0, 1.0),
        AugmentStep(k.COLOR_JITTER, 0.3, -10.0, 10.0),
        AugmentStep(k.SATURATION, 0.3, 0.75, 1.25),
        AugmentStep(k.STAIN, 0.3, 0.2, 0.2),
    ))


def _to_uint8(arr: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(arr), 0, 255).astype(np.uint8)


def _affine_image(px: np.ndarray, matrix: np.ndarray, offset: np.ndarray) -> np.ndarray:
    out = np.empty_like(px)
    for ch in range(3):
        warped = ndimage.affine_transform(
            px[:, :, ch].astype(np.float64), matrix, offset=offset,
            order=1, mode="reflect",
        )
        out[:, :, ch] = _to_uint8(warped)
    return out


def _affine_mask(bits: np.ndarray, matrix: np.ndarray, offset: np.ndarray) -> np.ndarray:
    warped = ndimage.affine_transform(
        bits.astype(np.float64), matrix, offset=offset, order=0, mode="reflect"
    )
    return warped > 0.5


def _center(shape: tuple[int, ...]) -> np.ndarray:
    return np.array([(shape[0] - 1) / 2.0, (shape[1] - 1) / 2.0])


def _rotation_affine(shape, degrees):
    # output -> input mapping about the image center, (row, col) order
    t = np.deg2rad(degrees)
    rot = np.array([[np.cos(t), -np.sin(t)], [np.sin(t), np.cos(t)]])
    c = _center(shape)
    return rot, c - rot @ c


def _shear_affine(shape, degrees):
    s = np.tan(np.deg2rad(degrees))
    matrix = np.array([[1.0, 0.0], [-s, 1.0]])
    c = _center(shape)
    return matrix, c - matrix @ c


def _zoom_affine(shape, factor):
    matrix = np.array([[1.0 / factor, 0.0], [0.0, 1.0 / factor]])
    c = _center(shape)
    return matrix, c - matrix @ c


def _displacement_field(
    shape: tuple[int, int], alpha: float, sigma_s: float, rng: np.random.Generator
) -> np.ndarray:
    disp = rng.uniform(-1.0, 1.0, size=(2,) + shape) * alpha
    if sigma_s > 0:
        disp = ndimage.gaussian_filter(disp, sigma=(0.0, sigma_s, sigma_s))
    return disp


def _warp_by_field(arr: np.ndarray, disp: np.ndarray, order: int) -> np.ndarray:
    rows, cols = np.meshgrid(
        np.arange(arr.shape[0], dtype=np.float64),
        np.arange(arr.shape[1], dtype=np.float64),
        indexing="ij",
    )
    coords = np.stack([rows + disp[0], cols + disp[1]])
    return ndimage.map_coordinates(arr, coords, order=order, mode="reflect")


def elastic_deform(
    image: ImageRGB,
    alpha: float,
    sigma_s: float,
    rng: np.random.Generator,
    mask: BinaryMask | None = None,
) -> ImageRGB | tuple[ImageRGB, BinaryMask]:
    """Random smooth warp: per-pixel U[-1,1]^2 displacements scaled by
    ``alpha`` and Gaussian-smoothed with radius ``sigma_s``, resampled
    bilinearly with reflect padding.  ``alpha = 0`` is the identity.

    With ``mask`` given, the same field is applied to it (nearest-neighbor)
    and an (image, mask) pair is returned.
    """
    if alpha < 0:
        raise ValueError(f"alpha must be >= 0, got {alpha}")
    if sigma_s <= 0:
        raise ValueError(f"sigma_s must be > 0, got {sigma_s}")
    disp = _displacement_field((image.height, image.width), alpha, sigma_s, rng)
    out = np.empty_like(image.pixels)
    for ch in range(3):
        out[:, :, ch] = _to_uint8(
            _warp_by_field(image.pixels[:, :, ch].astype(np.float64), disp, order=1)
        )
    warped = ImageRGB(out, mpp=image.mpp)
    if mask is None:
        return warped
    bits = _warp_by_field(mask.bits.astype(np.float64), disp, order=0) > 0.5
    return warped, BinaryMask(bits)


def unsharp(image: ImageRGB, amount: float, radius: float) -> ImageRGB:
    """Unsharp masking: ``clamp(I + amount * (I - gaussian_blur(I, radius)))``."""
    if amount < 0:
        raise ValueError(f"amount must be >= 0, got {amount}")
    if radius <= 0:
        raise ValueError(f"radius must be > 0, got {radius}")
    px = image.pixels.astype(np.float64)
    blurred = ndimage.gaussian_filter(px, sigma=(radius, radius, 0))
    return ImageRGB(_to_uint8(px + amount * (px - blurred)), mpp=image.mpp)


def _apply_photometric(px: np.ndarray, kind: AugmentKind, rng, lo, hi) -> np.ndarray:
    if kind is AugmentKind.BRIGHTNESS:
        return _to_uint8(px.astype(np.float64) + rng.uniform(lo, hi))
    if kind is AugmentKind.CONTRAST:
        f = rng.uniform(lo, hi)
        return _to_uint8((px.astype(np.float64) - 128.0) * f + 128.0)
    if kind is AugmentKind.BLUR:
        sigma = rng.uniform(lo, hi)
        if sigma <= 0:
            return px
        return _to_uint8(
            ndimage.gaussian_filter(px.astype(np.float64), sigma=(sigma, sigma, 0))
        )
    if kind is AugmentKind.COLOR_JITTER:
        offsets = rng.uniform(lo, hi, size=3)
        return _to_uint8(px.astype(np.float64) + offsets)
    if kind is AugmentKind.SATURATION:
        f = rng.uniform(lo, hi)
        fpx = px.astype(np.float64)
        gray = fpx @ np.array([0.299, 0.587, 0.114])
        return _to_uint8(gray[:, :, None] + f * (fpx - gray[:, :, None]))
    raise AssertionError(f"not a photometric kind: {kind}")


def apply(
    image: ImageRGB,
    mask: BinaryMask | None,
    spec: AugmentSpec,
    rng: np.random.Generator,
) -> tuple[ImageRGB, BinaryMask | None]:
    """Run an augmentation spec over an image (and optional paired mask).

    Steps fire independently with their probabilities, in list order.
    Fully deterministic given the generator seed; a step that does not
    fire draws nothing beyond its firing coin.
    """
    if mask is not None and (mask.height, mask.width) != (image.height, image.width):
        raise ValueError(
            f"mask geometry {mask.width}x{mask.height} does not match "
            f"image {image.width}x{image.height}"
        )
    px = np.asarray(image.pixels)
    bits = None if mask is None else np.asarray(mask.bits)

    for step in spec.steps:
        if rng.random() >= step.p:
            continue
        kind = step.kind
        if kind is AugmentKind.FLIP_H:
            px = px[:, ::-1]
            bits = None if bits is None else bits[:, ::-1]
        elif kind is AugmentKind.FLIP_V:
            px = px[::-1, :]
            bits = None if bits is None else bits[::-1, :]
        elif kind is AugmentKind.ROTATE90:
            turns = int(rng.integers(int(step.lo), int(step.hi) + 1))
            px = np.rot90(px, k=turns)
            bits = None if bits is None else np.rot90(bits, k=turns)
        elif kind in (AugmentKind.ROTATE_FREE, AugmentKind.SHEAR, AugmentKind.ZOOM):
            param = rng.uniform(step.lo, step.hi)
            builder = {
                AugmentKind.ROTATE_FREE: _rotation_affine,
                AugmentKind.SHEAR: _shear_affine,
                AugmentKind.ZOOM: _zoom_affine,
            }[kind]
            matrix, offset = builder(px.shape[:2], param)
            px = _affine_image(px, matrix, offset)
            bits = None if bits is None else _affine_mask(bits, matrix, offset)
        elif kind is AugmentKind.ELASTIC:
            alpha = rng.uniform(step.lo, step.hi)
            disp = _displacement_field(px.shape[:2], alpha, ELASTIC_FIELD_SIGMA, rng)
            warped = np.empty_like(px)
            for ch in range(3):
                warped[:, :, ch] = _to_uint8(
                    _warp_by_field(px[:, :, ch].astype(np.float64), disp, order=1)
                )
            px = warped
            if bits is not None:
                bits = _warp_by_field(bits.astype(np.float64), disp, order=0) > 0.5
        elif kind is AugmentKind.SHARPEN:
            amount = rng.uniform(step.lo, step.hi)
            px = unsharp(ImageRGB(np.ascontiguousarray(px), mpp=image.mpp), amount, 1.0).pixels
        elif kind is AugmentKind.STAIN:
            sigma = rng.uniform(step.lo, step.hi)
            try:
                px = augment_stain(
                    ImageRGB(np.ascontiguousarray(px), mpp=image.mpp), sigma, rng
                ).pixels
            except InsufficientTissueError:
                pass  # blank patches pass through unchanged
        else:
            px = _apply_photometric(px, kind, rng, step.lo, step.hi)

    out_image = ImageRGB(np.ascontiguousarray(px), mpp=image.mpp)
    out_mask = None if bits is None else BinaryMask(np.ascontiguousarray(bits))
    return out_image, out_mask
