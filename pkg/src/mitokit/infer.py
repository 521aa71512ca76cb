"""Overlap-tiled inference with pluggable scorers, TTA, and ensembling.

Images are tiled into 512x512 windows with 75 px overlap, each tile is
scored by a :class:`Scorer`, and per-pixel results are averaged over all
covering tiles (double-precision accumulation).  Trained networks stay out
of process: the built-in scorers are an annotation-driven oracle (test
double), a deterministic stain-based baseline, constants, and
:class:`ExternalScorer`, which shuttles tiles to a user command through
PNG + PMAP files.

External scorer protocol: for each batch the runner creates a work
directory containing one ``<tile_id>.png`` per tile and a ``batch.json``
manifest (``{"mode": ..., "tiles": [{"id", "file", "x0", "y0", "width",
"height"}]}``), then invokes the user command with the directory path
appended as its final argument.  The command must exit 0 and leave one
``<tile_id>.pmap`` per tile (segmentation) or a ``scores.json`` mapping
tile_id to score (classification).
"""

from __future__ import annotations

import json
import shlex
import subprocess
import tempfile
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy import ndimage

from .core import AnnotationSet, ImageRGB, ProbMap, read_pmap, save_image
from .stain import REFERENCE_HE, StainError, StainMatrix, deconvolve, estimate_stain_matrix

__all__ = [
    "TILE_SIZE",
    "TILE_OVERLAP",
    "ScorerError",
    "ScorerProtocolError",
    "TilePlan",
    "Scorer",
    "ConstantScorer",
    "ExternalScorer",
    "plan_tiles",
    "run_tiled",
    "oracle_scorer",
    "oracle_classifier",
    "classical_scorer",
    "tta_expand",
    "predict",
]

TILE_SIZE = 512
TILE_OVERLAP = 75


class ScorerError(Exception):
    """A scorer failed while evaluating a tile or patch."""


class ScorerProtocolError(ScorerError):
    """An external scorer command misbehaved (bad exit, missing outputs)."""


@dataclass(frozen=True)
class TilePlan:
    """Tiling of a (possibly padded) image into fixed-size windows."""

    windows: tuple[tuple[int, int, int, int], ...]  # (x0, y0, w, h)
    tile: int
    overlap: int
    width: int
    height: int
    padded_width: int
    padded_height: int

    @property
    def padded(self) -> bool:
        return self.padded_width != self.width or self.padded_height != self.height


def plan_tiles(
    width: int,
    height: int,
    tile: int = TILE_SIZE,
    overlap: int = TILE_OVERLAP,
) -> TilePlan:
    """Plan overlapping tile windows covering every pixel.

    Window origins advance by ``tile - overlap``; an origin that would
    overrun is clamped to ``extent - tile`` (and duplicates dropped), so
    adjacent windows always overlap by at least ``overlap`` pixels.
    Images smaller than ``tile`` are planned against a reflect-padded
    extent, recorded on the plan.
    """
    if width < 1 or height < 1:
        raise ValueError(f"extent must be positive, got {width}x{height}")
    if not tile > overlap >= 0:
        raise ValueError(f"need tile > overlap >= 0, got tile {tile}, overlap {overlap}")
    stride = tile - overlap
    pw, ph = max(width, tile), max(height, tile)
    xs = _origins(pw, tile, stride)
    ys = _origins(ph, tile, stride)
    windows = tuple((x, y, tile, tile) for y in ys for x in xs)
    return TilePlan(windows, tile, overlap, width, height, pw, ph)


def _origins(extent: int, tile: int, stride: int) -> list[int]:
    origins = [o for o in range(0, extent - tile + 1, stride)]
    if not origins:
        origins = [0]
    if origins[-1] + tile < extent:
        origins.append(extent - tile)
    return origins


class Scorer:
    """Behavioral interface for pluggable models.

    Segmentation-mode scorers map an image tile to a same-geometry
    :class:`ProbMap`; classification-mode scorers map a patch to a scalar
    in [0, 1].  ``parallel_safe`` declares whether concurrent invocation
    is allowed; the tiled runner respects it.
    """

    name = "scorer"
    mode = "segmentation"  # or "classification"
    parallel_safe = True

    def score_tile(self, tile: ImageRGB, origin: tuple[int, int] = (0, 0)) -> ProbMap:
        raise NotImplementedError

    def score_patch(self, patch: ImageRGB, center: tuple[float, float] | None = None) -> float:
        raise NotImplementedError

    def score_batch(
        self, items: Sequence[tuple[str, ImageRGB, tuple[int, int]]]
    ) -> list[ProbMap]:
        return [self.score_tile(tile, origin) for _, tile, origin in items]

    def classify_batch(
        self, items: Sequence[tuple[str, ImageRGB, tuple[float, float] | None]]
    ) -> list[float]:
        return [self.score_patch(patch, center) for _, patch, center in items]


class ConstantScorer(Scorer):
    """Emits a fixed value everywhere; pass-through classifier / test double."""

    def __init__(self, value: float, mode: str = "segmentation", name: str | None = None):
        if not (0.0 <= value <= 1.0):
            raise ValueError(f"value must be in [0, 1], got {value}")
        self.value = float(value)
        self.mode = mode
        self.name = name or f"constant({value})"

    def score_tile(self, tile: ImageRGB, origin: tuple[int, int] = (0, 0)) -> ProbMap:
        return ProbMap(np.full((tile.height, tile.width), self.value, dtype=np.float32))

    def score_patch(self, patch: ImageRGB, center=None) -> float:
        return self.value


class _OracleSegmenter(Scorer):
    name = "oracle"

    def __init__(self, gt: AnnotationSet, sigma: float):
        self.points = [(p.x, p.y) for p in gt.mitotic_points()]
        self.sigma = sigma

    def score_tile(self, tile: ImageRGB, origin: tuple[int, int] = (0, 0)) -> ProbMap:
        x0, y0 = origin
        h, w = tile.height, tile.width
        if not self.points:
            return ProbMap(np.zeros((h, w), dtype=np.float32))
        xs = np.arange(x0, x0 + w, dtype=np.float64)
        ys = np.arange(y0, y0 + h, dtype=np.float64)
        best = None
        for px, py in self.points:
            d2 = (ys[:, None] - py) ** 2 + (xs[None, :] - px) ** 2
            best = d2 if best is None else np.minimum(best, d2)
        values = np.exp(-best / (2.0 * self.sigma * self.sigma))
        return ProbMap(np.clip(values, 0.0, 1.0).astype(np.float32))


def oracle_scorer(gt: AnnotationSet, sigma: float = 6.0) -> Scorer:
    """Annotation-driven segmentation stand-in for a trained model.

    Scores each pixel ``exp(-d^2 / (2 sigma^2))`` with ``d`` the distance
    to the nearest mitotic ground-truth point, in image-global
    coordinates (tiles carry their origins).
    """
    if sigma <= 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    return _OracleSegmenter(gt, sigma)


class _OracleClassifier(Scorer):
    name = "oracle-classifier"
    mode = "classification"

    def __init__(self, gt: AnnotationSet, radius: float):
        self.points = [(p.x, p.y) for p in gt.mitotic_points()]
        self.radius = radius

    def score_patch(self, patch: ImageRGB, center=None) -> float:
        if center is None:
            raise ScorerError("oracle classifier needs the patch center location")
        cx, cy = center
        hit = any(
            (cx - px) ** 2 + (cy - py) ** 2 <= self.radius**2
            for px, py in self.points
        )
        return 1.0 if hit else 0.0


def oracle_classifier(gt: AnnotationSet, radius: float = 17.0) -> Scorer:
    """Classification stand-in: 1.0 iff a mitotic GT point lies within
    ``radius`` px of the patch center, else 0.0."""
    if radius <= 0:
        raise ValueError(f"radius must be positive, got {radius}")
    return _OracleClassifier(gt, radius)


class _ClassicalSegmenter(Scorer):
    name = "classical"

    def __init__(self, reference: StainMatrix, smooth_sigma: float):
        self.reference = reference
        self.smooth_sigma = smooth_sigma

    def score_tile(self, tile: ImageRGB, origin: tuple[int, int] = (0, 0)) -> ProbMap:
        try:
            matrix = estimate_stain_matrix(tile)
        except StainError:
            matrix = self.reference
        hema = deconvolve(tile, matrix).values[:, :, 0]
        p99 = np.percentile(hema, 99)
        if p99 < 1e-6:
            return ProbMap(np.zeros_like(hema, dtype=np.float32))
        scored = hema / p99
        if self.smooth_sigma > 0:
            scored = ndimage.gaussian_filter(scored, sigma=self.smooth_sigma)
        return ProbMap(np.clip(scored, 0.0, 1.0).astype(np.float32))


def classical_scorer(
    reference: StainMatrix = REFERENCE_HE, smooth_sigma: float = 2.0
) -> Scorer:
    """Deterministic stain-based baseline, not a trained-model replacement.

    Normalized, smoothed hematoxylin concentration: nuclear material
    (including mitotic chromatin) is hematoxylin-dense, so this gives a
    plausible non-learned probability map for pipeline exercise.  Falls
    back to the reference stain matrix when estimation fails (blank tiles
    score zero).
    """
    return _ClassicalSegmenter(reference, smooth_sigma)


# ---------------------------------------------------------------------------
# external scorer protocol


class ExternalScorer(Scorer):
    """Bridge to an out-of-process model command via PNG/PMAP files.

    The command is run once per batch with the work directory appended as
    its final argument; a nonzero exit aborts the run.
    """

    parallel_safe = False

    def __init__(
        self,
        command: str | Sequence[str],
        mode: str = "segmentation",
        workdir: str | Path | None = None,
    ):
        self.command = shlex.split(command) if isinstance(command, str) else list(command)
        if not self.command:
            raise ValueError("external scorer command is empty")
        self.mode = mode
        self.workdir = None if workdir is None else Path(workdir)
        self.name = f"external({' '.join(self.command)})"

    def _run_batch(self, batch_dir: Path, manifest: dict) -> None:
        (batch_dir / "batch.json").write_text(json.dumps(manifest, indent=2))
        proc = subprocess.run(
            [*self.command, str(batch_dir)],
            capture_output=True,
            text=True,
        )
        if proc.returncode != 0:
            raise ScorerProtocolError(
                f"external scorer {self.command!r} exited {proc.returncode}: "
                f"{proc.stderr.strip()[:500]}"
            )

    def _batch_dir(self) -> tempfile.TemporaryDirectory:
        if self.workdir is not None:
            self.workdir.mkdir(parents=True, exist_ok=True)
        return tempfile.TemporaryDirectory(
            dir=None if self.workdir is None else str(self.workdir)
        )

    def score_batch(self, items):
        if self.mode != "segmentation":
            raise ScorerError("scorer is not in segmentation mode")
        with self._batch_dir() as tmp:
            batch_dir = Path(tmp)
            manifest = {"mode": "segmentation", "tiles": []}
            for tile_id, tile, (x0, y0) in items:
                save_image(tile, batch_dir / f"{tile_id}.png")
                manifest["tiles"].append(
                    {"id": tile_id, "file": f"{tile_id}.png", "x0": x0, "y0": y0,
                     "width": tile.width, "height": tile.height}
                )
            self._run_batch(batch_dir, manifest)
            maps = []
            for tile_id, tile, origin in items:
                out = batch_dir / f"{tile_id}.pmap"
                if not out.is_file():
                    raise ScorerProtocolError(
                        f"external scorer produced no output for tile {tile_id} "
                        f"at origin {origin}"
                    )
                maps.append(read_pmap(out))
            return maps

    def classify_batch(self, items):
        if self.mode != "classification":
            raise ScorerError("scorer is not in classification mode")
        with self._batch_dir() as tmp:
            batch_dir = Path(tmp)
            manifest = {"mode": "classification", "tiles": []}
            for patch_id, patch, center in items:
                save_image(patch, batch_dir / f"{patch_id}.png")
                entry = {"id": patch_id, "file": f"{patch_id}.png",
                         "width": patch.width, "height": patch.height}
                if center is not None:
                    entry["cx"], entry["cy"] = center
                manifest["tiles"].append(entry)
            self._run_batch(batch_dir, manifest)
            scores_file = batch_dir / "scores.json"
            if not scores_file.is_file():
                raise ScorerProtocolError("external classifier wrote no scores.json")
            scores = json.loads(scores_file.read_text())
            out = []
            for patch_id, _, _ in items:
                if patch_id not in scores:
                    raise ScorerProtocolError(
                        f"external classifier returned no score for patch {patch_id}"
                    )
                value = float(scores[patch_id])
                if not (0.0 <= value <= 1.0):
                    raise ScorerProtocolError(
                        f"external classifier score {value} for {patch_id} outside [0, 1]"
                    )
                out.append(value)
            return out

    def score_tile(self, tile, origin=(0, 0)):
        return self.score_batch([("tile", tile, origin)])[0]

    def score_patch(self, patch, center=None):
        return self.classify_batch([("patch", patch, center)])[0]


# ---------------------------------------------------------------------------
# tiled execution


def _pad_to(image: ImageRGB, pw: int, ph: int) -> np.ndarray:
    px = np.asarray(image.pixels)
    if pw == image.width and ph == image.height:
        return px
    return np.pad(
        px,
        ((0, ph - image.height), (0, pw - image.width), (0, 0)),
        mode="symmetric",
    )


def _tile_id(index: int, x0: int, y0: int) -> str:
    return f"t{index:04d}_x{x0}_y{y0}"


def run_tiled(
    image: ImageRGB,
    scorer: Scorer,
    plan: TilePlan | None = None,
    jobs: int = 1,
) -> ProbMap:
    """Score an image tile-by-tile and average overlapping results.

    Per-pixel output is the mean of all covering tile scores, accumulated
    in double precision; padded regions are cropped away.  Tiles are
    scored concurrently when ``jobs > 1`` and the scorer allows it, with
    accumulation in fixed window order either way.
    """
    if scorer.mode != "segmentation":
        raise ScorerError(f"scorer {scorer.name!r} is not in segmentation mode")
    if plan is None:
        plan = plan_tiles(image.width, image.height)
    padded = _pad_to(image, plan.padded_width, plan.padded_height)

    items = []
    for i, (x0, y0, w, h) in enumerate(plan.windows):
        tile_px = np.ascontiguousarray(padded[y0 : y0 + h, x0 : x0 + w])
        items.append((_tile_id(i, x0, y0), ImageRGB(tile_px, mpp=image.mpp), (x0, y0)))

    def score_one(item):
        tile_id, tile, origin = item
        try:
            result = scorer.score_tile(tile, origin)
        except ScorerError:
            raise
        except Exception as exc:
            raise ScorerError(
                f"scorer {scorer.name!r} failed on tile at origin {origin}: {exc}"
            ) from exc
        return result

    if jobs > 1 and scorer.parallel_safe:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            maps = list(pool.map(score_one, items))
    else:
        maps = scorer.score_batch(items)

    acc = np.zeros((plan.padded_height, plan.padded_width), dtype=np.float64)
    cover = np.zeros((plan.padded_height, plan.padded_width), dtype=np.int32)
    for (tile_id, tile, (x0, y0)), pmap in zip(items, maps):
        if (pmap.height, pmap.width) != (tile.height, tile.width):
            raise ScorerError(
                f"scorer {scorer.name!r} returned {pmap.width}x{pmap.height} "
                f"for a {tile.width}x{tile.height} tile at origin ({x0}, {y0})"
            )
        acc[y0 : y0 + tile.height, x0 : x0 + tile.width] += pmap.values
        cover[y0 : y0 + tile.height, x0 : x0 + tile.width] += 1
    values = acc / cover
    values = values[: image.height, : image.width]
    return ProbMap(np.clip(values, 0.0, 1.0).astype(np.float32))


# ---------------------------------------------------------------------------
# test-time augmentation and ensembling


@dataclass(frozen=True)
class TTAVariant:
    """A transformed copy of the input plus the pull-back for its map."""

    name: str
    image: ImageRGB
    pull_back: Callable[[np.ndarray], np.ndarray]


def tta_expand(image: ImageRGB) -> list[TTAVariant]:
    """The fixed TTA set: identity, three flips, and a mild sharpen.

    Each variant carries the geometric inverse that maps its probability
    map back to the original frame (sharpening pulls back unchanged).
    """
    from .augment import unsharp  # local import; augment depends on stain only

    px = np.asarray(image.pixels)

    def img(arr: np.ndarray) -> ImageRGB:
        return ImageRGB(np.ascontiguousarray(arr), mpp=image.mpp)

    return [
        TTAVariant("identity", image, lambda v: v),
        TTAVariant("flip_h", img(px[:, ::-1]), lambda v: v[:, ::-1]),
        TTAVariant("flip_v", img(px[::-1, :]), lambda v: v[::-1, :]),
        TTAVariant("flip_hv", img(px[::-1, ::-1]), lambda v: v[::-1, ::-1]),
        TTAVariant("sharpen", unsharp(image, amount=0.5, radius=1.0), lambda v: v),
    ]


def predict(
    image: ImageRGB,
    scorers: Sequence[Scorer],
    tta: bool = False,
    plan: TilePlan | None = None,
    jobs: int = 1,
) -> ProbMap:
    """Ensemble prediction: mean over scorers x TTA variants.

    Every variant map is pulled back to the original frame before
    averaging.  With a single scorer and TTA off this reduces exactly to
    :func:`run_tiled`.
    """
    if not scorers:
        raise ValueError("need at least one scorer")
    variants = tta_expand(image) if tta else [
        TTAVariant("identity", image, lambda v: v)
    ]
    if plan is None:
        plan = plan_tiles(image.width, image.height)
    acc = np.zeros((image.height, image.width), dtype=np.float64)
    for scorer in scorers:
        for variant in variants:
            pmap = run_tiled(variant.image, scorer, plan, jobs=jobs)
            acc += variant.pull_back(pmap.values.astype(np.float64))
    values = acc / (len(scorers) * len(variants))
    return ProbMap(np.clip(values, 0.0, 1.0).astype(np.float32))
