"""Global rigid alignment by MI maximization over a transform grid.

Pipeline: quantize both images to ``k`` labels, zero-pad the reference so
partial overlaps are searchable, then for every candidate transform warp
the floating image (nearest neighbor, labels are categorical), compute the
dense MI map, and take the displacement with the best MI among those whose
overlap passes the ``gamma`` gate.  The winner over all transforms, with
its displacement folded in, is the alignment.

The returned transform maps floating-image (x, y) coordinates into
reference-image coordinates, independent of any internal padding.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from .cmif import CmifSearch
from .core import (
    PAD_LABEL,
    DegenerateInputError,
    LabelImage,
    RigidTransform,
    as_mask,
    compose,
    image_center,
    translation,
)
from .quantize import fit_kmeans, quantize


@dataclass(frozen=True)
class AlignmentConfig:
    k: int = 16
    gamma: float = 0.5
    angle_count: int = 200
    refinement_count: int = 32
    seed: int = 0
    batch_size: int = 1000
    max_iter: int = 25
    workers: int = 1

    def __post_init__(self):
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError(f"gamma must lie in [0, 1], got {self.gamma}")
        if self.k < 2:
            raise ValueError(f"k must be >= 2, got {self.k}")


@dataclass(frozen=True)
class AlignmentResult:
    transform: RigidTransform  # floating (x, y) -> reference (x, y)
    mi: float
    angle: float
    displacement: tuple[int, int]  # (row, col) in padded-reference space
    n_at_opt: int
    stage: str  # "grid" or "refined"


def zero_pad(a: LabelImage, mask_a, floating_shape, gamma: float):
    """Symmetrically pad the reference by ceil(floating_size * (1 - gamma))
    per axis; padded cells are masked out and labeled with the reserved
    filler so they can never enter a level set."""
    if not 0.0 <= gamma <= 1.0:
        raise ValueError(f"gamma must lie in [0, 1], got {gamma}")
    ma = as_mask(mask_a, a.shape)
    pad_r = math.ceil(floating_shape[0] * (1.0 - gamma))
    pad_c = math.ceil(floating_shape[1] * (1.0 - gamma))
    labels = np.pad(a.labels, ((pad_r, pad_r), (pad_c, pad_c)), constant_values=PAD_LABEL)
    mask = np.pad(ma, ((pad_r, pad_r), (pad_c, pad_c)), constant_values=False)
    return LabelImage(labels=labels, k=a.k), mask, (pad_r, pad_c)


def warp_nn(b: LabelImage, mask_b, transform: RigidTransform, out_shape):
    """Warp a label image by backward mapping with nearest-neighbor lookup.

    Output pixel x takes ``b`` at ``round(transform^-1(x))`` when that
    pre-image is in domain and masked in; otherwise the pixel is masked out
    and labeled with the padding filler.
    """
    mb = as_mask(mask_b, b.shape)
    h, w = int(out_shape[0]), int(out_shape[1])
    hb, wb = b.shape
    xs = np.tile(np.arange(w, dtype=np.float64), h)
    ys = np.repeat(np.arange(h, dtype=np.float64), w)
    src = transform.inverse().apply(np.column_stack((xs, ys)))
    # round half up: exact .5 ties (pure half-pixel translations) must all
    # round the same way, which rint's half-to-even would not do
    sx = np.floor(src[:, 0] + 0.5).astype(np.int64)
    sy = np.floor(src[:, 1] + 0.5).astype(np.int64)
    inside = (sx >= 0) & (sx < wb) & (sy >= 0) & (sy < hb)

    labels = np.full(h * w, PAD_LABEL, dtype=np.int32)
    mask = np.zeros(h * w, dtype=bool)
    tgt = np.flatnonzero(inside)
    flat_src = sy[tgt] * wb + sx[tgt]
    keep = mb.ravel()[flat_src]
    tgt = tgt[keep]
    labels[tgt] = b.labels.ravel()[flat_src[keep]]
    mask[tgt] = True
    return LabelImage(labels=labels.reshape(h, w), k=b.k), mask.reshape(h, w)


def gated_argmax(cmap, gamma: float):
    """Displacement maximizing MI among valid cells whose overlap count is at
    least ``gamma`` times the maximum; ties prefer larger overlap, then the
    lexicographically smallest displacement.  Returns ``(chi, mi, n)``."""
    if not cmap.valid.any():
        raise ValueError("map has no valid displacement")
    n_max = cmap.n[cmap.valid].max()
    cand = cmap.valid & (cmap.n >= gamma * n_max)
    rows, cols = np.nonzero(cand)
    mi = cmap.mi[rows, cols]
    n = cmap.n[rows, cols]
    best = np.lexsort((np.arange(mi.size), -n, -mi))[0]
    chi = cmap.domain.shift_at((int(rows[best]), int(cols[best])))
    return chi, float(mi[best]), n[best].item()


def make_angle_grid(count: int) -> list[RigidTransform]:
    """``count`` equispaced rotations covering [-pi, pi), zero translation."""
    if count < 1:
        raise ValueError(f"count must be >= 1, got {count}")
    return [
        RigidTransform(angle=-math.pi + 2.0 * math.pi * i / count) for i in range(count)
    ]


def corner_error(t_true: RigidTransform, t_est: RigidTransform, shape) -> float:
    """Mean Euclidean distance between the four grid corners mapped by the
    true and the estimated transform."""
    h, w = shape
    corners = np.array(
        [[0.0, 0.0], [w - 1.0, 0.0], [0.0, h - 1.0], [w - 1.0, h - 1.0]]
    )
    delta = t_true.apply(corners) - t_est.apply(corners)
    return float(np.sqrt((delta**2).sum(axis=1)).mean())


class _LabelAligner:
    """Transform search over fixed quantized inputs; reference-side spectra
    are shared across all candidate transforms (and across both stages)."""

    def __init__(self, labels_a: LabelImage, mask_a, labels_b: LabelImage, mask_b, gamma, workers=1):
        self.labels_b = labels_b
        self.mask_b = as_mask(mask_b, labels_b.shape)
        self.gamma = gamma
        padded_a, padded_mask, pad = zero_pad(labels_a, mask_a, labels_b.shape, gamma)
        self.pad = pad
        self.canvas = padded_a.shape
        hb, wb = labels_b.shape
        diag = math.ceil(math.hypot(hb, wb)) + 2
        bound = (min(self.canvas[0], diag), min(self.canvas[1], diag))
        self.search = CmifSearch(padded_a, padded_mask, max_float_shape=bound, workers=workers)
        self.b_center = image_center(labels_b.shape)
        self.canvas_center = image_center(self.canvas)

    def _embed(self, transform: RigidTransform) -> RigidTransform:
        """Compose a canvas-centering translation so the transformed floating
        image lands centered in the padded canvas whatever the pivot.  The
        offset snaps to whole pixels, keeping pure translations exact under
        nearest-neighbor warping."""
        bx, by = transform.apply(self.b_center)
        e = (round(self.canvas_center[0] - bx), round(self.canvas_center[1] - by))
        return compose(translation(e), transform)

    def evaluate(self, transform: RigidTransform):
        """Gated MI peak for one candidate transform, or None if the warped
        image never overlaps the reference."""
        warp_t = self._embed(transform)
        warped, warped_mask = warp_nn(self.labels_b, self.mask_b, warp_t, self.canvas)
        peak = self.search.best_displacement(warped, warped_mask, self.gamma)
        if peak is None:
            return None
        chi, mi, n = peak
        return chi, mi, n, warp_t

    def result_for(self, transform, chi, mi, n, warp_t, stage) -> AlignmentResult:
        # Fold the winning displacement and the padding back out: the final
        # map sends floating coordinates through the embedded warp, then
        # shifts by -chi (the search samples the warped image at x + chi)
        # and by -pad (padded -> original reference coordinates).
        shift = translation((-self.pad[1] - chi[1], -self.pad[0] - chi[0]))
        t_hat = compose(shift, warp_t).recentered(self.b_center)
        return AlignmentResult(
            transform=t_hat,
            mi=max(mi, 0.0),
            angle=transform.angle,
            displacement=(int(chi[0]), int(chi[1])),
            n_at_opt=int(n),
            stage=stage,
        )

    def run(self, transforms, stage: str) -> AlignmentResult | None:
        best = None
        best_t = None
        for transform in transforms:
            out = self.evaluate(transform)
            if out is None:
                continue
            if best is None or out[1] > best[1]:
                best = out
                best_t = transform
        if best is None:
            return None
        chi, mi, n, warp_t = best
        return self.result_for(best_t, chi, mi, n, warp_t, stage)


def _quantize_pair(image_a, mask_a, image_b, mask_b, config: AlignmentConfig):
    model_a = fit_kmeans(
        image_a, mask_a, config.k, config.batch_size, config.max_iter, config.seed
    )
    model_b = fit_kmeans(
        image_b, mask_b, config.k, config.batch_size, config.max_iter, config.seed
    )
    if model_a.k == 1 and model_b.k == 1:
        raise DegenerateInputError(
            "no mutual information possible: both images quantize to one level"
        )
    return quantize(image_a, model_a), quantize(image_b, model_b)


def align_label_images(
    labels_a: LabelImage,
    mask_a,
    labels_b: LabelImage,
    mask_b,
    transforms,
    gamma: float = 0.5,
    workers: int = 1,
    stage: str = "grid",
) -> AlignmentResult:
    """Transform search for already-quantized images."""
    if not transforms:
        raise ValueError("transforms must be non-empty")
    aligner = _LabelAligner(labels_a, mask_a, labels_b, mask_b, gamma, workers)
    result = aligner.run(transforms, stage)
    if result is None:
        raise DegenerateInputError("no transform produced an overlapping configuration")
    return result


def global_align(
    image_a, mask_a, image_b, mask_b, transforms, config: AlignmentConfig
) -> AlignmentResult:
    """Quantize, pad, and search the given transforms for the global MI
    maximum (the grid stage)."""
    labels_a, labels_b = _quantize_pair(image_a, mask_a, image_b, mask_b, config)
    return align_label_images(
        labels_a, mask_a, labels_b, mask_b, transforms,
        gamma=config.gamma, workers=config.workers, stage="grid",
    )


def refinement_angles(best_angle: float, grid_count: int, refinement_count: int, seed: int):
    """Random angles drawn uniformly from best_angle +- 2*pi/grid_count."""
    rng = np.random.default_rng(seed)
    delta = 2.0 * math.pi / grid_count
    return [
        RigidTransform(angle=float(a))
        for a in rng.uniform(best_angle - delta, best_angle + delta, size=refinement_count)
    ]


def refine(
    grid_result: AlignmentResult,
    image_a,
    mask_a,
    image_b,
    mask_b,
    grid_count: int,
    config: AlignmentConfig,
) -> AlignmentResult:
    """Random angle refinement around the grid-stage winner; keeps the grid
    result unless a refined angle strictly improves MI."""
    if config.refinement_count <= 0:
        return grid_result
    labels_a, labels_b = _quantize_pair(image_a, mask_a, image_b, mask_b, config)
    aligner = _LabelAligner(labels_a, mask_a, labels_b, mask_b, config.gamma, config.workers)
    angles = refinement_angles(
        grid_result.angle, grid_count, config.refinement_count, config.seed
    )
    refined = aligner.run(angles, "refined")
    if refined is not None and refined.mi > grid_result.mi:
        return refined
    return grid_result


def align_and_refine(image_a, mask_a, image_b, mask_b, config: AlignmentConfig) -> AlignmentResult:
    """Full pipeline: grid stage over the angle grid, then random refinement,
    sharing one quantization and one set of reference spectra."""
    labels_a, labels_b = _quantize_pair(image_a, mask_a, image_b, mask_b, config)
    aligner = _LabelAligner(labels_a, mask_a, labels_b, mask_b, config.gamma, config.workers)
    grid = aligner.run(make_angle_grid(config.angle_count), "grid")
    if grid is None:
        raise DegenerateInputError("no transform produced an overlapping configuration")
    if config.refinement_count <= 0:
        return grid
    angles = refinement_angles(grid.angle, config.angle_count, config.refinement_count, config.seed)
    refined = aligner.run(angles, "refined")
    if refined is not None and refined.mi > grid.mi:
        return refined
    return grid


def result_to_dict(result: AlignmentResult, config: AlignmentConfig) -> dict:
    t = result.transform
    return {
        "angle_rad": t.angle,
        "translation": [t.translation[0], t.translation[1]],
        "center": [t.center[0], t.center[1]],
        "mi_bits": result.mi,
        "displacement": [result.displacement[0], result.displacement[1]],
        "n": result.n_at_opt,
        "stage": result.stage,
        "k": config.k,
        "gamma": config.gamma,
        "angle_count": config.angle_count,
        "refinement_count": config.refinement_count,
        "seed": config.seed,
    }


def result_to_json(result: AlignmentResult, config: AlignmentConfig) -> str:
    return json.dumps(result_to_dict(result, config), indent=2)
