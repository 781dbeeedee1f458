"""Synthetic image pairs with known rigid ground truth, plus the trial
runner behind ``mialign eval``.

A trial builds a smooth random reference field, resamples it under a random
rigid transform to make the floating image, pushes the floating intensities
through a modality simulation (nonlinear remap, inversion, or a synthetic
multi-channel mix) plus salt noise, runs the full alignment pipeline, and
scores the recovered transform by mean corner error (success when below 2%
of the image width).
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import gaussian_filter, map_coordinates

from .align import AlignmentConfig, align_and_refine, corner_error
from .core import RigidTransform, image_center, make_circular_mask

MODALITIES = ("identity", "gamma-remap", "inversion", "channel-mix")

SUCCESS_FRACTION = 0.02  # of image width


@dataclass(frozen=True)
class TrialSpec:
    size: int = 256
    seed: int = 0
    modality: str = "gamma-remap"
    noise: float = 0.05
    angle_range: float = math.pi  # ground-truth angle drawn from +-range
    max_shift: float = 0.1  # fraction of width
    k: int = 16
    angle_count: int = 100
    refinement_count: int = 32
    gamma: float = 0.5
    batch_size: int = 100
    max_iter: int = 100


def smooth_field(shape, seed: int, sigma: float = 6.0) -> np.ndarray:
    """Band-limited random field in [0, 1] with enough structure to quantize."""
    rng = np.random.default_rng(seed)
    field = gaussian_filter(rng.standard_normal(shape), sigma)
    lo, hi = field.min(), field.max()
    return (field - lo) / (hi - lo)


def apply_modality(field: np.ndarray, modality: str) -> np.ndarray:
    """Simulated change of imaging modality applied to intensities in [0, 1]."""
    if modality == "identity":
        return field
    if modality == "gamma-remap":
        return field**0.4
    if modality == "inversion":
        return 1.0 - field
    if modality == "channel-mix":
        return np.stack(
            [np.sqrt(field), (1.0 - field) ** 2, np.sin(math.pi * field)], axis=-1
        )
    raise ValueError(f"unknown modality {modality!r}; choose from {MODALITIES}")


def random_rigid(shape, rng: np.random.Generator, angle_range: float, max_shift: float) -> RigidTransform:
    h, w = shape
    angle = rng.uniform(-angle_range, angle_range)
    tx = rng.uniform(-max_shift, max_shift) * w
    ty = rng.uniform(-max_shift, max_shift) * h
    return RigidTransform(angle=angle, translation=(tx, ty), center=image_center(shape))


def resample_under(field: np.ndarray, transform: RigidTransform, out_shape):
    """Sample ``field`` at ``transform`` of each output pixel (bilinear);
    returns the values and the in-bounds mask.  The transform therefore maps
    output (floating) coordinates into field (reference) coordinates."""
    h, w = out_shape
    xs = np.tile(np.arange(w, dtype=np.float64), h)
    ys = np.repeat(np.arange(h, dtype=np.float64), w)
    src = transform.apply(np.column_stack((xs, ys)))
    sx, sy = src[:, 0], src[:, 1]
    inside = (sx >= 0) & (sx <= field.shape[1] - 1) & (sy >= 0) & (sy <= field.shape[0] - 1)
    vals = map_coordinates(field, [sy, sx], order=1, mode="constant", cval=0.0)
    return vals.reshape(h, w), inside.reshape(h, w)


def make_pair(spec: TrialSpec):
    """Reference image, floating image, masks, and the ground-truth transform
    (floating coordinates -> reference coordinates)."""
    size = spec.size
    rng = np.random.default_rng(spec.seed)
    image_a = smooth_field((size, size), seed=spec.seed, sigma=max(3.0, size / 42.0))
    t_true = random_rigid((size, size), rng, spec.angle_range, spec.max_shift)
    raw_b, inside = resample_under(image_a, t_true, (size, size))
    image_b = apply_modality(raw_b, spec.modality)
    if spec.noise > 0:
        hits = rng.random((size, size)) < spec.noise
        noise_vals = rng.uniform(0.0, 1.0, size=int(hits.sum()))
        if image_b.ndim == 3:
            image_b = image_b.copy()
            image_b[hits] = noise_vals[:, None]
        else:
            image_b = image_b.copy()
            image_b[hits] = noise_vals
    circle = make_circular_mask((size, size))
    mask_a = circle
    mask_b = circle & inside
    return image_a, mask_a, image_b, mask_b, t_true


def run_trial(spec: TrialSpec, workers: int = 1) -> dict:
    """One full synthetic alignment trial; returns an audit record."""
    image_a, mask_a, image_b, mask_b, t_true = make_pair(spec)
    config = AlignmentConfig(
        k=spec.k,
        gamma=spec.gamma,
        angle_count=spec.angle_count,
        refinement_count=spec.refinement_count,
        seed=spec.seed,
        batch_size=spec.batch_size,
        max_iter=spec.max_iter,
        workers=workers,
    )
    t0 = time.perf_counter()
    result = align_and_refine(image_a, mask_a, image_b, mask_b, config)
    elapsed = time.perf_counter() - t0
    err = corner_error(t_true, result.transform, (spec.size, spec.size))
    return {
        "seed": spec.seed,
        "size": spec.size,
        "modality": spec.modality,
        "angle_true": t_true.angle,
        "translation_true": list(t_true.translation),
        "angle_est": result.transform.angle,
        "translation_est": list(result.transform.translation),
        "displacement": list(result.displacement),
        "mi": result.mi,
        "stage": result.stage,
        "corner_error": err,
        "success": bool(err < SUCCESS_FRACTION * spec.size),
        "wall_time": elapsed,
    }


def _run_trial_worker(args):
    spec_fields, workers = args
    return run_trial(TrialSpec(**spec_fields), workers=workers)


def run_trials(specs, processes: int = 1, workers_per_trial: int = 1):
    """Run trials, optionally across processes; order follows the input.

    Workers are spawned, not forked: the accumulation kernels use OpenMP
    threading, and forking an OpenMP process is unsafe.
    """
    if processes <= 1:
        return [run_trial(s, workers=workers_per_trial) for s in specs]
    import multiprocessing as mp
    from concurrent.futures import ProcessPoolExecutor

    payload = [(s.__dict__, workers_per_trial) for s in specs]
    with ProcessPoolExecutor(
        max_workers=processes, mp_context=mp.get_context("spawn")
    ) as pool:
        return list(pool.map(_run_trial_worker, payload))


def quantile_labels(field: np.ndarray, k: int):
    """Equal-occupancy binning into k labels (fast deterministic inputs for
    benchmarking; the alignment pipeline itself quantizes with k-means)."""
    qs = np.quantile(field, np.linspace(0.0, 1.0, k + 1)[1:-1])
    return np.digitize(field, qs).astype(np.int32)
