"""Exact integer-count cross-correlation of non-negative grids via FFTs.

Correlation semantics: ``cc(f, g)[chi] = sum_x f(x) * g(x + chi)`` over the
full extent ``chi in [-(shape_f - 1), shape_g - 1]`` per axis.  Grids are
zero-padded to at least ``shape_f + shape_g - 1`` so circular wrap-around
never aliases into the reported extent.  All transforms run in double
precision; correlations of 0/1 grids are rounded back to exact integers and
a residual check guards against precision loss.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.fft as _fft


class NumericalHealthError(ArithmeticError):
    """Transform precision is insufficient to recover exact integer counts."""


class TransformStats:
    """Counts 2-D transforms executed, for amortization/benchmark reporting.

    ``forward_grids`` counts individual grids forward-transformed (batch
    elements count separately); ``inverse_calls`` counts inverse-transform
    invocations (one batched call counts once); ``inverse_grids`` counts
    batch elements.
    """

    def __init__(self):
        self.reset()

    def reset(self):
        self.forward_grids = 0
        self.inverse_calls = 0
        self.inverse_grids = 0

    @property
    def total_grids(self) -> int:
        return self.forward_grids + self.inverse_grids


#: Module-wide transform counter (single-threaded bookkeeping only).
stats = TransformStats()


def fast_len(n: int) -> int:
    """Smallest efficient transform length (a product of small primes) >= n."""
    return _fft.next_fast_len(int(n), real=True)


def padded_lengths(shape_f, shape_g) -> tuple[int, int]:
    """Smallest fast transform lengths >= shape_f + shape_g - 1 per axis."""
    return (
        fast_len(shape_f[0] + shape_g[0] - 1),
        fast_len(shape_f[1] + shape_g[1] - 1),
    )


@dataclass(frozen=True)
class SpectrumCache:
    """Forward transform of one zero-padded grid (or a stack of them).

    ``conjugated`` marks floating-side caches, stored conjugated so a
    correlation is a plain pointwise product with a reference-side cache.
    """

    spectra: np.ndarray  # complex128, (n, Lr, Lc//2 + 1)
    grid_shape: tuple[int, int]
    padded_shape: tuple[int, int]
    conjugated: bool
    batched: bool = False  # True when built from a stack (even of size 1)
    tag: str = ""


def spectrum(grids, padded_shape, conjugate: bool, tag: str = "", workers: int = 1) -> SpectrumCache:
    """Forward-transform a grid or stack of grids at the given padded extent.

    Floating-side grids pass ``conjugate=True`` (the spatial-reversal side of
    the correlation); reference-side grids pass ``False``.
    """
    arr = np.asarray(grids, dtype=np.float64)
    batched = arr.ndim == 3
    if arr.ndim == 2:
        arr = arr[None]
    n, h, w = arr.shape
    lr, lc = int(padded_shape[0]), int(padded_shape[1])
    if lr < h or lc < w:
        raise ValueError(f"padded extent {padded_shape} smaller than grid {arr.shape[-2:]}")
    spec = _fft.rfft2(arr, s=(lr, lc), axes=(-2, -1), workers=workers)
    if conjugate:
        np.conjugate(spec, out=spec)
    stats.forward_grids += n
    return SpectrumCache(
        spectra=spec, grid_shape=(h, w), padded_shape=(lr, lc),
        conjugated=conjugate, batched=batched, tag=tag,
    )


def inverse_products(ref: SpectrumCache, flt: SpectrumCache, workers: int = 1) -> np.ndarray:
    """Inverse transform of the pointwise product, in circular (torus) layout.

    Output cell ``m`` holds ``cc[(-m) mod L]`` per axis; one invocation may
    cover a whole batch.  Use :func:`extract_full` to reorder into the
    displacement extent, or index the torus directly.
    """
    if ref.conjugated or not flt.conjugated:
        raise ValueError("expected a plain reference-side and a conjugated floating-side cache")
    if ref.padded_shape != flt.padded_shape:
        raise ValueError(
            f"padded extents differ: {ref.padded_shape} vs {flt.padded_shape}"
        )
    prod = ref.spectra * flt.spectra
    out = _fft.irfft2(prod, s=ref.padded_shape, axes=(-2, -1), workers=workers)
    stats.inverse_calls += 1
    stats.inverse_grids += int(np.prod(out.shape[:-2], dtype=np.int64)) if out.ndim > 2 else 1
    return out


def extract_full(raw: np.ndarray, shape_f, shape_g) -> np.ndarray:
    """Reorder a torus-layout correlation into the full displacement extent.

    Cell ``[i, j]`` of the result holds the correlation at displacement
    ``(i - (shape_f[0] - 1), j - (shape_f[1] - 1))``.
    """
    hf, wf = shape_f
    hg, wg = shape_g
    er, ec = hf + hg - 1, wf + wg - 1
    lr, lc = raw.shape[-2], raw.shape[-1]
    if er > lr or ec > lc:
        raise ValueError("padded extent too small for the requested grids")
    ir = (hf - 1 - np.arange(er)) % lr
    ic = (wf - 1 - np.arange(ec)) % lc
    return raw[..., ir[:, None], ic[None, :]]


def correlate_cached(ref: SpectrumCache, flt: SpectrumCache, workers: int = 1) -> np.ndarray:
    """Correlation map(s) over the full extent from cached spectra.

    The result is 2-D when both caches hold a single grid, else the batch
    axis broadcast from the two caches leads.
    """
    raw = inverse_products(ref, flt, workers=workers)
    out = extract_full(raw, ref.grid_shape, flt.grid_shape)
    if not ref.batched and not flt.batched:
        return out[0]
    return out


def cross_correlate(f, g, workers: int = 1) -> np.ndarray:
    """``out[chi] = sum_x f(x) g(x + chi)`` over the full correlation extent.

    Row ``i`` / col ``j`` of the output correspond to displacement
    ``(i - (f.shape[0] - 1), j - (f.shape[1] - 1))``.
    """
    f = np.asarray(f, dtype=np.float64)
    g = np.asarray(g, dtype=np.float64)
    if f.ndim != 2 or g.ndim != 2:
        raise ValueError("expected 2-D grids")
    if f.size == 0 or g.size == 0:
        raise ValueError("empty grid")
    padded = padded_lengths(f.shape, g.shape)
    ref = spectrum(f, padded, conjugate=False, workers=workers)
    flt = spectrum(g, padded, conjugate=True, workers=workers)
    return correlate_cached(ref, flt, workers=workers)


# Residual above this threshold means the transforms can no longer certify
# exact integer counts for this problem size.
HEALTH_LIMIT = 0.25


def round_counts(raw: np.ndarray) -> np.ndarray:
    """Round a correlation of 0/1 grids to exact integer counts.

    Raises :class:`NumericalHealthError` when any cell sits further than
    0.25 from an integer; tiny negative results clamp to zero.
    """
    rounded = np.rint(raw)
    worst = float(np.abs(raw - rounded).max()) if raw.size else 0.0
    if worst >= HEALTH_LIMIT:
        raise NumericalHealthError(
            f"correlation residual {worst:.3g} >= {HEALTH_LIMIT}; "
            "transform precision insufficient for this image size"
        )
    return np.maximum(rounded, 0.0).astype(np.int64)
