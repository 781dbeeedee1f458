"""Mutual information between two label images at every integer displacement.

Histogram entries become cross-correlations of level sets: for labels ``a``
of the reference and ``b`` of the floating image, the joint count at
displacement ``chi`` is ``cc(levelset_a, levelset_b)[chi]``; the marginal
counts correlate a level set against the other image's mask, and the
overlap count ``N`` correlates the two masks.  Rounding those correlations
to integers makes every count exact, after which the per-displacement
entropies

    H_A = -sum_a (C_a/N) log2(C_a/N)        (and likewise H_B, H_AB)

give ``mi = H_A + H_B - H_AB`` in bits.  Cells with ``N == 0`` carry no
distribution and are flagged invalid rather than given a value.

The streaming path never materializes all ``k_A * k_B`` joint maps: each
correlation's entropy contribution folds into a running sum using the
identity ``H = log2(N) - (1/N) * sum c*log2(c)``, with ``c*log2(c)`` read
from a precomputed integer table.  Accumulation order is fixed (ascending
``a`` then ``b``) so results are reproducible bit for bit.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np
from numba import njit, prange

from . import xcorr
from .core import DisplacementDomain, LabelImage, as_mask, as_weights

__all__ = [
    "CMIFMap",
    "EntropyMaps",
    "CmifSearch",
    "cmif_map",
    "count_maps",
    "entropy_maps",
    "joint_count_maps",
    "marginal_count_maps",
    "overlap_map",
    "read_cmif_map",
    "swmi_map",
    "write_cmif_csv",
    "write_cmif_map",
]


@dataclass(frozen=True)
class CMIFMap:
    """Mutual information (bits) and overlap count per displacement.

    ``n`` is integer for masked computations and real for weighted ones;
    ``valid`` marks displacements whose overlap is non-empty.
    """

    mi: np.ndarray
    n: np.ndarray
    valid: np.ndarray
    domain: DisplacementDomain

    @property
    def shape(self) -> tuple[int, int]:
        return self.mi.shape


@dataclass(frozen=True)
class EntropyMaps:
    """Shifted marginal and joint entropies (bits) per displacement."""

    h_a: np.ndarray
    h_b: np.ndarray
    h_ab: np.ndarray
    valid: np.ndarray


# ---------------------------------------------------------------------------
# small helpers

def _mask_bbox(mask: np.ndarray):
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    if rows.size == 0:
        return None
    return (int(rows[0]), int(rows[-1]) + 1, int(cols[0]), int(cols[-1]) + 1)


def _level_stack(labels: np.ndarray, support: np.ndarray, k: int) -> np.ndarray:
    """Float stack [support, levelset_0, ..., levelset_{k-1}]."""
    stack = np.zeros((k + 1,) + labels.shape, dtype=np.float64)
    stack[0] = support
    for a in range(k):
        stack[a + 1] = np.where((labels == a) & (support > 0), 1.0, 0.0)
    return stack


def _weighted_stack(labels: np.ndarray, weights: np.ndarray, k: int) -> np.ndarray:
    stack = np.zeros((k + 1,) + labels.shape, dtype=np.float64)
    stack[0] = weights
    for a in range(k):
        stack[a + 1] = np.where(labels == a, weights, 0.0)
    return stack


def _nlogn_table(n_max: int) -> np.ndarray:
    """tab[c] = c * log2(c), with tab[0] = 0."""
    tab = np.zeros(max(int(n_max), 0) + 1, dtype=np.float64)
    if tab.shape[0] > 1:
        idx = np.arange(1, tab.shape[0], dtype=np.float64)
        tab[1:] = idx * np.log2(idx)
    return tab


@njit(cache=True, parallel=True)
def _accum_rounded(raw, tab, out):
    """out[i] += sum_b tab[rint(raw[b, i])]; returns the worst rounding residual."""
    nb, n = raw.shape
    top = tab.shape[0] - 1
    worst = 0.0
    for i in prange(n):
        acc = 0.0
        w = 0.0
        for b in range(nb):
            x = raw[b, i]
            r = np.rint(x)
            d = abs(x - r)
            if d > w:
                w = d
            c = int(r)
            if c < 0:
                c = 0
            elif c > top:
                c = top
            acc += tab[c]
        out[i] += acc
        worst = max(worst, w)
    return worst


@njit(cache=True, parallel=True)
def _accum_xlogx(raw, out):
    """out[i] += sum_b x*log2(x) for positive x (weighted counts, unrounded)."""
    nb, n = raw.shape
    for i in prange(n):
        acc = 0.0
        for b in range(nb):
            x = raw[b, i]
            if x > 0.0:
                acc += x * np.log2(x)
        out[i] += acc


# ---------------------------------------------------------------------------
# materialized count maps (reference surface; used by tests and entropy_maps)

def _validate_pair(a: LabelImage, mask_a, b: LabelImage, mask_b):
    ma = as_mask(mask_a, a.shape)
    mb = as_mask(mask_b, b.shape)
    return ma, mb


def overlap_map(mask_a, mask_b, workers: int = 1) -> tuple[np.ndarray, DisplacementDomain]:
    """N(chi): number of positions where both masks overlap under shift chi."""
    ma = as_mask(mask_a)
    mb = as_mask(mask_b)
    domain = DisplacementDomain.full_correlation(ma.shape, mb.shape)
    raw = xcorr.cross_correlate(ma.astype(np.float64), mb.astype(np.float64), workers=workers)
    return xcorr.round_counts(raw), domain


def marginal_count_maps(a: LabelImage, mask_a, b: LabelImage, mask_b, workers: int = 1):
    """Per-label marginal count maps: reference level sets against the
    floating mask, and the reference mask against floating level sets.

    Returns ``(marg_a, marg_b, domain)`` with shapes (k_A, ...) / (k_B, ...).
    """
    ma, mb = _validate_pair(a, mask_a, b, mask_b)
    domain = DisplacementDomain.full_correlation(a.shape, b.shape)
    padded = xcorr.padded_lengths(a.shape, b.shape)
    stack_a = _level_stack(a.labels, ma, a.k)
    stack_b = _level_stack(b.labels, mb, b.k)
    ref_mask = xcorr.spectrum(stack_a[0], padded, conjugate=False, workers=workers)
    ref_levels = xcorr.spectrum(stack_a[1:], padded, conjugate=False, workers=workers)
    flt_mask = xcorr.spectrum(stack_b[0], padded, conjugate=True, workers=workers)
    flt_levels = xcorr.spectrum(stack_b[1:], padded, conjugate=True, workers=workers)
    marg_a = xcorr.round_counts(xcorr.correlate_cached(ref_levels, flt_mask, workers=workers))
    marg_b = xcorr.round_counts(xcorr.correlate_cached(ref_mask, flt_levels, workers=workers))
    return marg_a, marg_b, domain


def _narrow(cache: xcorr.SpectrumCache, sl) -> xcorr.SpectrumCache:
    return xcorr.SpectrumCache(
        spectra=cache.spectra[sl],
        grid_shape=cache.grid_shape,
        padded_shape=cache.padded_shape,
        conjugated=cache.conjugated,
        batched=cache.batched,
        tag=cache.tag,
    )


def joint_count_maps(
    a: LabelImage, mask_a, b: LabelImage, mask_b, joint_chunk: int = 1, workers: int = 1
):
    """Joint count maps for every label pair, shape (k_A, k_B, extent...)."""
    ma, mb = _validate_pair(a, mask_a, b, mask_b)
    domain = DisplacementDomain.full_correlation(a.shape, b.shape)
    padded = xcorr.padded_lengths(a.shape, b.shape)
    stack_a = _level_stack(a.labels, ma, a.k)
    stack_b = _level_stack(b.labels, mb, b.k)
    ref_levels = xcorr.spectrum(stack_a[1:], padded, conjugate=False, workers=workers)
    flt_levels = xcorr.spectrum(stack_b[1:], padded, conjugate=True, workers=workers)
    joint = np.empty((a.k, b.k) + domain.shape, dtype=np.int64)
    for ia in range(a.k):
        ref_one = _narrow(ref_levels, slice(ia, ia + 1))
        for b0 in range(0, b.k, joint_chunk):
            b1 = min(b0 + joint_chunk, b.k)
            maps = xcorr.correlate_cached(ref_one, _narrow(flt_levels, slice(b0, b1)), workers=workers)
            joint[ia, b0:b1] = xcorr.round_counts(maps)
    return joint, domain


def count_maps(
    a: LabelImage, mask_a, b: LabelImage, mask_b, joint_chunk: int = 1, workers: int = 1
):
    """All count-map families from one shared set of forward transforms.

    Returns ``(joint, marg_a, marg_b, n, domain)``.  Forward work is
    ``k_A + k_B + 2`` grid transforms; inverse work is one invocation per
    joint chunk plus one per marginal family plus one for the overlap map.
    """
    ma, mb = _validate_pair(a, mask_a, b, mask_b)
    domain = DisplacementDomain.full_correlation(a.shape, b.shape)
    padded = xcorr.padded_lengths(a.shape, b.shape)
    stack_a = _level_stack(a.labels, ma, a.k)
    stack_b = _level_stack(b.labels, mb, b.k)
    ref_mask = xcorr.spectrum(stack_a[0], padded, conjugate=False, workers=workers)
    ref_levels = xcorr.spectrum(stack_a[1:], padded, conjugate=False, workers=workers)
    flt_mask = xcorr.spectrum(stack_b[0], padded, conjugate=True, workers=workers)
    flt_levels = xcorr.spectrum(stack_b[1:], padded, conjugate=True, workers=workers)

    n = xcorr.round_counts(xcorr.correlate_cached(ref_mask, flt_mask, workers=workers))
    marg_a = xcorr.round_counts(xcorr.correlate_cached(ref_levels, flt_mask, workers=workers))
    marg_b = xcorr.round_counts(xcorr.correlate_cached(ref_mask, flt_levels, workers=workers))
    joint = np.empty((a.k, b.k) + domain.shape, dtype=np.int64)
    for ia in range(a.k):
        ref_one = _narrow(ref_levels, slice(ia, ia + 1))
        for b0 in range(0, b.k, joint_chunk):
            b1 = min(b0 + joint_chunk, b.k)
            maps = xcorr.correlate_cached(ref_one, _narrow(flt_levels, slice(b0, b1)), workers=workers)
            joint[ia, b0:b1] = xcorr.round_counts(maps)
    return joint, marg_a, marg_b, n, domain


def entropy_maps(joint, marg_a, marg_b, n) -> EntropyMaps:
    """Shifted entropies from materialized count maps (0*log2(0) = 0)."""
    n = np.asarray(n)
    valid = n > 0
    safe_n = np.where(valid, n, 1).astype(np.float64)

    def neg_plogp(counts):
        p = counts / safe_n
        terms = np.where(p > 0, p * np.log2(np.where(p > 0, p, 1.0)), 0.0)
        return -terms.sum(axis=0)

    h_a = np.where(valid, neg_plogp(np.asarray(marg_a, dtype=np.float64)), 0.0)
    h_b = np.where(valid, neg_plogp(np.asarray(marg_b, dtype=np.float64)), 0.0)
    kab = np.asarray(joint, dtype=np.float64)
    h_ab = np.where(valid, neg_plogp(kab.reshape(-1, *kab.shape[2:])), 0.0)
    return EntropyMaps(h_a=h_a, h_b=h_b, h_ab=h_ab, valid=valid)


# ---------------------------------------------------------------------------
# streaming computation

@dataclass(frozen=True)
class _Geometry:
    """Bookkeeping between full input grids, mask-cropped grids, and the
    circular (torus) layout the transforms produce."""

    shape_f: tuple[int, int]
    shape_g: tuple[int, int]
    f0: tuple[int, int]
    g0: tuple[int, int]
    crop_f: tuple[int, int]
    crop_g: tuple[int, int]
    padded: tuple[int, int]

    @property
    def full_extent(self) -> tuple[int, int]:
        return (
            self.shape_f[0] + self.shape_g[0] - 1,
            self.shape_f[1] + self.shape_g[1] - 1,
        )

    @property
    def crop_extent(self) -> tuple[int, int]:
        return (
            self.crop_f[0] + self.crop_g[0] - 1,
            self.crop_f[1] + self.crop_g[1] - 1,
        )

    def crop_origin(self) -> tuple[int, int]:
        """Displacement (between cropped grids) at crop-extent cell (0, 0)."""
        return (-(self.crop_f[0] - 1), -(self.crop_f[1] - 1))

    def chi_full_from_crop(self, chi_crop_r, chi_crop_c):
        """Displacement between the full grids for a cropped-grid displacement."""
        return (chi_crop_r - self.f0[0] + self.g0[0], chi_crop_c - self.f0[1] + self.g0[1])

    def extract_crop(self, torus: np.ndarray) -> np.ndarray:
        """Reorder a torus-layout map onto the cropped displacement extent."""
        return xcorr.extract_full(torus, self.crop_f, self.crop_g)

    def embed_full(self, crop_arr: np.ndarray, fill) -> np.ndarray:
        """Place a cropped-extent map into the full-extent map; cells outside
        the cropped extent have empty overlap and take ``fill``."""
        er, ec = self.full_extent
        out = np.full((er, ec), fill, dtype=crop_arr.dtype)
        # cropped cell j holds chi_crop = j - (crop_f - 1); in full-extent
        # coordinates chi_full = chi_crop - f0 + g0 lives at index
        # i = chi_full + (shape_f - 1), so cropped cell 0 lands at:
        r_lo = (self.shape_f[0] - self.crop_f[0]) - self.f0[0] + self.g0[0]
        c_lo = (self.shape_f[1] - self.crop_f[1]) - self.f0[1] + self.g0[1]
        hr, wc = self.crop_extent
        out[r_lo : r_lo + hr, c_lo : c_lo + wc] = crop_arr
        return out


def _make_geometry(shape_f, shape_g, bbox_f, bbox_g) -> _Geometry:
    f0 = (bbox_f[0], bbox_f[2])
    g0 = (bbox_g[0], bbox_g[2])
    crop_f = (bbox_f[1] - bbox_f[0], bbox_f[3] - bbox_f[2])
    crop_g = (bbox_g[1] - bbox_g[0], bbox_g[3] - bbox_g[2])
    padded = xcorr.padded_lengths(crop_f, crop_g)
    return _Geometry(
        shape_f=tuple(shape_f),
        shape_g=tuple(shape_g),
        f0=f0,
        g0=g0,
        crop_f=crop_f,
        crop_g=crop_g,
        padded=padded,
    )


def _stream_sums(stack_f, stack_g, padded, *, joint_chunk, workers):
    """Entropy-contribution sums on the torus layout for masked (integer)
    counts.  Returns (n_torus, s_a, s_b, s_ab, tab)."""
    k_a = stack_f.shape[0] - 1
    k_b = stack_g.shape[0] - 1
    ref_mask = xcorr.spectrum(stack_f[0], padded, conjugate=False, tag="mask_a", workers=workers)
    ref_levels = xcorr.spectrum(stack_f[1:], padded, conjugate=False, tag="levels_a", workers=workers)
    flt_mask = xcorr.spectrum(stack_g[0], padded, conjugate=True, tag="mask_b", workers=workers)
    flt_levels = xcorr.spectrum(stack_g[1:], padded, conjugate=True, tag="levels_b", workers=workers)

    n_raw = xcorr.inverse_products(ref_mask, flt_mask, workers=workers)[0]
    n_torus = xcorr.round_counts(n_raw)
    worst = float(np.abs(n_raw - np.rint(n_raw)).max())
    tab = _nlogn_table(int(n_torus.max()))

    cells = padded[0] * padded[1]
    s_a = np.zeros(cells, dtype=np.float64)
    s_b = np.zeros(cells, dtype=np.float64)
    s_ab = np.zeros(cells, dtype=np.float64)

    raw = xcorr.inverse_products(ref_levels, flt_mask, workers=workers)
    worst = max(worst, _accum_rounded(raw.reshape(k_a, cells), tab, s_a))
    raw = xcorr.inverse_products(ref_mask, flt_levels, workers=workers)
    worst = max(worst, _accum_rounded(raw.reshape(k_b, cells), tab, s_b))
    for ia in range(k_a):
        ref_one = _narrow(ref_levels, slice(ia, ia + 1))
        for b0 in range(0, k_b, joint_chunk):
            b1 = min(b0 + joint_chunk, k_b)
            raw = xcorr.inverse_products(ref_one, _narrow(flt_levels, slice(b0, b1)), workers=workers)
            worst = max(worst, _accum_rounded(raw.reshape(b1 - b0, cells), tab, s_ab))
    if worst >= xcorr.HEALTH_LIMIT:
        raise xcorr.NumericalHealthError(
            f"correlation residual {worst:.3g} >= {xcorr.HEALTH_LIMIT}"
        )
    shape = (padded[0], padded[1])
    return n_torus, s_a.reshape(shape), s_b.reshape(shape), s_ab.reshape(shape), tab


def _stream_sums_weighted(stack_f, stack_g, padded, *, joint_chunk, workers):
    """Weighted variant: no rounding; sums accumulate x*log2(x) directly."""
    k_a = stack_f.shape[0] - 1
    k_b = stack_g.shape[0] - 1
    ref_mask = xcorr.spectrum(stack_f[0], padded, conjugate=False, workers=workers)
    ref_levels = xcorr.spectrum(stack_f[1:], padded, conjugate=False, workers=workers)
    flt_mask = xcorr.spectrum(stack_g[0], padded, conjugate=True, workers=workers)
    flt_levels = xcorr.spectrum(stack_g[1:], padded, conjugate=True, workers=workers)

    n_torus = xcorr.inverse_products(ref_mask, flt_mask, workers=workers)[0]
    cells = padded[0] * padded[1]
    s_a = np.zeros(cells, dtype=np.float64)
    s_b = np.zeros(cells, dtype=np.float64)
    s_ab = np.zeros(cells, dtype=np.float64)
    _accum_xlogx(
        xcorr.inverse_products(ref_levels, flt_mask, workers=workers).reshape(k_a, cells), s_a
    )
    _accum_xlogx(
        xcorr.inverse_products(ref_mask, flt_levels, workers=workers).reshape(k_b, cells), s_b
    )
    for ia in range(k_a):
        ref_one = _narrow(ref_levels, slice(ia, ia + 1))
        for b0 in range(0, k_b, joint_chunk):
            b1 = min(b0 + joint_chunk, k_b)
            raw = xcorr.inverse_products(ref_one, _narrow(flt_levels, slice(b0, b1)), workers=workers)
            _accum_xlogx(raw.reshape(b1 - b0, cells), s_ab)
    shape = (padded[0], padded[1])
    return n_torus, s_a.reshape(shape), s_b.reshape(shape), s_ab.reshape(shape)


def _mi_from_sums(n, s_a, s_b, s_ab, n_log_n):
    """mi = H_A + H_B - H_AB rewritten as (N log2 N + S_AB - S_A - S_B) / N."""
    valid = n > 0
    safe = np.where(valid, n, 1).astype(np.float64)
    mi = np.where(valid, (n_log_n + s_ab - s_a - s_b) / safe, 0.0)
    return mi, valid


def _all_invalid(shape_f, shape_g, real_n: bool) -> CMIFMap:
    domain = DisplacementDomain.full_correlation(shape_f, shape_g)
    n_dtype = np.float64 if real_n else np.int64
    return CMIFMap(
        mi=np.zeros(domain.shape),
        n=np.zeros(domain.shape, dtype=n_dtype),
        valid=np.zeros(domain.shape, dtype=bool),
        domain=domain,
    )


def cmif_map(
    a: LabelImage,
    mask_a,
    b: LabelImage,
    mask_b,
    joint_chunk: int | None = None,
    workers: int = 1,
) -> CMIFMap:
    """Mutual information between ``a`` and shifted ``b`` at every
    displacement of the full correlation extent.

    Counts are exact integers; the MI values agree with the direct
    per-displacement histogram method to floating-point accumulation error.
    """
    ma, mb = _validate_pair(a, mask_a, b, mask_b)
    bbox_f = _mask_bbox(ma)
    bbox_g = _mask_bbox(mb)
    if bbox_f is None or bbox_g is None:
        return _all_invalid(a.shape, b.shape, real_n=False)
    geom = _make_geometry(a.shape, b.shape, bbox_f, bbox_g)
    rf, cf = slice(bbox_f[0], bbox_f[1]), slice(bbox_f[2], bbox_f[3])
    rg, cg = slice(bbox_g[0], bbox_g[1]), slice(bbox_g[2], bbox_g[3])
    stack_f = _level_stack(a.labels[rf, cf], ma[rf, cf], a.k)
    stack_g = _level_stack(b.labels[rg, cg], mb[rg, cg], b.k)
    if joint_chunk is None:
        joint_chunk = b.k
    n_torus, s_a, s_b, s_ab, tab = _stream_sums(
        stack_f, stack_g, geom.padded, joint_chunk=joint_chunk, workers=workers
    )
    mi_t, valid_t = _mi_from_sums(n_torus, s_a, s_b, s_ab, tab[n_torus])
    mi = geom.embed_full(geom.extract_crop(mi_t), 0.0)
    n = geom.embed_full(geom.extract_crop(n_torus), 0)
    valid = geom.embed_full(geom.extract_crop(valid_t), False)
    return CMIFMap(mi=mi, n=n, valid=valid, domain=DisplacementDomain.full_correlation(a.shape, b.shape))


def swmi_map(
    a: LabelImage,
    weights_a,
    b: LabelImage,
    weights_b,
    joint_chunk: int | None = None,
    workers: int = 1,
) -> CMIFMap:
    """Spatially weighted MI map: binary masks generalize to non-negative
    per-pixel weights, with ``n(chi) = sum_x W_A(x) W_B(x + chi)``.

    Counts stay real-valued (no integer rounding); a displacement is valid
    when the weight supports overlap at all.
    """
    wa = as_weights(weights_a, a.shape)
    wb = as_weights(weights_b, b.shape)
    support_a = wa > 0
    support_b = wb > 0
    bbox_f = _mask_bbox(support_a)
    bbox_g = _mask_bbox(support_b)
    if bbox_f is None or bbox_g is None:
        return _all_invalid(a.shape, b.shape, real_n=True)
    geom = _make_geometry(a.shape, b.shape, bbox_f, bbox_g)
    rf, cf = slice(bbox_f[0], bbox_f[1]), slice(bbox_f[2], bbox_f[3])
    rg, cg = slice(bbox_g[0], bbox_g[1]), slice(bbox_g[2], bbox_g[3])
    stack_f = _weighted_stack(a.labels[rf, cf], wa[rf, cf], a.k)
    stack_g = _weighted_stack(b.labels[rg, cg], wb[rg, cg], b.k)
    if joint_chunk is None:
        joint_chunk = b.k
    n_torus, s_a, s_b, s_ab = _stream_sums_weighted(
        stack_f, stack_g, geom.padded, joint_chunk=joint_chunk, workers=workers
    )
    # validity from the exact (rounded) correlation of the weight supports
    sup_n = xcorr.round_counts(
        xcorr.cross_correlate(
            support_a[rf, cf].astype(np.float64), support_b[rg, cg].astype(np.float64), workers=workers
        )
    )
    valid_c = sup_n > 0
    n_c = geom.extract_crop(n_torus)
    n_c = np.where(valid_c, np.maximum(n_c, 0.0), 0.0)
    s = [geom.extract_crop(arr) for arr in (s_a, s_b, s_ab)]
    safe = np.where(valid_c, n_c, 1.0)
    with np.errstate(divide="ignore", invalid="ignore"):
        n_log_n = np.where(n_c > 0, n_c * np.log2(safe), 0.0)
    mi_c = np.where(valid_c, (n_log_n + s[2] - s[0] - s[1]) / safe, 0.0)
    mi = geom.embed_full(mi_c, 0.0)
    n = geom.embed_full(n_c, 0.0)
    valid = geom.embed_full(valid_c, False)
    return CMIFMap(mi=mi, n=n, valid=valid, domain=DisplacementDomain.full_correlation(a.shape, b.shape))


# ---------------------------------------------------------------------------
# repeated gated searches against a fixed reference (the alignment hot path)

class CmifSearch:
    """Finds the best-MI displacement against a fixed reference image for a
    stream of floating images (one per candidate transform).

    Reference-side spectra are computed once and reused.  For each floating
    image the overlap map is computed first at a safe (alias-free) extent;
    the expensive per-label correlations then run at the smallest transform
    size whose circular wrap-around provably cannot reach any displacement
    passing the overlap gate, which the overlap map itself certifies.
    """

    def __init__(self, a: LabelImage, mask_a, max_float_shape, workers: int = 1):
        ma = as_mask(mask_a, a.shape)
        bbox = _mask_bbox(ma)
        if bbox is None:
            raise ValueError("reference mask is empty")
        self.shape_f = a.shape
        self.bbox_f = bbox
        self.k_a = a.k
        self.workers = workers
        rf, cf = slice(bbox[0], bbox[1]), slice(bbox[2], bbox[3])
        self._stack_f = _level_stack(a.labels[rf, cf], ma[rf, cf], a.k)
        self.crop_f = self._stack_f.shape[1:]
        self.max_float_shape = tuple(max_float_shape)
        self._safe_padded = xcorr.padded_lengths(self.crop_f, self.max_float_shape)
        self._ref_mask_safe = xcorr.spectrum(
            self._stack_f[0], self._safe_padded, conjugate=False, workers=workers
        )
        self._ref_cache: dict[tuple[int, int], tuple] = {}

    def _ref_at(self, padded):
        cached = self._ref_cache.get(padded)
        if cached is None:
            cached = (
                xcorr.spectrum(self._stack_f[0], padded, conjugate=False, workers=self.workers),
                xcorr.spectrum(self._stack_f[1:], padded, conjugate=False, workers=self.workers),
            )
            self._ref_cache[padded] = cached
        return cached

    def _reduced_padded(self, n_ext, gated_rows, gated_cols, crop_g):
        """Smallest per-axis transform lengths such that no displacement with
        non-zero overlap can alias onto a gated displacement."""
        supp_rows = np.flatnonzero(n_ext.any(axis=1))
        supp_cols = np.flatnonzero(n_ext.any(axis=0))
        need_r = max(
            gated_rows.max() - supp_rows.min(),
            supp_rows.max() - gated_rows.min(),
        ) + 1
        need_c = max(
            gated_cols.max() - supp_cols.min(),
            supp_cols.max() - gated_cols.min(),
        ) + 1
        lr = xcorr.fast_len(max(need_r, self.crop_f[0], crop_g[0]))
        lc = xcorr.fast_len(max(need_c, self.crop_f[1], crop_g[1]))
        return lr, lc

    @staticmethod
    def _alias_free(n_ext, rows, cols, padded) -> bool:
        """Check no gated cell has a non-zero-overlap alias at +-L per axis."""
        er, ec = n_ext.shape
        for dr in (-padded[0], 0, padded[0]):
            for dc in (-padded[1], 0, padded[1]):
                if dr == 0 and dc == 0:
                    continue
                rr = rows + dr
                cc = cols + dc
                ok = (rr >= 0) & (rr < er) & (cc >= 0) & (cc < ec)
                if ok.any() and (n_ext[rr[ok], cc[ok]] > 0).any():
                    return False
        return True

    def best_displacement(self, b: LabelImage, mask_b, gamma: float):
        """Gated argmax of the MI map for one floating image.

        Returns ``(chi, mi, n)`` with ``chi`` the displacement between the
        full (uncropped) grids, or None when the masks never overlap.
        """
        mb = as_mask(mask_b, b.shape)
        bbox_g = _mask_bbox(mb)
        if bbox_g is None:
            return None
        geom = _make_geometry(self.shape_f, b.shape, self.bbox_f, bbox_g)
        if geom.crop_g[0] > self.max_float_shape[0] or geom.crop_g[1] > self.max_float_shape[1]:
            raise ValueError(
                f"floating support {geom.crop_g} exceeds declared bound {self.max_float_shape}"
            )
        rg, cg = slice(bbox_g[0], bbox_g[1]), slice(bbox_g[2], bbox_g[3])
        labels_g = b.labels[rg, cg]
        support_g = mb[rg, cg]

        # exact overlap map at the safe extent
        flt_mask_safe = xcorr.spectrum(
            support_g.astype(np.float64), self._safe_padded, conjugate=True, workers=self.workers
        )
        n_raw = xcorr.inverse_products(self._ref_mask_safe, flt_mask_safe, workers=self.workers)[0]
        n_ext = xcorr.round_counts(xcorr.extract_full(n_raw, self.crop_f, geom.crop_g))
        n_max = int(n_ext.max())
        if n_max == 0:
            return None
        gate = gamma * n_max
        rows, cols = np.nonzero((n_ext >= gate) & (n_ext > 0))

        padded = self._reduced_padded(n_ext, rows, cols, geom.crop_g)
        if padded[0] * padded[1] >= geom.padded[0] * geom.padded[1] or not self._alias_free(
            n_ext, rows, cols, padded
        ):
            padded = geom.padded

        ref_mask, ref_levels = self._ref_at(padded)
        stack_g = _level_stack(labels_g, support_g, b.k)
        flt_mask = xcorr.spectrum(stack_g[0], padded, conjugate=True, workers=self.workers)
        flt_levels = xcorr.spectrum(stack_g[1:], padded, conjugate=True, workers=self.workers)

        tab = _nlogn_table(n_max)
        cells = padded[0] * padded[1]
        s_a = np.zeros(cells, dtype=np.float64)
        s_b = np.zeros(cells, dtype=np.float64)
        s_ab = np.zeros(cells, dtype=np.float64)
        worst = _accum_rounded(
            xcorr.inverse_products(ref_levels, flt_mask, workers=self.workers).reshape(self.k_a, cells),
            tab,
            s_a,
        )
        worst = max(
            worst,
            _accum_rounded(
                xcorr.inverse_products(ref_mask, flt_levels, workers=self.workers).reshape(b.k, cells),
                tab,
                s_b,
            ),
        )
        for ia in range(self.k_a):
            ref_one = _narrow(ref_levels, slice(ia, ia + 1))
            raw = xcorr.inverse_products(ref_one, flt_levels, workers=self.workers)
            worst = max(worst, _accum_rounded(raw.reshape(b.k, cells), tab, s_ab))
        if worst >= xcorr.HEALTH_LIMIT:
            raise xcorr.NumericalHealthError(
                f"correlation residual {worst:.3g} >= {xcorr.HEALTH_LIMIT}"
            )

        # gather the gated cells from the torus layout
        origin = geom.crop_origin()
        chi_r = rows + origin[0]
        chi_c = cols + origin[1]
        tr = (-chi_r) % padded[0]
        tc = (-chi_c) % padded[1]
        flat = tr * padded[1] + tc
        n_g = n_ext[rows, cols]
        mi_g = (tab[n_g] + s_ab[flat] - s_a[flat] - s_b[flat]) / n_g

        # argmax: larger mi, then larger n, then lexicographically smallest chi
        order = np.lexsort((np.arange(mi_g.size), -n_g, -mi_g))[0]
        chi_full = geom.chi_full_from_crop(int(chi_r[order]), int(chi_c[order]))
        return chi_full, float(mi_g[order]), int(n_g[order])


# ---------------------------------------------------------------------------
# serialization

_MAGIC = b"CMIF"
_VERSION = 1


def write_cmif_map(cmap: CMIFMap, path) -> None:
    """Little-endian binary dump: magic, version, extent, origin, then the
    MI (float64), overlap (uint32), and validity (uint8) planes."""
    n = np.asarray(cmap.n)
    if not np.issubdtype(n.dtype, np.integer):
        if not np.array_equal(n, np.rint(n)):
            raise ValueError("binary format stores integer overlap counts only")
    n32 = n.astype(np.uint32)
    h, w = cmap.shape
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<IIIii", _VERSION, h, w, cmap.domain.origin[0], cmap.domain.origin[1]))
        fh.write(np.ascontiguousarray(cmap.mi, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(n32, dtype="<u4").tobytes())
        fh.write(np.ascontiguousarray(cmap.valid, dtype="u1").tobytes())


def read_cmif_map(path) -> CMIFMap:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != _MAGIC:
            raise ValueError(f"not a CMIF map file (magic {magic!r})")
        version, h, w, orow, ocol = struct.unpack("<IIIii", fh.read(20))
        if version != _VERSION:
            raise ValueError(f"unsupported CMIF map version {version}")
        mi = np.frombuffer(fh.read(8 * h * w), dtype="<f8").reshape(h, w).copy()
        n = np.frombuffer(fh.read(4 * h * w), dtype="<u4").reshape(h, w).astype(np.int64)
        valid = np.frombuffer(fh.read(h * w), dtype="u1").reshape(h, w).astype(bool)
    return CMIFMap(mi=mi, n=n, valid=valid, domain=DisplacementDomain(origin=(orow, ocol), shape=(h, w)))


def write_cmif_csv(cmap: CMIFMap, path) -> None:
    rows = cmap.domain.row_shifts()
    cols = cmap.domain.col_shifts()
    with open(path, "w") as fh:
        fh.write("chi_row,chi_col,mi,n,valid\n")
        for i, dr in enumerate(rows):
            for j, dc in enumerate(cols):
                fh.write(
                    f"{dr},{dc},{cmap.mi[i, j]!r},{cmap.n[i, j]},{int(cmap.valid[i, j])}\n"
                )
