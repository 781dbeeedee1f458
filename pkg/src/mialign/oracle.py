"""Direct per-displacement histogram computation of the MI map.

For every displacement in isolation this scans the overlap region,
increments integer joint/marginal histogram bins, and evaluates the
entropies from relative frequencies.  It is the trusted slow baseline the
frequency-domain path is checked against, and deliberately shares none of
that code.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numba import njit

from .core import DisplacementDomain, LabelImage, as_mask
from .cmif import CMIFMap


@njit(cache=True)
def _direct_sweep(labels_a, in_a, labels_b, in_b, k_a, k_b, want_counts):
    ha, wa = labels_a.shape
    hb, wb = labels_b.shape
    er = ha + hb - 1
    ec = wa + wb - 1

    mi = np.zeros((er, ec), dtype=np.float64)
    n_map = np.zeros((er, ec), dtype=np.int64)
    if want_counts:
        joint_maps = np.zeros((k_a, k_b, er, ec), dtype=np.int64)
        marg_a_maps = np.zeros((k_a, er, ec), dtype=np.int64)
        marg_b_maps = np.zeros((k_b, er, ec), dtype=np.int64)
    else:
        joint_maps = np.zeros((1, 1, 1, 1), dtype=np.int64)
        marg_a_maps = np.zeros((1, 1, 1), dtype=np.int64)
        marg_b_maps = np.zeros((1, 1, 1), dtype=np.int64)

    hist = np.zeros((k_a, k_b), dtype=np.int64)
    hist_a = np.zeros(k_a, dtype=np.int64)
    hist_b = np.zeros(k_b, dtype=np.int64)

    for i in range(er):
        dr = i - (ha - 1)
        r0 = max(0, -dr)
        r1 = min(ha, hb - dr)
        if r1 <= r0:
            continue
        for j in range(ec):
            dc = j - (wa - 1)
            c0 = max(0, -dc)
            c1 = min(wa, wb - dc)
            if c1 <= c0:
                continue

            hist[:, :] = 0
            hist_a[:] = 0
            hist_b[:] = 0
            count = 0
            for r in range(r0, r1):
                rb = r + dr
                for c in range(c0, c1):
                    if in_a[r, c] and in_b[rb, c + dc]:
                        va = labels_a[r, c]
                        vb = labels_b[rb, c + dc]
                        hist[va, vb] += 1
                        hist_a[va] += 1
                        hist_b[vb] += 1
                        count += 1
            n_map[i, j] = count
            if count == 0:
                continue

            h_a = 0.0
            for a in range(k_a):
                if hist_a[a] > 0:
                    p = hist_a[a] / count
                    h_a -= p * np.log2(p)
            h_b = 0.0
            for b in range(k_b):
                if hist_b[b] > 0:
                    p = hist_b[b] / count
                    h_b -= p * np.log2(p)
            h_ab = 0.0
            for a in range(k_a):
                for b in range(k_b):
                    if hist[a, b] > 0:
                        p = hist[a, b] / count
                        h_ab -= p * np.log2(p)
            mi[i, j] = h_a + h_b - h_ab

            if want_counts:
                for a in range(k_a):
                    marg_a_maps[a, i, j] = hist_a[a]
                for b in range(k_b):
                    marg_b_maps[b, i, j] = hist_b[b]
                for a in range(k_a):
                    for b in range(k_b):
                        joint_maps[a, b, i, j] = hist[a, b]

    return mi, n_map, joint_maps, marg_a_maps, marg_b_maps


@dataclass(frozen=True)
class DirectResult:
    map: CMIFMap
    joint: np.ndarray | None
    marg_a: np.ndarray | None
    marg_b: np.ndarray | None


def direct_cmif_map(
    a: LabelImage, mask_a, b: LabelImage, mask_b, with_counts: bool = True
) -> DirectResult:
    """MI map (and, optionally, all count-map families) by per-displacement
    histogramming.  Slow; exists to be correct and measured against."""
    ma = as_mask(mask_a, a.shape)
    mb = as_mask(mask_b, b.shape)
    mi, n_map, joint, marg_a, marg_b = _direct_sweep(
        a.labels,
        ma.astype(np.uint8),
        b.labels,
        mb.astype(np.uint8),
        a.k,
        b.k,
        with_counts,
    )
    domain = DisplacementDomain.full_correlation(a.shape, b.shape)
    cmap = CMIFMap(mi=mi, n=n_map, valid=n_map > 0, domain=domain)
    if not with_counts:
        return DirectResult(map=cmap, joint=None, marg_a=None, marg_b=None)
    return DirectResult(map=cmap, joint=joint, marg_a=marg_a, marg_b=marg_b)


def scalar_mi(a: LabelImage, mask_a, b: LabelImage, mask_b) -> float:
    """MI at zero displacement, straight from the joint/marginal
    relative-frequency form:

        sum_ab p(a,b) * log2( p(a,b) / (p(a) p(b)) )

    This is an independent formulation of the entropy-difference form used
    everywhere else, kept for cross-checking.
    """
    ma = as_mask(mask_a, a.shape)
    mb = as_mask(mask_b, b.shape)
    h = min(a.shape[0], b.shape[0])
    w = min(a.shape[1], b.shape[1])
    both = ma[:h, :w] & mb[:h, :w]
    if not both.any():
        raise ValueError("empty overlap at zero displacement")
    va = a.labels[:h, :w][both]
    vb = b.labels[:h, :w][both]
    joint = np.zeros((a.k, b.k), dtype=np.int64)
    np.add.at(joint, (va, vb), 1)
    total = joint.sum()
    p_ab = joint / total
    p_a = p_ab.sum(axis=1)
    p_b = p_ab.sum(axis=0)
    denom = p_a[:, None] * p_b[None, :]
    nz = p_ab > 0
    return float((p_ab[nz] * np.log2(p_ab[nz] / denom[nz])).sum())
