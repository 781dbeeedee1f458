"""Shared fixtures and independent brute-force oracles.

The oracles here evaluate the defining formulas directly (nested loops over
displacements, numpy window arithmetic) and share no code with the
frequency-domain implementation they check.
"""

import numpy as np
import pytest

from mialign import LabelImage


def brute_cc(f, g):
    """Literal sliding inner product over the full displacement extent."""
    f = np.asarray(f, dtype=np.float64)
    g = np.asarray(g, dtype=np.float64)
    hf, wf = f.shape
    hg, wg = g.shape
    out = np.zeros((hf + hg - 1, wf + wg - 1))
    for i in range(out.shape[0]):
        dr = i - (hf - 1)
        r0, r1 = max(0, -dr), min(hf, hg - dr)
        if r1 <= r0:
            continue
        for j in range(out.shape[1]):
            dc = j - (wf - 1)
            c0, c1 = max(0, -dc), min(wf, wg - dc)
            if c1 <= c0:
                continue
            out[i, j] = (f[r0:r1, c0:c1] * g[r0 + dr : r1 + dr, c0 + dc : c1 + dc]).sum()
    return out


def brute_weighted_mi_map(labels_a, wa, labels_b, wb, k_a, k_b):
    """Per-displacement weighted-histogram MI (and weighted overlap mass)."""
    ha, wa_ = labels_a.shape
    hb, wb_ = labels_b.shape
    er, ec = ha + hb - 1, wa_ + wb_ - 1
    mi = np.zeros((er, ec))
    n = np.zeros((er, ec))
    for i in range(er):
        dr = i - (ha - 1)
        r0, r1 = max(0, -dr), min(ha, hb - dr)
        if r1 <= r0:
            continue
        for j in range(ec):
            dc = j - (wa_ - 1)
            c0, c1 = max(0, -dc), min(wa_, wb_ - dc)
            if c1 <= c0:
                continue
            w = wa[r0:r1, c0:c1] * wb[r0 + dr : r1 + dr, c0 + dc : c1 + dc]
            la = labels_a[r0:r1, c0:c1]
            lb = labels_b[r0 + dr : r1 + dr, c0 + dc : c1 + dc]
            joint = np.zeros((k_a, k_b))
            np.add.at(joint, (la.ravel(), lb.ravel()), w.ravel())
            total = joint.sum()
            n[i, j] = total
            if total <= 0:
                continue
            p = joint / total
            pa = p.sum(axis=1)
            pb = p.sum(axis=0)

            def ent(q):
                q = q[q > 0]
                return -(q * np.log2(q)).sum()

            mi[i, j] = ent(pa) + ent(pb) - ent(p.ravel())
    return mi, n


def random_label_image(rng, shape, k) -> LabelImage:
    return LabelImage(labels=rng.integers(0, k, shape).astype(np.int32), k=k)


def random_mask(rng, shape, density=0.8, ensure_nonempty=True):
    m = rng.random(shape) < density
    if ensure_nonempty and not m.any():
        m[tuple(rng.integers(0, s) for s in shape)] = True
    return m


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
