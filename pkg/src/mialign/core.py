"""Shared grid, mask, transform, and displacement-domain types.

Conventions used throughout the package:

* Arrays are indexed ``[row, col]`` (numpy order).
* Continuous geometry works in ``(x, y) = (col, row)`` coordinates with
  pixel centers at integer positions, so pixel ``[r, c]`` sits at
  ``(x=c, y=r)``.
* A displacement ``chi = (dr, dc)`` pairs reference pixel ``[r, c]`` with
  floating pixel ``[r + dr, c + dc]``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

#: Label value used for padding cells; never matches a real label in {0..k-1}.
PAD_LABEL = -1


class DegenerateInputError(ValueError):
    """Raised when inputs cannot carry any mutual information."""


def _freeze(arr: np.ndarray) -> np.ndarray:
    arr = np.ascontiguousarray(arr)
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True)
class LabelImage:
    """Rectangular grid of categorical labels in ``{0..k-1}``.

    Padding introduced by :func:`mialign.align.zero_pad` stores
    :data:`PAD_LABEL` (-1) in cells that belong to no category.
    """

    labels: np.ndarray  # int32, shape (H, W)
    k: int

    def __post_init__(self):
        labels = np.asarray(self.labels, dtype=np.int32)
        if labels.ndim != 2:
            raise ValueError(f"labels must be 2-D, got shape {labels.shape}")
        if self.k < 1:
            raise ValueError(f"k must be >= 1, got {self.k}")
        if labels.size:
            lo, hi = int(labels.min()), int(labels.max())
            if hi >= self.k or lo < PAD_LABEL:
                raise ValueError(
                    f"labels must lie in [{PAD_LABEL}, {self.k - 1}], "
                    f"found range [{lo}, {hi}]"
                )
        object.__setattr__(self, "labels", _freeze(labels))

    @property
    def shape(self) -> tuple[int, int]:
        return self.labels.shape


def as_mask(mask, shape=None) -> np.ndarray:
    """Validate and normalize a binary region-of-interest mask to bool."""
    m = np.asarray(mask)
    if m.ndim != 2:
        raise ValueError(f"mask must be 2-D, got shape {m.shape}")
    if shape is not None and m.shape != tuple(shape):
        raise ValueError(f"mask shape {m.shape} does not match image shape {tuple(shape)}")
    if m.dtype != bool:
        if not np.isin(m, (0, 1)).all():
            raise ValueError("mask values must be 0 or 1")
        m = m.astype(bool)
    return m


def as_weights(weights, shape=None) -> np.ndarray:
    """Validate a non-negative finite weight mask, returned as float64."""
    w = np.asarray(weights, dtype=np.float64)
    if w.ndim != 2:
        raise ValueError(f"weights must be 2-D, got shape {w.shape}")
    if shape is not None and w.shape != tuple(shape):
        raise ValueError(f"weights shape {w.shape} does not match image shape {tuple(shape)}")
    if not np.isfinite(w).all():
        raise ValueError("weights must be finite")
    if w.size and w.min() < 0:
        raise ValueError("weights must be non-negative")
    return w


def make_circular_mask(shape) -> np.ndarray:
    """Inscribed-circle mask: pixel centers within radius min(h, w)/2 of the
    grid center ((h-1)/2, (w-1)/2)."""
    h, w = int(shape[0]), int(shape[1])
    if h < 1 or w < 1:
        raise ValueError(f"invalid shape {shape}")
    radius = min(h, w) / 2.0
    rr = np.arange(h, dtype=np.float64)[:, None] - (h - 1) / 2.0
    cc = np.arange(w, dtype=np.float64)[None, :] - (w - 1) / 2.0
    return rr * rr + cc * cc <= radius * radius


@dataclass(frozen=True)
class DisplacementDomain:
    """Set of integer displacements mapped one-to-one onto a rectangular grid.

    Cell ``[i, j]`` holds displacement ``(origin[0] + i, origin[1] + j)``.
    """

    origin: tuple[int, int]
    shape: tuple[int, int]

    @classmethod
    def full_correlation(cls, ref_shape, flt_shape) -> "DisplacementDomain":
        """All displacements at which the floating grid intersects the
        reference grid, extent (ref + flt - 1) per axis."""
        hr, wr = ref_shape
        hf, wf = flt_shape
        return cls(origin=(-(hr - 1), -(wr - 1)), shape=(hr + hf - 1, wr + wf - 1))

    def index_of(self, chi) -> tuple[int, int]:
        i = chi[0] - self.origin[0]
        j = chi[1] - self.origin[1]
        if not (0 <= i < self.shape[0] and 0 <= j < self.shape[1]):
            raise ValueError(f"displacement {tuple(chi)} outside domain")
        return i, j

    def shift_at(self, index) -> tuple[int, int]:
        i, j = index
        if not (0 <= i < self.shape[0] and 0 <= j < self.shape[1]):
            raise ValueError(f"index {tuple(index)} outside extent {self.shape}")
        return self.origin[0] + i, self.origin[1] + j

    def contains(self, chi) -> bool:
        i = chi[0] - self.origin[0]
        j = chi[1] - self.origin[1]
        return 0 <= i < self.shape[0] and 0 <= j < self.shape[1]

    def row_shifts(self) -> np.ndarray:
        return self.origin[0] + np.arange(self.shape[0])

    def col_shifts(self) -> np.ndarray:
        return self.origin[1] + np.arange(self.shape[1])


@dataclass(frozen=True)
class RigidTransform:
    """Rotation about ``center`` followed by ``translation``, in (x, y).

    Point map: ``p -> R(angle) @ (p - center) + center + translation``.
    """

    angle: float = 0.0
    translation: tuple[float, float] = (0.0, 0.0)
    center: tuple[float, float] = (0.0, 0.0)

    def apply(self, points) -> np.ndarray:
        """Map an (n, 2) array of (x, y) points (a single pair also works)."""
        pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
        c, s = math.cos(self.angle), math.sin(self.angle)
        cx, cy = self.center
        tx, ty = self.translation
        dx = pts[:, 0] - cx
        dy = pts[:, 1] - cy
        out = np.empty_like(pts)
        out[:, 0] = c * dx - s * dy + cx + tx
        out[:, 1] = s * dx + c * dy + cy + ty
        if np.asarray(points).ndim == 1:
            return out[0]
        return out

    def inverse(self) -> "RigidTransform":
        """Transform undoing this one: ``q -> R(-angle) @ (q - center - t) + center``."""
        c, s = math.cos(self.angle), math.sin(self.angle)
        tx, ty = self.translation
        # Solve apply(p) = q for p, re-expressed about the same center.
        # inverse translation t' satisfies center + t' = inv(center + t).
        qx = -(c * tx + s * ty)
        qy = -(-s * tx + c * ty)
        return RigidTransform(angle=-self.angle, translation=(qx, qy), center=self.center)

    def recentered(self, center) -> "RigidTransform":
        """Same point map expressed with a different rotation pivot."""
        cx, cy = float(center[0]), float(center[1])
        px, py = self.apply((cx, cy))
        return RigidTransform(
            angle=self.angle, translation=(px - cx, py - cy), center=(cx, cy)
        )


def identity() -> RigidTransform:
    return RigidTransform()


def rotation(angle: float, center=(0.0, 0.0)) -> RigidTransform:
    return RigidTransform(angle=float(angle), center=(float(center[0]), float(center[1])))


def translation(t) -> RigidTransform:
    return RigidTransform(translation=(float(t[0]), float(t[1])))


def compose(outer: RigidTransform, inner: RigidTransform) -> RigidTransform:
    """Transform equal to applying ``inner`` first, then ``outer``."""
    angle = outer.angle + inner.angle
    origin_image = outer.apply(inner.apply((0.0, 0.0)))
    return RigidTransform(
        angle=angle, translation=(origin_image[0], origin_image[1]), center=(0.0, 0.0)
    )


def image_center(shape) -> tuple[float, float]:
    """Grid center in (x, y): ((w-1)/2, (h-1)/2)."""
    h, w = shape
    return ((w - 1) / 2.0, (h - 1) / 2.0)
