import math

import numpy as np
import pytest

from mialign import (
    DisplacementDomain,
    LabelImage,
    RigidTransform,
    compose,
    identity,
    image_center,
    make_circular_mask,
    rotation,
    translation,
)


class TestCircularMask:
    def test_single_pixel_grid_is_set(self):
        assert make_circular_mask((1, 1)).tolist() == [[True]]

    def test_4x4_corners_unset(self):
        m = make_circular_mask((4, 4))
        for r, c in [(0, 0), (0, 3), (3, 0), (3, 3)]:
            assert not m[r, c]
        assert m[1, 1] and m[2, 2]

    def test_101_pixel_count_matches_circle_area(self):
        m = make_circular_mask((101, 101))
        # independent per-pixel check
        count = 0
        for r in range(101):
            for c in range(101):
                if (r - 50.0) ** 2 + (c - 50.0) ** 2 <= 50.5**2:
                    count += 1
        assert m.sum() == count
        area = math.pi * 50.5**2
        assert abs(m.sum() - area) <= 0.02 * area

    def test_rectangular_uses_min_side(self):
        m = make_circular_mask((6, 20))
        assert not m[0, 0] and not m[3, 0]
        assert m[3, 10]


class TestRigidTransform:
    def test_compose_identities(self):
        t = compose(identity(), identity())
        p = t.apply((3.0, -2.0))
        assert np.allclose(p, (3.0, -2.0), atol=1e-12)

    def test_compose_applies_inner_first(self):
        outer = rotation(math.pi / 2)
        inner = translation((1.0, 0.0))
        p = compose(outer, inner).apply((0.0, 0.0))
        assert np.allclose(p, (0.0, 1.0), atol=1e-12)

    def test_compose_evaluates_like_sequential_application(self, rng):
        for _ in range(50):
            a = RigidTransform(
                angle=rng.uniform(-3, 3),
                translation=tuple(rng.uniform(-5, 5, 2)),
                center=tuple(rng.uniform(-5, 5, 2)),
            )
            b = RigidTransform(
                angle=rng.uniform(-3, 3),
                translation=tuple(rng.uniform(-5, 5, 2)),
                center=tuple(rng.uniform(-5, 5, 2)),
            )
            pts = rng.uniform(-10, 10, (7, 2))
            assert np.allclose(compose(a, b).apply(pts), a.apply(b.apply(pts)), atol=1e-12)

    def test_identity_composition_is_noop(self, rng):
        for _ in range(20):
            t = RigidTransform(
                angle=rng.uniform(-3, 3),
                translation=tuple(rng.uniform(-5, 5, 2)),
                center=tuple(rng.uniform(-5, 5, 2)),
            )
            pts = rng.uniform(-20, 20, (5, 2))
            assert np.allclose(compose(t, identity()).apply(pts), t.apply(pts), atol=1e-12)
            assert np.allclose(compose(identity(), t).apply(pts), t.apply(pts), atol=1e-12)

    def test_inverse_round_trip(self, rng):
        for _ in range(20):
            t = RigidTransform(
                angle=rng.uniform(-3, 3),
                translation=tuple(rng.uniform(-5, 5, 2)),
                center=tuple(rng.uniform(-5, 5, 2)),
            )
            pts = rng.uniform(-20, 20, (5, 2))
            assert np.allclose(t.inverse().apply(t.apply(pts)), pts, atol=1e-10)

    def test_recentered_preserves_map(self, rng):
        t = RigidTransform(angle=0.7, translation=(2.0, -1.0), center=(3.0, 4.0))
        r = t.recentered((10.0, -10.0))
        pts = rng.uniform(-20, 20, (9, 2))
        assert np.allclose(t.apply(pts), r.apply(pts), atol=1e-10)
        assert r.center == (10.0, -10.0)


class TestDisplacementDomain:
    def test_full_correlation_extent(self):
        d = DisplacementDomain.full_correlation((4, 4), (4, 4))
        assert d.shape == (7, 7)
        assert d.origin == (-3, -3)

    def test_index_shift_bijection(self):
        d = DisplacementDomain.full_correlation((3, 5), (6, 2))
        for i in range(d.shape[0]):
            for j in range(d.shape[1]):
                chi = d.shift_at((i, j))
                assert d.index_of(chi) == (i, j)
                assert d.contains(chi)
        assert not d.contains((d.origin[0] - 1, 0))
        with pytest.raises(ValueError):
            d.index_of((99, 0))

    def test_row_col_shifts(self):
        d = DisplacementDomain.full_correlation((2, 2), (3, 3))
        assert d.row_shifts().tolist() == [-1, 0, 1, 2]
        assert d.col_shifts().tolist() == [-1, 0, 1, 2]


class TestLabelImage:
    def test_rejects_out_of_range(self):
        with pytest.raises(ValueError):
            LabelImage(labels=np.array([[0, 3]], dtype=np.int32), k=3)
        with pytest.raises(ValueError):
            LabelImage(labels=np.array([[-2, 0]], dtype=np.int32), k=3)

    def test_immutable(self):
        img = LabelImage(labels=np.zeros((2, 2), dtype=np.int32), k=1)
        with pytest.raises(ValueError):
            img.labels[0, 0] = 1


def test_mask_application_is_idempotent(rng):
    img = rng.random((9, 9))
    mask = rng.random((9, 9)) < 0.5
    once = np.where(mask, img, 0.0)
    twice = np.where(mask, once, 0.0)
    assert np.array_equal(once, twice)


def test_image_center():
    assert image_center((5, 7)) == (3.0, 2.0)
