import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nmnet import geom, synth
from nmnet.errors import DegenerateEpipolar, DegenerateFrame, ProjectionAtInfinity
from nmnet.geom import AffineFrame, Point2

from conftest import I2, corr


class TestFrameMatrix:
    def test_identity(self):
        np.testing.assert_array_equal(geom.frame_matrix(AffineFrame(1, 0, 0, 1), Point2(0, 0)), np.eye(3))

    def test_scaled(self):
        m = geom.frame_matrix(AffineFrame(2, 0, 0, 2), Point2(1, 1))
        np.testing.assert_array_equal(m, [[2, 0, 1], [0, 2, 1], [0, 0, 1]])

    def test_general_block(self):
        m = geom.frame_matrix(AffineFrame(1, 2, 3, 4), Point2(5, 6))
        np.testing.assert_array_equal(m, [[1, 2, 5], [3, 4, 6], [0, 0, 1]])

    def test_degenerate(self):
        with pytest.raises(DegenerateFrame):
            geom.frame_matrix(AffineFrame(1, 2, 2, 4), Point2(0, 0))
        with pytest.raises(DegenerateFrame):
            geom.frame_matrix(AffineFrame(1e-5, 0, 0, 1e-5), Point2(0, 0))


class TestLocalTransform:
    def test_same_sides_identity(self):
        c = corr((0.3, -0.2), [[1, 2], [3, 4]], (0.3, -0.2), [[1, 2], [3, 4]])
        np.testing.assert_allclose(geom.local_transform(c), np.eye(3), atol=1e-12)

    def test_scale_and_shift(self, ci):
        np.testing.assert_allclose(geom.local_transform(ci), [[2, 0, 1], [0, 2, 1], [0, 0, 1]], atol=1e-15)

    def test_translation(self, cj_shift):
        np.testing.assert_allclose(geom.local_transform(cj_shift), [[1, 0, -1], [0, 1, 0], [0, 0, 1]], atol=1e-15)

    def test_vectorized_matches_scalar(self):
        rng = np.random.default_rng(0)
        rows = np.zeros((20, 12))
        rows[:, [0, 1, 6, 7]] = rng.uniform(-1, 1, (20, 4))
        rows[:, 2:6] = synth.random_frames(rng, 20).reshape(20, 4)
        rows[:, 8:12] = synth.random_frames(rng, 20).reshape(20, 4)
        hs = geom.local_transforms(rows)
        for row, h in zip(rows, hs):
            np.testing.assert_allclose(h, geom.local_transform(geom.Correspondence.from_row(row)), rtol=1e-10, atol=1e-12)

    def test_degenerate_propagates(self):
        with pytest.raises(DegenerateFrame):
            geom.local_transform(corr((0, 0), I2, (0, 0), np.zeros((2, 2))))


class TestProject:
    def test_identity(self):
        assert geom.project(np.eye(3), (3, -2)) == (3, -2)

    def test_dehomogenize(self):
        assert geom.project(np.diag([2.0, 4.0, 2.0]), (1, 1)) == (1, 2)

    def test_translation(self):
        h = np.array([[1, 0, -1], [0, 1, 0], [0, 0, 1]], float)
        assert geom.project(h, (0, 0)) == (-1, 0)

    def test_at_infinity(self):
        with pytest.raises(ProjectionAtInfinity):
            geom.project(np.array([[1, 0, 0], [0, 1, 0], [1, 0, 0]], float), (0, 5))


class TestReprojectionError:
    def test_self_zero(self, ci):
        assert geom.reprojection_error(ci, ci) == 0.0

    def test_consistent_pair(self, ci, cj_consistent):
        assert geom.reprojection_error(ci, cj_consistent) == pytest.approx(0.0, abs=1e-15)
        assert geom.reprojection_error(cj_consistent, ci) == pytest.approx(0.0, abs=1e-15)

    def test_hand_values(self, ci, cj_shift):
        # H_j k_i = (-1, 0), H_i k_i = (1, 1) -> sqrt(5); H_i k_j = (3, 1), H_j k_j = (0, 0) -> sqrt(10)
        assert geom.reprojection_error(ci, cj_shift) == pytest.approx(math.sqrt(5), rel=1e-14)
        assert geom.reprojection_error(cj_shift, ci) == pytest.approx(math.sqrt(10), rel=1e-14)

    def test_matrix_matches_pairwise(self):
        rng = np.random.default_rng(3)
        rows = np.zeros((7, 12))
        rows[:, [0, 1, 6, 7]] = rng.uniform(-1, 1, (7, 4))
        rows[:, 2:6] = synth.random_frames(rng, 7).reshape(7, 4)
        rows[:, 8:12] = synth.random_frames(rng, 7).reshape(7, 4)
        m = geom.reprojection_error_matrix(rows, chunk=3)
        cs = [geom.Correspondence.from_row(r) for r in rows]
        for i in range(7):
            assert m[i, i] == 0.0
            for j in range(7):
                assert m[i, j] == pytest.approx(geom.reprojection_error(cs[i], cs[j]), rel=1e-9, abs=1e-12)

    @settings(max_examples=50, deadline=None)
    @given(
        st.floats(-2, 2), st.floats(-2, 2), st.floats(0.3, 3), st.floats(-np.pi, np.pi), st.integers(0, 2**31)
    )
    def test_global_affine_is_consistent(self, bx, by, scale, angle, seed):
        rng = np.random.default_rng(seed)
        lin = scale * np.array([[np.cos(angle), -np.sin(angle)], [np.sin(angle), np.cos(angle)]])
        lin[0, 1] += 0.3
        n = 6
        kp = rng.uniform(-1, 1, (n, 2))
        frames = synth.random_frames(rng, n)
        rows = np.zeros((n, 12))
        rows[:, 0:2] = kp
        rows[:, 2:6] = frames.reshape(n, 4)
        rows[:, 6:8] = kp @ lin.T + (bx, by)
        rows[:, 8:12] = (lin @ frames).reshape(n, 4)
        assert np.max(geom.reprojection_error_matrix(rows)) < 1e-10


def _naive_symmetric_distance(e, c):
    x = [c.kp.x, c.kp.y, 1.0]
    xp = [c.kp_prime.x, c.kp_prime.y, 1.0]
    l = [sum(e[i][j] * x[j] for j in range(3)) for i in range(3)]
    lp = [sum(e[j][i] * xp[j] for j in range(3)) for i in range(3)]
    r = sum(xp[i] * l[i] for i in range(3))
    # squared point-to-line distances in both images
    return (r / math.hypot(l[0], l[1])) ** 2 + (r / math.hypot(lp[0], lp[1])) ** 2


class TestEpipolar:
    def test_noiseless_inliers_zero(self, noiseless_scene):
        s = noiseless_scene
        d = geom.symmetric_epipolar_distances(s.e_gt, s.corrs[s.labels == 1])
        assert np.all(d >= 0)
        assert d.max() < 1e-12

    def test_point_on_epipolar_line(self):
        e = geom.essential_from_pose(synth.rotation_from_rotvec([0.1, -0.2, 0.05]), np.array([1.0, 0.2, -0.3]))
        kp = np.array([0.1, 0.2, 1.0])
        line = e @ kp
        # pick kp' on the line a x + b y + c = 0
        xp = 0.3
        yp = -(line[0] * xp + line[2]) / line[1]
        c = corr(kp[:2], I2, (xp, yp), I2)
        assert geom.symmetric_epipolar_distance(e, c) < 1e-12

    def test_matches_independent_formula(self):
        rng = np.random.default_rng(5)
        for seed in range(20):
            scene = synth.generate(synth.GeneratorConfig(n_correspondences=20, seed=seed))
            row = rng.integers(len(scene))
            c = geom.Correspondence.from_row(scene.corrs[row])
            e = scene.e_gt.tolist()
            assert geom.symmetric_epipolar_distance(scene.e_gt, c) == pytest.approx(_naive_symmetric_distance(e, c), rel=1e-9)

    def test_degenerate(self):
        e = np.zeros((3, 3))
        e[2, 2] = 1.0
        with pytest.raises(DegenerateEpipolar):
            geom.symmetric_epipolar_distance(e, corr((0, 0), I2, (0, 0), I2))


class TestLabelSet:
    def test_noiseless_inliers(self, noiseless_scene):
        s = noiseless_scene
        assert np.all(geom.label_set(s.corrs[s.labels == 1], s.e_gt) == 1)

    def test_matches_generator(self, noiseless_scene):
        s = noiseless_scene
        np.testing.assert_array_equal(geom.label_set(s.corrs, s.e_gt, 1e-4), s.labels)

    def test_boundary_excluded(self, noiseless_scene):
        s = noiseless_scene
        d = geom.symmetric_epipolar_distances(s.e_gt, s.corrs)
        i = int(np.argmax(s.labels == 0))
        assert geom.label_set(s.corrs[i : i + 1], s.e_gt, threshold=float(d[i]))[0] == 0
        assert geom.label_set(s.corrs[i : i + 1], s.e_gt, threshold=float(np.nextafter(d[i], np.inf)))[0] == 1

    def test_monotone_in_threshold(self):
        s = synth.generate(synth.GeneratorConfig(n_correspondences=300, seed=4))
        prev = geom.label_set(s.corrs, s.e_gt, 1e-7)
        for t in (1e-6, 1e-5, 1e-4, 1e-3, 1e-2, 1e-1):
            cur = geom.label_set(s.corrs, s.e_gt, t)
            assert np.all(cur >= prev)
            prev = cur

    def test_threshold_positive(self, noiseless_scene):
        with pytest.raises(ValueError):
            geom.label_set(noiseless_scene.corrs, noiseless_scene.e_gt, 0.0)


def test_projected_essential_constraints():
    rng = np.random.default_rng(0)
    e = geom.project_to_essential(rng.normal(size=(3, 3)))
    s = np.linalg.svd(e, compute_uv=False)
    assert abs(np.linalg.det(e)) < 1e-12
    assert s[0] - s[1] < 1e-12
    assert np.linalg.norm(e) == pytest.approx(1.0)
