from __future__ import annotations

import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from msad.core import DataError
from msad.registration import (
    RigidTransform,
    best_rigid_transform,
    icp_align,
    load_transform,
    merge_scans,
    save_transform,
)


def random_transform(rng, max_deg=180.0, max_shift=10.0):
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    angle = np.radians(rng.uniform(0, max_deg))
    r = Rotation.from_rotvec(axis * angle).as_matrix()
    return RigidTransform(r, rng.uniform(-max_shift, max_shift, size=3))


def test_kabsch_identity_and_exact_recovery(rng):
    src = rng.normal(size=(40, 3))
    t = best_rigid_transform(src, src)
    np.testing.assert_allclose(t.rotation, np.eye(3), atol=1e-12)
    np.testing.assert_allclose(t.translation, 0, atol=1e-12)
    for _ in range(20):
        truth = random_transform(rng)
        got = best_rigid_transform(src, truth.apply(src))
        np.testing.assert_allclose(got.rotation, truth.rotation, atol=1e-9)
        np.testing.assert_allclose(got.translation, truth.translation, atol=1e-9)
        assert np.max(np.abs(got.apply(src) - truth.apply(src))) <= 1e-9


def test_kabsch_never_returns_a_reflection(rng):
    src = rng.normal(size=(30, 3))
    mirrored = src * np.array([1.0, 1.0, -1.0])
    t = best_rigid_transform(src, mirrored)
    assert np.linalg.det(t.rotation) == pytest.approx(1.0)


def test_kabsch_degenerate():
    with pytest.raises(ValueError):
        best_rigid_transform(np.zeros((2, 3)), np.zeros((2, 3)))
    line = np.array([[0.0, 0, 0], [1, 0, 0], [2, 0, 0], [3, 0, 0]])
    with pytest.raises(ValueError, match="collinear"):
        best_rigid_transform(line, line)


def test_icp_identical_clouds(rng):
    p = rng.normal(size=(100, 3))
    res = icp_align(p, p)
    assert res.rmse == 0 and res.iterations == 1 and res.converged
    np.testing.assert_array_equal(res.transform.rotation, np.eye(3))


def test_icp_recovers_small_perturbation(rng):
    p = rng.uniform(-1, 1, size=(500, 3)) * [3, 2, 1]
    diam = np.linalg.norm(p.max(0) - p.min(0))
    truth = random_transform(rng, 15, 0.05 * diam / np.sqrt(3))
    res = icp_align(truth.apply(p), p)
    assert res.rmse <= 1e-6 * diam
    assert np.all(np.diff(res.rmse_trace) <= 0)
    np.testing.assert_allclose(res.transform.compose(truth).rotation, np.eye(3), atol=1e-6)


def test_icp_far_apart_clouds_report_non_convergence(rng):
    a = rng.normal(size=(200, 3))
    b = rng.normal(size=(150, 3)) * [2, 1, 0.5] + 1000.0
    res = icp_align(a, b, max_iter=4)
    assert not res.converged and res.iterations == 4
    assert np.all(np.diff(res.rmse_trace) <= 0)


def test_merge_scans(rng):
    a = rng.normal(size=(50, 3))
    np.testing.assert_array_equal(merge_scans(a, np.zeros((0, 3)), RigidTransform()), a)
    np.testing.assert_array_equal(merge_scans(a, a, RigidTransform(), 1e-3), a)


def test_merge_half_spheres_related_by_flip(rng):
    d = rng.normal(size=(2000, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    upper = d[d[:, 2] > 0.05]
    lower = d[d[:, 2] < -0.05]
    flip = RigidTransform(np.diag([1.0, -1.0, -1.0]))
    # second scan is the lower half seen after flipping the object
    scan_b = flip.inverse().apply(lower)
    merged = merge_scans(upper, scan_b, flip)
    assert len(merged) <= len(upper) + len(scan_b)
    assert merged[:, 2].max() > 0.9 and merged[:, 2].min() < -0.9


def test_transform_file_round_trip(tmp_path, rng):
    t = random_transform(rng)
    save_transform(t, tmp_path / "t.txt")
    assert len((tmp_path / "t.txt").read_text().split()) == 12
    back = load_transform(tmp_path / "t.txt")
    np.testing.assert_allclose(back.rotation, t.rotation, atol=1e-15)
    np.testing.assert_array_equal(back.translation, t.translation)
    (tmp_path / "bad.txt").write_text("1 2 3\n")
    with pytest.raises(DataError):
        load_transform(tmp_path / "bad.txt")


def test_transform_algebra(rng):
    a, b = random_transform(rng), random_transform(rng)
    p = rng.normal(size=(10, 3))
    np.testing.assert_allclose(a.compose(b).apply(p), a.apply(b.apply(p)), atol=1e-12)
    np.testing.assert_allclose(a.inverse().apply(a.apply(p)), p, atol=1e-12)
    with pytest.raises(ValueError):
        RigidTransform(np.diag([1.0, 1.0, -1.0]))
