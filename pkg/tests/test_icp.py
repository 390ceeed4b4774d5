import math

import numpy as np
import pytest

from avi.geometry import (
    RigidTransform,
    VoxelGrid,
    apply_transform,
    quat_to_matrix,
    rotation_about_axis,
    rotation_angle,
)
from avi.icp import (
    IcpConfig,
    RegistrationError,
    brute_force_correspondences,
    icp_align,
    kabsch,
    nearest_correspondences,
    object_delta,
)
from avi.locquant import QuantConfig, object_grid, quantize_location
from avi.segmentation import ObjectSegment
from avi.shapes import sample_surface
from avi.vqtok import decode_grid, encode_grid


def random_rotation(rng, max_angle=math.pi):
    axis = rng.normal(size=3)
    return rotation_about_axis(axis, rng.uniform(0, max_angle))


def asymmetric_object(rng, n=500):
    """Points in an anisotropic blob with a protruding arm: no rigid self-symmetry."""
    body = rng.normal(size=(n - n // 5, 3)) * [0.30, 0.18, 0.10]
    arm = np.c_[rng.uniform(0.2, 0.6, n // 5), rng.normal(0, 0.03, n // 5), rng.uniform(0.0, 0.15, n // 5)]
    return np.concatenate([body, arm])


def sse(xf, x, y):
    return float(np.sum((apply_transform(x, xf) - y) ** 2))


def test_kabsch_identity(rng):
    x = rng.normal(size=(20, 3))
    xf = kabsch(x, x)
    np.testing.assert_allclose(xf.rotation, np.eye(3), atol=1e-12)
    assert sse(xf, x, x) < 1e-24


def test_kabsch_square_quarter_turn():
    square = np.array([[0, 0, 0], [1, 0, 0], [1, 1, 0], [0, 1, 0]], dtype=float)
    rz = np.array([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])
    xf = kabsch(square, square @ rz.T)
    assert np.max(np.abs(xf.rotation - rz)) <= 1e-12
    assert np.max(np.abs(xf.translation)) <= 1e-12


def test_kabsch_planar_proper_rotation(rng):
    plane = np.c_[rng.normal(size=(30, 2)), np.zeros(30)]
    rot = random_rotation(rng)
    xf = kabsch(plane, plane @ rot.T + [0.1, 0.2, 0.3])
    assert abs(np.linalg.det(xf.rotation) - 1) < 1e-9
    assert sse(xf, plane, plane @ rot.T + [0.1, 0.2, 0.3]) < 1e-20


def test_kabsch_never_returns_reflection(rng):
    x = rng.normal(size=(40, 3))
    mirrored = x * [1, 1, -1]
    rot = kabsch(x, mirrored).rotation
    assert np.max(np.abs(rot.T @ rot - np.eye(3))) < 1e-9
    assert abs(np.linalg.det(rot) - 1) < 1e-9


def test_kabsch_errors(rng):
    with pytest.raises(RegistrationError):
        kabsch(rng.normal(size=(5, 3)), rng.normal(size=(6, 3)))
    line = np.outer(np.arange(6.0), [1, 2, 3])
    with pytest.raises(RegistrationError):
        kabsch(line, line + 1)


def test_kabsch_optimal_against_perturbations(rng):
    x = rng.normal(size=(50, 3))
    y = x @ random_rotation(rng).T + rng.normal(size=3) + rng.normal(0, 0.05, (50, 3))
    best = kabsch(x, y)
    base = sse(best, x, y)
    for _ in range(1000):
        dr = rotation_about_axis(rng.normal(size=3), rng.uniform(0, 0.05))
        cand = RigidTransform(dr @ best.rotation, best.translation + rng.normal(0, 0.01, 3))
        assert sse(cand, x, y) >= base - 1e-12


def test_correspondences_identical_clouds(rng):
    x = rng.normal(size=(100, 3))
    pairs = nearest_correspondences(x, x)
    assert [(i, j) for i, j, _ in pairs] == [(i, i) for i in range(100)]
    assert all(d == 0 for *_, d in pairs)


def test_correspondence_ties_go_to_lowest_index():
    target = np.array([[1.0, 0, 0], [-1.0, 0, 0], [0, 1.0, 0], [1.0, 0, 0]])
    pairs = nearest_correspondences([[0.0, 0, 0], [1.0, 0, 0]], target)
    assert pairs == [(0, 0, 1.0), (1, 0, 0.0)]


def test_correspondences_match_brute_force(rng):
    src, tgt = rng.uniform(size=(1000, 3)), rng.uniform(size=(1000, 3))
    assert nearest_correspondences(src, tgt) == brute_force_correspondences(src, tgt)


def test_correspondences_grid_ties_match_brute_force():
    # lattice points are full of exact distance ties
    g = np.stack(np.meshgrid(*[np.arange(6.0)] * 3, indexing="ij"), -1).reshape(-1, 3)
    q = g[::7] + 0.5
    assert nearest_correspondences(q, g) == brute_force_correspondences(q, g)


def test_max_distance_zero_disjoint():
    assert nearest_correspondences([[0.0, 0, 0]], [[1.0, 0, 0]], max_dist=0.0) == []


def test_icp_identity(rng):
    x = asymmetric_object(rng)
    res = icp_align(x, x)
    assert res.converged and res.iterations <= 2 and res.rmse <= 1e-12
    np.testing.assert_allclose(res.transform.rotation, np.eye(3), atol=1e-12)


def test_icp_recovers_transform(rng):
    for _ in range(10):
        x = asymmetric_object(rng)
        truth = RigidTransform(random_rotation(rng, math.radians(30)), rng.uniform(-1, 1, 3) * 0.2 / math.sqrt(3))
        res = icp_align(x, apply_transform(x, truth))
        assert rotation_angle(res.transform.rotation.T @ truth.rotation) <= 1e-3
        assert np.linalg.norm(res.transform.translation - truth.translation) <= 1e-3
        assert all(b <= a + 1e-12 for a, b in zip(res.history, res.history[1:]))


def test_icp_failure_when_nothing_in_range(rng):
    x = rng.normal(size=(50, 3))
    res = icp_align(x, x + 10.0, IcpConfig(max_correspondence_distance=0.5))
    assert not res.converged and res.reason


def test_icp_too_few_points():
    res = icp_align(np.zeros((2, 3)), np.zeros((2, 3)))
    assert not res.converged


def test_icp_respects_init(rng):
    x = asymmetric_object(rng)
    t = np.array([3.0, 0, 0])
    res = icp_align(x, x + t, init=RigidTransform.from_translation(t))
    np.testing.assert_allclose(res.transform.translation, t, atol=1e-9)
    assert res.iterations <= 2


def _object(seed):
    rng = np.random.default_rng(seed)
    pts = sample_surface("box", rng.uniform(0.08, 0.16, 3), 1200, rng)
    return pts @ quat_to_matrix(rng.normal(size=4)).T + rng.uniform(0.3, 0.7, 3)


def test_object_delta_no_motion(codebook):
    cfg = QuantConfig()
    pts = _object(1)
    desc = quantize_location(pts, cfg)
    seg = ObjectSegment(1, pts, desc)
    grid = decode_grid(encode_grid(object_grid(pts, desc, cfg), codebook), codebook)
    res = object_delta(seg, (grid, desc), cfg)
    assert rotation_angle(res.transform.rotation) <= 0.05
    assert np.linalg.norm(res.transform.translation) <= cfg.bin_width[0]


def test_object_delta_three_bins(codebook):
    cfg = QuantConfig()
    for seed in range(5):
        pts = _object(seed)
        desc = quantize_location(pts, cfg)
        grid = decode_grid(encode_grid(object_grid(pts, desc, cfg), codebook), codebook)
        res = object_delta(ObjectSegment(1, pts, desc), (grid, desc.shifted(dx=3)), cfg)
        want = np.array([3 * cfg.bin_width[0], 0, 0])
        assert np.linalg.norm(res.transform.translation - want) <= cfg.bin_width[0] / 2
        assert rotation_angle(res.transform.rotation) <= 0.05


def test_object_delta_empty_prediction():
    cfg = QuantConfig()
    pts = _object(0)
    desc = quantize_location(pts, cfg)
    res = object_delta(ObjectSegment(1, pts, desc), (VoxelGrid.empty(), desc), cfg)
    assert not res.converged and res.reason


def test_result_json_shape(rng):
    x = rng.normal(size=(10, 3))
    out = icp_align(x, x).to_json()
    assert set(out) == {"rotation", "translation", "rmse", "iterations", "converged"}
    assert len(out["rotation"]) == 3 and len(out["translation"]) == 3


def test_config_json_round_trip():
    cfg = IcpConfig(max_iterations=7, convergence_tol=1e-5, max_correspondence_distance=0.2, min_points=5)
    assert IcpConfig.from_json(cfg.to_json()) == cfg
    assert IcpConfig.from_json(IcpConfig().to_json()) == IcpConfig()
