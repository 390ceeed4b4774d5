import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from avi.geometry import (
    AABB,
    GeometryError,
    Pose,
    RigidTransform,
    VoxelGrid,
    apply_to_pose,
    apply_transform,
    bounding_box,
    compose,
    devoxelize,
    format_cloud,
    grid_from_bytes,
    grid_to_bytes,
    invert,
    quat_from_matrix,
    quat_to_matrix,
    read_cloud,
    rotation_about_axis,
    voxelize,
)

RZ90 = np.array([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])


def random_rotation(rng):
    q = rng.normal(size=4)
    return quat_to_matrix(q / np.linalg.norm(q))


def brute_cell(p, lo, w, res):
    """Half-open cell search along one axis, max face clamped into the last cell."""
    for i in range(res):
        if lo + i * w <= p < lo + (i + 1) * w:
            return i
    return res - 1 if p == lo + res * w or math.isclose(p, lo + res * w) else None


def test_bounding_box_single_point():
    box = bounding_box([[0.2, 0.3, 0.4]])
    assert box.min.tolist() == [0.2, 0.3, 0.4]
    assert box.max.tolist() == [0.2, 0.3, 0.4]


def test_bounding_box_corners():
    box = bounding_box([[0, 0, 0], [1, 1, 1]])
    assert box.min.tolist() == [0, 0, 0]
    assert box.max.tolist() == [1, 1, 1]


def test_bounding_box_contains_every_point(rng):
    pts = rng.uniform(0, 1, (100, 3))
    box = bounding_box(pts)
    assert np.all(box.min >= 0) and np.all(box.max <= 1)
    for p in pts:
        assert all(box.min[a] <= p[a] <= box.max[a] for a in range(3))


def test_bounding_box_empty_raises():
    with pytest.raises(GeometryError):
        bounding_box(np.zeros((0, 3)))


def test_voxelize_empty_cloud():
    grid = voxelize(np.zeros((0, 3)), AABB.unit(), 64)
    assert grid.resolution == 64 and grid.count == 0


def test_voxelize_center_point_half_open():
    grid = voxelize([[0.5, 0.5, 0.5]], AABB.unit(), 2)
    assert grid.count == 1 and grid.occupancy[1, 1, 1]


def test_voxelize_max_face_clamps():
    grid = voxelize([[1.0, 1.0, 1.0]], AABB.unit(), 4)
    assert grid.occupancy[3, 3, 3] and grid.count == 1


def test_voxelize_degenerate_box():
    with pytest.raises(GeometryError):
        voxelize([[0, 0, 0]], AABB(np.zeros(3), np.array([1.0, 1.0, 0.0])), 8)


def test_voxelize_matches_brute_force_cells(rng):
    d = rng.normal(size=(1000, 3))
    pts = 0.5 + 0.4 * d / np.linalg.norm(d, axis=1, keepdims=True)
    grid = voxelize(pts, AABB.unit(), 64)
    cells = {tuple(brute_cell(p[a], 0.0, 1 / 64, 64) for a in range(3)) for p in pts}
    assert grid.count == len(cells)
    assert all(grid.occupancy[c] for c in cells)


def test_devoxelize_empty():
    assert devoxelize(VoxelGrid.empty(64), AABB.unit()).shape == (0, 3)


def test_devoxelize_cell_center():
    occ = np.zeros((64, 64, 64), dtype=bool)
    occ[0, 0, 0] = True
    pts = devoxelize(VoxelGrid(occ), AABB.unit())
    np.testing.assert_array_equal(pts, [[1 / 128, 1 / 128, 1 / 128]])


def test_round_trip_within_half_voxel_diagonal(rng):
    box = AABB(np.array([-0.3, 0.1, 0.0]), np.array([0.5, 0.6, 0.9]))
    pts = rng.uniform(box.min, box.max, (500, 3))
    out = devoxelize(voxelize(pts, box, 32), box)
    half_diag = np.linalg.norm(box.extent / 32) / 2
    for q in out:
        assert np.min(np.linalg.norm(pts - q, axis=1)) <= half_diag + 1e-12


@settings(max_examples=30, deadline=None)
@given(arrays(bool, (8, 8, 8)))
def test_voxelize_devoxelize_idempotent(occ):
    box = AABB(np.array([-1.0, 0.25, 3.0]), np.array([2.0, 0.75, 3.5]))
    grid = VoxelGrid(occ)
    assert voxelize(devoxelize(grid, box), box, 8) == grid


def test_identity_transform_leaves_cloud(rng):
    pts = rng.normal(size=(20, 3))
    np.testing.assert_array_equal(apply_transform(pts, RigidTransform.identity()), pts)


def test_pure_translation():
    out = apply_transform([[0, 0, 0]], RigidTransform.from_translation([0, 0, 0.1]))
    np.testing.assert_array_equal(out, [[0, 0, 0.1]])


def test_rotation_about_z():
    out = apply_transform([[1, 0, 0]], RigidTransform(rotation_about_axis([0, 0, 1], np.pi / 2)))
    np.testing.assert_allclose(out, [[0, 1, 0]], atol=1e-12)


def test_non_orthonormal_rotation_rejected():
    with pytest.raises(GeometryError):
        RigidTransform(np.diag([1.0, 1.0, 1.1]))
    with pytest.raises(GeometryError):
        RigidTransform(np.diag([1.0, 1.0, -1.0]))


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_transform_is_isometry(seed):
    rng = np.random.default_rng(seed)
    pts = rng.normal(size=(15, 3))
    xf = RigidTransform(random_rotation(rng), rng.normal(size=3))
    out = apply_transform(pts, xf)
    d_in = np.linalg.norm(pts[:, None] - pts[None], axis=2)
    d_out = np.linalg.norm(out[:, None] - out[None], axis=2)
    assert np.max(np.abs(d_in - d_out)) <= 1e-9
    assert len(out) == len(pts)


def test_compose_identity_and_order(rng):
    a = RigidTransform(random_rotation(rng), rng.normal(size=3))
    b = RigidTransform(random_rotation(rng), rng.normal(size=3))
    c = compose(RigidTransform.identity(), a)
    np.testing.assert_allclose(c.rotation, a.rotation, atol=1e-12)
    np.testing.assert_allclose(c.translation, a.translation, atol=1e-12)
    pts = rng.normal(size=(5, 3))
    np.testing.assert_allclose(apply_transform(pts, compose(a, b)), apply_transform(apply_transform(pts, b), a), atol=1e-12)


def test_invert_translation():
    inv = invert(RigidTransform.from_translation([1.0, -2.0, 0.5]))
    np.testing.assert_array_equal(inv.translation, [-1.0, 2.0, -0.5])
    np.testing.assert_array_equal(inv.rotation, np.eye(3))


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_compose_associative_and_inverse(seed):
    rng = np.random.default_rng(seed)
    a, b, c = (RigidTransform(random_rotation(rng), rng.normal(size=3)) for _ in range(3))
    left, right = compose(compose(a, b), c), compose(a, compose(b, c))
    assert np.max(np.abs(left.matrix() - right.matrix())) <= 1e-9
    for ident in (compose(invert(a), a), compose(a, invert(a))):
        assert np.max(np.abs(ident.matrix() - np.eye(4))) <= 1e-9


def test_apply_to_pose_quarter_turn():
    pose = apply_to_pose(RigidTransform(RZ90), Pose(np.array([1.0, 0, 0])))
    np.testing.assert_allclose(pose.position, [0, 1, 0], atol=1e-12)
    # closed form: angle θ about z is (cos θ/2, 0, 0, sin θ/2)
    np.testing.assert_allclose(pose.orientation, [math.cos(math.pi / 4), 0, 0, math.sin(math.pi / 4)], atol=1e-12)


def test_quaternion_matrix_round_trip(rng):
    for _ in range(50):
        r = random_rotation(rng)
        np.testing.assert_allclose(quat_to_matrix(quat_from_matrix(r)), r, atol=1e-12)


def test_cloud_text_round_trip(tmp_path, rng):
    pts = rng.normal(size=(10, 3))
    path = tmp_path / "c.xyz"
    path.write_text(format_cloud(pts, "hello") + "# trailing comment\n\n")
    np.testing.assert_array_equal(read_cloud(path), pts)


def test_grid_binary_round_trip(rng):
    grid = VoxelGrid(rng.random((5, 5, 5)) < 0.3)
    data = grid_to_bytes(grid)
    assert data[:4] == b"AVIV" and len(data) == 16 + math.ceil(125 / 8)
    assert int.from_bytes(data[4:8], "little") == 5
    assert grid_from_bytes(data) == grid


def test_grid_binary_bit_order():
    occ = np.zeros((2, 2, 2), dtype=bool)
    occ[0, 0, 1] = True  # flat index 1
    data = grid_to_bytes(VoxelGrid(occ))
    assert data[16] == 0b10


def test_grid_binary_bad_magic():
    with pytest.raises(GeometryError):
        grid_from_bytes(b"XXXX" + bytes(12))
