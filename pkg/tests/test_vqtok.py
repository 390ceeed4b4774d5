import numpy as np
import pytest

from avi.geometry import VoxelGrid
from avi.shapes import KINDS, random_solid, solid_grid, training_grids
from avi.vqtok import (
    NUM_PATCHES,
    Codebook,
    PatchLayout,
    TokenizerError,
    assemble_patches,
    decode_grid,
    encode_grid,
    load_codebook,
    patch_vector,
    patch_vectors,
    save_codebook,
    train_codebook,
)


def voxel_home(i, j, k):
    """Patch index and component of voxel (i, j, k) for 4x4x2 patches, x-major."""
    return (i // 4) * 16 * 32 + (j // 4) * 32 + k // 2, (i % 4) * 8 + (j % 4) * 2 + (k % 2)


def random_grid(rng, density=None):
    density = rng.uniform(0.01, 0.6) if density is None else density
    return VoxelGrid(rng.random((64, 64, 64)) < density)


def test_layout_numbers():
    layout = PatchLayout()
    assert layout.patch_grid == (16, 16, 32)
    assert layout.patches_total == 8192 == NUM_PATCHES
    assert layout.patch_dim == 32
    with pytest.raises(TokenizerError):
        PatchLayout(64, (3, 4, 2))


def test_empty_grid_patches_are_zero():
    assert not patch_vector(VoxelGrid.empty(), 4000).any()


def test_origin_voxel_anchor():
    occ = np.zeros((64, 64, 64), dtype=bool)
    occ[0, 0, 0] = True
    vec = patch_vectors(VoxelGrid(occ))
    assert vec[0, 0] == 1 and vec[0].sum() == 1 and vec.sum() == 1


def test_patch_index_matches_voxel_home(rng):
    occ = np.zeros((64, 64, 64), dtype=bool)
    voxels = rng.integers(0, 64, size=(200, 3))
    occ[voxels[:, 0], voxels[:, 1], voxels[:, 2]] = True
    vec = patch_vectors(VoxelGrid(occ))
    expected = np.zeros_like(vec)
    for i, j, k in voxels:
        p, c = voxel_home(i, j, k)
        expected[p, c] = 1
    np.testing.assert_array_equal(vec, expected)


def test_patch_index_out_of_range():
    with pytest.raises(TokenizerError):
        patch_vector(VoxelGrid.empty(), 8192)


def test_reassembly_reproduces_grid(rng):
    grid = random_grid(rng)
    assert assemble_patches(patch_vectors(grid)) == grid


def test_train_on_empty_grids_is_flagged():
    cb = train_codebook([VoxelGrid.empty()] * 3, k=16, seed=0)
    assert cb.k == 16 and cb.flagged
    assert not cb.entries[0].any() and cb.entries[1].all()


def test_two_patterns_recovered_exactly():
    a = np.zeros(32)
    a[[0, 5, 9]] = 1
    b = np.zeros(32)
    b[[1, 2, 3, 30]] = 1
    vec = np.zeros((8192, 32))
    vec[:100] = a
    vec[3000:3050] = b
    cb = train_codebook([assemble_patches(vec)], k=4, seed=3)
    assert not cb.flagged
    got = {tuple(e) for e in cb.entries[2:]}
    assert got == {tuple(a), tuple(b)}


def test_training_is_deterministic():
    grids = training_grids(seed=7, n_surface=6, n_solid=3)
    assert train_codebook(grids, 64, seed=11) == train_codebook(grids, 64, seed=11)


def test_codewords_are_binary(codebook):
    assert codebook.k == 512
    assert set(np.unique(codebook.entries)) <= {0.0, 1.0}


def test_reserved_codewords(codebook):
    assert np.all(encode_grid(VoxelGrid.empty(), codebook) == 0)
    assert np.all(encode_grid(VoxelGrid.full(), codebook) == 1)
    assert decode_grid(np.zeros(8192, dtype=int), codebook) == VoxelGrid.empty()
    assert decode_grid(np.ones(8192, dtype=int), codebook) == VoxelGrid.full()


def test_encode_matches_brute_force_argmin(rng):
    # fractional entries and a duplicate: ties must go to the lower index
    entries = np.concatenate([np.zeros((1, 32)), np.ones((1, 32)), rng.random((6, 32))])
    entries = np.concatenate([entries, entries[2:3]])
    cb = Codebook(entries)
    grid = random_grid(rng, 0.3)
    tokens = encode_grid(grid, cb)
    vec = patch_vectors(grid).astype(float)
    for p in rng.choice(8192, 300, replace=False):
        d = [float(np.sum((vec[p] - e) ** 2)) for e in entries]
        assert tokens[p] == d.index(min(d))
    assert len(tokens) == 8192


def test_decode_threshold():
    entries = np.zeros((3, 32))
    entries[1] = 1
    entries[2, :16] = 0.5
    entries[2, 16:] = 0.49
    grid = decode_grid(np.full(8192, 2), Codebook(entries))
    assert grid.count == 8192 * 16


def test_decode_rejects_bad_tokens(codebook):
    with pytest.raises(TokenizerError):
        decode_grid(np.full(8192, 512), codebook)
    with pytest.raises(TokenizerError):
        decode_grid(np.zeros(100, dtype=int), codebook)


def test_encode_idempotent(codebook, rng):
    for _ in range(20):
        tokens = encode_grid(random_grid(rng), codebook)
        assert np.array_equal(encode_grid(decode_grid(tokens, codebook), codebook), tokens)


@pytest.mark.parametrize("kind", KINDS)
def test_primitive_reconstruction_iou(codebook, kind):
    # regression bound on the primitive family the codebook was trained on
    rng = np.random.default_rng(KINDS.index(kind))
    for _ in range(5):
        grid = solid_grid(kind, rng.uniform(0.35, 1.0, 3))
        assert grid.iou(decode_grid(encode_grid(grid, codebook), codebook)) >= 0.85


def test_random_solids_iou(codebook):
    rng = np.random.default_rng(99)
    ious = [g.iou(decode_grid(encode_grid(g, codebook), codebook)) for g in (random_solid(rng) for _ in range(20))]
    assert min(ious) >= 0.85


def test_codebook_json_round_trip(codebook, tmp_path):
    path = tmp_path / "cb.json"
    save_codebook(codebook, path)
    assert load_codebook(path) == codebook


def test_codebook_validation():
    with pytest.raises(TokenizerError):
        Codebook(np.ones((3, 32)))
    bad = np.zeros((3, 32))
    bad[1] = 1
    bad[2, 0] = 1.5
    with pytest.raises(TokenizerError):
        Codebook(bad)
