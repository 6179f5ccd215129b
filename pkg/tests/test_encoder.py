"""Patch extraction and the trainable linear encoder."""

import numpy as np
import pytest

from organpool.encoder import (encode_patches, encoder_backward, init_encoder_params,
                               patch_dim, patch_matrix, toy_encoder)
from organpool.errors import GeometryError
from organpool.experiment import check_schema
from organpool.heads import init_head_params
from organpool.lattice import FeatureLattice, LatticeGeometry, Volume
from organpool.rng import keyed_rng
from organpool.training import StudyInputs, grad_check

TOKEN = LatticeGeometry(kind="token", slabs=2, side=4, patch=2)
VOXEL = LatticeGeometry(kind="voxel", cells=(2, 2, 2))


def test_patch_dim():
    assert patch_dim(TOKEN, (6, 4, 4)) == 3 * 2 * 2
    assert patch_dim(VOXEL, (4, 4, 4)) == 2 * 2 * 2
    assert patch_dim(VOXEL, (8, 2, 6)) == 4 * 1 * 3
    with pytest.raises(GeometryError):
        patch_dim(VOXEL, (5, 4, 4))


def test_patch_matrix_voxel_blocks():
    data = np.arange(64, dtype=np.float64).reshape(4, 4, 4)
    volume = Volume(data=data, spacing=(1.0, 1.0, 1.0))
    rows = patch_matrix(volume, VOXEL)
    assert rows.shape == (8, 8)
    for cz in range(2):
        for cy in range(2):
            for cx in range(2):
                row = rows[cz * 4 + cy * 2 + cx]
                block = data[2 * cz:2 * cz + 2, 2 * cy:2 * cy + 2, 2 * cx:2 * cx + 2]
                np.testing.assert_array_equal(row, block.ravel())


def test_patch_matrix_voxel_divisibility():
    volume = Volume(data=np.zeros((5, 4, 4)), spacing=(1.0, 1.0, 1.0))
    with pytest.raises(GeometryError):
        patch_matrix(volume, VOXEL)


def test_patch_matrix_token_rows():
    # every z-slice is constant, so each patch row holds the three slab
    # values channel-major: p*p copies of z-1, then z, then z+1
    data = np.repeat(np.arange(6, dtype=np.float64), 16).reshape(6, 4, 4)
    volume = Volume(data=data, spacing=(1.0, 1.0, 1.0))
    rows = patch_matrix(volume, TOKEN, centers=[1, 4])
    assert rows.shape == (2 * 4, 12)
    for tile in range(4):
        np.testing.assert_array_equal(rows[tile], np.repeat([0.0, 1.0, 2.0], 4))
        np.testing.assert_array_equal(rows[4 + tile], np.repeat([3.0, 4.0, 5.0], 4))


def test_patch_matrix_token_center_errors():
    volume = Volume(data=np.zeros((6, 4, 4)), spacing=(1.0, 1.0, 1.0))
    with pytest.raises(GeometryError):
        patch_matrix(volume, TOKEN, centers=None)
    with pytest.raises(GeometryError):
        patch_matrix(volume, TOKEN, centers=[2])
    with pytest.raises(GeometryError):
        patch_matrix(volume, TOKEN, centers=[0, 3])  # tri slab leaves the volume


def test_init_encoder_params():
    params = init_encoder_params(5, 9, keyed_rng(3, "enc"))
    assert params["encoder/w"].shape == (5, 9)
    assert np.all(np.abs(params["encoder/w"]) <= 1.0 / 3.0)
    np.testing.assert_array_equal(params["encoder/b"], np.zeros(5))
    again = init_encoder_params(5, 9, keyed_rng(3, "enc"))
    np.testing.assert_array_equal(params["encoder/w"], again["encoder/w"])


def test_encode_patches_affine():
    rng = keyed_rng(11, "affine")
    patches = rng.normal(size=(5, 7))
    params = {"encoder/w": rng.normal(size=(3, 7)), "encoder/b": rng.normal(size=3)}
    out = encode_patches(patches, params)
    np.testing.assert_allclose(out, patches @ params["encoder/w"].T + params["encoder/b"],
                               rtol=0, atol=0)


def test_zero_weight_encoder_emits_bias_rows():
    params = {"encoder/w": np.zeros((4, 6)), "encoder/b": np.array([1.0, -2.0, 0.5, 3.0])}
    out = encode_patches(np.ones((9, 6)), params)
    np.testing.assert_array_equal(out, np.tile(params["encoder/b"], (9, 1)))


def test_encode_patches_shape_errors():
    params = {"encoder/w": np.zeros((4, 6)), "encoder/b": np.zeros(4)}
    with pytest.raises(GeometryError):
        encode_patches(np.zeros((3, 5)), params)
    with pytest.raises(GeometryError):
        encode_patches(np.zeros(6), params)


def test_encoder_backward_formulas():
    rng = keyed_rng(5, "back")
    patches = rng.normal(size=(8, 6))
    dfeatures = rng.normal(size=(8, 4))
    grads = encoder_backward(patches, dfeatures)
    np.testing.assert_allclose(grads["encoder/w"], dfeatures.T @ patches, atol=1e-15)
    np.testing.assert_allclose(grads["encoder/b"], dfeatures.sum(axis=0), atol=1e-15)


def test_encoder_gradients_through_masked_head():
    schema = check_schema()
    rng = keyed_rng(25, "enc-grad")
    d, q, n_rows = 6, 10, 14
    patches = rng.normal(size=(n_rows, q))
    indicators = {organ: (rng.random(n_rows) < 0.6).astype(np.float64)
                  for organ in schema.organs}
    for m in indicators.values():
        if not m.any():
            m[0] = 1.0
    study = StudyInputs(targets=np.array([1, 0, -1, 1]), patches=patches,
                        indicators=indicators)
    params = init_head_params("masked", schema, d, rng)
    params.update(init_encoder_params(d, q, rng))
    max_err, per_param = grad_check(study, params, "masked", schema)
    assert max_err < 1e-4
    assert per_param["encoder/w"] < 1e-4
    assert per_param["encoder/b"] < 1e-4


def test_toy_encoder_composition():
    rng = keyed_rng(8, "toy")
    data = rng.normal(size=(4, 4, 4))
    volume = Volume(data=data, spacing=(1.0, 1.0, 1.0))
    params = init_encoder_params(5, 8, rng)
    lattice = toy_encoder(volume, params, VOXEL)
    assert isinstance(lattice, FeatureLattice)
    assert lattice.geometry is VOXEL
    np.testing.assert_array_equal(lattice.features,
                                  encode_patches(patch_matrix(volume, VOXEL), params))


def test_toy_encoder_token_path():
    rng = keyed_rng(9, "toy-token")
    volume = Volume(data=rng.normal(size=(6, 4, 4)), spacing=(1.0, 1.0, 1.0))
    params = init_encoder_params(3, 12, rng)
    lattice = toy_encoder(volume, params, TOKEN, centers=[1, 4])
    assert lattice.features.shape == (TOKEN.size, 3)
