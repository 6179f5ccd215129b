"""A trainable linear patch-embed encoder for desk-scale experiments.

Each lattice cell's raw intensity patch is flattened and mapped through a
single affine layer shared across cells.  The encoder exists to exercise
the end-to-end gradient path (heads backpropagate dL/du_i into it); it is
not meant to be a capable feature extractor.
"""

from __future__ import annotations

import numpy as np

from .errors import GeometryError
from .lattice import FeatureLattice, LatticeGeometry, Volume, extract_tri, nn_resize_2d


def patch_dim(geometry: LatticeGeometry, volume_shape: tuple[int, int, int]) -> int:
    """Flattened input size of one lattice cell's raw patch."""
    if geometry.kind == "token":
        return 3 * geometry.patch * geometry.patch
    d, h, w = volume_shape
    dz, dy, dx = geometry.cells
    if d % dz or h % dy or w % dx:
        raise GeometryError(
            f"volume shape {volume_shape} is not divisible by cell grid {geometry.cells}")
    return (d // dz) * (h // dy) * (w // dx)


def patch_matrix(volume: Volume, geometry: LatticeGeometry,
                 centers: list[int] | None = None) -> np.ndarray:
    """Raw per-cell patches in lattice raster order, one flattened row each."""
    if geometry.kind == "token":
        if centers is None or len(centers) != geometry.slabs:
            raise GeometryError(
                f"token patching needs {geometry.slabs} tri centers, got "
                f"{None if centers is None else len(centers)}")
        g, p = geometry.grid, geometry.patch
        rows = []
        for c in centers:
            slab = nn_resize_2d(extract_tri(volume, c), geometry.side)   # (3, S, S)
            tiles = slab.reshape(3, g, p, g, p).transpose(1, 3, 0, 2, 4)
            rows.append(tiles.reshape(g * g, 3 * p * p))
        return np.concatenate(rows, axis=0)
    d, h, w = volume.shape
    dz, dy, dx = geometry.cells
    if d % dz or h % dy or w % dx:
        raise GeometryError(
            f"volume shape {volume.shape} is not divisible by cell grid {geometry.cells}")
    bz, by, bx = d // dz, h // dy, w // dx
    blocks = volume.data.reshape(dz, bz, dy, by, dx, bx).transpose(0, 2, 4, 1, 3, 5)
    return blocks.reshape(dz * dy * dx, bz * by * bx)


def init_encoder_params(d: int, q: int, rng: np.random.Generator) -> dict[str, np.ndarray]:
    width = 1.0 / np.sqrt(q)
    return {"encoder/w": rng.uniform(-width, width, size=(d, q)),
            "encoder/b": np.zeros(d)}


def encode_patches(patches: np.ndarray, params: dict[str, np.ndarray]) -> np.ndarray:
    """Affine map of each patch row into feature space."""
    w, b = params["encoder/w"], params["encoder/b"]
    if patches.ndim != 2 or patches.shape[1] != w.shape[1]:
        raise GeometryError(
            f"patch matrix {patches.shape} does not fit encoder input dim {w.shape[1]}")
    return patches @ w.T + b


def encoder_backward(patches: np.ndarray, dfeatures: np.ndarray) -> dict[str, np.ndarray]:
    """Gradients of the encoder's affine map given dL/dfeatures."""
    return {"encoder/w": dfeatures.T @ patches,
            "encoder/b": dfeatures.sum(axis=0)}


def toy_encoder(volume: Volume, params: dict[str, np.ndarray],
                geometry: LatticeGeometry,
                centers: list[int] | None = None) -> FeatureLattice:
    """Volume in, feature lattice out: patch extraction plus the affine map."""
    features = encode_patches(patch_matrix(volume, geometry, centers), params)
    return FeatureLattice(geometry=geometry, features=features)
