"""Volume preprocessing, slab construction and lattice geometry.

A study volume is a D x H x W grid of Hounsfield Units.  Encoders consume
either a token lattice (T slabs of an S x S image cut into P x P patches)
or a voxel lattice (a D' x H' x W' grid).  This module owns the geometry
bookkeeping: the flatten/unflatten bijection between lattice coordinates
and row indices, tri-slab extraction, HU normalization, nearest-neighbour
resizing, joint image/mask augmentation, and the OCTV1/OCTM1 file formats.

All indices are 0-based.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import DataError, GeometryError

HU_CLIP_LO = -1000.0
HU_CLIP_HI = 1000.0


@dataclass(frozen=True)
class Volume:
    """A raw CT-like grid with physical voxel spacing in mm per axis."""

    data: np.ndarray          # (D, H, W) float
    spacing: tuple[float, float, float]   # (s_z, s_y, s_x), mm

    def __post_init__(self):
        if self.data.ndim != 3 or min(self.data.shape) < 1:
            raise GeometryError(f"volume must be 3-D non-empty, got shape {self.data.shape}")
        if any(s <= 0 for s in self.spacing):
            raise DataError(f"spacing components must be > 0, got {self.spacing}")

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape

    @property
    def voxel_mm3(self) -> float:
        return float(self.spacing[0] * self.spacing[1] * self.spacing[2])


@dataclass(frozen=True)
class LatticeGeometry:
    """Index geometry of an encoder's output lattice.

    kind="token": T slabs, each an S x S image cut into non-overlapping
    P x P patches, giving a g x g grid with g = S // P and N = g * g
    patches per slab.  kind="voxel": a (D', H', W') cell grid.
    """

    kind: str                                  # "token" | "voxel"
    slabs: int = 0                             # T (token)
    side: int = 0                              # S (token)
    patch: int = 0                             # P (token)
    cells: tuple[int, int, int] = (0, 0, 0)    # (D', H', W') (voxel)

    def __post_init__(self):
        if self.kind == "token":
            if self.slabs < 1 or self.side < 1 or self.patch < 1:
                raise GeometryError("token geometry needs slabs, side, patch >= 1")
            if self.side % self.patch != 0:
                raise GeometryError(f"side {self.side} not divisible by patch {self.patch}")
        elif self.kind == "voxel":
            if min(self.cells) < 1:
                raise GeometryError(f"voxel geometry needs positive cells, got {self.cells}")
        else:
            raise GeometryError(f"unknown lattice kind {self.kind!r}")

    @property
    def grid(self) -> int:
        """Patches per side (g) for token lattices."""
        return self.side // self.patch

    @property
    def patches_per_slab(self) -> int:
        return self.grid * self.grid

    @property
    def size(self) -> int:
        """|Omega|, the number of lattice rows."""
        if self.kind == "token":
            return self.slabs * self.patches_per_slab
        return self.cells[0] * self.cells[1] * self.cells[2]

    def to_dict(self) -> dict:
        if self.kind == "token":
            return {"kind": "token", "slabs": self.slabs, "side": self.side,
                    "patch": self.patch}
        return {"kind": "voxel", "cells": list(self.cells)}

    @staticmethod
    def from_dict(d: dict) -> "LatticeGeometry":
        if d.get("kind") == "token":
            return LatticeGeometry(kind="token", slabs=int(d["slabs"]),
                                   side=int(d["side"]), patch=int(d["patch"]))
        if d.get("kind") == "voxel":
            c = d["cells"]
            return LatticeGeometry(kind="voxel", cells=(int(c[0]), int(c[1]), int(c[2])))
        raise GeometryError(f"unknown geometry dict {d!r}")


@dataclass(frozen=True)
class FeatureLattice:
    """Per-study local features: one d-vector per lattice row."""

    geometry: LatticeGeometry
    features: np.ndarray    # (|Omega|, d) float64

    def __post_init__(self):
        if self.features.ndim != 2:
            raise DataError("features must be 2-D (rows, dim)")
        if self.features.shape[0] != self.geometry.size:
            raise GeometryError(
                f"feature rows {self.features.shape[0]} != lattice size {self.geometry.size}")
        if not np.all(np.isfinite(self.features)):
            raise DataError("features contain non-finite values")

    @property
    def dim(self) -> int:
        return self.features.shape[1]


def clip_normalize_hu(volume: Volume) -> Volume:
    """Clip HU to [-1000, 1000] and min-max normalize to [0, 1]."""
    if not np.all(np.isfinite(volume.data)):
        raise DataError("volume contains non-finite values")
    out = (np.clip(volume.data, HU_CLIP_LO, HU_CLIP_HI) - HU_CLIP_LO) / (HU_CLIP_HI - HU_CLIP_LO)
    return Volume(data=out, spacing=volume.spacing)


def tri_centers(c1: int, stride: int, count: int, depth: int) -> list[int]:
    """Centers c_t = c1 + stride*t for t = 0..count-1 (0-based slices).

    Every slab needs one slice above and below its center, so the valid
    range is 1 <= c <= depth-2.
    """
    if stride < 1:
        raise GeometryError(f"stride must be >= 1, got {stride}")
    if count < 1:
        raise GeometryError(f"slab count must be >= 1, got {count}")
    centers = [c1 + stride * t for t in range(count)]
    for t, c in enumerate(centers):
        if c - 1 < 0 or c + 1 > depth - 1:
            raise GeometryError(
                f"tri-slab {t} centered at slice {c} out of bounds for depth {depth}")
    return centers


def pad_depth_replicate(volume: Volume, min_depth: int) -> Volume:
    """Edge-replicate the last axial slice until depth >= min_depth."""
    d = volume.shape[0]
    if d >= min_depth:
        return volume
    data = np.pad(volume.data, ((0, min_depth - d), (0, 0), (0, 0)), mode="edge")
    return Volume(data=data, spacing=volume.spacing)


def extract_tri(volume: Volume, center: int) -> np.ndarray:
    """Stack slices (center-1, center, center+1) as a 3 x H x W slab."""
    d = volume.shape[0]
    if center - 1 < 0 or center + 1 > d - 1:
        raise GeometryError(f"tri center {center} out of bounds for depth {d}")
    return np.stack([volume.data[center - 1], volume.data[center], volume.data[center + 1]])


def flatten_index(geometry: LatticeGeometry, coords: tuple[int, ...]) -> int:
    """Raster-order row index of a lattice coordinate.

    token: coords = (t, row, col) -> t*N + row*g + col
    voxel: coords = (z, y, x)     -> z*H'*W' + y*W' + x
    """
    if geometry.kind == "token":
        t, row, col = coords
        g = geometry.grid
        if not (0 <= t < geometry.slabs and 0 <= row < g and 0 <= col < g):
            raise IndexError(f"token coords {coords} out of range")
        return t * geometry.patches_per_slab + row * g + col
    z, y, x = coords
    dz, dy, dx = geometry.cells
    if not (0 <= z < dz and 0 <= y < dy and 0 <= x < dx):
        raise IndexError(f"voxel coords {coords} out of range")
    return z * dy * dx + y * dx + x


def unflatten_index(geometry: LatticeGeometry, i: int) -> tuple[int, ...]:
    """Inverse of :func:`flatten_index`."""
    if not (0 <= i < geometry.size):
        raise IndexError(f"lattice index {i} out of range [0, {geometry.size})")
    if geometry.kind == "token":
        g = geometry.grid
        t, p = divmod(i, geometry.patches_per_slab)
        row, col = divmod(p, g)
        return (t, row, col)
    _, dy, dx = geometry.cells
    z, r = divmod(i, dy * dx)
    y, x = divmod(r, dx)
    return (z, y, x)


def nn_resize_2d(image: np.ndarray, side: int) -> np.ndarray:
    """Nearest-neighbour resize of the trailing two axes to side x side.

    Source pixel for output index j is floor((j + 0.5) * H / S), i.e. the
    pixel containing the output cell center.  Identity when H == W == S.
    """
    h, w = image.shape[-2], image.shape[-1]
    rows = np.minimum(((np.arange(side) + 0.5) * h / side).astype(np.int64), h - 1)
    cols = np.minimum(((np.arange(side) + 0.5) * w / side).astype(np.int64), w - 1)
    return image[..., rows[:, None], cols[None, :]]


def nn_resize_3d(grid: np.ndarray, cells: tuple[int, int, int]) -> np.ndarray:
    """Nearest-neighbour resample of a (D, H, W) grid to `cells`."""
    idx = []
    for ax, n_out in enumerate(cells):
        n_in = grid.shape[ax]
        idx.append(np.minimum(((np.arange(n_out) + 0.5) * n_in / n_out).astype(np.int64),
                              n_in - 1))
    return grid[np.ix_(idx[0], idx[1], idx[2])]


def patch_center_pixels(side: int, patch: int) -> np.ndarray:
    """Pixel index sampled for each patch row/col: row*P + P//2."""
    g = side // patch
    return np.arange(g) * patch + patch // 2


@dataclass(frozen=True)
class AugmentParams:
    """One joint rot90/flip draw, applied identically to image and masks."""

    k: int = 0             # in-plane 90-degree rotations
    flip_d: bool = False
    flip_h: bool = False
    flip_w: bool = False


def draw_augment(rng: np.random.Generator, allow_rot90: bool = True,
                 allow_flip_d: bool = True, allow_flip_h: bool = True,
                 allow_flip_w: bool = True) -> AugmentParams:
    k = int(rng.integers(0, 4)) if allow_rot90 else 0
    fd = bool(rng.integers(0, 2)) if allow_flip_d else False
    fh = bool(rng.integers(0, 2)) if allow_flip_h else False
    fw = bool(rng.integers(0, 2)) if allow_flip_w else False
    return AugmentParams(k=k, flip_d=fd, flip_h=fh, flip_w=fw)


def _apply_rot90_flip(grid: np.ndarray, params: AugmentParams) -> np.ndarray:
    out = np.rot90(grid, k=params.k, axes=(1, 2))
    if params.flip_d:
        out = out[::-1, :, :]
    if params.flip_h:
        out = out[:, ::-1, :]
    if params.flip_w:
        out = out[:, :, ::-1]
    return np.ascontiguousarray(out)


def joint_rot90_flip(volume: Volume, masks: list[np.ndarray],
                     params: AugmentParams) -> tuple[Volume, list[np.ndarray]]:
    """Apply the same in-plane rotation and axis flips to volume and masks."""
    if params.k not in (0, 1, 2, 3):
        raise DataError(f"rotation count must be in 0..3, got {params.k}")
    for m in masks:
        if m.shape != volume.shape:
            raise DataError(
                f"mask shape {m.shape} does not match volume shape {volume.shape}")
    sz, sy, sx = volume.spacing
    spacing = (sz, sx, sy) if params.k % 2 == 1 else (sz, sy, sx)
    new_vol = Volume(data=_apply_rot90_flip(volume.data, params), spacing=spacing)
    new_masks = [_apply_rot90_flip(m, params) for m in masks]
    return new_vol, new_masks


# ---------------------------------------------------------------------------
# OCTV1 / OCTM1 binary file formats
# ---------------------------------------------------------------------------
#
# OCTV1 (volume): magic "OCTV", version u32=1, D,H,W u32, spacing 3*f32,
#   dtype u8 (0 = f32), then D*H*W raw values in raster order.
# OCTM1 (masks): magic "OCTM", version u32=1, D,H,W u32, dtype u8
#   (0 = per-organ u8 indicators, 1 = u16 class-id grid), organ-count u16,
#   then per organ a name table entry (u16 length + utf-8 bytes).  dtype 0
#   payload is organ-count stacked u8 grids; dtype 1 payload is one u16 grid.

_VOL_MAGIC = b"OCTV"
_MASK_MAGIC = b"OCTM"


def write_volume(path, volume: Volume) -> None:
    d, h, w = volume.shape
    with open(path, "wb") as f:
        f.write(_VOL_MAGIC)
        f.write(struct.pack("<IIII", 1, d, h, w))
        f.write(struct.pack("<fff", *volume.spacing))
        f.write(struct.pack("<B", 0))
        f.write(np.ascontiguousarray(volume.data, dtype="<f4").tobytes())


def read_volume(path) -> Volume:
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != _VOL_MAGIC:
            raise DataError(f"{path}: bad magic {magic!r}, expected OCTV")
        version, d, h, w = struct.unpack("<IIII", f.read(16))
        if version != 1:
            raise DataError(f"{path}: unsupported OCTV version {version}")
        spacing = struct.unpack("<fff", f.read(12))
        (dtype_code,) = struct.unpack("<B", f.read(1))
        if dtype_code != 0:
            raise DataError(f"{path}: unsupported volume dtype code {dtype_code}")
        raw = f.read(4 * d * h * w)
        if len(raw) != 4 * d * h * w:
            raise DataError(f"{path}: truncated volume payload")
        payload = np.frombuffer(raw, dtype="<f4")
    data = payload.astype(np.float64).reshape(d, h, w)
    return Volume(data=data, spacing=(float(spacing[0]), float(spacing[1]), float(spacing[2])))


def write_organ_masks(path, masks: dict[str, np.ndarray]) -> None:
    """Write per-organ binary grids (all sharing one shape) as OCTM1 dtype 0."""
    names = list(masks)
    if not names:
        raise DataError("cannot write an empty organ mask set")
    shape = masks[names[0]].shape
    with open(path, "wb") as f:
        f.write(_MASK_MAGIC)
        f.write(struct.pack("<IIII", 1, *shape))
        f.write(struct.pack("<BH", 0, len(names)))
        for name in names:
            raw = name.encode("utf-8")
            f.write(struct.pack("<H", len(raw)))
            f.write(raw)
        for name in names:
            m = masks[name]
            if m.shape != shape:
                raise DataError(f"organ {name}: shape {m.shape} != {shape}")
            f.write(np.ascontiguousarray(m != 0, dtype=np.uint8).tobytes())


def write_class_grid(path, grid: np.ndarray) -> None:
    """Write a raw segmentation (u16 class ids) as OCTM1 dtype 1."""
    with open(path, "wb") as f:
        f.write(_MASK_MAGIC)
        f.write(struct.pack("<IIII", 1, *grid.shape))
        f.write(struct.pack("<BH", 1, 0))
        f.write(np.ascontiguousarray(grid, dtype="<u2").tobytes())


def read_masks(path):
    """Read an OCTM1 file.

    Returns ("organs", dict[str, ndarray]) for dtype 0 or
    ("classes", ndarray) for dtype 1.
    """
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != _MASK_MAGIC:
            raise DataError(f"{path}: bad magic {magic!r}, expected OCTM")
        version, d, h, w = struct.unpack("<IIII", f.read(16))
        if version != 1:
            raise DataError(f"{path}: unsupported OCTM version {version}")
        dtype_code, count = struct.unpack("<BH", f.read(3))
        if dtype_code == 0:
            names = []
            for _ in range(count):
                (n,) = struct.unpack("<H", f.read(2))
                names.append(f.read(n).decode("utf-8"))
            out = {}
            for name in names:
                raw = f.read(d * h * w)
                if len(raw) != d * h * w:
                    raise DataError(f"{path}: truncated mask payload for {name}")
                out[name] = np.frombuffer(raw, dtype=np.uint8).reshape(d, h, w).copy()
            return "organs", out
        if dtype_code == 1:
            raw = f.read(2 * d * h * w)
            if len(raw) != 2 * d * h * w:
                raise DataError(f"{path}: truncated class-id payload")
            return "classes", np.frombuffer(raw, dtype="<u2").astype(np.int64).reshape(d, h, w)
        raise DataError(f"{path}: unknown mask dtype code {dtype_code}")
