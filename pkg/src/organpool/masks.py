"""Organ-group masks: schema, class merging, dilation, projection, scalars.

A label schema names the L study labels, assigns each to one organ group
(or to "other"), maps raw segmentation class ids onto the groups, and
fixes a metric dilation radius per group.  Masks flow: raw class-id grid
-> merged per-organ binary grids -> mm dilation -> projection onto the
feature lattice -> per-organ scalar triple (volume, mean HU, border flag).
"""

from __future__ import annotations

import configparser
import hashlib
import io
import json
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .errors import DataError, GeometryError, SchemaError
from .lattice import (LatticeGeometry, Volume, nn_resize_2d, nn_resize_3d,
                      patch_center_pixels)

OTHER_GROUP = "other"
SCALAR_NAMES = ("volume", "hu", "border")
STD_FLOOR = 1e-6


@dataclass(frozen=True)
class LabelSchema:
    """Label list, label-to-organ assignment, class merges and dilations."""

    labels: tuple[str, ...]
    kappa: dict[str, str]            # label -> organ group or "other"
    merge_map: dict[int, str]        # raw class id -> organ group
    dilation_mm: dict[str, float]    # organ group -> radius

    def __post_init__(self):
        if len(set(self.labels)) != len(self.labels):
            raise SchemaError("duplicate label names")
        if not self.labels:
            raise SchemaError("schema has no labels")
        missing = [l for l in self.labels if l not in self.kappa]
        if missing:
            raise SchemaError(f"labels without an organ assignment: {missing}")
        extra = [l for l in self.kappa if l not in self.labels]
        if extra:
            raise SchemaError(f"kappa entries for unknown labels: {extra}")
        if OTHER_GROUP in self.dilation_mm or OTHER_GROUP in self.merge_map.values():
            raise SchemaError('"other" is reserved and cannot be a masked group')
        for label, group in self.kappa.items():
            if group == OTHER_GROUP:
                continue
            if group not in self.merge_map.values():
                raise SchemaError(f"group {group!r} (label {label!r}) missing from merge_map")
            if group not in self.dilation_mm:
                raise SchemaError(f"group {group!r} (label {label!r}) missing from dilation_mm")
        for group in self.merge_map.values():
            if group not in self.dilation_mm:
                raise SchemaError(f"merge_map group {group!r} missing from dilation_mm")
        for group, r in self.dilation_mm.items():
            if r < 0:
                raise SchemaError(f"dilation radius for {group!r} must be >= 0, got {r}")

    @property
    def n_labels(self) -> int:
        return len(self.labels)

    @property
    def organs(self) -> tuple[str, ...]:
        """Masked organ groups in schema order (excludes "other")."""
        return tuple(self.dilation_mm)

    def labels_for(self, group: str) -> tuple[str, ...]:
        return tuple(l for l in self.labels if self.kappa[l] == group)

    @property
    def other_labels(self) -> tuple[str, ...]:
        return self.labels_for(OTHER_GROUP)

    def label_indices_for(self, group: str) -> np.ndarray:
        return np.array([i for i, l in enumerate(self.labels) if self.kappa[l] == group],
                        dtype=np.int64)

    def content_hash(self) -> str:
        """Stable hash of the semantic content, used to pin checkpoints."""
        payload = {
            "labels": list(self.labels),
            "kappa": {l: self.kappa[l] for l in self.labels},
            "merge_map": {str(k): v for k, v in sorted(self.merge_map.items())},
            "dilation_mm": {g: self.dilation_mm[g] for g in self.organs},
        }
        raw = json.dumps(payload, sort_keys=True).encode("utf-8")
        return hashlib.sha256(raw).hexdigest()


def _make_parser() -> configparser.ConfigParser:
    parser = configparser.ConfigParser(inline_comment_prefixes=(";",),
                                       interpolation=None)
    parser.optionxform = str    # label and group names are case-sensitive
    return parser


def load_schema(path) -> LabelSchema:
    parser = _make_parser()
    read = parser.read(path)
    if not read:
        raise SchemaError(f"cannot read schema file {path}")
    for section in ("labels", "kappa", "merge_map", "dilation_mm"):
        if section not in parser:
            raise SchemaError(f"{path}: missing [{section}] section")
    try:
        order = sorted(parser["labels"], key=lambda k: int(k))
    except ValueError as exc:
        raise SchemaError(f"{path}: [labels] keys must be integers") from exc
    labels = tuple(parser["labels"][k] for k in order)
    kappa = dict(parser["kappa"])
    try:
        merge_map = {int(k): v for k, v in parser["merge_map"].items()}
    except ValueError as exc:
        raise SchemaError(f"{path}: [merge_map] keys must be integer class ids") from exc
    try:
        dilation = {g: float(v) for g, v in parser["dilation_mm"].items()}
    except ValueError as exc:
        raise SchemaError(f"{path}: [dilation_mm] values must be numeric") from exc
    return LabelSchema(labels=labels, kappa=kappa, merge_map=merge_map,
                       dilation_mm=dilation)


def save_schema(schema: LabelSchema, path) -> None:
    parser = _make_parser()
    parser["labels"] = {str(i): name for i, name in enumerate(schema.labels)}
    parser["kappa"] = dict(schema.kappa)
    parser["merge_map"] = {str(k): v for k, v in schema.merge_map.items()}
    parser["dilation_mm"] = {g: repr(r) for g, r in schema.dilation_mm.items()}
    buf = io.StringIO()
    parser.write(buf)
    with open(path, "w", encoding="utf-8") as f:
        f.write(buf.getvalue())


def merge_classes(raw_seg: np.ndarray,
                  schema: LabelSchema) -> tuple[dict[str, np.ndarray], int]:
    """Union raw classes into per-organ binary grids.

    Unknown class ids fall to background; their voxel count is returned so
    callers can report them.  Class id 0 is always background.
    """
    seg = np.asarray(raw_seg)
    if not np.issubdtype(seg.dtype, np.integer):
        raise DataError(f"raw segmentation must be integer class ids, got {seg.dtype}")
    grids = {g: np.zeros(seg.shape, dtype=np.uint8) for g in schema.organs}
    for class_id, group in schema.merge_map.items():
        grids[group] |= (seg == class_id).astype(np.uint8)
    known = np.isin(seg, [0, *schema.merge_map])
    n_unknown = int(np.count_nonzero(~known))
    return grids, n_unknown


def dilate_metric(mask: np.ndarray, r_mm: float,
                  spacing: tuple[float, float, float]) -> np.ndarray:
    """Grow a binary grid by r_mm of anisotropic Euclidean distance.

    A voxel is set iff its physical distance to the nearest originally-set
    voxel is at most r_mm.  r_mm = 0 returns the input unchanged.
    """
    if r_mm < 0:
        raise DataError(f"dilation radius must be >= 0, got {r_mm}")
    grid = np.asarray(mask) != 0
    if r_mm == 0 or not grid.any():
        return grid.astype(np.uint8)
    dist = ndimage.distance_transform_edt(~grid, sampling=spacing)
    return (dist <= r_mm).astype(np.uint8)


def project_mask_to_lattice(mask_grid: np.ndarray, geometry: LatticeGeometry,
                            centers: list[int] | None = None) -> np.ndarray:
    """Indicators m_i over the lattice, reusing the image geometry.

    token kind: take the axial slice at each tri center, nearest-neighbour
    resize to S x S, sample the patch-center pixel of every P x P patch,
    flatten slabs in raster order.  voxel kind: nearest-neighbour resample
    the grid to the cell counts and flatten.
    """
    grid = (np.asarray(mask_grid) != 0).astype(np.float64)
    if grid.ndim != 3:
        raise GeometryError(f"mask grid must be 3-D, got shape {grid.shape}")
    if geometry.kind == "token":
        if centers is None or len(centers) != geometry.slabs:
            raise GeometryError(
                f"token projection needs {geometry.slabs} tri centers, got "
                f"{None if centers is None else len(centers)}")
        pix = patch_center_pixels(geometry.side, geometry.patch)
        out = np.empty((geometry.slabs, geometry.grid, geometry.grid))
        for t, c in enumerate(centers):
            if not (0 <= c < grid.shape[0]):
                raise GeometryError(f"tri center {c} outside grid depth {grid.shape[0]}")
            plane = nn_resize_2d(grid[c], geometry.side)
            out[t] = plane[np.ix_(pix, pix)]
        return out.reshape(-1)
    return nn_resize_3d(grid, geometry.cells).reshape(-1)


def bounding_box_region(grid: np.ndarray) -> np.ndarray:
    """Tight axis-aligned filled box over all set elements."""
    arr = np.asarray(grid) != 0
    out = np.zeros(arr.shape, dtype=np.uint8)
    idx = np.nonzero(arr)
    if idx[0].size == 0:
        return out
    box = tuple(slice(int(ax.min()), int(ax.max()) + 1) for ax in idx)
    out[box] = 1
    return out


@dataclass(frozen=True)
class OrganStats:
    mean_volume: float
    std_volume: float
    mean_hu: float
    std_hu: float
    absent: bool = False       # organ empty in every training study


@dataclass(frozen=True)
class ScalarStats:
    """Training-set z-score parameters for the per-organ scalars."""

    per_organ: dict[str, OrganStats] = field(default_factory=dict)

    def save(self, path) -> None:
        parser = _make_parser()
        for organ, s in self.per_organ.items():
            parser[organ] = {
                "mean_volume": repr(s.mean_volume), "std_volume": repr(s.std_volume),
                "mean_hu": repr(s.mean_hu), "std_hu": repr(s.std_hu),
                "absent": str(int(s.absent)),
            }
        buf = io.StringIO()
        parser.write(buf)
        with open(path, "w", encoding="utf-8") as f:
            f.write(buf.getvalue())

    @staticmethod
    def load(path) -> "ScalarStats":
        parser = _make_parser()
        if not parser.read(path):
            raise DataError(f"cannot read scalar stats file {path}")
        out = {}
        for organ in parser.sections():
            sec = parser[organ]
            out[organ] = OrganStats(
                mean_volume=float(sec["mean_volume"]), std_volume=float(sec["std_volume"]),
                mean_hu=float(sec["mean_hu"]), std_hu=float(sec["std_hu"]),
                absent=bool(int(sec.get("absent", "0"))))
        return ScalarStats(per_organ=out)


def raw_organ_scalars(volume: Volume, mask_grid: np.ndarray) -> tuple[float, float, float]:
    """Physical volume (mm^3), clipped mean HU, border flag, un-normalized.

    The mean HU of an empty mask is 0 by convention; its volume is 0 and
    its border flag is 0.
    """
    grid = np.asarray(mask_grid) != 0
    if grid.shape != volume.shape:
        raise GeometryError(f"mask shape {grid.shape} != volume shape {volume.shape}")
    count = int(np.count_nonzero(grid))
    vol_mm3 = count * volume.voxel_mm3
    if count == 0:
        return vol_mm3, 0.0, 0.0
    clipped = np.clip(volume.data[grid], -1000.0, 1000.0)
    mean_hu = float(clipped.mean())
    border = float(grid[0].any() or grid[-1].any()
                   or grid[:, 0].any() or grid[:, -1].any()
                   or grid[:, :, 0].any() or grid[:, :, -1].any())
    return vol_mm3, mean_hu, border


def fit_scalar_stats(raw_per_study: list[dict[str, tuple[float, float, float]]],
                     organs: tuple[str, ...]) -> ScalarStats:
    """Fit per-organ z-score parameters from raw training scalars.

    Uses the sample standard deviation (ddof=1), floored at 1e-6.  Needs
    at least two studies; an organ empty in all of them is flagged absent.
    """
    n = len(raw_per_study)
    if n < 2:
        raise DataError(f"scalar stats need >= 2 training studies, got {n}")
    out = {}
    for organ in organs:
        vols = np.array([s[organ][0] for s in raw_per_study])
        hus = np.array([s[organ][1] for s in raw_per_study])
        out[organ] = OrganStats(
            mean_volume=float(vols.mean()),
            std_volume=float(max(vols.std(ddof=1), STD_FLOOR)),
            mean_hu=float(hus.mean()),
            std_hu=float(max(hus.std(ddof=1), STD_FLOOR)),
            absent=bool(np.all(vols == 0.0)))
    return ScalarStats(per_organ=out)


def compute_organ_scalars(volume: Volume, mask_grid: np.ndarray, organ: str,
                          stats: ScalarStats) -> tuple[float, float, float]:
    """z-scored (volume, mean HU) plus the raw border flag for one organ."""
    if organ not in stats.per_organ:
        raise DataError(f"no scalar stats fitted for organ {organ!r}")
    raw_vol, raw_hu, border = raw_organ_scalars(volume, mask_grid)
    s = stats.per_organ[organ]
    v_z = (raw_vol - s.mean_volume) / s.std_volume
    mu_z = (raw_hu - s.mean_hu) / s.std_hu
    return float(v_z), float(mu_z), border


def scalar_vector(triple: tuple[float, float, float],
                  scalar_set: tuple[str, ...]) -> np.ndarray:
    """Select scalars by name in canonical (volume, hu, border) order."""
    by_name = dict(zip(SCALAR_NAMES, triple))
    unknown = [s for s in scalar_set if s not in by_name]
    if unknown:
        raise DataError(f"unknown scalar names {unknown}, expected subset of {SCALAR_NAMES}")
    ordered = tuple(s for s in SCALAR_NAMES if s in scalar_set)
    return np.array([by_name[s] for s in ordered], dtype=np.float64)
