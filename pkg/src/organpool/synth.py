"""Synthetic desk-scale datasets with planted organ-localized signals.

Each study is a triple: a feature lattice (standard normal base plus
planted label directions), an HU volume whose organ blocks carry
label-dependent intensity and size, and a class-id segmentation grid.
Labels come in five kinds:

  focal    y=1 adds signal * v_label to a random subset of the organ's
           lattice rows; a distractor plants the same direction outside
           the organ with probability 0.5 regardless of y (the confound
           that punishes mask-free pooling)
  diffuse  like focal but over every row of the organ
  size     y=1 enlarges the organ block; no feature-space trace at all,
           so only the volume scalar can carry it
  density  y=1 shifts the organ's HU level; again no feature-space trace
  global   y=1 adds a weak signal to every lattice row (an "other" label)

All plantings are gated by signal > 0, so a signal=0 dataset is an exact
null: labels are independent of everything observable.
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass

import numpy as np

from .errors import DataError
from .lattice import LatticeGeometry, Volume, write_class_grid, write_volume
from .masks import LabelSchema, project_mask_to_lattice, save_schema
from .rng import keyed_rng

LABEL_KINDS = ("focal", "diffuse", "size", "density", "global")


@dataclass(frozen=True)
class OrganPlan:
    """One contiguous organ block on the voxel grid (half-open bounds)."""

    name: str
    class_id: int
    lo: tuple[int, int, int]
    hi: tuple[int, int, int]
    hu: float
    grow_lo: tuple[int, int, int] | None = None   # enlarged block for size labels
    grow_hi: tuple[int, int, int] | None = None


@dataclass(frozen=True)
class LabelPlan:
    name: str
    organ: str          # organ name or "other"
    kind: str

    def __post_init__(self):
        if self.kind not in LABEL_KINDS:
            raise DataError(f"unknown label kind {self.kind!r}")


DEFAULT_ORGANS = (
    OrganPlan("organ_alpha", 1, (1, 2, 2), (5, 8, 8), hu=50.0),
    OrganPlan("organ_beta", 2, (1, 9, 2), (5, 14, 8), hu=0.0,
              grow_lo=(1, 8, 2), grow_hi=(6, 14, 9)),
    OrganPlan("organ_gamma", 3, (3, 2, 9), (7, 8, 14), hu=-200.0),
    OrganPlan("organ_delta", 4, (3, 9, 11), (7, 14, 16), hu=150.0),
)

DEFAULT_LABELS = (
    LabelPlan("alpha_lesion", "organ_alpha", "focal"),
    LabelPlan("alpha_density", "organ_alpha", "density"),
    LabelPlan("beta_lesion", "organ_beta", "focal"),
    LabelPlan("beta_megaly", "organ_beta", "size"),
    LabelPlan("gamma_lesion", "organ_gamma", "focal"),
    LabelPlan("gamma_diffuse", "organ_gamma", "diffuse"),
    LabelPlan("delta_lesion", "organ_delta", "focal"),
    LabelPlan("other_marker", "other", "global"),
)


@dataclass(frozen=True)
class SynthSpec:
    n_train: int = 400
    n_val: int = 100
    n_test: int = 200
    d: int = 16
    volume_shape: tuple[int, int, int] = (8, 16, 16)
    spacing: tuple[float, float, float] = (2.0, 1.0, 1.0)
    cells: tuple[int, int, int] = (4, 8, 8)
    organs: tuple[OrganPlan, ...] = DEFAULT_ORGANS
    labels: tuple[LabelPlan, ...] = DEFAULT_LABELS
    signal: float = 1.0
    distractor: float = 1.0
    missing_rate: float = 0.1
    seed: int = 25
    dilation_mm: float = 1.0
    hu_background: float = -500.0
    background_noise: float = 30.0
    organ_noise: float = 20.0
    density_shift: float = 100.0
    global_amplitude: float = 0.4

    def __post_init__(self):
        if not 0.0 <= self.missing_rate <= 1.0:
            raise DataError(f"missing_rate must lie in [0, 1], got {self.missing_rate}")
        if self.d < len(self.labels):
            raise DataError(
                f"d={self.d} cannot hold {len(self.labels)} orthonormal label directions")
        organ_names = {o.name for o in self.organs}
        for lp in self.labels:
            if lp.organ != "other" and lp.organ not in organ_names:
                raise DataError(f"label {lp.name!r} anchored to unknown organ {lp.organ!r}")
        shape = self.volume_shape
        for organ in self.organs:
            for lo, hi in ((organ.lo, organ.hi),) + (
                    ((organ.grow_lo, organ.grow_hi),) if organ.grow_lo else ()):
                for axis in range(3):
                    if not 0 <= lo[axis] < hi[axis] <= shape[axis]:
                        raise DataError(
                            f"organ {organ.name!r} block {lo}..{hi} does not fit "
                            f"volume shape {shape}")

    @property
    def geometry(self) -> LatticeGeometry:
        return LatticeGeometry(kind="voxel", cells=self.cells)


def build_schema(spec: SynthSpec) -> LabelSchema:
    return LabelSchema(
        labels=tuple(lp.name for lp in spec.labels),
        kappa={lp.name: lp.organ if lp.organ != "other" else "other"
               for lp in spec.labels},
        merge_map={o.class_id: o.name for o in spec.organs},
        dilation_mm={o.name: spec.dilation_mm for o in spec.organs})


def label_directions(spec: SynthSpec) -> np.ndarray:
    """Orthonormal (d, L) direction matrix, one column per label."""
    rng = keyed_rng(spec.seed, "directions")
    raw = rng.normal(size=(spec.d, len(spec.labels)))
    q, r = np.linalg.qr(raw)
    return q * np.sign(np.diag(r))[None, :]


def _block_grid(shape, lo, hi) -> np.ndarray:
    grid = np.zeros(shape, dtype=np.uint8)
    grid[lo[0]:hi[0], lo[1]:hi[1], lo[2]:hi[2]] = 1
    return grid


def generate_study(spec: SynthSpec, split: str, index: int,
                   directions: np.ndarray) -> dict:
    """One study: features, volume, segmentation and {0,1,-1} targets."""
    study_id = f"{split}_{index:04d}"
    rng = keyed_rng(spec.seed, "study", study_id)
    n_labels = len(spec.labels)
    y = (rng.random(n_labels) < 0.5).astype(np.int64)
    active = spec.signal > 0

    size_by_organ = {lp.organ: j for j, lp in enumerate(spec.labels) if lp.kind == "size"}
    density_by_organ = {lp.organ: j for j, lp in enumerate(spec.labels)
                        if lp.kind == "density"}
    grids = {}
    for organ in spec.organs:
        j = size_by_organ.get(organ.name)
        enlarged = (active and j is not None and y[j] == 1 and organ.grow_lo is not None)
        lo, hi = (organ.grow_lo, organ.grow_hi) if enlarged else (organ.lo, organ.hi)
        grids[organ.name] = _block_grid(spec.volume_shape, lo, hi)

    seg = np.zeros(spec.volume_shape, dtype=np.int64)
    vol = spec.hu_background + rng.normal(0.0, spec.background_noise,
                                          size=spec.volume_shape)
    for organ in spec.organs:
        inside = grids[organ.name] > 0
        seg[inside] = organ.class_id
        level = organ.hu
        j = density_by_organ.get(organ.name)
        if active and j is not None and y[j] == 1:
            level += spec.density_shift
        vol[inside] = level + rng.normal(0.0, spec.organ_noise,
                                         size=int(np.count_nonzero(inside)))

    geometry = spec.geometry
    n_rows = geometry.size
    features = rng.normal(size=(n_rows, spec.d))
    rows_by_organ = {name: np.flatnonzero(project_mask_to_lattice(grid, geometry))
                     for name, grid in grids.items()}
    for rows in rows_by_organ.values():
        if rows.size == 0:
            raise DataError("organ block projects to an empty lattice support")
    all_rows = np.arange(n_rows)
    for j, lp in enumerate(spec.labels):
        v = directions[:, j]
        if lp.kind in ("focal", "diffuse"):
            rows = rows_by_organ[lp.organ]
            if active and y[j] == 1:
                if lp.kind == "diffuse":
                    chosen = rows
                else:
                    count = int(rng.integers(max(1, rows.size // 3), rows.size + 1))
                    chosen = rng.choice(rows, size=count, replace=False)
                features[chosen] += spec.signal * v
            if rng.random() < 0.5 and spec.distractor != 0.0:
                outside = np.setdiff1d(all_rows, rows, assume_unique=True)
                count = int(rng.integers(max(1, rows.size // 3), rows.size + 1))
                chosen = rng.choice(outside, size=count, replace=False)
                features[chosen] += spec.distractor * v
        elif lp.kind == "global":
            if active and y[j] == 1:
                features += spec.global_amplitude * spec.signal * v
        # size and density labels leave the features untouched on purpose

    missing = rng.random(n_labels) < spec.missing_rate
    targets = np.where(missing, -1, y)
    return {"id": study_id, "features": features,
            "volume": Volume(data=vol, spacing=spec.spacing),
            "segmentation": seg, "targets": targets}


def synth_generate(spec: SynthSpec, out_dir) -> str:
    """Write a full dataset (schema, manifest, per-study files); returns
    the manifest path."""
    out_dir = os.fspath(out_dir)
    studies_dir = os.path.join(out_dir, "studies")
    os.makedirs(studies_dir, exist_ok=True)
    schema = build_schema(spec)
    save_schema(schema, os.path.join(out_dir, "schema.schema"))
    directions = label_directions(spec)

    records: dict[str, list[dict]] = {}
    for split, count in (("train", spec.n_train), ("val", spec.n_val),
                         ("test", spec.n_test)):
        rows = []
        for index in range(count):
            study = generate_study(spec, split, index, directions)
            sid = study["id"]
            feat_rel = f"studies/{sid}.features.npy"
            vol_rel = f"studies/{sid}.volume.oct"
            seg_rel = f"studies/{sid}.seg.oct"
            np.save(os.path.join(out_dir, feat_rel), study["features"])
            write_volume(os.path.join(out_dir, vol_rel), study["volume"])
            write_class_grid(os.path.join(out_dir, seg_rel), study["segmentation"])
            rows.append({"id": sid, "features": feat_rel, "volume": vol_rel,
                         "segmentation": seg_rel,
                         "targets": [int(t) for t in study["targets"]]})
        records[split] = rows

    manifest = {
        "schema": "schema.schema",
        "geometry": spec.geometry.to_dict(),
        "d": spec.d,
        "spacing": list(spec.spacing),
        "records": records,
        "synth_spec": asdict(spec),
    }
    manifest_path = os.path.join(out_dir, "manifest.json")
    with open(manifest_path, "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")
    return manifest_path
