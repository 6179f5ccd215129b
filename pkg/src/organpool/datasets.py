"""Dataset manifests: a JSON index over per-study artifact files.

A manifest ties together the label schema, the lattice geometry and one
record per study (feature lattice and/or volume + segmentation, plus the
{0, 1, -1} target vector). Loading validates every record and names the
offending study id and field on failure.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError
from .lattice import LatticeGeometry, Volume, read_masks, read_volume
from .masks import LabelSchema, load_schema

SPLITS = ("train", "val", "test")


@dataclass
class StudyRecord:
    study_id: str
    targets: np.ndarray
    features: np.ndarray | None = None
    volume: Volume | None = None
    segmentation: np.ndarray | None = None


@dataclass
class Dataset:
    root: str
    schema: LabelSchema
    geometry: LatticeGeometry
    d: int
    splits: dict[str, list[StudyRecord]] = field(default_factory=dict)

    def split(self, name: str) -> list[StudyRecord]:
        if name not in self.splits:
            raise DataError(f"manifest has no split {name!r}")
        return self.splits[name]


def _check_targets_row(raw, n_labels: int, study_id: str) -> np.ndarray:
    arr = np.asarray(raw, dtype=np.int64)
    if arr.ndim != 1 or arr.shape[0] != n_labels:
        raise DataError(
            f"study {study_id!r} field 'targets': expected {n_labels} entries, "
            f"got shape {arr.shape}")
    bad = ~np.isin(arr, (-1, 0, 1))
    if bad.any():
        raise DataError(
            f"study {study_id!r} field 'targets': values must be -1, 0 or 1 "
            f"(offending entry {arr[bad][0]})")
    return arr


def _resolve(root: str, rel, study_id: str, fieldname: str) -> str:
    path = os.path.join(root, rel)
    if not os.path.exists(path):
        raise DataError(f"study {study_id!r} field {fieldname!r}: missing file {path}")
    return path


def load_dataset(manifest_path, load_volumes: bool = True) -> Dataset:
    manifest_path = os.fspath(manifest_path)
    try:
        with open(manifest_path, "r", encoding="utf-8") as f:
            manifest = json.load(f)
    except FileNotFoundError:
        raise DataError(f"manifest not found: {manifest_path}")
    except json.JSONDecodeError as exc:
        raise DataError(f"manifest is not valid JSON: {exc}")

    root = os.path.dirname(manifest_path)
    for key in ("schema", "geometry", "records"):
        if key not in manifest:
            raise DataError(f"manifest missing required key {key!r}")
    schema = load_schema(os.path.join(root, manifest["schema"]))
    geometry = LatticeGeometry.from_dict(manifest["geometry"])
    n_labels = schema.n_labels
    d = int(manifest.get("d", 0))

    splits: dict[str, list[StudyRecord]] = {}
    for split, rows in manifest["records"].items():
        records = []
        for row in rows:
            sid = row.get("id")
            if not sid:
                raise DataError(f"split {split!r} contains a record without an 'id'")
            if "targets" not in row:
                raise DataError(f"study {sid!r} field 'targets': missing")
            targets = _check_targets_row(row["targets"], n_labels, sid)
            record = StudyRecord(study_id=sid, targets=targets)
            if "features" in row:
                path = _resolve(root, row["features"], sid, "features")
                feats = np.load(path)
                if feats.ndim != 2 or feats.shape[0] != geometry.size:
                    raise DataError(
                        f"study {sid!r} field 'features': expected "
                        f"({geometry.size}, d) array, got shape {feats.shape}")
                if d and feats.shape[1] != d:
                    raise DataError(
                        f"study {sid!r} field 'features': width {feats.shape[1]} "
                        f"does not match manifest d={d}")
                record.features = np.asarray(feats, dtype=np.float64)
            if load_volumes and "volume" in row:
                record.volume = read_volume(_resolve(root, row["volume"], sid, "volume"))
            if load_volumes and "segmentation" in row:
                kind, payload = read_masks(
                    _resolve(root, row["segmentation"], sid, "segmentation"))
                if kind != "classes":
                    raise DataError(
                        f"study {sid!r} field 'segmentation': expected a class-id "
                        f"grid, got per-organ masks")
                record.segmentation = payload
            if record.features is None and record.volume is None:
                raise DataError(
                    f"study {sid!r}: record carries neither features nor a volume")
            records.append(record)
        splits[split] = records
    return Dataset(root=root, schema=schema, geometry=geometry, d=d, splits=splits)


def write_manifest(root, schema_rel: str, geometry: LatticeGeometry, d: int,
                   records: dict[str, list[dict]], extra: dict | None = None) -> str:
    """Write a manifest.json under root; record dicts are stored verbatim."""
    root = os.fspath(root)
    manifest = {"schema": schema_rel, "geometry": geometry.to_dict(), "d": d,
                "records": records}
    if extra:
        manifest.update(extra)
    path = os.path.join(root, "manifest.json")
    with open(path, "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")
    return path


def prevalence_report(dataset: Dataset) -> dict:
    """Per split and label: counts of positives, negatives and missing."""
    report: dict = {}
    for split, records in dataset.splits.items():
        stack = np.stack([r.targets for r in records]) if records else \
            np.zeros((0, dataset.schema.n_labels), dtype=np.int64)
        rows = {}
        for j, label in enumerate(dataset.schema.labels):
            col = stack[:, j] if stack.size else stack.reshape(0)
            pos = int(np.sum(col == 1))
            neg = int(np.sum(col == 0))
            miss = int(np.sum(col == -1))
            valid = pos + neg
            rows[label] = {"positives": pos, "negatives": neg, "missing": miss,
                           "prevalence": (pos / valid) if valid else None}
        report[split] = rows
    return report
