"""Experiment harness: staged train/calibrate/eval runs over manifest datasets.

A run is a pure function of (config, dataset bytes): load -> prepare
(augment, merge/dilate/project masks, fit scalar stats on train only) ->
train -> fit calibration on val -> frozen eval on test.  Every artifact
lands in a fixed directory layout:

    out_dir/
      checkpoint/   model.ckpt, scalar_stats.ini (when scalars are used)
      calib/        calibration.json
      reports/      test_metrics.{json,txt}, val_metrics.json, per_class.csv
      maps/         per-organ weight maps (written by export_weight_maps)
      log/          train_log.jsonl
      config_echo.json

Stage failures re-raise the original error type with a [stage] tag.
"""

from __future__ import annotations

import json
import os
from contextlib import contextmanager
from dataclasses import asdict, dataclass, replace

import numpy as np

from .calibration import CalibrationTable, apply_calibration, fit_calibration
from .datasets import Dataset, load_dataset
from .encoder import init_encoder_params, patch_dim, patch_matrix
from .errors import ConfigError, DataError, EngineError, NumericError
from .heads import (MODES, canonical_scalar_set, forward_study, load_checkpoint,
                    save_checkpoint)
from .lattice import LatticeGeometry, clip_normalize_hu, draw_augment, joint_rot90_flip
from .masks import (LabelSchema, ScalarStats, bounding_box_region, dilate_metric,
                    fit_scalar_stats, merge_classes, project_mask_to_lattice,
                    raw_organ_scalars)
from .metrics import MetricReport, evaluate_labels, report_to_csv, report_to_json, \
    report_to_text
from .rng import keyed_rng
from .training import (LossSchedule, OptimConfig, StudyInputs, TrainResult, grad_check,
                       study_features, train)

REGIONS = ("mask", "bbox")
AUGMENTS = ("none", "legacy_v1")
SUBDIRS = ("checkpoint", "calib", "reports", "maps", "log")
LADDER_SCALARS = ("volume", "hu", "border")


@contextmanager
def _stage(name: str):
    try:
        yield
    except EngineError as exc:
        raise type(exc)(f"[{name}] {exc}") from exc


@dataclass(frozen=True)
class ExperimentConfig:
    dataset: str                              # manifest path or dataset dir
    out_dir: str
    mode: str = "masked"
    scalar_set: tuple[str, ...] = ()
    region: str = "mask"
    osf_head: str = "affine"
    augment: str = "none"
    train_encoder: bool = False
    tri_centers: tuple[int, ...] | None = None
    optim: OptimConfig = OptimConfig()
    schedule: LossSchedule = LossSchedule()
    calib_max_iter: int = 200
    calib_min_count: int = 64

    def __post_init__(self):
        try:
            object.__setattr__(self, "scalar_set", canonical_scalar_set(self.scalar_set))
        except DataError as exc:
            raise ConfigError(str(exc))
        if self.tri_centers is not None:
            object.__setattr__(self, "tri_centers", tuple(self.tri_centers))
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.region not in REGIONS:
            raise ConfigError(f"region must be one of {REGIONS}, got {self.region!r}")
        if self.augment not in AUGMENTS:
            raise ConfigError(f"augment must be one of {AUGMENTS}, got {self.augment!r}")
        if self.scalar_set and self.mode != "masked_osf":
            raise ConfigError(
                f"scalar_set is only meaningful in masked_osf mode, got mode {self.mode!r}")
        if self.region == "bbox" and self.mode not in ("masked", "masked_osf"):
            raise ConfigError(
                f"region=bbox applies only to masked modes, got mode {self.mode!r}")
        if self.augment != "none" and not self.train_encoder:
            raise ConfigError(
                "augmentation transforms volumes, so it requires train_encoder=true "
                "(precomputed features cannot follow the transform)")

    @property
    def masked(self) -> bool:
        return self.mode in ("masked", "masked_osf")


def config_from_dict(raw: dict) -> ExperimentConfig:
    data = dict(raw)
    try:
        optim = OptimConfig(**data.pop("optim", {}))
        schedule = LossSchedule(**data.pop("schedule", {}))
        return ExperimentConfig(optim=optim, schedule=schedule, **data)
    except TypeError as exc:
        raise ConfigError(f"bad experiment config: {exc}")


def load_config(path) -> ExperimentConfig:
    try:
        with open(path, "r", encoding="utf-8") as f:
            raw = json.load(f)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}")
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file is not valid JSON: {exc}")
    if not isinstance(raw, dict):
        raise ConfigError("config file must hold a JSON object")
    return config_from_dict(raw)


def resolve_manifest(path) -> str:
    """Accept either a manifest file or a dataset directory."""
    path = os.fspath(path)
    if os.path.isdir(path):
        return os.path.join(path, "manifest.json")
    return path


# ---------------------------------------------------------------------------
# Prepare: records -> StudyInputs
# ---------------------------------------------------------------------------


def _prepare_split(dataset: Dataset, split: str, cfg: ExperimentConfig,
                   augment: bool) -> tuple[list[StudyInputs], list[dict]]:
    """StudyInputs per record plus raw (un-normalized) scalar dicts."""
    schema = dataset.schema
    geometry = dataset.geometry
    centers = list(cfg.tri_centers) if cfg.tri_centers is not None else None
    need_scalars = cfg.mode == "masked_osf" and bool(canonical_scalar_set(cfg.scalar_set))
    studies, raws = [], []
    for record in dataset.split(split):
        volume, seg = record.volume, record.segmentation
        if augment and cfg.augment == "legacy_v1" and volume is not None:
            params = draw_augment(keyed_rng(cfg.optim.seed, "augment", record.study_id))
            masks = [seg] if seg is not None else []
            volume, out_masks = joint_rot90_flip(volume, masks, params)
            if seg is not None:
                seg = out_masks[0]
        indicators: dict[str, np.ndarray] = {}
        raw: dict[str, tuple[float, float, float]] = {}
        if cfg.masked:
            if seg is None or volume is None:
                raise DataError(
                    f"study {record.study_id!r}: masked modes need both a volume "
                    f"and a segmentation")
            grids, _ = merge_classes(seg, schema)
            for organ in schema.organs:
                dilated = dilate_metric(grids[organ], schema.dilation_mm[organ],
                                        volume.spacing)
                support = bounding_box_region(dilated) if cfg.region == "bbox" else dilated
                indicators[organ] = project_mask_to_lattice(support, geometry, centers)
                if need_scalars:
                    # scalars always come from the dilated mask, even under
                    # region=bbox: the region choice changes pooling support only
                    raw[organ] = raw_organ_scalars(volume, dilated)
        if cfg.train_encoder:
            if volume is None:
                raise DataError(
                    f"study {record.study_id!r} field 'volume': required when "
                    f"training the encoder")
            patches = patch_matrix(clip_normalize_hu(volume), geometry, centers)
            study = StudyInputs(targets=record.targets, patches=patches,
                                indicators=indicators, study_id=record.study_id)
        else:
            if record.features is None:
                raise DataError(
                    f"study {record.study_id!r} field 'features': required unless "
                    f"train_encoder is set")
            study = StudyInputs(targets=record.targets, features=record.features,
                                indicators=indicators, study_id=record.study_id)
        studies.append(study)
        raws.append(raw)
    return studies, raws


def _install_scalars(studies: list[StudyInputs], raws: list[dict],
                     stats: ScalarStats) -> None:
    for study, raw in zip(studies, raws):
        triples = {}
        for organ, (raw_vol, raw_hu, border) in raw.items():
            s = stats.per_organ[organ]
            triples[organ] = ((raw_vol - s.mean_volume) / s.std_volume,
                              (raw_hu - s.mean_hu) / s.std_hu, border)
        study.scalar_triples = triples


def _split_logits(studies: list[StudyInputs], params: dict[str, np.ndarray],
                  cfg: ExperimentConfig, schema: LabelSchema) -> np.ndarray:
    rows = []
    for study in studies:
        u, _ = study_features(study, params)
        rows.append(forward_study(u, params, cfg.mode, schema,
                                  indicators=study.indicators,
                                  scalar_triples=study.scalar_triples,
                                  scalar_set=cfg.scalar_set,
                                  osf_head=cfg.osf_head).logits)
    return np.stack(rows)


# ---------------------------------------------------------------------------
# The staged run
# ---------------------------------------------------------------------------


@dataclass
class RunArtifacts:
    out_dir: str
    checkpoint: str
    calibration: str
    reports: dict[str, str]
    config_echo: str
    train_log: str
    train_result: TrainResult
    table: CalibrationTable
    val_report: MetricReport
    test_report: MetricReport


def run_experiment(cfg: ExperimentConfig, dataset: Dataset | None = None) -> RunArtifacts:
    with _stage("load"):
        if dataset is None:
            dataset = load_dataset(resolve_manifest(cfg.dataset))
        schema = dataset.schema

    out = os.fspath(cfg.out_dir)
    for sub in SUBDIRS:
        os.makedirs(os.path.join(out, sub), exist_ok=True)

    with _stage("prepare"):
        train_studies, train_raw = _prepare_split(dataset, "train", cfg, augment=True)
        val_studies, val_raw = _prepare_split(dataset, "val", cfg, augment=False)
        test_studies, test_raw = _prepare_split(dataset, "test", cfg, augment=False)
        stats = None
        if cfg.mode == "masked_osf" and canonical_scalar_set(cfg.scalar_set):
            stats = fit_scalar_stats(train_raw, schema.organs)
            for studies, raws in ((train_studies, train_raw), (val_studies, val_raw),
                                  (test_studies, test_raw)):
                _install_scalars(studies, raws, stats)

    with _stage("train"):
        params = None
        if cfg.train_encoder:
            d = dataset.d
            if d < 1:
                raise DataError("manifest must declare d to train the encoder")
            sample = dataset.split("train")[0]
            q = patch_dim(dataset.geometry, sample.volume.shape)
            params = init_head_params_with_encoder(cfg, schema, d, q)
        result = train(train_studies, val_studies, schema, cfg.mode, cfg.optim,
                       cfg.schedule, params=params, scalar_set=cfg.scalar_set,
                       osf_head=cfg.osf_head)
        ckpt_path = os.path.join(out, "checkpoint", "model.ckpt")
        meta = {"scalar_set": list(canonical_scalar_set(cfg.scalar_set)),
                "region": cfg.region, "osf_head": cfg.osf_head,
                "train_encoder": cfg.train_encoder,
                "best_epoch": result.best_epoch, "best_val_loss": result.best_val_loss,
                "stopped_epoch": result.stopped_epoch,
                "pos_weight_flags": result.pos_weight_flags}
        save_checkpoint(ckpt_path, result.params, cfg.mode, schema.content_hash(), meta)
        if stats is not None:
            stats.save(os.path.join(out, "checkpoint", "scalar_stats.ini"))
        log_path = os.path.join(out, "log", "train_log.jsonl")
        with open(log_path, "w", encoding="utf-8") as f:
            for row in result.log:
                f.write(json.dumps(row, sort_keys=True) + "\n")

    with _stage("calibrate"):
        val_logits = _split_logits(val_studies, result.params, cfg, schema)
        val_targets = np.stack([s.targets for s in val_studies])
        table = fit_calibration(val_logits, val_targets, schema.labels,
                                max_iter=cfg.calib_max_iter,
                                min_count=cfg.calib_min_count)
        calib_path = os.path.join(out, "calib", "calibration.json")
        table.save(calib_path)

    with _stage("eval"):
        test_logits = _split_logits(test_studies, result.params, cfg, schema)
        test_targets = np.stack([s.targets for s in test_studies])
        test_probs, _ = apply_calibration(test_logits, table)
        test_report = evaluate_labels(test_probs, test_targets, list(schema.labels),
                                      table.thresholds)
        val_probs, _ = apply_calibration(val_logits, table)
        val_report = evaluate_labels(val_probs, val_targets, list(schema.labels),
                                     table.thresholds)
        reports = {
            "test_json": os.path.join(out, "reports", "test_metrics.json"),
            "test_txt": os.path.join(out, "reports", "test_metrics.txt"),
            "val_json": os.path.join(out, "reports", "val_metrics.json"),
            "per_class_csv": os.path.join(out, "reports", "per_class.csv"),
        }
        _write_text(reports["test_json"], report_to_json(test_report) + "\n")
        _write_text(reports["test_txt"],
                    report_to_text(test_report, title=f"test metrics [{cfg.mode}]"))
        _write_text(reports["val_json"], report_to_json(val_report) + "\n")
        _write_text(reports["per_class_csv"], report_to_csv(test_report))

    with _stage("echo"):
        echo_path = os.path.join(out, "config_echo.json")
        echo = {"config": asdict(cfg), "schema_hash": schema.content_hash(),
                "manifest": resolve_manifest(cfg.dataset)}
        _write_text(echo_path, json.dumps(echo, indent=2, sort_keys=True) + "\n")

    return RunArtifacts(out_dir=out, checkpoint=ckpt_path, calibration=calib_path,
                        reports=reports, config_echo=echo_path, train_log=log_path,
                        train_result=result, table=table, val_report=val_report,
                        test_report=test_report)


def init_head_params_with_encoder(cfg: ExperimentConfig, schema: LabelSchema,
                                  d: int, q: int) -> dict[str, np.ndarray]:
    from .heads import init_head_params
    params = init_head_params(cfg.mode, schema, d,
                              keyed_rng(cfg.optim.seed, "init", cfg.mode),
                              scalar_set=cfg.scalar_set, osf_head=cfg.osf_head)
    params.update(init_encoder_params(d, q, keyed_rng(cfg.optim.seed, "init", "encoder")))
    return params


def _write_text(path, text: str) -> None:
    with open(path, "w", encoding="utf-8") as f:
        f.write(text)


def checkpoint_split_logits(checkpoint_path, manifest_path, split: str,
                            tri_centers: tuple[int, ...] | None = None):
    """Logits and targets of one split under a saved checkpoint.

    Mode, region, scalar set and head shape come from the checkpoint's
    metadata; scalar stats load from the file saved next to it.
    """
    dataset = load_dataset(resolve_manifest(manifest_path))
    schema = dataset.schema
    params, mode, _, meta = load_checkpoint(checkpoint_path,
                                            expected_schema_hash=schema.content_hash())
    cfg = ExperimentConfig(
        dataset=os.fspath(manifest_path), out_dir=".", mode=mode,
        scalar_set=tuple(meta.get("scalar_set", ())),
        region=meta.get("region", "mask"), osf_head=meta.get("osf_head", "affine"),
        train_encoder=bool(meta.get("train_encoder", False)),
        augment="legacy_v1" if meta.get("train_encoder") and meta.get("augment") ==
        "legacy_v1" else "none", tri_centers=tri_centers)
    studies, raws = _prepare_split(dataset, split, cfg, augment=False)
    if cfg.scalar_set:
        stats_path = os.path.join(os.path.dirname(os.fspath(checkpoint_path)),
                                  "scalar_stats.ini")
        _install_scalars(studies, raws, ScalarStats.load(stats_path))
    logits = _split_logits(studies, params, cfg, schema)
    targets = np.stack([s.targets for s in studies])
    return logits, targets, schema, meta


# ---------------------------------------------------------------------------
# Ablations and report merging
# ---------------------------------------------------------------------------


def report_from_dict(data: dict) -> MetricReport:
    from .metrics import LabelMetrics
    per_label = [LabelMetrics(label=r["label"], auroc=r["auroc"], auprc=r["auprc"],
                              f1=r["f1"], ba=r["ba"], n_valid=r["n_valid"])
                 for r in data["per_label"]]
    return MetricReport(per_label=per_label, macro=data["macro"],
                        undefined=data["undefined"])


def ladder_table(reports: dict[str, MetricReport]) -> tuple[str, str, str]:
    """(json, txt, csv) comparison across named runs."""
    if not reports:
        raise DataError("ladder table needs at least one report")
    names = list(reports)
    labels = [m.label for m in reports[names[0]].per_label]
    for name, rep in reports.items():
        if [m.label for m in rep.per_label] != labels:
            raise DataError(f"run {name!r} reports a different label set")

    payload = {"runs": {name: {"macro": rep.macro,
                               "auroc": {m.label: m.auroc for m in rep.per_label}}
                        for name, rep in reports.items()}}
    as_json = json.dumps(payload, indent=2, sort_keys=True) + "\n"

    def fmt(v):
        return "   -  " if v is None else f"{v:6.4f}"

    width = max(len(n) for n in names + ["run"])
    lwidth = max(len(s) for s in labels + ["label", "macro_auroc"])
    lines = ["ladder",
             f"{'run':<{width}}  " + "  ".join(f"{m:>6}" for m in ("auroc", "auprc",
                                                                   "f1", "ba"))]
    for name in names:
        mac = reports[name].macro
        lines.append(f"{name:<{width}}  " + "  ".join(
            fmt(mac[m]) for m in ("auroc", "auprc", "f1", "ba")))
    lines.append("")
    lines.append(f"{'label':<{lwidth}}  " + "  ".join(f"{n:>{max(6, len(n))}}"
                                                      for n in names))
    per_run = {name: {m.label: m.auroc for m in reports[name].per_label}
               for name in names}
    for label in labels:
        lines.append(f"{label:<{lwidth}}  " + "  ".join(
            f"{fmt(per_run[n][label]):>{max(6, len(n))}}" for n in names))
    as_txt = "\n".join(lines) + "\n"

    rows = ["label," + ",".join(names)]
    for label in labels:
        rows.append(label + "," + ",".join(
            "" if per_run[n][label] is None else repr(per_run[n][label]) for n in names))
    rows.append("macro," + ",".join(
        "" if reports[n].macro["auroc"] is None else repr(reports[n].macro["auroc"])
        for n in names))
    as_csv = "\n".join(rows) + "\n"
    return as_json, as_txt, as_csv


def write_ladder_table(reports: dict[str, MetricReport], out_dir) -> dict[str, str]:
    os.makedirs(os.path.join(out_dir, "reports"), exist_ok=True)
    as_json, as_txt, as_csv = ladder_table(reports)
    paths = {"json": os.path.join(out_dir, "reports", "ladder.json"),
             "txt": os.path.join(out_dir, "reports", "ladder.txt"),
             "csv": os.path.join(out_dir, "reports", "ladder.csv")}
    _write_text(paths["json"], as_json)
    _write_text(paths["txt"], as_txt)
    _write_text(paths["csv"], as_csv)
    return paths


def run_ablation(base: ExperimentConfig, dataset: Dataset | None = None, *,
                 ladder: bool = True, regions: bool = False,
                 scalar_sets: tuple[tuple[str, ...], ...] = ()) -> dict[str, RunArtifacts]:
    """Mode ladder plus optional region and scalar-set ablations."""
    with _stage("load"):
        if dataset is None:
            dataset = load_dataset(resolve_manifest(base.dataset))
    runs: dict[str, ExperimentConfig] = {}
    if ladder:
        for mode in MODES:
            runs[mode] = replace(
                base, mode=mode,
                scalar_set=LADDER_SCALARS if mode == "masked_osf" else (),
                region=base.region if mode in ("masked", "masked_osf") else "mask",
                out_dir=os.path.join(base.out_dir, mode))
    if regions:
        for region in REGIONS:
            runs[f"masked_{region}"] = replace(
                base, mode="masked", scalar_set=(), region=region,
                out_dir=os.path.join(base.out_dir, f"masked_{region}"))
    for subset in scalar_sets:
        name = "masked_osf_" + "+".join(canonical_scalar_set(subset))
        runs[name] = replace(base, mode="masked_osf",
                             scalar_set=canonical_scalar_set(subset),
                             region=base.region,
                             out_dir=os.path.join(base.out_dir, name))
    if not runs:
        raise ConfigError("ablation selected nothing to run")
    artifacts = {name: run_experiment(cfg, dataset=dataset)
                 for name, cfg in runs.items()}
    write_ladder_table({name: art.test_report for name, art in artifacts.items()},
                       base.out_dir)
    return artifacts


def merge_run_reports(run_dirs: list[str], out_dir) -> dict[str, str]:
    """Merge existing runs' test reports into one ladder table."""
    reports: dict[str, MetricReport] = {}
    for run_dir in run_dirs:
        path = os.path.join(run_dir, "reports", "test_metrics.json")
        try:
            with open(path, "r", encoding="utf-8") as f:
                reports[os.path.basename(os.path.normpath(run_dir))] = \
                    report_from_dict(json.load(f))
        except FileNotFoundError:
            raise DataError(f"run directory {run_dir!r} has no reports/test_metrics.json")
    return write_ladder_table(reports, out_dir)


# ---------------------------------------------------------------------------
# Weight-map export
# ---------------------------------------------------------------------------


def _unflatten_weights(w: np.ndarray, geometry: LatticeGeometry) -> np.ndarray:
    if geometry.kind == "token":
        return w.reshape(geometry.slabs, geometry.grid, geometry.grid)
    return w.reshape(geometry.cells)


def export_weight_maps(checkpoint_path, manifest_path, study_id: str, out_dir,
                       tri_centers: tuple[int, ...] | None = None) -> list[str]:
    """Per-organ pooling-weight maps for one study of a masked-mode run."""
    dataset = load_dataset(resolve_manifest(manifest_path))
    schema = dataset.schema
    params, mode, _, meta = load_checkpoint(checkpoint_path,
                                            expected_schema_hash=schema.content_hash())
    if mode not in ("masked", "masked_osf"):
        raise ConfigError(f"weight maps need a masked-mode checkpoint, got {mode!r}")

    record = None
    for records in dataset.splits.values():
        for r in records:
            if r.study_id == study_id:
                record = r
                break
    if record is None:
        raise DataError(f"study {study_id!r} not found in any split")
    if record.segmentation is None or record.volume is None:
        raise DataError(f"study {study_id!r} lacks a volume or segmentation")

    centers = list(tri_centers) if tri_centers is not None else None
    region = meta.get("region", "mask")
    grids, _ = merge_classes(record.segmentation, schema)
    indicators = {}
    for organ in schema.organs:
        dilated = dilate_metric(grids[organ], schema.dilation_mm[organ],
                                record.volume.spacing)
        support = bounding_box_region(dilated) if region == "bbox" else dilated
        indicators[organ] = project_mask_to_lattice(support, dataset.geometry, centers)
    if record.features is None:
        raise DataError(f"study {study_id!r} field 'features': needed for weight maps")

    scalar_set = tuple(meta.get("scalar_set", ()))
    # weights do not depend on the scalar values, so zeros suffice here
    triples = {organ: (0.0, 0.0, 0.0) for organ in schema.organs} if scalar_set else None
    result = forward_study(record.features, params, mode, schema,
                           indicators=indicators, scalar_triples=triples,
                           scalar_set=scalar_set, osf_head=meta.get("osf_head", "affine"))

    os.makedirs(out_dir, exist_ok=True)
    paths = []
    for organ in schema.organs:
        grid = _unflatten_weights(result.weights[organ], dataset.geometry)
        payload = {"study": study_id, "organ": organ,
                   "geometry": dataset.geometry.to_dict(),
                   "fallback": bool(result.fallback[organ]),
                   "weights": grid.tolist()}
        path = os.path.join(out_dir, f"{study_id}.{organ}.json")
        _write_text(path, json.dumps(payload, indent=2, sort_keys=True) + "\n")
        paths.append(path)
    return paths


# ---------------------------------------------------------------------------
# Gradient-check driver
# ---------------------------------------------------------------------------


def check_schema() -> LabelSchema:
    """Tiny two-organ schema for gradient checks and unit tests."""
    return LabelSchema(
        labels=("a_focal", "a_aux", "b_focal", "misc"),
        kappa={"a_focal": "organ_a", "a_aux": "organ_a", "b_focal": "organ_b",
               "misc": "other"},
        merge_map={1: "organ_a", 2: "organ_b"},
        dilation_mm={"organ_a": 1.0, "organ_b": 1.0})


def random_check_study(rng: np.random.Generator, schema: LabelSchema, d: int = 6,
                       n_rows: int = 18, with_scalars: bool = False) -> StudyInputs:
    """A random study covering support, fallback and missing-label branches."""
    features = rng.normal(size=(n_rows, d))
    indicators = {}
    empty_organ = None
    if rng.random() < 0.25:
        empty_organ = schema.organs[int(rng.integers(len(schema.organs)))]
    for organ in schema.organs:
        m = (rng.random(n_rows) < 0.5).astype(np.float64)
        if organ == empty_organ:
            m[:] = 0.0
        elif not m.any():
            m[int(rng.integers(n_rows))] = 1.0
        indicators[organ] = m
    targets = rng.choice(np.array([-1, 0, 1]), size=schema.n_labels)
    triples = {}
    if with_scalars:
        for organ in schema.organs:
            triples[organ] = (float(rng.normal()), float(rng.normal()),
                              float(rng.integers(0, 2)))
    return StudyInputs(targets=targets, features=features, indicators=indicators,
                       scalar_triples=triples, study_id="check")


def gradcheck_modes(seed: int = 25, draws: int = 3, d: int = 6, n_rows: int = 18,
                    tol: float = 1e-4) -> dict[str, float]:
    """Max finite-difference error per mode; raises NumericError past tol."""
    from .heads import init_head_params
    schema = check_schema()
    variants = [("gap", (), "affine"), ("global", (), "affine"),
                ("masked", (), "affine"),
                ("masked_osf", LADDER_SCALARS, "affine"),
                ("masked_osf+mlp", LADDER_SCALARS, "mlp")]
    worst: dict[str, float] = {}
    for name, scalars, osf_head in variants:
        mode = "masked_osf" if name.startswith("masked_osf") else name
        top = 0.0
        for draw in range(draws):
            rng = keyed_rng(seed, "gradcheck", name, str(draw))
            study = random_check_study(rng, schema, d=d, n_rows=n_rows,
                                       with_scalars=bool(scalars))
            params = init_head_params(mode, schema, d, rng, scalar_set=scalars,
                                      osf_head=osf_head)
            rel, _ = grad_check(study, params, mode, schema, scalar_set=scalars,
                                osf_head=osf_head)
            top = max(top, rel)
        worst[name] = top
        if top >= tol:
            raise NumericError(f"gradient check failed for {name}: "
                               f"max rel err {top:.3e} >= {tol:.0e}")
    return worst
