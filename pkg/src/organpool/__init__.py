"""Organ-aware attention pooling for CT study classification.

An encoder-agnostic engine: four aggregation heads (GAP, global
attention, organ-masked attention, masked attention with organ-scalar
fusion), the mask-to-lattice pipeline that feeds them, an
uncertain-label BCE trainer with exact analytic gradients, a
calibration and metrics protocol, and a synthetic-data experiment
harness that makes every piece verifiable at desk scale.
"""

from .calibration import (CalibrationTable, apply_calibration, fit_calibration,
                          fit_temperature, fit_threshold)
from .datasets import Dataset, StudyRecord, load_dataset, prevalence_report
from .encoder import (encode_patches, encoder_backward, init_encoder_params,
                      patch_matrix, toy_encoder)
from .errors import (ConfigError, DataError, EngineError, GeometryError,
                     NumericError, SchemaError)
from .experiment import (ExperimentConfig, RunArtifacts, export_weight_maps,
                         gradcheck_modes, load_config, run_ablation, run_experiment)
from .heads import (MODES, backward_study, forward_study, init_head_params,
                    load_checkpoint, pool_gap, pool_global_attention,
                    pool_masked_attention, save_checkpoint)
from .lattice import (FeatureLattice, LatticeGeometry, Volume, clip_normalize_hu,
                      read_masks, read_volume, write_class_grid, write_organ_masks,
                      write_volume)
from .masks import (LabelSchema, ScalarStats, compute_organ_scalars, dilate_metric,
                    fit_scalar_stats, load_schema, merge_classes,
                    project_mask_to_lattice, save_schema)
from .metrics import (MetricReport, auprc, auroc, evaluate_labels, f1_ba,
                      report_to_csv, report_to_json, report_to_text)
from .model import OrganPoolClassifier
from .rng import keyed_rng
from .synth import SynthSpec, build_schema, synth_generate
from .training import (LossSchedule, OptimConfig, StudyInputs, TrainResult,
                       grad_check, masked_bce, pos_weights, train, uncertain_weight)

__version__ = "0.1.0"

__all__ = [
    "CalibrationTable", "apply_calibration", "fit_calibration", "fit_temperature",
    "fit_threshold", "Dataset", "StudyRecord", "load_dataset", "prevalence_report",
    "encode_patches", "encoder_backward", "init_encoder_params", "patch_matrix",
    "toy_encoder", "ConfigError", "DataError", "EngineError", "GeometryError",
    "NumericError", "SchemaError", "ExperimentConfig", "RunArtifacts",
    "export_weight_maps", "gradcheck_modes", "load_config", "run_ablation",
    "run_experiment", "MODES", "backward_study", "forward_study", "init_head_params",
    "load_checkpoint", "pool_gap", "pool_global_attention", "pool_masked_attention",
    "save_checkpoint", "FeatureLattice", "LatticeGeometry", "Volume",
    "clip_normalize_hu", "read_masks", "read_volume", "write_class_grid",
    "write_organ_masks", "write_volume", "LabelSchema", "ScalarStats",
    "compute_organ_scalars", "dilate_metric", "fit_scalar_stats", "load_schema",
    "merge_classes", "project_mask_to_lattice", "save_schema", "MetricReport",
    "auprc", "auroc", "evaluate_labels", "f1_ba", "report_to_csv", "report_to_json",
    "report_to_text", "OrganPoolClassifier", "keyed_rng", "SynthSpec", "build_schema",
    "synth_generate", "LossSchedule", "OptimConfig", "StudyInputs", "TrainResult",
    "grad_check", "masked_bce", "pos_weights", "train", "uncertain_weight",
    "__version__",
]
