"""A scikit-learn style estimator wrapping the training pipeline.

The estimator consumes per-study structured inputs (feature lattices plus
optional per-organ indicators and scalars) rather than a flat design
matrix, but keeps the familiar fit / predict_proba / predict / get_params
surface so it composes with sklearn tooling.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator

from .calibration import apply_calibration, fit_calibration
from .errors import ConfigError, DataError
from .heads import MODES, forward_study
from .masks import LabelSchema
from .rng import keyed_rng
from .training import LossSchedule, OptimConfig, StudyInputs, study_features, train


def _coerce_studies(X, y=None, n_labels: int | None = None) -> list[StudyInputs]:
    """Accept StudyInputs, or dicts with features/indicators/scalar_triples."""
    studies = []
    for i, row in enumerate(X):
        if isinstance(row, StudyInputs):
            study = row
        elif isinstance(row, dict):
            targets = row.get("targets")
            if targets is None:
                targets = np.zeros(n_labels or 0, dtype=np.int64)
            study = StudyInputs(
                targets=np.asarray(targets, dtype=np.int64),
                features=row.get("features"),
                patches=row.get("patches"),
                indicators=dict(row.get("indicators", {})),
                scalar_triples=dict(row.get("scalar_triples", {})),
                study_id=row.get("id", f"study_{i:04d}"))
        else:
            raise DataError(f"study {i} must be StudyInputs or dict, got {type(row)}")
        studies.append(study)
    if y is not None:
        targets = np.asarray(y, dtype=np.int64)
        if targets.ndim != 2 or targets.shape[0] != len(studies):
            raise DataError(
                f"y must be (n_studies, n_labels), got shape {targets.shape}")
        studies = [StudyInputs(targets=targets[i], features=s.features,
                               patches=s.patches, indicators=s.indicators,
                               scalar_triples=s.scalar_triples, study_id=s.study_id)
                   for i, s in enumerate(studies)]
    return studies


class OrganPoolClassifier(BaseEstimator):
    """Multi-label study classifier with organ-aware pooling heads.

    Parameters mirror the optimizer and loss-schedule knobs; `mode` picks
    the aggregation head.  `fit` holds out `val_fraction` of the studies
    for early stopping and (optionally) calibration.
    """

    def __init__(self, schema: LabelSchema | None = None, mode: str = "masked",
                 scalar_set=(), osf_head: str = "affine", base_lr: float = 1e-3,
                 weight_decay: float = 0.05, warmup_epochs: int = 5,
                 min_lr_fraction: float = 0.1, max_epochs: int = 30,
                 patience: int = 10, grad_clip_norm: float = 1.0,
                 head_lr_scale: float = 3.0, alpha_lr_scale: float = 0.3,
                 seed: int = 25, batch_size: int = 32, pos_weight_clip: float = 10.0,
                 n_burn: int = 10, n_ramp: int = 10, w_max: float = 0.3,
                 calibrate: bool = True, calib_max_iter: int = 200,
                 calib_min_count: int = 64, val_fraction: float = 0.2):
        self.schema = schema
        self.mode = mode
        self.scalar_set = scalar_set
        self.osf_head = osf_head
        self.base_lr = base_lr
        self.weight_decay = weight_decay
        self.warmup_epochs = warmup_epochs
        self.min_lr_fraction = min_lr_fraction
        self.max_epochs = max_epochs
        self.patience = patience
        self.grad_clip_norm = grad_clip_norm
        self.head_lr_scale = head_lr_scale
        self.alpha_lr_scale = alpha_lr_scale
        self.seed = seed
        self.batch_size = batch_size
        self.pos_weight_clip = pos_weight_clip
        self.n_burn = n_burn
        self.n_ramp = n_ramp
        self.w_max = w_max
        self.calibrate = calibrate
        self.calib_max_iter = calib_max_iter
        self.calib_min_count = calib_min_count
        self.val_fraction = val_fraction

    def _optim_config(self) -> OptimConfig:
        return OptimConfig(
            base_lr=self.base_lr, weight_decay=self.weight_decay,
            warmup_epochs=self.warmup_epochs, min_lr_fraction=self.min_lr_fraction,
            max_epochs=self.max_epochs, patience=self.patience,
            grad_clip_norm=self.grad_clip_norm, head_lr_scale=self.head_lr_scale,
            alpha_lr_scale=self.alpha_lr_scale, seed=self.seed,
            batch_size=self.batch_size, pos_weight_clip=self.pos_weight_clip)

    def fit(self, X, y=None):
        if self.schema is None:
            raise ConfigError("OrganPoolClassifier needs a schema before fitting")
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        studies = _coerce_studies(X, y, self.schema.n_labels)
        if len(studies) < 2:
            raise DataError("need at least two studies to hold out validation data")
        n_val = max(1, int(round(self.val_fraction * len(studies))))
        if n_val >= len(studies):
            raise DataError(
                f"val_fraction={self.val_fraction} leaves no training studies")
        order = keyed_rng(self.seed, "valsplit").permutation(len(studies))
        val_rows = set(order[:n_val].tolist())
        train_studies = [s for i, s in enumerate(studies) if i not in val_rows]
        val_studies = [s for i, s in enumerate(studies) if i in val_rows]

        schedule = LossSchedule(n_burn=self.n_burn, n_ramp=self.n_ramp,
                                w_max=self.w_max)
        result = train(train_studies, val_studies, self.schema, self.mode,
                       self._optim_config(), schedule, scalar_set=self.scalar_set,
                       osf_head=self.osf_head)
        self.params_ = result.params
        self.train_result_ = result
        self.labels_ = list(self.schema.labels)
        self.table_ = None
        if self.calibrate:
            val_logits = self._logits(val_studies)
            val_targets = np.stack([s.targets for s in val_studies])
            self.table_ = fit_calibration(val_logits, val_targets, self.schema.labels,
                                          max_iter=self.calib_max_iter,
                                          min_count=self.calib_min_count)
        return self

    def _check_fitted(self):
        if not hasattr(self, "params_"):
            raise DataError("estimator is not fitted; call fit first")

    def _logits(self, studies: list[StudyInputs]) -> np.ndarray:
        rows = []
        for s in studies:
            u, _ = study_features(s, self.params_)
            rows.append(forward_study(u, self.params_, self.mode, self.schema,
                                      indicators=s.indicators,
                                      scalar_triples=s.scalar_triples,
                                      scalar_set=self.scalar_set,
                                      osf_head=self.osf_head).logits)
        return np.stack(rows)

    def decision_function(self, X) -> np.ndarray:
        self._check_fitted()
        return self._logits(_coerce_studies(X, n_labels=self.schema.n_labels))

    def predict_proba(self, X) -> np.ndarray:
        logits = self.decision_function(X)
        if self.table_ is not None:
            probs, _ = apply_calibration(logits, self.table_)
            return probs
        return 1.0 / (1.0 + np.exp(-logits))

    def predict(self, X) -> np.ndarray:
        logits = self.decision_function(X)
        if self.table_ is not None:
            _, decisions = apply_calibration(logits, self.table_)
            return decisions.astype(np.int64)
        probs = 1.0 / (1.0 + np.exp(-logits))
        return (probs >= 0.5).astype(np.int64)
