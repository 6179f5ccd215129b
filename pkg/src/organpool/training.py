"""Uncertain-label BCE training: loss, schedules, optimizer, grad check.

Targets live in {0, 1, -1} per label, -1 meaning missing.  Missing labels
contribute nothing for the first n_burn epochs, then enter as weak
negatives (target 0) with a weight ramping linearly to w_max.  Observed
positives are up-weighted per label by the clipped negative/positive
ratio.  The optimizer is an adaptive-moment method with decoupled weight
decay, per-group learning-rate scales, global-norm clipping and a cosine
schedule with linear warmup.  Everything is f64 and deterministic given
the seed; analytic gradients are verified against central differences.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from .encoder import encode_patches, encoder_backward
from .errors import DataError, NumericError
from .heads import MASKED_EPS, backward_study, forward_study, init_head_params
from .rng import keyed_rng
from .validation import check_targets

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


@dataclass(frozen=True)
class LossSchedule:
    """Burn-in and ramp for the missing-label weight (target is always 0)."""

    n_burn: int = 10
    n_ramp: int = 10
    w_max: float = 0.3

    def __post_init__(self):
        if self.n_burn < 0 or self.n_ramp < 0:
            raise DataError("n_burn and n_ramp must be >= 0")
        if not 0.0 <= self.w_max <= 1.0:
            raise DataError(f"w_max must lie in [0, 1], got {self.w_max}")


@dataclass(frozen=True)
class OptimConfig:
    base_lr: float = 1e-3
    weight_decay: float = 0.05
    warmup_epochs: int = 5
    min_lr_fraction: float = 0.1
    max_epochs: int = 30
    patience: int = 10
    grad_clip_norm: float = 1.0
    head_lr_scale: float = 3.0
    alpha_lr_scale: float = 0.3
    seed: int = 25
    batch_size: int = 32
    pos_weight_clip: float = 10.0

    def __post_init__(self):
        if self.base_lr <= 0 or self.max_epochs < 1 or self.batch_size < 1:
            raise DataError("base_lr, max_epochs and batch_size must be positive")
        if not 0.0 < self.min_lr_fraction <= 1.0:
            raise DataError(f"min_lr_fraction must lie in (0, 1], got {self.min_lr_fraction}")


@dataclass
class StudyInputs:
    """One study as the trainer consumes it.

    Either precomputed features or a raw patch matrix (run through the
    trainable encoder) must be present.
    """

    targets: np.ndarray                                  # (L,) in {0, 1, -1}
    features: np.ndarray | None = None                   # (n, d)
    patches: np.ndarray | None = None                    # (n, q)
    indicators: dict[str, np.ndarray] = field(default_factory=dict)
    scalar_triples: dict[str, tuple[float, float, float]] = field(default_factory=dict)
    study_id: str = ""

    def __post_init__(self):
        if (self.features is None) == (self.patches is None):
            raise DataError("exactly one of features or patches must be set")


def uncertain_weight(epoch: int, schedule: LossSchedule) -> float:
    """Weight applied to missing (-1) targets at a 0-based epoch."""
    if epoch < 0:
        raise DataError(f"epoch must be >= 0, got {epoch}")
    if epoch < schedule.n_burn:
        return 0.0
    if schedule.n_ramp > 0 and epoch < schedule.n_burn + schedule.n_ramp:
        return schedule.w_max * (epoch - schedule.n_burn + 1) / schedule.n_ramp
    return schedule.w_max


def pos_weights(targets: np.ndarray, clip: float = 10.0) -> tuple[np.ndarray, list[str]]:
    """Per-label positive-class weights min(neg/pos, clip) over observed targets.

    Labels with no observed positives get the clip value; labels with no
    observed targets at all get 1.  Both cases are reported as flags.
    """
    y = check_targets(targets)
    n_labels = y.shape[1]
    weights = np.ones(n_labels)
    flags = []
    for label in range(n_labels):
        pos = int(np.count_nonzero(y[:, label] == 1))
        neg = int(np.count_nonzero(y[:, label] == 0))
        if pos == 0 and neg == 0:
            weights[label] = 1.0
            flags.append(f"label {label}: all targets missing, weight 1")
        elif pos == 0:
            weights[label] = clip
            flags.append(f"label {label}: no positives, weight clipped to {clip}")
        else:
            weights[label] = min(neg / pos, clip)
    return weights, flags


def _element_weights(targets: np.ndarray, pos_w: np.ndarray, w_u: float) -> np.ndarray:
    w = np.zeros(targets.shape)
    w[targets == 0] = 1.0
    w[targets == 1] = np.broadcast_to(pos_w, targets.shape)[targets == 1]
    w[targets == -1] = w_u
    return w


def _stable_bce(logits: np.ndarray, targets01: np.ndarray) -> np.ndarray:
    return np.maximum(logits, 0.0) - logits * targets01 + np.log1p(np.exp(-np.abs(logits)))


def masked_bce(logits: np.ndarray, targets: np.ndarray, pos_w: np.ndarray,
               w_u: float) -> tuple[float, np.ndarray]:
    """Weighted BCE over observed {0,1} and missing-as-weak-negative targets.

    Returns (loss, per-element weights).  The loss is the weight-normalized
    sum; an all-zero weight matrix (e.g. all-missing during burn-in) gives
    loss 0 exactly.
    """
    z = np.asarray(logits, dtype=np.float64)
    if not np.all(np.isfinite(z)):
        raise NumericError("non-finite logits in loss")
    y = check_targets(targets, n_labels=z.shape[-1] if z.ndim > 1 else None)
    z = z.reshape(y.shape)
    weights = _element_weights(y, np.asarray(pos_w, dtype=np.float64), w_u)
    t01 = np.where(y == 1, 1.0, 0.0)      # missing targets train toward 0
    total_weight = weights.sum()
    if total_weight == 0.0:
        return 0.0, weights
    loss = float((weights * _stable_bce(z, t01)).sum() / total_weight)
    return loss, weights


def masked_bce_grad(logits: np.ndarray, targets: np.ndarray, pos_w: np.ndarray,
                    w_u: float) -> np.ndarray:
    """dloss/dlogits for masked_bce, same shape as logits."""
    y = check_targets(targets)
    z = np.asarray(logits, dtype=np.float64).reshape(y.shape)
    weights = _element_weights(y, np.asarray(pos_w, dtype=np.float64), w_u)
    total_weight = weights.sum()
    if total_weight == 0.0:
        return np.zeros_like(z)
    t01 = np.where(y == 1, 1.0, 0.0)
    return weights * (expit(z) - t01) / total_weight


def lr_at(step: int, total_steps: int, warmup_steps: int, base_lr: float,
          min_lr_fraction: float) -> float:
    """Linear warmup to base_lr, then cosine decay to min_lr_fraction * base_lr."""
    if not 0 <= step < total_steps:
        raise DataError(f"step {step} outside [0, {total_steps})")
    if step < warmup_steps:
        return base_lr * step / warmup_steps
    min_lr = min_lr_fraction * base_lr
    span = max(total_steps - 1 - warmup_steps, 1)
    progress = (step - warmup_steps) / span
    return min_lr + 0.5 * (base_lr - min_lr) * (1.0 + math.cos(math.pi * progress))


def param_group(name: str) -> str:
    """Optimizer group of one parameter: encoder, head (classifiers) or alpha."""
    if name.startswith("encoder/"):
        return "encoder"
    if "classifier" in name or "/mlp_" in name:
        return "head"
    return "alpha"


def group_lr_scale(name: str, cfg: OptimConfig) -> float:
    group = param_group(name)
    if group == "head":
        return cfg.head_lr_scale
    if group == "alpha":
        return cfg.alpha_lr_scale
    return 1.0


def clip_gradients(grads: dict[str, np.ndarray], max_norm: float) -> float:
    """Scale all gradients jointly so the global norm is at most max_norm."""
    total_sq = 0.0
    for g in grads.values():
        total_sq += float(np.sum(g * g))
    total = math.sqrt(total_sq)
    if total > max_norm > 0:
        scale = max_norm / total
        for g in grads.values():
            g *= scale
    return total


@dataclass
class AdamWState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0

    @staticmethod
    def fresh(params: dict[str, np.ndarray]) -> "AdamWState":
        return AdamWState(m={k: np.zeros_like(v) for k, v in params.items()},
                          v={k: np.zeros_like(v) for k, v in params.items()})


def adamw_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
               state: AdamWState, lr: float, cfg: OptimConfig) -> None:
    """In-place adaptive-moment update with decoupled weight decay.

    Moments accumulate raw gradients; the per-group scale enters through
    the learning rate only.
    """
    state.t += 1
    bc1 = 1.0 - ADAM_BETA1 ** state.t
    bc2 = 1.0 - ADAM_BETA2 ** state.t
    for name, p in params.items():
        g = grads[name]
        m, v = state.m[name], state.v[name]
        m *= ADAM_BETA1
        m += (1.0 - ADAM_BETA1) * g
        v *= ADAM_BETA2
        v += (1.0 - ADAM_BETA2) * g * g
        step_lr = lr * group_lr_scale(name, cfg)
        update = (m / bc1) / (np.sqrt(v / bc2) + ADAM_EPS)
        p -= step_lr * (update + cfg.weight_decay * p)


def study_features(study: StudyInputs,
                   params: dict[str, np.ndarray]) -> tuple[np.ndarray, np.ndarray | None]:
    """Features for one study, running the encoder when given raw patches."""
    if study.features is not None:
        return study.features, None
    return encode_patches(study.patches, params), study.patches


def batch_loss_and_grads(studies: list[StudyInputs], params: dict[str, np.ndarray],
                         mode: str, schema, pos_w: np.ndarray, w_u: float, *,
                         scalar_set=(), osf_head: str = "affine",
                         eps: float = MASKED_EPS) -> tuple[float, dict[str, np.ndarray]]:
    """Loss over one batch plus accumulated gradients for every parameter."""
    feats, patch_rows, results = [], [], []
    for study in studies:
        u, patches = study_features(study, params)
        feats.append(u)
        patch_rows.append(patches)
        results.append(forward_study(u, params, mode, schema,
                                     indicators=study.indicators,
                                     scalar_triples=study.scalar_triples,
                                     scalar_set=scalar_set, osf_head=osf_head, eps=eps))
    logits = np.stack([r.logits for r in results])
    targets = np.stack([s.targets for s in studies])
    loss, _ = masked_bce(logits, targets, pos_w, w_u)
    dlogits = masked_bce_grad(logits, targets, pos_w, w_u)
    grads = {name: np.zeros_like(value) for name, value in params.items()}
    for i, study in enumerate(studies):
        study_grads, dfeat = backward_study(feats[i], params, mode, schema, results[i],
                                            dlogits[i], scalar_set=scalar_set,
                                            osf_head=osf_head)
        for name, g in study_grads.items():
            grads[name] += g
        if patch_rows[i] is not None:
            for name, g in encoder_backward(patch_rows[i], dfeat).items():
                grads[name] += g
    return loss, grads


def dataset_loss(studies: list[StudyInputs], params: dict[str, np.ndarray], mode: str,
                 schema, pos_w: np.ndarray, w_u: float, *, scalar_set=(),
                 osf_head: str = "affine", eps: float = MASKED_EPS) -> float:
    logits = np.stack([
        forward_study(study_features(s, params)[0], params, mode, schema,
                      indicators=s.indicators, scalar_triples=s.scalar_triples,
                      scalar_set=scalar_set, osf_head=osf_head, eps=eps).logits
        for s in studies])
    targets = np.stack([s.targets for s in studies])
    loss, _ = masked_bce(logits, targets, pos_w, w_u)
    return loss


def grad_check(study: StudyInputs, params: dict[str, np.ndarray], mode: str, schema, *,
               scalar_set=(), osf_head: str = "affine", pos_w: np.ndarray | None = None,
               w_u: float = 0.3, eps: float = MASKED_EPS,
               h: float = 1e-5) -> tuple[float, dict[str, float]]:
    """Max relative error of analytic vs central-difference gradients.

    Relative error per element is |a - n| / max(|a|, |n|, 1e-8).
    """
    work = {name: np.array(value, dtype=np.float64, copy=True)
            for name, value in params.items()}
    n_labels = study.targets.shape[0]
    if pos_w is None:
        pos_w = np.ones(n_labels)

    def loss_at(p):
        return dataset_loss([study], p, mode, schema, pos_w, w_u,
                            scalar_set=scalar_set, osf_head=osf_head, eps=eps)

    _, analytic = batch_loss_and_grads([study], work, mode, schema, pos_w, w_u,
                                       scalar_set=scalar_set, osf_head=osf_head, eps=eps)
    per_param: dict[str, float] = {}
    overall = 0.0
    for name, value in work.items():
        worst = 0.0
        it = np.nditer(value, flags=["multi_index"])
        while not it.finished:
            idx = it.multi_index
            saved = value[idx]
            value[idx] = saved + h
            up = loss_at(work)
            value[idx] = saved - h
            down = loss_at(work)
            value[idx] = saved
            numeric = (up - down) / (2.0 * h)
            a = float(analytic[name][idx])
            rel = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
            worst = max(worst, rel)
            it.iternext()
        per_param[name] = worst
        overall = max(overall, worst)
    return overall, per_param


@dataclass
class TrainResult:
    params: dict[str, np.ndarray]          # best-validation-loss snapshot
    best_val_loss: float
    best_epoch: int
    stopped_epoch: int
    pos_weights: np.ndarray
    pos_weight_flags: list[str]
    log: list[dict]


def train(train_studies: list[StudyInputs], val_studies: list[StudyInputs], schema,
          mode: str, cfg: OptimConfig, schedule: LossSchedule, *,
          params: dict[str, np.ndarray] | None = None, scalar_set=(),
          osf_head: str = "affine", eps: float = MASKED_EPS) -> TrainResult:
    """Full training loop returning the best-validation-loss snapshot.

    Deterministic given cfg.seed: initialization, batch order and every
    reduction have fixed order.  Validation loss is always computed with
    the missing-label weight at 0 so epochs stay comparable.
    """
    if not train_studies or not val_studies:
        raise DataError("train and val splits must both be non-empty")
    targets = np.stack([s.targets for s in train_studies])
    pos_w, flags = pos_weights(targets, clip=cfg.pos_weight_clip)
    if params is None:
        if train_studies[0].features is None:
            raise DataError("encoder training needs explicit params incl. encoder weights")
        d = train_studies[0].features.shape[1]
        params = init_head_params(mode, schema, d, keyed_rng(cfg.seed, "init", mode),
                                  scalar_set=scalar_set, osf_head=osf_head)
    else:
        params = {k: np.array(v, dtype=np.float64, copy=True) for k, v in params.items()}

    n_train = len(train_studies)
    steps_per_epoch = math.ceil(n_train / cfg.batch_size)
    total_steps = steps_per_epoch * cfg.max_epochs
    warmup_steps = cfg.warmup_epochs * steps_per_epoch
    state = AdamWState.fresh(params)

    best_loss = math.inf
    best_params = {k: v.copy() for k, v in params.items()}
    best_epoch = -1
    epochs_without_improvement = 0
    log: list[dict] = []
    t0 = time.perf_counter()
    stopped_epoch = cfg.max_epochs - 1

    for epoch in range(cfg.max_epochs):
        w_u = uncertain_weight(epoch, schedule)
        order = keyed_rng(cfg.seed, "batches", str(epoch)).permutation(n_train)
        for batch_i in range(steps_per_epoch):
            step = epoch * steps_per_epoch + batch_i
            lr = lr_at(step, total_steps, warmup_steps, cfg.base_lr, cfg.min_lr_fraction)
            rows = order[batch_i * cfg.batch_size:(batch_i + 1) * cfg.batch_size]
            batch = [train_studies[i] for i in rows]
            loss, grads = batch_loss_and_grads(batch, params, mode, schema, pos_w, w_u,
                                               scalar_set=scalar_set, osf_head=osf_head,
                                               eps=eps)
            clip_gradients(grads, cfg.grad_clip_norm)
            adamw_step(params, grads, state, lr, cfg)
            log.append({"epoch": epoch, "step": step, "lr": lr, "train_loss": loss,
                        "val_loss": None, "uncertain_weight": w_u,
                        "wall_ms": (time.perf_counter() - t0) * 1000.0})
        val_loss = dataset_loss(val_studies, params, mode, schema, pos_w, 0.0,
                                scalar_set=scalar_set, osf_head=osf_head, eps=eps)
        log.append({"epoch": epoch, "step": (epoch + 1) * steps_per_epoch - 1,
                    "lr": log[-1]["lr"], "train_loss": log[-1]["train_loss"],
                    "val_loss": val_loss, "uncertain_weight": w_u,
                    "wall_ms": (time.perf_counter() - t0) * 1000.0})
        if val_loss < best_loss:
            best_loss = val_loss
            best_params = {k: v.copy() for k, v in params.items()}
            best_epoch = epoch
            epochs_without_improvement = 0
        else:
            epochs_without_improvement += 1
        if epochs_without_improvement >= cfg.patience:
            stopped_epoch = epoch
            break
        stopped_epoch = epoch

    return TrainResult(params=best_params, best_val_loss=best_loss, best_epoch=best_epoch,
                       stopped_epoch=stopped_epoch, pos_weights=pos_w,
                       pos_weight_flags=flags, log=log)
