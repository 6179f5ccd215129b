"""Brute-force reference implementations.

Every function here favors the most literal possible computation over
speed; the fast implementations in metrics, calibration and masks are
tested for exact or near-exact agreement with these.
"""

from __future__ import annotations

import math

import numpy as np

from .errors import DataError

ORACLE_MAX_SAMPLES = 10_000


def _valid(scores, targets):
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    t = np.asarray(targets).reshape(-1)
    if s.shape != t.shape:
        raise DataError(f"scores shape {s.shape} != targets shape {t.shape}")
    if s.size > ORACLE_MAX_SAMPLES:
        raise DataError(f"oracle supports at most {ORACLE_MAX_SAMPLES} samples")
    keep = t != -1
    return s[keep], t[keep]


def oracle_auroc(scores, targets) -> float | None:
    """Literal double loop over positive/negative pairs, ties credit 0.5."""
    s, t = _valid(scores, targets)
    pos = s[t == 1]
    neg = s[t == 0]
    if pos.size == 0 or neg.size == 0:
        return None
    wins = 0.0
    for p in pos:
        for q in neg:
            if p > q:
                wins += 1.0
            elif p == q:
                wins += 0.5
    return wins / (pos.size * neg.size)


def oracle_auprc(scores, targets) -> float | None:
    """Average precision by explicit threshold sweep over distinct scores."""
    s, t = _valid(scores, targets)
    if np.sum(t == 1) == 0:
        return None
    total_pos = int(np.sum(t == 1))
    ap = 0.0
    prev_recall = 0.0
    for v in sorted(set(s.tolist()), reverse=True):
        decided = s >= v
        tp = int(np.sum(decided & (t == 1)))
        fp = int(np.sum(decided & (t == 0)))
        precision = tp / (tp + fp) if tp + fp else 0.0
        recall = tp / total_pos
        ap += (recall - prev_recall) * precision
        prev_recall = recall
    return ap


def oracle_f1_ba(probs, targets, threshold: float) -> tuple[float | None, float | None]:
    """Confusion counts by explicit loop at decision rule p >= threshold."""
    p, t = _valid(probs, targets)
    if p.size == 0:
        return None, None
    tp = fp = tn = fn = 0
    for prob, truth in zip(p, t):
        decided = prob >= threshold
        if truth == 1:
            tp += decided
            fn += not decided
        else:
            fp += decided
            tn += not decided
    f1 = 2 * tp / (2 * tp + fp + fn) if (2 * tp + fp + fn) else 0.0
    sens = tp / (tp + fn) if (tp + fn) else None
    spec = tn / (tn + fp) if (tn + fp) else None
    ba = None if sens is None or spec is None else 0.5 * (sens + spec)
    return float(f1), ba


def oracle_best_f1(probs, targets) -> tuple[float, float]:
    """Exhaustive F1 sweep over midpoints of distinct probs plus {0, 1}.

    Ties resolve to the smallest threshold, matching the fitter's rule.
    """
    p, t = _valid(probs, targets)
    distinct = np.unique(p)
    candidates = [0.0, 1.0] + [(a + b) / 2.0 for a, b in zip(distinct, distinct[1:])]
    best_theta, best_f1 = 0.0, -1.0
    for theta in sorted(candidates):
        f1, _ = oracle_f1_ba(p, t, theta)
        f1 = 0.0 if f1 is None else f1
        if f1 > best_f1:
            best_theta, best_f1 = theta, f1
    return best_theta, best_f1


def oracle_dilate(mask: np.ndarray, r_mm: float,
                  spacing: tuple[float, float, float]) -> np.ndarray:
    """Anisotropic dilation by explicit voxel-pair distances (grids <= 16^3)."""
    grid = np.asarray(mask) != 0
    if grid.size > 16 ** 3:
        raise DataError("brute-force dilation is limited to grids up to 16^3")
    out = np.zeros(grid.shape, dtype=np.uint8)
    seeds = np.argwhere(grid)
    if seeds.size == 0:
        return out
    sz, sy, sx = spacing
    r2 = r_mm * r_mm
    for idx in np.ndindex(grid.shape):
        z, y, x = idx
        for szz, syy, sxx in seeds:
            d2 = ((z - szz) * sz) ** 2 + ((y - syy) * sy) ** 2 + ((x - sxx) * sx) ** 2
            if d2 <= r2:
                out[idx] = 1
                break
    return out


def oracle_temperature(logits, targets, lo: float = 0.05, hi: float = 20.0,
                       n_grid: int = 4001) -> float:
    """Dense log-space grid search for the BCE-minimizing temperature."""
    z, t = _valid(logits, targets)
    if z.size == 0:
        raise DataError("temperature oracle needs at least one valid sample")
    best_temp, best_loss = 1.0, math.inf
    for logt in np.linspace(math.log(lo), math.log(hi), n_grid):
        temp = math.exp(logt)
        s = z / temp
        losses = np.maximum(s, 0.0) - s * t + np.log1p(np.exp(-np.abs(s)))
        loss = float(losses.mean())
        if loss < best_loss:
            best_temp, best_loss = temp, loss
    return best_temp
