"""Per-label temperature scaling and F1-optimal decision thresholds.

Calibration is fitted on validation predictions once and then frozen:
test-time use only divides logits by the stored temperatures and compares
the resulting probabilities against the stored thresholds.  Temperatures
come from a golden-section search on log T (BCE in 1/T is convex, so the
1-D problem is unimodal); thresholds sweep every midpoint of consecutive
distinct probabilities plus the endpoints {0, 1}.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .errors import DataError
from .metrics import f1_ba
from .validation import check_array, check_targets

TEMP_LO = 0.05
TEMP_HI = 20.0
_GOLDEN = (math.sqrt(5.0) - 1.0) / 2.0


def _mean_bce(logits: np.ndarray, targets01: np.ndarray) -> float:
    z = logits
    return float(np.mean(np.maximum(z, 0.0) - z * targets01 + np.log1p(np.exp(-np.abs(z)))))


def fit_temperature(logits: np.ndarray, targets: np.ndarray, max_iter: int = 200,
                    min_count: int = 64) -> tuple[float, str]:
    """Temperature minimizing mean BCE(z / T, y) for one label.

    Positions with target -1 are dropped first.  Fewer than min_count
    surviving samples: T = 1 with status "insufficient".
    """
    z = check_array(logits, name="logits", ndim=1, allow_empty=True)
    t = np.asarray(targets)
    keep = t != -1
    z, t01 = z[keep], t[keep].astype(np.float64)
    if z.size < min_count:
        return 1.0, "insufficient"
    lo, hi = math.log(TEMP_LO), math.log(TEMP_HI)

    def objective(x: float) -> float:
        return _mean_bce(z / math.exp(x), t01)

    a, b = lo, hi
    c = b - _GOLDEN * (b - a)
    d = a + _GOLDEN * (b - a)
    fc, fd = objective(c), objective(d)
    for _ in range(max_iter):
        if b - a < 1e-12:
            break
        if fc < fd:
            b, d, fd = d, c, fc
            c = b - _GOLDEN * (b - a)
            fc = objective(c)
        else:
            a, c, fc = c, d, fd
            d = a + _GOLDEN * (b - a)
            fd = objective(d)
    return float(math.exp(0.5 * (a + b))), "ok"


def fit_threshold(probs: np.ndarray, targets: np.ndarray) -> tuple[float, float, str]:
    """F1-maximizing threshold for one label; returns (theta, best F1, status).

    Candidates are midpoints of consecutive distinct sorted probabilities
    plus {0, 1}; ties pick the smallest theta.  With no valid positives
    the threshold defaults to 0.5 and is flagged.
    """
    p = check_array(probs, name="probs", ndim=1, allow_empty=True)
    t = np.asarray(targets)
    keep = t != -1
    p, tv = p[keep], t[keep]
    if np.count_nonzero(tv == 1) == 0:
        return 0.5, 0.0, "no_positives"
    distinct = np.unique(p)
    candidates = np.concatenate([[0.0], (distinct[:-1] + distinct[1:]) / 2.0, [1.0]])
    best_theta, best_f1 = 0.0, -1.0
    for theta in candidates:
        f1, _ = f1_ba(p, tv, float(theta))
        if f1 is not None and f1 > best_f1:
            best_theta, best_f1 = float(theta), f1
    return best_theta, best_f1, "ok"


@dataclass(frozen=True)
class CalibrationTable:
    """Frozen per-label temperatures and thresholds."""

    labels: tuple[str, ...]
    temperatures: np.ndarray
    thresholds: np.ndarray
    valid_counts: np.ndarray
    temperature_status: tuple[str, ...]
    threshold_status: tuple[str, ...]

    def __post_init__(self):
        n = len(self.labels)
        if not (len(self.temperatures) == len(self.thresholds)
                == len(self.valid_counts) == len(self.temperature_status)
                == len(self.threshold_status) == n):
            raise DataError("calibration table fields disagree on label count")
        if np.any(self.temperatures <= 0):
            raise DataError("temperatures must be positive")

    def save(self, path) -> None:
        rows = [{"label": label,
                 "temperature": float(self.temperatures[j]),
                 "threshold": float(self.thresholds[j]),
                 "valid_count": int(self.valid_counts[j]),
                 "temperature_status": self.temperature_status[j],
                 "threshold_status": self.threshold_status[j]}
                for j, label in enumerate(self.labels)]
        with open(path, "w", encoding="utf-8") as f:
            json.dump({"calibration": rows}, f, indent=2, sort_keys=True)
            f.write("\n")

    @staticmethod
    def load(path) -> "CalibrationTable":
        with open(path, "r", encoding="utf-8") as f:
            rows = json.load(f)["calibration"]
        return CalibrationTable(
            labels=tuple(r["label"] for r in rows),
            temperatures=np.array([r["temperature"] for r in rows]),
            thresholds=np.array([r["threshold"] for r in rows]),
            valid_counts=np.array([r["valid_count"] for r in rows], dtype=np.int64),
            temperature_status=tuple(r["temperature_status"] for r in rows),
            threshold_status=tuple(r["threshold_status"] for r in rows))


def fit_calibration(val_logits: np.ndarray, val_targets: np.ndarray,
                    labels: list[str] | tuple[str, ...], max_iter: int = 200,
                    min_count: int = 64) -> CalibrationTable:
    """Fit temperatures, then thresholds on the temperature-scaled probs."""
    z = check_array(val_logits, name="val_logits", ndim=2)
    y = check_targets(val_targets, n_labels=z.shape[1])
    if y.shape[0] != z.shape[0]:
        raise DataError(f"{z.shape[0]} logit rows vs {y.shape[0]} target rows")
    if len(labels) != z.shape[1]:
        raise DataError(f"{len(labels)} labels for {z.shape[1]} logit columns")
    temps, thetas, counts, t_status, th_status = [], [], [], [], []
    for j in range(z.shape[1]):
        temp, status = fit_temperature(z[:, j], y[:, j], max_iter=max_iter,
                                       min_count=min_count)
        probs = expit(z[:, j] / temp)
        theta, _, thr_status = fit_threshold(probs, y[:, j])
        temps.append(temp)
        thetas.append(theta)
        counts.append(int(np.count_nonzero(y[:, j] != -1)))
        t_status.append(status)
        th_status.append(thr_status)
    return CalibrationTable(labels=tuple(labels), temperatures=np.array(temps),
                            thresholds=np.array(thetas),
                            valid_counts=np.array(counts, dtype=np.int64),
                            temperature_status=tuple(t_status),
                            threshold_status=tuple(th_status))


def apply_calibration(logits: np.ndarray,
                      table: CalibrationTable) -> tuple[np.ndarray, np.ndarray]:
    """Calibrated probabilities and decisions; the table is never refit."""
    z = check_array(logits, name="logits", ndim=2)
    if z.shape[1] != len(table.labels):
        raise DataError(f"{z.shape[1]} logit columns vs {len(table.labels)} labels")
    probs = expit(z / table.temperatures[None, :])
    decisions = probs >= table.thresholds[None, :]
    return probs, decisions
