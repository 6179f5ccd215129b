import numpy as np
import pytest
from scipy.special import expit

from organpool.calibration import (CalibrationTable, apply_calibration, fit_calibration,
                                   fit_temperature, fit_threshold)
from organpool.errors import DataError
from organpool.metrics import auroc
from organpool.oracles import oracle_best_f1, oracle_temperature
from organpool.rng import keyed_rng


def _scaled_logits(seed, c, n=20000):
    """Logits c * z with targets drawn at the unscaled z, so the optimal
    temperature approaches c as n grows."""
    rng = keyed_rng(seed, "calib", str(c))
    z_true = rng.normal(scale=1.5, size=n)
    y = (rng.random(n) < expit(z_true)).astype(np.int64)
    return c * z_true, y


def _mean_bce(z, y):
    return float(np.mean(np.maximum(z, 0) - z * y + np.log1p(np.exp(-np.abs(z)))))


# ---------------------------------------------------------------------------
# temperature
# ---------------------------------------------------------------------------

@pytest.mark.parametrize("c", [0.5, 1.0, 2.0])
def test_fit_temperature_recovers_scale(c):
    logits, y = _scaled_logits(31, c)
    temp, status = fit_temperature(logits, y)
    assert status == "ok"
    assert abs(temp - c) / c < 0.05


def test_fit_temperature_agrees_with_grid_oracle():
    logits, y = _scaled_logits(36, 2.0, n=2000)
    temp, _ = fit_temperature(logits, y)
    grid = oracle_temperature(logits, y)
    assert abs(np.log(temp) - np.log(grid)) < 0.01


def test_fit_temperature_improves_bce_and_keeps_ranks():
    logits, y = _scaled_logits(32, 2.0)
    temp, _ = fit_temperature(logits, y)
    assert _mean_bce(logits / temp, y) <= _mean_bce(logits, y)
    assert auroc(logits, y) == auroc(logits / temp, y)     # bit-identical ranks


def test_fit_temperature_min_count_guard():
    logits, y = _scaled_logits(33, 2.0, n=80)
    targets = y.copy()
    targets[40:] = -1                                      # 40 valid < 64
    temp, status = fit_temperature(logits, targets)
    assert temp == 1.0
    assert status == "insufficient"
    temp2, status2 = fit_temperature(logits[:70], y[:70], min_count=64)
    assert status2 == "ok"
    assert temp2 != 1.0


def test_fit_temperature_drops_missing_before_fitting():
    logits, y = _scaled_logits(34, 0.5)
    targets = y.astype(np.int64).copy()
    junk = logits.copy()
    junk[::7] = 1e3                                        # junk at missing slots
    targets[::7] = -1
    t_ref, _ = fit_temperature(np.delete(logits, np.s_[::7]),
                               np.delete(targets, np.s_[::7]))
    t_got, _ = fit_temperature(junk, targets)
    assert t_got == pytest.approx(t_ref, rel=1e-9)


# ---------------------------------------------------------------------------
# thresholds
# ---------------------------------------------------------------------------

def test_fit_threshold_matches_exhaustive_oracle(rng):
    for _ in range(60):
        n = int(rng.integers(2, 40))
        probs = rng.random(n)
        if rng.random() < 0.5:
            probs = np.round(probs, 1)
        targets = rng.choice([-1, 0, 1], size=n, p=[0.15, 0.45, 0.4])
        if np.count_nonzero(targets == 1) == 0:
            continue
        theta, f1, status = fit_threshold(probs, targets)
        keep = targets != -1
        o_theta, o_f1 = oracle_best_f1(probs[keep], targets[keep])
        assert status == "ok"
        assert f1 == pytest.approx(o_f1, abs=1e-12)
        assert theta == pytest.approx(o_theta, abs=1e-12)
        assert 0.0 <= theta <= 1.0


def test_fit_threshold_no_positives():
    theta, f1, status = fit_threshold(np.array([0.2, 0.8]), np.array([0, 0]))
    assert (theta, f1, status) == (0.5, 0.0, "no_positives")


def test_fit_threshold_prefers_smallest_theta_on_ties():
    # Perfect separation: any theta in (0.4, 0.9] scores F1=1; candidates are
    # midpoints, so 0.65 is the smallest winning candidate.
    probs = np.array([0.9, 0.9, 0.4, 0.1])
    targets = np.array([1, 1, 0, 0])
    theta, f1, _ = fit_threshold(probs, targets)
    assert f1 == 1.0
    assert theta == pytest.approx(0.65)


# ---------------------------------------------------------------------------
# the full table
# ---------------------------------------------------------------------------

def _table_inputs(seed=35, n=200):
    rng = keyed_rng(seed, "table")
    z = rng.normal(scale=2.0, size=(n, 3))
    y = (rng.random((n, 3)) < expit(z)).astype(np.int64)
    y[:150, 2] = -1                                        # label c under-observed
    return z, y


def test_fit_calibration_table_and_min_count():
    z, y = _table_inputs()
    table = fit_calibration(z, y, ["a", "b", "c"], min_count=64)
    assert table.labels == ("a", "b", "c")
    assert table.temperature_status[:2] == ("ok", "ok")
    assert table.temperature_status[2] == "insufficient"
    assert table.temperatures[2] == 1.0
    assert table.valid_counts[2] == 50
    assert np.all(table.thresholds >= 0) and np.all(table.thresholds <= 1)


def test_calibration_table_round_trip(tmp_path):
    z, y = _table_inputs()
    table = fit_calibration(z, y, ["a", "b", "c"])
    path = tmp_path / "calibration.json"
    table.save(path)
    got = CalibrationTable.load(path)
    assert got.labels == table.labels
    np.testing.assert_array_equal(got.temperatures, table.temperatures)
    np.testing.assert_array_equal(got.thresholds, table.thresholds)
    np.testing.assert_array_equal(got.valid_counts, table.valid_counts)
    assert got.temperature_status == table.temperature_status
    assert got.threshold_status == table.threshold_status
    table.save(tmp_path / "again.json")
    assert (tmp_path / "again.json").read_bytes() == path.read_bytes()


def test_apply_calibration_scales_and_decides():
    z, y = _table_inputs()
    table = fit_calibration(z, y, ["a", "b", "c"])
    probs, decisions = apply_calibration(z, table)
    np.testing.assert_allclose(probs, expit(z / table.temperatures[None, :]))
    np.testing.assert_array_equal(decisions, probs >= table.thresholds[None, :])
    with pytest.raises(DataError):
        apply_calibration(z[:, :2], table)


def test_fit_calibration_validates_shapes():
    z, y = _table_inputs()
    with pytest.raises(DataError):
        fit_calibration(z, y[:10], ["a", "b", "c"])
    with pytest.raises(DataError):
        fit_calibration(z, y, ["a", "b"])
