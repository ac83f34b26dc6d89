import itertools

import numpy as np
import pytest

from core.calibrate import (
    AffineCorrection,
    CalibrationMap,
    ScalarCalibration,
    apply_affine,
    apply_affine_table,
    apply_calibration,
    apply_calibration_table,
    fit_calibration,
    fit_huber,
    fit_isotonic,
    fit_scalar,
    load_affine,
    load_calibration,
    save_affine,
    save_calibration,
)
from core.ensemble import combine, table_from_members
from core.errors import DataError, DomainError


def pool_adjacent_violators(values):
    """Reference least-squares monotone fit for distinct sorted inputs"""
    blocks = []
    for value in values:
        blocks.append([value, 1])
        while len(blocks) > 1 and blocks[-2][0] > blocks[-1][0]:
            mean, count = blocks.pop()
            previous_mean, previous_count = blocks.pop()
            total = previous_count + count
            blocks.append([(previous_mean * previous_count + mean * count) / total, total])
    return np.concatenate([np.full(count, mean) for mean, count in blocks])


def brute_force_monotone(values):
    """Best non-decreasing fit over every partition into consecutive blocks"""
    n = len(values)
    best, best_cost = None, np.inf
    for mask in itertools.product((False, True), repeat=n - 1):
        cuts = [0] + [i + 1 for i, cut in enumerate(mask) if cut] + [n]
        means = [np.mean(values[a:b]) for a, b in zip(cuts, cuts[1:])]
        if np.any(np.diff(means) < 0):
            continue
        fit = np.concatenate([np.full(b - a, m) for (a, b), m in zip(zip(cuts, cuts[1:]), means)])
        cost = np.sum((fit - values) ** 2)
        if cost < best_cost:
            best, best_cost = fit, cost
    return best


class TestIsotonic:
    def test_brute_force_optimality(self, rng):
        for _ in range(100):
            n = int(rng.integers(2, 9))
            v = np.sort(rng.uniform(0.1, 2.0, n))
            e = rng.uniform(0.0, 3.0, n)
            fitted = fit_isotonic(v, e, floor=1e-12)
            np.testing.assert_allclose(fitted.transform(v), np.maximum(brute_force_monotone(e), 1e-12), atol=1e-9)

    def test_small_example(self):
        fitted = fit_isotonic([1.0, 2.0, 3.0], [1.0, 3.0, 2.0])
        np.testing.assert_allclose(fitted.transform([1.0, 2.0, 3.0]), [1.0, 2.5, 2.5])

    def test_matches_reference(self, rng):
        v = np.sort(rng.uniform(0.01, 1.0, 60))
        e = v * rng.chisquare(1, 60) + 1e-3
        order = rng.permutation(60)
        fitted = fit_isotonic(v[order], e[order], floor=1e-12)
        np.testing.assert_allclose(fitted.transform(v), pool_adjacent_violators(e), rtol=1e-10)

    def test_monotone(self, rng):
        v = rng.uniform(0.01, 1.0, 200)
        e = v * rng.chisquare(1, 200)
        grid = np.linspace(0.0, 2.0, 500)
        for interpolation in ("step", "linear"):
            out = fit_isotonic(v, e, interpolation=interpolation).transform(grid)
            assert np.all(np.diff(out) >= 0.0)

    def test_flat_outside_knots(self):
        fitted = fit_isotonic([1.0, 2.0, 3.0], [0.5, 1.0, 4.0])
        assert fitted.transform(0.1) == pytest.approx(0.5)
        assert fitted.transform(100.0) == pytest.approx(4.0)

    def test_step_and_linear(self):
        step = fit_isotonic([1.0, 3.0], [1.0, 3.0])
        linear = fit_isotonic([1.0, 3.0], [1.0, 3.0], interpolation="linear")
        assert step.transform(2.0) == pytest.approx(1.0)
        assert linear.transform(2.0) == pytest.approx(2.0)

    def test_floor(self):
        fitted = fit_isotonic([0.1, 0.2, 0.3], [0.0, 0.0, 0.0], floor=1e-4)
        np.testing.assert_array_equal(fitted.transform([0.05, 0.2, 1.0]), 1e-4)

    def test_scale_factor_stats(self):
        fitted = fit_isotonic([1.0, 2.0], [2.0, 4.0])
        assert fitted.mean_scale_factor == pytest.approx(2.0)
        assert fitted.scale_factor_sd == pytest.approx(0.0)
        assert fitted.n_fit == 2

    def test_too_few_points(self):
        with pytest.raises(DataError):
            fit_isotonic([1.0], [1.0])

    @pytest.mark.parametrize("variances", [[1.0, 0.0], [1.0, np.nan]])
    def test_invalid_variances(self, variances):
        with pytest.raises(DomainError):
            fit_isotonic(variances, [1.0, 1.0])

    def test_unsorted_knots(self):
        with pytest.raises(DataError):
            CalibrationMap(np.array([2.0, 1.0]), np.array([1.0, 2.0]))


class TestScalar:
    def test_factor(self):
        fitted = fit_scalar([1.0, 2.0], [2.0, 4.0])
        assert fitted.factor == pytest.approx(2.0)
        assert fitted.transform(3.0) == pytest.approx(6.0)

    def test_dispatch(self):
        assert isinstance(fit_calibration([1.0, 2.0], [1.0, 1.0], method="scalar"), ScalarCalibration)
        assert isinstance(fit_calibration([1.0, 2.0], [1.0, 1.0]), CalibrationMap)
        with pytest.raises(DomainError):
            fit_calibration([1.0, 2.0], [1.0, 1.0], method="beta")


class TestApplyCalibration:
    def test_prediction(self):
        prediction = combine([0.0, 2.0], [1.0, 1.0])
        calibrated = apply_calibration(ScalarCalibration(factor=4.0), prediction)
        assert calibrated.mean == prediction.mean
        assert calibrated.total_variance == pytest.approx(8.0)
        assert calibrated.aleatoric == pytest.approx(4.0)
        assert calibrated.epistemic == pytest.approx(4.0)
        assert calibrated.scale_factor == pytest.approx(4.0)
        assert calibrated.member_means == pytest.approx((-1.0, 3.0))

    def test_table_consistent(self, rng):
        means = rng.normal(size=(20, 3))
        variances = rng.uniform(0.1, 1.0, size=(20, 3))
        table = table_from_members([str(i) for i in range(20)], rng.normal(size=20), means, variances)
        fitted = fit_isotonic(table.total, (table.y - table.mean) ** 2)
        calibrated = apply_calibration_table(fitted, table)
        np.testing.assert_array_equal(calibrated.mean, table.mean)
        np.testing.assert_allclose(calibrated.total, fitted.transform(table.total))
        np.testing.assert_allclose(calibrated.aleatoric + calibrated.epistemic, calibrated.total)
        np.testing.assert_allclose(calibrated.member_means.mean(axis=1), table.mean)
        row = apply_calibration(fitted, table.row(7))
        assert row.total_variance == pytest.approx(calibrated.total[7])

    def test_save_and_load(self, tmp_path):
        fitted = fit_isotonic([1.0, 2.0, 3.0], [1.0, 3.0, 2.0], interpolation="linear")
        loaded = load_calibration(save_calibration(fitted, tmp_path / "calibration.json"))
        grid = np.linspace(0.0, 4.0, 9)
        np.testing.assert_array_equal(loaded.transform(grid), fitted.transform(grid))
        assert loaded.interpolation == "linear"


class TestHuber:
    def test_exact_line(self):
        x = np.linspace(-3.0, 3.0, 11)
        corr = fit_huber(x, 2.0 * x + 1.0)
        assert corr.coefficient == pytest.approx(2.0, abs=1e-9)
        assert corr.intercept == pytest.approx(1.0, abs=1e-9)

    def test_outlier_resistance(self):
        x = np.arange(20.0)
        y = x.copy()
        y[-1] += 100.0
        ols_slope = np.polyfit(x, y, 1)[0]
        corr = fit_huber(x, y)
        assert abs(corr.coefficient - 1.0) < 0.05
        assert abs(ols_slope - 1.0) > 1.0

    def test_large_delta_is_least_squares(self, rng):
        x = rng.uniform(-2.0, 2.0, 40)
        y = 0.8 * x + 0.3 + rng.normal(scale=0.5, size=40)
        slope, intercept = np.polyfit(x, y, 1)
        corr = fit_huber(x, y, delta=1e9)
        assert corr.coefficient == pytest.approx(slope, abs=1e-6)
        assert corr.intercept == pytest.approx(intercept, abs=1e-6)

    def test_constant_predictions(self):
        with pytest.raises(DomainError):
            fit_huber([1.0, 1.0, 1.0], [0.0, 1.0, 2.0])

    def test_apply(self):
        corrected = apply_affine(AffineCorrection(2.0, 1.0), combine([1.0], [1.0]))
        assert corrected.mean == pytest.approx(3.0)
        assert corrected.total_variance == pytest.approx(4.0)

    def test_apply_table(self, rng):
        table = table_from_members(["a", "b"], np.zeros(2), rng.normal(size=(2, 2)), np.ones((2, 2)))
        corrected = apply_affine_table(AffineCorrection(-0.5, 2.0), table)
        np.testing.assert_allclose(corrected.mean, -0.5 * table.mean + 2.0)
        np.testing.assert_allclose(corrected.total, 0.25 * table.total)

    def test_save_and_load(self, tmp_path):
        corr = AffineCorrection(1.01, -0.2, huber_delta=0.5, n_fit=30, iterations=4)
        assert load_affine(save_affine(corr, tmp_path / "affine.json")) == corr
