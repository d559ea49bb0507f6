import os
import pathlib
import sys

os.environ["DATABASE_URL"] = "sqlite:///./test_energy_lab.db"
sys.path.append(str(pathlib.Path(__file__).resolve().parents[1]))

import numpy as np
import pytest

from app.errors import CoefficientError
from app.lab import coeffs
from app.lab.coeffs import CoefficientModel


@pytest.fixture
def model():
    return CoefficientModel.analytic(A=1.0, d=3)


def test_gamma_closed_form(model):
    assert coeffs.gamma(model, 0.0) == pytest.approx(1.0)
    assert coeffs.gamma(model, 1.0) == pytest.approx(0.5)
    np.testing.assert_allclose(coeffs.gamma(model, np.array([2.0, 3.0])), [1 / 9, 1 / 28])
    with pytest.raises(CoefficientError):
        coeffs.gamma(model, -0.1)


def test_model_rejects_bad_parameters():
    with pytest.raises(CoefficientError):
        CoefficientModel.analytic(A=0.0)
    with pytest.raises(CoefficientError):
        CoefficientModel.analytic(d=1)


def test_rho_requires_positive_arguments(model):
    with pytest.raises(CoefficientError):
        coeffs.rho(model, 0.0, 1.0)
    with pytest.raises(CoefficientError):
        coeffs.beta_sq(model, 1.0, -1.0)


def test_structural_identities_hold_for_analytic_model(model):
    assert coeffs.check_homogeneity(model).passed
    assert coeffs.check_euler_relation(model).passed
    assert all(report.passed for report in coeffs.check_symmetries(model))
    assert coeffs.check_gamma_reciprocity(model).passed


def test_beta_sq_on_the_diagonal(model):
    for energy in (0.01, 1.0, 50.0):
        expected = np.sqrt(energy) / (2.0 * np.sqrt(2.0))
        assert coeffs.beta_sq(model, energy, energy) == pytest.approx(expected, rel=1e-12)


def test_drift_vanishes_on_diagonal_and_is_antisymmetric(model):
    assert coeffs.drift(model, 2.0, 2.0) == 0.0
    assert coeffs.drift(model, 0.3, 4.0) == -coeffs.drift(model, 4.0, 0.3)


def test_drift_dimension_shift(model):
    higher = model.with_dimension(5)
    s, t = 0.4, 2.5
    shift = coeffs.drift(higher, s, t) - coeffs.drift(model, s, t)
    expected = (1.0 / s - 1.0 / t) * coeffs.beta_sq(model, s, t)
    assert shift == pytest.approx(expected, rel=1e-10)


def test_G_factor_boundary_limit(model):
    assert coeffs.G_factor(model, 1.0, 1e-8) == pytest.approx(1.0 / np.sqrt(2.0), rel=1e-3)
    assert coeffs.G_factor(model, 1e-8, 4.0) == pytest.approx(1.0 / (np.sqrt(2.0) * 8.0), rel=1e-3)


def test_critical_drift_ratio(model):
    assert coeffs.critical_drift_ratio(model) == pytest.approx(2.236, abs=1e-2)


def test_drift_inequality_above_threshold(model):
    values = np.geomspace(0.01, 100.0, 25)
    grid = [(s, t) for s in values for t in values]
    report = coeffs.check_drift_inequality(model, 2.5, grid)
    assert report.passed
    assert report.points > 0
    assert report.excluded > 0


def test_drift_inequality_rejects_small_M_and_low_dimension(model):
    with pytest.raises(CoefficientError):
        coeffs.check_drift_inequality(model, 1.5, [(1.0, 4.0)])
    with pytest.raises(CoefficientError):
        coeffs.check_drift_inequality(model.with_dimension(2), 3.0, [(1.0, 4.0)])
    with pytest.raises(CoefficientError):
        coeffs.critical_drift_ratio(model.with_dimension(2))


def test_derivative_bound_is_three_A(model):
    bound = coeffs.fit_derivative_bound(model)
    assert 2.9 < bound <= 3.0 + 1e-9


def test_tail_fit_recovers_amplitude(model):
    taus, gammas = coeffs.tabulate_gamma(model)
    fit = coeffs.fit_gamma_tail(taus, gammas)
    assert fit.A == pytest.approx(1.0, rel=1e-2)
    assert fit.relative_residual < 1e-2
    assert fit.tail_points > 2


def test_empirical_model_matches_analytic(model, tmp_path):
    taus, gammas = coeffs.tabulate_gamma(model)
    path = coeffs.write_gamma_table(tmp_path / "gamma.csv", taus, gammas, header=["seed=7"])
    assert path.read_text().startswith("# seed=7\n")
    empirical = coeffs.load_gamma_table(path, d=3)
    assert not empirical.is_analytic
    probe = np.array([0.05, 0.7, 1.3, 9.0])
    np.testing.assert_allclose(coeffs.gamma(empirical, probe), coeffs.gamma(model, probe), rtol=5e-3)
    assert coeffs.gamma(empirical, 128.0) == pytest.approx(gammas[-1] / 8.0)
    assert coeffs.drift(empirical, 1.0, 1.0) == 0.0


def test_bad_gamma_tables_are_rejected(tmp_path):
    with pytest.raises(CoefficientError):
        CoefficientModel.from_table([1.0, 0.5], [0.5, 0.9])
    with pytest.raises(CoefficientError):
        CoefficientModel.from_table([0.5, 1.0], [0.5, -0.1])
    path = tmp_path / "bad.csv"
    path.write_text("tau,value\n1,2\n")
    with pytest.raises(CoefficientError):
        coeffs.load_gamma_table(path)
    with pytest.raises(CoefficientError):
        coeffs.load_gamma_table(tmp_path / "missing.csv")


def central_difference(f, x, step=1e-6):
    return (f(x + step) - f(x - step)) / (2 * step)


@pytest.mark.parametrize("a, b", [(0.3, 1.0), (1.0, 1.0), (2.5, 0.7)])
def test_partials_match_finite_differences(model, a, b):
    tau = a / b
    assert coeffs.gamma_derivative(model, tau) == pytest.approx(central_difference(lambda x: coeffs.gamma(model, x), tau), rel=1e-6)
    d_a, d_b = coeffs.rho_partials(model, a, b)
    assert d_a == pytest.approx(central_difference(lambda x: coeffs.rho(model, x, b), a), rel=1e-6)
    assert d_b == pytest.approx(central_difference(lambda x: coeffs.rho(model, a, x), b), rel=1e-6)
    d_x, d_y = coeffs.beta_sq_partials(model, a, b)
    assert d_x == pytest.approx(central_difference(lambda x: coeffs.beta_sq(model, x, b), a), rel=1e-6)
    assert d_y == pytest.approx(central_difference(lambda x: coeffs.beta_sq(model, a, x), b), rel=1e-6)


def test_gamma_derivative_vanishes_at_zero(model):
    assert coeffs.gamma_derivative(model, 0.0) == 0.0
    with pytest.raises(CoefficientError):
        coeffs.gamma_derivative(model, -1.0)
