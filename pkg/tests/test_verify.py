import os
import pathlib
import sys

os.environ["DATABASE_URL"] = "sqlite:///./test_energy_lab.db"
sys.path.append(str(pathlib.Path(__file__).resolve().parents[1]))

import json

import numpy as np
import pytest
from scipy import stats

from app.config import parse_config
from app.errors import VerificationError
from app.lab import coeffs, greenkubo, verify
from app.lab.coeffs import CoefficientModel
from app.lab.records import EnsembleRecord, TrajectoryRecord
from app.lab.topology import build_chain, build_complete_graph


@pytest.fixture
def model():
    return CoefficientModel.analytic(1.0, 3)


def ensemble_of(finals, t_end=1.0, start=(1.0, 1.0)):
    members = [
        TrajectoryRecord(times=[0.0, t_end], energies=[list(start), list(final)], stopped=False, stop_time=None, seed=1, config_digest="x")
        for final in finals
    ]
    return EnsembleRecord(members=members, seed=1, config_digest="x")


# -- reports -------------------------------------------------------------------


def test_suite_report_gating_and_files(tmp_path):
    suite = verify.SuiteReport(
        seed=9,
        config_digest="abc",
        reports=[
            verify.HypothesisReport(name="kept", statistic=0.1, passed=True, ci=(0.0, 0.2)),
            verify.HypothesisReport(name="info", statistic=0.9, passed=False, gated=False),
        ],
    )
    assert suite.passed
    assert suite.failures() == []
    json_path, csv_path = suite.write(tmp_path)
    payload = json.loads(json_path.read_text())
    assert payload["passed"] is True
    assert payload["configDigest"] == "abc"
    assert payload["reports"][0]["sampleSizes"] == {}
    lines = csv_path.read_text().splitlines()
    assert lines[:3] == ["# seed=9", "# config_digest=abc", "name,statistic,p_value,ci_low,ci_high,passed,gated"]
    assert lines[3].startswith("kept,0.1,")

    suite.reports.append(verify.HypothesisReport(name="broken", statistic=1.0, passed=False))
    assert not suite.passed
    assert suite.failures() == ["broken"]


# -- invariant measure ---------------------------------------------------------


def test_gibbs_marginal_mean():
    assert verify.gibbs_marginal(3, 2.0).mean() == pytest.approx(0.75)
    samples = verify.sample_gibbs(build_chain(3), 3, 1.0, 20_000, np.random.default_rng(0))
    assert samples.shape == (20_000, 3)
    assert samples.mean() == pytest.approx(1.5, rel=0.02)


def test_autocorrelation_time_of_white_and_ar1_noise():
    rng = np.random.default_rng(1)
    assert verify.integrated_autocorrelation_time(rng.standard_normal(10_000)) < 1.2
    phi = 0.9
    noise = rng.standard_normal(20_000)
    series = np.empty_like(noise)
    series[0] = noise[0]
    for i in range(1, series.size):
        series[i] = phi * series[i - 1] + noise[i]
    iat = verify.integrated_autocorrelation_time(series)
    assert 14.0 < iat < 26.0
    assert verify.effective_sample_size(series) == pytest.approx(series.size / iat)
    assert verify.integrated_autocorrelation_time(np.ones(1)) == 1.0


def test_invariant_marginal_needs_enough_effective_samples(model):
    with pytest.raises(VerificationError):
        verify.test_invariant_marginal(
            model, build_complete_graph(2), 1.0, members=10, t_run=0.1, dt=1e-3, stride=10, seed=3, min_ess=1000
        )


@pytest.mark.slow
def test_invariant_marginal_accepts_gibbs_ensemble(model):
    report = verify.test_invariant_marginal(
        model, build_complete_graph(2), 1.0, members=500, t_run=1.0, dt=1e-3, stride=20, seed=4, min_ess=200
    )
    assert report.details["targetMean"] == pytest.approx(1.5)
    assert report.sample_sizes["effective"] >= 200
    assert report.passed


def test_ks_calibration_matches_level():
    report = verify.calibrate_ks(100, 2000, 0.05, seed=5)
    assert report.name == "ks-calibration"
    assert report.passed
    assert report.statistic == pytest.approx(0.05, abs=0.02)


# -- reversibility -------------------------------------------------------------


def test_bump_log_derivatives_match_finite_differences():
    bump = verify.Bump(0, 1.0, 0.8)
    energies = np.array([[0.7, 1.0], [1.3, 1.0]])
    value, slope, curvature = bump.parts(energies)
    step = 1e-5
    shifted = np.array([[step, 0.0]])
    up = np.log(bump.parts(energies + shifted)[0])
    down = np.log(bump.parts(energies - shifted)[0])
    np.testing.assert_allclose(slope, (up - down) / (2 * step), rtol=1e-6)
    up_slope, down_slope = bump.parts(energies + shifted)[1], bump.parts(energies - shifted)[1]
    np.testing.assert_allclose(curvature, (up_slope - down_slope) / (2 * step), rtol=1e-6)
    assert bump.parts(np.array([1.0, 1.0]))[0] == pytest.approx(1.0)
    assert bump.parts(np.array([2.0, 1.0]))[0] == 0.0


def test_generator_matches_finite_differences(model):
    graph = build_complete_graph(2)
    fn = verify.BumpProduct((verify.Bump(0, 1.0, 0.8), verify.Bump(1, 1.2, 1.0)))
    energies = np.array([[0.9, 1.1], [1.2, 0.8], [0.6, 1.5]])
    h = 1e-4
    direction = np.array([h, -h])
    plus = fn.parts(energies + direction)[0]
    centre = fn.parts(energies)[0]
    minus = fn.parts(energies - direction)[0]
    a = np.array([coeffs.drift(model, x, y) for x, y in energies])
    b2 = np.array([coeffs.beta_sq(model, x, y) for x, y in energies])
    expected = a * (plus - minus) / (2 * h) + b2 * (plus - 2 * centre + minus) / h**2
    np.testing.assert_allclose(verify.apply_generator(model, graph, energies, fn), expected, rtol=1e-5, atol=1e-8)


def test_reversibility_of_identical_functions_is_exact(model):
    fn = verify.BumpProduct((verify.Bump(0, 1.0, 0.8),))
    report = verify.test_reversibility(model, build_complete_graph(2), 1.0, (fn, fn), samples=1000, seed=6)
    assert report.statistic == 0.0
    assert report.passed


def test_reversibility_catalog_pair_passes(model):
    name, phi, h = verify.REVERSIBILITY_CATALOG[0]
    report = verify.test_reversibility(model, build_complete_graph(2), 1.0, (phi, h), samples=200_000, seed=7, name=name)
    assert report.name == "disjoint-sites"
    assert report.passed
    assert report.ci[0] <= 0.0 <= report.ci[1]


def test_catalog_names_are_unique():
    names = [name for name, _, _ in verify.REVERSIBILITY_CATALOG]
    assert len(names) == len(set(names)) == 5


# -- drift identity and conservation -------------------------------------------


def test_drift_identity_for_analytic_model(model):
    report = verify.test_drift_identity(model)
    assert report.name == "drift-identity"
    assert report.passed
    assert verify.test_drift_identity(model.with_dimension(5)).passed


def test_energy_conservation_report():
    record = TrajectoryRecord(
        times=[0.0, 1.0], energies=[[1.0, 1.0], [0.5, 1.5]], stopped=False, stop_time=None, seed=1, config_digest="x",
        metadata={"maxStepImbalance": 1e-16},
    )
    report = verify.test_energy_conservation(record)
    assert report.name == "energy-conservation"
    assert report.passed
    assert report.details["totalDrift"] == 0.0
    leaky = TrajectoryRecord(times=[0.0, 1.0], energies=[[1.0, 1.0], [1.0, 1.1]], stopped=False, stop_time=None, seed=1, config_digest="x")
    assert not verify.test_energy_conservation(leaky).passed


# -- hitting and downcrossings -------------------------------------------------


def test_hitting_probability_is_one_at_the_initial_minimum(model):
    table = verify.estimate_hitting_probability(
        model, build_chain(2), [1.0, 1.0], 0.01, [0.5, 1.0], ensemble=50, seed=8, dt=1e-3
    )
    assert [row.delta for row in table.rows] == [1.0, 0.5]
    assert table.rows[0].probability == 1.0
    assert table.rows[0].ci_low > 0.9
    assert table.probabilities[1] <= table.probabilities[0]


def hitting_table(probabilities, trials=1000):
    rows = []
    for delta, p in zip([1e-1, 1e-2, 1e-3], probabilities):
        hits = int(p * trials)
        interval = stats.binomtest(hits, trials).proportion_ci(method="wilson")
        rows.append(verify.HittingRow(delta=delta, hits=hits, trials=trials, probability=hits / trials, ci_low=interval.low, ci_high=interval.high))
    return verify.HittingTable(rows=rows, horizon=1.0, d=3, seed=0, confidence=0.95)


def test_unreachability_trend_accepts_falling_probabilities():
    report = verify.test_unreachability_trend(hitting_table([0.6, 0.2, 0.05]))
    assert report.passed
    assert report.details["strictlyDecreasing"]


def test_unreachability_trend_rejects_flat_or_rising_probabilities():
    assert not verify.test_unreachability_trend(hitting_table([0.3, 0.3, 0.28])).passed
    assert not verify.test_unreachability_trend(hitting_table([0.2, 0.3, 0.05])).passed


def test_unreachability_trend_rejects_a_plateau_even_when_endpoints_separate():
    report = verify.test_unreachability_trend(hitting_table([0.6, 0.6, 0.05]))
    assert not report.details["strictlyDecreasing"]
    assert not report.passed


def test_small_site_gains_energy(model):
    report = verify.test_small_site_drift(model, build_chain(2), [1e-3, 1.0], dt=1e-5, steps=10, ensemble=2000, seed=10)
    assert report.details["site"] == 0
    assert report.details["expectedIncrement"] > 0
    assert report.passed


def test_count_downcrossings():
    assert verify.count_downcrossings([0.0, 2.0, 0.0, 2.0, 0.5, -1.0], 0.0, 1.0) == 2
    assert verify.count_downcrossings([0.0, -1.0, 0.5], 0.0, 1.0) == 0
    with pytest.raises(ValueError):
        verify.count_downcrossings([0.0], 1.0, 1.0)


def test_downcrossing_profile():
    finals = [(0.001, 1.999), (1.0, 1.0)]
    members = [
        TrajectoryRecord(times=[0.0, 1.0, 2.0], energies=[[1.0, 1.0], list(final), [1.0, 1.0]], stopped=False, stop_time=None, seed=1, config_digest="x")
        for final in finals
    ]
    ensemble = EnsembleRecord(members=members, seed=1, config_digest="x")
    profile = verify.downcrossing_profile(ensemble, [0.01])
    assert profile == [{"delta": 0.01, "meanDowncrossings": 0.5}]
    with pytest.raises(ValueError):
        verify.downcrossing_profile(ensemble, [1.5])


# -- micro versus SDE ----------------------------------------------------------


def test_identical_ensembles_compare_equal():
    finals = [(x, 2.0 - x) for x in np.linspace(0.2, 1.8, 40)]
    report = verify.compare_micro_sde(ensemble_of(finals), ensemble_of(finals))
    assert report.statistic == 0.0
    assert report.passed
    assert not report.gated
    assert report.details["noiseFloor"] == pytest.approx(verify.ks_noise_floor(40, 40))


def test_compare_rejects_mismatched_ensembles():
    finals = [(0.5, 1.5), (1.5, 0.5)]
    with pytest.raises(VerificationError):
        verify.compare_micro_sde(ensemble_of(finals), ensemble_of(finals, t_end=2.0))
    with pytest.raises(VerificationError):
        verify.compare_micro_sde(ensemble_of(finals), ensemble_of(finals, start=(0.5, 1.5)))
    with pytest.raises(VerificationError):
        verify.compare_micro_sde(ensemble_of([]), ensemble_of(finals))


def test_ladder_requires_shrinking_distances():
    def report(distance):
        return verify.HypothesisReport(name="r", statistic=distance, passed=True, details={"noiseFloor": 0.1})

    assert verify.compare_ladder([0.2, 0.1, 0.05], [report(0.5), report(0.2), report(0.05)]).passed
    assert not verify.compare_ladder([0.2, 0.1, 0.05], [report(0.5), report(0.6), report(0.05)]).passed
    assert not verify.compare_ladder([0.2, 0.1], [report(0.5), report(0.3)]).passed


def test_ks_noise_floor_value():
    assert verify.ks_noise_floor(100, 100) == pytest.approx(1.358 * np.sqrt(0.02), rel=1e-3)


# -- map testbed ---------------------------------------------------------------


def test_sigma_reports():
    estimate = greenkubo.CorrelationEstimate(value=0.51, stderr=0.01, window=1.0, ensemble=100)
    oracle = greenkubo.CorrelationEstimate(value=0.5, stderr=0.01, window=100.0, ensemble=100)
    assert verify.test_sigma_against_oracle(estimate, oracle).passed
    assert not verify.test_sigma_against_oracle(estimate.model_copy(update={"value": 0.7}), oracle).passed
    zero = greenkubo.CorrelationEstimate(value=0.001, stderr=0.001, window=2.0, ensemble=100)
    assert verify.test_zero_sigma(zero).passed
    assert not verify.test_zero_sigma(zero.model_copy(update={"value": 0.1})).passed


# -- suite ---------------------------------------------------------------------


def test_run_suite_with_selected_checks(tmp_path):
    config = parse_config({"seed": 3, "verify": {"checks": ["drift-identity", "coefficients"]}})
    suite = verify.run_suite(config, output_dir=tmp_path)
    assert suite.passed
    names = [report.name for report in suite.reports]
    assert names[0] == "homogeneity"
    assert names[-1] == "drift-identity"
    assert "drift-inequality" in names
    assert all(report.seed == 3 for report in suite.reports)
    assert (tmp_path / "reports.json").exists()
    assert (tmp_path / "summary.csv").read_text().startswith("# seed=3\n")


def test_run_suite_rejects_unknown_check():
    config = parse_config({"verify": {"checks": ["astrology"]}})
    with pytest.raises(VerificationError):
        verify.run_suite(config)


def test_conservation_check_in_suite():
    config = parse_config({"seed": 4, "sde": {"tEnd": 0.05, "dt": 1e-4}, "verify": {"checks": ["conservation"]}})
    suite = verify.run_suite(config)
    assert suite.passed
    assert suite.reports[0].name == "energy-conservation"
