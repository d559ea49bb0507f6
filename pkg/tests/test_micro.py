import os
import pathlib
import sys

os.environ["DATABASE_URL"] = "sqlite:///./test_energy_lab.db"
sys.path.append(str(pathlib.Path(__file__).resolve().parents[1]))

import math

import numpy as np
import pytest

from app.errors import CoefficientError, CorrelationError, MicroIntegrationError
from app.lab.micro import backends, dynamics, slowfast
from app.lab.micro.cutoffs import CutoffFamily, omega_delta, phi_delta, zeta_delta
from app.lab.rng import make_rng
from app.lab.topology import build_chain, build_complete_graph


@pytest.fixture
def cutoff():
    return CutoffFamily(0.2)


@pytest.fixture
def surface():
    return backends.HyperbolicSurface()


# -- cutoffs -------------------------------------------------------------------


def test_cutoff_is_one_above_delta_and_square_root_below(cutoff):
    np.testing.assert_allclose(cutoff.phi(np.array([0.2, 1.0, 30.0])), 1.0)
    small = np.array([1e-4, 0.01, 0.2 / 8])
    np.testing.assert_allclose(cutoff.phi(small), np.sqrt(small / 0.2), rtol=1e-12)
    with pytest.raises(CoefficientError):
        CutoffFamily(0.0)
    with pytest.raises(CoefficientError):
        cutoff.phi(-1.0)


def test_cutoff_is_nondecreasing_and_bounded(cutoff):
    s = np.geomspace(1e-4, 2.0, 2000)
    values = cutoff.phi(s)
    assert np.all(np.diff(values) >= -1e-15)
    assert np.all(values <= 1.0)
    assert np.all(cutoff.phi_prime(s) >= 0)


def test_omega_and_zeta(cutoff):
    z = np.log(np.geomspace(1e-4, 5.0, 500))
    omega = cutoff.omega(z)
    assert np.all(omega > 0)
    above = z >= math.log(0.2)
    np.testing.assert_allclose(omega[above], np.sqrt(2 * np.exp(z[above])), rtol=1e-12)
    below = z <= math.log(0.2 / 8) - 1e-9
    np.testing.assert_allclose(omega[below], math.sqrt(2 * 0.2), rtol=1e-12)
    window = ~above & ~below
    assert np.all(omega[window] <= math.sqrt(2 * 0.2) + 1e-12)
    assert np.all(omega[window] >= math.sqrt(0.2 / 4) - 1e-12)
    zeta = cutoff.zeta(z)
    assert np.all(zeta >= 0)
    assert cutoff.zeta(math.log(1.0)) == 0.0
    assert cutoff.zeta(math.log(1e-3)) == pytest.approx(1.0 / math.sqrt(2 * 0.2), rel=1e-12)


def test_energy_map_is_continuous_with_derivative_one_over_phi(cutoff):
    assert cutoff.energy_map(3.0) == 3.0
    for edge in (0.2, 0.2 / 8):
        below, above = cutoff.energy_map(edge * (1 - 1e-9)), cutoff.energy_map(edge * (1 + 1e-9))
        assert below == pytest.approx(above, abs=1e-9)
    for s in (0.005, 0.05, 0.1, 0.19):
        step = 1e-6 * s
        slope = (cutoff.energy_map(s + step) - cutoff.energy_map(s - step)) / (2 * step)
        assert slope == pytest.approx(1.0 / cutoff.phi(s), rel=1e-5)


def test_log_helpers_agree(cutoff):
    z = np.log(np.array([0.01, 0.1, 1.0]))
    np.testing.assert_allclose(cutoff.phi_of_log(z), cutoff.phi(np.exp(z)))
    np.testing.assert_allclose(cutoff.energy_map_of_log(z), cutoff.energy_map(np.exp(z)))


def test_module_functions_match_family(cutoff):
    assert phi_delta(0.01, 0.2) == pytest.approx(float(cutoff.phi(0.01)))
    assert omega_delta(-3.0, 0.2) == pytest.approx(float(cutoff.omega(-3.0)))
    assert zeta_delta(-3.0, 0.2) == pytest.approx(float(cutoff.zeta(-3.0)))


# -- hyperbolic surface --------------------------------------------------------


def test_side_pairings_are_unimodular(surface):
    np.testing.assert_allclose(backends.determinant(surface.generators), 1.0, rtol=1e-12)
    assert surface.in_domain(np.array([1j]))[0]
    assert not surface.in_domain(surface.centres).any()


def test_identity_frame_sits_at_i_pointing_up(surface):
    identity = np.eye(2)
    assert backends.mobius(identity, 1j) == 1j
    assert surface.velocity(identity) == 1j


def test_uniform_frames_lie_in_domain(surface):
    frames = surface.sample_uniform(make_rng(3, "test"), 500)
    assert frames.shape == (500, 2, 2)
    np.testing.assert_allclose(backends.determinant(frames), 1.0, rtol=1e-10)
    assert surface.in_domain(surface.base_point(frames)).all()


def test_advance_reduces_back_into_domain(surface):
    frames = surface.sample_uniform(make_rng(4, "test"), 200)
    moved = surface.advance(frames, 3.0)
    assert surface.in_domain(surface.base_point(moved)).all()
    np.testing.assert_allclose(backends.determinant(moved), 1.0, rtol=1e-10)
    np.testing.assert_array_equal(surface.advance(frames, 0.0), frames)


def test_double_reversal_is_the_identity_on_base_points(surface):
    frames = surface.sample_uniform(make_rng(5, "test"), 20)
    twice = surface.reverse(surface.reverse(frames))
    np.testing.assert_allclose(surface.base_point(twice), surface.base_point(frames))
    np.testing.assert_allclose(surface.velocity(surface.reverse(frames)), -surface.velocity(frames))


# -- cat map -------------------------------------------------------------------


def test_cat_map_integer_step():
    torus = backends.CatMapTorus()
    points = np.array([[1, 0], [torus.MODULUS - 1, 1]], dtype=np.int64)
    np.testing.assert_array_equal(torus.step(points), [[2, 1], [torus.MODULUS - 1, 0]])
    np.testing.assert_array_equal(torus.iterate(points, 2), torus.step(torus.step(points)))


def test_cat_map_half_steps_compose():
    torus = backends.CatMapTorus()
    state = torus.sample_uniform(make_rng(1, "test"), 50)
    halfway = torus.advance(torus.advance(state, 0.5), 0.5)
    np.testing.assert_array_equal(halfway.points, torus.step(state.points))
    np.testing.assert_allclose(halfway.phase, 0.0)


def test_torus_observables_are_centred():
    torus = backends.CatMapTorus()
    u = torus.sample_points(make_rng(2, "test"), 200_000).astype(float) / torus.MODULUS
    for name, observable in backends.TORUS_OBSERVABLES.items():
        assert abs(float(observable(u).mean())) < 0.02, name
    assert set(backends.TORUS_SIGMA_SQ) == set(backends.TORUS_OBSERVABLES)


# -- potentials ----------------------------------------------------------------


def test_product_bump_values(surface):
    potential = backends.ProductBumpPotential()
    identity = np.eye(2)
    assert potential.single(identity) == pytest.approx(1.0)
    far = identity @ backends.flow_matrix(backends.INRADIUS)
    assert potential.single(far) == 0.0
    with pytest.raises(ValueError):
        backends.ProductBumpPotential(radius=5.0)


def test_bump_current_matches_flow_derivative(surface):
    potential = backends.ProductBumpPotential()
    gx = surface.sample_uniform(make_rng(6, "test"), 100)
    gy = surface.sample_uniform(make_rng(7, "test"), 100)
    step = 1e-6
    forward = potential.value(gx @ backends.flow_matrix(step), gy)
    backward = potential.value(gx @ backends.flow_matrix(-step), gy)
    numeric = (forward - backward) / (2 * step)
    np.testing.assert_allclose(backends.coupling_current(surface, gx, gy, potential), numeric, rtol=1e-5, atol=1e-8)


def test_constant_potential_has_no_current(surface):
    frames = surface.sample_uniform(make_rng(8, "test"), 10)
    current = backends.coupling_current(surface, frames, frames, backends.ConstantPotential())
    np.testing.assert_array_equal(current, 0.0)


def test_factories_reject_unknown_names():
    assert isinstance(backends.make_backend("torus"), backends.CatMapTorus)
    assert isinstance(backends.make_potential("constant"), backends.ConstantPotential)
    with pytest.raises(ValueError):
        backends.make_backend("sphere")
    with pytest.raises(ValueError):
        backends.make_potential("quartic")


# -- coupled dynamics ----------------------------------------------------------


def micro_config(**overrides):
    values = dict(
        graph=build_complete_graph(2),
        initial_energies=(1.0, 1.0),
        epsilon=0.2,
        delta=0.2,
        h=0.01,
        t_slow=0.004,
        samples=5,
        seed=21,
    )
    values.update(overrides)
    return dynamics.MicroConfig(**values)


def test_micro_config_validation():
    with pytest.raises(ValueError):
        micro_config(delta=1.5)
    with pytest.raises(ValueError):
        micro_config(epsilon=0.0)
    with pytest.raises(ValueError):
        micro_config(initial_energies=(1.0, -1.0))
    config = micro_config()
    assert config.n_steps == 10
    assert config.horizon == pytest.approx(0.1)


def test_micro_run_keeps_hamiltonian(caplog):
    record = dynamics.micro_simulate(micro_config())
    assert record.metadata["timeAxis"] == "slow"
    assert record.metadata["maxHamiltonianDrift"] <= dynamics.DRIFT_WARNING
    assert record.times[-1] == pytest.approx(0.004)
    assert np.all(record.energies > 0)


def test_uncoupled_micro_run_freezes_energies():
    config = micro_config(epsilon=0.0, physical_time=0.05)
    record = dynamics.micro_simulate(config)
    assert record.metadata["timeAxis"] == "physical"
    np.testing.assert_array_equal(record.energies, 1.0)
    assert record.times[-1] == pytest.approx(0.05)


def test_micro_run_rejects_large_coupling_and_torus_backend():
    with pytest.raises(MicroIntegrationError):
        dynamics.micro_simulate(micro_config(epsilon=0.8))
    with pytest.raises(MicroIntegrationError):
        dynamics.build_system(micro_config(backend="torus"))


def test_micro_ensemble_is_batch_independent():
    config = micro_config(graph=build_chain(3), initial_energies=(1.0, 0.5, 2.0))
    whole = dynamics.micro_ensemble(config, 3, batch_size=3)
    split = dynamics.micro_ensemble(config, 3, batch_size=1)
    np.testing.assert_allclose(whole.final_energies(), split.final_energies(), rtol=1e-12)


def test_time_reversal_returns_to_start():
    report = dynamics.check_time_reversal(micro_config(), steps=20)
    assert report.log_energy_error < 1e-6
    assert report.position_error < 1e-6
    assert report.velocity_error < 1e-6


# -- slow-fast maps ------------------------------------------------------------


def test_zero_coupling_leaves_slow_variable_fixed():
    paths = slowfast.simulate_slow_fast_map(backends.CatMapTorus(), "zero", 0.1, 1.0, 10, seed=1)
    np.testing.assert_array_equal(paths.paths, 0.0)
    assert paths.steps == 100


def test_slow_variance_grows_like_sigma_squared_t():
    paths = slowfast.simulate_slow_fast_map(backends.CatMapTorus(), "cos1", 0.1, 1.0, 4000, seed=2)
    assert paths.final_variance == pytest.approx(0.5, abs=0.08)
    assert paths.variance_at(0.5) == pytest.approx(0.25, abs=0.05)


def test_non_centred_coupling_is_rejected():
    coupling = lambda u, z, eps: 1.0 + np.cos(2 * np.pi * u[..., 0])
    with pytest.raises(CorrelationError):
        slowfast.simulate_slow_fast_map(backends.CatMapTorus(), coupling, 0.1, 1.0, 10, seed=3)
    with pytest.raises(ValueError):
        slowfast.named_coupling("quadratic")
    with pytest.raises(ValueError):
        slowfast.simulate_slow_fast_map(backends.CatMapTorus(), "cos1", 0.1, 1.0, 1, seed=3)


def test_slow_paths_file_header(tmp_path):
    paths = slowfast.simulate_slow_fast_map(backends.CatMapTorus(), "cos1", 0.2, 0.4, 4, seed=5)
    csv_path, json_path = slowfast.write_slow_paths(paths, tmp_path, "digest-1")
    lines = csv_path.read_text().splitlines()
    assert lines[:3] == ["# seed=5", "# config_digest=digest-1", "member,t,z"]
    assert json_path.exists()
