import math

import numpy as np
import pytest
from scipy import stats

from system.errors import ConfigurationError
from system.grid import Grid1D
from system.kde import BandwidthMethod, BandwidthReport
from system.models import BetaSpec, gaussian_mixture, trimodal
from system.particle_solver import (ParticleConfig, ParticleEnsemble, ParticleSolver,
                                    brownian_increments, displacement_bound_holds, estimate_density,
                                    euler_step, init_ensemble, run_particles)

NORMAL = gaussian_mixture((1.0,), (0.0,), (1.0,))


def make_config(**kwargs):
    params = dict(n=400, dt=0.01, T=0.05, beta=BetaSpec.power_law(3), init=NORMAL, seed=1,
                  bandwidth_method=BandwidthMethod.SILVERMAN)
    params.update(kwargs)
    return ParticleConfig(**params)


def fixed_report(epsilon):
    return BandwidthReport(epsilon, epsilon, epsilon, 1.0, 0, BandwidthMethod.SILVERMAN)


class TestConfig:
    def test_step_count(self):
        assert make_config(dt=2e-4, T=0.6).n_steps == 3000

    @pytest.mark.parametrize("kwargs", [
        {'n': 0},
        {'dt': 0.0},
        {'T': 0.055},
        {'bandwidth_stride': 0},
        {'bandwidth_tol': 0.0},
        {'snapshot_times': [0.1]},
        {'exact_interaction': True, 'n': 6000},
        {'track_particles': [400]},
        {'seed': -1},
    ])
    def test_rejects(self, kwargs):
        with pytest.raises(ConfigurationError):
            make_config(**kwargs)

    def test_zero_horizon_allowed(self):
        assert make_config(T=0.0).n_steps == 0


class TestInit:
    def test_normal_variance(self):
        ens = init_ensemble(make_config(n=100_000))
        assert 0.97 <= np.var(ens.positions, ddof=1) <= 1.03

    def test_same_seed_same_positions(self):
        a = init_ensemble(make_config(seed=5))
        b = init_ensemble(make_config(seed=5))
        assert np.array_equal(a.positions, b.positions)

    def test_other_seed_same_law(self):
        a = init_ensemble(make_config(n=5000, seed=5))
        b = init_ensemble(make_config(n=5000, seed=6))
        assert not np.array_equal(a.positions, b.positions)
        assert stats.ks_2samp(a.positions, b.positions).pvalue > 0.01

    def test_bandwidth_from_initial_sample(self):
        ens = init_ensemble(make_config())
        assert ens.time == 0.0 and ens.step == 0
        assert ens.epsilon == ens.bandwidth.epsilon > 0


class TestIncrements:
    def test_keyed_on_seed_and_step(self):
        a = brownian_increments(3, 7, 100, 0.01)
        assert np.array_equal(a, brownian_increments(3, 7, 100, 0.01))
        assert not np.array_equal(a, brownian_increments(3, 8, 100, 0.01))
        assert not np.array_equal(a, brownian_increments(4, 7, 100, 0.01))

    def test_prefix_stable_in_n(self):
        # particle i draws the same increment whatever the ensemble size
        assert np.array_equal(brownian_increments(3, 0, 50, 0.01), brownian_increments(3, 0, 100, 0.01)[:50])

    def test_variance(self):
        x = brownian_increments(0, 0, 200_000, 0.04)
        assert np.var(x) == pytest.approx(0.04, rel=0.02)


class TestEulerStep:
    def test_zero_diffusion_freezes_positions(self):
        config = make_config(beta=BetaSpec.heaviside(100.0))
        ens = init_ensemble(config)
        stepped = euler_step(ens, config)
        assert np.array_equal(stepped.positions, ens.positions)
        assert stepped.max_displacement == 0.0
        assert stepped.time == pytest.approx(config.dt)

    def test_single_particle_power_law(self):
        # n = 1: the estimate at the particle is K_eps(0) = 1/(eps sqrt(2 pi)) and Phi(u) = u for m = 3
        config = make_config(n=1, bandwidth_stride=2, seed=9)
        epsilon = 0.5
        ens = ParticleEnsemble(np.array([0.3]), 0.0, epsilon, 0, 9, fixed_report(epsilon))
        stepped = euler_step(ens, config)
        increment = brownian_increments(9, 0, 1, config.dt)[0]
        expected = 0.3 + increment / (epsilon * math.sqrt(2.0 * math.pi))
        assert stepped.positions[0] == pytest.approx(expected, rel=1e-12)
        assert stepped.epsilon == epsilon

    def test_unit_diffusion_is_brownian(self):
        identity = BetaSpec.tabulated([0.0, 1.0], [0.0, 1.0])
        config = make_config(n=10_000, dt=0.1, T=1.0, beta=identity, bandwidth_stride=100)
        ens = init_ensemble(config)
        var0 = np.var(ens.positions)
        for _ in range(config.n_steps):
            ens = euler_step(ens, config)
        assert np.var(ens.positions) == pytest.approx(var0 + config.T, rel=0.05)

    def test_exact_interaction_matches_truncated(self):
        truncated = make_config(n=1000, T=0.02)
        exact = make_config(n=1000, T=0.02, exact_interaction=True)
        a = run_particles(truncated).snapshots
        b = run_particles(exact).snapshots
        np.testing.assert_allclose(a[-1].ensemble.positions, b[-1].ensemble.positions, rtol=1e-10, atol=1e-12)

    def test_refuses_to_pass_horizon(self):
        config = make_config(T=0.01)
        ens = euler_step(init_ensemble(config), config)
        with pytest.raises(ConfigurationError):
            euler_step(ens, config)

    @pytest.mark.parametrize("beta", [BetaSpec.power_law(3), BetaSpec.heaviside(0.15)])
    def test_displacement_within_phi_max_times_increment(self, beta):
        config = make_config(beta=beta, T=0.1)
        for ens in _collect(config)[1:]:
            assert ens.max_displacement <= ens.phi_max * ens.max_increment * (1 + 1e-12) + 1e-15
            assert displacement_bound_holds(ens.max_displacement, ens.phi_max, ens.max_increment,
                                            float(np.max(np.abs(ens.positions))))

    def test_displacement_bound_check(self):
        assert displacement_bound_holds(0.3, 1.5, 0.2)
        assert displacement_bound_holds(0.0, 0.0, 0.2)
        assert not displacement_bound_holds(0.31, 1.5, 0.2)
        assert not displacement_bound_holds(0.1, float('nan'), 0.2)
        # a rounding-level move of a particle far from the origin is tolerated
        assert displacement_bound_holds(np.spacing(1e3), 0.0, 0.2, position_scale=1e3)

    def test_bandwidth_stride(self):
        config = make_config(bandwidth_stride=3, T=0.04)
        eps = [ens.epsilon for ens in _collect(config)]
        assert eps[1] == eps[2] == eps[0]
        assert eps[3] != eps[0]


def _collect(config):
    seen = []
    run_particles(config, callbacks=[seen.append])
    return seen


class TestRun:
    def test_deterministic(self):
        config = make_config(init=trimodal(), beta=BetaSpec.heaviside(0.15), snapshot_times=[0.0, 0.05])
        first = run_particles(config)
        second = run_particles(config)
        assert len(first.snapshots) == 2
        for a, b in zip(first.snapshots, second.snapshots):
            assert np.array_equal(a.ensemble.positions, b.ensemble.positions)
            assert a.bandwidth == b.bandwidth

    def test_zero_horizon_single_snapshot(self):
        config = make_config(T=0.0)
        run = run_particles(config)
        assert len(run.snapshots) == 1
        time, ens, _ = run.snapshots[0]
        assert time == 0.0
        assert np.array_equal(ens.positions, init_ensemble(config).positions)

    def test_callbacks_every_step(self):
        config = make_config(track_particles=[0, 5])
        seen = _collect(config)
        assert [ens.step for ens in seen] == list(range(config.n_steps + 1))
        run = run_particles(config)
        assert len(run.times) == config.n_steps + 1
        assert run.trajectories[5][0] == seen[0].positions[5]
        assert run.trajectories[0][-1] == seen[-1].positions[0]

    def test_frozen_from(self):
        frozen = run_particles(make_config(beta=BetaSpec.heaviside(100.0)))
        assert frozen.frozen_from() == 0
        assert run_particles(make_config()).frozen_from() is None

    def test_solver_callbacks(self):
        solver = ParticleSolver(make_config(T=0.02))
        times = []
        solver.add_step_callback(lambda ens: times.append(ens.time))
        solver.run()
        assert times == pytest.approx([0.0, 0.01, 0.02])

    def test_rng_state(self):
        ens = init_ensemble(make_config(seed=4))
        assert ens.rng_state == (4, 0)


class TestEstimateDensity:
    def test_unit_mass(self):
        ens = init_ensemble(make_config(n=2000))
        grid = Grid1D.from_spacing(-12.0, 12.0, 0.01)
        assert estimate_density(ens, grid).mass() == pytest.approx(1.0, abs=1e-4)

    def test_single_particle_symmetric(self):
        ens = ParticleEnsemble(np.array([0.0]), 0.0, 1.0, 0, 0, fixed_report(1.0))
        field = estimate_density(ens, Grid1D(-1.0, 1.0, 21))
        np.testing.assert_allclose(field.values, field.values[::-1], rtol=1e-12)
        assert int(np.argmax(field.values)) == 10

    def test_translation_equivariance(self):
        ens = init_ensemble(make_config())
        shifted = ParticleEnsemble(ens.positions + 0.5, 0.0, ens.epsilon, 0, ens.seed, ens.bandwidth)
        a = estimate_density(ens, Grid1D(-5.0, 5.0, 200))
        b = estimate_density(shifted, Grid1D(-4.5, 5.5, 200))
        np.testing.assert_allclose(a.values, b.values, rtol=1e-9, atol=1e-14)
