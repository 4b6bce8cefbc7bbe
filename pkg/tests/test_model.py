import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from mixavg.errors import ConfigError, IntegrationError
from mixavg.mixing import estimate_corr_decay
from mixavg.model import (PopulationSpec, build_population, linear_reference_population, load_ensemble,
                          ltv_example_coefficients, save_ensemble, simulate, step)
from mixavg.spatial import sample_poisson
from mixavg.stochastic import NoiseKernel

TANH_009 = 0.0897577847471601080360632143898     # mpmath
AR1_STATIONARY_VAR = 5.26315789473684210526315789474
E_SQUARED = 7.38905609893065022723042746058
E_FOURTH = 54.5981500331442390781102612029

FAMILIES = ["saturated_linear", "clipped_polynomial", "wilson_cowan"]


def scalar_spec(**kw):
    base = dict(n_subsystems=1, heterogeneity=0.0, tau=0, coupling=0.0)
    base.update(kw)
    return PopulationSpec(**base)


# ---------------------------------------------------------------- build

def test_tau_zero_gives_identity():
    pop = build_population(PopulationSpec(6, tau=0))
    assert (pop.adjacency.toarray() == np.eye(6)).all()
    assert pop.coupling.nnz == 0


def test_banded_neighbourhood():
    pop = build_population(PopulationSpec(5, tau=1))
    assert list(pop.neighbours(3)) == [2, 3, 4]


def test_negative_tau_rejected():
    with pytest.raises(ConfigError):
        PopulationSpec(5, tau=-1)


def test_spatial_population_mean_neighbourhood():
    sizes = []
    for k in range(30):
        lay = sample_poisson(5.0, 10.0, 2, seed=k)
        pop = build_population(PopulationSpec(lay.n_points, tau=0.5), lay)
        deg = np.asarray(pop.adjacency.sum(axis=1)).ravel() - 1
        inner = np.linalg.norm(lay.positions, axis=1) <= 9.5
        sizes.append(deg[inner].mean())
    assert np.mean(sizes) == pytest.approx(5 * math.pi * 0.25, abs=0.5)


def test_layout_size_mismatch():
    lay = sample_poisson(1.0, 3.0, 2, seed=1)
    with pytest.raises(ConfigError):
        build_population(PopulationSpec(lay.n_points + 1), lay)


@given(st.integers(1, 40), st.floats(0, 6), st.integers(0, 10 ** 6))
def test_coupling_respects_range(n, tau, seed):
    pop = build_population(PopulationSpec(n, tau=tau, seed=seed))
    c = pop.coupling.tocoo()
    assert np.all(np.abs(c.row - c.col) <= tau)
    assert np.all(c.row != c.col)


def test_spec_hash_changes_with_parameters():
    a = PopulationSpec(10)
    assert a.spec_hash() == PopulationSpec(10).spec_hash()
    assert a.spec_hash() != PopulationSpec(10, gain=0.6).spec_hash()


@pytest.mark.parametrize("kw", [dict(family="relu"), dict(init="cauchy"), dict(heterogeneity=1.0),
                                dict(bound=0.0), dict(noise_amplitude=1.5), dict(state_dim=0)])
def test_invalid_specs(kw):
    with pytest.raises(ConfigError):
        PopulationSpec(4, **kw)


# ---------------------------------------------------------------- step

def test_zero_state_zero_noise_is_fixed_point():
    pop = build_population(PopulationSpec(8, tau=2))
    assert np.array_equal(step(pop, np.zeros((8, 1)), np.zeros((8, 1))), np.zeros((8, 1)))


@pytest.mark.parametrize("family", FAMILIES)
def test_saturation_bound(family):
    pop = build_population(PopulationSpec(10, family=family, bound=2.0, tau=2))
    out = step(pop, np.full((10, 1), 1e6), np.full((10, 1), 1e6))
    assert np.all(np.abs(out) <= 2.0)


def test_scalar_tanh_oracle():
    pop = build_population(scalar_spec(gain=0.9))
    out = step(pop, np.array([[0.1]]), np.array([[0.0]]))
    assert abs(out[0, 0] - TANH_009) < 1e-12


def test_non_finite_state_names_subsystem():
    pop = build_population(PopulationSpec(5, tau=1))
    x = np.zeros((5, 1))
    x[3, 0] = np.nan
    with pytest.raises(IntegrationError) as info:
        step(pop, x, np.zeros((5, 1)))
    assert info.value.index == 3
    assert "3" in str(info.value)


def test_shape_mismatch():
    pop = build_population(PopulationSpec(5))
    with pytest.raises(ConfigError):
        step(pop, np.zeros((4, 1)), np.zeros((4, 1)))


@given(st.integers(0, 10 ** 6), st.integers(6, 30), st.integers(0, 3))
def test_locality_counterfactual(seed, n, tau):
    pop = build_population(PopulationSpec(n, tau=tau, seed=seed, coupling=0.5))
    g = np.random.default_rng(seed)
    x = g.uniform(-1, 1, (n, 1))
    w = g.standard_normal((n, 1))
    i = int(g.integers(n))
    base = step(pop, x, w)
    for j in range(n):
        if abs(i - j) > tau:
            x2 = x.copy()
            x2[j] = 0.0
            assert step(pop, x2, w)[i, 0] == base[i, 0]


@given(st.sampled_from(FAMILIES), st.integers(0, 10 ** 6))
def test_bounded_families_stay_bounded(family, seed):
    spec = PopulationSpec(12, family=family, tau=2, bound=1.5, gain=2.0, input_gain=3.0, seed=seed,
                          init="gaussian", init_sd=5.0)
    ens = simulate(build_population(spec), 5, 3, seed)
    assert np.all(np.abs(ens.states[:, 1:]) <= 1.5)


# ---------------------------------------------------------------- simulate

def test_zero_input_delta_init_stays_at_zero():
    spec = PopulationSpec(10, input_gain=0.0, init="delta0", tau=1)
    ens = simulate(build_population(spec), 6, 4, seed=1)
    assert np.all(ens.states == 0.0)


def test_simulation_deterministic_and_thread_independent():
    spec = PopulationSpec(20, tau=2, noise=NoiseKernel.moving_average([1, 1]), init="gaussian", seed=3)
    pop = build_population(spec)
    a = simulate(pop, 5, 7, seed=11)
    b = simulate(pop, 5, 7, seed=11, threads=3)
    assert a.states.tobytes() == b.states.tobytes()
    assert a.noises.tobytes() == b.noises.tobytes()


def test_sums_mode_matches_full():
    pop = build_population(PopulationSpec(15, tau=1, init="gaussian"))
    full = simulate(pop, 4, 5, seed=2)
    sums = simulate(pop, 4, 5, seed=2, keep="sums", window_radii=[5, 15])
    assert sums.states is None
    assert np.allclose(sums.state_sums[:, :, 1], full.states.sum(axis=2))
    assert np.allclose(sums.state_sums[:, :, 0], full.states[:, :, :5].sum(axis=2))


def test_ar1_stationary_variance():
    spec = scalar_spec(family="linear", gain=0.9, input_gain=1.0)
    ens = simulate(build_population(spec), 100, 4000, seed=5, keep="sums")
    var = ens.state_sums[:, -1, 0, 0].var(ddof=1)
    assert var == pytest.approx(AR1_STATIONARY_VAR, rel=0.05)


def test_noise_independent_of_current_state():
    reps = 3000
    spec = PopulationSpec(6, tau=1, noise=NoiseKernel.moving_average([1, 1]), init="gaussian")
    ens = simulate(build_population(spec), 3, reps, seed=4)
    for t in (1, 2):
        for i, j in ((0, 0), (2, 3)):
            c = np.corrcoef(ens.noises[:, t, i, 0], ens.states[:, t, j, 0])[0, 1]
            assert abs(c) < 4 / math.sqrt(reps)


def test_state_correlation_decays_with_index_distance():
    spec = PopulationSpec(80, tau=1, noise=NoiseKernel.moving_average([1, 1, 1]), gain=0.5, coupling=0.4)
    ens = simulate(build_population(spec), 2, 2000, seed=6)
    p = estimate_corr_decay(ens.states[:, 2, :, 0], [1, 3, 6, 10], "mean_pairwise")
    assert p.rho_hat[0] > p.rho_hat[1] > abs(p.rho_hat[3])
    assert abs(p.rho_hat[3]) < 0.1


def test_periodic_noise_scale():
    spec = PopulationSpec(30, tau=0, noise_period=2, noise_amplitude=0.9)
    ens = simulate(build_population(spec), 4, 2000, seed=7)
    v = ens.noises.var(axis=(0, 2))[:, 0]
    assert v[0] == pytest.approx(1.9, rel=0.05)
    assert v[1] == pytest.approx(0.1, rel=0.05)


def test_save_and_load_round_trip(tmp_path):
    pop = build_population(PopulationSpec(4, state_dim=2, noise_dim=2, tau=1, init="gaussian"))
    ens = simulate(pop, 3, 2, seed=9)
    save_ensemble(ens, tmp_path / "ens")
    man, states, noises = load_ensemble(tmp_path / "ens")
    assert man["spec_hash"] == pop.spec.spec_hash()
    assert np.array_equal(states, ens.states)
    assert np.array_equal(noises, ens.noises)
    assert len(man["shards"]) == 2


def test_sums_ensemble_cannot_be_sharded(tmp_path):
    ens = simulate(build_population(PopulationSpec(3)), 2, 2, keep="sums")
    with pytest.raises(ConfigError):
        save_ensemble(ens, tmp_path)


# ---------------------------------------------------------------- linear references

def test_ltv_coefficients():
    a = ltv_example_coefficients(3)
    assert a[0] == pytest.approx(math.e)
    assert a[1] == pytest.approx(E_SQUARED, rel=1e-14)
    assert a[2] == pytest.approx(E_FOURTH, rel=1e-14)


def test_linear_reference_is_linear():
    spec = PopulationSpec(10, tau=1, family="saturated_linear")
    pop = linear_reference_population(spec)
    g = np.random.default_rng(0)
    x, w = g.standard_normal((10, 1)), g.standard_normal((10, 1))
    assert np.allclose(step(pop, 3 * x, 3 * w), 3 * step(pop, x, w))


def test_time_varying_gains():
    spec = scalar_spec(family="linear", input_gain=0.0, gain=1.0)
    pop = linear_reference_population(spec, time_gains=ltv_example_coefficients(3))
    x = np.array([[2.0]])
    for t in range(3):
        x = step(pop, x, np.zeros((1, 1)), t)
    assert x[0, 0] == pytest.approx(2 * math.e * E_SQUARED * E_FOURTH)
