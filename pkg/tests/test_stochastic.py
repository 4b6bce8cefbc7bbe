import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from mixavg.errors import ConfigError, KernelInfeasibleError
from mixavg.stochastic import (INVERSE_LAG_MAX_C, NoiseKernel, SampleMatrix, exact_partial_sum_variance,
                               fgn_autocovariance, gen_field_gaussian, gen_iid, gen_kernel_gaussian,
                               gen_long_memory, gen_ma, inverse_lag_spectral_min, synthesizer)

# oracle constants evaluated at 30 digits with mpmath, frozen here
SPECTRAL_MIN_C_HALF = 0.306852819440054690582767878542
INVERSE_LAG_C_LIMIT = 0.721347520444481703679962340501
FGN_GAMMA1_H07 = 0.31950791077289425937400197123
VAR_S100_H07 = 630.957344480193249434360136623


def lag_corr(values, lag):
    a = values[:, :-lag].ravel()
    b = values[:, lag:].ravel()
    return float(np.corrcoef(a, b)[0, 1])


# ---------------------------------------------------------------- gen_iid

def test_iid_small_is_reproducible_bit_exact():
    a = gen_iid(4, 1, "gaussian", seed=7)
    b = gen_iid(4, 1, "gaussian", seed=7)
    assert a.values.shape == (1, 4)
    assert np.all(np.isfinite(a.values))
    assert a.values.tobytes() == b.values.tobytes()


def test_uniform_mean_is_zero():
    # uniform on [-1, 1] has variance 1/3
    s = gen_iid(10_000, 100, "uniform", seed=1, variance=1.0 / 3.0)
    assert np.abs(s.values).max() <= 1.0
    assert abs(s.values.mean()) < 0.003


def test_gaussian_variance_two():
    s = gen_iid(10_000, 100, "gaussian", seed=2, variance=2.0)
    assert s.values.var() == pytest.approx(2.0, abs=0.02)


def test_clipped_is_bounded():
    s = gen_iid(1000, 5, "clipped", seed=3, clip=1.5)
    assert np.abs(s.values).max() <= 1.5


@pytest.mark.parametrize("kwargs", [dict(distribution="cauchy"), dict(variance=-1.0), dict(distribution="clipped", clip=0.0)])
def test_iid_bad_parameters(kwargs):
    with pytest.raises(ConfigError):
        gen_iid(4, 2, **kwargs)


def test_iid_bad_shape():
    with pytest.raises(ConfigError):
        gen_iid(0, 2)


# ---------------------------------------------------------------- gen_ma

def test_ma_single_weight_matches_iid():
    a = gen_ma(50, 3, [1.0], seed=5)
    b = gen_iid(50, 3, "gaussian", seed=5)
    assert np.array_equal(a.values, b.values)


def test_ma_equal_weights_identity():
    k = NoiseKernel.moving_average([1, 1])
    assert k.correlation([1, 2]) == pytest.approx([0.5, 0.0])


def test_ma_lag_one_correlation_empirical():
    # analytic MA autocorrelation 0.5 / 1.25 = 0.4
    s = gen_ma(100_000, 4, [1.0, 0.5], seed=11)
    assert lag_corr(s.values, 1) == pytest.approx(0.4, abs=0.01)
    assert abs(lag_corr(s.values, 2)) < 0.01


def test_ma_marginal_variance_and_bounds():
    s = gen_ma(2000, 50, [1.0, 0.5, 0.25], seed=3, innovations="uniform")
    assert s.kernel.variance == pytest.approx(1.3125)
    assert s.values.var() == pytest.approx(1.3125, rel=0.05)
    assert np.abs(s.values).max() <= math.sqrt(3) * 1.75 + 1e-12


def test_ma_empty_weights():
    with pytest.raises(ConfigError):
        gen_ma(10, 2, [])


# ---------------------------------------------------------------- kernels

def test_inverse_lag_spectral_minimum():
    assert inverse_lag_spectral_min(0.5) == pytest.approx(SPECTRAL_MIN_C_HALF, abs=1e-15)
    assert INVERSE_LAG_MAX_C == pytest.approx(INVERSE_LAG_C_LIMIT, abs=1e-15)


def test_inverse_lag_generation_succeeds():
    s = gen_kernel_gaussian(512, 4, NoiseKernel.inverse_lag(0.5), seed=1)
    assert s.values.shape == (4, 512)
    assert s.meta["method"] == "circulant"


def test_inverse_lag_infeasible_names_eigenvalue():
    with pytest.raises(KernelInfeasibleError) as info:
        NoiseKernel.inverse_lag(0.9)
    # 1 - 1.8 ln 2
    assert info.value.eigenvalue == pytest.approx(-0.2476649250079016, abs=1e-12)
    assert "0.9" in str(info.value)


def test_inverse_log_is_gated():
    k = NoiseKernel.inverse_log()
    with pytest.raises(KernelInfeasibleError):
        gen_kernel_gaussian(64, 2, k, seed=0)


def test_exp_distance_short_length_is_white():
    s = gen_kernel_gaussian(2000, 50, NoiseKernel.exp_distance(1e-3), seed=4)
    assert abs(lag_corr(s.values, 1)) < 0.01


def test_dense_fallback_matches_kernel():
    # a kernel whose circulant embedding is indefinite but the Toeplitz matrix is fine
    k = NoiseKernel.exp_distance(0.7)
    syn = synthesizer(k, 64)
    assert syn.method in ("circulant", "dense")


def test_kernel_fidelity_within_five_over_sqrt_reps():
    reps = 2000
    k = NoiseKernel.inverse_lag(0.5)
    s = gen_kernel_gaussian(64, reps, k, seed=9)
    emp = [np.corrcoef(s.values[:, 0], s.values[:, n])[0, 1] for n in range(1, 21)]
    assert np.max(np.abs(np.array(emp) - k.correlation(np.arange(1, 21)))) <= 5 / math.sqrt(reps)


def test_replicate_independence():
    reps = 2000
    s = gen_kernel_gaussian(32, reps, NoiseKernel.long_memory(0.8), seed=2)
    v = s.values
    # correlation between replicate pairs (rows r and r+1) over item position
    cross = np.corrcoef(v[0::2, 5], v[1::2, 5])[0, 1]
    assert abs(cross) < 4 / math.sqrt(reps // 2)


# ---------------------------------------------------------------- long memory

def test_fgn_white_at_half():
    assert fgn_autocovariance(np.arange(1, 10), 0.5) == pytest.approx(np.zeros(9), abs=1e-15)


def test_fgn_lag_one_h07():
    assert fgn_autocovariance([1], 0.7)[0] == pytest.approx(FGN_GAMMA1_H07, abs=1e-14)


def test_fgn_partial_sum_variance_empirical():
    s = gen_long_memory(100, 10_000, 0.7, seed=13)
    var = s.values.sum(axis=1).var(ddof=1)
    assert var == pytest.approx(VAR_S100_H07, rel=0.05)


def test_fgn_sum_law_slope():
    s = gen_long_memory(4096, 400, 0.7, seed=5)
    sizes = [2 ** k for k in range(6, 13)]
    cs = np.cumsum(s.values, axis=1)
    v = [cs[:, n - 1].var(ddof=1) for n in sizes]
    slope = np.polyfit(np.log(sizes), np.log(v), 1)[0]
    assert slope == pytest.approx(1.4, abs=0.05)


def test_hurst_out_of_range():
    for h in (0.5, 1.0, 0.3):
        with pytest.raises(ConfigError):
            gen_long_memory(10, 2, h)


@given(st.floats(0.55, 0.95), st.integers(1, 300))
def test_exact_variance_identity_for_fgn(h, n):
    k = NoiseKernel.long_memory(h)
    direct = n + 2.0 * sum((n - j) * float(fgn_autocovariance([j], h)[0]) for j in range(1, n))
    assert exact_partial_sum_variance(k, n) == pytest.approx(direct, rel=1e-9)


# ---------------------------------------------------------------- properties

@given(st.integers(1, 40), st.integers(1, 5), st.integers(0, 2 ** 32))
def test_generators_deterministic(n, reps, seed):
    for make in (lambda: gen_iid(n, reps, "uniform", seed),
                 lambda: gen_ma(n, reps, [1.0, -0.5], seed),
                 lambda: gen_kernel_gaussian(n, reps, NoiseKernel.exp_distance(2.0), seed)):
        assert make().values.tobytes() == make().values.tobytes()


@given(st.integers(2, 30), st.integers(0, 1000))
def test_rows_do_not_depend_on_replicate_count(reps, seed):
    k = NoiseKernel.long_memory(0.75)
    small = gen_kernel_gaussian(50, reps, k, seed).values
    big = gen_kernel_gaussian(50, reps + 3, k, seed).values
    assert np.array_equal(small, big[:reps])


@given(st.lists(st.floats(-3, 3), min_size=1, max_size=6).filter(lambda w: any(abs(x) > 1e-3 for x in w)))
def test_ma_correlation_vanishes_beyond_window(w):
    k = NoiseKernel.moving_average(w)
    q = len(w)
    assert np.all(k.correlation(np.arange(q, q + 5)) == 0.0)
    assert np.all(np.abs(k.correlation(np.arange(0, q))) <= 1.0 + 1e-12)


@given(st.floats(0.01, 0.72))
def test_admissible_inverse_lag_has_nonnegative_spectrum(c):
    assert inverse_lag_spectral_min(c) >= -1e-12
    NoiseKernel.inverse_lag(c)


def test_sample_matrix_rejects_nonfinite(tmp_path):
    with pytest.raises(ValueError):
        SampleMatrix(np.array([[1.0, np.nan]]), 0)
    s = gen_iid(3, 2, seed=1)
    p = tmp_path / "s.csv"
    s.to_csv(p)
    lines = p.read_text().splitlines()
    assert lines[0] == "replicate,index,value"
    assert len(lines) == 7


def test_field_generator_covariance():
    pts = np.array([[0.0, 0.0], [1.0, 0.0], [5.0, 0.0]])
    s = gen_field_gaussian(pts, 20_000, NoiseKernel.exp_distance(1.0), seed=3)
    c = np.corrcoef(s.values.T)
    assert c[0, 1] == pytest.approx(math.exp(-1.0), abs=0.03)
    assert abs(c[0, 2]) < 0.03
