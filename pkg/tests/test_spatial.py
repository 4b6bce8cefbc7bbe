import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from mixavg.errors import ConfigError, OutOfWindowError
from mixavg.spatial import (SpatialLayout, count_in_ball, density_law_check, index_neighborhoods, lattice_layout,
                            neighborhoods, sample_poisson, thin, unit_ball_volume)

POISSON_MEAN_L5_R10 = 1570.79632679489661923132169164   # 5 pi 100, mpmath


def test_unit_ball_volumes():
    assert unit_ball_volume(1) == pytest.approx(2.0, abs=1e-15)
    assert unit_ball_volume(2) == pytest.approx(math.pi, abs=1e-15)
    assert unit_ball_volume(3) == pytest.approx(4.0 * math.pi / 3.0, abs=1e-14)
    assert unit_ball_volume(4) == pytest.approx(math.pi ** 2 / 2.0, abs=1e-14)


@given(st.integers(1, 30))
def test_unit_ball_recursion(d):
    # V_d = 2 pi / d * V_{d-2}
    if d >= 3:
        assert unit_ball_volume(d) == pytest.approx(2 * math.pi / d * unit_ball_volume(d - 2), rel=1e-12)


def test_poisson_mean_count():
    counts = [sample_poisson(5.0, 10.0, 2, seed=k).n_points for k in range(1000)]
    assert np.mean(counts) == pytest.approx(POISSON_MEAN_L5_R10, rel=0.02)
    # Poisson dispersion
    assert np.var(counts) / np.mean(counts) == pytest.approx(1.0, abs=0.15)


def test_poisson_tiny_radius_is_empty():
    empties = sum(sample_poisson(1.0, 1e-4, 2, seed=k).n_points == 0 for k in range(200))
    assert empties == 200


def test_poisson_line_density():
    lay = sample_poisson(1.0, 100.0, 1, seed=2)
    assert lay.n_points / 200.0 == pytest.approx(1.0, abs=0.1)


def test_poisson_positions_inside_and_uniform():
    lay = sample_poisson(50.0, 2.0, 3, seed=4)
    r = np.linalg.norm(lay.positions, axis=1)
    assert r.max() <= 2.0
    # fraction inside radius 1 is (1/2)^3 for uniform points in the ball
    assert np.mean(r <= 1.0) == pytest.approx(0.125, abs=0.02)


def test_poisson_overflow_guard():
    with pytest.raises(ConfigError):
        sample_poisson(1e6, 100.0, 3, seed=0)


def test_count_in_ball_contract():
    lay = sample_poisson(3.0, 5.0, 2, seed=1)
    assert count_in_ball(lay, 0.0) == 0
    assert count_in_ball(lay, 5.0) == lay.n_points
    with pytest.raises(OutOfWindowError):
        count_in_ball(lay, 5.5)


@given(st.integers(0, 10 ** 6), st.floats(0.0, 4.0), st.floats(0.0, 4.0))
def test_count_monotone(seed, a, b):
    lay = sample_poisson(2.0, 4.0, 2, seed)
    r1, r2 = sorted((a, b))
    assert count_in_ball(lay, r1) <= count_in_ball(lay, r2)


@given(st.integers(0, 10 ** 6), st.floats(0.0, 2 * math.pi))
def test_counts_invariant_under_rotation(seed, angle):
    lay = sample_poisson(3.0, 6.0, 2, seed)
    rot = np.array([[math.cos(angle), -math.sin(angle)], [math.sin(angle), math.cos(angle)]])
    turned = SpatialLayout(lay.positions @ rot.T, lay.radius)
    for r in (1.0, 2.5, 6.0):
        assert count_in_ball(turned, r) == count_in_ball(lay, r)


def test_density_law_poisson():
    layouts = [sample_poisson(5.0, 80.0, 2, seed=k) for k in range(200)]
    rep = density_law_check(layouts, [10, 20, 40, 80], 5.0)
    assert rep.relative_error()[-1] <= 0.05
    assert rep.trend_toward_limit()


def test_density_law_lattice():
    lay = lattice_layout(1.0, 60.0, 2)
    rep = density_law_check(lay, [10, 20, 40, 60], 1.0)
    assert rep.relative_error()[-1] < 0.01
    assert rep.relative_error()[-1] < rep.relative_error()[0]


def test_density_law_needs_four_radii():
    with pytest.raises(ConfigError):
        density_law_check(sample_poisson(1.0, 5.0, 2, 0), [1, 2, 3])


def test_thinning_halves_intensity():
    counts = [thin(sample_poisson(5.0, 20.0, 2, k), 0.5, k).n_points for k in range(50)]
    assert np.mean(counts) / (unit_ball_volume(2) * 400) == pytest.approx(2.5, rel=0.02)


def test_disjoint_annuli_uncorrelated():
    reps = 2000
    inner, outer = [], []
    for k in range(reps):
        lay = sample_poisson(2.0, 4.0, 2, seed=k)
        a = count_in_ball(lay, 2.0)
        inner.append(a)
        outer.append(count_in_ball(lay, 4.0) - a)
    assert abs(np.corrcoef(inner, outer)[0, 1]) < 4 / math.sqrt(reps)


def test_neighborhoods_contract():
    lay = SpatialLayout(np.array([[0.0, 0.0], [1.0, 0.0]]), 2.0)
    assert (neighborhoods(lay, 0.0).toarray() == np.eye(2)).all()
    assert neighborhoods(lay, 1.0).toarray().all()
    assert not neighborhoods(lay, 0.999).toarray()[0, 1]


@given(st.integers(0, 10 ** 6), st.floats(0.0, 3.0))
def test_neighborhoods_symmetric_with_self(seed, tau):
    lay = sample_poisson(2.0, 3.0, 2, seed)
    adj = neighborhoods(lay, tau).toarray()
    assert (adj == adj.T).all()
    assert adj.diagonal().all()


def test_mean_neighbourhood_size_on_poisson_layout():
    # lambda pi tau^2 other points in the tau-ball, far from the boundary
    sizes = []
    for k in range(40):
        lay = sample_poisson(5.0, 10.0, 2, seed=k)
        adj = neighborhoods(lay, 0.5)
        inner = np.linalg.norm(lay.positions, axis=1) <= 9.5
        sizes.append(float(np.asarray(adj.sum(axis=1)).ravel()[inner].mean() - 1))
    assert np.mean(sizes) == pytest.approx(5 * math.pi * 0.25, abs=0.5)


def test_index_neighborhoods_band():
    adj = index_neighborhoods(5, 1).toarray()
    assert list(np.flatnonzero(adj[3])) == [2, 3, 4]
    assert (index_neighborhoods(4, 0).toarray() == np.eye(4)).all()
    assert index_neighborhoods(3, 10).toarray().all()


def test_off_centre_window_and_csv(tmp_path):
    lay = sample_poisson(2.0, 5.0, 2, seed=3)
    m = lay.window(1.0, center=[1.0, 1.0])
    assert np.all(np.linalg.norm(lay.positions[m] - 1.0, axis=1) <= 1.0)
    with pytest.raises(OutOfWindowError):
        lay.window(1.0, center=[4.5, 0.0])
    lay.to_csv(tmp_path / "p.csv")
    assert (tmp_path / "p.csv").read_text().splitlines()[0] == "index,x0,x1"
