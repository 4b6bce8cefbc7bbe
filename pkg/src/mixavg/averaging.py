"""Normalised population averages, normality checks and limit covariances.

The average of ``N`` subsystems is the centred sum scaled by ``1/sqrt(N h(N))``.
The centring uses the cross-replicate mean at each time, which estimates
E[x_i(t)] without bias; time averages are never used.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from . import seeding
from .errors import ConfigError, EmptyWindowError, InsufficientReplicatesError
from .mixing import GrowthLaw
from .stochastic import SampleMatrix

NORMALIZATIONS = ("sqrt_N_h", "plain_mean")


def _h_value(h, n):
    if h is None:
        return 1.0
    if callable(h):
        return float(np.asarray(h(n)))
    return float(h)


def normalise_sums(sums, n_items, h=None, normalization="sqrt_N_h"):
    """Centre ``sums`` across replicates (axis 0) and scale them."""
    if normalization not in NORMALIZATIONS:
        raise ConfigError(f"unknown normalization {normalization!r}")
    if n_items <= 0:
        raise EmptyWindowError("averaging window contains no subsystems")
    s = np.asarray(sums, dtype=float)
    centred = s - s.mean(axis=0, keepdims=True)
    if normalization == "plain_mean":
        return centred / n_items
    hv = _h_value(h, n_items)
    if not hv > 0:
        raise ConfigError(f"residual factor must be positive, got h({n_items}) = {hv}")
    return centred / math.sqrt(n_items * hv)


@dataclass
class AveragedSeries:
    xbar: np.ndarray        # reps x (T+1) x n
    wbar: np.ndarray        # reps x T x m
    normalization: str
    h_used: str
    n_used: int
    window: float | None = None

    @property
    def replicates(self) -> int:
        return self.xbar.shape[0]

    @property
    def T(self) -> int:
        return self.wbar.shape[1]

    def scaled(self, c: float) -> "AveragedSeries":
        return AveragedSeries(c * self.xbar, c * self.wbar, self.normalization, self.h_used, self.n_used, self.window)

    def halves(self):
        """Two disjoint replicate halves (even and odd rows)."""
        mk = lambda sl: AveragedSeries(self.xbar[sl], self.wbar[sl], self.normalization, self.h_used,
                                       self.n_used, self.window)
        return mk(slice(0, None, 2)), mk(slice(1, None, 2))

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            n, m = self.xbar.shape[-1], self.wbar.shape[-1]
            w.writerow(["replicate", "t"] + [f"xbar{a}" for a in range(n)] + [f"wbar{b}" for b in range(m)])
            for r in range(self.replicates):
                for t in range(self.xbar.shape[1]):
                    wrow = self.wbar[r, t] if t < self.T else [""] * m
                    w.writerow([r, t] + [repr(float(v)) for v in self.xbar[r, t]]
                               + [v if v == "" else repr(float(v)) for v in wrow])


def _describe(h):
    if h is None:
        return "1"
    if isinstance(h, GrowthLaw):
        return h.describe()
    return repr(h)


def average_series(ens, normalization="sqrt_N_h", h=None, window: int = 0) -> AveragedSeries:
    """Normalised averages of a :class:`TrajectoryEnsemble` over one window.

    ``window`` indexes the ensemble's windows (radii on a layout, prefix
    lengths otherwise); window 0 is the whole population by default.
    """
    n_used = int(ens.window_sizes[window])
    if n_used == 0:
        raise EmptyWindowError(f"window {window} contains no subsystems")
    xbar = normalise_sums(ens.state_sums[:, :, window], n_used, h, normalization)
    wbar = normalise_sums(ens.noise_sums[:, :, window], n_used, h, normalization)
    radius = None if ens.window_radii is None else ens.window_radii[window]
    return AveragedSeries(xbar, wbar, normalization, _describe(h), n_used, radius)


def partial_sums(samples, sizes) -> np.ndarray:
    """S_N = xi_1 + ... + xi_N for each N; returns reps x len(sizes) [x q]."""
    v = samples.values if isinstance(samples, SampleMatrix) else np.asarray(samples, dtype=float)
    sizes = [int(n) for n in sizes]
    if sizes[-1] > v.shape[1]:
        raise ConfigError("size exceeds the sample length")
    cs = np.cumsum(v, axis=1)
    return np.stack([cs[:, n - 1] for n in sizes], axis=1)


def normalised_variance_trace(samples, sizes, h=None):
    """Var(x_bar_N) over the size grid for partial-sum averages."""
    s = partial_sums(samples, sizes)
    return np.array([np.var(normalise_sums(s[:, k], n, h), ddof=1) for k, n in enumerate(sizes)])


def ball_sums(values, layout, radii) -> np.ndarray:
    """Sums over ||r_i|| <= R of a replicates x points [x q] field."""
    v = np.asarray(values, dtype=float)
    out = []
    for r in radii:
        mask = layout.window(r)
        if not mask.any():
            raise EmptyWindowError(f"ball of radius {r} contains no points")
        out.append(v[:, mask].sum(axis=1))
    return np.stack(out, axis=1)


# --------------------------------------------------------------------------
# Normality


@dataclass
class GaussianityReport:
    marginal_distances: np.ndarray
    projection_distances: np.ndarray
    directions: np.ndarray
    skewness: np.ndarray
    excess_kurtosis: np.ndarray
    threshold: float
    notes: list = field(default_factory=list)

    @property
    def max_distance(self) -> float:
        d = np.concatenate([self.marginal_distances, self.projection_distances])
        d = d[np.isfinite(d)]
        return float(d.max()) if len(d) else 0.0

    @property
    def passed(self) -> bool:
        return self.max_distance < self.threshold

    def as_dict(self) -> dict:
        return {
            "marginal_distances": [float(x) for x in self.marginal_distances],
            "projection_distances": [float(x) for x in self.projection_distances],
            "skewness": [float(x) for x in self.skewness],
            "excess_kurtosis": [float(x) for x in self.excess_kurtosis],
            "max_distance": self.max_distance,
            "threshold": self.threshold,
            "passed": self.passed,
            "notes": list(self.notes),
        }


def sup_cdf_distance(x) -> float:
    """Kolmogorov distance between the sample and the normal with fitted mean and sd."""
    x = np.asarray(x, dtype=float)
    sd = x.std(ddof=1)
    if not sd > 0:
        return float("nan")
    return float(stats.kstest((x - x.mean()) / sd, "norm").statistic)


def gaussianity_test(samples, threshold=0.05, directions=8, seed=0, min_reps=500) -> GaussianityReport:
    """Sup-CDF distances of each marginal and of random unit projections.

    Projection directions come from ``rng(seed, "directions")`` so the verdict
    is reproducible. Zero-variance marginals or projections are skipped.
    """
    x = np.asarray(samples, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    reps, q = x.shape
    if reps < min_reps:
        raise InsufficientReplicatesError(f"gaussianity test needs >= {min_reps} replicates, got {reps}")
    notes = []
    marg = np.array([sup_cdf_distance(x[:, a]) for a in range(q)])
    for a in np.flatnonzero(~np.isfinite(marg)):
        notes.append(f"marginal {a} has zero variance; skipped")
    g = seeding.rng(seed, "directions")
    dirs = g.standard_normal((directions, q))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    proj = np.array([sup_cdf_distance(x @ d) for d in dirs])
    for k in np.flatnonzero(~np.isfinite(proj)):
        notes.append(f"projection {k} is degenerate; skipped")
    ok = x.std(axis=0) > 0
    skew = np.where(ok, stats.skew(x, axis=0), 0.0)
    kurt = np.where(ok, stats.kurtosis(x, axis=0), 0.0)
    return GaussianityReport(marg, proj, dirs, np.atleast_1d(skew), np.atleast_1d(kurt), float(threshold), notes)


# --------------------------------------------------------------------------
# Limit covariance


@dataclass
class LimitCovariance:
    estimate: np.ndarray
    sizes: np.ndarray
    trace: np.ndarray                 # per-size Cov(S_N) / (N h(N))
    successive_differences: np.ndarray
    max_difference: float
    converged: bool
    rel_tol: float


def limit_covariance(sizes, covariances, h=None, rel_tol=0.15) -> LimitCovariance:
    """Cov(S_N)/(N h(N)) along the size grid; the estimate is the last entry.

    The trace is flagged non-convergent when a successive difference in the
    upper half of the grid exceeds ``rel_tol`` relative to the estimate.
    """
    sizes = np.asarray(sizes, dtype=int)
    if len(sizes) < 4:
        raise ConfigError("limit covariance needs at least 4 sizes")
    covs = [np.atleast_2d(np.asarray(c, dtype=float)) for c in covariances]
    trace = np.stack([c / (n * _h_value(h, int(n))) for c, n in zip(covs, sizes)])
    est = trace[-1]
    scale = max(np.linalg.norm(est), 1e-300)
    diffs = np.array([np.linalg.norm(b - a) for a, b in zip(trace[:-1], trace[1:])]) / scale
    upper = diffs[len(diffs) // 2:]
    return LimitCovariance(est, sizes, trace, diffs, float(diffs.max()), bool(np.all(upper <= rel_tol)), rel_tol)


def limit_covariance_from_samples(samples, sizes, h=None, rel_tol=0.15) -> LimitCovariance:
    s = partial_sums(samples, sizes)
    if s.ndim == 2:
        s = s[:, :, None]
    covs = [np.cov(s[:, k], rowvar=False, ddof=1) for k in range(len(sizes))]
    return limit_covariance(sizes, covs, h, rel_tol)


def moment_ratio(inner_sums, outer_sums, p=3.0) -> float:
    """E|S_inner|^p / sd(S_outer)^p for centred sums; a finite-grid monitor."""
    a = np.asarray(inner_sums, dtype=float)
    b = np.asarray(outer_sums, dtype=float)
    sd = b.std(ddof=1)
    if not sd > 0:
        return float("nan")
    return float(np.mean(np.abs(a - a.mean()) ** p) / sd ** p)
