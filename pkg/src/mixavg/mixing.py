"""Mixing diagnostics and residual factors.

The maximal correlation between past and future sigma-algebras cannot be
computed from samples, so the profiles here are estimators of it: pooled
pairwise Pearson correlations (a lower bound) and an optional random-projection
proxy over blocks. Residual factors ``h(N) = Var(S_N) / N`` are ensemble
quantities and are estimated across replicates.
"""
from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize_scalar
from scipy.spatial import cKDTree

from . import seeding
from .errors import ConfigError, InsufficientReplicatesError, UnsupportedKernelError
from .stochastic import NoiseKernel, SampleMatrix, exact_partial_sum_variance, synthesizer

ESTIMATORS = ("max_pairwise", "mean_pairwise", "projection_proxy")
MIN_REPLICATES = 30


# --------------------------------------------------------------------------
# Correlation decay


@dataclass
class MixingProfile:
    distances: np.ndarray
    rho_hat: np.ndarray
    estimator: str
    halfwidth: np.ndarray
    pairs: np.ndarray
    excluded: list = field(default_factory=list)

    def __post_init__(self):
        self.distances = np.asarray(self.distances, dtype=float)
        self.rho_hat = np.clip(np.asarray(self.rho_hat, dtype=float), -1.0, 1.0)
        if len(self.distances) > 1 and np.any(np.diff(self.distances) <= 0):
            raise ValueError("profile distances must be strictly increasing")

    def fit_power(self, lo=None, hi=None):
        """Slope of log|rho_hat| against log distance over [lo, hi]."""
        d, r = self.distances, np.abs(self.rho_hat)
        keep = (r > 0) & (d > 0)
        if lo is not None:
            keep &= d >= lo
        if hi is not None:
            keep &= d <= hi
        if keep.sum() < 2:
            raise ValueError("need two positive points to fit a decay law")
        slope, _ = np.polyfit(np.log(d[keep]), np.log(r[keep]), 1)
        return float(slope)

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["distance", "rho_hat", "halfwidth", "pairs", "estimator"])
            for row in zip(self.distances, self.rho_hat, self.halfwidth, self.pairs):
                w.writerow([repr(float(row[0])), repr(float(row[1])), repr(float(row[2])), int(row[3]), self.estimator])


def _as_array(samples):
    v = samples.values if isinstance(samples, SampleMatrix) else np.asarray(samples, dtype=float)
    if v.ndim == 2:
        v = v[:, :, None]
    if v.ndim != 3:
        raise ValueError("samples must be replicates x items [x components]")
    return v


def _standardise(v, ergodic):
    """Centre and scale each (item, component) column; flags constant columns."""
    if ergodic:
        mu = v.mean(axis=(0, 1), keepdims=True)
        sd = v.std(axis=(0, 1), keepdims=True)
        z = (v - mu) / np.where(sd > 0, sd, 1.0)
        return z, np.broadcast_to(sd[0] > 0, v.shape[1:]).copy()
    mu = v.mean(axis=0, keepdims=True)
    sd = v.std(axis=0, keepdims=True)
    ok = sd[0] > 1e-300
    z = (v - mu) / np.where(sd > 1e-300, sd, 1.0)
    z[:, ~ok] = 0.0
    return z, ok


def estimate_corr_decay(samples, lags, estimator="max_pairwise", ergodic=False,
                        block=4, directions=16, seed=0) -> MixingProfile:
    """Correlation between items ``n`` apart, for each ``n`` in ``lags``.

    ``samples`` is replicates x items (x components). Columns are centred by the
    cross-replicate mean; with a single replicate pass ``ergodic=True`` to centre
    by the pooled mean instead (a single-path estimate).
    """
    if estimator not in ESTIMATORS:
        raise ConfigError(f"unknown estimator {estimator!r}; expected one of {ESTIMATORS}")
    v = _as_array(samples)
    reps, n, q = v.shape
    if reps < 2 and not ergodic:
        raise InsufficientReplicatesError("need >= 2 replicates, or ergodic=True")
    lags = np.asarray(sorted(set(int(x) for x in lags)))
    if len(lags) == 0 or lags[0] < 1 or lags[-1] >= n:
        raise ConfigError(f"lags must lie in [1, {n - 1}]")
    z, ok = _standardise(v, ergodic)
    excluded = [int(i) for i in np.flatnonzero(~ok.all(axis=1))]
    if excluded:
        warnings.warn(f"{len(excluded)} constant columns excluded from the profile", stacklevel=2)
    rho = np.zeros(len(lags))
    pairs = np.zeros(len(lags), dtype=int)
    for k, lag in enumerate(lags):
        valid = ok[:-lag, :, None] & ok[lag:, None, :]          # items x q x q
        npos = valid.sum(axis=0)
        pairs[k] = reps * int(npos.max()) if npos.size else 0
        if estimator == "projection_proxy":
            rho[k] = _projection_corr(z, lag, block, directions, seed)
            continue
        prod = np.einsum("ria,rib->ab", z[:, :-lag], z[:, lag:]) / (reps * np.maximum(npos, 1))
        if estimator == "mean_pairwise":
            rho[k] = float(np.mean(np.diag(prod)))
        else:
            flat = prod.ravel()
            rho[k] = float(flat[np.argmax(np.abs(flat))])
    half = 4.0 / np.sqrt(np.maximum(pairs, 1))
    return MixingProfile(lags, rho, estimator, half, pairs, excluded)


def _projection_corr(z, lag, block, directions, seed):
    """Max |corr| between random projections of a left block and a right block."""
    reps, n, q = z.shape
    b = max(1, min(block, (n - lag) // 2 if n - lag >= 2 else 1))
    left_end = max(b, (n - lag) // 2)
    left = z[:, left_end - b:left_end].reshape(reps, -1)
    right = z[:, left_end - 1 + lag:left_end - 1 + lag + b].reshape(reps, -1)
    g = seeding.rng(seed, "projection", lag)
    best = 0.0
    for _ in range(directions):
        a = g.standard_normal(left.shape[1])
        c = g.standard_normal(right.shape[1])
        u, w = left @ a, right @ c
        su, sw = u.std(), w.std()
        if su > 0 and sw > 0:
            r = float(np.mean((u - u.mean()) * (w - w.mean())) / (su * sw))
            best = r if abs(r) > abs(best) else best
    return best


def estimate_corr_decay_spatial(samples, positions, bins, estimator="mean_pairwise") -> MixingProfile:
    """Pooled correlation between points whose distance falls in each bin.

    ``bins`` are bin edges; the reported distance is the mean pair distance
    in the bin.
    """
    if estimator not in ("mean_pairwise", "max_pairwise"):
        raise ConfigError("spatial profiles support mean_pairwise and max_pairwise")
    v = _as_array(samples)
    reps = v.shape[0]
    if reps < 2:
        raise InsufficientReplicatesError("spatial profiles need >= 2 replicates")
    pos = np.asarray(positions, dtype=float)
    edges = np.asarray(bins, dtype=float)
    z, ok = _standardise(v, False)
    pairs_ij = cKDTree(pos).query_pairs(r=edges[-1], output_type="ndarray")
    dist = np.linalg.norm(pos[pairs_ij[:, 0]] - pos[pairs_ij[:, 1]], axis=1)
    centers, rho, counts = [], [], []
    for lo, hi in zip(edges[:-1], edges[1:]):
        sel = pairs_ij[(dist > lo) & (dist <= hi)]
        if len(sel) == 0:
            continue
        prod = np.einsum("ria,rib->ab", z[:, sel[:, 0]], z[:, sel[:, 1]]) / (reps * len(sel))
        if estimator == "mean_pairwise":
            r = float(np.mean(np.diag(prod)))
        else:
            flat = prod.ravel()
            r = float(flat[np.argmax(np.abs(flat))])
        centers.append(float(dist[(dist > lo) & (dist <= hi)].mean()))
        rho.append(r)
        counts.append(reps * len(sel))
    counts = np.asarray(counts)
    return MixingProfile(centers, rho, estimator, 4.0 / np.sqrt(np.maximum(counts, 1)), counts)


def window_transform(samples, tau: int, func) -> np.ndarray:
    """zeta_i = func(xi_{i-tau}, ..., xi_{i+tau}) applied along the item axis.

    ``func`` receives windows of shape (..., 2 tau + 1) and must reduce the
    last axis.
    """
    v = samples.values if isinstance(samples, SampleMatrix) else np.asarray(samples, dtype=float)
    win = np.lib.stride_tricks.sliding_window_view(v, 2 * tau + 1, axis=-1)
    return np.asarray(func(win), dtype=float)


# --------------------------------------------------------------------------
# Residual factors


@dataclass
class ResidualCurve:
    sizes: np.ndarray
    h_hat: np.ndarray
    variance_estimates: np.ndarray
    replicates: int
    variance_se: np.ndarray
    windows: np.ndarray
    exact: np.ndarray | None = None

    def __post_init__(self):
        self.sizes = np.asarray(self.sizes, dtype=int)
        if np.any(np.diff(self.sizes) <= 0):
            raise ValueError("sizes must be increasing")

    def h_at(self, n):
        idx = np.flatnonzero(self.sizes == n)
        if len(idx) == 0:
            raise KeyError(n)
        return float(self.h_hat[idx[0]])

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["N", "h_hat", "var_S_N", "var_se", "windows", "exact_var"])
            for k, n in enumerate(self.sizes):
                ex = "" if self.exact is None else repr(float(self.exact[k]))
                w.writerow([int(n), repr(float(self.h_hat[k])), repr(float(self.variance_estimates[k])),
                            repr(float(self.variance_se[k])), int(self.windows[k]), ex])


def _window_starts(length, n, stride_fraction):
    if stride_fraction is None:
        return np.array([0])
    stride = max(1, n // int(stride_fraction))
    return np.arange(0, length - n + 1, stride)


class _WindowAccumulator:
    """Running sums of window sums and their squares, per size and window start."""

    def __init__(self, sizes, length, stride_fraction):
        self.sizes = list(sizes)
        self.starts = [_window_starts(length, n, stride_fraction) for n in self.sizes]
        self.s1 = [np.zeros(len(s)) for s in self.starts]
        self.s2 = [np.zeros(len(s)) for s in self.starts]
        self.count = 0

    def add(self, rows):
        rows = np.atleast_2d(rows)
        cs = np.zeros((rows.shape[0], rows.shape[1] + 1))
        np.cumsum(rows, axis=1, out=cs[:, 1:])
        for k, n in enumerate(self.sizes):
            st = self.starts[k]
            s = cs[:, st + n] - cs[:, st]
            self.s1[k] += s.sum(axis=0)
            self.s2[k] += (s * s).sum(axis=0)
        self.count += rows.shape[0]

    def variances(self):
        r = self.count
        out = np.empty(len(self.sizes))
        for k in range(len(self.sizes)):
            mean = self.s1[k] / r
            out[k] = float(np.mean((self.s2[k] - r * mean * mean) / (r - 1)))
        return out


def _check_sizes(sizes, length):
    sizes = [int(n) for n in sizes]
    if not sizes or any(b <= a for a, b in zip(sizes, sizes[1:])):
        raise ConfigError("size grid must be strictly increasing")
    if sizes[0] < 1 or sizes[-1] > length:
        raise ConfigError(f"size grid must lie in [1, {length}]")
    return sizes


def _curve(sizes, var, reps, windows, kernel=None):
    sizes = np.asarray(sizes)
    se = var * math.sqrt(2.0 / (reps - 1))
    exact = None
    if kernel is not None:
        try:
            exact = np.array([exact_partial_sum_variance(kernel, int(n)) for n in sizes])
        except Exception:  # noqa: BLE001 - the oracle is optional
            exact = None
    return ResidualCurve(sizes, var / sizes, var, reps, se, np.asarray(windows), exact)


def estimate_residual_curve(samples, sizes, stride_fraction=None) -> ResidualCurve:
    """h_hat(N) = Var(S_N) / N from the cross-replicate variance of partial sums.

    With ``stride_fraction=None`` only the initial sum xi_1 + ... + xi_N is
    used. For stationary rows, ``stride_fraction=k`` also pools windows
    starting every N/k items; each window variance is still a cross-replicate
    variance.
    """
    v = samples.values if isinstance(samples, SampleMatrix) else np.asarray(samples, dtype=float)
    reps, length = v.shape
    if reps < MIN_REPLICATES:
        raise InsufficientReplicatesError(f"residual curves need >= {MIN_REPLICATES} replicates, got {reps}")
    sizes = _check_sizes(sizes, length)
    acc = _WindowAccumulator(sizes, length, stride_fraction)
    for lo in range(0, reps, 256):
        acc.add(v[lo:lo + 256])
    kernel = samples.kernel if isinstance(samples, SampleMatrix) else None
    return _curve(sizes, acc.variances(), reps, [len(s) for s in acc.starts], kernel)


def residual_curve_from_kernel(kernel: NoiseKernel, sizes, replicates, seed=0, length=None,
                               stride_fraction=4) -> ResidualCurve:
    """Streaming version of :func:`estimate_residual_curve` on Gaussian kernel rows.

    Rows are drawn exactly as :func:`gen_kernel_gaussian` draws them but never
    held in memory together. ``length`` defaults to four times the largest size.
    """
    if replicates < MIN_REPLICATES:
        raise InsufficientReplicatesError(f"residual curves need >= {MIN_REPLICATES} replicates")
    sizes = [int(n) for n in sizes]
    length = int(length or 4 * max(sizes))
    sizes = _check_sizes(sizes, length)
    syn = synthesizer(kernel, length)
    acc = _WindowAccumulator(sizes, length, stride_fraction)
    for r in range(replicates):
        acc.add(syn.draw(seeding.rng(seed, "sample", r), 1))
    return _curve(sizes, acc.variances(), replicates, [len(s) for s in acc.starts], kernel)


@dataclass
class SlowVariation:
    verdict: str
    k: int
    band: float
    sizes: list
    ratios: list

    @property
    def is_slowly_varying(self):
        return self.verdict == "slowly_varying"


def slowly_varying_test(curve: ResidualCurve, k=2, band=0.1) -> SlowVariation:
    """Trace of h(kN)/h(N) over the grid and a verdict on whether it tends to 1.

    slowly_varying: the last ratio is inside 1 +- band and the trace is not
    moving away from 1. not_slowly_varying: the last two ratios sit outside the
    band. Anything else, including fewer than three usable ratios, is
    inconclusive.
    """
    sizes = [int(n) for n in curve.sizes]
    lookup = dict(zip(sizes, curve.h_hat))
    base = [n for n in sizes if k * n in lookup and lookup[n] > 0]
    ratios = [float(lookup[k * n] / lookup[n]) for n in base]
    if len(ratios) < 3:
        return SlowVariation("inconclusive", k, band, base, ratios)
    dev = np.abs(np.asarray(ratios) - 1.0)
    if dev[-1] <= band and dev[-1] <= dev[0] + band / 2:
        verdict = "slowly_varying"
    elif np.all(dev[-2:] > band):
        verdict = "not_slowly_varying"
    else:
        verdict = "inconclusive"
    return SlowVariation(verdict, k, band, base, ratios)


def shifted_sum_ratio(samples, sizes, shifts) -> float:
    """max over the (shift, N) grid of Var(S_{M+N} - S_M) / Var(S_N).

    A finite-grid monitor of the bounded shifted-variance condition; it says
    nothing about the supremum beyond the grid.
    """
    v = samples.values if isinstance(samples, SampleMatrix) else np.asarray(samples, dtype=float)
    cs = np.concatenate([np.zeros((v.shape[0], 1)), np.cumsum(v, axis=1)], axis=1)
    worst = 0.0
    for n in sizes:
        base = np.var(cs[:, n], ddof=1)
        if base <= 0:
            continue
        for m in shifts:
            if m + n <= v.shape[1]:
                worst = max(worst, float(np.var(cs[:, m + n] - cs[:, m], ddof=1) / base))
    return worst


# --------------------------------------------------------------------------
# Closed-form growth laws


@dataclass(frozen=True)
class GrowthLaw:
    """h(N) up to a constant: ``constant``, ``log``, ``power`` (N**exponent) or ``n_over_log``."""

    kind: str
    exponent: float = 0.0
    scale: float = 1.0

    @property
    def slowly_varying(self) -> bool:
        return self.kind in ("constant", "log")

    def __call__(self, n):
        n = np.asarray(n, dtype=float)
        if self.kind == "constant":
            return self.scale * np.ones_like(n)
        if self.kind == "log":
            return self.scale * np.log(n)
        if self.kind == "power":
            return self.scale * n ** self.exponent
        if self.kind == "n_over_log":
            return self.scale * n / np.log(n)
        raise ValueError(self.kind)

    def describe(self) -> str:
        if self.kind == "power":
            return f"N^{self.exponent:g}"
        return {"constant": "1", "log": "log N", "n_over_log": "N/log N"}[self.kind]


def analytic_residual_factor(kernel: NoiseKernel) -> GrowthLaw:
    """Growth law of Var(S_N)/N implied by the kernel's correlation decay."""
    kind = kernel.kind
    if kind in ("iid", "moving_average", "exp_distance"):
        return GrowthLaw("constant", 0.0, kernel.variance)
    if kind == "inverse_lag":
        return GrowthLaw("log", 0.0, 2.0 * kernel.c * kernel.variance)
    if kind == "long_memory":
        return GrowthLaw("power", 2.0 * kernel.hurst - 1.0, kernel.variance)
    if kind == "inverse_log":
        return GrowthLaw("n_over_log", 0.0, kernel.variance)
    raise UnsupportedKernelError(f"no closed-form residual factor for kernel kind {kind!r}")


@dataclass
class GrowthFit:
    law: GrowthLaw
    power_exponent: float
    slope_sse: dict


def fit_growth_law(sizes, h, flat_tol=0.05) -> GrowthFit:
    """Pick the growth law that best explains ``h`` over ``sizes``.

    The curve counts as constant when its power-law exponent over the upper
    half of the grid is below ``flat_tol``. Otherwise the local log-log slopes
    s(N) are compared with the one-parameter shapes each law implies:
    b (power), 1/(log N + k) (log) and 1 - 1/(log N + k) (N/log N).
    The law with the smallest squared slope error wins.
    """
    n = np.asarray(sizes, dtype=float)
    y = np.log(np.asarray(h, dtype=float))
    ln = np.log(n)
    if len(n) < 3:
        raise ConfigError("growth-law fit needs at least 3 sizes")
    b, a = np.polyfit(ln, y, 1)
    upper = n >= np.median(n)
    b_top = float(np.polyfit(ln[upper], y[upper], 1)[0]) if upper.sum() >= 2 else float(b)
    s = np.diff(y) / np.diff(ln)
    mid = 0.5 * (ln[1:] + ln[:-1])
    sse = {"power": float(np.sum((s - s.mean()) ** 2))}
    shapes = {"log": lambda k: 1.0 / (mid + k), "n_over_log": lambda k: 1.0 - 1.0 / (mid + k)}
    offsets = {}
    for kind, shape in shapes.items():
        res = minimize_scalar(lambda k: float(np.sum((s - shape(k)) ** 2)),
                              bounds=(-mid.min() + 0.05, 100.0), method="bounded")
        sse[kind], offsets[kind] = float(res.fun), float(res.x)
    if abs(b_top) < flat_tol:
        return GrowthFit(GrowthLaw("constant", 0.0, float(np.exp(y.mean()))), float(b), sse)
    best = min(sse, key=sse.get)
    if best == "power":
        law = GrowthLaw("power", float(b), float(np.exp(a)))
    else:
        g = ln if best == "log" else n / ln
        law = GrowthLaw(best, 0.0, float(np.mean(np.exp(y) / g)))
    return GrowthFit(law, float(b), sse)
