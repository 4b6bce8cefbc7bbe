"""Random sequences and fields with prescribed correlation structure.

A :class:`NoiseKernel` fixes the marginal variance and the correlation
``rho(n)`` between two items ``n`` apart (index lag, or Euclidean distance for
spatial fields). Generators return a :class:`SampleMatrix` whose rows are
independent replicates; row ``r`` is drawn from the stream
``seeding.rng(seed, "sample", r)`` so rows never depend on one another.

Stationary Gaussian rows use circulant embedding with an explicit check of the
embedding spectrum, falling back to a dense eigen-factorisation for
``n_items <= DENSE_MAX``. Nothing is ever projected onto the PSD cone: an
infeasible kernel raises :class:`KernelInfeasibleError`.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from . import seeding
from .errors import ConfigError, KernelInfeasibleError

KINDS = ("iid", "moving_average", "inverse_lag", "long_memory", "inverse_log", "exp_distance")
INVERSE_LAG_MAX_C = 1.0 / (2.0 * math.log(2.0))
DENSE_MAX = 4096
_EMBED_RTOL = 1e-10
_DENSE_RTOL = 1e-8


def inverse_lag_spectral_min(c: float) -> float:
    """Minimum over (0, pi] of 1 - 2c*ln(2 sin(w/2)), attained at w = pi."""
    return 1.0 - 2.0 * c * math.log(2.0)


@dataclass(frozen=True)
class NoiseKernel:
    """Correlation law plus marginal variance.

    ``variance`` is always the marginal variance of one item. For
    ``moving_average`` the weights only shape the correlation; use
    :func:`gen_ma` for raw unnormalised MA sums of i.i.d. innovations.
    """

    kind: str = "iid"
    variance: float = 1.0
    weights: tuple = ()
    c: float = 0.0
    hurst: float = 0.0
    length: float = 1.0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown kernel kind {self.kind!r}; expected one of {KINDS}")
        if not (self.variance > 0 and math.isfinite(self.variance)):
            raise ConfigError(f"kernel variance must be positive, got {self.variance}")
        if self.kind == "moving_average":
            w = tuple(float(x) for x in self.weights)
            if not w:
                raise ConfigError("moving_average kernel needs a nonempty weight list")
            if not all(math.isfinite(x) for x in w) or not any(w):
                raise ConfigError("moving_average weights must be finite and not all zero")
            object.__setattr__(self, "weights", w)
        if self.kind == "inverse_lag":
            if not self.c > 0:
                raise ConfigError(f"inverse_lag needs c > 0, got {self.c}")
            smin = inverse_lag_spectral_min(self.c)
            if self.c > INVERSE_LAG_MAX_C:
                raise KernelInfeasibleError(
                    f"inverse_lag c={self.c} exceeds 1/(2 ln 2) = {INVERSE_LAG_MAX_C:.6f}: "
                    f"spectral density at w=pi is {smin:.6f} < 0",
                    eigenvalue=smin,
                )
        if self.kind == "long_memory" and not 0.5 < self.hurst < 1.0:
            raise ConfigError(f"long_memory needs hurst in (0.5, 1), got {self.hurst}")
        if self.kind == "exp_distance" and not self.length > 0:
            raise ConfigError(f"exp_distance needs length > 0, got {self.length}")

    # convenience constructors
    @classmethod
    def iid(cls, variance=1.0):
        return cls("iid", variance)

    @classmethod
    def moving_average(cls, weights, variance=1.0):
        return cls("moving_average", variance, weights=tuple(weights))

    @classmethod
    def inverse_lag(cls, c, variance=1.0):
        return cls("inverse_lag", variance, c=c)

    @classmethod
    def long_memory(cls, hurst, variance=1.0):
        return cls("long_memory", variance, hurst=hurst)

    @classmethod
    def inverse_log(cls, variance=1.0):
        return cls("inverse_log", variance)

    @classmethod
    def exp_distance(cls, length, variance=1.0):
        return cls("exp_distance", variance, length=length)

    @property
    def decay_exponent(self):
        """``p`` in rho(n) ~ n**-p for the long-memory case (p = 2 - 2H)."""
        return 2.0 - 2.0 * self.hurst if self.kind == "long_memory" else None

    def correlation(self, lags) -> np.ndarray:
        """rho at the given nonnegative lags or distances (rho(0) = 1)."""
        n = np.abs(np.asarray(lags, dtype=float))
        out = np.empty_like(n)
        zero = n == 0
        pos = ~zero
        out[zero] = 1.0
        if self.kind == "iid":
            out[pos] = 0.0
        elif self.kind == "moving_average":
            out[...] = _ma_correlation(self.weights, n)
        elif self.kind == "inverse_lag":
            out[pos] = self.c / n[pos]
        elif self.kind == "long_memory":
            out[...] = fgn_autocovariance(n, self.hurst)
        elif self.kind == "inverse_log":
            out[pos] = 1.0 / np.log1p(n[pos])
        elif self.kind == "exp_distance":
            out[pos] = np.exp(-n[pos] / self.length)
        return out

    def covariance(self, lags) -> np.ndarray:
        return self.variance * self.correlation(lags)

    def as_dict(self) -> dict:
        d = {"kind": self.kind, "variance": self.variance}
        if self.kind == "moving_average":
            d["weights"] = list(self.weights)
        elif self.kind == "inverse_lag":
            d["c"] = self.c
        elif self.kind == "long_memory":
            d["hurst"] = self.hurst
        elif self.kind == "exp_distance":
            d["length"] = self.length
        return d


def _ma_correlation(weights, lags):
    w = np.asarray(weights, dtype=float)
    q = len(w)
    acov = np.array([np.dot(w[: q - k], w[k:]) for k in range(q)])
    out = np.zeros_like(lags, dtype=float)
    # non-integer distances fall back to the nearest integer lag
    idx = np.rint(lags).astype(int)
    inside = idx < q
    out[inside] = acov[idx[inside]] / acov[0]
    return out


def fgn_autocovariance(lags, hurst: float) -> np.ndarray:
    """Autocovariance of unit-variance fractional Gaussian noise.

    gamma(n) = (|n+1|^2H - 2|n|^2H + |n-1|^2H) / 2, valid for any H in (0, 1).
    """
    n = np.abs(np.asarray(lags, dtype=float))
    h2 = 2.0 * hurst
    return 0.5 * (np.abs(n + 1) ** h2 - 2 * n ** h2 + np.abs(n - 1) ** h2)


def exact_partial_sum_variance(kernel: NoiseKernel, n: int) -> float:
    """Var(xi_1 + ... + xi_N) = sigma^2 [N + 2 sum_{k<N} (N-k) rho(k)]."""
    if n < 1:
        raise ConfigError("partial sums need N >= 1")
    if kernel.kind == "long_memory":
        return kernel.variance * float(n) ** (2 * kernel.hurst)
    k = np.arange(1, n, dtype=float)
    return kernel.variance * (n + 2.0 * float(np.sum((n - k) * kernel.correlation(k))))


# --------------------------------------------------------------------------
# Synthesis


class _Synthesizer:
    """Draws zero-mean Gaussian rows of length ``n`` with a stationary kernel."""

    def __init__(self, kernel: NoiseKernel, n: int):
        self.kernel = kernel
        self.n = n
        self.method = None
        self._sqrt_eig = None
        self._factor = None
        if n == 1:
            self.method = "scalar"
            return
        acov = kernel.covariance(np.arange(n))
        if not self._try_circulant(acov):
            if n > DENSE_MAX:
                raise KernelInfeasibleError(
                    f"{kernel.kind} kernel: circulant embedding has negative eigenvalue "
                    f"{self._embed_min:.3e} and n={n} exceeds the dense limit {DENSE_MAX}",
                    eigenvalue=self._embed_min,
                )
            self._dense(acov)

    def _try_circulant(self, acov):
        row = np.concatenate([acov, acov[-2:0:-1]])
        eig = np.fft.fft(row).real
        self._embed_min = float(eig.min())
        if eig.min() < -_EMBED_RTOL * eig.max():
            return False
        self.method = "circulant"
        self._sqrt_eig = np.sqrt(np.clip(eig, 0.0, None) / len(row))
        return True

    def _dense(self, acov):
        from scipy.linalg import toeplitz

        cov = toeplitz(acov)
        eig, vec = np.linalg.eigh(cov)
        floor = -_DENSE_RTOL * np.trace(cov) / self.n
        if eig[0] < floor:
            raise KernelInfeasibleError(
                f"{self.kernel.kind} kernel is not positive semidefinite on {self.n} items: "
                f"minimum eigenvalue {eig[0]:.6e} < tolerance {floor:.3e}",
                eigenvalue=float(eig[0]),
            )
        self.method = "dense"
        self._factor = vec * np.sqrt(np.clip(eig, 0.0, None))

    def draw(self, gen: np.random.Generator, rows: int) -> np.ndarray:
        if self.method == "scalar":
            return math.sqrt(self.kernel.variance) * gen.standard_normal((rows, 1))
        if self.method == "dense":
            z = gen.standard_normal((rows, self.n))
            return z @ self._factor.T
        m = len(self._sqrt_eig)
        pairs = (rows + 1) // 2
        z = gen.standard_normal((pairs, 2, m))
        y = np.fft.fft(self._sqrt_eig * (z[:, 0] + 1j * z[:, 1]), axis=-1)[:, : self.n]
        out = np.empty((2 * pairs, self.n))
        out[0::2] = y.real
        out[1::2] = y.imag
        return out[:rows]


@lru_cache(maxsize=32)
def synthesizer(kernel: NoiseKernel, n: int) -> _Synthesizer:
    return _Synthesizer(kernel, n)


class FieldSynthesizer:
    """Gaussian field on fixed points with covariance ``kernel(||r_i - r_j||)``."""

    def __init__(self, kernel: NoiseKernel, positions):
        from scipy.spatial.distance import cdist

        pts = np.asarray(positions, dtype=float)
        if pts.ndim == 1:
            pts = pts[:, None]
        self.n = len(pts)
        self.kernel = kernel
        if self.n == 0:
            self._factor = np.zeros((0, 0))
            return
        cov = kernel.covariance(cdist(pts, pts))
        eig, vec = np.linalg.eigh(cov)
        floor = -_DENSE_RTOL * np.trace(cov) / self.n
        if eig[0] < floor:
            raise KernelInfeasibleError(
                f"{kernel.kind} field covariance is not positive semidefinite: "
                f"minimum eigenvalue {eig[0]:.6e} < tolerance {floor:.3e}",
                eigenvalue=float(eig[0]),
            )
        keep = eig > 0
        self._factor = vec[:, keep] * np.sqrt(eig[keep])

    def draw(self, gen: np.random.Generator, rows: int) -> np.ndarray:
        z = gen.standard_normal((rows, self._factor.shape[1]))
        return z @ self._factor.T


# --------------------------------------------------------------------------
# Sample matrices


@dataclass(frozen=True)
class SampleMatrix:
    """``values[r, i]`` is item ``i`` of independent replicate ``r``."""

    values: np.ndarray
    seed: int
    kernel: NoiseKernel | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.ndim != 2:
            raise ValueError("sample matrix must be replicates x items")
        if not np.all(np.isfinite(v)):
            raise ValueError("sample matrix contains non-finite entries")
        v.flags.writeable = False
        object.__setattr__(self, "values", v)

    @property
    def replicates(self) -> int:
        return self.values.shape[0]

    @property
    def n_items(self) -> int:
        return self.values.shape[1]

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["replicate", "index", "value"])
            for r, row in enumerate(self.values):
                for i, x in enumerate(row):
                    w.writerow([r, i, repr(float(x))])


def _check_shape(n_items, replicates):
    if int(n_items) < 1 or int(replicates) < 1:
        raise ConfigError(f"need n_items >= 1 and replicates >= 1, got {n_items}, {replicates}")


def _rows(seed, replicates, draw_one):
    first = draw_one(seeding.rng(seed, "sample", 0))
    out = np.empty((replicates, first.shape[-1]))
    out[0] = first
    for r in range(1, replicates):
        out[r] = draw_one(seeding.rng(seed, "sample", r))
    return out


def gen_iid(n_items, replicates, distribution="gaussian", seed=0, variance=1.0, clip=None):
    """I.i.d. entries with the given variance.

    ``gaussian`` is N(0, variance); ``uniform`` is symmetric on
    [-a, a] with a = sqrt(3 variance); ``clipped`` is a N(0, variance) draw
    clipped at +-``clip`` (default 2 standard deviations), so its variance is
    slightly below ``variance``.
    """
    _check_shape(n_items, replicates)
    if not (variance > 0 and math.isfinite(variance)):
        raise ConfigError(f"variance must be positive, got {variance}")
    sd = math.sqrt(variance)
    if distribution == "gaussian":
        def one(g):
            return sd * g.standard_normal(n_items)
    elif distribution == "uniform":
        a = math.sqrt(3.0 * variance)

        def one(g):
            return g.uniform(-a, a, n_items)
    elif distribution == "clipped":
        bound = 2.0 * sd if clip is None else float(clip)
        if not bound > 0:
            raise ConfigError(f"clip bound must be positive, got {clip}")

        def one(g):
            return np.clip(sd * g.standard_normal(n_items), -bound, bound)
    else:
        raise ConfigError(f"unknown distribution {distribution!r}")
    return SampleMatrix(_rows(seed, replicates, one), seed, NoiseKernel.iid(variance),
                        {"generator": "iid", "distribution": distribution})


def gen_ma(n_items, replicates, weights, seed=0, innovations="gaussian", innovation_variance=1.0):
    """Moving-average sums xi_i = sum_k weights[k] * e_{i-k} of i.i.d. innovations.

    Items farther apart than ``len(weights) - 1`` are exactly uncorrelated and
    the marginal variance is ``sum(weights**2) * innovation_variance``.
    ``innovations="uniform"`` gives a bounded sequence.
    """
    _check_shape(n_items, replicates)
    w = np.asarray(list(weights), dtype=float)
    if w.size == 0:
        raise ConfigError("gen_ma needs a nonempty weight list")
    if not np.all(np.isfinite(w)):
        raise ConfigError("gen_ma weights must be finite")
    if not innovation_variance > 0:
        raise ConfigError("innovation variance must be positive")
    q = len(w)
    sd = math.sqrt(innovation_variance)
    if innovations == "gaussian":
        def draw(g, k):
            return sd * g.standard_normal(k)
    elif innovations == "uniform":
        a = math.sqrt(3.0) * sd

        def draw(g, k):
            return g.uniform(-a, a, k)
    else:
        raise ConfigError(f"unknown innovation distribution {innovations!r}")

    def one(g):
        e = draw(g, n_items + q - 1)
        return np.convolve(e, w, mode="valid")

    kernel = NoiseKernel.moving_average(tuple(w), float(np.dot(w, w)) * innovation_variance) if np.any(w) else None
    return SampleMatrix(_rows(seed, replicates, one), seed, kernel,
                        {"generator": "ma", "innovations": innovations})


def gen_kernel_gaussian(n_items, replicates, kernel: NoiseKernel, seed=0):
    """Stationary Gaussian rows with corr(xi_i, xi_j) = kernel.correlation(|i-j|)."""
    _check_shape(n_items, replicates)
    syn = synthesizer(kernel, int(n_items))
    values = _rows(seed, replicates, lambda g: syn.draw(g, 1)[0])
    return SampleMatrix(values, seed, kernel, {"generator": "kernel_gaussian", "method": syn.method})


def gen_long_memory(n_items, replicates, hurst, seed=0):
    """Unit-variance fractional Gaussian noise; Var(S_N) = N**(2H) exactly."""
    if not 0.5 < hurst < 1.0:
        raise ConfigError(f"hurst must lie in (0.5, 1), got {hurst}")
    return gen_kernel_gaussian(n_items, replicates, NoiseKernel.long_memory(hurst), seed)


def gen_field_gaussian(positions, replicates, kernel: NoiseKernel, seed=0):
    """Gaussian field on fixed ``positions`` (rows: replicates, columns: points)."""
    if int(replicates) < 1:
        raise ConfigError("replicates must be >= 1")
    syn = FieldSynthesizer(kernel, positions)
    if syn.n == 0:
        return SampleMatrix(np.zeros((replicates, 0)), seed, kernel, {"generator": "field_gaussian"})
    values = _rows(seed, replicates, lambda g: syn.draw(g, 1)[0])
    return SampleMatrix(values, seed, kernel, {"generator": "field_gaussian"})
