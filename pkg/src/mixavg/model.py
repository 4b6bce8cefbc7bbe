"""Heterogeneous populations of coupled bounded subsystems.

Subsystem ``i`` updates as ``x_i(t+1) = f(u_i)`` with the pre-activation

    u_i = A_i x_i + sum_{j ~ i, j != i} c_ij x_j + D_i w_i(t)

where ``j ~ i`` is either an index band ``|i - j| <= tau`` or a Euclidean ball
``||r_i - r_j|| <= tau`` over a spatial layout. ``f`` is one of the bounded
families below, applied componentwise. Per-subsystem gains are jittered once at
build time from the stream ``seeding.rng(seed, "build")``.
"""
from __future__ import annotations

import csv
import hashlib
import json
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import sparse

from . import seeding
from .errors import ConfigError, IntegrationError
from .spatial import SpatialLayout, index_neighborhoods, neighborhoods
from .stochastic import FieldSynthesizer, NoiseKernel, synthesizer

FAMILIES = ("saturated_linear", "clipped_polynomial", "wilson_cowan", "linear")
CHUNK_BYTES = 64 * 2 ** 20


@dataclass(frozen=True)
class PopulationSpec:
    n_subsystems: int
    state_dim: int = 1
    noise_dim: int = 1
    tau: float = 1.0
    family: str = "saturated_linear"
    gain: float = 0.5           # self gain scale (diagonal of A_i)
    coupling: float = 0.3       # total weight a subsystem puts on its neighbours
    input_gain: float = 1.0     # scale of D_i
    bound: float = 1.0          # M
    degree: int = 3             # clipped_polynomial
    slope: float = 4.0          # wilson_cowan
    threshold: float = 0.0      # wilson_cowan
    heterogeneity: float = 0.1  # relative jitter half-width on gains and thresholds
    noise: NoiseKernel = field(default_factory=NoiseKernel.iid)
    init: str = "delta0"
    init_sd: float = 1.0
    init_mean: float = 0.0
    noise_period: int = 0       # > 0 modulates the noise variance periodically
    noise_amplitude: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if int(self.n_subsystems) < 1 or int(self.state_dim) < 1 or int(self.noise_dim) < 1:
            raise ConfigError("n_subsystems, state_dim and noise_dim must be >= 1")
        if not self.tau >= 0:
            raise ConfigError(f"tau must be nonnegative, got {self.tau}")
        if self.family not in FAMILIES:
            raise ConfigError(f"unknown dynamics family {self.family!r}; expected one of {FAMILIES}")
        if self.family != "linear" and not (self.bound > 0 and math.isfinite(self.bound)):
            raise ConfigError("bounded families need a finite positive bound")
        if not 0 <= self.heterogeneity < 1:
            raise ConfigError("heterogeneity must lie in [0, 1)")
        if self.init not in ("delta0", "gaussian"):
            raise ConfigError(f"unknown init distribution {self.init!r}")
        if self.init_sd < 0:
            raise ConfigError("init_sd must be nonnegative")
        if self.noise_period < 0 or not 0 <= self.noise_amplitude < 1:
            raise ConfigError("noise_period >= 0 and noise_amplitude in [0, 1) required")
        if self.family == "clipped_polynomial" and int(self.degree) < 1:
            raise ConfigError("degree must be >= 1")

    def as_dict(self) -> dict:
        d = {k: getattr(self, k) for k in self.__dataclass_fields__ if k != "noise"}
        d["noise"] = self.noise.as_dict()
        return d

    def spec_hash(self) -> str:
        return hashlib.sha256(json.dumps(self.as_dict(), sort_keys=True).encode()).hexdigest()[:16]


@dataclass(frozen=True, eq=False)
class Population:
    spec: PopulationSpec
    adjacency: sparse.csr_matrix
    gains: np.ndarray           # N x n, diagonal of A_i
    coupling: sparse.csr_matrix  # N x N, zero diagonal
    inputs: np.ndarray          # N x n x m
    thresholds: np.ndarray      # N x n
    layout: SpatialLayout | None = None
    time_gains: tuple | None = None

    @property
    def n(self) -> int:
        return self.spec.n_subsystems

    @property
    def bound(self) -> float:
        return math.inf if self.spec.family == "linear" else self.spec.bound

    def neighbours(self, i: int) -> np.ndarray:
        row = self.adjacency.getrow(i)
        return np.sort(row.indices)


def _input_pattern(n, m):
    e = np.zeros((n, m))
    for a in range(n):
        e[a, a % m] = 1.0
    return e


def build_population(spec: PopulationSpec, layout: SpatialLayout | None = None) -> Population:
    """Fix per-subsystem parameters and the coupling graph."""
    n_sub, n, m = spec.n_subsystems, spec.state_dim, spec.noise_dim
    if layout is not None:
        if layout.n_points != n_sub:
            raise ConfigError(f"layout has {layout.n_points} points but n_subsystems={n_sub}")
        adj = neighborhoods(layout, spec.tau)
    else:
        adj = index_neighborhoods(n_sub, spec.tau)
    g = seeding.rng(spec.seed, "build")
    hj = spec.heterogeneity
    gains = spec.gain * (1.0 + g.uniform(-hj, hj, (n_sub, n)))
    inputs = spec.input_gain * (1.0 + g.uniform(-hj, hj, (n_sub, 1, 1))) * _input_pattern(n, m)
    thresholds = spec.threshold + hj * g.uniform(-1.0, 1.0, (n_sub, n))
    off = sparse.triu(adj, 1) + sparse.tril(adj, -1)
    off = sparse.csr_matrix(off, dtype=float)
    deg = np.asarray(off.sum(axis=1)).ravel()
    scale = np.divide(spec.coupling, deg, out=np.zeros_like(deg), where=deg > 0)
    weights = off.multiply(scale[:, None]).tocsr()
    if weights.nnz:
        weights.data *= 1.0 + g.uniform(-hj, hj, weights.nnz)
    return Population(spec, adj, gains, weights, inputs, thresholds, layout)


def linear_reference_population(spec: PopulationSpec, layout=None, time_gains=None) -> Population:
    """Same dimensions and graph as ``spec`` but with the identity activation.

    ``time_gains`` optionally multiplies the self gains at step ``t`` by
    ``time_gains[t]``, giving a linear time-varying system.
    """
    pop = build_population(replace(spec, family="linear"), layout)
    if time_gains is not None:
        pop = replace(pop, time_gains=tuple(float(a) for a in time_gains))
    return pop


def ltv_example_coefficients(steps: int, mean0: float = math.e) -> np.ndarray:
    """a(t) = E[y(t)] for y(t+1) = a(t) y(t) with E[y(0)] = mean0.

    E[y(t+1)] = a(t) E[y(t)] = E[y(t)]^2, so a(t) = mean0 ** (2 ** t).
    """
    a = np.empty(steps)
    mean = float(mean0)
    for t in range(steps):
        a[t] = mean
        mean = mean * mean
    return a


# --------------------------------------------------------------------------
# Dynamics


def _activate(pop: Population, u: np.ndarray) -> np.ndarray:
    spec = pop.spec
    M = spec.bound
    if spec.family == "saturated_linear":
        return M * np.tanh(u / M)
    if spec.family == "clipped_polynomial":
        return np.clip(u ** int(spec.degree), -M, M)
    if spec.family == "wilson_cowan":
        z = spec.slope * (u - pop.thresholds)
        return M * 0.5 * (1.0 + np.tanh(0.5 * z))
    return u


def _check_finite(x, what):
    bad = ~np.isfinite(x)
    if bad.any():
        idx = np.argwhere(bad)[0]
        sub = int(idx[-2]) if x.ndim >= 2 else int(idx[0])
        raise IntegrationError(f"non-finite {what} at subsystem {sub}", index=sub)


def step(pop: Population, states: np.ndarray, noises: np.ndarray, t: int | None = None) -> np.ndarray:
    """One synchronous update. ``states`` is (..., N, n), ``noises`` (..., N, m)."""
    x = np.asarray(states, dtype=float)
    w = np.asarray(noises, dtype=float)
    N, n, m = pop.n, pop.spec.state_dim, pop.spec.noise_dim
    if x.shape[-2:] != (N, n) or w.shape[-2:] != (N, m) or x.shape[:-2] != w.shape[:-2]:
        raise ConfigError(f"state shape {x.shape} / noise shape {w.shape} do not match N={N}, n={n}, m={m}")
    _check_finite(x, "state")
    gains = pop.gains
    if pop.time_gains is not None and t is not None:
        gains = gains * pop.time_gains[t]
    u = gains * x + np.einsum("inm,...im->...in", pop.inputs, w)
    if pop.coupling.nnz:
        batch = x.shape[:-2]
        flat = np.moveaxis(x.reshape((-1, N, n)), 1, 0).reshape(N, -1)
        cx = np.asarray(pop.coupling @ flat).reshape(N, -1, n)
        u = u + np.moveaxis(cx, 1, 0).reshape(batch + (N, n))
    out = _activate(pop, u)
    _check_finite(out, "state")
    return out


# --------------------------------------------------------------------------
# Simulation


@dataclass
class TrajectoryEnsemble:
    """Simulated replicates.

    ``states`` is reps x (T+1) x N x n and ``noises`` reps x T x N x m, unless
    the run kept only window sums. ``state_sums`` / ``noise_sums`` are
    reps x (T+1) x W x n and reps x T x W x m over the windows in
    ``window_sizes`` (W = 1 and the whole population by default).
    """

    spec: PopulationSpec
    seed: int
    states: np.ndarray | None
    noises: np.ndarray | None
    state_sums: np.ndarray
    noise_sums: np.ndarray
    window_sizes: np.ndarray
    window_radii: tuple | None = None
    embedding: SpatialLayout | None = None

    @property
    def replicates(self) -> int:
        return self.state_sums.shape[0]

    @property
    def T(self) -> int:
        return self.noise_sums.shape[1]


def _noise_drawer(pop: Population):
    kernel = pop.spec.noise
    if pop.layout is not None and kernel.kind not in ("iid",):
        syn = FieldSynthesizer(kernel, pop.layout.positions)
    else:
        syn = synthesizer(kernel, pop.n)
    return syn


def _noise_scale(spec: PopulationSpec, T: int) -> np.ndarray:
    if spec.noise_period <= 0 or spec.noise_amplitude == 0:
        return np.ones(T)
    t = np.arange(T)
    return np.sqrt(1.0 + spec.noise_amplitude * np.cos(2.0 * math.pi * t / spec.noise_period))


def _draw_noise(pop, syn, seed, r, T):
    """Noise for replicate ``r``: T x N x m, correlated across subsystems only."""
    m = pop.spec.noise_dim
    g = seeding.rng(seed, "noise", r)
    z = syn.draw(g, T * m).reshape(T, m, pop.n)
    return np.swapaxes(z, 1, 2)


def _draw_init(pop, seed, r):
    spec = pop.spec
    shape = (pop.n, spec.state_dim)
    if spec.init == "delta0":
        return np.full(shape, spec.init_mean)
    g = seeding.rng(seed, "init", r)
    return spec.init_mean + spec.init_sd * g.standard_normal(shape)


def _window_masks(pop, window_radii):
    if window_radii is None:
        return np.ones((1, pop.n), dtype=bool), None
    if pop.layout is None:
        # index windows: the first k subsystems
        ks = [int(k) for k in window_radii]
        return np.array([np.arange(pop.n) < k for k in ks]), tuple(ks)
    radii = tuple(float(r) for r in window_radii)
    return np.array([pop.layout.window(r) for r in radii]), radii


def simulate(pop: Population, T: int, replicates: int, seed: int = 0, keep: str = "full",
             window_radii=None, threads: int = 1) -> TrajectoryEnsemble:
    """Integrate ``replicates`` independent copies for ``T`` steps.

    Replicate ``r`` draws its initial state from ``rng(seed, "init", r)`` and its
    whole noise sequence from ``rng(seed, "noise", r)``, so results do not
    depend on chunking or ``threads``. ``keep="sums"`` stores only window sums
    (``window_radii``: radii on a layout, prefix lengths otherwise).
    """
    if int(T) < 1 or int(replicates) < 1:
        raise ConfigError("T and replicates must be >= 1")
    if keep not in ("full", "sums"):
        raise ConfigError("keep must be 'full' or 'sums'")
    spec = pop.spec
    N, n, m = pop.n, spec.state_dim, spec.noise_dim
    masks, radii = _window_masks(pop, window_radii)
    W = len(masks)
    syn = _noise_drawer(pop)
    scale = _noise_scale(spec, T)
    per_rep = 8 * (T + 1) * N * (n + m)
    chunk = max(1, min(replicates, CHUNK_BYTES // max(per_rep, 1)))

    full = keep == "full"
    states = np.empty((replicates, T + 1, N, n)) if full else None
    noises = np.empty((replicates, T, N, m)) if full else None
    xs = np.empty((replicates, T + 1, W, n))
    ws = np.empty((replicates, T, W, m))
    mf = masks.astype(float)

    def run(lo):
        hi = min(replicates, lo + chunk)
        x = np.stack([_draw_init(pop, seed, r) for r in range(lo, hi)])
        w_all = np.stack([_draw_noise(pop, syn, seed, r, T) for r in range(lo, hi)])
        w_all *= scale[None, :, None, None]
        xs[lo:hi, 0] = np.einsum("wi,bin->bwn", mf, x)
        if full:
            states[lo:hi, 0] = x
            noises[lo:hi] = w_all
        ws[lo:hi] = np.einsum("wi,btim->btwm", mf, w_all)
        for t in range(T):
            x = step(pop, x, w_all[:, t], t)
            xs[lo:hi, t + 1] = np.einsum("wi,bin->bwn", mf, x)
            if full:
                states[lo:hi, t + 1] = x

    starts = range(0, replicates, chunk)
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            list(ex.map(run, starts))
    else:
        for lo in starts:
            run(lo)
    return TrajectoryEnsemble(spec, seed, states, noises, xs, ws, masks.sum(axis=1), radii, pop.layout)


# --------------------------------------------------------------------------
# Persistence


def save_ensemble(ens: TrajectoryEnsemble, directory) -> str:
    """One CSV shard per replicate plus ``manifest.json``."""
    if ens.states is None:
        raise ConfigError("only full ensembles can be saved as shards")
    os.makedirs(directory, exist_ok=True)
    reps, T1, N, n = ens.states.shape
    m = ens.noises.shape[-1]
    manifest = {
        "spec": ens.spec.as_dict(),
        "spec_hash": ens.spec.spec_hash(),
        "seed": ens.seed,
        "replicates": reps,
        "steps": T1 - 1,
        "subsystems": N,
        "state_dim": n,
        "noise_dim": m,
        "shards": [f"replicate_{r:05d}.csv" for r in range(reps)],
    }
    with open(os.path.join(directory, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
    for r in range(reps):
        with open(os.path.join(directory, manifest["shards"][r]), "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "subsystem", "kind", "component", "value"])
            for t in range(T1):
                for i in range(N):
                    for a in range(n):
                        w.writerow([t, i, "state", a, repr(float(ens.states[r, t, i, a]))])
                    if t < T1 - 1:
                        for b in range(m):
                            w.writerow([t, i, "noise", b, repr(float(ens.noises[r, t, i, b]))])
    return directory


def load_ensemble(directory):
    """Arrays back from :func:`save_ensemble`: (manifest, states, noises)."""
    with open(os.path.join(directory, "manifest.json")) as fh:
        man = json.load(fh)
    reps, T, N = man["replicates"], man["steps"], man["subsystems"]
    states = np.empty((reps, T + 1, N, man["state_dim"]))
    noises = np.empty((reps, T, N, man["noise_dim"]))
    for r, name in enumerate(man["shards"]):
        with open(os.path.join(directory, name), newline="") as fh:
            rd = csv.reader(fh)
            next(rd)
            for t, i, kind, a, v in rd:
                target = states if kind == "state" else noises
                target[r, int(t), int(i), int(a)] = float(v)
    return man, states, noises
