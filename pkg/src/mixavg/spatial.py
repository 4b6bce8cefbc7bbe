"""Spatial embedding: Poisson layouts, ball counts and Euclidean neighbourhoods."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import sparse
from scipy.spatial import cKDTree

from . import seeding
from .errors import ConfigError, OutOfWindowError

MAX_EXPECTED_POINTS = 5_000_000


def unit_ball_volume(d: int) -> float:
    """Volume of the unit ball in R^d, pi^(d/2) / Gamma(1 + d/2)."""
    if int(d) != d or d < 1:
        raise ConfigError(f"dimension must be a positive integer, got {d}")
    return math.exp(0.5 * d * math.log(math.pi) - math.lgamma(1.0 + 0.5 * d))


@dataclass(frozen=True)
class SpatialLayout:
    positions: np.ndarray
    radius: float
    intensity: float | None = None
    seed: int | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        pos = np.asarray(self.positions, dtype=float)
        if pos.ndim == 1:
            pos = pos[:, None]
        if not self.radius > 0:
            raise ConfigError(f"window radius must be positive, got {self.radius}")
        if len(pos) and np.max(np.linalg.norm(pos, axis=1)) > self.radius * (1 + 1e-12):
            raise ConfigError("layout has points outside its window radius")
        pos.flags.writeable = False
        object.__setattr__(self, "positions", pos)
        object.__setattr__(self, "_norms", np.sort(np.linalg.norm(pos, axis=1)))

    @property
    def dim(self) -> int:
        return self.positions.shape[1]

    @property
    def n_points(self) -> int:
        return self.positions.shape[0]

    def norms(self) -> np.ndarray:
        return np.linalg.norm(self.positions, axis=1)

    def window(self, r: float, center=None) -> np.ndarray:
        """Boolean mask of points within distance ``r`` of ``center`` (default origin).

        Off-origin centres extend the origin-centred averaging windows; they are
        not covered by the density law, which is stated for origin balls.
        """
        if center is None:
            if r > self.radius * (1 + 1e-12):
                raise OutOfWindowError(f"radius {r} exceeds the sampled window {self.radius}")
            return self.norms() <= r
        c = np.asarray(center, dtype=float)
        if np.linalg.norm(c) + r > self.radius * (1 + 1e-12):
            raise OutOfWindowError("sub-ball leaves the sampled window")
        return np.linalg.norm(self.positions - c, axis=1) <= r

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["index"] + [f"x{k}" for k in range(self.dim)])
            for i, p in enumerate(self.positions):
                w.writerow([i] + [repr(float(v)) for v in p])


def sample_poisson(intensity, radius, d, seed, max_expected=MAX_EXPECTED_POINTS) -> SpatialLayout:
    """Homogeneous Poisson process of rate ``intensity`` restricted to a radius ball.

    Count-then-uniform: N ~ Poisson(intensity * C_v * radius^d), then each point
    is a Gaussian direction scaled by radius * U^(1/d).
    """
    if not intensity > 0 or not radius > 0:
        raise ConfigError(f"need intensity > 0 and radius > 0, got {intensity}, {radius}")
    mean = intensity * unit_ball_volume(d) * radius ** d
    if mean > max_expected:
        raise ConfigError(f"expected point count {mean:.3g} exceeds the cap {max_expected:.3g}")
    g = seeding.rng(seed, "poisson")
    n = int(g.poisson(mean))
    direction = g.standard_normal((n, d))
    norm = np.linalg.norm(direction, axis=1, keepdims=True)
    norm[norm == 0] = 1.0
    r = radius * g.uniform(0.0, 1.0, (n, 1)) ** (1.0 / d)
    return SpatialLayout(direction / norm * r, float(radius), float(intensity), seed)


def lattice_layout(spacing, radius, d) -> SpatialLayout:
    """Cubic lattice points (unit cell ``spacing``^d) inside the radius ball."""
    k = int(math.floor(radius / spacing))
    axis = spacing * np.arange(-k, k + 1)
    grid = np.stack(np.meshgrid(*([axis] * d), indexing="ij"), axis=-1).reshape(-1, d)
    keep = np.linalg.norm(grid, axis=1) <= radius
    return SpatialLayout(grid[keep], float(radius), spacing ** -d, None, {"lattice": spacing})


def count_in_ball(layout: SpatialLayout, r: float) -> int:
    """N_r = #{i : ||r_i|| <= r}; ``r`` may not exceed the sampled window."""
    if r < 0:
        raise ConfigError("ball radius must be nonnegative")
    if r > layout.radius * (1 + 1e-12):
        raise OutOfWindowError(f"radius {r} exceeds the sampled window {layout.radius}")
    return int(np.searchsorted(layout._norms, r, side="right"))


def thin(layout: SpatialLayout, keep_prob: float, seed) -> SpatialLayout:
    g = seeding.rng(seed, "thin")
    keep = g.uniform(size=layout.n_points) < keep_prob
    lam = None if layout.intensity is None else layout.intensity * keep_prob
    return SpatialLayout(layout.positions[keep], layout.radius, lam, seed)


@dataclass
class DensityReport:
    radii: list
    ratios: np.ndarray          # layouts x radii, N_R / (C_v R^d)
    intensity: float | None

    @property
    def mean_ratio(self) -> np.ndarray:
        return self.ratios.mean(axis=0)

    @property
    def sd_ratio(self) -> np.ndarray:
        return self.ratios.std(axis=0, ddof=1) if len(self.ratios) > 1 else np.zeros(len(self.radii))

    def relative_error(self) -> np.ndarray:
        if self.intensity is None:
            raise ValueError("no reference intensity")
        return np.abs(self.mean_ratio / self.intensity - 1.0)

    def trend_toward_limit(self) -> bool:
        """Spread of the per-layout ratio shrinks as the radius grows."""
        sd = self.sd_ratio
        return bool(len(sd) < 2 or sd[-1] <= sd[0])


def density_law_check(layouts, radii, intensity=None) -> DensityReport:
    """N_R / (C_v R^d) per layout and radius; the limit should be the intensity."""
    radii = sorted(float(r) for r in radii)
    if len(radii) < 4:
        raise ConfigError("density law check needs at least 4 radii")
    if isinstance(layouts, SpatialLayout):
        layouts = [layouts]
    rows = []
    for lay in layouts:
        cv = unit_ball_volume(lay.dim)
        rows.append([count_in_ball(lay, r) / (cv * r ** lay.dim) for r in radii])
    if intensity is None:
        intensity = layouts[0].intensity
    return DensityReport(radii, np.array(rows), intensity)


def neighborhoods(layout: SpatialLayout, tau: float) -> sparse.csr_matrix:
    """Symmetric boolean adjacency: i ~ j iff ||r_i - r_j|| <= tau (self included)."""
    if tau < 0:
        raise ConfigError("tau must be nonnegative")
    n = layout.n_points
    if n == 0:
        return sparse.csr_matrix((0, 0), dtype=bool)
    pairs = cKDTree(layout.positions).query_pairs(r=tau, output_type="ndarray") if tau > 0 else np.zeros((0, 2), int)
    rows = np.concatenate([np.arange(n), pairs[:, 0], pairs[:, 1]])
    cols = np.concatenate([np.arange(n), pairs[:, 1], pairs[:, 0]])
    return sparse.csr_matrix((np.ones(len(rows), dtype=bool), (rows, cols)), shape=(n, n))


def index_neighborhoods(n: int, tau: float) -> sparse.csr_matrix:
    """Banded adjacency |i - j| <= tau."""
    if tau < 0:
        raise ConfigError("tau must be nonnegative")
    band = min(int(math.floor(tau)), n - 1)
    offsets = list(range(-band, band + 1))
    diags = [np.ones(n - abs(k), dtype=bool) for k in offsets]
    return sparse.diags(diags, offsets, shape=(n, n), format="csr", dtype=bool)
