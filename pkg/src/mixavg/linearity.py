"""Linear structure of averaged dynamics.

``A(t) = Cov(xbar(t+1), xbar(t)) Cov(xbar(t))^+`` and
``B(t) = Cov(xbar(t+1), wbar(t)) Cov(wbar(t))^+`` are estimated from
cross-replicate covariances. Because the noise at time t is independent of the
state at time t, the two regressions decouple.

Conditional expectations are estimated by ball conditioning: the mean of the
target over replicates whose conditioning vector lands within ``delta`` of
``upsilon``.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import integrate, stats
from scipy.optimize import curve_fit
from scipy.spatial import cKDTree

from . import seeding
from .averaging import AveragedSeries
from .errors import ConfigError, InsufficientMassError, InsufficientReplicatesError

MIN_IN_BALL = 30


def pinv_tolerance(mat: np.ndarray) -> float:
    """eps * max dimension * largest singular value (absolute cutoff)."""
    if mat.size == 0:
        return 0.0
    smax = float(np.linalg.norm(mat, 2))
    return float(np.finfo(float).eps * max(mat.shape) * smax)


def _pinv(mat):
    tol = pinv_tolerance(mat)
    if not np.any(mat):
        return np.zeros_like(mat).T, tol, True
    return np.linalg.pinv(mat, rcond=np.finfo(float).eps * max(mat.shape)), tol, False


def _cov(a, b):
    a = a - a.mean(axis=0)
    b = b - b.mean(axis=0)
    return a.T @ b / (len(a) - 1)


@dataclass
class LinearFitReport:
    A_hat: np.ndarray            # T x n x n
    B_hat: np.ndarray            # T x n x m
    A_se: np.ndarray
    B_se: np.ndarray
    tolerance: np.ndarray        # pinv cutoff on Cov(xbar(t)) per t
    degenerate: np.ndarray       # Cov(xbar(t)) identically zero
    rms_linear: np.ndarray
    rms_nonparametric: np.ndarray | None = None
    replicates: int = 0
    notes: list = field(default_factory=list)

    @property
    def gap(self):
        if self.rms_nonparametric is None:
            return None
        return nonlinearity_gap_from_rms(self.rms_linear, self.rms_nonparametric)

    def to_csv(self, path):
        T, n, _ = self.A_hat.shape
        m = self.B_hat.shape[-1]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "matrix", "row", "col", "value", "se", "pinv_tol", "rms_linear", "rms_nonparametric"])
            for t in range(T):
                rn = "" if self.rms_nonparametric is None else repr(float(self.rms_nonparametric[t]))
                for name, mat, se, cols in (("A", self.A_hat, self.A_se, n), ("B", self.B_hat, self.B_se, m)):
                    for i in range(n):
                        for j in range(cols):
                            w.writerow([t, name, i, j, repr(float(mat[t, i, j])), repr(float(se[t, i, j])),
                                        repr(float(self.tolerance[t])), repr(float(self.rms_linear[t])), rn])


def _ratio_se(reg, target, coef, pinv):
    """Robust standard errors of coef = Cov(target, reg) Cov(reg)^+.

    The residual is that of this regression alone: A(t) and B(t) are separate
    covariance ratios, so for A the noise term acts as residual variation and
    vice versa.
    """
    reps = len(reg)
    rc = reg - reg.mean(0)
    e = (target - target.mean(0)) - rc @ coef.T
    infl = rc @ pinv.T
    return np.sqrt((e ** 2).T @ (infl ** 2)) / (reps - 1)


def fit_linear(avg: AveragedSeries, min_reps=200) -> LinearFitReport:
    """Covariance-ratio estimates of A(t), B(t) for t = 0 .. T-1."""
    reps = avg.replicates
    if reps < min_reps:
        raise InsufficientReplicatesError(f"linear fits need >= {min_reps} replicates, got {reps}")
    T = avg.T
    n, m = avg.xbar.shape[-1], avg.wbar.shape[-1]
    A = np.zeros((T, n, n))
    B = np.zeros((T, n, m))
    A_se = np.zeros((T, n, n))
    B_se = np.zeros((T, n, m))
    tol = np.zeros(T)
    degenerate = np.zeros(T, dtype=bool)
    rms = np.zeros(T)
    notes = []
    for t in range(T):
        x0, x1, w0 = avg.xbar[:, t], avg.xbar[:, t + 1], avg.wbar[:, t]
        cxx = _cov(x0, x0)
        cww = _cov(w0, w0)
        pxx, tol[t], degenerate[t] = _pinv(cxx)
        pww, _, wdeg = _pinv(cww)
        if degenerate[t]:
            notes.append(f"t={t}: Cov(xbar) is zero, A set to 0")
        A[t] = _cov(x1, x0) @ pxx
        B[t] = _cov(x1, w0) @ pww
        resid = (x1 - x1.mean(0)) - (x0 - x0.mean(0)) @ A[t].T - (w0 - w0.mean(0)) @ B[t].T
        rms[t] = math.sqrt(float(np.mean(resid ** 2)))
        A_se[t] = _ratio_se(x0, x1, A[t], pxx)
        B_se[t] = _ratio_se(w0, x1, B[t], pww)
    return LinearFitReport(A, B, A_se, B_se, tol, degenerate, rms, None, reps, notes)


def split_half_agreement(avg: AveragedSeries, t: int) -> float:
    """Max relative difference of A(t) entries between two disjoint halves."""
    h1, h2 = avg.halves()
    a1 = fit_linear(h1, min_reps=100).A_hat[t]
    a2 = fit_linear(h2, min_reps=100).A_hat[t]
    denom = np.maximum(np.abs(0.5 * (a1 + a2)), 1e-12)
    return float(np.max(np.abs(a1 - a2) / denom))


# --------------------------------------------------------------------------
# Ball conditioning


@dataclass
class ConditionalMean:
    value: np.ndarray
    se: np.ndarray
    count: int
    delta: float
    widened: int = 0
    cond_mean: np.ndarray | None = None   # in-ball mean of the conditioning variables


def conditional_mean(target, cond, upsilon, delta, min_count=MIN_IN_BALL, auto_widen=False,
                     widen_factor=1.25, max_widen=20) -> ConditionalMean:
    """Mean of ``target`` over rows with ||cond - upsilon|| <= delta."""
    y = np.asarray(target, dtype=float)
    if y.ndim == 1:
        y = y[:, None]
    c = np.asarray(cond, dtype=float)
    if c.ndim == 1:
        c = c[:, None]
    ups = np.atleast_1d(np.asarray(upsilon, dtype=float))
    if c.shape[1] != len(ups):
        raise ConfigError(f"ball centre has {len(ups)} coordinates, conditioning has {c.shape[1]}")
    dist = np.linalg.norm(c - ups, axis=1)
    widened = 0
    while True:
        mask = dist <= delta
        count = int(mask.sum())
        if count >= min_count:
            break
        if not auto_widen or widened >= max_widen:
            raise InsufficientMassError(
                f"only {count} replicates in the ball of radius {delta:g} (need {min_count})", count=count)
        delta *= widen_factor
        widened += 1
    sel = y[mask]
    se = sel.std(axis=0, ddof=1) / math.sqrt(count)
    return ConditionalMean(sel.mean(axis=0), se, count, float(delta), widened, c[mask].mean(axis=0))


def _features(avg, t):
    return np.concatenate([avg.xbar[:, t], avg.wbar[:, t]], axis=1)


def prediction_consistency(avg: AveragedSeries, fit: LinearFitReport, t: int, balls=10, coverage=0.1,
                           n_se=2.0, seed=0) -> dict:
    """Compare ball-conditioned means of xbar(t+1) with the linear prediction.

    Ball centres are replicate feature vectors drawn from ``rng(seed, "balls", t)``
    among rows within one standard unit of the centre; the radius gives each
    ball roughly ``coverage`` of the replicates. The linear prediction is
    evaluated at the in-ball mean of the conditioning variables.
    """
    f = _features(avg, t)
    keep = f.std(axis=0) > 0
    mu, sd = f.mean(axis=0), np.where(keep, f.std(axis=0), 1.0)
    z = ((f - mu) / sd)[:, keep]
    target = avg.xbar[:, t + 1]
    tmean = target.mean(axis=0)
    coef = np.concatenate([fit.A_hat[t], fit.B_hat[t]], axis=1)[:, keep]
    g = seeding.rng(seed, "balls", t)
    core = np.flatnonzero(np.linalg.norm(z, axis=1) <= 1.0)
    centres = z[g.choice(core, size=balls, replace=len(core) < balls)]
    tree = cKDTree(z)
    k = max(MIN_IN_BALL, int(round(coverage * len(z))))
    rows = []
    hits = 0
    for c in centres:
        delta = float(tree.query(c, k=k)[0][-1])
        cm = conditional_mean(target, z, c, delta, auto_widen=True)
        feat = cm.cond_mean * sd[keep]
        pred = tmean + coef @ feat
        err = np.abs(cm.value - pred)
        ok = bool(np.all(err <= n_se * cm.se))
        hits += ok
        rows.append({"centre": c.tolist(), "delta": cm.delta, "count": cm.count, "conditional_mean": cm.value.tolist(),
                     "linear_prediction": pred.tolist(), "se": cm.se.tolist(), "within": ok})
    return {"t": t, "balls": rows, "matches": hits, "total": balls, "n_se": n_se}


# --------------------------------------------------------------------------
# Nonlinearity gap


def nonlinearity_gap_from_rms(rms_lin, rms_nonpar):
    lin = np.asarray(rms_lin, dtype=float)
    npar = np.asarray(rms_nonpar, dtype=float)
    out = np.zeros_like(lin)
    nz = lin > 1e-12 * max(1.0, float(np.max(np.abs(lin)) if lin.size else 1.0))
    out[nz] = (lin[nz] - npar[nz]) / lin[nz]
    return out


@dataclass
class GapReport:
    gap: np.ndarray           # raw, may be negative
    rms_linear: np.ndarray
    rms_knn: np.ndarray
    k: int
    folds: int
    notes: list = field(default_factory=list)

    @property
    def clamped(self) -> np.ndarray:
        return np.maximum(self.gap, 0.0)

    @property
    def median(self) -> float:
        """Median of the clamped gaps."""
        return float(np.median(self.clamped))


def _oof_rms(F, y, k, folds, g):
    n = len(F)
    order = g.permutation(n)
    fold_of = np.empty(n, dtype=int)
    fold_of[order] = np.arange(n) % folds
    lin_sq = 0.0
    knn_sq = 0.0
    for f in range(folds):
        test = fold_of == f
        train = ~test
        Ft, yt = F[train], y[train]
        X = np.column_stack([np.ones(len(Ft)), Ft])
        beta, *_ = np.linalg.lstsq(X, yt, rcond=None)
        pred_lin = np.column_stack([np.ones(test.sum()), F[test]]) @ beta
        resid = yt - X @ beta
        mu, sd = Ft.mean(axis=0), Ft.std(axis=0)
        sd = np.where(sd > 0, sd, 1.0)
        tree = cKDTree((Ft - mu) / sd)
        _, idx = tree.query((F[test] - mu) / sd, k=k)
        idx = idx.reshape(test.sum(), -1)
        pred_knn = pred_lin + resid[idx].mean(axis=1)
        lin_sq += float(np.sum((y[test] - pred_lin) ** 2))
        knn_sq += float(np.sum((y[test] - pred_knn) ** 2))
    return math.sqrt(lin_sq / y.size), math.sqrt(knn_sq / y.size)


def nonlinearity_gap(avg: AveragedSeries, times=None, k=None, folds=5, seed=0, min_reps=500) -> GapReport:
    """Out-of-fold linear vs nonparametric prediction of xbar(t+1) from (xbar(t), wbar(t)).

    The nonparametric predictor is the linear fit plus a kNN average (k =
    ceil(sqrt(reps)), standardised features) of the training residuals, so it
    is consistent for any regression function and does not pay a smoothing
    penalty on linear structure. gap(t) = (RMS_lin - RMS_np) / RMS_lin. Raw
    gaps are reported; negative values mean the kNN correction only added
    noise, and ``clamped`` floors them at zero.
    """
    reps = avg.replicates
    if reps < min_reps:
        raise InsufficientReplicatesError(f"nonlinearity gap needs >= {min_reps} replicates, got {reps}")
    k = int(k or math.ceil(math.sqrt(reps)))
    times = list(range(avg.T)) if times is None else list(times)
    lin, knn = [], []
    notes = []
    for t in times:
        F = _features(avg, t)
        F = F[:, F.std(axis=0) > 0]
        y = avg.xbar[:, t + 1]
        if F.shape[1] == 0:
            notes.append(f"t={t}: no varying features")
        g = seeding.rng(seed, "folds", t)
        a, b = _oof_rms(F, y, k, folds, g) if F.shape[1] else (float(y.std()), float(y.std()))
        lin.append(a)
        knn.append(b)
    gap = nonlinearity_gap_from_rms(lin, knn)
    if np.any(gap < 0):
        notes.append("negative raw gap: kNN did worse than the linear predictor")
    return GapReport(gap, np.array(lin), np.array(knn), k, folds, notes)


# --------------------------------------------------------------------------
# Convergence rate on static pairs


@dataclass(frozen=True)
class StaticPair:
    """Bounded i.i.d. pair z = (x, y).

    y is Gamma(shape) truncated at ``y_max`` (mass above it sits at ``y_max``),
    or Uniform(0, y_max) when ``shape`` is 0. ``kind="cubic"`` sets
    x = clip(y^3, -clip, clip) + U(-noise, noise); ``kind="linear"`` sets
    x = slope * y + U(-noise, noise).
    """

    kind: str = "cubic"
    shape: float = 0.5
    y_max: float = 6.0
    clip: float = 64.0
    noise: float = 0.5
    slope: float = 1.0

    def __post_init__(self):
        if self.kind not in ("cubic", "linear"):
            raise ConfigError(f"unknown pair kind {self.kind!r}")
        if not self.y_max > 0 or self.noise < 0 or self.shape < 0:
            raise ConfigError("pair needs y_max > 0, noise >= 0 and shape >= 0")

    @property
    def bound(self) -> float:
        if self.kind == "cubic":
            gx = min(self.y_max ** 3, self.clip)
        else:
            gx = abs(self.slope) * self.y_max
        return max(gx + self.noise, self.y_max)

    def signal(self, y):
        if self.kind == "cubic":
            return np.clip(y ** 3, -self.clip, self.clip)
        return self.slope * y

    def sample_y(self, g, size):
        if self.shape == 0:
            return g.uniform(0.0, self.y_max, size)
        return np.minimum(g.gamma(self.shape, 1.0, size), self.y_max)

    def sample(self, g, size):
        y = self.sample_y(g, size)
        x = self.signal(y) + g.uniform(-self.noise, self.noise, size)
        return x, y

    def _expect(self, func):
        """E[func(y)] by quadrature plus the atom at y_max."""
        if self.shape == 0:
            return integrate.quad(lambda u: func(u) / self.y_max, 0.0, self.y_max, limit=200)[0]
        dist = stats.gamma(self.shape)
        cut = [1.0, self.clip ** (1 / 3)] if self.kind == "cubic" else [1.0]
        pts = [p for p in cut if 0 < p < self.y_max]
        body = integrate.quad(lambda u: func(u) * dist.pdf(u), 0.0, self.y_max, points=pts or None, limit=200)[0]
        return body + func(self.y_max) * dist.sf(self.y_max)

    def moments(self):
        """Exact mean vector and covariance of (x, y)."""
        s = lambda u: float(self.signal(np.asarray(u)))
        ey = self._expect(lambda u: u)
        ey2 = self._expect(lambda u: u * u)
        ex = self._expect(s)
        ex2 = self._expect(lambda u: s(u) ** 2) + self.noise ** 2 / 3.0
        exy = self._expect(lambda u: s(u) * u)
        mu = np.array([ex, ey])
        cov = np.array([[ex2 - ex * ex, exy - ex * ey], [exy - ex * ey, ey2 - ey * ey]])
        return mu, cov

    def conditional_x_mean(self, lo, hi):
        """E[x | lo <= y <= hi] for a single pair, by quadrature."""
        if self.shape == 0:
            a, b = max(lo, 0.0), min(hi, self.y_max)
            num = integrate.quad(lambda u: float(self.signal(np.asarray(u))), a, b)[0]
            return num / (b - a)
        dist = stats.gamma(self.shape)
        a, b = max(lo, 0.0), min(hi, self.y_max)
        num = integrate.quad(lambda u: float(self.signal(np.asarray(u))) * dist.pdf(u), a, b, limit=200)[0]
        den = dist.cdf(b) - dist.cdf(a)
        if hi >= self.y_max:
            num += float(self.signal(np.asarray(self.y_max))) * dist.sf(self.y_max)
            den += dist.sf(self.y_max)
        return num / den


@dataclass
class RateCurve:
    sizes: np.ndarray
    errors: np.ndarray
    signed_errors: np.ndarray
    error_se: np.ndarray
    oracle_se: np.ndarray
    counts: np.ndarray
    slope: float
    slope_se: float
    upsilon: float
    delta: float
    oracle_ok: np.ndarray      # oracle noise below a third of the measured error
    bound: float

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["N", "error", "signed_error", "error_se", "oracle_se", "in_ball", "oracle_ok", "upsilon", "delta"])
            for k, n in enumerate(self.sizes):
                w.writerow([int(n), repr(float(self.errors[k])), repr(float(self.signed_errors[k])),
                            repr(float(self.error_se[k])),
                            repr(float(self.oracle_se[k])), int(self.counts[k]), bool(self.oracle_ok[k]),
                            self.upsilon, self.delta])


def power_law_slope(sizes, signed_errors, se):
    """Exponent s of error ~ c N^s by weighted least squares on signed errors.

    Fitting the signed errors directly avoids the upward bias of |error| near
    the noise floor, which would flatten a fit on log |error|. The log-scale
    fit seeds the optimiser.
    """
    e = np.asarray(signed_errors, dtype=float)
    s = np.asarray(se, dtype=float)
    n = np.asarray(sizes, dtype=float)
    try:
        s0 = weighted_loglog_slope(n, np.abs(e), s)[0]
    except ValueError:
        s0 = -0.5
    k = int(np.argmax(np.abs(e) / s))
    c0 = e[k] * n[k] ** (-s0)
    popt, pcov = curve_fit(lambda x, c, b: c * x ** b, n, e, p0=[c0, s0], sigma=s, absolute_sigma=True,
                           maxfev=10000)
    return float(popt[1]), float(math.sqrt(pcov[1, 1]))


def weighted_loglog_slope(sizes, errors, se):
    """Slope of log error on log N, weighting by (error / se)^2.

    The weights are the inverse delta-method variances of log error, so points
    near the noise floor count for little.
    """
    e = np.asarray(errors, dtype=float)
    s = np.asarray(se, dtype=float)
    keep = (e > 0) & (s > 0)
    if keep.sum() < 2:
        raise ValueError("need two positive errors to fit a slope")
    x = np.log(np.asarray(sizes, dtype=float)[keep])
    y = np.log(e[keep])
    w = (e[keep] / s[keep]) ** 2
    X = np.column_stack([np.ones_like(x), x])
    XtW = X.T * w
    cov = np.linalg.inv(XtW @ X)
    beta = cov @ (XtW @ y)
    return float(beta[1]), float(math.sqrt(cov[1, 1]))


def _standardised_means(pair, n, reps, g, mu, sd, chunk_items=2_000_000):
    ux = np.empty(reps)
    uy = np.empty(reps)
    rows = max(1, chunk_items // n)
    for lo in range(0, reps, rows):
        hi = min(reps, lo + rows)
        x, y = pair.sample(g, (hi - lo, n))
        ux[lo:hi] = (x.mean(axis=1) - mu[0]) * math.sqrt(n) / sd[0]
        uy[lo:hi] = (y.mean(axis=1) - mu[1]) * math.sqrt(n) / sd[1]
    return ux, uy


def rate_experiment(pair: StaticPair, sizes, upsilon=0.0, delta=1.0, reps=5000, seed=0,
                    oracle_factor=10) -> RateCurve:
    """Conditional-mean error of the averaged pair against its Gaussian limit.

    For each N the averages (xbar, ybar) are put in standard units,
    u = (zbar - mu) sqrt(N) / sd, with exact population moments. The error is
    |E[u_x | u_y in B] - E[u_x* | u_y* in B]| where (u_x*, u_y*) is drawn from
    the limiting Gaussian with ``oracle_factor`` times as many samples, and B
    is the interval of radius ``delta`` around ``upsilon``. The slope comes
    from :func:`power_law_slope` on the signed errors.
    """
    if oracle_factor < 1:
        raise ConfigError("oracle_factor must be >= 1")
    mu, cov = pair.moments()
    sd = np.sqrt(np.diag(cov))
    corr = cov[0, 1] / (sd[0] * sd[1])
    chol = np.linalg.cholesky(np.array([[1.0, corr], [corr, 1.0]]))
    sizes = [int(n) for n in sizes]
    signed, ses, oses, counts = [], [], [], []
    for n in sizes:
        g = seeding.rng(seed, "rate", n)
        ux, uy = _standardised_means(pair, n, reps, g, mu, sd)
        emp = conditional_mean(ux, uy, upsilon, delta)
        go = seeding.rng(seed, "oracle", n)
        z = go.standard_normal((reps * oracle_factor, 2)) @ chol.T
        orc = conditional_mean(z[:, 0], z[:, 1], upsilon, delta)
        signed.append(float(emp.value[0] - orc.value[0]))
        ses.append(float(math.hypot(emp.se[0], orc.se[0])))
        oses.append(float(orc.se[0]))
        counts.append(emp.count)
    signed, ses, oses = np.array(signed), np.array(ses), np.array(oses)
    errs = np.abs(signed)
    # one size gives errors but no slope
    slope, slope_se = power_law_slope(sizes, signed, ses) if len(sizes) >= 2 else (math.nan, math.nan)
    return RateCurve(np.array(sizes), errs, signed, ses, oses, np.array(counts), slope, slope_se,
                     float(upsilon), float(delta), oses < errs / 3.0, pair.bound)


# --------------------------------------------------------------------------
# Time invariance


@dataclass
class LTIReport:
    times: np.ndarray
    diff_A: np.ndarray           # max entry of |A(t+1) - A(t)|
    diff_B: np.ndarray
    ratio: np.ndarray            # max over entries of |difference| / floor
    burn_in: int
    factor: float
    z: float
    tail_max_ratio: float
    converged: bool


def lti_convergence(fit: LinearFitReport, burn_in=20, factor=1.0, alpha=0.05) -> LTIReport:
    """Successive differences of A(t), B(t) against a Monte Carlo floor.

    The floor for an entry is z * sqrt(se(t)^2 + se(t+1)^2) with a Bonferroni
    z over every entry and step. The verdict is converged iff every ratio after
    ``burn_in`` is at most ``factor``.
    """
    T = fit.A_hat.shape[0]
    if T < 2 * burn_in or T < 2:
        raise ConfigError(f"need T >= 2 * burn_in, got T={T}, burn_in={burn_in}")
    dA = np.abs(np.diff(fit.A_hat, axis=0))
    dB = np.abs(np.diff(fit.B_hat, axis=0))
    fA = np.sqrt(fit.A_se[1:] ** 2 + fit.A_se[:-1] ** 2)
    fB = np.sqrt(fit.B_se[1:] ** 2 + fit.B_se[:-1] ** 2)
    tests = (T - 1) * (dA[0].size + dB[0].size)
    z = float(stats.norm.isf(alpha / (2 * tests)))
    with np.errstate(divide="ignore", invalid="ignore"):
        rA = np.where(fA > 0, dA / (z * fA), np.where(dA > 0, np.inf, 0.0))
        rB = np.where(fB > 0, dB / (z * fB), np.where(dB > 0, np.inf, 0.0))
    ratio = np.maximum(rA.reshape(T - 1, -1).max(axis=1), rB.reshape(T - 1, -1).max(axis=1))
    tail = ratio[burn_in:]
    tmax = float(tail.max()) if len(tail) else 0.0
    return LTIReport(np.arange(T - 1), dA.reshape(T - 1, -1).max(axis=1), dB.reshape(T - 1, -1).max(axis=1),
                     ratio, burn_in, float(factor), z, tmax, tmax <= factor)
