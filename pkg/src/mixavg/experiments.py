"""Named end-to-end experiments driven by a :class:`RunConfig`.

Each runner returns a JSON-ready report with a ``verdicts`` list. Every verdict
records the value, the threshold it was compared against and the comparison.
Data files are written next to the report.
"""
from __future__ import annotations

import math
import os

import numpy as np

from . import seeding
from .averaging import (average_series, ball_sums, gaussianity_test, limit_covariance_from_samples,
                        moment_ratio, normalise_sums, normalised_variance_trace)
from .config import RunConfig
from .linearity import (StaticPair, fit_linear, lti_convergence, nonlinearity_gap, prediction_consistency,
                        rate_experiment)
from .mixing import (analytic_residual_factor, estimate_corr_decay, fit_growth_law,
                     residual_curve_from_kernel, slowly_varying_test)
from .model import build_population, save_ensemble, simulate
from .spatial import density_law_check, sample_poisson, unit_ball_volume
from .stochastic import FieldSynthesizer, NoiseKernel, exact_partial_sum_variance, gen_kernel_gaussian, gen_ma

SHARD_LIMIT = 200_000


def verdict(name, value, threshold, comparison):
    ops = {"<": lambda a, b: a < b, "<=": lambda a, b: a <= b, ">": lambda a, b: a > b,
           ">=": lambda a, b: a >= b, "==": lambda a, b: a == b}
    return {"name": name, "value": value, "threshold": threshold, "comparison": comparison,
            "passed": bool(ops[comparison](value, threshold))}


def jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return jsonable(obj.tolist())
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        return v if math.isfinite(v) else repr(v)
    return obj


def _layout_for(cfg, seed, n_points=None):
    sp = cfg.spatial or {}
    if not sp or "intensity" not in sp:
        return None
    d = int(sp.get("dim", 2))
    if n_points:
        radius = (n_points / (sp["intensity"] * unit_ball_volume(d))) ** (1.0 / d)
    else:
        radius = sp.get("radius", 10.0)
    return sample_poisson(sp["intensity"], radius, d, seeding.mix(seed, "layout"))


# --------------------------------------------------------------------------


def run_simulate(cfg: RunConfig, seed, out, threads=1):
    spec = cfg.population_spec()
    # index-lag kernels are not positive definite at Euclidean distances
    layout = _layout_for(cfg, seed) if cfg.kernel().kind in ("iid", "exp_distance") else None
    if layout is not None:
        spec = cfg.population_spec(n_subsystems=layout.n_points)
    pop = build_population(spec, layout)
    T = int(cfg.get("steps", 20))
    reps = int(cfg.get("replicates", 200))
    full = reps * (T + 1) * spec.n_subsystems <= SHARD_LIMIT
    ens = simulate(pop, T, reps, seed, keep="full" if full else "sums", threads=threads)
    files = []
    avg = average_series(ens)
    avg.to_csv(os.path.join(out, "averaged_series.csv"))
    files.append("averaged_series.csv")
    verdicts = []
    results = {"spec_hash": spec.spec_hash(), "subsystems": spec.n_subsystems, "steps": T, "replicates": reps,
               "mean_neighbourhood": float(np.asarray(pop.adjacency.sum(axis=1)).mean())}
    if full:
        save_ensemble(ens, os.path.join(out, "ensemble"))
        files.append("ensemble/manifest.json")
        peak = float(np.max(np.abs(ens.states[:, 1:]))) if T >= 1 else 0.0
        results["max_abs_state"] = peak
        if spec.family != "linear":
            verdicts.append(verdict("states_bounded_by_M", peak, spec.bound, "<="))
    verdicts.append(verdict("finite_averages", bool(np.all(np.isfinite(avg.xbar))), True, "=="))
    return {"results": results, "verdicts": verdicts, "files": files}


def run_mixing(cfg: RunConfig, seed, out, threads=1):
    kernel = cfg.kernel()
    reps = int(cfg.get("replicates", 500))
    lags = cfg.get("lags", list(range(1, 21)))
    n_items = int(max(4 * max(lags), 128))
    if kernel.kind == "moving_average" and cfg.noise.get("innovations", "gaussian") == "uniform":
        samples = gen_ma(n_items, reps, kernel.weights, seed, innovations="uniform")
    else:
        samples = gen_kernel_gaussian(n_items, reps, kernel, seed)
    files = []
    results = {}
    for est in ("max_pairwise", "mean_pairwise", "projection_proxy"):
        prof = estimate_corr_decay(samples, lags, est, seed=seed)
        prof.to_csv(os.path.join(out, f"profile_{est}.csv"))
        files.append(f"profile_{est}.csv")
        results[est] = {"lags": prof.distances, "rho_hat": prof.rho_hat}
    prof = estimate_corr_decay(samples, lags, "mean_pairwise")
    near = prof.distances <= 20
    dev = float(np.max(np.abs(prof.rho_hat[near] - kernel.correlation(prof.distances[near])))) if near.any() else 0.0
    verdicts = [verdict("kernel_fidelity_max_abs_dev", dev, 5.0 / math.sqrt(reps), "<=")]
    return {"results": results, "verdicts": verdicts, "files": files}


def run_residual(cfg: RunConfig, seed, out, threads=1):
    kernel = cfg.kernel()
    sizes = cfg.get("sizes", [2 ** k for k in range(8, 14)])
    reps = int(cfg.get("replicates", 2000))
    band = float(cfg.get("band", 0.1))
    tol = float(cfg.get("tolerance", 0.15))
    curve = residual_curve_from_kernel(kernel, sizes, reps, seed)
    curve.to_csv(os.path.join(out, "residual_curve.csv"))
    law = analytic_residual_factor(kernel)
    fit = fit_growth_law(curve.sizes, curve.h_hat)
    sv = slowly_varying_test(curve, int(cfg.get("k", 2)), band)
    verdicts = [
        verdict("growth_law_matches_analytic", fit.law.kind, law.kind, "=="),
        verdict("slowly_varying_verdict", sv.verdict, "slowly_varying" if law.slowly_varying else "not_slowly_varying", "=="),
        verdict("existence_bound_h_over_N", float(np.max(curve.h_hat / (curve.sizes * kernel.variance))), 1.0 + tol, "<="),
    ]
    n_top = int(curve.sizes[-1])
    if law.kind == "log":
        ratio = float(curve.h_hat[-1] / law(n_top))
        verdicts.append(verdict("h_over_2c_sigma2_logN_minus_1_abs", abs(ratio - 1.0), tol, "<="))
    if law.kind == "power":
        verdicts.append(verdict("fitted_exponent_abs_error", abs(fit.power_exponent - law.exponent),
                                float(cfg.get("exponent_tolerance", 0.05)), "<="))
    if curve.exact is not None:
        rel = float(np.max(np.abs(curve.variance_estimates / curve.exact - 1.0)))
        verdicts.append(verdict("exact_variance_max_rel_error", rel, 0.05, "<="))
    results = {"sizes": curve.sizes, "h_hat": curve.h_hat, "analytic_law": law.describe(),
               "fitted_law": fit.law.describe(), "fitted_power_exponent": fit.power_exponent,
               "slope_sse": fit.slope_sse, "ratios": sv.ratios, "slow_variation": sv.verdict}
    return {"results": results, "verdicts": verdicts, "files": ["residual_curve.csv"]}


def bounded_ma_vectors(n_items, reps, weights, seed):
    """Two-component bounded MA sequence: reps x n_items x 2.

    Component 0 is an MA of uniform innovations; component 1 mixes it with an
    independent MA so the pair is correlated but not degenerate.
    """
    a = gen_ma(n_items, reps, weights, seeding.mix(seed, "ma", 0), innovations="uniform").values
    b = gen_ma(n_items, reps, weights, seeding.mix(seed, "ma", 1), innovations="uniform").values
    return np.stack([a, 0.6 * a + 0.8 * b], axis=-1)


def run_clt(cfg: RunConfig, seed, out, threads=1):
    kernel = cfg.kernel()
    sizes = cfg.get("sizes", [2 ** k for k in range(8, 14)])
    reps = int(cfg.get("replicates", 2000))
    thr = float(cfg.get("threshold", 0.05))
    n_top = int(sizes[-1])
    verdicts, results = [], {}
    law = analytic_residual_factor(kernel)
    if kernel.kind == "moving_average":
        vec = bounded_ma_vectors(n_top, reps, kernel.weights, seed)
        sums = vec.sum(axis=1)
        xbar = normalise_sums(sums, n_top)
        rep = gaussianity_test(xbar, thr, int(cfg.get("directions", 8)), seed)
        results["gaussianity"] = rep.as_dict()
        verdicts.append(verdict("max_sup_cdf_distance", rep.max_distance, thr, "<"))
        if len(sizes) >= 4:
            lc = limit_covariance_from_samples(vec, sizes)
            results["limit_covariance"] = {"estimate": lc.estimate, "max_difference": lc.max_difference,
                                           "converged": lc.converged}
    else:
        samples = gen_kernel_gaussian(n_top, reps, kernel, seed)
        var_naive = normalised_variance_trace(samples, sizes, None)
        var_right = normalised_variance_trace(samples, sizes, law)
        slope = float(np.polyfit(np.log(sizes), np.log(var_naive), 1)[0])
        flat = float(var_right.max() / var_right.min())
        results.update({"sizes": sizes, "var_xbar_h1": var_naive, "var_xbar_analytic_h": var_right,
                        "naive_growth_exponent": slope, "analytic_flatness": flat})
        expected = law.exponent if law.kind == "power" else 0.0
        verdicts.append(verdict("naive_growth_exponent_abs_error", abs(slope - expected), 0.1, "<="))
        verdicts.append(verdict("analytic_h_flatness_max_over_min", flat, 1.3, "<="))
        with open(os.path.join(out, "variance_trace.csv"), "w") as fh:
            fh.write("N,var_xbar_h1,var_xbar_analytic_h\n")
            for n, a, b in zip(sizes, var_naive, var_right):
                fh.write(f"{n},{a!r},{b!r}\n")
        results["files"] = ["variance_trace.csv"]
    return {"results": results, "verdicts": verdicts, "files": results.pop("files", [])}


def gap_monotone(medians, tol=0.02):
    """Non-increasing up to one increase no larger than ``tol``."""
    ups = [b - a for a, b in zip(medians[:-1], medians[1:]) if b > a]
    return len(ups) == 0 or (len(ups) == 1 and ups[0] <= tol)


def run_linearity(cfg: RunConfig, seed, out, threads=1):
    sizes = cfg.population.get("sizes", [1, 10, 100, 1000])
    reps = int(cfg.get("replicates", 2000))
    T = int(cfg.get("steps", 4))
    tol = float(cfg.get("tolerance", 0.02))
    medians, per_n, verdicts = [], {}, []
    last = None
    for n in sizes:
        spec = cfg.population_spec(n_subsystems=int(n))
        ens = simulate(build_population(spec), T, reps, seeding.mix(seed, "linearity", n), keep="sums",
                       threads=threads)
        avg = average_series(ens)
        fit = fit_linear(avg)
        entry = {"A_hat": fit.A_hat, "B_hat": fit.B_hat, "degenerate": fit.degenerate, "notes": list(fit.notes)}
        if not fit.degenerate.all():
            gap = nonlinearity_gap(avg, seed=seed)
            fit.rms_nonparametric = gap.rms_knn
            medians.append(gap.median)
            entry.update({"gap": gap.gap, "median_gap": gap.median})
            entry["notes"] += gap.notes
        fit.to_csv(os.path.join(out, f"linear_fit_N{n}.csv"))
        per_n[str(n)] = entry
        if fit.degenerate.any():
            zero = float(np.max(np.abs(fit.A_hat[fit.degenerate])))
            verdicts.append(verdict(f"degenerate_A_is_zero_N{n}", zero, 0.0, "<="))
        last = (avg, fit)
    results = {"sizes": sizes, "median_gaps": medians, "per_N": per_n}
    if last is not None and not last[1].degenerate.all():
        verdicts.append(verdict("median_gap_non_increasing", gap_monotone(medians, tol), True, "=="))
        ratio = float(cfg.get("gap_ratio", 0.2))
        if medians[0] > 0.05:
            verdicts.append(verdict("gap_largest_N_over_gap_smallest_N", medians[-1] / medians[0], ratio, "<"))
        avg, fit = last
        pc = prediction_consistency(avg, fit, avg.T - 1, balls=int(cfg.get("balls", 10)), seed=seed)
        results["prediction_consistency"] = pc
        need = math.ceil(0.8 * pc["total"])
        verdicts.append(verdict("balls_matching_linear_prediction", pc["matches"], need, ">="))
    files = [f"linear_fit_N{n}.csv" for n in sizes]
    return {"results": results, "verdicts": verdicts, "files": files}


def run_rate(cfg: RunConfig, seed, out, threads=1):
    pair = StaticPair(cfg.get("pair_kind", "cubic"), cfg.get("pair_shape", 0.5), cfg.get("pair_ymax", 6.0),
                      cfg.get("pair_clip", 64.0), cfg.get("pair_noise", 0.5))
    sizes = cfg.get("sizes", [2 ** k for k in range(4, 11)])
    rc = rate_experiment(pair, sizes, cfg.get("upsilon", 0.0), cfg.get("delta", 1.0),
                         int(cfg.get("replicates", 5000)), seed, int(cfg.get("oracle_factor", 10)))
    rc.to_csv(os.path.join(out, "rate_curve.csv"))
    results = {"sizes": rc.sizes, "errors": rc.errors, "signed_errors": rc.signed_errors, "error_se": rc.error_se,
               "slope": rc.slope, "slope_se": rc.slope_se, "bound_M": rc.bound, "oracle_ok": rc.oracle_ok}
    if pair.kind == "linear":
        z = float(np.max(rc.errors / rc.error_se))
        verdicts = [verdict("max_error_in_se_units", z, 3.5, "<=")]
    else:
        verdicts = [verdict("slope_abs_error_vs_minus_half", abs(rc.slope + 0.5), float(cfg.get("tolerance", 0.15)), "<=")]
    return {"results": results, "verdicts": verdicts, "files": ["rate_curve.csv"]}


def run_lti(cfg: RunConfig, seed, out, threads=1):
    spec = cfg.population_spec()
    T = int(cfg.get("steps", 200))
    reps = int(cfg.get("replicates", 2000))
    burn = int(cfg.get("burn_in", 20))
    factor = float(cfg.get("factor", 3.0))
    ens = simulate(build_population(spec), T, reps, seed, keep="sums", threads=threads)
    fit = fit_linear(average_series(ens))
    fit.to_csv(os.path.join(out, "lti_fit.csv"))
    rep = lti_convergence(fit, burn, factor)
    results = {"tail_max_ratio": rep.tail_max_ratio, "z": rep.z, "diff_A": rep.diff_A, "diff_B": rep.diff_B}
    verdicts = [verdict("tail_difference_over_floor", rep.tail_max_ratio, factor, "<=")]
    period = int(cfg.get("control_period", 0))
    if period > 0:
        ctrl_spec = cfg.population_spec(noise_period=period, noise_amplitude=float(cfg.get("control_amplitude", 0.9)))
        ens2 = simulate(build_population(ctrl_spec), T, reps, seeding.mix(seed, "control"), keep="sums",
                        threads=threads)
        ctrl = lti_convergence(fit_linear(average_series(ens2)), burn, factor)
        results["control_tail_max_ratio"] = ctrl.tail_max_ratio
        verdicts.append(verdict("control_tail_difference_over_floor", ctrl.tail_max_ratio, factor, ">"))
    return {"results": results, "verdicts": verdicts, "files": ["lti_fit.csv"]}


def spatial_clt_sums(intensity, radius, d, length, reps, seed, resample=False):
    """Ball sums of a bounded two-component transform of an exponential-kernel field.

    Returns (sums reps x 3 radii x 2, radii, counts). Radii double: R/4, R/2, R.
    """
    radii = [radius / 4.0, radius / 2.0, radius]
    kernel = NoiseKernel.exp_distance(length)

    def transform(f):
        return np.stack([np.minimum(f[..., 0] ** 2, 4.0), np.tanh(f[..., 0] + f[..., 1])], axis=-1)

    if not resample:
        lay = sample_poisson(intensity, radius, d, seeding.mix(seed, "layout"))
        syn = FieldSynthesizer(kernel, lay.positions)
        sums = np.empty((reps, 3, 2))
        for r in range(reps):
            g = seeding.rng(seed, "field", r)
            f = syn.draw(g, 2).T
            sums[r] = ball_sums(transform(f)[None], lay, radii)[0]
        counts = [int(lay.window(rr).sum()) for rr in radii]
        return sums, radii, counts
    sums = np.empty((reps, 3, 2))
    counts = []
    for r in range(reps):
        lay = sample_poisson(intensity, radius, d, seeding.mix(seed, "layout", r))
        f = FieldSynthesizer(kernel, lay.positions).draw(seeding.rng(seed, "field", r), 2).T
        sums[r] = ball_sums(transform(f)[None], lay, radii)[0]
        counts.append([int(lay.window(rr).sum()) for rr in radii])
    return sums, radii, np.mean(counts, axis=0).tolist()


def run_spatial(cfg: RunConfig, seed, out, threads=1):
    sp = cfg.spatial or {}
    lam = float(sp.get("intensity", 5.0))
    d = int(sp.get("dim", 2))
    radii = sp.get("radii", [10.0, 20.0, 40.0, 80.0])
    n_layouts = int(sp.get("layouts", 200))
    tol = float(cfg.get("tolerance", 0.05))
    layouts = [sample_poisson(lam, radii[-1], d, seeding.mix(seed, "density", k)) for k in range(n_layouts)]
    rep = density_law_check(layouts, radii, lam)
    with open(os.path.join(out, "density_law.csv"), "w") as fh:
        fh.write("R,mean_ratio,sd_ratio,relative_error\n")
        for r, m, s, e in zip(rep.radii, rep.mean_ratio, rep.sd_ratio, rep.relative_error()):
            fh.write(f"{r!r},{m!r},{s!r},{e!r}\n")
    verdicts = [verdict("density_ratio_rel_error_at_largest_R", float(rep.relative_error()[-1]), tol, "<="),
                verdict("unit_ball_volume_d3_error", abs(unit_ball_volume(3) - 4.0 * math.pi / 3.0), 1e-12, "<=")]
    results = {"radii": rep.radii, "mean_ratio": rep.mean_ratio, "sd_ratio": rep.sd_ratio,
               "spread_shrinks": rep.trend_toward_limit()}
    files = ["density_law.csv"]
    if "radius" in sp:
        reps = int(cfg.get("replicates", 1000))
        thr = float(cfg.get("threshold", 0.05))
        sums, rr, counts = spatial_clt_sums(float(sp.get("clt_intensity", 1.0)), float(sp["radius"]), d,
                                            float(sp.get("length", 1.0)), reps, seed,
                                            bool(sp.get("resample_layouts", False)))
        top = sums[:, -1] - sums[:, -1].mean(axis=0)
        g = gaussianity_test(top / top.std(axis=0, ddof=1), thr, int(cfg.get("directions", 8)), seed,
                             min_reps=min(500, reps))
        mr = max(moment_ratio(sums[:, k, 0], sums[:, -1, 0], 3.0) for k in range(len(rr)))
        results["spatial_clt"] = {"radii": rr, "counts": counts, "gaussianity": g.as_dict(),
                                  "moment_ratio_p3_max": mr}
        verdicts.append(verdict("spatial_clt_max_sup_cdf_distance", g.max_distance, thr, "<"))
    return {"results": results, "verdicts": verdicts, "files": files}


RUNNERS = {
    "simulate": run_simulate,
    "mixing": run_mixing,
    "residual": run_residual,
    "clt": run_clt,
    "linearity": run_linearity,
    "rate": run_rate,
    "lti": run_lti,
    "spatial": run_spatial,
}
