"""Finite-k decomposition of the tail forecaster's error.

The inverse-OLS extrapolator's mean error against the realized deploy
maximum splits into

    rank + curvature - occupancy + residual  =  empirical total

in units of q'(y_M), where y_M = log(fit size):

* rank: a distribution-free coefficient depending only on (k, R=N/M),
  evaluated by Monte Carlo over the limiting offset vector
  T = (-log G_1, ..., -log G_k) with G_j unit-exponential partial sums;
* curvature: the deterministic line-extrapolation error on u -> u^2 at
  the nominal offsets, times q''(y_M)/2;
* occupancy: the rare-mode gap of a two-component mixture, non-zero on
  the event the rare mode misses the fit set but lands in deployment;
* residual: the closure term, holding whatever the local expansion does
  not capture (heavy tails, bounded endpoints).

Also provides the whole-estimator Monte Carlo used to validate the rank
constants, a local-quadratic estimator of (q', q'') from order
statistics, hazard diagnostics, and the split-mismatch diagnostic.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .distributions import Mixture, TailDistribution
from .forecaster import PlottingScheme, deploy_depths, plotting_positions

__all__ = [
    "EULER_GAMMA",
    "offset_functional",
    "offset_functional_derivative",
    "rank_coefficient_mc",
    "nominal_curvature_coefficient",
    "occupancy_probability",
    "estimator_error_mc",
    "local_quadratic_fit",
    "empirical_decomposition",
    "k_sweep",
    "hazard_diagnostic",
    "split_mismatch",
    "DecompositionReport",
]

# Euler-Mascheroni constant, 20 digits.
EULER_GAMMA = 0.57721566490153286061

_MC_CHUNK = 1_000_000


def _nominal_offsets(k: int) -> np.ndarray:
    return -np.log(np.arange(1, k + 1, dtype=float))


def offset_functional(t, r: float, k: int | None = None) -> np.ndarray | float:
    """The inverse line fit on the offset scale.

    I_r(t) = tbar + (r - abar) * B(t)/A(t) with a_j = -log j,
    A(t) = sum (a_j - abar)(t_j - tbar), B(t) = sum (t_j - tbar)^2.
    ``t`` may be a single offset vector or a (trials, k) matrix.
    """
    t = np.atleast_2d(np.asarray(t, dtype=float))
    if k is None:
        k = t.shape[1]
    a = _nominal_offsets(k)
    abar = a.mean()
    tbar = t.mean(axis=1, keepdims=True)
    d = t - tbar
    A = np.sum((a - abar) * d, axis=1)
    if np.any(A == 0.0):
        raise ZeroDivisionError("degenerate offset vector: A(t) = 0")
    B = np.sum(d * d, axis=1)
    out = tbar[:, 0] + (r - abar) * B / A
    return out if out.size > 1 else float(out[0])


def offset_functional_derivative(t, v, r: float) -> float:
    """Directional derivative of the offset functional at t along v."""
    t = np.asarray(t, dtype=float)
    v = np.asarray(v, dtype=float)
    k = t.size
    a = _nominal_offsets(k)
    abar = a.mean()
    tbar = t.mean()
    vbar = v.mean()
    dt = t - tbar
    dv = v - vbar
    A = np.sum((a - abar) * dt)
    if A == 0.0:
        raise ZeroDivisionError("degenerate offset vector: A(t) = 0")
    B = np.sum(dt * dt)
    num = 2.0 * A * np.sum(dt * dv) - B * np.sum((a - abar) * dv)
    return float(vbar + (r - abar) * num / (A * A))


def rank_coefficient_mc(
    k: int,
    R: float,
    trials: int,
    rng: np.random.Generator,
) -> dict:
    """Monte Carlo evaluation of the limiting rank-bias coefficients.

    Returns b_inv (mean gap to the realized deploy maximum, in q' units)
    and b_inv_tilde (mean gap to the population one-in-N quantile), each
    with a standard error. The law depends only on (k, R).
    """
    if trials < 1:
        raise ValueError("trials must be >= 1")
    if R <= 1:
        raise ValueError("deployment ratio R must exceed 1")
    r = math.log(R)
    total = 0.0
    total_sq = 0.0
    done = 0
    chunk = max(1, _MC_CHUNK // k)
    while done < trials:
        n = min(chunk, trials - done)
        e = rng.exponential(size=(n, k))
        g = np.cumsum(e, axis=1)
        t = -np.log(g)
        vals = offset_functional(t, r, k) - r
        vals = np.atleast_1d(vals)
        total += vals.sum()
        total_sq += np.dot(vals, vals)
        done += n
    mean = total / trials
    var = max(total_sq / trials - mean * mean, 0.0)
    se = math.sqrt(var / trials)
    return {
        "b_inv": mean - EULER_GAMMA,
        "b_inv_tilde": mean,
        "se": se,
        "trials": trials,
        "k": k,
        "R": R,
    }


def nominal_curvature_coefficient(k: int, r: float) -> float:
    """D I_r(a)[a^2] - r^2: the line-through-a extrapolation error on u^2.

    Negative for r >= 0; multiplied by q''(y)/2 it gives the curvature
    component of the decomposition.
    """
    if k < 2:
        raise ValueError("k must be >= 2")
    if r < 0:
        raise ValueError("r must be >= 0")
    a = _nominal_offsets(k)
    return offset_functional_derivative(a, a * a, r) - r * r


def occupancy_probability(m: int, N: int, eps: float) -> tuple[float, float]:
    """P[rare mode absent from the m fit draws, present in N deploy draws].

    Returns (exact, approx): the exact binomial form
    (1-eps)^m (1 - (1-eps)^N) and the Poisson-style approximation
    exp(-m eps)(1 - exp(-N eps)).
    """
    if not (0.0 <= eps < 1.0):
        raise ValueError("eps must lie in [0, 1)")
    if eps == 0.0 or N == 0:
        return 0.0, 0.0
    exact = (1.0 - eps) ** m * (1.0 - (1.0 - eps) ** N)
    approx = math.exp(-m * eps) * (1.0 - math.exp(-N * eps))
    return exact, approx


def estimator_error_mc(
    dist: TailDistribution,
    m: int,
    N: int,
    k: int,
    trials: int,
    rng: np.random.Generator,
    target: str = "realized_max",
) -> tuple[float, float]:
    """Mean error of the full inverse-OLS forecaster, with standard error.

    Per trial: draw the top-k order statistics of an m-sample, fit the
    Weibull-position OLS line, invert it at the deepest deploy rank, and
    subtract either the realized maximum of an independent N-sample
    (``realized_max``) or the population one-in-N quantile
    (``population_quantile``). Order statistics are drawn by their exact
    joint law rather than by materializing all m (resp. N) scores; the
    test suite checks the two routes agree in distribution.
    """
    if not (k <= m < N):
        raise ValueError("need k <= m < N")
    if target not in ("realized_max", "population_quantile"):
        raise ValueError(f"unknown target {target!r}")
    log_s = np.log(plotting_positions(m, k, PlottingScheme.WEIBULL))
    ls_bar = log_s.mean()
    if target == "population_quantile":
        target_value = dist.quantile_curve(math.log(N)).q
        depth = math.log(N)
    else:
        depth = float(deploy_depths(N, PlottingScheme.WEIBULL, ranks=[1])[0])
    total = 0.0
    total_sq = 0.0
    done = 0
    chunk = max(1, min(_MC_CHUNK // max(k, 1), trials))
    while done < trials:
        n = min(chunk, trials - done)
        x = dist.sample_topk(m, k, rng, size=n)
        xb = x.mean(axis=1, keepdims=True)
        dx = x - xb
        sxx = np.sum(dx * dx, axis=1)
        a = np.sum(dx * (log_s - ls_bar), axis=1) / sxx
        b = ls_bar - a * xb[:, 0]
        pred = -(depth + b) / a
        if target == "realized_max":
            err = pred - dist.sample_max(N, rng, size=n)
        else:
            err = pred - target_value
        total += err.sum()
        total_sq += np.dot(err, err)
        done += n
    mean = total / trials
    var = max(total_sq / trials - mean * mean, 0.0)
    return mean, math.sqrt(var / trials)


def local_quadratic_fit(
    sorted_scores,
    y_target: float,
    delta: float = 0.5,
) -> tuple[float, float, int]:
    """Estimate (q'(y), q''(y)) from order statistics near depth y_target.

    Fits a least-squares quadratic of score on Weibull plotting depth over
    the window [y_target - delta, y_target + delta]; needs at least 5
    order statistics in the window. Returns (q1_hat, q2_hat, count).
    """
    scores = np.asarray(sorted_scores, dtype=float)
    n = scores.size
    depths = np.log((n + 1.0) / np.arange(1, n + 1, dtype=float))
    mask = np.abs(depths - y_target) <= delta
    count = int(mask.sum())
    if count < 5:
        raise ValueError(
            f"only {count} order statistics within +-{delta} of depth {y_target}"
        )
    u = depths[mask] - y_target
    coef = np.polynomial.polynomial.polyfit(u, scores[mask], 2)
    return float(coef[1]), float(2.0 * coef[2]), count


@dataclass
class DecompositionReport:
    """Forecast-error components in q'(y_M) units (and raw score units)."""

    rank: float
    curvature: float
    occupancy: float
    residual: float
    empirical_total: float
    q1_hat: float
    q2_hat: float
    standard_errors: dict = field(default_factory=dict)
    M: int = 0
    N: int = 0
    k: int = 0
    delta: float = 0.5

    def score_units(self) -> dict:
        return {
            name: getattr(self, name) * self.q1_hat
            for name in ("rank", "curvature", "occupancy", "residual", "empirical_total")
        }

    def closure_gap(self) -> float:
        return self.rank + self.curvature - self.occupancy + self.residual - self.empirical_total


def _occupancy_component(dist: Mixture, m: int, N: int, trials: int, rng) -> tuple[float, float]:
    """Occupancy term in raw score units, with a standard error.

    E[(rare deploy max - bulk deploy max)_+ ; rare absent from fit,
    present in deploy], by Monte Carlo over the rare occupancy counts.
    """
    p_hidden, _ = occupancy_probability(m, N, dist.eps)
    if p_hidden == 0.0:
        return 0.0, 0.0
    # condition on at least one rare deploy draw
    L = rng.binomial(N, dist.eps, size=trials)
    L = np.maximum(L, 1)
    rare_max = np.asarray(dist.rare.isf(rng.beta(1.0, L)), dtype=float)
    bulk_max = np.asarray(dist.bulk.isf(rng.beta(1.0, np.maximum(N - L, 1))), dtype=float)
    gap = np.maximum(rare_max - bulk_max, 0.0)
    mean_gap = float(gap.mean())
    se_gap = float(gap.std(ddof=1) / math.sqrt(trials)) if trials > 1 else 0.0
    return p_hidden * mean_gap, p_hidden * se_gap


def empirical_decomposition(
    source,
    M: int,
    N: int,
    k: int,
    trials: int,
    rng: np.random.Generator,
    delta: float = 0.5,
    sampler: str = "with_replacement",
    rank_trials: int = 1_000_000,
) -> DecompositionReport:
    """Decompose the forecaster's mean error at the (M, N, k) cell.

    ``source`` is either a TailDistribution or an array of raw scores.
    With score input the fit/deploy resampling uses the requested
    ``sampler`` ('with_replacement' or 'partition_permutation') and the
    occupancy component is folded into the residual (the mixture
    structure is unknown for raw data).
    """
    r = math.log(N / M)
    is_dist = isinstance(source, TailDistribution)

    # q', q'' at the fit-side anchor: exact for a known distribution,
    # local order-statistic quadratic for raw score input
    if is_dist:
        pt = source.quantile_curve(math.log(M))
        q1_hat, q2_hat, window = pt.q1, pt.q2, 0
    else:
        ref = np.sort(np.asarray(source, dtype=float))[::-1]
        q1_hat, q2_hat, window = local_quadratic_fit(ref, math.log(M), delta)

    rank_mc = rank_coefficient_mc(k, N / M, rank_trials, rng)
    rank = rank_mc["b_inv"]
    curvature = nominal_curvature_coefficient(k, r) * q2_hat / (2.0 * q1_hat)

    if is_dist and isinstance(source, Mixture):
        occ_raw, occ_se_raw = _occupancy_component(source, M, N, max(trials, 10_000), rng)
        occupancy = occ_raw / q1_hat
        occ_se = occ_se_raw / q1_hat
    else:
        occupancy = 0.0
        occ_se = 0.0

    if is_dist:
        total_raw, total_se_raw = estimator_error_mc(source, M, N, k, trials, rng)
    else:
        total_raw, total_se_raw = _resampled_error(ref, M, N, k, trials, rng, sampler)
    empirical_total = total_raw / q1_hat
    total_se = total_se_raw / q1_hat

    residual = empirical_total - rank - curvature + occupancy
    return DecompositionReport(
        rank=rank,
        curvature=curvature,
        occupancy=occupancy,
        residual=residual,
        empirical_total=empirical_total,
        q1_hat=q1_hat,
        q2_hat=q2_hat,
        standard_errors={
            "rank": rank_mc["se"],
            "occupancy": occ_se,
            "empirical_total": total_se,
            "window_count": window,
        },
        M=M, N=N, k=k, delta=delta,
    )


def _resampled_error(scores_desc, M, N, k, trials, rng, sampler) -> tuple[float, float]:
    """Whole-estimator mean error by resampling a raw score array."""
    scores = np.asarray(scores_desc, dtype=float)
    n = scores.size
    if sampler == "partition_permutation" and n < M + N:
        raise ValueError(f"partition_permutation needs at least M+N={M + N} scores, got {n}")
    if sampler not in ("with_replacement", "partition_permutation"):
        raise ValueError(f"unknown sampler {sampler!r}")
    log_s = np.log(plotting_positions(M, k, PlottingScheme.WEIBULL))
    ls_bar = log_s.mean()
    depth = float(deploy_depths(N, PlottingScheme.WEIBULL, ranks=[1])[0])
    errs = np.empty(trials)
    for t in range(trials):
        if sampler == "with_replacement":
            fit = scores[rng.integers(0, n, size=M)]
            dep = scores[rng.integers(0, n, size=N)]
        else:
            idx = rng.permutation(n)[: M + N]
            fit = scores[idx[:M]]
            dep = scores[idx[M:]]
        topk = -np.partition(-fit, k - 1)[:k]
        topk.sort()
        topk = topk[::-1]
        xb = topk.mean()
        dx = topk - xb
        sxx = np.dot(dx, dx)
        if sxx == 0.0:
            raise ZeroDivisionError("tied top-k scores in resampled fit set")
        a = np.dot(dx, log_s - ls_bar) / sxx
        b = ls_bar - a * xb
        errs[t] = -(depth + b) / a - dep.max()
    return float(errs.mean()), float(errs.std(ddof=1) / math.sqrt(trials)) if trials > 1 else 0.0


def k_sweep(
    source,
    M: int,
    R: float,
    k_list,
    trials: int,
    rng: np.random.Generator,
    delta: float = 0.5,
) -> list[dict]:
    """Mean forecaster error in q'(y_M) units for each k at fixed R."""
    N = int(round(R * M))
    if max(k_list) > M:
        raise ValueError("max k exceeds fit size M")
    is_dist = isinstance(source, TailDistribution)
    if is_dist:
        q1_hat = source.quantile_curve(math.log(M)).q1
        ref = None
    else:
        ref = np.sort(np.asarray(source, dtype=float))[::-1]
        q1_hat, _, _ = local_quadratic_fit(ref, math.log(M), delta)
    out = []
    for k in k_list:
        if is_dist:
            mean, se = estimator_error_mc(source, M, N, k, trials, rng)
        else:
            mean, se = _resampled_error(ref, M, N, k, trials, rng, "with_replacement")
        out.append({"k": int(k), "mean_qprime": mean / q1_hat, "se_qprime": se / q1_hat})
    return out


def hazard_diagnostic(scores, grid) -> dict:
    """Histogram, empirical survival, and finite-difference log hazard.

    The hazard is estimated kernel-free as the slope of the empirical
    cumulative hazard -log S between adjacent grid points.
    """
    x = np.asarray(scores, dtype=float)
    g = np.asarray(grid, dtype=float)
    if g.size < 2:
        raise ValueError("grid must contain at least 2 points")
    if x.size < 1000:
        raise ValueError("need at least 1000 scores for a stable hazard estimate")
    xs = np.sort(x)
    surv = 1.0 - np.searchsorted(xs, g, side="right") / x.size
    hist, _ = np.histogram(x, bins=g)
    with np.errstate(divide="ignore"):
        H = -np.log(surv)
    mid = 0.5 * (g[:-1] + g[1:])
    dH = np.diff(H) / np.diff(g)
    with np.errstate(divide="ignore", invalid="ignore"):
        log_h = np.log(dH)
    return {
        "grid": g,
        "survival": surv,
        "histogram": hist,
        "hazard_mid": mid,
        "log_hazard": log_h,
    }


def split_mismatch(fit_scores, deploy_scores, depth: float, delta: float = 0.5) -> float:
    """Gap between fit-side and deploy-side tail quantiles at a depth.

    Positive values mean the fit side sits above the deploy side there
    (asymmetric training signature). Falls back to the empirical quantile
    at survival e^{-depth} when a side is too small for the
    local-quadratic window.
    """
    return _side_quantile(fit_scores, depth, delta) - _side_quantile(deploy_scores, depth, delta)


def _side_quantile(scores, depth, delta) -> float:
    x = np.sort(np.asarray(scores, dtype=float))[::-1]
    if x.size == 0:
        raise ValueError("empty score sample")
    try:
        q1, q2, _ = local_quadratic_fit(x, depth, delta)
        # quadratic is centered at the target depth: constant term is q(depth)
        n = x.size
        depths = np.log((n + 1.0) / np.arange(1, n + 1, dtype=float))
        mask = np.abs(depths - depth) <= delta
        u = depths[mask] - depth
        coef = np.polynomial.polynomial.polyfit(u, x[mask], 2)
        return float(coef[0])
    except ValueError:
        # empirical quantile at survival e^{-depth}
        p = math.exp(-depth)
        if p * x.size < 1.0:
            raise ValueError("sample too small for the requested depth") from None
        return float(np.quantile(x, 1.0 - p))
