"""The tail-quantile OLS forecaster.

Fits a line to log survival versus score over the top-k order statistics
of a fit sample and inverts it at deployment-scale log-survival depths.
Includes plotting-position schemes, the double-log probability transform,
extrapolated-rank selection, rank weightings, and per-rank forecast
errors.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np

__all__ = [
    "PlottingScheme",
    "ScoreTransform",
    "RankWeighting",
    "TailFit",
    "plotting_positions",
    "fit_tail",
    "predict_quantile",
    "extrapolated_ranks",
    "rank_weights",
    "forecast_errors",
    "read_score_file",
    "write_score_file",
]


class PlottingScheme(enum.Enum):
    """Survival-probability estimator for the i-th largest of M scores."""

    EMPIRICAL = "empirical"     # i / M
    WEIBULL = "weibull"         # i / (M + 1)
    HAZEN = "hazen"             # (i - 0.5) / M
    GRINGORTEN = "gringorten"   # (i - 0.44) / (M + 0.12)

    def positions(self, M: int, k: int) -> np.ndarray:
        i = np.arange(1, k + 1, dtype=float)
        if self is PlottingScheme.EMPIRICAL:
            return i / M
        if self is PlottingScheme.WEIBULL:
            return i / (M + 1.0)
        if self is PlottingScheme.HAZEN:
            return (i - 0.5) / M
        return (i - 0.44) / (M + 0.12)


class ScoreTransform(enum.Enum):
    """Score-space transform applied before fitting."""

    IDENTITY = "identity"
    GUMBEL_PROB = "gumbel_prob"  # psi = -log(-log p), for probability scores

    def forward(self, x):
        if self is ScoreTransform.IDENTITY:
            return np.asarray(x, dtype=float)
        p = np.asarray(x, dtype=float)
        if np.any((p <= 0.0) | (p >= 1.0)):
            raise ValueError("gumbel_prob transform requires 0 < p < 1")
        return -np.log(-np.log(p))

    def inverse(self, psi):
        if self is ScoreTransform.IDENTITY:
            return np.asarray(psi, dtype=float)
        return np.exp(-np.exp(-np.asarray(psi, dtype=float)))

    def inverse_log(self, psi):
        """log of the inverse transform; exact for tiny probabilities."""
        if self is ScoreTransform.IDENTITY:
            return np.asarray(psi, dtype=float)
        return -np.exp(-np.asarray(psi, dtype=float))


class RankWeighting(enum.Enum):
    """Prior over deployment sizes, expressed as weights over ranks."""

    RANK_UNIFORM = "rank_uniform"
    DEPLOY_LOG_UNIFORM = "deploy_log_uniform"
    DEPLOY_UNIFORM = "deploy_uniform"


class LossSpace(enum.Enum):
    TRANSFORMED = "transformed"
    INVERSE_TRANSFORMED = "inverse_transformed"


@dataclass(frozen=True)
class TailFit:
    """OLS line log S = a * psi + b over the top-k transformed scores."""

    a: float
    b: float
    k: int
    M: int
    scheme: PlottingScheme
    transform: ScoreTransform
    fit_depth_max: float

    def as_record(self) -> dict:
        return {
            "a": self.a,
            "b": self.b,
            "k": self.k,
            "M": self.M,
            "scheme": self.scheme.value,
            "transform": self.transform.value,
            "fit_depth_max": self.fit_depth_max,
        }


class TiedScoresError(ValueError):
    """Top-k scores are tied after transform; the OLS fit is degenerate."""


class EmptyRankSetError(ValueError):
    """No deploy rank lies beyond the fit-side log-survival range."""


def plotting_positions(M: int, k: int, scheme: PlottingScheme = PlottingScheme.WEIBULL) -> np.ndarray:
    """Survival estimates S_hat_1..S_hat_k for the top-k of M scores."""
    if not (2 <= k <= M):
        raise ValueError(f"need 2 <= k <= M, got k={k}, M={M}")
    return scheme.positions(M, k)


def fit_tail(
    topk_scores,
    M: int,
    scheme: PlottingScheme = PlottingScheme.WEIBULL,
    transform: ScoreTransform = ScoreTransform.IDENTITY,
) -> TailFit:
    """OLS of log plotting position on transformed score over the top-k.

    ``topk_scores`` must be in descending order; ties raise rather than
    being silently perturbed, since the estimator assumes no ties at the
    relevant order statistics.
    """
    psi = transform.forward(np.asarray(topk_scores, dtype=float))
    k = psi.size
    if k < 2:
        raise ValueError("need at least 2 scores")
    if np.any(np.diff(psi) >= 0):
        if np.any(np.diff(psi) == 0):
            raise TiedScoresError("tied scores among the top-k")
        raise ValueError("scores must be strictly descending")
    if not np.all(np.isfinite(psi)):
        raise ValueError("non-finite transformed score")
    log_s = np.log(plotting_positions(M, k, scheme))
    a, b = _ols(psi, log_s)
    if np.isclose(a, 0.0):
        raise ValueError("degenerate fit: zero slope")
    return TailFit(
        a=a, b=b, k=k, M=M, scheme=scheme, transform=transform,
        fit_depth_max=float(-log_s[0]),
    )


def _ols(x: np.ndarray, y: np.ndarray) -> tuple[float, float]:
    xb = x.mean()
    yb = y.mean()
    sxx = np.sum((x - xb) ** 2)
    if sxx == 0.0:
        raise TiedScoresError("zero variance in regressor")
    a = float(np.sum((x - xb) * (y - yb)) / sxx)
    return a, float(yb - a * xb)


def predict_quantile(fit: TailFit, n: float) -> float:
    """Predicted transformed score at the one-in-n survival level."""
    if n <= 1:
        raise ValueError("deployment size n must exceed 1")
    return predict_at_depth(fit, math.log(n))


def predict_at_depth(fit: TailFit, y) -> np.ndarray | float:
    """Invert the fitted line at log-survival depth y: psi = -(y + b)/a."""
    if fit.a >= 0:
        raise ValueError("fit slope must be negative")
    return -(np.asarray(y, dtype=float) + fit.b) / fit.a


def deploy_depths(N: int, scheme: PlottingScheme = PlottingScheme.WEIBULL, ranks=None) -> np.ndarray:
    """Log-survival depths y_j = -log S_hat_j on the deploy side."""
    if ranks is None:
        ranks = np.arange(1, N + 1)
    i = np.asarray(ranks, dtype=float)
    if scheme is PlottingScheme.EMPIRICAL:
        s = i / N
    elif scheme is PlottingScheme.WEIBULL:
        s = i / (N + 1.0)
    elif scheme is PlottingScheme.HAZEN:
        s = (i - 0.5) / N
    else:
        s = (i - 0.44) / (N + 0.12)
    return -np.log(s)


def extrapolated_ranks(
    M: int,
    N: int,
    k: int,
    scheme: PlottingScheme = PlottingScheme.WEIBULL,
) -> np.ndarray:
    """Deploy ranks whose depth exceeds the deepest fit-side depth.

    These are the ranks where the OLS line genuinely extrapolates beyond
    the fit sample's resolvable log-survival range.
    """
    if N <= M:
        raise EmptyRankSetError(f"deploy size N={N} must exceed fit size M={M}")
    fit_depth_max = -math.log(float(scheme.positions(M, 2)[0]))
    depths = deploy_depths(N, scheme)
    j = np.flatnonzero(depths > fit_depth_max) + 1
    if j.size == 0:
        raise EmptyRankSetError("no deploy rank beyond the fit-side range")
    return j


def rank_weights(J, N: int, weighting: RankWeighting = RankWeighting.DEPLOY_LOG_UNIFORM) -> np.ndarray:
    """Normalized weights over the extrapolated rank set J."""
    j = np.asarray(J, dtype=float)
    if j.size == 0:
        raise ValueError("empty rank set")
    if weighting is RankWeighting.RANK_UNIFORM:
        w = np.ones_like(j)
    elif weighting is RankWeighting.DEPLOY_LOG_UNIFORM:
        # rank j covers deployment sizes between N/(j+1) and N/j: width log((j+1)/j)
        w = np.log((j + 1.0) / j)
    else:
        w = 1.0 / (j * j)
    return w / w.sum()


def forecast_errors(
    fit: TailFit,
    deploy_scores,
    J,
    weighting: RankWeighting = RankWeighting.DEPLOY_LOG_UNIFORM,
    loss_space: LossSpace = LossSpace.TRANSFORMED,
    scheme: PlottingScheme = PlottingScheme.WEIBULL,
) -> tuple[np.ndarray, float]:
    """Per-rank residuals Qhat(y_j) - Y^(j) and the weighted squared loss.

    ``deploy_scores`` must be descending raw scores of the deployment
    sample. With ``loss_space=INVERSE_TRANSFORMED`` both the prediction
    and the observation are mapped back through the inverse transform
    (on the log scale for the probability transform) before subtracting.
    """
    scores = np.asarray(deploy_scores, dtype=float)
    j = np.asarray(J, dtype=int)
    if scores.size < j.max():
        raise ValueError("deploy sample smaller than the deepest requested rank")
    y = deploy_depths(scores.size, scheme, ranks=j)
    pred = predict_at_depth(fit, y)
    obs = fit.transform.forward(scores[j - 1])
    if loss_space is LossSpace.INVERSE_TRANSFORMED:
        pred = fit.transform.inverse_log(pred)
        obs = fit.transform.inverse_log(obs)
    residuals = pred - obs
    if not np.all(np.isfinite(residuals)):
        raise ValueError("non-finite forecast residual")
    w = rank_weights(j, scores.size, weighting)
    return residuals, float(np.sum(w * residuals**2))


def read_score_file(path) -> np.ndarray:
    """One score per line; '#' comments and blank lines ignored."""
    values = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.split("#", 1)[0].strip()
            if line:
                values.append(float(line))
    return np.asarray(values, dtype=float)


def write_score_file(path, scores) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for s in np.asarray(scores, dtype=float):
            fh.write(f"{float(s)}\n")
