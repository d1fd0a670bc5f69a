"""Forecastability fine-tuning: the meta-multi-task training loop.

Trains a model so that the tail-quantile line fitted on a small fit
sample of its own risk scores extrapolates accurately to the deployment
sample. Each step draws fresh random (fit, deploy) partitions of per-pool
task unions, scores a partition-invariant union top-C cache with
gradients (lazily falling back to the uncached fit side when the cache
holds fewer than k fit scores), fits the tail line differentiably, and
descends the weighted squared per-rank forecast error plus a primary-
objective regularizer. Improving-only straight-through masks restrict
gradient flow to contributions that also reduce the underlying scores.
"""

from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from . import autodiff as ad
from .autodiff import Node
from .forecaster import (
    LossSpace,
    PlottingScheme,
    RankWeighting,
    ScoreTransform,
    TiedScoresError,
    extrapolated_ranks,
    rank_weights,
)

__all__ = [
    "IogScope",
    "MetaRunConfig",
    "PartitionCache",
    "RunTrace",
    "TaskPair",
    "RegretScorer",
    "partition",
    "refresh_cache",
    "coverage_analysis",
    "deploy_side_mask",
    "fit_side_gradient",
    "fit_side_mask",
    "forecast_loss",
    "meta_step",
    "run_finetune",
    "evaluate_pair",
    "NonFiniteLossError",
]


class IogScope(enum.Enum):
    """Where improving-only gradient masks apply."""

    NONE = "none"
    FIT_ONLY = "fit_only"
    DEPLOY_ONLY = "deploy_only"
    BOTH = "both"


class NonFiniteLossError(RuntimeError):
    """Training loss became NaN/inf; carries the trace accumulated so far."""

    def __init__(self, message: str, trace: "RunTrace"):
        super().__init__(message)
        self.trace = trace


@dataclass
class MetaRunConfig:
    """Hyperparameters of the fine-tuning loop."""

    M: int = 96
    N: int = 1920
    k: int = 10
    C: int = 296
    rho: int = 5
    n_perm: int = 1
    steps: int = 300
    lr: float = 1e-4
    lam: float = 1.0
    pools_per_step: int = 10
    eval_every: int = 10
    weighting: RankWeighting = RankWeighting.DEPLOY_LOG_UNIFORM
    transform: ScoreTransform = ScoreTransform.IDENTITY
    loss_space: LossSpace = LossSpace.TRANSFORMED
    scheme: PlottingScheme = PlottingScheme.WEIBULL
    iog_scope: IogScope = IogScope.BOTH
    clip: float = 1.0
    weight_decay: float = 0.0
    reg_batch: int = 16
    reg_scale: float = -1.5

    def __post_init__(self):
        if self.C < self.k:
            raise ValueError("cache size C must be at least k")
        if self.n_perm < 0:
            raise ValueError("n_perm must be >= 0")
        if self.M < 2 or self.N <= self.M:
            raise ValueError("need 2 <= M < N")

    @property
    def pool_size(self) -> int:
        return self.M + self.N

    def as_dict(self) -> dict:
        out = {}
        for key, val in vars(self).items():
            out[key] = val.value if isinstance(val, enum.Enum) else val
        return out


@dataclass
class PartitionCache:
    """Partition-invariant union top-C cache."""

    cached_indices: np.ndarray
    last_refresh_step: int
    C: int
    rho: int

    def __contains__(self, idx: int) -> bool:
        return idx in self._set()

    def _set(self):
        if not hasattr(self, "_idx_set"):
            self._idx_set = frozenset(int(i) for i in self.cached_indices)
        return self._idx_set


@dataclass
class RunTrace:
    """Append-only per-step and per-pair records of a training run."""

    step_records: list = field(default_factory=list)
    pair_records: list = field(default_factory=list)

    def log_step(self, **fields) -> None:
        self.step_records.append(dict(fields))

    def log_pair(self, **fields) -> None:
        self.pair_records.append(dict(fields))

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for rec in self.step_records:
                fh.write(json.dumps({"kind": "step", **rec}) + "\n")
            for rec in self.pair_records:
                fh.write(json.dumps({"kind": "pair", **rec}) + "\n")

    @classmethod
    def load(cls, path) -> "RunTrace":
        trace = cls()
        with open(path, "r", encoding="utf-8") as fh:
            for line in fh:
                rec = json.loads(line)
                kind = rec.pop("kind")
                (trace.step_records if kind == "step" else trace.pair_records).append(rec)
        return trace


@dataclass(frozen=True)
class TaskPair:
    """A fixed (fit, deploy) split, used for held-out evaluation."""

    fit_tasks: tuple
    deploy_tasks: tuple

    @property
    def union(self) -> tuple:
        return self.fit_tasks + self.deploy_tasks


# ---------------------------------------------------------------------------
# partitioning, cache, coverage
# ---------------------------------------------------------------------------

def partition(pool_size: int, M: int, rng: np.random.Generator):
    """Uniform random disjoint (fit, deploy) index split of sizes (M, rest)."""
    if not (1 <= M < pool_size):
        raise ValueError(f"need 1 <= M < pool size, got M={M}, pool={pool_size}")
    perm = rng.permutation(pool_size)
    return np.sort(perm[:M]), np.sort(perm[M:])


def refresh_cache(scores: np.ndarray, C: int, step: int, rho: int) -> PartitionCache:
    """Top-C indices by score, descending, with index tiebreak."""
    scores = np.asarray(scores, dtype=float)
    if C < 1:
        raise ValueError("C must be >= 1")
    n = scores.size
    order = np.lexsort((np.arange(n), -scores))
    return PartitionCache(cached_indices=order[: min(C, n)],
                          last_refresh_step=step, C=C, rho=rho)


def coverage_analysis(C: int, M: int, N: int, k: int):
    """Exact hypergeometric cache-miss analysis.

    With X = |fit-side cached points| ~ Hypergeom(M+N, C, M), returns
    (Pr[X < k], E[M - X | X < k], Pr[X < k] * E[M - X | X < k]) — the
    miss probability, the conditional extra-evaluation cost of the
    lazy-fit fallback, and its unconditional per-step expectation.
    """
    if C > M + N:
        raise ValueError("C must not exceed the pool size")
    if k <= 0:
        return 0.0, 0.0, 0.0
    dist = stats.hypergeom(M + N, C, M)
    x = np.arange(max(0, M + C - (M + N)), min(k, min(C, M) + 1))
    if x.size == 0:
        return 0.0, 0.0, 0.0
    pmf = dist.pmf(x)
    miss = float(pmf.sum())
    extra = float(np.sum((M - x) * pmf))
    cond = extra / miss if miss > 0 else 0.0
    return miss, cond, extra


# ---------------------------------------------------------------------------
# improving-only masks
# ---------------------------------------------------------------------------

def deploy_side_mask(residuals: np.ndarray) -> np.ndarray:
    """Active deploy ranks: those the fitted line currently under-predicts.

    Residuals are predicted minus observed; a negative residual means the
    line sits below the realized score, so pushing the score down closes
    the gap from the score side.
    """
    return np.asarray(residuals, dtype=float) < 0.0


def fit_side_gradient(
    psi: np.ndarray,
    fit_log_pos: np.ndarray,
    deploy_log_pos: np.ndarray,
    residuals: np.ndarray,
    weights: np.ndarray,
    a: float,
) -> np.ndarray:
    """Closed-form d(forecast loss)/d(psi_i) through the OLS coefficients.

    All log positions are log-survival values (non-positive); ``a`` is
    the OLS slope of fit_log_pos on psi and the loss is the weighted sum
    of squared per-rank residuals (predicted minus observed).
    """
    psi = np.asarray(psi, dtype=float)
    k = psi.size
    psi_bar = psi.mean()
    y_bar = float(np.mean(fit_log_pos))
    s_pp = float(np.sum((psi - psi_bar) ** 2))
    if s_pp == 0.0:
        raise TiedScoresError("zero variance in fit scores")
    r_w = np.asarray(weights, dtype=float) * np.asarray(residuals, dtype=float)
    c1 = -float(np.sum(r_w * (np.asarray(deploy_log_pos) - y_bar))) / (a * a * s_pp)
    c2 = 2.0 / k * float(np.sum(r_w))
    return 2.0 * c1 * ((fit_log_pos - y_bar) - 2.0 * a * (psi - psi_bar)) + c2


def fit_side_mask(psi, fit_log_pos, deploy_log_pos, residuals, weights, a) -> np.ndarray:
    """Active fit points: loss descent along psi_i also lowers psi_i."""
    return fit_side_gradient(psi, fit_log_pos, deploy_log_pos,
                             residuals, weights, a) > 0.0


# ---------------------------------------------------------------------------
# differentiable forecast loss
# ---------------------------------------------------------------------------

def _transform_node(scores: Node, transform: ScoreTransform) -> Node:
    if transform is ScoreTransform.IDENTITY:
        return scores
    return ad.neg(ad.log(ad.neg(ad.log(scores))))


def _inverse_log_node(psi: Node, transform: ScoreTransform) -> Node:
    if transform is ScoreTransform.IDENTITY:
        return psi
    return ad.neg(ad.exp(ad.neg(psi)))


def forecast_loss(
    fit_scores: Node,
    deploy_scores: Node,
    config: MetaRunConfig,
):
    """Weighted squared forecast error over the extrapolated ranks.

    ``fit_scores`` holds the top-k fit-side raw scores in strictly
    descending order; ``deploy_scores`` holds the deploy-side order
    statistics at the extrapolated ranks, descending. Both are graph
    nodes, so the loss is differentiable through the OLS fit, the
    inversion at deployment depths, and the observed order statistics.
    Masks (per ``config.iog_scope``) are straight-through: they change
    gradients only, never the forward value. Returns (loss node,
    diagnostics dict).
    """
    M, N, k = config.M, config.N, config.k
    J = extrapolated_ranks(M, N, k, config.scheme)
    if deploy_scores.value.size != J.size:
        raise ValueError(f"expected {J.size} deploy order statistics, got {deploy_scores.value.size}")
    if fit_scores.value.size != k:
        raise ValueError(f"expected {k} fit scores, got {fit_scores.value.size}")
    if np.any(np.diff(fit_scores.value) > 0) or np.any(np.diff(deploy_scores.value) > 0):
        raise ValueError("scores must be given in descending rank order")
    if np.any(np.diff(fit_scores.value) == 0):
        raise TiedScoresError("tied scores among the top-k")

    fit_log_pos = np.log(config.scheme.positions(M, k))       # log-survival, <= 0
    dep_log_pos = -_deploy_depths(J, N, config.scheme)        # log-survival
    w = rank_weights(J, N, config.weighting)

    psi = _transform_node(fit_scores, config.transform)
    obs = _transform_node(deploy_scores, config.transform)

    # detached pass for the mask decisions
    a_det, b_det = _ols_values(psi.value, fit_log_pos)
    pred_det = (dep_log_pos - b_det) / a_det
    res_det = pred_det - obs.value
    dep_active = deploy_side_mask(res_det)
    fit_active = fit_side_mask(psi.value, fit_log_pos, dep_log_pos, res_det, w, a_det)

    scope = config.iog_scope
    if scope in (IogScope.FIT_ONLY, IogScope.BOTH):
        psi = ad.mask_grad(psi, fit_active.astype(float))
    if scope in (IogScope.DEPLOY_ONLY, IogScope.BOTH):
        obs = ad.mask_grad(obs, dep_active.astype(float))

    a, b = _ols_nodes(psi, fit_log_pos)
    if a.value >= 0:
        raise ValueError("fit slope must be negative")
    pred = ad.div(ad.sub(ad.constant(dep_log_pos), b), a)
    if config.loss_space is LossSpace.INVERSE_TRANSFORMED:
        pred = _inverse_log_node(pred, config.transform)
        obs = _inverse_log_node(obs, config.transform)
    resid = ad.sub(pred, obs)
    loss = ad.sum_(ad.mul(ad.constant(w), ad.mul(resid, resid)))
    diag = {
        "slope": float(a.value),
        "intercept": float(b.value),
        "residuals": res_det,
        "fit_active": int(fit_active.sum()),
        "deploy_active": int(dep_active.sum()),
        "worst_rank_sq_error": float(res_det[0] ** 2),
    }
    return loss, diag


def _deploy_depths(J: np.ndarray, N: int, scheme: PlottingScheme) -> np.ndarray:
    i = np.asarray(J, dtype=float)
    if scheme is PlottingScheme.EMPIRICAL:
        s = i / N
    elif scheme is PlottingScheme.WEIBULL:
        s = i / (N + 1.0)
    elif scheme is PlottingScheme.HAZEN:
        s = (i - 0.5) / N
    else:
        s = (i - 0.44) / (N + 0.12)
    return -np.log(s)


def _ols_values(psi: np.ndarray, log_pos: np.ndarray):
    xb, yb = psi.mean(), log_pos.mean()
    sxx = float(np.sum((psi - xb) ** 2))
    if sxx == 0.0:
        raise TiedScoresError("zero variance in fit scores")
    a = float(np.sum((psi - xb) * (log_pos - yb)) / sxx)
    return a, yb - a * xb


def _ols_nodes(psi: Node, log_pos: np.ndarray):
    xbar = ad.mean_(psi)
    ybar = float(log_pos.mean())
    dx = ad.sub(psi, xbar)
    dy = ad.constant(log_pos - ybar)
    sxx = ad.sum_(ad.mul(dx, dx))
    a = ad.div(ad.sum_(ad.mul(dx, dy)), sxx)
    b = ad.sub(ad.constant(np.full((), ybar)), ad.mul(a, xbar))
    return a, b


# ---------------------------------------------------------------------------
# scoring
# ---------------------------------------------------------------------------

class RegretScorer:
    """Exact differentiable regret of a policy network on a task pool.

    Detached scoring runs in fixed-size chunks in pool order so results
    do not depend on how work is batched.

    The grid's layout space is finite, so a pool can hold the same
    layout twice and the two copies score byte-identically; the OLS fit
    refuses tied order statistics. Every score therefore carries a
    fixed position-indexed offset (1e-9 per pool slot, gradient-free)
    that separates exact duplicates while perturbing nothing at the
    scale of the regrets themselves.
    """

    TIE_BREAK = 1e-9

    def __init__(self, net, tasks, env=None, chunk: int = 512):
        from .gridworld import EnvParams, optimal_values

        self.net = net
        self.tasks = list(tasks)
        self.env = env or EnvParams()
        self.chunk = chunk
        self.offsets = self.TIE_BREAK * (1.0 + np.arange(len(self.tasks)))
        self.vstar = np.array([optimal_values(t, self.env)[0, t.start] for t in self.tasks])
        self.grad_evaluations = 0
        self.detached_evaluations = 0

    def __len__(self) -> int:
        return len(self.tasks)

    def all_detached(self) -> np.ndarray:
        return self.subset_detached(np.arange(len(self.tasks)))

    def subset_detached(self, indices) -> np.ndarray:
        from .gridworld import policy_values_batch

        indices = np.asarray(indices, dtype=int)
        out = np.empty(indices.size)
        for lo in range(0, indices.size, self.chunk):
            idx = indices[lo:lo + self.chunk]
            batch = [self.tasks[i] for i in idx]
            logits = self.net.forward(batch, frozen=True)
            vals = policy_values_batch(batch, self.env, logits)
            out[lo:lo + self.chunk] = self.vstar[idx] - vals.value
        self.detached_evaluations += int(indices.size)
        return out + self.offsets[indices]

    def subset_grad(self, indices) -> Node:
        from .gridworld import regret_batch

        indices = np.asarray(indices, dtype=int)
        batch = [self.tasks[i] for i in indices]
        logits = self.net.forward(batch)
        self.grad_evaluations += int(indices.size)
        scores = regret_batch(batch, self.env, logits, vstar=self.vstar[indices])
        return ad.add(scores, ad.constant(self.offsets[indices]))


# ---------------------------------------------------------------------------
# the meta step and the outer loop
# ---------------------------------------------------------------------------

def meta_step(
    scorer,
    cache: PartitionCache | None,
    config: MetaRunConfig,
    rng: np.random.Generator,
    step: int,
    fixed_split=None,
):
    """One inner step on one pool: cache upkeep, partitions, forecast loss.

    Returns (mean-over-partitions loss node, cache, diagnostics).
    With ``n_perm=0`` the fixed (fit, deploy) index split must be given.
    """
    pool_size = len(scorer)
    if pool_size != config.pool_size:
        raise ValueError(f"pool size {pool_size} != M+N={config.pool_size}")
    if cache is None or step % config.rho == 0:
        scores = scorer.all_detached()
        cache = refresh_cache(scores, config.C, step, config.rho)
    cache_set = cache._set()
    J = extrapolated_ranks(config.M, config.N, config.k, config.scheme)
    if config.C - config.M < J.size:
        raise ValueError("cache too small to cover the extrapolated deploy ranks")

    n_partitions = max(config.n_perm, 1)
    terms = []
    diags = []
    for _ in range(n_partitions):
        if config.n_perm >= 1:
            fit_idx, deploy_idx = partition(pool_size, config.M, rng)
        else:
            if fixed_split is None:
                raise ValueError("n_perm=0 requires a fixed (fit, deploy) split")
            fit_idx, deploy_idx = fixed_split
        fit_cached = np.array([i for i in fit_idx if int(i) in cache_set], dtype=int)
        lazy = fit_cached.size < config.k
        if lazy:
            extra = np.array([i for i in fit_idx if int(i) not in cache_set], dtype=int)
            E = np.concatenate([cache.cached_indices, extra])
        else:
            E = cache.cached_indices
        scored = scorer.subset_grad(E)
        pos_of = {int(i): p for p, i in enumerate(E)}

        # two-stage selection on detached values; unscored pool positions
        # simply never enter the candidate lists
        fit_cand = np.array([pos_of[int(i)] for i in fit_idx if int(i) in pos_of], dtype=int)
        dep_cand = np.array([pos_of[int(i)] for i in deploy_idx if int(i) in pos_of], dtype=int)
        vals = scored.value
        fit_order = fit_cand[np.lexsort((fit_cand, -vals[fit_cand]))][: config.k]
        dep_order = dep_cand[np.lexsort((dep_cand, -vals[dep_cand]))][: J.size]
        fit_scores = ad.take(scored, fit_order)
        dep_scores = ad.take(scored, dep_order)
        loss_p, diag = forecast_loss(fit_scores, dep_scores, config)
        diag["lazy_fallback"] = bool(lazy)
        diag["scored"] = int(E.size)
        terms.append(loss_p)
        diags.append(diag)

    total = terms[0]
    for t in terms[1:]:
        total = ad.add(total, t)
    total = ad.mul(total, ad.constant(np.full((), 1.0 / n_partitions)))
    step_diag = {
        "loss": float(total.value),
        "lazy_fallback_count": sum(d["lazy_fallback"] for d in diags),
        "fit_active": float(np.mean([d["fit_active"] for d in diags])),
        "deploy_active": float(np.mean([d["deploy_active"] for d in diags])),
        "partitions": diags,
    }
    return total, cache, step_diag


def evaluate_pair(scorer_fit, scorer_deploy, config: MetaRunConfig) -> dict:
    """Held-out metrics on one fixed (fit, deploy) pair, no gradients."""
    from .forecaster import LossSpace as _LS
    from .forecaster import fit_tail, forecast_errors

    fit_scores = np.sort(scorer_fit.all_detached())[::-1]
    dep_scores = np.sort(scorer_deploy.all_detached())[::-1]
    J = extrapolated_ranks(config.M, config.N, config.k, config.scheme)
    fit = fit_tail(fit_scores[: config.k], config.M, config.scheme, config.transform)
    residuals, weighted = forecast_errors(
        fit, dep_scores, J, config.weighting, config.loss_space, config.scheme)
    return {
        "weighted_forecast_loss": float(weighted),
        "worst_rank_sq_error": float(residuals[0] ** 2),
        "worst_rank_predicted": float(residuals[0] + fit.transform.forward(dep_scores[0])),
        "worst_rank_actual": float(fit.transform.forward(dep_scores[0])),
        "worst_deploy_regret": float(dep_scores[0]),
        "mean_deploy_regret": float(dep_scores.mean()),
        "slope": fit.a,
        "intercept": fit.b,
    }


def run_finetune(
    net,
    train_pools: list,
    held_out_pairs: list,
    pretrain_tasks: list,
    config: MetaRunConfig,
    rng: np.random.Generator,
    env=None,
):
    """Full outer loop; mutates ``net`` in place and returns (net, trace).

    ``train_pools`` are task unions of size M+N; ``held_out_pairs`` are
    fixed TaskPair splits that never contribute gradients;
    ``pretrain_tasks`` feed the return regularizer batch each step.
    """
    from .gridworld import EnvParams, policy_values_batch
    from .optim import AdamW

    if not train_pools:
        raise ValueError("need at least one training pool")
    env = env or EnvParams()
    scorers = [RegretScorer(net, pool, env) for pool in train_pools]
    held_scorers = [
        (RegretScorer(net, pair.fit_tasks, env), RegretScorer(net, pair.deploy_tasks, env))
        for pair in held_out_pairs
    ]
    opt = AdamW(net.params, lr=config.lr, weight_decay=config.weight_decay,
                clip=config.clip)
    caches: list[PartitionCache | None] = [None] * len(scorers)
    trace = RunTrace()

    def evaluate(step):
        for pid, (sf, sd) in enumerate(held_scorers):
            metrics = evaluate_pair(sf, sd, config)
            trace.log_pair(step=step, pair=pid, **metrics)

    if held_scorers:
        evaluate(-1)
    for t in range(config.steps):
        opt.zero_grad()
        n_pools = min(config.pools_per_step, len(scorers))
        chosen = np.sort(rng.choice(len(scorers), size=n_pools, replace=False))
        train_loss = 0.0
        lazy = 0
        for pid in chosen:
            loss_node, caches[pid], diag = meta_step(
                scorers[pid], caches[pid], config, rng, t)
            train_loss += diag["loss"] / n_pools
            lazy += diag["lazy_fallback_count"]
            ad.backward(ad.mul(loss_node, ad.constant(np.full((), 1.0 / n_pools))))
        reg_idx = rng.integers(0, len(pretrain_tasks), size=config.reg_batch)
        reg_batch = [pretrain_tasks[i] for i in reg_idx]
        reg_logits = net.forward(reg_batch)
        reg = ad.mul(ad.constant(np.full((), config.reg_scale)),
                     ad.mean_(policy_values_batch(reg_batch, env, reg_logits)))
        ad.backward(ad.mul(reg, ad.constant(np.full((), config.lam))))
        total = train_loss + config.lam * float(reg.value)
        trace.log_step(step=t, train_loss=train_loss, regularizer=float(reg.value),
                       total=total, lazy_fallbacks=lazy)
        if not math.isfinite(total):
            raise NonFiniteLossError(f"non-finite loss at step {t}", trace)
        opt.step()
        if (t + 1) % config.eval_every == 0 or t == config.steps - 1:
            if held_scorers:
                evaluate(t)
    return net, trace
