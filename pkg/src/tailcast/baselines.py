"""Comparison conditions: post-hoc calibration and direct score SFT.

The comparison grid evaluates six conditions built from three models
(pretrained, forecastability fine-tuned, regret-SFT) with and without a
post-hoc affine correction of the worst-rank forecast. Calibrations are
fit on the training (fit, deploy) pairs only and applied unchanged to
the held-out pairs; they never touch model parameters.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .finetune import MetaRunConfig, RegretScorer, RunTrace, TaskPair, evaluate_pair

__all__ = [
    "AffineCalibration",
    "Condition",
    "fit_affine",
    "fit_shift",
    "sft_run",
    "worst_rank_pairs",
    "evaluate_condition",
    "fold_improvements",
]


@dataclass(frozen=True)
class AffineCalibration:
    """Two-parameter correction: calibrated = alpha * predicted + beta."""

    alpha: float
    beta: float

    def __call__(self, predicted):
        return self.alpha * np.asarray(predicted, dtype=float) + self.beta


def fit_affine(predicted, actual) -> AffineCalibration:
    """Least-squares (alpha, beta) minimizing sum (a*pred + b - actual)^2."""
    x = np.asarray(predicted, dtype=float)
    y = np.asarray(actual, dtype=float)
    if x.size < 2:
        raise ValueError("need at least 2 pairs for an affine fit")
    if np.ptp(x) == 0.0:
        raise ValueError("degenerate predictor: all predictions equal")
    alpha, beta = np.polynomial.polynomial.polyfit(x, y, 1)[::-1]
    return AffineCalibration(alpha=float(alpha), beta=float(beta))


def fit_shift(predicted, actual) -> float:
    """Mean-matching offset: beta = mean(actual - predicted)."""
    x = np.asarray(predicted, dtype=float)
    y = np.asarray(actual, dtype=float)
    if x.size < 1:
        raise ValueError("need at least 1 pair")
    return float(np.mean(y - x))


def sft_run(
    net,
    pools: list,
    pretrain_tasks: list,
    config: MetaRunConfig,
    rng: np.random.Generator,
    env=None,
    grad_budget: int | None = None,
    batch: int = 256,
):
    """Direct minimization of mean exact regret on the pooled task union.

    Uses the same optimizer and return regularizer as the forecastability
    loop but no forecast term. ``grad_budget`` caps the total number of
    with-gradient score evaluations so compute matches a forecastability
    run; when omitted, runs ``config.steps`` steps.
    """
    from .gridworld import EnvParams, policy_values_batch, regret_batch
    from .optim import AdamW

    env = env or EnvParams()
    union = [t for pool in pools for t in pool]
    if not union:
        raise ValueError("empty task union")
    scorer = RegretScorer(net, union, env)
    steps = config.steps if grad_budget is None else max(1, math.ceil(grad_budget / batch))
    opt = AdamW(net.params, lr=config.lr, weight_decay=config.weight_decay,
                clip=config.clip)
    trace = RunTrace()
    for t in range(steps):
        idx = rng.integers(0, len(union), size=batch)
        tasks = [union[i] for i in idx]
        logits = net.forward(tasks)
        mean_regret = ad.mean_(regret_batch(tasks, env, logits, vstar=scorer.vstar[idx]))
        reg_idx = rng.integers(0, len(pretrain_tasks), size=config.reg_batch)
        reg_tasks = [pretrain_tasks[i] for i in reg_idx]
        reg = ad.mul(ad.constant(np.full((), config.reg_scale)),
                     ad.mean_(policy_values_batch(
                         reg_tasks, env, net.forward(reg_tasks))))
        total = ad.add(mean_regret, ad.mul(reg, ad.constant(np.full((), config.lam))))
        if not np.isfinite(total.value):
            raise RuntimeError(f"non-finite SFT loss at step {t}")
        opt.zero_grad()
        ad.backward(total)
        opt.step()
        trace.log_step(step=t, mean_regret=float(mean_regret.value),
                       regularizer=float(reg.value), total=float(total.value))
    return net, trace


class Condition(enum.Enum):
    PRETRAINED = "pretrained"
    CAL = "cal"
    SFT = "sft"
    SFT_CAL = "sft_cal"
    OURS = "ours"
    OURS_CAL = "ours_cal"


_MODEL_OF = {
    Condition.PRETRAINED: "pretrained",
    Condition.CAL: "pretrained",
    Condition.SFT: "sft",
    Condition.SFT_CAL: "sft",
    Condition.OURS: "ours",
    Condition.OURS_CAL: "ours",
}
_CALIBRATED = {Condition.CAL, Condition.SFT_CAL, Condition.OURS_CAL}


def worst_rank_pairs(net, pairs: list, config: MetaRunConfig, env=None):
    """(predicted, actual) worst-rank scores for each (fit, deploy) pair."""
    predicted, actual = [], []
    for pair in pairs:
        metrics = evaluate_pair(RegretScorer(net, pair.fit_tasks, env),
                                RegretScorer(net, pair.deploy_tasks, env), config)
        predicted.append(metrics["worst_rank_predicted"])
        actual.append(metrics["worst_rank_actual"])
    return np.asarray(predicted), np.asarray(actual)


def evaluate_condition(
    condition: Condition,
    artifacts: dict,
    held_out_pairs: list,
    config: MetaRunConfig,
    env=None,
) -> dict:
    """Capability / safety / forecast metrics of one comparison condition.

    ``artifacts`` must hold the models under keys 'pretrained' (always),
    'ours' and 'sft' (when the condition uses them), plus 'train_pairs'
    (calibration fitting data) and 'pretrain_tasks' (capability probe).
    Calibrated conditions fit the affine correction on the training
    pairs under the condition's own model, then apply it unchanged to
    the held-out predictions.
    """
    key = _MODEL_OF[condition]
    if key not in artifacts:
        raise KeyError(f"missing model artifact {key!r} for condition {condition.value}")
    net = artifacts[key]

    calibration = None
    if condition in _CALIBRATED:
        if "train_pairs" not in artifacts:
            raise KeyError("calibrated conditions need the 'train_pairs' artifact")
        pred_tr, act_tr = worst_rank_pairs(net, artifacts["train_pairs"], config, env)
        calibration = fit_affine(pred_tr, act_tr)

    pretrain_tasks = artifacts["pretrain_tasks"]
    capability = _mean_return(net, pretrain_tasks, env)
    predicted, actual = worst_rank_pairs(net, held_out_pairs, config, env)
    if calibration is not None:
        predicted = calibration(predicted)
    worst_regret = max(
        float(np.max(RegretScorer(net, pair.deploy_tasks, env).all_detached()))
        for pair in held_out_pairs
    )
    return {
        "condition": condition.value,
        "capability": capability,
        "safety": worst_regret,
        "forecast_worst_sq_error": float(np.mean((predicted - actual) ** 2)),
        "calibration_alpha": calibration.alpha if calibration else 1.0,
        "calibration_beta": calibration.beta if calibration else 0.0,
    }


def fold_improvements(metrics: dict, baseline: dict) -> dict:
    """Per-metric ratios against the same seed's pretrained baseline.

    Capability folds up with the metric; safety and forecast error fold
    up as the baseline-over-condition ratio (bigger = better).
    """
    def ratio(num, den):
        return num / den if den != 0 else float("inf") if num > 0 else 1.0

    return {
        "fold_capability": ratio(metrics["capability"], baseline["capability"]),
        "fold_safety": ratio(baseline["safety"], metrics["safety"]),
        "fold_forecast": ratio(baseline["forecast_worst_sq_error"],
                               metrics["forecast_worst_sq_error"]),
    }


def _mean_return(net, tasks, env=None) -> float:
    from .gridworld import EnvParams, policy_values_batch

    env = env or EnvParams()
    chunk = 512
    total = 0.0
    for lo in range(0, len(tasks), chunk):
        batch = list(tasks[lo:lo + chunk])
        vals = policy_values_batch(batch, env, net.forward(batch, frozen=True))
        total += float(vals.value.sum())
    return total / len(tasks)
