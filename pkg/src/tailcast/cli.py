"""Command-line surface for every experiment in scope.

Subcommands::

    validate-rank   Monte Carlo rank constants vs the whole estimator
    decompose       forecast-error decomposition on distributions/scores
    forecast        tail-quantile predictions from a score file
    coverage        union-cache hypergeometric coverage analysis
    ksweep          k-sensitivity of the mean forecast error at fixed R
    gridworld       pretrain | finetune | sft | evaluate pipeline stages

Exit codes: 0 success, 1 usage error, 2 runtime error, 3 gate failure
(a command ran but its statistical gates did not pass).
"""

from __future__ import annotations

import argparse
import math
import os
import sys
from dataclasses import replace

import numpy as np

from . import decomposition as dc
from . import experiment as ex
from . import io as tcio
from .distributions import Exponential, parse_distribution
from .finetune import MetaRunConfig, coverage_analysis
from .forecaster import (
    PlottingScheme,
    ScoreTransform,
    fit_tail,
    predict_quantile,
    read_score_file,
)
from .rng import stream

__all__ = ["main"]

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_RUNTIME = 2
EXIT_GATE = 3

CANONICAL_DISTS = (
    "exp:rate=1",
    "gaussian:mu=0,sigma=1",
    "lognormal:mu=0,sigma=1",
    "pareto:alpha=3",
    "beta:a=2,b=2",
    "mixture:bulk=exp:rate=1,rare=expshift:rate=1,shift=4,eps=1e-3",
)


class UsageError(ValueError):
    pass


class GateFailure(RuntimeError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse defaults to exit code 2
        raise UsageError(message)



def _manifest_config(args) -> dict:
    return {k: v for k, v in vars(args).items() if k not in ("func", "command")}

def _ensure_out(args) -> str:
    os.makedirs(args.out, exist_ok=True)
    return args.out


def _float_list(text: str):
    return [float(v) for v in text.split(",") if v.strip()]


def _int_list(text: str):
    return [int(v) for v in text.split(",") if v.strip()]


# ---------------------------------------------------------------------------
# validate-rank
# ---------------------------------------------------------------------------

def cmd_validate_rank(args) -> int:
    ratios = _float_list(args.ratios)
    if any(r <= 1 for r in ratios):
        raise UsageError("every deployment ratio R must exceed 1")
    out = _ensure_out(args)
    rows = []
    all_pass = True
    inconclusive = False
    for i, R in enumerate(ratios):
        mc = dc.rank_coefficient_mc(args.k, R, args.trials, stream(args.seed, 2 * i))
        m = args.fit_size
        N = int(round(R * m))
        est_r, se_r = dc.estimator_error_mc(
            Exponential(1.0), m, N, args.k, args.estimator_trials,
            stream(args.seed, 2 * i + 1), target="realized_max")
        est_q, se_q = dc.estimator_error_mc(
            Exponential(1.0), m, N, args.k, args.estimator_trials,
            stream(args.seed, 2 * i + 1000), target="population_quantile")
        tol_r = 3.0 * math.hypot(mc["se"], se_r)
        tol_q = 3.0 * math.hypot(mc["se"], se_q)
        wide = max(tol_r, tol_q) > 0.15
        ok = (abs(mc["b_inv"] - est_r) <= tol_r) and (abs(mc["b_inv_tilde"] - est_q) <= tol_q)
        gate = "inconclusive" if wide else ("pass" if ok else "fail")
        inconclusive |= wide
        all_pass &= ok and not wide
        rows.append((R, mc["b_inv"], mc["b_inv_tilde"], mc["se"],
                     est_r, se_r, est_q, se_q, gate))
        print(f"R={R:g}: b_inv={mc['b_inv']:.4f} (est {est_r:.4f}) "
              f"tilde={mc['b_inv_tilde']:.4f} (est {est_q:.4f}) [{gate}]")
    tcio.write_csv(os.path.join(out, "rank_table.csv"),
                   ("R", "b_inv", "b_inv_tilde", "mc_se",
                    "estimator_realized_mean", "estimator_realized_se",
                    "estimator_quantile_mean", "estimator_quantile_se", "gate"),
                   rows)
    tcio.write_manifest(out, "validate-rank", _manifest_config(args),
                        ["rank_table.csv"])
    if not all_pass:
        raise GateFailure("inconclusive (standard errors too wide)" if inconclusive
                          else "rank-constant gates failed")
    return EXIT_OK


# ---------------------------------------------------------------------------
# decompose
# ---------------------------------------------------------------------------

def cmd_decompose(args) -> int:
    out = _ensure_out(args)
    if args.scores:
        sources = [("scores:" + os.path.basename(args.scores),
                    read_score_file(args.scores))]
    else:
        specs = args.dist.split(";") if args.dist else list(CANONICAL_DISTS)
        sources = [(spec, parse_distribution(spec)) for spec in specs]
    rows = []
    for i, (label, source) in enumerate(sources):
        rep = dc.empirical_decomposition(
            source, args.fit_size, args.deploy_size, args.k,
            args.trials, stream(args.seed, i), delta=args.delta,
            sampler=args.sampler)
        rows.append((label, rep.rank, rep.curvature, rep.occupancy, rep.residual,
                     rep.empirical_total, rep.q1_hat, rep.q2_hat,
                     rep.standard_errors["rank"],
                     rep.standard_errors["empirical_total"]))
        print(f"{label}: rank={rep.rank:+.3f} curv={rep.curvature:+.3f} "
              f"occ={rep.occupancy:+.3f} resid={rep.residual:+.3f} "
              f"total={rep.empirical_total:+.3f} (q' units)")
    tcio.write_csv(os.path.join(out, "decomposition.csv"),
                   ("source", "rank", "curvature", "occupancy", "residual",
                    "empirical_total", "q1_hat", "q2_hat", "rank_se", "total_se"),
                   rows)
    tcio.write_manifest(out, "decompose", _manifest_config(args),
                        ["decomposition.csv"])
    return EXIT_OK


# ---------------------------------------------------------------------------
# forecast
# ---------------------------------------------------------------------------

def cmd_forecast(args) -> int:
    out = _ensure_out(args)
    scores = np.sort(read_score_file(args.scores))[::-1]
    if args.k > scores.size:
        raise UsageError(f"k={args.k} exceeds the {scores.size} scores in the file")
    scheme = PlottingScheme(args.scheme)
    transform = ScoreTransform(args.transform)
    fit = fit_tail(scores[: args.k], scores.size, scheme, transform)
    header = ["n", "depth", "prediction"]
    if transform is ScoreTransform.GUMBEL_PROB:
        header.append("prediction_log_p")
    rows = []
    for n in _float_list(args.deploy_sizes):
        if n <= 1:
            raise UsageError("deployment size n must exceed 1")
        pred = predict_quantile(fit, n)
        row = [n, math.log(n), pred]
        if transform is ScoreTransform.GUMBEL_PROB:
            row.append(float(transform.inverse_log(pred)))
        rows.append(tuple(row))
        print(f"n={n:g}: prediction={pred:.4f}")
    tcio.write_csv(os.path.join(out, "forecast.csv"), header, rows)
    tcio.write_manifest(out, "forecast", _manifest_config(args), ["forecast.csv"])
    return EXIT_OK


# ---------------------------------------------------------------------------
# coverage
# ---------------------------------------------------------------------------

def cmd_coverage(args) -> int:
    if args.cache_size > args.fit_size + args.deploy_size:
        raise UsageError("cache size exceeds the pool size")
    miss, cond, extra = coverage_analysis(
        args.cache_size, args.fit_size, args.deploy_size, args.k)
    guaranteed = args.cache_size - args.fit_size
    print(f"miss probability        {miss:.6f}")
    print(f"conditional extra evals {cond:.3f}")
    print(f"expected extra per step {extra:.4f}")
    print(f"guaranteed deploy ranks {guaranteed}")
    if args.out:
        out = _ensure_out(args)
        tcio.write_csv(os.path.join(out, "coverage.csv"),
                       ("C", "M", "N", "k", "miss_probability",
                        "conditional_extra", "expected_extra", "guaranteed_deploy_ranks"),
                       [(args.cache_size, args.fit_size, args.deploy_size, args.k,
                         miss, cond, extra, guaranteed)])
        tcio.write_manifest(out, "coverage", _manifest_config(args), ["coverage.csv"])
    return EXIT_OK


# ---------------------------------------------------------------------------
# ksweep
# ---------------------------------------------------------------------------

def cmd_ksweep(args) -> int:
    out = _ensure_out(args)
    if args.ratio <= 1:
        raise UsageError("deployment ratio R must exceed 1")
    k_list = _int_list(args.k_list)
    source = parse_distribution(args.dist)
    table = dc.k_sweep(source, args.fit_size, args.ratio, k_list,
                       args.trials, stream(args.seed, 0), delta=args.delta)
    rows = [(row["k"], row["mean_qprime"], row["se_qprime"]) for row in table]
    for row in rows:
        print(f"k={row[0]}: mean error {row[1]:+.3f} q' (se {row[2]:.3f})")
    tcio.write_csv(os.path.join(out, "ksweep.csv"),
                   ("k", "mean_error_qprime", "se_qprime"), rows)
    tcio.write_manifest(out, "ksweep", _manifest_config(args), ["ksweep.csv"])
    return EXIT_OK


# ---------------------------------------------------------------------------
# gridworld pipeline
# ---------------------------------------------------------------------------

def _gridworld_setup(args):
    cfg = tcio.read_config(args.config) if args.config else {}
    known = {"scale", "bank_size", "eps", "n_pretrain", "n_train_pairs",
             "n_held_out_pairs", "pretrain_steps", "finetune_steps",
             "pools_per_step", "sft_batch", "M", "N", "k", "C", "rho",
             "n_perm", "lr", "lam", "eval_every", "resume"}
    unknown = set(cfg) - known
    if unknown:
        raise UsageError(f"unknown config keys: {sorted(unknown)}")
    scale = ex.reduced_scale() if cfg.get("scale", "desk") == "reduced" else ex.desk_scale()
    scale_fields = {f: int(cfg[f]) for f in
                    ("bank_size", "n_pretrain", "n_train_pairs", "n_held_out_pairs",
                     "pretrain_steps", "finetune_steps", "pools_per_step", "sft_batch")
                    if f in cfg}
    if "eps" in cfg:
        scale_fields["eps"] = float(cfg["eps"])
    scale = replace(scale, **scale_fields)
    mc_fields = {f: int(cfg[f]) for f in ("M", "N", "k", "C", "rho", "n_perm", "eval_every")
                 if f in cfg}
    for f in ("lr", "lam"):
        if f in cfg:
            mc_fields[f] = float(cfg[f])
    config = MetaRunConfig(**mc_fields)
    config = replace(config, steps=scale.finetune_steps,
                     pools_per_step=scale.pools_per_step)
    return cfg, scale, config


def _bank_path(out, seed):
    return os.path.join(out, f"bank_seed{seed}.txt")


def _params_path(out, name, seed):
    return os.path.join(out, f"{name}_seed{seed}.npz")


def _load_verified_net(out, name, seed):
    from .gridworld import PolicyNet

    path = _params_path(out, name, seed)
    if not os.path.exists(path):
        raise FileNotFoundError(f"missing {name} parameters for seed {seed}: {path}")
    meta = PolicyNet.read_meta(path)
    stored = int(meta.get("bank_seed", -1))
    if stored != seed:
        raise RuntimeError(
            f"bank/seed mismatch: {path} was trained against bank seed {stored}, "
            f"refusing to reuse it for seed {seed}")
    return PolicyNet.load(path)


def _prepare_splits(out, seed, scale, config):
    from .gridworld import TaskBank, generate_bank

    path = _bank_path(out, seed)
    if os.path.exists(path):
        bank = TaskBank.load(path)
        if bank.seed != seed:
            raise RuntimeError(f"bank at {path} carries seed {bank.seed}, expected {seed}")
    else:
        bank = generate_bank(stream(seed, 0), scale.bank_size, eps=scale.eps, seed=seed)
        bank.save(path)
    return bank, ex.split_bank(bank, scale, config, stream(seed, 1))


def cmd_gridworld(args) -> int:
    from . import autodiff  # noqa: F401  (ensures package import errors surface early)
    from .gridworld import EnvParams, PolicyNet, pretrain

    cfg, scale, config = _gridworld_setup(args)
    out = _ensure_out(args)
    env = EnvParams()
    seed = args.seed
    stage = args.stage

    if stage == "pretrain":
        bank, (pre_tasks, _, _) = _prepare_splits(out, seed, scale, config)
        net = PolicyNet(horizon=env.horizon, rng=stream(seed, 2))
        trace = pretrain(net, pre_tasks, steps=scale.pretrain_steps, lr=config.lr,
                         rng=stream(seed, 3), env=env, clip=config.clip)
        net.save(_params_path(out, "pretrained", seed), bank_seed=seed)
        tcio.write_csv(os.path.join(out, f"pretrain_trace_seed{seed}.csv"),
                       ("step", "mean_return"),
                       [(i, v) for i, v in enumerate(trace)])
        outputs = [f"bank_seed{seed}.txt", f"pretrained_seed{seed}.npz",
                   f"pretrain_trace_seed{seed}.csv"]

    elif stage == "finetune":
        from .finetune import run_finetune

        _, (pre_tasks, train_pairs, held_pairs) = _prepare_splits(out, seed, scale, config)
        resume = cfg.get("resume", "0") == "1"
        trace_path = os.path.join(out, f"finetune_trace_seed{seed}.jsonl")
        if resume and os.path.exists(_params_path(out, "ours", seed)):
            net = _load_verified_net(out, "ours", seed)
            from .finetune import RunTrace
            prior = RunTrace.load(trace_path)
            offset = 1 + max((r["step"] for r in prior.step_records), default=-1)
        else:
            net = _load_verified_net(out, "pretrained", seed)
            prior, offset = None, 0
        pools = [list(p.union) for p in train_pairs]
        net, trace = run_finetune(net, pools, held_pairs, pre_tasks, config,
                                  stream(seed, 4 + offset), env)
        if prior is not None:
            for rec in trace.step_records:
                rec["step"] += offset
            for rec in trace.pair_records:
                rec["step"] += offset
            prior.step_records += trace.step_records
            prior.pair_records += trace.pair_records
            trace = prior
        net.save(_params_path(out, "ours", seed), bank_seed=seed)
        trace.save(trace_path)
        tcio.write_csv(os.path.join(out, f"forecast_pairs_seed{seed}.csv"),
                       ("step", "pair", "weighted_forecast_loss", "worst_rank_sq_error",
                        "worst_rank_predicted", "worst_rank_actual",
                        "worst_deploy_regret", "mean_deploy_regret"),
                       [(r["step"], r["pair"], r["weighted_forecast_loss"],
                         r["worst_rank_sq_error"], r["worst_rank_predicted"],
                         r["worst_rank_actual"], r["worst_deploy_regret"],
                         r["mean_deploy_regret"]) for r in trace.pair_records])
        outputs = [f"ours_seed{seed}.npz", f"finetune_trace_seed{seed}.jsonl",
                   f"forecast_pairs_seed{seed}.csv"]

    elif stage == "sft":
        from .baselines import sft_run
        from .experiment import _grad_budget

        _, (pre_tasks, train_pairs, _) = _prepare_splits(out, seed, scale, config)
        net = _load_verified_net(out, "pretrained", seed)
        pools = [list(p.union) for p in train_pairs]
        net, trace = sft_run(net, pools, pre_tasks, config, stream(seed, 5), env,
                             grad_budget=_grad_budget(config, pools),
                             batch=scale.sft_batch)
        net.save(_params_path(out, "sft", seed), bank_seed=seed)
        trace.save(os.path.join(out, f"sft_trace_seed{seed}.jsonl"))
        outputs = [f"sft_seed{seed}.npz", f"sft_trace_seed{seed}.jsonl"]

    else:  # evaluate
        from .baselines import Condition, evaluate_condition, fold_improvements

        _, (pre_tasks, train_pairs, held_pairs) = _prepare_splits(out, seed, scale, config)
        artifacts = {
            "pretrained": _load_verified_net(out, "pretrained", seed),
            "ours": _load_verified_net(out, "ours", seed),
            "sft": _load_verified_net(out, "sft", seed),
            "train_pairs": train_pairs,
            "pretrain_tasks": pre_tasks,
        }
        baseline = evaluate_condition(Condition.PRETRAINED, artifacts, held_pairs,
                                      config, env)
        rows = []
        for cond in Condition:
            metrics = (baseline if cond is Condition.PRETRAINED else
                       evaluate_condition(cond, artifacts, held_pairs, config, env))
            folds = fold_improvements(metrics, baseline)
            rows.append((seed, cond.value, metrics["capability"], metrics["safety"],
                         metrics["forecast_worst_sq_error"], folds["fold_capability"],
                         folds["fold_safety"], folds["fold_forecast"]))
            print(f"{cond.value}: capability={metrics['capability']:.4f} "
                  f"safety={metrics['safety']:.4f} "
                  f"forecast_sq={metrics['forecast_worst_sq_error']:.5f}")
        tcio.write_csv(os.path.join(out, f"comparison_seed{seed}.csv"),
                       ("seed", "condition", "capability", "safety",
                        "forecast_worst_sq_error", "fold_capability",
                        "fold_safety", "fold_forecast"),
                       rows)
        outputs = [f"comparison_seed{seed}.csv"]

    tcio.write_config(os.path.join(out, f"config_{stage}_seed{seed}.txt"),
                      cfg | {"seed": seed, "stage": stage})
    tcio.write_manifest(out, f"gridworld {stage}", cfg | {"seed": seed}, outputs)
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def build_parser() -> _Parser:
    parser = _Parser(prog="tailcast",
                     description="Deployment-scale failure forecasting toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--out", default="runs/out")
        p.add_argument("--threads", type=int, default=1,
                       help="thread budget (results are thread-count invariant)")

    p = sub.add_parser("validate-rank", help="rank constants vs whole estimator")
    common(p)
    p.add_argument("--k", type=int, default=10)
    p.add_argument("--ratios", default="2,5,10,100,1000")
    p.add_argument("--trials", type=int, default=10_000_000)
    p.add_argument("--estimator-trials", type=int, default=20_000)
    p.add_argument("--fit-size", type=int, default=10_000)
    p.set_defaults(func=cmd_validate_rank)

    p = sub.add_parser("decompose", help="forecast-error decomposition")
    common(p)
    p.add_argument("--dist", default=None,
                   help="semicolon-separated distribution specs (default: canonical six)")
    p.add_argument("--scores", default=None, help="score file instead of a distribution")
    p.add_argument("--fit-size", type=int, default=5000)
    p.add_argument("--deploy-size", type=int, default=50_000)
    p.add_argument("--k", type=int, default=10)
    p.add_argument("--delta", type=float, default=0.5)
    p.add_argument("--trials", type=int, default=2000)
    p.add_argument("--sampler", default="with_replacement",
                   choices=("with_replacement", "partition_permutation"))
    p.set_defaults(func=cmd_decompose)

    p = sub.add_parser("forecast", help="tail-quantile predictions from scores")
    common(p)
    p.add_argument("--scores", required=True)
    p.add_argument("--deploy-sizes", default="1e6", help="comma-separated n values")
    p.add_argument("--k", type=int, default=10)
    p.add_argument("--scheme", default="weibull",
                   choices=[s.value for s in PlottingScheme])
    p.add_argument("--transform", default="identity",
                   choices=[t.value for t in ScoreTransform])
    p.set_defaults(func=cmd_forecast)

    p = sub.add_parser("coverage", help="union-cache coverage analysis")
    p.add_argument("--cache-size", type=int, required=True)
    p.add_argument("--fit-size", type=int, required=True)
    p.add_argument("--deploy-size", type=int, required=True)
    p.add_argument("--k", type=int, default=10)
    p.add_argument("--out", default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threads", type=int, default=1)
    p.set_defaults(func=cmd_coverage)

    p = sub.add_parser("ksweep", help="k-sensitivity at fixed deployment ratio")
    common(p)
    p.add_argument("--dist", default="exp:rate=1")
    p.add_argument("--fit-size", type=int, default=5000)
    p.add_argument("--ratio", type=float, default=10.0)
    p.add_argument("--k-list", default="5,10,20,50,100,200,500")
    p.add_argument("--trials", type=int, default=2000)
    p.add_argument("--delta", type=float, default=0.5)
    p.set_defaults(func=cmd_ksweep)

    p = sub.add_parser("gridworld", help="gridworld experiment pipeline")
    common(p)
    p.add_argument("stage", choices=("pretrain", "finetune", "sft", "evaluate"))
    p.add_argument("--config", default=None, help="flat key=value config file")
    p.set_defaults(func=cmd_gridworld)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except UsageError as err:
        print(f"usage error: {err}", file=sys.stderr)
        return EXIT_USAGE
    except GateFailure as err:
        print(f"gate failure: {err}", file=sys.stderr)
        return EXIT_GATE
    except KeyboardInterrupt:
        return EXIT_RUNTIME
    except Exception as err:  # runtime failures map to a stable exit code
        print(f"error: {type(err).__name__}: {err}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
