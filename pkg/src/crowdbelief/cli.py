"""Command-line entry point: ``crowdbelief <command> [options]``.

Options may also come from a flat ``key = value`` file passed with
``--config``; keys are option names without the leading dashes (``-`` or
``_`` both accepted). Flags given on the command line win over the file.

Exit codes: 0 success, 2 input/output problem, 3 model or data problem.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import baselines, calibrate, evaluation, gibbs, synth
from .domain import (DEFAULT_HI, DEFAULT_LO, DataError, Dataset, balance, ensure_parent,
                     load_dataset, write_forecasts, write_outcomes)

EXIT_OK, EXIT_IO, EXIT_MODEL = 0, 2, 3
STOCHASTIC = {"synth", "fit", "aggregate", "evaluate"}

log = logging.getLogger("crowdbelief")


class UsageError(Exception):
    pass


def read_config(path) -> dict[str, str]:
    out = {}
    with open(path, encoding="utf-8") as fh:
        for n, line in enumerate(fh, start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise UsageError(f"{path}:{n}: expected key = value")
            k, v = (s.strip() for s in line.split("=", 1))
            out[k.replace("-", "_")] = v
    return out


def _floats(s):
    if isinstance(s, (list, tuple)):
        return [float(v) for v in s]
    return [float(v) for v in str(s).replace(",", " ").split()]


def _ints(s):
    return [int(v) for v in _floats(s)]


# --- parser -----------------------------------------------------------------

def _io(p):
    p.add_argument("--forecasts", required=False, help="forecast CSV")
    p.add_argument("--outcomes", required=False, help="outcome CSV (horizons; outcomes may be blank)")
    p.add_argument("--groups", type=int, default=5, help="number of expertise groups")
    p.add_argument("--censor-lo", type=float, default=DEFAULT_LO)
    p.add_argument("--censor-hi", type=float, default=DEFAULT_HI)


def _sampler(p, iterations=3000, burn_in=500, thin=5):
    p.add_argument("--iterations", type=int, default=iterations)
    p.add_argument("--burn-in", type=int, default=burn_in)
    p.add_argument("--thin", type=int, default=thin)
    p.add_argument("--ref-group", type=int, default=None)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="crowdbelief", description=__doc__.splitlines()[0])
    ap.add_argument("--config", help="key = value file; command-line flags override it")
    ap.add_argument("--threads", type=int, default=None,
                    help="worker threads (default: $CROWDBELIEF_THREADS or 1)")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate synthetic panels with known truth")
    s.add_argument("--T", dest="T", type=int, default=101, help="horizon in days")
    s.add_argument("--K", dest="K", default="20", help="questions per data set (list allowed)")
    s.add_argument("--sigma2", default="1", help="observation variance (list allowed)")
    s.add_argument("--beta", default="1", help="bias scale (list allowed)")
    s.add_argument("--replicates", type=int, default=1)
    s.add_argument("--experts-per-group", type=int, default=10)
    s.add_argument("--forecast-rate", type=float, default=1.0)
    s.add_argument("--seed", type=int)
    s.add_argument("--out", required=False, help="output directory")

    f = sub.add_parser("fit", help="train a model on labelled questions")
    _io(f)
    _sampler(f)
    f.add_argument("--model", choices=["sac", "bsac", "sdlm", "ewma", "ewmla", "ewmba"], default="sac")
    f.add_argument("--rule", default="log", help="calibration scoring rule: log or brier")
    f.add_argument("--balance", action="store_true", help="balance and relabel before fitting")
    f.add_argument("--restarts", type=int, default=10, help="optimizer restarts for baselines")
    f.add_argument("--seed", type=int)
    f.add_argument("--out-chain", help="chain file (JSON lines) for sampler models")
    f.add_argument("--out-report", help="calibration report (JSON) or baseline parameters")

    a = sub.add_parser("aggregate", help="per-day aggregate probabilities for questions")
    _io(a)
    _sampler(a, 500, 200, 2)
    a.add_argument("--method", choices=["sac", "bsac", "sdlm", "ewma", "ewmla", "ewmba"], default="sac")
    a.add_argument("--chain", help="trained chain from `fit` (sac, bsac)")
    a.add_argument("--params", help="fitted baseline parameters from `fit`")
    a.add_argument("--alpha", type=float, help="baseline smoothing weight, overrides --params")
    a.add_argument("--weights", help="baseline group weights or biases, overrides --params")
    a.add_argument("--full", action="store_true",
                   help="one run over all days instead of day-by-day prefixes")
    a.add_argument("--seed", type=int)
    a.add_argument("--out", help="aggregate CSV")

    e = sub.add_parser("evaluate", help="cross-validated Brier scores and reliability")
    _io(e)
    _sampler(e)
    e.add_argument("--methods", default="sac-log,ewma", help="comma list: sac-log sac-brier bsac sdlm ewma ewmla ewmba const")
    e.add_argument("--folds", type=int, default=10)
    e.add_argument("--agg-iterations", type=int, default=500)
    e.add_argument("--agg-burn-in", type=int, default=200)
    e.add_argument("--agg-thin", type=int, default=2)
    e.add_argument("--bins", type=int, default=10)
    e.add_argument("--n-boot", type=int, default=10000)
    e.add_argument("--seed", type=int)
    e.add_argument("--out", help="output directory")

    b = sub.add_parser("balance", help="partition and relabel questions")
    _io(b)
    b.add_argument("--out", help="output directory")

    r = sub.add_parser("report-calibration", help="print a calibration report")
    r.add_argument("--report", help="calibration report from `fit`")
    r.add_argument("--chain", help="optional chain for bias-ordering and per-question readouts")
    r.add_argument("--events", default="", help="extra orderings, e.g. 'b1<b2<b3'")
    return ap


def parse_args(argv=None) -> argparse.Namespace:
    ap = build_parser()
    args = ap.parse_args(argv)
    if args.config:
        try:
            cfg = read_config(args.config)
        except OSError as exc:
            raise UsageError(f"cannot read config: {exc}") from None
        sub = ap._subparsers._group_actions[0].choices[args.command]  # noqa: SLF001
        known = {a.dest for a in sub._actions}  # noqa: SLF001
        unknown = set(cfg) - known
        if unknown:
            raise UsageError(f"unknown config keys for {args.command}: {', '.join(sorted(unknown))}")
        conv = {a.dest: a.type for a in sub._actions if a.dest in cfg}  # noqa: SLF001
        sub.set_defaults(**{k: (conv[k](v) if conv[k] else _config_value(v)) for k, v in cfg.items()})
        args = ap.parse_args(argv)
    if args.threads is None:
        args.threads = int(os.environ.get("CROWDBELIEF_THREADS", "1") or 1)
    if args.command in STOCHASTIC and getattr(args, "seed", None) is None:
        raise UsageError(f"{args.command} is stochastic and needs --seed")
    return args


def _config_value(v: str):
    if v.lower() in ("true", "yes", "on"):
        return True
    if v.lower() in ("false", "no", "off"):
        return False
    return v


def _need(args, *names):
    missing = [n for n in names if getattr(args, n, None) in (None, "")]
    if missing:
        raise UsageError("missing required option(s): " + ", ".join("--" + n.replace("_", "-") for n in missing))


def _load(args) -> Dataset:
    _need(args, "forecasts", "outcomes")
    return load_dataset(args.forecasts, args.outcomes, args.groups, args.censor_lo, args.censor_hi)


def _gibbs(args, **kw) -> gibbs.GibbsConfig:
    return gibbs.GibbsConfig(iterations=args.iterations, burn_in=args.burn_in, thin=args.thin,
                             seed=args.seed, ref_group=args.ref_group, **kw)


# --- commands ---------------------------------------------------------------

def cmd_synth(args) -> int:
    _need(args, "out")
    out = Path(args.out)
    Ks, s2s, betas = _ints(args.K), _floats(args.sigma2), _floats(args.beta)
    cells = [(i, s2, j, b, l, K, r) for i, s2 in enumerate(s2s) for j, b in enumerate(betas)
             for l, K in enumerate(Ks) for r in range(args.replicates)]
    for i, s2, j, b, l, K, r in cells:
        cfg = synth.SynthConfig(horizon=args.T, experts_per_group=args.experts_per_group, obs_var=s2,
                                beta=b, n_questions=K, forecast_rate=args.forecast_rate)
        rng = np.random.default_rng(synth.cell_seed(args.seed, i, j, l, r))
        ds, truths = synth.generate_dataset(cfg, rng)
        d = out if len(cells) == 1 else out / f"sigma2={s2:g}_beta={b:g}_K={K}_rep={r}"
        d.mkdir(parents=True, exist_ok=True)
        write_forecasts(ds, d / "forecasts.csv")
        write_outcomes(ds, d / "outcomes.csv")
        synth.write_truth(truths, d / "truth.csv")
    print(f"wrote {len(cells)} data set(s) under {out}")
    return EXIT_OK


def cmd_fit(args) -> int:
    ds = _load(args)
    if args.balance:
        ds, part = balance(ds)
        log.info("balanced: %d / %d questions, %d mirrored", len(part.S0), len(part.S1), sum(part.flipped))
    if args.model in ("ewma", "ewmla", "ewmba"):
        _need(args, "out_report")
        res = baselines.fit_baseline(ds.panels, args.model, ds.n_groups, args.seed, args.restarts)
        baselines.write_fit(res, ensure_parent(args.out_report))
        print(f"{args.model}: objective {res.objective:.6g}")
        return EXIT_OK
    _need(args, "out_chain", "out_report")
    if args.model == "sdlm":
        cfg = _gibbs(args, fixed_bias=(1.0,) * ds.n_groups)
        chain = gibbs.sample_posterior(ds, cfg)
        chain.beta = np.ones(len(chain))
        report = {"model": "sdlm", "beta": 1.0, "bias": [1.0] * ds.n_groups,
                  "n_questions": len(ds), "n_days": int(ds.horizons.sum())}
    elif args.model == "bsac":
        chain = calibrate.bsac_sample(ds, _gibbs(args))
        est = calibrate.bsac_estimates(chain)
        report = {"model": "bsac", "beta": est.beta, "bias": est.bias.tolist(),
                  "n_questions": len(ds), "n_days": int(ds.horizons.sum()), **chain.info}
    else:
        fit = calibrate.fit_sac(ds, _gibbs(args), calibrate.Rule.parse(args.rule))
        chain = fit.chain
        chain.beta = fit.draw_betas
        report = {"model": "sac", **fit.report()}
    gibbs.write_chain(chain, ensure_parent(args.out_chain))
    calibrate.write_calibration_report(report, ensure_parent(args.out_report))
    print(f"{report['model']}: beta {report['beta']:.6g}; bias " + " ".join(f"{v:.4g}" for v in report["bias"]))
    return EXIT_OK


def _baseline_params(args, n_groups):
    if args.params:
        params = baselines.read_fit(args.params).params
    elif args.alpha is None:
        raise DataError(f"{args.method} needs --params from `fit` or explicit --alpha/--weights")
    else:
        params = baselines.default_params(args.method, n_groups)
    kw = {}
    if args.alpha is not None:
        kw["alpha"] = args.alpha
    if args.weights:
        w = tuple(_floats(args.weights))
        kw["bias" if args.method == "ewmla" else "weights"] = w
    return type(params)(**{**params.__dict__, **kw})


def cmd_aggregate(args) -> int:
    _need(args, "out")
    ds = _load(args)
    if args.method in ("ewma", "ewmla", "ewmba"):
        params = _baseline_params(args, ds.n_groups)
        paths = baselines.aggregate_paths([p.blind() for p in ds.panels], params, ds.n_groups)
        baselines.write_paths(ds.question_ids, paths, ensure_parent(args.out))
        return EXIT_OK
    cfg = _gibbs(args, prior_exponent_obs=-1.0, prior_exponent_state=-1.0)
    if args.method == "sdlm":
        pairs = calibrate.sdlm_trained(ds.n_groups)
    else:
        if not args.chain:
            raise DataError(f"{args.method} aggregation needs a trained --chain")
        chain = gibbs.read_chain(args.chain)
        if chain.beta is None:
            raise DataError("chain carries no calibration scale; refit with `fit`")
        pairs = [(chain.bias[i], float(chain.beta[i])) for i in range(len(chain))]
    aggs = calibrate.sac_out_of_sample_many(ds.panels, pairs, cfg, ds.n_groups, sequential=not args.full)
    calibrate.write_aggregates(aggs, ensure_parent(args.out))
    return EXIT_OK


def cmd_evaluate(args) -> int:
    _need(args, "out")
    ds = _load(args)
    training = _gibbs(args)
    aggregation = gibbs.GibbsConfig.aggregation(iterations=args.agg_iterations, burn_in=args.agg_burn_in,
                                                thin=args.agg_thin, seed=args.seed)
    names = [m.strip() for m in args.methods.split(",") if m.strip()]
    methods = {n: evaluation.method_from_name(n, training, aggregation) for n in names}
    plan = evaluation.make_folds(ds, args.folds, args.seed)
    report = evaluation.run_cv(ds, methods, plan, args.seed, args.threads)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    evaluation.write_scores(report, out / "scores.csv")
    rows = evaluation.summary_rows(report)
    evaluation.write_summary(rows, out / "summary.csv")
    outcomes = dict(zip(ds.question_ids, ds.outcomes.tolist()))
    for n in names:
        if not report.forecasts[n]:
            continue
        p, z = report.forecast_outcome_pairs(n, outcomes)
        table = evaluation.reliability(p, z, args.bins, args.n_boot, seed=args.seed)
        evaluation.write_reliability(table, out / f"reliability_{n}.csv")
    text = evaluation.format_summary(rows)
    (out / "summary.txt").write_text(text + "\n", encoding="utf-8")
    print(text)
    for name, fold, msg in report.failures:
        print(f"warning: {name} failed on fold {fold + 1}: {msg}", file=sys.stderr)
    return EXIT_OK


def cmd_balance(args) -> int:
    _need(args, "out")
    ds = _load(args)
    bal, part = balance(ds)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_forecasts(bal, out / "forecasts.csv")
    write_outcomes(bal, out / "outcomes.csv")
    h = ds.horizons
    with open(out / "partition.csv", "w", encoding="utf-8") as fh:
        fh.write("question_id,side,flipped\n")
        side = {i: 0 for i in part.S0} | {i: 1 for i in part.S1}
        for k, q in enumerate(ds.question_ids):
            fh.write(f"{q},{side[k]},{int(part.flipped[k])}\n")
    print(f"S0: {len(part.S0)} questions, {int(h[list(part.S0)].sum())} days; "
          f"S1: {len(part.S1)} questions, {int(h[list(part.S1)].sum())} days; "
          f"{sum(part.flipped)} mirrored")
    return EXIT_OK


def cmd_report_calibration(args) -> int:
    _need(args, "report")
    rep = calibrate.read_calibration_report(args.report)
    print(f"model: {rep.get('model', 'sac')}")
    for k in ("rule", "beta", "objective", "objective_neg_beta", "n_questions", "n_days"):
        if k in rep:
            print(f"{k}: {rep[k]}")
    print("bias: " + " ".join(f"{v:.6g}" for v in rep["bias"]))
    if args.chain:
        chain = gibbs.read_chain(args.chain)
        events = [e.strip() for e in args.events.split(",") if e.strip()]
        order = evaluation.bias_ordering(chain, events)
        print("\nposterior ordering probabilities")
        for k, v in order.probabilities.items():
            print(f"  {k:<24} {v:.4f}")
        print("\nbias quantiles (2.5%, 25%, 50%, 75%, 97.5%)")
        for j, row in enumerate(order.quantiles, start=1):
            print(f"  b{j}: " + " ".join(f"{v:8.4f}" for v in row))
        beta = chain.beta if chain.beta is not None else np.ones(len(chain))
        print("\nper-question  disagreement  volatility  drift")
        for k, q in enumerate(chain.question_ids):
            print(f"  {q:<12} {chain.obs_var[:, k].mean():12.4f} "
                  f"{np.mean(chain.state_var[:, k] / beta ** 2):11.4f} {chain.drift[:, k].mean():6.3f}")
    return EXIT_OK


COMMANDS = {"synth": cmd_synth, "fit": cmd_fit, "aggregate": cmd_aggregate, "evaluate": cmd_evaluate,
            "balance": cmd_balance, "report-calibration": cmd_report_calibration}


def main(argv=None) -> int:
    try:
        args = parse_args(argv)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except calibrate.SeparationError as exc:
        print(f"error: {exc}. Every training outcome is the same, so the scale cannot be "
              "calibrated; add questions with the other outcome or use --model sdlm.", file=sys.stderr)
        return EXIT_MODEL
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (DataError, gibbs.SamplerError, ValueError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MODEL


if __name__ == "__main__":
    sys.exit(main())
