"""Command line entry point: ``mixicl <verb> [options]``.

Every verb writes into ``--out`` (a run directory) and records its full
configuration in ``manifest.json``. Outputs depend only on the arguments, so
repeating a command with the same seed reproduces every file byte for byte.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from ._rng import make_rng
from ._serialize import fmt_float, read_weights_jsonl, write_weights_jsonl
from .construction import run_circuit, circuit_predictor, trace_circuit, write_trace
from .em import EMConfig, em_fit, oracle_pred_error
from .harness import (DEFAULT_GRIDS, SHIFT_KINDS, eval_mse_curve, eval_sq_distance, report,
                      shift_sweep, write_csv)
from .mixtures import (MixtureSpec, PromptSampler, read_prompts_jsonl, sample_components,
                       sample_prompt, sample_spec, write_prompts_jsonl)
from .predictors import PREDICTOR_NAMES, make_predictor, posterior_mean_predict
from .training import LR_LARGE, FixedDataset, TrainConfig, TransformerModel, train
from .transformer import ModelConfig

log = logging.getLogger("mixicl")


def _mixture_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--m", type=int, default=5, help="number of mixture components")
    p.add_argument("--d", type=int, default=20, help="covariate dimension")
    p.add_argument("--sigma", type=float, default=1.0, help="label noise level")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=Path, required=True, help="run directory")


def _eval_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--kmax", type=int, default=60)
    p.add_argument("--n", type=int, default=256, help="prompts per prompt length")
    p.add_argument("--weights", type=Path, help="JSONL weights for ':estimated' predictors")
    p.add_argument("--model", type=Path, help="trained model for the 'transformer' predictor")


def _predictor(name: str, spec: MixtureSpec, args):
    if name == "circuit":
        return circuit_predictor(spec)
    if name == "transformer":
        if args.model is None:
            raise SystemExit("the 'transformer' predictor needs --model")
        return TransformerModel.load(args.model)
    weights = read_weights_jsonl(args.weights) if args.weights else None
    return make_predictor(name, spec, weights)


def _manifest(args, extra=None) -> dict:
    cfg = {k: (str(v) if isinstance(v, Path) else v) for k, v in sorted(vars(args).items())
           if k not in ("func", "out", "verbose")}
    out = {"command": args.command, "version": __version__, "config": cfg}
    if extra:
        out.update(extra)
    return out


def _finish(args, extra=None) -> None:
    path = args.out / "manifest.json"
    path.write_text(json.dumps(_manifest(args, extra), indent=2, sort_keys=True) + "\n")


def cmd_sample(args) -> None:
    spec = sample_spec(args.m, args.d, args.sigma, args.seed)
    batch = PromptSampler(spec)(args.k, args.n, make_rng(args.seed, "sample"))
    write_prompts_jsonl(args.out / "prompts.jsonl", batch)
    write_weights_jsonl(args.out / "components.jsonl", spec.components)
    _finish(args)


def cmd_eval(args) -> None:
    spec = sample_spec(args.m, args.d, args.sigma, args.seed)
    pred = _predictor(args.predictor, spec, args)
    curve = eval_mse_curve(pred, PromptSampler(spec), args.kmax, args.n, args.seed,
                           setting=args.predictor)
    report(curve, args.out, "curve")
    _finish(args)


def cmd_distance(args) -> None:
    spec = sample_spec(args.m, args.d, args.sigma, args.seed)
    f = _predictor(args.f, spec, args)
    g = _predictor(args.g, spec, args)
    curve = eval_sq_distance(f, g, PromptSampler(spec), args.kmax, args.n, args.seed,
                             setting=f"{args.f}|{args.g}")
    report(curve, args.out, "distance")
    _finish(args)


def cmd_shift(args) -> None:
    spec = sample_spec(args.m, args.d, args.sigma, args.seed)
    pred = _predictor(args.predictor, spec, args)
    grid = DEFAULT_GRIDS[args.kind] if args.grid is None else [float(v) for v in args.grid.split(",")]
    results = shift_sweep(args.kind, grid, pred, spec, args.kmax, args.n, args.seed)
    for value, curve in results:
        # per-point file labelled like `eval`, so the no-shift point can be diffed against it
        curve.setting = args.predictor
        write_csv(args.out / f"{args.kind}_{value:g}.csv", curve)
        curve.setting = f"{args.kind}={value:g}"
    report([c for _, c in results], args.out, "shift")
    _finish(args, {"grid": [v for v, _ in results]})


def cmd_verify_circuit(args) -> None:
    rng = make_rng(args.seed, "verify-circuit")
    worst, worst_abs = 0.0, 0.0
    for _ in range(args.instances):
        d = int(rng.choice([2, 4, 8]))
        m = int(rng.choice([1, 2, 3, 5]))
        k = int(rng.integers(1, 11))
        sigma = float(rng.choice([0.5, 1.0, 2.0]))
        spec = MixtureSpec(sample_components(m, d, rng), sigma)
        prompt = sample_prompt(spec, k, rng)
        ref = posterior_mean_predict(prompt, spec).prediction
        gap = abs(run_circuit(prompt, spec) - ref)
        worst = max(worst, gap / (1.0 + abs(ref)))
        worst_abs = max(worst_abs, gap)
    print(f"max relative deviation {worst:.3e} over {args.instances} instances")
    if args.trace:
        spec = sample_spec(3, 2, 1.0, args.seed)
        write_trace(args.out / "trace", trace_circuit(sample_prompt(spec, 2, make_rng(args.seed, "trace")), spec))
    (args.out / "verify.json").write_text(json.dumps(
        {"instances": args.instances, "max_relative_deviation": fmt_float(worst),
         "max_abs_deviation": fmt_float(worst_abs), "tolerance": "1e-10"}, indent=2) + "\n")
    _finish(args)


def cmd_em_fit(args) -> None:
    spec = sample_spec(args.m, args.d, args.sigma, args.seed)
    if args.prompts:
        prompts = read_prompts_jsonl(args.prompts)
    else:
        prompts = PromptSampler(spec)(args.k, args.n, make_rng(args.seed, "em-data"))
    config = EMConfig(args.t_max, args.tol, args.ridge, args.restarts)
    state = em_fit(prompts, args.m, args.sigma, config, make_rng(args.seed, "em"), return_state=True)
    write_weights_jsonl(args.out / "weights.jsonl", state.weights)
    extra = {"iterations": state.iteration, "log_likelihood": fmt_float(state.log_likelihood),
             "warnings": state.warnings}
    if not args.prompts:
        extra["oracle_pred_error"] = fmt_float(oracle_pred_error(state.weights, spec))
        extra["oracle_pred_error_normalized"] = fmt_float(oracle_pred_error(state.weights, spec, True))
    _finish(args, extra)


def _train_common(args):
    spec = sample_spec(args.m, args.d, args.sigma, args.seed)
    mc = ModelConfig(args.p, args.heads, args.d_att or max(1, args.p // args.heads),
                     args.d_ff or 4 * args.p, args.layers)
    tc = TrainConfig(batch_size=args.batch_size, curriculum_phase_steps=args.phase_steps,
                     final_steps=args.steps, adam_lr=LR_LARGE if args.lr_large else args.lr,
                     dropout=args.dropout, seed=args.seed, k_start=args.kstart, k_step=args.kstep,
                     k_max=args.kmax)
    return spec, mc, tc


def _write_training(args, spec, model, trace, tc) -> None:
    model.save(args.out / "model.bin")
    with open(args.out / "loss.csv", "w") as fh:
        fh.write("step,raw_loss,normalized_loss\n")
        for step, raw, norm in trace:
            fh.write(f"{step},{fmt_float(raw)},{fmt_float(norm)}\n")
    curve = eval_mse_curve(model, PromptSampler(spec), tc.k_max, args.eval_n, args.seed,
                           setting="transformer")
    report(curve, args.out, "eval")
    _finish(args, {"eval_mean_normalized_mse": fmt_float(float(np.mean(curve.mean)))})


def cmd_train(args) -> None:
    spec, mc, tc = _train_common(args)
    model, trace = train(tc, spec, mc)
    _write_training(args, spec, model, trace, tc)


def cmd_train_fixed(args) -> None:
    spec, mc, tc = _train_common(args)
    data = FixedDataset.sample(spec, args.n_train, tc.k_max, args.seed)
    model, trace = train(tc, data, mc)
    _write_training(args, spec, model, trace, tc)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mixicl", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    names = ", ".join(PREDICTOR_NAMES + ("circuit", "transformer"))

    p = sub.add_parser("sample", help="write prompts and components as JSONL")
    _mixture_args(p)
    p.add_argument("--k", type=int, default=10)
    p.add_argument("--n", type=int, default=100)
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("eval", help="normalized MSE curve of one predictor")
    _mixture_args(p)
    _eval_args(p)
    p.add_argument("--predictor", default="posterior_mean", help=names)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("distance", help="squared distance curve between two predictors")
    _mixture_args(p)
    _eval_args(p)
    p.add_argument("--f", required=True, help=names)
    p.add_argument("--g", required=True, help=names)
    p.set_defaults(func=cmd_distance)

    p = sub.add_parser("shift", help="MSE curves under a distribution shift")
    _mixture_args(p)
    _eval_args(p)
    p.add_argument("--kind", choices=SHIFT_KINDS, required=True)
    p.add_argument("--grid", help="comma separated values (default: the standard grid for the kind)")
    p.add_argument("--predictor", default="posterior_mean", help=names)
    p.set_defaults(func=cmd_shift)

    p = sub.add_parser("verify-circuit", help="compare the operator circuit with the analytic predictor")
    p.add_argument("--instances", type=int, default=1000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--trace", action="store_true", help="also dump every stage of one instance as CSV")
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_verify_circuit)

    p = sub.add_parser("em-fit", help="batch EM on sampled or given prompts")
    _mixture_args(p)
    p.add_argument("--k", type=int, default=8)
    p.add_argument("--n", type=int, default=2000)
    p.add_argument("--prompts", type=Path, help="JSONL prompts (default: sample from the mixture)")
    p.add_argument("--restarts", type=int, default=5)
    p.add_argument("--t-max", type=int, default=20000)
    p.add_argument("--tol", type=float, default=1e-3)
    p.add_argument("--ridge", type=float, default=1e-8)
    p.set_defaults(func=cmd_em_fit)

    for verb, func in (("train", cmd_train), ("train-fixed", cmd_train_fixed)):
        p = sub.add_parser(verb, help="train a toy transformer" + (" on a fixed dataset" if func is cmd_train_fixed else ""))
        _mixture_args(p)
        p.set_defaults(m=2, d=4, sigma=0.5)
        p.add_argument("--p", type=int, default=32)
        p.add_argument("--layers", type=int, default=2)
        p.add_argument("--heads", type=int, default=2)
        p.add_argument("--d-att", type=int)
        p.add_argument("--d-ff", type=int)
        p.add_argument("--steps", type=int, default=3000)
        p.add_argument("--phase-steps", type=int, default=500)
        p.add_argument("--batch-size", type=int, default=64)
        p.add_argument("--kstart", type=int, default=2)
        p.add_argument("--kstep", type=int, default=2)
        p.add_argument("--kmax", type=int, default=10)
        p.add_argument("--lr", type=float, default=1e-4)
        p.add_argument("--lr-large", action="store_true", help=f"use the step size {LR_LARGE}")
        p.add_argument("--dropout", type=float, default=0.0)
        p.add_argument("--eval-n", type=int, default=1000)
        if func is cmd_train_fixed:
            p.add_argument("--n-train", type=int, default=15000)
        p.set_defaults(func=func)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    args.out.mkdir(parents=True, exist_ok=True)
    args.func(args)
    return 0


if __name__ == "__main__":
    sys.exit(main())
