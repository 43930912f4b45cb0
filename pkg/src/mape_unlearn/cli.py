"""Command-line entry point (``mape-unlearn`` or ``python -m mape_unlearn``)."""

from __future__ import annotations

import argparse
import os
import sys
from dataclasses import replace
from pathlib import Path

from .config import ExperimentConfig, SuccessiveParams, preset
from .evalattack import METRIC_FIELDS, evaluate
from .harness import (
    ExperimentError,
    RunRecord,
    apply_method,
    export_plotdata,
    fmt,
    make_data,
    make_mask,
    method_label,
    run_many,
    train_original,
    write_csv,
)
from .maskselect import load_mask, save_mask
from .tinyformer import load_state, save_state

OUT_ENV = "MAPE_OUT_DIR"


def _out_dir(args, cfg: ExperimentConfig) -> str:
    return args.out or os.environ.get(OUT_ENV) or cfg.out_dir


def _load_config(args, scenario: str) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config) if args.config else preset(scenario)
    over = {"scenario": scenario}
    if args.seed is not None:
        over["seed"] = args.seed
    if args.sparsity:
        over["sparsities"] = [float(s) for s in args.sparsity.split(",")]
    if args.method:
        over["unlearn"] = replace(cfg.unlearn, method=args.method)
    cfg = replace(cfg, **over)
    return replace(cfg, out_dir=_out_dir(args, cfg))


def _common(p):
    p.add_argument("--config", help="experiment JSON document")
    p.add_argument("--seed", type=int, help="master seed override")
    p.add_argument("--sparsity", help="sparsity override (comma list for sweeps)")
    p.add_argument("--method", help="unlearning method override")
    p.add_argument("--out", help=f"output root (default: ${OUT_ENV} or the config's out_dir)")


def _print_metrics(rows, stream=sys.stdout):
    keys = list(rows[0])
    print(",".join(keys), file=stream)
    for r in rows:
        print(",".join(fmt(r[k]) for k in keys), file=stream)


def _prepared(cfg):
    bundle = make_data(cfg)
    star = train_original(cfg, bundle, Path(cfg.out_dir))
    return bundle, star


def cmd_train(args) -> int:
    cfg = _load_config(args, "single")
    bundle, star = _prepared(cfg)
    out = Path(args.output) if args.output else cfg.run_dir() / "theta_star.bin"
    out.parent.mkdir(parents=True, exist_ok=True)
    save_state(star, out)
    rep = evaluate(star, bundle.forget, bundle.retain, bundle.test)
    _print_metrics([{"model": str(out), **rep.metrics()}])
    return 0


def cmd_select_mask(args) -> int:
    cfg = _load_config(args, "single")
    bundle = make_data(cfg)
    state = load_state(args.model) if args.model else _prepared(cfg)[1]
    source = args.source or cfg.unlearn.mask_source
    if source == "none":
        print("error: a mask source is required (--source)", file=sys.stderr)
        return 2
    mask = make_mask(source, state, bundle, cfg.sparsities[0], cfg.unlearn.mask_path)
    out = Path(args.output) if args.output else cfg.run_dir() / f"mask_{source}.txt"
    out.parent.mkdir(parents=True, exist_ok=True)
    save_mask(mask, state.config, out)
    print(f"{out}: {mask.active_count()} of {mask.module_count} modules active")
    return 0


def cmd_unlearn(args) -> int:
    cfg = _load_config(args, "single")
    bundle = make_data(cfg)
    star = load_state(args.model) if args.model else _prepared(cfg)[1]
    hp = cfg.unlearn_hparams()
    mask = None
    if args.mask:
        mask = load_mask(args.mask)
    elif hp.mask_source != "none" and hp.method in ("GA", "GD", "NPO", "DPO", "MAPE-SO"):
        mask = make_mask(hp.mask_source, star, bundle, cfg.sparsities[0], hp.mask_path)
    out_state = apply_method(cfg, star, bundle, hp, mask)
    label = method_label(hp.method, mask is not None)
    out = Path(args.output) if args.output else cfg.run_dir() / f"{label}.bin"
    out.parent.mkdir(parents=True, exist_ok=True)
    save_state(out_state, out)
    rep = evaluate(out_state, bundle.forget, bundle.retain, bundle.test, reference=star)
    _print_metrics([{"model": str(out), "method": label, **rep.metrics()}])
    return 0


def cmd_evaluate(args) -> int:
    cfg = _load_config(args, "single")
    bundle = make_data(cfg)
    state = load_state(args.model)
    ref = load_state(args.reference) if args.reference else None
    rep = evaluate(state, bundle.forget, bundle.retain, bundle.test, reference=ref)
    row = {"model": args.model, **rep.metrics()}
    if args.output:
        write_csv(args.output, ("model",) + METRIC_FIELDS, [row])
    _print_metrics([row])
    return 0


def _scenario(args, scenario: str) -> int:
    if scenario == "successive" and args.batch:
        scenario = "batch"
    cfg = _load_config(args, scenario)
    if scenario in ("successive", "batch"):
        cfg = replace(cfg, successive=SuccessiveParams(
            num_requests=args.requests or cfg.successive.num_requests,
            mode=args.mode or cfg.successive.mode,
            refine=args.refine or cfg.successive.refine,
        ))
    if scenario == "relearn" and args.epochs is not None:
        cfg = replace(cfg, relearn=replace(cfg.relearn, epochs=args.epochs))
    if scenario == "relearn" and args.relearn_source:
        cfg = replace(cfg, relearn=replace(cfg.relearn, source=args.relearn_source))
    seeds = [int(s) for s in args.seeds.split(",")] if getattr(args, "seeds", None) else [cfg.seed]
    cfgs = [replace(cfg, seed=s) for s in seeds]
    records = run_many(cfgs, cfg.out_dir, jobs=getattr(args, "jobs", 1))
    for rec in records:
        print(rec.run_dir)
        _print_metrics(rec.metrics)
    return 0


def cmd_export(args) -> int:
    records = [RunRecord.load(p) for p in args.runs]
    rows = export_plotdata(records, args.output)
    print(f"{args.output}: {len(rows)} rows")
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="mape-unlearn", description=__doc__)
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train the original model")
    _common(p)
    p.add_argument("--output", help="model file to write")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("select-mask", help="select a module mask")
    _common(p)
    p.add_argument("--model", help="model file (default: train from the config)")
    p.add_argument("--source", choices=["MLR", "MLF", "SURE", "premask"])
    p.add_argument("--output", help="mask file to write")
    p.set_defaults(fn=cmd_select_mask)

    p = sub.add_parser("unlearn", help="apply one unlearning method")
    _common(p)
    p.add_argument("--model", help="model file (default: train from the config)")
    p.add_argument("--mask", help="mask file (default: the config's mask source)")
    p.add_argument("--output", help="model file to write")
    p.set_defaults(fn=cmd_unlearn)

    p = sub.add_parser("evaluate", help="split accuracies and membership score of a model")
    _common(p)
    p.add_argument("--model", required=True)
    p.add_argument("--reference", help="model to diff parameters against")
    p.add_argument("--output", help="CSV file to write")
    p.set_defaults(fn=cmd_evaluate)

    for name in ("successive", "relearn", "sweep"):
        p = sub.add_parser(name, help=f"run the {name} scenario")
        _common(p)
        p.add_argument("--seeds", help="comma-separated master seeds")
        p.add_argument("--jobs", type=int, default=1, help="worker processes")
        if name == "successive":
            p.add_argument("--requests", type=int)
            p.add_argument("--mode", choices=["iterative", "stored-info"])
            p.add_argument("--refine", action="store_true")
            p.add_argument("--batch", action="store_true",
                           help="remove all requests in one step instead")
        if name == "relearn":
            p.add_argument("--epochs", type=int)
            p.add_argument("--relearn-source", choices=["retain", "fresh"],
                           help="data the attacker fine-tunes on")
        p.set_defaults(fn=lambda a, n=name: _scenario(a, n))

    p = sub.add_parser("export", help="long-format plot data from run directories")
    p.add_argument("runs", nargs="+", help="run directories or record.json files")
    p.add_argument("--output", required=True)
    p.set_defaults(fn=cmd_export)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except ExperimentError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
