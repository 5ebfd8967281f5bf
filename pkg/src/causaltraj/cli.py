"""Command-line entry point.

Machine-readable results go under ``--out`` (or $CAUSALTRAJ_OUT when --out is
absent); a short summary goes to standard output.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
from pathlib import Path

import torch

from causaltraj.config import Config, EvalConfig, load_config
from causaltraj.data import PerturbationSpec, load_dataset, save_dataset
from causaltraj.evaluation import cross_domain_eval, evaluate, pipeline_factory, predict, run_ablation
from causaltraj.exceptions import CausalTrajError, UsageError
from causaltraj.metrics import METRIC_NAMES
from causaltraj.model import VARIANTS, variant_config
from causaltraj.perturb import perturb_dataset
from causaltraj.plotting import plot_scene
from causaltraj.plugin import ConstantVelocityBaseline, wrap
from causaltraj.synthetic import SPLIT_NAMES, cooccurrence_rate, generate_confounded_dataset
from causaltraj.training import Checkpoint, model_from_checkpoint, train_diffusion, train_full, train_predictor

OUT_ENV = "CAUSALTRAJ_OUT"
DEFAULT_OUT = "causaltraj_out"


def _out_dir(args) -> Path:
    root = args.out or os.environ.get(OUT_ENV) or DEFAULT_OUT
    path = Path(root)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _write_json(path: Path, obj) -> Path:
    path.write_text(json.dumps(obj, sort_keys=True, indent=2) + "\n")
    return path


def _config(args) -> Config:
    cfg = load_config(getattr(args, "config", None))
    seed = getattr(args, "seed", None)
    if seed is not None:
        cfg.train = dataclasses.replace(cfg.train, seed=seed)
        cfg.train_diffusion = dataclasses.replace(cfg.train_diffusion, seed=seed)
        cfg.eval = dataclasses.replace(cfg.eval, seed=seed)
    return cfg


def _metrics(text: str | None, base: EvalConfig) -> EvalConfig:
    if not text:
        return base
    names = tuple(n.strip() for n in text.split(",") if n.strip())
    for n in names:
        if n not in METRIC_NAMES:
            raise CausalTrajError(f"--metrics: unknown metric {n!r} (choose from {', '.join(METRIC_NAMES)})")
    return dataclasses.replace(base, metrics=names)


# ------------------------------------------------------------- commands


def cmd_generate(args) -> int:
    cfg = _config(args)
    out = _out_dir(args)
    data = generate_confounded_dataset(cfg.generator, args.seed)
    for name in SPLIT_NAMES:
        save_dataset(data[name], out, name)
    manifest = {"seed": args.seed, "generator": dataclasses.asdict(cfg.generator),
                "splits": {n: len(data[n]) for n in SPLIT_NAMES},
                "crosswalk_accelerate_agreement": {n: cooccurrence_rate(data[n]) for n in SPLIT_NAMES if data[n]}}
    _write_json(out / "manifest.json", manifest)
    print(f"wrote {', '.join(f'{n}={len(data[n])}' for n in SPLIT_NAMES)} scenes to {out}")
    return 0


def cmd_train_diffusion(args) -> int:
    cfg = _config(args)
    out = _out_dir(args)
    cfg.train_diffusion = dataclasses.replace(cfg.train_diffusion, log_path=str(out / "diffusion_log.csv"))
    if args.max_steps is not None:
        cfg.train_diffusion = dataclasses.replace(cfg.train_diffusion, max_steps=args.max_steps)
    scenes = load_dataset(args.data, args.split)
    ckpt = train_diffusion(scenes, cfg)
    path = ckpt.save(out / "diffusion.ckpt")
    print(f"stage 1: {ckpt.step} steps, final loss {ckpt.losses[-1]:.4f} -> {path}")
    return 0


def cmd_train(args) -> int:
    cfg = _config(args)
    out = _out_dir(args)
    cfg.model = variant_config(cfg.model, args.variant)
    cfg.train = dataclasses.replace(cfg.train, log_path=str(out / "train_log.csv"))
    if args.max_steps is not None:
        cfg.train = dataclasses.replace(cfg.train, max_steps=args.max_steps)
    scenes = load_dataset(args.data, args.split)
    diff = Checkpoint.load(args.diffusion_ckpt) if args.diffusion_ckpt else None
    ckpt = train_full(scenes, diff, cfg)
    path = ckpt.save(out / "model.ckpt")
    print(f"stage 2 (variant {args.variant}): {ckpt.step} steps, loss {ckpt.losses[0]:.3f} -> "
          f"{ckpt.losses[-1]:.3f} -> {path}")
    return 0


def _full_checkpoint(path: str) -> Checkpoint:
    ckpt = Checkpoint.load(path)
    if ckpt.stage != "full":
        raise UsageError(f"{path}: expected a stage-2 (full) checkpoint, got stage {ckpt.stage!r}")
    return ckpt


def cmd_eval(args) -> int:
    out = _out_dir(args)
    ckpt = _full_checkpoint(args.ckpt)
    cfg = load_config(args.config) if args.config else ckpt.full_config()
    ecfg = _metrics(args.metrics, cfg.eval)
    if args.seed is not None:
        ecfg = dataclasses.replace(ecfg, seed=args.seed)
    spec = PerturbationSpec.parse(args.perturb, seed=ecfg.seed)
    scenes = load_dataset(args.data, args.split)
    report = evaluate(model_from_checkpoint(ckpt), scenes, ecfg, spec, split=args.split,
                      fingerprint=ckpt.fingerprint)
    name = args.report or f"report_{args.split}.json"
    (out / name).write_text(report.to_json() + "\n")
    summary = ", ".join(f"{k}={v:.3f}" for k, v in sorted(report.metrics.items()))
    print(f"{args.split} ({report.n_scenes} scenes, perturbation {args.perturb}): {summary}")
    return 0


def cmd_ablate(args) -> int:
    cfg = _config(args)
    out = _out_dir(args)
    data = {s: load_dataset(args.data, s) for s in ("train", *args.splits)}
    perts = [PerturbationSpec.parse(p, seed=cfg.eval.seed) for p in args.perturb]
    reports = run_ablation(args.variant, data, cfg, args.splits, perts)
    _write_json(out / f"ablation_{args.variant}.json", {k: r.to_dict() for k, r in reports.items()})
    for k, r in reports.items():
        print(f"variant {args.variant} {k}: " + ", ".join(f"{m}={v:.3f}" for m, v in sorted(r.metrics.items())))
    return 0


def cmd_xdomain(args) -> int:
    cfg = _config(args)
    out = _out_dir(args)
    splits = {Path(p).name or str(p): load_dataset(p, args.split) for p in args.splits}
    if len(splits) != len(args.splits):
        raise CausalTrajError("--splits entries must have distinct names")
    cfg.model = variant_config(cfg.model, args.variant)
    report = cross_domain_eval(pipeline_factory(cfg), splits, cfg.eval, args.metric)
    (out / "xdomain.json").write_text(report.to_json() + "\n")
    for name, row in zip(report.domains, report.matrix):
        print(f"train {name}: " + ", ".join(f"{v:.3f}" for v in row))
    for pair, p in sorted(report.ks_pvalues.items()):
        print(f"KS {pair}: p={p:.3g}")
    return 0


def cmd_perturb(args) -> int:
    out = _out_dir(args)
    if args.kind == "noise":
        spec = PerturbationSpec("noise", alpha=args.alpha, rng_seed=args.seed)
    else:
        spec = PerturbationSpec("frame_drop", drop_fraction=args.fraction, rng_seed=args.seed)
    scenes = load_dataset(args.data, args.split)
    path = save_dataset(perturb_dataset(scenes, spec), out, args.split)
    _write_json(out / "perturbation.json", spec.to_dict())
    print(f"perturbed {len(scenes)} scenes ({args.kind}) -> {path}")
    return 0


def cmd_wrap_eval(args) -> int:
    cfg = _config(args)
    out = _out_dir(args)
    diff = Checkpoint.load(args.diffusion_ckpt)
    train = load_dataset(args.data, "train")
    h, t_f = train[0].t_h + 1, train[0].t_f
    results = {}
    trained = None
    for name in ("baseline", "wrapped"):
        torch.manual_seed(cfg.train.seed)
        base = ConstantVelocityBaseline(h, t_f, cfg.model.decoder.num_modes, cfg.model.encoders)
        if name == "wrapped" and args.mode == "fine-tune":
            # start from the trained baseline instead of a fresh initialisation
            base.load_state_dict(trained.state_dict())
        module = base if name == "baseline" else wrap(base, diff, args.n)
        if name == "baseline":
            base.spatial.load_state_dict({k[len("spatial."):]: v for k, v in diff.weights.items()
                                          if k.startswith("spatial.")})
        tc = dataclasses.replace(cfg.train, log_path=str(out / f"{name}_log.csv"))
        if args.max_steps is not None:
            tc = dataclasses.replace(tc, max_steps=args.max_steps)
        train_predictor(module, train, tc, lambda b, g, m=module: m(b, generator=g, seed=tc.seed))
        if name == "baseline":
            trained = base
        results[name] = {s: evaluate(module, load_dataset(args.data, s), cfg.eval, split=s).to_dict()
                         for s in args.splits}
    _write_json(out / "wrap_eval.json", results)
    for name, reps in results.items():
        for s, r in reps.items():
            print(f"{name} {s}: " + ", ".join(f"{m}={v:.3f}" for m, v in sorted(r["metrics"].items())))
    return 0


def cmd_plot(args) -> int:
    out = _out_dir(args)
    ckpt = _full_checkpoint(args.ckpt)
    model = model_from_checkpoint(ckpt)
    scenes = sorted(load_dataset(args.data, args.split), key=lambda s: s.scene_id)[: args.num]
    preds = predict(model, scenes, seed=args.seed or 0)
    paths = []
    for i, s in enumerate(scenes):
        paths.append(plot_scene(s, preds.modes[i], preds.probs[i], out / f"{s.scene_id}.png"))
    print(f"wrote {len(paths)} figures to {out}")
    return 0


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="causaltraj", description="Causal trajectory prediction toolkit.")
    sub = p.add_subparsers(dest="command", required=True, metavar="COMMAND")

    def common(sp, data=True, split="train"):
        sp.add_argument("--config", help="YAML or JSON config file")
        sp.add_argument("--out", help=f"output directory (default: ${OUT_ENV} or ./{DEFAULT_OUT})")
        sp.add_argument("--seed", type=int, default=None, help="overrides every seed in the config")
        if data:
            sp.add_argument("--data", required=True, help="dataset directory or .jsonl file")
            sp.add_argument("--split", default=split, help=f"split to read from a directory (default {split})")

    g = sub.add_parser("generate", help="write the synthetic confounded benchmark")
    common(g, data=False)
    g.set_defaults(func=cmd_generate, seed=0)

    td = sub.add_parser("train-diffusion", help="stage 1: fit the denoiser")
    common(td)
    td.add_argument("--max-steps", type=int, help="cap on optimiser steps")
    td.set_defaults(func=cmd_train_diffusion)

    tr = sub.add_parser("train", help="stage 2: train the full model with a frozen denoiser")
    common(tr)
    tr.add_argument("--diffusion-ckpt", help="stage-1 checkpoint (required unless --variant D)")
    tr.add_argument("--variant", choices=VARIANTS, default="E", help="ablation variant (default E)")
    tr.add_argument("--max-steps", type=int, help="cap on optimiser steps")
    tr.set_defaults(func=cmd_train)

    ev = sub.add_parser("eval", help="evaluate a checkpoint")
    common(ev, split="test_iid")
    ev.add_argument("--ckpt", required=True, help="stage-2 checkpoint")
    ev.add_argument("--metrics", help=f"comma-separated subset of {','.join(METRIC_NAMES)}")
    ev.add_argument("--perturb", default="none", help="none | noise:<alpha> | drop:<fraction>")
    ev.add_argument("--report", help="report file name inside --out")
    ev.set_defaults(func=cmd_eval)

    ab = sub.add_parser("ablate", help="train and evaluate one ablation variant")
    common(ab, split="train")
    ab.add_argument("--variant", choices=VARIANTS, required=True)
    ab.add_argument("--splits", nargs="+", default=["test_iid", "test_shifted"], help="test splits")
    ab.add_argument("--perturb", nargs="*", default=[], help="extra perturbation specs to evaluate")
    ab.set_defaults(func=cmd_ablate)

    xd = sub.add_parser("xdomain", help="train on each domain, evaluate on every domain, KS-test speeds")
    common(xd, data=False)
    xd.add_argument("--splits", nargs="+", required=True, help="one dataset directory per domain")
    xd.add_argument("--split", default="train", help="split file to read inside each directory")
    xd.add_argument("--variant", choices=VARIANTS, default="E")
    xd.add_argument("--metric", default="ade", choices=[m for m in METRIC_NAMES if m not in ("wsade", "wsfde")])
    xd.set_defaults(func=cmd_xdomain)

    pt = sub.add_parser("perturb", help="write a perturbed copy of a split")
    pt.add_argument("--kind", choices=["noise", "drop"], required=True)
    pt.add_argument("--alpha", type=float, default=0.0, help="noise scale")
    pt.add_argument("--fraction", type=float, default=0.0, help="fraction of history frames to drop")
    pt.add_argument("--seed", type=int, default=0)
    pt.add_argument("--data", required=True, help="dataset directory or .jsonl file")
    pt.add_argument("--split", default="test_iid")
    pt.add_argument("--out", help=f"output directory (default: ${OUT_ENV} or ./{DEFAULT_OUT})")
    pt.set_defaults(func=cmd_perturb)

    we = sub.add_parser("wrap-eval", help="train the reference baseline raw and wrapped, then compare")
    common(we, split="train")
    we.add_argument("--diffusion-ckpt", required=True)
    we.add_argument("--n", type=int, default=4, help="backdoor set size")
    we.add_argument("--splits", nargs="+", default=["test_iid", "test_shifted"])
    we.add_argument("--max-steps", type=int, help="cap on optimiser steps")
    we.add_argument("--mode", choices=["end-to-end", "fine-tune"], default="end-to-end",
                    help="train the wrapped baseline from scratch or from the trained raw baseline")
    we.set_defaults(func=cmd_wrap_eval)

    pl = sub.add_parser("plot", help="write trajectory figures for the first scenes of a split")
    common(pl, split="test_shifted")
    pl.add_argument("--ckpt", required=True)
    pl.add_argument("--num", type=int, default=4, help="number of scenes")
    pl.set_defaults(func=cmd_plot)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (CausalTrajError, ValueError, TypeError, ArithmeticError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
