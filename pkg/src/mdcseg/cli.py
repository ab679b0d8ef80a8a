"""Command-line entry points.

Subcommands: gen-data, corrupt, train, eval, ablate, meta-size, verify.
Configs are flat JSON objects mirroring TrainConfig fields; logs are
JSONL. Exit code 0 only on success.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import asdict, replace

import numpy as np

from .data import (gen_synthetic, load_dataset, save_dataset, split)
from .network import load_checkpoint
from .noise import corrupt_mask, noise_config
from .rng import Rng, STREAM_NOISE
from .train import (TrainConfig, evaluate, ablate, meta_size_study,
                    prepare_benchmark, train, write_log)
from . import verify as verify_mod


def _load_config(path: str | None) -> TrainConfig:
    if path is None:
        return TrainConfig()
    with open(path) as fh:
        return TrainConfig.from_json(fh.read())


def cmd_gen_data(args) -> int:
    ds = gen_synthetic(args.n, getattr(args, "h"), args.w, args.seed)
    split(ds, metaval_frac=args.metaval_frac, test_frac=args.test_frac,
          seed=args.seed)
    save_dataset(ds, args.out)
    print(f"wrote {args.n} items to {args.out} "
          f"(train {len(ds.train_ids)}, metaval {len(ds.metaval_ids)}, "
          f"test {len(ds.test_ids)})")
    return 0


def cmd_corrupt(args) -> int:
    ds = load_dataset(args.data)
    cfg = noise_config(args.level)
    base = Rng(args.seed).derive(STREAM_NOISE).next_u64()
    rates = []
    for i in ds.train_ids:
        item = ds.items[i]
        item.noisy_mask = corrupt_mask(item.clean_mask, cfg, Rng(base ^ i))
        from .noise import corruption_rate
        rates.append(corruption_rate(item.clean_mask, item.noisy_mask))
    save_dataset(ds, args.data)
    print(f"corrupted {len(ds.train_ids)} train masks at level {args.level}%: "
          f"mean rate {np.mean(rates):.3f}")
    return 0


def _loss_curve_svg(log: list[dict], path: str) -> None:
    """Minimal SVG with the total loss and validation loss per step."""
    records = [r for r in log if "total" in r]
    if not records:
        return
    width, height, pad = 720, 360, 40
    series = {
        "total": [(r["step"], r["total"]) for r in records],
        "val": [(r["step"], r["val_loss"]) for r in records
                if r.get("val_loss") is not None],
    }
    colors = {"total": "#27627e", "val": "#c25d33"}
    xs = [s for s, _ in series["total"]]
    ys = [v for pts in series.values() for _, v in pts]
    if not ys:
        return
    x0, x1 = min(xs), max(xs) or 1
    y0, y1 = min(ys), max(ys)
    if y1 == y0:
        y1 = y0 + 1.0

    def sx(x):
        return pad + (x - x0) / max(x1 - x0, 1) * (width - 2 * pad)

    def sy(y):
        return height - pad - (y - y0) / (y1 - y0) * (height - 2 * pad)

    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" '
             f'height="{height}">',
             f'<rect width="{width}" height="{height}" fill="white"/>']
    for name, pts in series.items():
        if not pts:
            continue
        d = " ".join(f"{sx(x):.1f},{sy(v):.1f}" for x, v in pts)
        parts.append(f'<polyline fill="none" stroke="{colors[name]}" '
                     f'stroke-width="1.5" points="{d}"/>')
    parts.append(f'<text x="{pad}" y="20" font-size="13">loss per step '
                 f'(blue: total, orange: validation)</text>')
    parts.append("</svg>")
    with open(path, "w") as fh:
        fh.write("\n".join(parts))


def cmd_train(args) -> int:
    cfg = _load_config(args.config)
    if args.out is None:
        print("train requires --out", file=sys.stderr)
        return 2
    if cfg.data_dir:
        ds = load_dataset(cfg.data_dir)
    else:
        ds = prepare_benchmark(cfg)
    result = train(cfg, ds, out_dir=args.out)
    if args.plot:
        _loss_curve_svg(result.log, os.path.join(args.out, "loss_curve.svg"))
    summary = evaluate(result.params, cfg.net_config(), ds, dtype=cfg.dtype)
    print(json.dumps({"steps": len(result.log), "test_miou": summary.miou,
                      "test_dsc": summary.dsc, "test_hd": summary.hd}))
    return 0


def cmd_eval(args) -> int:
    netcfg, theta = load_checkpoint(args.ckpt)
    ds = load_dataset(args.data)
    summary = evaluate(theta, netcfg, ds)
    for rec in summary.per_image:
        print(json.dumps(rec))
    print(json.dumps({"mean_miou": summary.miou, "mean_dsc": summary.dsc,
                      "mean_hd": summary.hd}))
    return 0


def cmd_ablate(args) -> int:
    cfg = _load_config(args.config)
    rows = ablate(cfg, seeds=tuple(args.seeds))
    for row in rows:
        print(json.dumps(row))
    return 0


def cmd_meta_size(args) -> int:
    cfg = _load_config(args.config)
    rows = meta_size_study(cfg, fracs=tuple(args.fracs))
    for row in rows:
        out = dict(row)
        if out["cost_efficiency"] is None:
            out["cost_efficiency"] = "-"
        print(json.dumps(out))
    return 0


def cmd_verify(args) -> int:
    results = verify_mod.run_all(fast=args.fast,
                                 theorem1_lambda_scale=args.theorem1_lambda_scale)
    failed = 0
    for r in results:
        print(json.dumps({"check": r.name, "status": r.status, **r.measured}))
        failed += r.status == "fail"
    print(f"{len(results) - failed}/{len(results)} checks passed", file=sys.stderr)
    return 1 if failed else 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mdcseg",
                                description="Noise-robust segmentation at desk scale")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a synthetic dataset directory")
    g.add_argument("--n", type=int, default=100)
    g.add_argument("--h", type=int, default=64)
    g.add_argument("--w", type=int, default=64)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--metaval-frac", type=float, default=0.02)
    g.add_argument("--test-frac", type=float, default=0.2)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_data)

    c = sub.add_parser("corrupt", help="corrupt the train masks of a dataset")
    c.add_argument("--level", type=int, choices=(20, 40, 60), required=True)
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--data", required=True)
    c.set_defaults(func=cmd_corrupt)

    t = sub.add_parser("train", help="train a model")
    t.add_argument("--config", help="flat JSON config mirroring TrainConfig")
    t.add_argument("--out", required=True)
    t.add_argument("--plot", action="store_true",
                   help="write an SVG loss curve next to the log")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on a dataset's test split")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True)
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("ablate", help="run the module ablation")
    a.add_argument("--config", help="flat JSON config")
    a.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    a.set_defaults(func=cmd_ablate)

    m = sub.add_parser("meta-size", help="meta-set-size study")
    m.add_argument("--config", help="flat JSON config")
    m.add_argument("--fracs", type=float, nargs="+",
                   default=[0.01, 0.02, 0.05, 0.10])
    m.set_defaults(func=cmd_meta_size)

    v = sub.add_parser("verify", help="run the invariant verification suite")
    v.add_argument("--fast", action="store_true", help="trimmed case counts")
    v.add_argument("--theorem1-lambda-scale", type=float, default=0.5,
                   help="learning-rate scale relative to the stability bound")
    v.set_defaults(func=cmd_verify)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
