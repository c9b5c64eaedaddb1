"""Command line entry point: ``senc {synth,train,predict,score,gradcheck,ablate}``."""

from __future__ import annotations

import argparse
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

from .config import RunConfig
from .errors import SencError
from .synth import SynthConfig, generate_tile, save_tile, split_assignments, tile_seed, write_manifest


def worker_count() -> int:
    try:
        return max(1, int(os.environ.get("SENC_THREADS", "1")))
    except ValueError:
        return 1


def _run_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if getattr(args, "config", None) else RunConfig()
    overrides = {}
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise SencError(f"--set expects key=value, got {item!r}")
        key, val = item.split("=", 1)
        cfg = RunConfig.from_text(f"{key}={val}", base=cfg)
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    return cfg.with_overrides(**overrides)


def _gen_one(job):
    cfg, out, i = job
    save_tile(out, i, generate_tile(cfg, tile_seed(cfg.seed, i)))
    return i


def cmd_synth(args) -> int:
    cfg = SynthConfig(seed=args.seed or 0, size=args.size)
    fractions = tuple(float(x) for x in args.splits.split(","))
    splits = split_assignments(args.n_tiles, cfg.seed, fractions)
    out = Path(args.out)
    (out / "tiles").mkdir(parents=True, exist_ok=True)
    jobs = [(cfg, out, i) for i in range(args.n_tiles)]
    workers = worker_count()
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            list(pool.map(_gen_one, jobs))
    else:
        for job in jobs:
            _gen_one(job)
    write_manifest(out, splits)
    counts = {s: splits.count(s) for s in ("train", "val", "test")}
    print(f"wrote {args.n_tiles} tiles to {out} (train {counts['train']}, val {counts['val']}, test {counts['test']})")
    return 0


def cmd_train(args) -> int:
    from .train import train

    cfg = _run_config(args)

    def report(row):
        print(
            f"epoch {row['epoch']:3d}  loss {row['loss_total']:.4f}  "
            f"train F_avg {row['train_Favg']:.3f}  val F_avg {row['val_Favg']:.3f}",
            flush=True,
        )

    res = train(cfg, args.data, args.out, on_epoch=None if args.quiet else report)
    print(f"best epoch {res.best_epoch} (val F_avg {res.best_val:.4f}); checkpoint {res.checkpoint}")
    return 0


def cmd_predict(args) -> int:
    from .train import predict

    expected = _run_config(args) if args.config else None
    paths = predict(args.ckpt, args.data, args.out, expected=expected, split=args.split, inst_dir=args.inst_dir)
    print(f"wrote {len(paths)} prediction files to {args.out}")
    return 0


def cmd_score(args) -> int:
    from .train import score

    report = score(args.pred, args.data, num_classes=args.num_classes, split=args.split)
    print(report.to_text())
    if args.out:
        report.write_csv(args.out)
    return 0


def cmd_gradcheck(args) -> int:
    from .train import gradcheck

    cfg = _run_config(args)
    results = gradcheck(cfg, seed=cfg.seed, per_param=args.per_param)
    print(f"{'group':<12}{'checked':>8}  {'max rel err':>12}  result")
    for r in results:
        print(f"{r.group:<12}{r.n_checked:>8}  {r.max_rel_err:>12.3e}  {'PASS' if r.passed else 'FAIL'}")
    return 0 if all(r.passed for r in results) else 1


def cmd_ablate(args) -> int:
    from .train import ablate

    cfg = _run_config(args)
    seeds = [int(s) for s in args.seeds.split(",")]
    rows = ablate(cfg, args.data, seeds=seeds, out_dir=args.out, split=args.split)
    print(f"{'row':<10}  mean F_avg  " + "  ".join(f"seed {s}" for s in seeds))
    for r in rows:
        print(f"{r.name:<10}  {r.mean:10.4f}  " + "  ".join(f"{v:6.4f}" for v in r.scores))
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="senc", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, data=True, out=True, config=True):
        if config:
            sp.add_argument("--config", help="key=value run config file")
            sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
        sp.add_argument("--seed", type=int, default=None)
        if data:
            sp.add_argument("--data", required=True, help="dataset directory with manifest.csv")
        if out:
            sp.add_argument("--out", required=True)

    sp = sub.add_parser("synth", help="generate a synthetic dataset")
    common(sp, data=False, config=False)
    sp.add_argument("--n-tiles", type=int, default=100)
    sp.add_argument("--size", type=int, default=SynthConfig.size)
    sp.add_argument("--splits", default="0.7,0.1,0.2", help="train,val,test fractions")
    sp.set_defaults(func=cmd_synth)

    sp = sub.add_parser("train", help="train a model; writes model.ckpt and train_log.csv")
    common(sp)
    sp.add_argument("--quiet", action="store_true")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("predict", help="per-tile class probabilities")
    common(sp)
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--split", default=None, help="only tiles of this split")
    sp.add_argument("--inst-dir", default=None, help="external instance maps ({tile}.inst.grid)")
    sp.set_defaults(func=cmd_predict)

    sp = sub.add_parser("score", help="score predictions against ground truth")
    sp.add_argument("--pred", required=True, help="directory of {tile}.pred.csv files")
    sp.add_argument("--data", required=True, help="ground-truth dataset directory")
    sp.add_argument("--out", default=None, help="optional CSV report")
    sp.add_argument("--split", default=None)
    sp.add_argument("--num-classes", type=int, default=3)
    sp.set_defaults(func=cmd_score)

    sp = sub.add_parser("gradcheck", help="finite-difference check of every parameter group")
    common(sp, data=False, out=False)
    sp.add_argument("--per-param", type=int, default=4)
    sp.set_defaults(func=cmd_gradcheck)

    sp = sub.add_parser("ablate", help="train and test the four ablation rows")
    common(sp)
    sp.add_argument("--seeds", default="0,1,2")
    sp.add_argument("--split", default="test")
    sp.set_defaults(func=cmd_ablate)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (SencError, ValueError, OSError) as exc:
        print(f"senc {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
