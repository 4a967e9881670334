"""Command-line entry points.

Exit codes: 0 success, 1 runtime failure, 2 usage or missing prerequisite.
``AST_THREADS`` (default 1) caps BLAS threads; only the single-threaded mode
is guaranteed to reproduce outputs byte for byte.
"""

import argparse
import logging
import os
import shutil
import sys

from threadpoolctl import threadpool_limits

from . import config as config_mod
from . import runs, synthdata
from .errors import AstError, ConfigurationError, InvariantError, StageMissing, TrainingDivergence

log = logging.getLogger("astocda")


def _load_config(path, seed=None):
    if path is None:
        cfg = config_mod.RunConfig()
    else:
        cfg = config_mod.load(path)
    if seed is not None:
        raw = cfg.to_dict()
        explicit_data_seed = raw["data"]["seed"] != raw["seed"]
        raw["seed"] = seed
        if not explicit_data_seed:
            raw["data"]["seed"] = seed
        cfg = config_mod.from_dict(raw)
    return cfg


def cmd_gen_data(args):
    cfg = _load_config(args.config, args.seed)
    out = args.out
    if os.path.isdir(out) and os.listdir(out):
        if not args.force:
            raise ConfigurationError(f"{out!r} exists and is not empty; pass --force to overwrite")
        shutil.rmtree(out)
    man = synthdata.write_dataset(cfg.data, out)
    counts = {}
    for e in man["splits"]:
        counts[e["name"]] = counts.get(e["name"], 0) + len(e["seeds"])
    print(f"wrote {sum(counts.values())} samples to {out} ({', '.join(f'{k}={v}' for k, v in counts.items())})")
    print(f"manifest hash {synthdata.manifest_hash(out)}")


def _open_run(args):
    cfg = _load_config(args.config, args.seed) if args.config or args.seed is not None else None
    return runs.Run(args.out if hasattr(args, "out") and args.out else args.run, cfg)


def _stage(fn):
    def run_stage(args):
        run = _open_run(args)
        splits = run.bind_data(args.data)
        fn(run, splits)
        print(f"{args.command}: done ({run.path})")

    return run_stage


def cmd_adapt(args):
    run = _open_run(args)
    splits = run.bind_data(args.data)
    rows = runs.adapt(run, splits)
    for r in rows:
        parts = [f"epoch {int(r['epoch'])}"] + [f"{k} {r[k]:.4f}" for k in ("miou_compound", "miou_open") if k in r]
        print("  ".join(parts))


def cmd_ddm(args):
    run = _open_run(args)
    splits = run.bind_data(args.data)
    rows = runs.ddm_study(run, splits, args.phase)
    print("layer  spatial  latent")
    for r in rows:
        print(f"{r.layer:5d}  {r.spatial_ddm:7.3f}  {r.latent_ddm:6.3f}")


def cmd_eval(args):
    run = runs.Run(args.run)
    splits = run.bind_data(args.data)
    res, mode = runs.evaluate(run, splits, args.split)
    print(f"split {args.split} (mode {mode})")
    print("class  IoU")
    for k, v in enumerate(res.iou):
        print(f"{k:5d}  {'  n/a' if v != v else f'{v:.4f}'}")
    for dom, v in res.per_domain.items():
        print(f"{dom:>8s}  mIoU {v:.4f}")
    print(f"mIoU {res.miou:.4f}")


def cmd_check(args):
    run = runs.Run(args.run)
    ok, lines = runs.check(run)
    for line in lines:
        print(line)
    if not ok:
        print("pre-adaptation latent discriminability fell below spatial at some layer", file=sys.stderr)
        return 1
    return 0


def build_parser():
    p = argparse.ArgumentParser(prog="astocda", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log stage progress")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate the synthetic benchmark")
    g.add_argument("--config")
    g.add_argument("--out", required=True)
    g.add_argument("--force", action="store_true")
    g.add_argument("--seed", type=int)
    g.set_defaults(func=cmd_gen_data)

    stages = {
        "train-erm": (_stage(runs.train_erm), "source-only segmentor training"),
        "train-ast": (_stage(runs.train_ast), "AST auto-encoder pretraining at both sites"),
        "preadapt": (_stage(runs.preadapt), "pre-adaptation on source and target"),
        "adapt": (cmd_adapt, "Simulate-then-Normalize adaptation epochs"),
    }
    for name, (fn, help_) in stages.items():
        s = sub.add_parser(name, help=help_)
        s.add_argument("--config", help="run config JSON (required for a new run directory)")
        s.add_argument("--data", help="dataset directory (recorded on first use)")
        s.add_argument("--out", required=True, help="run directory")
        s.add_argument("--seed", type=int)
        s.set_defaults(func=fn)

    d = sub.add_parser("ddm", help="domain-discriminability study")
    d.add_argument("--config")
    d.add_argument("--run", required=True)
    d.add_argument("--data")
    d.add_argument("--phase", choices=["pre", "post"], required=True)
    d.add_argument("--seed", type=int)
    d.set_defaults(func=cmd_ddm)

    e = sub.add_parser("eval", help="evaluate the latest stage of a run")
    e.add_argument("--run", required=True)
    e.add_argument("--data")
    e.add_argument("--split", required=True, help="compound, open, source or compound_train")
    e.set_defaults(func=cmd_eval)

    c = sub.add_parser("check", help="assert latent DDM >= spatial DDM - 0.02 on the pre-adaptation CSV")
    c.add_argument("--run", required=True)
    c.set_defaults(func=cmd_check)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    threads = int(os.environ.get("AST_THREADS", "1"))
    try:
        with threadpool_limits(max(1, threads)):
            code = args.func(args)
    except (ConfigurationError, StageMissing) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (TrainingDivergence, InvariantError, AstError) as exc:
        print(f"failed: {exc}", file=sys.stderr)
        return 1
    return code or 0


if __name__ == "__main__":
    sys.exit(main())
