"""``gsreg`` command-line entry point."""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import experiment, io
from .config import ConfigError, RunConfig, build_config, load_config
from .grid import DisplacementField, ShapeError, warp_image
from .network import PRESETS

log = logging.getLogger("gsreg")

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC, EXIT_SELFTEST, EXIT_SHAPE = 0, 2, 3, 4, 5, 6

CSV_HELP = f"""\
output CSVs (all with a header row; distances in pixels, unit spacing):
  steps.csv    {', '.join(experiment.STEP_COLUMNS)}
  eval.csv     {', '.join(experiment.CASE_COLUMNS)}
  compare.csv  {', '.join(experiment.COMPARE_COLUMNS)}

exit codes: 0 ok, 2 config error, 3 I/O error, 4 numeric failure,
            5 selftest failure, 6 dimension mismatch
"""


def _common(p: argparse.ArgumentParser):
    p.add_argument("--config", metavar="PATH", help="key = value config file")
    p.add_argument("--out", metavar="DIR", help="output directory")
    p.add_argument("--seed", type=int, metavar="N",
                   help="model/shuffle seed (for gen: the dataset seed)")
    p.add_argument("--strategy", metavar="NAME", help="e.g. LayerwiseProject, WeightedSum(0.01)")
    p.add_argument("--preset", choices=sorted(PRESETS))


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="gsreg", description="2-D deformable registration with "
                                 "layer-wise gradient projection.", epilog=CSV_HELP,
                                 formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("-q", "--quiet", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)
    raw = argparse.RawDescriptionHelpFormatter

    p = sub.add_parser("gen", help="write a synthetic dataset", epilog=CSV_HELP, formatter_class=raw)
    _common(p)

    p = sub.add_parser("train", help="train one model", epilog=CSV_HELP, formatter_class=raw)
    _common(p)
    p.add_argument("--data", metavar="DIR", help="dataset directory (default: config data_dir)")
    p.add_argument("--resume", metavar="CHECKPOINT", help="continue from a checkpoint directory")

    p = sub.add_parser("register", help="register one image pair", epilog=CSV_HELP, formatter_class=raw)
    _common(p)
    p.add_argument("--checkpoint", required=True, metavar="DIR")
    p.add_argument("--fixed", required=True, metavar="PGM")
    p.add_argument("--moving", required=True, metavar="PGM")

    p = sub.add_parser("eval", help="score a checkpoint on the test split", epilog=CSV_HELP,
                       formatter_class=raw)
    _common(p)
    p.add_argument("--checkpoint", metavar="DIR", help="omit to score the unregistered pairs")
    p.add_argument("--data", metavar="DIR")

    p = sub.add_parser("compare", help="train every strategy on shared data and seeds",
                       epilog=CSV_HELP, formatter_class=raw)
    _common(p)
    p.add_argument("--data", metavar="DIR")
    p.add_argument("--strategies", metavar="LIST",
                   help="comma-separated subset (default: all seven)")

    p = sub.add_parser("selftest", help="gradient checks and projection properties")
    p.add_argument("--seed", type=int, default=0, metavar="N")
    return ap


def _config(args) -> RunConfig:
    overrides = {"strategy": args.strategy, "preset": args.preset}
    if args.seed is not None:
        overrides["data_seed" if args.command == "gen" else "seed"] = args.seed
    if args.config:
        return load_config(args.config, **overrides)
    return build_config({}, **overrides)


def cmd_gen(args, cfg: RunConfig) -> int:
    out = Path(args.out or cfg.data_dir)
    experiment.generate(cfg, out)
    log.info("wrote %d cases to %s", cfg.n_cases, out)
    return EXIT_OK


def cmd_train(args, cfg: RunConfig) -> int:
    run_dir = Path(args.out or Path(cfg.out_dir) / experiment._dirname(cfg.label))
    model = adam = None
    start = 0
    if args.resume:
        model, adam, _, extra = io.load_checkpoint(args.resume)
        start = int(extra.get("epoch", 0))
    experiment.train(cfg, run_dir, args.data or cfg.data_dir, model, adam, start)
    log.info("checkpoint written to %s", run_dir / "checkpoint")
    return EXIT_OK


def cmd_register(args, cfg: RunConfig) -> int:
    model, _, _, _ = io.load_checkpoint(args.checkpoint)
    fixed, moving = io.read_pgm(args.fixed), io.read_pgm(args.moving)
    if fixed.shape != moving.shape:
        raise ShapeError(f"fixed {fixed.shape} and moving {moving.shape} differ")
    u = model.eval().predict(fixed, moving)[0]
    if not np.all(np.isfinite(u)):
        raise experiment.NumericError("predicted field contains NaN/Inf")
    field = DisplacementField.from_array(u)
    out = Path(args.out or ".")
    out.mkdir(parents=True, exist_ok=True)
    io.write_pgm(out / "warped.pgm", warp_image(moving, field))
    io.write_field(out / "field.gsmf", field)
    log.info("wrote %s and %s", out / "warped.pgm", out / "field.gsmf")
    return EXIT_OK


def cmd_eval(args, cfg: RunConfig) -> int:
    model = io.load_checkpoint(args.checkpoint)[0] if args.checkpoint else None
    out = Path(args.out or ".")
    out.mkdir(parents=True, exist_ok=True)
    test = experiment.load_split(args.data or cfg.data_dir, "test")
    summary = experiment.evaluate(model, test, out / "eval.csv", cfg.timing_reps)
    for k in experiment.COMPARE_COLUMNS[1:]:
        print(f"{k} = {summary[k]!r}")
    return EXIT_OK


def cmd_compare(args, cfg: RunConfig) -> int:
    strategies = experiment.COMPARE_STRATEGIES
    if args.strategies:
        strategies = tuple(s.strip() for s in args.strategies.split(",") if s.strip())
    elif args.strategy:
        strategies = (args.strategy,)
    for s in strategies:
        cfg.with_updates(strategy=s)  # validates the name
    path = experiment.compare(cfg, args.out or cfg.out_dir, args.data or cfg.data_dir, strategies)
    print(path.read_text(), end="")
    return EXIT_OK


def cmd_selftest(args) -> int:
    from .selftest import run_all

    ok = True
    for res in run_all(args.seed):
        status = "ok" if res.ok else f"FAILED ({len(res.failures)})"
        print(f"{res.name}: {status} in {res.seconds:.2f}s")
        for f in res.failures[:20]:
            print(f"  {f}")
        ok &= res.ok
    return EXIT_OK if ok else EXIT_SELFTEST


COMMANDS = {"gen": cmd_gen, "train": cmd_train, "register": cmd_register,
            "eval": cmd_eval, "compare": cmd_compare}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        if args.command == "selftest":
            return cmd_selftest(args)
        cfg = _config(args)
        return COMMANDS[args.command](args, cfg)
    except ConfigError as e:
        print(f"gsreg: config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except ShapeError as e:
        print(f"gsreg: dimension mismatch: {e}", file=sys.stderr)
        return EXIT_SHAPE
    except experiment.NumericError as e:
        print(f"gsreg: numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, io.FormatError, KeyError) as e:
        print(f"gsreg: I/O error: {e}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
