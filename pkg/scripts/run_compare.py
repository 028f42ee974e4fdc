"""Desk-scale strategy comparison.

    python3 scripts/run_compare.py --out runs/desk
    python3 scripts/run_compare.py --out runs/quick --epochs 5 --strategies LayerwiseProject,SimilarityOnly
"""
from __future__ import annotations

import argparse
import logging
import time
from dataclasses import dataclass, fields
from pathlib import Path

from gsreg.config import build_config
from gsreg.experiment import COMPARE_STRATEGIES, compare


@dataclass
class CompareJob:
    out: Path = Path("runs/desk")
    data: Path | None = None
    preset: str = "desk"
    epochs: int | None = None
    n_cases: int = 200
    seed: int = 0
    strategies: str = ",".join(COMPARE_STRATEGIES)


def parse() -> CompareJob:
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    for f in fields(CompareJob):
        ap.add_argument(f"--{f.name.replace('_', '-')}", default=f.default,
                        type=Path if f.name in ("out", "data") else (int if f.name in ("epochs", "n_cases", "seed") else str))
    return CompareJob(**vars(ap.parse_args()))


def main():
    job = parse()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    cfg = build_config({"n_cases": job.n_cases, "seed": job.seed}, preset=job.preset, epochs=job.epochs)
    data = job.data or job.out / "data"
    t0 = time.perf_counter()
    path = compare(cfg, job.out, data, tuple(s for s in job.strategies.split(",") if s))
    print(path.read_text(), end="")
    print(f"# {time.perf_counter() - t0:.0f} s")


if __name__ == "__main__":
    main()
