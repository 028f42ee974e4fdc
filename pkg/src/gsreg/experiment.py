"""Training, evaluation and the strategy comparison protocol."""
from __future__ import annotations

import csv
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import io
from .config import RunConfig, dump_config
from .grid import DisplacementField, ShapeError
from .metrics import EVAL_LABELS, EvalReport, evaluate_case, model_timing
from .network import UNet, UNetConfig, build_unet
from .surgery import AdamState, LossConfig, train_step
from .synth import DeformSpec, PhantomSpec, make_dataset, read_manifest

log = logging.getLogger(__name__)

STEP_COLUMNS = ("epoch", "step", "l_sim", "l_reg", "conflicted", "n_groups",
                "sim_norm", "reg_norm", "applied_norm")
CASE_COLUMNS = ("case", "dice_lv", "dice_myo", "dice_rv", "dice_mean",
                "hd95_lv", "hd95_myo", "hd95_rv", "hd95_mean", "mse", "njd_percent")
COMPARE_COLUMNS = ("method", "dice_lv", "dice_myo", "dice_rv", "dice_mean", "hd95_mean",
                   "mse", "njd_percent", "params", "speed_ms")
TIMING_COLUMNS = ("speed_ms",)

# the strategies a comparison trains, in output order
COMPARE_STRATEGIES = ("LayerwiseProject", "GlobalProject", "AgrRandom", "WeightedSum(0.1)",
                      "WeightedSum(0.01)", "WeightedSum(0.001)", "SimilarityOnly")


class NumericError(RuntimeError):
    pass


def _fmt(v) -> str:
    return repr(float(v)) if isinstance(v, (float, np.floating)) else str(v)


def write_csv(path, columns, rows):
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([_fmt(r[c]) for c in columns])


# ---------------------------------------------------------------- data

@dataclass
class Split:
    names: list[str]
    fixed: np.ndarray        # (N, H, W)
    moving: np.ndarray
    fixed_mask: np.ndarray
    moving_mask: np.ndarray


def load_split(data_dir, split: str) -> Split:
    cases = read_manifest(data_dir)[split]
    if not cases:
        raise FileNotFoundError(f"{data_dir}: no cases in the {split!r} split")
    pairs = [io.read_case(c) for c in cases]
    return Split([c.name for c in cases],
                 np.stack([p.fixed for p in pairs]), np.stack([p.moving for p in pairs]),
                 np.stack([p.fixed_mask for p in pairs]), np.stack([p.moving_mask for p in pairs]))


def generate(cfg: RunConfig, data_dir=None) -> Path:
    pspec = PhantomSpec(noise_std=cfg.noise_std) if cfg.image_size == 64 else \
        PhantomSpec.paper_size(noise_std=cfg.noise_std) if cfg.image_size == 128 else \
        _scaled_phantom(cfg.image_size, cfg.noise_std)
    dspec = _scaled_deform(cfg.image_size)
    return make_dataset(data_dir or cfg.data_dir, cfg.n_cases, pspec, dspec, cfg.data_seed)


def _scaled_phantom(size: int, noise_std: float) -> PhantomSpec:
    s = size / 64.0
    return PhantomSpec(size=size, lv_radius=8.0 * s, myo_radius=12.5 * s, rv_offset=11.0 * s,
                       rv_radius=12.0 * s, body_radii=(26.0 * s, 22.0 * s), edge_width=0.6 * s,
                       jitter=2.0 * s, noise_std=noise_std)


def _scaled_deform(size: int) -> DeformSpec:
    s = size / 64.0
    d = DeformSpec()
    return DeformSpec(d.n_bumps, (d.amplitude[0] * s, d.amplitude[1] * s),
                      (d.sigma[0] * s, d.sigma[1] * s), d.max_shift * s, d.spread * s)


# ---------------------------------------------------------------- training

def new_model(cfg: RunConfig) -> UNet:
    return build_unet(UNetConfig.from_preset(cfg.preset, cfg.leaky_slope), cfg.seed)


def train(cfg: RunConfig, run_dir, data_dir=None, model=None, adam=None, start_epoch: int = 0):
    """Train on the train split; writes ``steps.csv`` and ``checkpoint/``."""
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "config.txt").write_text(dump_config(cfg))
    data = load_split(data_dir or cfg.data_dir, "train")
    if data.fixed.shape[1:] != (cfg.image_size, cfg.image_size):
        raise ShapeError(f"dataset images are {data.fixed.shape[1:]}, config expects "
                         f"{cfg.image_size}x{cfg.image_size}")
    model = model or new_model(cfg)
    adam = adam or AdamState()
    strategy = cfg.strategy_obj
    loss_cfg = LossConfig(cfg.similarity, cfg.window)
    model.train()
    rows = []
    n = len(data.names)
    step = adam.step
    for epoch in range(start_epoch, cfg.epochs):
        order = np.random.default_rng([cfg.seed, epoch]).permutation(n)
        for b in range(0, n, cfg.batch_size):
            idx = np.sort(order[b : b + cfg.batch_size])
            rng = np.random.default_rng([cfg.seed, 7, step])
            rep = train_step(model, data.fixed[idx], data.moving[idx], strategy, adam, cfg.lr,
                             loss_cfg, rng, cfg.granularity)
            if not (np.isfinite(rep.l_sim) and np.isfinite(rep.l_reg) and np.isfinite(rep.applied_norm)):
                raise NumericError(f"non-finite loss or gradient at epoch {epoch}, step {step}")
            rows.append({"epoch": epoch, "step": step, "l_sim": rep.l_sim, "l_reg": rep.l_reg,
                         "conflicted": rep.conflicted, "n_groups": rep.n_groups,
                         "sim_norm": rep.sim_norm, "reg_norm": rep.reg_norm,
                         "applied_norm": rep.applied_norm})
            step += 1
        if rows:
            log.info("%s epoch %d: l_sim %.5f l_reg %.5f conflicted %d/%d", cfg.label, epoch,
                     rows[-1]["l_sim"], rows[-1]["l_reg"], rows[-1]["conflicted"], rows[-1]["n_groups"])
    write_csv(run_dir / "steps.csv", STEP_COLUMNS, rows)
    io.save_checkpoint(run_dir / "checkpoint", model, cfg.to_dict(), adam, {"epoch": cfg.epochs})
    return model, adam


# ---------------------------------------------------------------- evaluation

def predict_fields(model, fixed: np.ndarray, moving: np.ndarray, chunk: int = 8) -> np.ndarray:
    model.eval()
    out = [model.predict(fixed[i : i + chunk], moving[i : i + chunk]) for i in range(0, len(fixed), chunk)]
    return np.concatenate(out)


def _case_row(name, rep: EvalReport) -> dict:
    keys = dict(zip(EVAL_LABELS, ("lv", "myo", "rv")))
    row = {"case": name, "dice_mean": rep.dice_mean, "hd95_mean": rep.hd95_mean,
           "mse": rep.mse, "njd_percent": rep.njd_percent}
    for l, k in keys.items():
        row[f"dice_{k}"] = rep.dice[l]
        row[f"hd95_{k}"] = rep.hd95[l]
    return row


def evaluate(model, data: Split, out_csv=None, timing_reps: int = 10) -> dict:
    """Score ``model`` on ``data`` (``model=None`` scores the unregistered pairs)."""
    if model is None:
        fields = np.zeros((len(data.names), 2) + data.fixed.shape[1:])
    else:
        fields = predict_fields(model, data.fixed, data.moving)
    rows = []
    for i, name in enumerate(data.names):
        field = DisplacementField.from_array(fields[i])
        rep = evaluate_case(data.moving[i], data.fixed[i], data.moving_mask[i], data.fixed_mask[i], field)
        rows.append(_case_row(name, rep))
    if out_csv is not None:
        write_csv(out_csv, CASE_COLUMNS, rows)
    summary = {c: float(np.mean([r[c] for r in rows])) for c in CASE_COLUMNS[1:]}
    if model is None:
        summary.update(params=0, speed_ms=0.0, speed_std_ms=0.0)
    else:
        pairs = [(data.fixed[i], data.moving[i]) for i in range(len(data.names))]
        mean_ms, std_ms = model_timing(model, pairs, timing_reps)
        summary.update(params=model.param_count(), speed_ms=mean_ms, speed_std_ms=std_ms)
    return summary


# ---------------------------------------------------------------- comparison

def _run_one(args):
    cfg, run_dir, data_dir = args
    model, _ = train(cfg, run_dir, data_dir)
    test = load_split(data_dir, "test")
    summary = evaluate(model, test, Path(run_dir) / "eval.csv", cfg.timing_reps)
    return cfg.label, summary


def compare(cfg: RunConfig, out_dir, data_dir=None, strategies=COMPARE_STRATEGIES,
            threads: int | None = None) -> Path:
    """Train one model per strategy on the same data and seed; merge the scores.

    Writes ``compare.csv`` with an ``Initial`` row (no deformation) first.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    data_dir = Path(data_dir or cfg.data_dir)
    if not (data_dir / "manifest.txt").exists():
        generate(cfg, data_dir)
    test = load_split(data_dir, "test")
    rows = [{"method": "Initial", **evaluate(None, test, out / "initial_eval.csv")}]
    jobs = []
    for s in strategies:
        run_cfg = cfg.with_updates(strategy=s)
        jobs.append((run_cfg, out / _dirname(run_cfg.label), data_dir))
    if threads is None:
        threads = int(os.environ.get("GSREG_THREADS", "1"))
    if threads > 1:
        with ProcessPoolExecutor(max_workers=threads) as ex:
            results = list(ex.map(_run_one, jobs))
    else:
        results = [_run_one(j) for j in jobs]
    for label, summary in results:
        rows.append({"method": label, **summary})
    path = out / "compare.csv"
    write_csv(path, COMPARE_COLUMNS, rows)
    return path


def _dirname(label: str) -> str:
    return label.replace("(", "_").replace(")", "").replace(".", "p")
