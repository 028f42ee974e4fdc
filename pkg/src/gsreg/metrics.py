"""Evaluation criteria: Dice, HD95, MSE, NJD, parameter count, timing."""
from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .grid import (DisplacementField, ShapeError, as_grid, as_mask, jacobian_determinant,
                   warp_image, warp_labels)

EVAL_LABELS = (1, 2, 3)


def _pair(a, b):
    a, b = as_mask(a), as_mask(b)
    if a.shape != b.shape:
        raise ShapeError(f"mask shapes differ: {a.shape} vs {b.shape}")
    return a, b


def dice(a, b, label: int) -> float:
    """Overlap ``2|A & B| / (|A| + |B|)``; two empty sets score 1."""
    a, b = _pair(a, b)
    A, B = a == label, b == label
    total = int(A.sum()) + int(B.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(A, B).sum()) / total


def boundary(region: np.ndarray) -> np.ndarray:
    """Pixels of ``region`` with a 4-neighbour outside it (image edge counts as outside)."""
    eroded = ndimage.binary_erosion(region, structure=ndimage.generate_binary_structure(2, 1),
                                    border_value=0)
    return region & ~eroded


def directed_distances(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    """Euclidean distance from every ``src`` pixel to the nearest ``dst`` pixel."""
    edt = ndimage.distance_transform_edt(~dst)
    return edt[src]


def _boundary_distances(a, b, label):
    a, b = _pair(a, b)
    A, B = a == label, b == label
    if not A.any() or not B.any():
        raise ValueError(f"undefined distance: label {label} is empty in one of the masks")
    bA, bB = boundary(A), boundary(B)
    return directed_distances(bA, bB), directed_distances(bB, bA)


def percentile_lower(d: np.ndarray, q: float) -> float:
    return float(np.percentile(d, q, method="lower"))


def hd95(a, b, label: int) -> float:
    """Max of the two directed 95th-percentile boundary distances, in pixels."""
    d_ab, d_ba = _boundary_distances(a, b, label)
    return max(percentile_lower(d_ab, 95), percentile_lower(d_ba, 95))


def hausdorff(a, b, label: int) -> float:
    d_ab, d_ba = _boundary_distances(a, b, label)
    return float(max(d_ab.max(), d_ba.max()))


def mse(a, b) -> float:
    a, b = as_grid(a), as_grid(b)
    if a.shape != b.shape:
        raise ShapeError(f"image shapes differ: {a.shape} vs {b.shape}")
    return float(np.mean((a - b) ** 2))


def njd_percent(field: DisplacementField) -> float:
    det = jacobian_determinant(field)
    return 100.0 * np.count_nonzero(det < 0) / det.size


def param_count(model) -> int:
    return model.param_count()


def timing(fn, repetitions: int, warmup: int = 3) -> tuple[float, float]:
    """Mean and std wall-clock milliseconds of ``fn()``; warm-up calls are discarded."""
    if repetitions < 1:
        raise ValueError("repetitions must be >= 1")
    for _ in range(warmup):
        fn()
    times = []
    for _ in range(repetitions):
        t0 = time.perf_counter()
        fn()
        times.append((time.perf_counter() - t0) * 1e3)
    t = np.array(times)
    return float(t.mean()), float(t.std()) if len(t) > 1 else 0.0


def model_timing(model, pairs, repetitions: int = 10) -> tuple[float, float]:
    """Per-registration inference time over ``pairs`` of (fixed, moving)."""
    model.eval()
    pairs = list(pairs)
    state = {"i": 0}

    def run():
        f, m = pairs[state["i"] % len(pairs)]
        state["i"] += 1
        model.predict(f, m)

    return timing(run, repetitions)


@dataclass
class EvalReport:
    dice: dict[int, float]
    hd95: dict[int, float]
    mse: float
    njd_percent: float
    param_count: int = 0
    speed_ms: float = 0.0
    speed_std_ms: float = 0.0

    @property
    def dice_mean(self) -> float:
        return float(np.mean([self.dice[l] for l in EVAL_LABELS]))

    @property
    def hd95_mean(self) -> float:
        return float(np.mean([self.hd95[l] for l in EVAL_LABELS]))


def evaluate_case(moving, fixed, moving_mask, fixed_mask, field: DisplacementField) -> EvalReport:
    """Score one registered pair: warp the moving image/mask by ``field``."""
    warped = warp_image(moving, field)
    warped_mask = warp_labels(moving_mask, field)
    return EvalReport(
        dice={l: dice(warped_mask, fixed_mask, l) for l in EVAL_LABELS},
        hd95={l: hd95(warped_mask, fixed_mask, l) for l in EVAL_LABELS},
        mse=mse(warped, fixed),
        njd_percent=njd_percent(field),
    )
