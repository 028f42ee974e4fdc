"""Built-in checks run by ``gsreg selftest``.

Two suites: finite-difference gradient checks (see :mod:`gsreg.gradcheck`)
and randomized invariants of :func:`~gsreg.surgery.project_if_conflict`.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .gradcheck import TOL, primitive_checks, unet_check
from .surgery import NORM_GUARD, project_if_conflict

ORTH_TOL = 1e-10
SCALE_TOL = 1e-12


@dataclass
class SuiteResult:
    name: str
    failures: list[str] = field(default_factory=list)
    seconds: float = 0.0

    @property
    def ok(self) -> bool:
        return not self.failures


def random_pair(rng: np.random.Generator, max_dim: int = 4096) -> tuple[np.ndarray, np.ndarray]:
    """A gradient pair with mixed dimension and scale.

    About a third of the pairs are nearly antiparallel, the hardest case for
    the projection in floating point.
    """
    n = int(rng.integers(1, max_dim + 1)) if rng.random() < 0.7 else int(rng.integers(1, 5))
    g_sim = rng.normal(size=n) * 10 ** rng.uniform(-6, 6)
    g_reg = rng.normal(size=n) * 10 ** rng.uniform(-6, 6)
    if rng.random() < 0.3:
        wobble = 10 ** rng.uniform(-16, -2) * np.linalg.norm(g_sim) / np.sqrt(n) * 10 ** rng.uniform(-3, 3)
        g_reg = -g_sim * 10 ** rng.uniform(-3, 3) + wobble * rng.normal(size=n)
    return g_sim, g_reg


def projection_violations(g_sim: np.ndarray, g_reg: np.ndarray) -> list[str]:
    g = project_if_conflict(g_sim, g_reg)
    if np.dot(g_sim, g_reg) > 0 or np.linalg.norm(g_reg) < NORM_GUARD:
        return [] if g is g_sim or np.array_equal(g, g_sim) else ["pass-through input was modified"]
    out = []
    if np.dot(g, g_reg) < -ORTH_TOL * np.linalg.norm(g) * np.linalg.norm(g_reg):
        out.append("result still conflicts with g_reg")
    if np.linalg.norm(g) > np.linalg.norm(g_sim):
        out.append("result is longer than g_sim")
    if np.dot(g, g_sim) < 0:
        out.append("result opposes g_sim")
    return out


def scale_violations(g_sim: np.ndarray, g_reg: np.ndarray, scales=(1e-6, 1.0, 1e6)) -> list[str]:
    """Deviations are measured relative to ``|g_sim|``, which bounds the output.

    Scales that push ``|c * g_reg|`` under the zero-norm guard are skipped:
    there the guard, not the projection, decides the result.
    """
    scales = [c for c in scales if c * np.linalg.norm(g_reg) >= NORM_GUARD]
    ref = project_if_conflict(g_sim, g_reg)
    bound = SCALE_TOL * float(np.linalg.norm(g_sim))
    out = []
    for c in scales:
        d = float(np.linalg.norm(project_if_conflict(g_sim, c * g_reg) - ref))
        if d > bound:
            out.append(f"scale {c:g}: deviation {d:.3g}")
    return out


def projection_suite(n_pairs: int = 10_000, seed: int = 0) -> SuiteResult:
    t0 = time.perf_counter()
    res = SuiteResult("projection")
    rng = np.random.default_rng(seed)
    for i in range(n_pairs):
        g_sim, g_reg = random_pair(rng)
        res.failures += [f"pair {i} (dim {g_sim.size}): {m}" for m in projection_violations(g_sim, g_reg)]
        if i % 10 == 0:
            res.failures += [f"pair {i}: {m}" for m in scale_violations(g_sim, g_reg)]
    res.seconds = time.perf_counter() - t0
    return res


def gradient_suite(seed: int = 0) -> SuiteResult:
    t0 = time.perf_counter()
    res = SuiteResult("gradients")
    for name, errs in primitive_checks(seed).items():
        res.failures += [f"{name}[{k}]: rel error {e:.2e}" for k, e in errs.items() if not e < TOL]
    for sim in ("mse", "lncc"):
        res.failures += [f"unet/{sim}[{k}]: rel error {e:.2e}" for k, e in unet_check(seed, sim).items()
                         if not e < TOL]
    res.seconds = time.perf_counter() - t0
    return res


def run_all(seed: int = 0) -> list[SuiteResult]:
    return [gradient_suite(seed), projection_suite(seed=seed)]
