"""Gradient strategies and the Adam update.

A strategy turns the similarity gradient ``g_sim`` and the regularisation
gradient ``g_reg`` (both :data:`~gsreg.autodiff.GradientSet`) into the
gradient that is handed to the optimizer.  ``LayerwiseProject`` is the
layer-wise gradient surgery rule; the others are the baselines it is
compared against.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import objective
from .autodiff import GradientSet, ParamGroup, Tape

NORM_GUARD = 1e-12
FLUSH = 1e-14


def project_if_conflict(g_sim: np.ndarray, g_reg: np.ndarray) -> np.ndarray:
    """Drop the component of ``g_sim`` that opposes ``g_reg``.

    Non-conflicting pairs (positive inner product) pass through untouched.
    Otherwise ``g_sim`` is projected onto the plane normal to ``g_reg``::

        g_sim - <g_sim, g_reg> / |g_reg|^2 * g_reg

    evaluated with the unit vector of ``g_reg`` and a second Gram-Schmidt
    pass; a residual at rounding level (near-antiparallel inputs) is
    returned as exact zeros.
    """
    g_sim = np.asarray(g_sim, dtype=np.float64)
    g_reg = np.asarray(g_reg, dtype=np.float64)
    if g_sim.shape != g_reg.shape:
        raise ValueError(f"gradient lengths differ: {g_sim.shape} vs {g_reg.shape}")
    if float(np.dot(g_sim, g_reg)) > 0:
        return g_sim
    norm = float(np.linalg.norm(g_reg))
    if norm < NORM_GUARD:
        return g_sim
    unit = g_reg / norm
    g = g_sim - float(np.dot(g_sim, unit)) * unit
    g = g - float(np.dot(g, unit)) * unit
    if np.linalg.norm(g) <= FLUSH * np.sqrt(g.size) * np.linalg.norm(g_sim):
        return np.zeros_like(g_sim)
    return g


def is_conflicting(g_sim: np.ndarray, g_reg: np.ndarray) -> bool:
    return float(np.dot(g_sim, g_reg)) < 0


# ---------------------------------------------------------------- strategies

@dataclass(frozen=True)
class LayerwiseProject:
    name = "LayerwiseProject"


@dataclass(frozen=True)
class GlobalProject:
    name = "GlobalProject"


@dataclass(frozen=True)
class AgrRandom:
    """Per-coordinate agreement test; disagreeing coordinates become noise.

    ``sigma=None`` uses the standard deviation of each group's similarity
    gradient.
    """

    sigma: float | None = None
    name = "AgrRandom"

    def __post_init__(self):
        if self.sigma is not None and not self.sigma > 0:
            raise ValueError(f"AgrRandom sigma must be > 0, got {self.sigma}")


@dataclass(frozen=True)
class WeightedSum:
    lam: float = 0.01
    name = "WeightedSum"

    def __post_init__(self):
        if not self.lam >= 0:
            raise ValueError(f"WeightedSum lambda must be >= 0, got {self.lam}")


@dataclass(frozen=True)
class SimilarityOnly:
    name = "SimilarityOnly"


Strategy = LayerwiseProject | GlobalProject | AgrRandom | WeightedSum | SimilarityOnly

# lambda presets for the weighted-sum baselines (large / medium / small)
VOXELMORPH_LAMBDAS = {"l": 0.1, "m": 0.01, "s": 0.001}


def strategy_label(s: Strategy) -> str:
    if isinstance(s, WeightedSum):
        return f"WeightedSum({s.lam:g})"
    if isinstance(s, AgrRandom) and s.sigma is not None:
        return f"AgrRandom({s.sigma:g})"
    return s.name


def parse_strategy(name: str, lam: float | None = None, sigma: float | None = None) -> Strategy:
    """``"WeightedSum(0.1)"`` style names are accepted as well as bare names."""
    name = name.strip()
    arg = None
    if name.endswith(")") and "(" in name:
        name, arg = name[:-1].split("(", 1)
        arg = float(arg)
    key = name.lower().replace("_", "").replace("-", "")
    if key in ("layerwiseproject", "layerwise", "gsmorph"):
        return LayerwiseProject()
    if key in ("globalproject", "global", "pcgrad", "gspcgrad"):
        return GlobalProject()
    if key in ("agrrandom", "agr", "gsagr"):
        return AgrRandom(arg if arg is not None else sigma)
    if key in ("weightedsum", "weighted", "voxelmorph"):
        lam_ = arg if arg is not None else lam
        return WeightedSum(0.01 if lam_ is None else lam_)
    if key in ("similarityonly", "simonly", "similarity"):
        return SimilarityOnly()
    raise ValueError(f"unknown strategy {name!r}")


def _check_keys(g_sim: GradientSet, g_reg: GradientSet):
    if g_sim.keys() != g_reg.keys():
        missing = sorted(set(g_sim) ^ set(g_reg))
        raise KeyError(f"gradient sets have different layer ids; unmatched: {missing}")
    for k in g_sim:
        if g_sim[k].shape != g_reg[k].shape:
            raise ValueError(f"layer {k!r}: gradient shapes {g_sim[k].shape} vs {g_reg[k].shape}")


def apply_strategy(strategy: Strategy, g_sim: GradientSet, g_reg: GradientSet,
                   rng: np.random.Generator | None = None) -> GradientSet:
    _check_keys(g_sim, g_reg)
    if isinstance(strategy, LayerwiseProject):
        return {k: project_if_conflict(g_sim[k], g_reg[k]) for k in g_sim}
    if isinstance(strategy, GlobalProject):
        keys = sorted(g_sim)
        flat = project_if_conflict(np.concatenate([g_sim[k] for k in keys]),
                                   np.concatenate([g_reg[k] for k in keys]))
        out, i = {}, 0
        for k in keys:
            n = g_sim[k].size
            out[k] = flat[i : i + n]
            i += n
        return {k: out[k] for k in g_sim}
    if isinstance(strategy, AgrRandom):
        if rng is None:
            raise ValueError("AgrRandom needs a random generator")
        out = {}
        for k in g_sim:
            gs, gr = g_sim[k], g_reg[k]
            sigma = strategy.sigma if strategy.sigma is not None else float(gs.std())
            agree = np.sign(gs) * np.sign(gr) >= 0
            noise = rng.normal(0.0, sigma, size=gs.shape) if sigma > 0 else np.zeros_like(gs)
            out[k] = np.where(agree, gs, noise)
        return out
    if isinstance(strategy, WeightedSum):
        return {k: g_sim[k] + strategy.lam * g_reg[k] for k in g_sim}
    if isinstance(strategy, SimilarityOnly):
        return dict(g_sim)
    raise TypeError(f"not a strategy: {strategy!r}")


def regroup(grads: GradientSet, groups: list[ParamGroup], granularity: str) -> GradientSet:
    """Re-key a per-layer gradient set at another granularity.

    ``per-tensor`` splits each layer into ``"<layer>/<tensor index>"`` keys,
    ``global`` joins everything (sorted layer order) under one key.
    """
    if granularity == "per-layer":
        return grads
    if granularity == "per-tensor":
        out = {}
        for g in groups:
            if g.layer_id in grads:
                for i, piece in enumerate(g.split(grads[g.layer_id])):
                    out[f"{g.layer_id}/{i}"] = piece.ravel()
        return out
    if granularity == "global":
        return {"global": np.concatenate([grads[k] for k in sorted(grads)])}
    raise ValueError(f"unknown granularity {granularity!r}")


def ungroup(grads: GradientSet, groups: list[ParamGroup], granularity: str) -> GradientSet:
    if granularity == "per-layer":
        return grads
    by_id = {g.layer_id: g for g in groups}
    if granularity == "per-tensor":
        out = {}
        for g in groups:
            parts = [grads[f"{g.layer_id}/{i}"] for i in range(len(g.tensors)) if f"{g.layer_id}/{i}" in grads]
            if parts:
                out[g.layer_id] = np.concatenate(parts)
        return out
    if granularity == "global":
        flat = grads["global"]
        out, i = {}, 0
        for k in sorted(by_id):
            n = by_id[k].size
            out[k] = flat[i : i + n]
            i += n
        return out
    raise ValueError(f"unknown granularity {granularity!r}")


# ---------------------------------------------------------------- optimizer

@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_step(groups: list[ParamGroup], grads: GradientSet, state: AdamState, lr: float) -> AdamState:
    """In-place Adam update of every trainable group with bias correction."""
    trainable = [g for g in groups if g.trainable]
    for g in trainable:
        if g.layer_id not in grads:
            raise KeyError(f"no gradient for layer {g.layer_id!r}")
        if grads[g.layer_id].shape != (g.size,):
            raise ValueError(f"layer {g.layer_id!r}: gradient {grads[g.layer_id].shape} vs {g.size} parameters")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for g in trainable:
        k = g.layer_id
        grad = grads[k]
        m = state.m.get(k, np.zeros(g.size))
        v = state.v.get(k, np.zeros(g.size))
        m = b1 * m + (1 - b1) * grad
        v = b2 * v + (1 - b2) * grad * grad
        state.m[k], state.v[k] = m, v
        delta = lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        for t, d in zip(g.tensors, g.split(delta)):
            t -= d
    return state


# ---------------------------------------------------------------- training

@dataclass
class StepReport:
    l_sim: float
    l_reg: float
    conflicted: int
    n_groups: int
    sim_norm: float
    reg_norm: float
    applied_norm: float
    conflicts: dict[str, bool]


@dataclass(frozen=True)
class LossConfig:
    similarity: str = "mse"
    window: int = 9


def compute_gradients(model, fixed, moving, loss_cfg: LossConfig = LossConfig()):
    """One forward pass, two backward passes.

    Returns ``(l_sim, l_reg, g_sim, g_reg)``.
    """
    tape = Tape()
    flow = model.forward(tape, fixed, moving)
    moving_b = np.asarray(moving, dtype=np.float64).reshape(flow.shape[0], 1, *flow.shape[2:])
    warped = ad.warp(tape.constant(moving_b), flow)
    fixed_b = np.asarray(fixed, dtype=np.float64).reshape(warped.shape)
    l_sim = objective.similarity(loss_cfg.similarity, warped, fixed_b, loss_cfg.window)
    l_reg = objective.smoothness_loss(flow)
    g_sim = tape.backward(l_sim, model.groups)
    g_reg = tape.backward(l_reg, model.groups)
    tape.clear()
    return float(l_sim.value), float(l_reg.value), g_sim, g_reg


def train_step(model, fixed, moving, strategy: Strategy, state: AdamState, lr: float,
               loss_cfg: LossConfig = LossConfig(), rng: np.random.Generator | None = None,
               granularity: str = "per-layer") -> StepReport:
    l_sim, l_reg, g_sim, g_reg = compute_gradients(model, fixed, moving, loss_cfg)
    groups = model.groups
    if isinstance(strategy, LayerwiseProject) and granularity != "per-layer":
        applied = ungroup(apply_strategy(strategy, regroup(g_sim, groups, granularity),
                                         regroup(g_reg, groups, granularity), rng), groups, granularity)
    else:
        applied = apply_strategy(strategy, g_sim, g_reg, rng)
    adam_step(groups, applied, state, lr)
    conflicts = {k: is_conflicting(g_sim[k], g_reg[k]) for k in g_sim}
    flat = lambda gs: float(np.sqrt(sum(float(np.dot(v, v)) for v in gs.values())))
    return StepReport(l_sim, l_reg, sum(conflicts.values()), len(conflicts),
                      flat(g_sim), flat(g_reg), flat(applied), conflicts)
