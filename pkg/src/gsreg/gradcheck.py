"""Central finite-difference checks of the autodiff primitives and losses.

Used by the test-suite and by ``gsreg selftest``.  Each check wraps its
inputs as trainable parameter groups, so a single ``Tape.backward`` yields the
analytic gradient for every input, which is then compared against central
differences of the same scalar function.
"""
from __future__ import annotations

from typing import Callable

import numpy as np

from . import autodiff as ad
from . import objective
from .autodiff import BatchNormState, ParamGroup, Tape
from .network import UNet, UNetConfig

STEP = 1e-5
TOL = 1e-4
# gradients whose analytic and numeric norms are both below this are
# considered equal (finite-difference noise is ~1e-11 per entry)
ABS_FLOOR = 1e-6


def numeric_grad(f: Callable[[], float], x: np.ndarray, step: float = STEP) -> np.ndarray:
    g = np.zeros_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + step
        fp = f()
        flat[i] = old - step
        fm = f()
        flat[i] = old
        gflat[i] = (fp - fm) / (2 * step)
    return g


def rel_error(a: np.ndarray, b: np.ndarray) -> float:
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if max(na, nb) < ABS_FLOOR:
        return 0.0
    return float(np.linalg.norm(a - b) / max(na, nb))


def gradcheck(fn: Callable[[Tape, dict], ad.Tensor], inputs: dict[str, np.ndarray],
              step: float = STEP) -> dict[str, float]:
    """Relative error of the analytic gradient, per input array."""
    groups = {k: ParamGroup(k, [v]) for k, v in inputs.items()}

    def run():
        tape = Tape()
        return tape, fn(tape, {k: tape.param(g, 0) for k, g in groups.items()})

    tape, loss = run()
    analytic = tape.backward(loss, list(groups.values()))
    scalar = lambda: float(run()[1].value)
    return {k: rel_error(analytic[k].reshape(inputs[k].shape), numeric_grad(scalar, inputs[k], step))
            for k in inputs}


def _projected(out: ad.Tensor, seed: int = 99) -> ad.Tensor:
    """Scalar ``sum(out * R)`` with a fixed random ``R``."""
    r = np.random.default_rng(seed).normal(size=out.shape)
    return ad.sum_all(ad.mul(out, r))


def primitive_checks(seed: int = 0) -> dict[str, dict[str, float]]:
    rng = np.random.default_rng(seed)
    x = lambda *s: rng.normal(size=s)
    shape = (2, 4, 6, 6)
    checks: dict[str, tuple] = {}

    checks["conv2d"] = (lambda t, v: _projected(ad.conv2d(v["x"], v["w"], v["b"])),
                        {"x": x(*shape), "w": x(3, 4, 3, 3), "b": x(3)})
    checks["conv2d_wide_out"] = (lambda t, v: _projected(ad.conv2d(v["x"], v["w"], v["b"])),
                                 {"x": x(*shape), "w": x(6, 4, 3, 3), "b": x(6)})
    checks["conv2d_stride2"] = (lambda t, v: _projected(ad.conv2d(v["x"], v["w"], v["b"], stride=2)),
                                {"x": x(*shape), "w": x(3, 4, 3, 3), "b": x(3)})
    for mode in ("train", "eval"):
        state = BatchNormState(4)
        state.mean, state.var = rng.normal(size=4), rng.uniform(0.5, 2.0, size=4)
        checks[f"batch_norm_{mode}"] = (
            lambda t, v, mode=mode, state=state: _projected(ad.batch_norm(v["x"], v["scale"], v["shift"], mode, state)),
            {"x": x(*shape), "scale": x(4), "shift": x(4)})
    checks["leaky_relu"] = (lambda t, v: _projected(ad.leaky_relu(v["x"], 0.01)), {"x": x(*shape)})
    checks["maxpool2"] = (lambda t, v: _projected(ad.maxpool2(v["x"])), {"x": x(*shape)})
    checks["upsample_nearest2"] = (lambda t, v: _projected(ad.upsample_nearest2(v["x"])), {"x": x(*shape)})
    checks["concat_channels"] = (lambda t, v: _projected(ad.concat_channels(v["a"], v["b"])),
                                 {"a": x(*shape), "b": x(2, 3, 6, 6)})
    checks["warp"] = (lambda t, v: _projected(ad.warp(v["img"], v["flow"])),
                      {"img": x(2, 1, 6, 6), "flow": rng.uniform(-2.3, 2.3, size=(2, 2, 6, 6))})
    checks["box_sum"] = (lambda t, v: _projected(ad.box_sum(v["x"], 3)), {"x": x(*shape)})
    checks["forward_diff"] = (lambda t, v: _projected(ad.forward_diff(v["x"], -1) + ad.forward_diff(v["x"], -2)),
                              {"x": x(*shape)})
    checks["elementwise"] = (
        lambda t, v: _projected(ad.div(ad.square(v["a"]) * v["b"] - v["a"], ad.square(v["b"]) + 1.0)),
        {"a": x(*shape), "b": x(*shape)})
    checks["mean"] = (lambda t, v: ad.mean(ad.square(v["x"])), {"x": x(*shape)})

    checks["mse_loss"] = (lambda t, v: objective.mse_loss(v["warped"], v["fixed"]),
                          {"warped": x(2, 1, 8, 8), "fixed": x(2, 1, 8, 8)})
    checks["lncc_loss"] = (lambda t, v: objective.lncc_loss(v["warped"], v["fixed"], 3),
                           {"warped": x(2, 1, 8, 8), "fixed": x(2, 1, 8, 8)})
    checks["smoothness_loss"] = (lambda t, v: objective.smoothness_loss(v["u"]), {"u": x(2, 2, 8, 8)})
    # losses through the spatial transformer: gradient w.r.t. the displacement
    moving = rng.random((2, 1, 8, 8))
    fixed = rng.random((2, 1, 8, 8))
    checks["mse_through_warp"] = (
        lambda t, v: objective.mse_loss(ad.warp(t.constant(moving), v["u"]), fixed),
        {"u": rng.uniform(-1.7, 1.7, size=(2, 2, 8, 8))})
    checks["lncc_through_warp"] = (
        lambda t, v: objective.lncc_loss(ad.warp(t.constant(moving), v["u"]), fixed, 5),
        {"u": rng.uniform(-1.7, 1.7, size=(2, 2, 8, 8))})
    return {name: gradcheck(fn, inputs) for name, (fn, inputs) in checks.items()}


def tiny_unet(seed: int = 0) -> UNet:
    """Widths (2, 4) U-Net with a randomised head so every group has signal."""
    net = UNet(UNetConfig((2, 4), 0.2, "tiny"), seed)
    rng = np.random.default_rng(seed + 1)
    net.head.group.tensors[0][...] = rng.normal(0, 0.3, net.head.group.tensors[0].shape)
    net.head.group.tensors[1][...] = rng.normal(0, 0.1, 2)
    return net


def unet_check(seed: int = 0, similarity: str = "mse") -> dict[str, float]:
    """End-to-end check of ``L_sim + L_reg`` through a tiny U-Net, per group."""
    rng = np.random.default_rng(seed)
    net = tiny_unet(seed)
    fixed = rng.random((2, 1, 8, 8))
    moving = rng.random((2, 1, 8, 8))

    def loss(tape):
        u = net.forward(tape, fixed, moving)
        warped = ad.warp(tape.constant(moving), u)
        return ad.add(objective.similarity(similarity, warped, fixed, 3), objective.smoothness_loss(u))

    tape = Tape()
    analytic = tape.backward(loss(tape), net.groups)
    scalar = lambda: float(loss(Tape()).value)
    out = {}
    for g in net.groups:
        numeric = np.concatenate([numeric_grad(scalar, t).ravel() for t in g.tensors])
        out[g.layer_id] = rel_error(analytic[g.layer_id], numeric)
    return out
