"""Similarity and smoothness losses as scalar tape nodes."""
from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

LNCC_EPS = 1e-5


def _const(x, like: Tensor) -> Tensor:
    return x if isinstance(x, Tensor) else like.tape.constant(x)


def _check(name, a: Tensor, b: Tensor):
    if a.shape != b.shape:
        raise ValueError(f"{name}: shapes {a.shape} and {b.shape} differ")


def mse_loss(warped: Tensor, fixed) -> Tensor:
    fixed = _const(fixed, warped)
    _check("mse_loss", warped, fixed)
    return ad.mean(ad.square(ad.sub(warped, fixed)))


def lncc_loss(warped: Tensor, fixed, window: int = 9) -> Tensor:
    """Negative mean squared local correlation coefficient.

    Local statistics use only the in-image pixels of each window, so the
    value is invariant to positive affine intensity changes up to the
    variance floor.
    """
    if window < 3 or window % 2 == 0:
        raise ValueError(f"lncc_loss: window must be odd and >= 3, got {window}")
    fixed = _const(fixed, warped)
    _check("lncc_loss", warped, fixed)
    i, j = warped, fixed
    count = ad._box_sum(np.ones(i.shape[-2:]), window)
    s_i = ad.box_sum(i, window)
    s_j = ad.box_sum(j, window)
    s_ii = ad.box_sum(ad.square(i), window)
    s_jj = ad.box_sum(ad.square(j), window)
    s_ij = ad.box_sum(ad.mul(i, j), window)
    cross = s_ij - s_i * s_j / count
    var_i = s_ii - ad.square(s_i) / count
    var_j = s_jj - ad.square(s_j) / count
    cc = ad.square(cross) / (var_i * var_j + LNCC_EPS)
    return -ad.mean(cc)


def smoothness_loss(field: Tensor) -> Tensor:
    """Diffusion regulariser on the displacement ``(N, 2, H, W)``.

    Mean over pixels and displacement components of ``(du/dx)^2 + (du/dy)^2``
    with forward differences (zero on the last column/row).
    """
    gx = ad.forward_diff(field, axis=-1)
    gy = ad.forward_diff(field, axis=-2)
    return ad.add(ad.mean(ad.square(gx)), ad.mean(ad.square(gy)))


def similarity(name: str, warped: Tensor, fixed, window: int = 9) -> Tensor:
    if name == "mse":
        return mse_loss(warped, fixed)
    if name == "lncc":
        return lncc_loss(warped, fixed, window)
    raise ValueError(f"unknown similarity {name!r}; choose 'mse' or 'lncc'")
