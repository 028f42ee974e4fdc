"""Dense 2-D grids, displacement fields, warping and finite differences.

Conventions used throughout the package:

* a ``Grid2`` is a 2-D ``float64`` numpy array indexed ``[row, col]``;
* pixel centers sit at integer coordinates, ``x`` is the column, ``y`` the row;
* displacements are stored in pixel units and the deformation is
  ``phi(x) = x + u(x)``;
* sampling outside the image replicates the border (coordinates are clamped).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

LABELS = {0: "background", 1: "LV", 2: "Myo", 3: "RV"}


class ShapeError(ValueError):
    pass


def as_grid(a) -> np.ndarray:
    g = np.asarray(a, dtype=np.float64)
    if g.ndim != 2 or g.size == 0:
        raise ShapeError(f"expected a non-empty 2-D grid, got shape {g.shape}")
    return g


def as_mask(a) -> np.ndarray:
    m = np.asarray(a)
    if m.ndim != 2:
        raise ShapeError(f"expected a 2-D label mask, got shape {m.shape}")
    if not np.all(np.isin(m, tuple(LABELS))):
        raise ValueError(f"mask labels must be drawn from {sorted(LABELS)}")
    return m.astype(np.int64, copy=False)


@dataclass(frozen=True)
class DisplacementField:
    """Per-pixel displacement ``u = (u_x, u_y)`` in pixels."""

    ux: np.ndarray
    uy: np.ndarray

    def __post_init__(self):
        ux, uy = as_grid(self.ux), as_grid(self.uy)
        if ux.shape != uy.shape:
            raise ShapeError(f"u_x {ux.shape} and u_y {uy.shape} differ in shape")
        object.__setattr__(self, "ux", ux)
        object.__setattr__(self, "uy", uy)

    @property
    def shape(self) -> tuple[int, int]:
        return self.ux.shape

    @classmethod
    def zeros(cls, height: int, width: int) -> "DisplacementField":
        return cls(np.zeros((height, width)), np.zeros((height, width)))

    @classmethod
    def from_array(cls, a) -> "DisplacementField":
        a = np.asarray(a, dtype=np.float64)
        if a.ndim != 3 or a.shape[0] != 2:
            raise ShapeError(f"expected a (2, H, W) array, got {a.shape}")
        return cls(a[0].copy(), a[1].copy())

    def to_array(self) -> np.ndarray:
        return np.stack([self.ux, self.uy])

    def __add__(self, other: "DisplacementField") -> "DisplacementField":
        return DisplacementField(self.ux + other.ux, self.uy + other.uy)

    def __neg__(self) -> "DisplacementField":
        return DisplacementField(-self.ux, -self.uy)


def normalize_intensity(img) -> np.ndarray:
    """Linearly rescale to [0, 1]; a constant image maps to all zeros."""
    img = as_grid(img)
    lo, hi = img.min(), img.max()
    if hi == lo:
        return np.zeros_like(img)
    return (img - lo) / (hi - lo)


def _bilinear_weights(coord: np.ndarray, size: int):
    c = np.clip(coord, 0.0, size - 1)
    c0 = np.floor(c).astype(np.int64)
    c0 = np.minimum(c0, max(size - 2, 0))
    c1 = np.minimum(c0 + 1, size - 1)
    return c0, c1, c - c0


def bilinear_sample(img, x: float, y: float) -> float:
    img = as_grid(img)
    h, w = img.shape
    x0, x1, wx = _bilinear_weights(np.asarray(x, dtype=np.float64), w)
    y0, y1, wy = _bilinear_weights(np.asarray(y, dtype=np.float64), h)
    top = img[y0, x0] * (1 - wx) + img[y0, x1] * wx
    bottom = img[y1, x0] * (1 - wx) + img[y1, x1] * wx
    return float(top * (1 - wy) + bottom * wy)


def _check_field(shape, field: DisplacementField):
    if field.shape != tuple(shape):
        raise ShapeError(f"field shape {field.shape} does not match image shape {tuple(shape)}")


def sample_points(img: np.ndarray, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Vectorised bilinear sampling with border replication."""
    h, w = img.shape
    x0, x1, wx = _bilinear_weights(x, w)
    y0, y1, wy = _bilinear_weights(y, h)
    top = img[y0, x0] * (1 - wx) + img[y0, x1] * wx
    bottom = img[y1, x0] * (1 - wx) + img[y1, x1] * wx
    return top * (1 - wy) + bottom * wy


def warp_image(img, field: DisplacementField) -> np.ndarray:
    """``out(x) = img(x + u(x))`` with bilinear interpolation."""
    img = as_grid(img)
    _check_field(img.shape, field)
    if not field.ux.any() and not field.uy.any():
        return img.copy()
    yy, xx = np.mgrid[0 : img.shape[0], 0 : img.shape[1]].astype(np.float64)
    return sample_points(img, xx + field.ux, yy + field.uy)


def warp_labels(mask, field: DisplacementField) -> np.ndarray:
    """Nearest-neighbour warp of a label mask; labels are never blended."""
    mask = as_mask(mask)
    _check_field(mask.shape, field)
    h, w = mask.shape
    yy, xx = np.mgrid[0:h, 0:w]
    # round half away from zero so ties are stable across platforms
    sx = np.clip(np.floor(xx + field.ux + 0.5), 0, w - 1).astype(np.int64)
    sy = np.clip(np.floor(yy + field.uy + 0.5), 0, h - 1).astype(np.int64)
    return mask[sy, sx]


def jacobian_determinant(field: DisplacementField) -> np.ndarray:
    """Per-pixel ``det(I + grad u)``.

    Central differences inside, first-order one-sided differences on the
    border rows and columns.
    """
    h, w = field.shape
    if h < 3 or w < 3:
        raise ShapeError(f"jacobian_determinant needs at least 3x3, got {h}x{w}")
    dux_dy, dux_dx = np.gradient(field.ux)
    duy_dy, duy_dx = np.gradient(field.uy)
    return (1.0 + dux_dx) * (1.0 + duy_dy) - dux_dy * duy_dx


def spatial_gradient(g) -> tuple[np.ndarray, np.ndarray]:
    """Forward differences ``(d/dx, d/dy)``; last column/row are zero."""
    g = as_grid(g)
    if g.shape[0] < 2 or g.shape[1] < 2:
        raise ShapeError(f"spatial_gradient needs at least 2x2, got {g.shape}")
    gx = np.zeros_like(g)
    gy = np.zeros_like(g)
    gx[:, :-1] = g[:, 1:] - g[:, :-1]
    gy[:-1, :] = g[1:, :] - g[:-1, :]
    return gx, gy
