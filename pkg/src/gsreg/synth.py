"""Synthetic cardiac-like phantoms with exact ground-truth deformations.

The phantom is an analytic function of continuous coordinates, so the fixed
image ``T(x + u(x))`` is rendered directly instead of resampling a raster:
the ground-truth correspondence carries no interpolation error.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .grid import DisplacementField, normalize_intensity

# max |d/dr exp(-r^2 / 2 s^2)| = exp(-1/2) / s, attained at r = s
_BUMP_SLOPE = math.exp(-0.5)
FOLD_BOUND = 0.9


@dataclass(frozen=True)
class PhantomSpec:
    size: int = 64
    lv_center: tuple[float, float] | None = None  # (x, y); None = image centre
    lv_radius: float = 8.0
    myo_radius: float = 12.5
    rv_offset: float = 11.0   # RV disk centre sits this far left of the LV centre
    rv_radius: float = 12.0
    body_radii: tuple[float, float] = (26.0, 22.0)
    intensity: dict = field(default_factory=lambda: {"lv": 0.9, "myo": 0.3, "rv": 0.75, "body": 0.12})
    edge_width: float = 0.6   # soft intensity edges, pixels
    noise_std: float = 0.0
    jitter: float = 2.0       # random per-case perturbation of centre/radii, pixels

    def __post_init__(self):
        if self.size < 8:
            raise ValueError(f"phantom size must be >= 8, got {self.size}")
        if not 0 < self.lv_radius < self.myo_radius:
            raise ValueError("radii must be positive and nested: 0 < lv_radius < myo_radius")
        if self.rv_radius <= 0 or min(self.body_radii) <= 0:
            raise ValueError("rv_radius and body_radii must be positive")
        if any(not 0 <= v <= 1 for v in self.intensity.values()):
            raise ValueError("intensities must lie in [0, 1]")
        if self.noise_std < 0 or self.edge_width <= 0 or self.jitter < 0:
            raise ValueError("noise_std and jitter must be >= 0, edge_width > 0")

    @classmethod
    def paper_size(cls, **kw) -> "PhantomSpec":
        """128x128 variant with every length doubled."""
        base = dict(size=128, lv_radius=16.0, myo_radius=25.0, rv_offset=22.0, rv_radius=24.0,
                    body_radii=(52.0, 44.0), edge_width=1.2, jitter=4.0)
        base.update(kw)
        return cls(**base)


@dataclass(frozen=True)
class DeformSpec:
    n_bumps: int = 4
    amplitude: tuple[float, float] = (3.0, 7.0)   # pixels
    sigma: tuple[float, float] = (7.0, 12.0)      # pixels
    max_shift: float = 1.5                        # global translation, pixels
    spread: float = 14.0                          # bump centres within this radius of the heart

    def __post_init__(self):
        if self.n_bumps < 0:
            raise ValueError("n_bumps must be >= 0")
        lo, hi = self.amplitude
        if not 0 <= lo <= hi:
            raise ValueError(f"amplitude range must satisfy 0 <= lo <= hi, got {self.amplitude}")
        slo, shi = self.sigma
        if not 0 < slo <= shi:
            raise ValueError(f"sigma range must satisfy 0 < lo <= hi, got {self.sigma}")
        if self.max_shift < 0 or self.spread < 0:
            raise ValueError("max_shift and spread must be >= 0")


@dataclass(frozen=True)
class _Anatomy:
    cx: float
    cy: float
    lv: float
    myo: float
    rv_cx: float
    rv_cy: float
    rv: float
    body: tuple[float, float]


@dataclass(frozen=True)
class Bumps:
    """``u(x) = shift + sum_k a_k exp(-|x - c_k|^2 / 2 s_k^2)``."""

    centers: np.ndarray   # (K, 2) as (x, y)
    amps: np.ndarray      # (K, 2)
    sigmas: np.ndarray    # (K,)
    shift: np.ndarray     # (2,)

    def lipschitz_bound(self) -> float:
        """Upper bound on the operator norm of the displacement Jacobian."""
        if len(self.sigmas) == 0:
            return 0.0
        return float(np.sum(np.linalg.norm(self.amps, axis=1) * _BUMP_SLOPE / self.sigmas))

    def __call__(self, x: np.ndarray, y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        ux = np.full_like(x, self.shift[0])
        uy = np.full_like(y, self.shift[1])
        for (cx, cy), (ax, ay), s in zip(self.centers, self.amps, self.sigmas):
            g = np.exp(-((x - cx) ** 2 + (y - cy) ** 2) / (2 * s * s))
            ux += ax * g
            uy += ay * g
        return ux, uy


def _anatomy(p: PhantomSpec, rng: np.random.Generator) -> _Anatomy:
    c = (p.size - 1) / 2.0
    cx, cy = p.lv_center if p.lv_center is not None else (c + p.size * 0.06, c)
    j = lambda: rng.uniform(-p.jitter, p.jitter) if p.jitter else 0.0
    cx, cy = cx + j(), cy + j()
    lv = p.lv_radius + 0.25 * j()
    myo = max(p.myo_radius + 0.25 * j(), lv + 2.0)
    return _Anatomy(cx, cy, lv, myo, cx - p.rv_offset + 0.5 * j(), cy + 0.5 * j(),
                    p.rv_radius + 0.25 * j(), p.body_radii)


def _labels_at(a: _Anatomy, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    r = np.hypot(x - a.cx, y - a.cy)
    r_rv = np.hypot(x - a.rv_cx, y - a.rv_cy)
    lab = np.zeros(x.shape, dtype=np.int64)
    lab[(r_rv < a.rv) & (r >= a.myo + 1.0)] = 3
    lab[(r >= a.lv) & (r < a.myo)] = 2
    lab[r < a.lv] = 1
    return lab


def _intensity_at(a: _Anatomy, p: PhantomSpec, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Soft-edged version of the label map, blended by sigmoid occupancies."""
    sig = lambda d: 0.5 * (1.0 + np.tanh(d / p.edge_width))
    r = np.hypot(x - a.cx, y - a.cy)
    r_rv = np.hypot(x - a.rv_cx, y - a.rv_cy)
    bx, by = a.body
    ell = np.sqrt(((x - a.cx + 4.0) / bx) ** 2 + ((y - a.cy) / by) ** 2)
    body = sig((1.0 - ell) * min(bx, by))
    lv = sig(a.lv - r)
    heart = sig(a.myo - r)
    rv = sig(a.rv - r_rv) * sig(r - (a.myo + 1.0))
    it = p.intensity
    img = it["body"] * body
    img = img * (1 - rv) + it["rv"] * rv
    img = img * (1 - heart) + it["myo"] * heart
    img = img * (1 - lv) + it["lv"] * lv
    return img


def sample_bumps(p: PhantomSpec, d: DeformSpec, a: _Anatomy, rng: np.random.Generator) -> Bumps:
    k = d.n_bumps
    ang = rng.uniform(0, 2 * np.pi, size=k)
    rad = d.spread * np.sqrt(rng.uniform(0, 1, size=k))
    centers = np.stack([a.cx + rad * np.cos(ang), a.cy + rad * np.sin(ang)], axis=1)
    mag = rng.uniform(d.amplitude[0], d.amplitude[1], size=k)
    theta = rng.uniform(0, 2 * np.pi, size=k)
    amps = np.stack([mag * np.cos(theta), mag * np.sin(theta)], axis=1)
    sigmas = rng.uniform(d.sigma[0], d.sigma[1], size=k)
    phi = rng.uniform(0, 2 * np.pi)
    shift = d.max_shift * rng.uniform(0, 1) * np.array([np.cos(phi), np.sin(phi)])
    if d.amplitude[1] == 0:
        shift = np.zeros(2)
    bumps = Bumps(centers.reshape(k, 2), amps.reshape(k, 2), sigmas, shift)
    bound = bumps.lipschitz_bound()
    if bound >= FOLD_BOUND:
        # strictly below the bound, leaving a margin for the discrete stencil
        amps = amps * (0.98 * FOLD_BOUND / bound)
        bumps = Bumps(bumps.centers, amps, sigmas, shift)
    return bumps


@dataclass
class Pair:
    moving: np.ndarray
    fixed: np.ndarray
    moving_mask: np.ndarray
    fixed_mask: np.ndarray
    gt_field: DisplacementField


def make_pair(pspec: PhantomSpec = PhantomSpec(), dspec: DeformSpec = DeformSpec(), seed: int = 0) -> Pair:
    """Moving = phantom, fixed = phantom composed with the ground-truth map.

    With ``u`` the sampled displacement, ``warp_image(moving, u)`` approximates
    ``fixed`` and ``warp_labels(moving_mask, u)`` approximates ``fixed_mask``.
    """
    if not isinstance(pspec, PhantomSpec) or not isinstance(dspec, DeformSpec):
        raise TypeError("make_pair expects a PhantomSpec and a DeformSpec")
    rng = np.random.default_rng([seed, 0x5EED])
    anat = _anatomy(pspec, rng)
    bumps = sample_bumps(pspec, dspec, anat, rng)
    n = pspec.size
    yy, xx = np.mgrid[0:n, 0:n].astype(np.float64)
    ux, uy = bumps(xx, yy)
    if dspec.amplitude[1] == 0:
        ux, uy = np.zeros_like(xx), np.zeros_like(yy)
    moving = _intensity_at(anat, pspec, xx, yy)
    fixed = _intensity_at(anat, pspec, xx + ux, yy + uy)
    moving_mask = _labels_at(anat, xx, yy)
    fixed_mask = _labels_at(anat, xx + ux, yy + uy)
    if pspec.noise_std > 0:
        moving = moving + rng.normal(0, pspec.noise_std, moving.shape)
        fixed = fixed + rng.normal(0, pspec.noise_std, fixed.shape)
    return Pair(normalize_intensity(moving), normalize_intensity(fixed), moving_mask, fixed_mask,
                DisplacementField(ux, uy))


# ---------------------------------------------------------------- datasets

SPLITS = ("train", "val", "test")


def split_counts(n: int) -> tuple[int, int, int]:
    """75/5/20 split: floor the first two, the test split takes the remainder."""
    if n < 20:
        raise ValueError(f"need at least 20 cases for a 75/5/20 split, got {n}")
    n_train = (75 * n) // 100
    n_val = (5 * n) // 100
    return n_train, n_val, n - n_train - n_val


def split_of(index: int, n: int) -> str:
    n_train, n_val, _ = split_counts(n)
    if index < n_train:
        return "train"
    if index < n_train + n_val:
        return "val"
    return "test"


def case_name(index: int) -> str:
    return f"case_{index:04d}"


def make_dataset(out_dir, n: int, pspec: PhantomSpec = PhantomSpec(), dspec: DeformSpec = DeformSpec(),
                 base_seed: int = 0) -> Path:
    """Write ``n`` cases plus ``manifest.txt`` (``<split> <case dir>`` per line)."""
    from . import io

    split_counts(n)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    lines = []
    for i in range(n):
        pair = make_pair(pspec, dspec, base_seed + i)
        case = out / case_name(i)
        io.write_case(case, pair)
        lines.append(f"{split_of(i, n)} {case_name(i)}")
    manifest = out / "manifest.txt"
    manifest.write_text("\n".join(lines) + "\n")
    return manifest


def read_manifest(path) -> dict[str, list[Path]]:
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.txt"
    out: dict[str, list[Path]] = {s: [] for s in SPLITS}
    for line in path.read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        split, rel = line.split(maxsplit=1)
        if split not in out:
            raise ValueError(f"{path}: unknown split {split!r}")
        out[split].append(path.parent / rel)
    return out
