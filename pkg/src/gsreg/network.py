"""Registration models: a small U-Net and a direct displacement-field model."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import BatchNormState, ParamGroup, Tape, Tensor
from .grid import ShapeError

PRESETS = {
    "paper": (16, 32, 64, 128, 256),
    "desk": (8, 16, 32),
}


@dataclass(frozen=True)
class UNetConfig:
    encoder_widths: tuple[int, ...] = PRESETS["desk"]
    leaky_slope: float = 0.2
    preset: str = "desk"

    def __post_init__(self):
        widths = tuple(int(w) for w in self.encoder_widths)
        if len(widths) < 2 or any(w <= 0 for w in widths):
            raise ValueError(f"encoder_widths needs >= 2 positive entries, got {self.encoder_widths}")
        object.__setattr__(self, "encoder_widths", widths)

    @classmethod
    def from_preset(cls, name: str, leaky_slope: float = 0.2) -> "UNetConfig":
        if name not in PRESETS:
            raise ValueError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
        return cls(PRESETS[name], leaky_slope, name)

    @property
    def levels(self) -> int:
        return len(self.encoder_widths)


class ConvLayer:
    """3x3 conv, optionally followed by batch norm + leaky ReLU.

    All tensors of the layer form one parameter group.
    """

    def __init__(self, layer_id, cin, cout, rng, norm=True, slope=0.2, zero=False):
        if zero:
            weight = np.zeros((cout, cin, 3, 3))
        else:
            # He init for leaky ReLU
            std = np.sqrt(2.0 / ((1 + slope**2) * cin * 9))
            weight = rng.normal(0.0, std, size=(cout, cin, 3, 3))
        tensors = [weight, np.zeros(cout)]
        names = ("weight", "bias")
        if norm:
            tensors += [np.ones(cout), np.zeros(cout)]
            names += ("bn_scale", "bn_shift")
        self.group = ParamGroup(layer_id, tensors, names)
        self.bn = BatchNormState(cout) if norm else None
        self.slope = slope

    def __call__(self, tape: Tape, x: Tensor, mode: str) -> Tensor:
        p = tape.params(self.group)
        y = ad.conv2d(x, p[0], p[1])
        if self.bn is None:
            return y
        y = ad.batch_norm(y, p[2], p[3], mode, self.bn)
        return ad.leaky_relu(y, self.slope)


class RegistrationModel:
    """Common interface: ``forward(tape, fixed, moving) -> (N, 2, H, W)`` tensor."""

    kind: str

    def __init__(self):
        self.mode = "train"

    @property
    def groups(self) -> list[ParamGroup]:
        raise NotImplementedError

    def train(self):
        self.mode = "train"
        return self

    def eval(self):
        self.mode = "eval"
        return self

    def param_count(self) -> int:
        return sum(g.size for g in self.groups if g.trainable)

    def buffers(self) -> dict[str, np.ndarray]:
        return {}

    def load_buffers(self, buffers: dict[str, np.ndarray]):
        if buffers:
            raise KeyError(f"unexpected buffers {sorted(buffers)}")

    def predict(self, fixed, moving) -> np.ndarray:
        """Displacement field(s) as a plain array, outside any training tape."""
        tape = Tape()
        out = self.forward(tape, fixed, moving).value
        tape.clear()
        return out


def _as_batch(img) -> np.ndarray:
    a = np.asarray(img, dtype=np.float64)
    if a.ndim == 2:
        a = a[None, None]
    elif a.ndim == 3:
        a = a[:, None]
    if a.ndim != 4 or a.shape[1] != 1:
        raise ValueError(f"expected image(s) of shape (H, W), (N, H, W) or (N, 1, H, W), got {a.shape}")
    return a


class UNet(RegistrationModel):
    kind = "unet"

    def __init__(self, cfg: UNetConfig, seed: int = 0):
        super().__init__()
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        s = cfg.leaky_slope
        widths = cfg.encoder_widths
        self.encoder = []
        cin = 2
        for lvl, wd in enumerate(widths):
            self.encoder.append((ConvLayer(f"enc{lvl}.conv0", cin, wd, rng, slope=s),
                                 ConvLayer(f"enc{lvl}.conv1", wd, wd, rng, slope=s)))
            cin = wd
        self.decoder = []
        for lvl in range(len(widths) - 2, -1, -1):
            wd = widths[lvl]
            self.decoder.append((ConvLayer(f"dec{lvl}.conv0", cin + wd, wd, rng, slope=s),
                                 ConvLayer(f"dec{lvl}.conv1", wd, wd, rng, slope=s)))
            cin = wd
        # zero head: the untrained model predicts the identity transform
        self.head = ConvLayer("head", cin, 2, rng, norm=False, zero=True)

    @property
    def layers(self) -> list[ConvLayer]:
        out = [l for block in self.encoder for l in block]
        out += [l for block in self.decoder for l in block]
        return out + [self.head]

    @property
    def groups(self) -> list[ParamGroup]:
        return [l.group for l in self.layers]

    def buffers(self):
        out = {}
        for l in self.layers:
            if l.bn is not None:
                out[f"{l.group.layer_id}.running_mean"] = l.bn.mean
                out[f"{l.group.layer_id}.running_var"] = l.bn.var
        return out

    def load_buffers(self, buffers):
        expected = set(self.buffers())
        if set(buffers) != expected:
            raise KeyError(f"buffer mismatch: missing {sorted(expected - set(buffers))}, "
                           f"unexpected {sorted(set(buffers) - expected)}")
        for l in self.layers:
            if l.bn is not None:
                l.bn.mean = np.array(buffers[f"{l.group.layer_id}.running_mean"], dtype=np.float64)
                l.bn.var = np.array(buffers[f"{l.group.layer_id}.running_var"], dtype=np.float64)

    def forward(self, tape: Tape, fixed, moving) -> Tensor:
        f, m = _as_batch(fixed), _as_batch(moving)
        if f.shape != m.shape:
            raise ShapeError(f"fixed {f.shape} and moving {m.shape} shapes differ")
        div = 2 ** (self.cfg.levels - 1)
        h, w = f.shape[2:]
        if h % div or w % div:
            raise ShapeError(f"input size {h}x{w} must be divisible by {div} for {self.cfg.levels} levels")
        x = tape.constant(np.concatenate([f, m], axis=1))
        skips = []
        for lvl, (c0, c1) in enumerate(self.encoder):
            if lvl > 0:
                x = ad.maxpool2(x)
            x = c1(tape, c0(tape, x, self.mode), self.mode)
            skips.append(x)
        skips.pop()
        for c0, c1 in self.decoder:
            x = ad.concat_channels(ad.upsample_nearest2(x), skips.pop())
            x = c1(tape, c0(tape, x, self.mode), self.mode)
        return self.head(tape, x, self.mode)


class DirectField(RegistrationModel):
    """The displacement field itself is the only parameter group."""

    kind = "direct_field"

    def __init__(self, height: int, width: int, init=None):
        super().__init__()
        field = np.zeros((2, height, width)) if init is None else np.array(init, dtype=np.float64)
        if field.shape != (2, height, width):
            raise ValueError(f"initial field must have shape (2, {height}, {width}), got {field.shape}")
        self.group = ParamGroup("field", [field], ("field",))

    @property
    def groups(self):
        return [self.group]

    def forward(self, tape: Tape, fixed, moving) -> Tensor:
        f, m = _as_batch(fixed), _as_batch(moving)
        if f.shape != m.shape or f.shape[2:] != self.group.tensors[0].shape[1:]:
            raise ShapeError(f"pair shapes {f.shape}/{m.shape} do not match field {self.group.tensors[0].shape}")
        u = tape.param(self.group, 0)
        # broadcast the single field over the batch
        return ad.add(u, np.zeros((f.shape[0], 2) + f.shape[2:]))


def build_unet(cfg: UNetConfig, seed: int = 0) -> UNet:
    return UNet(cfg, seed)
