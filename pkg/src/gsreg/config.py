"""Run configuration: a flat ``key = value`` text file with ``#`` comments."""
from __future__ import annotations

from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

from .network import PRESETS
from .surgery import parse_strategy, strategy_label

GRANULARITIES = ("per-tensor", "per-layer", "global")
SIMILARITIES = ("mse", "lncc")

# settings that differ between the desk-scale and the full-scale preset
PRESET_DEFAULTS = {
    "desk": {"batch_size": 8, "epochs": 100, "image_size": 64},
    "paper": {"batch_size": 32, "epochs": 500, "image_size": 128},
}

# config-file key -> dataclass field (only where they differ)
ALIASES = {"lambda": "lam"}


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    strategy: str = "LayerwiseProject"
    lam: float = 0.01
    sigma: float | None = None          # AgrRandom noise; None = per-group gradient std
    granularity: str = "per-layer"
    similarity: str = "mse"
    window: int = 9
    preset: str = "desk"
    leaky_slope: float = 0.2
    lr: float = 5e-3
    batch_size: int = 8
    epochs: int = 100
    seed: int = 0
    data_seed: int = 0
    n_cases: int = 200
    image_size: int = 64
    noise_std: float = 0.0
    timing_reps: int = 10
    data_dir: str = "data"
    out_dir: str = "runs"

    def __post_init__(self):
        try:
            parse_strategy(self.strategy, self.lam, self.sigma)
        except ValueError as e:
            raise ConfigError(str(e)) from None
        checks = [
            (self.preset in PRESETS, f"preset must be one of {sorted(PRESETS)}"),
            (self.granularity in GRANULARITIES, f"granularity must be one of {GRANULARITIES}"),
            (self.similarity in SIMILARITIES, f"similarity must be one of {SIMILARITIES}"),
            (self.window >= 3 and self.window % 2 == 1, "window must be odd and >= 3"),
            (self.lam >= 0, "lambda must be >= 0"),
            (self.sigma is None or self.sigma > 0, "sigma must be > 0"),
            (self.lr > 0, "lr must be > 0"),
            (self.batch_size >= 1, "batch_size must be >= 1"),
            (self.epochs >= 0, "epochs must be >= 0"),
            (self.n_cases >= 20, "n_cases must be >= 20"),
            (self.image_size % 2 ** (len(PRESETS[self.preset]) - 1) == 0 if self.preset in PRESETS else True,
             "image_size must be divisible by 2^(levels-1) of the preset"),
            (self.noise_std >= 0, "noise_std must be >= 0"),
            (self.timing_reps >= 1, "timing_reps must be >= 1"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ConfigError(msg)

    @property
    def strategy_obj(self):
        return parse_strategy(self.strategy, self.lam, self.sigma)

    @property
    def label(self) -> str:
        return strategy_label(self.strategy_obj)

    def to_dict(self) -> dict:
        out = {}
        for k, v in asdict(self).items():
            key = {v_: k_ for k_, v_ in ALIASES.items()}.get(k, k)
            out[key] = "auto" if v is None else v
        return out

    def with_updates(self, **kw) -> "RunConfig":
        return replace(self, **kw)


_FIELDS = {f.name: f for f in fields(RunConfig)}


def _convert(name: str, raw: str):
    default = getattr(RunConfig, name)
    if name == "sigma":
        return None if raw.lower() in ("auto", "none", "") else float(raw)
    if isinstance(default, bool):
        return raw.lower() in ("1", "true", "yes")
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    return raw


def parse_config_text(text: str, source: str = "<config>") -> dict:
    """Parse ``key = value`` lines into typed values; unknown keys are errors."""
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {line!r}")
        key, raw = (s.strip() for s in line.split("=", 1))
        name = ALIASES.get(key, key)
        if name not in _FIELDS:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        try:
            out[name] = _convert(name, raw)
        except ValueError:
            raise ConfigError(f"{source}:{lineno}: bad value {raw!r} for {key!r}") from None
    return out


def build_config(values: dict | None = None, **overrides) -> RunConfig:
    """Apply preset defaults for every setting not given explicitly."""
    values = dict(values or {})
    values.update({k: v for k, v in overrides.items() if v is not None})
    unknown = set(values) - set(_FIELDS)
    if unknown:
        raise ConfigError(f"unknown config keys {sorted(unknown)}")
    preset = values.get("preset", RunConfig.preset)
    if preset not in PRESET_DEFAULTS:
        raise ConfigError(f"preset must be one of {sorted(PRESET_DEFAULTS)}, got {preset!r}")
    merged = dict(PRESET_DEFAULTS[preset])
    merged.update(values)
    return RunConfig(**merged)


def load_config(path, **overrides) -> RunConfig:
    p = Path(path)
    return build_config(parse_config_text(p.read_text(), str(p)), **overrides)


def dump_config(cfg: RunConfig) -> str:
    return "".join(f"{k} = {v}\n" for k, v in cfg.to_dict().items())
