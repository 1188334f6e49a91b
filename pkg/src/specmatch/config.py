"""Run configuration: key=value files with dotted section keys.

A config file holds lines like::

    seed = 7
    zeroshot.k = 30
    zeroshot.alpha = 0.1
    feature.hidden = 256,256,256,256
    denoiser.widths = 256,256,256
    schedule.sigma_max = 3.0
    deform.kind = bumpy
    train.epochs = 120

Unknown sections or keys are rejected. CLI ``--set key=value`` flags override
file values, and every run report echoes the fully resolved configuration.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

from .distill import FeatureNetConfig, ZeroShotConfig
from .errors import ConfigError
from .sgm import DenoiserConfig, NoiseSchedule
from .synth import DeformConfig


@dataclass(frozen=True)
class TrainSettings:
    epochs: int = 100
    batch: int = 128
    lr: float = 1e-3


@dataclass(frozen=True)
class RunConfig:
    zeroshot: ZeroShotConfig = field(default_factory=ZeroShotConfig)
    denoiser: DenoiserConfig = field(default_factory=DenoiserConfig)
    schedule: NoiseSchedule = field(default_factory=NoiseSchedule)
    deform: DeformConfig = field(default_factory=DeformConfig)
    train: TrainSettings = field(default_factory=TrainSettings)
    seed: int = 0

    def resolved(self) -> dict:
        """Flat dotted-key echo of every effective value."""
        out = {"seed": self.seed}
        for section, obj in (
            ("zeroshot", self.zeroshot),
            ("feature", self.zeroshot.feature),
            ("denoiser", self.denoiser),
            ("schedule", self.schedule),
            ("deform", self.deform),
            ("train", self.train),
        ):
            for f in dataclasses.fields(obj):
                if f.name == "feature":
                    continue
                v = getattr(obj, f.name)
                out[f"{section}.{f.name}"] = list(v) if isinstance(v, tuple) else v
        return out


_SECTIONS = {
    "zeroshot": ZeroShotConfig,
    "feature": FeatureNetConfig,
    "denoiser": DenoiserConfig,
    "schedule": NoiseSchedule,
    "deform": DeformConfig,
    "train": TrainSettings,
}


def _parse_value(raw: str, ftype, key: str):
    raw = raw.strip()
    low = raw.lower()
    type_str = str(ftype)
    try:
        if ftype is bool or type_str == "bool":
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(f"not a boolean: {raw!r}")
        if ftype is int or type_str == "int":
            return int(raw)
        if ftype is float or type_str == "float":
            return float(raw)
        if ftype is str or type_str == "str":
            return raw
        if "int | None" in type_str or "Optional[int]" in type_str:
            return None if low in ("none", "null", "") else int(raw)
        if ftype is tuple or type_str == "tuple":
            return tuple(int(t) for t in raw.split(",") if t.strip())
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {exc}") from exc
    raise ConfigError(f"unsupported config field type for {key}: {ftype!r}")


def _collect(lines, source: str) -> dict:
    """Parse key=value lines into {section: {field: value}} (+ top-level seed)."""
    staged: dict = {"_seed": None}
    for ln, raw in enumerate(lines, 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{ln}: expected key=value, got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key == "seed":
            staged["_seed"] = _parse_value(value, int, "seed")
            continue
        if "." not in key:
            raise ConfigError(f"{source}:{ln}: unknown key {key!r}")
        section, name = key.split(".", 1)
        cls = _SECTIONS.get(section)
        if cls is None:
            raise ConfigError(f"{source}:{ln}: unknown section {section!r}")
        ftypes = {f.name: f.type for f in dataclasses.fields(cls)}
        if name not in ftypes:
            raise ConfigError(f"{source}:{ln}: unknown key {key!r}")
        staged.setdefault(section, {})[name] = _parse_value(value, ftypes[name], key)
    return staged


def load_config(path=None, overrides=()) -> RunConfig:
    """Build a RunConfig from an optional file plus override strings."""
    staged: dict = {"_seed": None}
    if path is not None:
        try:
            lines = Path(path).read_text().splitlines()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        staged = _collect(lines, str(path))
    if overrides:
        extra = _collect(list(overrides), "--set")
        for section, vals in extra.items():
            if section == "_seed":
                if vals is not None:
                    staged["_seed"] = vals
                continue
            staged.setdefault(section, {}).update(vals)
    feature = FeatureNetConfig(**staged.get("feature", {}))
    zs_kw = dict(staged.get("zeroshot", {}))
    zs_kw["feature"] = feature
    return RunConfig(
        zeroshot=ZeroShotConfig(**zs_kw),
        denoiser=DenoiserConfig(**staged.get("denoiser", {})),
        schedule=NoiseSchedule(**staged.get("schedule", {})),
        deform=DeformConfig(**staged.get("deform", {})),
        train=TrainSettings(**staged.get("train", {})),
        seed=staged.get("_seed") or 0,
    )
