"""Tunables in one validated place; ``key=value`` files, overridable by flags."""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, fields
from typing import Mapping

from .dataset import NoiseSpec
from .descriptor import DescriptorParams
from .errors import ValidationError
from .evaluation import PipelineConfig
from .hashing import UserKey
from .kpca import KernelParams

MODES = ("lost-key", "per-user")


@dataclass(frozen=True)
class Config:
    # descriptor
    radius: float = 70.0
    grid: int = 8
    angular_bins: int = 6
    sigma_s: float | None = None
    sigma_a: float = math.pi / 6
    # kernel PCA
    sigma2: float = 0.5
    d: int | None = None
    # hashing
    n: int = 10
    p: int = 3
    k: int = 100
    l: int = 500
    s_key: int = 2
    # synthetic data and evaluation
    seed: int | None = None
    users: int = 30
    impressions: int = 4
    pos_sigma: float = 2.0
    angle_sigma: float = 0.05
    drop_prob: float = 0.05
    add_max: int = 2
    mode: str = "lost-key"
    reissues: int = 5
    threshold: float = 0.7
    # paths and identifiers
    projection: str | None = None
    store: str | None = None
    application_id: str = "default"

    def __post_init__(self):
        if self.k < 1 or self.l < 1:
            raise ValidationError(f"k and l must be positive (k={self.k}, l={self.l})")
        if self.l % self.k:
            raise ValidationError(
                f"window size k={self.k} does not divide component length l={self.l} "
                f"(l / k = {self.l / self.k:g} is not an integer)"
            )
        if self.mode not in MODES:
            raise ValidationError(f"mode must be one of {', '.join(MODES)}, got {self.mode!r}")
        if not 0.0 <= self.threshold <= 1.0:
            raise ValidationError(f"threshold must lie in [0, 1], got {self.threshold}")
        # surface parameter errors at load time rather than mid-run
        self.descriptor_params()
        self.kernel_params()
        self.noise()
        self.key_template()

    def descriptor_params(self) -> DescriptorParams:
        return DescriptorParams(self.radius, self.grid, self.angular_bins, self.sigma_s, self.sigma_a)

    def kernel_params(self) -> KernelParams:
        return KernelParams(self.sigma2, self.d)

    def pipeline(self) -> PipelineConfig:
        return PipelineConfig(self.descriptor_params(), self.kernel_params())

    def noise(self) -> NoiseSpec:
        return NoiseSpec(self.pos_sigma, self.angle_sigma, self.drop_prob, self.add_max)

    def key_template(self, master_seed: int = 0, key_id: str = "") -> UserKey:
        return UserKey(master_seed, self.n, self.p, self.k, self.l, self.s_key, key_id)

    def with_overrides(self, values: Mapping[str, object]) -> "Config":
        return dataclasses.replace(self, **coerce(values))


FIELD_TYPES = {f.name: f.type for f in fields(Config)}


def _convert(name: str, raw):
    if not isinstance(raw, str):
        return raw
    kind = FIELD_TYPES[name]
    text = raw.strip()
    if "None" in kind and text.lower() in ("", "none", "auto"):
        return None
    try:
        if kind.startswith("int"):
            return int(text, 0)
        if kind.startswith("float"):
            return float(text)
    except ValueError:
        raise ValidationError(f"{name}: cannot parse {raw!r} as {kind.split(' ')[0]}") from None
    return text


def coerce(values: Mapping[str, object]) -> dict[str, object]:
    out = {}
    for name, raw in values.items():
        if name not in FIELD_TYPES:
            raise ValidationError(f"unknown config key {name!r}")
        out[name] = _convert(name, raw)
    return out


def parse_config(text: str) -> Config:
    values = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValidationError(f"config line {lineno}: expected key=value, got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in FIELD_TYPES:
            raise ValidationError(f"config line {lineno}: unknown config key {key!r}")
        values[key] = value
    return Config(**coerce(values))


def load_config(path) -> Config:
    with open(path, encoding="utf-8") as fh:
        return parse_config(fh.read())


def dumps_config(cfg: Config) -> str:
    lines = []
    for f in fields(Config):
        v = getattr(cfg, f.name)
        lines.append(f"{f.name}={'' if v is None else repr(v) if isinstance(v, float) else v}")
    return "\n".join(lines) + "\n"
