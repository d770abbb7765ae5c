"""Run configuration documents (YAML: comments and nesting allowed)."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields

import yaml

from .errors import DomainError
from .geometry import CameraIntrinsics
from .io import DEFAULT_DIVISOR, DEPTH_FORMATS
from .losses import LossWeights
from .metrics import ALL_METRICS
from .recovery import RecoveryConfig
from .scenes import SceneSpec

__all__ = ["CameraConfig", "SamplerConfig", "RunConfig"]


@dataclass(frozen=True)
class CameraConfig:
    """Initial camera: explicit focal length ``fx`` wins over ``fov``.

    ``u0``/``v0`` default to the image centre.
    """

    fov: float = 60.0
    fx: float | None = None
    u0: float | None = None
    v0: float | None = None

    def intrinsics(self, width: int, height: int) -> CameraIntrinsics:
        base = CameraIntrinsics.from_fov(width, height, self.fov)
        return CameraIntrinsics(
            base.u0 if self.u0 is None else float(self.u0),
            base.v0 if self.v0 is None else float(self.v0),
            base.f if self.fx is None else float(self.fx),
        )


@dataclass(frozen=True)
class SamplerConfig:
    edge_count: int = 50000
    per_plane: int = 5000
    global_count: int = 30000
    whdr_pairs: int = 5000


def _build(cls, data, name: str):
    if data is None:
        return cls()
    if not isinstance(data, dict):
        raise DomainError(f"config section {name!r} must be a mapping")
    known = {f.name for f in fields(cls)}
    extra = set(data) - known
    if extra:
        raise DomainError(f"unknown keys in {name!r}: {sorted(extra)}")
    # YAML has no tuples; dataclass defaults tell us which fields want one.
    kwargs = {}
    for f in fields(cls):
        if f.name in data:
            v = data[f.name]
            kwargs[f.name] = tuple(v) if isinstance(v, list) and isinstance(getattr(cls(), f.name), tuple) else v
    return cls(**kwargs)


@dataclass
class RunConfig:
    inputs: list[str] = field(default_factory=list)
    gt: list[str] = field(default_factory=list)
    format: str | None = None
    divisor: float = DEFAULT_DIVISOR
    scene: SceneSpec | None = None
    camera: CameraConfig = field(default_factory=CameraConfig)
    metrics: list[str] = field(default_factory=lambda: list(ALL_METRICS))
    loss_weights: LossWeights = field(default_factory=LossWeights)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    recovery: RecoveryConfig = field(default_factory=RecoveryConfig)
    seed: int = 0
    out: str | None = None

    def __post_init__(self):
        if self.format is not None and self.format not in DEPTH_FORMATS:
            raise DomainError(f"unknown depth format {self.format!r}")
        if not self.divisor > 0:
            raise DomainError("divisor must be positive")
        unknown = set(self.metrics) - set(ALL_METRICS)
        if unknown:
            raise DomainError(f"unknown metrics: {sorted(unknown)}")

    def to_dict(self) -> dict:
        d = asdict(self)
        for key in ("recovery",):
            d[key] = {k: list(v) if isinstance(v, tuple) else v for k, v in d[key].items()}
        return d

    @classmethod
    def from_dict(cls, data: dict | None) -> "RunConfig":
        data = dict(data or {})
        known = {f.name for f in fields(cls)}
        extra = set(data) - known
        if extra:
            raise DomainError(f"unknown config keys: {sorted(extra)}")
        nested = {
            "camera": CameraConfig,
            "loss_weights": LossWeights,
            "sampler": SamplerConfig,
            "recovery": RecoveryConfig,
        }
        for key, kind in nested.items():
            if key in data:
                data[key] = _build(kind, data[key], key)
        if data.get("scene") is not None:
            data["scene"] = _build(SceneSpec, data["scene"], "scene")
        for key in ("inputs", "gt", "metrics"):
            if key in data and data[key] is not None:
                data[key] = list(data[key])
        return cls(**data)

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False)

    @classmethod
    def from_yaml(cls, text: str) -> "RunConfig":
        try:
            data = yaml.safe_load(text)
        except yaml.YAMLError as exc:
            raise DomainError(f"invalid YAML config: {exc}") from None
        if data is not None and not isinstance(data, dict):
            raise DomainError("config document must be a mapping")
        return cls.from_dict(data)
