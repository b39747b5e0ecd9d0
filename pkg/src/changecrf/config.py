"""Run configuration: CRF parameters plus training and I/O settings, stored as JSON."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from .em import TAU_GRID
from .energy import CrfParams

CONFIG_VERSION = 1


@dataclass(frozen=True)
class RunConfig:
    crf: CrfParams = field(default_factory=CrfParams)
    rounds: int = 3
    seed: int = 0
    out: str | None = None
    val_fraction: float = 0.1
    tau_grid: tuple[float, ...] = TAU_GRID
    reg: float = 1e-3
    threads: int = 1
    resize: int | None = None  # square side to resample pairs to; None keeps native size
    dt_count: int = 20
    dt_max: float = 0.5

    def __post_init__(self):
        if int(self.rounds) != self.rounds or self.rounds < 1:
            raise ValueError("rounds must be an integer >= 1")
        if not 0.0 <= self.val_fraction < 1.0:
            raise ValueError("val_fraction must lie in [0, 1)")
        if not self.tau_grid or any(not 0.0 < t < 1.0 for t in self.tau_grid):
            raise ValueError("tau_grid must be a nonempty list of values in (0, 1)")
        if self.reg < 0:
            raise ValueError("reg must be non-negative")
        if self.threads < 1:
            raise ValueError("threads must be at least 1")
        if self.resize is not None and self.resize < 16:
            raise ValueError("resize target must be at least 16")
        if self.dt_count < 1 or not 0.0 < self.dt_max <= 3**0.5:
            raise ValueError("invalid difference-threshold sweep")

    def to_dict(self) -> dict:
        data = asdict(self)
        data["tau_grid"] = list(self.tau_grid)
        data["version"] = CONFIG_VERSION
        return data

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        data = dict(data)
        version = data.pop("version", None)
        if version != CONFIG_VERSION:
            raise ValueError(f"config version must be {CONFIG_VERSION}, got {version!r}")
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        if "crf" in data:
            data["crf"] = CrfParams.from_dict(data["crf"])
        if "tau_grid" in data:
            data["tau_grid"] = tuple(float(t) for t in data["tau_grid"])
        return cls(**data)

    def with_overrides(self, **overrides) -> "RunConfig":
        """Apply CLI overrides; ``None`` values are ignored."""
        top = {}
        crf = {}
        for key, value in overrides.items():
            if value is None:
                continue
            if key == "tau":
                crf.update(tau_policy="fixed", tau=float(value))
            elif key == "knn_k":
                crf["knn_k"] = int(value)
            else:
                top[key] = value
        if crf:
            top["crf"] = replace(self.crf, **crf)
        return replace(self, **top)


def load_config(path: str | Path | None) -> RunConfig:
    if path is None:
        return RunConfig()
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ValueError(f"cannot parse config {path}: {exc.msg}") from exc
    if not isinstance(data, dict):
        raise ValueError("config must be a JSON object")
    return RunConfig.from_dict(data)


def save_config(config: RunConfig, path: str | Path) -> None:
    Path(path).write_text(json.dumps(config.to_dict(), sort_keys=True, indent=1) + "\n", encoding="utf-8")
