"""Run configuration as ``key=value`` text."""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

from .errors import ConfigError


@dataclass(frozen=True)
class RunConfig:
    K: int = 4
    n: int = 18
    c: int = 64
    rnn_layers: int = 2
    rnn_hidden: int = 128
    gnn_layers: int = 2
    gnn_hidden: int = 64
    num_classes: int = 3
    focal_gamma: float = 2.0
    lr: float = 1e-4
    adam_betas: tuple[float, float] = (0.9, 0.99)
    epochs: int = 100
    seed: int = 0
    use_gnn: bool = True
    use_edge_feat: bool = True
    use_psl: bool = True

    def __post_init__(self):
        if self.c % 4:
            raise ConfigError(f"c={self.c} must be divisible by 4")
        for name in ("K", "n", "c", "rnn_layers", "rnn_hidden", "gnn_layers", "gnn_hidden", "num_classes"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.epochs < 0 or self.lr <= 0 or self.focal_gamma < 0:
            raise ConfigError("epochs, lr and focal_gamma must be non-negative (lr > 0)")

    def to_text(self) -> str:
        lines = []
        for k, v in asdict(self).items():
            if isinstance(v, bool):
                v = "true" if v else "false"
            elif isinstance(v, (tuple, list)):
                v = ",".join(repr(float(x)) for x in v)
            elif isinstance(v, float):
                v = repr(v)
            lines.append(f"{k}={v}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str, base: "RunConfig | None" = None) -> "RunConfig":
        values = {}
        types = {f.name: f.type for f in fields(cls)}
        for lineno, raw in enumerate(text.splitlines(), start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {lineno}: expected key=value, got {raw!r}")
            key, val = (s.strip() for s in line.split("=", 1))
            if key not in types:
                raise ConfigError(f"line {lineno}: unknown config key {key!r}")
            values[key] = _parse(key, val, types[key])
        return replace(base or cls(), **values)

    @classmethod
    def load(cls, path: str | Path) -> "RunConfig":
        return cls.from_text(Path(path).read_text())

    def with_overrides(self, **kw) -> "RunConfig":
        unknown = set(kw) - {f.name for f in fields(self)}
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return replace(self, **kw)

    def diff(self, other: "RunConfig") -> list[str]:
        a, b = asdict(self), asdict(other)
        return [f"{k}: {a[k]!r} != {b[k]!r}" for k in a if a[k] != b[k]]


def _parse(key: str, val: str, typ: str):
    try:
        if typ == "bool":
            low = val.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(val)
        if typ == "int":
            return int(val)
        if typ == "float":
            return float(val)
        parts = tuple(float(x) for x in val.split(","))
        if len(parts) != 2:
            raise ValueError(val)
        return parts
    except ValueError:
        raise ConfigError(f"bad value for {key}: {val!r}") from None
