"""Experiment configuration, stored as a flat ``key = value`` file."""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields, replace

MODES = ("full", "node", "edge", "gat")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class Config:
    # model
    dim: int = 32
    kernels: int = 21
    evidence_per_claim: int = 5
    max_len: int = 130
    mode: str = "full"
    # claim-verification training
    batch_size: int = 4
    accumulation: int = 8
    lr: float = 5e-5
    warmup: float = 0.1
    epochs: int = 2
    seed: int = 0
    patience: int = 0  # epochs without dev improvement before stopping; 0 = never
    target_la: float = 1.01  # stop once dev LA reaches this; > 1 = never
    eval_batch: int = 64
    # sentence ranker
    ranker_epochs: int = 5
    ranker_lr: float = 1e-2
    ranker_batch: int = 32
    ranker_margin: float = 1.0

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.dim < 1 or self.batch_size < 1 or self.accumulation < 1 or self.eval_batch < 1:
            raise ConfigError("dim, batch_size, accumulation and eval_batch must be positive")
        if not 0.0 < self.warmup < 1.0:
            raise ConfigError("warmup must lie in (0, 1)")
        if self.epochs < 0 or self.ranker_epochs < 0:
            raise ConfigError("epoch counts must be non-negative")
        if self.evidence_per_claim < 1:
            raise ConfigError("evidence_per_claim must be positive")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    def with_overrides(self, **kw):
        kw = {k: v for k, v in kw.items() if v is not None}
        return replace(self, **kw)

    def dumps(self):
        return "".join(f"{k} = {v}\n" for k, v in self.to_dict().items())


def parse_config(text):
    types = {f.name: f.type for f in fields(Config)}
    casts = {"int": int, "float": float, "str": str}
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in types:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        try:
            out[key] = casts[types[key]](value)
        except ValueError as exc:
            raise ConfigError(f"line {lineno}: bad value for {key}: {value!r}") from exc
    return Config.from_dict(out)


def load_config(path):
    with open(path, encoding="utf-8") as fh:
        return parse_config(fh.read())
