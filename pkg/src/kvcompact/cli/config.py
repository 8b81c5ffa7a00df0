"""Flat ``key = value`` configuration files.

Blank lines and ``#`` comments are ignored. Unknown keys and unparsable
values raise :class:`ConfigError`. A ``preset`` key loads a named policy
first; thresholds given explicitly in the same file override it.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from ..errors import ConfigError, InvalidInputError
from ..memstore import PageGeometry
from ..policy import PRESETS, PolicyParams
from ..quant import PrecisionPair
from .workload import WorkloadShape


def _bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


@dataclass
class SimConfig:
    seed: int = 0
    scenario: str = "synthetic"  # or "example"
    num_requests: int = 8
    arrival_rate: float = 0.5
    prompt_len_min: int = 96
    prompt_len_max: int = 160
    gen_len_min: int = 16
    gen_len_max: int = 48
    layers: int = 2
    kv_heads: int = 2
    queries_per_kv: int = 2
    head_dim: int = 64
    zipf_min: float = 0.5
    zipf_max: float = 2.0
    total_pages: int = 0  # 0 sizes the pool to fit every request at once
    page_bytes: int = 1024
    metadata_bits: int = 32
    score_bits: int = 32
    position_bits: int = 32
    preset: str = ""
    alpha_h: float = 1.0
    alpha_l: float = 0.02
    window: int = 64
    high: str = "K8V4"
    low: str = "K4V2"
    low_precision_enabled: bool = True
    prompt_denominator: str = "position"
    window_at_high: bool = False
    threads: int = 1
    max_ticks: int = 1_000_000
    explicit: frozenset = field(default=frozenset(), compare=False, repr=False)

    def __post_init__(self):
        for name in ("num_requests", "layers", "kv_heads", "queries_per_kv", "head_dim", "page_bytes",
                     "window", "threads", "max_ticks", "prompt_len_min"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.total_pages < 0 or self.gen_len_min < 0:
            raise ConfigError("total_pages and gen_len_min must be non-negative")
        if self.prompt_len_max < self.prompt_len_min or self.gen_len_max < self.gen_len_min:
            raise ConfigError("length maxima must not be below the minima")
        if not self.arrival_rate > 0:
            raise ConfigError("arrival_rate must be positive")
        if self.scenario not in ("synthetic", "example"):
            raise ConfigError(f"unknown scenario {self.scenario!r}")
        if self.preset and self.preset not in PRESETS:
            raise ConfigError(f"unknown preset {self.preset!r}; choose from {sorted(PRESETS)}")
        self.policy()
        self.geometry()

    @property
    def shape(self) -> WorkloadShape:
        return WorkloadShape(self.layers, self.kv_heads, self.queries_per_kv, self.head_dim)

    def policy(self) -> PolicyParams:
        try:
            base = PRESETS[self.preset] if self.preset else PolicyParams()
            ah = self.alpha_h if (not self.preset or "alpha_h" in self.explicit) else base.alpha_h
            al = self.alpha_l if (not self.preset or "alpha_l" in self.explicit) else base.alpha_l
            lpe = (self.low_precision_enabled if (not self.preset or "low_precision_enabled" in self.explicit)
                   else base.low_precision_enabled)
            return replace(base, alpha_h=ah, alpha_l=al, low_precision_enabled=lpe, window=self.window,
                           high=PrecisionPair.parse(self.high), low=PrecisionPair.parse(self.low),
                           prompt_denominator=self.prompt_denominator, window_at_high=self.window_at_high)
        except InvalidInputError as exc:
            raise ConfigError(str(exc)) from None

    def geometry(self) -> PageGeometry:
        try:
            g = PageGeometry(self.page_bytes, self.head_dim, self.metadata_bits, self.score_bits, self.position_bits)
            g.tokens_per_page(PrecisionPair.parse(self.high))
            g.tokens_per_page(PrecisionPair.parse(self.low))
            return g
        except InvalidInputError as exc:
            raise ConfigError(str(exc)) from None

    def items(self) -> list[tuple[str, str]]:
        """(key, value) pairs in declaration order, rendered as config text would be."""
        out = []
        for f in fields(self):
            if f.name == "explicit":
                continue
            v = getattr(self, f.name)
            out.append((f.name, str(v).lower() if isinstance(v, bool) else str(v)))
        return out


_TYPES = {f.name: f.type for f in fields(SimConfig) if f.name != "explicit"}


def _convert(key: str, text: str):
    kind = _TYPES[key]
    if kind in ("int", int):
        return int(text.replace("_", ""))
    if kind in ("float", float):
        return float(text)
    if kind in ("bool", bool):
        return _bool(text)
    return text.strip()


def parse_config(text: str, overrides: dict | None = None) -> SimConfig:
    values: dict = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value")
        key, val = (s.strip() for s in line.split("=", 1))
        if key not in _TYPES:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        try:
            values[key] = _convert(key, val)
        except ValueError as exc:
            raise ConfigError(f"line {lineno}: bad value for {key}: {exc}") from None
    for key, val in (overrides or {}).items():
        if val is not None:
            values[key] = val
    return SimConfig(**values, explicit=frozenset(values))


def load_config(path, overrides: dict | None = None) -> SimConfig:
    if path is None:
        return parse_config("", overrides)
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return parse_config(text, overrides)
