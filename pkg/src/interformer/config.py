"""Architecture hyperparameters and their flat ``key = value`` text form."""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields
from typing import Optional, Tuple

from .errors import ConfigError

MODES = ("sole", "sep", "n2s", "s2n", "int")
BACKBONES = ("dot", "fm", "dcnv2", "dhen")
GATE_SIGMAS = ("identity", "sigmoid", "tanh")

# classifier head menu, scaled down by ``head_div`` for desk-sized runs
HEAD_MENU = (1024, 512, 256, 128)


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int = 1
    dim: int = 8
    backbone: str = "dhen"
    heads: int = 2
    head_dim: Optional[int] = None
    n_cls: int = 4
    n_pma: int = 2
    n_recent: int = 2
    n_sum: int = 4
    mode: str = "int"
    head_sizes: Tuple[int, ...] = tuple(s // 16 for s in HEAD_MENU)
    activation: str = "swish"
    gate_sigma: str = "identity"
    inter_hidden: int = 64
    pffn_hidden: int = 16
    mask_hidden: Optional[int] = None
    fm_rank: int = 16
    dcn_rank: int = 32
    n_cross: int = 1
    dhen_layers: int = 1
    ln_eps: float = 1e-6

    def __post_init__(self):
        if self.n_layers < 1:
            raise ConfigError("n_layers must be >= 1")
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.backbone not in BACKBONES:
            raise ConfigError(f"backbone must be one of {BACKBONES}, got {self.backbone!r}")
        if self.gate_sigma not in GATE_SIGMAS:
            raise ConfigError(f"gate_sigma must be one of {GATE_SIGMAS}")
        if self.dim < 1 or self.heads < 1:
            raise ConfigError("dim and heads must be >= 1")
        if self.head_dim is None and self.dim % self.heads:
            raise ConfigError(f"dim {self.dim} is not divisible by heads {self.heads}")
        if self.d_k % 2:
            raise ConfigError(f"rotary embeddings need an even head dim, got {self.d_k}")
        if min(self.n_cls, self.n_pma, self.n_recent) < 0 or self.n_sum < 1:
            raise ConfigError("token counts must be non-negative and n_sum >= 1")
        if self.n_seq_summary < 1:
            raise ConfigError("n_cls + n_pma + n_recent must be >= 1")
        if self.n_cross < 1 or self.dhen_layers < 1:
            raise ConfigError("n_cross and dhen_layers must be >= 1")
        if not self.head_sizes or any(s < 1 for s in self.head_sizes):
            raise ConfigError("head_sizes must be non-empty positive sizes")

    @property
    def d_k(self) -> int:
        return self.head_dim if self.head_dim is not None else self.dim // self.heads

    @property
    def n_seq_summary(self) -> int:
        return self.n_cls + self.n_pma + self.n_recent

    @property
    def has_sequence_arch(self) -> bool:
        return self.mode != "sole"

    @property
    def nonseq_to_seq(self) -> bool:
        return self.mode in ("n2s", "int")

    @property
    def seq_to_nonseq(self) -> bool:
        return self.mode in ("s2n", "int")

    def replace(self, **kw) -> "ModelConfig":
        d = asdict(self)
        d.update(kw)
        return ModelConfig(**d)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        kinds = {f.name: f for f in fields(cls)}
        out = {}
        for k, v in d.items():
            if k not in kinds:
                raise ConfigError(f"unknown model config key {k!r}")
            out[k] = coerce(cls(), k, v)
        return cls(**out)


def coerce(template, key: str, value):
    """Convert a text ``value`` to the type of ``template.key``."""
    current = getattr(template, key)
    if not isinstance(value, str):
        return tuple(value) if isinstance(current, tuple) else value
    text = value.strip()
    if text in ("None", "none", ""):
        return None
    if isinstance(current, bool):
        if text.lower() not in ("true", "false", "1", "0"):
            raise ConfigError(f"{key}: {text!r} is not a boolean")
        return text.lower() in ("true", "1")
    if isinstance(current, tuple):
        parts = [p for p in text.strip("()").replace(" ", "").split(",") if p]
        try:
            return tuple(int(p) for p in parts)
        except ValueError:
            raise ConfigError(f"{key}: {text!r} is not a list of integers") from None
    try:
        if isinstance(current, int) or (current is None and key in ("head_dim", "mask_hidden")):
            return int(text)
        if isinstance(current, float):
            return float(text)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {text!r}") from None
    return text


def dump_kv(d: dict) -> str:
    lines = []
    for k, v in d.items():
        if isinstance(v, tuple):
            v = ",".join(str(x) for x in v)
        lines.append(f"{k} = {v}")
    return "\n".join(lines) + "\n"


def parse_kv(text: str) -> dict:
    out = {}
    for n, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"config line {n}: expected 'key = value', got {raw!r}")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out
