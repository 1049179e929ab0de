"""Model and run configuration with flat key=value serialization.

Defaults follow the standard pedestrian benchmarking setup:
256-dimensional keys and
timestamps, 8 heads, 512 feedforward units, two layers per stack, 0.1
dropout, 32-dimensional latent codes, beta=1, KL clip 2, connectivity
threshold 100 m, K=20 samples, Adam at 1e-4 with the learning rate halved
every 10 epochs (CVAE, 100 epochs) or 5 epochs (sampler, 50 epochs).
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass


class ConfigError(Exception):
    """Unknown key, unparseable value, or an invalid field combination."""


@dataclass
class ModelConfig:
    # sequence / model dimensions
    d_s: int = 4                 # agent state dim (4, or 5 with heading)
    d_p: int = 2                 # predicted position dim
    d_tau: int = 256             # timestamp / model width
    d_k: int = 256               # total key/query width across heads
    d_z: int = 32                # latent code dim
    d_ctx: int = 0               # optional per-agent context feature dim
    heads: int = 8
    enc_layers: int = 2
    dec_layers: int = 2
    ffn_dim: int = 512
    mlp_hidden: tuple[int, ...] = (512, 256)
    dropout: float = 0.1
    use_heading: bool = False
    # horizons
    H: int = 7
    T: int = 12
    # CVAE / losses
    beta: float = 1.0
    eta: float = 100.0
    kl_clip: float = 2.0
    kl_clip_mode: str = "upper"   # "upper" clamps KL above, "lower" is free-bits style
    variety_weight: float = 1.0
    K: int = 20
    sigma_d: float = 5.0
    # ablations
    attention_mode: str = "agent_aware"   # or "standard" (tied projections)
    agent_encoding: bool = False          # sinusoidal slot-index encoding (ablation)
    sampler_diag_a: bool = False          # restrict sampler maps to diagonal
    squared_metrics: bool = False

    def validate(self) -> None:
        if self.d_k % self.heads != 0:
            raise ConfigError(f"d_k={self.d_k} must be divisible by heads={self.heads}")
        if self.d_tau % 2 != 0:
            raise ConfigError("d_tau must be even (sin/cos pairs)")
        for name in ("d_s", "d_p", "d_tau", "d_k", "d_z", "heads", "ffn_dim", "T"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.H < 0 or self.d_ctx < 0:
            raise ConfigError("H and d_ctx must be nonnegative")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must lie in [0, 1)")
        if self.eta < 0.0:
            raise ConfigError("eta must be nonnegative")
        if self.K < 1:
            raise ConfigError("K must be at least 1")
        if self.kl_clip_mode not in ("upper", "lower"):
            raise ConfigError("kl_clip_mode must be 'upper' or 'lower'")
        if self.attention_mode not in ("agent_aware", "standard"):
            raise ConfigError("attention_mode must be 'agent_aware' or 'standard'")
        expected_ds = 5 if self.use_heading else 4
        if self.d_s != expected_ds:
            raise ConfigError(f"d_s must be {expected_ds} given use_heading={self.use_heading}")


@dataclass
class RunConfig(ModelConfig):
    # data
    train_files: tuple[str, ...] = ()
    test_files: tuple[str, ...] = ()
    synthetic: str = "none"       # none | crossing | following | avoidance | mixed
    synthetic_train: int = 200
    synthetic_test: int = 50
    noise: float = 0.05
    stride_train: int = 1
    stride_eval: int = 0          # 0 means non-overlapping (H + T + 1)
    rotate_augment: bool = True
    # training
    seed: int = 1
    lr: float = 1e-4
    epochs_cvae: int = 100
    epochs_sampler: int = 50
    lr_halve_every_cvae: int = 10
    lr_halve_every_sampler: int = 5
    grad_clip: float = 1.0

    def eval_stride(self) -> int:
        return self.stride_eval if self.stride_eval > 0 else self.H + self.T + 1


_FIELD_TYPES = {f.name: f.type for f in dataclasses.fields(RunConfig)}


def _parse_value(key: str, raw: str):
    kind = _FIELD_TYPES[key]
    raw = raw.strip()
    if kind == "int":
        return int(raw)
    if kind == "float":
        return float(raw)
    if kind == "bool":
        if raw.lower() in ("true", "1", "yes"):
            return True
        if raw.lower() in ("false", "0", "no"):
            return False
        raise ConfigError(f"{key}: expected a boolean, got {raw!r}")
    if kind == "str":
        return raw
    if kind.startswith("tuple[str"):
        return tuple(p.strip() for p in raw.split(",") if p.strip())
    if kind.startswith("tuple[int"):
        return tuple(int(p) for p in raw.split(",") if p.strip())
    raise ConfigError(f"unsupported config field type for {key}")


def parse_config(text: str, base: RunConfig | None = None) -> RunConfig:
    """Parse flat ``key = value`` lines; '#' starts a comment."""
    cfg = dataclasses.replace(base) if base is not None else RunConfig()
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line.strip()!r}")
        key, raw = (part.strip() for part in stripped.split("=", 1))
        if key not in _FIELD_TYPES:
            raise ConfigError(f"line {lineno}: unknown config key {key!r}")
        try:
            value = _parse_value(key, raw)
        except ConfigError:
            raise
        except ValueError as exc:
            raise ConfigError(f"line {lineno}: bad value for {key}: {raw!r}") from exc
        setattr(cfg, key, value)
    cfg.validate()
    return cfg


def serialize_config(cfg: RunConfig) -> str:
    """Emit the flat key=value form; parse(serialize(c)) == c."""
    lines = []
    for f in dataclasses.fields(RunConfig):
        value = getattr(cfg, f.name)
        if isinstance(value, tuple):
            value = ",".join(str(v) for v in value)
        lines.append(f"{f.name} = {value}")
    return "\n".join(lines) + "\n"


def config_to_dict(cfg: RunConfig) -> dict:
    out = {}
    for f in dataclasses.fields(RunConfig):
        value = getattr(cfg, f.name)
        out[f.name] = list(value) if isinstance(value, tuple) else value
    return out


def config_from_dict(data: dict) -> RunConfig:
    cfg = RunConfig()
    for key, value in data.items():
        if key not in _FIELD_TYPES:
            raise ConfigError(f"unknown config key {key!r} in checkpoint")
        if isinstance(value, list):
            value = tuple(value)
        setattr(cfg, key, value)
    cfg.validate()
    return cfg


def lr_for_epoch(lr0: float, epoch: int, halve_every: int) -> float:
    """Learning rate for a 0-indexed epoch under periodic halving."""
    if halve_every < 1:
        return lr0
    return lr0 * (0.5 ** (epoch // halve_every))
