"""Model configuration, parameter construction and checkpoint files.

The transformer itself (forward / backward) lives in :mod:`dcdkit.engine`;
this module only owns the parameter containers.
"""
from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

CHECKPOINT_MAGIC = b"DCDM"
CHECKPOINT_VERSION = 1
NORM_MODES = ("none", "pre_norm")


class ConfigError(ValueError):
    """Raised for invalid model or experiment configuration."""


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int
    n_heads: int
    d_model: int
    d_head: int
    d_mlp: int
    vocab_size: int
    max_seq_len: int
    norm_mode: str = "none"
    seed: int = 0

    def validate(self) -> "ModelConfig":
        for name in ("n_layers", "n_heads", "d_model", "d_head", "max_seq_len"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.d_mlp < 0:
            raise ConfigError(f"d_mlp must be >= 0, got {self.d_mlp}")
        if self.vocab_size < 2:
            raise ConfigError(f"vocab_size must be >= 2, got {self.vocab_size}")
        if self.norm_mode not in NORM_MODES:
            raise ConfigError(f"norm_mode must be one of {NORM_MODES}, got {self.norm_mode!r}")
        if not 0 <= int(self.seed) < 2**64:
            raise ConfigError("seed must fit in an unsigned 64-bit integer")
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d).validate()


def param_shapes(cfg: ModelConfig) -> list[tuple[str, tuple[int, ...]]]:
    """Canonical parameter order. Checkpoints store arrays in exactly this order."""
    L, H, d, dh, m = cfg.n_layers, cfg.n_heads, cfg.d_model, cfg.d_head, cfg.d_mlp
    shapes = [
        ("W_E", (cfg.vocab_size, d)),
        ("W_pos", (cfg.max_seq_len, d)),
        ("W_Q", (L, H, d, dh)),
        ("W_K", (L, H, d, dh)),
        ("W_V", (L, H, d, dh)),
        ("W_O", (L, H, dh, d)),
    ]
    if m > 0:
        shapes += [
            ("W_in", (L, d, m)),
            ("b_in", (L, m)),
            ("W_out", (L, m, d)),
            ("b_out", (L, d)),
        ]
    shapes.append(("W_U", (d, cfg.vocab_size)))
    if cfg.norm_mode == "pre_norm":
        shapes += [
            ("ln1_g", (L, d)),
            ("ln1_b", (L, d)),
            ("ln2_g", (L, d)),
            ("ln2_b", (L, d)),
            ("lnf_g", (d,)),
            ("lnf_b", (d,)),
        ]
    return shapes


@dataclass
class Params:
    config: ModelConfig
    tensors: dict[str, np.ndarray] = field(default_factory=dict)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self.tensors

    def copy(self) -> "Params":
        return Params(self.config, {k: v.copy() for k, v in self.tensors.items()})

    def check(self) -> None:
        for name, shape in param_shapes(self.config):
            arr = self.tensors.get(name)
            if arr is None:
                raise ConfigError(f"missing parameter {name}")
            if arr.shape != shape:
                raise ConfigError(f"{name} has shape {arr.shape}, expected {shape}")
            if not np.all(np.isfinite(arr)):
                raise ConfigError(f"{name} has non-finite entries")

    def to_bytes(self) -> bytes:
        return b"".join(
            np.ascontiguousarray(self.tensors[name], dtype="<f8").tobytes()
            for name, _ in param_shapes(self.config)
        )


def build_model(config: ModelConfig, init_std: float = 0.02) -> Params:
    """Seeded Gaussian init: projections ~ N(0, init_std^2), biases zero, norm scales one."""
    config.validate()
    rng = np.random.default_rng(config.seed)
    tensors: dict[str, np.ndarray] = {}
    for name, shape in param_shapes(config):
        if name.startswith("b_") or name.endswith("_b"):
            tensors[name] = np.zeros(shape)
        elif name.endswith("_g"):
            tensors[name] = np.ones(shape)
        else:
            tensors[name] = rng.normal(0.0, init_std, size=shape)
    return Params(config, tensors)


# --- checkpoint files -------------------------------------------------------
#
# layout: b"DCDM" | u32 header length | header JSON (utf-8) | float64 LE payload
# payload = every tensor of param_shapes(config), in order, row-major.


def save_checkpoint(params: Params, path: str | Path, extra: dict | None = None) -> None:
    header = {
        "format_version": CHECKPOINT_VERSION,
        "config": params.config.to_dict(),
        "seed": params.config.seed,
        "order": [[n, list(s)] for n, s in param_shapes(params.config)],
        "extra": extra or {},
    }
    hbytes = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(hbytes)))
        fh.write(hbytes)
        fh.write(params.to_bytes())


def load_checkpoint(path: str | Path) -> tuple[Params, dict]:
    raw = Path(path).read_bytes()
    if raw[:4] != CHECKPOINT_MAGIC:
        raise ConfigError(f"{path}: not a model checkpoint")
    (hlen,) = struct.unpack("<I", raw[4:8])
    header = json.loads(raw[8 : 8 + hlen])
    if header.get("format_version") != CHECKPOINT_VERSION:
        raise ConfigError(f"{path}: unsupported checkpoint version {header.get('format_version')}")
    cfg = ModelConfig.from_dict(header["config"])
    offset = 8 + hlen
    tensors = {}
    for name, shape in param_shapes(cfg):
        count = int(np.prod(shape))
        arr = np.frombuffer(raw, dtype="<f8", count=count, offset=offset)
        tensors[name] = arr.reshape(shape).astype(np.float64)
        offset += 8 * count
    if offset != len(raw):
        raise ConfigError(f"{path}: trailing bytes after payload")
    return Params(cfg, tensors), header.get("extra", {})
