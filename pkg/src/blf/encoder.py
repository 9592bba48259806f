"""Long-context transformer encoder built on sliding-window attention.

Pre-norm residual blocks, learned absolute position embeddings, separate
global q/k/v projections per layer. Presets `small` and `base` reproduce the
published parameter totals at a 64K vocabulary; `tiny` exists for fast desk
runs.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .attention import GLOBAL, LOCAL, PAD, sliding_window_attention
from .checkpoint import save_checkpoint
from .errors import ConfigError, RangeError
from .tensor import (
    Parameter,
    Tensor,
    add,
    dropout,
    embedding,
    gelu,
    layer_norm,
    matmul,
    reshape,
    transpose,
)


@dataclass(frozen=True)
class EncoderConfig:
    vocab_size: int = 64000
    hidden: int = 256
    layers: int = 12
    heads: int = 4
    intermediate: int = 1024
    window: int = 256
    max_positions: int = 4096
    dropout: float = 0.0

    def __post_init__(self):
        if self.hidden <= 0 or self.heads <= 0 or self.intermediate <= 0 or self.vocab_size <= 0:
            raise ConfigError("all extents must be positive")
        if self.layers < 0:
            raise ConfigError("layers must be non-negative")
        if self.hidden % self.heads != 0:
            raise ConfigError(f"hidden {self.hidden} not divisible by heads {self.heads}")
        if self.window % 2 != 0 or self.window <= 0:
            raise ConfigError(f"window must be even and positive, got {self.window}")
        if self.window > self.max_positions:
            raise ConfigError(f"window {self.window} exceeds max_positions {self.max_positions}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must be in [0, 1), got {self.dropout}")

    @property
    def head_dim(self) -> int:
        return self.hidden // self.heads


_PRESETS = {
    "small": dict(hidden=256, layers=12, heads=4, intermediate=1024),
    "base": dict(hidden=768, layers=12, heads=12, intermediate=3072),
    "tiny": dict(
        vocab_size=512, hidden=64, layers=2, heads=4, intermediate=256, window=8, max_positions=128
    ),
}


def preset(name: str, **overrides) -> EncoderConfig:
    if name not in _PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(_PRESETS)}")
    kwargs = dict(_PRESETS[name])
    kwargs.update(overrides)
    return EncoderConfig(**kwargs)


def count_parameters(config: EncoderConfig, tied_embeddings: bool = False) -> int:
    """Exact trainable-scalar count. `tied_embeddings` excludes the token and
    position tables (counted once by their owner)."""
    H, I = config.hidden, config.intermediate
    attn = 7 * (H * H + H)  # q, k, v, global q/k/v, output, each with bias
    norms = 2 * 2 * H
    ffn = (H * I + I) + (I * H + H)
    total = config.layers * (attn + norms + ffn) + 2 * H  # final norm
    if not tied_embeddings:
        total += config.vocab_size * H + config.max_positions * H
    return total


def make_roles(ids: np.ndarray, pad_id: int | None, first_token_global: bool = False) -> np.ndarray:
    """Role matrix from token ids: padding / local / (optionally) leading global."""
    roles = np.full(ids.shape, LOCAL, dtype=np.int64)
    if pad_id is not None:
        roles[ids == pad_id] = PAD
    if first_token_global:
        nonpad_first = roles[:, 0] != PAD
        roles[nonpad_first, 0] = GLOBAL
    return roles


def _init_weight(rng: np.random.Generator, shape, dtype) -> np.ndarray:
    return rng.normal(0.0, 0.02, size=shape).astype(dtype)


ENCODER_KIND = "encoder"


def save_encoder_checkpoint(directory, encoder: "LongformerEncoder", extra: dict | None = None) -> None:
    """Write just the encoder tower, renamed under the canonical `enc.` prefix."""
    from dataclasses import asdict

    arrays = {}
    for p in encoder.params():
        arrays["enc." + p.name.split(".", 1)[1]] = p.data
    payload = dict(extra or {})
    payload["kind"] = ENCODER_KIND
    save_checkpoint(directory, arrays, asdict(encoder.config), payload)


class LongformerEncoder:
    """Parameter container plus forward pass. Pure given parameters."""

    def __init__(
        self,
        config: EncoderConfig,
        rng: np.random.Generator,
        prefix: str = "enc",
        shared_token_embedding: Parameter | None = None,
        shared_position_embedding: Parameter | None = None,
        dtype=np.float32,
    ):
        self.config = config
        self.dtype = dtype
        p = prefix
        H, I = config.hidden, config.intermediate

        if shared_token_embedding is not None:
            if shared_token_embedding.shape != (config.vocab_size, H):
                raise ConfigError(
                    f"shared token embedding shape {shared_token_embedding.shape} != "
                    f"({config.vocab_size}, {H})"
                )
            self.tok_emb = shared_token_embedding
        else:
            self.tok_emb = Parameter(_init_weight(rng, (config.vocab_size, H), dtype), f"{p}.tok_emb", dtype=dtype)
        if shared_position_embedding is not None:
            self.pos_emb = shared_position_embedding
        else:
            self.pos_emb = Parameter(_init_weight(rng, (config.max_positions, H), dtype), f"{p}.pos_emb", dtype=dtype)
        self._embeddings_shared = shared_token_embedding is not None

        self.layers = []
        for l in range(config.layers):
            lp = f"{p}.layers.{l}"
            layer = {}
            for proj in ("q", "k", "v", "gq", "gk", "gv", "out"):
                layer[f"{proj}.w"] = Parameter(_init_weight(rng, (H, H), dtype), f"{lp}.attn.{proj}.w", dtype=dtype)
                layer[f"{proj}.b"] = Parameter(np.zeros(H, dtype), f"{lp}.attn.{proj}.b", dtype=dtype)
            for ln in ("ln1", "ln2"):
                layer[f"{ln}.g"] = Parameter(np.ones(H, dtype), f"{lp}.{ln}.g", dtype=dtype)
                layer[f"{ln}.b"] = Parameter(np.zeros(H, dtype), f"{lp}.{ln}.b", dtype=dtype)
            layer["ffn.w1"] = Parameter(_init_weight(rng, (H, I), dtype), f"{lp}.ffn.w1", dtype=dtype)
            layer["ffn.b1"] = Parameter(np.zeros(I, dtype), f"{lp}.ffn.b1", dtype=dtype)
            layer["ffn.w2"] = Parameter(_init_weight(rng, (I, H), dtype), f"{lp}.ffn.w2", dtype=dtype)
            layer["ffn.b2"] = Parameter(np.zeros(H, dtype), f"{lp}.ffn.b2", dtype=dtype)
            self.layers.append(layer)

        self.ln_f_g = Parameter(np.ones(H, dtype), f"{p}.ln_f.g", dtype=dtype)
        self.ln_f_b = Parameter(np.zeros(H, dtype), f"{p}.ln_f.b", dtype=dtype)

    def params(self, include_embeddings: bool = True) -> list[Parameter]:
        out: list[Parameter] = []
        if include_embeddings:
            out.extend([self.tok_emb, self.pos_emb])
        for layer in self.layers:
            out.extend(layer.values())
        out.extend([self.ln_f_g, self.ln_f_b])
        return out

    def _proj_heads(self, x: Tensor, layer: dict, name: str, B: int, S: int) -> Tensor:
        cfg = self.config
        h = add(matmul(x, layer[f"{name}.w"]), layer[f"{name}.b"])
        return transpose(reshape(h, (B, S, cfg.heads, cfg.head_dim)), (0, 2, 1, 3))

    def forward(
        self,
        ids: np.ndarray,
        roles: np.ndarray,
        train: bool = False,
        rng: np.random.Generator | None = None,
    ) -> Tensor:
        cfg = self.config
        ids = np.asarray(ids)
        B, S = ids.shape
        if S > cfg.max_positions:
            raise RangeError(f"sequence length {S} exceeds max_positions {cfg.max_positions}")
        use_dropout = train and cfg.dropout > 0.0
        if use_dropout and rng is None:
            raise ConfigError("training forward with dropout needs an rng")

        x = add(embedding(self.tok_emb, ids), embedding(self.pos_emb, np.arange(S)))
        if use_dropout:
            x = dropout(x, cfg.dropout, rng)

        has_global = bool((roles == GLOBAL).any())
        for layer in self.layers:
            ln1 = layer_norm(x, layer["ln1.g"], layer["ln1.b"])
            qh = self._proj_heads(ln1, layer, "q", B, S)
            kh = self._proj_heads(ln1, layer, "k", B, S)
            vh = self._proj_heads(ln1, layer, "v", B, S)
            if has_global:
                att = sliding_window_attention(
                    qh, kh, vh, cfg.window, roles,
                    self._proj_heads(ln1, layer, "gq", B, S),
                    self._proj_heads(ln1, layer, "gk", B, S),
                    self._proj_heads(ln1, layer, "gv", B, S),
                )
            else:
                att = sliding_window_attention(qh, kh, vh, cfg.window, roles)
            merged = reshape(transpose(att, (0, 2, 1, 3)), (B, S, cfg.hidden))
            att_out = add(matmul(merged, layer["out.w"]), layer["out.b"])
            if use_dropout:
                att_out = dropout(att_out, cfg.dropout, rng)
            x = add(x, att_out)

            ln2 = layer_norm(x, layer["ln2.g"], layer["ln2.b"])
            h = gelu(add(matmul(ln2, layer["ffn.w1"]), layer["ffn.b1"]))
            h = add(matmul(h, layer["ffn.w2"]), layer["ffn.b2"])
            if use_dropout:
                h = dropout(h, cfg.dropout, rng)
            x = add(x, h)

        return layer_norm(x, self.ln_f_g, self.ln_f_b)
