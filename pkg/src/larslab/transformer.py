"""Frozen pre-norm decoder-only transformer with adapter attach points."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Mapping

import numpy as np

from larslab import engine as E
from larslab.engine import Tensor

SITES = ("attn_q", "attn_k", "attn_v", "attn_o", "mlp_up", "mlp_down")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class BackboneConfig:
    L: int = 2
    H: int = 32
    heads: int = 2
    ffn_mult: int = 4
    vocab: int = 64
    max_S: int = 1024
    seed: int = 0

    def __post_init__(self):
        for name in ("L", "H", "heads", "ffn_mult", "vocab", "max_S"):
            v = getattr(self, name)
            if not isinstance(v, int) or v < 1:
                raise ConfigError(f"backbone.{name} must be a positive integer, got {v!r}")
        if self.H % self.heads:
            raise ConfigError(f"H={self.H} is not divisible by heads={self.heads}")

    @property
    def ffn_dim(self) -> int:
        return self.ffn_mult * self.H

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class AttachPoint:
    layer: int
    site: str

    def __post_init__(self):
        if self.site not in SITES:
            raise ConfigError(f"unknown attach site {self.site!r}; expected one of {SITES}")
        if self.layer < 0:
            raise ConfigError(f"negative layer index {self.layer}")

    def __str__(self) -> str:
        return f"layers.{self.layer}.{self.site}"


def site_dims(config: BackboneConfig, site: str) -> tuple[int, int]:
    """(in_features, out_features) of the linear map at ``site``."""
    if site == "mlp_up":
        return config.H, config.ffn_dim
    if site == "mlp_down":
        return config.ffn_dim, config.H
    return config.H, config.H


class Backbone:
    def __init__(self, config: BackboneConfig, weights: dict[str, Tensor]):
        self.config = config
        self.weights = weights

    @property
    def dtype(self) -> np.dtype:
        return self.weights["tok_emb"].dtype

    def parameter_count(self) -> int:
        return sum(w.size for w in self.weights.values())

    def check_attach_point(self, point: AttachPoint) -> None:
        if point.layer >= self.config.L:
            raise ConfigError(f"attach layer {point.layer} >= L={self.config.L}")


def closed_form_parameter_count(config: BackboneConfig) -> int:
    H, F = config.H, config.ffn_dim
    per_layer = 4 * H * H + 2 * H * F
    return config.L * per_layer + config.vocab * H + config.max_S * H + H * config.vocab


def build_backbone(config: BackboneConfig, dtype=np.float32) -> Backbone:
    """Random frozen backbone; N(0, 0.02) init drawn in a fixed order from ``config.seed``."""
    rng = np.random.default_rng(config.seed)
    H, F, V = config.H, config.ffn_dim, config.vocab

    def frozen(name, shape):
        data = rng.normal(0.0, 0.02, size=shape).astype(dtype)
        return Tensor.parameter(data, name=name, trainable=False)

    weights = {
        "tok_emb": frozen("tok_emb", (V, H)),
        "pos_emb": frozen("pos_emb", (config.max_S, H)),
    }
    for layer in range(config.L):
        for site in SITES:
            name = f"layers.{layer}.{site}"
            weights[name] = frozen(name, site_dims(config, site))
    weights["head"] = frozen("head", (H, V))
    return Backbone(config, weights)


_MASKS: dict = {}


def _causal_mask(S: int, dtype) -> Tensor:
    key = (S, np.dtype(dtype))
    if key not in _MASKS:
        m = np.triu(np.full((S, S), -np.inf), k=1).astype(dtype)
        _MASKS[key] = m
    return Tensor(_MASKS[key])


def _linear(model: Backbone, adapters, layer: int, site: str, x: Tensor) -> Tensor:
    w = model.weights[f"layers.{layer}.{site}"]
    adapter = adapters.get(AttachPoint(layer, site)) if adapters else None
    if adapter is None:
        return E.matmul(x, w)
    x = adapter.transform_input(x)
    return adapter.transform_output(x, E.matmul(x, w))


def _block(model: Backbone, adapters, layer: int, x: Tensor, mask: Tensor) -> Tensor:
    cfg = model.config
    B, S, H = x.shape
    nh, d = cfg.heads, H // cfg.heads

    a = E.layer_norm(x)
    q = _linear(model, adapters, layer, "attn_q", a)
    k = _linear(model, adapters, layer, "attn_k", a)
    v = _linear(model, adapters, layer, "attn_v", a)
    qh = E.transpose(E.reshape(q, (B, S, nh, d)), (0, 2, 1, 3))
    kt = E.transpose(E.reshape(k, (B, S, nh, d)), (0, 2, 3, 1))
    vh = E.transpose(E.reshape(v, (B, S, nh, d)), (0, 2, 1, 3))
    scores = E.scalar_mul(E.matmul(qh, kt), 1.0 / math.sqrt(d))
    probs = E.softmax(E.add(scores, mask), axis=-1)
    ctx = E.reshape(E.transpose(E.matmul(probs, vh), (0, 2, 1, 3)), (B, S, H))
    x = E.add(x, _linear(model, adapters, layer, "attn_o", ctx))

    m = E.layer_norm(x)
    act = E.gelu(_linear(model, adapters, layer, "mlp_up", m))
    return E.add(x, _linear(model, adapters, layer, "mlp_down", act))


def _check_tokens(model: Backbone, tokens) -> np.ndarray:
    tokens = np.asarray(tokens)
    if tokens.ndim != 2 or tokens.dtype.kind not in "iu":
        raise ValueError("tokens must be a [B, S] integer array")
    B, S = tokens.shape
    if B < 1 or S < 1:
        raise ValueError(f"empty token grid {tokens.shape}")
    if S > model.config.max_S:
        raise ValueError(f"sequence length {S} exceeds max_S={model.config.max_S}")
    if tokens.min() < 0 or tokens.max() >= model.config.vocab:
        raise ValueError(f"token ids must lie in [0, {model.config.vocab})")
    return tokens


def hidden_states(model: Backbone, tokens, adapters: Mapping | None = None) -> Tensor:
    """Final-layer-normed residual stream, shape [B, S, H]."""
    tokens = _check_tokens(model, tokens)
    S = tokens.shape[1]
    x = E.select_index(model.weights["tok_emb"], tokens, axis=0)
    pos = E.select_index(model.weights["pos_emb"], np.arange(S), axis=0)
    x = E.add(x, pos)
    mask = _causal_mask(S, model.dtype)
    for layer in range(model.config.L):
        x = _block(model, adapters, layer, x, mask)
    return E.layer_norm(x)


def forward(model: Backbone, tokens, adapters: Mapping | None = None) -> Tensor:
    """Logits [B, S, vocab]; base activations land in the "base" scope."""
    return E.matmul(hidden_states(model, tokens, adapters), model.weights["head"])
