"""LARS, LoRA and IA3 adapters.

Each adapter runs inside its own ledger scope (``adapter:<kind>``), so the
bytes it forces the tape to retain are separable from the backbone's.

LARS pools the site input over the sequence, works on the pooled [B, R]
features, and adds the same [B, out] update to every position. None of the
tensors it saves for backward carry an S axis when pooling is fixed.
"""

from __future__ import annotations

from collections.abc import Mapping
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from larslab import engine as E
from larslab.engine import Tensor
from larslab.transformer import SITES, AttachPoint, Backbone, ConfigError, site_dims

ADAPTER_KINDS = ("lars", "lora", "ia3")
POOLINGS = ("fixed", "learned")
GELU_POSITIONS = ("before_proj", "after_proj")
DEFAULT_TARGETS = {
    "lars": ("attn_o", "mlp_down"),
    "lora": ("attn_o", "mlp_down"),
    "ia3": ("attn_v", "mlp_down"),
}


def scope_name(kind: str) -> str:
    return f"adapter:{kind}"


@dataclass(frozen=True)
class AdapterSpec:
    kind: str = "lars"
    R: int = 8
    pooling: str = "fixed"
    targets: tuple = ()
    gelu_position: str = "before_proj"
    tau_init: tuple = (1.0, 1.0)
    alpha_init: float = 1.0
    lora_alpha: float = 8.0
    init_std: float = 0.02
    gating: bool = True
    mixing: bool = True
    nonlinearity: bool = True

    def __post_init__(self):
        if self.kind not in ADAPTER_KINDS:
            raise ConfigError(f"adapter.kind must be one of {ADAPTER_KINDS}, got {self.kind!r}")
        if not isinstance(self.R, int) or self.R < 1:
            raise ConfigError(f"adapter.R must be a positive integer, got {self.R!r}")
        if self.pooling not in POOLINGS:
            raise ConfigError(f"adapter.pooling must be one of {POOLINGS}")
        if self.gelu_position not in GELU_POSITIONS:
            raise ConfigError(f"adapter.gelu_position must be one of {GELU_POSITIONS}")
        targets = tuple(self.targets) or DEFAULT_TARGETS[self.kind]
        for t in targets:
            if t not in SITES:
                raise ConfigError(f"unknown target module {t!r}; expected one of {SITES}")
        object.__setattr__(self, "targets", targets)
        object.__setattr__(self, "tau_init", tuple(float(t) for t in self.tau_init))
        if len(self.tau_init) != 2:
            raise ConfigError("adapter.tau_init needs two values")

    @property
    def label(self) -> str:
        return f"lars-{self.pooling}" if self.kind == "lars" else self.kind

    def to_dict(self) -> dict:
        d = asdict(self)
        d["targets"] = list(self.targets)
        d["tau_init"] = list(self.tau_init)
        return d


@dataclass
class LarsParams:
    A_pool: Tensor
    B_pool: Tensor
    alpha: Tensor
    W_x: Tensor | None = None
    W_h: Tensor | None = None
    tau1: Tensor | None = None
    tau2: Tensor | None = None
    M_mix: Tensor | None = None
    w_pool: Tensor | None = None
    pooling: str = "fixed"
    gelu_position: str = "before_proj"
    gating: bool = True
    mixing: bool = True
    nonlinearity: bool = True

    def tensors(self) -> dict[str, Tensor]:
        return {f.name: getattr(self, f.name) for f in fields(self)
                if isinstance(getattr(self, f.name), Tensor)}


@dataclass
class LoraParams:
    A: Tensor
    B: Tensor
    scale: float

    def tensors(self) -> dict[str, Tensor]:
        return {"A": self.A, "B": self.B}


@dataclass
class Ia3Params:
    l: Tensor

    def tensors(self) -> dict[str, Tensor]:
        return {"l": self.l}


def _param(data, name, dtype):
    return Tensor.parameter(np.asarray(data, dtype=dtype), name=name)


def init_lars_params(in_dim: int, out_dim: int, spec: AdapterSpec, rng: np.random.Generator,
                     dtype=np.float32) -> LarsParams:
    R = spec.R
    if R >= min(in_dim, out_dim):
        raise ConfigError(f"LARS rank R={R} must be below the site width {min(in_dim, out_dim)}")
    std = spec.init_std
    p = LarsParams(
        A_pool=_param(rng.normal(0, std, (in_dim, R)), "A_pool", dtype),
        B_pool=_param(np.zeros((R, out_dim)), "B_pool", dtype),
        alpha=_param(spec.alpha_init, "alpha", dtype),
        pooling=spec.pooling,
        gelu_position=spec.gelu_position,
        gating=spec.gating,
        mixing=spec.mixing and spec.gating,
        nonlinearity=spec.nonlinearity,
    )
    if spec.gating:
        p.W_x = _param(rng.normal(0, std, (in_dim, R)), "W_x", dtype)
        p.W_h = _param(rng.normal(0, std, (R, R)), "W_h", dtype)
        p.tau1 = _param(spec.tau_init[0], "tau1", dtype)
        p.tau2 = _param(spec.tau_init[1], "tau2", dtype)
        if p.mixing:
            p.M_mix = _param(np.eye(R), "M_mix", dtype)
    if spec.pooling == "learned":
        p.w_pool = _param(np.zeros(in_dim), "w_pool", dtype)
    return p


def init_lora_params(in_dim: int, out_dim: int, spec: AdapterSpec, rng: np.random.Generator,
                     dtype=np.float32) -> LoraParams:
    return LoraParams(
        A=_param(rng.normal(0, spec.init_std, (in_dim, spec.R)), "A", dtype),
        B=_param(np.zeros((spec.R, out_dim)), "B", dtype),
        scale=spec.lora_alpha / spec.R,
    )


def init_ia3_params(dim: int, dtype=np.float32) -> Ia3Params:
    return Ia3Params(l=_param(np.ones(dim), "l", dtype))


# --------------------------------------------------------------------------
# forward rules
# --------------------------------------------------------------------------

def _check_seq(X: Tensor) -> None:
    if X.data.ndim != 3:
        raise E.ShapeError("pool", (X.data.ndim, 3), "expects [B, S, H]")
    if X.shape[1] == 0:
        raise ValueError("cannot pool an empty sequence (S = 0)")


def lars_pool_fixed(X: Tensor) -> Tensor:
    """Sequence mean plus the final token row: [B, S, H] -> [B, H]."""
    _check_seq(X)
    S = X.shape[1]
    return E.add(E.mean_over_axis(X, 1), E.select_index(X, S - 1, axis=1))


def lars_pool_learned(X: Tensor, w_pool: Tensor) -> Tensor:
    """Softmax-weighted sum of token rows, scores X_i . w_pool."""
    _check_seq(X)
    B, S, H = X.shape
    scores = E.reshape(E.matmul(X, w_pool), (B, 1, S))
    weights = E.softmax(scores, axis=-1)
    return E.reshape(E.matmul(weights, X), (B, H))


def lars_forward(X: Tensor, p: LarsParams, base_out: Tensor) -> Tensor:
    B, S = X.shape[0], X.shape[1]
    if base_out.shape[:2] != (B, S) or base_out.shape[2] != p.B_pool.shape[1]:
        raise E.ShapeError("lars_forward", (tuple(base_out.shape), (B, S, p.B_pool.shape[1])))
    with E.scope(scope_name("lars")):
        if p.pooling == "learned":
            x_pool = lars_pool_learned(X, p.w_pool)
        else:
            x_pool = lars_pool_fixed(X)
        h = E.matmul(x_pool, p.A_pool)
        if p.gating:
            glob = E.scalar_mul(E.matmul(x_pool, p.W_x), p.tau1)
            loc = E.scalar_mul(E.matmul(E.layer_norm(h), p.W_h), p.tau2)
            g = E.sigmoid(E.add(glob, loc))
            if p.mixing:
                g = E.matmul(g, p.M_mix)
            h = E.mul(g, h)
        if p.nonlinearity and p.gelu_position == "before_proj":
            h = E.gelu(h)
        update = E.matmul(h, p.B_pool)
        if p.nonlinearity and p.gelu_position == "after_proj":
            update = E.gelu(update)
        update = E.scalar_mul(update, p.alpha)
        return E.add(base_out, E.broadcast_over_axis(update, 1, S))


def lora_forward(X: Tensor, p: LoraParams, base_out: Tensor) -> Tensor:
    with E.scope(scope_name("lora")):
        update = E.matmul(E.matmul(X, p.A), p.B)
        return E.add(base_out, E.scalar_mul(update, p.scale))


def ia3_forward(base_out: Tensor, p: Ia3Params) -> Tensor:
    with E.scope(scope_name("ia3")):
        return E.mul(base_out, p.l)


# --------------------------------------------------------------------------
# attachment
# --------------------------------------------------------------------------

class LarsAdapter:
    kind = "lars"

    def __init__(self, params: LarsParams):
        self.params = params

    def transform_input(self, x: Tensor) -> Tensor:
        return x

    def transform_output(self, x: Tensor, base_out: Tensor) -> Tensor:
        return lars_forward(x, self.params, base_out)


class LoraAdapter:
    kind = "lora"

    def __init__(self, params: LoraParams):
        self.params = params

    def transform_input(self, x: Tensor) -> Tensor:
        return x

    def transform_output(self, x: Tensor, base_out: Tensor) -> Tensor:
        return lora_forward(x, self.params, base_out)


class Ia3Adapter:
    """Scales the site output, or the site input for ``mlp_down``."""

    kind = "ia3"

    def __init__(self, params: Ia3Params, on_input: bool):
        self.params = params
        self.on_input = on_input

    def transform_input(self, x: Tensor) -> Tensor:
        return ia3_forward(x, self.params) if self.on_input else x

    def transform_output(self, x: Tensor, base_out: Tensor) -> Tensor:
        return base_out if self.on_input else ia3_forward(base_out, self.params)


@dataclass
class AdapterSet(Mapping):
    spec: AdapterSpec
    adapters: dict = field(default_factory=dict)

    def __getitem__(self, point: AttachPoint):
        return self.adapters[point]

    def __iter__(self):
        return iter(self.adapters)

    def __len__(self):
        return len(self.adapters)

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        out = []
        for point, adapter in self.adapters.items():
            for name, t in adapter.params.tensors().items():
                out.append((f"{point}.{name}", t))
        return out

    def parameters(self) -> list[Tensor]:
        return [t for _, t in self.named_parameters()]

    def trainable_count(self) -> int:
        return sum(t.size for t in self.parameters())


def make_adapter(spec: AdapterSpec, in_dim: int, out_dim: int, site: str,
                 rng: np.random.Generator, dtype=np.float32):
    if spec.kind == "lars":
        return LarsAdapter(init_lars_params(in_dim, out_dim, spec, rng, dtype))
    if spec.kind == "lora":
        return LoraAdapter(init_lora_params(in_dim, out_dim, spec, rng, dtype))
    on_input = site == "mlp_down"
    return Ia3Adapter(init_ia3_params(in_dim if on_input else out_dim, dtype), on_input)


def attach(model: Backbone, spec: AdapterSpec, seed: int = 0) -> AdapterSet:
    """One adapter per (layer, target site), initialised so the model output is unchanged."""
    rng = np.random.default_rng(seed)
    aset = AdapterSet(spec)
    for layer in range(model.config.L):
        for site in spec.targets:
            point = AttachPoint(layer, site)
            model.check_attach_point(point)
            in_dim, out_dim = site_dims(model.config, site)
            aset.adapters[point] = make_adapter(spec, in_dim, out_dim, site, rng, model.dtype)
    return aset
