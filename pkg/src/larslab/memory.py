"""Closed-form peak-memory model for one training step.

The activation terms enumerate, per layer and per attach point, the tensors
each primitive keeps for backward (deduplicated by name exactly as the ledger
deduplicates by identity). Nothing here runs the engine, so the ledger is an
independent check on these formulas.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from fractions import Fraction

from larslab.adapters import AdapterSpec
from larslab.transformer import BackboneConfig, closed_form_parameter_count, site_dims

OPTIMIZER_STATE_SLOTS = {"adamw": 2}


@dataclass
class MemoryEstimate:
    params_bytes: int
    grads_bytes: int
    optimizer_bytes: int
    base_act_bytes: int
    adapter_act_bytes: int
    loss_act_bytes: int = 0
    total_bytes: int = field(init=False)

    def __post_init__(self):
        parts = (self.params_bytes, self.grads_bytes, self.optimizer_bytes,
                 self.base_act_bytes, self.adapter_act_bytes, self.loss_act_bytes)
        if any(p < 0 for p in parts):
            raise ValueError("memory components must be non-negative")
        self.total_bytes = sum(parts)

    def to_dict(self) -> dict:
        return asdict(self)


def base_activation_elements(config: BackboneConfig, B: int, S: int, flash: bool = False) -> int:
    """Elements the frozen backbone retains: a*B*S + b*B*S^2."""
    H, F = config.H, config.ffn_dim
    per_layer = (
        H          # layer-norm input (residual stream)
        + H        # normed activations shared by q/k/v projections
        + 3 * H    # per-head q, k^T, v
        + H        # attention context into the output projection
        + H        # second layer-norm input
        + H        # its output into mlp_up
        + 2 * F    # gelu input and mlp_down input
    ) * B * S + 4 * B * S  # mean/var for both layer norms
    if not flash:
        per_layer += config.heads * B * S * S  # softmax probabilities
    final = 2 * B * S * H + 2 * B * S  # final norm input + stats, head input
    return config.L * per_layer + final


def lars_site_elements(spec: AdapterSpec, in_dim: int, out_dim: int, B: int, S: int) -> int:
    R = spec.R
    saved = {"x_pool": B * in_dim}
    if spec.pooling == "learned":
        saved["pool_weights"] = B * S
    features = "h"
    if spec.gating:
        saved.update(h=B * R, ln_stats=2 * B, xw=B * R, ln_h=B * R, lw=B * R, g=B * R)
        if spec.mixing:
            saved["g_mix"] = B * R
        features = "h_mod"
    saved[features] = B * R  # read by gelu, or directly by the B_pool projection
    if spec.nonlinearity and spec.gelu_position == "before_proj":
        saved["h_act"] = B * R
    if spec.nonlinearity and spec.gelu_position == "after_proj":
        saved["proj"] = B * out_dim
    saved["update"] = B * out_dim  # kept by the alpha scaling
    return sum(saved.values())


def adapter_activation_elements(config: BackboneConfig, spec: AdapterSpec, B: int, S: int) -> int:
    total = 0
    for site in spec.targets:
        in_dim, out_dim = site_dims(config, site)
        if spec.kind == "lars":
            per = lars_site_elements(spec, in_dim, out_dim, B, S)
        elif spec.kind == "lora":
            # the site input is already held by the base projection
            per = B * S * spec.R
        else:
            per = B * S * (in_dim if site == "mlp_down" else out_dim)
        total += per
    return config.L * total


def trainable_parameter_count(config: BackboneConfig, spec: AdapterSpec) -> int:
    R = spec.R
    total = 0
    for site in spec.targets:
        in_dim, out_dim = site_dims(config, site)
        if spec.kind == "lars":
            n = in_dim * R + R * out_dim + 1
            if spec.gating:
                n += in_dim * R + R * R + 2
                if spec.mixing:
                    n += R * R
            if spec.pooling == "learned":
                n += in_dim
        elif spec.kind == "lora":
            n = in_dim * R + R * out_dim
        else:
            n = in_dim if site == "mlp_down" else out_dim
        total += n
    return config.L * total


def estimate_peak(config: BackboneConfig, spec: AdapterSpec, B: int, S: int,
                  optimizer: str = "adamw", gc_factor: float = 1.0, flash: bool = False,
                  num_classes: int = 0, dtype_bytes: int = 4) -> MemoryEstimate:
    """Peak training memory in bytes, split into the standard four terms."""
    if optimizer not in OPTIMIZER_STATE_SLOTS:
        raise ValueError(f"unknown optimizer {optimizer!r}")
    if not 0 < gc_factor <= 1:
        raise ValueError(f"gc_factor must lie in (0, 1], got {gc_factor}")
    trainable = trainable_parameter_count(config, spec)
    base = base_activation_elements(config, B, S, flash) * dtype_bytes
    return MemoryEstimate(
        params_bytes=(closed_form_parameter_count(config) + trainable) * dtype_bytes,
        grads_bytes=trainable * dtype_bytes,
        optimizer_bytes=OPTIMIZER_STATE_SLOTS[optimizer] * trainable * dtype_bytes,
        base_act_bytes=round(base * gc_factor),
        adapter_act_bytes=adapter_activation_elements(config, spec, B, S) * dtype_bytes,
        loss_act_bytes=B * num_classes * dtype_bytes,
    )


def fit_growth_rate(points) -> tuple[float, float, float]:
    """Ordinary least squares of bytes on S, computed exactly in rationals.

    Returns (slope, intercept, r2). Constant data gets r2 = 1 by convention.
    """
    pts = [(Fraction(s), Fraction(y)) for s, y in points]
    if len(pts) < 3:
        raise ValueError("need at least 3 points to fit a growth rate")
    if len({s for s, _ in pts}) < len(pts):
        raise ValueError("sequence lengths must be distinct")
    n = len(pts)
    ms = sum(s for s, _ in pts) / n
    my = sum(y for _, y in pts) / n
    sxx = sum((s - ms) ** 2 for s, _ in pts)
    sxy = sum((s - ms) * (y - my) for s, y in pts)
    slope = sxy / sxx
    intercept = my - slope * ms
    ss_tot = sum((y - my) ** 2 for _, y in pts)
    if ss_tot == 0:
        r2 = Fraction(1)
    else:
        ss_res = sum((y - (intercept + slope * s)) ** 2 for s, y in pts)
        r2 = 1 - ss_res / ss_tot
    return float(slope), float(intercept), float(r2)
