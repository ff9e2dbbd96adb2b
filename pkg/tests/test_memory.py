import numpy as np
import pytest

from larslab.adapters import AdapterSpec, attach
from larslab.harness import measure_step
from larslab.memory import MemoryEstimate, estimate_peak, fit_growth_rate
from larslab.tasks import make_seqclass
from larslab.transformer import BackboneConfig, build_backbone


def ledger_for(cfg, spec, B, S):
    model = build_backbone(cfg)
    task = make_seqclass(S=S, num_examples=B, vocab=cfg.vocab)
    ledger, *_ = measure_step(model, attach(model, spec), task, B)
    return ledger


def test_adamw_state_rule():
    cfg = BackboneConfig(H=500, heads=2)
    spec = AdapterSpec(kind="ia3", targets=("attn_v",))
    est = estimate_peak(cfg, spec, 1, 1)
    assert est.grads_bytes == 4000 and est.optimizer_bytes == 8000


def test_total_is_sum_of_parts():
    est = MemoryEstimate(1, 2, 3, 4, 5, 6)
    assert est.total_bytes == 21
    with pytest.raises(ValueError):
        MemoryEstimate(-1, 0, 0, 0, 0)


def test_lars_fixed_estimate_is_S_free():
    cfg, spec = BackboneConfig(), AdapterSpec(kind="lars")
    assert (estimate_peak(cfg, spec, 2, 64).adapter_act_bytes
            == estimate_peak(cfg, spec, 2, 1024).adapter_act_bytes)


def test_toy_lora_estimate_matches_ledger():
    cfg, spec = BackboneConfig(L=2, H=16, heads=2), AdapterSpec(kind="lora", R=4)
    est = estimate_peak(cfg, spec, 2, 64)
    ledger = ledger_for(cfg, spec, 2, 64)
    assert est.adapter_act_bytes == ledger.adapter_bytes()
    assert est.base_act_bytes == ledger.bytes_for("base")


SPECS = [
    AdapterSpec(kind="lars"),
    AdapterSpec(kind="lars", pooling="learned"),
    AdapterSpec(kind="lars", gelu_position="after_proj", R=2),
    AdapterSpec(kind="lars", gating=False),
    AdapterSpec(kind="lars", mixing=False),
    AdapterSpec(kind="lars", nonlinearity=False),
    AdapterSpec(kind="lars", targets=("attn_q", "attn_k", "mlp_up")),
    AdapterSpec(kind="lora", R=2),
    AdapterSpec(kind="lora", targets=("attn_v", "mlp_up")),
    AdapterSpec(kind="ia3"),
    AdapterSpec(kind="ia3", targets=("attn_o", "mlp_up")),
]


@pytest.mark.parametrize("spec", SPECS, ids=lambda s: f"{s.label}-{'+'.join(s.targets)}")
@pytest.mark.parametrize("B,S", [(1, 5), (2, 16), (3, 33)])
def test_estimate_equals_ledger(spec, B, S):
    cfg = BackboneConfig(L=2, H=16, heads=4, vocab=32)
    est = estimate_peak(cfg, spec, B, S, num_classes=4)
    ledger = ledger_for(cfg, spec, B, S)
    assert est.adapter_act_bytes == ledger.adapter_bytes()
    assert est.base_act_bytes == ledger.bytes_for("base")
    assert est.loss_act_bytes == ledger.bytes_for("loss")


def test_monotone_in_every_size():
    base = dict(L=2, H=32, B=2, S=64, R=4)
    steps = dict(L=3, H=64, B=3, S=96, R=8)

    def total(L, H, B, S, R):
        return estimate_peak(BackboneConfig(L=L, H=H), AdapterSpec(kind="lars", R=R), B, S).total_bytes

    for key, bigger in steps.items():
        assert total(**(base | {key: bigger})) >= total(**base), key
    for kind in ("lora", "ia3"):
        spec = AdapterSpec(kind=kind, R=4)
        a = estimate_peak(BackboneConfig(), spec, 2, 64).total_bytes
        assert estimate_peak(BackboneConfig(), spec, 2, 65).total_bytes >= a


def test_flash_and_checkpoint_toggles():
    cfg, spec = BackboneConfig(), AdapterSpec()
    plain = estimate_peak(cfg, spec, 2, 64)
    flash = estimate_peak(cfg, spec, 2, 64, flash=True)
    assert flash.base_act_bytes < plain.base_act_bytes
    assert flash.adapter_act_bytes == plain.adapter_act_bytes
    half = estimate_peak(cfg, spec, 2, 64, gc_factor=0.5)
    assert half.base_act_bytes * 2 == plain.base_act_bytes


def test_estimate_errors():
    with pytest.raises(ValueError):
        estimate_peak(BackboneConfig(), AdapterSpec(), 1, 1, optimizer="sgd")
    with pytest.raises(ValueError):
        estimate_peak(BackboneConfig(), AdapterSpec(), 1, 1, gc_factor=0)


def test_fit_exact_line():
    slope, intercept, r2 = fit_growth_rate([(s, 3 * s + 7) for s in (1, 4, 9, 10)])
    assert (slope, intercept, r2) == (3.0, 7.0, 1.0)


def test_fit_constant_points():
    assert fit_growth_rate([(64, 5), (128, 5), (256, 5)]) == (0.0, 5.0, 1.0)


def test_fit_rejects_degenerate_input():
    with pytest.raises(ValueError):
        fit_growth_rate([(1, 1), (2, 2)])
    with pytest.raises(ValueError):
        fit_growth_rate([(1, 1), (1, 2), (3, 3)])


def test_fit_against_numpy():
    rng = np.random.default_rng(0)
    xs = np.array([64, 128, 256, 512])
    ys = rng.integers(0, 10 ** 6, 4)
    slope, intercept, r2 = fit_growth_rate(zip(xs.tolist(), ys.tolist()))
    ref_slope, ref_int = np.polyfit(xs, ys, 1)
    resid = ys - (ref_slope * xs + ref_int)
    assert slope == pytest.approx(ref_slope, rel=1e-9)
    assert intercept == pytest.approx(ref_int, rel=1e-9)
    assert r2 == pytest.approx(1 - resid @ resid / np.sum((ys - ys.mean()) ** 2), rel=1e-9)


def test_ledger_sweep_slopes():
    cfg = BackboneConfig()
    grid = (64, 128, 256)
    lars = [(S, ledger_for(cfg, AdapterSpec(kind="lars"), 2, S)) for S in grid]
    lora = [(S, ledger_for(cfg, AdapterSpec(kind="lora"), 2, S)) for S in grid]
    assert fit_growth_rate([(S, l.adapter_bytes()) for S, l in lars])[0] == 0.0
    lars_tot = fit_growth_rate([(S, l.adapter_bytes() + l.bytes_for("base")) for S, l in lars])[0]
    lora_tot = fit_growth_rate([(S, l.adapter_bytes() + l.bytes_for("base")) for S, l in lora])[0]
    assert (lora_tot - lars_tot) / lora_tot > 0
