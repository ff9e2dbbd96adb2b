import numpy as np
import pytest
from scipy.special import erf

from larslab import engine as E
from larslab.adapters import (AdapterSpec, attach, ia3_forward, init_ia3_params, init_lars_params,
                              init_lora_params, lars_forward, lars_pool_fixed, lars_pool_learned,
                              lora_forward)
from larslab.engine import Tensor
from larslab.memory import trainable_parameter_count
from larslab.optim import AdamW
from larslab.transformer import BackboneConfig, ConfigError, build_backbone


def T(a, dtype=np.float64, grad=False):
    return Tensor(np.asarray(a, dtype=dtype), requires_grad=grad)


def lars(in_dim=16, out_dim=16, dtype=np.float64, seed=0, **kw):
    return init_lars_params(in_dim, out_dim, AdapterSpec(kind="lars", **kw),
                            np.random.default_rng(seed), dtype)


# ---------------------------------------------------------------- pooling

def test_fixed_pool_example(tape):
    out = lars_pool_fixed(T([[[1, 2], [3, 4]]]))
    np.testing.assert_array_equal(out.data, [[5, 7]])


def test_fixed_pool_single_token_and_zeros(tape, rng):
    x = rng.standard_normal((3, 1, 5))
    np.testing.assert_array_equal(lars_pool_fixed(T(x)).data, 2 * x[:, 0])
    assert not lars_pool_fixed(T(np.zeros((2, 4, 3)))).data.any()


def test_fixed_pool_saves_nothing(tape, rng):
    lars_pool_fixed(T(rng.standard_normal((2, 9, 4)), grad=True))
    assert tape.ledger_snapshot().total == 0


def test_pool_rejects_empty_sequence(tape):
    with pytest.raises(ValueError):
        lars_pool_fixed(T(np.zeros((1, 0, 2))))
    with pytest.raises(ValueError):
        lars_pool_learned(T(np.zeros((1, 0, 2))), T(np.zeros(2)))


def test_learned_pool_uniform_and_single(tape, rng):
    x = rng.standard_normal((2, 6, 3))
    np.testing.assert_allclose(lars_pool_learned(T(x), T(np.zeros(3))).data, x.mean(axis=1),
                               rtol=1e-12)
    x1 = rng.standard_normal((2, 1, 3))
    np.testing.assert_allclose(lars_pool_learned(T(x1), T(rng.standard_normal(3))).data, x1[:, 0],
                               rtol=1e-12)


def test_learned_pool_peaked(tape):
    out = lars_pool_learned(T([[[1, 0], [0, 1]]]), T([10, 0])).data
    a = np.exp(10) / (np.exp(10) + 1)  # two-way softmax by hand
    np.testing.assert_allclose(out, [[a, 1 - a]], atol=1e-12)
    np.testing.assert_allclose(out, [[1, 0]], atol=1e-4)


def test_learned_pool_saves_weights_only(tape, rng):
    X = T(rng.standard_normal((2, 7, 4)).astype(np.float32), np.float32, grad=True)
    w = Tensor.parameter(np.zeros(4, np.float32))
    E.matmul(X, Tensor.parameter(np.zeros((4, 4), np.float32), trainable=False))  # base saves X
    with E.scope("adapter:lars"):
        lars_pool_learned(X, w)
    assert tape.ledger_snapshot().bytes_for("adapter:lars") == 2 * 7 * 4


# ---------------------------------------------------------------- LARS

def test_lars_identity_at_init(tape, rng):
    p = lars()
    base = T(rng.standard_normal((2, 5, 16)))
    out = lars_forward(T(rng.standard_normal((2, 5, 16))), p, base)
    assert out.data.tobytes() == base.data.tobytes()


def test_lars_runs_in_its_scope(tape, rng):
    p = lars(dtype=np.float32)
    X = T(rng.standard_normal((2, 5, 16)), np.float32, grad=True)
    lars_forward(X, p, T(np.zeros((2, 5, 16)), np.float32))
    assert {n.scope for n in tape.nodes} == {"adapter:lars"}


@pytest.mark.parametrize("pooling", ["fixed", "learned"])
def test_lars_bytes_independent_of_S_when_fixed(pooling, rng):
    def measure(S):
        p = lars(dtype=np.float32, R=4, pooling=pooling)
        X = T(rng.standard_normal((2, S, 16)), np.float32, grad=True)
        with E.Tape() as tape:
            E.matmul(X, Tensor.parameter(np.zeros((16, 16), np.float32), trainable=False))
            lars_forward(X, p, T(np.zeros((2, S, 16)), np.float32))
        return tape.ledger_snapshot().bytes_for("adapter:lars")
    if pooling == "fixed":
        assert measure(64) == measure(512)
    else:
        assert measure(512) - measure(64) == 2 * (512 - 64) * 4


def test_zero_temperatures_halve_h(tape, rng):
    p = lars(R=4, tau_init=(0.0, 0.0), nonlinearity=False)
    p.B_pool.data[...] = rng.standard_normal(p.B_pool.shape)
    x = rng.standard_normal((2, 3, 16))
    out = lars_forward(T(x), p, T(np.zeros((2, 3, 16)))).data
    h = (x.mean(axis=1) + x[:, -1]) @ p.A_pool.data
    np.testing.assert_allclose(out, np.repeat(((0.5 * h) @ p.B_pool.data)[:, None], 3, axis=1),
                               rtol=1e-12)


def _numpy_lars(x, p, gelu_position):
    """Straight-line reference of the adapter update, written independently."""
    def gelu(v):
        return 0.5 * v * (1 + erf(v / np.sqrt(2)))
    xp = x.mean(axis=1) + x[:, -1]
    h = xp @ p.A_pool.data
    ln = (h - h.mean(-1, keepdims=True)) / np.sqrt(h.var(-1, keepdims=True) + 1e-5)
    z = p.tau1.data * (xp @ p.W_x.data) + p.tau2.data * (ln @ p.W_h.data)
    g = 1 / (1 + np.exp(-z))
    hp = (g @ p.M_mix.data) * h
    if gelu_position == "before_proj":
        upd = gelu(hp) @ p.B_pool.data
    else:
        upd = gelu(hp @ p.B_pool.data)
    return p.alpha.data * upd


@pytest.mark.parametrize("gelu_position", ["before_proj", "after_proj"])
def test_lars_matches_reference(tape, rng, gelu_position):
    p = lars(R=4, gelu_position=gelu_position)
    for t in p.tensors().values():
        t.data[...] = rng.standard_normal(t.shape) * 0.5
    x = rng.standard_normal((3, 6, 16))
    out = lars_forward(T(x), p, T(np.zeros((3, 6, 16)))).data
    ref = _numpy_lars(x, p, gelu_position)
    np.testing.assert_allclose(out, np.repeat(ref[:, None], 6, axis=1), rtol=1e-10, atol=1e-12)


def test_identity_mixing_equals_no_mixing(tape, rng):
    mixed, plain = lars(R=4, seed=5), lars(R=4, seed=5, mixing=False)
    assert plain.M_mix is None
    for name, t in plain.tensors().items():
        t.data[...] = rng.standard_normal(t.shape)
        mixed.tensors()[name].data[...] = t.data
    x = T(rng.standard_normal((2, 4, 16)))
    base = T(np.zeros((2, 4, 16)))
    a = lars_forward(x, mixed, base).data
    b = lars_forward(x, plain, base).data
    assert a.tobytes() == b.tobytes()


def test_rank_must_be_below_width():
    with pytest.raises(ConfigError):
        lars(in_dim=8, out_dim=8, R=8)
    with pytest.raises(ConfigError):
        AdapterSpec(R=0)


def test_every_lars_parameter_gets_gradient_after_one_step():
    rng = np.random.default_rng(0)
    p = lars(R=4, pooling="learned")
    X = T(rng.standard_normal((2, 6, 16)))
    proj = T(rng.standard_normal((2, 6, 16)))
    params = list(p.tensors().values())
    opt = AdamW(params, lr=1e-2)

    def grads():
        with E.Tape() as tape:
            out = lars_forward(X, p, T(np.zeros((2, 6, 16))))
            g = E.backward(E.sum_over_axis(E.mul(out, proj)), tape)
        return {n: g.get(t.id, np.zeros_like(t.data)) for n, t in p.tensors().items()}

    g0 = grads()
    assert np.any(g0["B_pool"]) and not np.any(g0["A_pool"])  # only B_pool sees signal at init
    opt.step([g0[n] for n in p.tensors()])
    g1 = grads()
    assert set(g1) == {"A_pool", "W_x", "W_h", "tau1", "tau2", "M_mix", "B_pool", "alpha", "w_pool"}
    for name, g in g1.items():
        assert np.any(g != 0), name


# ---------------------------------------------------------------- LoRA

def test_lora_identity_at_init(tape, rng):
    p = init_lora_params(16, 16, AdapterSpec(kind="lora", R=4), rng, np.float64)
    base = T(rng.standard_normal((2, 3, 16)))
    assert lora_forward(T(rng.standard_normal((2, 3, 16))), p, base).data.tobytes() == base.data.tobytes()
    assert p.scale == 8 / 4


def test_lora_bytes_scale_with_S(rng):
    def measure(S):
        p = init_lora_params(16, 16, AdapterSpec(kind="lora", R=4), rng, np.float32)
        X = T(rng.standard_normal((2, S, 16)), np.float32, grad=True)
        with E.Tape() as tape:
            base = E.matmul(X, Tensor.parameter(np.zeros((16, 16), np.float32), trainable=False))
            lora_forward(X, p, base)
        return tape.ledger_snapshot().bytes_for("adapter:lora")
    assert measure(512) / measure(64) == 8.0
    assert measure(64) == 2 * 64 * 4 * 4


def test_lora_gradient_paths(tape, rng):
    p = init_lora_params(8, 8, AdapterSpec(kind="lora", R=2), rng, np.float64)
    X = T(rng.standard_normal((2, 3, 8)))
    zero = T(np.zeros((2, 3, 8)))
    proj = T(rng.standard_normal((2, 3, 8)))

    def grads():
        with E.Tape() as t:
            g = E.backward(E.sum_over_axis(E.mul(lora_forward(X, p, zero), proj)), t)
        return g.get(p.A.id), g.get(p.B.id)

    p.A.data[...] = 0
    gA, gB = grads()
    assert not gA.any() and not gB.any()
    p.A.data[...] = rng.standard_normal(p.A.shape)  # path through A opened
    gA, gB = grads()
    assert not gA.any() and gB.any()
    p.B.data[...] -= 0.1 * gB
    gA, _ = grads()
    assert gA.any()


# ---------------------------------------------------------------- IA3

def test_ia3_ones_and_zeros(tape, rng):
    p = init_ia3_params(5, np.float64)
    base = T(rng.standard_normal((2, 3, 5)))
    assert ia3_forward(base, p).data.tobytes() == base.data.tobytes()
    p.l.data[...] = 0
    assert not ia3_forward(base, p).data.any()


def test_ia3_gradient(rng):
    p = init_ia3_params(5, np.float64)
    p.l.data[...] = rng.standard_normal(5)
    base = T(rng.standard_normal((2, 3, 5)))
    up = T(rng.standard_normal((2, 3, 5)))

    def loss():
        return E.sum_over_axis(E.mul(ia3_forward(base, p), up))

    with E.Tape() as t:
        g = E.backward(loss(), t)[p.l.id]
    np.testing.assert_allclose(g, (base.data * up.data).sum(axis=(0, 1)), rtol=1e-12)
    assert E.finite_diff_gradcheck(loss, p.l, 1e-5) < 1e-6


# ---------------------------------------------------------------- attach

@pytest.mark.parametrize("spec", [
    AdapterSpec(kind="lars"), AdapterSpec(kind="lars", pooling="learned"),
    AdapterSpec(kind="lora"), AdapterSpec(kind="ia3"),
    AdapterSpec(kind="lars", targets=("attn_q", "mlp_up"), R=4),
])
def test_trainable_count_matches_memory_model(spec):
    cfg = BackboneConfig()
    aset = attach(build_backbone(cfg), spec)
    assert aset.trainable_count() == trainable_parameter_count(cfg, spec)
    assert len(aset) == cfg.L * len(spec.targets)


def test_default_targets_per_kind():
    assert AdapterSpec(kind="lars").targets == ("attn_o", "mlp_down")
    assert AdapterSpec(kind="lora").targets == ("attn_o", "mlp_down")
    assert AdapterSpec(kind="ia3").targets == ("attn_v", "mlp_down")
    with pytest.raises(ConfigError):
        AdapterSpec(targets=("ffn",))
