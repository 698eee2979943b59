import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from calico.errors import ConfigurationError, DimensionError, GradCheckError, NonFiniteError
from calico.numerics import (
    AttentionParams,
    ParameterSet,
    Tensor,
    cross_attention,
    grad_check,
    layer_norm,
    load_checkpoint,
    save_checkpoint,
    softmax,
)
from calico.numerics import tensor as T
from calico.numerics.checkpoint import decode_checkpoint, encode_checkpoint
from calico.numerics.layers import causal_mask


def triple_loop(a, b):
    n, k = a.shape
    _, m = b.shape
    out = np.zeros((n, m))
    for i in range(n):
        for j in range(m):
            s = 0.0
            for t in range(k):
                s += a[i, t] * b[t, j]
            out[i, j] = s
    return out


def attention_oracle(q_in, kv_in, p, heads):
    """Hand-rolled multi-head attention written without the tape."""
    wq, bq = p.q.weight.data, p.q.bias.data
    wk, bk = p.k.weight.data, p.k.bias.data
    wv, bv = p.v.weight.data, p.v.bias.data
    wo, bo = p.out.weight.data, p.out.bias.data
    Q, K, V = q_in @ wq + bq, kv_in @ wk + bk, kv_in @ wv + bv
    dh = Q.shape[1] // heads
    outs = []
    for h in range(heads):
        sl = slice(h * dh, (h + 1) * dh)
        s = Q[:, sl] @ K[:, sl].T / np.sqrt(dh)
        w = np.exp(s - s.max(axis=1, keepdims=True))
        w /= w.sum(axis=1, keepdims=True)
        outs.append(w @ V[:, sl])
    return np.concatenate(outs, axis=1) @ wo + bo


# -- matmul -------------------------------------------------------------------

def test_matmul_identity():
    m = np.random.default_rng(0).normal(size=(3, 3))
    assert np.array_equal((Tensor(np.eye(3)) @ Tensor(m)).data, m)


def test_matmul_matches_triple_loop():
    rng = np.random.default_rng(1)
    a, b = rng.normal(size=(4, 5)), rng.normal(size=(5, 6))
    np.testing.assert_allclose((Tensor(a) @ Tensor(b)).data, triple_loop(a, b), rtol=0, atol=1e-12)


def test_linear_matches_matmul_plus_bias():
    r = np.random.default_rng(3)
    x, w, b = r.normal(size=(2, 3, 4)), r.normal(size=(4, 5)), r.normal(size=5)
    assert np.array_equal(T.linear(Tensor(x), Tensor(w), Tensor(b)).data, (Tensor(x) @ Tensor(w) + Tensor(b)).data)
    with pytest.raises(DimensionError):
        T.linear(Tensor(x), Tensor(w), Tensor(np.zeros(4)))


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
        Tensor(np.ones((2, 3))) @ Tensor(np.ones((2, 3)))


def test_batched_matmul_broadcasts():
    rng = np.random.default_rng(2)
    a, b = rng.normal(size=(4, 3)), rng.normal(size=(2, 3, 5))
    out = (Tensor(a) @ Tensor(b)).data
    for i in range(2):
        np.testing.assert_allclose(out[i], triple_loop(a, b[i]), atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_matmul_associativity(seed):
    rng = np.random.default_rng(seed)
    a, b, c = (Tensor(rng.normal(size=s)) for s in [(3, 4), (4, 5), (5, 2)])
    left, right = ((a @ b) @ c).data, (a @ (b @ c)).data
    np.testing.assert_allclose(left, right, rtol=1e-9, atol=1e-12)


# -- softmax --------------------------------------------------------------------

def test_softmax_uniform():
    np.testing.assert_allclose(softmax(Tensor([0.0, 0.0, 0.0])).data, [1 / 3] * 3, atol=1e-15)


def test_softmax_stabilised():
    out = softmax(Tensor([1000.0, 0.0])).data
    assert out[0] == 1.0 and 0.0 <= out[1] < 1e-300


def test_softmax_matches_direct_formula():
    x = np.random.default_rng(3).normal(size=8)
    ref = np.exp(x) / np.exp(x).sum()
    np.testing.assert_allclose(softmax(Tensor(x)).data, ref, rtol=0, atol=1e-12)


def test_softmax_empty_axis():
    with pytest.raises(DimensionError):
        softmax(Tensor(np.zeros((2, 0))), axis=1)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.floats(-50, 50))
def test_softmax_shift_invariance(seed, c):
    x = np.random.default_rng(seed).normal(size=(3, 6))
    a, b = softmax(Tensor(x), axis=1).data, softmax(Tensor(x + c), axis=1).data
    np.testing.assert_allclose(a, b, rtol=0, atol=1e-12)
    np.testing.assert_allclose(a.sum(axis=1), 1.0, atol=1e-9)
    assert (a >= 0).all()


# -- attention --------------------------------------------------------------------

def make_attn(d_q, d_kv, d_attn, heads, seed=0, zero_out=False):
    store = ParameterSet()
    rng = np.random.default_rng(seed)
    p = AttentionParams.create(store, "a", d_q, d_kv, d_attn, heads, rng, zero_out=zero_out)
    for prm in store.values():
        if prm.name.endswith("bias") and not zero_out:
            prm.tensor.data = rng.normal(size=prm.shape)
    return store, p


def test_cross_attention_single_key_returns_projected_value():
    _, p = make_attn(4, 4, 4, 1)
    rng = np.random.default_rng(4)
    q, kv = rng.normal(size=(3, 4)), rng.normal(size=(1, 4))
    out = cross_attention(Tensor(q), Tensor(kv), p).data
    value_row = (kv @ p.v.weight.data + p.v.bias.data) @ p.out.weight.data + p.out.bias.data
    for row in out:
        np.testing.assert_allclose(row, value_row[0], atol=1e-12)


def test_cross_attention_zero_output_projection():
    _, p = make_attn(4, 6, 8, 2, zero_out=True)
    out = cross_attention(Tensor(np.ones((2, 4))), Tensor(np.ones((3, 6))), p)
    assert np.array_equal(out.data, np.zeros((2, 4)))


@pytest.mark.parametrize("heads", [1, 2, 4])
def test_cross_attention_matches_oracle(heads):
    _, p = make_attn(4, 4, 8, heads, seed=heads)
    rng = np.random.default_rng(5)
    q, kv = rng.normal(size=(2, 4)), rng.normal(size=(3, 4))
    np.testing.assert_allclose(cross_attention(Tensor(q), Tensor(kv), p).data,
                               attention_oracle(q, kv, p, heads), rtol=0, atol=1e-10)


def test_cross_attention_config_error():
    _, p = make_attn(4, 4, 8, 2)
    with pytest.raises(ConfigurationError):
        cross_attention(Tensor(np.ones((2, 5))), Tensor(np.ones((3, 4))), p)
    with pytest.raises(ConfigurationError):
        AttentionParams.create(ParameterSet(), "b", 4, 4, 6, 4, np.random.default_rng(0))


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000))
def test_cross_attention_permutation_properties(seed):
    _, p = make_attn(4, 6, 8, 2, seed=seed % 7)
    rng = np.random.default_rng(seed)
    q, kv = rng.normal(size=(5, 4)), rng.normal(size=(7, 6))
    base = cross_attention(Tensor(q), Tensor(kv), p).data
    pq, pkv = rng.permutation(5), rng.permutation(7)
    np.testing.assert_allclose(cross_attention(Tensor(q[pq]), Tensor(kv), p).data, base[pq], atol=1e-10)
    np.testing.assert_allclose(cross_attention(Tensor(q), Tensor(kv[pkv]), p).data, base, atol=1e-10)


def test_causal_mask_blocks_future():
    m = causal_mask(3)
    assert m[0, 1] < -1e8 and m[1, 0] == 0 and m[2, 2] == 0


# -- layer norm --------------------------------------------------------------------

def test_layer_norm_constant_row_is_zero():
    out = layer_norm(Tensor(np.full((1, 5), 3.0)), np.ones(5), np.zeros(5)).data
    assert np.array_equal(out, np.zeros((1, 5)))


def test_layer_norm_hand_value():
    eps = 1e-5
    out = layer_norm(Tensor([[1.0, 3.0]]), np.ones(2), np.zeros(2), eps=eps).data
    # mean 2, var 1 -> (x - 2) / sqrt(1 + eps)
    np.testing.assert_allclose(out, [[-1 / np.sqrt(1 + eps), 1 / np.sqrt(1 + eps)]], atol=1e-15)
    np.testing.assert_allclose(out, [[-1, 1]], atol=1e-5)


def test_layer_norm_random_rows_zero_mean():
    x = np.random.default_rng(6).normal(size=(4, 8))
    out = layer_norm(Tensor(x), np.ones(8), np.zeros(8)).data
    assert np.abs(out.mean(axis=1)).max() < 1e-9


def test_layer_norm_extent_mismatch():
    with pytest.raises(DimensionError):
        layer_norm(Tensor(np.ones((2, 3))), np.ones(4), np.zeros(4))


# -- non-finite values -------------------------------------------------------------

def test_non_finite_is_an_error():
    with pytest.raises(NonFiniteError) as info:
        T.log(Tensor([0.0, 1.0]))
    assert info.value.op == "log"
    with pytest.raises(NonFiniteError):
        Tensor([np.nan])


# -- gradient checks ----------------------------------------------------------------

def test_grad_check_linear_is_exact():
    store = ParameterSet()
    w = store.add("w", np.random.default_rng(7).normal(size=(3, 4)))
    x = Tensor(np.random.default_rng(8).normal(size=(4, 2)))
    report = grad_check(lambda: (w.tensor @ x).sum(), store.values(), step=1e-5, rel_tol=1e-4)
    assert report.passed and report.max_rel_error < 1e-8


def test_grad_check_skips_frozen():
    store = ParameterSet()
    w = store.add("w", np.ones((2, 2)))
    f = store.add("frozen", np.ones((2, 2)), trainable=False)
    report = grad_check(lambda: (w.tensor @ f.tensor).sum(), store.values())
    assert [p.name for p in report.params] == ["w"]
    assert f.grad is None


def test_grad_check_rejects_bad_step_and_nan():
    store = ParameterSet()
    w = store.add("w", np.ones(2))
    with pytest.raises(GradCheckError):
        grad_check(lambda: w.tensor.sum(), store.values(), step=0.5)
    with pytest.raises(GradCheckError):
        grad_check(lambda: T.log(w.tensor - 1.0).sum(), store.values())


def test_grad_check_detects_corrupted_backward():
    store = ParameterSet()
    w = store.add("w", np.random.default_rng(9).normal(size=(3,)))
    with T.corrupt_backward("softmax"):
        report = grad_check(lambda: (softmax(w.tensor) * Tensor([1.0, 2.0, 3.0])).sum(), store.values())
    assert not report.passed and report.failing == ["w"]


def _op_cases():
    """(name, builder) pairs; builder(rng) -> (store, objective)."""

    def unary(op, shape=(3, 4), shift=0.0):
        def build(rng):
            store = ParameterSet()
            x = store.add("x", rng.normal(size=shape) + shift)
            c = Tensor(rng.normal(size=shape))
            return store, lambda: (op(x.tensor) * c).sum()
        return build

    def binary(op, sa=(3, 4), sb=(3, 4), positive_b=False):
        def build(rng):
            store = ParameterSet()
            a = store.add("a", rng.normal(size=sa))
            b_data = rng.normal(size=sb)
            b = store.add("b", np.abs(b_data) + 0.5 if positive_b else b_data)
            c = Tensor(rng.normal(size=op(Tensor(a.data), Tensor(b.data)).shape))
            return store, lambda: (op(a.tensor, b.tensor) * c).sum()
        return build

    def ln(rng):
        store = ParameterSet()
        x = store.add("x", rng.normal(size=(3, 5)))
        g = store.add("g", rng.normal(size=5))
        b = store.add("b", rng.normal(size=5))
        c = Tensor(rng.normal(size=(3, 5)))
        return store, lambda: (layer_norm(x.tensor, g.tensor, b.tensor) * c).sum()

    def attn(rng):
        store, p = make_attn(4, 6, 8, 2, seed=int(rng.integers(1000)))
        q = store.add("q", rng.normal(size=(3, 4)))
        kv = store.add("kv", rng.normal(size=(2, 5, 6)))
        c = Tensor(rng.normal(size=(2, 3, 4)))
        return store, lambda: (cross_attention(q.tensor, kv.tensor, p) * c).sum()

    def scatter(rng):
        store = ParameterSet()
        x = store.add("x", rng.normal(size=(5, 3)))
        v = store.add("v", rng.normal(size=(2, 3)))
        c = Tensor(rng.normal(size=(5, 3)))
        return store, lambda: (T.index_add(x.tensor, [1, 3], v.tensor) * c).sum()

    def gather(rng):
        store = ParameterSet()
        x = store.add("x", rng.normal(size=(5, 3)))
        c = Tensor(rng.normal(size=(4, 3)))
        return store, lambda: (x.tensor[np.array([0, 2, 2, 4])] * c).sum()

    def fused_linear(rng):
        store = ParameterSet()
        x = store.add("x", rng.normal(size=(2, 3, 4)))
        v = store.add("v", rng.normal(size=4))
        w = store.add("w", rng.normal(size=(4, 5)))
        b = store.add("b", rng.normal(size=5))
        c = Tensor(rng.normal(size=(2, 3, 5)))
        return store, lambda: (T.linear(x.tensor, w.tensor, b.tensor) * c).sum() + T.linear(v.tensor, w.tensor,
                                                                                              b.tensor).sum()

    def shape_ops(rng):
        store = ParameterSet()
        x = store.add("x", rng.normal(size=(2, 3, 4)))
        y = store.add("y", rng.normal(size=(2, 3, 4)))
        c = Tensor(rng.normal(size=(4, 3, 4)))
        return store, lambda: (T.concat([x.tensor.transpose(0, 1, 2), y.tensor.reshape(2, 3, 4)], axis=0) * c).sum()

    return [
        ("add", binary(lambda a, b: a + b, (3, 4), (4,))),
        ("sub", binary(lambda a, b: a - b)),
        ("mul", binary(lambda a, b: a * b, (3, 4), (3, 1))),
        ("div", binary(lambda a, b: a / b, positive_b=True)),
        ("matmul", binary(lambda a, b: a @ b, (2, 3, 4), (4, 5))),
        ("linear", fused_linear),
        ("exp", unary(T.exp)),
        ("log", unary(lambda x: T.log(x * x + 1.0))),
        ("tanh", unary(T.tanh)),
        ("sigmoid", unary(T.sigmoid)),
        ("softplus", unary(T.softplus)),
        ("gelu", unary(T.gelu)),
        ("pow", unary(lambda x: (x * x + 1.0) ** 1.5)),
        ("softmax", unary(lambda x: T.softmax(x, axis=1))),
        ("log_softmax", unary(lambda x: T.log_softmax(x, axis=0))),
        ("mean", unary(lambda x: x.mean(axis=1, keepdims=True) * x)),
        ("layer_norm", ln),
        ("cross_attention", attn),
        ("index_add", scatter),
        ("getitem", gather),
        ("shape_ops", shape_ops),
    ]


@pytest.mark.parametrize("name,build", _op_cases(), ids=[n for n, _ in _op_cases()])
def test_every_op_passes_grad_check_on_ten_seeds(name, build):
    for seed in range(10):
        store, f = build(np.random.default_rng(seed))
        report = grad_check(f, store.values(), step=1e-5, rel_tol=1e-4)
        assert report.passed, f"{name} seed {seed}: {report.summary()}"


# -- checkpoints ----------------------------------------------------------------------

def test_checkpoint_round_trip(tmp_path):
    rng = np.random.default_rng(10)
    state = {"enc.w": rng.normal(size=(2, 3)), "b": rng.normal(size=(4,)), "scalar": np.array(1.5),
             "ünï": rng.normal(size=(1, 2, 2))}
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, state)
    blob = path.read_bytes()
    assert blob[:4] == b"CALI" and int.from_bytes(blob[4:8], "little") == 1
    back = load_checkpoint(path)
    assert list(back) == list(state)
    for k in state:
        assert np.array_equal(back[k], state[k])


def test_checkpoint_layout_is_exact():
    blob = encode_checkpoint({"w": np.array([[1.0, 2.0]])})
    expected = (b"CALI" + (1).to_bytes(4, "little") + (1).to_bytes(4, "little") + b"w"
                + (2).to_bytes(4, "little") + (1).to_bytes(4, "little") + (2).to_bytes(4, "little")
                + np.array([1.0, 2.0], dtype="<f8").tobytes())
    assert blob == expected
    assert decode_checkpoint(blob)["w"].shape == (1, 2)
