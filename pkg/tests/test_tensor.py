import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from textsteer import tensor as T
from textsteer.optim import AdamW, AdamWState, adamw_step, lr_schedule
from textsteer.tensor import ContractError, ShapeError, Tensor

from gradcheck import numeric_grad, rel_error


def check_unary(op, x, upstream=None, tol=1e-5):
    """Autodiff gradient of sum(upstream * op(x)) vs central differences."""
    x = np.asarray(x, dtype=np.float64)
    u = np.ones_like(op(Tensor(x)).data) if upstream is None else upstream
    t = T.parameter(x)
    T.tsum(T.mul(op(t), Tensor(u))).backward()
    fd = numeric_grad(lambda v: float((op(Tensor(v)).data * u).sum()), x)
    assert rel_error(t.grad, fd) < tol


# -- matmul ----------------------------------------------------------------
def test_matmul_identity():
    m = np.arange(9.0).reshape(3, 3)
    assert np.array_equal((Tensor(np.eye(3)) @ Tensor(m)).data, m)


def test_matmul_hand_case():
    out = T.matmul(Tensor([[1.0, 2.0], [3.0, 4.0]]), Tensor([[0.0], [1.0]]))
    assert np.array_equal(out.data, [[2.0], [4.0]])


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
        T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_matmul_grad_is_ones_times_bT():
    rng = np.random.default_rng(0)
    a, b = T.parameter(rng.normal(size=(3, 4))), Tensor(rng.normal(size=(4, 2)))
    T.tsum(a @ b).backward()
    np.testing.assert_allclose(a.grad, np.ones((3, 2)) @ b.data.T, rtol=1e-12)
    fd = numeric_grad(lambda v: float((v @ b.data).sum()), a.data)
    assert rel_error(a.grad, fd) < 1e-6


@pytest.mark.parametrize("seed", range(20))
def test_batched_matmul_grads(seed):
    rng = np.random.default_rng(seed)
    a0, b0 = rng.normal(size=(2, 3, 4)), rng.normal(size=(4, 5))
    u = rng.normal(size=(2, 3, 5))
    a, b = T.parameter(a0), T.parameter(b0)
    T.tsum(T.mul(a @ b, Tensor(u))).backward()
    assert rel_error(a.grad, numeric_grad(lambda v: float(((v @ b0) * u).sum()), a0)) < 1e-5
    assert rel_error(b.grad, numeric_grad(lambda v: float(((a0 @ v) * u).sum()), b0)) < 1e-5


# -- softmax ---------------------------------------------------------------
def test_softmax_uniform():
    np.testing.assert_array_equal(T.softmax(Tensor(np.zeros(4))).data, [0.25] * 4)


def test_softmax_no_overflow():
    out = T.softmax(Tensor([1000.0, 0.0])).data
    assert np.all(np.isfinite(out))
    np.testing.assert_allclose(out, [1.0, 0.0], atol=1e-300)


@pytest.mark.parametrize("seed", range(20))
def test_softmax_jacobian(seed):
    rng = np.random.default_rng(seed)
    check_unary(lambda t: T.softmax(t), rng.normal(size=5), upstream=rng.normal(size=5))


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-50, 50), min_size=1, max_size=12))
def test_softmax_sums_to_one(xs):
    out = T.softmax(Tensor(np.array(xs))).data
    assert np.all(out >= 0)
    assert abs(out.sum() - 1.0) < 1e-9


# -- tanh gate ------------------------------------------------------------
def test_tanh_gate_zero_alpha_gives_zero():
    x = np.random.default_rng(0).normal(size=(3, 4))
    out = T.tanh_gate(Tensor(x), T.parameter(0.0))
    assert np.array_equal(out.data, np.zeros_like(x))


def test_tanh_gate_grad_at_zero_is_inner_product():
    x = np.random.default_rng(1).normal(size=(3, 4))
    alpha = T.parameter(0.0)
    out = T.tanh_gate(Tensor(x), alpha)
    out.backward(x)  # upstream = x
    assert alpha.grad == pytest.approx(float((x * x).sum()), rel=1e-12)


def test_tanh_gate_saturates_to_identity():
    x = np.random.default_rng(2).normal(size=6)
    np.testing.assert_allclose(T.tanh_gate(Tensor(x), T.parameter(30.0)).data, x, rtol=1e-12)


@pytest.mark.parametrize("seed", range(20))
def test_tanh_gate_fd(seed):
    rng = np.random.default_rng(seed)
    x0, a0, u = rng.normal(size=(2, 3)), rng.normal(), rng.normal(size=(2, 3))
    omega = rng.uniform(0, 1)
    x, a = T.parameter(x0), T.parameter(a0)
    T.tsum(T.mul(T.tanh_gate(x, a, omega), Tensor(u))).backward()
    fa = lambda v: float((math.tanh(omega * float(v)) * x0 * u).sum())
    assert rel_error(a.grad, numeric_grad(fa, np.array(a0))) < 1e-5
    assert rel_error(x.grad, numeric_grad(lambda v: float((math.tanh(omega * a0) * v * u).sum()), x0)) < 1e-5


# -- layernorm / gelu / l2 -------------------------------------------------
def test_l2_normalize_345():
    np.testing.assert_allclose(T.l2_normalize(Tensor([3.0, 4.0])).data, [0.6, 0.8], rtol=1e-15)


def test_l2_normalize_zero_slice_passes_through():
    x = np.array([[0.0, 0.0], [3.0, 4.0]])
    out = T.l2_normalize(Tensor(x), axis=-1).data
    assert np.array_equal(out[0], [0.0, 0.0])


def test_layernorm_constant_vector_gives_bias():
    bias = np.array([0.1, -0.2, 0.3])
    out = T.layernorm(Tensor(np.full(3, 7.0)), Tensor(np.ones(3) * 2), Tensor(bias))
    np.testing.assert_allclose(out.data, bias, atol=1e-12)


def test_layernorm_rejects_nonpositive_eps():
    with pytest.raises(ContractError):
        T.layernorm(Tensor(np.ones(3)), Tensor(np.ones(3)), Tensor(np.zeros(3)), eps=0.0)


def test_layernorm_moments():
    x = np.random.default_rng(3).normal(2.0, 5.0, size=(4, 16))
    out = T.layernorm(Tensor(x), Tensor(np.ones(16)), Tensor(np.zeros(16)), eps=1e-12).data
    np.testing.assert_allclose(out.mean(-1), 0, atol=1e-6)
    np.testing.assert_allclose(out.var(-1), 1, atol=1e-6)


@pytest.mark.parametrize("seed", range(20))
def test_layernorm_fd(seed):
    rng = np.random.default_rng(seed)
    x0, g0, b0 = rng.normal(size=(3, 6)), rng.normal(size=6), rng.normal(size=6)
    u = rng.normal(size=(3, 6))
    x, g, b = T.parameter(x0), T.parameter(g0), T.parameter(b0)
    T.tsum(T.mul(T.layernorm(x, g, b), Tensor(u))).backward()
    f = lambda xv, gv, bv: float((T.layernorm(Tensor(xv), Tensor(gv), Tensor(bv)).data * u).sum())
    assert rel_error(x.grad, numeric_grad(lambda v: f(v, g0, b0), x0)) < 1e-5
    assert rel_error(g.grad, numeric_grad(lambda v: f(x0, v, b0), g0)) < 1e-5
    assert rel_error(b.grad, numeric_grad(lambda v: f(x0, g0, v), b0)) < 1e-5


@pytest.mark.parametrize("seed", range(20))
def test_gelu_fd(seed):
    rng = np.random.default_rng(seed)
    check_unary(T.gelu, rng.normal(0, 2, size=7), rng.normal(size=7))


@pytest.mark.parametrize("seed", range(20))
def test_l2_normalize_fd(seed):
    rng = np.random.default_rng(seed)
    check_unary(lambda t: T.l2_normalize(t, axis=-1), rng.normal(size=(2, 5)), rng.normal(size=(2, 5)))


@pytest.mark.parametrize(
    "name,op,shape",
    [
        ("exp", T.exp, (4,)),
        ("tanh", T.tanh, (4,)),
        ("log", lambda t: T.log(t * t + 1.0), (4,)),
        ("log_softmax", lambda t: T.log_softmax(t), (3, 4)),
        ("square", T.square, (4,)),
        ("mean", lambda t: T.mean(t, axis=0, keepdims=True), (3, 4)),
        ("transpose", lambda t: T.transpose(t, (1, 0)), (3, 4)),
        ("slice", lambda t: t[:, 1:3], (3, 4)),
        ("fancy", lambda t: t[(np.array([0, 2, 0]), np.array([1, 1, 3]))], (3, 4)),
        ("concat", lambda t: T.concat([t, t * 2.0], axis=1), (3, 2)),
        ("div", lambda t: t / (t * t + 2.0), (4,)),
        ("broadcast_add", lambda t: t + Tensor(np.ones((2, 1, 4))), (3, 4)),
    ],
)
@pytest.mark.parametrize("seed", range(20))
def test_primitive_fd(name, op, shape, seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=shape)
    out = op(Tensor(x))
    check_unary(op, x, rng.normal(size=out.shape))


# -- backward contracts -----------------------------------------------------
def test_sum_grad_is_ones():
    x = T.parameter(np.arange(6.0).reshape(2, 3))
    T.tsum(x).backward()
    assert np.array_equal(x.grad, np.ones((2, 3)))


def test_backward_rejects_non_scalar():
    x = T.parameter(np.ones(3))
    with pytest.raises(ContractError):
        (x * 2.0).backward()


def test_frozen_tensor_gets_no_grad():
    w = Tensor(np.ones((3, 3)))  # frozen
    x = T.parameter(np.ones((2, 3)))
    T.tsum(T.matmul(x, w)).backward()
    assert w.grad is None and x.grad is not None


def _mlp(seed):
    rng = np.random.default_rng(seed)
    ps = {
        "w1": rng.normal(size=(4, 5)), "b1": rng.normal(size=5),
        "w2": rng.normal(size=(5, 3)), "b2": rng.normal(size=3),
    }
    x, y = rng.normal(size=(6, 4)), rng.integers(0, 3, 6)

    def loss(p):
        h = T.gelu(T.matmul(Tensor(x), p["w1"]) + p["b1"])
        lp = T.log_softmax(T.matmul(h, p["w2"]) + p["b2"])
        return -T.mean(lp[(np.arange(6), y)])

    return ps, loss


@pytest.mark.parametrize("seed", range(20))
def test_two_layer_mlp_fd(seed):
    ps, loss = _mlp(seed)
    tensors = {k: T.parameter(v) for k, v in ps.items()}
    loss(tensors).backward()
    for k in ps:
        def f(v, k=k):
            q = {j: Tensor(v if j == k else ps[j]) for j in ps}
            return loss(q).item()
        assert rel_error(tensors[k].grad, numeric_grad(f, ps[k])) < 1e-5, k


def test_backward_is_linear_in_upstream():
    rng = np.random.default_rng(4)
    x0 = rng.normal(size=(3, 4))
    g1, g2 = rng.normal(size=(3, 4)), rng.normal(size=(3, 4))

    def grad_for(g):
        x = T.parameter(x0)
        T.softmax(T.gelu(x) * 1.5, axis=-1).backward(g)
        return x.grad

    np.testing.assert_allclose(grad_for(g1 + g2), grad_for(g1) + grad_for(g2), rtol=1e-10, atol=1e-13)


def test_replay_gives_identical_grads():
    ps, loss = _mlp(5)
    tensors = {k: T.parameter(v) for k, v in ps.items()}
    out = loss(tensors)
    out.backward()
    first = {k: t.grad.copy() for k, t in tensors.items()}
    T.zero_grads(tensors.values())
    out.backward()
    for k in first:
        assert np.array_equal(first[k], tensors[k].grad)


def test_tape_is_topological():
    x = T.parameter(np.ones(3))
    y = T.tanh(x) * 2.0
    z = T.tsum(y + x)
    tape = T.build_tape(z)
    pos = {id(n): i for i, n in enumerate(tape)}
    for n in tape:
        for p in n._parents:
            if p.requires_grad:
                assert pos[id(p)] < pos[id(n)]
    assert len(pos) == len(tape)


def test_no_grad_builds_no_graph():
    x = T.parameter(np.ones(3))
    with T.no_grad():
        y = T.tanh(x)
    assert not y.requires_grad


# -- optimizer / schedule --------------------------------------------------
def test_adamw_zero_grad_no_decay_is_noop():
    p = T.parameter(np.array([[1.0, -2.0], [3.0, 0.5]]))
    opt = AdamW([p], weight_decay=0.0)
    opt.zero_grad()
    opt.step(1e-2)
    assert np.array_equal(p.data, [[1.0, -2.0], [3.0, 0.5]])


def test_adamw_first_step_hand_computed():
    # m1 = (1-b1) g, v1 = (1-b2) g^2; bias-corrected ratio = g / (|g| + eps')
    g, lr, eps = -0.37, 0.01, 1e-8
    p = T.parameter(np.array(2.0))
    state = AdamWState(m=[np.zeros(())], v=[np.zeros(())], decay_mask=[False], eps=eps)
    adamw_step([p], [np.array(g)], state, lr)
    mhat = (1 - 0.9) * g / (1 - 0.9)
    vhat = (1 - 0.999) * g * g / (1 - 0.999)
    assert float(p.data) == pytest.approx(2.0 - lr * mhat / (math.sqrt(vhat) + eps), rel=1e-15)
    assert float(p.data) == pytest.approx(2.0 + lr, rel=1e-6)  # ~ -sign(g) * lr
    assert state.step == 1


def test_adamw_decay_only_matrices():
    w, b = T.parameter(np.ones((2, 2))), T.parameter(np.ones(2))
    opt = AdamW([w, b], weight_decay=0.5)
    opt.zero_grad()
    opt.step(0.1)
    np.testing.assert_allclose(w.data, 0.95)
    assert np.array_equal(b.data, np.ones(2))


def test_adamw_shape_mismatch():
    p = T.parameter(np.ones(3))
    state = AdamWState(m=[np.zeros(3)], v=[np.zeros(3)], decay_mask=[False])
    with pytest.raises(ContractError):
        adamw_step([p], [np.ones(4)], state, 0.1)


def test_adamw_deterministic():
    def run():
        p = T.parameter(np.linspace(-1, 1, 5))
        opt = AdamW([p])
        for k in range(5):
            opt.zero_grad()
            T.tsum(T.square(p - 0.3 * k)).backward()
            opt.step(0.05)
        return p.data.tobytes()

    assert run() == run()


def test_schedule_endpoints():
    assert lr_schedule(0, 100, 3e-4, 3e-5, 800) == 0.0
    assert lr_schedule(100, 100, 3e-4, 3e-5, 800) == 3e-4
    assert lr_schedule(800, 100, 3e-4, 3e-5, 800) == 3e-5
    assert lr_schedule(5000, 100, 3e-4, 3e-5, 800) == 3e-5


def test_schedule_cosine_midpoint():
    # cos(pi / 2) = 0, so the midpoint of decay sits halfway between peak and floor
    assert lr_schedule(450, 100, 3e-4, 3e-5, 800) == pytest.approx((3e-4 + 3e-5) / 2, rel=1e-12)


def test_schedule_requires_warmup_before_decay_end():
    with pytest.raises(ContractError):
        lr_schedule(1, 800, 1.0, 0.1, 800)


def test_embedding_grad_scatters():
    table = T.parameter(np.arange(12.0).reshape(4, 3))
    out = T.embedding(table, [1, 1, 3])
    T.tsum(out).backward()
    assert np.array_equal(table.grad[:, 0], [0, 2, 0, 1])
