import numpy as np
import pytest

from textsteer import data as D
from textsteer import tensor as T
from textsteer.conditioning import (
    SteerConfig,
    SteerModel,
    UnknownTokenError,
    Vocabulary,
    adapt,
    count_trainable_params,
    cross_attention,
    encode_batch,
    gate_report,
    init_steer_params,
    init_text_table,
)
from textsteer.objective import batch_loss
from textsteer.tensor import Tensor
from textsteer.vit import ViTConfig, init_vit, vit_forward

from gradcheck import numeric_grad, rel_error

SMALL = ViTConfig(depth=4)


@pytest.fixture(scope="module")
def backbone():
    p = init_vit(SMALL, 7)
    del p["head.w"], p["head.b"]
    p.freeze()
    return p


def _model(backbone, **kw):
    return SteerModel.create(SMALL, backbone, SteerConfig(**kw), seed=3)


def _inputs(n, seed=0):
    rng = np.random.default_rng(seed)
    images = rng.random((n, 64, 64, 3))
    words = [["circle"], ["small", "red", "square"], ["large", "blue", "ring", "top", "left"]]
    return images, [words[i % 3] for i in range(n)]


def test_vocabulary_covers_generator_words():
    v = Vocabulary()
    assert len(v) == 256
    for w in D.SHAPES + D.COLOR_NAMES + D.SIZES + D.ROW_WORDS + D.COL_WORDS:
        assert v.detokenize(v.tokenize([w])) == [w]
    with pytest.raises(UnknownTokenError):
        v.tokenize(["zebra"])


def test_text_table_deterministic_and_frozen():
    a, b = init_text_table(256, 48, 5), init_text_table(256, 48, 5)
    assert np.array_equal(a.data, b.data) and not a.requires_grad
    assert not np.array_equal(a.data, init_text_table(256, 48, 6).data)


def test_encode_batch_pads_and_masks():
    table = init_text_table(16, 4, 0)
    z, mask = encode_batch(table, [[1, 2, 3], [4]])
    assert z.shape == (2, 3, 4)
    assert mask.tolist() == [[True, True, True], [True, False, False]]
    assert np.array_equal(z.data[1, 0], table.data[4])


@pytest.mark.parametrize("projector", ["mlp", "linear"])
def test_adapter_is_scale_invariant(projector):
    vit = ViTConfig()
    p = init_steer_params(vit, SteerConfig(projector=projector), 0)
    z = np.random.default_rng(0).normal(size=(2, 3, 48))
    a = adapt(p, Tensor(z), projector).data
    b = adapt(p, Tensor(z * 7.5), projector).data
    assert a.shape == (2, 3, 64)
    np.testing.assert_allclose(a, b, atol=1e-12)


def test_trainable_parameter_count_closed_form():
    vit = ViTConfig()
    d, dt = vit.d_v, 48
    adapter = dt * 2 * d + 2 * d + 2 * d * d + d
    per_layer = 4 * d * d + 1
    seg = d + 1
    p = init_steer_params(vit, SteerConfig(), 0)
    assert count_trainable_params(p) == adapter + 4 * per_layer + seg == 80133
    assert [k for k in p if k.endswith("alpha")] == [f"ca.{i}.alpha" for i in (0, 2, 4, 6)]


def test_value_and_output_projections_start_small():
    p = init_steer_params(ViTConfig(), SteerConfig(), 0)
    q, v = p["ca.0.q"].data.std(), p["ca.0.v"].data.std()
    assert 0.15 < v / q < 0.35


def test_gates_start_at_zero_and_seg_head_uniform():
    p = init_steer_params(ViTConfig(), SteerConfig(), 0)
    assert all(a == 0.0 and t == 0.0 for _, a, t in gate_report(p))
    assert not p["seg.w"].data.any()


@pytest.mark.parametrize("kw", [{}, {"fusion_mode": "late"}, {"use_tanh_gate": False}, {"use_ffn": True},
                                {"projector": "linear"}, {"hook_position": "post_block"}])
def test_fresh_model_reproduces_backbone_bit_for_bit(backbone, kw):
    model = _model(backbone, **kw)
    images, prompts = _inputs(4)
    tr = model.forward(images, prompts, 1.0)
    base = vit_forward(backbone, SMALL, images)
    for s, b in zip(tr.states, base.states):
        assert np.array_equal(s.data, b.data)
    assert np.array_equal(tr.cls.data, base.cls.data)
    assert np.array_equal(tr.patches.data, base.patches.data)
    assert np.array_equal(tr.last_attention, base.last_attention)


def _perturb_gates(model, value=0.5):
    for k, t in model.params.items():
        if k.endswith("alpha"):
            t.data = np.array(value)


def test_omega_zero_is_identity_for_any_gate(backbone):
    model = _model(backbone)
    _perturb_gates(model)
    images, prompts = _inputs(3)
    tr = model.forward(images, prompts, 0.0)
    base = vit_forward(backbone, SMALL, images)
    assert all(np.array_equal(s.data, b.data) for s, b in zip(tr.states, base.states))
    assert not np.array_equal(model.forward(images, prompts, 1.0).cls.data, base.cls.data)


def test_prompt_changes_features_once_gates_open(backbone):
    model = _model(backbone)
    _perturb_gates(model)
    images, _ = _inputs(1)
    a = model.forward(images, [["circle"]], 1.0).global_feature.data
    b = model.forward(images, [["square"]], 1.0).global_feature.data
    assert not np.allclose(a, b)


def test_late_fusion_uses_no_block_hooks(backbone):
    model = _model(backbone, fusion_mode="late")
    _perturb_gates(model)
    images, prompts = _inputs(2)
    tr = model.forward(images, prompts, 1.0)
    assert tr.block_hook_calls == 0 and tr.ca_calls == 1
    base = vit_forward(backbone, SMALL, images)
    # the backbone blocks run untouched; only the final patch tokens move
    assert all(np.array_equal(s.data, b.data) for s, b in zip(tr.states[:-1], base.states[:-1]))
    assert np.array_equal(tr.last_attention, base.last_attention)
    assert np.array_equal(tr.states[-1].data[:, 0], base.states[-1].data[:, 0])
    assert np.allclose(tr.global_feature.data, tr.patches.data.mean(axis=1))


def test_early_fusion_calls_every_other_block(backbone):
    tr = _model(backbone).forward(*_inputs(1), 1.0)
    assert tr.ca_calls == 2 == tr.block_hook_calls  # depth 4, stride 2


def test_padding_does_not_leak(backbone):
    model = _model(backbone)
    _perturb_gates(model)
    images, _ = _inputs(2)
    alone = model.forward(images[:1], [["circle"]], 1.0).cls.data
    padded = model.forward(images, [["circle"], ["large", "blue", "ring", "top", "left"]], 1.0).cls.data
    np.testing.assert_allclose(padded[0], alone[0], rtol=0, atol=1e-12)


def test_single_prompt_broadcasts(backbone):
    model = _model(backbone)
    _perturb_gates(model)
    images, _ = _inputs(2)
    a = model.forward(images, ["red", "circle"], 1.0).cls.data
    b = model.forward(images, [["red", "circle"]] * 2, 1.0).cls.data
    assert np.array_equal(a, b)


def test_omega_out_of_range(backbone):
    with pytest.raises(ValueError):
        _model(backbone).forward(*_inputs(1), 1.5)


@pytest.mark.parametrize("seed", range(4))
def test_cross_attention_gradients(seed):
    rng = np.random.default_rng(seed)
    d, heads = 8, 2
    p = {f"ca.x.{n}": T.parameter(rng.normal(size=(d, d)) / 3) for n in "qkvo"}
    z0, h0 = rng.normal(size=(2, 5, d)), rng.normal(size=(2, 3, d))
    mask = np.array([[True, True, False], [True, True, True]])
    w = rng.normal(size=(2, 5, d))

    def f(z):
        out, _ = cross_attention(p, "ca.x.", Tensor(z), Tensor(h0), heads, mask)
        return float((out.data * w).sum())

    z = T.parameter(z0)
    out, probs = cross_attention(p, "ca.x.", z, Tensor(h0), heads, mask)
    T.tsum(out * w).backward()
    assert rel_error(z.grad, numeric_grad(f, z0)) < 1e-5
    assert probs[0, :, :, 2].max() == 0.0


@pytest.mark.parametrize("seed", range(3))
def test_end_to_end_gradient_wrt_gates(backbone, seed):
    model = SteerModel.create(SMALL, backbone, SteerConfig(), seed=seed)
    rng = np.random.default_rng(seed)
    model.params["seg.w"].data = rng.normal(size=(64, 1))
    for k in model.params:
        if k.endswith("alpha"):
            model.params[k].data = np.array(rng.normal() * 0.3)
    items = [D.referential_item(rng) for _ in range(2)]
    for t in model.params.values():
        t.grad = None
    batch_loss(model, items, "segment").backward()
    for k in [k for k in model.params if k.endswith("alpha")]:
        t = model.params[k]
        a0 = t.data.copy()

        def f(v):
            t.data = np.array(v)
            with T.no_grad():
                val = batch_loss(model, items, "segment").item()
            t.data = a0
            return val

        fd = numeric_grad(f, a0, h=1e-5)
        assert rel_error(t.grad, fd) < 1e-4, k


def test_single_key_attention_closed_form():
    rng = np.random.default_rng(0)
    d, heads = 8, 2
    p = {f"ca.x.{n}": Tensor(rng.normal(size=(d, d))) for n in "qkvo"}
    z, h = rng.normal(size=(1, 5, d)), rng.normal(size=(1, 1, d))
    out, probs = cross_attention(p, "ca.x.", Tensor(z), Tensor(h), heads)
    assert np.all(probs == 1.0)
    expected = np.broadcast_to(h @ p["ca.x.v"].data @ p["ca.x.o"].data, (1, 5, d))
    np.testing.assert_allclose(out.data, expected, atol=1e-12)


def test_token_permutation_permutes_rows():
    from textsteer.conditioning import encode_text

    table = init_text_table(256, 48, 0)
    a, b = encode_text(table, [5, 9]).data, encode_text(table, [9, 5]).data
    assert np.array_equal(a[::-1], b)


def test_parameter_count_orderings():
    vit = ViTConfig()
    base = count_trainable_params(init_steer_params(vit, SteerConfig(), 0))
    assert count_trainable_params(init_steer_params(vit, SteerConfig(projector="linear"), 0)) < base
    assert count_trainable_params(init_steer_params(vit, SteerConfig(use_ffn=True), 0)) > base
    assert len(gate_report(init_steer_params(vit, SteerConfig(fusion_mode="late"), 0))) == 1


def test_gradients_never_reach_frozen_tensors(backbone):
    model = _model(backbone)
    items = [D.referential_item(np.random.default_rng(0)) for _ in range(2)]
    batch_loss(model, items, "segment").backward()
    assert all(t.grad is None for t in backbone.values())
    assert model.text_table.grad is None
    assert model.params["ca.0.alpha"].grad is not None
    for t in model.params.values():
        t.grad = None
