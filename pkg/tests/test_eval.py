import json
import os

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from textsteer import data as D
from textsteer.conditioning import SteerConfig, SteerModel
from textsteer.evaluation import (
    core_acc1_from_features,
    layer_divergence,
    linear_probe,
    patch_iou,
    patch_labels,
    pr_auc,
    cls_divergence,
)
from textsteer.imageio import read_pnm
from textsteer.report import colorize, emit_heatmap, emit_report, overlay, write_csv
from textsteer.tensor import ContractError
from textsteer.vit import ViTConfig, init_vit


def brute_force_pr_auc(scores, labels):
    """Enumerate every distinct threshold explicitly, highest first."""
    pos = sum(labels)
    points = []
    for t in sorted(set(scores), reverse=True):
        tp = sum(1 for s, l in zip(scores, labels) if s >= t and l)
        fp = sum(1 for s, l in zip(scores, labels) if s >= t and not l)
        points.append((tp / pos, tp / (tp + fp)))
    area = 0.0
    prev_r, prev_p = 0.0, points[0][1]
    for r, p in points:
        area += (r - prev_r) * (p + prev_p) / 2
        prev_r, prev_p = r, p
    return area


def test_pr_auc_toy_case():
    scores, labels = [0.4, 0.3, 0.2, 0.1], [1, 1, 0, 0]
    assert pr_auc(scores, labels) == brute_force_pr_auc(scores, labels) == 1.0


def test_pr_auc_mask_as_attention_is_one():
    mask = np.zeros(64, bool)
    mask[[3, 4, 11]] = True
    assert pr_auc(mask / mask.sum(), mask) == 1.0


def test_pr_auc_constant_is_prevalence():
    labels = np.zeros(64, bool)
    labels[:10] = True
    assert pr_auc(np.full(64, 1 / 64), labels) == pytest.approx(10 / 64, abs=1e-15)


def test_pr_auc_needs_positives():
    with pytest.raises(ContractError):
        pr_auc([0.1, 0.2], [0, 0])


@settings(max_examples=400, deadline=None)
@given(st.integers(1, 16).flatmap(lambda n: st.tuples(
    st.lists(st.integers(0, 5), min_size=n, max_size=n),
    st.lists(st.booleans(), min_size=n, max_size=n))))
def test_pr_auc_matches_brute_force(case):
    # integer-valued scores force plenty of ties
    scores, labels = case
    if not any(labels):
        labels[0] = True
    scores = [s / 5 for s in scores]
    assert pr_auc(scores, labels) == brute_force_pr_auc(scores, labels)


def test_patch_labels_any_pixel_rule():
    mask = np.zeros((16, 16), bool)
    mask[7, 7] = True
    mask[12:16, 0:8] = True
    assert patch_labels(mask, 2).tolist() == [True, False, True, False]


def test_patch_iou_set_arithmetic():
    assert patch_iou([1, 1, 0, 0], [0, 1, 1, 0]) == pytest.approx(1 / 3)
    assert patch_iou([1, 0, 0, 0], [1, 0, 0, 0]) == 1.0
    assert patch_iou([1, 0, 0, 0], [0, 1, 0, 0]) == 0.0


def test_linear_probe_separable_and_shuffled():
    rng = np.random.default_rng(0)
    y = rng.integers(0, 3, 300)
    x = np.eye(3)[y] * 4 + rng.normal(0, 0.3, (300, 3))
    assert linear_probe(x[:200], y[:200], x[200:], y[200:], epochs=100) == 1.0
    shuffled = rng.permutation(y[:200])
    acc = linear_probe(x[:200], shuffled, x[200:], y[200:], epochs=100)
    assert acc < 0.6


def test_linear_probe_single_class_is_an_error():
    with pytest.raises(ContractError):
        linear_probe(np.zeros((4, 2)), np.zeros(4, int), np.zeros((2, 2)), np.zeros(2, int))


def test_linear_probe_deterministic():
    rng = np.random.default_rng(1)
    x, y = rng.normal(size=(100, 5)), rng.integers(0, 2, 100)
    assert linear_probe(x, y, x, y, epochs=5, seed=3) == linear_probe(x, y, x, y, epochs=5, seed=3)


def test_core_acc_scale_invariant():
    core = D.make_core_set(2, S=2, B=4, K=3)
    rng = np.random.default_rng(0)
    feats = [[rng.normal(size=(12, 6)) for _ in range(3)] for _ in range(2)]
    scaled = [[f * rng.uniform(0.1, 10, (12, 1)) for f in per] for per in feats]
    for mode in ("correct", "random_wrong"):
        assert core_acc1_from_features(core, feats, mode) == core_acc1_from_features(core, scaled, mode)


@pytest.fixture(scope="module")
def small_model():
    cfg = ViTConfig(depth=2)
    bb = init_vit(cfg, 0)
    del bb["head.w"], bb["head.b"]
    bb.freeze()
    return SteerModel.create(cfg, bb, SteerConfig(), seed=0)


def test_divergence_zero_at_init_and_at_omega_zero(small_model):
    images = np.random.default_rng(0).random((3, 64, 64, 3))
    prompts = [["circle"]] * 3
    assert layer_divergence(small_model, images, prompts, 1.0) == [0.0, 0.0, 0.0]
    for k, t in small_model.params.items():
        if k.endswith("alpha"):
            t.data = np.array(0.7)
    try:
        assert layer_divergence(small_model, images, prompts, 0.0) == [0.0, 0.0, 0.0]
        assert cls_divergence(small_model, images, prompts, 0.0) == 0.0
        assert max(layer_divergence(small_model, images, prompts, 1.0)) > 0
    finally:
        for k, t in small_model.params.items():
            if k.endswith("alpha"):
                t.data = np.array(0.0)


def test_colorize_ramp_endpoints():
    assert colorize(np.zeros((1, 1)))[0, 0].tolist() == [0, 0, 0]
    assert colorize(np.ones((1, 1)))[0, 0].tolist() == [1, 1, 1]


def test_overlay_of_zero_heatmap_darkens_image(tmp_path):
    img = np.random.default_rng(0).random((8, 8, 3))
    np.testing.assert_allclose(overlay(img, np.zeros((8, 8))), 0.5 * img)
    pgm, ppm = emit_heatmap(img, np.zeros((8, 8)), str(tmp_path / "h"))
    assert read_pnm(pgm).max() == 0
    expected = np.clip(np.rint(0.5 * img * 255), 0, 255).astype(np.uint8)
    assert np.array_equal(read_pnm(ppm), expected)


def test_heatmap_pgm_round_trip(tmp_path):
    heat = np.linspace(0, 1, 64).reshape(8, 8)
    pgm, _ = emit_heatmap(np.zeros((8, 8, 3)), heat, str(tmp_path / "h.ppm"))
    assert np.array_equal(read_pnm(pgm), np.rint(heat * 255).astype(np.uint8))


def test_heatmap_range_checked(tmp_path):
    with pytest.raises(ContractError):
        emit_heatmap(np.zeros((2, 2, 3)), np.full((2, 2), 1.5), str(tmp_path / "x"))


def test_unwritable_path_names_the_path(tmp_path):
    bad = str(tmp_path / "missing" / "r.json")
    with pytest.raises(OSError, match="missing"):
        emit_report({"a": 1}, bad)
    with pytest.raises(OSError, match="missing"):
        emit_heatmap(np.zeros((2, 2, 3)), np.zeros((2, 2)), os.path.join(tmp_path, "missing", "h"))


def test_report_json_contains_config(tmp_path):
    from textsteer.config import RunConfig

    cfg = RunConfig()
    path = emit_report({"config": cfg.to_flat(), "metrics": {"x": np.float64(0.5), "nan": float("nan")}},
                       str(tmp_path / "r.json"))
    back = json.loads(open(path).read())
    assert set(back["config"]) == set(cfg.to_flat())
    assert back["metrics"] == {"x": 0.5, "nan": None}


def test_csv_writer(tmp_path):
    p = write_csv(str(tmp_path / "c.csv"), ["a", "b"], [(1, 0.5), (2, 0.25)])
    assert open(p).read() == "a,b\n1,0.5\n2,0.25\n"
