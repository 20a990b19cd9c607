import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from textsteer import checkpoint
from textsteer import pipeline as P
from textsteer.checkpoint import CheckpointError
from textsteer.config import RunConfig
from textsteer.params import ParamSet
from textsteer.vit import init_vit


@settings(max_examples=30, deadline=None)
@given(st.lists(st.lists(st.integers(1, 4), min_size=0, max_size=3), min_size=1, max_size=4),
       st.integers(0, 2**32 - 1))
def test_round_trip_exact(shapes, seed):
    rng = np.random.default_rng(seed)
    arrays = {f"t{i}": rng.normal(size=tuple(s)) for i, s in enumerate(shapes)}
    back, header = checkpoint.loads(checkpoint.dumps(arrays, {"k": [1, 2]}))
    assert header == {"k": [1, 2]} and list(back) == list(arrays)
    for k in arrays:
        assert back[k].shape == arrays[k].shape and np.array_equal(back[k], arrays[k])


def test_serialization_is_byte_stable():
    arrays = {"a": np.arange(6.0).reshape(2, 3), "b": np.array(0.5)}
    assert checkpoint.dumps(arrays, {"z": 1, "a": 2}) == checkpoint.dumps(arrays, {"a": 2, "z": 1})


def test_corruption_detected():
    raw = bytearray(checkpoint.dumps({"a": np.ones(4)}))
    raw[-40] ^= 1
    with pytest.raises(CheckpointError, match="hash"):
        checkpoint.loads(bytes(raw))
    with pytest.raises(CheckpointError, match="magic"):
        checkpoint.loads(b"NOTACKPT" + bytes(64))


def _backbone(seed=0):
    cfg = RunConfig().replace(**{"vit.depth": 2, "seed": seed})
    p = init_vit(cfg.vit, seed)
    del p["head.w"], p["head.b"]
    p.freeze()
    return cfg, p


def test_backbone_round_trip(tmp_path):
    cfg, bb = _backbone()
    path = str(tmp_path / "bb.ckpt")
    h = P.save_backbone(path, bb, cfg)
    back, header = P.load_backbone(path)
    assert header["backbone_hash"] == h == back.content_hash()
    assert all(not t.requires_grad for t in back.values())


def test_steer_checkpoint_requires_matching_backbone(tmp_path):
    cfg, bb = _backbone(0)
    model = P.build_model(cfg, bb)
    model.params["ca.0.alpha"].data = np.array(0.25)
    path = str(tmp_path / "s.ckpt")
    P.save_steer(path, model, cfg)
    back, back_cfg = P.load_steer(path, bb)
    assert back_cfg == cfg
    assert float(back.params["ca.0.alpha"].data) == 0.25
    _, other = _backbone(1)
    with pytest.raises(CheckpointError, match="backbone hash mismatch"):
        P.load_steer(path, other)


def test_wrong_kind_rejected(tmp_path):
    path = str(tmp_path / "x.ckpt")
    checkpoint.save(path, ParamSet(), {"kind": "steer"[::-1]})
    with pytest.raises(CheckpointError):
        P.load_backbone(path)
