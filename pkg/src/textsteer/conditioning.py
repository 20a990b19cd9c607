"""Text conditioning: frozen token table, adapter, gated cross-attention.

The steered model wraps a frozen backbone.  In early fusion a gated
cross-attention layer edits the patch tokens entering every ``stride``-th
block; in late fusion one layer edits the final patch tokens after the
backbone has finished.  Every gate starts at zero, so a fresh model
reproduces the backbone exactly.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import data as D
from . import tensor as T
from .params import ParamSet, normal_init
from .rng import derive_rng
from .tensor import Tensor
from .vit import ForwardTrace, ViTConfig, vit_forward

_MASK = -1e30
VALUE_INIT_SCALE = 0.25


class UnknownTokenError(KeyError):
    pass


class Vocabulary:
    """Closed token vocabulary; ids are dense in ``[0, size)``."""

    LEXICON = ("<pad>", "a", "the", "at", "on", "in", "of", "background", "and", "with", "object", "thing")

    def __init__(self, size: int = 256):
        words = list(self.LEXICON) + list(D.SHAPES) + list(D.COLOR_NAMES) + list(D.SIZES)
        words += list(D.ROW_WORDS) + list(D.COL_WORDS) + list(D.BACKGROUNDS)
        if size < len(words):
            raise ValueError(f"vocabulary needs at least {len(words)} entries")
        words += [f"<unused{i}>" for i in range(size - len(words))]
        self.words = words
        self.index = {w: i for i, w in enumerate(words)}

    def __len__(self) -> int:
        return len(self.words)

    def tokenize(self, words) -> list[int]:
        if isinstance(words, str):
            words = words.split()
        ids = []
        for w in words:
            if w not in self.index:
                raise UnknownTokenError(f"unknown token {w!r}")
            ids.append(self.index[w])
        return ids

    def detokenize(self, ids) -> list[str]:
        return [self.words[i] for i in ids]


def init_text_table(vocab_size: int, d_t: int, seed: int) -> Tensor:
    """Frozen random token embedding table (never receives gradients)."""
    return Tensor(derive_rng(seed, "text-table").normal(0.0, 1.0, (vocab_size, d_t)), requires_grad=False)


def encode_text(table: Tensor, ids) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    if ids.ndim != 1 or ids.size == 0:
        raise T.ContractError("encode_text: expected a nonempty id sequence")
    return T.embedding(table, ids)


def encode_batch(table: Tensor, batch_ids: list) -> tuple[Tensor, np.ndarray]:
    """Pad a batch of id sequences; returns ``[B, L, d_t]`` and a key mask ``[B, L]``."""
    length = max(len(ids) for ids in batch_ids)
    ids = np.zeros((len(batch_ids), length), dtype=np.int64)
    mask = np.zeros((len(batch_ids), length), dtype=bool)
    for b, seq in enumerate(batch_ids):
        if not len(seq):
            raise T.ContractError("encode_batch: empty prompt")
        ids[b, : len(seq)] = seq
        mask[b, : len(seq)] = True
    return T.embedding(table, ids), mask


@dataclass(frozen=True)
class SteerConfig:
    fusion_mode: str = "early"  # early | late
    stride: int = 2
    gate_scale: float = 1.0
    use_tanh_gate: bool = True
    projector: str = "mlp"  # mlp | linear
    use_ffn: bool = False
    hook_position: str = "pre_attention"  # pre_attention | post_block
    d_t: int = 48
    vocab_size: int = 256

    def __post_init__(self):
        if self.fusion_mode not in ("early", "late"):
            raise ValueError(f"fusion_mode must be early or late, got {self.fusion_mode!r}")
        if self.projector not in ("mlp", "linear"):
            raise ValueError(f"projector must be mlp or linear, got {self.projector!r}")
        if not 0.0 <= self.gate_scale <= 1.0:
            raise ValueError("gate_scale must lie in [0, 1]")
        if self.stride < 1:
            raise ValueError("stride must be >= 1")

    def ca_layers(self, depth: int) -> list:
        if self.fusion_mode == "late":
            return ["late"]
        return list(range(0, depth, self.stride))

    def to_dict(self) -> dict:
        return asdict(self)


def init_steer_params(vit: ViTConfig, cfg: SteerConfig, seed: int) -> ParamSet:
    rng = derive_rng(seed, "steer-init")
    d, dt = vit.d_v, cfg.d_t
    p = ParamSet()
    if cfg.projector == "mlp":
        hidden = 2 * d
        p.add("adapter.fc1.w", normal_init(rng, dt, (dt, hidden)))
        p.add("adapter.fc1.b", np.zeros(hidden))
        p.add("adapter.fc2.w", normal_init(rng, hidden, (hidden, d)))
        p.add("adapter.fc2.b", np.zeros(d))
    else:
        p.add("adapter.proj.w", normal_init(rng, dt, (dt, d)))
        p.add("adapter.proj.b", np.zeros(d))
    for layer in cfg.ca_layers(vit.depth):
        pre = f"ca.{layer}."
        for name in ("q", "k", "v", "o"):
            # value/output start small so the first gate movements nudge the frozen stream gently
            scale = VALUE_INIT_SCALE if name in ("v", "o") else 1.0
            p.add(pre + name, scale * normal_init(rng, d, (d, d)))
        p.add(pre + "alpha", np.zeros(()))
        if cfg.use_ffn:
            h = 4 * d
            p.add(pre + "ffn.fc1.w", normal_init(rng, d, (d, h)))
            p.add(pre + "ffn.fc1.b", np.zeros(h))
            p.add(pre + "ffn.fc2.w", normal_init(rng, h, (h, d)))
            p.add(pre + "ffn.fc2.b", np.zeros(d))
            p.add(pre + "ffn.alpha", np.zeros(()))
    p.add("seg.w", np.zeros((d, 1)))
    p.add("seg.b", np.zeros(1))
    return p


def adapt(params: ParamSet, z_t: Tensor, projector: str = "mlp") -> Tensor:
    """l2-normalize each token embedding, then project to the visual width."""
    h = T.l2_normalize(z_t, axis=-1)
    if projector == "linear":
        return T.matmul(h, params["adapter.proj.w"]) + params["adapter.proj.b"]
    h = T.gelu(T.matmul(h, params["adapter.fc1.w"]) + params["adapter.fc1.b"])
    return T.matmul(h, params["adapter.fc2.w"]) + params["adapter.fc2.b"]


def _gate(x: Tensor, alpha: Tensor, omega: float, use_tanh: bool) -> Tensor:
    return T.tanh_gate(x, alpha, omega) if use_tanh else T.scalar_gate(x, alpha, omega)


def cross_attention(params: ParamSet, prefix: str, z_v: Tensor, h_t: Tensor, heads: int,
                    key_mask: np.ndarray | None = None) -> tuple[Tensor, np.ndarray]:
    """Patch tokens ``[B, N, d]`` attend to adapted text ``[B, L, d]``."""
    squeeze = z_v.ndim == 2
    if squeeze:
        z_v = T.reshape(z_v, (1,) + z_v.shape)
        h_t = T.reshape(h_t, (1,) + h_t.shape)
    b, n, d = z_v.shape
    length = h_t.shape[1]
    dk = d // heads
    q = T.transpose(T.reshape(T.matmul(z_v, params[prefix + "q"]), (b, n, heads, dk)), (0, 2, 1, 3))
    k = T.transpose(T.reshape(T.matmul(h_t, params[prefix + "k"]), (b, length, heads, dk)), (0, 2, 3, 1))
    v = T.transpose(T.reshape(T.matmul(h_t, params[prefix + "v"]), (b, length, heads, dk)), (0, 2, 1, 3))
    scores = T.matmul(q, k) * (1.0 / math.sqrt(dk))
    if key_mask is not None:
        scores = scores + Tensor(np.where(key_mask, 0.0, _MASK)[:, None, None, :])
    probs = T.softmax(scores, axis=-1)
    out = T.reshape(T.transpose(T.matmul(probs, v), (0, 2, 1, 3)), (b, n, d))
    out = T.matmul(out, params[prefix + "o"])
    if squeeze:
        out = out[0]
    return out, probs.data


_LN_ONES: dict = {}


def _plain_layernorm(x: Tensor) -> Tensor:
    d = x.shape[-1]
    if d not in _LN_ONES:
        _LN_ONES[d] = (Tensor(np.ones(d)), Tensor(np.zeros(d)))
    return T.layernorm(x, *_LN_ONES[d])


def gated_cross_attention(params: ParamSet, layer, z_v: Tensor, h_t: Tensor, omega: float, heads: int,
                          use_tanh_gate: bool = True, use_ffn: bool = False,
                          key_mask: np.ndarray | None = None) -> Tensor:
    """``z_v + gate(omega * alpha) * CA(z_v, h_t)``, optionally followed by a gated FFN."""
    pre = f"ca.{layer}."
    ca, _ = cross_attention(params, pre, z_v, h_t, heads, key_mask)
    z = z_v + _gate(ca, params[pre + "alpha"], omega, use_tanh_gate)
    if use_ffn:
        h = T.gelu(T.matmul(_plain_layernorm(z), params[pre + "ffn.fc1.w"]) + params[pre + "ffn.fc1.b"])
        h = T.matmul(h, params[pre + "ffn.fc2.w"]) + params[pre + "ffn.fc2.b"]
        z = z + _gate(h, params[pre + "ffn.alpha"], omega, use_tanh_gate)
    return z


@dataclass
class SteerTrace(ForwardTrace):
    global_feature: Tensor | None = None
    ca_calls: int = 0
    block_hook_calls: int = 0


@dataclass
class SteerModel:
    """A frozen backbone plus the trainable conditioning pathway."""

    vit_config: ViTConfig
    backbone: ParamSet
    config: SteerConfig
    params: ParamSet
    vocab: Vocabulary = field(default_factory=Vocabulary)
    text_table: Tensor | None = None
    text_seed: int = 0

    def __post_init__(self):
        if self.text_table is None:
            self.text_table = init_text_table(len(self.vocab), self.config.d_t, self.text_seed)

    @classmethod
    def create(cls, vit_config: ViTConfig, backbone: ParamSet, config: SteerConfig, seed: int,
               text_seed: int | None = None) -> "SteerModel":
        vocab = Vocabulary(config.vocab_size)
        return cls(vit_config, backbone, config, init_steer_params(vit_config, config, seed), vocab,
                   text_seed=seed if text_seed is None else text_seed)

    @property
    def ca_layers(self) -> list:
        return self.config.ca_layers(self.vit_config.depth)

    def text_hash(self) -> str:
        from .params import content_hash

        return content_hash({"text_table": self.text_table})

    def encode_prompts(self, prompts) -> tuple[Tensor, np.ndarray]:
        ids = [self.vocab.tokenize(p) for p in prompts]
        z_t, mask = encode_batch(self.text_table, ids)
        return adapt(self.params, z_t, self.config.projector), mask

    def forward(self, images: np.ndarray, prompts, omega: float | None = None) -> SteerTrace:
        """Steered forward pass over a batch of images, one prompt per image."""
        images = np.asarray(images, dtype=np.float64)
        if images.ndim == 3:
            images = images[None]
        if isinstance(prompts, (str,)) or (prompts and isinstance(prompts[0], str)):
            prompts = [prompts] * len(images)
        if len(prompts) != len(images):
            raise T.ContractError(f"{len(prompts)} prompts for {len(images)} images")
        omega = self.config.gate_scale if omega is None else float(omega)
        if not 0.0 <= omega <= 1.0:
            raise ValueError("omega must lie in [0, 1]")
        cfg = self.config
        h_t, mask = self.encode_prompts(prompts)
        heads = self.vit_config.heads
        calls = {"ca": 0, "block": 0}

        def make_hook(layer):
            def hook(i, patches):
                calls["ca"] += 1
                calls["block"] += 1
                return gated_cross_attention(self.params, layer, patches, h_t, omega, heads,
                                             cfg.use_tanh_gate, cfg.use_ffn, mask)
            return hook

        if cfg.fusion_mode == "early":
            hooks = {layer: make_hook(layer) for layer in self.ca_layers}
            tr = vit_forward(self.backbone, self.vit_config, images, hooks, cfg.hook_position)
            out = SteerTrace(tr.states, tr.last_attention, tr.cls, tr.patches)
            out.global_feature = tr.cls
        else:
            tr = vit_forward(self.backbone, self.vit_config, images)
            last = tr.states[-1]
            calls["ca"] += 1
            steered = gated_cross_attention(self.params, "late", last[:, 1:], h_t, omega, heads,
                                            cfg.use_tanh_gate, cfg.use_ffn, mask)
            state = T.concat([last[:, :1], steered], axis=1)
            final = T.layernorm(state, self.backbone["norm.g"], self.backbone["norm.b"])
            out = SteerTrace(tr.states[:-1] + [state], tr.last_attention, final[:, 0], final[:, 1:])
            out.global_feature = T.mean(out.patches, axis=1)
        out.ca_calls = calls["ca"]
        out.block_hook_calls = calls["block"]
        return out

    def seg_logits(self, trace: ForwardTrace) -> Tensor:
        b, n, d = trace.patches.shape
        return T.reshape(T.matmul(trace.patches, self.params["seg.w"]) + self.params["seg.b"], (b, n))


def gate_report(params: ParamSet) -> list[tuple]:
    """``(layer, alpha, tanh(alpha))`` for every cross-attention layer, in order."""
    rows = []
    for name, t in params.items():
        if name.startswith("ca.") and name.endswith(".alpha") and ".ffn." not in name:
            layer = name.split(".")[1]
            layer = int(layer) if layer.isdigit() else layer
            a = float(t.data)
            rows.append((layer, a, math.tanh(a)))
    return rows


def count_trainable_params(params: ParamSet) -> int:
    return sum(t.size for t in params.values())
