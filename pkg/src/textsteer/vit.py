"""A small pre-norm vision transformer used as the frozen backbone."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import tensor as T
from .optim import AdamW, lr_schedule
from .params import ParamSet, normal_init
from .rng import derive_rng
from .tensor import ContractError, ShapeError, Tensor

log = logging.getLogger(__name__)

# hook(block_index, patch_tokens[B, N, d]) -> patch_tokens[B, N, d]
Hook = Callable[[int, Tensor], Tensor]


@dataclass(frozen=True)
class ViTConfig:
    image_size: int = 64
    patch_size: int = 8
    d_v: int = 64
    depth: int = 8
    heads: int = 4
    mlp_ratio: int = 4
    num_classes: int = 12

    def __post_init__(self):
        if self.image_size % self.patch_size:
            raise ValueError("image_size must be divisible by patch_size")
        if self.d_v % self.heads:
            raise ValueError("d_v must be divisible by heads")

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def num_patches(self) -> int:
        return self.grid * self.grid

    @property
    def patch_dim(self) -> int:
        return self.patch_size * self.patch_size * 3


@dataclass
class ForwardTrace:
    """Per-layer token states plus the last block's attention weights.

    ``states[0]`` is the input embedding, ``states[l + 1]`` the output of
    block ``l``; each is ``[B, 1 + N, d]`` with CLS at position 0.
    """

    states: list
    last_attention: np.ndarray  # [B, heads, 1 + N, 1 + N]
    cls: Tensor  # final-normed CLS, [B, d]
    patches: Tensor  # final-normed patch tokens, [B, N, d]
    extra: dict = field(default_factory=dict)

    def cls_attention(self, reduce: str = "mean") -> np.ndarray:
        """CLS-to-patch attention of the last block, ``[B, N]``."""
        rows = self.last_attention[:, :, 0, 1:]
        return rows.max(axis=1) if reduce == "max" else rows.mean(axis=1)


def init_vit(config: ViTConfig, seed: int) -> ParamSet:
    rng = derive_rng(seed, "vit-init")
    d, hidden = config.d_v, config.d_v * config.mlp_ratio
    p = ParamSet()
    p.add("patch.w", normal_init(rng, config.patch_dim, (config.patch_dim, d)))
    p.add("patch.b", np.zeros(d))
    p.add("cls", rng.normal(0.0, 0.02, d))
    p.add("pos", rng.normal(0.0, 0.02, (1 + config.num_patches, d)))
    for i in range(config.depth):
        pre = f"blocks.{i}."
        p.add(pre + "ln1.g", np.ones(d))
        p.add(pre + "ln1.b", np.zeros(d))
        for name in ("q", "k", "v", "o"):
            p.add(pre + f"attn.{name}.w", normal_init(rng, d, (d, d)))
            p.add(pre + f"attn.{name}.b", np.zeros(d))
        p.add(pre + "ln2.g", np.ones(d))
        p.add(pre + "ln2.b", np.zeros(d))
        p.add(pre + "mlp.fc1.w", normal_init(rng, d, (d, hidden)))
        p.add(pre + "mlp.fc1.b", np.zeros(hidden))
        p.add(pre + "mlp.fc2.w", normal_init(rng, hidden, (hidden, d)) * (1.0 / math.sqrt(2 * config.depth)))
        p.add(pre + "mlp.fc2.b", np.zeros(d))
    p.add("norm.g", np.ones(d))
    p.add("norm.b", np.zeros(d))
    p.add("head.w", np.zeros((d, config.num_classes)))
    p.add("head.b", np.zeros(config.num_classes))
    return p


def patchify(images: np.ndarray, patch_size: int) -> np.ndarray:
    """``[B, H, W, 3]`` (or a single ``[H, W, 3]``) to raster-order patch rows."""
    images = np.asarray(images, dtype=np.float64)
    single = images.ndim == 3
    if single:
        images = images[None]
    if images.ndim != 4 or images.shape[-1] != 3:
        raise ContractError(f"patchify: expected [B, H, W, 3], got {images.shape}")
    b, h, w, _ = images.shape
    if h % patch_size or w % patch_size:
        raise ContractError(f"patchify: image {h}x{w} not divisible by patch {patch_size}")
    gh, gw = h // patch_size, w // patch_size
    x = images.reshape(b, gh, patch_size, gw, patch_size, 3).transpose(0, 1, 3, 2, 4, 5)
    x = x.reshape(b, gh * gw, patch_size * patch_size * 3)
    return x[0] if single else x


def unpatchify(patches: np.ndarray, patch_size: int, grid: int) -> np.ndarray:
    patches = np.asarray(patches)
    single = patches.ndim == 2
    if single:
        patches = patches[None]
    b = patches.shape[0]
    x = patches.reshape(b, grid, grid, patch_size, patch_size, 3).transpose(0, 1, 3, 2, 4, 5)
    x = x.reshape(b, grid * patch_size, grid * patch_size, 3)
    return x[0] if single else x


def _position_embedding(params: ParamSet, config: ViTConfig, grid: int) -> np.ndarray | Tensor:
    pos = params["pos"]
    if grid == config.grid:
        return pos
    if grid % config.grid:
        raise ContractError(f"grid {grid} is not a multiple of the trained grid {config.grid}")
    # Larger canvases (mosaics) reuse the trained grid once per tile.
    reps = grid // config.grid
    base = pos.data[1:].reshape(config.grid, config.grid, -1)
    tiled = np.tile(base, (reps, reps, 1)).reshape(grid * grid, -1)
    return Tensor(np.concatenate([pos.data[:1], tiled], axis=0))


def _linear(x: Tensor, params: ParamSet, name: str) -> Tensor:
    return T.matmul(x, params[name + ".w"]) + params[name + ".b"]


def attention(x: Tensor, params: ParamSet, prefix: str, heads: int):
    """Multi-head self-attention; returns (output, attention probabilities)."""
    b, n, d = x.shape
    dk = d // heads

    def split(t: Tensor) -> Tensor:
        return T.transpose(T.reshape(t, (b, n, heads, dk)), (0, 2, 1, 3))

    q = split(_linear(x, params, prefix + "q"))
    k = split(_linear(x, params, prefix + "k"))
    v = split(_linear(x, params, prefix + "v"))
    scores = T.matmul(q, T.swapaxes(k, -1, -2)) * (1.0 / math.sqrt(dk))
    probs = T.softmax(scores, axis=-1)
    out = T.matmul(probs, v)
    out = T.reshape(T.transpose(out, (0, 2, 1, 3)), (b, n, d))
    return _linear(out, params, prefix + "o"), probs


def block_forward(x: Tensor, params: ParamSet, i: int, heads: int):
    pre = f"blocks.{i}."
    h = T.layernorm(x, params[pre + "ln1.g"], params[pre + "ln1.b"])
    a, probs = attention(h, params, pre + "attn.", heads)
    x = x + a
    h = T.layernorm(x, params[pre + "ln2.g"], params[pre + "ln2.b"])
    h = T.gelu(_linear(h, params, pre + "mlp.fc1"))
    x = x + _linear(h, params, pre + "mlp.fc2")
    return x, probs


def _apply_hook(hook: Hook, i: int, x: Tensor) -> Tensor:
    patches = x[:, 1:]
    out = hook(i, patches)
    if out is patches:
        return x
    if out.shape != patches.shape:
        raise ShapeError(f"hook at block {i} returned {out.shape}, expected {patches.shape}")
    return T.concat([x[:, :1], out], axis=1)


def vit_forward(
    params: ParamSet,
    config: ViTConfig,
    images: np.ndarray,
    hooks: dict[int, Hook] | None = None,
    hook_position: str = "pre_attention",
) -> ForwardTrace:
    """Run the backbone on ``[B, H, W, 3]`` images.

    ``hooks`` maps a block index to a patch-token transformer.  With
    ``hook_position="pre_attention"`` the hook edits the patch tokens that
    enter block ``i``; with ``"post_block"`` it edits the block's output.
    The CLS token is never passed to hooks.
    """
    hooks = hooks or {}
    images = np.asarray(images, dtype=np.float64)
    if images.ndim == 3:
        images = images[None]
    if images.shape[1] != images.shape[2] or images.shape[1] % config.image_size:
        raise ContractError(f"vit_forward: unsupported image size {images.shape[1:3]}")
    grid = images.shape[1] // config.patch_size
    b = images.shape[0]
    patches = Tensor(patchify(images, config.patch_size))
    tok = _linear(patches, params, "patch")
    cls = T.reshape(params["cls"], (1, 1, config.d_v)) * Tensor(np.ones((b, 1, 1)))
    x = T.concat([cls, tok], axis=1) + _position_embedding(params, config, grid)
    states = [x]
    probs = None
    for i in range(config.depth):
        if i in hooks and hook_position == "pre_attention":
            x = _apply_hook(hooks[i], i, x)
        x, probs = block_forward(x, params, i, config.heads)
        if i in hooks and hook_position == "post_block":
            x = _apply_hook(hooks[i], i, x)
        states.append(x)
    final = T.layernorm(x, params["norm.g"], params["norm.b"])
    return ForwardTrace(states=states, last_attention=probs.data, cls=final[:, 0], patches=final[:, 1:])


def classify_logits(params: ParamSet, trace: ForwardTrace) -> Tensor:
    return _linear(trace.cls, params, "head")


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    lp = T.log_softmax(logits, axis=-1)
    idx = (np.arange(len(labels)), np.asarray(labels))
    return -T.mean(lp[idx])


def accuracy(params: ParamSet, config: ViTConfig, images: np.ndarray, labels: np.ndarray, batch: int = 128) -> float:
    correct = 0
    with T.no_grad():
        for s in range(0, len(images), batch):
            tr = vit_forward(params, config, images[s : s + batch])
            pred = classify_logits(params, tr).data.argmax(axis=-1)
            correct += int((pred == labels[s : s + batch]).sum())
    return correct / len(images)


class PretrainError(RuntimeError):
    pass


@dataclass
class PretrainResult:
    params: ParamSet
    frozen_hash: str
    heldout_accuracy: float
    steps: int
    losses: list


def pretrain_backbone(
    config: ViTConfig,
    sample_batch: Callable[[np.random.Generator, int], tuple[np.ndarray, np.ndarray]],
    steps: int,
    seed: int,
    batch_size: int = 32,
    lr: float = 1e-3,
    heldout: tuple[np.ndarray, np.ndarray] | None = None,
    target_accuracy: float = 0.9,
    eval_every: int = 250,
) -> PretrainResult:
    """Train the CLS classification head end to end, then freeze.

    Stops early once held-out accuracy reaches ``target_accuracy``; raises
    ``PretrainError`` if the budget runs out first.  The returned params
    have the classification head removed and every tensor frozen.
    """
    params = init_vit(config, seed)
    opt = AdamW(params.trainable(), weight_decay=0.05)
    rng = derive_rng(seed, "pretrain-batches")
    warmup = max(1, min(200, steps // 10))
    losses = []
    acc = 0.0
    step = 0
    for step in range(1, steps + 1):
        images, labels = sample_batch(rng, batch_size)
        opt.zero_grad()
        loss = cross_entropy(classify_logits(params, vit_forward(params, config, images)), labels)
        loss.backward()
        opt.step(lr_schedule(step, warmup, lr, lr * 0.1, steps + 1))
        losses.append(loss.item())
        if heldout is not None and (step % eval_every == 0 or step == steps):
            acc = accuracy(params, config, *heldout)
            log.info("pretrain step %d loss %.4f heldout acc %.3f", step, np.mean(losses[-eval_every:]), acc)
            if acc >= target_accuracy:
                break
    if heldout is not None and acc < target_accuracy:
        raise PretrainError(f"held-out accuracy {acc:.3f} < {target_accuracy} after {step} steps")
    del params["head.w"], params["head.b"]
    frozen = params.freeze()
    return PretrainResult(params=params, frozen_hash=frozen, heldout_accuracy=acc, steps=step, losses=losses)
