"""Patch-level supervision, the linear segmentation head, and training."""
from __future__ import annotations

import copy
import logging
import math
from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from . import tensor as T
from .conditioning import SteerModel
from .optim import AdamW, lr_schedule
from .params import content_hash
from .tensor import ContractError, Tensor

log = logging.getLogger(__name__)

LOG_EPS = 1e-12


class EmptyReferentError(ValueError):
    pass


class TrainingError(RuntimeError):
    """Training diverged; ``last_good`` holds the last finite parameter values."""

    def __init__(self, msg, last_good=None, losses=None):
        super().__init__(msg)
        self.last_good = last_good
        self.losses = losses or []


@dataclass
class PatchTarget:
    y: np.ndarray  # [n, n], sums to 1
    kind: str  # segment | point
    raw_mass: float
    raw: np.ndarray | None = None

    @property
    def flat(self) -> np.ndarray:
        return self.y.reshape(-1)


def patch_fractions(mask: np.ndarray, grid: int) -> np.ndarray:
    """Fraction of foreground pixels per cell of a ``grid x grid`` partition."""
    mask = np.asarray(mask, dtype=bool)
    h, w = mask.shape
    if h % grid or w % grid:
        raise ContractError(f"mask {h}x{w} not divisible into a {grid}x{grid} grid")
    ph, pw = h // grid, w // grid
    counts = mask.reshape(grid, ph, grid, pw).sum(axis=(1, 3))
    return counts / float(ph * pw)


def rasterize_mask(mask: np.ndarray, grid: int) -> PatchTarget:
    raw = patch_fractions(mask, grid)
    mass = float(raw.sum())
    if mass == 0.0:
        raise EmptyReferentError("empty referent")
    return PatchTarget(y=raw / mass, kind="segment", raw_mass=mass, raw=raw)


def gaussian_point_target(center, grid: int, sigma: float = 1.1) -> PatchTarget:
    """Gaussian blob over patch centers; ``center`` is (row, col) in patch units.

    Patch ``(r, c)`` has its center at ``(r + 0.5, c + 0.5)``.  ``center`` may
    also be a list of centers, in which case the blobs are summed.
    """
    centers = np.atleast_2d(np.asarray(center, dtype=np.float64))
    rr, cc = np.mgrid[0:grid, 0:grid] + 0.5
    total = np.zeros((grid, grid))
    for cy, cx in centers:
        if not (0 <= cy <= grid and 0 <= cx <= grid):
            raise ContractError(f"center {(cy, cx)} outside the {grid}x{grid} grid")
        d2 = (rr - cy) ** 2 + (cc - cx) ** 2
        if sigma <= 0:
            blob = np.zeros_like(d2)
            blob.flat[int(np.argmin(d2))] = 1.0
        else:
            logits = -d2 / (2.0 * sigma * sigma)
            blob = np.exp(logits - logits.max())
            blob /= blob.sum()
        total += blob
    mass = float(total.sum())
    return PatchTarget(y=total / mass, kind="point", raw_mass=mass, raw=total)


def mask_centers(masks, patch_size: int) -> list[tuple[float, float]]:
    """Bounding-box centers (patch units) of each nonempty mask."""
    out = []
    for m in masks:
        ys, xs = np.nonzero(m)
        if len(ys) == 0:
            continue
        cy = (ys.min() + ys.max() + 1) / 2.0 / patch_size
        cx = (xs.min() + xs.max() + 1) / 2.0 / patch_size
        out.append((cy, cx))
    return out


def seg_head_forward(weight: Tensor, bias: Tensor, patch_tokens: Tensor) -> Tensor:
    """Spatial softmax of one logit per patch: ``[.., N, d] -> [.., N]``."""
    logits = T.matmul(patch_tokens, weight) + bias
    logits = T.reshape(logits, logits.shape[:-1])
    return T.softmax(logits, axis=-1)


def soft_ce_loss(p: Tensor, y) -> Tensor:
    """``-sum_i y_i log(p_i + eps)``, averaged over any leading batch axis."""
    y = np.asarray(y, dtype=np.float64)
    p = T.as_tensor(p)
    if p.shape != y.shape:
        raise ContractError(f"soft_ce_loss: p {p.shape} vs y {y.shape}")
    ce = -T.tsum(T.mul(Tensor(y), T.log(p + LOG_EPS)), axis=-1)
    return T.mean(ce) if ce.ndim else ce


def entropy(y: np.ndarray) -> float:
    y = np.asarray(y, dtype=np.float64).ravel()
    nz = y[y > 0]
    return float(-(nz * np.log(nz)).sum())


def bilinear_upsample(grid: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Half-pixel-centered bilinear resize with edge clamping."""
    grid = np.asarray(grid, dtype=np.float64)
    gh, gw = grid.shape

    def coords(n_out, n_in):
        src = (np.arange(n_out) + 0.5) * n_in / n_out - 0.5
        src = np.clip(src, 0, n_in - 1)
        lo = np.floor(src).astype(int)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, src - lo

    y0, y1, fy = coords(out_h, gh)
    x0, x1, fx = coords(out_w, gw)
    top = grid[y0][:, x0] * (1 - fx) + grid[y0][:, x1] * fx
    bot = grid[y1][:, x0] * (1 - fx) + grid[y1][:, x1] * fx
    return top * (1 - fy[:, None]) + bot * fy[:, None]


def predict_heatmap(p: np.ndarray, upsample_to: tuple[int, int]) -> np.ndarray:
    """Upsample patch probabilities to pixels and max-normalize to [0, 1].

    Bilinear interpolation is linear, so normalizing after upsampling only
    rescales; it guarantees the peak pixel is exactly 1.
    """
    p = np.asarray(p, dtype=np.float64)
    n = int(round(math.sqrt(p.size)))
    img = bilinear_upsample(p.reshape(n, n), *upsample_to)
    peak = img.max()
    if peak > 0:
        img = img / peak
    return np.clip(img, 0.0, 1.0)


# -- training --------------------------------------------------------------
@dataclass
class ScheduleConfig:
    warmup_steps: int = 100
    decay_end: int = 8000
    peak: float = 1e-3
    floor: float = 1e-4

    def lr(self, step: int) -> float:
        return lr_schedule(step, self.warmup_steps, self.peak, self.floor, self.decay_end)


@dataclass
class TrainResult:
    losses: list
    lrs: list
    steps: int
    backbone_hash: str
    text_hash: str
    log_rows: list = field(default_factory=list)


def build_targets(items, objective: str, grid: int, patch_size: int) -> np.ndarray:
    ys = []
    for it in items:
        if objective == "segment":
            ys.append(rasterize_mask(it.mask, grid).flat)
        elif objective == "point":
            level = it.level
            masks = [it.sample.masks[i] for i in range(len(it.sample.spec.placements))
                     if it.sample.prompt(i, level) == list(it.words)]
            ys.append(gaussian_point_target(mask_centers(masks, patch_size), grid).flat)
        else:
            raise ValueError(f"unknown objective {objective!r}")
    return np.stack(ys)


def batch_loss(model: SteerModel, items, objective: str, omega: float = 1.0) -> Tensor:
    images = np.stack([it.image for it in items])
    trace = model.forward(images, [it.words for it in items], omega)
    p = seg_head_forward(model.params["seg.w"], model.params["seg.b"], trace.patches)
    y = build_targets(items, objective, model.vit_config.grid, model.vit_config.patch_size)
    return soft_ce_loss(p, y)


def train_steer(
    model: SteerModel,
    stream: Iterator,
    objective: str = "segment",
    steps: int = 8000,
    batch_size: int = 4,
    schedule: ScheduleConfig | None = None,
    log_every: int = 50,
    weight_decay: float = 0.05,
) -> TrainResult:
    """Optimize adapter, cross-attention and segmentation head with AdamW.

    The backbone and text table are checked bit-for-bit at exit.
    """
    schedule = schedule or ScheduleConfig()
    bb_hash = content_hash(model.backbone)
    txt_hash = model.text_hash()
    opt = AdamW(model.params.trainable(), weight_decay=weight_decay)
    losses, lrs, rows = [], [], []
    last_good = copy.deepcopy(model.params.arrays())
    for step in range(1, steps + 1):
        items = [next(stream) for _ in range(batch_size)]
        opt.zero_grad()
        loss = batch_loss(model, items, objective)
        value = loss.item()
        if not math.isfinite(value):
            raise TrainingError(f"non-finite loss at step {step}", last_good, losses)
        loss.backward()
        lr = schedule.lr(step)
        opt.step(lr)
        losses.append(value)
        lrs.append(lr)
        if step % log_every == 0 or step == steps:
            window = float(np.mean(losses[-log_every:]))
            rows.append((step, lr, window))
            last_good = copy.deepcopy(model.params.arrays())
            log.info("train step %d lr %.2e loss %.4f", step, lr, window)
    if content_hash(model.backbone) != bb_hash or model.text_hash() != txt_hash:
        raise TrainingError("frozen parameters changed during training")
    return TrainResult(losses, lrs, steps, bb_hash, txt_hash, rows)
