"""Measurement protocols: retrieval, attention PR-AUC, divergence, probes, IoU."""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .conditioning import SteerModel
from .data import CoreSet, MosaicSample, ReferentialItem
from .objective import patch_fractions, seg_head_forward
from .optim import AdamW
from .rng import derive_rng
from .tensor import ContractError, Tensor
from .vit import vit_forward

log = logging.getLogger(__name__)

IOU_TAU = 2.0


# -- features --------------------------------------------------------------
def global_features(model: SteerModel, images: np.ndarray, prompts, omega: float, batch: int = 64) -> np.ndarray:
    """Steered global feature per image (CLS in early fusion, mean patch in late)."""
    out = []
    with T.no_grad():
        for s in range(0, len(images), batch):
            p = prompts[s : s + batch] if isinstance(prompts[0], list) else prompts
            tr = model.forward(images[s : s + batch], p, omega)
            out.append(tr.global_feature.data)
    return np.concatenate(out, axis=0)


def _cosine_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    an = a / np.linalg.norm(a, axis=-1, keepdims=True)
    bn = b / np.linalg.norm(b, axis=-1, keepdims=True)
    return an @ bn.T


# -- conditional retrieval -------------------------------------------------
def wrong_prompts(core_set: CoreSet, seed: int) -> np.ndarray:
    """For every item, a uniformly chosen object type other than its own."""
    rng = derive_rng(seed, "wrong-prompt")
    K = core_set.K
    out = np.empty(len(core_set), dtype=np.int64)
    for j, it in enumerate(core_set.items):
        k = int(rng.integers(K - 1))
        out[j] = k if k < it.object_type else k + 1
    return out


def core_acc1_from_features(core_set: CoreSet, features, prompt_mode: str = "correct", seed: int = 0) -> float:
    """Top-1 same-scene retrieval accuracy.

    ``features[s][k]`` is an ``[items_in_scene, d]`` array of scene ``s``
    encoded under object prompt ``k`` (item order as in ``core_set.items``).
    Query and gallery share the query's prompt; same-base items are excluded.
    """
    if prompt_mode not in ("correct", "random_wrong"):
        raise ValueError(f"unknown prompt_mode {prompt_mode!r}")
    wrong = wrong_prompts(core_set, seed)
    correct = total = 0
    for s in range(core_set.S):
        idx = [j for j, it in enumerate(core_set.items) if it.scene == s]
        bases = np.array([core_set.items[j].base_id for j in idx])
        types = np.array([core_set.items[j].object_type for j in idx])
        for q_local, j in enumerate(idx):
            k = types[q_local] if prompt_mode == "correct" else wrong[j]
            gallery = np.flatnonzero(bases != bases[q_local])
            if gallery.size == 0:
                raise ContractError("empty gallery")
            f = features[s][k]
            sims = _cosine_matrix(f[q_local : q_local + 1], f[gallery])[0]
            best = gallery[int(np.argmax(sims))]
            correct += int(types[best] == types[q_local])
            total += 1
    return correct / total


def core_features(model: SteerModel, core_set: CoreSet, omega: float) -> list:
    """Per scene, per object prompt: the global features of every scene item."""
    feats = []
    for s in range(core_set.S):
        images = np.stack([it.image for it in core_set.items if it.scene == s])
        per_prompt = []
        for k in range(core_set.K):
            if omega == 0.0 and per_prompt:
                per_prompt.append(per_prompt[0])  # prompts cannot matter at omega = 0
                continue
            per_prompt.append(global_features(model, images, core_set.prompt(s, k), omega))
        feats.append(per_prompt)
    return feats


def core_acc1(model: SteerModel, core_set: CoreSet, prompt_mode: str = "correct", omega: float = 1.0,
              seed: int = 0, features=None) -> float:
    if features is None:
        features = core_features(model, core_set, omega)
    return core_acc1_from_features(core_set, features, prompt_mode, seed)


# -- PR-AUC ----------------------------------------------------------------
def pr_auc(scores, labels) -> float:
    """Trapezoidal area under the precision-recall curve.

    One curve point per distinct score threshold (descending), plus a
    starting point at recall 0 carrying the first point's precision.
    """
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels, dtype=bool).ravel()
    pos = int(labels.sum())
    if pos == 0:
        raise ContractError("pr_auc: no positive labels")
    order = np.argsort(-scores, kind="mergesort")
    s, l = scores[order], labels[order]
    tp = np.cumsum(l)
    fp = np.cumsum(~l)
    last = np.r_[np.flatnonzero(s[1:] != s[:-1]), len(s) - 1]
    tp, fp = tp[last], fp[last]
    precision = tp / (tp + fp)
    recall = tp / pos
    area = 0.0
    prev_r, prev_p = 0.0, float(precision[0])
    for r, p in zip(recall, precision):
        area += (r - prev_r) * (p + prev_p) / 2.0
        prev_r, prev_p = r, p
    return float(area)


def patch_labels(mask: np.ndarray, grid: int) -> np.ndarray:
    """A patch is positive when it contains any foreground pixel."""
    return (patch_fractions(mask, grid) > 0).reshape(-1)


@dataclass
class MosaicResult:
    pr_auc: float
    pairs: int
    skipped: int
    per_pair: list


def mosaic_pr_auc(model: SteerModel, mosaics: list, omega: float, reduce: str = "mean") -> MosaicResult:
    """CLS-to-patch attention of the last block vs. each queried class mask."""
    vals, per_pair = [], []
    skipped = 0
    grid = mosaics[0].image.shape[0] // model.vit_config.patch_size if mosaics else 0
    with T.no_grad():
        for m_i, m in enumerate(mosaics):
            classes = m.classes()
            skipped += sum(1 for c in m.class_masks if c not in classes)
            if not classes:
                continue
            images = np.repeat(m.image[None], len(classes), axis=0)
            tr = model.forward(images, [[c] for c in classes], omega)
            att = tr.cls_attention(reduce)
            for c_i, c in enumerate(classes):
                v = pr_auc(att[c_i], patch_labels(m.class_masks[c], grid))
                vals.append(v)
                per_pair.append((m_i, c, v))
    if skipped:
        log.warning("mosaic_pr_auc: skipped %d absent classes", skipped)
    return MosaicResult(float(np.mean(vals)) if vals else float("nan"), len(vals), skipped, per_pair)


# -- divergence ------------------------------------------------------------
def _one_minus_cos(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = a.reshape(len(a), -1)
    b = b.reshape(len(b), -1)
    num = (a * b).sum(-1)
    den = np.linalg.norm(a, axis=-1) * np.linalg.norm(b, axis=-1)
    cos = np.where(den > 0, num / np.where(den > 0, den, 1.0), 1.0)
    out = 1.0 - cos
    # exact zero when the states agree bit for bit
    out[np.all(a == b, axis=-1)] = 0.0
    return out


def layer_divergence(model: SteerModel, images: np.ndarray, prompts, omega: float) -> list[float]:
    """Per layer: batch mean of 1 - cos(steered patch state, base patch state)."""
    with T.no_grad():
        steered = model.forward(images, prompts, omega)
        base = vit_forward(model.backbone, model.vit_config, images)
    return [float(_one_minus_cos(s.data[:, 1:], b.data[:, 1:]).mean()) for s, b in zip(steered.states, base.states)]


def cls_divergence(model: SteerModel, images: np.ndarray, prompts, omega: float) -> float:
    """Batch mean of 1 - cos between steered and base global features."""
    with T.no_grad():
        steered = model.forward(images, prompts, omega)
        base = model.forward(images, prompts, 0.0)
    return float(_one_minus_cos(steered.global_feature.data, base.global_feature.data).mean())


# -- linear probe ----------------------------------------------------------
def linear_probe(train_x: np.ndarray, train_y: np.ndarray, test_x: np.ndarray, test_y: np.ndarray,
                 epochs: int = 300, lr: float = 1e-3, batch_size: int = 128, seed: int = 0) -> float:
    """Multinomial logistic regression on frozen features; returns test accuracy."""
    classes = np.unique(train_y)
    if len(classes) < 2:
        raise ContractError("linear_probe: need at least two classes in the training split")
    num_classes = int(max(train_y.max(), test_y.max())) + 1
    mu = train_x.mean(axis=0)
    sd = train_x.std(axis=0) + 1e-6
    xtr = (train_x - mu) / sd
    xte = (test_x - mu) / sd
    w = T.parameter(np.zeros((xtr.shape[1], num_classes)))
    b = T.parameter(np.zeros(num_classes))
    opt = AdamW([w, b], weight_decay=0.0)
    rng = derive_rng(seed, "probe")
    n = len(xtr)
    for _ in range(epochs):
        order = rng.permutation(n)
        for s in range(0, n, batch_size):
            idx = order[s : s + batch_size]
            opt.zero_grad()
            lp = T.log_softmax(T.matmul(Tensor(xtr[idx]), w) + b, axis=-1)
            loss = -T.mean(lp[(np.arange(len(idx)), train_y[idx])])
            loss.backward()
            opt.step(lr)
    pred = (xte @ w.data + b.data).argmax(axis=-1)
    return float((pred == test_y).mean())


# -- referential IoU -------------------------------------------------------
def patch_iou(pred: np.ndarray, truth: np.ndarray) -> float:
    pred = np.asarray(pred, dtype=bool).ravel()
    truth = np.asarray(truth, dtype=bool).ravel()
    union = int((pred | truth).sum())
    if union == 0:
        return 1.0
    return int((pred & truth).sum()) / union


def referential_iou(model: SteerModel, items: list, omega: float = 1.0, tau: float = IOU_TAU,
                    batch: int = 32) -> float:
    """Mean patch IoU with the prediction ``p_i >= tau / N``."""
    grid = model.vit_config.grid
    n = grid * grid
    ious = []
    with T.no_grad():
        for s in range(0, len(items), batch):
            chunk = items[s : s + batch]
            tr = model.forward(np.stack([it.image for it in chunk]), [it.words for it in chunk], omega)
            p = seg_head_forward(model.params["seg.w"], model.params["seg.b"], tr.patches).data
            for it, pi in zip(chunk, p):
                ious.append(patch_iou(pi >= tau / n, patch_labels(it.mask, grid)))
    return float(np.mean(ious))


def heldout_loss(model: SteerModel, items: list, objective: str = "segment", omega: float = 1.0,
                 batch: int = 32) -> float:
    from .objective import batch_loss

    total = 0.0
    with T.no_grad():
        for s in range(0, len(items), batch):
            chunk = items[s : s + batch]
            total += batch_loss(model, chunk, objective, omega).item() * len(chunk)
    return total / len(items)


# -- omega sweep -----------------------------------------------------------
OMEGA_GRID = (0.0, 0.2, 0.4, 0.6, 0.8, 1.0)


@dataclass
class ProbeData:
    train_images: np.ndarray
    train_prompts: list
    train_labels: np.ndarray
    test_images: np.ndarray
    test_prompts: list
    test_labels: np.ndarray


def probe_accuracy(model: SteerModel, probe: ProbeData, omega: float, epochs: int = 300, seed: int = 0) -> float:
    tr = global_features(model, probe.train_images, probe.train_prompts, omega)
    te = global_features(model, probe.test_images, probe.test_prompts, omega)
    return linear_probe(tr, probe.train_labels, te, probe.test_labels, epochs=epochs, seed=seed)


def omega_sweep(model: SteerModel, core_set: CoreSet, probe: ProbeData, grid=OMEGA_GRID,
                probe_epochs: int = 300, seed: int = 0) -> list[dict]:
    """Steerability (CORE acc@1) and quality (probe accuracy) per gate scale."""
    rows = []
    for omega in grid:
        steer = core_acc1(model, core_set, "correct", omega, seed)
        quality = probe_accuracy(model, probe, omega, probe_epochs, seed)
        rows.append({"omega": float(omega), "steerability": steer, "quality": quality})
        log.info("omega %.1f steerability %.3f quality %.3f", omega, steer, quality)
    return rows
