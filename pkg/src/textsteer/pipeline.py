"""End-to-end runs: backbone caching, steer checkpoints, evaluation suites, ablations."""
from __future__ import annotations

import itertools
import logging
import os
from dataclasses import dataclass

import numpy as np

from . import checkpoint
from . import data as D
from . import evaluation as E
from .checkpoint import CheckpointError
from .conditioning import SteerModel, gate_report
from .config import RunConfig
from .objective import TrainResult, predict_heatmap, seg_head_forward, train_steer
from .params import ParamSet, content_hash
from .report import artifact_name, emit_heatmap, emit_report, write_csv
from .vit import pretrain_backbone

log = logging.getLogger(__name__)

EVAL_SUITES = ("core", "mosaic", "divergence", "probe", "iou", "omega-sweep")


# -- backbone --------------------------------------------------------------
def default_cache_dir() -> str:
    return os.environ.get("TEXTSTEER_CACHE", os.path.join(os.path.expanduser("~"), ".cache", "textsteer"))


def pretrain(cfg: RunConfig):
    heldout = D.classification_set(cfg.seed + 1, cfg.pretrain_heldout)
    return pretrain_backbone(cfg.vit, D.classification_batch, cfg.pretrain_steps, cfg.seed,
                             batch_size=cfg.pretrain_batch, lr=cfg.pretrain_lr, heldout=heldout,
                             target_accuracy=cfg.pretrain_target)


def save_backbone(path: str, params: ParamSet, cfg: RunConfig, **meta) -> str:
    header = {"kind": "backbone", "vit": cfg.to_flat(), "backbone_hash": content_hash(params), **meta}
    checkpoint.save(path, params.arrays(), header)
    return header["backbone_hash"]


def load_backbone(path: str) -> tuple[ParamSet, dict]:
    arrays, header = checkpoint.load(path)
    if header.get("kind") != "backbone":
        raise CheckpointError(f"{path} is not a backbone checkpoint")
    params = ParamSet()
    for k, v in arrays.items():
        params.add(k, v, trainable=False)
    if content_hash(params) != header["backbone_hash"]:
        raise CheckpointError(f"{path}: backbone hash does not match its header")
    return params, header


def obtain_backbone(cfg: RunConfig, cache_dir: str | None = None) -> tuple[ParamSet, str]:
    """Load the pretrained backbone for ``cfg`` from the cache, pretraining on a miss."""
    cache_dir = cache_dir or default_cache_dir()
    path = os.path.join(cache_dir, f"backbone-{cfg.backbone_digest()}.ckpt")
    if os.path.exists(path):
        params, _ = load_backbone(path)
        return params, path
    os.makedirs(cache_dir, exist_ok=True)
    result = pretrain(cfg)
    tmp = path + f".tmp{os.getpid()}"
    save_backbone(tmp, result.params, cfg, heldout_accuracy=result.heldout_accuracy, steps=result.steps)
    os.replace(tmp, path)
    return result.params, path


# -- steer model -----------------------------------------------------------
def build_model(cfg: RunConfig, backbone: ParamSet) -> SteerModel:
    return SteerModel.create(cfg.vit, backbone, cfg.steer, cfg.seed)


def train(cfg: RunConfig, backbone: ParamSet) -> tuple[SteerModel, TrainResult]:
    model = build_model(cfg, backbone)
    stream = D.referential_stream(cfg.seed, cfg.detail_level)
    result = train_steer(model, stream, cfg.objective, cfg.train_steps, cfg.batch_size, cfg.schedule,
                         cfg.log_every, cfg.weight_decay)
    return model, result


def save_steer(path: str, model: SteerModel, cfg: RunConfig) -> str:
    header = {
        "kind": "steer",
        "config": cfg.to_flat(),
        "backbone_hash": content_hash(model.backbone),
        "text_hash": model.text_hash(),
        "steer_hash": content_hash(model.params),
    }
    return checkpoint.save(path, model.params.arrays(), header)


def load_steer(path: str, backbone: ParamSet) -> tuple[SteerModel, RunConfig]:
    arrays, header = checkpoint.load(path)
    if header.get("kind") != "steer":
        raise CheckpointError(f"{path} is not a steer checkpoint")
    have = content_hash(backbone)
    if header["backbone_hash"] != have:
        raise CheckpointError(f"backbone hash mismatch: checkpoint {header['backbone_hash'][:12]} vs {have[:12]}")
    cfg = RunConfig.from_flat(header["config"])
    model = build_model(cfg, backbone)
    if list(model.params) != list(arrays):
        raise CheckpointError(f"{path}: parameter names do not match the configuration")
    for k, v in arrays.items():
        if model.params[k].shape != v.shape:
            raise CheckpointError(f"{path}: {k} has shape {v.shape}, expected {model.params[k].shape}")
        model.params[k].data = v
    if model.text_hash() != header["text_hash"]:
        raise CheckpointError(f"{path}: text table hash mismatch")
    return model, cfg


# -- evaluation ------------------------------------------------------------
@dataclass
class EvalData:
    """Lazily built evaluation sets, all pure functions of the config."""

    cfg: RunConfig

    def core(self):
        if not hasattr(self, "_core"):
            c = self.cfg
            self._core = D.make_core_set(c.data_seed, c.core_scenes, c.core_bases, c.core_objects)
        return self._core

    def mosaics(self):
        if not hasattr(self, "_mosaics"):
            self._mosaics = D.make_mosaic_set(self.cfg.data_seed, self.cfg.mosaic_count)
        return self._mosaics

    def items(self, level: str | None = None):
        level = level or self.cfg.detail_level
        key = "_items_" + level
        if not hasattr(self, key):
            stream = D.referential_stream(self.cfg.data_seed, level)
            setattr(self, key, list(itertools.islice(stream, self.cfg.eval_items)))
        return getattr(self, key)

    def probe(self) -> E.ProbeData:
        if not hasattr(self, "_probe"):
            c = self.cfg
            tri, trp, trl = D.probe_set(c.data_seed, c.probe_train)
            tei, tep, tel = D.probe_set(c.data_seed + 1, c.probe_test)
            self._probe = E.ProbeData(tri, trp, trl, tei, tep, tel)
        return self._probe


def _base_report(model: SteerModel, cfg: RunConfig, which: str, omega: float) -> dict:
    return {
        "suite": which,
        "omega": omega,
        "config": cfg.to_flat(),
        "config_hash": cfg.digest(),
        "backbone_hash": content_hash(model.backbone),
        "text_hash": model.text_hash(),
        "steer_hash": content_hash(model.params),
        "gates": [{"layer": str(l), "alpha": a, "tanh_alpha": t} for l, a, t in gate_report(model.params)],
        "metrics": {},
    }


def evaluate(model: SteerModel, cfg: RunConfig, which: str, omega: float = 1.0, out_dir: str | None = None,
             data: EvalData | None = None, run_id: str = "eval", heatmaps: int = 4, figures: bool = True) -> dict:
    """Run one evaluation suite; optionally write the report, curves and images to ``out_dir``."""
    if which not in EVAL_SUITES:
        raise ValueError(f"unknown evaluation {which!r}; choose from {', '.join(EVAL_SUITES)}")
    data = data or EvalData(cfg)
    rep = _base_report(model, cfg, which, omega)
    m = rep["metrics"]

    def name(stem, ext):
        return artifact_name(f"{run_id}-{which}", cfg.digest(), stem, ext)

    if out_dir:
        os.makedirs(out_dir, exist_ok=True)

    if which == "core":
        core = data.core()
        feats = E.core_features(model, core, omega)
        base = feats if omega == 0.0 else E.core_features(model, core, 0.0)
        m["acc1_correct"] = E.core_acc1_from_features(core, feats, "correct", cfg.seed)
        m["acc1_random_wrong"] = E.core_acc1_from_features(core, feats, "random_wrong", cfg.seed)
        m["acc1_unconditioned"] = E.core_acc1_from_features(core, base, "correct", cfg.seed)
        m["wrong_prompt_delta"] = m["acc1_correct"] - m["acc1_random_wrong"]
        m["chance"] = 1.0 / core.K
    elif which == "mosaic":
        mos = data.mosaics()
        res = E.mosaic_pr_auc(model, mos, omega, cfg.head_reduce)
        res0 = E.mosaic_pr_auc(model, mos, 0.0, cfg.head_reduce)
        m.update(pr_auc=res.pr_auc, pr_auc_unconditioned=res0.pr_auc, pr_auc_gain=res.pr_auc - res0.pr_auc,
                 pairs=res.pairs, skipped=res.skipped)
        if out_dir:
            _emit_attention_maps(model, mos[:heatmaps], omega, cfg, out_dir, name, figures)
    elif which == "divergence":
        items = data.items()[:64]
        images = np.stack([it.image for it in items])
        prompts = [it.words for it in items]
        profile = E.layer_divergence(model, images, prompts, omega)
        m["layer_divergence"] = profile
        m["cls_divergence"] = E.cls_divergence(model, images, prompts, omega)
        if out_dir:
            write_csv(os.path.join(out_dir, name("divergence", "csv")), ["layer", "divergence"], enumerate(profile))
            if figures:
                from .plotting import plot_divergence

                plot_divergence(os.path.join(out_dir, name("divergence", "png")), profile)
    elif which == "probe":
        m["probe_accuracy"] = E.probe_accuracy(model, data.probe(), omega, cfg.probe_epochs, cfg.seed)
    elif which == "iou":
        for level in ("category", "attributed", "full"):
            m[f"iou_{level}"] = E.referential_iou(model, data.items(level), omega)
        m["iou"] = E.referential_iou(model, data.items(), omega)
        m["heldout_loss"] = E.heldout_loss(model, data.items(), cfg.objective, omega)
        if out_dir:
            _emit_seg_maps(model, data.items()[:heatmaps], omega, out_dir, name, figures)
    elif which == "omega-sweep":
        rows = E.omega_sweep(model, data.core(), data.probe(), probe_epochs=cfg.probe_epochs, seed=cfg.seed)
        rows = [dict(r, cls_divergence=_cls_div(model, data, r["omega"])) for r in rows]
        m["rows"] = rows
        if out_dir:
            write_csv(os.path.join(out_dir, name("omega-sweep", "csv")),
                      ["omega", "steerability", "quality", "cls_divergence"],
                      [(r["omega"], r["steerability"], r["quality"], r["cls_divergence"]) for r in rows])
            if figures:
                from .plotting import plot_omega_sweep

                plot_omega_sweep(os.path.join(out_dir, name("omega-sweep", "png")), rows)
    if out_dir:
        emit_report(rep, os.path.join(out_dir, name("report", "json")))
    return rep


def _cls_div(model, data, omega):
    items = data.items()[:64]
    return E.cls_divergence(model, np.stack([it.image for it in items]), [it.words for it in items], omega)


def _emit_attention_maps(model, mosaics, omega, cfg, out_dir, name, figures):
    from . import tensor as T

    for i, m in enumerate(mosaics):
        c = m.classes()[0]
        maps = {}
        with T.no_grad():
            for w in (0.0, omega):
                att = model.forward(m.image[None], [[c]], w).cls_attention(cfg.head_reduce)[0]
                heat = predict_heatmap(att, m.image.shape[:2])
                emit_heatmap(m.image, heat, os.path.join(out_dir, name(f"attn{i}-{c}-w{w:.1f}", "ppm")))
                maps[f"{c} omega={w:.1f}"] = heat
        if figures:
            from .plotting import plot_heatmaps

            plot_heatmaps(os.path.join(out_dir, name(f"attn{i}", "png")), m.image, maps)


def _emit_seg_maps(model, items, omega, out_dir, name, figures):
    from . import tensor as T

    with T.no_grad():
        tr = model.forward(np.stack([it.image for it in items]), [it.words for it in items], omega)
        p = seg_head_forward(model.params["seg.w"], model.params["seg.b"], tr.patches).data
    for i, (it, pi) in enumerate(zip(items, p)):
        heat = predict_heatmap(pi, it.image.shape[:2])
        emit_heatmap(it.image, heat, os.path.join(out_dir, name(f"seg{i}", "ppm")))
        if figures:
            from .plotting import plot_heatmaps

            plot_heatmaps(os.path.join(out_dir, name(f"seg{i}", "png")), it.image,
                          {" ".join(it.words): heat, "truth": it.mask.astype(float)})


# -- ablation grid ---------------------------------------------------------
ABLATIONS = (
    ("baseline", {}),
    ("late-fusion", {"steer.fusion_mode": "late"}),
    ("no-tanh-gate", {"steer.use_tanh_gate": False}),
    ("linear-projector", {"steer.projector": "linear"}),
    ("point-objective", {"objective": "point"}),
    ("ffn", {"steer.use_ffn": True}),
)


def ablation_grid(cfg: RunConfig) -> list[tuple[str, RunConfig]]:
    return [(name, cfg.replace(**changes)) for name, changes in ABLATIONS]


def toggled_flags(cfg: RunConfig, base: RunConfig) -> list[str]:
    a, b = cfg.to_flat(), base.to_flat()
    return sorted(k for k in a if a[k] != b[k])


ABLATION_COLUMNS = ("probe_accuracy", "acc1_correct", "acc1_random_wrong", "iou_category", "iou_attributed",
                    "iou_full")


def run_ablation(cfg: RunConfig, backbone: ParamSet, out_dir: str | None = None,
                 suites=("probe", "core", "iou")) -> list[dict]:
    """Train and evaluate every grid row on a shared backbone and shared data seeds.

    Rows finished before a failure are kept on disk; the failure propagates.
    """
    rows = []
    data = EvalData(cfg)
    for name, row_cfg in ablation_grid(cfg):
        model, result = train(row_cfg, backbone)
        if name == "late-fusion" and any(isinstance(l, int) for l in model.ca_layers):
            raise RuntimeError("late-fusion row registered in-block hooks")
        row = {"name": name, "toggled": toggled_flags(row_cfg, cfg), "config_hash": row_cfg.digest(),
               "final_loss": float(np.mean(result.losses[-max(1, len(result.losses) // 20):]))}
        for suite in suites:
            row.update(evaluate(model, row_cfg, suite, data=data)["metrics"])
        rows.append(row)
        if out_dir:
            os.makedirs(out_dir, exist_ok=True)
            save_steer(os.path.join(out_dir, artifact_name("ablate", row_cfg.digest(), name, "ckpt")), model, row_cfg)
            _write_ablation(out_dir, cfg, rows)
    return rows


def _write_ablation(out_dir: str, cfg: RunConfig, rows: list[dict]) -> None:
    cols = ["name", "toggled", "final_loss"] + [c for c in ABLATION_COLUMNS if c in rows[0]]
    write_csv(os.path.join(out_dir, artifact_name("ablate", cfg.digest(), "table", "csv")), cols,
              [[r["name"], ";".join(r["toggled"]) or "-"] + [r.get(c) for c in cols[2:]] for r in rows])
    emit_report({"config": cfg.to_flat(), "config_hash": cfg.digest(), "rows": rows},
                os.path.join(out_dir, artifact_name("ablate", cfg.digest(), "report", "json")))

