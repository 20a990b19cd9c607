"""Command line: pretrain, train, eval, ablate."""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys

from . import checkpoint
from . import pipeline as P
from .config import ConfigError, RunConfig, load_config
from .report import artifact_name, emit_report, write_csv

def _config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = str(args.seed)
    if args.out is not None:
        overrides["out_dir"] = args.out
    for item in args.set or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        overrides[k.strip()] = v.strip()
    if overrides:
        cfg = RunConfig.from_flat({**cfg.to_flat(), **overrides})
    return cfg


def _backbone(args, cfg):
    path = getattr(args, "backbone", None)
    if path:
        return P.load_backbone(path)[0], path
    return P.obtain_backbone(cfg, args.cache)


def cmd_pretrain(args) -> dict:
    cfg = _config(args)
    out = cfg.out_dir
    os.makedirs(out, exist_ok=True)
    result = P.pretrain(cfg)
    path = os.path.join(out, artifact_name("pretrain", cfg.backbone_digest(), "backbone", "ckpt"))
    bb_hash = P.save_backbone(path, result.params, cfg, heldout_accuracy=result.heldout_accuracy,
                              steps=result.steps)
    write_csv(os.path.join(out, artifact_name("pretrain", cfg.digest(), "loss", "csv")), ["step", "loss"],
              enumerate(result.losses, 1))
    rep = {"config": cfg.to_flat(), "config_hash": cfg.digest(), "backbone_hash": bb_hash,
           "heldout_accuracy": result.heldout_accuracy, "steps": result.steps, "checkpoint": path}
    emit_report(rep, os.path.join(out, artifact_name("pretrain", cfg.digest(), "report", "json")))
    return rep


def cmd_train(args) -> dict:
    cfg = _config(args)
    out = cfg.out_dir
    os.makedirs(out, exist_ok=True)
    backbone, _ = _backbone(args, cfg)
    model, result = P.train(cfg, backbone)
    digest = cfg.digest()
    ckpt = os.path.join(out, artifact_name("train", digest, "steer", "ckpt"))
    file_hash = P.save_steer(ckpt, model, cfg)
    write_csv(os.path.join(out, artifact_name("train", digest, "loss", "csv")), ["step", "lr", "loss"],
              [(i + 1, lr, loss) for i, (lr, loss) in enumerate(zip(result.lrs, result.losses))])
    if not args.no_figures:
        from .plotting import plot_loss

        plot_loss(os.path.join(out, artifact_name("train", digest, "loss", "png")), result.losses)
    rep = {"config": cfg.to_flat(), "config_hash": digest, "backbone_hash": result.backbone_hash,
           "text_hash": result.text_hash, "checkpoint_sha256": file_hash, "steps": result.steps,
           "loss_first": result.losses[0], "loss_last": result.losses[-1]}
    emit_report(rep, os.path.join(out, artifact_name("train", digest, "report", "json")))
    rep["checkpoint"] = ckpt
    return rep


def cmd_eval(args) -> dict:
    if not args.checkpoint:
        raise ConfigError("eval needs --checkpoint <steer checkpoint>")
    _, header = checkpoint.load(args.checkpoint)
    if header.get("kind") != "steer":
        raise checkpoint.CheckpointError(f"{args.checkpoint} is not a steer checkpoint")
    cfg = RunConfig.from_flat(header["config"])
    if args.out is not None:
        cfg = cfg.replace(out_dir=args.out)
    backbone, _ = _backbone(args, cfg)
    model, _ = P.load_steer(args.checkpoint, backbone)
    omega = cfg.steer.gate_scale if args.omega is None else args.omega
    suites = P.EVAL_SUITES if args.which == "all" else (args.which,)
    data = P.EvalData(cfg)
    reports = {}
    for which in suites:
        rep = P.evaluate(model, cfg, which, omega, cfg.out_dir, data, figures=not args.no_figures)
        reports[which] = rep["metrics"]
    return {"config_hash": cfg.digest(), "omega": omega, "metrics": reports}


def cmd_ablate(args) -> dict:
    cfg = _config(args)
    backbone, _ = _backbone(args, cfg)
    rows = P.run_ablation(cfg, backbone, cfg.out_dir)
    return {"config_hash": cfg.digest(), "rows": rows}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="textsteer", description="Text-conditioned steering of a small ViT.")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, checkpoint_help=None):
        p.add_argument("--config", help="flat key = value config file")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", help="output directory")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
        p.add_argument("--cache", help="backbone cache directory")
        p.add_argument("--no-figures", action="store_true", help="skip matplotlib figures")
        if checkpoint_help:
            p.add_argument("--checkpoint", help=checkpoint_help)

    common(sub.add_parser("pretrain", help="pretrain and freeze the backbone"))
    p = sub.add_parser("train", help="train the steering pathway")
    common(p)
    p.add_argument("--checkpoint", "--backbone", dest="backbone",
                   help="backbone checkpoint (default: cache, pretraining on a miss)")
    p = sub.add_parser("eval", help="evaluate a steer checkpoint")
    common(p, "steer checkpoint")
    p.add_argument("--backbone", help="backbone checkpoint")
    p.add_argument("--omega", type=float, help="gate scale in [0, 1]")
    p.add_argument("--which", default="all", choices=P.EVAL_SUITES + ("all",))
    p = sub.add_parser("ablate", help="train and evaluate the ablation grid")
    common(p)
    p.add_argument("--checkpoint", "--backbone", dest="backbone", help="backbone checkpoint")
    return ap


COMMANDS = {"pretrain": cmd_pretrain, "train": cmd_train, "eval": cmd_eval, "ablate": cmd_ablate}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        result = COMMANDS[args.command](args)
    except (ConfigError, checkpoint.CheckpointError) as e:
        print(f"error: {type(e).__name__}: {e}".replace("\n", " "), file=sys.stderr)
        return 2
    except Exception as e:  # noqa: BLE001 - any failure becomes one parsable line
        print(f"error: {type(e).__name__}: {e}".replace("\n", " "), file=sys.stderr)
        return 1
    print(json.dumps(result, sort_keys=True, default=str))
    return 0


if __name__ == "__main__":
    sys.exit(main())
