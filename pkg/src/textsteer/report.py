"""Report emission: JSON metrics, CSV curves, PGM/PPM heatmap overlays."""
from __future__ import annotations

import csv
import json
import math
import os

import numpy as np

from .imageio import write_pgm, write_ppm
from .tensor import ContractError


def artifact_name(run_id: str, config_hash: str, stem: str, ext: str) -> str:
    return f"{run_id}-{config_hash}-{stem}.{ext}"


def colorize(heat: np.ndarray) -> np.ndarray:
    """Black -> red -> yellow -> white ramp for values in [0, 1]."""
    h = np.clip(np.asarray(heat, dtype=np.float64), 0.0, 1.0)
    r = np.clip(3 * h, 0, 1)
    g = np.clip(3 * h - 1, 0, 1)
    b = np.clip(3 * h - 2, 0, 1)
    return np.stack([r, g, b], axis=-1)


def overlay(image: np.ndarray, heat: np.ndarray) -> np.ndarray:
    return 0.5 * np.asarray(image, dtype=np.float64) + 0.5 * colorize(heat)


def emit_heatmap(image: np.ndarray, heat: np.ndarray, path: str) -> tuple[str, str]:
    """Write ``<path>.pgm`` (heatmap) and ``<path>.ppm`` (overlay blend)."""
    heat = np.asarray(heat, dtype=np.float64)
    if heat.size and (heat.min() < 0.0 or heat.max() > 1.0):
        raise ContractError("heatmap values must lie in [0, 1]")
    if heat.shape != np.asarray(image).shape[:2]:
        raise ContractError(f"heatmap {heat.shape} does not match image {np.asarray(image).shape[:2]}")
    base = os.path.splitext(path)[0]
    write_pgm(base + ".pgm", heat)
    write_ppm(base + ".ppm", overlay(image, heat))
    return base + ".pgm", base + ".ppm"


def _clean(v):
    if isinstance(v, dict):
        return {str(k): _clean(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_clean(x) for x in v]
    if isinstance(v, np.generic):
        v = v.item()
    if isinstance(v, np.ndarray):
        return _clean(v.tolist())
    if isinstance(v, float) and not math.isfinite(v):
        return None
    return v


def emit_report(report: dict, path: str) -> str:
    """Write a metrics report as sorted, indented JSON."""
    text = json.dumps(_clean(report), sort_keys=True, indent=2) + "\n"
    try:
        with open(path, "w") as f:
            f.write(text)
    except OSError as e:
        raise OSError(f"cannot write report to {path}: {e.strerror}") from e
    return path


def write_csv(path: str, header: list, rows) -> str:
    try:
        with open(path, "w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(header)
            for row in rows:
                w.writerow([_fmt(x) for x in row])
    except OSError as e:
        raise OSError(f"cannot write csv to {path}: {e.strerror}") from e
    return path


def _fmt(x):
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    return x
