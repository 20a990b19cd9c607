"""Deterministic synthetic scenes: referential pairs, retrieval sets, mosaics.

Scenes are a textured background plus 1-5 flat-colored shapes placed on a
4x4 grid of 16-pixel cells.  Rendering has no anti-aliasing, so every mask
is exactly the set of pixels a placement painted.
"""
from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field
from typing import Iterator

import numpy as np

from .rng import derive_rng

IMAGE_SIZE = 64
CELL = 16
LAYOUT = IMAGE_SIZE // CELL  # 4x4 placement grid

SHAPES = ("circle", "square", "triangle", "cross", "ring", "star")
COLORS = {
    "red": (0.90, 0.10, 0.10),
    "green": (0.10, 0.75, 0.15),
    "blue": (0.15, 0.25, 0.95),
    "yellow": (0.95, 0.90, 0.10),
    "purple": (0.60, 0.15, 0.80),
    "orange": (1.00, 0.55, 0.05),
    "white": (0.97, 0.97, 0.97),
    "black": (0.05, 0.05, 0.05),
}
COLOR_NAMES = tuple(COLORS)
WARM = {"red", "orange", "yellow", "white"}
SIZES = ("small", "large")
BACKGROUNDS = ("stone", "grass", "water", "sand", "brick", "snow")
ROW_WORDS = ("top", "upper", "lower", "bottom")
COL_WORDS = ("left", "midleft", "midright", "right")
DETAIL_LEVELS = ("category", "attributed", "full")

RADIUS = {"small": 5.0, "large": 7.0, "dominant": 14.0}

_BG_BASE = {
    "stone": (0.50, 0.50, 0.50),
    "grass": (0.30, 0.50, 0.25),
    "water": (0.30, 0.45, 0.65),
    "sand": (0.80, 0.70, 0.50),
    "brick": (0.60, 0.30, 0.25),
    "snow": (0.85, 0.88, 0.92),
}

NUM_CLASSES = len(SHAPES) * 2


class GenerationError(RuntimeError):
    pass


@dataclass(frozen=True)
class Placement:
    shape: str
    color: str
    size: str
    row: int
    col: int
    dy: int = 0
    dx: int = 0

    def words(self, level: str, background: str | None = None, dominant: bool = False) -> list[str]:
        if level == "category":
            return [self.shape]
        base = [self.size, self.color, self.shape]
        if level == "attributed":
            return base
        out = base + ["at", ROW_WORDS[self.row], COL_WORDS[self.col]]
        if background is not None:
            out += ["on", background, "background"]
        return out


@dataclass(frozen=True)
class SceneSpec:
    seed: int
    background_id: int
    placements: tuple
    salient_index: int
    dominant: bool = False  # salient placement spans a 2x2 cell block

    @property
    def background(self) -> str:
        return BACKGROUNDS[self.background_id]

    def cells(self, i: int) -> list[tuple[int, int]]:
        p = self.placements[i]
        if self.dominant and i == self.salient_index:
            return [(p.row + a, p.col + b) for a in (0, 1) for b in (0, 1)]
        return [(p.row, p.col)]

    def to_json(self) -> dict:
        d = asdict(self)
        d["placements"] = [asdict(p) for p in self.placements]
        return d


@dataclass
class RenderedSample:
    spec: SceneSpec
    image: np.ndarray  # [64, 64, 3] in [0, 1]
    masks: np.ndarray  # [P, 64, 64] bool

    def prompt(self, i: int, level: str) -> list[str]:
        dom = self.spec.dominant and i == self.spec.salient_index
        return self.spec.placements[i].words(level, self.spec.background, dom)

    def referent_mask(self, words: list[str], level: str) -> np.ndarray:
        """Union of placements whose description at ``level`` equals ``words``."""
        out = np.zeros(self.masks.shape[1:], dtype=bool)
        for i in range(len(self.spec.placements)):
            if self.prompt(i, level) == list(words):
                out |= self.masks[i]
        return out


# -- rasterization ---------------------------------------------------------
def _shape_mask(shape: str, cy: float, cx: float, r: float, size: int = IMAGE_SIZE) -> np.ndarray:
    ys, xs = np.mgrid[0:size, 0:size]
    dy = ys + 0.5 - cy
    dx = xs + 0.5 - cx
    d = np.sqrt(dx * dx + dy * dy)
    if shape == "circle":
        return d <= r
    if shape == "square":
        return np.maximum(np.abs(dx), np.abs(dy)) <= 0.85 * r
    if shape == "triangle":
        # apex up; inside if below both slanted edges and above the base
        h = 0.9 * r
        top, base = -r, h
        frac = (dy - top) / (base - top)
        return (dy >= top) & (dy <= base) & (np.abs(dx) <= frac * r)
    if shape == "cross":
        w = r / 3.0
        return ((np.abs(dx) <= w) & (np.abs(dy) <= r)) | ((np.abs(dy) <= w) & (np.abs(dx) <= r))
    if shape == "ring":
        return (d <= r) & (d >= 0.55 * r)
    if shape == "star":
        theta = np.arctan2(dy, dx)
        rad = r * (0.45 + 0.55 * ((np.cos(5 * theta + np.pi / 2) + 1) / 2) ** 2)
        return d <= rad
    raise ValueError(f"unknown shape {shape!r}")


def _background(background_id: int, seed: int) -> np.ndarray:
    rng = derive_rng(seed, "background", background_id)
    base = np.array(_BG_BASE[BACKGROUNDS[background_id]])
    ys, xs = np.mgrid[0:IMAGE_SIZE, 0:IMAGE_SIZE].astype(np.float64)
    phase = rng.uniform(0, 2 * np.pi)
    name = BACKGROUNDS[background_id]
    if name == "stone":
        tex = rng.normal(0, 1, (IMAGE_SIZE, IMAGE_SIZE)) * 0.5
    elif name == "grass":
        tex = np.sin(xs * 1.3 + phase) + 0.3 * rng.normal(0, 1, xs.shape)
    elif name == "water":
        tex = np.sin(ys * 0.6 + np.sin(xs * 0.2) + phase)
    elif name == "sand":
        tex = ((xs.astype(int) + ys.astype(int) * 3) % 5 == 0) * 1.5 - 0.3
    elif name == "brick":
        row = (ys // 6).astype(int)
        tex = ((ys % 6 < 1) | (((xs + 6 * (row % 2)) % 12) < 1)) * -2.0 + 0.3
    else:
        tex = (rng.random((IMAGE_SIZE, IMAGE_SIZE)) < 0.08) * 1.5 - 0.1
    img = base[None, None, :] + 0.05 * tex[:, :, None]
    return np.clip(img, 0.0, 1.0)


def placement_geometry(spec: SceneSpec, i: int) -> tuple[float, float, float]:
    p = spec.placements[i]
    if spec.dominant and i == spec.salient_index:
        return (p.row + 1) * CELL + p.dy, (p.col + 1) * CELL + p.dx, RADIUS["dominant"]
    return p.row * CELL + CELL / 2 + p.dy, p.col * CELL + CELL / 2 + p.dx, RADIUS[p.size]


def render_scene(spec: SceneSpec) -> RenderedSample:
    cells: set = set()
    for i in range(len(spec.placements)):
        for c in spec.cells(i):
            if c in cells or not (0 <= c[0] < LAYOUT and 0 <= c[1] < LAYOUT):
                raise GenerationError(f"placement {i} overlaps or leaves the layout grid")
            cells.add(c)
    image = _background(spec.background_id, spec.seed)
    masks = np.zeros((len(spec.placements), IMAGE_SIZE, IMAGE_SIZE), dtype=bool)
    for i, p in enumerate(spec.placements):
        cy, cx, r = placement_geometry(spec, i)
        m = _shape_mask(p.shape, cy, cx, r)
        if m.sum() < 16:
            raise GenerationError(f"placement {i} renders only {int(m.sum())} pixels")
        masks[i] = m
        image[m] = COLORS[p.color]
    return RenderedSample(spec=spec, image=image, masks=masks)


# -- scene sampling --------------------------------------------------------
def _jitter(rng, size: str) -> tuple[int, int]:
    if size == "small":
        return int(rng.integers(-2, 3)), int(rng.integers(-2, 3))
    return 0, 0


def random_scene(
    rng: np.random.Generator,
    seed: int,
    n_objects: tuple[int, int] = (1, 5),
    dominant_prob: float = 0.5,
    background_id: int | None = None,
    exclude_types: set | None = None,
) -> SceneSpec:
    """Sample a valid scene with unambiguous attributed descriptions."""
    for _ in range(32):
        n = int(rng.integers(n_objects[0], n_objects[1] + 1))
        dominant = bool(rng.random() < dominant_prob)
        free = {(r, c) for r in range(LAYOUT) for c in range(LAYOUT)}
        placements = []
        seen = set()
        if dominant:
            r0, c0 = int(rng.integers(0, LAYOUT - 1)), int(rng.integers(0, LAYOUT - 1))
            block = {(r0 + a, c0 + b) for a in (0, 1) for b in (0, 1)}
            free -= block
            shape, color = _pick_type(rng, exclude_types)
            placements.append(Placement(shape, color, "large", r0, c0, *(int(v) for v in rng.integers(-1, 2, 2))))
            seen.add(("large", color, shape))
        ok = True
        while len(placements) < n:
            if not free:
                ok = False
                break
            cell = sorted(free)[int(rng.integers(len(free)))]
            free.discard(cell)
            size = SIZES[int(rng.integers(2))]
            shape, color = _pick_type(rng, exclude_types)
            if (size, color, shape) in seen:
                continue
            seen.add((size, color, shape))
            placements.append(Placement(shape, color, size, cell[0], cell[1], *_jitter(rng, size)))
        if not ok:
            continue
        bg = int(rng.integers(len(BACKGROUNDS))) if background_id is None else background_id
        if dominant:
            salient = 0
        else:
            larges = [i for i, p in enumerate(placements) if p.size == "large"]
            salient = larges[0] if larges else 0
        return SceneSpec(seed=seed, background_id=bg, placements=tuple(placements), salient_index=salient, dominant=dominant)
    raise GenerationError("could not place scene after 32 attempts")


def _pick_type(rng, exclude: set | None) -> tuple[str, str]:
    while True:
        shape = SHAPES[int(rng.integers(len(SHAPES)))]
        color = COLOR_NAMES[int(rng.integers(len(COLOR_NAMES)))]
        if not exclude or (color, shape) not in exclude:
            return shape, color


def scene_label(spec: SceneSpec) -> int:
    """Backbone pretraining class: salient shape x warm/cool salient color."""
    p = spec.placements[spec.salient_index]
    return SHAPES.index(p.shape) * 2 + (0 if p.color in WARM else 1)


def classification_batch(rng: np.random.Generator, batch: int) -> tuple[np.ndarray, np.ndarray]:
    images = np.empty((batch, IMAGE_SIZE, IMAGE_SIZE, 3))
    labels = np.empty(batch, dtype=np.int64)
    for b in range(batch):
        spec = random_scene(rng, int(rng.integers(2**31)), n_objects=(1, 4), dominant_prob=1.0)
        images[b] = render_scene(spec).image
        labels[b] = scene_label(spec)
    return images, labels


def classification_set(seed: int, count: int) -> tuple[np.ndarray, np.ndarray]:
    return classification_batch(derive_rng(seed, "classification-set"), count)


# -- referential stream ----------------------------------------------------
@dataclass
class ReferentialItem:
    image: np.ndarray
    words: list
    mask: np.ndarray
    level: str
    sample: RenderedSample
    referent: int


def referential_item(rng: np.random.Generator, detail_level: str = "mixed") -> ReferentialItem:
    spec = random_scene(rng, int(rng.integers(2**31)))
    sample = render_scene(spec)
    i = int(rng.integers(len(spec.placements)))
    level = DETAIL_LEVELS[int(rng.integers(3))] if detail_level == "mixed" else detail_level
    words = sample.prompt(i, level)
    return ReferentialItem(sample.image, words, sample.referent_mask(words, level), level, sample, i)


def referential_stream(seed: int, detail_level: str = "mixed") -> Iterator[ReferentialItem]:
    """Endless (image, prompt, mask) triples; the referent is uniform over placements."""
    rng = derive_rng(seed, "referential-stream", detail_level)
    while True:
        yield referential_item(rng, detail_level)


# -- conditional retrieval set ---------------------------------------------
@dataclass
class CoreItem:
    scene: int
    base_id: int
    object_type: int
    words: list
    image: np.ndarray
    bbox: tuple  # (y0, x0, y1, x1) of the added object, inclusive-exclusive
    object_mask: np.ndarray


@dataclass
class CoreSet:
    items: list
    pools: list  # per scene: list of (color, shape)
    S: int
    B: int
    K: int

    def __len__(self) -> int:
        return len(self.items)

    def prompt(self, scene: int, object_type: int) -> list:
        color, shape = self.pools[scene][object_type]
        return ["small", color, shape]


def make_core_set(seed: int, S: int = 4, B: int = 25, K: int = 5) -> CoreSet:
    """Scenes share a background; each base image gets K single-object edits."""
    if S > len(BACKGROUNDS):
        raise ValueError(f"at most {len(BACKGROUNDS)} scenes")
    rng = derive_rng(seed, "core-set")
    all_types = [(c, s) for s in SHAPES for c in COLOR_NAMES]
    order = rng.permutation(len(all_types))
    pools = [[all_types[j] for j in order[s * K : (s + 1) * K]] for s in range(S)]
    items = []
    for s in range(S):
        pool = set(pools[s])
        for b in range(B):
            brng = derive_rng(seed, "core-base", s, b)
            for _ in range(32):
                base = random_scene(brng, int(brng.integers(2**31)), n_objects=(1, 3), dominant_prob=1.0,
                                    background_id=s, exclude_types=pool)
                used = {c for i in range(len(base.placements)) for c in base.cells(i)}
                free = sorted({(r, c) for r in range(LAYOUT) for c in range(LAYOUT)} - used)
                if free:
                    break
            else:
                raise GenerationError("no free cell for the edited object")
            cell = free[int(brng.integers(len(free)))]
            jit = _jitter(brng, "small")
            for k, (color, shape) in enumerate(pools[s]):
                added = Placement(shape, color, "small", cell[0], cell[1], *jit)
                spec = SceneSpec(base.seed, s, base.placements + (added,), base.salient_index, True)
                smp = render_scene(spec)
                cy, cx, r = placement_geometry(spec, len(spec.placements) - 1)
                bbox = (int(np.floor(cy - r)), int(np.floor(cx - r)), int(np.ceil(cy + r)), int(np.ceil(cx + r)))
                items.append(CoreItem(s, b, k, ["small", color, shape], smp.image, bbox, smp.masks[-1]))
    return CoreSet(items=items, pools=pools, S=S, B=B, K=K)


# -- mosaics ---------------------------------------------------------------
@dataclass
class MosaicSample:
    image: np.ndarray  # [128, 128, 3]
    tiles: list  # four RenderedSample, raster order
    class_masks: dict  # shape name -> [128, 128] bool
    dominant_tile: int

    def classes(self) -> list[str]:
        return [c for c in SHAPES if c in self.class_masks and self.class_masks[c].any()]


def make_mosaic_set(seed: int, count: int = 48) -> list[MosaicSample]:
    out = []
    for m in range(count):
        rng = derive_rng(seed, "mosaic", m)
        classes = rng.permutation(len(SHAPES))[:4]
        dom = int(rng.integers(4))
        tiles = []
        for t in range(4):
            shape = SHAPES[classes[t]]
            tiles.append(render_scene(_tile_scene(rng, shape, t == dom)))
        image = np.zeros((2 * IMAGE_SIZE, 2 * IMAGE_SIZE, 3))
        class_masks: dict = {}
        for t, smp in enumerate(tiles):
            oy, ox = (t // 2) * IMAGE_SIZE, (t % 2) * IMAGE_SIZE
            image[oy : oy + IMAGE_SIZE, ox : ox + IMAGE_SIZE] = smp.image
            for i, p in enumerate(smp.spec.placements):
                full = class_masks.setdefault(p.shape, np.zeros((2 * IMAGE_SIZE, 2 * IMAGE_SIZE), dtype=bool))
                full[oy : oy + IMAGE_SIZE, ox : ox + IMAGE_SIZE] |= smp.masks[i]
        out.append(MosaicSample(image=image, tiles=tiles, class_masks=class_masks, dominant_tile=dom))
    return out


def _tile_scene(rng, shape: str, dominant: bool) -> SceneSpec:
    """One tile: its referent ``shape`` plus at most one distractor."""
    bg = int(rng.integers(len(BACKGROUNDS)))
    seed = int(rng.integers(2**31))
    color = COLOR_NAMES[int(rng.integers(len(COLOR_NAMES)))]
    if dominant:
        r0, c0 = int(rng.integers(0, LAYOUT - 1)), int(rng.integers(0, LAYOUT - 1))
        return SceneSpec(seed, bg, (Placement(shape, color, "large", r0, c0),), 0, True)
    cells = rng.permutation(LAYOUT * LAYOUT)[:2]
    size = SIZES[int(rng.integers(2))]
    r, c = divmod(int(cells[0]), LAYOUT)
    places = [Placement(shape, color, size, r, c, *_jitter(rng, size))]
    if rng.random() < 0.5:
        other = SHAPES[int(rng.integers(len(SHAPES)))]
        ocolor = COLOR_NAMES[int(rng.integers(len(COLOR_NAMES)))]
        r, c = divmod(int(cells[1]), LAYOUT)
        if (other, ocolor) != (shape, color):
            places.append(Placement(other, ocolor, "small", r, c, *_jitter(rng, "small")))
    return SceneSpec(seed, bg, tuple(places), 0, False)


# -- dumping ---------------------------------------------------------------
def rle_encode(mask: np.ndarray) -> list[int]:
    """Run lengths of a flattened boolean mask, starting with a False run."""
    flat = np.asarray(mask, dtype=bool).ravel()
    change = np.flatnonzero(np.diff(flat.astype(np.int8))) + 1
    bounds = np.concatenate([[0], change, [flat.size]])
    runs = np.diff(bounds).tolist()
    if flat.size and flat[0]:
        runs = [0] + runs
    return runs


def rle_decode(runs: list[int], shape) -> np.ndarray:
    flat = np.zeros(int(np.prod(shape)), dtype=bool)
    pos, val = 0, False
    for n in runs:
        flat[pos : pos + n] = val
        pos += n
        val = not val
    return flat.reshape(shape)


def dump_samples(samples: list[RenderedSample], directory: str) -> None:
    from .imageio import write_ppm

    os.makedirs(directory, exist_ok=True)
    for j, smp in enumerate(samples):
        write_ppm(os.path.join(directory, f"{j:05d}.ppm"), smp.image)
        side = {
            "spec": smp.spec.to_json(),
            "prompts": {lvl: [smp.prompt(i, lvl) for i in range(len(smp.spec.placements))] for lvl in DETAIL_LEVELS},
            "masks": [rle_encode(m) for m in smp.masks],
        }
        with open(os.path.join(directory, f"{j:05d}.json"), "w") as f:
            json.dump(side, f, indent=1)


# -- probe task ------------------------------------------------------------
def probe_set(seed: int, count: int) -> tuple[np.ndarray, list, np.ndarray]:
    """Object-count classification (1-4 objects -> labels 0-3).

    Each image is paired with the category prompt of one of its objects,
    which is what the steered encoder is conditioned on.
    """
    rng = derive_rng(seed, "probe-set")
    images = np.empty((count, IMAGE_SIZE, IMAGE_SIZE, 3))
    prompts, labels = [], np.empty(count, dtype=np.int64)
    for j in range(count):
        spec = random_scene(rng, int(rng.integers(2**31)), n_objects=(1, 4))
        smp = render_scene(spec)
        images[j] = smp.image
        labels[j] = len(spec.placements) - 1
        prompts.append(smp.prompt(int(rng.integers(len(spec.placements))), "category"))
    return images, prompts, labels
