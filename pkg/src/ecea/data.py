"""Synthetic part-to-whole detection data.

Every class is a glyph of 3 to 5 axis-aligned parts (rectangles or discs)
laid out on a class-specific grid, each part with its own colour and stripe
texture. A sample renders some subset of the parts but its box always spans
the whole glyph, so a detector that sees only a few parts has to infer the
rest of the extent from what it has learned about the class layout.

Splits:

* base train: random part subsets, visibility (fraction of parts drawn) >= 0.4
* novel train: a fixed partial view per class (the first row of parts),
  visibility <= 0.5, exactly ``K`` images per class
* novel test: full glyphs; each also records where the training view's parts
  sit (``head_boxes``), the region a few-shot model has actually seen
* novel probe: random proper subsets of novel glyphs
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError

log = logging.getLogger(__name__)

SHOT_MENU = (1, 2, 3, 5, 10)
MODES = ("fsod", "gfsod")
TEMPLATE_SEED = 7919
BACKGROUND = 0.1
NOISE = 0.03
SIZE_RANGE = (0.4, 0.75)
MIN_BASE_VISIBILITY = 0.4


@dataclass(frozen=True)
class SplitSpec:
    base_classes: tuple[int, ...] = (0, 1, 2, 3, 4)
    novel_classes: tuple[int, ...] = (5, 6, 7)
    shots: int = 1
    mode: str = "fsod"
    base_per_class: int = 200
    test_per_class: int = 40
    probe_per_class: int = 40
    image_size: int = 64

    def __post_init__(self):
        object.__setattr__(self, "base_classes", tuple(int(c) for c in self.base_classes))
        object.__setattr__(self, "novel_classes", tuple(int(c) for c in self.novel_classes))
        problems = []
        if len(self.base_classes) < 2:
            problems.append("need at least 2 base classes")
        if len(self.novel_classes) < 1:
            problems.append("need at least 1 novel class")
        if set(self.base_classes) & set(self.novel_classes):
            problems.append(f"base and novel classes overlap: {sorted(set(self.base_classes) & set(self.novel_classes))}")
        if len(set(self.all_classes)) != len(self.all_classes):
            problems.append("duplicate class ids")
        if any(c < 0 for c in self.all_classes):
            problems.append("class ids must be non-negative")
        if self.shots < 1:
            problems.append(f"shots must be >= 1, got {self.shots}")
        elif self.shots not in SHOT_MENU:
            log.warning("shots=%d is outside the usual menu %s", self.shots, SHOT_MENU)
        if self.mode not in MODES:
            problems.append(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.image_size < 32 or self.image_size % 16:
            problems.append(f"image_size must be a multiple of 16 and >= 32, got {self.image_size}")
        for name in ("base_per_class", "test_per_class", "probe_per_class"):
            if getattr(self, name) < 1:
                problems.append(f"{name} must be >= 1")
        if self.mode == "gfsod" and self.shots > self.base_per_class:
            problems.append("gfsod needs base_per_class >= shots")
        if problems:
            raise ConfigError(problems)

    @property
    def all_classes(self) -> tuple[int, ...]:
        return self.base_classes + self.novel_classes

    @property
    def num_classes(self) -> int:
        return len(self.all_classes)

    def label_of(self, cls: int) -> int:
        """Classifier label for a class id; 0 is background."""
        return self.all_classes.index(cls) + 1


@dataclass(frozen=True)
class Part:
    box: tuple[float, float, float, float]   # unit coords inside the glyph
    disc: bool
    colour: tuple[float, float, float]
    texture: str                              # solid | hstripe | vstripe | checker


@dataclass(frozen=True)
class GlyphTemplate:
    cls: int
    parts: tuple[Part, ...]
    rows: tuple[tuple[int, ...], ...]         # part indices grouped by layout row

    @property
    def head(self) -> tuple[int, ...]:
        """The fixed partial view shown to novel training images."""
        return self.rows[0] if len(self.rows[0]) * 2 <= len(self.parts) else self.rows[0][:1]


@dataclass
class DetectionSample:
    image: np.ndarray            # (3, H, W) float64 in [0, 1]
    boxes: np.ndarray            # (n, 4) full-extent boxes
    classes: np.ndarray          # (n,) class ids
    visibility: np.ndarray       # (n,) fraction of parts rendered
    visible_boxes: np.ndarray    # (n, 4) bbox of the rendered parts
    masks: np.ndarray            # (n, H, W) rendered part mask
    split: str                   # base | novel
    head_boxes: np.ndarray | None = None  # (n, 4) where the fixed novel training view sits

    def __post_init__(self):
        _, H, W = self.image.shape
        b = self.boxes
        if b.size and (np.any(b[:, 2] <= b[:, 0]) or np.any(b[:, 3] <= b[:, 1])
                       or b.min() < 0 or np.any(b[:, [2, 3]] > [H, W])):
            raise ValueError(f"boxes out of bounds or degenerate: {b}")


@dataclass
class PartWholeDataset:
    spec: SplitSpec
    seed: int
    templates: dict[int, GlyphTemplate]
    base_train: list[DetectionSample]
    novel_train: list[DetectionSample]
    balanced_train: list[DetectionSample]
    base_test: list[DetectionSample]
    novel_test: list[DetectionSample]
    novel_probe: list[DetectionSample]
    variants: int = 0
    extra: dict = field(default_factory=dict)

    def finetune_set(self) -> list[DetectionSample]:
        return self.novel_train if self.spec.mode == "fsod" else self.balanced_train

    def splits(self) -> dict[str, list[DetectionSample]]:
        return {
            "base_train": self.base_train, "novel_train": self.novel_train,
            "balanced_train": self.balanced_train, "base_test": self.base_test,
            "novel_test": self.novel_test, "novel_probe": self.novel_probe,
        }


_TEXTURES = ("solid", "hstripe", "vstripe", "checker")
_LAYOUTS = ((1, 2), (2, 1), (2, 2), (1, 1, 1), (2, 1, 2), (1, 2, 1), (2, 2, 1), (1, 3))


def make_template(cls: int) -> GlyphTemplate:
    """Deterministic glyph for a class id (independent of the dataset seed)."""
    rng = np.random.default_rng([TEMPLATE_SEED, cls])
    layout = _LAYOUTS[cls % len(_LAYOUTS)]
    gap = rng.uniform(0.08, 0.16)
    heights = rng.uniform(0.6, 1.4, size=len(layout))
    row_edges = np.concatenate([[0.0], np.cumsum(heights) / heights.sum()])
    hue0 = rng.uniform(0, 1)
    parts, rows = [], []
    for r, ncol in enumerate(layout):
        widths = rng.uniform(0.6, 1.4, size=ncol)
        col_edges = np.concatenate([[0.0], np.cumsum(widths) / widths.sum()])
        row = []
        for c in range(ncol):
            y1 = row_edges[r] + (gap / 2 if r > 0 else 0.0)
            y2 = row_edges[r + 1] - (gap / 2 if r < len(layout) - 1 else 0.0)
            x1 = col_edges[c] + (gap / 2 if c > 0 else 0.0)
            x2 = col_edges[c + 1] - (gap / 2 if c < ncol - 1 else 0.0)
            k = len(parts)
            hue = (hue0 + 0.29 * k + 0.07 * cls) % 1.0
            colour = tuple(float(v) for v in _hue_to_rgb(hue, 0.45 + 0.5 * rng.uniform()))
            parts.append(Part((y1, x1, y2, x2), bool(rng.uniform() < 0.35),
                              colour, _TEXTURES[(cls + 3 * k) % len(_TEXTURES)]))
            row.append(k)
        rows.append(tuple(row))
    return GlyphTemplate(cls, tuple(parts), tuple(rows))


def _hue_to_rgb(h: float, v: float) -> np.ndarray:
    # fully saturated hue wheel scaled to brightness v
    rgb = np.clip(np.abs((h * 6 + np.array([0.0, 4.0, 2.0])) % 6 - 3) - 1, 0, 1)
    return 0.25 + v * 0.75 * rgb


def _texture(kind: str, ys: np.ndarray, xs: np.ndarray) -> np.ndarray:
    if kind == "hstripe":
        return ((ys // 3) % 2).astype(np.float64)
    if kind == "vstripe":
        return ((xs // 3) % 2).astype(np.float64)
    if kind == "checker":
        return (((ys // 3) + (xs // 3)) % 2).astype(np.float64)
    return np.zeros(np.broadcast(ys, xs).shape)


def render_glyph(canvas: np.ndarray, template: GlyphTemplate, box, parts) -> np.ndarray:
    """Paint ``parts`` of ``template`` into ``canvas`` (3, H, W) inside ``box``.

    A pixel is painted when the open interior of a part (rectangle or inscribed
    ellipse) overlaps the pixel square, so with integer boxes the painted mask
    of a full glyph spans exactly the box. Returns the boolean mask.
    """
    _, H, W = canvas.shape
    y1, x1, y2, x2 = box
    bh, bw = y2 - y1, x2 - x1
    iy = np.arange(H)[:, None]
    ix = np.arange(W)[None, :]
    mask = np.zeros((H, W), dtype=bool)
    for k in parts:
        p = template.parts[k]
        py1, px1, py2, px2 = y1 + p.box[0] * bh, x1 + p.box[1] * bw, y1 + p.box[2] * bh, x1 + p.box[3] * bw
        if p.disc:
            cy, cx = (py1 + py2) / 2, (px1 + px2) / 2
            ry, rx = (py2 - py1) / 2, (px2 - px1) / 2
            # point of each pixel square nearest the centre
            ny = np.clip(cy, iy, iy + 1)
            nx = np.clip(cx, ix, ix + 1)
            m = ((ny - cy) / ry) ** 2 + ((nx - cx) / rx) ** 2 < 1.0 - 1e-9
        else:
            m = (iy < py2) & (iy + 1 > py1) & (ix < px2) & (ix + 1 > px1)
        shade = np.broadcast_to(1.0 - 0.45 * _texture(p.texture, iy, ix), (H, W))
        col = np.asarray(p.colour)[:, None, None] * shade[None]
        canvas[:, m] = col[:, m]
        mask |= m
    return mask


def mask_bbox(mask: np.ndarray) -> np.ndarray:
    ys, xs = np.nonzero(mask)
    if ys.size == 0:
        return np.zeros(4)
    return np.array([ys.min(), xs.min(), ys.max() + 1, xs.max() + 1], dtype=np.float64)


def _size_lattice(S: int) -> np.ndarray:
    lo, hi = int(math.ceil(SIZE_RANGE[0] * S)), int(SIZE_RANGE[1] * S)
    return np.arange(lo, hi + 1, 4)


def novel_variant_count(S: int) -> int:
    """Distinct novel training renders: (height, width) on a 4-px lattice, 4-px positions."""
    sizes = _size_lattice(S)
    total = 0
    for h in sizes:
        for w in sizes:
            total += ((S - h) // 4 + 1) * ((S - w) // 4 + 1)
    return int(total)


def _draw_box(rng: np.random.Generator, S: int) -> tuple[float, float, float, float]:
    """Integer-aligned box with sides in ``SIZE_RANGE * S``."""
    lo, hi = int(math.ceil(SIZE_RANGE[0] * S)), int(SIZE_RANGE[1] * S)
    h, w = (int(v) for v in rng.integers(lo, hi + 1, size=2))
    y, x = (int(v) for v in rng.integers(0, [S - h + 1, S - w + 1]))
    return (float(y), float(x), float(y + h), float(x + w))


def _variant_box(index: int, S: int) -> tuple[float, float, float, float]:
    sizes = _size_lattice(S)
    for h in sizes:
        for w in sizes:
            ny, nx = (S - h) // 4 + 1, (S - w) // 4 + 1
            if index < ny * nx:
                y, x = 4 * (index // nx), 4 * (index % nx)
                return (float(y), float(x), float(y + h), float(x + w))
            index -= ny * nx
    raise IndexError("variant index out of range")


def _background(rng: np.random.Generator, S: int) -> np.ndarray:
    return np.clip(BACKGROUND + NOISE * rng.standard_normal((3, S, S)), 0.0, 1.0)


def make_sample(rng: np.random.Generator, template: GlyphTemplate, parts, split: str,
                S: int, box=None) -> DetectionSample:
    img = _background(rng, S)
    box = _draw_box(rng, S) if box is None else box
    parts = tuple(sorted(parts))
    mask = render_glyph(img, template, box, parts)
    img = np.clip(img, 0.0, 1.0)
    head = render_glyph(np.zeros_like(img), template, box, template.head)
    return DetectionSample(
        image=img,
        boxes=np.array([box]),
        classes=np.array([template.cls]),
        visibility=np.array([len(parts) / len(template.parts)]),
        visible_boxes=mask_bbox(mask)[None],
        masks=mask[None],
        split=split,
        head_boxes=mask_bbox(head)[None],
    )


def _random_subset(rng: np.random.Generator, n: int, lo: float, proper: bool) -> tuple[int, ...]:
    kmin = int(math.ceil(lo * n - 1e-9))
    kmax = n - 1 if proper else n
    v = rng.uniform(lo, kmax / n)
    k = int(np.clip(math.ceil(v * n - 1e-9), kmin, kmax))
    return tuple(int(i) for i in rng.choice(n, size=k, replace=False))


def generate_part_whole_dataset(spec: SplitSpec, seed: int) -> PartWholeDataset:
    """Build every split for ``spec``; identical ``(spec, seed)`` give identical arrays."""
    S = spec.image_size
    variants = novel_variant_count(S)
    if spec.shots > variants:
        raise ConfigError(f"{spec.shots} shots requested but only {variants} distinct novel views exist at {S}px")
    templates = {c: make_template(c) for c in spec.all_classes}
    root = np.random.SeedSequence([int(seed), 1])
    streams = {name: np.random.default_rng(s) for name, s in zip(
        ("base", "novel", "balanced", "base_test", "novel_test", "probe"), root.spawn(6))}

    def base_sample(rng, cls):
        t = templates[cls]
        return make_sample(rng, t, _random_subset(rng, len(t.parts), MIN_BASE_VISIBILITY, False), "base", S)

    base_train = [base_sample(streams["base"], c)
                  for _ in range(spec.base_per_class) for c in spec.base_classes]

    novel_train = []
    rng = streams["novel"]
    for c in spec.novel_classes:
        t = templates[c]
        for v in rng.choice(variants, size=spec.shots, replace=False):
            novel_train.append(make_sample(rng, t, t.head, "novel", S, box=_variant_box(int(v), S)))

    balanced = []
    if spec.mode == "gfsod":
        rng = streams["balanced"]
        for c in spec.base_classes:
            idx = rng.choice(spec.base_per_class, size=spec.shots, replace=False)
            # base_train is interleaved by class
            pos = spec.base_classes.index(c)
            balanced.extend(base_train[int(i) * len(spec.base_classes) + pos] for i in idx)
        balanced.extend(novel_train)

    base_test = [make_sample(streams["base_test"], templates[c], range(len(templates[c].parts)), "base", S)
                 for _ in range(spec.test_per_class) for c in spec.base_classes]
    novel_test = [make_sample(streams["novel_test"], templates[c], range(len(templates[c].parts)), "novel", S)
                  for _ in range(spec.test_per_class) for c in spec.novel_classes]
    rng = streams["probe"]
    novel_probe = [make_sample(rng, templates[c],
                               _random_subset(rng, len(templates[c].parts), MIN_BASE_VISIBILITY, True),
                               "novel", S)
                   for _ in range(spec.probe_per_class) for c in spec.novel_classes]
    return PartWholeDataset(spec, int(seed), templates, base_train, novel_train, balanced,
                            base_test, novel_test, novel_probe, variants)


def write_pnm(path, arr: np.ndarray) -> None:
    """Write ``(H, W)`` as binary PGM or ``(3, H, W)`` as binary PPM; values in [0, 1] or uint8."""
    a = np.asarray(arr)
    if a.dtype != np.uint8:
        a = np.clip(np.rint(np.asarray(a, dtype=np.float64) * 255), 0, 255).astype(np.uint8)
    if a.ndim == 2:
        header, body = f"P5\n{a.shape[1]} {a.shape[0]}\n255\n", a
    elif a.ndim == 3 and a.shape[0] == 3:
        header, body = f"P6\n{a.shape[2]} {a.shape[1]}\n255\n", np.transpose(a, (1, 2, 0))
    else:
        raise ValueError(f"cannot write array of shape {a.shape} as PNM")
    with open(path, "wb") as f:
        f.write(header.encode("ascii"))
        f.write(np.ascontiguousarray(body).tobytes())


def read_pnm(path) -> np.ndarray:
    with open(path, "rb") as f:
        data = f.read()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while data[pos:pos + 1].isspace():
            pos += 1
        start = pos
        while not data[pos:pos + 1].isspace():
            pos += 1
        tokens.append(data[start:pos].decode("ascii"))
    pos += 1
    magic, w, h = tokens[0], int(tokens[1]), int(tokens[2])
    raw = np.frombuffer(data, dtype=np.uint8, offset=pos)
    if magic == "P5":
        return raw[: h * w].reshape(h, w)
    if magic == "P6":
        return np.transpose(raw[: h * w * 3].reshape(h, w, 3), (2, 0, 1))
    raise ValueError(f"unsupported PNM magic {magic!r}")


def export_dataset(ds: PartWholeDataset, out_dir) -> Path:
    """Write every split as PPM rasters plus ``boxes.csv``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for name, samples in ds.splits().items():
        if name == "balanced_train":
            continue  # drawn from base_train and novel_train
        (out / name).mkdir(exist_ok=True)
        for i, s in enumerate(samples):
            rel = f"{name}/{i:05d}.ppm"
            write_pnm(out / rel, s.image)
            for b, c, v in zip(s.boxes, s.classes, s.visibility):
                rows.append([rel, int(c), *(f"{x:.3f}" for x in b), f"{v:.3f}", s.split])
    with open(out / "boxes.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["image", "class", "y1", "x1", "y2", "x2", "visibility", "split"])
        w.writerows(rows)
    log.info("exported %d boxes to %s", len(rows), out)
    return out
