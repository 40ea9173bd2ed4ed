"""Object-level benchmark construction.

Two membership rules are supported:

* ``image-class``: each image carries one class label; an image is normal iff
  its label is in the normal set.
* ``object-presence``: each image carries the set of object categories found
  in its detection annotations; an image is normal iff at least one of them is
  a normal category.
"""

from __future__ import annotations

import json
import logging
import math
import xml.etree.ElementTree as ET
from dataclasses import asdict, dataclass, field
from itertools import combinations
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .errors import ConfigurationError, RangeError, SplitError

logger = logging.getLogger(__name__)

RULES = ("image-class", "object-presence")
SETTINGS = ("uni-class", "multi-class", "all-vs-one")

VOC_CLASSES = (
    "aeroplane", "bicycle", "bird", "boat", "bottle", "bus", "car", "cat", "chair", "cow",
    "diningtable", "dog", "horse", "motorbike", "person", "pottedplant", "sheep", "sofa",
    "train", "tvmonitor",
)

CIFAR10_CLASSES = (
    "airplane", "automobile", "bird", "cat", "deer", "dog", "frog", "horse", "ship", "truck",
)


@dataclass(frozen=True)
class AnnotatedImage:
    image_id: int
    path: str
    categories: frozenset
    partition: str = "train"
    boxes: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "categories", frozenset(self.categories))
        if self.partition not in ("train", "test"):
            raise ConfigurationError(f"partition must be 'train' or 'test', got {self.partition!r}")


@dataclass(frozen=True)
class SplitSpec:
    dataset: str
    rule: str = "image-class"
    setting: str = "uni-class"
    normal: tuple = (0,)
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "normal", tuple(sorted(self.normal)))
        if self.rule not in RULES:
            raise ConfigurationError(f"unknown membership rule {self.rule!r}; expected one of {RULES}")
        if self.setting not in SETTINGS:
            raise ConfigurationError(f"unknown setting {self.setting!r}; expected one of {SETTINGS}")
        if not self.normal:
            raise ConfigurationError("normal class set is empty")

    @property
    def split_id(self) -> str:
        return "".join(str(c) for c in self.normal) if all(
            isinstance(c, int) and 0 <= c < 10 for c in self.normal) else "-".join(map(str, self.normal))


@dataclass
class Split:
    spec: SplitSpec
    train_ids: list
    test_ids: list
    test_labels: list  # 1 = abnormal, 0 = normal
    excluded_categories: list = field(default_factory=list)

    def to_manifest(self) -> dict:
        return {
            "spec": asdict(self.spec),
            "seed": self.spec.seed,
            "train_ids": list(self.train_ids),
            "test_ids": list(self.test_ids),
            "test_labels": ["abnormal" if y else "normal" for y in self.test_labels],
            "excluded_categories": list(self.excluded_categories),
        }

    @classmethod
    def from_manifest(cls, data: dict) -> "Split":
        spec = SplitSpec(**{**data["spec"], "normal": tuple(data["spec"]["normal"])})
        return cls(spec=spec, train_ids=list(data["train_ids"]), test_ids=list(data["test_ids"]),
                   test_labels=[1 if y == "abnormal" else 0 for y in data["test_labels"]],
                   excluded_categories=list(data.get("excluded_categories", [])))

    def save(self, path, extra: Optional[dict] = None):
        data = self.to_manifest()
        if extra:
            data.update(extra)
        Path(path).write_text(json.dumps(data, indent=2))

    @classmethod
    def load(cls, path) -> "Split":
        return cls.from_manifest(json.loads(Path(path).read_text()))


def all_categories(annotations: Iterable[AnnotatedImage]) -> list:
    cats = set()
    for a in annotations:
        cats |= a.categories
    return sorted(cats)


def eligible_categories(annotations: Sequence[AnnotatedImage]):
    """Categories that can serve as a normal class: present in both partitions.

    Returns ``(eligible, excluded)``.
    """
    train = all_categories(a for a in annotations if a.partition == "train")
    test = all_categories(a for a in annotations if a.partition == "test")
    eligible = sorted(set(train) & set(test))
    excluded = sorted((set(train) | set(test)) - set(eligible))
    return eligible, excluded


def _is_normal(img: AnnotatedImage, normal: frozenset, rule: str) -> bool:
    if rule == "image-class":
        if len(img.categories) != 1:
            raise SplitError(f"image {img.image_id} has {len(img.categories)} labels under the image-class rule")
    return bool(img.categories & normal)


def build_split(annotations: Sequence[AnnotatedImage], spec: SplitSpec) -> Split:
    """Normal-only train set plus a labeled test set."""
    taxonomy = all_categories(annotations)
    normal = frozenset(spec.normal)
    if not normal <= set(taxonomy) or normal == set(taxonomy):
        raise SplitError(f"{spec}: normal set must be a nonempty strict subset of {taxonomy}")
    _, excluded = eligible_categories(annotations)
    ordered = sorted(annotations, key=lambda a: a.image_id)
    train_ids, test_ids, labels = [], [], []
    for img in ordered:
        is_normal = _is_normal(img, normal, spec.rule)
        if img.partition == "train":
            if is_normal:
                train_ids.append(img.image_id)
        else:
            test_ids.append(img.image_id)
            labels.append(0 if is_normal else 1)
    if not train_ids:
        raise SplitError(f"{spec}: empty training set")
    if len(set(labels)) < 2:
        raise SplitError(f"{spec}: test set has a single label")
    return Split(spec=spec, train_ids=train_ids, test_ids=test_ids, test_labels=labels,
                 excluded_categories=excluded)


def normal_sets(categories: Sequence, setting: str, size: Optional[int] = None, n_splits: int = 1, seed: int = 0):
    """Normal class sets for a protocol.

    uni-class: one set per category; all-vs-one: one set per held-out category;
    multi-class: ``n_splits`` random subsets of ``size`` (default half) drawn
    deterministically from ``seed``.
    """
    cats = sorted(categories)
    if setting == "uni-class":
        return [(c,) for c in cats]
    if setting == "all-vs-one":
        return [tuple(x for x in cats if x != c) for c in cats]
    if setting == "multi-class":
        size = size or len(cats) // 2
        if not 0 < size < len(cats):
            raise RangeError(f"multi-class normal set size must be in (0, {len(cats)}), got {size}")
        rng = np.random.default_rng(seed)
        if math.comb(len(cats), size) <= n_splits:
            return [tuple(c) for c in combinations(cats, size)]
        out = []
        while len(out) < n_splits:
            pick = tuple(sorted(rng.choice(cats, size=size, replace=False).tolist()))
            if pick not in out:
                out.append(pick)
        return out
    raise ConfigurationError(f"unknown setting {setting!r}")


def prototype_count_for(spec: SplitSpec, annotations: Sequence[AnnotatedImage], override: Optional[int] = None) -> int:
    """Twice the number of categories observed in the training split."""
    if override is not None:
        return int(override)
    if not annotations:
        raise ConfigurationError("no annotations")
    if spec.rule == "image-class":
        return 2 * len(spec.normal)
    split = build_split(annotations, spec)
    ids = set(split.train_ids)
    return 2 * len(all_categories(a for a in annotations if a.image_id in ids))


# --------------------------------------------------------------------------
# Dataset ingestion
# --------------------------------------------------------------------------


def load_coco(annotation_json, image_root, partition: str, id_offset: int = 0) -> list:
    """Read a COCO detection file into AnnotatedImage records (native category ids)."""
    data = json.loads(Path(annotation_json).read_text())
    cats = {}
    for ann in data.get("annotations", []):
        if ann.get("iscrowd", 0):
            continue
        cats.setdefault(ann["image_id"], set()).add(int(ann["category_id"]))
    out = []
    for img in sorted(data["images"], key=lambda d: d["id"]):
        out.append(AnnotatedImage(image_id=int(img["id"]) + id_offset,
                                  path=str(Path(image_root) / img["file_name"]),
                                  categories=frozenset(cats.get(img["id"], ())),
                                  partition=partition))
    return out


def load_voc(annotation_dir, image_root, partition: str, ids: Optional[Sequence[str]] = None,
             id_offset: int = 0) -> list:
    """Read Pascal-VOC per-image XML files. Category ids index :data:`VOC_CLASSES`."""
    annotation_dir = Path(annotation_dir)
    files = sorted(annotation_dir.glob("*.xml")) if ids is None else [annotation_dir / f"{i}.xml" for i in ids]
    out = []
    for n, f in enumerate(files):
        root = ET.parse(f).getroot()
        names = {o.findtext("name").strip() for o in root.iter("object")}
        unknown = names - set(VOC_CLASSES)
        if unknown:
            raise ConfigurationError(f"{f}: unknown VOC classes {sorted(unknown)}")
        fname = root.findtext("filename") or f"{f.stem}.jpg"
        out.append(AnnotatedImage(image_id=n + id_offset, path=str(Path(image_root) / fname),
                                  categories=frozenset(VOC_CLASSES.index(c) for c in names),
                                  partition=partition))
    return out


IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp", ".webp"}


def load_folder(root) -> tuple:
    """``root/{train,test}/<class>/<image>`` layout.

    Returns ``(annotations, class_names)``; class ids follow sorted folder names.
    """
    root = Path(root)
    classes = sorted({d.name for part in ("train", "test") if (root / part).is_dir()
                      for d in (root / part).iterdir() if d.is_dir()})
    out = []
    n = 0
    for part in ("train", "test"):
        for ci, cname in enumerate(classes):
            d = root / part / cname
            if not d.is_dir():
                continue
            for f in sorted(d.iterdir()):
                if f.suffix.lower() in IMAGE_SUFFIXES:
                    out.append(AnnotatedImage(image_id=n, path=str(f), categories=frozenset({ci}), partition=part))
                    n += 1
    return out, classes


# --------------------------------------------------------------------------
# Synthetic multi-object scenes
# --------------------------------------------------------------------------

GLYPHS = ("circle", "square", "triangle", "cross", "ring", "bar")

PALETTE = np.array([
    (0.90, 0.20, 0.20), (0.20, 0.80, 0.25), (0.25, 0.40, 0.95), (0.95, 0.85, 0.20),
    (0.85, 0.30, 0.85), (0.20, 0.85, 0.85), (0.95, 0.55, 0.15), (0.95, 0.95, 0.95),
])


@dataclass(frozen=True)
class SyntheticSceneSpec:
    """Scenes of colored geometric glyphs; the glyph shape is the category.

    Each scene draws its object count uniformly from ``objects_per_image``
    and that many distinct categories uniformly without replacement, so every
    category is present with probability ``E[count] / len(vocabulary)``.
    """

    canvas: int = 64
    vocabulary: tuple = GLYPHS
    objects_per_image: tuple = (1, 1)
    glyph_size: tuple = (0.45, 0.7)  # fraction of the cell side
    noise: float = 0.04
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "vocabulary", tuple(self.vocabulary))
        object.__setattr__(self, "objects_per_image", tuple(self.objects_per_image))
        lo, hi = self.objects_per_image
        if len(self.vocabulary) < 2:
            raise ConfigurationError("vocabulary needs at least 2 categories")
        unknown = set(self.vocabulary) - set(GLYPHS)
        if unknown:
            raise ConfigurationError(f"unknown glyphs {sorted(unknown)}; available: {GLYPHS}")
        if not 1 <= lo <= hi <= len(self.vocabulary):
            raise RangeError(f"objects_per_image {self.objects_per_image} invalid for {len(self.vocabulary)} categories")
        if self.min_glyph_pixels < 6:
            raise RangeError(f"canvas {self.canvas} too small for {hi} glyphs")

    @property
    def cells_per_side(self) -> int:
        return math.ceil(math.sqrt(self.objects_per_image[1]))

    @property
    def cell(self) -> int:
        return self.canvas // self.cells_per_side

    @property
    def min_glyph_pixels(self) -> int:
        return int(self.cell * self.glyph_size[0])

    def presence_probability(self) -> float:
        lo, hi = self.objects_per_image
        return (lo + hi) / 2 / len(self.vocabulary)


def _glyph_mask(kind: str, size: int, angle: float) -> np.ndarray:
    r = size / 2.0
    c = np.arange(size) + 0.5 - r
    x, y = np.meshgrid(c, c)
    ca, sa = math.cos(angle), math.sin(angle)
    u, v = ca * x + sa * y, -sa * x + ca * y
    if kind == "circle":
        return x ** 2 + y ** 2 <= r ** 2
    if kind == "ring":
        d = x ** 2 + y ** 2
        return (d <= r ** 2) & (d >= (0.55 * r) ** 2)
    if kind == "square":
        s = r / math.sqrt(2)
        return (np.abs(u) <= s) & (np.abs(v) <= s)
    if kind == "triangle":
        # equilateral triangle inscribed in the circle of radius r
        m = np.ones_like(u, dtype=bool)
        for k in range(3):
            t = angle + math.pi / 2 + k * 2 * math.pi / 3
            m &= (x * math.cos(t) + y * math.sin(t)) >= -r / 2
        return m
    if kind == "cross":
        w = 0.28 * r
        return ((np.abs(u) <= w) & (np.abs(v) <= r * 0.95)) | ((np.abs(v) <= w) & (np.abs(u) <= r * 0.95))
    if kind == "bar":
        return (np.abs(u) <= r * 0.95) & (np.abs(v) <= 0.3 * r)
    raise ConfigurationError(f"unknown glyph {kind!r}")


def render_scene(spec: SyntheticSceneSpec, rng: np.random.Generator, categories: Sequence[int]):
    """Render one scene containing exactly ``categories``.

    Returns ``(image HxWx3 float32 in [0, 1], boxes)`` with boxes as
    ``(category, x0, y0, size)``.
    """
    g = spec.cells_per_side
    cell = spec.cell
    bg = rng.uniform(0.05, 0.35)
    img = np.full((spec.canvas, spec.canvas, 3), bg) + rng.normal(0.0, spec.noise, (spec.canvas, spec.canvas, 3))
    slots = rng.permutation(g * g)[: len(categories)]
    boxes = []
    for cat, slot in zip(categories, slots):
        lo, hi = spec.glyph_size
        size = int(rng.integers(max(6, int(cell * lo)), max(7, int(cell * hi)) + 1))
        size = min(size, cell)
        gy, gx = divmod(int(slot), g)
        y0 = gy * cell + int(rng.integers(0, cell - size + 1))
        x0 = gx * cell + int(rng.integers(0, cell - size + 1))
        mask = _glyph_mask(spec.vocabulary[cat], size, rng.uniform(0, 2 * math.pi))
        color = PALETTE[rng.integers(len(PALETTE))] * rng.uniform(0.8, 1.0)
        region = img[y0:y0 + size, x0:x0 + size]
        region[mask] = color + rng.normal(0.0, spec.noise, (int(mask.sum()), 3))
        boxes.append((int(cat), x0, y0, size))
    return np.clip(img, 0.0, 1.0).astype(np.float32), tuple(boxes)


def generate_synthetic(spec: SyntheticSceneSpec, count: int, partition: str = "train", id_offset: int = 0):
    """Render ``count`` scenes deterministically from ``spec.seed``.

    Returns ``(annotations, images)`` with images as a float32 array
    (count, 3, canvas, canvas) in [0, 1].
    """
    rng = np.random.default_rng([spec.seed, 0 if partition == "train" else 1])
    n_cat = len(spec.vocabulary)
    lo, hi = spec.objects_per_image
    images = np.empty((count, 3, spec.canvas, spec.canvas), dtype=np.float32)
    annotations = []
    for i in range(count):
        n = int(rng.integers(lo, hi + 1))
        cats = rng.choice(n_cat, size=n, replace=False)
        img, boxes = render_scene(spec, rng, [int(c) for c in cats])
        images[i] = img.transpose(2, 0, 1)
        annotations.append(AnnotatedImage(image_id=id_offset + i, path=f"synthetic://{partition}/{i}",
                                          categories=frozenset(int(c) for c in cats),
                                          partition=partition, boxes=boxes))
    return annotations, images
