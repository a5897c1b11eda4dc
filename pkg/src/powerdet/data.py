"""Synthetic power-equipment defect images, VOC XML annotations and dataset splits.

Five glyph families stand in for the five defect labels:

* ``jyz_sh`` insulator damage: a disc-stack insulator with a notch broken out of its discs
* ``jyz_sl`` insulator flashover: a disc stack crossed by a dark scorch streak
* ``bj``     normal dial: a crisp gauge face with ring, ticks and needle
* ``bj_mh``  dial blur: the same gauge, blurred and washed out
* ``bj_ps``  dial damage: a gauge with a crack across the face and a chipped ring

Every sample is a pure function of ``(seed, index, GenSpec)``.
"""
from __future__ import annotations

import math
import xml.etree.ElementTree as ET
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Sequence, Tuple

import numpy as np
from PIL import Image

from .geometry import CLASS_NAMES, NUM_CLASSES, Box, LabeledBox

# instance counts per label reported for the real corpus, in CLASS_NAMES order
CORPUS_CLASS_COUNTS = {"bj": 406, "bj_mh": 459, "bj_ps": 605, "jyz_sh": 1260, "jyz_sl": 2723}
DEFAULT_WEIGHTS = tuple(float(CORPUS_CLASS_COUNTS[c]) for c in CLASS_NAMES)


@dataclass(frozen=True)
class GenSpec:
    seed: int = 0
    count: int = 80
    size: int = 64
    class_weights: Tuple[float, ...] = DEFAULT_WEIGHTS
    clutter: float = 0.5
    min_objects: int = 1
    max_objects: int = 4

    def __post_init__(self):
        w = np.asarray(self.class_weights, dtype=float)
        if w.shape != (NUM_CLASSES,) or np.any(w < 0) or w.sum() <= 0:
            raise ValueError(f"class_weights must be {NUM_CLASSES} non-negative values with a positive sum")
        if self.count < 1:
            raise ValueError("count must be >= 1")
        if self.size < 32:
            raise ValueError("size must be >= 32")
        if not 1 <= self.min_objects <= self.max_objects:
            raise ValueError("need 1 <= min_objects <= max_objects")
        if self.clutter < 0:
            raise ValueError("clutter must be >= 0")


@dataclass
class DatasetSample:
    image: np.ndarray  # [3, H, W] float32 in [0, 1]
    labels: List[LabeledBox] = field(default_factory=list)
    image_id: str = ""


def image_id_for(index: int) -> str:
    return f"img{index:05d}"


# ---------------------------------------------------------------------------
# rendering

# sky, vegetation, concrete, overcast: cool tones that keep the brown glaze visible
_PALETTES = np.array([[0.55, 0.66, 0.78], [0.32, 0.46, 0.33], [0.5, 0.52, 0.54], [0.7, 0.74, 0.78]])


def _background(rng, size, clutter):
    base = _PALETTES[int(rng.integers(len(_PALETTES)))] + rng.uniform(-0.06, 0.06, 3)
    img = np.broadcast_to(base[:, None, None], (3, size, size)).copy()
    if clutter <= 0:
        return img
    yy, xx = np.mgrid[0:size, 0:size]
    for _ in range(int(rng.integers(3, 8))):
        colour = _PALETTES[int(rng.integers(len(_PALETTES)))] * rng.uniform(0.4, 1.2)
        a = min(1.0, 0.6 * clutter)
        if rng.uniform() < 0.5:  # wire / pole segment
            x0, y0 = rng.uniform(0, size, 2)
            ang = rng.uniform(0, math.pi)
            dist = np.abs((xx - x0) * math.sin(ang) - (yy - y0) * math.cos(ang))
            mask = dist < rng.uniform(0.5, 1.5)
        else:  # foliage / building blob
            cx, cy = rng.uniform(0, size, 2)
            rx, ry = rng.uniform(3, size / 4, 2)
            mask = ((xx - cx) / rx) ** 2 + ((yy - cy) / ry) ** 2 < 1
        img[:, mask] = (1 - a) * img[:, mask] + a * colour[:, None]
    img += rng.normal(0, 0.04 * clutter, img.shape)
    return np.clip(img, 0, 1)


def _insulator(rng, w, h, defect):
    """RGBA patch of a disc-stack insulator; long axis vertical."""
    yy, xx = np.mgrid[0:h, 0:w]
    u = (xx + 0.5) / w * 2 - 1
    v = (yy + 0.5) / h * 2 - 1
    n = max(3, h // 5)
    pitch = 2.0 / n
    centres = -1 + pitch * (np.arange(n) + 0.5)
    local = v[..., None] - centres
    disc = np.any(u[..., None] ** 2 + (local / (0.42 * pitch)) ** 2 < 1, axis=-1)
    rod = np.abs(u) < 0.15
    alpha = (disc | rod).astype(float)
    glaze = np.array([0.62, 0.34, 0.2]) + rng.uniform(-0.05, 0.05, 3)
    rgb = np.broadcast_to(glaze[:, None, None], (3, h, w)).copy()
    rgb[:, rod & ~disc] = np.array([0.25, 0.25, 0.28])[:, None]
    shade = 0.75 + 0.25 * np.cos(u * 1.3)
    rgb *= shade
    if defect == "jyz_sh":
        k = int(rng.integers(0, n))
        side = 1 if rng.uniform() < 0.5 else -1
        this_disc = np.abs(v - centres[k]) < 0.5 * pitch
        alpha[this_disc & (side * u > 0.2)] = 0.0
        fracture = this_disc & (side * u > 0.05) & (side * u <= 0.2) & disc
        rgb[:, fracture] = np.array([0.95, 0.92, 0.85])[:, None]
    elif defect == "jyz_sl":
        ang = rng.uniform(-0.6, 0.6)
        off = rng.uniform(-0.3, 0.3)
        band = np.abs(u * math.cos(ang) + v * math.sin(ang) * 0.35 - off) < 0.35
        scorch = band & (alpha > 0)
        rgb[:, scorch] = 0.2 * rgb[:, scorch] + 0.8 * np.array([0.08, 0.06, 0.05])[:, None]
        halo = (np.abs(u * math.cos(ang) + v * math.sin(ang) * 0.35 - off) < 0.5) & ~band & (alpha > 0)
        rgb[:, halo] = 0.4 * rgb[:, halo] + 0.6 * np.array([0.95, 0.9, 0.7])[:, None]
    return rgb, alpha


def _box_blur(a, passes=3):
    for _ in range(passes):
        p = np.pad(a, [(0, 0)] * (a.ndim - 2) + [(1, 1), (1, 1)], mode="edge")
        a = sum(p[..., i:i + a.shape[-2], j:j + a.shape[-1]] for i in range(3) for j in range(3)) / 9.0
    return a


def _dial(rng, d, defect):
    yy, xx = np.mgrid[0:d, 0:d]
    u = (xx + 0.5) / d * 2 - 1
    v = (yy + 0.5) / d * 2 - 1
    r = np.hypot(u, v)
    theta = np.arctan2(v, u)
    alpha = (r < 1.0).astype(float)
    rgb = np.empty((3, d, d))
    rgb[:] = np.array([0.93, 0.93, 0.88])[:, None, None]
    ring = (r > 0.78) & (r < 1.0)
    rgb[:, ring] = np.array([0.18, 0.18, 0.22])[:, None]
    ticks = (r > 0.6) & (r < 0.75) & (np.cos(theta * 8) > 0.85)
    rgb[:, ticks] = np.array([0.2, 0.2, 0.2])[:, None]
    ang = rng.uniform(-math.pi, math.pi)
    along = u * math.cos(ang) + v * math.sin(ang)
    across = np.abs(-u * math.sin(ang) + v * math.cos(ang))
    needle = (along > -0.1) & (along < 0.65) & (across < 0.09)
    rgb[:, needle] = np.array([0.85, 0.1, 0.08])[:, None]
    if defect == "bj_mh":
        rgb = _box_blur(rgb, 3)
        rgb = 0.45 * rgb + 0.55 * np.array([0.75, 0.75, 0.72])[:, None, None]
        alpha = np.clip(_box_blur(alpha, 2) * 1.3, 0, 1)
    elif defect == "bj_ps":
        a0 = rng.uniform(-math.pi, math.pi)
        pts = [(0.9 * math.cos(a0), 0.9 * math.sin(a0))]
        for _ in range(3):
            x, y = pts[-1]
            pts.append((x * 0.1 + rng.uniform(-0.5, 0.5) - x * 0.6, y * 0.1 + rng.uniform(-0.5, 0.5) - y * 0.6))
        pts.append((-pts[0][0], -pts[0][1]))
        crack = np.zeros_like(r, dtype=bool)
        for (x0, y0), (x1, y1) in zip(pts[:-1], pts[1:]):
            dx, dy = x1 - x0, y1 - y0
            t = np.clip(((u - x0) * dx + (v - y0) * dy) / (dx * dx + dy * dy + 1e-9), 0, 1)
            crack |= np.hypot(u - x0 - t * dx, v - y0 - t * dy) < 0.1
        rgb[:, crack & (r < 1)] = np.array([0.05, 0.05, 0.05])[:, None]
        chip = (r > 0.7) & (np.cos(theta - a0) > 0.9)
        alpha[chip] = 0.0
    return rgb, alpha


def _render(rng, class_name, size):
    """Patch and its size for one object, already in its final orientation."""
    if class_name.startswith("jyz"):
        long_side = int(rng.integers(max(16, size // 4), size // 2 + 1))
        short_side = int(rng.integers(max(9, long_side // 3), long_side // 2 + 3))
        rgb, alpha = _insulator(rng, short_side, long_side, class_name)
        if rng.uniform() < 0.5:
            rgb, alpha = rgb.transpose(0, 2, 1), alpha.T
    else:
        d = int(rng.integers(max(13, size // 5), size // 3 + 2))
        rgb, alpha = _dial(rng, d, class_name)
    return rgb, alpha


def generate_sample(seed: int, index: int, spec: GenSpec = GenSpec()) -> DatasetSample:
    rng = np.random.default_rng([seed, index])
    size = spec.size
    img = _background(rng, size, spec.clutter)
    weights = np.asarray(spec.class_weights, dtype=float)
    weights = weights / weights.sum()
    n = int(rng.integers(spec.min_objects, spec.max_objects + 1))
    labels: List[LabeledBox] = []
    taken = []
    for _ in range(n):
        cls = int(rng.choice(NUM_CLASSES, p=weights))
        rgb, alpha = _render(rng, CLASS_NAMES[cls], size)
        h, w = alpha.shape
        for _attempt in range(40):
            x = int(rng.integers(0, size - w + 1))
            y = int(rng.integers(0, size - h + 1))
            if all(x + w + 1 <= a or a2 + 1 <= x or y + h + 1 <= b or b2 + 1 <= y for a, b, a2, b2 in taken):
                break
        else:
            continue
        region = img[:, y:y + h, x:x + w]
        img[:, y:y + h, x:x + w] = region * (1 - alpha) + rgb * alpha
        ys, xs = np.nonzero(alpha > 0.25)
        box = (x + int(xs.min()), y + int(ys.min()), x + int(xs.max()) + 1, y + int(ys.max()) + 1)
        taken.append((x, y, x + w, y + h))
        labels.append(LabeledBox(Box(*map(float, box)), cls))
    return DatasetSample(np.clip(img, 0, 1).astype(np.float32), labels, image_id_for(index))


# ---------------------------------------------------------------------------
# VOC XML

def write_voc_xml(sample: DatasetSample, path):
    _, h, w = sample.image.shape
    root = ET.Element("annotation")
    ET.SubElement(root, "folder").text = "images"
    ET.SubElement(root, "filename").text = f"{sample.image_id}.png"
    sz = ET.SubElement(root, "size")
    for tag, val in (("width", w), ("height", h), ("depth", 3)):
        ET.SubElement(sz, tag).text = str(val)
    for lab in sample.labels:
        obj = ET.SubElement(root, "object")
        ET.SubElement(obj, "name").text = lab.class_name
        ET.SubElement(obj, "pose").text = "Unspecified"
        ET.SubElement(obj, "truncated").text = "0"
        ET.SubElement(obj, "difficult").text = "0"
        bb = ET.SubElement(obj, "bndbox")
        for tag, val in zip(("xmin", "ymin", "xmax", "ymax"), lab.box.as_tuple()):
            ET.SubElement(bb, tag).text = str(int(round(val)))
    ET.indent(root)
    ET.ElementTree(root).write(path, encoding="utf-8", xml_declaration=True)


def read_voc_xml(path) -> List[LabeledBox]:
    try:
        root = ET.parse(path).getroot()
    except ET.ParseError as e:
        raise ValueError(f"{path}: malformed XML ({e})") from None
    labels = []
    for k, obj in enumerate(root.iter("object")):
        name = obj.findtext("name")
        if name is None:
            raise ValueError(f"{path}: object {k} missing <name>")
        name = name.strip()
        if name not in CLASS_NAMES:
            raise ValueError(f"{path}: object {k} <name>: unknown class {name!r}")
        bb = obj.find("bndbox")
        if bb is None:
            raise ValueError(f"{path}: object {k} missing <bndbox>")
        coords = {}
        for tag in ("xmin", "ymin", "xmax", "ymax"):
            text = bb.findtext(tag)
            if text is None:
                raise ValueError(f"{path}: object {k} missing <{tag}>")
            try:
                coords[tag] = float(int(round(float(text))))
            except ValueError:
                raise ValueError(f"{path}: object {k} <{tag}>: not a number: {text!r}") from None
        if coords["xmin"] > coords["xmax"]:
            raise ValueError(f"{path}: object {k} <xmin> > <xmax>")
        if coords["ymin"] > coords["ymax"]:
            raise ValueError(f"{path}: object {k} <ymin> > <ymax>")
        labels.append(LabeledBox(Box(coords["xmin"], coords["ymin"], coords["xmax"], coords["ymax"]),
                                 CLASS_NAMES.index(name)))
    return labels


# ---------------------------------------------------------------------------
# splits and on-disk datasets

def split_dataset(ids: Sequence, ratios=(8, 1, 1), seed: int = 0):
    """Seeded shuffle into train/val/test; val and test get floor shares, train the rest."""
    ratios = tuple(ratios)
    if len(ratios) != 3 or any(r <= 0 for r in ratios):
        raise ValueError(f"ratios must be three positive numbers, got {ratios}")
    ids = list(ids)
    n = len(ids)
    if n < len(ratios):
        raise ValueError(f"need at least {len(ratios)} ids to split, got {n}")
    total = sum(ratios)
    n_val = math.floor(n * ratios[1] / total)
    n_test = math.floor(n * ratios[2] / total)
    perm = np.random.default_rng(seed).permutation(n)
    shuffled = [ids[i] for i in perm]
    n_train = n - n_val - n_test
    return shuffled[:n_train], shuffled[n_train:n_train + n_val], shuffled[n_train + n_val:]


def save_png(image: np.ndarray, path):
    arr = np.round(np.clip(image, 0, 1) * 255).astype(np.uint8).transpose(1, 2, 0)
    Image.fromarray(arr, "RGB").save(path, format="PNG")


def load_png(path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    return arr.transpose(2, 0, 1).copy()


def write_dataset(out_dir, spec: GenSpec, ratios=(8, 1, 1), split_seed=None):
    """Render ``spec.count`` samples to PNG + VOC XML, write the manifest and split lists."""
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "annotations").mkdir(parents=True, exist_ok=True)
    lines = []
    for i in range(spec.count):
        s = generate_sample(spec.seed, i, spec)
        save_png(s.image, out / "images" / f"{s.image_id}.png")
        write_voc_xml(s, out / "annotations" / f"{s.image_id}.xml")
        lines.append(f"{s.image_id}\timages/{s.image_id}.png\tannotations/{s.image_id}.xml\n")
    (out / "manifest.txt").write_text("".join(lines))
    ids = [image_id_for(i) for i in range(spec.count)]
    splits = split_dataset(ids, ratios, spec.seed if split_seed is None else split_seed)
    for name, part in zip(("train", "val", "test"), splits):
        (out / f"{name}.txt").write_text("".join(f"{i}\n" for i in part))
    return splits


def read_manifest(data_dir):
    path = Path(data_dir) / "manifest.txt"
    if not path.exists():
        raise FileNotFoundError(f"dataset manifest not found: {path}")
    entries = {}
    for n, line in enumerate(path.read_text().splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 3:
            raise ValueError(f"{path}:{n}: expected 'image_id<TAB>image<TAB>annotation'")
        entries[parts[0]] = (parts[1], parts[2])
    return entries


def load_split(data_dir, split: str) -> List[DatasetSample]:
    """Samples of one split (``train``/``val``/``test``/``all``) read back from disk."""
    data_dir = Path(data_dir)
    entries = read_manifest(data_dir)
    if split == "all":
        ids = list(entries)
    else:
        path = data_dir / f"{split}.txt"
        if not path.exists():
            raise FileNotFoundError(f"split list not found: {path}")
        ids = [l.strip() for l in path.read_text().splitlines() if l.strip()]
    out = []
    for i in ids:
        if i not in entries:
            raise ValueError(f"split {split}: id {i} not in manifest")
        img_rel, xml_rel = entries[i]
        out.append(DatasetSample(load_png(data_dir / img_rel), read_voc_xml(data_dir / xml_rel), i))
    return out
