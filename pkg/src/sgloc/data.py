"""Procedural scenes, sketch queries, and closed/open-world dataset splits.

Scenes are 64x64 RGB rasters with 1..4 filled, textured shape instances over
a cluttered background; sketches are 64x64 white-on-black jittered outline
drawings of a single shape class. Every artifact is a pure function of
(master seed, config); per-item seeds derive from the master seed with a
splitmix64 mix so generation order never matters.

On-disk layout:
    scenes/NNNNNN.ppm          binary P6
    sketches/CLASS/NNNN.pgm    binary P5
    annotations.jsonl          {"image": ..., "boxes": [[x0,y0,x1,y1],..], "classes": [..]}
    split.json                 seen/unseen ids, train/val scene ids, sketch pools
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field, replace

import numpy as np

IMAGE_SIZE = 64

CLASS_NAMES = [
    "circle",
    "square",
    "triangle",
    "star",
    "cross",
    "ring",
    "arrow",
    "crescent",
    "trapezoid",
    "l_shape",
    "t_shape",
    "zigzag",
]


class PlacementError(RuntimeError):
    """Raised when instances cannot be placed within the retry budget."""


class DatasetError(RuntimeError):
    """Raised for malformed dataset directories or split configs."""


# ---------------------------------------------------------------------------
# seed derivation


def splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & 0xFFFFFFFFFFFFFFFF
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & 0xFFFFFFFFFFFFFFFF
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & 0xFFFFFFFFFFFFFFFF
    return z ^ (z >> 31)


def derive_seed(master: int, *salts) -> int:
    """Independent child seed from a master seed and a salt tuple."""
    x = splitmix64(int(master) & 0xFFFFFFFFFFFFFFFF)
    for s in salts:
        if isinstance(s, str):
            for ch in s.encode():
                x = splitmix64(x ^ ch)
        else:
            x = splitmix64(x ^ (int(s) & 0xFFFFFFFFFFFFFFFF))
    return x


# ---------------------------------------------------------------------------
# shape outlines: every class is one or more closed loops in a [-1, 1] frame,
# filled with the even-odd rule (the ring's hole is its second loop)


def _circle_loop(r: float, n: int = 40, cx: float = 0.0, cy: float = 0.0) -> np.ndarray:
    a = np.linspace(0.0, 2.0 * math.pi, n, endpoint=False)
    return np.stack([cx + r * np.cos(a), cy + r * np.sin(a)], axis=1)


def _star_loop() -> np.ndarray:
    pts = []
    for i in range(10):
        r = 1.0 if i % 2 == 0 else 0.45
        a = math.pi / 2 + i * math.pi / 5
        pts.append((r * math.cos(a), r * math.sin(a)))
    return np.array(pts)


def _crescent_loop() -> np.ndarray:
    # outer disc minus an offset cutter disc; boundary = two arcs
    r1, (cx, r2) = 1.0, (0.5, 0.85)
    xi = (cx * cx + r1 * r1 - r2 * r2) / (2.0 * cx)
    yi = math.sqrt(max(0.0, r1 * r1 - xi * xi))
    a = math.atan2(yi, xi)
    outer = np.linspace(a, 2.0 * math.pi - a, 40)
    pts = [(math.cos(t), math.sin(t)) for t in outer]
    # cutter arc from the lower intersection back up the left side to the upper one
    b_lo = math.atan2(-yi, xi - cx)
    b_hi = math.atan2(yi, xi - cx)
    cutter = np.linspace(b_lo, b_hi - 2.0 * math.pi, 30)
    pts += [(cx + r2 * math.cos(t), r2 * math.sin(t)) for t in cutter[1:-1]]
    return np.array(pts)


def _zigzag_loop() -> np.ndarray:
    spine = np.array([(-1.0, 0.55), (-0.5, -0.55), (0.0, 0.55), (0.5, -0.55), (1.0, 0.55)])
    t = 0.24
    top = spine + np.array([0.0, -t])
    bottom = (spine + np.array([0.0, t]))[::-1]
    return np.concatenate([top, bottom], axis=0)


_OUTLINES = {
    "circle": lambda: [_circle_loop(1.0)],
    "square": lambda: [np.array([(-0.9, -0.9), (0.9, -0.9), (0.9, 0.9), (-0.9, 0.9)])],
    "triangle": lambda: [np.array([(0.0, -1.0), (0.95, 0.8), (-0.95, 0.8)])],
    "star": lambda: [_star_loop()],
    "cross": lambda: [
        np.array(
            [
                (-0.3, -1.0), (0.3, -1.0), (0.3, -0.3), (1.0, -0.3), (1.0, 0.3),
                (0.3, 0.3), (0.3, 1.0), (-0.3, 1.0), (-0.3, 0.3), (-1.0, 0.3),
                (-1.0, -0.3), (-0.3, -0.3),
            ]
        )
    ],
    "ring": lambda: [_circle_loop(1.0), _circle_loop(0.55)],
    "arrow": lambda: [
        np.array(
            [
                (-1.0, -0.28), (0.15, -0.28), (0.15, -0.62), (1.0, 0.0),
                (0.15, 0.62), (0.15, 0.28), (-1.0, 0.28),
            ]
        )
    ],
    "crescent": lambda: [_crescent_loop()],
    "trapezoid": lambda: [np.array([(-0.55, -0.8), (0.55, -0.8), (1.0, 0.8), (-1.0, 0.8)])],
    "l_shape": lambda: [
        np.array(
            [(-0.8, -1.0), (-0.2, -1.0), (-0.2, 0.4), (0.8, 0.4), (0.8, 1.0), (-0.8, 1.0)]
        )
    ],
    "t_shape": lambda: [
        np.array(
            [
                (-1.0, -1.0), (1.0, -1.0), (1.0, -0.4), (0.3, -0.4), (0.3, 1.0),
                (-0.3, 1.0), (-0.3, -0.4), (-1.0, -0.4),
            ]
        )
    ],
    "zigzag": lambda: [_zigzag_loop()],
}


@dataclass(frozen=True)
class ShapeClass:
    id: int
    name: str

    def outline(self) -> list:
        """Closed loops in the canonical [-1, 1] frame."""
        return [loop.copy() for loop in _OUTLINES[self.name]()]


SHAPE_CLASSES = [ShapeClass(i, n) for i, n in enumerate(CLASS_NAMES)]


def _transform(loops, rot: float, scale_xy, center) -> list:
    c, s = math.cos(rot), math.sin(rot)
    rotm = np.array([[c, -s], [s, c]])
    sx, sy = scale_xy
    out = []
    for loop in loops:
        pts = loop @ rotm.T
        pts = pts * np.array([sx, sy]) + np.asarray(center)
        out.append(pts)
    return out


def _rasterize(loops, w: int = IMAGE_SIZE, h: int = IMAGE_SIZE) -> np.ndarray:
    """Even-odd fill of closed loops onto a pixel-center grid."""
    xs = np.arange(w) + 0.5
    ys = np.arange(h) + 0.5
    px = xs[None, :]
    py = ys[:, None]
    inside = np.zeros((h, w), dtype=bool)
    for loop in loops:
        x1 = loop[:, 0]
        y1 = loop[:, 1]
        x2 = np.roll(x1, -1)
        y2 = np.roll(y1, -1)
        for e in range(len(loop)):
            if y1[e] == y2[e]:
                continue
            cond = (y1[e] > py) != (y2[e] > py)
            xint = x1[e] + (py - y1[e]) * (x2[e] - x1[e]) / (y2[e] - y1[e])
            inside ^= cond & (px < xint)
    return inside


def _tight_box(mask: np.ndarray):
    ys, xs = np.nonzero(mask)
    if len(xs) == 0:
        return None
    return (int(xs.min()), int(ys.min()), int(xs.max()) + 1, int(ys.max()) + 1)


def _box_iou(a, b) -> float:
    iw = max(0, min(a[2], b[2]) - max(a[0], b[0]))
    ih = max(0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = iw * ih
    if inter == 0:
        return 0.0
    ua = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return inter / ua


# ---------------------------------------------------------------------------
# scenes


_PALETTE = np.array(
    [
        (0.90, 0.15, 0.15), (0.15, 0.60, 0.90), (0.20, 0.80, 0.25), (0.95, 0.80, 0.10),
        (0.80, 0.25, 0.85), (0.95, 0.55, 0.10), (0.10, 0.85, 0.80), (0.90, 0.30, 0.55),
        (0.55, 0.40, 0.95), (0.70, 0.90, 0.20),
    ]
)


@dataclass
class DataConfig:
    n_train: int = 400
    n_val: int = 100
    n_classes: int = 12
    mode: str = "closed"  # or "open"
    unseen: tuple = (10, 11)  # holdout ids in open mode
    instances: tuple = (1, 4)
    size_range: tuple = (8.0, 40.0)
    overlap_max: float = 0.3
    rot_deg: float = 15.0
    sketches_per_class: int = 24
    val_sketches_per_class: int = 8
    seed: int = 0


@dataclass
class SketchStyle:
    jitter: float = 0.06  # vertex noise as a fraction of the drawn size
    rot_deg: float = 15.0
    width_range: tuple = (1.0, 2.0)
    gap_prob: float = 0.08
    scale_range: tuple = (0.66, 0.84)
    offset_px: float = 2.5


@dataclass
class SceneSample:
    image: np.ndarray  # (64, 64, 3) float in [0, 1]
    boxes: np.ndarray  # (n, 4) int corner boxes, x1/y1 exclusive
    classes: list
    seed: int
    masks: list = field(default_factory=list)  # per-instance painted-pixel masks


@dataclass
class Annotation:
    boxes: np.ndarray
    classes: list


def generate_scene(seed: int, config: DataConfig, classes=None) -> SceneSample:
    """Deterministic scene: cluttered background plus 1..4 textured shapes."""
    rng = np.random.default_rng(seed)
    size = IMAGE_SIZE

    base = rng.uniform(0.25, 0.65, 3)
    img = np.tile(base, (size, size, 1))
    gx, gy = rng.uniform(-1, 1, 2)
    ramp = (np.arange(size) / size - 0.5)
    img += 0.10 * (gx * ramp[None, :, None] + gy * ramp[:, None, None])
    for _ in range(rng.integers(2, 5)):
        cx, cy = rng.uniform(0, size, 2)
        sig = rng.uniform(6, 18)
        amp = rng.uniform(-0.09, 0.09, 3)
        yy, xx = np.mgrid[0:size, 0:size]
        blob = np.exp(-((xx - cx) ** 2 + (yy - cy) ** 2) / (2 * sig * sig))
        img += blob[:, :, None] * amp
    img += rng.uniform(-0.05, 0.05, (size, size, 3))

    pool = list(range(config.n_classes)) if classes is None else list(classes)
    n_inst = int(rng.integers(config.instances[0], config.instances[1] + 1))
    boxes, cls_ids, masks = [], [], []
    for _ in range(n_inst):
        cls = int(rng.choice(pool))
        shape = SHAPE_CLASSES[cls]
        placed = False
        s = float(rng.uniform(*config.size_range))
        for attempt in range(80):
            if attempt and attempt % 10 == 0:
                s = max(config.size_range[0], s * 0.85)
            half = s / 2.0
            cx = rng.uniform(half + 1, size - half - 1)
            cy = rng.uniform(half + 1, size - half - 1)
            rot = math.radians(rng.uniform(-config.rot_deg, config.rot_deg))
            stretch = rng.uniform(0.85, 1.15)
            loops = _transform(shape.outline(), rot, (half, half * stretch), (cx, cy))
            mask = _rasterize(loops)
            box = _tight_box(mask)
            if box is None:
                continue
            if any(_box_iou(box, b) > config.overlap_max for b in boxes):
                continue
            color = _PALETTE[rng.integers(len(_PALETTE))] + rng.uniform(-0.08, 0.08, 3)
            texture = rng.uniform(-0.07, 0.07, (size, size))
            img[mask] = color[None, :] + texture[mask][:, None]
            boxes.append(box)
            cls_ids.append(cls)
            masks.append(mask)
            placed = True
            break
        if not placed:
            raise PlacementError(
                f"could not place a {shape.name} of size ~{s:.0f}px after 80 attempts"
            )
    np.clip(img, 0.0, 1.0, out=img)
    return SceneSample(img, np.array(boxes, dtype=np.float64), cls_ids, seed, masks)


# ---------------------------------------------------------------------------
# sketches


def render_sketch(cls: int, seed: int, style: SketchStyle | None = None) -> np.ndarray:
    """White-on-black jittered outline drawing of one shape class."""
    style = style or SketchStyle()
    rng = np.random.default_rng(seed)
    size = IMAGE_SIZE
    draw_size = float(rng.uniform(*style.scale_range)) * size
    half = draw_size / 2.0
    center = size / 2.0 + rng.uniform(-style.offset_px, style.offset_px, 2)
    rot = math.radians(rng.uniform(-style.rot_deg, style.rot_deg))
    loops = _transform(SHAPE_CLASSES[cls].outline(), rot, (half, half), center)

    img = np.zeros((size, size), dtype=np.float64)
    width = float(rng.uniform(*style.width_range))
    sigma = style.jitter * draw_size
    for loop in loops:
        pts = _subdivide(loop, max_step=5.0)
        pts = pts + rng.normal(0.0, sigma, pts.shape)
        n = len(pts)
        for i in range(n):
            if style.gap_prob > 0 and rng.random() < style.gap_prob:
                continue
            _draw_segment(img, pts[i], pts[(i + 1) % n], width)
    return np.clip(img, 0.0, 1.0)


def _subdivide(loop: np.ndarray, max_step: float) -> np.ndarray:
    out = []
    n = len(loop)
    for i in range(n):
        a, b = loop[i], loop[(i + 1) % n]
        steps = max(1, int(math.ceil(np.linalg.norm(b - a) / max_step)))
        for k in range(steps):
            out.append(a + (b - a) * (k / steps))
    return np.array(out)


def _draw_segment(img: np.ndarray, a, b, width: float) -> None:
    h, w = img.shape
    x0 = max(0, int(math.floor(min(a[0], b[0]) - width)))
    x1 = min(w, int(math.ceil(max(a[0], b[0]) + width)) + 1)
    y0 = max(0, int(math.floor(min(a[1], b[1]) - width)))
    y1 = min(h, int(math.ceil(max(a[1], b[1]) + width)) + 1)
    if x0 >= x1 or y0 >= y1:
        return
    xs = np.arange(x0, x1) + 0.5
    ys = np.arange(y0, y1) + 0.5
    px, py = np.meshgrid(xs, ys)
    ab = b - a
    denom = float(ab @ ab)
    if denom == 0:
        t = np.zeros_like(px)
    else:
        t = np.clip(((px - a[0]) * ab[0] + (py - a[1]) * ab[1]) / denom, 0.0, 1.0)
    dx = px - (a[0] + t * ab[0])
    dy = py - (a[1] + t * ab[1])
    dist = np.sqrt(dx * dx + dy * dy)
    val = np.clip(width / 2.0 + 0.5 - dist, 0.0, 1.0)
    region = img[y0:y1, x0:x1]
    np.maximum(region, val, out=region)


# ---------------------------------------------------------------------------
# PPM / PGM


def write_ppm(path: str, img: np.ndarray) -> None:
    arr = np.clip(np.rint(np.asarray(img) * 255.0), 0, 255).astype(np.uint8)
    h, w, _ = arr.shape
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode())
        f.write(arr.tobytes())


def read_ppm(path: str) -> np.ndarray:
    with open(path, "rb") as f:
        data = f.read()
    magic, w, h, maxval, raster = _parse_pnm(data, path)
    if magic != b"P6":
        raise DatasetError(f"{path}: not a binary PPM")
    arr = np.frombuffer(raster, dtype=np.uint8, count=w * h * 3).reshape(h, w, 3)
    return arr.astype(np.float64) / float(maxval)


def write_pgm(path: str, img: np.ndarray) -> None:
    arr = np.clip(np.rint(np.asarray(img) * 255.0), 0, 255).astype(np.uint8)
    h, w = arr.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode())
        f.write(arr.tobytes())


def read_pgm(path: str) -> np.ndarray:
    with open(path, "rb") as f:
        data = f.read()
    magic, w, h, maxval, raster = _parse_pnm(data, path)
    if magic != b"P5":
        raise DatasetError(f"{path}: not a binary PGM")
    arr = np.frombuffer(raster, dtype=np.uint8, count=w * h).reshape(h, w)
    return arr.astype(np.float64) / float(maxval)


def _parse_pnm(data: bytes, path: str):
    fields = []
    i = 2
    magic = data[:2]
    while len(fields) < 3:
        while i < len(data) and data[i : i + 1].isspace():
            i += 1
        if data[i : i + 1] == b"#":
            while i < len(data) and data[i] != 0x0A:
                i += 1
            continue
        j = i
        while j < len(data) and not data[j : j + 1].isspace():
            j += 1
        fields.append(int(data[i:j]))
        i = j
    i += 1  # single whitespace after maxval
    w, h, maxval = fields
    return magic, w, h, maxval, data[i:]


# ---------------------------------------------------------------------------
# splits and dataset directories


@dataclass
class DatasetSplit:
    seen: list
    unseen: list
    train_scenes: list
    val_scenes: list
    train_sketches: dict  # class id -> list of relative paths
    val_sketches: dict


def make_splits(config: DataConfig) -> DatasetSplit:
    """Decide seen/unseen classes, scene id ranges, and per-class sketch pools."""
    all_ids = list(range(config.n_classes))
    if config.mode == "closed":
        unseen: list = []
    elif config.mode == "open":
        unseen = sorted(int(u) for u in config.unseen)
        if len(set(unseen)) != len(unseen) or any(u not in all_ids for u in unseen):
            raise DatasetError(f"invalid unseen class ids {config.unseen}")
        if len(unseen) >= config.n_classes / 2:
            raise DatasetError("unseen classes must be fewer than half of all classes")
    else:
        raise DatasetError(f"unknown mode {config.mode!r}")
    seen = [c for c in all_ids if c not in unseen]

    n_sk = config.sketches_per_class
    n_val_sk = config.val_sketches_per_class
    if not (0 < n_val_sk < n_sk):
        raise DatasetError("val sketch count must be positive and below the pool size")
    train_sk, val_sk = {}, {}
    for c in all_ids:
        paths = [f"sketches/{CLASS_NAMES[c]}/{i:04d}.pgm" for i in range(n_sk)]
        val_sk[c] = paths[n_sk - n_val_sk :]
        train_sk[c] = [] if c in unseen else paths[: n_sk - n_val_sk]
    return DatasetSplit(
        seen=seen,
        unseen=unseen,
        train_scenes=list(range(config.n_train)),
        val_scenes=list(range(config.n_train, config.n_train + config.n_val)),
        train_sketches=train_sk,
        val_sketches=val_sk,
    )


def generate_dataset(config: DataConfig, out_dir: str) -> "Dataset":
    """Generate and write a full corpus; returns the loaded Dataset."""
    split = make_splits(config)
    os.makedirs(os.path.join(out_dir, "scenes"), exist_ok=True)
    for name in CLASS_NAMES[: config.n_classes]:
        os.makedirs(os.path.join(out_dir, "sketches", name), exist_ok=True)

    lines = []
    for sid in split.train_scenes + split.val_scenes:
        pool = split.seen if (config.mode == "open" and sid in set(split.train_scenes)) else None
        sample = generate_scene(derive_seed(config.seed, "scene", sid), config, classes=pool)
        rel = f"scenes/{sid:06d}.ppm"
        write_ppm(os.path.join(out_dir, rel), sample.image)
        lines.append(
            json.dumps(
                {
                    "image": rel,
                    "boxes": [[int(v) for v in b] for b in sample.boxes],
                    "classes": [int(c) for c in sample.classes],
                }
            )
        )
    with open(os.path.join(out_dir, "annotations.jsonl"), "w") as f:
        f.write("\n".join(lines) + "\n")

    for c in range(config.n_classes):
        for i in range(config.sketches_per_class):
            img = render_sketch(c, derive_seed(config.seed, "sketch", c, i))
            write_pgm(os.path.join(out_dir, f"sketches/{CLASS_NAMES[c]}/{i:04d}.pgm"), img)

    with open(os.path.join(out_dir, "split.json"), "w") as f:
        json.dump(
            {
                "seen": split.seen,
                "unseen": split.unseen,
                "train_scenes": split.train_scenes,
                "val_scenes": split.val_scenes,
                "train_sketches": {str(k): v for k, v in split.train_sketches.items()},
                "val_sketches": {str(k): v for k, v in split.val_sketches.items()},
                "class_names": CLASS_NAMES[: config.n_classes],
                "mode": config.mode,
                "seed": config.seed,
            },
            f,
            indent=1,
        )
    return Dataset(out_dir)


class Dataset:
    """Read access to a generated corpus directory, with raster caching."""

    image_size = IMAGE_SIZE

    def __init__(self, root: str):
        self.root = root
        split_path = os.path.join(root, "split.json")
        if not os.path.exists(split_path):
            raise DatasetError(f"no split.json under {root}")
        with open(split_path) as f:
            raw = json.load(f)
        self.split = DatasetSplit(
            seen=raw["seen"],
            unseen=raw["unseen"],
            train_scenes=raw["train_scenes"],
            val_scenes=raw["val_scenes"],
            train_sketches={int(k): v for k, v in raw["train_sketches"].items()},
            val_sketches={int(k): v for k, v in raw["val_sketches"].items()},
        )
        self.class_names = raw["class_names"]
        self.annotations = []
        with open(os.path.join(root, "annotations.jsonl")) as f:
            for line in f:
                if line.strip():
                    rec = json.loads(line)
                    self.annotations.append(
                        (rec["image"], Annotation(np.array(rec["boxes"], dtype=np.float64).reshape(-1, 4), rec["classes"]))
                    )
        self._scene_cache: dict = {}
        self._sketch_cache: dict = {}

    def scene_ids(self, subset: str) -> list:
        if subset == "train":
            return list(self.split.train_scenes)
        if subset == "val":
            return list(self.split.val_scenes)
        raise DatasetError(f"unknown subset {subset!r}")

    def annotation(self, sid: int) -> Annotation:
        return self.annotations[sid][1]

    def load_scene(self, sid: int) -> np.ndarray:
        got = self._scene_cache.get(sid)
        if got is None:
            got = read_ppm(os.path.join(self.root, self.annotations[sid][0]))
            self._scene_cache[sid] = got
        return got

    def sketch_pool(self, cls: int, subset: str) -> list:
        pools = self.split.train_sketches if subset == "train" else self.split.val_sketches
        pool = pools.get(int(cls), [])
        if not pool:
            raise DatasetError(f"empty {subset} sketch pool for class {cls}")
        return pool

    def load_sketch(self, rel_path: str) -> np.ndarray:
        got = self._sketch_cache.get(rel_path)
        if got is None:
            got = read_pgm(os.path.join(self.root, rel_path))
            self._sketch_cache[rel_path] = got
        return got
