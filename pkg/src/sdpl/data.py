"""Seeded synthetic cross-view scenes and University-1652-style folders.

Each class is a small top-down "site": a background, scattered context
blocks and a central target.  The satellite view renders the layout as is;
drone view ``k`` renders it under a seeded translation (<= 10% of the
canvas), scale (0.9-1.1) and colour jitter.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import imageio
from .errors import InconsistentViewStructure, MalformedImage

SATELLITE = "satellite"
DRONE = "drone"


@dataclass(frozen=True)
class Primitive:
    kind: str  # "rect" or "disc"
    cx: float
    cy: float
    sx: float  # half-width (rect) or radius (disc)
    sy: float
    color: tuple


@dataclass(frozen=True)
class SceneSpec:
    class_id: int
    seed: int
    background: tuple = (0.5, 0.5, 0.5)
    layout: tuple = ()


def make_scene(class_id: int, seed: int, n_context: int = 10) -> SceneSpec:
    rng = np.random.default_rng([int(seed), int(class_id), 0])
    background = tuple(rng.uniform(0.15, 0.6, 3))
    prims = []
    for _ in range(n_context):
        kind = "rect" if rng.random() < 0.6 else "disc"
        cx, cy = rng.uniform(0.0, 1.0, 2)
        s = rng.uniform(0.04, 0.14, 2)
        prims.append(Primitive(kind, cx, cy, s[0], s[1] if kind == "rect" else s[0], tuple(rng.uniform(0, 1, 3))))
    # central target: a block with an inner feature
    tw, th = rng.uniform(0.1, 0.18, 2)
    prims.append(Primitive("rect", 0.5, 0.5, tw, th, tuple(rng.uniform(0, 1, 3))))
    inner = "disc" if rng.random() < 0.5 else "rect"
    prims.append(Primitive(inner, 0.5 + rng.uniform(-0.04, 0.04), 0.5 + rng.uniform(-0.04, 0.04),
                           0.5 * min(tw, th), 0.5 * min(tw, th), tuple(rng.uniform(0, 1, 3))))
    return SceneSpec(class_id, seed, background, tuple(prims))


@dataclass(frozen=True)
class ViewJitter:
    tx: float = 0.0
    ty: float = 0.0
    scale: float = 1.0
    gain: tuple = (1.0, 1.0, 1.0)
    bias: tuple = (0.0, 0.0, 0.0)


def drone_jitter(scene: SceneSpec, k: int) -> ViewJitter:
    rng = np.random.default_rng([int(scene.seed), int(scene.class_id), 1000 + int(k)])
    tx, ty = rng.uniform(-0.1, 0.1, 2)
    return ViewJitter(tx, ty, rng.uniform(0.9, 1.1), tuple(rng.uniform(0.9, 1.1, 3)), tuple(rng.uniform(-0.03, 0.03, 3)))


def render(scene: SceneSpec, size: int, jitter: ViewJitter = ViewJitter()) -> np.ndarray:
    """Rasterise to uint8 [H, W, 3].  Pixel centers sample the scene plane."""
    coords = (np.arange(size) + 0.5) / size
    v, u = np.meshgrid(coords, coords, indexing="ij")  # v: row (y), u: col (x)
    # inverse of: p' = c + s (p - c) + t
    x = 0.5 + (u - 0.5 - jitter.tx) / jitter.scale
    y = 0.5 + (v - 0.5 - jitter.ty) / jitter.scale
    img = np.empty((size, size, 3))
    img[:] = scene.background
    for p in scene.layout:
        if p.kind == "rect":
            inside = (np.abs(x - p.cx) <= p.sx) & (np.abs(y - p.cy) <= p.sy)
        else:
            inside = (x - p.cx) ** 2 + (y - p.cy) ** 2 <= p.sx**2
        img[inside] = p.color
    img = img * np.asarray(jitter.gain) + np.asarray(jitter.bias)
    return np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)


def render_pair(scene: SceneSpec, view, size: int = 64, dtype=np.float32) -> np.ndarray:
    """``view`` is ``"satellite"`` or ``("drone", k)``; returns [3, S, S] in [0, 1]."""
    if view == SATELLITE:
        jitter = ViewJitter()
    else:
        kind, k = view
        if kind != DRONE:
            raise ValueError(f"unknown view {view!r}")
        jitter = drone_jitter(scene, k)
    return imageio.to_chw_float(render(scene, size, jitter), dtype)


@dataclass(frozen=True)
class DatasetSplit:
    train_classes: tuple = tuple(range(30))
    test_classes: tuple = tuple(range(30, 50))
    drone_views: int = 8
    image_size: int = 64
    seed: int = 0

    def __post_init__(self):
        if set(self.train_classes) & set(self.test_classes):
            raise ValueError("train and test classes overlap")

    @classmethod
    def default(cls, n_train=30, n_test=20, drone_views=8, image_size=64, seed=0) -> "DatasetSplit":
        return cls(tuple(range(n_train)), tuple(range(n_train, n_train + n_test)), drone_views, image_size, seed)

    def to_dict(self) -> dict:
        return {
            "train": list(self.train_classes),
            "test": list(self.test_classes),
            "drone_views": self.drone_views,
            "image_size": self.image_size,
            "seed": self.seed,
        }


@dataclass
class ViewSet:
    """Images of a set of classes: drone [C, V, 3, S, S], satellite [C, 3, S, S]."""

    class_ids: np.ndarray
    drone: np.ndarray
    satellite: np.ndarray
    ids_drone: list = field(default_factory=list)
    ids_satellite: list = field(default_factory=list)

    @property
    def n_classes(self) -> int:
        return len(self.class_ids)


def synth_views(split: DatasetSplit, classes, dtype=np.float32) -> ViewSet:
    s = split.image_size
    classes = np.asarray(classes, dtype=np.int64)
    drone = np.empty((len(classes), split.drone_views, 3, s, s), dtype=dtype)
    sat = np.empty((len(classes), 3, s, s), dtype=dtype)
    ids_d, ids_s = [], []
    for i, c in enumerate(classes):
        scene = make_scene(int(c), split.seed)
        sat[i] = render_pair(scene, SATELLITE, s, dtype)
        ids_s.append(f"{c:04d}/satellite/00")
        for k in range(split.drone_views):
            drone[i, k] = render_pair(scene, (DRONE, k), s, dtype)
            ids_d.append(f"{c:04d}/drone/{k:02d}")
    return ViewSet(classes, drone, sat, ids_d, ids_s)


def write_dataset(root, split: DatasetSplit) -> Path:
    """Render every class to ``root/<class>/{drone,satellite}/*.ppm`` plus split.json."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    for c in list(split.train_classes) + list(split.test_classes):
        scene = make_scene(int(c), split.seed)
        d = root / f"{c:04d}"
        (d / DRONE).mkdir(parents=True, exist_ok=True)
        (d / SATELLITE).mkdir(parents=True, exist_ok=True)
        imageio.write_ppm(d / SATELLITE / "00.ppm", render(scene, split.image_size))
        for k in range(split.drone_views):
            imageio.write_ppm(d / DRONE / f"{k:02d}.ppm", render(scene, split.image_size, drone_jitter(scene, k)))
    (root / "split.json").write_text(json.dumps(split.to_dict(), sort_keys=True, indent=1) + "\n")
    return root


@dataclass(frozen=True)
class ImageRecord:
    id: str
    class_label: int
    view: str
    image: np.ndarray  # [3, S, S] float


def load_directory(root, dtype=np.float32) -> list[ImageRecord]:
    """Load ``root/<class>/<view>/<image>`` in lexicographic order.

    Class folders named by integers keep that integer as label; otherwise
    labels are the sorted folder index.
    """
    root = Path(root)
    if not root.is_dir():
        raise InconsistentViewStructure(f"{root} is not a directory")
    classes = sorted(p for p in root.iterdir() if p.is_dir())
    if not classes:
        raise InconsistentViewStructure(f"no class folders under {root}")
    numeric = all(p.name.isdigit() for p in classes)
    views = None
    records = []
    shape = None
    for idx, cdir in enumerate(classes):
        label = int(cdir.name) if numeric else idx
        vdirs = sorted(p.name for p in cdir.iterdir() if p.is_dir())
        if views is None:
            views = vdirs
        if vdirs != views or not vdirs:
            raise InconsistentViewStructure(f"{cdir.name} has views {vdirs}, expected {views}")
        for view in vdirs:
            files = sorted(p for p in (cdir / view).iterdir() if p.is_file())
            if not files:
                raise InconsistentViewStructure(f"{cdir.name}/{view} holds no images")
            for f in files:
                try:
                    img = imageio.to_chw_float(imageio.read(f), dtype)
                except MalformedImage as exc:
                    raise MalformedImage(f"{f}: {exc}") from None
                if shape is None:
                    shape = img.shape
                elif img.shape != shape:
                    raise MalformedImage(f"{f}: shape {img.shape} differs from {shape}")
                records.append(ImageRecord(f"{cdir.name}/{view}/{f.stem}", label, view, img))
    return records


def views_from_records(records, classes=None, dtype=np.float32) -> ViewSet:
    """Group loaded records into a ViewSet (equal drone count per class required)."""
    by_class: dict[int, dict] = {}
    for r in records:
        if classes is not None and r.class_label not in classes:
            continue
        slot = by_class.setdefault(r.class_label, {DRONE: [], SATELLITE: []})
        if r.view not in slot:
            raise InconsistentViewStructure(f"unexpected view {r.view!r}")
        slot[r.view].append(r)
    if not by_class:
        raise InconsistentViewStructure("no records selected")
    ids = sorted(by_class)
    n_drone = {len(by_class[c][DRONE]) for c in ids}
    if len(n_drone) != 1 or any(len(by_class[c][SATELLITE]) != 1 for c in ids):
        raise InconsistentViewStructure("each class needs one satellite image and equal drone counts")
    drone = np.stack([np.stack([r.image for r in by_class[c][DRONE]]) for c in ids]).astype(dtype)
    sat = np.stack([by_class[c][SATELLITE][0].image for c in ids]).astype(dtype)
    return ViewSet(
        np.asarray(ids),
        drone,
        sat,
        [r.id for c in ids for r in by_class[c][DRONE]],
        [by_class[c][SATELLITE][0].id for c in ids],
    )


def load_split(root) -> DatasetSplit:
    d = json.loads((Path(root) / "split.json").read_text())
    return DatasetSplit(tuple(d["train"]), tuple(d["test"]), d["drone_views"], d["image_size"], d["seed"])
