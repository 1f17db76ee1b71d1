"""Desk-scale experiment runners shared by the CLI, scripts and acceptance tests."""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .data import DatasetSplit, ViewSet, synth_views
from .model import SdplConfig, SdplModel
from .offsets import PadSpec, sweep
from .retrieval import DescriptorIndex, MetricsReport, evaluate_protocol
from .tensor import Tensor
from .trainer import OptimConfig, Trainer

# synthetic-benchmark optimiser: default momentum/decay/schedule, larger lr0
SYNTH_OPTIM = OptimConfig(lr0=3e-3, batch=8, epochs=100)

# ablation variants
VARIANTS = {
    "sdpl": dict(fusion="adaptive"),
    "hard": dict(fusion="hard", hard_beta=(0.8, 0.1, 0.1)),
    "dps": dict(fusion="none"),
    "sps": dict(fusion="none", partition="sps"),
    "global": dict(fusion="none", n_sps=1),
    "dps-tl": dict(fusion="none", single_offset=2),
    "dps-br": dict(fusion="none", single_offset=-2),
}


def variant_config(name: str, **overrides) -> SdplConfig:
    return SdplConfig(**{**VARIANTS[name], **overrides})


def embed_images(model: SdplModel, images: np.ndarray, batch: int = 64, scale: int | None = None) -> np.ndarray:
    out = []
    for s in range(0, len(images), batch):
        x = Tensor._wrap(np.ascontiguousarray(images[s : s + batch], dtype=model.dtype))
        out.append(model.forward_embed(x) if scale is None else model.embed_scale_subset(x, scale))
    return np.concatenate(out)


def drone_queries(views: ViewSet):
    """Flatten drone images into (images, labels, ids)."""
    c, v = views.drone.shape[:2]
    images = views.drone.reshape(c * v, *views.drone.shape[2:])
    labels = np.repeat(views.class_ids, v)
    return images, labels, list(views.ids_drone)


def satellite_gallery(model, views: ViewSet, scale=None) -> DescriptorIndex:
    return DescriptorIndex(list(views.ids_satellite), views.class_ids, embed_images(model, views.satellite, scale=scale))


def drone_to_satellite(model: SdplModel, views: ViewSet, scale=None, ks=(1, 5, 10)) -> MetricsReport:
    images, labels, ids = drone_queries(views)
    q = DescriptorIndex(ids, labels, embed_images(model, images, scale=scale))
    return evaluate_protocol(q, satellite_gallery(model, views, scale), ks)


def satellite_to_drone(model: SdplModel, views: ViewSet, scale=None, ks=(1, 5, 10)) -> MetricsReport:
    images, labels, ids = drone_queries(views)
    g = DescriptorIndex(ids, labels, embed_images(model, images, scale=scale))
    q = DescriptorIndex(list(views.ids_satellite), views.class_ids, embed_images(model, views.satellite, scale=scale))
    return evaluate_protocol(q, g, ks)


def shift_sweep(model: SdplModel, views: ViewSet, specs, scale=None):
    images, labels, ids = drone_queries(views)
    gallery = satellite_gallery(model, views, scale)
    return sweep(lambda x: embed_images(model, x, scale=scale), images, labels, gallery, specs, ids)


@dataclass
class Run:
    model: SdplModel
    losses: list
    train: ViewSet
    test: ViewSet


_view_cache: dict = {}


def dataset(split: DatasetSplit) -> tuple[ViewSet, ViewSet]:
    key = split
    if key not in _view_cache:
        _view_cache[key] = (synth_views(split, split.train_classes), synth_views(split, split.test_classes))
    return _view_cache[key]


def train_run(config: SdplConfig, optim: OptimConfig = SYNTH_OPTIM, split: DatasetSplit | None = None, seed: int = 0) -> Run:
    """Train ``config`` (model init seeded by ``seed``) on the synthetic split."""
    split = split or DatasetSplit.default()
    train, test = dataset(split)
    config = replace(config, n_classes=train.n_classes, seed=seed, image_size=split.image_size)
    model = SdplModel(config)
    t = Trainer(model, train, optim, seed=seed)
    t.run()
    return Run(model, t.losses, train, test)


def chance_recall(views: ViewSet) -> float:
    return 1.0 / views.n_classes


def largest_pad(image_size: int) -> list[PadSpec]:
    from .offsets import PATTERNS, scaled_pads

    p = scaled_pads(image_size)[-1]
    return [PadSpec(sh * p, sw * p) for sh, sw in PATTERNS]
