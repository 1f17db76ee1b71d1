"""Full SDPL forward pass: shared backbone, shifted dense partitions, GeM,
fusion and per-part classifiers."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from typing import Sequence

import numpy as np

from . import tensor as T
from .errors import ConfigMismatch, InvalidScale, ShapeMismatch
from .geometry import RingLayout, dps_segment_count, mask_stack, shift_threshold
from .nn import Conv2d, Module, Parameter
from .ops import (
    ClassifierHead,
    FusionWeights,
    GemParams,
    PartSet,
    WeightEstimation,
    cross_entropy,
    fuse,
    gem_pool_many,
)
from .tensor import Tensor, no_grad

FUSION_MODES = ("adaptive", "hard", "none")


@dataclass
class SdplConfig:
    n_sps: int = 4
    delta_h1: int = 2
    delta_h2: int = -2
    fusion: str = "adaptive"
    hard_beta: tuple = (0.8, 0.1, 0.1)
    partition: str = "dps"
    # offset of the single partition used when fusion == "none"
    single_offset: int = 0
    gem_p: float = 3.0
    gem_eps: float = 1e-6
    gem_learnable: bool = False
    n_classes: int = 30
    backbone: dict = field(default_factory=lambda: {"kind": "conv", "channels": [16, 32, 64, 64], "strides": [2, 1, 2, 1]})
    image_size: int = 64
    bottleneck: int = 512
    we_hidden: int = 512
    dropout: float = 0.5
    normalize_descriptor: bool = False
    dtype: str = "float32"
    seed: int = 0

    def __post_init__(self):
        self.hard_beta = tuple(float(b) for b in self.hard_beta)
        if self.fusion not in FUSION_MODES:
            raise ConfigMismatch(f"fusion must be one of {FUSION_MODES}, got {self.fusion!r}")
        if self.partition not in ("dps", "sps"):
            raise ConfigMismatch(f"partition must be 'dps' or 'sps', got {self.partition!r}")
        dps_segment_count(self.n_sps)
        FusionWeights(self.hard_beta)
        GemParams(self.gem_p, self.gem_eps)

    @property
    def offsets(self) -> tuple:
        if self.fusion == "none":
            return (self.single_offset,)
        return (0, self.delta_h1, self.delta_h2)

    @property
    def n_parts(self) -> int:
        return self.n_sps if self.partition == "sps" else dps_segment_count(self.n_sps)

    def to_json(self) -> str:
        d = asdict(self)
        d["hard_beta"] = list(self.hard_beta)
        return json.dumps(d, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "SdplConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigMismatch(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_json(cls, text: str) -> "SdplConfig":
        return cls.from_dict(json.loads(text))


class MiniBackbone(Module):
    """3x3 conv + ReLU blocks; total stride = product of block strides."""

    def __init__(self, channels: Sequence[int], strides: Sequence[int], *, in_channels=3, seed=0, dtype=np.float32):
        if len(channels) != len(strides):
            raise ConfigMismatch("backbone channels and strides differ in length")
        self.blocks = []
        c_in = in_channels
        for i, (c, s) in enumerate(zip(channels, strides)):
            self.blocks.append(Conv2d(c_in, c, 3, stride=s, seed=seed, name=f"backbone.{i}", dtype=dtype))
            c_in = c
        self.out_channels = c_in
        self.stride = int(np.prod(strides))

    def __call__(self, x: Tensor) -> Tensor:
        for block in self.blocks:
            x = T.relu(block(x))
        return x


class AvgPoolBackbone(Module):
    """Parameter-free stand-in: k x k average pooling of the raw image."""

    def __init__(self, factor: int, in_channels: int = 3):
        self.stride = factor
        self.out_channels = in_channels

    def __call__(self, x: Tensor) -> Tensor:
        return T.avg_pool2d(x, self.stride)


def build_backbone(spec: dict, seed: int, dtype):
    kind = spec.get("kind", "conv")
    if kind == "conv":
        return MiniBackbone(spec["channels"], spec["strides"], seed=seed, dtype=dtype)
    if kind == "avgpool":
        return AvgPoolBackbone(int(spec["factor"]))
    raise ConfigMismatch(f"unknown backbone kind {kind!r}")


class SdplModel(Module):
    def __init__(self, config: SdplConfig):
        self.config = cfg = config
        dtype = np.dtype(cfg.dtype)
        self.dtype = dtype
        self.backbone = build_backbone(cfg.backbone, cfg.seed, dtype)
        if cfg.image_size % self.backbone.stride:
            raise ConfigMismatch(f"image size {cfg.image_size} not divisible by backbone stride {self.backbone.stride}")
        self.grid = cfg.image_size // self.backbone.stride
        if self.grid % 2 or self.grid < 2 * cfg.n_sps:
            raise ConfigMismatch(f"feature grid {self.grid} must be even and >= 2*n_sps")
        limit = shift_threshold(self.grid, cfg.n_sps)
        for dh in cfg.offsets:
            if abs(dh) > limit:
                raise ConfigMismatch(f"offset {dh} exceeds {float(limit)} on a {self.grid}x{self.grid} grid")
        self.gem = GemParams(cfg.gem_p, cfg.gem_eps, cfg.gem_learnable)
        self.gem_p = Parameter(np.array([cfg.gem_p], dtype=dtype), decay=False) if cfg.gem_learnable else None
        channels = self.backbone.out_channels
        self.weight_estimation = (
            WeightEstimation(channels, cfg.we_hidden, seed=cfg.seed, dtype=dtype) if cfg.fusion == "adaptive" else None
        )
        self.heads = [
            ClassifierHead(
                channels, cfg.n_classes, cfg.bottleneck, dropout=cfg.dropout, seed=cfg.seed, name=f"head.{k}", dtype=dtype
            )
            for k in range(cfg.n_parts)
        ]
        self.layouts = [RingLayout.shifted(cfg.n_sps, self.grid, self.grid, dh) for dh in cfg.offsets]
        self.segments = self.layouts[0].segments(cfg.partition)
        self.masks = [mask_stack(layout, cfg.partition) for layout in self.layouts]

    # ------------------------------------------------------------------
    def _check_images(self, images: Tensor) -> None:
        s = self.config.image_size
        if images.ndim != 4 or images.shape[1:] != (3, s, s):
            raise ConfigMismatch(f"expected images [N,3,{s},{s}], got {images.shape}")

    def features(self, images: Tensor) -> Tensor:
        self._check_images(images)
        if images.dtype != self.dtype:
            images = Tensor._wrap(images.data.astype(self.dtype))
        return self.backbone(images)

    def part_sets(self, f: Tensor) -> list[PartSet]:
        return [PartSet(gem_pool_many(f, m, self.gem, self.gem_p)) for m in self.masks]

    def fusion_weights(self, f: Tensor):
        cfg = self.config
        if cfg.fusion == "adaptive":
            return self.weight_estimation(f)
        return FusionWeights(cfg.hard_beta)

    def fused_parts(self, images: Tensor) -> PartSet:
        f = self.features(images)
        sets = self.part_sets(f)
        if self.config.fusion == "none":
            return sets[0]
        return fuse(sets, self.fusion_weights(f))

    def forward_view(self, images: Tensor, labels, training: bool, rng=None):
        z = self.fused_parts(images)
        loss = None
        logits = []
        for k, head in enumerate(self.heads):
            out, _ = head(z.part(k), training, rng)
            logits.append(out)
            ce = cross_entropy(out, labels)
            loss = ce if loss is None else T.add(loss, ce)
        return loss, logits

    def forward_train(self, images_drone: Tensor, images_sat: Tensor, labels, rng=None, training: bool = True):
        """Summed cross-entropy over every part of both views."""
        if images_drone.shape[0] != images_sat.shape[0] or len(labels) != images_drone.shape[0]:
            raise ShapeMismatch("drone/satellite batches and labels must align")
        loss_d, logits_d = self.forward_view(images_drone, labels, training, rng)
        loss_s, logits_s = self.forward_view(images_sat, labels, training, rng)
        return T.add(loss_d, loss_s), {"drone": logits_d, "satellite": logits_s}

    # ------------------------------------------------------------------
    def part_embeddings(self, images: Tensor) -> np.ndarray:
        """Bottleneck features of every part, [N, K, bottleneck]."""
        with no_grad():
            z = self.fused_parts(images)
            outs = [head.embed(z.part(k)).data for k, head in enumerate(self.heads)]
        e = np.stack(outs, axis=1)
        if self.config.normalize_descriptor:
            e = e / np.maximum(np.linalg.norm(e, axis=2, keepdims=True), 1e-12)
        return e

    def forward_embed(self, images: Tensor) -> np.ndarray:
        e = self.part_embeddings(images)
        return e.reshape(e.shape[0], -1)

    def scale_parts(self, scale: int) -> list[int]:
        if not 1 <= scale <= self.config.n_sps:
            raise InvalidScale(f"scale must lie in 1..{self.config.n_sps}, got {scale}")
        return [k for k, s in enumerate(self.segments) if s.j <= scale]

    def embed_scale_subset(self, images: Tensor, scale: int) -> np.ndarray:
        idx = self.scale_parts(scale)
        e = self.part_embeddings(images)[:, idx]
        return e.reshape(e.shape[0], -1)

    # ------------------------------------------------------------------
    def state(self) -> list[tuple[str, np.ndarray]]:
        """Parameters then buffers, in canonical order."""
        out = [(n, p.data) for n, p in self.named_parameters()]
        out += [(n, b) for n, b in self.named_buffers()]
        return out

    def load_state(self, arrays: Sequence[np.ndarray]) -> None:
        params = list(self.named_parameters())
        buffers = list(self.named_buffers())
        if len(arrays) != len(params) + len(buffers):
            raise ConfigMismatch(f"state has {len(arrays)} tensors, model needs {len(params) + len(buffers)}")
        for (name, p), a in zip(params, arrays):
            if a.shape != p.shape:
                raise ConfigMismatch(f"{name}: shape {a.shape} vs {p.shape}")
            p.data = np.array(a, dtype=self.dtype)
        owners = self._buffer_owners()
        for (name, b), a in zip(buffers, arrays[len(params):]):
            if a.shape != b.shape:
                raise ConfigMismatch(f"{name}: shape {a.shape} vs {b.shape}")
            owner, attr = owners[name]
            setattr(owner, attr, np.array(a, dtype=self.dtype))

    def _buffer_owners(self):
        owners = {}
        for k, head in enumerate(self.heads):
            for attr in head._buffers:
                owners[f"heads.{k}.{attr}"] = (head, attr)
        return owners
