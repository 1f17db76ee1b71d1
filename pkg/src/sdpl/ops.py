"""Differentiable SDPL building blocks: GeM pooling over masks, the
weight-estimation network, shifted-partition fusion and per-part heads."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import tensor as T
from .errors import (
    BatchNormUninitialized,
    CardinalityMismatch,
    EmptyMask,
    LabelOutOfRange,
    ShapeMismatch,
)
from .geometry import RegionMask
from .nn import Linear, Module, Parameter, init_rng, kaiming_normal
from .tensor import Tensor


@dataclass(frozen=True)
class GemParams:
    p: float = 3.0
    eps: float = 1e-6
    learnable: bool = False

    def __post_init__(self):
        if not self.p > 0 or not self.eps > 0:
            raise ValueError(f"GeM needs p > 0 and eps > 0, got p={self.p}, eps={self.eps}")


def _mask_array(mask, feature: Tensor) -> np.ndarray:
    cells = mask.cells if isinstance(mask, RegionMask) else np.asarray(mask, dtype=bool)
    if cells.ndim == 2:
        cells = cells[None]
    if cells.shape[1:] != feature.shape[2:]:
        raise ShapeMismatch(f"mask grid {cells.shape[1:]} vs feature grid {feature.shape[2:]}")
    if np.any(cells.reshape(cells.shape[0], -1).sum(axis=1) == 0):
        raise EmptyMask("GeM pooling over an empty mask")
    return cells


def gem_pool_many(feature: Tensor, masks, params: GemParams, p: Tensor | None = None) -> Tensor:
    """Power mean of ``max(x, eps)`` over each mask: [N,C,H,W] x [K,H,W] -> [N,C,K].

    ``p`` (a single-element tensor) overrides ``params.p`` when the exponent is
    being learned.
    """
    if feature.ndim != 4:
        raise ShapeMismatch(f"feature must be [N,C,H,W], got {feature.shape}")
    cells = _mask_array(masks, feature)
    x = T.clamp_min(feature, params.eps)
    if p is None:
        m = T.masked_mean(T.pow(x, params.p), cells)
        return T.pow(m, 1.0 / params.p)
    m = T.masked_mean(T.pow(x, p), cells)
    return T.pow(m, T.pow(p, -1.0))


def gem_pool(feature: Tensor, mask, params: GemParams, p: Tensor | None = None) -> Tensor:
    """GeM over one region: [N,C,H,W] -> [N,C]."""
    out = gem_pool_many(feature, mask, params, p)
    if out.shape[2] != 1:
        raise ShapeMismatch("gem_pool takes a single mask; use gem_pool_many")
    return T.reshape(out, out.shape[:2])


class PartSet:
    """Ordered per-part pooled vectors stored as one [N, C, K] tensor."""

    def __init__(self, values: Tensor):
        if values.ndim != 3:
            raise ShapeMismatch(f"PartSet values must be [N,C,K], got {values.shape}")
        self.values = values

    @property
    def n_parts(self) -> int:
        return self.values.shape[2]

    @property
    def channels(self) -> int:
        return self.values.shape[1]

    def part(self, k: int) -> Tensor:
        v = T.take(self.values, [k], axis=2)
        return T.reshape(v, v.shape[:2])

    def __len__(self) -> int:
        return self.n_parts


@dataclass(frozen=True)
class FusionWeights:
    """Fixed (centered, top-left, bottom-right) fusion proportions."""

    beta: tuple = (1 / 3, 1 / 3, 1 / 3)

    def __post_init__(self):
        b = tuple(float(x) for x in self.beta)
        if len(b) != 3:
            raise CardinalityMismatch("fusion needs exactly three weights")
        if any(x < 0 or x > 1 for x in b) or abs(sum(b) - 1.0) > 1e-6:
            raise ValueError(f"fusion weights must lie in [0,1] and sum to 1, got {b}")
        object.__setattr__(self, "beta", b)

    def as_tensor(self, n: int, dtype=np.float64) -> Tensor:
        return Tensor(np.tile(np.asarray(self.beta, dtype=dtype), (n, 1)))


HARD_FUSION = FusionWeights((0.8, 0.1, 0.1))


def fuse(sets: Sequence[PartSet], weights) -> PartSet:
    """Weighted sum of part sets; weights [N, len(sets)] or FusionWeights."""
    sets = list(sets)
    if not sets:
        raise CardinalityMismatch("no part sets to fuse")
    shape = sets[0].values.shape
    if any(s.values.shape != shape for s in sets):
        raise CardinalityMismatch(f"part sets disagree: {[s.values.shape for s in sets]}")
    n = shape[0]
    if isinstance(weights, FusionWeights):
        weights = weights.as_tensor(n, sets[0].values.dtype)
    if weights.shape != (n, len(sets)):
        raise CardinalityMismatch(f"weights {weights.shape} vs {len(sets)} sets of batch {n}")
    out = None
    for j, s in enumerate(sets):
        col = T.reshape(T.take(weights, [j], axis=1), (n, 1, 1))
        term = T.mul(s.values, T.expand(col, shape))
        out = term if out is None else T.add(out, term)
    return PartSet(out)


class WeightEstimation(Module):
    """conv1x1 (C -> C/2) -> avg pool -> FC -> FC -> FC(3) -> softmax.

    The final layer starts at zero so initial weights are uniform.
    """

    def __init__(self, in_channels: int, hidden: int = 512, *, seed=0, dtype=np.float64):
        mid = max(in_channels // 2, 1)
        rng = init_rng(seed, "we.conv")
        self.conv_weight = Parameter(kaiming_normal(rng, (mid, in_channels), in_channels, dtype))
        self.conv_bias = Parameter(np.zeros(mid, dtype=dtype), decay=False)
        self.fc1 = Linear(mid, hidden, seed=seed, name="we.fc1", dtype=dtype)
        self.fc2 = Linear(hidden, hidden, seed=seed, name="we.fc2", dtype=dtype)
        self.out = Linear(hidden, 3, seed=seed, name="we.out", dtype=dtype, std=0.0)
        self.in_channels = in_channels

    def __call__(self, feature: Tensor, trace: list | None = None) -> Tensor:
        if feature.ndim != 4 or feature.shape[1] != self.in_channels:
            raise ShapeMismatch(f"weight estimation expects {self.in_channels} channels, got {feature.shape}")
        h = T.relu(T.conv1x1(feature, self.conv_weight, self.conv_bias))
        steps = [h]
        h = T.global_avg_pool(h)
        steps.append(h)
        h = T.relu(self.fc1(h))
        steps.append(h)
        h = T.relu(self.fc2(h))
        steps.append(h)
        h = self.out(h)
        steps.append(h)
        beta = T.softmax(h)
        steps.append(beta)
        if trace is not None:
            trace.extend(steps)
        return beta


def weight_estimation(feature: Tensor, module: WeightEstimation) -> Tensor:
    return module(feature)


class ClassifierHead(Module):
    """compress (C -> bottleneck) -> batch norm -> dropout -> cls (no bias)."""

    _buffers = ("running_mean", "running_var", "bn_steps")

    def __init__(
        self,
        in_features: int,
        n_classes: int,
        bottleneck: int = 512,
        *,
        dropout: float = 0.5,
        momentum: float = 0.1,
        seed=0,
        name="head",
        dtype=np.float64,
    ):
        self.compress = Linear(in_features, bottleneck, seed=seed, name=f"{name}.compress", dtype=dtype)
        self.bn_gamma = Parameter(np.ones(bottleneck, dtype=dtype), decay=False)
        self.bn_beta = Parameter(np.zeros(bottleneck, dtype=dtype), decay=False)
        self.cls = Linear(bottleneck, n_classes, bias=False, seed=seed, name=f"{name}.cls", dtype=dtype, std=0.001)
        self.running_mean = np.zeros(bottleneck, dtype=dtype)
        self.running_var = np.ones(bottleneck, dtype=dtype)
        self.bn_steps = np.zeros(1, dtype=dtype)
        self.dropout = dropout
        self.momentum = momentum

    def embed(self, x: Tensor) -> Tensor:
        return self.compress(x)

    def __call__(self, x: Tensor, training: bool, rng: np.random.Generator | None = None):
        """Return ``(logits, bottleneck_features)``."""
        if x.ndim != 2 or x.shape[1] != self.compress.weight.shape[1]:
            raise ShapeMismatch(f"head expects [N,{self.compress.weight.shape[1]}], got {x.shape}")
        feat = self.compress(x)
        if training:
            h, mu, var = T.batch_norm(feat, self.bn_gamma, self.bn_beta)
            n = x.shape[0]
            unbiased = var * n / (n - 1) if n > 1 else var
            m = self.momentum
            self.running_mean = ((1 - m) * self.running_mean + m * mu).astype(self.running_mean.dtype)
            self.running_var = ((1 - m) * self.running_var + m * unbiased).astype(self.running_var.dtype)
            self.bn_steps = self.bn_steps + 1
            if rng is None:
                rng = np.random.default_rng(0)
            h = T.dropout(h, self.dropout, rng)
        else:
            if self.bn_steps[0] == 0:
                raise BatchNormUninitialized("classifier evaluated before any training step")
            h, _, _ = T.batch_norm(feat, self.bn_gamma, self.bn_beta, self.running_mean, self.running_var)
        return self.cls(h), feat


def classify(part: Tensor, head: ClassifierHead, training: bool, rng=None):
    return head(part, training, rng)


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean over the batch of ``-log softmax(logits)[label]``."""
    labels = np.asarray(labels)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeMismatch(f"logits {logits.shape} vs labels {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= logits.shape[1]):
        raise LabelOutOfRange(f"labels must lie in [0, {logits.shape[1]})")
    return T.nll_mean(T.log_softmax(logits), labels)
