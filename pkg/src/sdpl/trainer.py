"""SGD with momentum, step-decay schedule, flip augmentation, checkpoints."""

from __future__ import annotations

import json
import logging
import struct
import time
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from . import tensorio
from .data import ViewSet
from .errors import ConfigMismatch, CorruptCheckpoint, ShapeMismatch, VersionMismatch
from .model import SdplConfig, SdplModel
from .tensor import Tensor, backward

log = logging.getLogger(__name__)

CKPT_MAGIC = b"SDPC"
CKPT_VERSION = 1


@dataclass
class OptimConfig:
    lr0: float = 1e-3
    momentum: float = 0.9
    weight_decay: float = 5e-4
    decay_factor: float = 0.75
    decay_every: int = 50
    one_shot_decay: bool = False
    batch: int = 8
    epochs: int = 100
    flip_prob: float = 0.5
    pairs_per_class: int = 1

    def __post_init__(self):
        for name in ("lr0", "momentum", "decay_factor", "decay_every", "batch", "pairs_per_class"):
            if not getattr(self, name) > 0:
                raise ConfigMismatch(f"{name} must be positive")
        if self.weight_decay < 0 or self.epochs < 0 or not 0 <= self.flip_prob <= 1:
            raise ConfigMismatch("weight_decay, epochs must be >= 0 and flip_prob in [0, 1]")

    def lr_at(self, epoch: int) -> float:
        if self.one_shot_decay:
            return self.lr0 * (self.decay_factor if epoch >= self.decay_every else 1.0)
        return self.lr0 * self.decay_factor ** (epoch // self.decay_every)

    @classmethod
    def from_dict(cls, d: dict) -> "OptimConfig":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigMismatch(f"unknown optimizer keys: {sorted(unknown)}")
        return cls(**d)


def sgd_step(params, grads, velocity, cfg: OptimConfig, lr: float | None = None) -> None:
    """``v <- m v + (g + wd p)``; ``p <- p - lr v``.  Decay only where ``p.decay``.

    ``velocity`` is a list aligned with ``params``; entries may start as None.
    """
    lr = cfg.lr0 if lr is None else lr
    if not len(params) == len(grads) == len(velocity):
        raise ShapeMismatch("params, grads and velocity must align")
    for i, (p, g) in enumerate(zip(params, grads)):
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.shape:
            raise ShapeMismatch(f"grad {g.shape} vs param {p.shape}")
        if getattr(p, "decay", True) and cfg.weight_decay:
            g = g + cfg.weight_decay * p.data
        v = velocity[i]
        if v is not None and v.shape != p.shape:
            raise ShapeMismatch(f"velocity {v.shape} vs param {p.shape}")
        v = g if v is None else cfg.momentum * v + g
        velocity[i] = v.astype(p.data.dtype, copy=False)
        p.data = (p.data - lr * velocity[i]).astype(p.data.dtype, copy=False)


class Trainer:
    def __init__(self, model: SdplModel, train: ViewSet, optim: OptimConfig, seed: int = 0, log_path=None):
        if model.config.n_classes != train.n_classes:
            raise ConfigMismatch(f"model has {model.config.n_classes} classes, data has {train.n_classes}")
        self.model = model
        self.train = train
        self.optim = optim
        self.seed = seed
        self.rng = np.random.default_rng(seed)
        self.epoch = 0
        self.params = model.parameters()
        self.velocity = [None] * len(self.params)
        self.losses: list[float] = []
        self.log_path = Path(log_path) if log_path else None

    def _batches(self):
        rng = self.rng
        c = self.train.n_classes
        v = self.train.drone.shape[1]
        order = np.concatenate([rng.permutation(c) for _ in range(self.optim.pairs_per_class)])
        views = rng.integers(0, v, size=len(order))
        flips = rng.random(len(order)) < self.optim.flip_prob
        b = self.optim.batch
        for s in range(0, len(order), b):
            yield order[s : s + b], views[s : s + b], flips[s : s + b]

    def train_epoch(self) -> float:
        lr = self.optim.lr_at(self.epoch)
        start = time.perf_counter()
        total, steps = 0.0, 0
        for cls, views, flips in self._batches():
            drone = self.train.drone[cls, views]
            sat = self.train.satellite[cls]
            if flips.any():
                # same flip for both views of a pair
                drone = np.where(flips[:, None, None, None], drone[..., ::-1], drone)
                sat = np.where(flips[:, None, None, None], sat[..., ::-1], sat)
            self.model.zero_grad()
            loss, _ = self.model.forward_train(Tensor._wrap(np.ascontiguousarray(drone)), Tensor._wrap(np.ascontiguousarray(sat)), cls, self.rng)
            backward(loss)
            sgd_step(self.params, [p.grad for p in self.params], self.velocity, self.optim, lr)
            total += loss.item()
            steps += 1
        mean_loss = total / max(steps, 1)
        self.losses.append(mean_loss)
        if self.log_path is not None:
            with open(self.log_path, "a") as fh:
                rec = {"epoch": self.epoch, "lr": lr, "mean_loss": mean_loss, "wall_time": time.perf_counter() - start}
                fh.write(json.dumps(rec) + "\n")
        log.debug("epoch %d lr %.3g loss %.4f", self.epoch, lr, mean_loss)
        self.epoch += 1
        return mean_loss

    def run(self, epochs: int | None = None, checkpoint_every: int = 0, checkpoint_dir=None) -> list[float]:
        epochs = self.optim.epochs if epochs is None else epochs
        for _ in range(epochs):
            self.train_epoch()
            if checkpoint_every and checkpoint_dir and self.epoch % checkpoint_every == 0:
                self.save(Path(checkpoint_dir) / f"epoch{self.epoch:04d}.sdpc")
        return self.losses

    # ------------------------------------------------------------------
    def save(self, path) -> None:
        save_checkpoint(path, self.model, self)

    def restore(self, path) -> None:
        model, meta, velocity = load_checkpoint(path)
        if model.config.to_json() != self.model.config.to_json():
            raise ConfigMismatch("checkpoint config differs from the trainer's model")
        self.model.load_state([a for _, a in model.state()])
        self.epoch = meta["epoch"]
        self.rng.bit_generator.state = meta["rng_state"]
        self.losses = list(meta["losses"])
        self.velocity = [None if v is None else v.astype(self.model.dtype) for v in velocity]


def train(model: SdplModel, dataset: ViewSet, cfg: OptimConfig, seed: int = 0, log_path=None):
    """Train in place; returns ``(model, per-epoch mean losses)``."""
    t = Trainer(model, dataset, cfg, seed, log_path)
    t.run()
    return model, t.losses


# ----------------------------------------------------------------------
# checkpoint file: magic, u32 version, then length-prefixed sections


def _blob(b: bytes) -> bytes:
    return struct.pack("<I", len(b)) + b


def save_checkpoint(path, model: SdplModel, trainer: Trainer | None = None) -> None:
    meta = {
        "epoch": trainer.epoch if trainer else 0,
        "rng_state": trainer.rng.bit_generator.state if trainer else None,
        "losses": trainer.losses if trainer else [],
        "optim": asdict(trainer.optim) if trainer else None,
        "seed": trainer.seed if trainer else None,
    }
    state = model.state()
    names = [n for n, _ in state]
    meta["tensors"] = names
    velocity = trainer.velocity if trainer else []
    vel_mask = [v is not None for v in velocity]
    meta["velocity_present"] = vel_mask
    parts = [
        CKPT_MAGIC,
        struct.pack("<I", CKPT_VERSION),
        _blob(model.config.to_json().encode()),
        _blob(json.dumps(meta, sort_keys=True).encode()),
        struct.pack("<I", len(state)),
        *(tensorio.encode(a) for _, a in state),
        struct.pack("<I", sum(vel_mask)),
        *(tensorio.encode(v) for v in velocity if v is not None),
    ]
    Path(path).write_bytes(b"".join(parts))


def _read_u32(buf, off):
    if len(buf) - off < 4:
        raise CorruptCheckpoint("truncated checkpoint")
    return struct.unpack_from("<I", buf, off)[0], off + 4


def _read_blob(buf, off):
    n, off = _read_u32(buf, off)
    if len(buf) - off < n:
        raise CorruptCheckpoint("truncated checkpoint section")
    return buf[off : off + n], off + n


def load_checkpoint(path):
    """Returns ``(model, meta, velocity list)``."""
    buf = Path(path).read_bytes()
    if buf[:4] != CKPT_MAGIC:
        raise CorruptCheckpoint("not an SDPC checkpoint")
    version, off = _read_u32(buf, 4)
    if version != CKPT_VERSION:
        raise VersionMismatch(f"checkpoint version {version}, expected {CKPT_VERSION}")
    cfg_blob, off = _read_blob(buf, off)
    meta_blob, off = _read_blob(buf, off)
    try:
        config = SdplConfig.from_json(cfg_blob.decode())
        meta = json.loads(meta_blob.decode())
    except (ValueError, TypeError) as exc:
        raise CorruptCheckpoint(f"unreadable header: {exc}") from None
    n, off = _read_u32(buf, off)
    arrays = []
    for _ in range(n):
        a, off = tensorio.decode(buf, off)
        arrays.append(a)
    nv, off = _read_u32(buf, off)
    vel_arrays = []
    for _ in range(nv):
        a, off = tensorio.decode(buf, off)
        vel_arrays.append(a)
    if off != len(buf):
        raise CorruptCheckpoint("trailing bytes in checkpoint")
    model = SdplModel(config)
    model.load_state(arrays)
    it = iter(vel_arrays)
    velocity = [next(it) if present else None for present in meta.get("velocity_present", [])]
    return model, meta, velocity
