"""Euclidean ranking, Recall@K and AP."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensorio
from .errors import DimensionMismatch, EmptyGallery, NoRelevantItem, SchemaMismatch


@dataclass(frozen=True)
class DescriptorRecord:
    id: str
    class_label: int
    vector: np.ndarray


@dataclass
class DescriptorIndex:
    """Column-wise store of descriptor records."""

    ids: list
    labels: np.ndarray
    vectors: np.ndarray

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.vectors = np.asarray(self.vectors)
        if self.vectors.ndim != 2 or len(self.ids) != len(self.labels) or len(self.labels) != len(self.vectors):
            raise DimensionMismatch("ids, labels and vectors must align as [n], [n], [n, D]")

    @classmethod
    def from_records(cls, records) -> "DescriptorIndex":
        records = list(records)
        dims = {len(r.vector) for r in records}
        if len(dims) > 1:
            raise DimensionMismatch(f"records have mixed vector lengths {sorted(dims)}")
        vecs = np.stack([np.asarray(r.vector) for r in records]) if records else np.zeros((0, 0))
        return cls([r.id for r in records], [r.class_label for r in records], vecs)

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def records(self):
        return [DescriptorRecord(i, int(l), v) for i, l, v in zip(self.ids, self.labels, self.vectors)]

    def save(self, stem) -> None:
        """``stem.sdpt`` holds the [n, D] matrix; ``stem.json`` the row sidecar."""
        stem = Path(stem)
        tensorio.save(stem.with_suffix(".sdpt"), self.vectors)
        side = [{"id": i, "class_label": int(l), "offset": k} for k, (i, l) in enumerate(zip(self.ids, self.labels))]
        stem.with_suffix(".json").write_text(json.dumps(side, indent=1) + "\n")

    @classmethod
    def load(cls, stem) -> "DescriptorIndex":
        stem = Path(stem)
        vectors = tensorio.load(stem.with_suffix(".sdpt"))
        side = json.loads(stem.with_suffix(".json").read_text())
        try:
            side = sorted(side, key=lambda r: r["offset"])
            ids = [r["id"] for r in side]
            labels = [r["class_label"] for r in side]
        except (KeyError, TypeError) as exc:
            raise SchemaMismatch(f"descriptor sidecar missing field: {exc}") from None
        if [r["offset"] for r in side] != list(range(len(vectors))):
            raise SchemaMismatch("sidecar offsets do not cover the descriptor rows")
        return cls(ids, labels, vectors)


def _id_order(ids) -> np.ndarray:
    """Rank of each id under ascending string order."""
    order = sorted(range(len(ids)), key=lambda k: ids[k])
    rank = np.empty(len(ids), dtype=np.int64)
    rank[order] = np.arange(len(ids))
    return rank


def distances(queries: np.ndarray, gallery: np.ndarray, chunk: int = 256) -> np.ndarray:
    """Pairwise Euclidean distances accumulated in float64."""
    q = np.asarray(queries, dtype=np.float64)
    g = np.asarray(gallery, dtype=np.float64)
    if q.ndim != 2 or g.ndim != 2 or q.shape[1] != g.shape[1]:
        raise DimensionMismatch(f"query dim {q.shape} vs gallery dim {g.shape}")
    out = np.empty((len(q), len(g)))
    step = max(1, chunk * 1024 // max(1, g.size))
    for s in range(0, len(q), step):
        diff = q[s : s + step, None, :] - g[None, :, :]
        out[s : s + step] = np.sqrt(np.einsum("qgd,qgd->qg", diff, diff))
    return out


def rank_indices(queries: np.ndarray, gallery: np.ndarray, gallery_ids) -> np.ndarray:
    """Gallery positions per query by ascending distance, ties by ascending id."""
    if len(gallery_ids) == 0:
        raise EmptyGallery("gallery is empty")
    d = distances(queries, gallery)
    tie = _id_order(gallery_ids)
    return np.stack([np.lexsort((tie, row)) for row in d]) if len(d) else np.zeros((0, len(gallery_ids)), int)


def rank(query: DescriptorRecord, gallery) -> list:
    gallery = list(gallery)
    if not gallery:
        raise EmptyGallery("gallery is empty")
    idx = DescriptorIndex.from_records(gallery)
    q = np.asarray(query.vector)[None]
    if q.shape[1] != idx.dim:
        raise DimensionMismatch(f"query length {q.shape[1]} vs gallery {idx.dim}")
    order = rank_indices(q, idx.vectors, idx.ids)[0]
    return [idx.ids[k] for k in order]


def recall_at_k(relevance: np.ndarray, k: int) -> float:
    """Fraction of queries with a relevant item in the top ``k``.

    ``relevance`` is boolean [n_queries, n_gallery] in ranked order (a single
    1-D ranking is treated as one query).
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    rel = np.atleast_2d(np.asarray(relevance, dtype=bool))
    if rel.shape[0] == 0:
        return 0.0
    return float(rel[:, :k].any(axis=1).mean())


def average_precision(relevance: np.ndarray) -> float:
    """Mean over queries of the precision averaged at each relevant hit."""
    rel = np.atleast_2d(np.asarray(relevance, dtype=bool))
    n_rel = rel.sum(axis=1)
    if np.any(n_rel == 0):
        raise NoRelevantItem("a query has no relevant gallery item")
    if rel.shape[0] == 0:
        return 0.0
    hits = np.cumsum(rel, axis=1)
    pos = np.arange(1, rel.shape[1] + 1)
    ap = (rel * hits / pos).sum(axis=1) / n_rel
    return float(ap.mean())


@dataclass
class MetricsReport:
    recall_at: dict
    ap: float
    num_queries: int
    num_gallery: int
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = {f"recall@{k}": v for k, v in sorted(self.recall_at.items())}
        d.update(ap=self.ap, num_queries=self.num_queries, num_gallery=self.num_gallery)
        d.update(self.extra)
        return d

    def write(self, stem) -> None:
        stem = Path(stem)
        d = self.to_dict()
        stem.with_suffix(".json").write_text(json.dumps(d, sort_keys=True, indent=1) + "\n")
        with open(stem.with_suffix(".csv"), "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(list(d))
            w.writerow([d[k] for k in d])


def evaluate_protocol(queries: DescriptorIndex, gallery: DescriptorIndex, ks=(1, 5, 10)) -> MetricsReport:
    if len(gallery) == 0:
        raise EmptyGallery("gallery is empty")
    if queries.dim != gallery.dim:
        raise DimensionMismatch(f"query dim {queries.dim} vs gallery dim {gallery.dim}")
    order = rank_indices(queries.vectors, gallery.vectors, gallery.ids)
    rel = gallery.labels[order] == queries.labels[:, None]
    return MetricsReport(
        {int(k): recall_at_k(rel, int(k)) for k in ks},
        average_precision(rel),
        len(queries),
        len(gallery),
    )


@dataclass(frozen=True)
class ProtocolSpec:
    """Query/gallery sizes of a retrieval task."""

    name: str
    num_queries: int
    num_gallery: int

    def __post_init__(self):
        if self.num_queries < 1 or self.num_gallery < 1:
            raise ValueError(f"{self.name}: query and gallery sizes must be positive")

    def validate(self, queries: DescriptorIndex, gallery: DescriptorIndex) -> None:
        if len(queries) != self.num_queries or len(gallery) != self.num_gallery:
            raise DimensionMismatch(
                f"{self.name} expects {self.num_queries} queries / {self.num_gallery} gallery, "
                f"got {len(queries)} / {len(gallery)}"
            )


PROTOCOLS = {
    "university1652-drone2sat": ProtocolSpec("university1652-drone2sat", 37854, 951),
    "university1652-sat2drone": ProtocolSpec("university1652-sat2drone", 701, 51354),
    "sues200-drone2sat": ProtocolSpec("sues200-drone2sat", 16000, 200),
    "sues200-sat2drone": ProtocolSpec("sues200-sat2drone", 80, 40000),
}
