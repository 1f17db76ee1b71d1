"""Mirror-and-crop query shifts and the degradation sweep.

Sign convention: a positive pad on an axis mirrors a strip at the low edge
(top rows / left columns) and crops the high edge, so content moves
down / right.  A negative pad does the opposite.
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .errors import PadTooLarge
from .retrieval import DescriptorIndex, evaluate_protocol

SIGN_CONVENTION = "+p mirrors the top/left strip and shifts content down/right; -p mirrors bottom/right"

# shift patterns (sign of p_h, sign of p_w), applied to each magnitude P
PATTERNS = ((1, 0), (1, 1), (-1, -1), (1, -1), (-1, 1))
REFERENCE_PADS = (20, 40, 60, 80, 100)
REFERENCE_IMAGE_SIZE = 512


@dataclass(frozen=True)
class PadSpec:
    p_h: int = 0
    p_w: int = 0

    def __str__(self) -> str:
        return f"({self.p_h:+d},{self.p_w:+d})" if (self.p_h or self.p_w) else "(0,0)"


def mirror_shift_axis(x: np.ndarray, p: int, axis: int) -> np.ndarray:
    n = x.shape[axis]
    if abs(p) >= n:
        raise PadTooLarge(f"pad {p} must be smaller than extent {n}")
    if p == 0:
        return x
    x = np.moveaxis(x, axis, 0)
    if p > 0:
        out = np.concatenate([x[:p][::-1], x[: n - p]], axis=0)
    else:
        q = -p
        out = np.concatenate([x[q:], x[n - q :][::-1]], axis=0)
    return np.moveaxis(out, 0, axis)


def mirror_shift(image: np.ndarray, spec: PadSpec) -> np.ndarray:
    """Shift ``image`` [..., H, W] by reflection padding and cropping; shape preserved."""
    image = np.asarray(image)
    out = mirror_shift_axis(image, spec.p_h, image.ndim - 2)
    out = mirror_shift_axis(out, spec.p_w, image.ndim - 1)
    return out if out is not image else image.copy()


def scaled_pads(image_size: int, pads=REFERENCE_PADS) -> list[int]:
    """Reference pad magnitudes rescaled from 512-pixel images."""
    return [int(round(p * image_size / REFERENCE_IMAGE_SIZE)) for p in pads]


def standard_sweep_specs(image_size: int = REFERENCE_IMAGE_SIZE, pads=REFERENCE_PADS) -> list[PadSpec]:
    """(0,0) followed by every magnitude of each pattern (26 rows)."""
    mags = scaled_pads(image_size, pads)
    specs = [PadSpec(0, 0)]
    for sh, sw in PATTERNS:
        specs += [PadSpec(sh * p, sw * p) for p in mags]
    return specs


@dataclass(frozen=True)
class DegradationRow:
    p_h: int
    p_w: int
    recall_at_1: float
    ap: float
    delta_recall: float
    delta_ap: float


def sweep(
    embed: Callable[[np.ndarray], np.ndarray],
    query_images: np.ndarray,
    query_labels,
    gallery: DescriptorIndex,
    specs: Sequence[PadSpec],
    query_ids=None,
) -> list[DegradationRow]:
    """Re-embed perturbed queries for each spec; deltas are metric minus the (0,0) run."""
    query_labels = np.asarray(query_labels)
    ids = list(query_ids) if query_ids is not None else [str(i) for i in range(len(query_labels))]
    specs = [PadSpec(0, 0)] + [s for s in specs if (s.p_h, s.p_w) != (0, 0)]
    rows = []
    base = None
    for spec in specs:
        shifted = np.stack([mirror_shift(img, spec) for img in query_images])
        q = DescriptorIndex(ids, query_labels, embed(shifted))
        rep = evaluate_protocol(q, gallery, ks=(1,))
        r1, ap = rep.recall_at[1], rep.ap
        if base is None:
            base = (r1, ap)
        rows.append(DegradationRow(spec.p_h, spec.p_w, r1, ap, r1 - base[0], ap - base[1]))
    return rows


CSV_COLUMNS = ("p_h", "p_w", "recall@1", "ap", "delta_recall", "delta_ap")


def write_rows(path, rows: Sequence[DegradationRow], meta: dict | None = None) -> None:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CSV_COLUMNS)
        for r in rows:
            w.writerow([r.p_h, r.p_w, repr(r.recall_at_1), repr(r.ap), repr(r.delta_recall), repr(r.delta_ap)])
    info = {"sign_convention": SIGN_CONVENTION, "rows": [asdict(r) for r in rows]}
    if meta:
        info.update(meta)
    path.with_suffix(".json").write_text(json.dumps(info, sort_keys=True, indent=1) + "\n")
