"""``sdpl`` command line.

Settings resolve in this order, later winning: built-in defaults, the JSON
file given by ``--config``, then explicit flags.  The seed falls back to
``$SDPL_SEED`` when neither the file nor a flag sets it.

Exit status: 0 on success, 1 on usage errors, 2 on runtime failures.
"""

from __future__ import annotations

import argparse
import contextlib
import csv
import hashlib
import json
import logging
import os
import sys
import time
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np

from . import imageio
from .data import DatasetSplit, load_directory, load_split, synth_views, views_from_records, write_dataset
from .errors import SchemaMismatch, SdplError, UsageError
from .experiments import SYNTH_OPTIM, VARIANTS, drone_queries, embed_images, variant_config
from .geometry import RingLayout, dps_partition
from .model import SdplConfig, SdplModel
from .offsets import CSV_COLUMNS, SIGN_CONVENTION, PadSpec, standard_sweep_specs, sweep, write_rows
from .retrieval import DescriptorIndex, evaluate_protocol
from .trainer import OptimConfig, Trainer, load_checkpoint

log = logging.getLogger("sdpl")

COMMANDS = ("synth-data", "train", "embed", "eval", "shift-eval", "masks", "grad-check", "report")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}\n\n{self.format_help()}")


def _git_hash(text: str) -> str:
    data = text.encode()
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


# ----------------------------------------------------------------------
# settings


def _load_config_file(path):
    if path is None:
        return {}
    try:
        cfg = json.loads(Path(path).read_text())
    except (OSError, ValueError) as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from None
    if not isinstance(cfg, dict):
        raise UsageError(f"config {path} must hold a JSON object")
    return cfg


def resolve(args, defaults: dict) -> dict:
    """Merge defaults, config-file keys and explicitly given flags."""
    file_cfg = _load_config_file(args.config)
    out = {}
    for key, default in defaults.items():
        flag = getattr(args, key, None)
        if flag is not None:
            out[key] = flag
        elif key in file_cfg:
            out[key] = file_cfg[key]
        else:
            out[key] = default
    unknown = set(file_cfg) - set(defaults) - {"model", "optim"}
    if unknown:
        raise UsageError(f"unknown config keys for {args.command}: {sorted(unknown)}")
    if out.get("seed") is None and "seed" in defaults:
        env = os.environ.get("SDPL_SEED")
        try:
            out["seed"] = int(env) if env is not None else 0
        except ValueError:
            raise UsageError(f"SDPL_SEED must be an integer, got {env!r}") from None
    out["_model"] = file_cfg.get("model", {})
    out["_optim"] = file_cfg.get("optim", {})
    return out


def _public(settings: dict) -> dict:
    return {k: v for k, v in settings.items() if not k.startswith("_")} | {
        "model": settings.get("_model", {}),
        "optim": settings.get("_optim", {}),
    }


def write_manifest(out_dir, command: str, args, settings: dict, started: float) -> Path:
    resolved = json.dumps(_public(settings), sort_keys=True, default=str)
    manifest = {
        "command": command,
        "config_path": str(args.config) if args.config else None,
        "seed": settings.get("seed"),
        "config_hash": _git_hash(resolved),
        "settings": json.loads(resolved),
        "out_dir": str(out_dir),
        "started": time.strftime("%Y-%m-%dT%H:%M:%S", time.localtime(started)),
        "finished": time.strftime("%Y-%m-%dT%H:%M:%S"),
    }
    path = Path(out_dir) / "manifest.json"
    path.write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return path


def _out_dir(settings) -> Path:
    if not settings.get("out"):
        raise UsageError("--out is required")
    out = Path(settings["out"])
    out.mkdir(parents=True, exist_ok=True)
    return out


# ----------------------------------------------------------------------
# data helpers


def _split_from(settings) -> DatasetSplit:
    return DatasetSplit.default(
        settings["n_train"], settings["n_test"], settings["drone_views"], settings["image_size"], settings["data_seed"]
    )


def _load_views(settings, which: str):
    """Views of the ``which`` split, from ``--data`` or synthesised in memory."""
    if settings.get("data"):
        root = Path(settings["data"])
        split = load_split(root)
        classes = split.train_classes if which == "train" else split.test_classes
        return split, views_from_records(load_directory(root), classes=set(classes))
    split = _split_from(settings)
    classes = split.train_classes if which == "train" else split.test_classes
    return split, synth_views(split, classes)


DATA_DEFAULTS = {"data": None, "n_train": 30, "n_test": 20, "drone_views": 8, "image_size": 64, "data_seed": 0}


# ----------------------------------------------------------------------
# commands


def cmd_synth_data(args):
    s = resolve(args, {"out": None, **{k: v for k, v in DATA_DEFAULTS.items() if k != "data"}})
    out = _out_dir(s)
    split = _split_from(s)
    write_dataset(out, split)
    write_manifest(out, args.command, args, s, args.started)
    print(f"wrote {len(split.train_classes) + len(split.test_classes)} classes to {out}")


def cmd_train(args):
    s = resolve(
        args,
        {"out": None, "variant": "sdpl", "seed": None, "epochs": SYNTH_OPTIM.epochs, "lr": SYNTH_OPTIM.lr0,
         "batch": SYNTH_OPTIM.batch, "checkpoint_every": 0, **DATA_DEFAULTS},
    )
    out = _out_dir(s)
    if s["variant"] not in VARIANTS:
        raise UsageError(f"unknown variant {s['variant']!r}; choose from {sorted(VARIANTS)}")
    split, train = _load_views(s, "train")
    base = asdict(variant_config(s["variant"]))
    base.update(s["_model"])
    base.update(n_classes=train.n_classes, image_size=split.image_size, seed=s["seed"])
    config = SdplConfig.from_dict(base)
    optim = OptimConfig.from_dict({**asdict(SYNTH_OPTIM), **s["_optim"], "epochs": s["epochs"], "lr0": s["lr"], "batch": s["batch"]})
    trainer = Trainer(SdplModel(config), train, optim, seed=s["seed"], log_path=out / "train_log.jsonl")
    (out / "train_log.jsonl").write_text("")
    trainer.run(checkpoint_every=s["checkpoint_every"], checkpoint_dir=out)
    trainer.save(out / "model.sdpc")
    (out / "config.json").write_text(json.dumps({"model": json.loads(config.to_json()), "optim": asdict(optim)}, indent=1, sort_keys=True) + "\n")
    write_manifest(out, args.command, args, s, args.started)
    print(f"trained {optim.epochs} epochs; final mean loss {trainer.losses[-1] if trainer.losses else float('nan'):.6g}")


def _model_from(settings):
    if not settings.get("checkpoint"):
        raise UsageError("--checkpoint is required")
    model, meta, _ = load_checkpoint(settings["checkpoint"])
    return model


def cmd_embed(args):
    s = resolve(args, {"out": None, "checkpoint": None, "split": "test", "scale": None, **DATA_DEFAULTS})
    out = _out_dir(s)
    model = _model_from(s)
    _, views = _load_views(s, s["split"])
    images, labels, ids = drone_queries(views)
    DescriptorIndex(ids, labels, embed_images(model, images, scale=s["scale"])).save(out / "drone")
    DescriptorIndex(list(views.ids_satellite), views.class_ids, embed_images(model, views.satellite, scale=s["scale"])).save(out / "satellite")
    write_manifest(out, args.command, args, s, args.started)
    print(f"embedded {len(ids)} drone and {len(views.ids_satellite)} satellite images")


def cmd_eval(args):
    s = resolve(args, {"out": None, "queries": None, "gallery": None, "ks": "1,5,10"})
    out = _out_dir(s)
    if not s["queries"] or not s["gallery"]:
        raise UsageError("--queries and --gallery descriptor stems are required")
    try:
        ks = tuple(int(k) for k in str(s["ks"]).split(","))
    except ValueError:
        raise UsageError(f"--ks must be comma-separated integers, got {s['ks']!r}") from None
    rep = evaluate_protocol(DescriptorIndex.load(s["queries"]), DescriptorIndex.load(s["gallery"]), ks)
    rep.write(out / "metrics")
    write_manifest(out, args.command, args, s, args.started)
    print(json.dumps(rep.to_dict(), sort_keys=True))


def _parse_pads(text, image_size):
    if text in (None, "standard"):
        return standard_sweep_specs(image_size)
    specs = []
    for item in str(text).split(";"):
        try:
            ph, pw = (int(v) for v in item.split(","))
        except ValueError:
            raise UsageError(f"pads must look like 'ph,pw;ph,pw', got {item!r}") from None
        specs.append(PadSpec(ph, pw))
    return specs


def cmd_shift_eval(args):
    s = resolve(args, {"out": None, "checkpoint": None, "pads": "standard", "scale": None, **DATA_DEFAULTS})
    out = _out_dir(s)
    model = _model_from(s)
    _, views = _load_views(s, "test")
    specs = _parse_pads(s["pads"], model.config.image_size)
    images, labels, ids = drone_queries(views)
    gallery = DescriptorIndex(list(views.ids_satellite), views.class_ids, embed_images(model, views.satellite, scale=s["scale"]))
    rows = sweep(lambda x: embed_images(model, x, scale=s["scale"]), images, labels, gallery, specs, ids)
    write_rows(out / "shift_sweep.csv", rows, {"checkpoint": str(s["checkpoint"])})
    write_manifest(out, args.command, args, s, args.started)
    print(f"{len(rows)} rows -> {out / 'shift_sweep.csv'}")


def cmd_masks(args):
    s = resolve(args, {"out": None, "n_sps": 4, "grid": 32, "delta_h": 0, "strategy": "dps"})
    out = _out_dir(s)
    layout = RingLayout.shifted(s["n_sps"], s["grid"], s["grid"], s["delta_h"])
    index = []
    for k, (seg, mask) in enumerate(dps_partition(layout, s["strategy"]), 1):
        name = f"f{k:02d}_seg{seg.i}-{seg.j}.pgm"
        imageio.write_pgm_plain(out / name, mask.cells.astype(np.int64), maxval=1)
        index.append({"file": name, "segment": [seg.i, seg.j], "cell_count": mask.cell_count, "outer_size": layout.outer_size(seg)})
    rings = [m.cell_count for seg, m in dps_partition(layout, "sps")]
    meta = {"n_sps": s["n_sps"], "grid": s["grid"], "delta_h": s["delta_h"], "center": [float(c) for c in layout.center],
            "ring_cell_counts": rings, "masks": index}
    (out / "index.json").write_text(json.dumps(meta, indent=1) + "\n")
    write_manifest(out, args.command, args, s, args.started)
    print(f"wrote {len(index)} masks to {out}")


def grad_check_suite(trials: int = 100, seed: int = 0) -> dict:
    """Max relative finite-difference error per op over ``trials`` random draws."""
    from . import tensor as T
    from .gradcheck import check
    from .ops import ClassifierHead, GemParams, PartSet, WeightEstimation, cross_entropy, fuse, gem_pool_many
    from .tensor import Tensor

    rng = np.random.default_rng(seed)

    def leaf(shape, lo=None, hi=None):
        a = rng.normal(size=shape) if lo is None else rng.uniform(lo, hi, size=shape)
        return Tensor(a, requires_grad=True)

    def gem():
        x = leaf((1, 2, 3, 3), 0.1, 2.0)
        masks = rng.random((2, 3, 3)) < 0.6
        masks[:, 1, 1] = True
        return check(lambda: gem_pool_many(x, masks, GemParams(3.0)), [x])

    def conv1x1():
        x, w, b = leaf((1, 3, 2, 2)), leaf((2, 3)), leaf((2,))
        return check(lambda: T.conv1x1(x, w, b), [x, w, b])

    def linear():
        x, w, b = leaf((2, 4)), leaf((3, 4)), leaf((3,))
        return check(lambda: T.linear(x, w, b), [x, w, b])

    def softmax():
        x = leaf((2, 3))
        return check(lambda: T.softmax(x), [x])

    def weight_estimation():
        we = WeightEstimation(4, hidden=6, seed=int(rng.integers(1 << 30)), dtype=np.float64)
        # zero biases sit on ReLU kinks; large weights saturate the softmax
        for p in we.parameters():
            p.data = rng.normal(scale=0.3, size=p.shape)
        x = leaf((2, 4, 2, 2))
        return check(lambda: we(x), [x, *we.parameters()])

    def fusion():
        vals = [leaf((2, 2, 3)) for _ in range(3)]
        w = Tensor(rng.dirichlet([1, 1, 1], size=2), requires_grad=True)
        return check(lambda: fuse([PartSet(v) for v in vals], w).values, [*vals, w])

    def cross_ent():
        z = leaf((2, 5))
        y = rng.integers(0, 5, size=2)
        return check(lambda: cross_entropy(z, y), [z])

    def classifier():
        head = ClassifierHead(3, 4, bottleneck=5, dropout=0.0, seed=int(rng.integers(1 << 30)), dtype=np.float64)
        x = leaf((4, 3))
        # batch statistics make the compress bias gradient identically zero,
        # which a relative error cannot measure; check with running statistics
        head(Tensor(rng.normal(size=(4, 3))), training=True)
        return check(lambda: head(x, training=False)[0], [x, *head.parameters()])

    ops = {"gem": gem, "conv1x1": conv1x1, "linear": linear, "softmax": softmax,
           "weight_estimation": weight_estimation, "fusion": fusion, "cross_entropy": cross_ent,
           "classifier_head": classifier}
    return {name: max(fn() for _ in range(trials)) for name, fn in ops.items()}


GRAD_TOL = 1e-4


def cmd_grad_check(args):
    s = resolve(args, {"trials": 100, "seed": None, "out": None})
    errors = grad_check_suite(s["trials"], s["seed"])
    ok = True
    for name, err in errors.items():
        passed = err <= GRAD_TOL
        ok &= passed
        print(f"{name:18s} max_rel_err={err:.3e} {'ok' if passed else 'FAIL'}")
    if s["out"]:
        out = _out_dir(s)
        (out / "grad_check.json").write_text(json.dumps(errors, indent=1, sort_keys=True) + "\n")
        write_manifest(out, args.command, args, s, args.started)
    return 0 if ok else 2


# ----------------------------------------------------------------------
# report


def _read_rows(path):
    path = Path(path)
    try:
        if path.suffix == ".json":
            d = json.loads(path.read_text())
            return [{"p_h": d.get("p_h", 0), "p_w": d.get("p_w", 0), "recall@1": d["recall@1"], "ap": d["ap"]}]
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        return [{k: r[k] for k in ("p_h", "p_w", "recall@1", "ap")} for r in rows]
    except (KeyError, TypeError, ValueError) as exc:
        raise SchemaMismatch(f"{path}: missing or malformed column {exc}") from None


def report(baseline, sweeps) -> list[dict]:
    """One (0,0) row from ``baseline`` then every non-zero row of ``sweeps``."""
    base = _read_rows(baseline)
    zero = [r for r in base if int(r["p_h"]) == 0 and int(r["p_w"]) == 0]
    if len(zero) != 1:
        raise SchemaMismatch(f"{baseline}: expected exactly one (0,0) baseline row")
    b_r, b_ap = float(zero[0]["recall@1"]), float(zero[0]["ap"])
    merged = [(0, 0, b_r, b_ap)]
    seen = {(0, 0)}
    for path in sweeps:
        for r in _read_rows(path):
            key = (int(r["p_h"]), int(r["p_w"]))
            if key == (0, 0):
                continue
            if key in seen:
                raise SchemaMismatch(f"{path}: duplicate pad {key}")
            seen.add(key)
            merged.append((*key, float(r["recall@1"]), float(r["ap"])))
    return [
        {"p_h": ph, "p_w": pw, "recall@1": r1, "ap": ap, "delta_recall": r1 - b_r, "delta_ap": ap - b_ap}
        for ph, pw, r1, ap in merged
    ]


def cmd_report(args):
    s = resolve(args, {"out": None, "baseline": None, "sweep": []})
    out = _out_dir(s)
    if not s["baseline"]:
        raise UsageError("--baseline is required")
    rows = report(s["baseline"], s["sweep"] or [])
    with open(out / "report.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CSV_COLUMNS)
        for r in rows:
            w.writerow([r["p_h"], r["p_w"], *(repr(r[k]) for k in CSV_COLUMNS[2:])])
    (out / "report.json").write_text(json.dumps({"sign_convention": SIGN_CONVENTION, "rows": rows}, indent=1) + "\n")
    write_manifest(out, args.command, args, s, args.started)
    print(f"{len(rows)} rows -> {out / 'report.csv'}")


# ----------------------------------------------------------------------
# parser


def _common(p):
    p.add_argument("--config", help="JSON file of settings; flags override it")
    p.add_argument("--threads", type=int, help="cap on BLAS/OpenMP threads")
    p.add_argument("-v", "--verbose", action="store_true")


def _data_flags(p):
    p.add_argument("--data", help="dataset root written by synth-data (default: synthesise in memory)")
    p.add_argument("--n-train", type=int)
    p.add_argument("--n-test", type=int)
    p.add_argument("--drone-views", type=int)
    p.add_argument("--image-size", type=int)
    p.add_argument("--data-seed", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="sdpl", description="Shifting dense partition learning toolkit.")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("synth-data", help="render the synthetic drone/satellite dataset")
    _common(p)
    p.add_argument("--out")
    for flag in ("--n-train", "--n-test", "--drone-views", "--image-size", "--data-seed"):
        p.add_argument(flag, type=int)

    p = sub.add_parser("train", help="train a model and write a checkpoint")
    _common(p)
    _data_flags(p)
    p.add_argument("--out")
    p.add_argument("--variant", help=f"one of {', '.join(VARIANTS)}")
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch", type=int)
    p.add_argument("--checkpoint-every", type=int)

    p = sub.add_parser("embed", help="write descriptor files for one split")
    _common(p)
    _data_flags(p)
    p.add_argument("--out")
    p.add_argument("--checkpoint")
    p.add_argument("--split", choices=("train", "test"))
    p.add_argument("--scale", type=int, help="keep only parts whose outer ring <= scale")

    p = sub.add_parser("eval", help="rank queries against a gallery and report metrics")
    _common(p)
    p.add_argument("--out")
    p.add_argument("--queries", help="descriptor stem (stem.sdpt + stem.json)")
    p.add_argument("--gallery", help="descriptor stem")
    p.add_argument("--ks", help="comma-separated Recall@K cut-offs")

    p = sub.add_parser("shift-eval", help="re-evaluate under mirror-shifted queries")
    _common(p)
    _data_flags(p)
    p.add_argument("--out")
    p.add_argument("--checkpoint")
    p.add_argument("--pads", help="'standard' or 'ph,pw;ph,pw;...' in pixels")
    p.add_argument("--scale", type=int)

    p = sub.add_parser("masks", help="export partition masks as PGM files")
    _common(p)
    p.add_argument("--out")
    p.add_argument("--n-sps", type=int)
    p.add_argument("--grid", type=int)
    p.add_argument("--delta-h", type=int)
    p.add_argument("--strategy", choices=("dps", "sps"))

    p = sub.add_parser("grad-check", help="finite-difference check of every differentiable op")
    _common(p)
    p.add_argument("--trials", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--out")

    p = sub.add_parser("report", help="merge a baseline and sweep outputs into one delta table")
    _common(p)
    p.add_argument("--out")
    p.add_argument("--baseline", help="metrics JSON or CSV holding the (0,0) row")
    p.add_argument("--sweep", nargs="*", help="sweep CSV files")
    return parser


HANDLERS = {
    "synth-data": cmd_synth_data,
    "train": cmd_train,
    "embed": cmd_embed,
    "eval": cmd_eval,
    "shift-eval": cmd_shift_eval,
    "masks": cmd_masks,
    "grad-check": cmd_grad_check,
    "report": cmd_report,
}


def _thread_limit(n):
    if n is None:
        return contextlib.nullcontext()
    if n < 1:
        raise UsageError("--threads must be >= 1")
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


def main(argv=None) -> int:
    parser = build_parser()
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        if not argv:
            raise UsageError(parser.format_help())
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError(parser.format_help())
        logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
        args.started = time.time()
        with _thread_limit(args.threads):
            rc = HANDLERS[args.command](args)
        return rc or 0
    except UsageError as exc:
        print(str(exc), file=sys.stderr)
        return 1
    except (SdplError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
