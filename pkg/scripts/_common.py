"""Shared argument handling for the experiment scripts."""

import argparse
import json
from dataclasses import replace
from pathlib import Path
from statistics import median

from sdpl.experiments import SYNTH_OPTIM


def parser(doc: str) -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(description=doc)
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    p.add_argument("--epochs", type=int, default=SYNTH_OPTIM.epochs)
    p.add_argument("--out", type=Path, default=None, help="optional JSON results file")
    return p


def optim(args):
    return replace(SYNTH_OPTIM, epochs=args.epochs)


def summarise(values):
    return {"per_seed": [round(v, 4) for v in values], "median": round(median(values), 4)}


def dump(args, results):
    print(json.dumps(results, indent=1))
    if args.out:
        args.out.parent.mkdir(parents=True, exist_ok=True)
        args.out.write_text(json.dumps(results, indent=1) + "\n")
