"""Retrieval quality as the number of square rings grows (dense partition, centered only)."""

from _common import dump, optim, parser, summarise

from sdpl.experiments import drone_to_satellite, train_run, variant_config
from sdpl.geometry import dps_segment_count

p = parser(__doc__)
p.add_argument("--counts", type=int, nargs="+", default=[1, 2, 3, 4])
args = p.parse_args()

results = {}
for n in args.counts:
    r1, ap = [], []
    for seed in args.seeds:
        run = train_run(variant_config("dps", n_sps=n), optim(args), seed=seed)
        rep = drone_to_satellite(run.model, run.test)
        r1.append(rep.recall_at[1])
        ap.append(rep.ap)
    results[f"n_sps={n}"] = {"parts": dps_segment_count(n), "recall@1": summarise(r1), "ap": summarise(ap)}
dump(args, results)
