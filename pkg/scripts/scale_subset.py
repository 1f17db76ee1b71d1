"""Recall@1 and AP when only the parts inside the first s rings are concatenated."""

from _common import dump, optim, parser, summarise

from sdpl.experiments import drone_to_satellite, train_run, variant_config

p = parser(__doc__)
p.add_argument("--variant", default="sdpl")
args = p.parse_args()

runs = [train_run(variant_config(args.variant), optim(args), seed=s) for s in args.seeds]
results = {}
for scale in range(1, runs[0].model.config.n_sps + 1):
    reps = [drone_to_satellite(r.model, r.test, scale=scale) for r in runs]
    results[f"scale={scale}"] = {
        "length": len(runs[0].model.scale_parts(scale)) * runs[0].model.config.bottleneck,
        "recall@1": summarise([x.recall_at[1] for x in reps]),
        "ap": summarise([x.ap for x in reps]),
    }
dump(args, results)
