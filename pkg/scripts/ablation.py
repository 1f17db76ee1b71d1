"""Train each ablation variant and compare clean retrieval with degradation at the largest query shift."""

import numpy as np
from _common import dump, optim, parser, summarise

from sdpl.experiments import VARIANTS, drone_to_satellite, largest_pad, shift_sweep, train_run, variant_config
from sdpl.offsets import PATTERNS

p = parser(__doc__)
p.add_argument("--variants", nargs="+", default=["sdpl", "hard", "dps", "sps", "global", "dps-tl", "dps-br"],
               choices=sorted(VARIANTS))
args = p.parse_args()

results = {}
for name in args.variants:
    r1, ap, mean_dap, per_pattern = [], [], [], []
    for seed in args.seeds:
        run = train_run(variant_config(name), optim(args), seed=seed)
        rep = drone_to_satellite(run.model, run.test)
        rows = shift_sweep(run.model, run.test, largest_pad(run.test.drone.shape[-1]))[1:]
        r1.append(rep.recall_at[1])
        ap.append(rep.ap)
        mean_dap.append(float(np.mean([r.delta_ap for r in rows])))
        per_pattern.append([r.delta_ap for r in rows])
    results[name] = {
        "recall@1": summarise(r1),
        "ap": summarise(ap),
        "mean_delta_ap_largest_pad": summarise(mean_dap),
        "median_delta_ap_by_pattern": {
            f"{sh:+d},{sw:+d}": round(float(np.median([d[k] for d in per_pattern])), 4) for k, (sh, sw) in enumerate(PATTERNS)
        },
    }
dump(args, results)
