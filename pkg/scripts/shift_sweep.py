"""Full 26-row mirror-shift sweep (five patterns by five magnitudes) for one trained variant."""

import csv
import sys

from _common import optim, parser

from sdpl.experiments import VARIANTS, shift_sweep, train_run, variant_config
from sdpl.offsets import CSV_COLUMNS, standard_sweep_specs

p = parser(__doc__)
p.add_argument("--variant", default="sdpl", choices=sorted(VARIANTS))
args = p.parse_args()

w = csv.writer(sys.stdout if args.out is None else open(args.out, "w", newline=""))
w.writerow(("seed", *CSV_COLUMNS))
for seed in args.seeds:
    run = train_run(variant_config(args.variant), optim(args), seed=seed)
    for r in shift_sweep(run.model, run.test, standard_sweep_specs(run.test.drone.shape[-1])):
        w.writerow((seed, r.p_h, r.p_w, r.recall_at_1, r.ap, r.delta_recall, r.delta_ap))
