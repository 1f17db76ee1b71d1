"""Adaptive fusion trained with different diagonal offsets of the two shifted centers."""

from _common import dump, optim, parser, summarise

from sdpl.experiments import drone_to_satellite, largest_pad, shift_sweep, train_run, variant_config
from sdpl.geometry import shift_threshold

p = parser(__doc__)
p.add_argument("--offsets", type=int, nargs="+", default=[1, 2], help="grid-cell offsets; valid up to H/(2N)")
args = p.parse_args()

results = {}
for dh in args.offsets:
    r1, mean_dap = [], []
    for seed in args.seeds:
        run = train_run(variant_config("sdpl", delta_h1=dh, delta_h2=-dh), optim(args), seed=seed)
        r1.append(drone_to_satellite(run.model, run.test).recall_at[1])
        rows = shift_sweep(run.model, run.test, largest_pad(run.test.drone.shape[-1]))[1:]
        mean_dap.append(sum(r.delta_ap for r in rows) / len(rows))
    results[f"delta_h=±{dh}"] = {"recall@1": summarise(r1), "mean_delta_ap_largest_pad": summarise(mean_dap)}
results["threshold"] = float(shift_threshold(16, 4))  # default backbone: 16x16 grid at 64 px, four rings
dump(args, results)
