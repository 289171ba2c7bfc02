"""How well does a linearization at sigma = 1 predict the measurements?

A small version of the linearization-error study: for a handful of prior
members, compare the measurement vector with its first-order prediction in
each parametrization, across a few values of p.  The desk-scale study used
by the acceptance gate is the same computation with 100 members and a
9-point grid.

Run:  python demos/linearization_study.py
"""
from plaplace import ExperimentConfig, sweep

cfg = ExperimentConfig(
    study="linerr",
    samples=("A",),
    p_grid=(1.5, 2.0, 2.5, 3.0),
    taus=(0.0,),
    n_members=5,
)
print(f"estimated cost: {cfg.estimated_seconds():.0f} s")
res = sweep(cfg, out_dir="demo_out/linerr")

print("\nmean relative linearization error, sample A, tau = 0")
print("  p      " + "  ".join(f"{p:6.2f}" for p in cfg.p_grid))
for par in cfg.parametrizations:
    e = res.linerr[("A", par, 0.0)]
    print(f"  {par:5s}  " + "  ".join(f"{v:6.4f}" for v in e))
print(f"\nprior norm sqrt(pi/M) E||kappa|| = {res.prior_norm['A']:.3f}")
print("tables written to demo_out/linerr/:", ", ".join(f.split("/")[-1] for f in res.files))
