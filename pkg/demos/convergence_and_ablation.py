"""Watch the objective settle and see which terms carry the cross-domain gain.

The first half prints the per-term objective trace of one training run.  The
second half retrains with each term switched off (the PWCF-X variants) and
reports cross-domain MAP, so the manifold and HFON contributions stand out.
"""

from pwcf import RunConfig, ShiftSpec, generate_synthetic_pair, train
from pwcf.dataio import VARIANTS
from pwcf.evaluation import run_trials

pair = generate_synthetic_pair(10, 64, 1000, 1000, ShiftSpec(30.0, 60.0, 1.0), seed=1,
                               class_sep=2.0, nuisance_dim=32, nuisance_std=3.0)
config = RunConfig(r=32, seed=1)

model, codes = train(pair, config)
print(f"{'iter':>4} {'triplet':>11} {'quant':>11} {'class':>11} {'manifold':>11} {'total':>11}")
for i, t in enumerate(model.trace):
    if i % 5 == 0 or i == len(model.trace) - 1:
        print(f"{i:>4} {t.triplet:>11.4g} {t.quantization:>11.4g} {t.classification:>11.4g}"
              f" {t.manifold:>11.4g} {t.total:>11.4g}")
print(f"stopped after {len(model.trace) - 1} iterations, "
      f"worst orthogonality error {max(model.orthogonality):.1e}\n")

rows = [("PWCF", config)] + [(name, config.with_ablations([flag]))
                             for name, flag in VARIANTS.items()]
for name, cfg in rows:
    rep = run_trials(pair, cfg, num_trials=2, queries_per_trial=500)
    print(f"{name:<7} MAP {rep.map:.3f}")
