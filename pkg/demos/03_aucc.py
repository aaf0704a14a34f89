"""
Area under the convergence curve
================================

A model that reaches the same final score sooner has more area under its
curve. Scores are divided by the best model's so the winner gets 1.0.
"""

import numpy as np

from reservoir_transformers.aucc import (
    ConvergenceCurve,
    aggregate_seeds,
    compute_aucc,
    time_to_fraction,
    time_to_max,
)

t = np.linspace(0, 3600, 13)
fast = ConvergenceCurve("fast", 1, t, 30 * (1 - np.exp(-t / 600)))
slow = ConvergenceCurve("slow", 1, t, 30 * (1 - np.exp(-t / 1500)))

for c in (fast, slow):
    print(f"{c.run_id:5s} AUCC={compute_aucc(c, 3600):9.1f}  time to 95%={time_to_fraction(c, 0.95):6.0f}s"
          f"  time to max={time_to_max(c):6.0f}s")

# %%
# With several seeds the per-seed areas are averaged first, then normalised.
rng = np.random.default_rng(0)
curves = {
    name: [ConvergenceCurve(name, s, t, 30 * (1 - np.exp(-t / tau)) + rng.normal(0, 0.3, len(t)))
           for s in (1, 2, 3)]
    for name, tau in [("fast", 600), ("slow", 1500)]
}
for name, report in aggregate_seeds(curves, t_hat=3600).items():
    print(f"{name:5s} raw {report.raw_mean:9.1f} +/- {report.raw_std:6.1f}  normalised {report.normalized:.3f}")
