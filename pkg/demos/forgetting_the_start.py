"""Two copies of the two-regime model, started far apart, forget where they began.

Prints the Fortet-Mourier distance between the laws of the two copies at a
few times, next to the split-half noise floor, and the fitted decay rate.
"""

import numpy as np

from pdmpclt.hypotheses import probe_ergodicity
from pdmpclt.model import HybridState, builtin_model
from pdmpclt.rng import RngStream

model = builtin_model("two-regime-ou")
far, near = HybridState((5.0,), 0), HybridState((0.0,), 0)
est = probe_ergodicity(model, far, near, np.linspace(0, 4, 17), 1000, 200, RngStream(1))

print(f"{'t':>5} {'d_FM':>8} {'floor':>8}  fitted")
for t, d, f, w in zip(est.t_grid, est.distances, est.floor, est.window):
    print(f"{t:5.2f} {d:8.4f} {f:8.4f}  {'*' if w else ''}")
print(f"\ndecay rate {est.gamma_hat:.3f}, prefactor {est.kappa_hat:.3f}, r^2 {est.fit_r2:.3f}")
