"""The asymptotic variance of a linear observable, estimated three ways.

For the two-regime model the corrector is affine in y, so its exact value
is known. The martingale, Green-Kubo and quadratic-variation estimates
should land within a few standard errors of it and of each other.
"""

import numpy as np

from pdmpclt.analysis import decompose, qv_slope, sample_mu_star, sigma2_green, sigma2_martingale
from pdmpclt.engine import simulate_ensemble
from pdmpclt.exact import AffineCorrector, AffineMoments
from pdmpclt.model import builtin_model, clamp_linear
from pdmpclt.rng import RngStream

model = builtin_model("two-regime-ou")
exact = AffineMoments(model)
g = clamp_linear(10.0).with_mean(exact.mean)
chi = AffineCorrector.for_model(model)
root = RngStream(3)

mu = sample_mu_star(model, 3000, 20.0, 2.0, root.split(1))
mart = sigma2_martingale(model, g, chi, mu, root.split(2))
green = sigma2_green(g, chi(mu.ys, mu.regimes), mu)
ens = simulate_ensemble(model, (mu.ys[:300], mu.regimes[:300]), 256.0, root.split(3).spawn_keys(300))
qv = qv_slope(decompose(ens, model, g, chi), 256)

print(f"closed form      {exact.sigma2:.4f}")
for name, e in (("martingale", mart), ("green-kubo", green), ("qv slope", qv)):
    print(f"{name:<16} {e.value:.4f} +- {e.stderr:.4f}   z = {abs(e.value - exact.sigma2) / e.stderr:.2f}")
