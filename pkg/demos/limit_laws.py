"""What the scaled time integral looks like at t = 200 in both built-in models.

In the two-regime model the statistic is close to a centred normal with the
asymptotic variance. In the contracting model every path falls into the
fixed point, the variance is zero and the statistic piles up at 0.
"""

import numpy as np

from pdmpclt.analysis import Estimate, sample_mu_star
from pdmpclt.clt import clt_report, clt_samples, normal_cdf
from pdmpclt.exact import AffineMoments
from pdmpclt.model import HybridState, builtin_model, clamp_linear
from pdmpclt.rng import RngStream


def text_histogram(samples, sigma, bins=12):
    lo, hi = -3.5 * sigma, 3.5 * sigma
    edges = np.linspace(lo, hi, bins + 1)
    counts, _ = np.histogram(samples, edges)
    expect = len(samples) * np.diff(normal_cdf(edges, sigma))
    for a, c, e in zip(edges, counts, expect):
        print(f"{a:7.2f} {'#' * int(c / 10):<40} {c:4d} (normal {e:6.1f})")


ou = builtin_model("two-regime-ou")
exact = AffineMoments(ou)
g = clamp_linear(10.0).with_mean(exact.mean)
mu = sample_mu_star(ou, 2000, 20.0, 2.0, RngStream(5))
s = clt_samples(ou, g, mu, 200.0, 1000, RngStream(6))
rep = clt_report(s, 200.0, Estimate(exact.sigma2, 0.0))
print(f"two-regime-ou: var {rep.sample_var:.3f} vs {exact.sigma2:.3f}, KS {rep.ks_stat:.3f} "
      f"(threshold {rep.ks_threshold:.3f})")
text_histogram(s, np.sqrt(exact.sigma2))

contract = builtin_model("contract-multijump")
s0 = clt_samples(contract, clamp_linear(2.0).with_mean(0.0), HybridState((1.0,), 0), 200.0, 1000, RngStream(7))
print(f"\ncontract-multijump: 99% of |S| below {np.quantile(np.abs(s0), 0.99):.4f}, "
      f"all within [{s0.min():.4f}, {s0.max():.4f}]")
