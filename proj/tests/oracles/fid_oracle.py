"""Reference Frechet distance for the frozen 5-D case in test_metrics.cpp.

Uses scipy's Schur-based sqrtm on the raw product, unlike the library's
symmetric eigendecomposition. Prints the statistics as C++ literals and the
distance to 17 significant digits.
"""
import numpy as np
from scipy import linalg

rng = np.random.default_rng(20240501)
d = 5
mu_a = rng.normal(size=d)
mu_b = rng.normal(size=d)
ga = rng.normal(size=(d, d))
gb = rng.normal(size=(d, d))
sig_a = ga @ ga.T / d + 0.1 * np.eye(d)
sig_b = gb @ gb.T / d + 0.1 * np.eye(d)

covmean = linalg.sqrtm(sig_a @ sig_b)
covmean = covmean.real
fid = float(np.sum((mu_a - mu_b) ** 2) + np.trace(sig_a) + np.trace(sig_b) - 2 * np.trace(covmean))


def lit(a):
    return ", ".join(repr(float(x)) for x in np.asarray(a).ravel())


print("mu_a:", lit(mu_a))
print("mu_b:", lit(mu_b))
print("sigma_a:", lit(sig_a))
print("sigma_b:", lit(sig_b))
print("fid: %.17g" % fid)
