"""Two-cluster fixture for the t-SNE separation test and its reference ratio.

Writes two_clusters.csv (label, 10 coordinates) next to this script and prints
the separation ratio scikit-learn's exact t-SNE reaches on it:
inter-centroid distance / mean pairwise intra-cluster distance.
"""
import os

import numpy as np
from sklearn.manifold import TSNE

rng = np.random.default_rng(7)
n_per, d = 80, 10
a = rng.normal(scale=1.0 / np.sqrt(2 * d), size=(n_per, d))  # mean intra distance ~ 1
b = rng.normal(scale=1.0 / np.sqrt(2 * d), size=(n_per, d))
b[:, 0] += 1000.0
x = np.vstack([a, b])
labels = np.array([0] * n_per + [1] * n_per)

here = os.path.dirname(os.path.abspath(__file__))
with open(os.path.join(here, "two_clusters.csv"), "w") as f:
    for lab, row in zip(labels, x):
        f.write(str(lab) + "," + ",".join(repr(float(v)) for v in row) + "\n")


def separation(y, labels):
    ca, cb = y[labels == 0].mean(0), y[labels == 1].mean(0)
    intra = []
    for k in (0, 1):
        p = y[labels == k]
        dist = np.sqrt(((p[:, None, :] - p[None, :, :]) ** 2).sum(-1))
        intra.append(dist[np.triu_indices(len(p), 1)])
    return np.linalg.norm(ca - cb) / np.concatenate(intra).mean()


y = TSNE(n_components=2, perplexity=50, max_iter=500, method="exact", init="random",
         learning_rate=200.0, random_state=0).fit_transform(x)
print("reference separation: %.6g" % separation(y, labels))
