# A quick tour of the numeric building blocks: PCA, k-means, Procrustes,
# and percentile summaries. Everything here is plain numpy under the hood.

import numpy as np

from listalign import linalg

rng = np.random.default_rng(0)

# -- PCA ---------------------------------------------------------------

# Draw points that live mostly in a 2-d plane inside 6-d space, then ask
# PCA to find that plane back.

basis = np.linalg.qr(rng.normal(size=(6, 2)))[0].T
points = rng.normal(size=(500, 2)) * np.array([3.0, 1.0]) @ basis
points += 0.05 * rng.normal(size=points.shape)

pca = linalg.pca_fit(points, k=4)
print("explained variance:", np.round(pca.explained_variance, 4))

restored = pca.reconstruct(pca.project(points))
err = np.linalg.norm(points - restored, axis=1).mean()
print("mean reconstruction error with 4 of 6 dims kept:", round(float(err), 5))

# -- k-means -----------------------------------------------------------

# Three well separated blobs. Lloyd iterations with a fixed seed give a
# deterministic assignment, and the inertia must drop monotonically.

centers = np.array([[4.0, 0.0], [-4.0, 0.0], [0.0, 6.0]])
blobs = np.vstack([c + rng.normal(scale=0.4, size=(80, 2)) for c in centers])

km = linalg.kmeans_fit(blobs, k=3, iters=20, seed=1)
print("k-means inertia history:", np.round(km.inertia_history[:5], 2), "...")
print("cluster sizes:", np.bincount(km.assign(blobs), minlength=3))

# -- Procrustes --------------------------------------------------------

# Rotate a point cloud by a known orthogonal matrix and recover the
# rotation from the (source, target) pair.

q_true = np.linalg.qr(rng.normal(size=(4, 4)))[0]
source = rng.normal(size=(200, 4))
target = source @ q_true

q_hat = linalg.procrustes(source, target)
print("rotation recovery error:", float(np.abs(q_hat - q_true).max()))

# -- percentiles -------------------------------------------------------

errors = np.abs(rng.normal(size=2000)) ** 1.5
levels = (0.05, 0.25, 0.50, 0.75, 0.90, 0.99)
print("error percentiles:")
for level, value in zip(levels, linalg.percentiles(errors, levels)):
    print(f"  p{int(level * 100):02d} = {value:.3f}")
