"""Regenerates the HDBSCAN reference fixtures.

Each fixture is a text file: a header line "n d planted_k min_cluster_size",
then one line per point holding d coordinates followed by the label that
scikit-learn's HDBSCAN assigns (-1 for noise).
"""
import pathlib

import numpy as np
from sklearn.cluster import HDBSCAN

OUT = pathlib.Path(__file__).parent / "hdbscan"

# (name, dims, blobs, points per blob, blob std, noise points, min_cluster_size, seed)
FIXTURES = [
    ("blobs2d_k2", 2, 2, 150, 0.4, 30, 20, 1),
    ("blobs2d_k3", 2, 3, 120, 0.5, 40, 20, 2),
    ("blobs2d_k4", 2, 4, 100, 0.5, 40, 20, 3),
    ("blobs2d_k5", 2, 5, 80, 0.4, 50, 15, 4),
    ("blobs2d_k3_uneven", 2, 3, 0, 0.5, 30, 20, 5),
    ("blobs16d_k2", 16, 2, 150, 0.6, 30, 20, 6),
    ("blobs16d_k3", 16, 3, 120, 0.6, 40, 20, 7),
    ("blobs16d_k4", 16, 4, 100, 0.7, 40, 20, 8),
    ("blobs16d_k5", 16, 5, 80, 0.6, 50, 15, 9),
    ("blobs16d_k4_uneven", 16, 4, 0, 0.6, 40, 20, 10),
]


def make(dims, blobs, per_blob, std, noise, seed):
    rng = np.random.default_rng(seed)
    spread = 10.0
    centers = []
    while len(centers) < blobs:
        c = rng.uniform(-spread, spread, size=dims)
        if all(np.linalg.norm(c - o) > 8.0 * std * np.sqrt(dims) ** 0.5 + 4.0 for o in centers):
            centers.append(c)
    sizes = [per_blob] * blobs if per_blob else list(rng.integers(60, 200, size=blobs))
    pts = [rng.normal(c, std, size=(s, dims)) for c, s in zip(centers, sizes)]
    lo = np.min([c.min() for c in centers]) - 3.0
    hi = np.max([c.max() for c in centers]) + 3.0
    pts.append(rng.uniform(lo, hi, size=(noise, dims)))
    x = np.vstack(pts).astype(np.float32)
    return x[rng.permutation(len(x))]


def main():
    OUT.mkdir(parents=True, exist_ok=True)
    for name, dims, blobs, per_blob, std, noise, mcs, seed in FIXTURES:
        x = make(dims, blobs, per_blob, std, noise, seed)
        labels = HDBSCAN(min_cluster_size=mcs, min_samples=mcs).fit_predict(x.astype(np.float64))
        k = len(set(labels) - {-1})
        assert k == blobs, (name, k)
        with open(OUT / f"{name}.txt", "w") as f:
            f.write(f"{len(x)} {dims} {blobs} {mcs}\n")
            for row, lab in zip(x, labels):
                f.write(" ".join(repr(float(v)) for v in row) + f" {lab}\n")
        print(name, len(x), "points, noise", int((labels == -1).sum()))


if __name__ == "__main__":
    main()
