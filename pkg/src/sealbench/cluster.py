"""Spectral clustering of a precomputed distance matrix and cluster diagnostics.

The pipeline is: distance matrix -> affinity ``W`` -> unnormalized Laplacian
``L = D - W`` -> eigenvectors of the ``k`` smallest eigenvalues -> k-means on
the embedding rows -> medoid of each cluster in the original distance space.
"""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import asdict, dataclass, field

import numpy as np
import scipy.linalg
from sklearn.base import BaseEstimator, ClusterMixin

from .exceptions import ConfigError, EigensolverError, ParamError, SizeError
from .features import DistanceMatrix
from .imaging import make_rng


@dataclass(frozen=True)
class AffinityConfig:
    """How distances become affinities.

    ``kernel="gaussian"`` uses ``exp(-d^2 / (2 sigma^2))`` with ``sigma`` either
    ``"median"``/``"mean"`` of the off-diagonal distances or a positive number.
    ``kernel="knn"`` links each item to its ``n_neighbors`` nearest items with
    weight 1 and symmetrizes by max (by min when ``mutual``). The default is
    the 10-nearest-neighbour graph: on histogram distances the dense Gaussian
    kernel lets a few outliers split off as tiny clusters.
    """

    kernel: str = "knn"
    sigma: object = "median"
    n_neighbors: int = 10
    mutual: bool = False

    def __post_init__(self):
        if self.kernel not in ("gaussian", "knn"):
            raise ConfigError(f"unknown affinity kernel {self.kernel!r}")
        if self.kernel == "gaussian" and self.sigma not in ("median", "mean"):
            if isinstance(self.sigma, bool) or not isinstance(self.sigma, (int, float)) or not self.sigma > 0:
                raise ConfigError(f"sigma must be 'median', 'mean' or a positive number, got {self.sigma!r}")

    def to_dict(self):
        return asdict(self)


def _dist_values(d):
    if isinstance(d, DistanceMatrix):
        return d.values
    v = np.asarray(d, dtype=np.float64)
    if v.ndim != 2 or v.shape[0] != v.shape[1]:
        raise SizeError(f"distance matrix must be square, got {v.shape}")
    return v


def build_affinity(d, cfg=None):
    cfg = cfg or AffinityConfig()
    v = _dist_values(d)
    n = v.shape[0]
    off = ~np.eye(n, dtype=bool)
    if cfg.kernel == "gaussian":
        if cfg.sigma == "median":
            sigma = float(np.median(v[off])) if n > 1 else 0.0
        elif cfg.sigma == "mean":
            sigma = float(np.mean(v[off])) if n > 1 else 0.0
        else:
            sigma = float(cfg.sigma)
        if sigma > 0:
            w = np.exp(-(v**2) / (2.0 * sigma**2))
        else:
            # every distance is zero: the kernel limit is 1 on zero distances
            w = (v == 0).astype(np.float64)
    else:
        k = cfg.n_neighbors
        if not 1 <= k <= n - 1:
            raise ConfigError(f"n_neighbors must be in [1, {n - 1}], got {k}")
        a = np.zeros((n, n))
        for i in range(n):
            row = v[i].copy()
            row[i] = np.inf
            nbrs = np.argsort(row, kind="stable")[:k]
            a[i, nbrs] = 1.0
        w = np.minimum(a, a.T) if cfg.mutual else np.maximum(a, a.T)
    np.fill_diagonal(w, 0.0)
    return w


def laplacian(w):
    """Unnormalized graph Laplacian ``D - W``."""
    w = np.asarray(w, dtype=np.float64)
    if w.ndim != 2 or w.shape[0] != w.shape[1]:
        raise SizeError("affinity matrix must be square")
    if not np.allclose(w, w.T, rtol=0, atol=1e-12):
        raise ParamError("affinity matrix is not symmetric")
    if np.any(w < 0):
        raise ParamError("affinity matrix has negative entries")
    return np.diag(w.sum(axis=1)) - w


def spectral_embed(lap, k):
    """Eigenpairs of the ``k`` smallest eigenvalues, ascending.

    Returns ``(eigenvalues, U)``; each column of ``U`` is sign-normalized so its
    largest-magnitude entry is positive.
    """
    lap = np.asarray(lap, dtype=np.float64)
    n = lap.shape[0]
    if not 1 <= k <= n:
        raise ParamError(f"k must be in [1, {n}], got {k}")
    sym = 0.5 * (lap + lap.T)
    try:
        vals, vecs = scipy.linalg.eigh(sym, subset_by_index=[0, k - 1])
    except (np.linalg.LinAlgError, ValueError) as exc:
        raise EigensolverError(f"eigendecomposition failed: {exc}") from exc
    if not (np.all(np.isfinite(vals)) and np.all(np.isfinite(vecs))):
        raise EigensolverError("eigendecomposition returned non-finite values")
    pivots = np.argmax(np.abs(vecs), axis=0)
    signs = np.sign(vecs[pivots, np.arange(k)])
    signs[signs == 0] = 1.0
    return vals, vecs * signs


@dataclass
class KMeansResult:
    assignments: np.ndarray
    centroids: np.ndarray
    objective: float
    n_iter: int
    history: list = field(default_factory=list)


def _kmeanspp(x, k, rng):
    n = x.shape[0]
    chosen = [int(rng.integers(n))]
    d2 = np.sum((x - x[chosen[0]]) ** 2, axis=1)
    for _ in range(1, k):
        total = d2.sum()
        if total > 0:
            idx = int(rng.choice(n, p=d2 / total))
        else:
            free = np.setdiff1d(np.arange(n), chosen)
            idx = int(free[rng.integers(len(free))])
        chosen.append(idx)
        d2 = np.minimum(d2, np.sum((x - x[idx]) ** 2, axis=1))
    return x[chosen].copy()


def _sq_dists(x, c):
    d = np.sum(x * x, axis=1)[:, None] - 2.0 * (x @ c.T) + np.sum(c * c, axis=1)[None, :]
    return np.maximum(d, 0.0)


def _repair_empty(x, labels, centroids, k):
    counts = np.bincount(labels, minlength=k)
    for c in np.flatnonzero(counts == 0):
        own = np.sum((x - centroids[labels]) ** 2, axis=1)
        donors = counts[labels] > 1
        if not donors.any():  # pragma: no cover - impossible while k <= n
            break
        cand = np.where(donors, own, -1.0)
        idx = int(np.argmax(cand))
        counts[labels[idx]] -= 1
        labels[idx] = c
        counts[c] = 1
        centroids[c] = x[idx]
    return labels


def _objective(x, labels, centroids):
    return float(np.sum((x - centroids[labels]) ** 2))


def _lloyd(x, k, rng, max_iter, tol):
    centroids = _kmeanspp(x, k, rng)
    history = []
    labels = None
    n_iter = 0
    for n_iter in range(1, max_iter + 1):
        labels = np.argmin(_sq_dists(x, centroids), axis=1)
        labels = _repair_empty(x, labels, centroids, k)
        new = np.zeros_like(centroids)
        np.add.at(new, labels, x)
        new /= np.bincount(labels, minlength=k)[:, None]
        shift = float(np.max(np.sqrt(np.sum((new - centroids) ** 2, axis=1))))
        centroids = new
        history.append(_objective(x, labels, centroids))
        if shift < tol:
            break
    return KMeansResult(labels, centroids, history[-1], n_iter, history)


def kmeans(points, k, seed=0, n_init=10, max_iter=300, tol=1e-8):
    """k-means++ seeded Lloyd iterations, best of ``n_init`` restarts.

    Every returned cluster is nonempty: an empty cluster takes over the point
    farthest from its centroid among clusters with more than one member.
    """
    x = np.asarray(points, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    n = x.shape[0]
    if not 1 <= k <= n:
        raise ParamError(f"k must be in [1, {n}], got {k}")
    if n_init < 1:
        raise ParamError("n_init must be >= 1")
    master = make_rng(seed)
    best = None
    for _ in range(n_init):
        res = _lloyd(x, k, make_rng(int(master.integers(0, 2**63))), max_iter, tol)
        if best is None or res.objective < best.objective:
            best = res
    return best


def _canonical_labels(labels, k):
    """Relabel clusters by order of first appearance."""
    mapping = {}
    for lab in labels:
        if lab not in mapping:
            mapping[lab] = len(mapping)
    for lab in range(k):
        mapping.setdefault(lab, len(mapping))
    return np.array([mapping[lab] for lab in labels], dtype=np.int64), mapping


def medoids(assignments, d):
    """Per cluster, the member with the smallest distance sum to its co-members."""
    labels = np.asarray(assignments, dtype=np.int64)
    v = _dist_values(d)
    if labels.shape[0] != v.shape[0]:
        raise SizeError("assignments and distance matrix disagree in length")
    out = []
    for c in range(int(labels.max()) + 1):
        members = np.flatnonzero(labels == c)
        if members.size == 0:
            raise ParamError(f"cluster {c} is empty")
        sums = v[np.ix_(members, members)].sum(axis=1)
        out.append(int(members[int(np.argmin(sums))]))
    return out


@dataclass
class ClusterResult:
    k: int
    assignments: np.ndarray
    embedding: np.ndarray
    medoid_indices: list
    objective: float
    eigenvalues: np.ndarray
    config: dict = field(default_factory=dict)

    def to_json_dict(self):
        return {
            "k": self.k,
            "assignments": [int(a) for a in self.assignments],
            "medoid_indices": [int(m) for m in self.medoid_indices],
            "kmeans_objective": self.objective,
            "eigenvalues": [float(e) for e in self.eigenvalues],
            "config": self.config,
        }

    def save_json(self, path, extra=None):
        doc = self.to_json_dict()
        if extra:
            doc.update(extra)
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(doc, fh, indent=2, sort_keys=False)
            fh.write("\n")


def spectral_cluster(d, k, cfg=None, seed=0, n_init=10, max_iter=300, tol=1e-8):
    cfg = cfg or AffinityConfig()
    v = _dist_values(d)
    n = v.shape[0]
    if not 1 <= k <= n:
        raise ParamError(f"k must be in [1, {n}], got {k}")
    w = build_affinity(v, cfg)
    lap = laplacian(w)
    vals, u = spectral_embed(lap, k)
    km = kmeans(u, k, seed=seed, n_init=n_init, max_iter=max_iter, tol=tol)
    labels, _ = _canonical_labels(km.assignments, k)
    return ClusterResult(
        k=k,
        assignments=labels,
        embedding=u,
        medoid_indices=medoids(labels, v),
        objective=km.objective,
        eigenvalues=vals,
        config={"affinity": cfg.to_dict(), "k": k, "seed": seed, "n_init": n_init,
                "max_iter": max_iter, "tol": tol},
    )


class SpectralDegradationClustering(ClusterMixin, BaseEstimator):
    """Estimator wrapper around :func:`spectral_cluster`.

    ``fit`` takes a precomputed ``(n, n)`` distance matrix (array or
    :class:`DistanceMatrix`), like sklearn's ``affinity="precomputed"`` mode.
    """

    def __init__(self, n_clusters=100, affinity="knn", sigma="median", n_neighbors=10,
                 mutual=False, n_init=10, max_iter=300, tol=1e-8, random_state=0):
        self.n_clusters = n_clusters
        self.affinity = affinity
        self.sigma = sigma
        self.n_neighbors = n_neighbors
        self.mutual = mutual
        self.n_init = n_init
        self.max_iter = max_iter
        self.tol = tol
        self.random_state = random_state

    def fit(self, X, y=None):
        v = _dist_values(X)
        if not np.allclose(v, v.T, rtol=0, atol=1e-12) or np.any(np.diag(v) != 0):
            raise ParamError("X must be a symmetric distance matrix with zero diagonal")
        cfg = AffinityConfig(self.affinity, self.sigma, self.n_neighbors, self.mutual)
        res = spectral_cluster(v, self.n_clusters, cfg, seed=self.random_state, n_init=self.n_init,
                               max_iter=self.max_iter, tol=self.tol)
        self.result_ = res
        self.labels_ = res.assignments
        self.medoid_indices_ = np.asarray(res.medoid_indices)
        self.embedding_ = res.embedding
        self.eigenvalues_ = res.eigenvalues
        self.inertia_ = res.objective
        return self


def purity(assignments, labels):
    """Fraction of items whose cluster's majority class equals their class."""
    assignments, labels = list(assignments), list(labels)
    if len(assignments) != len(labels):
        raise SizeError("assignments and labels differ in length")
    if not assignments:
        raise SizeError("need at least one item")
    per_cluster = {}
    for a, lab in zip(assignments, labels):
        per_cluster.setdefault(a, Counter())[lab] += 1
    return sum(max(c.values()) for c in per_cluster.values()) / len(assignments)


def silhouette(d, assignments):
    """Mean silhouette over items from a precomputed distance matrix.

    Items in singleton clusters score 0.
    """
    v = _dist_values(d)
    labels = np.asarray(assignments)
    if labels.shape[0] != v.shape[0]:
        raise SizeError("assignments and distance matrix disagree in length")
    uniq, inv = np.unique(labels, return_inverse=True)
    k = uniq.size
    if k < 2:
        raise ParamError("silhouette needs at least two clusters")
    counts = np.bincount(inv, minlength=k).astype(np.float64)
    onehot = np.zeros((v.shape[0], k))
    onehot[np.arange(v.shape[0]), inv] = 1.0
    sums = v @ onehot
    n = v.shape[0]
    own = counts[inv]
    a = np.where(own > 1, sums[np.arange(n), inv] / np.maximum(own - 1, 1), 0.0)
    means = sums / counts[None, :]
    means[np.arange(n), inv] = np.inf
    b = means.min(axis=1)
    denom = np.maximum(a, b)
    s = np.where((own > 1) & (denom > 0), (b - a) / np.where(denom > 0, denom, 1.0), 0.0)
    return float(np.mean(s))
