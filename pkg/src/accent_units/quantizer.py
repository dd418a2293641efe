"""K-means codebook learning and frame-wise unit assignment."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator, ClusterMixin, TransformerMixin
from sklearn.utils import check_array

from .exceptions import ContractError, NotFittedError

CODEBOOK_MAGIC = b"KMCB"
CODEBOOK_VERSION = 1
_HEADER = struct.Struct("<4sIII")
_BUDGET = 2_000_000  # elements per distance block


@dataclass
class Codebook:
    centroids: np.ndarray
    inertia: float = 0.0
    history: list[float] = field(default_factory=list)

    def __post_init__(self):
        self.centroids = np.asarray(self.centroids, dtype=np.float64)
        if self.centroids.ndim != 2 or self.centroids.shape[0] < 1:
            raise ContractError("quantizer", "centroids must be a non-empty V x d matrix")
        if not np.all(np.isfinite(self.centroids)):
            raise ContractError("quantizer", "codebook contains non-finite centroids")

    @property
    def V(self) -> int:
        return self.centroids.shape[0]

    @property
    def d(self) -> int:
        return self.centroids.shape[1]

    def save(self, path) -> None:
        with open(path, "wb") as fh:
            fh.write(_HEADER.pack(CODEBOOK_MAGIC, CODEBOOK_VERSION, self.V, self.d))
            fh.write(np.ascontiguousarray(self.centroids, dtype="<f8").tobytes())
            fh.write(struct.pack("<d", self.inertia))

    @classmethod
    def load(cls, path) -> "Codebook":
        with open(path, "rb") as fh:
            raw = fh.read()
        if len(raw) < _HEADER.size:
            raise ContractError("quantizer", f"{path}: truncated codebook")
        magic, version, V, d = _HEADER.unpack_from(raw)
        if magic != CODEBOOK_MAGIC or version != CODEBOOK_VERSION:
            raise ContractError("quantizer", f"{path}: not a KMCB v1 codebook")
        n = V * d * 8
        if len(raw) != _HEADER.size + n + 8:
            raise ContractError("quantizer", f"{path}: size does not match {V}x{d} codebook")
        cent = np.frombuffer(raw, dtype="<f8", count=V * d, offset=_HEADER.size).reshape(V, d)
        (inertia,) = struct.unpack_from("<d", raw, _HEADER.size + n)
        return cls(cent.astype(np.float64), float(inertia))


def _sq_distances(X, centroids, c_sq=None):
    if c_sq is None:
        c_sq = np.einsum("ij,ij->i", centroids, centroids)
    x_sq = np.einsum("ij,ij->i", X, X)
    d = x_sq[:, None] - 2.0 * (X @ centroids.T) + c_sq[None, :]
    return np.maximum(d, 0.0, out=d)


def _chunk_rows(V, d):
    return max(1, _BUDGET // max(1, V * d))


def _nearest_fast(X, centroids):
    """Labels via the expanded distance form; used inside Lloyd iterations."""
    n = X.shape[0]
    labels = np.empty(n, dtype=np.int64)
    c_sq = np.einsum("ij,ij->i", centroids, centroids)
    step = max(1, _BUDGET // centroids.shape[0])
    for s in range(0, n, step):
        labels[s:s + step] = _sq_distances(X[s:s + step], centroids, c_sq).argmin(axis=1)
    diff = X - centroids[labels]
    return labels, np.einsum("ij,ij->i", diff, diff)


def _nearest(X, centroids):
    """Labels and exact squared distances; ties go to the lowest centroid index."""
    n = X.shape[0]
    labels = np.empty(n, dtype=np.int64)
    dist = np.empty(n, dtype=np.float64)
    step = _chunk_rows(*centroids.shape)
    for s in range(0, n, step):
        diff = X[s:s + step, None, :] - centroids[None, :, :]
        D = np.einsum("ijk,ijk->ij", diff, diff)
        lab = D.argmin(axis=1)
        labels[s:s + step] = lab
        dist[s:s + step] = D[np.arange(lab.size), lab]
    return labels, dist


def _kmeans_plusplus(X, V, rng, n_local_trials=None):
    """Greedy k-means++: each step keeps the best of several D^2-weighted draws."""
    n = X.shape[0]
    if n_local_trials is None:
        n_local_trials = 2 + int(np.log(V))
    centers = np.empty((V, X.shape[1]), dtype=np.float64)
    centers[0] = X[int(rng.integers(n))]
    diff = X - centers[0]
    closest = np.einsum("ij,ij->i", diff, diff)
    for c in range(1, V):
        total = closest.sum()
        if total <= 0.0:
            centers[c] = X[int(rng.integers(n))]
            continue
        draws = rng.random(n_local_trials) * total
        cand = np.minimum(np.searchsorted(np.cumsum(closest), draws, side="right"), n - 1)
        best, best_pot, best_d = None, np.inf, None
        for idx in cand:
            d = X - X[idx]
            d = np.minimum(closest, np.einsum("ij,ij->i", d, d))
            pot = d.sum()
            if pot < best_pot:
                best, best_pot, best_d = idx, pot, d
        centers[c] = X[best]
        closest = best_d
    return centers


def _inertia(X, centroids, labels):
    diff = X - centroids[labels]
    return float(np.einsum("ij,ij->", diff, diff))


def _lloyd(X, V, max_iters, tol, rng):
    centroids = _kmeans_plusplus(X, V, rng)
    labels, dist = _nearest_fast(X, centroids)
    inertia = float(dist.sum())
    history = [inertia]
    for _ in range(max_iters):
        new = np.zeros_like(centroids)
        np.add.at(new, labels, X)
        counts = np.bincount(labels, minlength=V)
        live = counts > 0
        new[live] /= counts[live, None]
        if not live.all():
            # reseed each empty cluster with the point farthest from its centroid
            far = np.argsort(-dist, kind="stable")
            for taken, c in enumerate(np.flatnonzero(~live)):
                new[c] = X[far[taken]]
        labels_new, dist_new = _nearest_fast(X, new)
        new_inertia = float(dist_new.sum())
        if new_inertia > inertia * (1 + 1e-12) + 1e-12:
            raise RuntimeError(f"quantizer: inertia increased from {inertia} to {new_inertia}")
        improvement = (inertia - new_inertia) / inertia if inertia > 0 else 0.0
        centroids, labels, dist, inertia = new, labels_new, dist_new, new_inertia
        history.append(inertia)
        if improvement < tol:
            break
    # final labels use exact distances so they agree with assign()
    labels, _ = _nearest(X, centroids)
    return Codebook(centroids, _inertia(X, centroids, labels), history)


def fit_kmeans(frames, V: int, max_iters: int = 100, tol: float = 1e-4, seed: int = 0,
               n_init: int = 4) -> Codebook:
    """Lloyd's algorithm with greedy k-means++ seeding.

    Each restart runs until the relative inertia improvement drops below
    ``tol`` or ``max_iters`` iterations, asserting after every iteration that
    the objective did not increase. The restart with the lowest inertia wins
    (earliest on ties).
    """
    X = np.asarray(frames, dtype=np.float64)
    if X.ndim != 2:
        raise ContractError("quantizer", "frames must be an N x d matrix")
    if not np.all(np.isfinite(X)):
        raise ContractError("quantizer", "non-finite input frames")
    if V < 1:
        raise ContractError("quantizer", "V must be >= 1")
    if X.shape[0] < V:
        raise ContractError("quantizer", f"need N >= V, got N={X.shape[0]}, V={V}")
    if n_init < 1:
        raise ContractError("quantizer", "n_init must be >= 1")
    best = None
    for child in np.random.SeedSequence(seed).spawn(n_init):
        cb = _lloyd(X, V, max_iters, tol, np.random.default_rng(child))
        if best is None or cb.inertia < best.inertia:
            best = cb
    return best


def assign(codebook: Codebook, frames) -> np.ndarray:
    X = np.asarray(frames, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != codebook.d:
        raise ContractError(
            "quantizer", f"frames have dimension {X.shape[-1]}, codebook expects {codebook.d}"
        )
    if X.shape[0] == 0:
        return np.zeros(0, dtype=np.int64)
    labels, _ = _nearest(X, codebook.centroids)
    return labels


class KMeansQuantizer(ClusterMixin, TransformerMixin, BaseEstimator):
    """Frame quantizer producing discrete unit ids.

    Parameters
    ----------
    n_clusters : int, default=500
        Codebook size, i.e. the unit vocabulary size downstream.
    max_iter : int, default=100
    tol : float, default=1e-4
        Stop once the relative inertia improvement falls below this value.
    n_init : int, default=4
        Independent seedings; the lowest-inertia run is kept.
    random_state : int, default=0
        Seed for k-means++ initialization.
    """

    def __init__(self, n_clusters=500, max_iter=100, tol=1e-4, n_init=4, random_state=0):
        self.n_clusters = n_clusters
        self.max_iter = max_iter
        self.tol = tol
        self.n_init = n_init
        self.random_state = random_state

    def fit(self, X, y=None):
        X = check_array(X, dtype=np.float64)
        self.codebook_ = fit_kmeans(X, self.n_clusters, self.max_iter, self.tol,
                                  self.random_state, self.n_init)
        self.cluster_centers_ = self.codebook_.centroids
        self.inertia_ = self.codebook_.inertia
        self.inertia_history_ = list(self.codebook_.history)
        self.n_iter_ = len(self.inertia_history_) - 1
        self.labels_ = assign(self.codebook_, X)
        return self

    def _check_fitted(self):
        if not hasattr(self, "codebook_"):
            raise NotFittedError(self)

    def predict(self, X):
        self._check_fitted()
        return assign(self.codebook_, check_array(X, dtype=np.float64))

    def transform(self, X):
        """Squared distance of every frame to every centroid."""
        self._check_fitted()
        X = check_array(X, dtype=np.float64)
        return _sq_distances(X, self.codebook_.centroids)

    @classmethod
    def from_codebook(cls, codebook: Codebook) -> "KMeansQuantizer":
        est = cls(n_clusters=codebook.V)
        est.codebook_ = codebook
        est.cluster_centers_ = codebook.centroids
        est.inertia_ = codebook.inertia
        return est
