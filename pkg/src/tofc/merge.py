"""Training-free feature merging with density peaks clustering on K nearest neighbors.

Each patch's ``n_v`` features are scored by local density and separation,
the ``n_c`` best-scoring features become cluster centers, every other
feature joins its nearest center, and each cluster is average-pooled.
All ties resolve to the lower index so results are reproducible bit for bit.
"""

from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .errors import InvalidArgumentError
from .features import FeatureTensor

DEFAULT_K = 5


@dataclass(frozen=True)
class ClusterAssignment:
    centers: np.ndarray  # (n_p, n_c) feature indices, in selection order
    labels: np.ndarray  # (n_p, n_v) cluster ids in [0, n_c)
    rho: np.ndarray  # (n_p, n_v)
    delta: np.ndarray  # (n_p, n_v)


@dataclass(frozen=True)
class MergedFeatures:
    data: np.ndarray  # (n_p, n_c, d_v)
    assignment: ClusterAssignment
    n_v: int

    @property
    def n_p(self):
        return self.data.shape[0]

    @property
    def n_c(self):
        return self.data.shape[1]

    @property
    def d_v(self):
        return self.data.shape[2]

    @property
    def token_ratio(self):
        return self.n_c / self.n_v


def pairwise_sq_dists(x):
    """Squared Euclidean distances via the Gram-matrix shortcut.

    Entries small enough for cancellation to matter are recomputed directly,
    so duplicated features come out at exactly zero. The result is exactly
    symmetric, which keeps density ties between mutual neighbors intact.
    """
    x = np.asarray(x, dtype=np.float64)
    sq = np.einsum("ij,ij->i", x, x)
    d2 = sq[:, None] + sq[None, :] - 2.0 * (x @ x.T)
    scale = sq[:, None] + sq[None, :]
    suspect = np.argwhere(d2 <= 1e-8 * scale)
    if suspect.size:
        i, j = suspect[:, 0], suspect[:, 1]
        diff = x[i] - x[j]
        d2[i, j] = np.einsum("ij,ij->i", diff, diff)
    d2 = np.minimum(d2, d2.T)
    np.fill_diagonal(d2, 0.0)
    return np.maximum(d2, 0.0)


def _check_patch(x):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise InvalidArgumentError(f"patch features must be 2-D (n_v, d_v), got {x.shape}")
    return x


def local_density(x, k=DEFAULT_K, d2=None):
    """``exp(-mean squared distance to the k nearest other features)``."""
    x = _check_patch(x)
    n_v = x.shape[0]
    if not 1 <= k <= n_v - 1:
        raise InvalidArgumentError(f"K must lie in [1, n_v - 1] = [1, {n_v - 1}], got {k}")
    d2 = pairwise_sq_dists(x) if d2 is None else d2
    d2 = d2.copy()
    np.fill_diagonal(d2, np.inf)
    nearest = np.sort(np.partition(d2, k - 1, axis=1)[:, :k], axis=1)
    return np.exp(-nearest.sum(axis=1) / k)


def separation(x, rho, d2=None):
    """Distance to the nearest strictly denser feature, or the farthest one if none."""
    x = _check_patch(x)
    rho = np.asarray(rho, dtype=np.float64)
    if rho.shape != (x.shape[0],):
        raise InvalidArgumentError(f"rho has shape {rho.shape}, expected ({x.shape[0]},)")
    d = np.sqrt(pairwise_sq_dists(x) if d2 is None else d2)
    denser = rho[None, :] > rho[:, None]
    nearest_denser = np.where(denser, d, np.inf).min(axis=1)
    return np.where(denser.any(axis=1), nearest_denser, d.max(axis=1))


def select_centers(rho, delta, n_c):
    """Indices of the ``n_c`` largest ``rho * delta`` scores, best first."""
    score = np.asarray(rho, dtype=np.float64) * np.asarray(delta, dtype=np.float64)
    if not 1 <= n_c <= score.size:
        raise InvalidArgumentError(f"n_c must lie in [1, {score.size}], got {n_c}")
    return np.argsort(-score, kind="stable")[:n_c]


def merge_patch(x, centers, d2=None):
    """Assign features to their nearest center and average each cluster.

    Returns ``(merged (n_c, d_v), labels (n_v,))``.
    """
    x = _check_patch(x)
    centers = np.asarray(centers, dtype=np.int64)
    d2 = pairwise_sq_dists(x) if d2 is None else d2
    labels = np.argmin(d2[:, centers], axis=1)
    labels[centers] = np.arange(centers.size)
    n_c, d_v = centers.size, x.shape[1]
    sums = np.zeros((n_c, d_v))
    np.add.at(sums, labels, x)
    counts = np.bincount(labels, minlength=n_c)
    return sums / counts[:, None], labels


def merge(features, n_c, k=DEFAULT_K):
    """Apply the merging pipeline to every patch of ``features``."""
    x = features.data if isinstance(features, FeatureTensor) else np.asarray(features)
    if x.ndim != 3:
        raise InvalidArgumentError(f"expected (n_p, n_v, d_v) features, got shape {x.shape}")
    n_p, n_v, d_v = x.shape
    if not 1 <= n_c <= n_v:
        raise InvalidArgumentError(f"n_c must lie in [1, {n_v}], got {n_c}")
    out = np.empty((n_p, n_c, d_v))
    centers = np.empty((n_p, n_c), dtype=np.int64)
    labels = np.empty((n_p, n_v), dtype=np.int64)
    rhos = np.empty((n_p, n_v))
    deltas = np.empty((n_p, n_v))
    for n in range(n_p):
        patch = x[n].astype(np.float64)
        d2 = pairwise_sq_dists(patch)
        rho = local_density(patch, k, d2=d2)
        delta = separation(patch, rho, d2=d2)
        c = select_centers(rho, delta, n_c)
        out[n], labels[n] = merge_patch(patch, c, d2=d2)
        centers[n], rhos[n], deltas[n] = c, rho, delta
    return MergedFeatures(out, ClusterAssignment(centers, labels, rhos, deltas), n_v)


class FeatureMerger(TransformerMixin, BaseEstimator):
    """Reduce ``(n_p, n_v, d_v)`` features to ``(n_p, n_c, d_v)`` cluster means.

    Stateless apart from the validated input width; ``fit`` exists for
    pipeline compatibility.

    Parameters
    ----------
    n_c : int
        Merged features kept per patch.
    k : int
        Neighbor count for the local density.
    """

    def __init__(self, n_c=16, k=DEFAULT_K):
        self.n_c = n_c
        self.k = k

    def _validate(self, X):
        X = X.data if isinstance(X, FeatureTensor) else np.asarray(X, dtype=np.float64)
        if X.ndim != 3:
            raise InvalidArgumentError(f"expected (n_p, n_v, d_v) features, got shape {X.shape}")
        if not np.all(np.isfinite(X)):
            raise InvalidArgumentError("features contain non-finite values")
        return X

    def fit(self, X, y=None):
        X = self._validate(X)
        n_v = X.shape[1]
        if not 1 <= self.n_c <= n_v:
            raise InvalidArgumentError(f"n_c must lie in [1, {n_v}], got {self.n_c}")
        if not 1 <= self.k <= n_v - 1:
            raise InvalidArgumentError(f"k must lie in [1, {n_v - 1}], got {self.k}")
        self.n_features_in_ = X.shape[2]
        self.n_v_ = n_v
        return self

    def transform(self, X):
        check_is_fitted(self, "n_features_in_")
        X = self._validate(X)
        if X.shape[2] != self.n_features_in_:
            raise InvalidArgumentError(f"fitted on d_v={self.n_features_in_}, got {X.shape[2]}")
        return merge(X, self.n_c, self.k).data

    @property
    def token_ratio_(self):
        check_is_fitted(self, "n_v_")
        return self.n_c / self.n_v_
