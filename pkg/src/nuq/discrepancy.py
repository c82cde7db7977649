"""Kernel two-sample discrepancies between sets of posterior draws.

Sample sets are arrays of shape (m, p): m draws of a p-dimensional vector
(p = number of voxels in a pooled region).  One-dimensional input is read
as m scalar draws.
"""

import math
from dataclasses import dataclass, replace

import numpy as np
from scipy.spatial.distance import cdist, pdist

from .errors import ContractError

KERNELS = ("linear", "polynomial", "rbf")
RBF_FALLBACK_BANDWIDTH = 1.0


@dataclass(frozen=True)
class KernelSpec:
    """Kernel choice and parameters.

    ``scale`` is the inner-product normalizer for the polynomial kernel
    (default: vector dimension) and the bandwidth for the RBF kernel
    (default: median heuristic).  ``None`` means "resolve from the data".
    """

    kind: str = "linear"
    degree: int = 2
    scale: float | None = None
    offset: float = 1.0

    def __post_init__(self):
        if self.kind not in KERNELS:
            raise ContractError(f"unknown kernel {self.kind!r}; choose from {KERNELS}")
        if self.kind == "polynomial" and (int(self.degree) != self.degree or self.degree < 2):
            raise ContractError(f"polynomial degree must be an integer >= 2, got {self.degree}")
        if self.scale is not None and not self.scale > 0:
            raise ContractError(f"kernel scale must be positive, got {self.scale}")

    def resolve(self, X, Y):
        """Copy of this spec with ``scale`` filled in from the data."""
        if self.scale is not None or self.kind == "linear":
            return self
        if self.kind == "polynomial":
            return replace(self, scale=float(as_samples(X).shape[1]))
        return replace(self, scale=median_heuristic_bandwidth(X, Y)[0])

    def to_dict(self):
        return {"kind": self.kind, "degree": int(self.degree) if self.kind == "polynomial" else None,
                "scale": self.scale, "offset": self.offset if self.kind == "polynomial" else None}


def as_samples(X):
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X[:, None]
    if X.ndim != 2 or X.shape[0] < 1:
        raise ContractError(f"sample set must be a non-empty (m, p) array, got shape {X.shape}")
    return X


def _check_pair(X, Y):
    X, Y = as_samples(X), as_samples(Y)
    if X.shape[1] != Y.shape[1]:
        raise ContractError(f"dimension mismatch: {X.shape[1]} vs {Y.shape[1]}")
    return X, Y


def kernel_eval(k, x, y):
    """Kernel value for a single pair of vectors."""
    x = np.atleast_1d(np.asarray(x, dtype=np.float64))
    y = np.atleast_1d(np.asarray(y, dtype=np.float64))
    if x.shape != y.shape:
        raise ContractError(f"dimension mismatch: {x.shape} vs {y.shape}")
    return float(gram(k, x[None], y[None])[0, 0])


def gram(k, X, Y):
    """Kernel matrix ``K[i, j] = k(X[i], Y[j])``."""
    X, Y = _check_pair(X, Y)
    if k.kind == "linear":
        return X @ Y.T
    if k.scale is None:
        k = k.resolve(X, Y)
    if k.kind == "polynomial":
        return (X @ Y.T / k.scale + k.offset) ** int(k.degree)
    return np.exp(-cdist(X, Y, "sqeuclidean") / (2.0 * k.scale ** 2))


def median_heuristic_bandwidth(X, Y=None):
    """Median pairwise Euclidean distance over the pooled sample.

    Returns
    -------
    bandwidth : float
    degenerate : bool
        True when the median is zero and the fallback of 1.0 was used.
    """
    pooled = as_samples(X) if Y is None else np.vstack(_check_pair(X, Y))
    if pooled.shape[0] < 2:
        raise ContractError("median heuristic needs at least two pooled points")
    med = float(np.median(pdist(pooled)))
    if med == 0.0:
        return RBF_FALLBACK_BANDWIDTH, True
    return med, False


def _mean(K):
    return math.fsum(K.ravel()) / K.size


def mmd_squared(X, Y, k=None):
    """Biased (V-statistic) estimate of the squared MMD.

    ``mean k(X, X) + mean k(Y, Y) - 2 mean k(X, Y)`` over all index pairs,
    self-pairs included, so the value is never negative up to rounding;
    it is clamped at zero.
    """
    X, Y = _check_pair(X, Y)
    # Canonical argument order makes the result exactly symmetric.
    if (Y.shape, Y.tobytes()) < (X.shape, X.tobytes()):
        X, Y = Y, X
    k = (k or KernelSpec()).resolve(X, Y)
    if k.kind == "linear":
        # Linear MMD is translation invariant; centering avoids cancellation.
        c = np.vstack([X, Y]).mean(axis=0)
        X, Y = X - c, Y - c
    value = _mean(gram(k, X, X)) + _mean(gram(k, Y, Y)) - 2.0 * _mean(gram(k, X, Y))
    return max(value, 0.0)


def wasserstein_1d(X, Y):
    """W1 distance between two equal-size sets of scalars."""
    x = np.sort(np.asarray(X, dtype=np.float64).ravel())
    y = np.sort(np.asarray(Y, dtype=np.float64).ravel())
    if x.size != y.size or x.size == 0:
        raise ContractError(f"wasserstein_1d needs equal non-empty sample counts, got {x.size} and {y.size}")
    return math.fsum(np.abs(x - y)) / x.size
