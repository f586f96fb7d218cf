"""Class distributions induced by a centroid, and the divergences between them.

All logarithms are natural, so divergences are in nats.  The symmetrized KL
is the Jeffreys sum ``KL(p||q) + KL(q||p)``, not the half-sum.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from taskgen.errors import InvalidInputError

PROB_FLOOR = 1e-300


class DivergenceKind(str, enum.Enum):
    EUCLIDEAN = "euclidean"
    WASSERSTEIN2 = "wasserstein2"
    KL = "kl"
    SYMMETRIZED_KL = "symkl"

    @classmethod
    def parse(cls, value):
        if isinstance(value, cls):
            return value
        aliases = {"sym_kl": "symkl", "symmetrized_kl": "symkl", "w2": "wasserstein2"}
        value = str(value).lower()
        return cls(aliases.get(value, value))


@dataclass(frozen=True, eq=False)
class ClassDistribution:
    class_ids: np.ndarray
    probs: np.ndarray
    log_probs: np.ndarray

    @classmethod
    def from_log_probs(cls, class_ids, log_probs):
        log_probs = np.asarray(log_probs, dtype=np.float64)
        return cls(np.asarray(class_ids), np.exp(log_probs), log_probs)

    @classmethod
    def from_probs(cls, class_ids, probs):
        probs = np.asarray(probs, dtype=np.float64)
        if probs.ndim != 1 or np.any(probs <= 0) or abs(probs.sum() - 1.0) > 1e-9:
            raise InvalidInputError("probs must be strictly positive and sum to 1")
        return cls(np.asarray(class_ids), probs, np.log(np.maximum(probs, PROB_FLOOR)))


def squared_distances(points, centroid):
    points = np.asarray(points, dtype=np.float64)
    centroid = np.asarray(centroid, dtype=np.float64)
    if centroid.shape != (points.shape[1],):
        raise InvalidInputError(
            f"centroid has shape {centroid.shape}, expected ({points.shape[1]},)"
        )
    diff = points - centroid
    return np.einsum("ij,ij->i", diff, diff)


def log_softmax(logits):
    return logits - logsumexp(logits)


def class_distribution(emb, centroid) -> ClassDistribution:
    """softmax(-||phi_i - centroid||^2) over the classes of ``emb``."""
    logp = log_softmax(-squared_distances(emb.means, centroid))
    return ClassDistribution.from_log_probs(emb.class_ids, logp)


def _check_aligned(p, q):
    if p.class_ids.shape != q.class_ids.shape or not np.array_equal(p.class_ids, q.class_ids):
        raise InvalidInputError("distributions are defined over different class ids")


def kl_from_logs(logp, logq):
    return float(np.sum(np.exp(logp) * (logp - logq)))


def kl(p: ClassDistribution, q: ClassDistribution) -> float:
    _check_aligned(p, q)
    return max(kl_from_logs(p.log_probs, q.log_probs), 0.0)


def sym_kl(p: ClassDistribution, q: ClassDistribution) -> float:
    _check_aligned(p, q)
    d = kl_from_logs(p.log_probs, q.log_probs) + kl_from_logs(q.log_probs, p.log_probs)
    return max(d, 0.0)


@dataclass(frozen=True, eq=False)
class GaussianSummary:
    mean: np.ndarray
    covariance: np.ndarray
    damping: float = 0.0

    @property
    def dim(self):
        return int(self.mean.shape[0])


def gaussian_summary(vectors, damping: float = 0.001) -> GaussianSummary:
    """Mean and biased (1/n) covariance plus ``damping * I``."""
    x = np.asarray(vectors, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    if x.shape[0] == 0:
        raise InvalidInputError("need at least one vector")
    if damping < 0:
        raise InvalidInputError("damping must be non-negative")
    mean = x.mean(axis=0)
    centered = x - mean
    cov = centered.T @ centered / x.shape[0]
    cov = 0.5 * (cov + cov.T) + damping * np.eye(x.shape[1])
    return GaussianSummary(mean, cov, float(damping))


def _sym_sqrt(mat):
    w, v = np.linalg.eigh(0.5 * (mat + mat.T))
    return (v * np.sqrt(np.clip(w, 0.0, None))) @ v.T


def _gaussian_kl(a: GaussianSummary, b: GaussianSummary) -> float:
    k = a.dim
    try:
        chol_b = np.linalg.cholesky(b.covariance)
        chol_a = np.linalg.cholesky(a.covariance)
    except np.linalg.LinAlgError:
        raise InvalidInputError("covariance is not positive definite; use damping > 0") from None
    inv_b = np.linalg.inv(b.covariance)
    diff = b.mean - a.mean
    logdet_a = 2.0 * np.sum(np.log(np.diag(chol_a)))
    logdet_b = 2.0 * np.sum(np.log(np.diag(chol_b)))
    value = 0.5 * (np.trace(inv_b @ a.covariance) + diff @ inv_b @ diff - k + logdet_b - logdet_a)
    return max(float(value), 0.0)


def gaussian_divergence(a: GaussianSummary, b: GaussianSummary, kind) -> float:
    """Divergence between two Gaussian summaries.

    ``WASSERSTEIN2`` returns the *squared* 2-Wasserstein distance.
    ``KL`` is ``KL(a || b)``.
    """
    kind = DivergenceKind.parse(kind)
    if a.dim != b.dim:
        raise InvalidInputError(f"dimension mismatch: {a.dim} vs {b.dim}")
    if kind is DivergenceKind.EUCLIDEAN:
        return float(np.linalg.norm(a.mean - b.mean))
    if kind is DivergenceKind.WASSERSTEIN2:
        root_b = _sym_sqrt(b.covariance)
        cross = _sym_sqrt(root_b @ a.covariance @ root_b)
        mean_term = float(np.sum((a.mean - b.mean) ** 2))
        trace_term = float(np.trace(a.covariance) + np.trace(b.covariance) - 2.0 * np.trace(cross))
        return max(mean_term + trace_term, 0.0)
    if kind is DivergenceKind.KL:
        return _gaussian_kl(a, b)
    return _gaussian_kl(a, b) + _gaussian_kl(b, a)
