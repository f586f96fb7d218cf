"""Penalized two-centroid clustering of class embeddings into train/val/test.

Two centroids define distributions over classes,
``p_train = softmax(-||phi - mu_train||^2)`` and likewise ``p_test``.  The
objective is the negative log-likelihood of the equal mixture of the two plus
a quadratic penalty pulling the divergence between them towards a target::

    J = -sum_i log(0.5 * (p_train_i + p_test_i)) + lam * (D(p_train || p_test) - R)^2

The centroids are fitted with full-batch SGD with momentum and the classes are
ranked by ``log p_train - log p_test``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.special import logsumexp

from taskgen.divergence import DivergenceKind, squared_distances
from taskgen.embeddings import ClassEmbeddingSet, normalize_unit
from taskgen.errors import InvalidInputError, NumericalError

INIT_NOISE = 1e-3


@dataclass(frozen=True)
class AtgConfig:
    target_divergence: float = 0.0
    penalty_weight: float = 1.0
    learning_rate: float = 0.1
    momentum: float = 0.9
    iterations: int = 7000
    seed: int = 0
    divergence: DivergenceKind = DivergenceKind.SYMMETRIZED_KL
    train_fraction: float = 0.6
    trace_every: int = 1
    nll_reduction: str = "sum"

    def __post_init__(self):
        object.__setattr__(self, "divergence", DivergenceKind.parse(self.divergence))
        if self.divergence not in (DivergenceKind.KL, DivergenceKind.SYMMETRIZED_KL):
            raise InvalidInputError("the objective supports only 'kl' and 'symkl' divergences")
        if not (math.isfinite(self.target_divergence) and self.target_divergence >= 0):
            raise InvalidInputError("target divergence must be a non-negative number")
        if not (math.isfinite(self.penalty_weight) and self.penalty_weight >= 0):
            raise InvalidInputError("penalty weight must be non-negative")
        if not self.learning_rate > 0:
            raise InvalidInputError("learning rate must be positive")
        if not 0 <= self.momentum < 1:
            raise InvalidInputError("momentum must lie in [0, 1)")
        if int(self.iterations) < 1:
            raise InvalidInputError("iterations must be positive")
        if not 0 < self.train_fraction < 1:
            raise InvalidInputError("train fraction must lie in (0, 1)")
        if int(self.trace_every) < 1:
            raise InvalidInputError("trace stride must be positive")
        if self.nll_reduction not in ("sum", "mean"):
            raise InvalidInputError("nll_reduction must be 'sum' or 'mean'")
        if int(self.seed) < 0:
            raise InvalidInputError("seed must be non-negative")


@dataclass
class CentroidPair:
    mu_train: np.ndarray
    mu_test: np.ndarray
    velocity_train: np.ndarray = None
    velocity_test: np.ndarray = None

    def __post_init__(self):
        self.mu_train = np.array(self.mu_train, dtype=np.float64)
        self.mu_test = np.array(self.mu_test, dtype=np.float64)
        if self.mu_train.ndim != 1 or self.mu_train.shape != self.mu_test.shape:
            raise InvalidInputError("centroids must be vectors of equal length")
        if self.velocity_train is None:
            self.velocity_train = np.zeros_like(self.mu_train)
        if self.velocity_test is None:
            self.velocity_test = np.zeros_like(self.mu_test)

    @property
    def dim(self):
        return int(self.mu_train.shape[0])

    def to_dict(self):
        return {"mu_train": self.mu_train.tolist(), "mu_test": self.mu_test.tolist()}


@dataclass(frozen=True)
class ObjectiveValue:
    total: float
    nll: float
    penalty: float
    achieved_divergence: float


@dataclass(frozen=True, eq=False)
class AssignmentScores:
    class_ids: np.ndarray
    scores: np.ndarray


@dataclass
class Partition:
    train: list
    validation: list
    test: list
    meta: dict = field(default_factory=dict)

    def to_dict(self):
        meta_keys = (
            "target_divergence",
            "achieved_divergence",
            "lambda",
            "seed",
            "iterations",
            "divergence_kind",
            "train_fraction",
        )
        meta = {k: self.meta[k] for k in meta_keys if k in self.meta}
        meta.update({k: v for k, v in self.meta.items() if k not in meta})
        return {
            "train": sorted(int(c) for c in self.train),
            "validation": sorted(int(c) for c in self.validation),
            "test": sorted(int(c) for c in self.test),
            "meta": meta,
        }

    @classmethod
    def from_dict(cls, data):
        return cls(list(data["train"]), list(data["validation"]), list(data["test"]), dict(data.get("meta", {})))


def _check_dims(emb, centroids):
    if centroids.dim != emb.dim:
        raise InvalidInputError(f"centroid dim {centroids.dim} does not match embedding dim {emb.dim}")


def _evaluate(means, mu_train, mu_test, config, with_grad):
    """Objective terms and (optionally) gradients, computed from log-probabilities."""
    diff_tr = means - mu_train
    diff_te = means - mu_test
    a = -np.einsum("ij,ij->i", diff_tr, diff_tr)
    b = -np.einsum("ij,ij->i", diff_te, diff_te)
    lp = a - logsumexp(a)
    lq = b - logsumexp(b)
    p = np.exp(lp)
    q = np.exp(lq)

    log_mix = np.logaddexp(lp, lq)
    nll_scale = 1.0 / means.shape[0] if config.nll_reduction == "mean" else 1.0
    nll = float(-np.sum(log_mix - math.log(2.0))) * nll_scale

    delta = lp - lq
    kl_pq = float(np.dot(p, delta))
    if config.divergence is DivergenceKind.SYMMETRIZED_KL:
        kl_qp = float(-np.dot(q, delta))
        div = kl_pq + kl_qp
    else:
        div = kl_pq
    gap = div - config.target_divergence
    penalty = config.penalty_weight * gap * gap
    value = ObjectiveValue(nll + penalty, nll, penalty, max(div, 0.0))
    if not with_grad:
        return value, None, None

    # d nll / d logits: responsibility of each component minus its softmax share
    w_p = np.exp(lp - log_mix)
    w_q = np.exp(lq - log_mix)
    g_a = (-w_p + p * w_p.sum()) * nll_scale
    g_b = (-w_q + q * w_q.sum()) * nll_scale

    if config.divergence is DivergenceKind.SYMMETRIZED_KL:
        d_a = p * (delta - kl_pq) + (p - q)
        d_b = q * (-delta - kl_qp) + (q - p)
    else:
        d_a = p * (delta - kl_pq)
        d_b = q - p
    scale = 2.0 * config.penalty_weight * gap
    g_a = g_a + scale * d_a
    g_b = g_b + scale * d_b

    # logits a_i = -||phi_i - mu||^2, so d a_i / d mu = 2 (phi_i - mu)
    grad_train = 2.0 * (g_a @ diff_tr)
    grad_test = 2.0 * (g_b @ diff_te)
    return value, grad_train, grad_test


def objective(emb: ClassEmbeddingSet, centroids: CentroidPair, config: AtgConfig) -> ObjectiveValue:
    _check_dims(emb, centroids)
    value, _, _ = _evaluate(emb.means, centroids.mu_train, centroids.mu_test, config, with_grad=False)
    return value


def gradient(emb: ClassEmbeddingSet, centroids: CentroidPair, config: AtgConfig):
    """Analytic gradient of the objective with respect to ``(mu_train, mu_test)``."""
    _check_dims(emb, centroids)
    _, g_tr, g_te = _evaluate(emb.means, centroids.mu_train, centroids.mu_test, config, with_grad=True)
    return g_tr, g_te


def init_centroids(emb: ClassEmbeddingSet, seed: int) -> CentroidPair:
    """Both centroids at the mean class embedding plus independent seeded noise.

    The noise (scale ``INIT_NOISE``) breaks the ``mu_train == mu_test``
    saddle, where the divergence penalty has zero gradient.
    """
    rng = np.random.default_rng(seed)
    center = emb.means.mean(axis=0)
    noise = rng.standard_normal((2, emb.dim)) * INIT_NOISE
    return CentroidPair(center + noise[0], center + noise[1])


def optimize(emb: ClassEmbeddingSet, config: AtgConfig, init: CentroidPair | None = None):
    """Run ``config.iterations`` SGD-with-momentum steps on both centroids.

    Returns the final centroids and the objective trace.  The trace holds the
    value before every ``trace_every``-th step and always ends with the value
    at the returned centroids.
    """
    if not emb.normalized:
        raise InvalidInputError("optimize requires unit-normalized class embeddings")
    if len(emb) < 2:
        raise InvalidInputError("need at least two classes")
    pair = init if init is not None else init_centroids(emb, config.seed)
    _check_dims(emb, pair)
    means = emb.means
    mu_tr, mu_te = pair.mu_train.copy(), pair.mu_test.copy()
    v_tr, v_te = pair.velocity_train.copy(), pair.velocity_test.copy()
    lr, mom = config.learning_rate, config.momentum
    trace = []
    # a diverging run produces inf/nan; it is reported as NumericalError below
    with np.errstate(over="ignore", invalid="ignore"):
        for it in range(int(config.iterations)):
            value, g_tr, g_te = _evaluate(means, mu_tr, mu_te, config, with_grad=True)
            if not math.isfinite(value.total) or not (np.all(np.isfinite(g_tr)) and np.all(np.isfinite(g_te))):
                raise NumericalError(f"non-finite objective at iteration {it}", iteration=it)
            if it % config.trace_every == 0:
                trace.append(value)
            v_tr = mom * v_tr - lr * g_tr
            v_te = mom * v_te - lr * g_te
            mu_tr = mu_tr + v_tr
            mu_te = mu_te + v_te
        final, _, _ = _evaluate(means, mu_tr, mu_te, config, with_grad=False)
        if not math.isfinite(final.total):
            raise NumericalError(f"non-finite objective at iteration {config.iterations}", iteration=config.iterations)
        trace.append(final)
    return CentroidPair(mu_tr, mu_te, v_tr, v_te), trace


def scores(emb: ClassEmbeddingSet, centroids: CentroidPair) -> AssignmentScores:
    """Per-class ``log p_train - log p_test``."""
    _check_dims(emb, centroids)
    a = -squared_distances(emb.means, centroids.mu_train)
    b = -squared_distances(emb.means, centroids.mu_test)
    s = (a - logsumexp(a)) - (b - logsumexp(b))
    return AssignmentScores(emb.class_ids.copy(), s)


def _tie_keys(n, seed):
    return np.random.default_rng(seed).permutation(n)


def _alternate(ids_ascending):
    """Lowest score to test, next to validation, and so on."""
    return list(ids_ascending[1::2]), list(ids_ascending[0::2])


def assign(sc: AssignmentScores, train_fraction: float = 0.6, seed: int = 0, rule: str = "fraction") -> Partition:
    """Split classes by score.

    ``rule="fraction"`` sends the top ``floor(train_fraction * M)`` classes to
    train and alternates the rest, from the lowest score up, between test and
    validation.  ``rule="ratio"`` sends every class with a positive score to
    train and alternates the others the same way.  Exact score ties are broken
    by a seeded random permutation.
    """
    ids = np.asarray(sc.class_ids)
    values = np.asarray(sc.scores, dtype=np.float64)
    m = ids.size
    if not np.all(np.isfinite(values)):
        raise InvalidInputError("scores must be finite")
    if not 0 < train_fraction < 1:
        raise InvalidInputError("train fraction must lie in (0, 1)")
    keys = _tie_keys(m, seed)
    # descending by score, ties by the random key
    order = np.lexsort((keys, -values))
    ranked = ids[order]
    if rule == "fraction":
        n_train = int(math.floor(train_fraction * m))
    elif rule == "ratio":
        ranked_scores = values[order]
        n_train = int(np.sum(ranked_scores > 0))
        ties = np.flatnonzero(ranked_scores == 0)
        if ties.size:
            coins = np.random.default_rng([seed, 1]).random(ties.size) < 0.5
            n_train += int(coins.sum())
            # coin-winning ties move in front of the losing ones
            tied = ranked[ties]
            ranked[ties] = np.concatenate([tied[coins], tied[~coins]])
    else:
        raise InvalidInputError(f"unknown assignment rule {rule!r}")
    rest = m - n_train
    if m < 5 or rest < 2 or n_train < 1:
        raise InvalidInputError(
            f"cannot build a 3-way split from {m} classes ({n_train} train, {rest} left for validation/test)"
        )
    validation, test = _alternate(ranked[n_train:][::-1])
    return Partition(
        train=sorted(int(c) for c in ranked[:n_train]),
        validation=sorted(int(c) for c in validation),
        test=sorted(int(c) for c in test),
        meta={"train_fraction": float(train_fraction), "seed": int(seed)},
    )


def generate_partition(emb: ClassEmbeddingSet, config: AtgConfig, rule: str = "fraction", return_details: bool = False):
    """Normalize, fit the centroids, score and split the classes."""
    unit = normalize_unit(emb)
    centroids, trace = optimize(unit, config)
    part = assign(scores(unit, centroids), config.train_fraction, config.seed, rule=rule)
    part.meta = {
        "target_divergence": float(config.target_divergence),
        "achieved_divergence": float(trace[-1].achieved_divergence),
        "lambda": float(config.penalty_weight),
        "seed": int(config.seed),
        "iterations": int(config.iterations),
        "divergence_kind": config.divergence.value,
        "train_fraction": float(config.train_fraction),
    }
    if rule != "fraction":
        part.meta["rule"] = rule
    if return_details:
        return part, centroids, trace
    return part


def with_target(config: AtgConfig, target: float, seed: int | None = None) -> AtgConfig:
    changes = {"target_divergence": float(target)}
    if seed is not None:
        changes["seed"] = int(seed)
    return replace(config, **changes)
