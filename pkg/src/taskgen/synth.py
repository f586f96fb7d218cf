"""Deterministic synthetic class-structured embeddings.

Randomness comes from numpy's ``Generator`` over the PCG64 bit generator
(PCG-XSL-RR 128/64) seeded directly with the integer seed, and normal draws
use numpy's ziggurat sampler.  Both are stable across platforms for a fixed
numpy major version.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from taskgen.embeddings import EmbeddingTable
from taskgen.errors import InvalidInputError


@dataclass(frozen=True)
class SynthSpec:
    num_classes: int = 100
    dim: int = 32
    samples_per_class: int = 40
    num_superclusters: int = 10
    intra_spread: float = 1.0
    inter_spread: float = 4.0
    seed: int = 0
    sample_spread: float | None = None  # defaults to intra_spread / 2

    def __post_init__(self):
        if not self.num_classes >= self.num_superclusters >= 1:
            raise InvalidInputError("need num_classes >= num_superclusters >= 1")
        if self.dim < 1 or self.samples_per_class < 1:
            raise InvalidInputError("dim and samples_per_class must be positive")
        if not (self.intra_spread > 0 and self.inter_spread > 0):
            raise InvalidInputError("spreads must be positive")
        if self.sample_spread is not None and not self.sample_spread > 0:
            raise InvalidInputError("sample_spread must be positive")
        if self.seed < 0:
            raise InvalidInputError("seed must be non-negative")


def generate(spec: SynthSpec):
    """Return ``(table, ground_truth)`` where ground truth maps class id to supercluster."""
    rng = np.random.Generator(np.random.PCG64(spec.seed))
    centers = rng.standard_normal((spec.num_superclusters, spec.dim)) * spec.inter_spread
    labels = np.arange(spec.num_classes) % spec.num_superclusters
    class_centers = centers[labels] + rng.standard_normal((spec.num_classes, spec.dim)) * spec.intra_spread
    n = spec.samples_per_class
    spread = spec.intra_spread / 2.0 if spec.sample_spread is None else spec.sample_spread
    noise = rng.standard_normal((spec.num_classes, n, spec.dim)) * spread
    vectors = (class_centers[:, None, :] + noise).reshape(-1, spec.dim)
    class_ids = np.repeat(np.arange(spec.num_classes, dtype=np.int64), n)
    truth = {int(c): int(g) for c, g in enumerate(labels)}
    return EmbeddingTable(class_ids, vectors), truth
