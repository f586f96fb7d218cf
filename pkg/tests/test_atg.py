import json
import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from taskgen.atg import (
    AssignmentScores,
    AtgConfig,
    CentroidPair,
    assign,
    generate_partition,
    gradient,
    init_centroids,
    objective,
    optimize,
    scores,
)
from taskgen.divergence import DivergenceKind
from taskgen.embeddings import ClassEmbeddingSet, class_means, normalize_unit
from taskgen.errors import InvalidInputError, NumericalError
from taskgen.synth import SynthSpec, generate


def random_instance(rng, m=None, d=None):
    m = m or int(rng.integers(1, 31))
    d = d or int(rng.integers(1, 17))
    emb = ClassEmbeddingSet(np.arange(m), rng.standard_normal((m, d)))
    pair = CentroidPair(rng.standard_normal(d), rng.standard_normal(d))
    return emb, pair


def objective_oracle(points, mu_train, mu_test, lam, target, kind):
    """Straight-line re-implementation in 50-digit arithmetic."""
    mpmath.mp.dps = 50
    pts = [[mpmath.mpf(float(v)) for v in row] for row in points]

    def dist(mu):
        mu = [mpmath.mpf(float(v)) for v in mu]
        w = [mpmath.exp(-sum((a - b) ** 2 for a, b in zip(row, mu))) for row in pts]
        z = mpmath.fsum(w)
        return [x / z for x in w]

    p, q = dist(mu_train), dist(mu_test)
    nll = -mpmath.fsum(mpmath.log((a + b) / 2) for a, b in zip(p, q))
    kl_pq = mpmath.fsum(a * mpmath.log(a / b) for a, b in zip(p, q))
    kl_qp = mpmath.fsum(b * mpmath.log(b / a) for a, b in zip(p, q))
    div = kl_pq + kl_qp if kind == "symkl" else kl_pq
    return float(nll + lam * (div - target) ** 2), float(div)


def finite_difference(emb, pair, config, h=1e-5):
    x = np.concatenate([pair.mu_train, pair.mu_test])
    d = pair.dim
    out = np.zeros_like(x)
    for i in range(x.size):
        xp, xm = x.copy(), x.copy()
        xp[i] += h
        xm[i] -= h
        fp = objective(emb, CentroidPair(xp[:d], xp[d:]), config).total
        fm = objective(emb, CentroidPair(xm[:d], xm[d:]), config).total
        out[i] = (fp - fm) / (2 * h)
    return out


def antipodal_clusters(m=10, spread=0.05, seed=0):
    rng = np.random.default_rng(seed)
    base = np.where(np.arange(m) % 2 == 0, 0.0, np.pi)
    angles = base + rng.normal(0, spread, m)
    return ClassEmbeddingSet(np.arange(m), np.c_[np.cos(angles), np.sin(angles)], normalized=True)


class TestConfig:
    def test_defaults(self):
        c = AtgConfig()
        assert (c.penalty_weight, c.learning_rate, c.momentum, c.iterations) == (1.0, 0.1, 0.9, 7000)
        assert c.divergence is DivergenceKind.SYMMETRIZED_KL
        assert c.train_fraction == 0.6

    @pytest.mark.parametrize(
        "kwargs",
        [
            {"target_divergence": -0.1},
            {"penalty_weight": -1},
            {"learning_rate": 0},
            {"momentum": 1.0},
            {"iterations": 0},
            {"train_fraction": 1.0},
            {"divergence": "wasserstein2"},
        ],
    )
    def test_rejects(self, kwargs):
        with pytest.raises(InvalidInputError):
            AtgConfig(**kwargs)


class TestObjective:
    def test_identical_centroids(self):
        rng = np.random.default_rng(0)
        emb, _ = random_instance(rng, 6, 3)
        mu = rng.standard_normal(3)
        val = objective(emb, CentroidPair(mu, mu), AtgConfig(target_divergence=0.7, penalty_weight=2.0))
        assert val.achieved_divergence == 0.0
        assert val.penalty == pytest.approx(2.0 * 0.49, abs=1e-15)

    def test_lambda_zero(self):
        emb, pair = random_instance(np.random.default_rng(1), 8, 4)
        val = objective(emb, pair, AtgConfig(target_divergence=0.5, penalty_weight=0.0))
        assert val.total == val.nll

    @pytest.mark.parametrize("kind", ["symkl", "kl"])
    @pytest.mark.parametrize("seed", range(5))
    def test_extended_precision_oracle(self, kind, seed):
        rng = np.random.default_rng(100 + seed)
        emb, pair = random_instance(rng, 6, 2)
        cfg = AtgConfig(target_divergence=0.64, penalty_weight=1.0, divergence=kind)
        val = objective(emb, pair, cfg)
        total, div = objective_oracle(emb.means, pair.mu_train, pair.mu_test, 1.0, 0.64, kind)
        assert abs(val.total - total) <= 1e-10 * max(1.0, abs(total))
        assert abs(val.achieved_divergence - div) <= 1e-10 * max(1.0, div)

    @settings(max_examples=100, deadline=None)
    @given(st.integers(0, 10**6))
    def test_total_decomposes(self, seed):
        rng = np.random.default_rng(seed)
        emb, pair = random_instance(rng)
        cfg = AtgConfig(target_divergence=float(rng.uniform(0, 1.28)), penalty_weight=float(rng.uniform(0, 3)))
        val = objective(emb, pair, cfg)
        expected_pen = cfg.penalty_weight * (val.achieved_divergence - cfg.target_divergence) ** 2
        assert abs(val.penalty - expected_pen) <= 1e-9 * max(1, expected_pen)
        assert abs(val.total - (val.nll + val.penalty)) <= 1e-9 * max(1, abs(val.total))

    def test_dimension_mismatch(self):
        emb, _ = random_instance(np.random.default_rng(2), 4, 3)
        with pytest.raises(InvalidInputError):
            objective(emb, CentroidPair(np.zeros(2), np.zeros(2)), AtgConfig())


class TestGradient:
    def test_matches_finite_differences(self):
        rng = np.random.default_rng(7)
        worst = 0.0
        for _ in range(100):
            emb, pair = random_instance(rng)
            cfg = AtgConfig(
                target_divergence=float(rng.uniform(0, 1.28)),
                penalty_weight=float(rng.integers(0, 2)),
                divergence=str(rng.choice(["symkl", "kl"])),
            )
            g = np.concatenate(gradient(emb, pair, cfg))
            fd = finite_difference(emb, pair, cfg)
            worst = max(worst, np.max(np.abs(g - fd)) / max(np.max(np.abs(fd)), 1e-8))
        assert worst <= 1e-4

    def test_penalty_silent_at_coincident_centroids(self):
        rng = np.random.default_rng(3)
        emb, _ = random_instance(rng, 9, 4)
        mu = rng.standard_normal(4)
        pair = CentroidPair(mu, mu)
        g_pen = gradient(emb, pair, AtgConfig(target_divergence=0.9, penalty_weight=1.0))
        g_nll = gradient(emb, pair, AtgConfig(target_divergence=0.9, penalty_weight=0.0))
        np.testing.assert_allclose(g_pen[0], g_nll[0], atol=1e-12)
        np.testing.assert_allclose(g_pen[0], g_pen[1], atol=1e-12)

    def test_single_class_is_flat(self):
        # a softmax over one class is identically 1, so nothing pulls the centroids
        emb = ClassEmbeddingSet([0], [[1.0, -2.0, 0.5]])
        pair = CentroidPair(np.zeros(3), np.array([3.0, 3.0, 3.0]))
        g_tr, g_te = gradient(emb, pair, AtgConfig(penalty_weight=0.0))
        np.testing.assert_array_equal(g_tr, 0.0)
        np.testing.assert_array_equal(g_te, 0.0)

    def test_descent_direction_two_classes(self):
        # with two classes the NLL pulls each centroid towards the class it under-weights
        emb = ClassEmbeddingSet([0, 1], [[1.0, 0.0], [-1.0, 0.0]])
        pair = CentroidPair([0.5, 0.0], [0.5, 0.0])
        g_tr, _ = gradient(emb, pair, AtgConfig(penalty_weight=0.0))
        assert -g_tr @ (emb.means[1] - pair.mu_train) > 0


class TestOptimize:
    def test_requires_normalized(self):
        emb = ClassEmbeddingSet([0, 1], [[1.0, 0.0], [0.0, 2.0]])
        with pytest.raises(InvalidInputError, match="normalized"):
            optimize(emb, AtgConfig(iterations=5))

    def test_requires_two_classes(self):
        with pytest.raises(InvalidInputError):
            optimize(ClassEmbeddingSet([0], [[1.0, 0.0]], normalized=True), AtgConfig(iterations=5))

    def test_zero_target_collapses(self):
        emb = antipodal_clusters()
        pair, trace = optimize(emb, AtgConfig(target_divergence=0.0, iterations=2000))
        assert trace[-1].achieved_divergence < 0.05
        assert np.linalg.norm(pair.mu_train - pair.mu_test) < 0.05

    def test_trace_consistency_and_stride(self):
        emb = antipodal_clusters()
        cfg = AtgConfig(target_divergence=0.5, iterations=100, trace_every=10)
        _, trace = optimize(emb, cfg)
        assert len(trace) == 11
        for v in trace:
            assert abs(v.total - (v.nll + v.penalty)) < 1e-9
            assert abs(v.penalty - (v.achieved_divergence - 0.5) ** 2) < 1e-9

    def test_deterministic(self):
        emb = normalize_unit(ClassEmbeddingSet(np.arange(12), np.random.default_rng(4).standard_normal((12, 5))))
        cfg = AtgConfig(target_divergence=0.3, iterations=500, seed=11)
        a, ta = optimize(emb, cfg)
        b, tb = optimize(emb, cfg)
        assert ta == tb
        assert a.mu_train.tobytes() == b.mu_train.tobytes()
        assert a.mu_test.tobytes() == b.mu_test.tobytes()

    def test_nonfinite_aborts_with_iteration(self):
        emb = antipodal_clusters()
        with pytest.raises(NumericalError) as info:
            optimize(emb, AtgConfig(target_divergence=50.0, penalty_weight=1e6, iterations=500))
        assert info.value.iteration is not None
        assert "iteration" in str(info.value)

    def test_close_to_grid_search_optimum(self):
        emb = antipodal_clusters(m=10, spread=0.3, seed=5)
        # lr 0.1 is past the heavy-ball stability bound on circle data
        cfg = AtgConfig(target_divergence=0.96, learning_rate=0.01)
        _, trace = optimize(emb, cfg)
        found = trace[-1].total
        grid = np.linspace(0, 2 * np.pi, 50, endpoint=False)
        circle = np.c_[np.cos(grid), np.sin(grid)]
        best = min(
            objective(emb, CentroidPair(circle[i], circle[j]), cfg).total for i in range(50) for j in range(50)
        )
        assert found <= 1.05 * best

    @pytest.mark.parametrize("seed", range(3))
    def test_large_lambda_zero_target(self, seed):
        rng = np.random.default_rng(seed)
        m = int(rng.integers(2, 20))
        emb = normalize_unit(ClassEmbeddingSet(np.arange(m), rng.standard_normal((m, 6))))
        _, trace = optimize(emb, AtgConfig(target_divergence=0.0, penalty_weight=100.0, iterations=1000, learning_rate=0.01))
        assert trace[-1].achieved_divergence < 0.05

    def test_init_is_seeded(self):
        emb = antipodal_clusters()
        a, b = init_centroids(emb, 3), init_centroids(emb, 3)
        assert a.mu_train.tobytes() == b.mu_train.tobytes()
        assert not np.array_equal(init_centroids(emb, 4).mu_train, a.mu_train)
        np.testing.assert_array_equal(a.velocity_train, 0.0)


class TestScores:
    def test_equidistant_classes_share_score(self):
        emb = ClassEmbeddingSet([0, 1, 2], [[0.0, 1.0], [0.0, -1.0], [5.0, 0.0]])
        sc = scores(emb, CentroidPair([1.0, 0.0], [-1.0, 0.0]))
        assert sc.scores[0] == pytest.approx(sc.scores[1], abs=1e-12)

    def test_sign(self):
        emb = ClassEmbeddingSet([0, 1], [[0.0, 0.0], [0.5, 0.5]])
        sc = scores(emb, CentroidPair([0.0, 0.0], [4.0, 4.0]))
        d = -0.0 + 32.0  # ||phi - mu_test||^2 - ||phi - mu_train||^2 for class 0
        assert d > 0 and sc.scores[0] > sc.scores[1]

    @settings(max_examples=100, deadline=None)
    @given(st.integers(0, 10**6))
    def test_ranking_equals_distance_difference(self, seed):
        rng = np.random.default_rng(seed)
        emb, pair = random_instance(rng, 8, int(rng.integers(1, 6)))
        sc = scores(emb, pair)
        diff = np.sum((emb.means - pair.mu_test) ** 2, 1) - np.sum((emb.means - pair.mu_train) ** 2, 1)
        # the log-normalizer difference is a constant offset
        offset = sc.scores - diff
        np.testing.assert_allclose(offset, offset[0], atol=1e-9)
        assert np.array_equal(np.argsort(-sc.scores, kind="stable"), np.argsort(-(diff + offset[0]), kind="stable"))


def distinct(m, seed=0):
    return AssignmentScores(np.arange(m) * 3 + 1, np.random.default_rng(seed).permutation(m).astype(float))


class TestAssign:
    @pytest.mark.parametrize("m, sizes", [(62, (37, 12, 13)), (100, (60, 20, 20)), (158, (94, 32, 32))])
    def test_published_split_sizes(self, m, sizes):
        part = assign(distinct(m), 0.6, seed=0)
        assert (len(part.train), len(part.validation), len(part.test)) == sizes

    def test_order_rule(self):
        sc = AssignmentScores(np.arange(10), np.arange(10, dtype=float))
        part = assign(sc, 0.6, seed=0)
        assert part.train == [4, 5, 6, 7, 8, 9]
        assert part.test == [0, 2]
        assert part.validation == [1, 3]

    def test_sizes_for_all_m(self):
        for m in range(5, 1001):
            part = assign(distinct(m, seed=m), 0.6, seed=m)
            n_train = math.floor(0.6 * m)
            assert len(part.train) == n_train
            assert len(part.test) - len(part.validation) in (0, 1)
            assert len(part.test) + len(part.validation) == m - n_train
            union = set(part.train) | set(part.validation) | set(part.test)
            assert len(union) == m and union == set((np.arange(m) * 3 + 1).tolist())

    def test_too_few_classes(self):
        with pytest.raises(InvalidInputError):
            assign(distinct(4), 0.6)
        with pytest.raises(InvalidInputError):
            assign(distinct(10), 0.9)

    @settings(max_examples=100, deadline=None)
    @given(st.integers(0, 10**6), st.integers(5, 200), st.integers(-1000, 1000))
    def test_shift_invariance(self, seed, m, shift):
        rng = np.random.default_rng(seed)
        # small integers: ties are common and the shift is exact
        vals = rng.integers(-5, 5, m).astype(float)
        a = assign(AssignmentScores(np.arange(m), vals), 0.6, seed)
        b = assign(AssignmentScores(np.arange(m), vals + shift), 0.6, seed)
        assert a.to_dict() == b.to_dict()

    def test_ties_are_seeded_random(self):
        sc = AssignmentScores(np.arange(50), np.zeros(50))
        a = assign(sc, 0.6, seed=1)
        assert a.to_dict() == assign(sc, 0.6, seed=1).to_dict()
        trains = {tuple(assign(sc, 0.6, seed=s).train) for s in range(10)}
        assert len(trains) == 10

    def test_ratio_rule(self):
        sc = AssignmentScores(np.arange(8), np.array([3.0, 2.0, 1.0, -1.0, -2.0, -3.0, -4.0, 0.5]))
        part = assign(sc, 0.6, seed=0, rule="ratio")
        assert part.train == [0, 1, 2, 7]
        assert part.test == [4, 6]
        assert part.validation == [3, 5]


def two_cluster_table(seed=0):
    spec = SynthSpec(num_classes=20, dim=8, samples_per_class=5, num_superclusters=2,
                     intra_spread=0.5, inter_spread=1.0, seed=seed)
    return generate(spec)


class TestGeneratePartition:
    def test_zero_target_is_seeded_random(self):
        # identical class embeddings give identical scores, so only the seed decides
        emb = ClassEmbeddingSet(np.arange(20), np.ones((20, 3)))
        cfg = AtgConfig(target_divergence=0.0, iterations=50)
        parts = [generate_partition(emb, AtgConfig(target_divergence=0.0, iterations=50, seed=s)) for s in range(5)]
        assert len({tuple(p.train) for p in parts}) == 5
        assert generate_partition(emb, cfg).to_dict() == generate_partition(emb, cfg).to_dict()

    def test_meta(self):
        table, _ = two_cluster_table()
        part = generate_partition(class_means(table), AtgConfig(target_divergence=0.32, iterations=300, seed=4))
        d = part.to_dict()
        assert list(d) == ["train", "validation", "test", "meta"]
        assert list(d["meta"]) == [
            "target_divergence", "achieved_divergence", "lambda", "seed", "iterations",
            "divergence_kind", "train_fraction",
        ]
        assert d["meta"]["divergence_kind"] == "symkl"
        assert d["meta"]["seed"] == 4

    @pytest.mark.parametrize("seed", range(5))
    def test_train_concentrates_in_one_cluster(self, seed):
        table, truth = two_cluster_table(seed=seed)
        emb = class_means(table)
        # well separated clusters sit past the heavy-ball stability bound at lr 0.1
        cfg = AtgConfig(target_divergence=0.96, learning_rate=0.01, iterations=3000)
        part, centroids, _ = generate_partition(emb, cfg, return_details=True)
        unit = normalize_unit(emb)
        centers = {}
        for g in (0, 1):
            members = [c for c in range(20) if truth[c] == g]
            centers[g] = unit.means[members].mean(0)
        near = min(centers, key=lambda g: np.sum((centers[g] - centroids.mu_train) ** 2))
        cluster = [c for c in range(20) if truth[c] == near]
        assert np.mean([c in part.train for c in cluster]) >= 0.8

    def test_json_repeatable(self):
        table, _ = two_cluster_table(seed=1)
        emb = class_means(table)
        cfg = AtgConfig(target_divergence=0.64, iterations=400, seed=9)
        a = json.dumps(generate_partition(emb, cfg).to_dict())
        b = json.dumps(generate_partition(emb, cfg).to_dict())
        assert a == b
