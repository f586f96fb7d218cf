"""Post-hoc analyses: Ward trees, hop distances between class graphs, PCA and correlations."""
from __future__ import annotations

from collections import deque
from dataclasses import dataclass
from itertools import combinations

import numpy as np
from scipy.stats import rankdata

from taskgen.errors import InvalidInputError


@dataclass(frozen=True)
class MergeTree:
    """Leaves are nodes ``0..M-1``; merge ``k`` creates node ``M + k``."""

    leaves: tuple
    merges: tuple  # (node_a, node_b, height) with node_a < node_b

    def to_dict(self):
        return {
            "leaves": [int(x) for x in self.leaves],
            "merges": [[int(a), int(b), float(h)] for a, b, h in self.merges],
        }

    @classmethod
    def from_dict(cls, data):
        return cls(tuple(data["leaves"]), tuple((int(a), int(b), float(h)) for a, b, h in data["merges"]))


@dataclass(frozen=True)
class ClassGraph:
    nodes: frozenset
    edges: frozenset  # frozensets of two nodes

    @classmethod
    def from_edges(cls, edges, nodes=()):
        node_set = set(nodes)
        edge_set = set()
        for a, b in edges:
            if a == b:
                continue
            node_set.update((a, b))
            edge_set.add(frozenset((a, b)))
        return cls(frozenset(node_set), frozenset(edge_set))

    def adjacency(self):
        adj = {n: [] for n in self.nodes}
        for e in self.edges:
            a, b = tuple(e)
            adj[a].append(b)
            adj[b].append(a)
        return adj


@dataclass(frozen=True, eq=False)
class ProjectedPoints:
    class_ids: np.ndarray
    coords: np.ndarray
    explained_variance: np.ndarray
    components: np.ndarray  # (k, dim), rows orthonormal
    center: np.ndarray

    def transform(self, vectors):
        """Project extra points (e.g. centroids) into the same coordinates."""
        return (np.atleast_2d(np.asarray(vectors, dtype=np.float64)) - self.center) @ self.components.T


# -- Ward clustering ---------------------------------------------------------


def ward_cluster(emb) -> MergeTree:
    """Agglomerative Ward clustering of the class embeddings.

    Heights are merge costs ``|A||B| / (|A|+|B|) * ||c_A - c_B||^2`` (the
    increase in within-cluster sum of squares), maintained with the
    Lance-Williams recurrence.  Equal costs are resolved toward the smallest
    ``(node_a, node_b)`` pair.
    """
    x = np.asarray(emb.means, dtype=np.float64)
    m = x.shape[0]
    if m < 2:
        raise InvalidInputError("Ward clustering needs at least two classes")
    sq = np.einsum("ij,ij->i", x, x)
    cost = np.full((2 * m - 1, 2 * m - 1), np.inf)
    cost[:m, :m] = np.maximum(sq[:, None] + sq[None, :] - 2.0 * x @ x.T, 0.0) / 2.0
    np.fill_diagonal(cost, np.inf)
    size = np.zeros(2 * m - 1)
    size[:m] = 1.0
    active = list(range(m))
    merges = []
    for step in range(m - 1):
        idx = np.array(active)
        sub = cost[np.ix_(idx, idx)]
        flat = int(np.argmin(sub))  # row-major, active sorted: first hit is the smallest pair
        i, j = divmod(flat, idx.size)
        a, b = int(idx[i]), int(idx[j])
        if a > b:
            a, b = b, a
        h = float(cost[a, b])
        new = m + step
        others = np.array([k for k in active if k != a and k != b], dtype=int)
        if others.size:
            na, nb, nk = size[a], size[b], size[others]
            total = na + nb + nk
            updated = ((na + nk) * cost[a, others] + (nb + nk) * cost[b, others] - nk * h) / total
            cost[new, others] = updated
            cost[others, new] = updated
        size[new] = size[a] + size[b]
        active = [k for k in active if k != a and k != b] + [new]
        merges.append((a, b, h))
    return MergeTree(tuple(int(c) for c in emb.class_ids), tuple(merges))


def tree_to_graph(tree: MergeTree, names=None) -> ClassGraph:
    """Undirected graph with the leaves plus one internal node per merge.

    Leaves are labelled by class id (or ``names[class_id]`` when given);
    internal node ``k`` is labelled ``"merge:k"``.
    """
    m = len(tree.leaves)

    def label(node):
        if node < m:
            cid = tree.leaves[node]
            return names[cid] if names is not None else cid
        return f"merge:{node - m}"

    edges = []
    for k, (a, b, _) in enumerate(tree.merges):
        parent = label(m + k)
        edges.append((label(a), parent))
        edges.append((label(b), parent))
    return ClassGraph.from_edges(edges, nodes=[label(i) for i in range(m)])


# -- graph distances ---------------------------------------------------------


def _bfs(adj, source):
    dist = {source: 0}
    queue = deque([source])
    while queue:
        u = queue.popleft()
        for v in adj[u]:
            if v not in dist:
                dist[v] = dist[u] + 1
                queue.append(v)
    return dist


def raw_hop_matrix(graph: ClassGraph, targets) -> np.ndarray:
    targets = list(targets)
    missing = [t for t in targets if t not in graph.nodes]
    if missing:
        raise InvalidInputError(f"targets not in graph: {missing[:5]}")
    adj = graph.adjacency()
    n = len(targets)
    hops = np.zeros((n, n))
    for i, a in enumerate(targets):
        dist = _bfs(adj, a)
        for j in range(i + 1, n):
            b = targets[j]
            if b not in dist:
                raise InvalidInputError(f"no path between {a!r} and {b!r}")
            hops[i, j] = hops[j, i] = dist[b]
    return hops


def graph_hop_matrix(graph: ClassGraph, targets) -> np.ndarray:
    """Shortest-path edge counts between targets, divided by their maximum."""
    hops = raw_hop_matrix(graph, targets)
    top = hops.max() if hops.size else 0.0
    return hops / top if top > 0 else hops


def hop_distance(ga: ClassGraph, gb: ClassGraph, targets, targets_b=None, return_pairs=False):
    """Mean over unordered target pairs of the normalized hop-count difference.

    ``targets_b`` names the same targets in ``gb`` when the graphs use
    different node labels.
    """
    targets = list(targets)
    targets_b = targets if targets_b is None else list(targets_b)
    if len(targets) != len(targets_b):
        raise InvalidInputError("target lists must have equal length")
    if len(targets) < 2:
        raise InvalidInputError("need at least two targets")
    da = graph_hop_matrix(ga, targets)
    db = graph_hop_matrix(gb, targets_b)
    iu = np.triu_indices(len(targets), 1)
    diffs = np.abs(da[iu] - db[iu])
    mean = float(diffs.mean())
    if return_pairs:
        pairs = [(targets[i], targets[j], float(d)) for i, j, d in zip(iu[0], iu[1], diffs)]
        return mean, pairs
    return mean


# -- PCA ----------------------------------------------------------------------


def pca_project(emb, k: int) -> ProjectedPoints:
    """Project class embeddings onto the top-``k`` eigenvectors of their covariance.

    The covariance uses the ``1/(M-1)`` normalization.  Each component is
    signed so that its largest-magnitude loading is positive.
    """
    x = np.asarray(emb.means, dtype=np.float64)
    m, dim = x.shape
    if not 1 <= k <= min(m, dim):
        raise InvalidInputError(f"k must lie in [1, {min(m, dim)}], got {k}")
    center = x.mean(axis=0)
    xc = x - center
    cov = xc.T @ xc / max(m - 1, 1)
    w, v = np.linalg.eigh(0.5 * (cov + cov.T))
    order = np.argsort(w)[::-1][:k]
    comps = v[:, order].T
    lead = np.argmax(np.abs(comps), axis=1)
    signs = np.sign(comps[np.arange(k), lead])
    comps = comps * np.where(signs == 0, 1.0, signs)[:, None]
    return ProjectedPoints(
        class_ids=np.asarray(emb.class_ids).copy(),
        coords=xc @ comps.T,
        explained_variance=np.clip(w[order], 0.0, None),
        components=comps,
        center=center,
    )


# -- correlation ----------------------------------------------------------------


def pearson(xs, ys) -> float:
    x = np.asarray(xs, dtype=np.float64)
    y = np.asarray(ys, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1 or x.size < 2:
        raise InvalidInputError("need two equal-length sequences of at least 2 values")
    xc = x - x.mean()
    yc = y - y.mean()
    sx = np.sqrt(np.dot(xc, xc))
    sy = np.sqrt(np.dot(yc, yc))
    if sx == 0 or sy == 0:
        raise InvalidInputError("correlation undefined for zero-variance input")
    r = float(np.dot(xc, yc) / (sx * sy))
    return min(1.0, max(-1.0, r))


def spearman(xs, ys) -> float:
    """Pearson correlation of average ranks."""
    return pearson(rankdata(xs, method="average"), rankdata(ys, method="average"))


def pairwise(items):
    return list(combinations(items, 2))
