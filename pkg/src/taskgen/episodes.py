"""N-way K-shot episodes and nearest-prototype evaluation of generated partitions."""
from __future__ import annotations

import csv
import io
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from taskgen.atg import AtgConfig, generate_partition, with_target
from taskgen.embeddings import EmbeddingTable, class_means
from taskgen.errors import InvalidInputError

DEFAULT_QUERY = 15
DEFAULT_EPISODES = 200


@dataclass(frozen=True, eq=False)
class Episode:
    way: int
    shot: int
    query: int
    class_ids: np.ndarray  # episode label i -> original class id
    support: np.ndarray  # (way * shot, dim)
    support_labels: np.ndarray
    query_set: np.ndarray  # (way * query, dim)
    query_labels: np.ndarray
    support_index: np.ndarray  # row indices into the source table
    query_index: np.ndarray


@dataclass(frozen=True)
class SweepRow:
    target_R: float
    achieved_D: float
    mean_accuracy: float
    std_accuracy: float
    episodes_evaluated: int


def sample_episode(table: EmbeddingTable, allowed_classes, way: int, shot: int, query: int, seed) -> Episode:
    if way < 1 or shot < 1 or query < 1:
        raise InvalidInputError("way, shot and query must be positive")
    allowed = np.unique(np.asarray(list(allowed_classes), dtype=np.int64))
    if allowed.size < way:
        raise InvalidInputError(f"need {way} classes, only {allowed.size} available")
    rng = np.random.default_rng(seed)
    chosen = rng.choice(allowed, size=way, replace=False)
    s_idx, q_idx = [], []
    for cid in chosen:
        rows = table.indices_of(cid)
        if rows.size < shot + query:
            raise InvalidInputError(
                f"class {int(cid)} has {rows.size} samples, need {shot + query} (shot + query)"
            )
        picked = rng.choice(rows, size=shot + query, replace=False)
        s_idx.append(picked[:shot])
        q_idx.append(picked[shot:])
    s_idx = np.concatenate(s_idx)
    q_idx = np.concatenate(q_idx)
    vectors = table.vectors
    return Episode(
        way=way,
        shot=shot,
        query=query,
        class_ids=chosen,
        support=vectors[s_idx].astype(np.float64),
        support_labels=np.repeat(np.arange(way), shot),
        query_set=vectors[q_idx].astype(np.float64),
        query_labels=np.repeat(np.arange(way), query),
        support_index=s_idx,
        query_index=q_idx,
    )


def prototypes(episode: Episode) -> np.ndarray:
    protos = np.zeros((episode.way, episode.support.shape[1]))
    np.add.at(protos, episode.support_labels, episode.support)
    counts = np.bincount(episode.support_labels, minlength=episode.way)
    return protos / counts[:, None]


def predict(query, protos):
    """Nearest prototype by squared Euclidean distance; argmin picks the lowest label on ties."""
    diff = query[:, None, :] - protos[None, :, :]
    d2 = np.einsum("qwd,qwd->qw", diff, diff)
    return np.argmin(d2, axis=1)


def prototype_classify(episode: Episode) -> float:
    pred = predict(episode.query_set, prototypes(episode))
    return float(np.mean(pred == episode.query_labels))


def episode_seed(base_seed, r_index, episode_index):
    return np.random.SeedSequence([int(base_seed), int(r_index), int(episode_index)])


def evaluate_split(table, classes, way, shot, query, episodes, seed, r_index=0, threads=1):
    """Accuracies of ``episodes`` independently seeded episodes drawn from ``classes``."""

    def run(e):
        return prototype_classify(sample_episode(table, classes, way, shot, query, episode_seed(seed, r_index, e)))

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return np.array(list(pool.map(run, range(episodes))))
    return np.array([run(e) for e in range(episodes)])


def difficulty_sweep(
    table: EmbeddingTable,
    r_grid,
    episodes_per_r: int = DEFAULT_EPISODES,
    config: AtgConfig | None = None,
    way: int = 5,
    shot: int = 5,
    query: int = DEFAULT_QUERY,
    seeds=(0,),
    threads: int = 1,
    rule: str = "fraction",
):
    """Accuracy on test-split episodes for each target divergence.

    For every R and seed a partition is generated; ``episodes_per_r`` episodes
    are drawn from its test classes and scored with nearest prototypes in the
    raw embedding space.  Rows aggregate all seeds.
    """
    config = config or AtgConfig()
    if episodes_per_r < 1:
        raise InvalidInputError("episodes_per_r must be positive")
    seeds = list(seeds)
    if not seeds:
        raise InvalidInputError("need at least one seed")
    emb = class_means(table)
    rows = []
    for r_index, target in enumerate(r_grid):
        accs, achieved = [], []
        for seed in seeds:
            part = generate_partition(emb, with_target(config, target, seed), rule=rule)
            achieved.append(part.meta["achieved_divergence"])
            accs.append(evaluate_split(table, part.test, way, shot, query, episodes_per_r, seed, r_index, threads))
        accs = np.concatenate(accs)
        rows.append(
            SweepRow(
                target_R=float(target),
                achieved_D=float(np.mean(achieved)),
                mean_accuracy=float(accs.mean()),
                std_accuracy=float(accs.std()),
                episodes_evaluated=int(accs.size),
            )
        )
    return rows


def sweep_to_csv(rows) -> str:
    out = io.StringIO()
    writer = csv.writer(out, lineterminator="\n")
    writer.writerow(["target_R", "achieved_D", "mean_accuracy", "std_accuracy", "episodes"])
    for r in rows:
        writer.writerow([repr(r.target_R), repr(r.achieved_D), repr(r.mean_accuracy), repr(r.std_accuracy), r.episodes_evaluated])
    return out.getvalue()
