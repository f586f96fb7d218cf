"""``taskgen`` command line.

Exit codes: 0 success, 2 bad arguments, 3 unreadable or malformed input,
4 numerical failure (non-finite objective).
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import math
import os
import sys
import tempfile
from contextlib import contextmanager

import numpy as np

from taskgen import __version__
from taskgen.analysis import (
    ClassGraph,
    hop_distance,
    pca_project,
    tree_to_graph,
    ward_cluster,
)
from taskgen.atg import AtgConfig, Partition, generate_partition
from taskgen.divergence import gaussian_divergence, gaussian_summary
from taskgen.embeddings import class_means, normalize_unit, read_samples, save_samples
from taskgen.episodes import DEFAULT_EPISODES, DEFAULT_QUERY, difficulty_sweep, evaluate_split, sweep_to_csv
from taskgen.errors import InvalidInputError, NumericalError, SampleParseError
from taskgen.synth import SynthSpec, generate

log = logging.getLogger("taskgen")

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_PARSE = 3
EXIT_NUMERIC = 4

DEFAULT_GRID = (0.04, 0.32, 0.64, 0.96)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _non_negative(text):
    value = float(text)
    if not (math.isfinite(value) and value >= 0):
        raise argparse.ArgumentTypeError(f"expected a non-negative number, got {text!r}")
    return value


def _positive_int(text):
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text!r}")
    return value


def _seed(text):
    value = int(text)
    if not 0 <= value < 2**64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return value


def _grid(text):
    try:
        values = [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad grid {text!r}") from None
    if not values or any(not math.isfinite(v) or v < 0 for v in values):
        raise argparse.ArgumentTypeError("grid values must be non-negative numbers")
    return values


@contextmanager
def atomic_write(path, mode="w"):
    """Write to a temporary file in the target directory, then rename over ``path``."""
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".taskgen-", suffix=".tmp")
    try:
        with os.fdopen(fd, mode, **({} if "b" in mode else {"encoding": "utf-8", "newline": ""})) as fh:
            yield fh
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def resolve_threads(args):
    if getattr(args, "threads", None):
        return args.threads
    env = os.environ.get("TASKGEN_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise UsageError(f"TASKGEN_THREADS must be an integer, got {env!r}") from None
    return 1


def _print_config(name, values):
    print(json.dumps({"command": name, **values}, sort_keys=True, default=str))


def _add_atg_flags(p):
    p.add_argument("--lambda", dest="penalty_weight", type=_non_negative, default=1.0)
    p.add_argument("--lr", type=float, default=0.1)
    p.add_argument("--momentum", type=float, default=0.9)
    p.add_argument("--iterations", type=_positive_int, default=7000)
    p.add_argument("--divergence", choices=["symkl", "kl"], default="symkl",
                   help="penalty divergence in nats; symkl is KL(p||q) + KL(q||p)")
    p.add_argument("--train-fraction", type=float, default=0.6)
    p.add_argument("--rule", choices=["fraction", "ratio"], default="fraction")
    p.add_argument("--seed", type=_seed, default=0)
    p.add_argument("--nll-reduction", choices=["sum", "mean"], default="sum")


def _atg_config(args, target):
    return AtgConfig(
        target_divergence=target,
        penalty_weight=args.penalty_weight,
        learning_rate=args.lr,
        momentum=args.momentum,
        iterations=args.iterations,
        seed=args.seed,
        divergence=args.divergence,
        train_fraction=args.train_fraction,
        nll_reduction=args.nll_reduction,
    )


def _add_common(p):
    p.add_argument("--threads", type=_positive_int, default=None,
                   help="worker threads (falls back to TASKGEN_THREADS, then 1)")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser():
    parser = _Parser(prog="taskgen", description="Generate few-shot class partitions of controlled difficulty.")
    parser.add_argument("--version", action="version", version=f"taskgen {__version__}")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("partition", help="split classes into train/validation/test")
    p.add_argument("--embeddings", required=True)
    p.add_argument("--target-divergence", type=_non_negative, required=True)
    _add_atg_flags(p)
    p.add_argument("--out", required=True)
    p.add_argument("--centroids-out", help="also write the fitted centroids as JSON")
    _add_common(p)

    p = sub.add_parser("sweep", help="prototype accuracy on test splits across target divergences")
    p.add_argument("--embeddings", required=True)
    p.add_argument("--grid", type=_grid, default=list(DEFAULT_GRID))
    p.add_argument("--episodes", type=_positive_int, default=DEFAULT_EPISODES)
    p.add_argument("--way", type=_positive_int, default=5)
    p.add_argument("--shot", type=_positive_int, default=5)
    p.add_argument("--query", type=_positive_int, default=DEFAULT_QUERY)
    p.add_argument("--seeds", type=_positive_int, default=5, help="number of partition seeds, starting at --seed")
    _add_atg_flags(p)
    p.add_argument("--out", required=True)
    _add_common(p)

    p = sub.add_parser("analyze-tree", help="Ward tree of class embeddings vs a reference graph")
    p.add_argument("--embeddings", required=True)
    p.add_argument("--graph", required=True, help="edge list, one 'node_a<TAB>node_b' per line")
    p.add_argument("--targets", required=True, help="JSON object mapping class id to graph node name")
    p.add_argument("--out", required=True)
    _add_common(p)

    p = sub.add_parser("project", help="PCA projection of class embeddings")
    p.add_argument("--embeddings", required=True)
    p.add_argument("--centroids", help="centroid JSON from 'partition --centroids-out'")
    p.add_argument("-k", type=_positive_int, default=2)
    p.add_argument("--normalize", action="store_true", help="unit-normalize class embeddings first")
    p.add_argument("--out", required=True)
    _add_common(p)

    p = sub.add_parser("episode-eval", help="nearest-prototype accuracy on one split")
    p.add_argument("--embeddings", required=True)
    p.add_argument("--partition", required=True)
    p.add_argument("--split", choices=["train", "validation", "test"], default="test")
    p.add_argument("--episodes", type=_positive_int, default=DEFAULT_EPISODES)
    p.add_argument("--way", type=_positive_int, default=5)
    p.add_argument("--shot", type=_positive_int, default=5)
    p.add_argument("--query", type=_positive_int, default=DEFAULT_QUERY)
    p.add_argument("--seed", type=_seed, default=0)
    p.add_argument("--out")
    _add_common(p)

    p = sub.add_parser(
        "divergence",
        help="Gaussian divergences between the samples of two splits",
        description="Fit a damped Gaussian to the samples of each split and report the Euclidean "
                    "distance between means, the squared Wasserstein-2 distance, KL in both orders "
                    "and symmetrized KL (their sum), all in nats where applicable.",
    )
    p.add_argument("--embeddings", required=True)
    p.add_argument("--partition", required=True)
    p.add_argument("--a", dest="split_a", choices=["train", "validation", "test"], default="train")
    p.add_argument("--b", dest="split_b", choices=["train", "validation", "test"], default="test")
    p.add_argument("--damping", type=_non_negative, default=0.001)
    p.add_argument("--out")
    _add_common(p)

    p = sub.add_parser("synth", help="write synthetic embeddings")
    p.add_argument("--classes", type=_positive_int, default=100)
    p.add_argument("--dim", type=_positive_int, default=32)
    p.add_argument("--samples", type=_positive_int, default=40)
    p.add_argument("--superclusters", type=_positive_int, default=10)
    p.add_argument("--intra-spread", type=float, default=1.0)
    p.add_argument("--inter-spread", type=float, default=4.0)
    p.add_argument("--sample-spread", type=float, default=None)
    p.add_argument("--seed", type=_seed, default=0)
    p.add_argument("--format", choices=["csv", "binary"], default="csv")
    p.add_argument("--out", required=True)
    p.add_argument("--truth", help="write class id -> supercluster JSON here")
    _add_common(p)
    return parser


def _write_json(path, obj):
    with atomic_write(path) as fh:
        json.dump(obj, fh, indent=2)
        fh.write("\n")


def run_partition(args):
    config = _atg_config(args, args.target_divergence)
    _print_config("partition", {**vars(args), "threads": resolve_threads(args)})
    emb = class_means(read_samples(args.embeddings))
    part, centroids, _ = generate_partition(emb, config, rule=args.rule, return_details=True)
    _write_json(args.out, part.to_dict())
    if args.centroids_out:
        _write_json(args.centroids_out, centroids.to_dict())
    print(f"achieved divergence {part.meta['achieved_divergence']:.6f} "
          f"(target {config.target_divergence}); "
          f"train/validation/test = {len(part.train)}/{len(part.validation)}/{len(part.test)}")
    return EXIT_OK


def run_sweep(args):
    threads = resolve_threads(args)
    base = _atg_config(args, 0.0)
    _print_config("sweep", {**vars(args), "threads": threads})
    table = read_samples(args.embeddings)
    seeds = [args.seed + i for i in range(args.seeds)]
    rows = difficulty_sweep(table, args.grid, args.episodes, base, args.way, args.shot, args.query,
                            seeds=seeds, threads=threads, rule=args.rule)
    with atomic_write(args.out) as fh:
        fh.write(sweep_to_csv(rows))
    for r in rows:
        print(f"R={r.target_R:g} D={r.achieved_D:.4f} accuracy={r.mean_accuracy:.4f}±{r.std_accuracy:.4f}")
    return EXIT_OK


def read_edge_list(path):
    edges = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\r\n")
            if not line.strip() or line.startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) != 2 or not parts[0] or not parts[1]:
                raise SampleParseError(f"{path}: line {lineno}: expected 'node_a<TAB>node_b'")
            edges.append((parts[0], parts[1]))
    return ClassGraph.from_edges(edges)


def read_targets(path):
    with open(path, encoding="utf-8") as fh:
        try:
            raw = json.load(fh)
        except json.JSONDecodeError as exc:
            raise SampleParseError(f"{path}: {exc}") from None
    if not isinstance(raw, dict):
        raise SampleParseError(f"{path}: expected a JSON object of class id -> node name")
    try:
        return {int(k): str(v) for k, v in raw.items()}
    except ValueError:
        raise SampleParseError(f"{path}: class ids must be integers") from None


def run_analyze_tree(args):
    _print_config("analyze-tree", vars(args))
    emb = class_means(read_samples(args.embeddings))
    graph = read_edge_list(args.graph)
    names = read_targets(args.targets)
    missing = [int(c) for c in emb.class_ids if int(c) not in names]
    if missing:
        raise InvalidInputError(f"targets map lacks class ids {missing[:5]}")
    tree = ward_cluster(emb)
    tree_graph = tree_to_graph(tree)
    ids = [int(c) for c in emb.class_ids]
    mean, pairs = hop_distance(tree_graph, graph, ids, [names[c] for c in ids], return_pairs=True)
    report = {
        "mean_hop_distance": mean,
        "num_pairs": len(pairs),
        "pairs": [{"a": a, "b": b, "hop_difference": d} for a, b, d in pairs],
        "tree": tree.to_dict(),
    }
    _write_json(args.out, report)
    print(f"mean hop distance {mean:.6f} over {len(pairs)} pairs")
    return EXIT_OK


def run_project(args):
    _print_config("project", vars(args))
    emb = class_means(read_samples(args.embeddings))
    if args.normalize:
        emb = normalize_unit(emb)
    proj = pca_project(emb, args.k)
    extra = []
    if args.centroids:
        with open(args.centroids, encoding="utf-8") as fh:
            try:
                cents = json.load(fh)
                extra = [(name, np.asarray(cents[name], dtype=np.float64)) for name in ("mu_train", "mu_test")]
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise SampleParseError(f"{args.centroids}: {exc}") from None
        for name, vec in extra:
            if vec.shape != (emb.dim,):
                raise InvalidInputError(f"{name} has dim {vec.shape}, expected {emb.dim}")
    out = io.StringIO()
    writer = csv.writer(out, lineterminator="\n")
    out.write("# explained_variance," + ",".join(repr(float(v)) for v in proj.explained_variance) + "\n")
    writer.writerow(["label"] + [f"pc{j}" for j in range(args.k)])
    for cid, row in zip(proj.class_ids, proj.coords):
        writer.writerow([int(cid)] + [repr(float(v)) for v in row])
    for name, vec in extra:
        writer.writerow([name] + [repr(float(v)) for v in proj.transform(vec)[0]])
    with atomic_write(args.out) as fh:
        fh.write(out.getvalue())
    print(f"explained variance {[round(float(v), 6) for v in proj.explained_variance]}")
    return EXIT_OK


def run_episode_eval(args):
    threads = resolve_threads(args)
    _print_config("episode-eval", {**vars(args), "threads": threads})
    table = read_samples(args.embeddings)
    part = _read_partition(args.partition)
    classes = getattr(part, args.split)
    accs = evaluate_split(table, classes, args.way, args.shot, args.query, args.episodes, args.seed, threads=threads)
    result = {
        "split": args.split,
        "episodes": int(accs.size),
        "mean_accuracy": float(accs.mean()),
        "std_accuracy": float(accs.std()),
    }
    if args.out:
        _write_json(args.out, result)
    print(f"{args.split}: accuracy {result['mean_accuracy']:.4f}±{result['std_accuracy']:.4f} "
          f"over {result['episodes']} episodes")
    return EXIT_OK


def _read_partition(path):
    with open(path, encoding="utf-8") as fh:
        try:
            return Partition.from_dict(json.load(fh))
        except (json.JSONDecodeError, KeyError, TypeError) as exc:
            raise SampleParseError(f"{path}: {exc}") from None


def run_divergence(args):
    _print_config("divergence", vars(args))
    table = read_samples(args.embeddings)
    part = _read_partition(args.partition)
    summaries = []
    for split in (args.split_a, args.split_b):
        classes = getattr(part, split)
        rows = np.isin(table.class_ids, np.asarray(classes, dtype=np.int64))
        if not rows.any():
            raise InvalidInputError(f"split {split!r} has no samples in {args.embeddings}")
        summaries.append(gaussian_summary(table.vectors[rows].astype(np.float64), args.damping))
    a, b = summaries
    result = {
        "a": args.split_a,
        "b": args.split_b,
        "damping": args.damping,
        "euclidean": gaussian_divergence(a, b, "euclidean"),
        "wasserstein2_squared": gaussian_divergence(a, b, "wasserstein2"),
        "kl_a_b": gaussian_divergence(a, b, "kl"),
        "kl_b_a": gaussian_divergence(b, a, "kl"),
        "symkl": gaussian_divergence(a, b, "symkl"),
    }
    if args.out:
        _write_json(args.out, result)
    for key in ("euclidean", "wasserstein2_squared", "kl_a_b", "kl_b_a", "symkl"):
        print(f"{key} {result[key]:.6f}")
    return EXIT_OK


def run_synth(args):
    _print_config("synth", vars(args))
    spec = SynthSpec(
        num_classes=args.classes,
        dim=args.dim,
        samples_per_class=args.samples,
        num_superclusters=args.superclusters,
        intra_spread=args.intra_spread,
        inter_spread=args.inter_spread,
        sample_spread=args.sample_spread,
        seed=args.seed,
    )
    table, truth = generate(spec)
    with atomic_write(args.out, "wb") as fh:
        save_samples(table, fh, args.format)
    if args.truth:
        _write_json(args.truth, {str(k): v for k, v in truth.items()})
    print(f"wrote {len(table)} samples of dim {table.dim} to {args.out}")
    return EXIT_OK


COMMANDS = {
    "partition": run_partition,
    "sweep": run_sweep,
    "analyze-tree": run_analyze_tree,
    "project": run_project,
    "episode-eval": run_episode_eval,
    "divergence": run_divergence,
    "synth": run_synth,
}


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (UsageError, InvalidInputError) as exc:
        print(f"taskgen: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (SampleParseError, OSError) as exc:
        print(f"taskgen: cannot read input: {exc}", file=sys.stderr)
        return EXIT_PARSE
    except NumericalError as exc:
        print(f"taskgen: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
