"""Missing-entity completion.

Entity values become succinct vectors (normalized-average embeddings); nine
entity blocks concatenate into one feature vector; k-means discretizes the
free-text values of an entity into predicate-labeled clusters; a multinomial
logistic model predicts the cluster of a masked entity from the remaining
blocks, with an exact nearest-neighbor completer as the baseline.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.optimize import minimize

from . import _textio
from .embedding import EmbeddingModel
from .errors import (
    EmptyDataset,
    EmptyTrainingSet,
    EmptyValue,
    SingleClass,
    TooFewPoints,
)
from .tagger import ENTITY_TAGS, EntitySet

#: Entity types that contribute a feature block, in block order.
FEATURE_ENTITIES: tuple[str, ...] = ENTITY_TAGS[:9]
BLOCK_INDEX: dict[str, int] = {t: i for i, t in enumerate(FEATURE_ENTITIES)}

#: Entities the completion stage predicts.
COMPLETABLE_ENTITIES: tuple[str, ...] = ("VECTOR", "IMPACT", "MEANS")

DISC_MARKER = "# vuln2rule-discretization 1"
COMPLETION_MARKER = "# vuln2rule-completion 1"


@dataclass(frozen=True)
class SuccinctVector:
    """Normalized-average embedding of a word list; zero when no word has a
    nonzero embedding."""

    values: np.ndarray
    count: int


def succinct_vector(words: list[str], emb: EmbeddingModel) -> SuccinctVector:
    acc = np.zeros(emb.dim)
    count = 0
    for word in words:
        vec = emb.w_in[emb.vocab.id_for(word)]
        norm = float(np.linalg.norm(vec))
        if norm == 0.0:
            continue
        acc = acc + vec / norm
        count += 1
    if count == 0:
        return SuccinctVector(np.zeros(emb.dim), 0)
    return SuccinctVector(acc / count, count)


@dataclass(frozen=True)
class FeatureVector:
    """Concatenation of one succinct vector per feature entity; absent
    entities leave their block at zero."""

    values: np.ndarray
    block_dim: int

    def __post_init__(self):
        if self.values.shape != (len(FEATURE_ENTITIES) * self.block_dim,):
            raise ValueError(
                f"feature vector must have {len(FEATURE_ENTITIES)}*{self.block_dim} entries"
            )

    def block(self, entity_type: str) -> np.ndarray:
        i = BLOCK_INDEX[entity_type]
        return self.values[i * self.block_dim : (i + 1) * self.block_dim]

    def with_zeroed(self, entity_type: str) -> FeatureVector:
        masked = self.values.copy()
        i = BLOCK_INDEX[entity_type]
        masked[i * self.block_dim : (i + 1) * self.block_dim] = 0.0
        return FeatureVector(masked, self.block_dim)


def build_feature_vector(entities: EntitySet, emb: EmbeddingModel) -> FeatureVector:
    blocks = [
        succinct_vector(entities.words_for(t), emb).values for t in FEATURE_ENTITIES
    ]
    return FeatureVector(np.concatenate(blocks), emb.dim)


# --- k-means discretization ---------------------------------------------------


@dataclass
class DiscretizationModel:
    entity_type: str
    k_clusters: int
    centroids: np.ndarray
    labels: dict[int, str]
    seed: int
    sse_history: list[float] = field(default_factory=list)

    def label_of(self, cluster_id: int) -> str:
        return self.labels[cluster_id]


def _nearest_centroid(point: np.ndarray, centroids: np.ndarray) -> int:
    # ties broken by lower cluster id (argmin returns the first minimum)
    return int(np.argmin(((centroids - point) ** 2).sum(axis=1)))


def _kmeans_pp_init(
    points: np.ndarray, k: int, rng: np.random.Generator
) -> np.ndarray:
    n = points.shape[0]
    centroids = np.empty((k, points.shape[1]))
    centroids[0] = points[rng.integers(n)]
    sq_dist = ((points - centroids[0]) ** 2).sum(axis=1)
    for i in range(1, k):
        total = sq_dist.sum()
        if total == 0.0:
            centroids[i] = points[rng.integers(n)]
            continue
        centroids[i] = points[rng.choice(n, p=sq_dist / total)]
        sq_dist = np.minimum(sq_dist, ((points - centroids[i]) ** 2).sum(axis=1))
    return centroids


def kmeans(
    points: np.ndarray, k: int, seed: int, max_iter: int = 300
) -> tuple[np.ndarray, np.ndarray, list[float]]:
    """Seeded k-means++ then Lloyd iterations to an assignment fixpoint.

    Returns (centroids, assignments, per-iteration within-cluster SSE).
    """
    rng = np.random.default_rng(seed)
    centroids = _kmeans_pp_init(points, k, rng)
    assignments = np.full(points.shape[0], -1)
    history: list[float] = []
    for _ in range(max_iter):
        sq = ((points[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
        new_assignments = sq.argmin(axis=1)
        history.append(float(sq[np.arange(points.shape[0]), new_assignments].sum()))
        if np.array_equal(new_assignments, assignments):
            break
        assignments = new_assignments
        for c in range(k):
            members = points[assignments == c]
            if len(members):
                centroids[c] = members.mean(axis=0)
    return centroids, assignments, history


def fit_discretization(
    values: list[str],
    emb: EmbeddingModel,
    k_clusters: int,
    seed: int,
    entity_type: str = "",
) -> DiscretizationModel:
    """Cluster the succinct vectors of free-text entity values.

    Cluster labels default to ``cluster<i>``; attach predicate labels with
    :func:`label_clusters` or :func:`label_clusters_by_exemplars`.
    """
    points = np.stack([succinct_vector(v.split(), emb).values for v in values]) if values else np.empty((0, emb.dim))
    distinct = {tuple(p) for p in points}
    if len(distinct) < k_clusters:
        raise TooFewPoints(
            f"{len(distinct)} distinct vectors for {k_clusters} clusters"
        )
    centroids, _, history = kmeans(points, k_clusters, seed)
    labels = {i: f"cluster{i}" for i in range(k_clusters)}
    return DiscretizationModel(
        entity_type=entity_type,
        k_clusters=k_clusters,
        centroids=centroids,
        labels=labels,
        seed=seed,
        sse_history=history,
    )


def label_clusters(
    model: DiscretizationModel, labels: dict[int, str]
) -> DiscretizationModel:
    """Manually assign predicate labels; every cluster id must be covered."""
    missing = set(range(model.k_clusters)) - set(labels)
    if missing:
        raise ValueError(f"labels missing for clusters {sorted(missing)}")
    return replace(model, labels=dict(labels))


def label_clusters_by_exemplars(
    model: DiscretizationModel,
    exemplars: dict[str, list[str]],
    emb: EmbeddingModel,
) -> DiscretizationModel:
    """Give each cluster the label whose exemplar phrase lies nearest to the
    cluster centroid."""
    labeled: dict[int, str] = {}
    for cid in range(model.k_clusters):
        best_label, best_dist = None, np.inf
        for label, phrases in exemplars.items():
            for phrase in phrases:
                sv = succinct_vector(phrase.split(), emb).values
                dist = float(((model.centroids[cid] - sv) ** 2).sum())
                if dist < best_dist:
                    best_label, best_dist = label, dist
        labeled[cid] = best_label if best_label is not None else f"cluster{cid}"
    return replace(model, labels=labeled)


def cluster_exemplars(
    model: DiscretizationModel,
    values: list[str],
    emb: EmbeddingModel,
    per_cluster: int = 5,
) -> dict[int, list[str]]:
    """Sample member values per cluster, to support manual labeling."""
    buckets: dict[int, list[str]] = {i: [] for i in range(model.k_clusters)}
    for value in values:
        cid, _ = map_to_cluster(model, value.split(), emb)
        if len(buckets[cid]) < per_cluster:
            buckets[cid].append(value)
    return buckets


def map_to_cluster(
    model: DiscretizationModel, words: list[str], emb: EmbeddingModel
) -> tuple[int, str]:
    """Nearest centroid (Euclidean) of the words' succinct vector; ties go
    to the lower cluster id."""
    if not words:
        raise EmptyValue("no words to map")
    sv = succinct_vector(words, emb)
    cid = _nearest_centroid(sv.values, model.centroids)
    return cid, model.labels[cid]


# --- multinomial logistic completion -------------------------------------------


@dataclass
class CompletionModel:
    entity_type: str
    weights: np.ndarray
    biases: np.ndarray
    classes: list[tuple[int, str]]
    l2: float
    iterations: int
    block_dim: int
    initial_loss: float | None = None
    final_loss: float | None = None

    @property
    def n_classes(self) -> int:
        return len(self.classes)


def logistic_objective(
    flat: np.ndarray, x: np.ndarray, y: np.ndarray, n_classes: int, l2: float
) -> tuple[float, np.ndarray]:
    """Mean multinomial cross-entropy with L2 penalty on the weights, and
    its gradient in the same flat layout (weights then biases)."""
    n, n_features = x.shape
    weights = flat[: n_classes * n_features].reshape(n_classes, n_features)
    biases = flat[n_classes * n_features :]
    logits = x @ weights.T + biases
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_probs = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    loss = -float(log_probs[np.arange(n), y].mean()) + 0.5 * l2 * float(
        (weights**2).sum()
    )
    dlogits = np.exp(log_probs)
    dlogits[np.arange(n), y] -= 1.0
    dlogits /= n
    dweights = dlogits.T @ x + l2 * weights
    dbiases = dlogits.sum(axis=0)
    return loss, np.concatenate([dweights.ravel(), dbiases])


def train_completion(
    dataset: list[EntitySet],
    emb: EmbeddingModel,
    disc: DiscretizationModel,
    entity_type: str,
    l2: float = 0.01,
    iterations: int = 70,
) -> CompletionModel:
    """Fit the masked-entity predictor.

    The class of each record is the cluster of its target-entity value; the
    target block of each feature vector is zeroed (the record is scored as
    if the entity were missing).  Optimization is limited-memory BFGS on the
    regularized cross-entropy.
    """
    rows: list[np.ndarray] = []
    cluster_ids: list[int] = []
    for record in dataset:
        words = record.words_for(entity_type)
        if not words:
            continue
        cid, _ = map_to_cluster(disc, words, emb)
        features = build_feature_vector(record, emb).with_zeroed(entity_type)
        rows.append(features.values)
        cluster_ids.append(cid)
    if not rows:
        raise EmptyDataset(f"no training records carry {entity_type}")
    class_ids = sorted(set(cluster_ids))
    if len(class_ids) < 2:
        raise SingleClass(f"only {len(class_ids)} class present for {entity_type}")
    class_index = {cid: i for i, cid in enumerate(class_ids)}

    x = np.stack(rows)
    y = np.array([class_index[c] for c in cluster_ids])
    n_classes, n_features = len(class_ids), x.shape[1]
    flat0 = np.zeros(n_classes * n_features + n_classes)
    initial_loss, _ = logistic_objective(flat0, x, y, n_classes, l2)
    result = minimize(
        logistic_objective,
        flat0,
        args=(x, y, n_classes, l2),
        jac=True,
        method="L-BFGS-B",
        options={"maxiter": iterations, "gtol": 1e-6},
    )
    flat = result.x
    weights = flat[: n_classes * n_features].reshape(n_classes, n_features)
    biases = flat[n_classes * n_features :]
    final_loss, _ = logistic_objective(flat, x, y, n_classes, l2)
    return CompletionModel(
        entity_type=entity_type,
        weights=weights,
        biases=biases,
        classes=[(cid, disc.labels[cid]) for cid in class_ids],
        l2=l2,
        iterations=iterations,
        block_dim=emb.dim,
        initial_loss=float(initial_loss),
        final_loss=float(final_loss),
    )


def predict_missing(
    model: CompletionModel, features: FeatureVector, top_k: int | None = None
) -> list[tuple[str, float]]:
    """Ranked (label, probability) for the masked entity.

    The target block is zeroed before scoring, so only the other blocks can
    influence the prediction."""
    masked = features.with_zeroed(model.entity_type)
    logits = model.weights @ masked.values + model.biases
    shifted = logits - logits.max()
    probs = np.exp(shifted) / np.exp(shifted).sum()
    order = np.argsort(-probs, kind="stable")
    ranked = [(model.classes[i][1], float(probs[i])) for i in order]
    return ranked if top_k is None else ranked[:top_k]


def knn_complete(
    train: list[tuple[FeatureVector, str]],
    query: FeatureVector,
    k: int = 1,
) -> str:
    """Exact Euclidean nearest-neighbor completion; equidistant neighbors go
    to the lower training index; k>1 takes a majority vote over the k
    nearest (ties broken by the nearest member of the tied values)."""
    if not train:
        raise EmptyTrainingSet("no training examples")
    sq = [float(((fv.values - query.values) ** 2).sum()) for fv, _ in train]
    order = sorted(range(len(train)), key=lambda i: (sq[i], i))
    if k == 1:
        return train[order[0]][1]
    top = order[:k]
    counts: dict[str, int] = {}
    first_seen: dict[str, int] = {}
    for rank, idx in enumerate(top):
        value = train[idx][1]
        counts[value] = counts.get(value, 0) + 1
        first_seen.setdefault(value, rank)
    return max(counts, key=lambda v: (counts[v], -first_seen[v]))


# --- ranking metrics -------------------------------------------------------------


def precision_recall_at_k(
    ranked: list[str], gold: str, k: int
) -> tuple[float, float]:
    """With a single gold label: recall@k is 1 iff the gold appears in the
    top k; precision@k is that hit divided by k."""
    if k < 1:
        raise ValueError("k must be >= 1")
    hit = 1.0 if gold in ranked[:k] else 0.0
    return hit / k, hit


def mean_precision_recall_at_k(
    queries: list[tuple[list[str], str]], k: int
) -> tuple[float, float]:
    if not queries:
        return 0.0, 0.0
    pairs = [precision_recall_at_k(ranked, gold, k) for ranked, gold in queries]
    return (
        sum(p for p, _ in pairs) / len(pairs),
        sum(r for _, r in pairs) / len(pairs),
    )


# --- persistence -------------------------------------------------------------------


def save_discretization(model: DiscretizationModel, path: str | Path) -> None:
    meta = {
        "entity_type": model.entity_type,
        "k_clusters": str(model.k_clusters),
        "seed": str(model.seed),
        "labels": ",".join(model.labels[i] for i in range(model.k_clusters)),
    }
    _textio.write_model(path, DISC_MARKER, meta, {"centroids": model.centroids})


def load_discretization(path: str | Path) -> DiscretizationModel:
    meta, matrices = _textio.read_model(path, DISC_MARKER)
    label_list = meta["labels"].split(",")
    return DiscretizationModel(
        entity_type=meta["entity_type"],
        k_clusters=int(meta["k_clusters"]),
        centroids=matrices["centroids"],
        labels={i: lbl for i, lbl in enumerate(label_list)},
        seed=int(meta["seed"]),
    )


def save_completion(model: CompletionModel, path: str | Path) -> None:
    meta = {
        "entity_type": model.entity_type,
        "classes": ",".join(f"{cid}:{label}" for cid, label in model.classes),
        "l2": repr(model.l2),
        "iterations": str(model.iterations),
        "block_dim": str(model.block_dim),
    }
    _textio.write_model(
        path,
        COMPLETION_MARKER,
        meta,
        {"weights": model.weights, "biases": model.biases},
    )


def load_completion(path: str | Path) -> CompletionModel:
    meta, matrices = _textio.read_model(path, COMPLETION_MARKER)
    classes = []
    for item in meta["classes"].split(","):
        cid, _, label = item.partition(":")
        classes.append((int(cid), label))
    return CompletionModel(
        entity_type=meta["entity_type"],
        weights=matrices["weights"],
        biases=matrices["biases"][0],
        classes=classes,
        l2=float(meta["l2"]),
        iterations=int(meta["iterations"]),
        block_dim=int(meta["block_dim"]),
    )
