"""Adaptive-resonance clustering and the class/pattern/instance relation graph.

Clustering is prototype-based incremental ART: a sample joins the best-
matching cluster whose match score clears the vigilance threshold, otherwise
it founds a new cluster with itself as prototype. Accepted assignments move
the prototype by a moving average. Presentation order is seed-shuffled and is
part of the experiment record, since ART is order-dependent.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from enum import Enum
from pathlib import Path

import numpy as np

from .data_io import FeatureSet
from .errors import ContractError

log = logging.getLogger(__name__)

COSINE = "cosine"
EUCLIDEAN_GAUSSIAN = "euclidean-gaussian"


@dataclass
class Cluster:
    id: int
    prototype: np.ndarray
    members: list[int]
    class_counts: np.ndarray  # per-class member counts

    @property
    def total(self) -> int:
        return len(self.members)


@dataclass
class ClusterModel:
    clusters: list[Cluster]
    vigilance: float
    learning_rate: float
    metric: str = COSINE
    sigma: float = 1.0  # kernel width for the euclidean-gaussian match

    def cluster_by_id(self, cid: int) -> Cluster:
        for cluster in self.clusters:
            if cluster.id == cid:
                return cluster
        raise ContractError(f"no cluster with id {cid}")


def match_score(metric: str, x: np.ndarray, prototype: np.ndarray, sigma: float = 1.0) -> float:
    """Similarity in [~-1, 1] (cosine) or (0, 1] (gaussian kernel)."""
    if metric == COSINE:
        nx = np.linalg.norm(x)
        npr = np.linalg.norm(prototype)
        if nx == 0.0 or npr == 0.0:
            return 1.0 if nx == npr else 0.0
        return float(np.dot(x, prototype) / (nx * npr))
    if metric == EUCLIDEAN_GAUSSIAN:
        d2 = float(np.sum((x - prototype) ** 2))
        return float(np.exp(-d2 / (2.0 * sigma * sigma)))
    raise ContractError(f"unknown match metric {metric!r}")


def _match_rows(metric: str, x: np.ndarray, protos: np.ndarray, sigma: float) -> np.ndarray:
    """Vectorized ``match_score`` of ``x`` against every prototype row."""
    if metric == COSINE:
        nx = np.linalg.norm(x)
        norms = np.linalg.norm(protos, axis=1)
        if nx == 0.0:
            return np.where(norms == 0.0, 1.0, 0.0)
        with np.errstate(invalid="ignore", divide="ignore"):
            scores = (protos @ x) / (norms * nx)
        return np.where(norms == 0.0, 0.0, scores)
    if metric == EUCLIDEAN_GAUSSIAN:
        d2 = np.sum((protos - x) ** 2, axis=1)
        return np.exp(-d2 / (2.0 * sigma * sigma))
    raise ContractError(f"unknown match metric {metric!r}")


def art_fit(
    fs: FeatureSet,
    vigilance: float,
    learning_rate: float = 0.1,
    max_epochs: int = 5,
    seed: int = 0,
    metric: str = COSINE,
    sigma: float = 1.0,
) -> ClusterModel:
    """Partition ``fs`` with incremental ART.

    One full presentation pass plus up to ``max_epochs`` refinement passes
    (stopping early once no sample changes cluster). At every accepted
    assignment the match score is asserted to clear the vigilance gate and
    the winning prototype moves by ``learning_rate`` toward the sample.
    """
    if fs is None or fs.n == 0:
        raise ContractError("art_fit requires a non-empty dataset")
    if not (0.0 < vigilance < 1.0):
        raise ContractError(f"vigilance must lie in (0, 1), got {vigilance}")
    if not (0.0 < learning_rate <= 1.0):
        raise ContractError(f"learning_rate must lie in (0, 1], got {learning_rate}")
    if not np.all(np.isfinite(fs.features)):
        raise ContractError("features must be finite")

    rng = np.random.Generator(np.random.PCG64(seed))
    order = rng.permutation(fs.n)

    # Flat working state (prototype rows ordered by ascending cluster id, so
    # argmax tie-breaking lands on the lowest id); Cluster objects are
    # materialized once at the end.
    protos = np.empty((0, fs.d))
    ids: list[int] = []
    members: dict[int, list[int]] = {}
    assignment = np.full(fs.n, -1, dtype=np.int64)
    next_id = 0
    beta = learning_rate

    for sweep in range(max_epochs + 1):
        moved = 0
        for i in order:
            x = fs.features[i]
            row = -1
            if len(ids):
                scores = _match_rows(metric, x, protos, sigma)
                scores = np.where(scores >= vigilance, scores, -np.inf)
                cand = int(np.argmax(scores))
                if scores[cand] != -np.inf:
                    row = cand
            if row < 0:
                if assignment[i] >= 0:
                    members[assignment[i]].remove(i)
                protos = np.vstack([protos, fs.features[i][None, :]])
                ids.append(next_id)
                members[next_id] = [int(i)]
                assignment[i] = next_id
                next_id += 1
                moved += 1
                continue

            assert scores[row] >= vigilance  # vigilance-at-insertion invariant
            winner = ids[row]
            log.debug("sample %d -> cluster %d (match %.4f)", i, winner, scores[row])
            if assignment[i] != winner:
                if assignment[i] >= 0:
                    members[assignment[i]].remove(i)
                members[winner].append(int(i))
                assignment[i] = winner
                moved += 1
            protos[row] = protos[row] + beta * (x - protos[row])  # exact at the fixed point

        keep = [r for r, cid in enumerate(ids) if members[cid]]
        if len(keep) != len(ids):
            for cid in [cid for cid in ids if not members[cid]]:
                del members[cid]
            protos = protos[keep]
            ids = [ids[r] for r in keep]
        if sweep > 0 and moved == 0:
            break

    clusters = []
    for row, cid in enumerate(ids):
        counts = np.bincount(fs.labels[members[cid]], minlength=fs.c).astype(np.int64)
        clusters.append(Cluster(cid, protos[row].copy(), members[cid], counts))
    model = ClusterModel(clusters, vigilance, learning_rate, metric, sigma)
    sizes = sum(c.total for c in clusters)
    if sizes != fs.n:
        raise AssertionError("cluster sizes do not partition the dataset")
    return model


def assign(model: ClusterModel, feature: np.ndarray) -> int:
    """Best-matching cluster id (no vigilance gate); ties go to the lowest id."""
    if not model.clusters:
        raise ContractError("assign requires a fitted, non-empty model")
    x = np.asarray(feature, dtype=np.float64)
    protos = np.stack([c.prototype for c in model.clusters])
    scores = _match_rows(model.metric, x, protos, model.sigma)
    best = min(range(len(model.clusters)), key=lambda r: (-scores[r], model.clusters[r].id))
    return model.clusters[best].id


class RelationKind(Enum):
    ID = "intra-class-diversity"
    IS = "inter-class-similarity"
    MC = "mixed-cluster"
    NONE = "none"


@dataclass
class Dominance:
    cls: int
    representativeness: float


@dataclass
class RelationGraph:
    """Three-level view {classes, clusters, instances} over a fitted model."""

    model: ClusterModel
    labels: np.ndarray
    rho2: float
    assignment: dict[int, int]  # sample index -> cluster id
    dominance: dict[int, Dominance | None]  # cluster id -> dominator or mixed
    dominant_by_class: dict[int, list[int]]  # class -> cluster ids, largest first


def build_relation_graph(model: ClusterModel, labels: np.ndarray, rho2: float) -> RelationGraph:
    if not (0.0 < rho2 <= 1.0):
        raise ContractError(f"rho2 must lie in (0, 1], got {rho2}")
    labels = np.asarray(labels, dtype=np.int64)
    assignment: dict[int, int] = {}
    dominance: dict[int, Dominance | None] = {}
    for cluster in model.clusters:
        for i in cluster.members:
            assignment[i] = cluster.id
        ratios = cluster.class_counts / cluster.total
        top = int(np.argmax(ratios))  # argmax takes the lowest class on ties
        if ratios[top] > rho2:
            dominance[cluster.id] = Dominance(top, float(ratios[top]))
        else:
            dominance[cluster.id] = None

    dominant_by_class: dict[int, list[int]] = {}
    for cluster in model.clusters:
        dom = dominance[cluster.id]
        if dom is not None:
            dominant_by_class.setdefault(dom.cls, []).append(cluster.id)
    by_id = {c.id: c for c in model.clusters}
    for cls, cids in dominant_by_class.items():
        cids.sort(key=lambda cid: (-by_id[cid].total, cid))

    return RelationGraph(model, labels, rho2, assignment, dominance, dominant_by_class)


def classify_pair(graph: RelationGraph, labels: np.ndarray, a: int, b: int) -> RelationKind:
    """Relation kind of the sample pair (a, b) per the three definitions.

    Same label in two different dominated clusters -> ID; different labels in
    one dominated cluster -> IS; different labels in one mixed cluster -> MC;
    anything else -> NONE.
    """
    if a == b:
        raise ContractError("classify_pair requires two distinct samples")
    labels = np.asarray(labels)
    ca, cb = graph.assignment[a], graph.assignment[b]
    dom_a, dom_b = graph.dominance[ca], graph.dominance[cb]
    if labels[a] == labels[b]:
        if ca != cb and dom_a is not None and dom_b is not None:
            return RelationKind.ID
        return RelationKind.NONE
    if ca == cb:
        return RelationKind.IS if dom_a is not None else RelationKind.MC
    return RelationKind.NONE


def representativeness(model: ClusterModel, cluster_id: int, cls: int) -> float:
    """Share of class ``cls`` among the cluster's members."""
    cluster = model.cluster_by_id(cluster_id)
    if cluster.total == 0:
        raise ContractError(f"cluster {cluster_id} is empty")
    if cls < 0 or cls >= len(cluster.class_counts):
        return 0.0
    return float(cluster.class_counts[cls] / cluster.total)


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------


def save_graph(path, model: ClusterModel, graph: RelationGraph | None = None) -> None:
    obj = {
        "vigilance": model.vigilance,
        "learning_rate": model.learning_rate,
        "metric": model.metric,
        "sigma": model.sigma,
        "clusters": [
            {
                "id": c.id,
                "prototype": c.prototype.tolist(),
                "members": [int(i) for i in c.members],
                "class_counts": [int(v) for v in c.class_counts],
            }
            for c in model.clusters
        ],
    }
    if graph is not None:
        dominance = []
        for cid in sorted(graph.dominance):
            dom = graph.dominance[cid]
            if dom is None:
                dominance.append({"cluster": cid, "mixed": True})
            else:
                dominance.append(
                    {
                        "cluster": cid,
                        "class": dom.cls,
                        "representativeness": dom.representativeness,
                    }
                )
        obj["rho2"] = graph.rho2
        obj["dominance"] = dominance
    Path(path).write_text(json.dumps(obj, sort_keys=True))


def load_graph(path, labels: np.ndarray | None = None) -> tuple[ClusterModel, RelationGraph | None]:
    """Load a persisted model; rebuild the relation graph when the file has
    dominance data and ``labels`` are supplied."""
    obj = json.loads(Path(path).read_text())
    clusters = [
        Cluster(
            id=int(c["id"]),
            prototype=np.asarray(c["prototype"], dtype=np.float64),
            members=[int(i) for i in c["members"]],
            class_counts=np.asarray(c["class_counts"], dtype=np.int64),
        )
        for c in obj["clusters"]
    ]
    model = ClusterModel(
        clusters,
        vigilance=float(obj["vigilance"]),
        learning_rate=float(obj["learning_rate"]),
        metric=obj["metric"],
        sigma=float(obj.get("sigma", 1.0)),
    )
    graph = None
    if "rho2" in obj and labels is not None:
        graph = build_relation_graph(model, labels, float(obj["rho2"]))
    return model, graph
