"""Graph-guided representation learning: smoothing, alignment, losses, training.

The smoothing operator runs a two-layer graph convolution over the anchor +
positives sub-graph using a mutualized, self-looped, symmetrically normalized
KNN adjacency. Cluster- and class-level alignment mix prototypes into the
smoothed rows. Three losses drive a linear classifier: cross-entropy,
a negative-sample distance constraint, and an inter-class dispersion term.

The dispersion terms support two sign conventions. ``paper-literal`` is
-log(mu*theta/(S+theta)), which decreases as distances shrink; ``repulsive``
(default) is -log(S/(S+theta)) - log(mu), which pushes distances apart and
matches the stated intent of the constraint.
"""

from __future__ import annotations

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import numerics as nm
from .cags import Batch
from .crm import RelationGraph, assign
from .data_io import FeatureSet
from .errors import ContractError, DimensionError
from .numerics import Node

log = logging.getLogger(__name__)

PAPER_LITERAL = "paper-literal"
REPULSIVE = "repulsive"


@dataclass
class SmoothingModel:
    w_in: np.ndarray  # d x h, input-to-hidden
    w_out: np.ndarray  # h x d, hidden-to-output (back to feature width)
    classifier_w: np.ndarray  # d x c
    classifier_b: np.ndarray  # 1 x c
    knn_k: int = 5
    use_output_softmax: bool = True


@dataclass
class PrototypeBank:
    cluster_prototypes: np.ndarray  # per class: mean of its largest dominated cluster
    class_prototypes: np.ndarray  # per class: mean over all its dominated clusters
    alpha_u: float = 0.7
    beta_u: float = 0.3
    alpha_a: float = 0.7
    beta_a: float = 0.3


@dataclass
class LossConfig:
    theta: float = 1.0
    mu: float = 1.0
    gamma_nega: float = 1.0
    gamma_inter: float = 1.0
    dispersion_sign: str = REPULSIVE

    def validate(self) -> "LossConfig":
        if self.theta <= 0.0 or self.mu <= 0.0:
            raise ContractError("theta and mu must be positive")
        if self.gamma_nega < 0.0 or self.gamma_inter < 0.0:
            raise ContractError("loss mixture weights must be >= 0")
        if self.dispersion_sign not in (PAPER_LITERAL, REPULSIVE):
            raise ContractError(f"unknown dispersion_sign {self.dispersion_sign!r}")
        return self


def init_model(
    d: int,
    hidden: int,
    c: int,
    knn_k: int,
    use_output_softmax: bool,
    rng: np.random.Generator,
) -> SmoothingModel:
    return SmoothingModel(
        w_in=rng.standard_normal((d, hidden)) * np.sqrt(2.0 / (d + hidden)),
        w_out=rng.standard_normal((hidden, d)) * np.sqrt(2.0 / (hidden + d)),
        classifier_w=np.zeros((d, c)),
        classifier_b=np.zeros((1, c)),
        knn_k=knn_k,
        use_output_softmax=use_output_softmax,
    )


# ---------------------------------------------------------------------------
# adjacency and smoothing
# ---------------------------------------------------------------------------


def knn_adjacency(X: np.ndarray, k: int) -> np.ndarray:
    """Mutualized KNN graph with self-loops, symmetrically normalized.

    An edge exists if either endpoint ranks the other among its k nearest
    (Euclidean, ties by index). Returns D^(-1/2) (A+I) D^(-1/2), symmetric.
    ``k`` is clamped to rows-1; a single row degenerates to [[1.0]].
    """
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2:
        raise DimensionError(f"knn_adjacency expects a 2-D matrix, got {X.shape}")
    n = X.shape[0]
    if k < 1:
        raise ContractError("k must be >= 1")
    if n == 1:
        return np.ones((1, 1))
    k = min(k, n - 1)

    sq = np.sum(X * X, axis=1)
    d2 = sq[:, None] + sq[None, :] - 2.0 * (X @ X.T)
    np.fill_diagonal(d2, np.inf)
    A = np.zeros((n, n))
    for i in range(n):
        nbrs = np.argsort(d2[i], kind="stable")[:k]
        A[i, nbrs] = 1.0
    A = np.maximum(A, A.T)  # mutualize: edge if either direction is a k-neighbor
    A_tilde = A + np.eye(n)
    deg = A_tilde.sum(axis=1)
    inv_sqrt = 1.0 / np.sqrt(deg)
    return A_tilde * inv_sqrt[:, None] * inv_sqrt[None, :]


def smoothing_nodes(
    adjacency: np.ndarray, X: Node, w_in: Node, w_out: Node, use_output_softmax: bool
) -> Node:
    """Differentiable two-layer graph convolution; adjacency is detached."""
    A = nm.leaf(adjacency)
    hidden = nm.relu(nm.matmul(A, nm.matmul(X, w_in)))
    out = nm.matmul(nm.matmul(A, hidden), w_out)
    return nm.softmax_rows(out) if use_output_softmax else out


def graphical_smoothing(
    model: SmoothingModel, anchor_repr: np.ndarray, positive_reprs: np.ndarray | None
) -> np.ndarray:
    """Smoothed rows for [anchor; positives]; row 0 is the anchor's F_g."""
    anchor = np.atleast_2d(np.asarray(anchor_repr, dtype=np.float64))
    if positive_reprs is None or len(positive_reprs) == 0:
        X = anchor
    else:
        pos = np.atleast_2d(np.asarray(positive_reprs, dtype=np.float64))
        if pos.shape[1] != anchor.shape[1]:
            raise DimensionError("anchor and positives must share the feature width")
        X = np.concatenate([anchor, pos], axis=0)
    if model.w_in.shape[0] != X.shape[1]:
        raise DimensionError(
            f"feature width {X.shape[1]} does not match w_in {model.w_in.shape}"
        )
    A = knn_adjacency(X, model.knn_k)
    hidden = np.maximum(A @ X @ model.w_in, 0.0)
    out = A @ hidden @ model.w_out
    if model.use_output_softmax:
        shifted = out - out.max(axis=1, keepdims=True)
        e = np.exp(shifted)
        out = e / e.sum(axis=1, keepdims=True)
    return out


# ---------------------------------------------------------------------------
# prototypes and alignment
# ---------------------------------------------------------------------------


def compute_prototypes(
    graph: RelationGraph,
    fs: FeatureSet,
    alpha_u: float = 0.7,
    beta_u: float = 0.3,
    alpha_a: float = 0.7,
    beta_a: float = 0.3,
) -> PrototypeBank:
    """Per-class prototypes from the relation graph over stored features.

    w_cu(class): mean feature of the largest cluster dominated by the class.
    p_ca(class): mean feature over all samples in clusters dominated by the
    class. Classes dominating no cluster fall back to their sample mean.
    """
    if min(alpha_u, beta_u, alpha_a, beta_a) < 0.0:
        raise ContractError("mixing coefficients must be >= 0")
    by_id = {c.id: c for c in graph.model.clusters}
    w_cu = np.zeros((fs.c, fs.d))
    p_ca = np.zeros((fs.c, fs.d))
    for cls in range(fs.c):
        dominated = graph.dominant_by_class.get(cls, [])
        if dominated:
            largest = by_id[dominated[0]]
            w_cu[cls] = fs.features[largest.members].mean(axis=0)
            union = [i for cid in dominated for i in by_id[cid].members]
            p_ca[cls] = fs.features[union].mean(axis=0)
        else:
            mine = np.flatnonzero(fs.labels == cls)
            fallback = fs.features[mine].mean(axis=0)
            w_cu[cls] = fallback
            p_ca[cls] = fallback
    return PrototypeBank(w_cu, p_ca, alpha_u, beta_u, alpha_a, beta_a)


def cluster_align(F_g: np.ndarray, w_cu: np.ndarray, alpha_u: float, beta_u: float) -> np.ndarray:
    """Elementwise mix alpha_u*F_g + beta_u*w_cu."""
    F_g = np.asarray(F_g, dtype=np.float64)
    w_cu = np.asarray(w_cu, dtype=np.float64)
    if F_g.shape != w_cu.shape:
        raise DimensionError(f"cluster_align shapes differ: {F_g.shape} vs {w_cu.shape}")
    return alpha_u * F_g + beta_u * w_cu


def class_align(F_u: np.ndarray, p_ca: np.ndarray, alpha_a: float, beta_a: float) -> np.ndarray:
    """Elementwise mix alpha_a*F_u + beta_a*p_ca."""
    F_u = np.asarray(F_u, dtype=np.float64)
    p_ca = np.asarray(p_ca, dtype=np.float64)
    if F_u.shape != p_ca.shape:
        raise DimensionError(f"class_align shapes differ: {F_u.shape} vs {p_ca.shape}")
    return alpha_a * F_u + beta_a * p_ca


# ---------------------------------------------------------------------------
# losses (node builders plus float-valued wrappers)
# ---------------------------------------------------------------------------


def ce_loss_node(logits: Node, label: int) -> Node:
    """-log softmax(logits)[label] for a single logit row."""
    if logits.value.ndim == 1:
        raise DimensionError("logits must be a 1 x c row matrix")
    c = logits.value.shape[1]
    if not (0 <= label < c):
        raise ContractError(f"label {label} outside [0, {c})")
    onehot = np.zeros((logits.value.shape[0], c))
    onehot[0, label] = 1.0
    return nm.neg(nm.sum_all(nm.mul(nm.log_softmax_rows(logits), nm.leaf(onehot))))


def ce_loss(logits: np.ndarray, label: int) -> float:
    return nm.value(ce_loss_node(nm.leaf(np.atleast_2d(logits)), label))


def _dispersion_node(total_dist: Node, cfg: LossConfig) -> Node:
    """-log(mu*theta/(S+theta)) or -log(S/(S+theta)) - log(mu) on a scalar or
    column of distances S."""
    theta_arr = np.full(total_dist.value.shape, cfg.theta)
    s_plus_theta = nm.add(total_dist, nm.leaf(theta_arr))
    if cfg.dispersion_sign == PAPER_LITERAL:
        const = np.full(total_dist.value.shape, np.log(cfg.mu * cfg.theta))
        return nm.sub(nm.log(s_plus_theta), nm.leaf(const))
    const = np.full(total_dist.value.shape, np.log(cfg.mu))
    return nm.sub(nm.sub(nm.log(s_plus_theta), nm.log(total_dist)), nm.leaf(const))


def nega_loss_node(anchor: Node, nega: Node, cfg: LossConfig) -> Node:
    """Distance constraint against a non-empty m x d matrix of negatives."""
    cfg.validate()
    if nega.value.ndim != 2 or nega.value.shape[0] < 1:
        raise ContractError("nega_reprs must be a non-empty m x d matrix")
    m = nega.value.shape[0]
    anchor_rows = nm.select_rows(anchor, [0] * m)
    dists = nm.rowwise_l2(anchor_rows, nega)
    return nm.sum_all(_dispersion_node(nm.sum_all(dists), cfg))


def nega_loss(anchor_repr: np.ndarray, nega_reprs: np.ndarray, cfg: LossConfig) -> float:
    anchor = nm.leaf(np.atleast_2d(anchor_repr))
    return nm.value(nega_loss_node(anchor, nm.leaf(np.atleast_2d(nega_reprs)), cfg))


def interclass_loss_node(groups: dict[int, Node], cfg: LossConfig) -> Node:
    """Dispersion between per-class aggregates F_v (row means of each group).

    Sums the pairwise term over ordered pairs i != j; i = j pairs contribute
    exactly zero. A single-class batch yields 0 with a logged note.
    """
    cfg.validate()
    classes = sorted(groups)
    if len(classes) < 2:
        log.info("interclass_loss: single class in batch, returning 0")
        return nm.leaf(np.asarray(0.0))
    means = [nm.mean_rows(groups[cls]) for cls in classes]
    total = None
    for i in range(len(classes)):
        for j in range(len(classes)):
            if i == j:
                continue
            d = nm.l2_distance(means[i], means[j])
            term = _dispersion_node(d, cfg)
            total = term if total is None else nm.add(total, term)
    return total


def interclass_loss(groups: dict[int, np.ndarray], cfg: LossConfig) -> float:
    node_groups = {cls: nm.leaf(np.atleast_2d(rows)) for cls, rows in groups.items()}
    return nm.value(interclass_loss_node(node_groups, cfg))


# ---------------------------------------------------------------------------
# training and inference
# ---------------------------------------------------------------------------


@dataclass
class TrainFlags:
    use_smoothing: bool = True
    use_alignment: bool = True


class TrainingAborted(RuntimeError):
    def __init__(self, message: str, dump: dict):
        super().__init__(f"{message}; diagnostics: {dump}")
        self.dump = dump


def _batch_graph(
    batch: Batch,
    model: SmoothingModel,
    prototypes: PrototypeBank,
    cfg: LossConfig,
    fs: FeatureSet,
    flags: TrainFlags,
    param_nodes: dict[str, Node] | None = None,
):
    """Assemble one differentiable graph for the whole batch.

    Per-anchor sub-graphs are stitched into a block-diagonal adjacency so a
    single forward/backward pass covers the batch; the math is identical to
    running the per-anchor operators one at a time. ``param_nodes`` lets a
    caller supply its own parameter leaves (used by gradient checks).
    """
    feats = fs.features
    B = len(batch.anchors)
    params_in = param_nodes or {}
    w_in = params_in.get("w_in") or nm.leaf(model.w_in)
    w_out = params_in.get("w_out") or nm.leaf(model.w_out)
    cls_w = params_in.get("classifier_w") or nm.leaf(model.classifier_w)
    cls_b = params_in.get("classifier_b") or nm.leaf(model.classifier_b)

    if flags.use_smoothing:
        blocks, offsets, cursor = [], [], 0
        for a, pos in zip(batch.anchors, batch.positives):
            sub = np.concatenate([feats[a][None, :], feats[pos]], axis=0)
            blocks.append(sub)
            offsets.append(cursor)
            cursor += sub.shape[0]
        X_full = np.concatenate(blocks, axis=0)
        A_full = np.zeros((cursor, cursor))
        at = 0
        for sub in blocks:
            rows = sub.shape[0]
            A_full[at : at + rows, at : at + rows] = knn_adjacency(sub, model.knn_k)
            at += rows
        F_full = smoothing_nodes(A_full, nm.leaf(X_full), w_in, w_out, model.use_output_softmax)
        F_anchor = nm.select_rows(F_full, offsets)
    else:
        F_anchor = nm.leaf(feats[batch.anchors])

    anchor_labels = fs.labels[batch.anchors]
    if flags.use_alignment:
        p_cu = prototypes.cluster_prototypes[anchor_labels]
        F_u = nm.add(nm.scale(F_anchor, prototypes.alpha_u), nm.leaf(prototypes.beta_u * p_cu))
        p_ca = prototypes.class_prototypes[anchor_labels]
        F_a = nm.add(nm.scale(F_u, prototypes.alpha_a), nm.leaf(prototypes.beta_a * p_ca))
    else:
        F_a = F_anchor

    logits = nm.add(nm.matmul(F_a, cls_w), cls_b)

    weighted_onehot = np.zeros((B, fs.c))
    weighted_onehot[np.arange(B), anchor_labels] = batch.weights / B
    ce_node = nm.neg(nm.sum_all(nm.mul(nm.log_softmax_rows(logits), nm.leaf(weighted_onehot))))

    if cfg.gamma_nega > 0.0 and any(batch.negatives):
        rep_idx, neg_rows = [], []
        for row, negs in enumerate(batch.negatives):
            rep_idx.extend([row] * len(negs))
            if negs:
                neg_rows.append(feats[negs])
        neg_mat = np.concatenate(neg_rows, axis=0)
        dists = nm.rowwise_l2(nm.select_rows(F_a, rep_idx), nm.leaf(neg_mat))
        seg = np.zeros((B, len(rep_idx)))
        seg[rep_idx, np.arange(len(rep_idx))] = 1.0
        per_anchor_s = nm.matmul(nm.leaf(seg), dists)  # B x 1 column of S_i
        terms = _dispersion_node(per_anchor_s, cfg)
        wcol = (batch.weights * cfg.gamma_nega / B)[:, None]
        nega_node = nm.sum_all(nm.mul(terms, nm.leaf(wcol)))
    else:
        nega_node = nm.leaf(np.asarray(0.0))

    present = sorted(set(int(v) for v in anchor_labels))
    if cfg.gamma_inter > 0.0 and len(present) >= 2:
        avg = np.zeros((len(present), B))
        for row, cls in enumerate(present):
            mask = anchor_labels == cls
            avg[row, mask] = 1.0 / mask.sum()
        F_v = nm.matmul(nm.leaf(avg), F_a)
        pair_i, pair_j = [], []
        for i in range(len(present)):
            for j in range(len(present)):
                if i != j:
                    pair_i.append(i)
                    pair_j.append(j)
        d_v = nm.rowwise_l2(nm.select_rows(F_v, pair_i), nm.select_rows(F_v, pair_j))
        inter_node = nm.scale(nm.sum_all(_dispersion_node(d_v, cfg)), cfg.gamma_inter)
    else:
        inter_node = nm.leaf(np.asarray(0.0))

    total = nm.add(nm.add(ce_node, nega_node), inter_node)
    params = {"w_in": w_in, "w_out": w_out, "classifier_w": cls_w, "classifier_b": cls_b}
    parts = {"ce": ce_node, "nega": nega_node, "inter": inter_node, "total": total}
    return params, parts, F_a


def batch_loss_nodes(
    batch: Batch,
    model: SmoothingModel,
    prototypes: PrototypeBank,
    cfg: LossConfig,
    fs: FeatureSet,
    flags: TrainFlags | None = None,
    param_nodes: dict[str, Node] | None = None,
):
    """Expose the assembled batch objective (used by gradient-check tests)."""
    return _batch_graph(batch, model, prototypes, cfg, fs, flags or TrainFlags(), param_nodes)


def train_step(
    batch: Batch,
    model: SmoothingModel,
    prototypes: PrototypeBank,
    cfg: LossConfig,
    fs: FeatureSet,
    lr: float,
    flags: TrainFlags | None = None,
) -> dict:
    """One SGD step over the batch; returns the loss breakdown."""
    cfg.validate()
    flags = flags or TrainFlags()
    params, parts, _ = _batch_graph(batch, model, prototypes, cfg, fs, flags)
    breakdown = {name: nm.value(node) for name, node in parts.items()}
    if not all(np.isfinite(v) for v in breakdown.values()):
        raise TrainingAborted("non-finite loss", breakdown)
    nm.backward(parts["total"])
    for name, node in params.items():
        if node.grad is None:  # parameter not in this variant's graph
            continue
        setattr(model, name, getattr(model, name) - lr * node.grad)
    return breakdown


def represent_anchor(
    model: SmoothingModel,
    prototypes: PrototypeBank,
    fs: FeatureSet,
    anchor: int,
    positives: list[int],
    flags: TrainFlags | None = None,
) -> np.ndarray:
    """Training-style aligned representation F_a of one anchor (label known)."""
    flags = flags or TrainFlags()
    if flags.use_smoothing:
        fg = graphical_smoothing(model, fs.features[anchor], fs.features[positives])[0]
    else:
        fg = fs.features[anchor]
    if not flags.use_alignment:
        return fg
    cls = int(fs.labels[anchor])
    fu = cluster_align(fg, prototypes.cluster_prototypes[cls], prototypes.alpha_u, prototypes.beta_u)
    return class_align(fu, prototypes.class_prototypes[cls], prototypes.alpha_a, prototypes.beta_a)


def _infer_one(
    x: np.ndarray,
    graph: RelationGraph,
    fs_train: FeatureSet,
    model: SmoothingModel,
    prototypes: PrototypeBank,
    flags: TrainFlags,
) -> np.ndarray:
    cid = assign(graph.model, x)
    if flags.use_smoothing:
        members = np.asarray(graph.model.cluster_by_id(cid).members, dtype=np.intp)
        dists = np.linalg.norm(fs_train.features[members] - x, axis=1)
        nearest = members[np.argsort(dists, kind="stable")[: model.knn_k]]
        fg = graphical_smoothing(model, x, fs_train.features[nearest])[0]
    else:
        fg = x
    dom = graph.dominance[cid]
    if flags.use_alignment and dom is not None:
        fu = cluster_align(
            fg, prototypes.cluster_prototypes[dom.cls], prototypes.alpha_u, prototypes.beta_u
        )
    else:
        fu = fg  # mixed cluster: no dominating class to align with
    return fu @ model.classifier_w + model.classifier_b[0]


def infer(
    fs_test: FeatureSet,
    graph: RelationGraph,
    fs_train: FeatureSet,
    model: SmoothingModel,
    prototypes: PrototypeBank,
    flags: TrainFlags | None = None,
    workers: int = 1,
) -> tuple[np.ndarray, np.ndarray]:
    """Predicted labels and score rows for every test sample.

    Test samples are assigned to their best-matching cluster; the knn_k
    nearest training samples inside that cluster act as pseudo-positives for
    smoothing; cluster alignment uses the assigned cluster's dominating-class
    prototype (skipped for mixed clusters); class alignment is skipped because
    the label is unknown. Evaluation parallelizes over samples with an
    ordered reduction, so results never depend on the worker count.
    """
    flags = flags or TrainFlags()

    def run(i: int) -> np.ndarray:
        return _infer_one(fs_test.features[i], graph, fs_train, model, prototypes, flags)

    if workers <= 1:
        scores = [run(i) for i in range(fs_test.n)]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            scores = list(pool.map(run, range(fs_test.n)))
    score_mat = np.vstack(scores)
    return np.argmax(score_mat, axis=1), score_mat


# ---------------------------------------------------------------------------
# checkpoints: JSON metadata plus a little-endian float32 blob
# ---------------------------------------------------------------------------

_CKPT_TENSORS = ("w_in", "w_out", "classifier_w", "classifier_b", "cluster_prototypes", "class_prototypes")


def save_checkpoint(prefix, model: SmoothingModel, prototypes: PrototypeBank, config: dict) -> None:
    prefix = Path(prefix)
    tensors = {
        "w_in": model.w_in,
        "w_out": model.w_out,
        "classifier_w": model.classifier_w,
        "classifier_b": model.classifier_b,
        "cluster_prototypes": prototypes.cluster_prototypes,
        "class_prototypes": prototypes.class_prototypes,
    }
    blob = bytearray()
    meta_tensors = {}
    for name in _CKPT_TENSORS:
        arr = tensors[name].astype("<f4")
        meta_tensors[name] = {"shape": list(arr.shape), "offset": len(blob)}
        blob += arr.tobytes(order="C")
    meta = {
        "tensors": meta_tensors,
        "knn_k": model.knn_k,
        "use_output_softmax": model.use_output_softmax,
        "alpha_u": prototypes.alpha_u,
        "beta_u": prototypes.beta_u,
        "alpha_a": prototypes.alpha_a,
        "beta_a": prototypes.beta_a,
        "config": config,
    }
    prefix.with_suffix(".json").write_text(json.dumps(meta, sort_keys=True))
    prefix.with_suffix(".bin").write_bytes(bytes(blob))


def load_checkpoint(prefix) -> tuple[SmoothingModel, PrototypeBank, dict]:
    prefix = Path(prefix)
    meta = json.loads(prefix.with_suffix(".json").read_text())
    blob = prefix.with_suffix(".bin").read_bytes()
    arrays = {}
    for name in _CKPT_TENSORS:
        info = meta["tensors"][name]
        shape = tuple(info["shape"])
        count = int(np.prod(shape))
        arrays[name] = (
            np.frombuffer(blob, dtype="<f4", count=count, offset=info["offset"])
            .astype(np.float64)
            .reshape(shape)
        )
    model = SmoothingModel(
        w_in=arrays["w_in"],
        w_out=arrays["w_out"],
        classifier_w=arrays["classifier_w"],
        classifier_b=arrays["classifier_b"],
        knn_k=int(meta["knn_k"]),
        use_output_softmax=bool(meta["use_output_softmax"]),
    )
    prototypes = PrototypeBank(
        cluster_prototypes=arrays["cluster_prototypes"],
        class_prototypes=arrays["class_prototypes"],
        alpha_u=float(meta["alpha_u"]),
        beta_u=float(meta["beta_u"]),
        alpha_a=float(meta["alpha_a"]),
        beta_a=float(meta["beta_a"]),
    )
    return model, prototypes, meta["config"]
