"""Class-aware batch construction: samplers, difficulty, curriculum schedule.

Positive candidates come from the largest cluster dominated by the anchor's
class (farthest first); negative candidates come from the nearest cluster
dominated by a different class (closest first). Ties always break toward the
smaller sample index, and short candidate lists are returned as-is.

The curriculum keeps the penalty-coefficient identity

    alpha_i*lambda_e + (1-alpha_i)*(alpha_f*lambda_m + (1-alpha_f)*lambda_h) = 1

as a maintained invariant by rescaling the lambda vector after every change.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterator

import numpy as np

from .crm import RelationGraph
from .data_io import FeatureSet
from .errors import ContractError, SamplerError

EUCLIDEAN = "euclidean"
COSINE = "cosine"

PHASE_FULL_EASY = "full-easy"
PHASE_DECAY_I = "decaying-alpha-i"
PHASE_DECAY_F = "decaying-alpha-f"

LOSS_CONVERGED_BELOW = 0.01
LOSS_DELTA_BELOW = 1e-4


class Difficulty(Enum):
    EASY = "easy"
    MEDIUM = "medium"
    HARD = "hard"


@dataclass
class SamplerConfig:
    n_pos: int
    m_neg: int
    metric: str = EUCLIDEAN

    def validate(self) -> "SamplerConfig":
        if self.n_pos < 1 or self.m_neg < 1:
            raise ContractError("n_pos and m_neg must be >= 1")
        if self.metric not in (EUCLIDEAN, COSINE):
            raise ContractError(f"unknown sampler metric {self.metric!r}")
        return self


def phi_distance(metric: str, x: np.ndarray, y: np.ndarray) -> float:
    """Euclidean distance, or cosine distance 1 - cos(x, y)."""
    if metric == EUCLIDEAN:
        return float(np.linalg.norm(x - y))
    if metric == COSINE:
        nx, ny = np.linalg.norm(x), np.linalg.norm(y)
        if nx == 0.0 or ny == 0.0:
            return 0.0 if nx == ny else 1.0
        return float(1.0 - np.dot(x, y) / (nx * ny))
    raise ContractError(f"unknown sampler metric {metric!r}")


def _phi_rows(metric: str, X: np.ndarray, x: np.ndarray) -> np.ndarray:
    """``phi_distance`` from ``x`` to every row of ``X``."""
    if metric == EUCLIDEAN:
        return np.linalg.norm(X - x, axis=1)
    if metric == COSINE:
        nx = np.linalg.norm(x)
        norms = np.linalg.norm(X, axis=1)
        if nx == 0.0:
            return np.where(norms == 0.0, 0.0, 1.0)
        with np.errstate(invalid="ignore", divide="ignore"):
            cos = (X @ x) / (norms * nx)
        return np.where(norms == 0.0, 1.0, 1.0 - cos)
    raise ContractError(f"unknown sampler metric {metric!r}")


def _positive_cluster(graph: RelationGraph, cls: int):
    """Largest cluster dominated by ``cls``; falls back to the cluster holding
    the most samples of the class when none is dominated."""
    dominated = graph.dominant_by_class.get(cls)
    by_id = {c.id: c for c in graph.model.clusters}
    if dominated:
        return by_id[dominated[0]]
    best = None
    for cluster in graph.model.clusters:
        count = int(cluster.class_counts[cls])
        if count > 0 and (best is None or count > int(best.class_counts[cls])):
            best = cluster
    return best


def sample_positives(
    graph: RelationGraph, fs: FeatureSet, i: int, n: int, metric: str = EUCLIDEAN
) -> list[int]:
    """Top-n same-class samples by decreasing distance from the anchor."""
    if n < 1:
        raise ContractError("n must be >= 1")
    cls = int(fs.labels[i])
    cluster = _positive_cluster(graph, cls)
    candidates = np.asarray(
        [j for j in cluster.members if fs.labels[j] == cls and j != i], dtype=np.intp
    )
    if candidates.size == 0:
        if int(np.sum(fs.labels == cls)) <= 1:
            raise SamplerError(f"class {cls} has no candidate positives anywhere")
        return []
    dists = _phi_rows(metric, fs.features[candidates], fs.features[i])
    order = np.lexsort((candidates, -dists))  # distance desc, index asc
    return candidates[order[:n]].tolist()


def sample_negatives(
    graph: RelationGraph, fs: FeatureSet, i: int, m: int, metric: str = EUCLIDEAN
) -> list[int]:
    """Top-m different-class samples by increasing distance from the anchor.

    Candidates are the dominating class's members in the nearest cluster
    dominated by a class other than the anchor's. When no such cluster
    exists, the nearest cluster containing any other-class sample supplies
    its majority other-class members instead.
    """
    if m < 1:
        raise ContractError("m must be >= 1")
    cls = int(fs.labels[i])
    x = fs.features[i]

    dominated_other = [
        cid
        for cid, dom in graph.dominance.items()
        if dom is not None and dom.cls != cls
    ]
    by_id = {c.id: c for c in graph.model.clusters}
    if dominated_other:
        nearest = min(
            dominated_other,
            key=lambda cid: (phi_distance(metric, x, by_id[cid].prototype), cid),
        )
        target_cls = graph.dominance[nearest].cls
        candidates = [j for j in by_id[nearest].members if fs.labels[j] == target_cls]
    else:
        with_other = [
            c for c in graph.model.clusters if int(c.class_counts[cls]) < c.total
        ]
        if not with_other:
            raise SamplerError(f"no sample outside class {cls} exists")
        nearest_c = min(
            with_other,
            key=lambda c: (phi_distance(metric, x, c.prototype), c.id),
        )
        counts = nearest_c.class_counts.copy()
        counts[cls] = -1
        target_cls = int(np.argmax(counts))
        candidates = [j for j in nearest_c.members if fs.labels[j] == target_cls]

    cand = np.asarray(candidates, dtype=np.intp)
    dists = _phi_rows(metric, fs.features[cand], x)
    order = np.lexsort((cand, dists))  # distance asc, index asc
    return cand[order[:m]].tolist()


def difficulty_of(graph: RelationGraph, i: int, rho1: float) -> Difficulty:
    """Easy/medium/hard split by the anchor cluster's class representativeness."""
    if not (0.5 < rho1 <= 1.0):
        raise ContractError(f"rho1 must lie in (0.5, 1], got {rho1}")
    cluster = graph.model.cluster_by_id(graph.assignment[i])
    ratios = cluster.class_counts / cluster.total
    cls = int(graph.labels[i])
    if ratios[cls] > rho1:
        return Difficulty.EASY
    others = np.delete(ratios, cls)
    if others.size and float(np.max(others)) > rho1:
        return Difficulty.HARD
    return Difficulty.MEDIUM


# ---------------------------------------------------------------------------
# curriculum schedule
# ---------------------------------------------------------------------------


@dataclass
class CurriculumState:
    alpha_i: float = 0.95
    alpha_f: float = 0.95
    lambda_e: float = 1.0
    lambda_m: float = 1.0
    lambda_h: float = 1.0
    decay_step: float = 0.05
    alpha_floor: float = 0.2
    phase: str = PHASE_FULL_EASY
    loss_history: list[float] = field(default_factory=list)

    def __post_init__(self):
        if not (0.0 <= self.alpha_i <= 1.0 and 0.0 <= self.alpha_f <= 1.0):
            raise ContractError("alpha_i and alpha_f must lie in [0, 1]")
        if min(self.lambda_e, self.lambda_m, self.lambda_h) < 0.0:
            raise ContractError("penalty coefficients must be >= 0")
        self._rescale()

    def mixture(self) -> float:
        return self.alpha_i * self.lambda_e + (1.0 - self.alpha_i) * (
            self.alpha_f * self.lambda_m + (1.0 - self.alpha_f) * self.lambda_h
        )

    def _rescale(self) -> None:
        m = self.mixture()
        if m <= 0.0:
            raise ContractError("degenerate curriculum: the coefficient mixture is 0")
        self.lambda_e /= m
        self.lambda_m /= m
        self.lambda_h /= m

    def identity_residual(self) -> float:
        return abs(self.mixture() - 1.0)


def curriculum_weight(state: CurriculumState, d: Difficulty) -> float:
    """Per-difficulty loss weight; the three weights sum to 1."""
    if d is Difficulty.EASY:
        return state.alpha_i * state.lambda_e
    if d is Difficulty.MEDIUM:
        return (1.0 - state.alpha_i) * state.alpha_f * state.lambda_m
    return (1.0 - state.alpha_i) * (1.0 - state.alpha_f) * state.lambda_h


def update_curriculum(state: CurriculumState, epoch_mean_loss: float) -> CurriculumState:
    """Record an epoch's mean loss and advance the decay schedule.

    Convergence means the last loss dropped below 0.01 while the difference
    to the previous epoch is below 1e-4 in magnitude. The first convergence
    event switches the phase; decay starts on the following update.
    """
    if not math.isfinite(epoch_mean_loss):
        raise ContractError("epoch_mean_loss must be finite")
    state.loss_history.append(float(epoch_mean_loss))
    hist = state.loss_history
    converged = (
        len(hist) >= 2
        and hist[-1] < LOSS_CONVERGED_BELOW
        and abs(hist[-1] - hist[-2]) < LOSS_DELTA_BELOW
    )

    transitioned = False
    if state.phase == PHASE_FULL_EASY and converged:
        state.phase = PHASE_DECAY_I
        transitioned = True
    elif state.phase == PHASE_DECAY_I and converged:
        state.phase = PHASE_DECAY_F
        transitioned = True

    if not transitioned:
        if state.phase == PHASE_DECAY_I:
            state.alpha_i = max(state.alpha_floor, state.alpha_i - state.decay_step)
        elif state.phase == PHASE_DECAY_F:
            state.alpha_i = max(state.alpha_floor, state.alpha_i - state.decay_step)
            state.alpha_f = max(state.alpha_floor, state.alpha_f - state.decay_step)
    state._rescale()
    return state


def curriculum_snapshot(state: CurriculumState) -> dict:
    return {
        "alpha_i": state.alpha_i,
        "alpha_f": state.alpha_f,
        "lambda_e": state.lambda_e,
        "lambda_m": state.lambda_m,
        "lambda_h": state.lambda_h,
        "phase": state.phase,
    }


# ---------------------------------------------------------------------------
# batches
# ---------------------------------------------------------------------------


@dataclass
class Batch:
    anchors: np.ndarray
    positives: list[list[int]]
    negatives: list[list[int]]
    difficulties: list[Difficulty]
    weights: np.ndarray


def build_batch(
    fs: FeatureSet,
    graph: RelationGraph,
    cfg: SamplerConfig,
    state: CurriculumState,
    anchors: np.ndarray,
    rho1: float,
) -> Batch:
    cfg.validate()
    positives, negatives, diffs, weights = [], [], [], []
    for i in anchors:
        positives.append(sample_positives(graph, fs, int(i), cfg.n_pos, cfg.metric))
        negatives.append(sample_negatives(graph, fs, int(i), cfg.m_neg, cfg.metric))
        d = difficulty_of(graph, int(i), rho1)
        diffs.append(d)
        weights.append(curriculum_weight(state, d))
    return Batch(
        anchors=np.asarray(anchors, dtype=np.int64),
        positives=positives,
        negatives=negatives,
        difficulties=diffs,
        weights=np.asarray(weights, dtype=np.float64),
    )


def epoch_batches(
    fs: FeatureSet,
    graph: RelationGraph,
    cfg: SamplerConfig,
    state: CurriculumState,
    rho1: float,
    batch_size: int,
    rng: np.random.Generator,
) -> Iterator[Batch]:
    """Seed-shuffled anchors without replacement; the final batch may be short."""
    if batch_size < 1 or batch_size > fs.n:
        raise ContractError("batch_size must lie in [1, n]")
    order = rng.permutation(fs.n)
    for start in range(0, fs.n, batch_size):
        yield build_batch(fs, graph, cfg, state, order[start : start + batch_size], rho1)
