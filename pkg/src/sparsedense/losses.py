"""Training objectives.

The total objective combines three bidirectional InfoNCE terms (dense,
sparse, integrated scores), a self-distillation term in which the
integrated score teaches the dense and sparse scores, and L1 penalties
on the term importances with a quadratic warm-up on their weights:

    total = sum_k lambda_k * contrastive(S_k)
          + (distill(S_inter -> S_dense) + distill(S_inter -> S_sparse)) / 2
          + eta_text * mean_l1(Z_text) + eta_image * mean_l1(Z_image)

The distillation teacher is detached: its value feeds the loss but no
gradient flows back through it (see grad.backward).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ShapeError
from .model import SparseVector
from .scoring import ScoreTriple


@dataclass
class LossWeights:
    """Contrastive term weights for the dense, sparse, and integrated scores."""

    dense: float
    sparse: float
    inter: float

    def __post_init__(self):
        if min(self.dense, self.sparse, self.inter) < 0:
            raise ValueError("loss weights must be non-negative")
        if self.dense + self.sparse + self.inter <= 0:
            raise ValueError("at least one loss weight must be positive")


@dataclass
class SparsitySchedule:
    """Quadratic warm-up of the L1 weights: eta(step) = eta_max * min(1, (step/T)^2)."""

    l1_max_text: float
    l1_max_image: float
    warmup_steps: int

    def __post_init__(self):
        if self.l1_max_text < 0 or self.l1_max_image < 0:
            raise ValueError("l1 maxima must be non-negative")
        if self.warmup_steps < 1:
            raise ValueError("warmup_steps must be >= 1")


@dataclass
class LossBreakdown:
    contrastive_dense: float
    contrastive_sparse: float
    contrastive_inter: float
    contrastive_combined: float
    distill_dense: float
    distill_sparse: float
    distill_combined: float
    l1_text: float
    l1_image: float
    l1_weight_text: float
    l1_weight_image: float
    total: float


def _logsumexp_rows(s: np.ndarray) -> np.ndarray:
    peak = s.max(axis=1, keepdims=True)
    return (peak + np.log(np.exp(s - peak).sum(axis=1, keepdims=True)))[:, 0]


def softmax_rows(s: np.ndarray) -> np.ndarray:
    peak = s.max(axis=1, keepdims=True)
    e = np.exp(s - peak)
    return e / e.sum(axis=1, keepdims=True)


def infonce_directional(scores: np.ndarray, direction: str) -> float:
    """InfoNCE with the matched pair on the diagonal.

    direction="rows" treats each row as a query over column candidates
    (text-to-image); "cols" transposes (image-to-text).
    """
    scores = np.asarray(scores, dtype=np.float64)
    if scores.ndim != 2 or scores.shape[0] != scores.shape[1]:
        raise ShapeError("InfoNCE needs a square score matrix")
    if direction == "cols":
        scores = scores.T
    elif direction != "rows":
        raise ValueError("direction must be 'rows' or 'cols'")
    lse = _logsumexp_rows(scores)
    return float(np.mean(lse - np.diag(scores)))


def contrastive_bidirectional(scores: np.ndarray) -> float:
    """Average of the two InfoNCE directions."""
    return 0.5 * (infonce_directional(scores, "rows")
                  + infonce_directional(scores, "cols"))


def combined_contrastive(triple: ScoreTriple, weights: LossWeights) -> float:
    return (weights.dense * contrastive_bidirectional(triple.s_dense)
            + weights.sparse * contrastive_bidirectional(triple.s_sparse)
            + weights.inter * contrastive_bidirectional(triple.s_inter))


def _cross_entropy_rows(teacher: np.ndarray, student: np.ndarray) -> float:
    """Mean over rows of H(softmax(teacher row), softmax(student row))."""
    p = softmax_rows(teacher)
    log_q = student - _logsumexp_rows(student)[:, None]
    return float(np.mean(-(p * log_q).sum(axis=1)))


def distill_loss(teacher: np.ndarray, student: np.ndarray) -> float:
    """Soft cross-entropy from teacher to student scores.

    Applied along both retrieval directions (row-wise and column-wise
    softmax) and averaged.  The caller is responsible for detaching the
    teacher; this function only computes the value.
    """
    teacher = np.asarray(teacher, dtype=np.float64)
    student = np.asarray(student, dtype=np.float64)
    if teacher.shape != student.shape or teacher.ndim != 2:
        raise ShapeError("teacher and student must be matching matrices")
    return 0.5 * (_cross_entropy_rows(teacher, student)
                  + _cross_entropy_rows(teacher.T, student.T))


def total_distill(triple: ScoreTriple) -> float:
    """Average distillation of the integrated score into both students."""
    return 0.5 * (distill_loss(triple.s_inter, triple.s_dense)
                  + distill_loss(triple.s_inter, triple.s_sparse))


def l1_penalty(vectors: list[SparseVector]) -> float:
    """Batch mean of the term-importance sums (weights are non-negative)."""
    if not vectors:
        return 0.0
    return float(np.mean([v.l1() for v in vectors]))


def l1_mean(z_matrix: np.ndarray) -> float:
    """Dense-matrix form of :func:`l1_penalty`."""
    if z_matrix.size == 0:
        return 0.0
    return float(z_matrix.sum(axis=1).mean())


def l1_weights_at(step: int, schedule: SparsitySchedule) -> tuple[float, float]:
    """(eta_text, eta_image) after quadratic warm-up at an optimizer step."""
    if step < 0:
        raise ValueError("step must be non-negative")
    scale = min(1.0, (step / schedule.warmup_steps) ** 2)
    return schedule.l1_max_text * scale, schedule.l1_max_image * scale


def build_breakdown(triple: ScoreTriple, l1_text: float, l1_image: float,
                    weights: LossWeights, eta_text: float, eta_image: float,
                    self_distillation: bool = True) -> LossBreakdown:
    """Assemble every loss term from precomputed score matrices."""
    c_dense = contrastive_bidirectional(triple.s_dense)
    c_sparse = contrastive_bidirectional(triple.s_sparse)
    c_inter = contrastive_bidirectional(triple.s_inter)
    combined = weights.dense * c_dense + weights.sparse * c_sparse + weights.inter * c_inter
    if self_distillation:
        d_dense = distill_loss(triple.s_inter, triple.s_dense)
        d_sparse = distill_loss(triple.s_inter, triple.s_sparse)
        d_combined = 0.5 * (d_dense + d_sparse)
    else:
        d_dense = d_sparse = d_combined = 0.0
    total = combined + d_combined + eta_text * l1_text + eta_image * l1_image
    return LossBreakdown(
        contrastive_dense=c_dense,
        contrastive_sparse=c_sparse,
        contrastive_inter=c_inter,
        contrastive_combined=combined,
        distill_dense=d_dense,
        distill_sparse=d_sparse,
        distill_combined=d_combined,
        l1_text=l1_text,
        l1_image=l1_image,
        l1_weight_text=eta_text,
        l1_weight_image=eta_image,
        total=total,
    )


def total_loss(triple: ScoreTriple, z_text: list[SparseVector],
               z_image: list[SparseVector], weights: LossWeights,
               schedule: SparsitySchedule, step: int,
               self_distillation: bool = True) -> LossBreakdown:
    """Full objective at a given optimizer step."""
    eta_text, eta_image = l1_weights_at(step, schedule)
    return build_breakdown(triple, l1_penalty(z_text), l1_penalty(z_image),
                           weights, eta_text, eta_image, self_distillation)
