"""Hand-derived reverse-mode gradients for the fixed training graph.

The graph is small and static (final layers -> shared head -> sparse
activation -> score matrices -> objective), so each local gradient is
written out explicitly rather than going through a tape.  That keeps
the one non-obvious piece auditable: the distillation teacher is the
integrated score, and no gradient flows through the teacher slot, only
through the student score matrices and the integrated score's own
contrastive term.

Gradients with respect to a square score matrix S (rows = texts):

  * bidirectional InfoNCE: (P_row + P_col - 2 I) / (2N), with P_row and
    P_col the row-wise and column-wise softmaxes of S;
  * distillation of teacher T into student S:
    ((Q_row - P_row) + (Q_col - P_col)) / (2N), with Q the student's
    softmaxes and P the (constant) teacher's.

Everything runs in float64; penultimate inputs receive no gradient.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import NumericError, ShapeError
from .losses import (
    LossBreakdown,
    LossWeights,
    build_breakdown,
    distill_loss,
    l1_mean,
    softmax_rows,
)
from .model import ParamSet, activation_matrix, final_layer_batch, gelu, gelu_grad
from .scoring import IntegrationWeights, ScoreTriple, make_triple

GradSet = dict[str, np.ndarray]


@dataclass
class LossSettings:
    """Objective configuration for a single optimizer step."""

    lambdas: LossWeights
    weights: IntegrationWeights
    eta_text: float
    eta_image: float
    self_distillation: bool = True


@dataclass
class ForwardState:
    """Every intermediate needed to run the backward pass."""

    h_text: np.ndarray
    h_image: np.ndarray
    pre_hidden_text: np.ndarray
    pre_hidden_image: np.ndarray
    hidden_text: np.ndarray
    hidden_image: np.ndarray
    logits_text: np.ndarray
    logits_image: np.ndarray
    z_text: np.ndarray
    z_image: np.ndarray
    tau: float
    triple: ScoreTriple


def forward_pass(params: ParamSet, text_penult: np.ndarray,
                 image_penult: np.ndarray, weights: IntegrationWeights) -> ForwardState:
    text_penult = np.asarray(text_penult, dtype=np.float64)
    image_penult = np.asarray(image_penult, dtype=np.float64)
    if text_penult.shape != image_penult.shape or text_penult.ndim != 2:
        raise ShapeError("batch must be two matching N x d matrices")

    h_t = final_layer_batch(text_penult, params.text_final)
    h_i = final_layer_batch(image_penult, params.image_final)
    head = params.head
    a_t = h_t @ head.hidden_weight.T + head.hidden_bias
    a_i = h_i @ head.hidden_weight.T + head.hidden_bias
    u_t = gelu(a_t)
    u_i = gelu(a_i)
    logits_t = u_t @ head.output_weight.T + head.output_bias
    logits_i = u_i @ head.output_weight.T + head.output_bias
    z_t = activation_matrix(logits_t)
    z_i = activation_matrix(logits_i)
    tau = params.tau
    s_dense = (h_t @ h_i.T) / tau
    s_sparse = z_t @ z_i.T
    return ForwardState(
        h_text=h_t, h_image=h_i,
        pre_hidden_text=a_t, pre_hidden_image=a_i,
        hidden_text=u_t, hidden_image=u_i,
        logits_text=logits_t, logits_image=logits_i,
        z_text=z_t, z_image=z_i,
        tau=tau, triple=make_triple(s_dense, s_sparse, weights),
    )


def loss_value(state: ForwardState, settings: LossSettings,
               teacher_override: np.ndarray | None = None) -> LossBreakdown:
    """Objective value from a forward state.

    teacher_override replaces the distillation teacher (only) with a
    fixed matrix; the finite-difference checker uses it to evaluate the
    same stop-gradient objective that backward differentiates.
    """
    breakdown = build_breakdown(
        state.triple, l1_mean(state.z_text), l1_mean(state.z_image),
        settings.lambdas, settings.eta_text, settings.eta_image,
        self_distillation=False,
    )
    if not settings.self_distillation:
        return breakdown
    teacher = state.triple.s_inter if teacher_override is None else teacher_override
    d_dense = distill_loss(teacher, state.triple.s_dense)
    d_sparse = distill_loss(teacher, state.triple.s_sparse)
    d_combined = 0.5 * (d_dense + d_sparse)
    breakdown.distill_dense = d_dense
    breakdown.distill_sparse = d_sparse
    breakdown.distill_combined = d_combined
    breakdown.total += d_combined
    return breakdown


def _softmax_cols(s: np.ndarray) -> np.ndarray:
    return softmax_rows(s.T).T


def _contrastive_grad(s: np.ndarray) -> np.ndarray:
    n = s.shape[0]
    eye = np.eye(n)
    return (softmax_rows(s) + _softmax_cols(s) - 2.0 * eye) / (2.0 * n)


def _distill_grad(student: np.ndarray, teacher: np.ndarray) -> np.ndarray:
    n = student.shape[0]
    row_part = softmax_rows(student) - softmax_rows(teacher)
    col_part = _softmax_cols(student) - _softmax_cols(teacher)
    return (row_part + col_part) / (2.0 * n)


def _check_finite(breakdown: LossBreakdown) -> None:
    for name, value in vars(breakdown).items():
        if not np.isfinite(value):
            raise NumericError(f"non-finite loss term: {name}")


def backward(text_penult: np.ndarray, image_penult: np.ndarray,
             params: ParamSet, settings: LossSettings) -> tuple[LossBreakdown, GradSet]:
    """Loss breakdown and gradients for every trainable tensor.

    The frozen backbone appears only through the penultimate inputs,
    which receive no gradient.
    """
    state = forward_pass(params, text_penult, image_penult, settings.weights)
    breakdown = loss_value(state, settings)
    _check_finite(breakdown)

    lam = settings.lambdas
    w = settings.weights
    n = text_penult.shape[0]
    triple = state.triple

    g_inter = lam.inter * _contrastive_grad(triple.s_inter) if lam.inter else 0.0
    g_dense = lam.dense * _contrastive_grad(triple.s_dense) if lam.dense else 0.0
    g_sparse = lam.sparse * _contrastive_grad(triple.s_sparse) if lam.sparse else 0.0
    if isinstance(g_inter, np.ndarray):
        g_dense = g_dense + w.w_dense * g_inter
        g_sparse = g_sparse + w.w_sparse * g_inter
    if settings.self_distillation:
        teacher = triple.s_inter
        g_dense = g_dense + 0.5 * _distill_grad(triple.s_dense, teacher)
        g_sparse = g_sparse + 0.5 * _distill_grad(triple.s_sparse, teacher)
    g_dense = np.asarray(g_dense, dtype=np.float64)
    g_sparse = np.asarray(g_sparse, dtype=np.float64)
    if g_dense.ndim == 0:
        g_dense = np.zeros_like(triple.s_dense)
    if g_sparse.ndim == 0:
        g_sparse = np.zeros_like(triple.s_sparse)

    # Score layer.
    d_h_text = g_dense @ state.h_image / state.tau
    d_h_image = g_dense.T @ state.h_text / state.tau
    d_log_tau = -float((g_dense * triple.s_dense).sum())
    d_z_text = g_sparse @ state.z_image
    d_z_image = g_sparse.T @ state.z_text

    # L1 penalties: mean over batch of row sums.
    if settings.eta_text:
        d_z_text = d_z_text + settings.eta_text / n
    if settings.eta_image:
        d_z_image = d_z_image + settings.eta_image / n

    # Activation z = log1p(relu(logits)); subgradient 0 at the kink.
    act_t = np.where(state.logits_text > 0, 1.0 / (1.0 + np.maximum(state.logits_text, 0.0)), 0.0)
    act_i = np.where(state.logits_image > 0, 1.0 / (1.0 + np.maximum(state.logits_image, 0.0)), 0.0)
    d_logits_t = d_z_text * act_t
    d_logits_i = d_z_image * act_i

    # Shared head accumulates over both modalities.
    head = params.head
    d_w2 = d_logits_t.T @ state.hidden_text + d_logits_i.T @ state.hidden_image
    d_b2 = d_logits_t.sum(axis=0) + d_logits_i.sum(axis=0)
    d_u_t = d_logits_t @ head.output_weight
    d_u_i = d_logits_i @ head.output_weight
    d_a_t = d_u_t * gelu_grad(state.pre_hidden_text)
    d_a_i = d_u_i * gelu_grad(state.pre_hidden_image)
    d_w1 = d_a_t.T @ state.h_text + d_a_i.T @ state.h_image
    d_b1 = d_a_t.sum(axis=0) + d_a_i.sum(axis=0)
    d_h_text = d_h_text + d_a_t @ head.hidden_weight
    d_h_image = d_h_image + d_a_i @ head.hidden_weight

    # Residual final layers: H = P + P W^T + b.
    grads: GradSet = {
        "text_final.weight": d_h_text.T @ np.asarray(text_penult, dtype=np.float64),
        "text_final.bias": d_h_text.sum(axis=0),
        "image_final.weight": d_h_image.T @ np.asarray(image_penult, dtype=np.float64),
        "image_final.bias": d_h_image.sum(axis=0),
        "head.hidden_weight": d_w1,
        "head.hidden_bias": d_b1,
        "head.output_weight": d_w2,
        "head.output_bias": d_b2,
        "log_tau": np.array(d_log_tau),
    }
    return breakdown, grads


# ---------------------------------------------------------------------------
# Finite-difference verification
# ---------------------------------------------------------------------------

@dataclass
class TensorCheck:
    name: str
    max_rel_err: float
    kink_count: int
    checked: int


@dataclass
class GradCheckReport:
    entries: list[TensorCheck]
    eps: float

    @property
    def max_rel_err(self) -> float:
        return max((e.max_rel_err for e in self.entries), default=0.0)

    def passed(self, tolerance: float = 1e-4) -> bool:
        return all(e.max_rel_err <= tolerance for e in self.entries)

    def lines(self) -> list[str]:
        return [f"{e.name}\t{e.max_rel_err:.3e}\t{e.kink_count}" for e in self.entries]


def _fd_eval(params: ParamSet, text_penult, image_penult, settings: LossSettings,
             teacher: np.ndarray | None) -> tuple[float, np.ndarray, np.ndarray]:
    state = forward_pass(params, text_penult, image_penult, settings.weights)
    total = loss_value(state, settings, teacher_override=teacher).total
    return total, state.logits_text > 0, state.logits_image > 0


def finite_diff_check(params: ParamSet, text_penult: np.ndarray,
                      image_penult: np.ndarray, settings: LossSettings,
                      eps: float = 1e-5) -> GradCheckReport:
    """Compare analytic gradients against central finite differences.

    The distillation teacher is held at its unperturbed value during
    the +/- evaluations, so the scalar being differenced is the same
    stop-gradient objective that backward differentiates.  Coordinates
    whose perturbation flips a relu branch are excluded from the error
    and reported as kinks; the relative error is
    |a - n| / max(1e-12, |a| + |n|).
    """
    base_state = forward_pass(params, text_penult, image_penult, settings.weights)
    teacher = base_state.triple.s_inter.copy() if settings.self_distillation else None
    _, grads = backward(text_penult, image_penult, params, settings)

    entries: list[TensorCheck] = []
    for name, tensor in params.named_tensors():
        analytic = grads[name]
        max_rel = 0.0
        kinks = 0
        checked = 0
        flat = tensor.reshape(-1)
        a_flat = np.asarray(analytic, dtype=np.float64).reshape(-1)
        for idx in range(flat.size):
            original = flat[idx]
            flat[idx] = original + eps
            f_plus, mask_t_plus, mask_i_plus = _fd_eval(
                params, text_penult, image_penult, settings, teacher)
            flat[idx] = original - eps
            f_minus, mask_t_minus, mask_i_minus = _fd_eval(
                params, text_penult, image_penult, settings, teacher)
            flat[idx] = original
            if (mask_t_plus != mask_t_minus).any() or (mask_i_plus != mask_i_minus).any():
                kinks += 1
                continue
            numeric = (f_plus - f_minus) / (2.0 * eps)
            a = a_flat[idx]
            rel = abs(a - numeric) / max(1e-12, abs(a) + abs(numeric))
            max_rel = max(max_rel, rel)
            checked += 1
        entries.append(TensorCheck(name=name, max_rel_err=max_rel,
                                   kink_count=kinks, checked=checked))
    return GradCheckReport(entries=entries, eps=eps)


# ---------------------------------------------------------------------------
# Optimizer
# ---------------------------------------------------------------------------

@dataclass
class OptimizerState:
    """Adaptive-moment state (first/second moments with bias correction)."""

    learning_rate: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def init_optimizer(params: ParamSet, learning_rate: float) -> OptimizerState:
    state = OptimizerState(learning_rate=learning_rate)
    for name, tensor in params.named_tensors():
        state.m[name] = np.zeros_like(tensor)
        state.v[name] = np.zeros_like(tensor)
    return state


def optimizer_step(params: ParamSet, grads: GradSet, state: OptimizerState) -> None:
    """One in-place update; zero gradients leave parameters untouched."""
    state.step += 1
    correct1 = 1.0 - state.beta1 ** state.step
    correct2 = 1.0 - state.beta2 ** state.step
    for name, tensor in params.named_tensors():
        g = grads[name]
        if g.shape != tensor.shape:
            raise ShapeError(f"gradient shape mismatch for {name}")
        m = state.m[name]
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        m_hat = m / correct1
        v_hat = v / correct2
        tensor -= state.learning_rate * m_hat / (np.sqrt(v_hat) + state.eps)
