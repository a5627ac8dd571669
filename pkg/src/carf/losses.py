"""Training objectives: per-view BCE, weighted multi-view BCE, contrastive, total."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .diffcore import Node, Tape

PROB_CLAMP = 1e-7


@dataclass
class LossBreakdown:
    l_bce_a: float
    l_bce_b: float  # nan for single-view iterations
    l_2view: float
    l_con: float
    l_total: float
    view_weight: float
    lambda1: float
    lambda2: float
    per_view: list = field(default_factory=list)
    views: tuple = ()
    grad_norm: float = float("nan")

    def csv_row(self, iteration: int) -> list:
        return [iteration, self.l_bce_a, self.l_bce_b, self.l_2view, self.l_con, self.l_total, self.grad_norm]


CSV_HEADER = ["iter", "l_bce_a", "l_bce_b", "l_2view", "l_con", "l_total", "grad_norm"]


def bce(tape: Tape, prob: Node, gt_mask, reduction: str = "mean") -> Node:
    """BCE between a probability map and a binary mask (probabilities clamped)."""
    return tape.bce(prob, np.asarray(gt_mask, dtype=np.float64), clamp=PROB_CLAMP, reduction=reduction)


def bce_value(prob, gt_mask, reduction: str = "mean") -> float:
    tape = Tape()
    return float(bce(tape, tape.const(prob), gt_mask, reduction).value)


def view_weights(num_views: int, alpha: float) -> list:
    """``[alpha, 1 - alpha]`` for two views, uniform for any other count."""
    if num_views == 2:
        if not (0.0 <= alpha <= 1.0):
            raise ValueError("view weight alpha must lie in [0, 1]")
        return [alpha, 1.0 - alpha]
    return [1.0 / num_views] * num_views


def two_view_loss(l_a, l_b, alpha: float):
    """``alpha * l_a + (1 - alpha) * l_b``; works on floats or tape nodes via :func:`multi_view_loss`."""
    if not (0.0 <= alpha <= 1.0):
        raise ValueError("view weight alpha must lie in [0, 1]")
    return alpha * l_a + (1.0 - alpha) * l_b


def multi_view_loss(tape: Tape, per_view: Sequence[Node], alpha: float = 0.5) -> Node:
    return tape.linear_combination(per_view, view_weights(len(per_view), alpha))


def contrastive_loss(tape: Tape, F: Node, selected, e_t: np.ndarray, batch_sentences: Sequence[np.ndarray] | None,
                     t_con: float = 0.07, target_index: int | None = None) -> Node:
    """Gaussian-text contrastive loss on the mean feature of ``selected``.

    ``f_g`` is the L2-normalized mean of the selected rows of ``F``.  With two
    or more sentences in the batch: InfoNCE
    ``-log softmax_t'(cos(f_g, e_t') / T)[t]``; otherwise ``1 - cos(f_g, e_t)``.
    ``target_index`` locates ``e_t`` in the batch (found by equality if None).
    """
    selected = np.asarray(selected)
    if selected.size == 0:
        raise ValueError("contrastive_loss: empty selection")
    f_g = tape.l2_normalize(tape.gather_mean_rows(F, selected))
    e_t = np.asarray(e_t, dtype=np.float64)
    e_t_unit = e_t / np.linalg.norm(e_t)
    if batch_sentences is None or len(batch_sentences) < 2:
        cos = tape.dot(f_g, tape.const(e_t_unit))
        return _one_minus(tape, cos)
    B = np.stack([np.asarray(e, dtype=np.float64) / np.linalg.norm(e) for e in batch_sentences])
    if target_index is None:
        hits = [k for k in range(len(B)) if np.array_equal(B[k], e_t_unit)]
        if not hits:
            raise ValueError("contrastive_loss: e_t is not in the batch")
        target_index = hits[0]
    logits = tape.scale(tape.matmul(tape.const(B), f_g), 1.0 / t_con)
    return tape.cross_entropy(logits, int(target_index))


def _one_minus(tape: Tape, x: Node) -> Node:
    return tape.add_scalar(tape.scale(x, -1.0), tape.const(1.0))


def contrastive_value(F, selected, e_t, batch_sentences=None, t_con: float = 0.07, target_index=None) -> float:
    tape = Tape()
    return float(contrastive_loss(tape, tape.const(F), selected, e_t, batch_sentences, t_con, target_index).value)


def total_loss(l_2view, l_con, lambda1: float = 1.0, lambda2: float = 1.0):
    if lambda1 < 0 or lambda2 < 0:
        raise ValueError("loss weights must be >= 0")
    return lambda1 * l_2view + lambda2 * l_con
