"""Forward pass shared by training and evaluation: scores per view, then masks."""

from __future__ import annotations

import numpy as np

from .diffcore import Node, Tape
from .referring import QueryEmbedding, camera_feature, cross_interaction, score_gaussians

CAM_FUSIONS = ("additive", "post", "language")


def view_scores(tape: Tape, P: dict, mu_n: np.ndarray, query: QueryEmbedding, descs, gfce_enabled: bool = True,
                cam_fusion: str = "additive"):
    """Per-view score nodes for one query.

    ``P`` maps parameter names to tape nodes.  Returns ``(G_per_view, m_per_view)``.

    cam_fusion:
      additive  ``m_i = (g_i + f_cam) . sum_j e_j``  (default)
      post      ``m_i = g_i . sum_j e_j + sum_k f_cam[k]``  (camera added after similarity)
      language  ``e_j <- e_j + f_cam`` before cross-interaction and scoring
    """
    if cam_fusion not in CAM_FUSIONS:
        raise ValueError(f"unknown cam_fusion {cam_fusion!r}")
    mu_node = tape.const(mu_n)
    E = tape.const(query.E)

    def interact(E_node):
        return cross_interaction(tape, P["F"], mu_node, E_node, P["Wq"], P["Wk"], P["Wv"], P["Wp"])

    def fcam(desc):
        return camera_feature(tape, desc, P["cam_W1"], P["cam_b1"], P["cam_W2"], P["cam_b2"])

    if not gfce_enabled:
        # one score node per view, so gradient accumulation order matches the camera-aware path
        G = interact(E)
        word_sum = tape.const(query.word_sum)
        return [G] * len(descs), [score_gaussians(tape, G, None, word_sum, gfce_enabled=False) for _ in descs]

    Gs, ms = [], []
    if cam_fusion == "language":
        ones = tape.const(np.ones(query.E.shape[0]))
        for desc in descs:
            E_v = tape.add_row(E, fcam(desc))
            G = interact(E_v)
            Gs.append(G)
            ms.append(tape.matmul(G, tape.matmul(tape.transpose(E_v), ones)))
        return Gs, ms

    G = interact(E)
    word_sum = tape.const(query.word_sum)
    for desc in descs:
        f = fcam(desc)
        if cam_fusion == "additive":
            Gs.append(tape.add_row(G, f))
            ms.append(score_gaussians(tape, G, f, word_sum, gfce_enabled=True))
        else:
            Gs.append(G)
            ms.append(tape.add_scalar(tape.matmul(G, word_sum), tape.sum(f)))
    return Gs, ms


def render_prob(tape: Tape, P: dict, m: Node, ctx) -> tuple:
    """Composite scores into a view and squash. Returns ``(logit, prob)`` flat nodes."""
    logit = tape.composite(ctx, m)
    return logit, tape.sigmoid(tape.scalar_affine(logit, P["s_out"], P["b_out"]))
