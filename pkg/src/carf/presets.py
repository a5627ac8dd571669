"""Desk-scale smoke setup: a three-object scene, a camera ring and toy queries."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .camera import ring_cameras
from .eval import gt_mask_from_context
from .rasterizer import render_context
from .referring import toy_embed
from .scene import ClusterSpec, SceneSpec, generate_scene
from .supervision import corrupt_view_masks, select_pseudo_mask, synth_candidates

# child-stream tags for np.random.default_rng([seed, tag, ...])
STREAM_SCENE = 0
STREAM_MODEL = 1
STREAM_VIEWS = 2
STREAM_CANDIDATES = 3
STREAM_CORRUPTION = 4

SEVERITY_LEVELS = {"mild": 1, "moderate": 3, "severe": 6}

SMOKE_QUERIES = (
    (("red", "mug"), 0),
    (("green", "plant"), 1),
    (("blue", "book"), 2),
)


def smoke_scene_spec(per_cluster: int = 100, background: int = 200) -> SceneSpec:
    clusters = [
        ClusterSpec(center=(0.55, 0.0, 0.3), extent=0.14, count=per_cluster, color=(0.9, 0.15, 0.1)),
        ClusterSpec(center=(-0.3, 0.48, 0.3), extent=0.14, count=per_cluster, color=(0.15, 0.8, 0.2)),
        ClusterSpec(center=(-0.3, -0.48, 0.3), extent=0.14, count=per_cluster, color=(0.1, 0.2, 0.9)),
    ]
    return SceneSpec(clusters=clusters, background_count=background, floor_radius=3.0, floor_z=0.0,
                     floor_scale=0.3)


def smoke_cameras(n: int = 8, size: int = 64, radius: float = 2.6, height: float = 2.5, fx: float = 120.0):
    return ring_cameras(n, radius, height, target=(0.0, 0.0, 0.2), fx=fx, width=size)


def split_ring(cams):
    """Alternate ring positions: even indices train, odd indices test."""
    return list(cams[0::2]), list(cams[1::2])


def smoke_queries(d: int):
    return [toy_embed(tokens, d, target_label=label, text=" ".join(tokens), id="_".join(tokens))
            for tokens, label in SMOKE_QUERIES]


def pseudo_masks(scene, cams, queries, seed: int, contexts=None, K: int = 5, noise: float = 1.0,
                 corruption_fraction: float = 0.0, severity: int = 0):
    """Training masks keyed ``(query_index, view_index)``.

    Label ground truth, then K noisy candidates and pseudo-mask selection,
    then the optional view-corruption injector applied per query.
    Returns ``(masks, corruption_reports)``.
    """
    if contexts is None:
        contexts = [render_context(c, scene) for c in cams]
    rng_c = np.random.default_rng([seed, STREAM_CANDIDATES])
    rng_x = np.random.default_rng([seed, STREAM_CORRUPTION])
    masks, reports = {}, []
    for qi, q in enumerate(queries):
        per_view = []
        for ctx in contexts:
            gt = gt_mask_from_context(ctx, scene, q.target_label)
            if K > 0 and gt.any():
                per_view.append(select_pseudo_mask(synth_candidates(gt, K, noise, rng_c)).mask)
            else:
                per_view.append(gt)
        if corruption_fraction > 0 and severity > 0:
            per_view, rep = corrupt_view_masks(per_view, corruption_fraction, severity, rng_x)
            reports.append(rep)
        for vi, m in enumerate(per_view):
            masks[(qi, vi)] = np.asarray(m, dtype=np.uint8)
    return masks, reports


@dataclass
class SmokeSetup:
    scene: object
    train_cams: list
    test_cams: list
    queries: list
    masks: dict
    train_contexts: list
    test_contexts: list
    corruption: list


def smoke_setup(seed: int = 0, d: int = 16, *, size: int = 64, noise: float = 1.0, K: int = 5,
                corruption_fraction: float = 0.0, severity: int = 0, threads: int = 1) -> SmokeSetup:
    scene = generate_scene(smoke_scene_spec(), seed)
    train_cams, test_cams = split_ring(smoke_cameras(size=size))
    queries = smoke_queries(d)
    train_ctx = [render_context(c, scene, threads=threads) for c in train_cams]
    test_ctx = [render_context(c, scene, threads=threads) for c in test_cams]
    masks, reports = pseudo_masks(scene, train_cams, queries, seed, train_ctx, K, noise,
                                  corruption_fraction, severity)
    return SmokeSetup(scene, train_cams, test_cams, queries, masks, train_ctx, test_ctx, reports)
