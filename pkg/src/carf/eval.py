"""Ground-truth masks, IoU/mIoU and evaluation reports."""

from __future__ import annotations

import csv
import hashlib
import json
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .camera import camera_descriptor
from .diffcore import Tape
from .pipeline import render_prob, view_scores
from .rasterizer import CompositeContext, render_context
from .referring import ReferringModel
from .scene import GaussianScene


class LabelError(ValueError):
    pass


def gt_mask_from_context(ctx: CompositeContext, scene: GaussianScene, target_label: int,
                         coverage_threshold: float = 0.5) -> np.ndarray:
    labels = scene.labels
    if not np.any(labels == target_label):
        raise LabelError(f"label {target_label} is not present in the scene")
    coverage = ctx.apply((labels == target_label).astype(np.float64))
    return (coverage >= coverage_threshold).reshape(ctx.height, ctx.width).astype(np.uint8)


def gt_mask(cam, scene: GaussianScene, target_label: int, coverage_threshold: float = 0.5) -> np.ndarray:
    """Binary mask of pixels whose composited label coverage reaches the threshold."""
    return gt_mask_from_context(render_context(cam, scene), scene, target_label, coverage_threshold)


def iou(pred, gt) -> float:
    """Intersection over union of two binary masks; both empty gives 1.0."""
    pred = np.asarray(pred, dtype=bool)
    gt = np.asarray(gt, dtype=bool)
    if pred.shape != gt.shape:
        raise ValueError(f"mask size mismatch: {pred.shape} vs {gt.shape}")
    union = np.count_nonzero(pred | gt)
    if union == 0:
        return 1.0
    return np.count_nonzero(pred & gt) / union


@dataclass
class EvalReport:
    iou_table: np.ndarray  # (num_queries, num_views)
    query_ids: list
    view_ids: list
    render_ms: list  # per view
    config_hash: str = ""
    threshold: float = 0.5
    probs: dict = field(default_factory=dict, repr=False)  # (q, v) -> prob map, if kept

    @property
    def miou(self) -> float:
        return float(np.mean(self.iou_table))

    @property
    def iou_dispersion(self) -> list:
        return [float(row.max() - row.min()) for row in self.iou_table]

    def to_dict(self) -> dict:
        return {
            "miou": self.miou,
            "iou": [[float(x) for x in row] for row in self.iou_table],
            "query_ids": list(self.query_ids),
            "view_ids": list(self.view_ids),
            "iou_dispersion": self.iou_dispersion,
            "render_ms": [float(x) for x in self.render_ms],
            "threshold": self.threshold,
            "config_hash": self.config_hash,
        }

    def write_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1) + "\n")

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["query", "view", "iou"])
            for qi, qid in enumerate(self.query_ids):
                for vi, vid in enumerate(self.view_ids):
                    w.writerow([qid, vid, repr(float(self.iou_table[qi, vi]))])


def binarize(prob, threshold: float = 0.5) -> np.ndarray:
    """Strictly above ``threshold``; an empty pixel (logit 0 under squash (1, 0)) stays negative."""
    return (np.asarray(prob) > threshold).astype(np.uint8)


def config_hash(cfg) -> str:
    blob = json.dumps(cfg, sort_keys=True, default=str).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()[:16]


def predict_masks(model: ReferringModel, scene: GaussianScene, cams, query, contexts: Sequence[CompositeContext],
                  gfce_enabled: bool = True, cam_fusion: str = "additive") -> list:
    """Probability maps (H, W) of one query in every view."""
    tape = Tape()
    P = {k: tape.const(p.value) for k, p in model.params.items()}
    descs = [camera_descriptor(c).c_full for c in cams]
    _, ms = view_scores(tape, P, scene.normalized_mu(), query, descs, gfce_enabled, cam_fusion)
    out = []
    for m, ctx in zip(ms, contexts):
        _, prob = render_prob(tape, P, m, ctx)
        out.append(prob.value.reshape(ctx.height, ctx.width))
    return out


def evaluate(model: ReferringModel, scene: GaussianScene, cams_test, queries, threshold: float = 0.5, *,
             gfce_enabled: bool = True, cam_fusion: str = "additive", contexts=None, gt_masks=None,
             cfg_for_hash=None, keep_probs: bool = False) -> EvalReport:
    """IoU of the thresholded prediction against label ground truth for every (query, view)."""
    t0 = time.perf_counter()
    if contexts is None:
        contexts = [render_context(c, scene) for c in cams_test]
    raster_ms = (time.perf_counter() - t0) * 1000.0 / max(1, len(cams_test))
    table = np.zeros((len(queries), len(cams_test)))
    render_ms = np.zeros(len(cams_test))
    probs = {}
    for qi, q in enumerate(queries):
        t1 = time.perf_counter()
        prob_maps = predict_masks(model, scene, cams_test, q, contexts, gfce_enabled, cam_fusion)
        per_view_ms = (time.perf_counter() - t1) * 1000.0 / max(1, len(cams_test))
        for vi, ctx in enumerate(contexts):
            gt = gt_masks[(qi, vi)] if gt_masks is not None else gt_mask_from_context(ctx, scene, q.target_label)
            table[qi, vi] = iou(binarize(prob_maps[vi], threshold), gt)
            render_ms[vi] += per_view_ms
            if keep_probs:
                probs[(qi, vi)] = prob_maps[vi]
    render_ms = render_ms / max(1, len(queries)) + raster_ms
    return EvalReport(iou_table=table, query_ids=[q.id or str(k) for k, q in enumerate(queries)],
                      view_ids=list(range(len(cams_test))), render_ms=render_ms.tolist(),
                      config_hash=config_hash(cfg_for_hash) if cfg_for_hash is not None else "",
                      threshold=threshold, probs=probs)


def write_curve_csv(path, rows) -> None:
    """Plot data: ``(iteration, miou)`` pairs."""
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["iteration", "miou"])
        for it, m in rows:
            w.writerow([int(it), repr(float(m))])
