"""Pseudo ground-truth masks: synthetic candidates, selection, corruption."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import ndimage

from .maskio import read_mask_pgm, write_mask_pgm

SEVERITY_MAX = 8


@dataclass
class MaskCandidate:
    mask: np.ndarray  # (H, W) uint8 in {0, 1}
    confidence: float

    def __post_init__(self):
        self.mask = np.asarray(self.mask).astype(np.uint8)
        if not np.all((self.mask == 0) | (self.mask == 1)):
            raise ValueError("candidate mask must be binary")
        if not (math.isfinite(self.confidence) and 0.0 <= self.confidence <= 1.0):
            raise ValueError(f"confidence {self.confidence} outside [0, 1]")


@dataclass
class PseudoMask:
    mask: np.ndarray
    source_index: int
    score: float
    scores: list = field(default_factory=list)
    empty_pair_used: bool = False  # IoU(empty, empty) := 1 was needed


def mask_iou(a, b) -> float:
    """|a & b| / |a | b|; two empty masks count as identical (1.0)."""
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    if a.shape != b.shape:
        raise ValueError(f"mask size mismatch: {a.shape} vs {b.shape}")
    union = int(np.count_nonzero(a | b))
    if union == 0:
        return 1.0
    return int(np.count_nonzero(a & b)) / union


def _disk(radius: int) -> np.ndarray:
    r = int(radius)
    yy, xx = np.mgrid[-r:r + 1, -r:r + 1]
    return (xx * xx + yy * yy) <= r * r


def morph(mask, radius: int, dilate: bool) -> np.ndarray:
    mask = np.asarray(mask, dtype=bool)
    if radius <= 0:
        return mask.astype(np.uint8)
    op = ndimage.binary_dilation if dilate else ndimage.binary_erosion
    return op(mask, structure=_disk(radius)).astype(np.uint8)


def synth_candidates(gt_mask, K: int, noise: float, rng: np.random.Generator) -> list:
    """``K`` noisy copies of ``gt_mask`` with IoU-correlated confidences.

    Each candidate gets a dilation or erosion of radius ``round(|N(0, noise)|)``
    plus ``Poisson(noise / 2)`` disk blobs inserted or carved out.  Confidence
    is ``clip(IoU(candidate, gt) + N(0, 0.05 * noise), 0, 1)``.
    """
    gt = np.asarray(gt_mask, dtype=bool)
    if K < 1:
        raise ValueError("K must be >= 1")
    if not gt.any():
        raise ValueError("ground-truth mask is empty")
    if noise <= 0:
        return [MaskCandidate(gt.astype(np.uint8), 1.0) for _ in range(K)]
    h, w = gt.shape
    yy, xx = np.mgrid[0:h, 0:w]
    out = []
    for _ in range(K):
        radius = int(round(abs(rng.normal(0.0, noise))))
        cand = morph(gt, radius, dilate=bool(rng.random() < 0.5)).astype(bool)
        for _ in range(int(rng.poisson(noise / 2.0))):
            cy, cx = rng.uniform(0, h), rng.uniform(0, w)
            br = rng.uniform(1.0, 1.0 + noise)
            blob = (xx - cx) ** 2 + (yy - cy) ** 2 <= br * br
            if rng.random() < 0.5:
                cand |= blob
            else:
                cand &= ~blob
        conf = float(np.clip(mask_iou(cand, gt) + rng.normal(0.0, 0.05 * noise), 0.0, 1.0))
        out.append(MaskCandidate(cand.astype(np.uint8), conf))
    return out


def select_pseudo_mask(cands: Sequence[MaskCandidate]) -> PseudoMask:
    """Candidate maximizing ``sum_j conf_j * IoU(M_k, M_j)`` (self-term included).

    Ties go to the lowest index.
    """
    if len(cands) == 0:
        raise ValueError("need at least one candidate")
    flats = [np.asarray(c.mask, dtype=bool).ravel() for c in cands]
    shape = np.shape(cands[0].mask)
    for k, c in enumerate(cands):
        if np.shape(c.mask) != shape:
            raise ValueError(f"candidate {k} has shape {np.shape(c.mask)}, expected {shape}")
    sizes = [int(np.count_nonzero(f)) for f in flats]
    if all(s == 0 for s in sizes):
        raise ValueError("all candidate masks are empty; IoU is undefined")
    K = len(cands)
    empty_pair = False
    scores = []
    for k in range(K):
        total = 0.0
        for j in range(K):
            inter = int(np.count_nonzero(flats[k] & flats[j]))
            union = sizes[k] + sizes[j] - inter
            if union == 0:
                iou = 1.0
                empty_pair = True
            else:
                iou = inter / union
            total += cands[j].confidence * iou
        scores.append(total)
    best = 0
    for k in range(1, K):
        if scores[k] > scores[best]:
            best = k
    return PseudoMask(mask=cands[best].mask.copy(), source_index=best, score=scores[best],
                      scores=scores, empty_pair_used=empty_pair)


def corrupt_view_masks(masks: Sequence[np.ndarray], fraction: float, severity: int,
                       rng: np.random.Generator):
    """Dilate or erode the masks of ``round(fraction * V)`` randomly chosen views.

    ``round`` is half-up.  ``severity`` is the structuring-disk radius in
    pixels (1..SEVERITY_MAX).  Returns ``(masks, report)``.
    """
    if not (0.0 <= fraction <= 1.0):
        raise ValueError("fraction must lie in [0, 1]")
    V = len(masks)
    count = int(math.floor(fraction * V + 0.5))
    affected = sorted(int(i) for i in rng.choice(V, size=count, replace=False)) if count else []
    ops = {}
    out = [np.asarray(m, dtype=np.uint8).copy() for m in masks]
    for v in affected:
        dilate = bool(rng.random() < 0.5)
        out[v] = morph(out[v], int(severity), dilate)
        ops[v] = "dilate" if dilate else "erode"
    report = {"count": count, "affected": affected, "ops": [ops[v] for v in affected],
              "fraction": fraction, "severity": int(severity)}
    return out, report


# ---------------------------------------------------------------------------
# candidate manifests
# ---------------------------------------------------------------------------

def save_candidates(directory, cands: Sequence[MaskCandidate]) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = []
    for k, c in enumerate(cands):
        name = f"cand_{k:03d}.pgm"
        write_mask_pgm(directory / name, c.mask)
        entries.append({"file": name, "confidence": c.confidence})
    manifest = directory / "manifest.json"
    manifest.write_text(json.dumps({"candidates": entries}, indent=1) + "\n")
    return manifest


def load_candidates(manifest) -> list:
    manifest = Path(manifest)
    data = json.loads(manifest.read_text())
    if "candidates" not in data:
        raise ValueError(f"{manifest}: missing 'candidates'")
    return [MaskCandidate(read_mask_pgm(manifest.parent / e["file"]), float(e["confidence"]))
            for e in data["candidates"]]
