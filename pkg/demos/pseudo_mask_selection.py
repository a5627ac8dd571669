"""Noisy candidate masks, the confidence-weighted consensus pick, and view corruption.

    python3 demos/pseudo_mask_selection.py --out demo_out/masks
"""

import argparse
from pathlib import Path

import numpy as np

from carf.eval import gt_mask_from_context, iou
from carf.maskio import write_mask_pgm
from carf.presets import SEVERITY_LEVELS, smoke_cameras, smoke_scene_spec
from carf.rasterizer import render_context
from carf.scene import generate_scene
from carf.supervision import corrupt_view_masks, select_pseudo_mask, synth_candidates


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", default="demo_out/masks")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--noise", type=float, default=2.0)
    ap.add_argument("--K", type=int, default=6)
    args = ap.parse_args()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(args.seed)

    scene = generate_scene(smoke_scene_spec(), args.seed)
    cams = smoke_cameras()
    gt = gt_mask_from_context(render_context(cams[0], scene), scene, 0)
    write_mask_pgm(out / "gt.pgm", gt)

    cands = synth_candidates(gt, args.K, args.noise, rng)
    pick = select_pseudo_mask(cands)
    print("cand  confidence  IoU(gt)  consensus score")
    for k, (c, s) in enumerate(zip(cands, pick.scores)):
        mark = "  <- selected" if k == pick.source_index else ""
        print(f"{k:4d}  {c.confidence:10.3f}  {iou(c.mask, gt):7.3f}  {s:15.3f}{mark}")
        write_mask_pgm(out / f"cand{k}.pgm", c.mask)
    best = max(range(len(cands)), key=lambda k: iou(cands[k].mask, gt))
    print(f"selected IoU {iou(pick.mask, gt):.3f}; best available {iou(cands[best].mask, gt):.3f}")

    # the injector used by the ablation: 30% of views, moderate radius
    views = [gt_mask_from_context(render_context(c, scene), scene, 0) for c in cams]
    bad, rep = corrupt_view_masks(views, 0.3, SEVERITY_LEVELS["moderate"], rng)
    print(f"\ncorrupted views {rep['affected']} ({', '.join(rep['ops'])}), radius {rep['severity']} px")
    for v in range(len(cams)):
        print(f"  view {v}: IoU to clean mask {iou(bad[v], views[v]):.3f}")
        write_mask_pgm(out / f"view{v}_corrupted.pgm", bad[v])


if __name__ == "__main__":
    main()
