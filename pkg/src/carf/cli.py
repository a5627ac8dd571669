"""Command-line entry point: ``carf <command> [flags]``.

Exit codes: 0 success, 2 usage, 3 validation, 4 numerical failure, 5 I/O.
Failures print one line ``error[<code>]: <message>`` on stderr.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np

from .camera import CameraValidationError, NoAdmissiblePairError, load_cameras, save_cameras
from .diffcore import CheckpointError, NumericalError
from .eval import LabelError, evaluate
from .maskio import write_f32, write_pgm, write_mask_pgm
from .presets import (SEVERITY_LEVELS, pseudo_masks, smoke_cameras, smoke_queries, smoke_scene_spec, smoke_setup,
                      split_ring)
from .rasterizer import render_context
from .referring import load_queries
from .scene import SceneValidationError, generate_scene, load_scene, save_scene
from .supervision import load_candidates, select_pseudo_mask

EXIT_OK, EXIT_USAGE, EXIT_VALIDATION, EXIT_NUMERICAL, EXIT_IO = 0, 2, 3, 4, 5


class UsageError(Exception):
    pass


def _bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("true", "1", "yes", "on"):
        return True
    if low in ("false", "0", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected true/false, got {text!r}")


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    from .training import TrainConfig
    g = p.add_argument_group("training config (override --config)")
    for f in dataclasses.fields(TrainConfig):
        if f.name in ("seed", "threads"):
            continue  # global flags
        kind = type(f.default)
        conv = _bool if kind is bool else kind
        g.add_argument(f"--{f.name}", type=conv, default=None, metavar=kind.__name__.upper())
    g.add_argument("--itpvs", type=_bool, default=None, help="alias of --itpvs_enabled")
    g.add_argument("--gfce", type=_bool, default=None, help="alias of --gfce_enabled")


def _config_from_args(args):
    from .training import TrainConfig, default_threads
    base = json.loads(Path(args.config).read_text()) if args.config else {}
    if not isinstance(base, dict):
        raise ValueError("config file must hold a JSON object")
    for alias, name in (("itpvs", "itpvs_enabled"), ("gfce", "gfce_enabled")):
        a, b = getattr(args, alias), getattr(args, name)
        if a is not None and b is not None and a != b:
            raise UsageError(f"conflicting flags --{alias}={a} and --{name}={b}")
        if a is not None:
            setattr(args, name, a)
    for f in dataclasses.fields(TrainConfig):
        v = getattr(args, f.name, None)
        if v is not None:
            base[f.name] = v
    if args.seed is not None:
        base["seed"] = args.seed
    if args.threads is not None:
        base["threads"] = args.threads
    elif "threads" not in base:
        base["threads"] = default_threads()
    return TrainConfig.from_dict(base)


def _threads(args) -> int:
    from .training import default_threads
    return args.threads if getattr(args, "threads", None) else default_threads()


def _load_inputs(args, d: int, threads: int):
    """Scene, cameras (train, test), queries and training masks; smoke preset when files are absent."""
    seed = args.seed if args.seed is not None else 0
    if args.scene is None and args.cameras is None:
        s = smoke_setup(seed, d, noise=args.noise, K=args.K, corruption_fraction=args.corruption,
                        severity=_severity(args.severity), threads=threads)
        return s.scene, s.train_cams, s.test_cams, _queries(args, d), s.masks
    scene = load_scene(args.scene) if args.scene else generate_scene(smoke_scene_spec(), seed)
    cams = load_cameras(args.cameras) if args.cameras else smoke_cameras()
    train_cams, test_cams = split_ring(cams)
    queries = _queries(args, d)
    ctx = [render_context(c, scene, threads=threads) for c in train_cams]
    masks, _ = pseudo_masks(scene, train_cams, queries, seed, ctx, args.K, args.noise, args.corruption,
                            _severity(args.severity))
    return scene, train_cams, test_cams, queries, masks


def _queries(args, d: int):
    return load_queries(args.queries, d) if getattr(args, "queries", None) else smoke_queries(d)


def _severity(value) -> int:
    if value is None:
        return 0
    if str(value) in SEVERITY_LEVELS:
        return SEVERITY_LEVELS[str(value)]
    try:
        return int(value)
    except ValueError:
        raise UsageError(f"severity must be an integer or one of {sorted(SEVERITY_LEVELS)}") from None


def _add_inputs(p: argparse.ArgumentParser, supervision: bool = True) -> None:
    p.add_argument("--scene", help="scene JSON (default: generated smoke scene)")
    p.add_argument("--cameras", help="camera JSON; even entries train, odd entries test (default: smoke ring)")
    p.add_argument("--queries", help="query JSON (default: the three smoke queries)")
    if supervision:
        p.add_argument("--K", type=int, default=5, help="pseudo-mask candidates per view")
        p.add_argument("--noise", type=float, default=1.0, help="candidate noise level")
        p.add_argument("--corruption", type=float, default=0.0, help="fraction of views to corrupt")
        p.add_argument("--severity", default="moderate", help="corruption radius (px) or mild|moderate|severe")


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_gen_scene(args) -> int:
    spec = smoke_scene_spec(per_cluster=args.per_cluster, background=args.background)
    scene = generate_scene(spec, args.seed or 0)
    save_scene(scene, args.out)
    print(f"wrote {args.out} ({len(scene)} Gaussians)")
    return EXIT_OK


def cmd_gen_cameras(args) -> int:
    cams = smoke_cameras(n=args.n, size=args.size, radius=args.radius, height=args.height, fx=args.fx)
    save_cameras(cams, args.out)
    print(f"wrote {args.out} ({len(cams)} cameras)")
    return EXIT_OK


def cmd_select_mask(args) -> int:
    pm = select_pseudo_mask(load_candidates(args.manifest))
    if args.out:
        write_mask_pgm(args.out, pm.mask)
    print(json.dumps({"source_index": pm.source_index, "score": pm.score, "scores": pm.scores,
                      "empty_pair_used": pm.empty_pair_used}))
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .scene import ClusterSpec, SceneSpec
    from .camera import ring_cameras
    from .training import TrainConfig, Trainer, full_loss_gradcheck, init_model
    seed = args.seed or 0
    if args.scene:
        scene = load_scene(args.scene)
    else:
        spec = SceneSpec(clusters=[ClusterSpec((0.3, 0.0, 0.3), 0.15, 7, (1, 0, 0)),
                                   ClusterSpec((-0.3, 0.2, 0.3), 0.15, 7, (0, 1, 0)),
                                   ClusterSpec((0.0, -0.3, 0.3), 0.15, 6, (0, 0, 1))])
        scene = generate_scene(spec, seed)
    if args.max_gaussians and len(scene) > args.max_gaussians:
        from .scene import GaussianScene, bbox_of
        idx = np.linspace(0, len(scene) - 1, args.max_gaussians).round().astype(int)
        keep = [scene.gaussians[i] for i in idx]
        scene = GaussianScene(keep, bbox_of(np.array([g.mu for g in keep])), scene.rng_seed)
    cams = ring_cameras(4, args.radius, args.height, target=scene.mu.mean(axis=0), fx=args.size * 1.25,
                        width=args.size)
    labels = sorted(set(int(l) for l in scene.labels if l >= 0))
    queries = [q for q in smoke_queries(args.d)][:max(1, len(labels))]
    for q, lab in zip(queries, labels):
        q.target_label = lab
    masks, _ = pseudo_masks(scene, cams, queries, seed, K=0)
    cfg = TrainConfig(d=args.d, hidden=args.hidden, iterations=0, seed=seed, threads=1)
    model = init_model(len(scene), cfg)
    # a zero output layer would make the camera-MLP check vacuous
    rng = np.random.default_rng([seed, 99])
    model.params["cam_W2"].value = rng.normal(0.0, 0.3, model.params["cam_W2"].shape)
    model.params["cam_b2"].value = rng.normal(0.0, 0.3, model.params["cam_b2"].shape)
    trainer = Trainer(model, scene, cams, queries, masks, cfg)
    report = full_loss_gradcheck(trainer, 0, h=args.h, tol=args.tol)
    print(report.summary())
    if args.verbose:
        for name, err in report.max_rel_err.items():
            print(f"  {name}: {err:.3e}")
    return EXIT_OK if report.passed else EXIT_NUMERICAL


def cmd_train(args) -> int:
    from .training import init_model, train
    cfg = _config_from_args(args)
    scene, train_cams, test_cams, queries, masks = _load_inputs(args, cfg.d, cfg.threads)
    model = init_model(len(scene), cfg)
    out = Path(args.out)
    rec = train(model, scene, train_cams, queries, cfg, masks, out_dir=out, test_cams=test_cams,
                log=(lambda m: print(m, file=sys.stderr)) if args.verbose else None)
    if rec.curve:
        from .eval import write_curve_csv
        write_curve_csv(out / "curve.csv", rec.curve)
    miou = rec.eval_summary["miou"] if rec.eval_summary else float("nan")
    print(f"checkpoint={rec.checkpoint} heldout_miou={miou:.4f}")
    return EXIT_OK


def _load_model(path):
    from .training import load_checkpoint
    model, _, _ = load_checkpoint(path)
    return model


def _run_config(args):
    """Config snapshot beside the checkpoint, if any; decides gfce / fusion at inference."""
    from .training import TrainConfig
    snap = Path(args.checkpoint).parent / "config.json"
    return TrainConfig.load(snap) if snap.exists() else TrainConfig()


def cmd_render(args) -> int:
    model = _load_model(args.checkpoint)
    cfg = _run_config(args)
    scene = load_scene(args.scene) if args.scene else generate_scene(smoke_scene_spec(), args.seed or 0)
    cams = load_cameras(args.cameras) if args.cameras else smoke_cameras()
    queries = _queries(args, model.d)
    ids = [q.id for q in queries]
    if args.query is not None:
        if args.query not in ids:
            raise ValueError(f"unknown query {args.query!r}; available: {ids}")
        queries = [queries[ids.index(args.query)]]
    views = [int(v) for v in args.views.split(",")] if args.views else list(range(len(cams)))
    for v in views:
        if not 0 <= v < len(cams):
            raise ValueError(f"view {v} out of range (0..{len(cams) - 1})")
    from .eval import binarize, predict_masks
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    sel = [cams[v] for v in views]
    ctxs = [render_context(c, scene, threads=_threads(args)) for c in sel]
    for q in queries:
        probs = predict_masks(model, scene, sel, q, ctxs, cfg.gfce_enabled, cfg.cam_fusion)
        for v, prob in zip(views, probs):
            stem = out / f"{q.id or 'query'}_view{v:02d}"
            write_pgm(stem.with_suffix(".pgm"), np.round(np.clip(prob, 0, 1) * 255).astype(np.uint8))
            write_mask_pgm(Path(f"{stem}_mask.pgm"), binarize(prob, args.threshold))
            write_f32(stem.with_suffix(".f32"), prob)
    print(f"wrote {len(queries) * len(views)} probability maps to {out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    model = _load_model(args.checkpoint)
    cfg = _run_config(args)
    scene = load_scene(args.scene) if args.scene else generate_scene(smoke_scene_spec(), args.seed or 0)
    cams = load_cameras(args.cameras) if args.cameras else smoke_cameras()
    test_cams = split_ring(cams)[1] if not args.all_views else cams
    queries = _queries(args, model.d)
    ctxs = [render_context(c, scene, threads=_threads(args)) for c in test_cams]
    report = evaluate(model, scene, test_cams, queries, args.threshold, gfce_enabled=cfg.gfce_enabled,
                      cam_fusion=cfg.cam_fusion, contexts=ctxs, cfg_for_hash=cfg.to_dict(),
                      keep_probs=bool(args.dump))
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    report.write_json(out)
    report.write_csv(out.with_suffix(".csv"))
    if args.dump:
        dump = Path(args.dump)
        dump.mkdir(parents=True, exist_ok=True)
        for (qi, vi), prob in report.probs.items():
            stem = dump / f"{report.query_ids[qi]}_view{vi:02d}"
            write_pgm(stem.with_suffix(".pgm"), np.round(np.clip(prob, 0, 1) * 255).astype(np.uint8))
            write_f32(stem.with_suffix(".f32"), prob)
    print(f"miou={report.miou:.4f} -> {out}")
    return EXIT_OK


ABLATE_COLUMNS = ["grid", "itpvs", "gfce", "num_views", "seed", "miou_heldout", "sec_per_epoch"]


def run_ablation(grid: str, seeds, base_cfg, severity: int, corruption: float, threads: int = 1,
                 log=None) -> list:
    """One row per (variant, seed): the module on/off grid, then the views-per-iteration sweep."""
    from .training import init_model, train
    runs = []
    if grid in ("modules", "all"):
        runs += [("modules", it, gf, 2) for it in (False, True) for gf in (False, True)]
    if grid in ("views", "all"):
        runs += [("views", True, True, k) for k in (2, 3, 4)]
    if not runs:
        raise UsageError(f"unknown grid {grid!r}; choose modules, views or all")
    rows = []
    for seed in seeds:
        setup = smoke_setup(seed, base_cfg.d, corruption_fraction=corruption, severity=severity, threads=threads)
        for name, it, gf, k in runs:
            cfg = base_cfg.replace(seed=seed, itpvs_enabled=it, gfce_enabled=gf, num_views_per_iter=k,
                                   threads=threads)
            model = init_model(len(setup.scene), cfg)
            rec = train(model, setup.scene, setup.train_cams, setup.queries, cfg, setup.masks,
                        contexts=setup.train_contexts, test_cams=setup.test_cams,
                        test_contexts=setup.test_contexts)
            sec = float(np.median(rec.epoch_seconds)) if rec.epoch_seconds else float("nan")
            rows.append({"grid": name, "itpvs": it, "gfce": gf, "num_views": k, "seed": seed,
                         "miou_heldout": rec.eval_summary["miou"], "sec_per_epoch": sec})
            if log:
                log(f"{name} itpvs={it} gfce={gf} views={k} seed={seed} miou={rows[-1]['miou_heldout']:.4f}")
    return rows


def summarize_ablation(rows) -> list:
    """Mean over seeds per (grid, itpvs, gfce, num_views)."""
    keys = []
    for r in rows:
        k = (r["grid"], r["itpvs"], r["gfce"], r["num_views"])
        if k not in keys:
            keys.append(k)
    out = []
    for k in keys:
        sel = [r for r in rows if (r["grid"], r["itpvs"], r["gfce"], r["num_views"]) == k]
        out.append({"grid": k[0], "itpvs": k[1], "gfce": k[2], "num_views": k[3], "seeds": len(sel),
                    "miou_heldout": float(np.mean([r["miou_heldout"] for r in sel])),
                    "sec_per_epoch": float(np.mean([r["sec_per_epoch"] for r in sel]))})
    return out


def cmd_ablate(args) -> int:
    cfg = _config_from_args(args)
    seeds = list(range(cfg.seed, cfg.seed + args.seeds))
    log = (lambda m: print(m, file=sys.stderr)) if args.verbose else None
    rows = run_ablation(args.grid, seeds, cfg, _severity(args.severity), args.corruption, cfg.threads, log)
    summary = summarize_ablation(rows)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    cols = ["grid", "itpvs", "gfce", "num_views", "seeds", "miou_heldout", "sec_per_epoch"]
    with open(out, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=cols)
        w.writeheader()
        for r in summary:
            w.writerow({**r, "itpvs": str(r["itpvs"]).lower(), "gfce": str(r["gfce"]).lower()})
    with open(out.with_name(out.stem + "_runs.csv"), "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=ABLATE_COLUMNS)
        w.writeheader()
        w.writerows(rows)
    for r in summary:
        print(f"{r['grid']} itpvs={str(r['itpvs']).lower()} gfce={str(r['gfce']).lower()} "
              f"views={r['num_views']} miou={r['miou_heldout']:.4f} sec/epoch={r['sec_per_epoch']:.4f}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"error[{EXIT_USAGE}]: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="carf", description="Camera-aware referring fields on Gaussian scenes.")
    p.add_argument("--seed", type=int, default=None, help="single source of randomness (default 0)")
    p.add_argument("--threads", type=int, default=None, help="rasterizer threads (default: CARF_THREADS or all cores)")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp):
        # accepted after the subcommand too
        sp.add_argument("--seed", type=int, default=argparse.SUPPRESS)
        sp.add_argument("--threads", type=int, default=argparse.SUPPRESS)
        sp.add_argument("-v", "--verbose", action="store_true")

    sp = sub.add_parser("gen-scene", help="write a smoke scene JSON")
    common(sp)
    sp.add_argument("--out", required=True)
    sp.add_argument("--per-cluster", type=int, default=100)
    sp.add_argument("--background", type=int, default=200)
    sp.set_defaults(func=cmd_gen_scene)

    sp = sub.add_parser("gen-cameras", help="write a ring of cameras")
    common(sp)
    sp.add_argument("--out", required=True)
    sp.add_argument("--n", type=int, default=8)
    sp.add_argument("--size", type=int, default=64)
    sp.add_argument("--radius", type=float, default=2.6)
    sp.add_argument("--height", type=float, default=2.5)
    sp.add_argument("--fx", type=float, default=120.0)
    sp.set_defaults(func=cmd_gen_cameras)

    sp = sub.add_parser("select-mask", help="pick the pseudo mask from a candidate manifest")
    common(sp)
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_select_mask)

    sp = sub.add_parser("gradcheck", help="finite-difference check of the full objective")
    common(sp)
    sp.add_argument("--scene")
    sp.add_argument("--d", type=int, default=8)
    sp.add_argument("--hidden", type=int, default=16)
    sp.add_argument("--size", type=int, default=16)
    sp.add_argument("--radius", type=float, default=2.0)
    sp.add_argument("--height", type=float, default=1.5)
    sp.add_argument("--max-gaussians", type=int, default=20, help="truncate larger scenes (0 = keep all)")
    sp.add_argument("--h", type=float, default=1e-5)
    sp.add_argument("--tol", type=float, default=1e-4)
    sp.set_defaults(func=cmd_gradcheck)

    sp = sub.add_parser("train", help="train a referring field and write a run directory")
    common(sp)
    sp.add_argument("--config", help="TrainConfig JSON")
    sp.add_argument("--out", required=True, help="run directory")
    _add_inputs(sp)
    _add_config_flags(sp)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("render", help="probability maps for a checkpoint")
    common(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--query", help="query id (default: all)")
    sp.add_argument("--views", help="comma-separated camera indices (default: all)")
    sp.add_argument("--threshold", type=float, default=0.5)
    _add_inputs(sp, supervision=False)
    sp.set_defaults(func=cmd_render)

    sp = sub.add_parser("eval", help="held-out IoU report for a checkpoint")
    common(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--out", required=True, help="report JSON (CSV written alongside)")
    sp.add_argument("--threshold", type=float, default=0.5)
    sp.add_argument("--all-views", action="store_true", help="evaluate every camera, not just odd ring positions")
    sp.add_argument("--dump", help="directory for per-view probability maps")
    _add_inputs(sp, supervision=False)
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("ablate", help="flag grid and view-count sweep on the smoke scene")
    common(sp)
    sp.add_argument("--grid", choices=("modules", "views", "all"), default="all")
    sp.add_argument("--seeds", type=int, default=5, help="number of consecutive seeds")
    sp.add_argument("--config", help="TrainConfig JSON")
    sp.add_argument("--out", required=True, help="combined CSV")
    sp.add_argument("--corruption", type=float, default=0.3)
    sp.add_argument("--severity", default="moderate")
    _add_config_flags(sp)
    sp.set_defaults(func=cmd_ablate)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "threads", None) is not None and args.threads < 1:
        parser.error("--threads must be >= 1")
    try:
        return args.func(args)
    except UsageError as exc:
        return _fail(EXIT_USAGE, exc)
    except (CheckpointError, OSError) as exc:
        return _fail(EXIT_IO, exc)
    except (NumericalError, FloatingPointError) as exc:
        return _fail(EXIT_NUMERICAL, exc)
    except (SceneValidationError, CameraValidationError, LabelError, NoAdmissiblePairError, ValueError,
            KeyError, json.JSONDecodeError) as exc:
        return _fail(EXIT_VALIDATION, exc)


def _fail(code: int, exc: BaseException) -> int:
    msg = " ".join(str(exc).split()) or type(exc).__name__
    print(f"error[{code}]: {type(exc).__name__}: {msg}", file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
