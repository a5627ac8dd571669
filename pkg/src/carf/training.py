"""Training loop: view sampling, per-view scoring and rendering, losses, optimizer steps.

Randomness.  Every random draw comes from ``np.random.default_rng([seed, tag, ...])``
child streams (tags in :mod:`carf.presets`):

* model init      ``[seed, STREAM_MODEL]``
* views of iter t ``[seed, STREAM_VIEWS, t]``: one ``integers`` draw for the pair,
  then, for three or more views, one ``choice`` draw for the extra views.

Per-iteration streams make a resumed run draw exactly what an uninterrupted
run draws, and ablation flags never shift unrelated draws.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import math
import os
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .camera import NoAdmissiblePairError, admissible_pairs, camera_descriptor, overlap_from_sets, visible_set
from .diffcore import (Adam, NumericalError, Tape, adam_state_from_tensors, adam_state_tensors, clip_grad_norm,
                       gradcheck, load_tensors, save_tensors)
from .eval import EvalReport, config_hash, evaluate
from .losses import CSV_HEADER, LossBreakdown, bce, contrastive_loss, multi_view_loss, view_weights
from .pipeline import CAM_FUSIONS, render_prob, view_scores
from .presets import STREAM_MODEL, STREAM_VIEWS
from .rasterizer import render_context
from .referring import (CAMERA_GROUP, FIELD_GROUP, ReferringModel, canonical_embeddings, relevancy_scores,
                        select_topk)

SELECTIONS = ("score", "relevancy")
FG_SOURCES = ("f", "g")


@dataclass
class TrainConfig:
    iterations: int = 2000
    lr_field: float = 2.5e-3
    lr_cam: float = 1e-4
    d: int = 16
    tau: float = 10.0  # percent of Gaussians kept for the contrastive term
    alpha_view: float = 0.5
    lambda1: float = 1.0
    lambda2: float = 1.0
    num_views_per_iter: int = 2
    min_overlap: float = 0.30
    gfce_enabled: bool = True
    itpvs_enabled: bool = True
    seed: int = 0
    bce_reduction: str = "mean"
    fg_source: str = "f"
    grad_clip: float = 1.0
    # extensions beyond the core set
    hidden: int = 64
    t_con: float = 0.07
    selection: str = "score"
    cam_fusion: str = "additive"
    freeze_cam_output: bool = False
    checkpoint_every: int = 0
    eval_every: int = 0
    threads: int = 1
    feature_std: float = 0.1
    b_out_init: float = -4.0
    squash_group: str = "camera"  # low-rate group with the camera MLP

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        for name in ("lr_field", "lr_cam", "t_con", "grad_clip"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be > 0")
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")
        if self.num_views_per_iter < 1:
            raise ValueError("num_views_per_iter must be >= 1")
        if self.d < 1 or self.hidden < 1:
            raise ValueError("d and hidden must be >= 1")
        if not (0 < self.tau <= 100):
            raise ValueError("tau must lie in (0, 100]")
        if not (0.0 <= self.alpha_view <= 1.0):
            raise ValueError("alpha_view must lie in [0, 1]")
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ValueError("lambda1 and lambda2 must be >= 0")
        if not (0.0 <= self.min_overlap <= 1.0):
            raise ValueError("min_overlap must lie in [0, 1]")
        if self.bce_reduction not in ("mean", "sum"):
            raise ValueError("bce_reduction must be 'mean' or 'sum'")
        if self.fg_source not in FG_SOURCES:
            raise ValueError(f"fg_source must be one of {FG_SOURCES}")
        if self.selection not in SELECTIONS:
            raise ValueError(f"selection must be one of {SELECTIONS}")
        if self.cam_fusion not in CAM_FUSIONS:
            raise ValueError(f"cam_fusion must be one of {CAM_FUSIONS}")
        if self.checkpoint_every < 0 or self.eval_every < 0:
            raise ValueError("checkpoint_every and eval_every must be >= 0")
        if self.squash_group not in (FIELD_GROUP, CAMERA_GROUP):
            raise ValueError(f"squash_group must be {FIELD_GROUP!r} or {CAMERA_GROUP!r}")
        if self.threads < 1:
            raise ValueError("threads must be >= 1")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        known = {f.name: f for f in dataclasses.fields(cls)}
        unknown = sorted(set(data) - set(known))
        if unknown:
            raise ValueError(f"unknown config field(s): {', '.join(unknown)}")
        return cls(**{k: _coerce(known[k], v) for k, v in data.items()})

    @classmethod
    def load(cls, path) -> "TrainConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)


def _coerce(f: dataclasses.Field, value):
    kind = type(f.default)
    if kind is bool:
        if isinstance(value, str):
            low = value.strip().lower()
            if low in ("true", "1", "yes", "on"):
                return True
            if low in ("false", "0", "no", "off"):
                return False
            raise ValueError(f"{f.name}: expected a boolean, got {value!r}")
        return bool(value)
    if kind is int:
        if isinstance(value, float) and not value.is_integer():
            raise ValueError(f"{f.name}: expected an integer, got {value!r}")
        return int(value)
    if kind is float:
        return float(value)
    return value


PRESETS = {
    "desk": {},
    "full": {"iterations": 30000, "d": 128},
}


def preset(name: str, **overrides) -> TrainConfig:
    if name not in PRESETS:
        raise ValueError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    return TrainConfig(**{**PRESETS[name], **overrides})


def init_model(num_gaussians: int, cfg: TrainConfig) -> ReferringModel:
    return ReferringModel.init(num_gaussians, cfg.d, cfg.hidden, np.random.default_rng([cfg.seed, STREAM_MODEL]),
                               feature_std=cfg.feature_std, b_out=cfg.b_out_init, t_con=cfg.t_con,
                               squash_group=cfg.squash_group)


def view_rng(seed: int, iteration: int) -> np.random.Generator:
    return np.random.default_rng([seed, STREAM_VIEWS, iteration])


class Trainer:
    """Mutable training state: model, optimizer, cached view geometry and masks.

    ``masks`` maps ``(query_index, view_index)`` to a binary (H, W) mask for
    every training camera.
    """

    def __init__(self, model: ReferringModel, scene, cams: Sequence, queries: Sequence, masks: dict,
                 cfg: TrainConfig, contexts=None):
        if model.num_gaussians != len(scene):
            raise ValueError(f"model has {model.num_gaussians} feature rows but the scene has {len(scene)} Gaussians")
        if not queries:
            raise ValueError("need at least one query")
        for q in queries:
            if q.d != model.d:
                raise ValueError(f"query {q.id!r} has width {q.d}, model has d={model.d}")
        self.model, self.scene, self.cams, self.queries, self.cfg = model, scene, list(cams), list(queries), cfg
        for qi in range(len(queries)):
            for vi in range(len(cams)):
                if (qi, vi) not in masks:
                    raise ValueError(f"missing training mask for query {qi}, view {vi}")
        self.masks = {k: np.asarray(v, dtype=np.float64).ravel() for k, v in masks.items()}
        self.contexts = contexts if contexts is not None else [
            render_context(c, scene, threads=cfg.threads) for c in self.cams]
        self.descs = [camera_descriptor(c).c_full for c in self.cams]
        self.mu_n = scene.normalized_mu()
        self.visible = [visible_set(c, scene) for c in self.cams]
        self.pairs = admissible_pairs(self.cams, scene, cfg.min_overlap)
        if self.paired and not self.pairs:
            raise NoAdmissiblePairError(
                f"no camera pair reaches {cfg.min_overlap:.0%} overlap; lower min_overlap or disable itpvs")
        if self.paired and cfg.num_views_per_iter > len(self.cams):
            raise ValueError(f"num_views_per_iter={cfg.num_views_per_iter} exceeds {len(self.cams)} cameras")
        frozen = cfg.freeze_cam_output
        model.params["cam_W2"].trainable = not frozen
        model.params["cam_b2"].trainable = not frozen
        self.optimizer = Adam(model.param_list(), {FIELD_GROUP: cfg.lr_field, CAMERA_GROUP: cfg.lr_cam})
        self.batch_sentences = [q.e_t for q in self.queries]
        self.canon = canonical_embeddings(model.d) if cfg.selection == "relevancy" else None
        self.iteration = 0

    @property
    def paired(self) -> bool:
        return self.cfg.itpvs_enabled and self.cfg.num_views_per_iter >= 2

    def sample_views(self, rng: np.random.Generator) -> tuple:
        """View indices for one iteration; the first is the primary view.

        A pair is drawn whenever pairs exist, single-view runs keep its first
        view, so toggling the paired loss never changes the view sequence.
        """
        if self.pairs:
            pair = self.pairs[int(rng.integers(len(self.pairs)))]
        else:
            pair = None
        if not self.paired:
            if pair is not None:
                return (pair.a,)
            return (int(rng.integers(len(self.cams))),)
        views = [pair.a, pair.b]
        extra = self.cfg.num_views_per_iter - 2
        if extra > 0:
            rest = [j for j in range(len(self.cams)) if j not in views]
            good = [j for j in rest if overlap_from_sets(self.visible[pair.a], self.visible[j]) >= self.cfg.min_overlap]
            pool = good if len(good) >= extra else rest
            views += [int(j) for j in rng.choice(pool, size=extra, replace=False)]
        return tuple(views)

    def step(self, views=None) -> LossBreakdown:
        it = self.iteration
        qi = it % len(self.queries)
        rng = view_rng(self.cfg.seed, it)
        br = train_iteration(self, qi, rng, views=views)
        self.iteration += 1
        return br

    # -- checkpoints -------------------------------------------------------
    def state_tensors(self) -> dict:
        out = self.model.state_tensors()
        out.update(adam_state_tensors(self.optimizer.state))
        out["__meta__/iteration"] = np.float64(self.iteration)
        return out

    def save(self, path) -> None:
        save_tensors(path, self.state_tensors())

    def restore(self, path) -> None:
        model, state, iteration = load_checkpoint(path)
        self.model.load_state_tensors(model.state_tensors())
        if state is not None:
            self.optimizer.state = state
        self.iteration = iteration


@dataclass
class LossGraph:
    total: object
    per_view: list
    l_views: object
    l_con: object
    selected: np.ndarray


def build_loss(trainer: Trainer, tape: Tape, query_index: int, views: Sequence[int], selected=None) -> LossGraph:
    """Record the full objective for one query and view tuple on ``tape``.

    ``selected`` pins the contrastive subset (for finite differences); by
    default it is the top ``tau`` percent of the primary view's scores.
    """
    cfg, model = trainer.cfg, trainer.model
    query = trainer.queries[query_index]
    P = model.leaves(tape)
    Gs, ms = view_scores(tape, P, trainer.mu_n, query, [trainer.descs[v] for v in views],
                         cfg.gfce_enabled, cfg.cam_fusion)
    per_view = []
    for v, m in zip(views, ms):
        _, prob = render_prob(tape, P, m, trainer.contexts[v])
        per_view.append(bce(tape, prob, trainer.masks[(query_index, v)], cfg.bce_reduction))
    l_views = multi_view_loss(tape, per_view, cfg.alpha_view)

    if selected is None:
        if cfg.selection == "score":
            selected = select_topk(ms[0].value, cfg.tau)
        else:
            selected = select_topk(relevancy_scores(Gs[0].value, query.e_t, trainer.canon), cfg.tau)
    feats = P["F"] if cfg.fg_source == "f" else Gs[0]
    l_con = contrastive_loss(tape, feats, selected, query.e_t, trainer.batch_sentences, cfg.t_con,
                             target_index=query_index)
    total = tape.linear_combination([l_views, l_con], [cfg.lambda1, cfg.lambda2])
    return LossGraph(total, per_view, l_views, l_con, np.asarray(selected))


def train_iteration(trainer: Trainer, query_index: int, rng: np.random.Generator, views=None) -> LossBreakdown:
    """One optimizer step on one query.

    Sample views, score every Gaussian once per view, composite, weighted
    per-view BCE, contrastive term on the primary view's top Gaussians,
    backward, clip, Adam.
    """
    cfg = trainer.cfg
    if views is None:
        views = trainer.sample_views(rng)
    views = tuple(int(v) for v in views)

    tape = Tape()
    g = build_loss(trainer, tape, query_index, views)
    pv = [float(n.value) for n in g.per_view]
    br = LossBreakdown(l_bce_a=pv[0], l_bce_b=pv[1] if len(pv) > 1 else float("nan"),
                       l_2view=float(g.l_views.value), l_con=float(g.l_con.value), l_total=float(g.total.value),
                       view_weight=view_weights(len(views), cfg.alpha_view)[0], lambda1=cfg.lambda1,
                       lambda2=cfg.lambda2, per_view=pv, views=views)
    if not math.isfinite(br.l_total):
        raise NumericalError(f"iteration {trainer.iteration}: non-finite loss ({br})")

    trainer.optimizer.zero_grad()
    tape.backward(g.total)
    br.grad_norm = clip_grad_norm(trainer.optimizer.params, cfg.grad_clip)
    trainer.optimizer.step()
    return br


def full_loss_gradcheck(trainer: Trainer, query_index: int = 0, views=None, h: float = 1e-5, tol: float = 1e-4):
    """Finite-difference check of the whole objective over every parameter group."""
    if views is None:
        views = trainer.sample_views(view_rng(trainer.cfg.seed, 0))
    views = tuple(int(v) for v in views)
    selected = build_loss(trainer, Tape(), query_index, views).selected
    return gradcheck(lambda tape: build_loss(trainer, tape, query_index, views, selected).total,
                     trainer.model.param_list(), h=h, tol=tol)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(path, model: ReferringModel, optimizer: Adam | None = None, iteration: int = 0) -> None:
    tensors = model.state_tensors()
    if optimizer is not None:
        tensors.update(adam_state_tensors(optimizer.state))
    tensors["__meta__/iteration"] = np.float64(iteration)
    save_tensors(path, tensors)


def load_checkpoint(path):
    """Returns ``(model, adam_state or None, iteration)``."""
    tensors = load_tensors(path)
    missing = [n for n in ReferringModel.PARAM_ORDER if n not in tensors]
    if missing:
        raise ValueError(f"{path}: checkpoint lacks tensor(s) {missing}")
    model = ReferringModel.from_state_tensors(tensors)
    iteration = int(tensors.get("__meta__/iteration", 0))
    return model, adam_state_from_tensors(tensors), iteration


def checkpoint_roundtrip(model: ReferringModel, path, optimizer: Adam | None = None):
    """Save then load; returns ``(model', adam_state')``."""
    save_checkpoint(path, model, optimizer)
    loaded, state, _ = load_checkpoint(path)
    return loaded, state


# ---------------------------------------------------------------------------
# full runs
# ---------------------------------------------------------------------------

@dataclass
class RunRecord:
    config: dict
    loss_csv: str | None
    epoch_seconds: list
    checkpoint: str | None
    eval_summary: dict | None = None
    losses: list = field(default_factory=list, repr=False)
    curve: list = field(default_factory=list)  # (iteration, held-out mIoU)
    trainer: object = field(default=None, repr=False)

    def to_dict(self) -> dict:
        return {"config": self.config, "config_hash": config_hash(self.config), "loss_csv": self.loss_csv,
                "epoch_seconds": self.epoch_seconds, "checkpoint": self.checkpoint,
                "eval_summary": self.eval_summary, "curve": [[int(i), float(m)] for i, m in self.curve]}


def _fmt(x: float) -> str:
    return repr(float(x))


def train(model: ReferringModel, scene, cams, queries, cfg: TrainConfig, masks: dict | None = None, *,
          out_dir=None, test_cams=None, contexts=None, test_contexts=None, log=None) -> RunRecord:
    """Run ``cfg.iterations`` steps round-robin over ``queries``.

    With ``out_dir`` the run writes ``config.json``, ``loss.csv``, periodic
    ``ckpt_<iter>.carf``, ``final.carf``, and ``run.json``.  ``masks`` defaults to
    exact label masks.  Held-out evaluation runs when ``test_cams`` is given.
    """
    if masks is None:
        from .eval import gt_mask_from_context
        if contexts is None:
            contexts = [render_context(c, scene, threads=cfg.threads) for c in cams]
        masks = {(qi, vi): gt_mask_from_context(ctx, scene, q.target_label)
                 for qi, q in enumerate(queries) for vi, ctx in enumerate(contexts)}
    trainer = Trainer(model, scene, cams, queries, masks, cfg, contexts)
    out = Path(out_dir) if out_dir is not None else None
    csv_file = writer = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.json").write_text(cfg.to_json())
        csv_file = open(out / "loss.csv", "w", newline="")
        writer = csv.writer(csv_file)
        writer.writerow(CSV_HEADER)
    if test_cams is not None and test_contexts is None:
        test_contexts = [render_context(c, scene, threads=cfg.threads) for c in test_cams]

    def held_out() -> EvalReport:
        return evaluate(model, scene, test_cams, queries, gfce_enabled=cfg.gfce_enabled, cam_fusion=cfg.cam_fusion,
                        contexts=test_contexts, cfg_for_hash=cfg.to_dict())

    losses, epoch_seconds, curve = [], [], []
    Q = len(queries)
    epoch_start = time.perf_counter()
    try:
        for it in range(cfg.iterations):
            br = trainer.step()
            losses.append(br)
            if writer is not None:
                writer.writerow([it] + [_fmt(x) for x in br.csv_row(it)[1:]])
            if (it + 1) % Q == 0:
                now = time.perf_counter()
                epoch_seconds.append(now - epoch_start)
                epoch_start = now
            if out is not None and cfg.checkpoint_every and (it + 1) % cfg.checkpoint_every == 0:
                trainer.save(out / f"ckpt_{it + 1:06d}.carf")
            if test_cams is not None and cfg.eval_every and (it + 1) % cfg.eval_every == 0:
                t_pause = time.perf_counter()
                curve.append((it + 1, held_out().miou))
                epoch_start += time.perf_counter() - t_pause
            if log is not None and (it + 1) % max(1, cfg.iterations // 10) == 0:
                log(f"iter {it + 1}/{cfg.iterations} loss={br.l_total:.5f}")
    finally:
        if csv_file is not None:
            csv_file.close()

    ckpt = None
    if out is not None:
        ckpt = str(out / "final.carf")
        trainer.save(ckpt)
    summary = None
    if test_cams is not None:
        report = held_out()
        summary = report.to_dict()
        if out is not None:
            report.write_json(out / "eval.json")
            report.write_csv(out / "eval.csv")
    rec = RunRecord(config=cfg.to_dict(), loss_csv=str(out / "loss.csv") if out is not None else None,
                    epoch_seconds=epoch_seconds, checkpoint=ckpt, eval_summary=summary, losses=losses, curve=curve,
                    trainer=trainer)
    if out is not None:
        # wall-clock fields differ between identical runs; checkpoints and loss.csv do not
        (out / "run.json").write_text(json.dumps(rec.to_dict(), indent=1) + "\n")
    return rec


def default_threads() -> int:
    env = os.environ.get("CARF_THREADS")
    if env:
        try:
            n = int(env)
        except ValueError:
            raise ValueError(f"CARF_THREADS must be an integer, got {env!r}") from None
        if n < 1:
            raise ValueError("CARF_THREADS must be >= 1")
        return n
    return os.cpu_count() or 1
