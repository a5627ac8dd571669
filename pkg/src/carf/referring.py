"""Language side and camera-aware scoring of Gaussians.

Pipeline for one query and one view::

    G     = cross_interaction(F, mu_n, E)        # view independent
    f_cam = camera_feature(descriptor)           # 16 -> h -> d MLP
    m     = (G + f_cam) @ sum_j e_j              # per-Gaussian score
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .diffcore import DimensionError, Node, ParamTensor, Tape, sigmoid

FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3
MASK64 = (1 << 64) - 1

CANONICAL_TOKENS = ("object", "thing", "stuff", "texture")
FIELD_GROUP = "field"
CAMERA_GROUP = "camera"


def fnv1a64(data: bytes) -> int:
    h = FNV_OFFSET
    for byte in data:
        h ^= byte
        h = (h * FNV_PRIME) & MASK64
    return h


@dataclass
class QueryEmbedding:
    tokens: list
    E: np.ndarray  # (L, d)
    e_t: np.ndarray  # (d,)
    target_label: int = -1
    text: str = ""
    id: str = ""

    @property
    def d(self) -> int:
        return self.E.shape[1]

    @property
    def word_sum(self) -> np.ndarray:
        return self.E.sum(axis=0)


def sentence_embedding(E: np.ndarray) -> np.ndarray:
    mean = E.mean(axis=0)
    norm = np.linalg.norm(mean)
    if norm == 0.0:
        raise ValueError("sentence embedding undefined: word embeddings average to zero")
    return mean / norm


def fmix64(h: int) -> int:
    """Murmur3 64-bit finalizer."""
    h ^= h >> 33
    h = (h * 0xFF51AFD7ED558CCD) & MASK64
    h ^= h >> 33
    h = (h * 0xC4CEB9FE1A85EC53) & MASK64
    h ^= h >> 33
    return h


def toy_hash(token: str, k: int) -> int:
    # raw FNV-1a barely moves its top bits when only the trailing byte changes,
    # which would make every component of a row nearly equal
    return fmix64(fnv1a64(f"{token}:{k}".encode("utf-8")))


def toy_row(token: str, d: int) -> np.ndarray:
    row = np.array([toy_hash(token, k) / 2.0 ** 63 - 1.0 for k in range(d)])
    return row / np.linalg.norm(row)


def toy_embed(tokens: Sequence[str], d: int, target_label: int = -1, text: str = "", id: str = "") -> QueryEmbedding:
    """Deterministic hash embedding: one unit-norm row per token."""
    if d < 2:
        raise ValueError("d must be >= 2")
    tokens = list(tokens)
    if not tokens:
        raise ValueError("need at least one token")
    for j, tok in enumerate(tokens):
        if not isinstance(tok, str) or tok == "":
            raise ValueError(f"token {j} is empty")
    E = np.stack([toy_row(t, d) for t in tokens])
    return QueryEmbedding(tokens=tokens, E=E, e_t=sentence_embedding(E), target_label=target_label,
                          text=text or " ".join(tokens), id=id)


def save_embeddings(path, E: np.ndarray) -> None:
    E = np.asarray(E, dtype=np.float64)
    Path(path).write_text(json.dumps({"d": int(E.shape[1]), "rows": E.tolist()}) + "\n")


def load_embeddings(path, d: int | None = None, tokens=None, target_label: int = -1) -> QueryEmbedding:
    """Rows are used verbatim; ``e_t`` is their normalized mean."""
    data = json.loads(Path(path).read_text())
    if not isinstance(data, dict) or "d" not in data or "rows" not in data:
        raise ValueError(f"{path}: expected {{'d': int, 'rows': [[...], ...]}}")
    dim = data["d"]
    if d is not None and dim != d:
        raise DimensionError(f"{path}: embedding dimension {dim} does not match model dimension {d}")
    rows = data["rows"]
    if not rows:
        raise ValueError(f"{path}: no rows")
    for j, row in enumerate(rows):
        if len(row) != dim:
            raise DimensionError(f"{path}: row {j} has length {len(row)}, expected {dim}")
    E = np.array(rows, dtype=np.float64)
    if tokens is None:
        tokens = [f"<{j}>" for j in range(len(rows))]
    return QueryEmbedding(tokens=list(tokens), E=E, e_t=sentence_embedding(E), target_label=target_label)


def load_queries(path, d: int) -> list:
    """Query file: a JSON object or array of ``{"id", "text", "tokens", "target_label", "embeddings_path"?}``."""
    path = Path(path)
    data = json.loads(path.read_text())
    items = data if isinstance(data, list) else [data]
    out = []
    for item in items:
        for key in ("id", "text", "tokens", "target_label"):
            if key not in item:
                raise ValueError(f"{path}: query is missing {key!r}")
        emb_path = item.get("embeddings_path")
        if emb_path:
            q = load_embeddings(path.parent / emb_path, d=d, tokens=item["tokens"],
                                target_label=int(item["target_label"]))
            q.text, q.id = item["text"], str(item["id"])
        else:
            q = toy_embed(item["tokens"], d, int(item["target_label"]), item["text"], str(item["id"]))
        out.append(q)
    return out


def query_to_dict(q: QueryEmbedding) -> dict:
    return {"id": q.id, "text": q.text, "tokens": list(q.tokens), "target_label": int(q.target_label)}


# ---------------------------------------------------------------------------
# model
# ---------------------------------------------------------------------------

class ReferringModel:
    """All trainable parameters of the referring field.

    ``field`` group: F, Wq, Wk, Wv, Wp.  ``camera`` group: the camera MLP and,
    by default, the output squash (s_out, b_out).
    """

    PARAM_ORDER = ("F", "Wq", "Wk", "Wv", "Wp", "cam_W1", "cam_b1", "cam_W2", "cam_b2", "s_out", "b_out")

    def __init__(self, params: dict, t_con: float = 0.07):
        self.params = {name: params[name] for name in self.PARAM_ORDER}
        self.t_con = t_con

    @classmethod
    def init(cls, num_gaussians: int, d: int = 16, hidden: int = 64, seed: int | np.random.Generator = 0,
             feature_std: float = 0.1, s_out: float = 1.0, b_out: float = -4.0, t_con: float = 0.07,
             squash_group: str = CAMERA_GROUP):
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        F = rng.normal(0.0, feature_std, size=(num_gaussians, d))
        Wq = rng.normal(0.0, 1.0 / math.sqrt(d), size=(d, d))
        Wk = rng.normal(0.0, 1.0 / math.sqrt(d), size=(d, d))
        Wv = rng.normal(0.0, 0.1 / math.sqrt(d), size=(d, d))
        Wp = rng.normal(0.0, 1.0 / math.sqrt(3), size=(d, 3))
        W1 = rng.normal(0.0, math.sqrt(2.0 / 16), size=(hidden, 16))
        fg, cg = FIELD_GROUP, CAMERA_GROUP
        params = {
            "F": ParamTensor("F", F, group=fg),
            "Wq": ParamTensor("Wq", Wq, group=fg),
            "Wk": ParamTensor("Wk", Wk, group=fg),
            "Wv": ParamTensor("Wv", Wv, group=fg),
            "Wp": ParamTensor("Wp", Wp, group=fg),
            "cam_W1": ParamTensor("cam_W1", W1, group=cg),
            "cam_b1": ParamTensor("cam_b1", np.zeros(hidden), group=cg),
            # zero output layer: training starts exactly at the camera-free model
            "cam_W2": ParamTensor("cam_W2", np.zeros((d, hidden)), group=cg),
            "cam_b2": ParamTensor("cam_b2", np.zeros(d), group=cg),
            "s_out": ParamTensor("s_out", np.array(s_out), group=squash_group),
            "b_out": ParamTensor("b_out", np.array(b_out), group=squash_group),
        }
        return cls(params, t_con=t_con)

    @property
    def d(self) -> int:
        return self.params["F"].shape[1]

    @property
    def num_gaussians(self) -> int:
        return self.params["F"].shape[0]

    @property
    def hidden(self) -> int:
        return self.params["cam_W1"].shape[0]

    def param_list(self) -> list:
        return [self.params[n] for n in self.PARAM_ORDER]

    def state_tensors(self) -> dict:
        return {name: p.value.copy() for name, p in self.params.items()}

    def load_state_tensors(self, tensors: dict) -> None:
        for name, p in self.params.items():
            if tensors[name].shape != p.shape:
                raise DimensionError(f"checkpoint tensor {name} has shape {tensors[name].shape}, expected {p.shape}")
            p.value = tensors[name].copy()

    @classmethod
    def from_state_tensors(cls, tensors: dict, t_con: float = 0.07):
        F = tensors["F"]
        hidden = tensors["cam_W1"].shape[0]
        model = cls.init(F.shape[0], F.shape[1], hidden, t_con=t_con)
        model.load_state_tensors(tensors)
        return model

    def leaves(self, tape: Tape) -> dict:
        return {name: tape.param(p) for name, p in self.params.items()}

    def check_finite(self) -> None:
        for name, p in self.params.items():
            if not np.all(np.isfinite(p.value)):
                raise FloatingPointError(f"non-finite values in parameter {name!r}")


# ---------------------------------------------------------------------------
# differentiable pieces (tape level)
# ---------------------------------------------------------------------------

def cross_interaction(tape: Tape, F: Node, mu_n: Node, E: Node, Wq: Node, Wk: Node, Wv: Node, Wp: Node) -> Node:
    """Single-head scaled-dot attention from Gaussians to words, with residual.

    ``q_i = Wq f_i + Wp mu_i``, ``a_ij = softmax_j(<q_i, Wk e_j> / sqrt(d))``,
    ``g_i = f_i + sum_j a_ij Wv e_j``.
    """
    if E.shape[0] == 0:
        raise ValueError("cross_interaction: query has no word embeddings (L = 0)")
    d = F.shape[1]
    if E.shape[1] != d:
        raise DimensionError(f"cross_interaction: operand E has width {E.shape[1]}, features have d={d}")
    Q = tape.add(tape.matmul(F, tape.transpose(Wq)), tape.matmul(mu_n, tape.transpose(Wp)))
    K = tape.matmul(E, tape.transpose(Wk))
    V = tape.matmul(E, tape.transpose(Wv))
    A = tape.softmax_rows(tape.scale(tape.matmul(Q, tape.transpose(K)), 1.0 / math.sqrt(d)))
    return tape.add(F, tape.matmul(A, V))


def camera_feature(tape: Tape, desc: np.ndarray, W1: Node, b1: Node, W2: Node, b2: Node) -> Node:
    desc = np.asarray(desc, dtype=np.float64)
    if desc.shape != (16,):
        raise DimensionError(f"camera_feature: descriptor must have length 16, got {desc.shape}")
    h = tape.relu(tape.affine(tape.const(desc), W1, b1))
    return tape.affine(h, W2, b2)


def score_gaussians(tape: Tape, G: Node, f_cam: Node | None, word_sum: Node, gfce_enabled: bool = True) -> Node:
    """``m_i = (g_i + f_cam)^T sum_j e_j``; ``f_cam`` ignored when disabled."""
    Gt = tape.add_row(G, f_cam) if (gfce_enabled and f_cam is not None) else G
    return tape.matmul(Gt, word_sum)


# ---------------------------------------------------------------------------
# numpy conveniences (no gradient)
# ---------------------------------------------------------------------------

def compute_G(model: ReferringModel, mu_n: np.ndarray, E: np.ndarray) -> np.ndarray:
    tape = Tape()
    p = {k: tape.const(v.value) for k, v in model.params.items()}
    return cross_interaction(tape, p["F"], tape.const(mu_n), tape.const(E), p["Wq"], p["Wk"], p["Wv"], p["Wp"]).value


def compute_camera_feature(model: ReferringModel, desc: np.ndarray) -> np.ndarray:
    tape = Tape()
    p = {k: tape.const(v.value) for k, v in model.params.items()}
    return camera_feature(tape, desc, p["cam_W1"], p["cam_b1"], p["cam_W2"], p["cam_b2"]).value


def compute_scores(G: np.ndarray, f_cam: np.ndarray | None, E: np.ndarray, gfce_enabled: bool = True) -> np.ndarray:
    tape = Tape()
    fc = tape.const(f_cam) if f_cam is not None else None
    return score_gaussians(tape, tape.const(G), fc, tape.const(np.asarray(E).sum(axis=0)), gfce_enabled).value


def select_topk(scores, tau_percent: float = 10.0) -> np.ndarray:
    """Indices of the ceil(N * tau / 100) highest scores, ties to the lower index.

    Returned in descending score order.
    """
    scores = np.asarray(scores, dtype=np.float64)
    if not (0 < tau_percent <= 100):
        raise ValueError("tau must lie in (0, 100]")
    n = scores.size
    if n == 0:
        raise ValueError("select_topk: no scores")
    k = max(1, math.ceil(round(n * tau_percent / 100.0, 9)))
    order = np.lexsort((np.arange(n), -scores))
    return order[:k]


_R_LO = np.finfo(np.float64).tiny
_R_HI = np.nextafter(1.0, 0.0)


def relevancy_rerank(f, e, canon) -> float:
    """Two-way softmax of ``f.e`` against ``f.c`` for each canonical ``c``; minimum over ``canon``.

    Evaluated as a stable logistic of ``f.e - f.c``, finite for any dot
    magnitude and exactly 0.5 at equal dots; clamped to the open interval
    (0, 1) where float64 would round to 0 or 1.
    """
    f = np.asarray(f, dtype=np.float64)
    a = float(f @ np.asarray(e, dtype=np.float64))
    canon = np.atleast_2d(np.asarray(canon, dtype=np.float64))
    if canon.shape[0] == 0:
        raise ValueError("relevancy_rerank: empty canonical set")
    rs = sigmoid(np.array([a - float(f @ c) for c in canon]))
    return float(np.clip(rs.min(), _R_LO, _R_HI))


def relevancy_scores(features: np.ndarray, e: np.ndarray, canon: np.ndarray) -> np.ndarray:
    """Vectorized :func:`relevancy_rerank` over rows of ``features``."""
    a = features @ e
    c = features @ np.atleast_2d(canon).T  # (N, C)
    r = sigmoid(a[:, None] - c)
    return np.clip(r.min(axis=1), _R_LO, _R_HI)


def canonical_embeddings(d: int) -> np.ndarray:
    return np.stack([toy_row(t, d) for t in CANONICAL_TOKENS])
