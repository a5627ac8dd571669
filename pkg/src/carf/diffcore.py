"""Minimal reverse-mode differentiation over a fixed set of numpy operations.

A :class:`Tape` records every operation applied to :class:`Node` values and
replays the analytic backward rules in reverse order.  Leaves that wrap a
:class:`ParamTensor` accumulate their gradient into ``ParamTensor.grad``.

All values are float64.  There is no graph compiler and no broadcasting
magic: each op checks the shapes it accepts and names the bad operand.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np


class DimensionError(ValueError):
    """Raised when operand shapes do not conform."""


class NumericalError(FloatingPointError):
    """Raised on NaN/inf in losses or gradients."""


class ParamTensor:
    """A named float64 array with a gradient buffer of the same shape."""

    def __init__(self, name: str, value, trainable: bool = True, group: str = "field"):
        self.name = name
        self.value = np.array(value, dtype=np.float64)
        self.grad = np.zeros_like(self.value)
        self.trainable = trainable
        self.group = group

    @property
    def shape(self) -> tuple:
        return self.value.shape

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.value)

    def __repr__(self):
        return f"ParamTensor({self.name!r}, shape={self.shape}, trainable={self.trainable})"


class Node:
    __slots__ = ("value", "grad", "requires_grad", "param")

    def __init__(self, value, requires_grad: bool, param: ParamTensor | None = None):
        self.value = value
        self.grad = None
        self.requires_grad = requires_grad
        self.param = param

    @property
    def shape(self):
        return np.shape(self.value)

    def item(self) -> float:
        return float(self.value)


def _check(cond: bool, msg: str) -> None:
    if not cond:
        raise DimensionError(msg)


class Tape:
    """Records operations for one forward pass; ``backward`` replays them."""

    def __init__(self):
        self._records: list[tuple[Node, tuple[Node, ...], Callable]] = []
        self._leaves: list[Node] = []

    # -- leaves ---------------------------------------------------------
    def param(self, p: ParamTensor) -> Node:
        node = Node(p.value, requires_grad=True, param=p)
        self._leaves.append(node)
        return node

    @staticmethod
    def const(value) -> Node:
        return Node(np.asarray(value, dtype=np.float64), requires_grad=False)

    def _push(self, value, inputs: tuple[Node, ...], backward: Callable) -> Node:
        needs = any(n.requires_grad for n in inputs)
        out = Node(value, requires_grad=needs)
        if needs:
            self._records.append((out, inputs, backward))
        return out

    # -- linear algebra ------------------------------------------------
    def affine(self, x: Node, W: Node, b: Node) -> Node:
        """``W @ x + b`` for a vector ``x``."""
        _check(np.ndim(x.value) == 1, f"affine: operand x must be a vector, got shape {x.shape}")
        _check(np.ndim(W.value) == 2, f"affine: operand W must be a matrix, got shape {W.shape}")
        _check(W.shape[1] == x.shape[0], f"affine: operand W has {W.shape[1]} columns but x has length {x.shape[0]}")
        _check(b.shape == (W.shape[0],), f"affine: operand b has shape {b.shape}, expected ({W.shape[0]},)")
        xv, Wv = x.value, W.value

        def backward(g):
            return Wv.T @ g, np.outer(g, xv), g

        return self._push(Wv @ xv + b.value, (x, W, b), backward)

    def matmul(self, a: Node, b: Node) -> Node:
        """Matrix product of a 2-D ``a`` with a 1-D or 2-D ``b``."""
        _check(np.ndim(a.value) == 2, f"matmul: operand a must be 2-D, got shape {a.shape}")
        _check(np.ndim(b.value) in (1, 2), f"matmul: operand b must be 1-D or 2-D, got shape {b.shape}")
        _check(a.shape[1] == b.shape[0], f"matmul: operand shapes {a.shape} and {b.shape} do not conform")
        av, bv = a.value, b.value

        def backward(g):
            if bv.ndim == 1:
                return np.outer(g, bv), av.T @ g
            return g @ bv.T, av.T @ g

        return self._push(av @ bv, (a, b), backward)

    def transpose(self, a: Node) -> Node:
        _check(np.ndim(a.value) == 2, f"transpose: operand must be 2-D, got shape {a.shape}")
        return self._push(a.value.T, (a,), lambda g: (g.T,))

    def dot(self, a: Node, b: Node) -> Node:
        _check(a.shape == b.shape and np.ndim(a.value) == 1,
               f"dot: operands must be equal-length vectors, got {a.shape} and {b.shape}")
        av, bv = a.value, b.value
        return self._push(np.float64(av @ bv), (a, b), lambda g: (g * bv, g * av))

    # -- elementwise -----------------------------------------------------
    def add(self, a: Node, b: Node) -> Node:
        _check(a.shape == b.shape, f"add: operand shapes {a.shape} and {b.shape} differ")
        return self._push(a.value + b.value, (a, b), lambda g: (g, g))

    def add_row(self, A: Node, v: Node) -> Node:
        """Add vector ``v`` to every row of ``A``."""
        _check(np.ndim(A.value) == 2 and v.shape == (A.shape[1],),
               f"add_row: operand v has shape {v.shape}, expected ({A.shape[1] if np.ndim(A.value) == 2 else '?'},)")
        return self._push(A.value + v.value, (A, v), lambda g: (g, g.sum(axis=0)))

    def add_scalar(self, x: Node, s: Node) -> Node:
        """Add scalar node ``s`` to every entry of ``x``."""
        _check(np.size(s.value) == 1, f"add_scalar: operand s must be scalar, got shape {s.shape}")
        s_shape = s.shape
        sv = float(np.reshape(s.value, ()))
        return self._push(x.value + sv, (x, s), lambda g: (g, np.reshape(np.sum(g), s_shape)))

    def scale(self, a: Node, c: float) -> Node:
        return self._push(a.value * c, (a,), lambda g: (g * c,))

    def relu(self, x: Node) -> Node:
        xv = x.value
        # gradient at exactly 0 is 0
        mask = xv > 0
        return self._push(np.where(mask, xv, 0.0), (x,), lambda g: (g * mask,))

    def sigmoid(self, x: Node) -> Node:
        y = sigmoid(x.value)
        return self._push(y, (x,), lambda g: (g * y * (1.0 - y),))

    def scalar_affine(self, x: Node, s: Node, b: Node) -> Node:
        """``s * x + b`` with scalar ``s`` and ``b`` (shape () or (1,))."""
        _check(np.size(s.value) == 1, f"scalar_affine: operand s must be scalar, got shape {s.shape}")
        _check(np.size(b.value) == 1, f"scalar_affine: operand b must be scalar, got shape {b.shape}")
        xv = x.value
        sv = float(np.reshape(s.value, ()))
        bv = float(np.reshape(b.value, ()))
        s_shape, b_shape = s.shape, b.shape

        def backward(g):
            return (g * sv,
                    np.reshape(np.sum(g * xv), s_shape),
                    np.reshape(np.sum(g), b_shape))

        return self._push(sv * xv + bv, (x, s, b), backward)

    def softmax_rows(self, S: Node) -> Node:
        _check(np.ndim(S.value) == 2, f"softmax_rows: operand must be 2-D, got shape {S.shape}")
        Z = S.value - S.value.max(axis=1, keepdims=True)
        P = np.exp(Z)
        P /= P.sum(axis=1, keepdims=True)

        def backward(g):
            return (P * (g - (g * P).sum(axis=1, keepdims=True)),)

        return self._push(P, (S,), backward)

    # -- reductions ------------------------------------------------------
    def sum(self, x: Node) -> Node:
        shape = x.shape
        return self._push(np.float64(np.sum(x.value)), (x,), lambda g: (np.full(shape, g),))

    def linear_combination(self, nodes: Sequence[Node], weights: Sequence[float]) -> Node:
        """``sum_k weights[k] * nodes[k]`` over scalar nodes, summed left to right."""
        _check(len(nodes) == len(weights) and len(nodes) > 0,
               "linear_combination: need one weight per node")
        total = weights[0] * nodes[0].value
        for w, n in zip(weights[1:], nodes[1:]):
            total = total + w * n.value
        ws = tuple(float(w) for w in weights)
        return self._push(np.float64(total), tuple(nodes), lambda g: tuple(g * w for w in ws))

    def gather_mean_rows(self, F: Node, idx) -> Node:
        idx = np.asarray(idx, dtype=np.int64)
        _check(idx.size > 0, "gather_mean_rows: empty index set")
        n = F.shape[0]
        k = idx.size

        def backward(g):
            out = np.zeros(F.shape)
            np.add.at(out, idx, g / k)
            return (out,)

        return self._push(F.value[idx].mean(axis=0), (F,), backward)

    def l2_normalize(self, v: Node) -> Node:
        _check(np.ndim(v.value) == 1, f"l2_normalize: operand must be a vector, got shape {v.shape}")
        norm = float(np.linalg.norm(v.value))
        if norm == 0.0:
            raise NumericalError("l2_normalize: zero vector")
        u = v.value / norm
        return self._push(u, (v,), lambda g: ((g - u * (u @ g)) / norm,))

    def cross_entropy(self, logits: Node, target: int) -> Node:
        """``-log softmax(logits)[target]`` via log-sum-exp."""
        z = logits.value
        zmax = z.max()
        lse = zmax + math.log(np.sum(np.exp(z - zmax)))
        p = np.exp(z - lse)

        def backward(g):
            d = p.copy()
            d[target] -= 1.0
            return (g * d,)

        return self._push(np.float64(lse - z[target]), (logits,), backward)

    # -- losses / rendering ------------------------------------------------
    def bce(self, prob: Node, target, clamp: float = 1e-7, reduction: str = "mean") -> Node:
        """Binary cross-entropy with probabilities clamped to ``[clamp, 1-clamp]``."""
        target = np.asarray(target, dtype=np.float64)
        _check(prob.shape == target.shape, f"bce: prob shape {prob.shape} != target shape {target.shape}")
        if reduction not in ("mean", "sum"):
            raise ValueError(f"bce: unknown reduction {reduction!r}")
        raw = prob.value
        y = np.clip(raw, clamp, 1.0 - clamp)
        inside = (raw >= clamp) & (raw <= 1.0 - clamp)
        per = -(target * np.log(y) + (1.0 - target) * np.log(1.0 - y))
        denom = float(per.size) if reduction == "mean" else 1.0
        value = np.float64(np.sum(per) / denom)

        def backward(g):
            d = (-(target / y) + (1.0 - target) / (1.0 - y)) * inside
            return (g * d / denom,)

        return self._push(value, (prob,), backward)

    def composite(self, ctx, m: Node) -> Node:
        """Alpha-composite per-Gaussian scalars ``m`` with fixed blend weights.

        ``ctx`` is a :class:`carf.rasterizer.CompositeContext`; the result is
        the flattened logit map.
        """
        if ctx is None:
            raise ValueError("composite: missing forward context")
        _check(m.shape == (ctx.num_gaussians,),
               f"composite: operand m has shape {m.shape}, expected ({ctx.num_gaussians},)")
        return self._push(ctx.apply(m.value), (m,), lambda g: (ctx.apply_transpose(g),))

    # -- backward ----------------------------------------------------------
    def backward(self, out: Node, seed: float = 1.0) -> None:
        if not out.requires_grad:
            return
        out.grad = np.asarray(seed, dtype=np.float64) * np.ones_like(out.value)
        for node, inputs, fn in reversed(self._records):
            if node.grad is None:
                continue
            grads = fn(node.grad)
            for inp, g in zip(inputs, grads):
                if not inp.requires_grad:
                    continue
                g = np.asarray(g, dtype=np.float64)
                if inp.grad is None:
                    inp.grad = g.copy()
                else:
                    inp.grad = inp.grad + g
        for leaf in self._leaves:
            if leaf.grad is not None:
                leaf.param.grad = leaf.param.grad + leaf.grad


def sigmoid(x):
    """Numerically stable logistic function."""
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out if out.ndim else np.float64(out)


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    lr: dict[str, float]
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


class Adam:
    """Adam with bias correction and one learning rate per parameter group.

    ``lr`` maps group name to rate; a plain float applies to every group.
    """

    def __init__(self, params: Iterable[ParamTensor], lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        names = [p.name for p in self.params]
        if len(set(names)) != len(names):
            raise ValueError("Adam: parameter names must be unique")
        if not isinstance(lr, dict):
            lr = {p.group: float(lr) for p in self.params}
        per_param = {}
        for p in self.params:
            if p.group not in lr:
                raise ValueError(f"Adam: no learning rate for group {p.group!r} ({p.name})")
            rate = float(lr[p.group])
            if not rate > 0:
                raise ValueError(f"Adam: learning rate for {p.name} must be > 0")
            per_param[p.name] = rate
        self.state = AdamState(lr=per_param, beta1=beta1, beta2=beta2, eps=eps)
        for p in self.params:
            self.state.m[p.name] = np.zeros_like(p.value)
            self.state.v[p.name] = np.zeros_like(p.value)

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def step(self) -> None:
        st = self.state
        for p in self.params:
            if p.trainable and not np.all(np.isfinite(p.grad)):
                raise NumericalError(f"non-finite gradient in parameter {p.name!r}")
        st.step_count += 1
        t = st.step_count
        c1 = 1.0 - st.beta1 ** t
        c2 = 1.0 - st.beta2 ** t
        for p in self.params:
            if not p.trainable:
                continue
            g = p.grad
            m = st.m[p.name] = st.beta1 * st.m[p.name] + (1.0 - st.beta1) * g
            v = st.v[p.name] = st.beta2 * st.v[p.name] + (1.0 - st.beta2) * g * g
            p.value = p.value - st.lr[p.name] * (m / c1) / (np.sqrt(v / c2) + st.eps)


def global_grad_norm(params: Iterable[ParamTensor]) -> float:
    total = 0.0
    for p in params:
        if p.trainable:
            total += float(np.sum(p.grad * p.grad))
    return math.sqrt(total)


def clip_grad_norm(params: Sequence[ParamTensor], max_norm: float) -> float:
    """Scale trainable grads so their global L2 norm is at most ``max_norm``.

    Returns the norm before clipping.
    """
    norm = global_grad_norm(params)
    if not math.isfinite(norm):
        bad = [p.name for p in params if p.trainable and not np.all(np.isfinite(p.grad))]
        raise NumericalError(f"non-finite gradient in parameter(s) {bad}")
    if norm > max_norm:
        factor = max_norm / norm
        for p in params:
            if p.trainable:
                p.grad = p.grad * factor
    return norm


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------

@dataclass
class GradcheckReport:
    max_rel_err: dict[str, float]
    tol: float
    h: float
    num_checked: int

    @property
    def passed(self) -> bool:
        return all(e <= self.tol for e in self.max_rel_err.values())

    @property
    def worst(self) -> float:
        return max(self.max_rel_err.values(), default=0.0)

    def summary(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status} max_rel_err={self.worst:.3e}"


def gradcheck(loss_fn: Callable[[Tape], Node], params: Sequence[ParamTensor],
              h: float = 1e-5, tol: float = 1e-6) -> GradcheckReport:
    """Compare analytic gradients against central differences.

    ``loss_fn`` builds the loss on the tape it is given and returns the
    scalar node.  Relative error per entry is
    ``|a - n| / max(1, |a|, |n|)``; the report keeps the max per parameter.
    """
    def evaluate() -> float:
        val = float(loss_fn(Tape()).value)
        if not math.isfinite(val):
            raise NumericalError(f"gradcheck: non-finite loss {val}")
        return val

    for p in params:
        p.zero_grad()
    tape = Tape()
    out = loss_fn(tape)
    if not math.isfinite(float(out.value)):
        raise NumericalError(f"gradcheck: non-finite loss {float(out.value)}")
    tape.backward(out)
    analytic = {p.name: p.grad.copy() for p in params}

    errs = {}
    count = 0
    for p in params:
        flat = p.value.reshape(-1)
        a_flat = analytic[p.name].reshape(-1)
        worst = 0.0
        for k in range(flat.size):
            orig = flat[k]
            flat[k] = orig + h
            fp = evaluate()
            flat[k] = orig - h
            fm = evaluate()
            flat[k] = orig
            num = (fp - fm) / (2.0 * h)
            a = a_flat[k]
            err = abs(a - num) / max(1.0, abs(a), abs(num))
            worst = max(worst, err)
            count += 1
        errs[p.name] = worst
    return GradcheckReport(errs, tol, h, count)


# ---------------------------------------------------------------------------
# checkpoint container
# ---------------------------------------------------------------------------

MAGIC = b"CARF"
VERSION = 1


class CheckpointError(ValueError):
    pass


def save_tensors(path, tensors: dict[str, np.ndarray]) -> None:
    """Write named float64 arrays to the binary checkpoint container.

    Layout: magic ``CARF``, u32 version, then per tensor: u32 name length,
    UTF-8 name, u32 rank, rank x u64 dims, little-endian f64 values.
    """
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", VERSION))
        for name, arr in tensors.items():
            arr = np.asarray(arr, dtype="<f8")
            raw = name.encode("utf-8")
            f.write(struct.pack("<I", len(raw)))
            f.write(raw)
            f.write(struct.pack("<I", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            f.write(np.ascontiguousarray(arr).tobytes())


def load_tensors(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as f:
        data = f.read()
    if data[:4] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {data[:4]!r}")
    if len(data) < 8:
        raise CheckpointError(f"{path}: truncated header")
    (version,) = struct.unpack_from("<I", data, 4)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version} (expected {VERSION})")
    pos = 8
    out = {}
    try:
        while pos < len(data):
            (n,) = struct.unpack_from("<I", data, pos)
            pos += 4
            name = data[pos:pos + n].decode("utf-8")
            pos += n
            (rank,) = struct.unpack_from("<I", data, pos)
            pos += 4
            dims = struct.unpack_from(f"<{rank}Q", data, pos)
            pos += 8 * rank
            count = int(np.prod(dims)) if rank else 1
            if pos + 8 * count > len(data):
                raise CheckpointError(f"{path}: truncated record {name!r}")
            out[name] = np.frombuffer(data, dtype="<f8", count=count, offset=pos).reshape(dims).astype(np.float64)
            pos += 8 * count
    except struct.error as exc:
        raise CheckpointError(f"{path}: truncated record") from exc
    return out


def adam_state_tensors(state: AdamState) -> dict[str, np.ndarray]:
    out = {
        "__adam__/step": np.float64(state.step_count),
        "__adam__/beta1": np.float64(state.beta1),
        "__adam__/beta2": np.float64(state.beta2),
        "__adam__/eps": np.float64(state.eps),
    }
    for name in state.m:
        out[f"__adam__/lr/{name}"] = np.float64(state.lr[name])
        out[f"__adam__/m/{name}"] = state.m[name]
        out[f"__adam__/v/{name}"] = state.v[name]
    return out


def adam_state_from_tensors(tensors: dict[str, np.ndarray]) -> AdamState | None:
    if "__adam__/step" not in tensors:
        return None
    st = AdamState(lr={},
                   beta1=float(tensors["__adam__/beta1"]),
                   beta2=float(tensors["__adam__/beta2"]),
                   eps=float(tensors["__adam__/eps"]),
                   step_count=int(tensors["__adam__/step"]))
    for key, arr in tensors.items():
        if key.startswith("__adam__/m/"):
            name = key[len("__adam__/m/"):]
            st.m[name] = arr.copy()
            st.v[name] = tensors[f"__adam__/v/{name}"].copy()
            st.lr[name] = float(tensors[f"__adam__/lr/{name}"])
    return st
