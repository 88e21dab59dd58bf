"""Dense float64 tensors with tape-based reverse-mode differentiation.

Everything here is plain numpy under the hood. A ``GradTape`` records the
operations executed while it is active (``with GradTape() as tape:``) and
``backward`` replays them in reverse to accumulate gradients. Tensors are
immutable values except for the explicit ``assign`` hook that optimizers use
to write updated parameters back in place.
"""

from __future__ import annotations

import threading

import numpy as np

from .errors import ConfigError, NumericError, ShapeError

_STATE = threading.local()


def _active_tape():
    return getattr(_STATE, "tape", None)


class Tensor:
    """N-dimensional float64 array, optionally attached to a gradient tape."""

    __slots__ = ("data", "requires_grad", "tape_id", "_tape")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.tape_id = None
        self._tape = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() requires a scalar, got shape {self.shape}")
        return float(self.data)

    def assign(self, values) -> None:
        """Overwrite the stored values; the shape must not change."""
        arr = np.asarray(values, dtype=np.float64)
        if arr.shape != self.data.shape:
            raise ShapeError(f"assign shape {arr.shape} != tensor shape {self.data.shape}")
        self.data = arr

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        head = np.array2string(self.data.reshape(-1)[:4], precision=5)
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}, data={head}...)"


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class _Node:
    __slots__ = ("tag", "parents", "backward")

    def __init__(self, tag, parents, backward):
        self.tag = tag
        self.parents = parents
        self.backward = backward


class GradTape:
    """Append-only record of differentiable operations.

    ``nodes`` grows in topological order by construction; ``gradients`` maps
    node id -> Tensor once ``backward`` has run. A tape can be consumed by
    ``backward`` exactly once.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self.gradients: dict[int, Tensor] = {}
        self._consumed = False
        self._prev = None

    def __enter__(self):
        self._prev = _active_tape()
        _STATE.tape = self
        return self

    def __exit__(self, *exc):
        _STATE.tape = self._prev
        self._prev = None
        return False

    def _append(self, tag, parents, backward) -> int:
        self.nodes.append(_Node(tag, parents, backward))
        return len(self.nodes) - 1

    def _node_for(self, t) -> int | None:
        """Node id of ``t`` on this tape; leaves get watched on first use."""
        if not isinstance(t, Tensor):
            return None
        if t._tape is self and t.tape_id is not None:
            return t.tape_id
        if t.requires_grad:
            nid = self._append("leaf", (), None)
            t.tape_id = nid
            t._tape = self
            return nid
        return None

    def grad(self, t: Tensor) -> Tensor | None:
        """Gradient recorded for ``t`` by the last backward pass, if any."""
        if t._tape is self and t.tape_id is not None:
            return self.gradients.get(t.tape_id)
        return None


def _record(tag, out_data, parents, backward_fn) -> Tensor:
    out_data = np.asarray(out_data, dtype=np.float64)
    if not np.all(np.isfinite(out_data)):
        raise NumericError(f"operation '{tag}' produced non-finite values")
    out = Tensor(out_data)
    tape = _active_tape()
    if tape is not None:
        pids = tuple(tape._node_for(p) for p in parents)
        if any(pid is not None for pid in pids):
            out.tape_id = tape._append(tag, pids, backward_fn)
            out._tape = tape
            out.requires_grad = True
    return out


def backward(root: Tensor, tape: GradTape) -> dict[int, Tensor]:
    """Reverse sweep from a scalar ``root``; returns node id -> gradient.

    A constant root that never touched the tape yields an empty map. Running
    backward twice on one tape raises: gradients never silently accumulate
    across calls.
    """
    if root.size != 1:
        raise ShapeError(f"backward root must be scalar, got shape {root.shape}")
    if tape._consumed:
        raise RuntimeError("backward was already called on this tape; build a new tape")
    tape._consumed = True
    if root.tape_id is None:
        if root._tape is not None and root._tape is not tape:
            raise ValueError("root tensor is not on this tape")
        return {}
    if root._tape is not tape or root.tape_id >= len(tape.nodes):
        raise ValueError("root tensor is not on this tape")

    grads: dict[int, np.ndarray] = {root.tape_id: np.ones(root.shape)}
    for nid in range(root.tape_id, -1, -1):
        g = grads.get(nid)
        if g is None:
            continue
        node = tape.nodes[nid]
        if node.backward is None:
            continue
        needed = tuple(pid is not None for pid in node.parents)
        parts = node.backward(g, needed)
        for pid, part in zip(node.parents, parts):
            if pid is None or part is None:
                continue
            acc = grads.get(pid)
            grads[pid] = part if acc is None else acc + part
    tape.gradients = {nid: Tensor(arr) for nid, arr in grads.items()}
    return tape.gradients


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, extent in enumerate(shape):
        if extent == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g.reshape(shape)


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data + b.data

    def back(g, needed):
        ga = _unbroadcast(g, a.data.shape) if needed[0] else None
        gb = _unbroadcast(g, b.data.shape) if needed[1] else None
        return ga, gb

    return _record("add", out, (a, b), back)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data - b.data

    def back(g, needed):
        ga = _unbroadcast(g, a.data.shape) if needed[0] else None
        gb = _unbroadcast(-g, b.data.shape) if needed[1] else None
        return ga, gb

    return _record("sub", out, (a, b), back)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data * b.data
    ad, bd = a.data, b.data

    def back(g, needed):
        ga = _unbroadcast(g * bd, ad.shape) if needed[0] else None
        gb = _unbroadcast(g * ad, bd.shape) if needed[1] else None
        return ga, gb

    return _record("mul", out, (a, b), back)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    out = a.data @ b.data
    ad, bd = a.data, b.data

    def back(g, needed):
        ga = g @ bd.T if needed[0] else None
        gb = ad.T @ g if needed[1] else None
        return ga, gb

    return _record("matmul", out, (a, b), back)


def affine(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Vector linear layer: ``x[din] @ w[din,dout] (+ b[dout])``."""
    x, w = _as_tensor(x), _as_tensor(w)
    if x.ndim != 1 or w.ndim != 2 or x.shape[0] != w.shape[0]:
        raise ShapeError(f"affine shape mismatch: x {x.shape}, w {w.shape}")
    out = x.data @ w.data
    if b is not None:
        b = _as_tensor(b)
        if b.shape != (w.shape[1],):
            raise ShapeError(f"affine bias shape {b.shape} != ({w.shape[1]},)")
        out = out + b.data
    xd, wd = x.data, w.data

    def back(g, needed):
        gx = g @ wd.T if needed[0] else None
        gw = np.outer(xd, g) if needed[1] else None
        gb = g if (b is not None and needed[2]) else None
        return (gx, gw, gb) if b is not None else (gx, gw)

    parents = (x, w, b) if b is not None else (x, w)
    return _record("affine", out, parents, back)


def reshape(x: Tensor, shape) -> Tensor:
    x = _as_tensor(x)
    shape = tuple(int(s) for s in shape)
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"cannot reshape {x.shape} to {shape}: {exc}") from None
    src_shape = x.data.shape

    def back(g, needed):
        return (g.reshape(src_shape),)

    return _record("reshape", out, (x,), back)


def flatten(x: Tensor) -> Tensor:
    """Row-major flatten to a 1-D vector (inverse of reshape to the source shape)."""
    x = _as_tensor(x)
    return reshape(x, (x.size,))


def sum_(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    shape = x.data.shape

    def back(g, needed):
        return (np.full(shape, float(g)),)

    return _record("sum", np.asarray(x.data.sum()), (x,), back)


def mean_(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    shape = x.data.shape
    n = x.data.size

    def back(g, needed):
        return (np.full(shape, float(g) / n),)

    return _record("mean", np.asarray(x.data.mean()), (x,), back)


def stack_rows(rows) -> Tensor:
    """Stack equal-length 1-D tensors into a 2-D matrix, one per row."""
    rows = [_as_tensor(r) for r in rows]
    if not rows:
        raise ShapeError("stack_rows needs at least one row")
    width = rows[0].shape
    for r in rows:
        if r.ndim != 1 or r.shape != width:
            raise ShapeError(f"stack_rows got inconsistent row shapes {width} vs {r.shape}")
    out = np.stack([r.data for r in rows])

    def back(g, needed):
        return tuple(g[i] if needed[i] else None for i in range(len(rows)))

    return _record("stack_rows", out, tuple(rows), back)


def activation(x: Tensor, kind: str) -> Tensor:
    x = _as_tensor(x)
    xd = x.data
    if kind == "relu":
        out = np.maximum(xd, 0.0)

        def back(g, needed):
            return (g * (xd > 0.0),)

    elif kind == "sigmoid":
        out = np.empty_like(xd)
        pos = xd >= 0
        with np.errstate(over="ignore"):
            out[pos] = 1.0 / (1.0 + np.exp(-xd[pos]))
            ex = np.exp(xd[~pos])
            out[~pos] = ex / (1.0 + ex)
        y = out

        def back(g, needed):
            return (g * y * (1.0 - y),)

    elif kind == "tanh":
        out = np.tanh(xd)
        y = out

        def back(g, needed):
            return (g * (1.0 - y * y),)

    else:
        raise ConfigError(f"unknown activation kind '{kind}'")
    return _record(f"activation:{kind}", out, (x,), back)


def relu(x: Tensor) -> Tensor:
    return activation(x, "relu")


def sigmoid(x: Tensor) -> Tensor:
    return activation(x, "sigmoid")


def tanh(x: Tensor) -> Tensor:
    return activation(x, "tanh")


def softmax(x: Tensor) -> Tensor:
    """Max-subtracted exponential normalization over the last axis."""
    x = _as_tensor(x)
    if x.ndim < 1 or x.shape[-1] < 1:
        raise ShapeError(f"softmax needs a non-empty last axis, got shape {x.shape}")
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def back(g, needed):
        dot = (g * y).sum(axis=-1, keepdims=True)
        return (y * (g - dot),)

    return _record("softmax", y, (x,), back)


def log_softmax_values(logits: np.ndarray) -> np.ndarray:
    """Numerically stable log-softmax over the last axis (plain numpy, no tape)."""
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def cross_entropy(logits: Tensor, targets, ignore_id: int | None = None) -> Tensor:
    """Mean negative log-likelihood of ``targets`` under ``softmax(logits)``.

    Rows whose target equals ``ignore_id`` contribute nothing to the value or
    the gradient; if every row is ignored the loss is exactly 0.
    """
    logits = _as_tensor(logits)
    if logits.ndim != 2:
        raise ShapeError(f"cross_entropy expects [batch, vocab] logits, got {logits.shape}")
    t = np.asarray(list(targets) if not isinstance(targets, np.ndarray) else targets, dtype=np.int64)
    if t.ndim != 1 or len(t) != logits.shape[0]:
        raise ShapeError(f"targets length {t.shape} does not match logits rows {logits.shape[0]}")
    n_rows, vocab = logits.shape
    keep = np.ones(n_rows, dtype=bool) if ignore_id is None else (t != ignore_id)
    kept_targets = t[keep]
    if kept_targets.size and (kept_targets.min() < 0 or kept_targets.max() >= vocab):
        bad = kept_targets[(kept_targets < 0) | (kept_targets >= vocab)][0]
        raise IndexError(f"target id {bad} out of range [0, {vocab})")

    if kept_targets.size == 0:
        full_shape = logits.data.shape

        def back_zero(g, needed):
            return (np.zeros(full_shape),)

        return _record("cross_entropy", np.asarray(0.0), (logits,), back_zero)

    logp = log_softmax_values(logits.data[keep])
    rows = np.arange(kept_targets.size)
    value = -logp[rows, kept_targets].mean()
    probs = np.exp(logp)
    n_kept = kept_targets.size
    full_shape = logits.data.shape

    def back(g, needed):
        gk = probs.copy()
        gk[rows, kept_targets] -= 1.0
        gk *= float(g) / n_kept
        out = np.zeros(full_shape)
        out[keep] = gk
        return (out,)

    return _record("cross_entropy", np.asarray(value), (logits,), back)


def dropout(x: Tensor, p: float, mode: str, rng: np.random.Generator | None = None) -> Tensor:
    """Inverted dropout: train-mode survivors are scaled by 1/(1-p)."""
    if not 0.0 <= p < 1.0:
        raise ConfigError(f"dropout probability must satisfy 0 <= p < 1, got {p}")
    if mode not in ("train", "eval"):
        raise ConfigError(f"dropout mode must be 'train' or 'eval', got '{mode}'")
    x = _as_tensor(x)
    if mode == "eval" or p == 0.0:
        return x
    if rng is None:
        raise ConfigError("train-mode dropout requires an explicit rng")
    scale = (rng.random(x.data.shape) >= p) / (1.0 - p)

    def back(g, needed):
        return (g * scale,)

    return _record("dropout", x.data * scale, (x,), back)


_COL_INDEX_CACHE: dict[tuple, tuple] = {}


def _im2col_indices(channels, kh, kw, out_h, out_w, stride):
    key = (channels, kh, kw, out_h, out_w, stride)
    cached = _COL_INDEX_CACHE.get(key)
    if cached is not None:
        return cached
    i0 = np.tile(np.repeat(np.arange(kh), kw), channels)
    j0 = np.tile(np.arange(kw), kh * channels)
    i1 = stride * np.repeat(np.arange(out_h), out_w)
    j1 = stride * np.tile(np.arange(out_w), out_h)
    i = i0.reshape(-1, 1) + i1.reshape(1, -1)
    j = j0.reshape(-1, 1) + j1.reshape(1, -1)
    k = np.repeat(np.arange(channels), kh * kw).reshape(-1, 1)
    _COL_INDEX_CACHE[key] = (k, i, j)
    return k, i, j


def conv2d(x: Tensor, kernels: Tensor, bias: Tensor, stride: int = 1, padding: str = "same") -> Tensor:
    """2-D cross-correlation (no kernel flip) with per-filter bias.

    ``x`` is [C,H,W], ``kernels`` [F,C,kh,kw], ``bias`` [F]. Same padding with
    stride 1 preserves H and W for odd kernels; output extent follows
    floor((H + 2*pad - kh)/stride) + 1.
    """
    x, kernels, bias = _as_tensor(x), _as_tensor(kernels), _as_tensor(bias)
    if x.ndim != 3 or kernels.ndim != 4 or bias.ndim != 1:
        raise ShapeError(
            f"conv2d expects x[C,H,W], kernels[F,C,kh,kw], bias[F]; "
            f"got {x.shape}, {kernels.shape}, {bias.shape}"
        )
    c_in, h, w = x.shape
    n_f, c_k, kh, kw = kernels.shape
    if c_k != c_in or bias.shape[0] != n_f:
        raise ShapeError(f"conv2d channel mismatch: input {x.shape}, kernels {kernels.shape}")
    if not isinstance(stride, int) or stride < 1:
        raise ConfigError(f"conv2d stride must be a positive int, got {stride}")
    if padding == "same":
        ph, pw = (kh - 1) // 2, (kw - 1) // 2
    elif padding == "valid":
        ph = pw = 0
    else:
        raise ConfigError(f"conv2d padding must be 'same' or 'valid', got '{padding}'")
    if kh > h + 2 * ph or kw > w + 2 * pw:
        raise ShapeError(
            f"conv2d kernel {kh}x{kw} larger than padded input {h + 2 * ph}x{w + 2 * pw}"
        )
    out_h = (h + 2 * ph - kh) // stride + 1
    out_w = (w + 2 * pw - kw) // stride + 1

    xp = np.pad(x.data, ((0, 0), (ph, ph), (pw, pw))) if (ph or pw) else x.data
    k_idx, i_idx, j_idx = _im2col_indices(c_in, kh, kw, out_h, out_w, stride)
    cols = xp[k_idx, i_idx, j_idx]
    k2 = kernels.data.reshape(n_f, -1)
    out = (k2 @ cols + bias.data[:, None]).reshape(n_f, out_h, out_w)
    pad_shape = xp.shape

    def back(g, needed):
        g2 = g.reshape(n_f, -1)
        gk = (g2 @ cols.T).reshape(n_f, c_in, kh, kw) if needed[1] else None
        gb = g2.sum(axis=1) if needed[2] else None
        gx = None
        if needed[0]:
            dcols = k2.T @ g2
            gxp = np.zeros(pad_shape)
            np.add.at(gxp, (k_idx, i_idx, j_idx), dcols)
            gx = gxp[:, ph:ph + h, pw:pw + w]
        return gx, gk, gb

    return _record("conv2d", out, (x, kernels, bias), back)


def maxpool2d(x: Tensor) -> Tensor:
    """2x2 max pooling with stride 2; odd extents are padded high with -inf.

    Backward routes each gradient to the window's argmax only, first element
    in row-major order on ties.
    """
    x = _as_tensor(x)
    if x.ndim != 3:
        raise ShapeError(f"maxpool2d expects [C,H,W], got {x.shape}")
    c, h, w = x.shape
    hp, wp = h + h % 2, w + w % 2
    if (hp, wp) != (h, w):
        xp = np.full((c, hp, wp), -np.inf)
        xp[:, :h, :w] = x.data
    else:
        xp = x.data
    h2, w2 = hp // 2, wp // 2
    windows = xp.reshape(c, h2, 2, w2, 2).transpose(0, 1, 3, 2, 4).reshape(c, h2, w2, 4)
    arg = windows.argmax(axis=3)
    out = np.take_along_axis(windows, arg[..., None], axis=3)[..., 0]

    def back(g, needed):
        gw = np.zeros((c, h2, w2, 4))
        np.put_along_axis(gw, arg[..., None], g[..., None], axis=3)
        gxp = gw.reshape(c, h2, w2, 2, 2).transpose(0, 1, 3, 2, 4).reshape(c, hp, wp)
        return (gxp[:, :h, :w],)

    return _record("maxpool2d", out, (x,), back)


def embedding_lookup(table: Tensor, ids) -> Tensor:
    """Gather rows of ``table`` by id; backward scatter-adds onto the table."""
    table = _as_tensor(table)
    if table.ndim != 2:
        raise ShapeError(f"embedding table must be 2-D, got {table.shape}")
    ids = np.asarray(list(ids), dtype=np.int64)
    if ids.ndim != 1:
        raise ShapeError(f"embedding ids must be a flat sequence, got shape {ids.shape}")
    vocab = table.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= vocab):
        bad = ids[(ids < 0) | (ids >= vocab)][0]
        raise IndexError(f"embedding id {bad} out of range [0, {vocab})")
    out = table.data[ids]
    table_shape = table.data.shape

    def back(g, needed):
        gt = np.zeros(table_shape)
        np.add.at(gt, ids, g)
        return (gt,)

    return _record("embedding", out, (table,), back)
