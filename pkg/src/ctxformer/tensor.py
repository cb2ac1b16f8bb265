"""Dense float64 tensors with reverse-mode automatic differentiation.

The engine is a define-by-run tape: every operation executed while a
:class:`Graph` is active appends a backward closure to that graph, and
:func:`backward` replays the tape in reverse to fill ``.grad`` on every
tensor that requires one.  Storage is always a C-contiguous float64
``numpy`` array, so the flat row-major layout assumed by checkpointing is
the layout in memory.

Broadcasting is deliberately narrow: binary ops accept equal shapes, a
python scalar, or an (n, 1) second operand against an (n, d) first one.
That is exactly what the gated context mixing needs; anything wider is a
shape error rather than a silent numpy broadcast.
"""

from __future__ import annotations

import threading
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import EmptyInputError, ShapeError

MASK_SENTINEL = -1e9

_STATE = threading.local()


def _stack() -> list:
    stack = getattr(_STATE, "stack", None)
    if stack is None:
        stack = []
        _STATE.stack = stack
    return stack


def active_graph() -> "Graph | None":
    stack = _stack()
    return stack[-1] if stack else None


class Tensor:
    """A dense float64 array, optionally carrying a gradient."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim and not arr.flags["C_CONTIGUOUS"]:
            arr = np.ascontiguousarray(arr)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # operator sugar; all arithmetic goes through the module-level ops so
    # everything lands on the active tape
    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)

    def __add__(self, other) -> "Tensor":
        return add(self, other)

    def __radd__(self, other) -> "Tensor":
        return add(self, other)

    def __sub__(self, other) -> "Tensor":
        return sub(self, other)

    def __rsub__(self, other) -> "Tensor":
        # scalar - tensor, used for the (1 - lambda) side of the gate
        return add(scale(self, -1.0), float(other))

    def __mul__(self, other) -> "Tensor":
        return mul(self, other)

    def __rmul__(self, other) -> "Tensor":
        return mul(self, other)

    def __neg__(self) -> "Tensor":
        return scale(self, -1.0)


class Graph:
    """Execution-ordered record of operations for one forward pass.

    Entries are appended as ops run, so the list is topologically ordered
    by construction.  Use as a context manager around the forward pass;
    graphs on different threads do not interact.
    """

    __slots__ = ("_nodes",)

    def __init__(self):
        self._nodes: list[tuple[Tensor, Callable[[np.ndarray], None]]] = []

    def __enter__(self) -> "Graph":
        _stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> bool:
        _stack().pop()
        return False

    def __len__(self) -> int:
        return len(self._nodes)

    def _push(self, out: Tensor, backward_fn: Callable[[np.ndarray], None]) -> None:
        self._nodes.append((out, backward_fn))


def backward(loss: Tensor, graph: Graph) -> None:
    """Populate ``.grad`` of every requires_grad tensor reachable from loss.

    Gradients accumulate: a tensor used twice receives the sum of both
    contributions, and parameters keep adding across separate
    forward/backward rounds until their grads are cleared.  Call this once
    per recorded graph (graphs are rebuilt every forward pass).
    """
    if loss.data.ndim != 0:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss.grad is None:
        loss.grad = np.ones((), dtype=np.float64)
    for out, backward_fn in reversed(graph._nodes):
        if out.grad is not None:
            backward_fn(out.grad)


def zero_grads(tensors: Iterable[Tensor]) -> None:
    for t in tensors:
        t.grad = None


def _accum(t: Tensor, g: np.ndarray) -> None:
    if t.grad is None:
        t.grad = np.array(g, dtype=np.float64, copy=True)
    else:
        t.grad += g


def _result(data: np.ndarray, *inputs: Tensor) -> tuple[Tensor, Graph | None]:
    graph = active_graph()
    if graph is not None and any(t.requires_grad for t in inputs):
        return Tensor(data, requires_grad=True), graph
    return Tensor(data, requires_grad=False), None


def fused_op(out_data: np.ndarray, inputs: tuple, make_backward) -> Tensor:
    """Record a hand-fused operation as a single tape node.

    ``make_backward(out)`` is called only when recording is active and must
    return a closure ``bw(g)`` that accumulates into the inputs via
    :func:`accumulate_grad`.  Used by composite kernels (multi-head
    attention, gated mixing) whose op-by-op form would dominate tape
    overhead at small model sizes.
    """
    out, graph = _result(out_data, *inputs)
    if graph is not None:
        graph._push(out, make_backward(out))
    return out


def accumulate_grad(t: Tensor, g: np.ndarray) -> None:
    _accum(t, g)


# ---------------------------------------------------------------------------
# core ops


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of two 2-D tensors."""
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    out, graph = _result(a.data @ b.data, a, b)
    if graph is not None:
        ad, bd = a.data, b.data

        def bw(g: np.ndarray) -> None:
            if a.requires_grad:
                _accum(a, g @ bd.T)
            if b.requires_grad:
                _accum(b, ad.T @ g)

        graph._push(out, bw)
    return out


def _binary_mode(a: Tensor, b) -> str:
    """Classify a binary op's second operand: 'scalar', 'equal' or 'col'."""
    if isinstance(b, (int, float)):
        return "scalar"
    if not isinstance(b, Tensor):
        raise TypeError(f"expected Tensor or scalar, got {type(b).__name__}")
    if a.shape == b.shape:
        return "equal"
    if (
        a.data.ndim == 2
        and b.data.ndim == 2
        and b.shape == (a.shape[0], 1)
        and a.shape[1] >= 1
    ):
        return "col"
    raise ShapeError(f"cannot broadcast {b.shape} against {a.shape}")


def add(a: Tensor, b) -> Tensor:
    mode = _binary_mode(a, b)
    out_data = a.data + (b if mode == "scalar" else b.data)
    out, graph = _result(out_data, *( (a,) if mode == "scalar" else (a, b) ))
    if graph is not None:

        def bw(g: np.ndarray) -> None:
            if a.requires_grad:
                _accum(a, g)
            if mode != "scalar" and b.requires_grad:
                _accum(b, g.sum(axis=1, keepdims=True) if mode == "col" else g)

        graph._push(out, bw)
    return out


def sub(a: Tensor, b) -> Tensor:
    mode = _binary_mode(a, b)
    out_data = a.data - (b if mode == "scalar" else b.data)
    out, graph = _result(out_data, *( (a,) if mode == "scalar" else (a, b) ))
    if graph is not None:

        def bw(g: np.ndarray) -> None:
            if a.requires_grad:
                _accum(a, g)
            if mode != "scalar" and b.requires_grad:
                _accum(b, -(g.sum(axis=1, keepdims=True) if mode == "col" else g))

        graph._push(out, bw)
    return out


def mul(a: Tensor, b) -> Tensor:
    mode = _binary_mode(a, b)
    out_data = a.data * (b if mode == "scalar" else b.data)
    out, graph = _result(out_data, *( (a,) if mode == "scalar" else (a, b) ))
    if graph is not None:
        ad = a.data
        bd = b if mode == "scalar" else b.data

        def bw(g: np.ndarray) -> None:
            if a.requires_grad:
                _accum(a, g * bd)
            if mode != "scalar" and b.requires_grad:
                gb = g * ad
                _accum(b, gb.sum(axis=1, keepdims=True) if mode == "col" else gb)

        graph._push(out, bw)
    return out


def scale(a: Tensor, s: float) -> Tensor:
    return mul(a, float(s))


_SIGMOID_LO = np.nextafter(0.0, 1.0)
_SIGMOID_HI = np.nextafter(1.0, 0.0)


def sigmoid(a: Tensor) -> Tensor:
    """Logistic sigmoid, computed on the stable branch for either sign.

    The output is clamped into the open interval (0, 1) at float64
    resolution, so extreme scores cannot collapse a gate to exactly 0 or 1.
    """
    x = a.data
    out_data = np.empty_like(x)
    pos = x >= 0
    out_data[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out_data[~pos] = ex / (1.0 + ex)
    np.clip(out_data, _SIGMOID_LO, _SIGMOID_HI, out=out_data)
    out, graph = _result(out_data, a)
    if graph is not None:
        y = out_data

        def bw(g: np.ndarray) -> None:
            _accum(a, g * y * (1.0 - y))

        graph._push(out, bw)
    return out


def relu(a: Tensor) -> Tensor:
    out, graph = _result(np.maximum(a.data, 0.0), a)
    if graph is not None:
        mask = a.data > 0

        def bw(g: np.ndarray) -> None:
            _accum(a, g * mask)

        graph._push(out, bw)
    return out


def transpose(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise ShapeError(f"transpose expects a 2-D tensor, got {a.shape}")
    out, graph = _result(a.data.T.copy(), a)
    if graph is not None:

        def bw(g: np.ndarray) -> None:
            _accum(a, g.T)

        graph._push(out, bw)
    return out


def softmax_rows(x: Tensor) -> Tensor:
    """Row-wise softmax, stabilized by subtracting each row's max."""
    if x.data.ndim != 2:
        raise ShapeError(f"softmax_rows expects a 2-D tensor, got {x.shape}")
    shifted = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=1, keepdims=True)
    out, graph = _result(out_data, x)
    if graph is not None:
        y = out_data

        def bw(g: np.ndarray) -> None:
            # dX = Y * (g - sum(g * Y, rows))
            _accum(x, y * (g - (g * y).sum(axis=1, keepdims=True)))

        graph._push(out, bw)
    return out


def masked_mean_rows(x: Tensor, mask: Sequence[bool] | np.ndarray) -> Tensor:
    """Mean of the rows selected by a boolean mask, as a 1-D tensor."""
    if x.data.ndim != 2:
        raise ShapeError(f"masked_mean_rows expects a 2-D tensor, got {x.shape}")
    m = np.asarray(mask, dtype=bool)
    if m.shape != (x.shape[0],):
        raise ShapeError(f"mask shape {m.shape} does not match {x.shape[0]} rows")
    count = int(m.sum())
    if count == 0:
        raise EmptyInputError("masked_mean_rows: mask selects no rows")
    out, graph = _result(x.data[m].mean(axis=0), x)
    if graph is not None:

        def bw(g: np.ndarray) -> None:
            gx = np.zeros_like(x.data)
            gx[m] = g / count
            _accum(x, gx)

        graph._push(out, bw)
    return out


def prefix_mean_rows(x: Tensor) -> Tensor:
    """Running mean over rows: output row t is the mean of rows 0..t."""
    if x.data.ndim != 2:
        raise ShapeError(f"prefix_mean_rows expects a 2-D tensor, got {x.shape}")
    n = x.shape[0]
    counts = np.arange(1, n + 1, dtype=np.float64)[:, None]
    out, graph = _result(np.cumsum(x.data, axis=0) / counts, x)
    if graph is not None:

        def bw(g: np.ndarray) -> None:
            # x_j feeds every prefix t >= j with weight 1/(t+1)
            w = g / counts
            _accum(x, np.flip(np.cumsum(np.flip(w, axis=0), axis=0), axis=0))

        graph._push(out, bw)
    return out


def concat_last_dim(parts: Sequence[Tensor]) -> Tensor:
    """Concatenate along the last dimension (2-D rows or 1-D vectors)."""
    if len(parts) == 0:
        raise EmptyInputError("concat_last_dim: empty part list")
    ndim = parts[0].data.ndim
    if any(p.data.ndim != ndim for p in parts):
        raise ShapeError("concat_last_dim: mixed ranks")
    if ndim == 2:
        n = parts[0].shape[0]
        for p in parts:
            if p.shape[0] != n:
                raise ShapeError(
                    f"concat_last_dim: leading dims differ ({n} vs {p.shape[0]})"
                )
    elif ndim != 1:
        raise ShapeError("concat_last_dim supports 1-D and 2-D tensors only")
    if len(parts) == 1:
        p = parts[0]
        out, graph = _result(p.data.copy(), p)
        if graph is not None:
            graph._push(out, lambda g, p=p: _accum(p, g))
        return out
    out_data = np.concatenate([p.data for p in parts], axis=-1)
    out, graph = _result(out_data, *parts)
    if graph is not None:
        widths = [p.shape[-1] for p in parts]

        def bw(g: np.ndarray) -> None:
            lo = 0
            for p, w in zip(parts, widths):
                if p.requires_grad:
                    _accum(p, g[..., lo : lo + w])
                lo += w

        graph._push(out, bw)
    return out


def slice_cols(x: Tensor, lo: int, hi: int) -> Tensor:
    """Contiguous column slice [lo, hi) of a 2-D tensor."""
    if x.data.ndim != 2 or not (0 <= lo < hi <= x.shape[1]):
        raise ShapeError(f"slice_cols[{lo}:{hi}] invalid for shape {x.shape}")
    out, graph = _result(x.data[:, lo:hi].copy(), x)
    if graph is not None:

        def bw(g: np.ndarray) -> None:
            gx = np.zeros_like(x.data)
            gx[:, lo:hi] = g
            _accum(x, gx)

        graph._push(out, bw)
    return out


def broadcast_rows(v: Tensor, n: int) -> Tensor:
    """Materialize a 1-D vector as n identical rows."""
    if v.data.ndim != 1:
        raise ShapeError(f"broadcast_rows expects a 1-D tensor, got {v.shape}")
    if n < 1:
        raise ShapeError("broadcast_rows: n must be >= 1")
    out, graph = _result(np.tile(v.data, (n, 1)), v)
    if graph is not None:

        def bw(g: np.ndarray) -> None:
            _accum(v, g.sum(axis=0))

        graph._push(out, bw)
    return out


def gather_rows(table: Tensor, ids: Sequence[int] | np.ndarray) -> Tensor:
    """Row lookup (embedding): out[i] = table[ids[i]]."""
    if table.data.ndim != 2:
        raise ShapeError(f"gather_rows expects a 2-D table, got {table.shape}")
    idx = np.asarray(ids, dtype=np.int64)
    out, graph = _result(table.data[idx], table)
    if graph is not None:

        def bw(g: np.ndarray) -> None:
            gt = np.zeros_like(table.data)
            np.add.at(gt, idx, g)
            _accum(table, gt)

        graph._push(out, bw)
    return out


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-6) -> Tensor:
    """Row-wise normalization to zero mean / unit variance, then affine.

    Uses the population variance plus eps, so a constant row maps to the
    bias exactly.
    """
    if x.data.ndim != 2:
        raise ShapeError(f"layer_norm expects a 2-D tensor, got {x.shape}")
    d = x.shape[1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(
            f"layer_norm: gain {gain.shape} / bias {bias.shape} do not match width {d}"
        )
    if eps <= 0:
        raise ValueError("layer_norm: eps must be positive")
    mu = x.data.mean(axis=1, keepdims=True)
    var = ((x.data - mu) ** 2).mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out, graph = _result(xhat * gain.data + bias.data, x, gain, bias)
    if graph is not None:

        def bw(g: np.ndarray) -> None:
            if gain.requires_grad:
                _accum(gain, (g * xhat).sum(axis=0))
            if bias.requires_grad:
                _accum(bias, g.sum(axis=0))
            if x.requires_grad:
                gh = g * gain.data
                _accum(
                    x,
                    inv
                    * (
                        gh
                        - gh.mean(axis=1, keepdims=True)
                        - xhat * (gh * xhat).mean(axis=1, keepdims=True)
                    ),
                )

        graph._push(out, bw)
    return out


def cross_entropy_from_logits(
    logits: Tensor, targets: Sequence[int] | np.ndarray, ignore_id: int
) -> Tensor:
    """Mean negative log-likelihood over positions whose target != ignore_id."""
    if logits.data.ndim != 2:
        raise ShapeError(f"cross_entropy expects 2-D logits, got {logits.shape}")
    tgt = np.asarray(targets, dtype=np.int64)
    if tgt.shape != (logits.shape[0],):
        raise ShapeError(
            f"cross_entropy: {tgt.shape[0] if tgt.ndim else 0} targets for "
            f"{logits.shape[0]} rows"
        )
    vocab = logits.shape[1]
    keep = tgt != ignore_id
    count = int(keep.sum())
    if count == 0:
        raise EmptyInputError("cross_entropy: every position is ignored")
    if np.any((tgt[keep] < 0) | (tgt[keep] >= vocab)):
        raise ValueError("cross_entropy: target id outside [0, vocab)")
    x = logits.data
    m = x.max(axis=1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(x - m).sum(axis=1))
    rows = np.nonzero(keep)[0]
    losses = lse[rows] - x[rows, tgt[rows]]
    out, graph = _result(np.float64(losses.sum() / count), logits)
    if graph is not None:
        probs = np.exp(x - m)
        probs /= probs.sum(axis=1, keepdims=True)

        def bw(g: np.ndarray) -> None:
            gl = np.zeros_like(x)
            gl[rows] = probs[rows]
            gl[rows, tgt[rows]] -= 1.0
            _accum(logits, gl * (g / count))

        graph._push(out, bw)
    return out


def mean_all(x: Tensor) -> Tensor:
    """Mean over all entries, as a scalar tensor."""
    out, graph = _result(np.float64(x.data.mean()), x)
    if graph is not None:
        n = x.data.size

        def bw(g: np.ndarray) -> None:
            _accum(x, np.full_like(x.data, g / n))

        graph._push(out, bw)
    return out


def sum_all(x: Tensor) -> Tensor:
    """Sum over all entries, as a scalar tensor."""
    out, graph = _result(np.float64(x.data.sum()), x)
    if graph is not None:

        def bw(g: np.ndarray) -> None:
            _accum(x, np.full_like(x.data, g))

        graph._push(out, bw)
    return out


def dropout(x: Tensor, p: float, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout; identity when p == 0 or no generator is supplied."""
    if rng is None or p <= 0.0:
        return x
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {p}")
    keep = (rng.random(x.shape) >= p) / (1.0 - p)
    return mul(x, Tensor(keep))
