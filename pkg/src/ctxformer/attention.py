"""Scaled dot-product and multi-head attention with boolean masking.

Masking is additive: disallowed key positions get a -1e9 bias before the
softmax, which keeps the whole path differentiable.  Single-head attention
scales by the square root of the width of the tensors actually passed in;
multi-head attention splits the model dimension into contiguous head
slices and scales each head by sqrt(d_head).
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property
import math

import numpy as np

from .errors import ConfigError, EmptyInputError, ShapeError
from .tensor import (
    MASK_SENTINEL,
    Tensor,
    accumulate_grad,
    add,
    fused_op,
    matmul,
    scale,
    softmax_rows,
    transpose,
)


@dataclass(frozen=True)
class AttentionMask:
    """Boolean allow-matrix over (query, key) pairs."""

    allowed: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.allowed, dtype=bool)
        if arr.ndim != 2:
            raise ShapeError(f"mask must be 2-D, got shape {arr.shape}")
        object.__setattr__(self, "allowed", arr)

    @cached_property
    def bias(self) -> np.ndarray:
        return np.where(self.allowed, 0.0, MASK_SENTINEL)

    def check_rows(self) -> None:
        if not self.allowed.any(axis=1).all():
            bad = int(np.nonzero(~self.allowed.any(axis=1))[0][0])
            raise EmptyInputError(f"mask row {bad} allows no keys")


@dataclass(frozen=True)
class HeadConfig:
    d_model: int
    n_heads: int

    def __post_init__(self):
        if self.d_model <= 0 or self.n_heads <= 0 or self.d_model % self.n_heads != 0:
            raise ConfigError(
                f"d_model={self.d_model} not divisible into {self.n_heads} heads"
            )

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads


def make_causal_mask(n: int) -> AttentionMask:
    """Lower-triangular mask: position i may attend to positions <= i."""
    if n < 1:
        raise EmptyInputError("causal mask needs n >= 1")
    return AttentionMask(np.tril(np.ones((n, n), dtype=bool)))


def project_qkv(
    h: Tensor, w_q: Tensor, w_k: Tensor, w_v: Tensor
) -> tuple[Tensor, Tensor, Tensor]:
    """Linear query/key/value projections of the input states."""
    return matmul(h, w_q), matmul(h, w_k), matmul(h, w_v)


def scaled_dot_attention(
    q: Tensor, k: Tensor, v: Tensor, mask: AttentionMask | None = None
) -> tuple[Tensor, Tensor]:
    """Attention output and weights, scaled by sqrt of the passed-in width."""
    if q.shape[1] != k.shape[1]:
        raise ShapeError(f"query width {q.shape} vs key width {k.shape}")
    if k.shape[0] != v.shape[0]:
        raise ShapeError(f"key count {k.shape} vs value count {v.shape}")
    scores = scale(matmul(q, transpose(k)), 1.0 / math.sqrt(q.shape[1]))
    if mask is not None:
        if mask.allowed.shape != (q.shape[0], k.shape[0]):
            raise ShapeError(
                f"mask shape {mask.allowed.shape} vs scores {(q.shape[0], k.shape[0])}"
            )
        mask.check_rows()
        scores = add(scores, Tensor(mask.bias))
    weights = softmax_rows(scores)
    return matmul(weights, v), weights


def _heads_view(x: np.ndarray, n_heads: int) -> np.ndarray:
    n, d = x.shape
    return x.reshape(n, n_heads, d // n_heads).transpose(1, 0, 2)


def _heads_merge(x: np.ndarray) -> np.ndarray:
    h, n, dh = x.shape
    return x.transpose(1, 0, 2).reshape(n, h * dh)


def _fused_head_attention(
    qf: Tensor, kf: Tensor, vf: Tensor, cfg: HeadConfig, mask: AttentionMask | None
) -> tuple[Tensor, np.ndarray]:
    """All heads' scaled-dot attention as one tape node.

    Semantically identical to running scaled_dot_attention per contiguous
    column slice and concatenating, but the whole stack (and its backward)
    is vectorized over the head axis to keep tape overhead flat.
    """
    dh = cfg.d_head
    inv = 1.0 / math.sqrt(dh)
    q = _heads_view(qf.data, cfg.n_heads)
    k = _heads_view(kf.data, cfg.n_heads)
    v = _heads_view(vf.data, cfg.n_heads)
    scores = (q @ k.transpose(0, 2, 1)) * inv
    if mask is not None:
        if mask.allowed.shape != (qf.shape[0], kf.shape[0]):
            raise ShapeError(
                f"mask shape {mask.allowed.shape} vs scores "
                f"{(qf.shape[0], kf.shape[0])}"
            )
        mask.check_rows()
        scores += mask.bias
    scores -= scores.max(axis=-1, keepdims=True)
    weights = np.exp(scores)
    weights /= weights.sum(axis=-1, keepdims=True)
    out_data = _heads_merge(weights @ v)

    def make_backward(out: Tensor):
        def bw(g: np.ndarray) -> None:
            gh = _heads_view(g, cfg.n_heads)
            if vf.requires_grad:
                accumulate_grad(vf, _heads_merge(weights.transpose(0, 2, 1) @ gh))
            if qf.requires_grad or kf.requires_grad:
                dw = gh @ v.transpose(0, 2, 1)
                ds = weights * (dw - (dw * weights).sum(axis=-1, keepdims=True))
                ds *= inv
                if qf.requires_grad:
                    accumulate_grad(qf, _heads_merge(ds @ k))
                if kf.requires_grad:
                    accumulate_grad(kf, _heads_merge(ds.transpose(0, 2, 1) @ q))

        return bw

    return fused_op(out_data, (qf, kf, vf), make_backward), weights


def multi_head_attention(
    qf: Tensor,
    kf: Tensor,
    vf: Tensor,
    cfg: HeadConfig,
    w_o: Tensor,
    mask: AttentionMask | None = None,
    return_weights: bool = False,
):
    """Multi-head attention over full-dimension (possibly contextualized) Q/K/V.

    Columns are split into n_heads contiguous slices; each head runs
    scaled-dot attention with divisor sqrt(d_head); head outputs are
    concatenated and projected by w_o.
    """
    for name, t in (("query", qf), ("key", kf), ("value", vf)):
        if t.shape[1] != cfg.d_model:
            raise ShapeError(f"{name} width {t.shape[1]} != d_model {cfg.d_model}")
    if kf.shape[0] != vf.shape[0]:
        raise ShapeError(f"key count {kf.shape} vs value count {vf.shape}")
    heads_out, weights = _fused_head_attention(qf, kf, vf, cfg, mask)
    out = matmul(heads_out, w_o)
    if return_weights:
        return out, weights
    return out
