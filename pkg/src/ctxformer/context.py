"""Context vectors and gated contextualization of attention queries/keys.

Four context flavors can feed a self-attention layer:

* global   -- mean of the layer's input states, one vector broadcast to
              every position (prefix means on causal blocks),
* deep     -- per-position concatenation of all layer inputs below the
              current one (empty at the first layer),
* deep-global -- concatenation of the global vectors of every layer up to
              and including the current one,
* deep-global + deep -- both of the above, side by side.

The context C is mixed into the query/key projections X by a per-position
convex gate: X_hat = (1 - lam) * X + lam * (C @ U), with lam either a
learned sigmoid gate sigma(X @ v_h + (C @ U) @ v_c) or a fixed constant.
Values are never contextualized.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .attention import AttentionMask, HeadConfig, multi_head_attention, project_qkv
from .errors import ConfigError, ShapeError
from .tensor import (
    _SIGMOID_HI,
    _SIGMOID_LO,
    Tensor,
    accumulate_grad,
    broadcast_rows,
    concat_last_dim,
    fused_op,
    masked_mean_rows,
    matmul,
    prefix_mean_rows,
)


class ContextStrategy(enum.Enum):
    NONE = "none"
    GLOBAL = "global"
    DEEP = "deep"
    DEEP_GLOBAL = "deep_global"
    DEEP_GLOBAL_PLUS_DEEP = "deep_global_plus_deep"

    @classmethod
    def parse(cls, name: str) -> "ContextStrategy":
        try:
            return cls(name.lower())
        except ValueError:
            raise ConfigError(
                f"unknown context strategy {name!r}; expected one of "
                f"{[s.value for s in cls]}"
            ) from None

    def width(self, layer: int, d: int) -> int:
        """Context width d_c at 1-indexed layer ``layer`` for model width d."""
        if layer < 1:
            raise ConfigError(f"layer index must be >= 1, got {layer}")
        if self is ContextStrategy.NONE:
            return 0
        if self is ContextStrategy.GLOBAL:
            return d
        if self is ContextStrategy.DEEP:
            return (layer - 1) * d
        if self is ContextStrategy.DEEP_GLOBAL:
            return layer * d
        return (2 * layer - 1) * d


APPLY_TO = ("encoder", "decoder", "both")
SIDES = ("query_only", "key_only", "both")
GATING = ("learned", "fixed")


@dataclass(frozen=True)
class ContextConfig:
    """Which context strategy runs where, on which projections, gated how."""

    strategy: ContextStrategy = ContextStrategy.NONE
    apply_to: str = "encoder"
    sides: str = "both"
    gating: str = "learned"
    fixed_lambda: float = 0.5

    def __post_init__(self):
        if self.apply_to not in APPLY_TO:
            raise ConfigError(f"apply_to must be one of {APPLY_TO}, got {self.apply_to!r}")
        if self.sides not in SIDES:
            raise ConfigError(f"sides must be one of {SIDES}, got {self.sides!r}")
        if self.gating not in GATING:
            raise ConfigError(f"gating must be one of {GATING}, got {self.gating!r}")
        if not 0.0 <= self.fixed_lambda <= 1.0:
            raise ConfigError(f"fixed lambda must be in [0, 1], got {self.fixed_lambda}")

    @property
    def query_enabled(self) -> bool:
        return self.sides in ("query_only", "both")

    @property
    def key_enabled(self) -> bool:
        return self.sides in ("key_only", "both")

    def active_in(self, block: str) -> bool:
        """Whether contextualization runs in the given block (enc/dec)."""
        if self.strategy is ContextStrategy.NONE:
            return False
        return self.apply_to == "both" or self.apply_to == block

    def to_json(self) -> dict:
        return {
            "strategy": self.strategy.value,
            "apply_to": self.apply_to,
            "sides": self.sides,
            "gating": self.gating,
            "fixed_lambda": self.fixed_lambda,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "ContextConfig":
        return cls(
            strategy=ContextStrategy.parse(obj.get("strategy", "none")),
            apply_to=obj.get("apply_to", "encoder"),
            sides=obj.get("sides", "both"),
            gating=obj.get("gating", "learned"),
            fixed_lambda=float(obj.get("fixed_lambda", 0.5)),
        )


@dataclass
class ContextParams:
    """Per-layer trainable context parameters; sides not in use stay None."""

    u_q: Tensor | None = None
    u_k: Tensor | None = None
    v_q_h: Tensor | None = None
    v_q_c: Tensor | None = None
    v_k_h: Tensor | None = None
    v_k_c: Tensor | None = None


@dataclass
class LayerTrace:
    """Per-layer record of gate values and attention weights for analysis."""

    layer: int
    lambda_q: np.ndarray | None = None
    lambda_k: np.ndarray | None = None
    attn: np.ndarray | None = None


def build_global_context(h: Tensor, pad_mask) -> Tensor:
    """Mean of the non-pad rows of the layer input, as one shared vector."""
    return masked_mean_rows(h, pad_mask)


def build_causal_global_context(h: Tensor) -> Tensor:
    """Per-position mean of the rows seen so far (row t averages rows 0..t)."""
    return prefix_mean_rows(h)


def build_deep_context(lower_layers: list[Tensor], layer: int) -> Tensor | None:
    """Concatenate the inputs of all layers below ``layer`` per position.

    Returns None at layer 1, where there is nothing underneath and the
    strategy degenerates to the baseline.
    """
    if len(lower_layers) != layer - 1:
        raise ConfigError(
            f"deep context at layer {layer} needs {layer - 1} lower states, "
            f"got {len(lower_layers)}"
        )
    if layer == 1:
        return None
    return concat_last_dim(lower_layers)


def build_deep_global_context(
    all_layers: list[Tensor], pad_mask, causal: bool
) -> Tensor:
    """Concatenate the global context of every layer up to the current one.

    Non-causal blocks get a single (layer * d,) vector; causal blocks get a
    per-position (n, layer * d) matrix of prefix means.
    """
    if not all_layers:
        raise ConfigError("deep-global context needs at least one layer state")
    if causal:
        return concat_last_dim([build_causal_global_context(h) for h in all_layers])
    return concat_last_dim([build_global_context(h, pad_mask) for h in all_layers])


def assemble_context(
    strategy: ContextStrategy,
    layer: int,
    all_layer_states: list[Tensor],
    pad_mask,
    causal: bool,
) -> Tensor | None:
    """Per-position context matrix (n, d_c) for one layer, or None.

    ``all_layer_states`` holds the inputs of layers 1..layer, the current
    layer's input last.  Shared vectors are materialized as n identical
    rows so downstream math is uniformly 2-D.
    """
    if strategy is ContextStrategy.NONE:
        return None
    if len(all_layer_states) != layer:
        raise ConfigError(
            f"layer {layer} needs states for layers 1..{layer}, "
            f"got {len(all_layer_states)}"
        )
    h = all_layer_states[-1]
    n = h.shape[0]
    if strategy is ContextStrategy.GLOBAL:
        if causal:
            return build_causal_global_context(h)
        return broadcast_rows(build_global_context(h, pad_mask), n)
    if strategy is ContextStrategy.DEEP:
        return build_deep_context(all_layer_states[:-1], layer)
    deep_global = build_deep_global_context(all_layer_states, pad_mask, causal)
    if not causal:
        deep_global = broadcast_rows(deep_global, n)
    if strategy is ContextStrategy.DEEP_GLOBAL:
        return deep_global
    deep = build_deep_context(all_layer_states[:-1], layer)
    if deep is None:
        return deep_global
    return concat_last_dim([deep_global, deep])


def gate_lambda(x: Tensor, c: Tensor, u: Tensor, v_h: Tensor, v_c: Tensor) -> Tensor:
    """Learned gate: lam = sigma(x @ v_h + (c @ u) @ v_c), one scalar per row."""
    return _gate_from_projection(x, matmul(c, u), v_h, v_c)


def _gate_from_projection(x: Tensor, proj: Tensor, v_h: Tensor, v_c: Tensor) -> Tensor:
    """Fused sigmoid(x @ v_h + proj @ v_c), one tape node."""
    if x.shape[1] != v_h.shape[0] or proj.shape[1] != v_c.shape[0]:
        raise ShapeError(
            f"gate: states {x.shape} / context {proj.shape} do not match "
            f"gate vectors {v_h.shape} / {v_c.shape}"
        )
    score = x.data @ v_h.data + proj.data @ v_c.data
    ez = np.exp(-np.abs(score))
    lam = np.where(score >= 0, 1.0 / (1.0 + ez), ez / (1.0 + ez))
    np.clip(lam, _SIGMOID_LO, _SIGMOID_HI, out=lam)

    def make_backward(out: Tensor):
        def bw(g: np.ndarray) -> None:
            gs = g * lam * (1.0 - lam)
            if x.requires_grad:
                accumulate_grad(x, gs @ v_h.data.T)
            if v_h.requires_grad:
                accumulate_grad(v_h, x.data.T @ gs)
            if proj.requires_grad:
                accumulate_grad(proj, gs @ v_c.data.T)
            if v_c.requires_grad:
                accumulate_grad(v_c, proj.data.T @ gs)

        return bw

    return fused_op(lam, (x, proj, v_h, v_c), make_backward)


def _mix(x: Tensor, proj: Tensor, lam: Tensor) -> Tensor:
    """Fused (1 - lam) * x + lam * proj with lam broadcast over columns."""
    lam_col = lam.data
    out_data = (1.0 - lam_col) * x.data + lam_col * proj.data

    def make_backward(out: Tensor):
        def bw(g: np.ndarray) -> None:
            if x.requires_grad:
                accumulate_grad(x, g * (1.0 - lam_col))
            if proj.requires_grad:
                accumulate_grad(proj, g * lam_col)
            if lam.requires_grad:
                accumulate_grad(
                    lam, (g * (proj.data - x.data)).sum(axis=1, keepdims=True)
                )

        return bw

    return fused_op(out_data, (x, proj, lam), make_backward)


def contextualize_qk(
    q: Tensor,
    k: Tensor,
    c: Tensor | None,
    params: ContextParams,
    cfg: ContextConfig,
) -> tuple[Tensor, Tensor, tuple[Tensor | None, Tensor | None]]:
    """Mix the context into Q and/or K; disabled sides pass through unchanged."""
    lam_q = lam_k = None
    q_hat, k_hat = q, k
    if cfg.query_enabled:
        if c is None or params.u_q is None:
            raise ConfigError("query contextualization enabled but context is absent")
        proj = matmul(c, params.u_q)
        lam_q = _make_lambda(q, proj, params.v_q_h, params.v_q_c, cfg)
        q_hat = _mix(q, proj, lam_q)
    if cfg.key_enabled:
        if c is None or params.u_k is None:
            raise ConfigError("key contextualization enabled but context is absent")
        proj = matmul(c, params.u_k)
        lam_k = _make_lambda(k, proj, params.v_k_h, params.v_k_c, cfg)
        k_hat = _mix(k, proj, lam_k)
    return q_hat, k_hat, (lam_q, lam_k)


def _make_lambda(
    x: Tensor, proj: Tensor, v_h: Tensor | None, v_c: Tensor | None, cfg: ContextConfig
) -> Tensor:
    if cfg.gating == "fixed":
        return Tensor(np.full((x.shape[0], 1), cfg.fixed_lambda))
    if v_h is None or v_c is None:
        raise ConfigError("learned gating requires gate vectors")
    return _gate_from_projection(x, proj, v_h, v_c)


def context_aware_attention(
    h: Tensor,
    w_q: Tensor,
    w_k: Tensor,
    w_v: Tensor,
    w_o: Tensor,
    heads: HeadConfig,
    context_params: ContextParams | None,
    cfg: ContextConfig,
    mask: AttentionMask | None,
    all_layer_states: list[Tensor],
    pad_mask,
    causal: bool,
    layer: int,
) -> tuple[Tensor, LayerTrace]:
    """One self-attention sublayer with optional gated contextualization.

    Q and K are contextualized at full model dimension before the head
    split (one gate scalar per position, shared across heads); V is the
    plain projection.  With strategy None this is exactly baseline
    multi-head attention.
    """
    q, k, v = project_qkv(h, w_q, w_k, w_v)
    trace = LayerTrace(layer=layer)
    c = assemble_context(cfg.strategy, layer, all_layer_states, pad_mask, causal)
    if c is not None and context_params is not None:
        q, k, (lam_q, lam_k) = contextualize_qk(q, k, c, context_params, cfg)
        if lam_q is not None:
            trace.lambda_q = lam_q.data[:, 0].copy()
        if lam_k is not None:
            trace.lambda_k = lam_k.data[:, 0].copy()
    out, weights = multi_head_attention(q, k, v, heads, w_o, mask, return_weights=True)
    trace.attn = weights.mean(axis=0)
    return out, trace
