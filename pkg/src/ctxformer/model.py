"""Encoder-decoder transformer with context-aware self-attention layers.

A scaled-down base configuration: learned embeddings times sqrt(d) plus
sinusoidal positions, stacks of [self-attention -> feed-forward] blocks
with residual connections, and layer norm either before (pre) or after
(post) each sublayer.  Self-attention layers may mix in context vectors;
encoder-decoder cross-attention never does.  Layer inputs are recorded on
the way up so deep context variants can see every level underneath.
"""

from __future__ import annotations

import math
import zlib
from dataclasses import dataclass, field, replace

import numpy as np

from .attention import AttentionMask, HeadConfig, make_causal_mask, multi_head_attention
from .context import (
    ContextConfig,
    ContextParams,
    ContextStrategy,
    LayerTrace,
    context_aware_attention,
)
from .data import BOS, EOS, PAD
from .errors import ConfigError
from .tensor import (
    Tensor,
    add,
    broadcast_rows,
    cross_entropy_from_logits,
    dropout,
    gather_rows,
    layer_norm,
    matmul,
    relu,
    scale,
)

_DISABLED_CONTEXT = ContextConfig(strategy=ContextStrategy.NONE)


@dataclass(frozen=True)
class ModelConfig:
    d_model: int = 64
    n_heads: int = 4
    n_enc_layers: int = 2
    n_dec_layers: int = 2
    d_ff: int = 256
    src_vocab: int = 16
    tgt_vocab: int = 16
    max_len: int = 64
    context: ContextConfig = field(default_factory=ContextConfig)
    norm_style: str = "pre"
    seed: int = 0
    use_positional: bool = True
    dropout: float = 0.0

    def __post_init__(self):
        if self.d_model < 1 or self.d_model % self.n_heads != 0:
            raise ConfigError(
                f"d_model={self.d_model} must be positive and divisible by "
                f"n_heads={self.n_heads}"
            )
        if min(self.src_vocab, self.tgt_vocab) < 4:
            raise ConfigError("vocabularies need at least the 4 reserved ids")
        if self.n_enc_layers < 1 or self.n_dec_layers < 1:
            raise ConfigError("need at least one encoder and one decoder layer")
        if self.norm_style not in ("pre", "post"):
            raise ConfigError(f"norm_style must be 'pre' or 'post', got {self.norm_style!r}")
        if self.max_len < 1:
            raise ConfigError("max_len must be >= 1")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must be in [0, 1)")

    @property
    def heads(self) -> HeadConfig:
        return HeadConfig(self.d_model, self.n_heads)

    def to_json(self) -> dict:
        return {
            "d_model": self.d_model,
            "n_heads": self.n_heads,
            "n_enc_layers": self.n_enc_layers,
            "n_dec_layers": self.n_dec_layers,
            "d_ff": self.d_ff,
            "src_vocab": self.src_vocab,
            "tgt_vocab": self.tgt_vocab,
            "max_len": self.max_len,
            "context": self.context.to_json(),
            "norm_style": self.norm_style,
            "seed": self.seed,
            "use_positional": self.use_positional,
            "dropout": self.dropout,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "ModelConfig":
        known = {f for f in cls.__dataclass_fields__}
        extra = set(obj) - known
        if extra:
            raise ConfigError(f"unknown model config fields: {sorted(extra)}")
        kwargs = dict(obj)
        if "context" in kwargs:
            kwargs["context"] = ContextConfig.from_json(kwargs["context"])
        return cls(**kwargs)

    def without_context(self) -> "ModelConfig":
        return replace(self, context=_DISABLED_CONTEXT)


@dataclass
class LayerNormParams:
    gain: Tensor
    bias: Tensor


@dataclass
class AttnWeights:
    w_q: Tensor
    w_k: Tensor
    w_v: Tensor
    w_o: Tensor


@dataclass
class FfnParams:
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor


@dataclass
class EncLayerParams:
    ln1: LayerNormParams
    attn: AttnWeights
    ctx: ContextParams | None
    ln2: LayerNormParams
    ffn: FfnParams


@dataclass
class DecLayerParams:
    ln1: LayerNormParams
    self_attn: AttnWeights
    ctx: ContextParams | None
    ln2: LayerNormParams
    cross_attn: AttnWeights
    ln3: LayerNormParams
    ffn: FfnParams


def _init_matrix(name: str, shape: tuple[int, int], seed: int) -> Tensor:
    """Xavier-uniform matrix seeded per tensor name.

    Seeding by (seed, crc32(name)) keeps every tensor's values independent
    of which other tensors exist, so a context model shares its base
    weights with the plain model of the same seed.
    """
    rng = np.random.default_rng([seed, zlib.crc32(name.encode("ascii"))])
    bound = math.sqrt(6.0 / (shape[0] + shape[1]))
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


def _zeros(shape) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True)


def _ones(shape) -> Tensor:
    return Tensor(np.ones(shape), requires_grad=True)


def _init_context_params(
    cfg: ModelConfig, block: str, layer: int, seed: int
) -> ContextParams | None:
    ctx = cfg.context
    if not ctx.active_in(block):
        return None
    d = cfg.d_model
    d_c = ctx.strategy.width(layer, d)
    if d_c == 0:
        return None
    params = ContextParams()
    prefix = f"{block}.{layer - 1}.ctx"
    if ctx.query_enabled:
        params.u_q = _init_matrix(f"{prefix}.u_q", (d_c, d), seed)
        if ctx.gating == "learned":
            params.v_q_h = _zeros((d, 1))
            params.v_q_c = _zeros((d, 1))
    if ctx.key_enabled:
        params.u_k = _init_matrix(f"{prefix}.u_k", (d_c, d), seed)
        if ctx.gating == "learned":
            params.v_k_h = _zeros((d, 1))
            params.v_k_c = _zeros((d, 1))
    return params


def _sinusoidal_positions(max_len: int, d: int) -> np.ndarray:
    pos = np.arange(max_len, dtype=np.float64)[:, None]
    dim = np.arange(d, dtype=np.float64)[None, :]
    angle = pos / np.power(10000.0, 2.0 * np.floor(dim / 2.0) / d)
    pe = np.where(dim % 2 == 0, np.sin(angle), np.cos(angle))
    return pe


class ModelParams:
    """All trainable tensors of one model, addressable by unique names."""

    def __init__(self, cfg: ModelConfig):
        d, ff, seed = cfg.d_model, cfg.d_ff, cfg.seed
        self.src_embed = _init_matrix("src_embed", (cfg.src_vocab, d), seed)
        self.tgt_embed = _init_matrix("tgt_embed", (cfg.tgt_vocab, d), seed)
        self.out_proj = _init_matrix("out_proj", (d, cfg.tgt_vocab), seed)
        self.out_bias = _zeros((cfg.tgt_vocab,))
        self.enc_layers: list[EncLayerParams] = []
        for i in range(cfg.n_enc_layers):
            self.enc_layers.append(
                EncLayerParams(
                    ln1=LayerNormParams(_ones((d,)), _zeros((d,))),
                    attn=AttnWeights(
                        *(
                            _init_matrix(f"enc.{i}.attn.{nm}", (d, d), seed)
                            for nm in ("w_q", "w_k", "w_v", "w_o")
                        )
                    ),
                    ctx=_init_context_params(cfg, "encoder", i + 1, seed),
                    ln2=LayerNormParams(_ones((d,)), _zeros((d,))),
                    ffn=FfnParams(
                        w1=_init_matrix(f"enc.{i}.ffn.w1", (d, ff), seed),
                        b1=_zeros((ff,)),
                        w2=_init_matrix(f"enc.{i}.ffn.w2", (ff, d), seed),
                        b2=_zeros((d,)),
                    ),
                )
            )
        self.dec_layers: list[DecLayerParams] = []
        for i in range(cfg.n_dec_layers):
            self.dec_layers.append(
                DecLayerParams(
                    ln1=LayerNormParams(_ones((d,)), _zeros((d,))),
                    self_attn=AttnWeights(
                        *(
                            _init_matrix(f"dec.{i}.self.{nm}", (d, d), seed)
                            for nm in ("w_q", "w_k", "w_v", "w_o")
                        )
                    ),
                    ctx=_init_context_params(cfg, "decoder", i + 1, seed),
                    ln2=LayerNormParams(_ones((d,)), _zeros((d,))),
                    cross_attn=AttnWeights(
                        *(
                            _init_matrix(f"dec.{i}.cross.{nm}", (d, d), seed)
                            for nm in ("w_q", "w_k", "w_v", "w_o")
                        )
                    ),
                    ln3=LayerNormParams(_ones((d,)), _zeros((d,))),
                    ffn=FfnParams(
                        w1=_init_matrix(f"dec.{i}.ffn.w1", (d, ff), seed),
                        b1=_zeros((ff,)),
                        w2=_init_matrix(f"dec.{i}.ffn.w2", (ff, d), seed),
                        b2=_zeros((d,)),
                    ),
                )
            )
        self.enc_final_ln = (
            LayerNormParams(_ones((d,)), _zeros((d,))) if cfg.norm_style == "pre" else None
        )
        self.dec_final_ln = (
            LayerNormParams(_ones((d,)), _zeros((d,))) if cfg.norm_style == "pre" else None
        )

    def named(self) -> dict[str, Tensor]:
        """Stable name -> tensor mapping (declaration order)."""
        out: dict[str, Tensor] = {
            "src_embed": self.src_embed,
            "tgt_embed": self.tgt_embed,
            "out_proj": self.out_proj,
            "out_bias": self.out_bias,
        }

        def _ln(prefix: str, ln: LayerNormParams) -> None:
            out[f"{prefix}.gain"] = ln.gain
            out[f"{prefix}.bias"] = ln.bias

        def _attn(prefix: str, a: AttnWeights) -> None:
            for nm in ("w_q", "w_k", "w_v", "w_o"):
                out[f"{prefix}.{nm}"] = getattr(a, nm)

        def _ctx(prefix: str, c: ContextParams | None) -> None:
            if c is None:
                return
            for nm in ("u_q", "u_k", "v_q_h", "v_q_c", "v_k_h", "v_k_c"):
                t = getattr(c, nm)
                if t is not None:
                    out[f"{prefix}.{nm}"] = t

        def _ffn(prefix: str, f: FfnParams) -> None:
            for nm in ("w1", "b1", "w2", "b2"):
                out[f"{prefix}.{nm}"] = getattr(f, nm)

        for i, layer in enumerate(self.enc_layers):
            _ln(f"enc.{i}.ln1", layer.ln1)
            _attn(f"enc.{i}.attn", layer.attn)
            _ctx(f"enc.{i}.ctx", layer.ctx)
            _ln(f"enc.{i}.ln2", layer.ln2)
            _ffn(f"enc.{i}.ffn", layer.ffn)
        if self.enc_final_ln is not None:
            _ln("enc.ln_f", self.enc_final_ln)
        for i, layer in enumerate(self.dec_layers):
            _ln(f"dec.{i}.ln1", layer.ln1)
            _attn(f"dec.{i}.self", layer.self_attn)
            _ctx(f"dec.{i}.ctx", layer.ctx)
            _ln(f"dec.{i}.ln2", layer.ln2)
            _attn(f"dec.{i}.cross", layer.cross_attn)
            _ln(f"dec.{i}.ln3", layer.ln3)
            _ffn(f"dec.{i}.ffn", layer.ffn)
        if self.dec_final_ln is not None:
            _ln("dec.ln_f", self.dec_final_ln)
        return out

    def tensors(self) -> list[Tensor]:
        return list(self.named().values())

    def n_params(self) -> int:
        return sum(t.size for t in self.tensors())


def init_params(cfg: ModelConfig) -> ModelParams:
    return ModelParams(cfg)


# ---------------------------------------------------------------------------
# forward passes


def _embed(
    ids: np.ndarray,
    table: Tensor,
    cfg: ModelConfig,
    rng: np.random.Generator | None,
) -> Tensor:
    h = scale(gather_rows(table, ids), math.sqrt(cfg.d_model))
    if cfg.use_positional:
        h = add(h, Tensor(_positions_for(cfg, len(ids))))
    return dropout(h, cfg.dropout, rng)


_POSITION_CACHE: dict[tuple[int, int], np.ndarray] = {}


def _positions_for(cfg: ModelConfig, n: int) -> np.ndarray:
    key = (cfg.max_len, cfg.d_model)
    pe = _POSITION_CACHE.get(key)
    if pe is None:
        pe = _sinusoidal_positions(cfg.max_len, cfg.d_model)
        _POSITION_CACHE[key] = pe
    return pe[:n]


def _validate_ids(ids: np.ndarray, vocab: int, what: str, max_len: int) -> None:
    if ids.ndim != 1 or ids.size < 1:
        raise ConfigError(f"{what} ids must be a non-empty 1-D sequence")
    if ids.min() < 0 or ids.max() >= vocab:
        bad = int(ids[(ids < 0) | (ids >= vocab)][0])
        raise ConfigError(f"{what} id {bad} outside vocabulary of size {vocab}")
    if ids.size > max_len:
        raise ConfigError(f"{what} length {ids.size} exceeds max_len {max_len}")


def _ffn_forward(x: Tensor, ffn: FfnParams) -> Tensor:
    n = x.shape[0]
    hidden = relu(add(matmul(x, ffn.w1), broadcast_rows(ffn.b1, n)))
    return add(matmul(hidden, ffn.w2), broadcast_rows(ffn.b2, n))


def _self_attention_block(
    x: Tensor,
    ln: LayerNormParams,
    attn: AttnWeights,
    ctx_params: ContextParams | None,
    ctx_cfg: ContextConfig,
    heads: HeadConfig,
    mask: AttentionMask | None,
    states: list[Tensor],
    pad_mask: np.ndarray,
    causal: bool,
    layer: int,
    norm_style: str,
    p_drop: float,
    rng: np.random.Generator | None,
) -> tuple[Tensor, LayerTrace]:
    attn_in = layer_norm(x, ln.gain, ln.bias) if norm_style == "pre" else x
    out, trace = context_aware_attention(
        attn_in,
        attn.w_q,
        attn.w_k,
        attn.w_v,
        attn.w_o,
        heads,
        ctx_params,
        ctx_cfg,
        mask,
        states,
        pad_mask,
        causal,
        layer,
    )
    x = add(x, dropout(out, p_drop, rng))
    if norm_style == "post":
        x = layer_norm(x, ln.gain, ln.bias)
    return x, trace


def _ffn_block(
    x: Tensor,
    ln: LayerNormParams,
    ffn: FfnParams,
    norm_style: str,
    p_drop: float,
    rng: np.random.Generator | None,
) -> Tensor:
    f_in = layer_norm(x, ln.gain, ln.bias) if norm_style == "pre" else x
    x = add(x, dropout(_ffn_forward(f_in, ffn), p_drop, rng))
    if norm_style == "post":
        x = layer_norm(x, ln.gain, ln.bias)
    return x


def encode(
    src_ids,
    params: ModelParams,
    cfg: ModelConfig,
    rng: np.random.Generator | None = None,
) -> tuple[Tensor, list[LayerTrace]]:
    """Run the encoder stack; returns final states and per-layer traces."""
    ids = np.asarray(src_ids, dtype=np.int64)
    _validate_ids(ids, cfg.src_vocab, "source", cfg.max_len)
    h = _embed(ids, params.src_embed, cfg, rng)
    pad_mask = np.ones(ids.size, dtype=bool)
    ctx_cfg = cfg.context if cfg.context.active_in("encoder") else _DISABLED_CONTEXT
    states = [h]
    traces: list[LayerTrace] = []
    for i, layer in enumerate(params.enc_layers, start=1):
        x, trace = _self_attention_block(
            states[-1],
            layer.ln1,
            layer.attn,
            layer.ctx,
            ctx_cfg,
            cfg.heads,
            None,
            states,
            pad_mask,
            False,
            i,
            cfg.norm_style,
            cfg.dropout,
            rng,
        )
        x = _ffn_block(x, layer.ln2, layer.ffn, cfg.norm_style, cfg.dropout, rng)
        traces.append(trace)
        states.append(x)
    out = states[-1]
    if params.enc_final_ln is not None:
        out = layer_norm(out, params.enc_final_ln.gain, params.enc_final_ln.bias)
    return out, traces


def decode_teacher_forced(
    tgt_ids,
    enc_states: Tensor,
    params: ModelParams,
    cfg: ModelConfig,
    rng: np.random.Generator | None = None,
) -> tuple[Tensor, list[LayerTrace]]:
    """Run the decoder on a gold prefix; returns per-position logits."""
    ids = np.asarray(tgt_ids, dtype=np.int64)
    _validate_ids(ids, cfg.tgt_vocab, "target", cfg.max_len)
    if ids[0] != BOS:
        raise ConfigError(f"decoder input must begin with BOS={BOS}, got {int(ids[0])}")
    m = ids.size
    h = _embed(ids, params.tgt_embed, cfg, rng)
    pad_mask = np.ones(m, dtype=bool)
    causal = make_causal_mask(m)
    ctx_cfg = cfg.context if cfg.context.active_in("decoder") else _DISABLED_CONTEXT
    states = [h]
    traces: list[LayerTrace] = []
    for i, layer in enumerate(params.dec_layers, start=1):
        x, trace = _self_attention_block(
            states[-1],
            layer.ln1,
            layer.self_attn,
            layer.ctx,
            ctx_cfg,
            cfg.heads,
            causal,
            states,
            pad_mask,
            True,
            i,
            cfg.norm_style,
            cfg.dropout,
            rng,
        )
        # cross-attention reads the encoder output; never contextualized
        cross_in = (
            layer_norm(x, layer.ln2.gain, layer.ln2.bias)
            if cfg.norm_style == "pre"
            else x
        )
        q = matmul(cross_in, layer.cross_attn.w_q)
        k = matmul(enc_states, layer.cross_attn.w_k)
        v = matmul(enc_states, layer.cross_attn.w_v)
        o = multi_head_attention(q, k, v, cfg.heads, layer.cross_attn.w_o)
        x = add(x, dropout(o, cfg.dropout, rng))
        if cfg.norm_style == "post":
            x = layer_norm(x, layer.ln2.gain, layer.ln2.bias)
        x = _ffn_block(x, layer.ln3, layer.ffn, cfg.norm_style, cfg.dropout, rng)
        traces.append(trace)
        states.append(x)
    out = states[-1]
    if params.dec_final_ln is not None:
        out = layer_norm(out, params.dec_final_ln.gain, params.dec_final_ln.bias)
    logits = add(matmul(out, params.out_proj), broadcast_rows(params.out_bias, m))
    return logits, traces


def forward_loss(
    batch,
    params: ModelParams,
    cfg: ModelConfig,
    rng: np.random.Generator | None = None,
) -> Tensor:
    """Token-averaged cross-entropy over every sequence in a padded batch."""
    rows = list(batch.rows())
    total = sum(len(tgt_out) for _, _, tgt_out in rows)
    loss = None
    for src, tgt_in, tgt_out in rows:
        enc_states, _ = encode(src, params, cfg, rng)
        logits, _ = decode_teacher_forced(tgt_in, enc_states, params, cfg, rng)
        piece = scale(
            cross_entropy_from_logits(logits, tgt_out, PAD), len(tgt_out) / total
        )
        loss = piece if loss is None else add(loss, piece)
    if loss is None:
        raise ConfigError("forward_loss: empty batch")
    return loss


def greedy_decode(src_ids, params: ModelParams, cfg: ModelConfig, max_steps: int):
    """Argmax decoding (ties -> lowest id); BOS/EOS are stripped from the result."""
    if max_steps < 1:
        raise ConfigError("max_steps must be >= 1")
    enc_states, _ = encode(src_ids, params, cfg)
    seq = [BOS]
    for _ in range(max_steps):
        if len(seq) >= cfg.max_len:
            break
        logits, _ = decode_teacher_forced(seq, enc_states, params, cfg)
        nxt = int(np.argmax(logits.data[-1]))
        if nxt == EOS:
            break
        seq.append(nxt)
    return seq[1:]


# ---------------------------------------------------------------------------
# parameter accounting


def context_param_count(cfg: ModelConfig) -> dict[str, int]:
    """Closed-form context parameter count per block."""
    ctx = cfg.context
    d = cfg.d_model
    n_sides = int(ctx.query_enabled) + int(ctx.key_enabled)
    gate = 2 * d if ctx.gating == "learned" else 0
    counts = {"encoder": 0, "decoder": 0}
    for block, n_layers in (("encoder", cfg.n_enc_layers), ("decoder", cfg.n_dec_layers)):
        if not ctx.active_in(block):
            continue
        total = 0
        for layer in range(1, n_layers + 1):
            d_c = ctx.strategy.width(layer, d)
            if d_c == 0:
                continue
            total += n_sides * (d_c * d + gate)
        counts[block] = total
    return counts


def param_count(cfg: ModelConfig) -> dict:
    """Closed-form parameter breakdown matching the instantiated model exactly."""
    d, ff = cfg.d_model, cfg.d_ff
    embeddings = (cfg.src_vocab + cfg.tgt_vocab) * d
    output = d * cfg.tgt_vocab + cfg.tgt_vocab
    ffn = 2 * d * ff + ff + d
    enc_layer = 2 * (2 * d) + 4 * d * d + ffn
    dec_layer = 3 * (2 * d) + 2 * (4 * d * d) + ffn
    final_norms = 2 * (2 * d) if cfg.norm_style == "pre" else 0
    ctx = context_param_count(cfg)
    per_component = {
        "embeddings": embeddings,
        "output_projection": output,
        "encoder_layers": cfg.n_enc_layers * enc_layer,
        "decoder_layers": cfg.n_dec_layers * dec_layer,
        "final_norms": final_norms,
        "context_encoder": ctx["encoder"],
        "context_decoder": ctx["decoder"],
    }
    return {"total": sum(per_component.values()), "per_component": per_component}
