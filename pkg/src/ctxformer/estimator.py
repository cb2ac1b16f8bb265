"""Scikit-learn style wrapper around the context-aware seq2seq model.

``ContextAwareTransformer`` exposes the usual estimator surface -- ``fit``
on (source, target) id sequences, ``predict`` to greedily decode, and
``score`` for micro token accuracy -- so the model drops into sklearn
pipelines, grid search, and ``clone()``.
"""

from __future__ import annotations

from sklearn.base import BaseEstimator

from .context import ContextConfig, ContextStrategy
from .model import ModelConfig, greedy_decode, param_count
from .training import FitResult, TrainConfig, fit, score_predictions


def check_sequences(X, vocab_size: int, max_len: int, name: str = "X") -> list[list[int]]:
    """Validate a list of id sequences; returns plain lists of ints."""
    if not isinstance(X, (list, tuple)) or len(X) == 0:
        raise ValueError(f"{name} must be a non-empty list of id sequences")
    out = []
    for i, seq in enumerate(X):
        try:
            ids = [int(t) for t in seq]
        except (TypeError, ValueError):
            raise ValueError(f"{name}[{i}] is not a sequence of integers") from None
        if len(ids) == 0:
            raise ValueError(f"{name}[{i}] is empty")
        if len(ids) > max_len:
            raise ValueError(f"{name}[{i}] has length {len(ids)} > max_len {max_len}")
        bad = [t for t in ids if t < 4 or t >= vocab_size]
        if bad:
            raise ValueError(
                f"{name}[{i}] contains id {bad[0]} outside the content range "
                f"[4, {vocab_size})"
            )
        out.append(ids)
    return out


class ContextAwareTransformer(BaseEstimator):
    """Sequence-to-sequence transformer with gated context fusion.

    Parameters mirror the model/training configuration; see ``fit``.
    Token ids 0..3 are reserved (pad/bos/eos/unk), content ids start at 4.
    """

    def __init__(
        self,
        vocab_size: int = 16,
        d_model: int = 32,
        n_heads: int = 4,
        n_enc_layers: int = 2,
        n_dec_layers: int = 2,
        d_ff: int | None = None,
        context_strategy: str = "none",
        apply_to: str = "encoder",
        sides: str = "both",
        gating: str = "learned",
        fixed_lambda: float = 0.5,
        norm_style: str = "pre",
        max_len: int = 64,
        steps: int = 500,
        max_tokens: int = 256,
        warmup: int = 200,
        clip_norm: float = 1.0,
        dropout: float = 0.0,
        seed: int = 0,
    ):
        self.vocab_size = vocab_size
        self.d_model = d_model
        self.n_heads = n_heads
        self.n_enc_layers = n_enc_layers
        self.n_dec_layers = n_dec_layers
        self.d_ff = d_ff
        self.context_strategy = context_strategy
        self.apply_to = apply_to
        self.sides = sides
        self.gating = gating
        self.fixed_lambda = fixed_lambda
        self.norm_style = norm_style
        self.max_len = max_len
        self.steps = steps
        self.max_tokens = max_tokens
        self.warmup = warmup
        self.clip_norm = clip_norm
        self.dropout = dropout
        self.seed = seed

    def _model_config(self) -> ModelConfig:
        return ModelConfig(
            d_model=self.d_model,
            n_heads=self.n_heads,
            n_enc_layers=self.n_enc_layers,
            n_dec_layers=self.n_dec_layers,
            d_ff=self.d_ff if self.d_ff is not None else 4 * self.d_model,
            src_vocab=self.vocab_size,
            tgt_vocab=self.vocab_size,
            max_len=self.max_len,
            context=ContextConfig(
                strategy=ContextStrategy.parse(self.context_strategy),
                apply_to=self.apply_to,
                sides=self.sides,
                gating=self.gating,
                fixed_lambda=self.fixed_lambda,
            ),
            norm_style=self.norm_style,
            seed=self.seed,
            dropout=self.dropout,
        )

    def fit(self, X, y):
        """Train on aligned source/target id sequences.

        X and y are lists of integer sequences (content ids only; framing
        tokens are handled internally).
        """
        cfg = self._model_config()
        X = check_sequences(X, self.vocab_size, self.max_len - 2, "X")
        y = check_sequences(y, self.vocab_size, self.max_len - 2, "y")
        if len(X) != len(y):
            raise ValueError(f"X has {len(X)} sequences but y has {len(y)}")
        train_cfg = TrainConfig(
            model=cfg,
            warmup=self.warmup,
            max_tokens=self.max_tokens,
            clip_norm=self.clip_norm,
        )
        result: FitResult = fit(train_cfg, list(zip(X, y)), steps=self.steps)
        self.config_ = cfg
        self.params_ = result.params
        self.history_ = result.losses
        self.n_params_ = param_count(cfg)["total"]
        return self

    def predict(self, X) -> list[list[int]]:
        """Greedy-decode a target sequence for each source sequence."""
        self._check_fitted()
        X = check_sequences(X, self.vocab_size, self.max_len - 2, "X")
        return [
            greedy_decode(src, self.params_, self.config_, max_steps=self.max_len - 1)
            for src in X
        ]

    def score(self, X, y) -> float:
        """Micro-averaged token accuracy of greedy predictions against y."""
        self._check_fitted()
        y = check_sequences(y, self.vocab_size, self.max_len - 2, "y")
        preds = self.predict(X)
        matches, lens, _ = score_predictions(preds, y)
        return float(matches.sum() / lens.sum())

    def _check_fitted(self) -> None:
        if not hasattr(self, "params_"):
            raise ValueError("this estimator is not fitted yet; call fit first")
