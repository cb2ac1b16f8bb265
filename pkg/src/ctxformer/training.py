"""Adam training with inverse-sqrt warmup, plus greedy-decoding evaluation.

The optimizer follows the usual transformer recipe: Adam with beta2=0.98,
lr = d_model^-0.5 * min(step^-0.5, step * warmup^-1.5), and global-norm
gradient clipping.  Evaluation decodes greedily and reports token/sequence
accuracy overall and per source-length bucket (10 equal-count groups).
"""

from __future__ import annotations

import json
import math
import time
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping

import numpy as np

from .checkpoint import save_checkpoint
from .data import batchify, load_dataset
from .errors import ConfigError, NumericError
from .model import (
    ModelConfig,
    ModelParams,
    forward_loss,
    greedy_decode,
    init_params,
)
from .tensor import Graph, Tensor, backward, zero_grads

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.98
ADAM_EPS = 1e-9


class AdamState:
    """First/second moment buffers and the shared step counter."""

    def __init__(self, params: Mapping[str, Tensor]):
        self.m = {name: np.zeros_like(t.data) for name, t in params.items()}
        self.v = {name: np.zeros_like(t.data) for name, t in params.items()}
        self.step = 0


def adam_step(
    params: Mapping[str, Tensor],
    grads: Mapping[str, np.ndarray],
    state: AdamState,
    lr: float,
) -> None:
    """One bias-corrected Adam update over every named parameter."""
    if lr <= 0:
        raise ValueError(f"learning rate must be positive, got {lr}")
    state.step += 1
    t = state.step
    bc1 = 1.0 - ADAM_BETA1**t
    bc2 = 1.0 - ADAM_BETA2**t
    for name, param in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for parameter {name!r}")
        m = state.m[name]
        v = state.v[name]
        m *= ADAM_BETA1
        m += (1.0 - ADAM_BETA1) * g
        v *= ADAM_BETA2
        v += (1.0 - ADAM_BETA2) * (g * g)
        param.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + ADAM_EPS)


def lr_at(step: int, d_model: int, warmup: int) -> float:
    """Inverse-sqrt schedule with linear warmup; continuous at step == warmup."""
    if step < 1:
        raise ValueError(f"step must be >= 1, got {step}")
    if warmup < 1:
        raise ValueError(f"warmup must be >= 1, got {warmup}")
    return d_model**-0.5 * min(step**-0.5, step * warmup**-1.5)


def collect_grads(params: Mapping[str, Tensor]) -> dict[str, np.ndarray]:
    return {
        name: (t.grad if t.grad is not None else np.zeros_like(t.data))
        for name, t in params.items()
    }


def clip_global_norm(grads: Mapping[str, np.ndarray], max_norm: float) -> float:
    """Scale all gradients in place so the global L2 norm is <= max_norm."""
    total = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
    if max_norm > 0 and total > max_norm:
        factor = max_norm / total
        for g in grads.values():
            g *= factor
    return total


@dataclass(frozen=True)
class TrainConfig:
    model: ModelConfig
    warmup: int = 400
    max_tokens: int = 512
    clip_norm: float = 1.0

    def to_json(self) -> dict:
        obj = self.model.to_json()
        obj.update(
            {"warmup": self.warmup, "max_tokens": self.max_tokens, "clip_norm": self.clip_norm}
        )
        return obj

    @classmethod
    def from_json(cls, obj: dict) -> "TrainConfig":
        obj = dict(obj)
        warmup = int(obj.pop("warmup", 400))
        max_tokens = int(obj.pop("max_tokens", 512))
        clip_norm = float(obj.pop("clip_norm", 1.0))
        return cls(
            model=ModelConfig.from_json(obj),
            warmup=warmup,
            max_tokens=max_tokens,
            clip_norm=clip_norm,
        )


# ---------------------------------------------------------------------------
# scoring


@dataclass
class EvalReport:
    token_accuracy: float
    sequence_accuracy: float
    loss: float
    buckets: list[dict] = field(default_factory=list)
    n_samples: int = 0
    bleu: float | None = None

    def to_json(self) -> dict:
        obj = {
            "token_accuracy": self.token_accuracy,
            "sequence_accuracy": self.sequence_accuracy,
            "loss": self.loss,
            "n_samples": self.n_samples,
            "buckets": self.buckets,
        }
        if self.bleu is not None:
            obj["bleu"] = self.bleu
        return obj


def score_predictions(preds: list[list[int]], refs: list[list[int]]):
    """Per-sample token matches against reference length, plus exact matches.

    Predictions are implicitly truncated/padded to the reference length:
    only positions < len(ref) can match, and missing positions never do.
    """
    if len(preds) != len(refs):
        raise ConfigError(f"{len(preds)} predictions vs {len(refs)} references")
    matches, lens, exact = [], [], []
    for pred, ref in zip(preds, refs):
        overlap = min(len(pred), len(ref))
        m = sum(1 for i in range(overlap) if pred[i] == ref[i])
        matches.append(m)
        lens.append(len(ref))
        exact.append(list(pred) == list(ref))
    return np.array(matches), np.array(lens), np.array(exact)


def length_buckets(
    src_lens, matches, ref_lens, n_buckets: int = 10
) -> list[dict]:
    """Equal-count groups by source length (sizes differ by at most one)."""
    order = np.argsort(np.asarray(src_lens), kind="stable")
    groups = np.array_split(order, n_buckets)
    buckets = []
    src_lens = np.asarray(src_lens)
    for group in groups:
        if len(group) == 0:
            buckets.append({"min_len": None, "max_len": None, "count": 0, "token_accuracy": None})
            continue
        total = int(ref_lens[group].sum())
        buckets.append(
            {
                "min_len": int(src_lens[group].min()),
                "max_len": int(src_lens[group].max()),
                "count": int(len(group)),
                "token_accuracy": float(matches[group].sum() / total) if total else None,
            }
        )
    return buckets


def _ngrams(seq: list[int], n: int) -> Counter:
    return Counter(tuple(seq[i : i + n]) for i in range(len(seq) - n + 1))


def corpus_bleu(preds: list[list[int]], refs: list[list[int]], max_n: int = 4) -> float:
    """Plain corpus BLEU: uniform weights up to 4-grams, brevity penalty."""
    if len(preds) != len(refs):
        raise ConfigError(f"{len(preds)} predictions vs {len(refs)} references")
    clipped = np.zeros(max_n)
    totals = np.zeros(max_n)
    pred_len = ref_len = 0
    for pred, ref in zip(preds, refs):
        pred_len += len(pred)
        ref_len += len(ref)
        for n in range(1, max_n + 1):
            pn = _ngrams(list(pred), n)
            rn = _ngrams(list(ref), n)
            totals[n - 1] += sum(pn.values())
            clipped[n - 1] += sum(min(c, rn[g]) for g, c in pn.items())
    if pred_len == 0 or np.any(totals == 0) or np.any(clipped == 0):
        return 0.0
    log_precision = np.log(clipped / totals).mean()
    bp = 1.0 if pred_len >= ref_len else math.exp(1.0 - ref_len / pred_len)
    return float(bp * math.exp(log_precision))


def mean_loss(
    params: ModelParams, cfg: ModelConfig, pairs, max_tokens: int
) -> float:
    """Teacher-forced token-weighted cross entropy over a pair list."""
    batches = batchify(pairs, max_tokens, seed=0)
    total_tokens = 0
    total = 0.0
    for batch in batches:
        n_tok = batch.n_target_tokens
        total += float(forward_loss(batch, params, cfg).data) * n_tok
        total_tokens += n_tok
    return total / total_tokens


def evaluate(
    params: ModelParams,
    cfg: ModelConfig,
    pairs,
    n_buckets: int = 10,
    max_tokens: int = 512,
    task_kind: str | None = None,
    decode_slack: int = 8,
) -> EvalReport:
    """Greedy-decode every pair and score against the references."""
    if not pairs:
        raise ConfigError("evaluate: no pairs")
    preds = []
    for src, tgt in pairs:
        limit = min(cfg.max_len - 1, len(tgt) + decode_slack)
        preds.append(greedy_decode(src, params, cfg, max_steps=max(1, limit)))
    refs = [list(tgt) for _, tgt in pairs]
    matches, ref_lens, exact = score_predictions(preds, refs)
    src_lens = [len(src) for src, _ in pairs]
    report = EvalReport(
        token_accuracy=float(matches.sum() / ref_lens.sum()),
        sequence_accuracy=float(exact.mean()),
        loss=mean_loss(params, cfg, pairs, max_tokens),
        buckets=length_buckets(src_lens, matches, ref_lens, n_buckets),
        n_samples=len(pairs),
    )
    if task_kind == "lexical_translate":
        report.bleu = corpus_bleu(preds, refs)
    return report


def token_accuracy(params: ModelParams, cfg: ModelConfig, pairs) -> float:
    """Micro token accuracy from greedy decoding (no buckets, no loss)."""
    preds = [
        greedy_decode(src, params, cfg, max_steps=max(1, min(cfg.max_len - 1, len(tgt) + 8)))
        for src, tgt in pairs
    ]
    matches, lens, _ = score_predictions(preds, [list(t) for _, t in pairs])
    return float(matches.sum() / lens.sum())


# ---------------------------------------------------------------------------
# training loops


@dataclass
class FitResult:
    params: ModelParams
    state: AdamState
    steps_done: int
    losses: list[float]
    best_valid_loss: float | None = None


def fit(
    cfg: TrainConfig,
    train_pairs,
    valid_pairs=None,
    steps: int = 1000,
    eval_every: int = 0,
    params: ModelParams | None = None,
    log_cb: Callable[[dict], None] | None = None,
    eval_cb: Callable[[int, ModelParams, float], bool] | None = None,
) -> FitResult:
    """Run the optimizer for ``steps`` updates over seeded epoch shuffles.

    ``eval_cb(step, params, valid_loss) -> stop`` runs at every eval point
    and may end training early; everything else is deterministic in the
    config seed.
    """
    mcfg = cfg.model
    params = params or init_params(mcfg)
    named = params.named()
    state = AdamState(named)
    drop_rng = (
        np.random.default_rng([mcfg.seed, 0x64726F70]) if mcfg.dropout > 0 else None
    )
    losses: list[float] = []
    best_valid = None
    step = 0
    epoch = 0
    stop = False
    while step < steps and not stop:
        for batch in batchify(train_pairs, cfg.max_tokens, seed=mcfg.seed + epoch):
            step += 1
            t0 = time.perf_counter()
            zero_grads(named.values())
            with Graph() as graph:
                loss = forward_loss(batch, params, mcfg, drop_rng)
            loss_val = float(loss.data)
            if not np.isfinite(loss_val):
                raise NumericError(
                    "non-finite training loss at step "
                    f"{step}; offending batch src={batch.src.tolist()}"
                )
            backward(loss, graph)
            grads = collect_grads(named)
            clip_global_norm(grads, cfg.clip_norm)
            adam_step(named, grads, state, lr_at(step, mcfg.d_model, cfg.warmup))
            losses.append(loss_val)
            if log_cb is not None:
                n_tok = int(batch.src_mask.sum()) + batch.n_target_tokens
                dt = time.perf_counter() - t0
                log_cb(
                    {
                        "step": step,
                        "loss": loss_val,
                        "lr": lr_at(step, mcfg.d_model, cfg.warmup),
                        "tokens_per_sec": n_tok / dt if dt > 0 else None,
                    }
                )
            at_eval = eval_every > 0 and step % eval_every == 0
            if (at_eval or step >= steps) and valid_pairs:
                vloss = mean_loss(params, mcfg, valid_pairs, cfg.max_tokens)
                if best_valid is None or vloss < best_valid:
                    best_valid = vloss
                if log_cb is not None:
                    log_cb({"step": step, "valid_loss": vloss})
                if eval_cb is not None and eval_cb(step, params, vloss):
                    stop = True
            if step >= steps or stop:
                break
        epoch += 1
    return FitResult(params, state, step, losses, best_valid)


def train_loop(
    cfg: TrainConfig,
    data_dir,
    out_dir,
    steps: int,
    eval_every: int = 500,
) -> EvalReport:
    """Disk-facing training run: logs, best/last checkpoints, final report.

    Writes ``config.json``, ``log.jsonl``, ``ckpt-best/``, ``ckpt-last/``
    and ``eval.json`` under ``out_dir``.
    """
    ds = load_dataset(data_dir)
    mcfg = cfg.model
    if ds.vocab.size != mcfg.src_vocab or ds.vocab.size != mcfg.tgt_vocab:
        raise ConfigError(
            f"dataset vocab {ds.vocab.size} does not match model vocab "
            f"{mcfg.src_vocab}/{mcfg.tgt_vocab}"
        )
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "config.json", "w", encoding="utf-8", newline="\n") as fh:
        fh.write(json.dumps(cfg.to_json(), indent=2, sort_keys=True) + "\n")
    log_fh = open(out / "log.jsonl", "w", encoding="utf-8", newline="\n")

    def log_cb(obj: dict) -> None:
        obj = dict(obj, time=time.time())
        log_fh.write(json.dumps(obj) + "\n")

    best_holder = {"loss": None}

    def eval_cb(step: int, params: ModelParams, vloss: float) -> bool:
        if best_holder["loss"] is None or vloss < best_holder["loss"]:
            best_holder["loss"] = vloss
            save_checkpoint(params, mcfg, out / "ckpt-best")
        return False

    try:
        if steps == 0:
            params = init_params(mcfg)
            result = FitResult(params, AdamState(params.named()), 0, [])
            log_cb({"step": 0, "valid_loss": mean_loss(params, mcfg, ds.valid, cfg.max_tokens)})
        else:
            result = fit(
                cfg,
                ds.train,
                ds.valid,
                steps=steps,
                eval_every=eval_every,
                log_cb=log_cb,
                eval_cb=eval_cb,
            )
        save_checkpoint(result.params, mcfg, out / "ckpt-last")
        if best_holder["loss"] is None:
            save_checkpoint(result.params, mcfg, out / "ckpt-best")
        task_kind = ds.spec.kind if ds.spec is not None else None
        report = evaluate(
            result.params,
            mcfg,
            ds.valid,
            max_tokens=cfg.max_tokens,
            task_kind=task_kind,
        )
        with open(out / "eval.json", "w", encoding="utf-8", newline="\n") as fh:
            fh.write(json.dumps(report.to_json(), indent=2, sort_keys=True) + "\n")
        return report
    finally:
        log_fh.close()
