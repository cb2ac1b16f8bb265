"""Aggregate learned gate values per layer/side and export analysis CSVs.

Gate statistics stream through count-weighted mean/variance merging, so
collecting over shards and merging gives the same numbers (to 1e-9) as one
pass over everything.  Exports are deterministic byte-for-byte.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .context import ContextStrategy
from .errors import ConfigError
from .model import ModelConfig, ModelParams, decode_teacher_forced, encode

Key = tuple[str, int, str]  # (block, layer, side)


@dataclass
class _Moments:
    count: int = 0
    mean: float = 0.0
    m2: float = 0.0

    def update(self, values: np.ndarray) -> None:
        n2 = values.size
        if n2 == 0:
            return
        mean2 = float(values.mean())
        m2_2 = float(((values - mean2) ** 2).sum())
        self._merge(n2, mean2, m2_2)

    def _merge(self, n2: int, mean2: float, m2_2: float) -> None:
        n1 = self.count
        n = n1 + n2
        delta = mean2 - self.mean
        self.mean += delta * n2 / n
        self.m2 += m2_2 + delta * delta * n1 * n2 / n
        self.count = n

    @property
    def std(self) -> float:
        return float(np.sqrt(self.m2 / self.count)) if self.count else 0.0


@dataclass
class LambdaStats:
    """Per (block, layer, side) gate-value moments over a dataset."""

    moments: dict[Key, _Moments] = field(default_factory=dict)

    def add(self, block: str, layer: int, side: str, values: np.ndarray) -> None:
        self.moments.setdefault((block, layer, side), _Moments()).update(values)

    def merge(self, other: "LambdaStats") -> "LambdaStats":
        for key, m in other.moments.items():
            if m.count:
                self.moments.setdefault(key, _Moments())._merge(m.count, m.mean, m.m2)
        return self

    def rows(self) -> list[tuple[str, int, str, float, float, int]]:
        out = []
        for (block, layer, side) in sorted(self.moments):
            m = self.moments[(block, layer, side)]
            out.append((block, layer, side, m.mean, m.std, m.count))
        return out


def collect_lambda_stats(params: ModelParams, cfg: ModelConfig, pairs) -> LambdaStats:
    """Forward the model over (src, tgt) pairs and pool gate values.

    Requires learned gating and an active strategy; there is nothing to
    collect otherwise.
    """
    ctx = cfg.context
    if ctx.strategy is ContextStrategy.NONE:
        raise ConfigError("nothing to collect: context strategy is none")
    if ctx.gating != "learned":
        raise ConfigError("nothing to collect: gating is fixed, not learned")
    from .data import BOS, EOS

    stats = LambdaStats()
    for src, tgt in pairs:
        # frame exactly like training batches: EOS-terminated source,
        # BOS-prefixed target
        enc_states, enc_traces = encode(list(src) + [EOS], params, cfg)
        _, dec_traces = decode_teacher_forced([BOS] + list(tgt), enc_states, params, cfg)
        for block, traces in (("enc", enc_traces), ("dec", dec_traces)):
            for trace in traces:
                if trace.lambda_q is not None:
                    stats.add(block, trace.layer, "q", trace.lambda_q)
                if trace.lambda_k is not None:
                    stats.add(block, trace.layer, "k", trace.lambda_k)
    if not stats.moments:
        raise ConfigError("nothing to collect: no layer produced gate values")
    return stats


def export_lambda_csv(stats: LambdaStats, path) -> None:
    """CSV with header block,layer,side,mean_lambda,std_lambda,count."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["block", "layer", "side", "mean_lambda", "std_lambda", "count"])
        for block, layer, side, mean, std, count in stats.rows():
            writer.writerow([block, layer, side, f"{mean:.6f}", f"{std:.6f}", count])


def read_lambda_csv(path) -> list[dict]:
    with open(path, "r", encoding="utf-8", newline="") as fh:
        return list(csv.DictReader(fh))


def export_comparison_csv(rows: list[dict], path) -> None:
    """Strategy-comparison table: one row per evaluated model."""
    header = ["model", "strategy", "params", "tokens_per_sec", "token_acc", "seq_acc"]
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow(
                [
                    row["model"],
                    row["strategy"],
                    row["params"],
                    f"{row['tokens_per_sec']:.1f}",
                    f"{row['token_acc']:.6f}",
                    f"{row['seq_acc']:.6f}",
                ]
            )
