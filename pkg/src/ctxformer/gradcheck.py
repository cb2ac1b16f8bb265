"""Central-difference verification of reverse-mode gradients."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from .errors import NumericError
from .tensor import Graph, Tensor, backward, zero_grads


@dataclass
class GradCheckReport:
    max_rel_err: float
    worst_param: str
    per_param: dict[str, float] = field(default_factory=dict)

    def ok(self, tol: float) -> bool:
        return self.max_rel_err < tol


def _named(params) -> list[tuple[str, Tensor]]:
    if isinstance(params, Mapping):
        return list(params.items())
    return [(f"param[{i}]", t) for i, t in enumerate(params)]


def jitter_params(params, scale: float = 0.5, seed: int = 0) -> None:
    """Nudge every parameter off symmetric initialization points, in place.

    Zero-initialized gate vectors pin every gate to 0.5, which makes the
    key-side context projection a per-row constant that row-softmax is
    invariant to -- its true gradient is identically zero there, and a
    central difference measures only float roundoff.  Checking derivatives
    at a generic nearby point keeps every entry informative.

    The noise is scaled by 1/sqrt(fan-in) so that dot products against the
    jittered tensor stay O(scale): a flat jitter on wide gate vectors can
    saturate the sigmoid, which deadens its gradient instead.
    """
    rng = np.random.default_rng(seed)
    for _, t in _named(params):
        fan_in = t.shape[0] if t.data.ndim else 1
        t.data += rng.normal(scale=scale / np.sqrt(max(1, fan_in)), size=t.shape)


def finite_diff_gradcheck(
    f: Callable[..., Tensor],
    params: Mapping[str, Tensor] | Sequence[Tensor],
    h: float = 1e-4,
    tol: float = 1e-4,
    n_samples: int = 32,
    seed: int = 0,
) -> GradCheckReport:
    """Compare backward() gradients of ``f(params)`` against central differences.

    ``f`` must be a deterministic function of the parameter values that
    returns a scalar Tensor.  For tensors larger than ``n_samples`` entries
    a seeded sample of at least ``n_samples`` entries is checked; smaller
    tensors are checked exhaustively.  The relative error per entry is
    ``|a - b| / max(|a|, |b|, 1e-8)``.
    """
    if not (1e-6 <= h <= 1e-3):
        raise ValueError(f"step size h={h} outside [1e-6, 1e-3]")
    named = _named(params)
    tensors = [t for _, t in named]
    zero_grads(tensors)
    with Graph() as graph:
        loss = f(params)
    if not np.isfinite(loss.data):
        raise NumericError("gradcheck: f returned a non-finite value")
    backward(loss, graph)
    analytic = {
        name: (np.zeros_like(t.data) if t.grad is None else t.grad.copy())
        for name, t in named
    }

    rng = np.random.default_rng(seed)
    report = GradCheckReport(max_rel_err=0.0, worst_param="")

    def rel_err_at(name: str, flat: np.ndarray, i: int, a: float, step: float) -> float:
        orig = flat[i]
        flat[i] = orig + step
        f_plus = float(f(params).data)
        flat[i] = orig - step
        f_minus = float(f(params).data)
        flat[i] = orig
        if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
            raise NumericError(f"gradcheck: non-finite f while perturbing {name}")
        numeric = (f_plus - f_minus) / (2.0 * step)
        return abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)

    for name, t in named:
        flat = t.data.reshape(-1)
        size = flat.size
        if size <= n_samples:
            idx = np.arange(size)
        else:
            idx = rng.choice(size, size=n_samples, replace=False)
        worst = 0.0
        for i in idx:
            a = analytic[name].reshape(-1)[i]
            rel = rel_err_at(name, flat, i, a, h)
            if rel >= tol:
                # Central differences fail two ways a correct gradient
                # cannot: straddling a relu kink (cured by a smaller step)
                # or roundoff on a near-zero derivative (cured by a larger
                # one). Keep the best estimate; a genuinely wrong gradient
                # disagrees at every step size.
                for retry in (h / 4.0, 4.0 * h):
                    rel = min(rel, rel_err_at(name, flat, i, a, min(max(retry, 1e-6), 1e-3)))
                    if rel < tol:
                        break
            worst = max(worst, rel)
        report.per_param[name] = worst
        if worst >= report.max_rel_err:
            report.max_rel_err = worst
            report.worst_param = name
    return report
