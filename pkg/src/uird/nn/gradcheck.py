"""Central finite-difference verification of analytic gradients."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Mapping

import numpy as np

from .engine import Tensor, backward


@dataclass
class GradCheckReport:
    max_rel_error: float
    n_checked: int
    worst: str
    tolerance: float

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.max_rel_error) and self.max_rel_error < self.tolerance)


def relative_error(analytic: float, numeric: float, floor: float = 1e-6) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def finite_diff_check(loss_fn: Callable[[], Tensor], params: Mapping[str, Tensor],
                      tolerance: float = 1e-5, n_samples: int = 100, h: float = 1e-5,
                      seed: int = 0, floor: float = 1e-6) -> GradCheckReport:
    """Compare backward() against central differences on a random subset of entries.

    ``loss_fn`` must rebuild the scalar loss from the current parameter values
    and be deterministic. At least ``n_samples`` entries are checked (all of
    them when fewer exist).
    """
    loss = loss_fn()
    backward(loss)
    analytic = {k: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data))
                for k, p in params.items()}
    coords = [(k, i) for k, p in params.items() for i in range(p.data.size)]
    rng = np.random.default_rng(seed)
    if len(coords) > n_samples:
        picks = rng.choice(len(coords), size=n_samples, replace=False)
        coords = [coords[j] for j in sorted(picks)]
    worst, worst_name = 0.0, ""
    for name, idx in coords:
        flat = params[name].data.reshape(-1)
        orig = flat[idx]
        flat[idx] = orig + h
        up = float(loss_fn().data)
        flat[idx] = orig - h
        down = float(loss_fn().data)
        flat[idx] = orig
        numeric = (up - down) / (2.0 * h)
        err = relative_error(float(analytic[name].reshape(-1)[idx]), numeric, floor)
        if not np.isfinite(err):
            err = np.inf
        if err > worst or not worst_name:
            worst, worst_name = err, f"{name}[{idx}]"
    return GradCheckReport(worst, len(coords), worst_name, tolerance)


def input_grad_check(fn: Callable[[Tensor], Tensor], x: np.ndarray, **kwargs) -> GradCheckReport:
    """Gradient check with respect to an input array instead of parameters."""
    xt = Tensor(np.array(x, dtype=np.float64), requires_grad=True)
    return finite_diff_check(lambda: fn(xt), {"input": xt}, **kwargs)
