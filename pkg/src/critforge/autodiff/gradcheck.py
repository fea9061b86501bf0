"""Central finite-difference check of backpropagated gradients."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Dict

import numpy as np

from .optim import ParamSet
from .tensor import Tensor


@dataclass
class GradCheckReport:
    max_rel_error: Dict[str, float]
    tol: float
    probes: Dict[str, int] = field(default_factory=dict)

    @property
    def worst(self) -> float:
        return max(self.max_rel_error.values(), default=0.0)

    @property
    def passed(self) -> bool:
        return self.worst <= self.tol


def central_difference(f: Callable[[float], float], x: float, h: float) -> float:
    if not h > 0:
        raise ValueError(f"step h must be > 0, got {h}")
    return (f(x + h) - f(x - h)) / (2.0 * h)


def finite_diff_check(
    model_forward: Callable[[], Tensor],
    params: ParamSet,
    probe_count: int = 100,
    h: float = 1e-5,
    tol: float = 1e-4,
    seed: int = 0,
    abs_floor: float = 1e-8,
) -> GradCheckReport:
    """Compare ``backward()`` gradients with central differences.

    ``model_forward`` must rebuild the graph from the current parameter values
    and return a single-element loss; any dropout inside it has to reuse the
    same mask on every call. Relative error is
    ``|a - n| / max(|a|, |n|, abs_floor)``; the floor keeps elements whose
    true gradient is exactly zero (dead relu units) from dividing by
    rounding noise.
    """
    if not h > 0:
        raise ValueError(f"step h must be > 0, got {h}")
    for name, p in params.items():
        if p.dtype != np.float64:
            raise TypeError(f"gradient checks need float64 parameters; {name} is {p.dtype}")

    params.zero_grad()
    model_forward().backward()
    analytic = params.grads()
    params.zero_grad()

    rng = np.random.default_rng(seed)
    errors, probes = {}, {}
    for name, p in params.items():
        flat = p.data.reshape(-1)
        k = min(probe_count, flat.size)
        picks = rng.choice(flat.size, size=k, replace=False)
        worst = 0.0
        for i in picks:
            orig = flat[i]
            flat[i] = orig + h
            fp = model_forward().item()
            flat[i] = orig - h
            fm = model_forward().item()
            flat[i] = orig
            num = (fp - fm) / (2.0 * h)
            ana = float(analytic[name].reshape(-1)[i])
            err = abs(ana - num) / max(abs(ana), abs(num), abs_floor)
            worst = max(worst, err)
        errors[name] = worst
        probes[name] = k
    return GradCheckReport(max_rel_error=errors, tol=tol, probes=probes)
