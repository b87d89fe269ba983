"""AdamW with step-indexed learning-rate schedules."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, NumericError

SCHEDULES = ("cosine", "one-cycle", "constant")


def schedule_multiplier(kind: str, step: int, total: int, pct_start: float = 0.3) -> float:
    """Learning-rate multiplier at ``step`` (0-based) of ``total``.

    ``cosine`` decays from 1 to 0 at ``step == total``. ``one-cycle`` ramps
    from 1/25 up to 1 over the first ``pct_start`` of training, then follows a
    cosine down towards 1/(25 * 1e4).
    """
    if total <= 0:
        raise ConfigError("schedule length must be positive")
    frac = min(max(step / total, 0.0), 1.0)
    if kind == "constant":
        return 1.0
    if kind == "cosine":
        return 0.5 * (1.0 + math.cos(math.pi * frac))
    if kind == "one-cycle":
        lo, end = 1.0 / 25.0, 1.0 / 25.0 / 1e4
        if frac < pct_start:
            x = frac / pct_start
            return lo + (1.0 - lo) * 0.5 * (1.0 - math.cos(math.pi * x))
        x = (frac - pct_start) / (1.0 - pct_start)
        return end + (1.0 - end) * 0.5 * (1.0 + math.cos(math.pi * x))
    raise ConfigError(f"unknown schedule {kind!r}; expected one of {SCHEDULES}")


@dataclass
class AdamW:
    lr: float = 1e-3
    weight_decay: float = 0.0
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    schedule: str = "constant"
    total_steps: int = 1
    step_count: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def current_lr(self) -> float:
        return self.lr * schedule_multiplier(self.schedule, self.step_count, self.total_steps)

    def step(self, params: dict, grads: dict) -> None:
        """Update ``params`` (name -> ndarray) in place from ``grads``."""
        lr = self.current_lr()
        b1, b2 = self.betas
        self.step_count += 1
        c1 = 1.0 - b1**self.step_count
        c2 = 1.0 - b2**self.step_count
        for name, g in grads.items():
            if not np.all(np.isfinite(g)):
                raise NumericError(f"non-finite gradient for {name}")
            p = params[name]
            m = self.m.get(name)
            if m is None:
                m = self.m[name] = np.zeros_like(p)
                self.v[name] = np.zeros_like(p)
            v = self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            if self.weight_decay:
                p *= 1.0 - lr * self.weight_decay
            p -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for name in self.m:
            out[f"opt.m.{name}"] = self.m[name]
            out[f"opt.v.{name}"] = self.v[name]
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray], step_count: int) -> None:
        self.m = {k[len("opt.m."):]: v.copy() for k, v in arrays.items() if k.startswith("opt.m.")}
        self.v = {k[len("opt.v."):]: v.copy() for k, v in arrays.items() if k.startswith("opt.v.")}
        self.step_count = step_count
