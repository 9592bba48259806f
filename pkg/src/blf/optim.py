"""Decoupled-weight-decay adaptive-moment optimizer with a linear warmup/decay schedule."""

from __future__ import annotations

import numpy as np

from .errors import UsageError
from .tensor import Parameter


def schedule_lr(base_lr: float, step: int, warmup_steps: int, total_steps: int) -> float:
    """Linear warmup to base_lr at `warmup_steps`, then linear decay to 0 at `total_steps`.

    Past total_steps the rate clamps at 0.
    """
    if warmup_steps <= 0 or total_steps <= 0:
        raise UsageError("warmup_steps and total_steps must be positive")
    warm = step / warmup_steps
    if total_steps > warmup_steps:
        decay = 1.0 - (step - warmup_steps) / (total_steps - warmup_steps)
    else:
        decay = 1.0 if step <= warmup_steps else 0.0
    return base_lr * max(0.0, min(warm, decay, 1.0))


class AdamW:
    """AdamW over a fixed parameter list.

    With `warmup_steps`/`total_steps` set, the learning rate follows the
    linear warmup/decay schedule; with both None it stays constant at
    `base_lr` (finetuning).
    """

    def __init__(
        self,
        params: list[Parameter],
        base_lr: float,
        warmup_steps: int | None = None,
        total_steps: int | None = None,
        betas: tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-6,
        weight_decay: float = 0.01,
    ):
        if base_lr <= 0:
            raise UsageError("base_lr must be positive")
        if weight_decay < 0:
            raise UsageError("weight_decay must be non-negative")
        if (warmup_steps is None) != (total_steps is None):
            raise UsageError("warmup_steps and total_steps must be given together")
        names = [p.name for p in params]
        if len(set(names)) != len(names):
            raise UsageError("parameter names must be unique within one optimizer")
        self.params = list(params)
        self.base_lr = base_lr
        self.warmup_steps = warmup_steps
        self.total_steps = total_steps
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.step_count = 0
        self._m = {p.name: np.zeros_like(p.data) for p in self.params}
        self._v = {p.name: np.zeros_like(p.data) for p in self.params}

    def current_lr(self) -> float:
        if self.warmup_steps is None:
            return self.base_lr
        return schedule_lr(self.base_lr, self.step_count, self.warmup_steps, self.total_steps)

    def step(self) -> float:
        """Apply one update from accumulated grads, then zero them. Returns the lr used."""
        self.step_count += 1
        lr = self.current_lr()
        b1, b2 = self.betas
        t = self.step_count
        for p in self.params:
            g = p.grad
            m = self._m[p.name]
            v = self._v[p.name]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * (g * g)
            mhat = m / (1 - b1**t)
            vhat = v / (1 - b2**t)
            p.data -= lr * (mhat / (np.sqrt(vhat) + self.eps) + self.weight_decay * p.data)
            p.grad[...] = 0.0
        return lr

    def state_dict(self) -> dict:
        return {
            "step_count": self.step_count,
            "base_lr": self.base_lr,
            "warmup_steps": self.warmup_steps,
            "total_steps": self.total_steps,
            "betas": list(self.betas),
            "eps": self.eps,
            "weight_decay": self.weight_decay,
        }

    def load_state_dict(self, state: dict, moments: dict[str, np.ndarray]) -> None:
        self.step_count = int(state["step_count"])
        self.base_lr = float(state["base_lr"])
        self.warmup_steps = state["warmup_steps"]
        self.total_steps = state["total_steps"]
        self.betas = tuple(state["betas"])
        self.eps = float(state["eps"])
        self.weight_decay = float(state["weight_decay"])
        for p in self.params:
            self._m[p.name][...] = moments[f"m.{p.name}"]
            self._v[p.name][...] = moments[f"v.{p.name}"]

    def moment_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for p in self.params:
            out[f"m.{p.name}"] = self._m[p.name]
            out[f"v.{p.name}"] = self._v[p.name]
        return out
