"""AdamW with decoupled weight decay and a step-decay learning-rate schedule."""
from __future__ import annotations

import numpy as np


class AdamW:
    def __init__(self, params, lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 1e-4):
        self.params = list(params)
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.state = [{"step": 0, "m": np.zeros(p.shape), "v": np.zeros(p.shape)} for p in self.params]

    def step(self) -> None:
        grads = [p.grad if p.grad is not None else np.zeros(p.shape) for p in self.params]
        for p, g, st in zip(self.params, grads, self.state):
            p.data = adamw_step(p.data, g, st, self.lr, self.betas, self.weight_decay, self.eps)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


def adamw_step(param: np.ndarray, grad: np.ndarray, state: dict, lr: float, betas=(0.9, 0.999),
               weight_decay: float = 1e-4, eps: float = 1e-8) -> np.ndarray:
    """One AdamW update; mutates ``state`` (keys ``step``, ``m``, ``v``) and returns the new parameter."""
    if param.shape != grad.shape or state["m"].shape != param.shape or state["v"].shape != param.shape:
        raise ValueError(f"shape mismatch: param {param.shape}, grad {grad.shape}, state {state['m'].shape}")
    b1, b2 = betas
    state["step"] += 1
    t = state["step"]
    state["m"] = b1 * state["m"] + (1 - b1) * grad
    state["v"] = b2 * state["v"] + (1 - b2) * grad * grad
    m_hat = state["m"] / (1 - b1 ** t)
    v_hat = state["v"] / (1 - b2 ** t)
    param = param * (1 - lr * weight_decay)
    return param - lr * m_hat / (np.sqrt(v_hat) + eps)


def step_decay(base_lr: float, step: int, total: int, fraction: float = 0.4, rate: float = 0.5) -> float:
    """Multiply by ``rate`` every ``fraction * total`` steps."""
    interval = max(1, int(round(fraction * total)))
    return base_lr * rate ** (step // interval)
