"""Adam with decoupled weight decay, plus a reduce-on-plateau scheduler."""

from __future__ import annotations

import numpy as np

from .autograd import Var
from .errors import ShapeMismatchError


class Adam:
    """Standard Adam (beta1=0.9, beta2=0.999, eps=1e-8, bias correction).

    Weight decay is decoupled: parameters flagged in ``decay_mask`` shrink by
    lr * wd * theta before the moment update, so biases and normalization
    parameters are left untouched.
    """

    def __init__(self, params: list[Var], lr: float, weight_decay: float = 0.0,
                 decay_mask: list[bool] | None = None,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        if lr <= 0:
            raise ValueError("lr must be positive")
        self.params = params
        self.lr = float(lr)
        self.weight_decay = float(weight_decay)
        self.decay_mask = list(decay_mask) if decay_mask is not None else [True] * len(params)
        if len(self.decay_mask) != len(params):
            raise ShapeMismatchError("decay_mask length must match params")
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.step_count = 0
        self.m = [np.zeros_like(p.value) for p in params]
        self.v = [np.zeros_like(p.value) for p in params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def step(self) -> None:
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1 ** t
        bc2 = 1.0 - self.beta2 ** t
        for i, p in enumerate(self.params):
            g = p.grad
            if g is None:
                g = np.zeros_like(p.value)
            if g.shape != p.value.shape:
                raise ShapeMismatchError("gradient shape mismatch")
            if self.weight_decay != 0.0 and self.decay_mask[i]:
                p.value -= self.lr * self.weight_decay * p.value
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * (g * g)
            m_hat = self.m[i] / bc1
            v_hat = self.v[i] / bc2
            p.value -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)

    def state_dict(self) -> dict:
        return {
            "step_count": self.step_count,
            "m": [a.copy() for a in self.m],
            "v": [a.copy() for a in self.v],
        }

    def load_state_dict(self, state: dict) -> None:
        self.step_count = int(state["step_count"])
        self.m = [np.asarray(a, dtype=np.float64).copy() for a in state["m"]]
        self.v = [np.asarray(a, dtype=np.float64).copy() for a in state["v"]]


class PlateauScheduler:
    """Halve the learning rate after `patience` epochs without improvement.

    Improvement means val_loss < best * (1 - threshold). When a reduction
    would push the rate below min_lr, the rate clamps to min_lr and the stop
    flag is raised.
    """

    def __init__(self, lr: float, factor: float = 0.5, patience: int = 25,
                 min_lr: float = 1e-6, threshold: float = 1e-4):
        self.lr = float(lr)
        self.factor = factor
        self.patience = patience
        self.min_lr = min_lr
        self.threshold = threshold
        self.best = np.inf
        self.bad_epochs = 0

    def step(self, val_loss: float) -> tuple[float, bool]:
        """Consume one epoch's validation loss; returns (lr, stop)."""
        if not np.isfinite(val_loss):
            raise ValueError("validation loss must be finite")
        stop = False
        if val_loss < self.best * (1.0 - self.threshold):
            self.best = float(val_loss)
            self.bad_epochs = 0
        else:
            self.bad_epochs += 1
        if self.bad_epochs > self.patience:
            self.bad_epochs = 0
            reduced = self.lr * self.factor
            if reduced < self.min_lr:
                self.lr = self.min_lr
                stop = True
            else:
                self.lr = reduced
        return self.lr, stop

    def state_dict(self) -> dict:
        return {"lr": self.lr, "best": self.best, "bad_epochs": self.bad_epochs}

    def load_state_dict(self, state: dict) -> None:
        self.lr = float(state["lr"])
        self.best = float(state["best"])
        self.bad_epochs = int(state["bad_epochs"])
