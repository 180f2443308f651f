"""Adam with bias correction and the linear learning-rate decay schedule."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class TrainingFault(RuntimeError):
    """Raised when a non-finite value would corrupt the parameters."""


def linear_decay_lr(base: float, epoch: int, total: int) -> float:
    if total <= 0:
        raise ValueError("schedule horizon must be positive")
    if epoch < 0 or epoch > total:
        raise ValueError(f"epoch {epoch} outside [0, {total}]")
    return max(0.0, base * (1.0 - epoch / total))


@dataclass
class OptimizerState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    horizon: int = 100
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


class Adam:
    def __init__(self, params: dict, lr: float = 1e-4, betas=(0.9, 0.999), eps: float = 1e-8,
                 horizon: int = 100):
        self.params = params
        self.state = OptimizerState(lr=lr, beta1=betas[0], beta2=betas[1], eps=eps, horizon=horizon)
        for k, p in params.items():
            self.state.m[k] = np.zeros_like(p.data)
            self.state.v[k] = np.zeros_like(p.data)

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def step(self, lr_t: float | None = None) -> None:
        st = self.state
        lr_t = st.lr if lr_t is None else lr_t
        for k, p in self.params.items():
            if p.grad is not None and not np.all(np.isfinite(p.grad)):
                raise TrainingFault(f"non-finite gradient in parameter {k!r} at step {st.step + 1}")
        st.step += 1
        b1, b2 = st.beta1, st.beta2
        c1 = 1.0 - b1 ** st.step
        c2 = 1.0 - b2 ** st.step
        for k, p in self.params.items():
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            m = st.m[k]
            v = st.v[k]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            upd = (m / c1) / (np.sqrt(v / c2) + st.eps)
            p.data = p.data - (lr_t * upd).astype(p.data.dtype, copy=False)

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for k in self.params:
            out[f"m/{k}"] = self.state.m[k]
            out[f"v/{k}"] = self.state.v[k]
        return out

    def load_state_arrays(self, arrays: dict, step: int) -> None:
        for k in self.params:
            self.state.m[k] = np.array(arrays[f"m/{k}"], dtype=self.params[k].data.dtype)
            self.state.v[k] = np.array(arrays[f"v/{k}"], dtype=self.params[k].data.dtype)
        self.state.step = step
