"""AdamW with decoupled weight decay, plus the polynomial LR schedule."""

from __future__ import annotations

import numpy as np

from .tensor import Tensor


def poly_lr(step: int, total: int, lr0: float, power: float = 0.9) -> float:
    """lr0 * (1 - step/total)^power for step in [0, total)."""
    if total <= 0:
        raise ValueError("schedule length must be positive")
    if not 0 <= step < total:
        raise ValueError(f"step {step} outside [0, {total})")
    return lr0 * (1.0 - step / total) ** power


class AdamW:
    """Tracks first/second moments per parameter; weight decay is applied
    directly to the parameter, not through the moments."""

    def __init__(self, params: list[Tensor], lr0: float = 2e-4,
                 beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8, weight_decay: float = 0.01):
        self.params = list(params)
        if len(set(map(id, self.params))) != len(self.params):
            raise ValueError("duplicate parameter")
        self.lr0 = lr0
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self._m = [np.zeros_like(p.data) for p in self.params]
        self._v = [np.zeros_like(p.data) for p in self.params]

    def step(self, grads: dict, lr: float | None = None) -> None:
        """Applies one update from ``grads`` (a Tensor -> ndarray mapping, as
        produced by backward); parameters without an entry are untouched."""
        lr = self.lr0 if lr is None else lr
        self.t += 1
        ids = {id(p) for p in self.params}
        for g_param in grads:
            if id(g_param) not in ids:
                raise ValueError("gradient for a parameter not owned by this optimizer")
        for p, m, v in zip(self.params, self._m, self._v):
            g = grads.get(p)
            if g is None:
                continue
            if g.shape != p.data.shape:
                raise ValueError(f"gradient shape {g.shape} != param shape {p.data.shape}")
            ty = p.data.dtype.type
            b1, b2 = ty(self.beta1), ty(self.beta2)
            m *= b1
            m += (ty(1) - b1) * g.astype(p.data.dtype, copy=False)
            v *= b2
            v += (ty(1) - b2) * np.square(g.astype(p.data.dtype, copy=False))
            mhat = m / (ty(1) - b1 ** self.t)
            vhat = v / (ty(1) - b2 ** self.t)
            upd = mhat / (np.sqrt(vhat) + ty(self.eps))
            if self.weight_decay:
                upd = upd + ty(self.weight_decay) * p.data
            p.data = p.data - ty(lr) * upd
