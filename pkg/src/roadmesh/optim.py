"""Adam optimizer over named parameter groups of numpy arrays."""

from __future__ import annotations

import numpy as np

from .errors import NumericError


class Adam:
    """Standard Adam with bias correction.

    A group is a list of arrays updated together under one learning rate.
    Moment state is kept per array entry; sub-slice updates (index arrays)
    advance only the visited entries' moments while the group timestep
    advances once per step call.
    """

    def __init__(self, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self._m: dict[str, list[np.ndarray]] = {}
        self._v: dict[str, list[np.ndarray]] = {}
        self._t: dict[str, int] = {}

    def register(self, group: str, params: list[np.ndarray]) -> None:
        self._m[group] = [np.zeros_like(p, dtype=np.float64) for p in params]
        self._v[group] = [np.zeros_like(p, dtype=np.float64) for p in params]
        self._t[group] = 0

    def timestep(self, group: str) -> int:
        return self._t[group]

    def step(self, group: str, params: list[np.ndarray],
             grads: list[np.ndarray], lr: float,
             indices: np.ndarray | None = None) -> None:
        """Update params in place. With indices, each grad covers only
        params[k][indices] and only those moment entries are touched."""
        if group not in self._m:
            raise KeyError(f"unregistered parameter group {group!r}")
        self._t[group] += 1
        t = self._t[group]
        bc1 = 1.0 - self.beta1 ** t
        bc2 = 1.0 - self.beta2 ** t
        for k, (param, grad) in enumerate(zip(params, grads)):
            grad = np.asarray(grad, dtype=np.float64)
            if not np.isfinite(grad).all():
                raise NumericError(
                    f"non-finite gradient in parameter group {group!r} "
                    f"(array {k}, step {t})")
            m, v = self._m[group][k], self._v[group][k]
            if indices is None:
                m *= self.beta1
                m += (1.0 - self.beta1) * grad
                v *= self.beta2
                v += (1.0 - self.beta2) * grad * grad
                update = (lr / bc1) * m / (np.sqrt(v / bc2) + self.eps)
                param -= update.astype(param.dtype)
            else:
                ms = self.beta1 * m[indices] + (1.0 - self.beta1) * grad
                vs = self.beta2 * v[indices] + (1.0 - self.beta2) * grad * grad
                m[indices] = ms
                v[indices] = vs
                update = (lr / bc1) * ms / (np.sqrt(vs / bc2) + self.eps)
                param[indices] -= update.astype(param.dtype)


def adam_step(params: list[np.ndarray], grads: list[np.ndarray],
              state: Adam, group: str, lr: float,
              indices: np.ndarray | None = None) -> None:
    """Functional wrapper over Adam.step (params updated in place)."""
    state.step(group, params, grads, lr, indices=indices)
