"""RMSprop-style optimizer with the update used throughout training.

Hand-rolled rather than torch.optim.RMSprop because the epsilon here sits
inside the square root:

    sq_avg <- decay * sq_avg + (1 - decay) * grad^2
    param  <- param - lr * grad / sqrt(sq_avg + eps)

torch's variant adds eps outside the root, which changes trajectories.
State (one accumulator per parameter) serializes via plain arrays so it can
ride along in checkpoints.
"""

from __future__ import annotations

import torch


class RmsProp:
    def __init__(self, params, lr: float = 1e-3, decay: float = 0.99, eps: float = 1e-8):
        self.params: list[torch.nn.Parameter] = [p for p in params]
        if not self.params:
            raise ValueError("optimizer got an empty parameter list")
        if lr <= 0 or not (0.0 <= decay < 1.0) or eps <= 0:
            raise ValueError(f"bad hyperparameters: lr={lr}, decay={decay}, eps={eps}")
        self.lr = lr
        self.decay = decay
        self.eps = eps
        self.sq_avg = [torch.zeros_like(p, requires_grad=False) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    @torch.no_grad()
    def step(self) -> None:
        for p, v in zip(self.params, self.sq_avg):
            if p.grad is None:
                continue
            g = p.grad
            v.mul_(self.decay).addcmul_(g, g, value=1.0 - self.decay)
            p.addcdiv_(g, torch.sqrt(v + self.eps), value=-self.lr)

    def state_arrays(self) -> list[torch.Tensor]:
        """The accumulator tensors, in parameter order (live views)."""
        return self.sq_avg

    def load_state_arrays(self, arrays) -> None:
        if len(arrays) != len(self.sq_avg):
            raise ValueError(
                f"state length mismatch: {len(arrays)} arrays for {len(self.sq_avg)} parameters"
            )
        for v, a in zip(self.sq_avg, arrays):
            src = torch.as_tensor(a, dtype=v.dtype)
            if src.shape != v.shape:
                raise ValueError(f"state shape mismatch: {tuple(src.shape)} vs {tuple(v.shape)}")
            v.copy_(src)
