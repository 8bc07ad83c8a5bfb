"""Decoupled-weight-decay adaptive-moment optimizer over named parameters.

Hand-rolled so moments are plain named arrays: checkpoints can serialize
them and a resumed run replays the exact parameter trajectory.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch


@dataclass
class OptimizerConfig:
    learning_rate: float = 1e-5
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 1e-2
    epsilon: float = 1e-8
    grad_clip_norm: float = 1.0

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")


class AdamW:
    """AdamW over a {name: parameter} dict with global-norm gradient clipping.

    Parameters without a gradient after backward are skipped entirely
    (no decay), which keeps untouched components bitwise frozen.
    """

    def __init__(self, params: dict[str, torch.Tensor], config: OptimizerConfig):
        self.params = dict(params)
        self.config = config
        self.step_count = 0
        self.exp_avg = {
            name: torch.zeros_like(p, requires_grad=False)
            for name, p in self.params.items()
        }
        self.exp_avg_sq = {
            name: torch.zeros_like(p, requires_grad=False)
            for name, p in self.params.items()
        }

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def clip_gradients(self) -> float:
        """Scale all gradients so their global L2 norm is at most the cap."""
        cap = self.config.grad_clip_norm
        grads = [p.grad for p in self.params.values() if p.grad is not None]
        if not grads:
            return 0.0
        total = torch.sqrt(sum((g.double() ** 2).sum() for g in grads))
        norm = float(total)
        if cap > 0 and norm > cap:
            scale = cap / (norm + 1e-12)
            with torch.no_grad():
                for g in grads:
                    g.mul_(scale)
        return norm

    def step(self) -> float:
        """Apply one update; returns the pre-clip gradient norm."""
        cfg = self.config
        norm = self.clip_gradients()
        self.step_count += 1
        b1c = 1.0 - cfg.beta1**self.step_count
        b2c = 1.0 - cfg.beta2**self.step_count
        with torch.no_grad():
            for name, p in self.params.items():
                g = p.grad
                if g is None:
                    continue
                p.mul_(1.0 - cfg.learning_rate * cfg.weight_decay)
                m = self.exp_avg[name]
                v = self.exp_avg_sq[name]
                m.mul_(cfg.beta1).add_(g, alpha=1.0 - cfg.beta1)
                v.mul_(cfg.beta2).addcmul_(g, g, value=1.0 - cfg.beta2)
                denom = (v / b2c).sqrt_().add_(cfg.epsilon)
                p.addcdiv_(m, denom, value=-cfg.learning_rate / b1c)
        return norm

    def state_arrays(self) -> dict[str, np.ndarray]:
        arrays: dict[str, np.ndarray] = {
            "step_count": np.array([self.step_count], dtype=np.int64)
        }
        for name, t in self.exp_avg.items():
            arrays[f"exp_avg/{name}"] = t.detach().cpu().numpy().copy()
        for name, t in self.exp_avg_sq.items():
            arrays[f"exp_avg_sq/{name}"] = t.detach().cpu().numpy().copy()
        return arrays

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        self.step_count = int(np.asarray(arrays["step_count"]).reshape(-1)[0])
        for name in self.params:
            self.exp_avg[name].copy_(torch.from_numpy(np.asarray(arrays[f"exp_avg/{name}"])))
            self.exp_avg_sq[name].copy_(
                torch.from_numpy(np.asarray(arrays[f"exp_avg_sq/{name}"]))
            )
