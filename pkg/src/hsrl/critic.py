"""Multi-level critic: per-context values fused by learnable softmax weights.

A small value head (2-layer perceptron, tanh hidden layer) scores every
context of the policy trajectory; raw level weights pass through a
softmax so the fused estimate is always a convex combination. The head is
shared across levels by default, with independent per-level heads behind
a config flag. A frozen target copy supplies bootstrap values and is kept
in step by soft or hard synchronization.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ContractError


@dataclass
class CriticConfig:
    d_model: int
    levels: int               # trajectory has levels + 1 contexts
    hidden: int = 64
    per_level_heads: bool = False

    @property
    def n_values(self) -> int:
        return self.levels + 1


class CriticParams:
    def __init__(self, cfg: CriticConfig, rng: np.random.Generator):
        if cfg.hidden < 1:
            raise ContractError("critic hidden width must be >= 1")
        self.cfg = cfg
        n_heads = cfg.n_values if cfg.per_level_heads else 1
        self.w1 = [ad.parameter((cfg.hidden, cfg.d_model), rng, 0.1)
                   for _ in range(n_heads)]
        self.b1 = [Tensor(np.zeros(cfg.hidden), requires_grad=True)
                   for _ in range(n_heads)]
        self.w2 = [ad.parameter((cfg.hidden,), rng, 0.1) for _ in range(n_heads)]
        self.b2 = [Tensor(np.zeros(()), requires_grad=True) for _ in range(n_heads)]
        self.w_raw = Tensor(np.zeros(cfg.n_values), requires_grad=True)

    def tensors(self) -> dict[str, Tensor]:
        out = {}
        for h in range(len(self.w1)):
            out[f"head{h}/w1"] = self.w1[h]
            out[f"head{h}/b1"] = self.b1[h]
            out[f"head{h}/w2"] = self.w2[h]
            out[f"head{h}/b2"] = self.b2[h]
        out["weights"] = self.w_raw
        return out

    def _head(self, level: int) -> int:
        return level if self.cfg.per_level_heads else 0


def value_of_context(params: CriticParams, context: Tensor, level: int = 0) -> Tensor:
    h = params._head(level)
    hidden = ad.tanh(ad.add(ad.matvec(params.w1[h], context), params.b1[h]))
    return ad.add(ad.dot(params.w2[h], hidden), params.b2[h])


def per_level_values(params: CriticParams, trajectory: list[Tensor]) -> list[Tensor]:
    if len(trajectory) != params.cfg.n_values:
        raise ContractError(f"trajectory has {len(trajectory)} contexts, expected "
                            f"{params.cfg.n_values}")
    return [value_of_context(params, c, lvl) for lvl, c in enumerate(trajectory)]


def aggregate(params: CriticParams, values: list[Tensor]) -> Tensor:
    """Softmax-normalize the raw weights and fuse per-level values."""
    if len(values) != params.cfg.n_values:
        raise ContractError(f"{len(values)} values, expected {params.cfg.n_values}")
    return ad.dot(ad.softmax(params.w_raw), ad.stack(values))


def weight_snapshot(params: CriticParams) -> np.ndarray:
    w = params.w_raw.data
    e = np.exp(w - w.max())
    return e / e.sum()


class TargetCritic:
    """Frozen copy of the critic used for bootstrap targets."""

    def __init__(self, live: CriticParams):
        self.cfg = live.cfg
        self.arrays = {name: t.data.copy() for name, t in live.tensors().items()}
        self.staleness = 0

    def _check(self, live: CriticParams) -> dict[str, np.ndarray]:
        tensors = live.tensors()
        if set(tensors) != set(self.arrays):
            raise ContractError("live/target critic structures differ")
        for name, t in tensors.items():
            if t.data.shape != self.arrays[name].shape:
                raise ContractError(f"live/target shape mismatch on {name}")
        return tensors

    def soft_update(self, live: CriticParams, tau: float) -> None:
        for name, t in self._check(live).items():
            self.arrays[name] = tau * t.data + (1.0 - tau) * self.arrays[name]
        self.staleness = 0

    def hard_sync(self, live: CriticParams) -> None:
        for name, t in self._check(live).items():
            self.arrays[name] = t.data.copy()
        self.staleness = 0

    def _head_value(self, context: np.ndarray, level: int) -> float:
        h = level if self.cfg.per_level_heads else 0
        hidden = np.tanh(self.arrays[f"head{h}/w1"] @ context + self.arrays[f"head{h}/b1"])
        return float(self.arrays[f"head{h}/w2"] @ hidden + self.arrays[f"head{h}/b2"])

    def value(self, contexts: list[np.ndarray]) -> float:
        """Fused value of a trajectory; a single context bypasses fusion
        (single-level critic ablation)."""
        values = np.array([self._head_value(c, lvl) for lvl, c in enumerate(contexts)])
        if len(values) == 1:
            return float(values[0])
        if len(values) != self.cfg.n_values:
            raise ContractError(f"{len(values)} contexts, expected {self.cfg.n_values}")
        w = self.arrays["weights"]
        e = np.exp(w - w.max())
        return float((e / e.sum()) @ values)
