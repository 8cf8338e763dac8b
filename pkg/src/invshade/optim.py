"""Parameter registry and projected Adam."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np


@dataclass
class Param:
    value: np.ndarray
    lr: float
    project: Callable[[np.ndarray], None] | None = None
    frozen: bool = False
    m: np.ndarray | None = None
    v: np.ndarray | None = None
    step: int = 0

    def __post_init__(self):
        if self.m is None:
            self.m = np.zeros_like(self.value)
        if self.v is None:
            self.v = np.zeros_like(self.value)


@dataclass
class ParamSet:
    params: dict[str, Param] = field(default_factory=dict)

    def add(self, name: str, value: np.ndarray, lr: float, project=None, frozen: bool = False) -> Param:
        p = Param(value, lr, project, frozen)
        self.params[name] = p
        return p

    def __getitem__(self, name: str) -> Param:
        return self.params[name]

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def freeze(self, *names: str, frozen: bool = True):
        for n in names:
            self.params[n].frozen = frozen

    def only(self, *names: str):
        """Unfreeze exactly ``names``."""
        for n, p in self.params.items():
            p.frozen = n not in names

    def zero_grads(self) -> dict[str, np.ndarray]:
        return {n: np.zeros_like(p.value) for n, p in self.params.items()}

    def reset_moments(self):
        for p in self.params.values():
            p.m[...] = 0.0
            p.v[...] = 0.0
            p.step = 0


def adam_step(params: ParamSet, grads: dict[str, np.ndarray], beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8, lr: float | None = None):
    """In-place Adam update followed by each parameter's projection.

    Frozen parameters are left bitwise untouched, including their moments.
    """
    for name, p in params.params.items():
        if p.frozen:
            continue
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.value)
        if g.shape != p.value.shape:
            raise ValueError(f"gradient for {name} has shape {g.shape}, parameter has {p.value.shape}")
        p.step += 1
        p.m *= beta1
        p.m += (1 - beta1) * g
        p.v *= beta2
        p.v += (1 - beta2) * g * g
        mhat = p.m / (1 - beta1 ** p.step)
        vhat = p.v / (1 - beta2 ** p.step)
        p.value -= (p.lr if lr is None else lr) * mhat / (np.sqrt(vhat) + eps)
        if p.project is not None:
            p.project(p.value)


@dataclass(frozen=True)
class ClampProjection:
    lo: float | None
    hi: float | None

    def __call__(self, value: np.ndarray):
        np.clip(value, self.lo, self.hi, out=value)


def clamp_projection(lo: float | None, hi: float | None) -> ClampProjection:
    return ClampProjection(lo, hi)
