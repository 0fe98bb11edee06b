# Copyright 2025 Zenshiro
# Licensed under the Apache License, Version 2.0

"""
Projected gradient ascent against early-exit losses.

The attack works at the raw input (module 1) or at an intermediate feature
z_{m-1} (modules m >= 2). Anything exposing
`loss_and_input_grad(z, labels) -> (per-sample losses, per-sample grads)`
can be attacked; `ModuleParams` and `ModuleNet`-bound objectives qualify.
"""

from dataclasses import dataclass
from typing import Literal, Optional, Protocol, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from .exceptions import NumericError
from .tensor import Tensor


class Objective(Protocol):
    def loss_and_input_grad(self, z: Tensor, labels) -> Tuple[np.ndarray, Tensor]:
        ...


class AttackConfig(BaseModel):
    """PGD settings for one module boundary."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    norm: Literal["linf", "l2"] = "linf"
    epsilon: float = Field(0.0, ge=0.0)
    alpha: float = Field(0.01, gt=0.0)
    steps: int = Field(10, ge=0)
    init: Literal["zero", "random"] = "zero"
    clamp: Optional[Tuple[float, float]] = None

    @field_validator("norm", mode="before")
    @classmethod
    def _normalize_norm(cls, value):
        if isinstance(value, str):
            value = value.strip().lower().replace("_", "")
            return {"inf": "linf", "linfinity": "linf"}.get(value, value)
        return value

    @field_validator("clamp", mode="before")
    @classmethod
    def _parse_clamp(cls, value):
        if isinstance(value, str):
            value = value.strip()
            if value.lower() in ("", "none"):
                return None
            return tuple(float(v) for v in value.split(","))
        return value

    @model_validator(mode="after")
    def _check_clamp(self):
        if self.clamp is not None and self.clamp[0] >= self.clamp[1]:
            raise ValueError(f"clamp range {self.clamp} is empty")
        return self

    def scaled(self, factor: float) -> "AttackConfig":
        """Same attack with epsilon and alpha multiplied by `factor`."""
        alpha = self.alpha * factor if factor > 0 else self.alpha
        return self.model_copy(update={"epsilon": self.epsilon * factor, "alpha": alpha})

    def describe(self) -> str:
        return f"PGD-{self.steps} {self.norm} eps={self.epsilon:g} alpha={self.alpha:g}"


@dataclass
class AttackStats:
    """Per-caller attack bookkeeping (no global counters)."""

    calls: int = 0
    steps: int = 0
    clean_losses: Optional[np.ndarray] = None


def _per_sample_norm(x: np.ndarray) -> np.ndarray:
    flat = x.reshape(x.shape[0], -1).astype(np.float64)
    return np.sqrt((flat * flat).sum(axis=1))


def project(delta: Tensor, norm: str, epsilon: float) -> Tensor:
    """
    Project onto the epsilon ball.

    A 1-D `delta` is a single vector; otherwise the leading axis is the batch
    and every sample is projected on its own.

    Args:
        delta: Perturbation
        norm: "linf" (elementwise clip) or "l2" (radial rescale)
        epsilon: Ball radius (>= 0)
    """
    if epsilon < 0:
        raise ValueError(f"epsilon must be >= 0, got {epsilon}")
    if norm in ("linf", "l_inf"):
        return np.clip(delta, -epsilon, epsilon).astype(delta.dtype, copy=False)
    if norm != "l2":
        raise ValueError(f"unknown norm {norm!r}")
    batch = delta[None] if delta.ndim == 1 else delta
    norms = _per_sample_norm(batch)
    scale = np.where(norms > epsilon, epsilon / np.where(norms > 0, norms, 1.0), 1.0)
    projected = (batch.astype(np.float64) * scale.reshape((-1,) + (1,) * (batch.ndim - 1))).astype(delta.dtype)
    return projected[0] if delta.ndim == 1 else projected


def _clamp(z: Tensor, delta: Tensor, clamp: Optional[Tuple[float, float]]) -> Tensor:
    if clamp is None:
        return delta
    lo, hi = clamp
    return (np.clip(z + delta, lo, hi) - z).astype(delta.dtype, copy=False)


def _random_init(z: Tensor, cfg: AttackConfig, rng: np.random.Generator) -> Tensor:
    if cfg.norm == "linf":
        return rng.uniform(-cfg.epsilon, cfg.epsilon, size=z.shape).astype(z.dtype)
    direction = rng.standard_normal(size=z.shape)
    norms = _per_sample_norm(direction)
    direction /= np.where(norms > 0, norms, 1.0).reshape((-1,) + (1,) * (z.ndim - 1))
    dim = int(np.prod(z.shape[1:]))
    radius = cfg.epsilon * rng.uniform(0.0, 1.0, size=z.shape[0]) ** (1.0 / dim)
    return (direction * radius.reshape((-1,) + (1,) * (z.ndim - 1))).astype(z.dtype)


def pgd(objective: Objective, z: Tensor, labels, cfg: AttackConfig,
        rng: Optional[np.random.Generator] = None, stats: Optional[AttackStats] = None) -> Tensor:
    """
    Inner maximization of the early-exit loss over the epsilon ball.

    Sign ascent for l_inf, unit-l2-normalized gradient ascent for l2; every
    step is followed by projection onto the ball and the clamp range.
    Parameters of `objective` are only read.

    Args:
        objective: Module (or any objective) to attack
        z: Clean module input batch
        labels: Class indices
        cfg: Attack settings
        rng: Generator for random init (required when cfg.init == "random")
        stats: Optional bookkeeping; receives the clean losses when the
            attack starts from zero

    Returns:
        delta with the shape of z

    Raises:
        NumericError: non-finite loss during the attack (sample index attached)
    """
    if stats is not None:
        stats.calls += 1
        stats.clean_losses = None
    delta = np.zeros_like(z)
    if cfg.epsilon == 0 or len(z) == 0:
        return delta
    if cfg.init == "random":
        if rng is None:
            raise ValueError("random PGD init needs a generator")
        delta = _clamp(z, project(_random_init(z, cfg, rng), cfg.norm, cfg.epsilon), cfg.clamp)
    alpha = np.float64(cfg.alpha)
    for step in range(cfg.steps):
        losses, grad = objective.loss_and_input_grad(z + delta, labels)
        bad = ~np.isfinite(losses)
        if bad.any():
            raise NumericError("non-finite loss during attack", sample=int(np.flatnonzero(bad)[0]))
        if step == 0 and cfg.init == "zero" and stats is not None:
            stats.clean_losses = losses.copy()
        if cfg.norm == "linf":
            update = alpha * np.sign(grad.astype(np.float64))
        else:
            norms = _per_sample_norm(grad)
            unit = grad.astype(np.float64) / np.where(norms > 0, norms, 1.0).reshape((-1,) + (1,) * (z.ndim - 1))
            update = alpha * unit
        delta = (delta.astype(np.float64) + update).astype(z.dtype)
        delta = _clamp(z, project(delta, cfg.norm, cfg.epsilon), cfg.clamp)
        if stats is not None:
            stats.steps += 1
    return delta
