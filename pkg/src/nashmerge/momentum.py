"""Complex and quaternion momentum buffers for base-expert propagation."""

from __future__ import annotations

import cmath
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from . import kernels


class Quaternion(NamedTuple):
    w: float
    x: float = 0.0
    y: float = 0.0
    z: float = 0.0

    def __mul__(self, other):  # Hamilton product
        if not isinstance(other, Quaternion):
            return NotImplemented
        w1, x1, y1, z1 = self
        w2, x2, y2, z2 = other
        return Quaternion(
            w1 * w2 - x1 * x2 - y1 * y2 - z1 * z2,
            w1 * x2 + x1 * w2 + y1 * z2 - z1 * y2,
            w1 * y2 - x1 * z2 + y1 * w2 + z1 * x2,
            w1 * z2 + x1 * y2 - y1 * x2 + z1 * w2,
        )

    def norm(self) -> float:
        return float(np.sqrt(self.w**2 + self.x**2 + self.y**2 + self.z**2))

    @classmethod
    def parse(cls, text: str) -> "Quaternion":
        parts = [float(p) for p in text.split(",")]
        if len(parts) != 4:
            raise ValueError(f"quaternion needs 4 components w,x,y,z, got {text!r}")
        return cls(*parts)


def polar(modulus: float, phi: float) -> complex:
    if not modulus > 0:
        raise ValueError("modulus must be positive")
    return cmath.rect(modulus, phi)


@dataclass(frozen=True)
class MomentumState:
    """Momentum buffer: complex128 of shape (d,), or float64 (d, 4) lanes w,x,y,z."""

    kind: str
    buffer: np.ndarray

    @classmethod
    def zeros(cls, kind: str, d: int) -> "MomentumState":
        if kind == "complex":
            return cls(kind, np.zeros(d, dtype=np.complex128))
        if kind == "quaternion":
            return cls(kind, np.zeros((d, 4)))
        raise ValueError(f"unknown momentum kind {kind!r}")

    @property
    def d(self) -> int:
        return self.buffer.shape[0]


def _check_grad(state: MomentumState, g) -> np.ndarray:
    g = np.asarray(g, dtype=np.float64)
    if g.shape != (state.d,):
        raise ValueError(f"gradient has shape {g.shape}, buffer has length {state.d}")
    if not np.all(np.isfinite(g)):
        raise ValueError("non-finite gradient")
    return g


def _check_gamma(gamma: float) -> float:
    gamma = float(gamma)
    if not gamma > 0:
        raise ValueError("gamma must be a positive real")
    return gamma


def momentum_step_complex(state: MomentumState, g, beta: complex, gamma: float):
    """``mu <- beta * mu + g``; returns the new state and the displacement ``Re(gamma * mu)``."""
    if state.kind != "complex":
        raise ValueError("state is not a complex momentum buffer")
    g = _check_grad(state, g)
    gamma = _check_gamma(gamma)
    mu = complex(beta) * state.buffer + g
    return MomentumState("complex", mu), gamma * mu.real


def momentum_step_quaternion(state: MomentumState, g, beta: Quaternion, gamma: float):
    """Left Hamilton product ``beta * mu`` per entry, ``g`` added to the scalar lane.

    The displacement reads the scalar lane, so a purely real ``beta`` reproduces
    the complex (and classical heavy-ball) trajectory exactly.
    """
    if state.kind != "quaternion":
        raise ValueError("state is not a quaternion momentum buffer")
    g = _check_grad(state, g)
    gamma = _check_gamma(gamma)
    b = np.asarray(tuple(beta), dtype=np.float64)
    if b.shape != (4,) or not np.all(np.isfinite(b)):
        raise ValueError("beta must be a finite quaternion")
    mu = kernels.quat_momentum(b, np.ascontiguousarray(state.buffer), g)
    return MomentumState("quaternion", mu), gamma * mu[:, 0]
