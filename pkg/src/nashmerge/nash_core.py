"""Domain vectors, Gram matrices and the Nash bargaining weights.

For domain vectors tau_i = E_i - E_m stacked as columns of G, the bargaining
weights are the positive vector alpha with ``(G^T G) alpha = 1 / alpha``; the
agreed update direction is ``g = G alpha`` and every expert's utility
``g . tau_i`` equals ``1 / alpha_i``.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from . import kernels
from .tensor_store import Layer


class NashError(ValueError):
    """Invalid input or violated precondition in the bargaining solver."""


class Status(str, enum.Enum):
    CONVERGED = "converged"
    BUDGET_EXHAUSTED = "budget_exhausted"
    DEGENERATE = "degenerate"


@dataclass(frozen=True)
class DomainMatrix:
    """d x N matrix whose columns are domain vectors."""

    columns: np.ndarray

    def __post_init__(self):
        cols = np.asarray(self.columns, dtype=np.float64)
        if cols.ndim == 1:
            cols = cols[:, None]
        if cols.ndim != 2 or cols.shape[0] < 1 or cols.shape[1] < 1:
            raise NashError(f"domain matrix must be d x N with d, N >= 1, got {cols.shape}")
        if not np.all(np.isfinite(cols)):
            raise NashError("domain matrix has non-finite entries")
        object.__setattr__(self, "columns", cols)

    @property
    def d(self) -> int:
        return self.columns.shape[0]

    @property
    def N(self) -> int:
        return self.columns.shape[1]


@dataclass(frozen=True)
class NashConfig:
    tolerance: float = 1e-10
    max_iterations: int = 20
    ball_radius: float | None = None

    def __post_init__(self):
        if not self.tolerance > 0:
            raise NashError("tolerance must be positive")
        if int(self.max_iterations) < 1:
            raise NashError("max_iterations must be >= 1")
        if self.ball_radius is not None and not self.ball_radius > 0:
            raise NashError("ball_radius must be positive when set")


@dataclass(frozen=True)
class NashWeights:
    alpha: np.ndarray
    residual: float
    iterations: int
    status: Status

    @property
    def converged(self) -> bool:
        return self.status is Status.CONVERGED


def domain_vectors(layer: Layer, flatten: str = "per_layer", base=None):
    """Domain vectors of a layer's experts against ``base`` (default: the layer's own base).

    ``flatten="per_layer"`` concatenates all tensors in manifest order into one
    DomainMatrix; ``"per_tensor"`` returns ``{tensor_name: DomainMatrix}``.
    """
    if not layer.experts:
        raise NashError("empty expert list")
    base = layer.base if base is None else base
    if flatten == "per_tensor":
        out = {}
        for name, b in base.items():
            b = np.asarray(b, dtype=np.float64).ravel()
            out[name] = DomainMatrix(
                np.stack([np.asarray(e.tensors[name], np.float64).ravel() - b for e in layer.experts], axis=1)
            )
        return out
    if flatten != "per_layer":
        raise NashError(f"unknown flatten mode {flatten!r}")
    b = np.concatenate([np.asarray(t, np.float64).ravel() for t in base.values()])
    cols = [
        np.concatenate([np.asarray(e.tensors[n], np.float64).ravel() for n in base]) - b
        for e in layer.experts
    ]
    return DomainMatrix(np.stack(cols, axis=1))


def gram(G: DomainMatrix) -> np.ndarray:
    cols = G.columns if isinstance(G, DomainMatrix) else np.asarray(G, np.float64)
    K = cols.T @ cols
    return 0.5 * (K + K.T)


def solve_nash(K: np.ndarray, cfg: NashConfig | None = None) -> NashWeights:
    """Solve ``alpha * (K @ alpha) = 1`` for positive ``alpha``.

    Starts from ``1 / sqrt(diag K)``, which is already the solution when K is
    diagonal. A zero-norm domain vector (diagonal entry <= 1e-12 * max
    diagonal) makes the problem degenerate and is reported, not raised.
    """
    cfg = cfg or NashConfig()
    K = np.asarray(K, dtype=np.float64)
    if K.ndim != 2 or K.shape[0] != K.shape[1] or K.shape[0] == 0:
        raise NashError(f"Gram matrix must be square and non-empty, got shape {K.shape}")
    if not np.all(np.isfinite(K)):
        raise NashError("Gram matrix has non-finite entries")
    scale = max(np.abs(K).max(), np.finfo(float).tiny)
    if np.abs(K - K.T).max() > 1e-9 * scale:
        raise NashError("Gram matrix is not symmetric")

    n = K.shape[0]
    diag = np.diag(K).copy()
    if diag.max() <= 0 or np.any(diag <= 1e-12 * diag.max()):
        return NashWeights(np.zeros(n), float("inf"), 0, Status.DEGENERATE)

    # start on the ray through 1/sqrt(diag K), at the potential's minimum along it
    alpha0 = 1.0 / np.sqrt(diag)
    curv = float(alpha0 @ K @ alpha0)
    if curv > 0:
        alpha0 *= np.sqrt(n / curv)
    alpha, residual, iters = kernels.nash_newton(
        np.ascontiguousarray(K), alpha0, float(cfg.tolerance), int(cfg.max_iterations)
    )
    residual = float(residual)
    ok = residual <= cfg.tolerance and np.all(alpha > 0)
    status = Status.CONVERGED if ok else Status.BUDGET_EXHAUSTED
    return NashWeights(np.asarray(alpha), residual, int(iters), status)


def direction(G: DomainMatrix, weights: NashWeights, cfg: NashConfig | None = None) -> np.ndarray:
    """Agreed update ``g = sum_i alpha_i tau_i``, rescaled to the ball radius if one is set."""
    cfg = cfg or NashConfig()
    if not weights.converged:
        raise NashError(f"direction needs converged weights, got status {weights.status.value}")
    alpha = np.asarray(weights.alpha, dtype=np.float64)
    if not np.any(alpha):
        raise NashError("all-zero weights")
    if alpha.shape != (G.N,):
        raise NashError(f"weights have shape {alpha.shape}, domain matrix has N={G.N}")
    g = G.columns @ alpha
    if cfg.ball_radius is not None:
        norm = np.linalg.norm(g)
        if norm > 0:
            g = g * (cfg.ball_radius / norm)
    return g


def interaction_split(K: np.ndarray, weights: NashWeights, j: int) -> tuple[float, float]:
    """Split ``1/alpha_j`` into the expert's own term and the pull of the others.

    A positive cross term means the other experts help expert ``j``
    (cooperation); a negative one means they work against it.
    """
    if not weights.converged:
        raise NashError("interaction_split needs converged weights")
    K = np.asarray(K, dtype=np.float64)
    n = K.shape[0]
    if not 0 <= j < n:
        raise NashError(f"expert index {j} out of range for N={n}")
    alpha = weights.alpha
    own = alpha[j] * K[j, j]
    cross = float(np.dot(np.delete(alpha, j), np.delete(K[:, j], j)))
    return float(own), cross


def cross_signs(K: np.ndarray, weights: NashWeights) -> list[int]:
    return [int(np.sign(interaction_split(K, weights, j)[1])) for j in range(K.shape[0])]
