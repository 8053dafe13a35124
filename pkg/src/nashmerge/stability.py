"""Stability of momentum propagation with frozen Nash weights.

With ``beta = r + iu``, step size ``gamma`` and ``alpha_sum = sum_i alpha_i``,
the state ``s = (Re mu, Im mu, E_m)`` evolves per coordinate as
``s' = A s + q`` with

    A = [[r,        -u,        -alpha_sum        ],
         [u,         r,         0                ],
         [gamma*r,  -gamma*u,   1 - gamma*alpha_sum]]

and ``q = (sum_i alpha_i E_i, 0, gamma * sum_i alpha_i E_i)``. The full
d-dimensional map is ``A kron I_d``, so its spectrum is that of ``A`` with
multiplicity d. Convergence is linear at rate ``rho(A)`` when ``rho(A) < 1``;
Fujiwara's root bound on the characteristic cubic gives a cheap sufficient
region.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import kernels
from .tensor_store import _atomic_write


@dataclass(frozen=True)
class StabilityPoint:
    r: float
    u: float
    gamma: float
    alpha_sum: float

    def __post_init__(self):
        if not self.gamma > 0:
            raise ValueError("gamma must be positive")
        if not self.alpha_sum > 0:
            raise ValueError("alpha_sum must be positive")

    @property
    def gamma_hat(self) -> float:
        return self.gamma * self.alpha_sum

    @classmethod
    def from_gamma_hat(cls, r: float, u: float, gamma_hat: float, alpha_sum: float) -> "StabilityPoint":
        return cls(r, u, gamma_hat / alpha_sum, alpha_sum)

    @classmethod
    def from_beta(cls, beta: complex, gamma: float, alpha_sum: float) -> "StabilityPoint":
        return cls(beta.real, beta.imag, gamma, alpha_sum)


@dataclass(frozen=True)
class StabilityReport:
    spectral_radius: float
    fujiwara_bound: float
    in_sufficient_region: bool
    eigenvalues: np.ndarray
    coefficients: tuple[float, float, float]


def reduced_matrix(p: StabilityPoint) -> np.ndarray:
    r, u, g, a = p.r, p.u, p.gamma, p.alpha_sum
    return np.array(
        [
            [r, -u, -a],
            [u, r, 0.0],
            [g * r, -g * u, 1.0 - g * a],
        ]
    )


def block_matrix(p: StabilityPoint, d: int) -> np.ndarray:
    """The full 3d x 3d propagation map acting on stacked (Re mu, Im mu, E_m)."""
    return np.kron(reduced_matrix(p), np.eye(d))


def char_poly(A: np.ndarray) -> tuple[float, float, float]:
    """``(a2, a1, a0)`` with ``det(xI - A) = x^3 + a2 x^2 + a1 x + a0``."""
    A = np.asarray(A, dtype=np.float64)
    return tuple(float(c) for c in kernels.char_coeffs(*A.ravel()))


def fujiwara_bound(coeffs: tuple[float, float, float]) -> float:
    """Fujiwara's bound for a monic cubic: every root has modulus <= this value."""
    return float(kernels.fujiwara(*coeffs))


def region_inequalities(coeffs: tuple[float, float, float]) -> tuple[bool, bool, bool]:
    """The three strict inequalities equivalent to ``fujiwara_bound < 1``."""
    a2, a1, a0 = coeffs
    return abs(a2) < 0.5, abs(a1) < 0.25, abs(a0) < 0.25


def eigenvalues(A: np.ndarray) -> np.ndarray:
    return np.linalg.eigvals(np.asarray(A, dtype=np.float64))


def spectral_radius(A: np.ndarray) -> float:
    return float(np.abs(eigenvalues(A)).max())


def fujiwara_region(p: StabilityPoint) -> StabilityReport:
    A = reduced_matrix(p)
    coeffs = char_poly(A)
    ev = eigenvalues(A)
    return StabilityReport(
        spectral_radius=float(np.abs(ev).max()),
        fujiwara_bound=fujiwara_bound(coeffs),
        in_sufficient_region=all(region_inequalities(coeffs)),
        eigenvalues=ev,
        coefficients=coeffs,
    )


# ---------------------------------------------------------------------------
# sweeps
# ---------------------------------------------------------------------------


@dataclass
class Sweep:
    r: np.ndarray
    u: np.ndarray
    rho: np.ndarray
    fujiwara: np.ndarray
    in_region: np.ndarray  # the three coefficient inequalities, i.e. fujiwara < 1

    def __len__(self) -> int:
        return self.r.shape[0]

    def to_csv(self) -> str:
        lines = ["r,u,rho,fujiwara,in_region"]
        for r, u, rho, f, ok in zip(self.r, self.u, self.rho, self.fujiwara, self.in_region):
            lines.append(f"{r:.9g},{u:.9g},{rho:.9g},{f:.9g},{int(ok)}")
        return "\n".join(lines) + "\n"

    def write_csv(self, path) -> None:
        _atomic_write(Path(path), self.to_csv().encode("utf-8"))


def sweep(alpha_sum: float, gamma: float, grid: int = 201,
          r_range=(-1.0, 1.0), u_range=(-1.0, 1.0)) -> Sweep:
    """Evaluate spectral radius and Fujiwara bound on a ``grid x grid`` (r, u) lattice."""
    if int(grid) < 2:
        raise ValueError("grid must have at least 2 points per axis")
    StabilityPoint(0.0, 0.0, gamma, alpha_sum)  # validates gamma, alpha_sum
    rs = np.linspace(r_range[0], r_range[1], int(grid))
    us = np.linspace(u_range[0], u_range[1], int(grid))
    R, U = np.meshgrid(rs, us, indexing="ij")
    R, U = R.ravel(), U.ravel()
    rho, fuji, inside = kernels.stability_sweep(R, U, float(gamma), float(alpha_sum))
    return Sweep(R, U, np.asarray(rho), np.asarray(fuji), np.asarray(inside, dtype=bool))


# ---------------------------------------------------------------------------
# recurrence and empirical rate
# ---------------------------------------------------------------------------


def iterate(A: np.ndarray, s0: np.ndarray, q: np.ndarray, steps: int) -> np.ndarray:
    """Iterates ``s[l+1] = A s[l] + q``; returns an array of shape (steps + 1, len(s0))."""
    out = np.empty((steps + 1, len(s0)))
    out[0] = s0
    for k in range(steps):
        out[k + 1] = A @ out[k] + q
    return out


def telescoped(A: np.ndarray, s0: np.ndarray, q: np.ndarray, steps: int) -> np.ndarray:
    """Closed form ``A^l s0 + sum_{i<l} A^i q``."""
    P = np.linalg.matrix_power(A, steps)
    acc = np.zeros_like(s0, dtype=np.float64)
    Ai = np.eye(A.shape[0])
    for _ in range(steps):
        acc = acc + Ai @ q
        Ai = Ai @ A
    return P @ s0 + acc


def fixed_point(A: np.ndarray, q: np.ndarray) -> np.ndarray:
    return np.linalg.solve(np.eye(A.shape[0]) - A, q)


def fit_log_slope(dist: np.ndarray) -> float:
    """Least-squares slope of ``log(dist)`` against the step index over the tail half."""
    dist = np.asarray(dist, dtype=np.float64)
    n = dist.shape[0]
    if n < 2:
        raise ValueError("need at least two distances to fit a rate")
    idx = np.arange(n // 2, n)
    if idx.size < 2:
        idx = np.arange(n)
    return float(np.polyfit(idx, np.log(dist[idx]), 1)[0])


def empirical_rate(A_or_point, q=None, steps: int = 200, seed: int = 0, floor: float = 1e-12) -> float:
    """Fitted log-distance slope of ``s[l+1] = A s[l] + q`` from a random start.

    Distances below ``floor`` times the initial scale are dropped: they sit at
    the rounding limit of ``s - s*`` and carry no rate information. Returns
    ``-inf`` when the iteration lands exactly on the fixed point.
    """
    A = reduced_matrix(A_or_point) if isinstance(A_or_point, StabilityPoint) else np.asarray(A_or_point, float)
    if steps < 50:
        raise ValueError("steps must be >= 50")
    if spectral_radius(A) >= 1.0 - 1e-9:
        raise ValueError("iteration is not contractive (spectral radius >= 1)")
    q = np.zeros(A.shape[0]) if q is None else np.asarray(q, dtype=np.float64)
    rng = np.random.default_rng(seed)
    s0 = rng.standard_normal(A.shape[0])
    star = fixed_point(A, q)
    dist = np.linalg.norm(iterate(A, s0, q, steps) - star, axis=1)
    cutoff = floor * max(dist[0], np.linalg.norm(star))
    usable = np.flatnonzero(dist <= cutoff)
    n = usable[0] if usable.size else dist.shape[0]
    if n < 3:
        return float("-inf")
    return fit_log_slope(dist[:n])


def certify(alpha_sums, beta: complex, gamma: float) -> tuple[float, list[StabilityReport]]:
    """Reports for each layer's ``alpha_sum``; returns the worst spectral radius and all reports."""
    reports = [fujiwara_region(StabilityPoint(beta.real, beta.imag, gamma, float(a))) for a in alpha_sums]
    worst = max((rep.spectral_radius for rep in reports), default=0.0)
    return worst, reports
