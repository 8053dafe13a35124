"""Expert-interaction diagnostics: similarity, utilities, Pareto domination."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import kernels
from .nash_core import DomainMatrix
from .tensor_store import Layer, _atomic_write

DEFAULT_PROBES = 256


class NotMLPError(ValueError):
    """Activation similarity requested on a layer that is not a two-tensor MLP."""


@dataclass
class SimilarityMatrix:
    matrix: np.ndarray
    source: str
    probes: int | None = None
    seed: int | None = None
    metadata: dict = field(default_factory=dict)

    def to_csv(self) -> str:
        return "".join(",".join(f"{v:.6f}" for v in row) + "\n" for row in self.matrix)

    def sidecar(self) -> dict:
        meta = {"source": self.source, "probes": self.probes, "seed": self.seed, "n": int(self.matrix.shape[0])}
        meta.update(self.metadata)
        return meta

    def write(self, path) -> None:
        path = Path(path)
        _atomic_write(path, self.to_csv().encode("utf-8"))
        meta = json.dumps(self.sidecar(), indent=1, sort_keys=True) + "\n"
        _atomic_write(path.with_name(path.name + ".json"), meta.encode("utf-8"))


def _cosine_rows(X: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(X, axis=1)
    safe = np.where(norms > 0, norms, 1.0)
    Y = X / safe[:, None]
    S = Y @ Y.T
    S = 0.5 * (S + S.T)
    return np.clip(S, -1.0, 1.0)


def _mlp_weights(layer: Layer):
    if len(layer.base) != 2:
        raise NotMLPError(f"layer {layer.index}: activation mode needs exactly two tensors (in x hidden, hidden x out)")
    (n1, w1), (n2, w2) = layer.base.items()
    if w1.ndim != 2 or w2.ndim != 2 or w1.shape[1] != w2.shape[0]:
        raise NotMLPError(f"layer {layer.index}: tensors {w1.shape} and {w2.shape} do not chain as an MLP")
    return n1, n2


def cosine_similarity(layer: Layer, source: str = "parameters", probe_seed: int = 0,
                      probes: int = DEFAULT_PROBES) -> SimilarityMatrix:
    """Pairwise cosine similarity of a layer's experts.

    ``parameters`` compares flattened expert parameters. ``synthetic_activations``
    feeds seeded standard-normal probes through each expert as the MLP
    ``max(0, x @ W1) @ W2`` and averages the per-probe cosine similarity.
    """
    experts = layer.experts
    if source == "parameters":
        X = np.stack([np.concatenate([np.asarray(t, np.float64).ravel() for t in e.tensors.values()]) for e in experts])
        return SimilarityMatrix(_cosine_rows(X), source)
    if source != "synthetic_activations":
        raise ValueError(f"unknown similarity source {source!r}")
    n1, n2 = _mlp_weights(layer)
    rng = np.random.default_rng(probe_seed)
    x = rng.standard_normal((probes, layer.base[n1].shape[0]))
    outs = np.stack(
        [np.maximum(x @ np.asarray(e.tensors[n1], np.float64), 0.0) @ np.asarray(e.tensors[n2], np.float64)
         for e in experts]
    )  # (N, probes, out)
    norms = np.linalg.norm(outs, axis=2)
    unit = outs / np.where(norms > 0, norms, 1.0)[:, :, None]
    S = np.einsum("ipk,jpk->ij", unit, unit)
    # a probe that silences both outputs counts as full agreement
    silent = (norms == 0).astype(np.float64)
    S = (S + silent @ silent.T) / probes
    S = np.clip(0.5 * (S + S.T), -1.0, 1.0)
    return SimilarityMatrix(S, source, probes, probe_seed, {"nonlinearity": "relu", "probe_dist": "standard_normal"})


def utilities(G: DomainMatrix, g) -> np.ndarray:
    """Per-expert utility ``tau_i . g``."""
    g = np.asarray(g, dtype=np.float64)
    if g.shape != (G.d,):
        raise ValueError(f"direction has shape {g.shape}, domain vectors have d={G.d}")
    return G.columns.T @ g


@dataclass
class DominationVerdict:
    dominated: bool
    witness: np.ndarray | None
    samples_tested: int

    def to_json(self) -> dict:
        return {
            "dominated": self.dominated,
            "witness": None if self.witness is None else [float(v) for v in self.witness],
            "samples_tested": self.samples_tested,
        }


def pareto_check(G: DomainMatrix, g, ball_radius: float, samples: int = 10_000, seed: int = 0,
                 weak_margin: float = 1e-9, strict_margin: float = 1e-6,
                 chunk: int = 4096) -> DominationVerdict:
    """Search the radius-``ball_radius`` sphere for a direction that dominates ``g``.

    The radial extension of ``g`` is tried first, then ``samples`` seeded
    uniform directions. A candidate dominates when no utility drops by more
    than ``weak_margin`` and at least one rises by more than ``strict_margin``.
    """
    if not ball_radius > 0:
        raise ValueError("ball_radius must be positive")
    if samples < 1000:
        raise ValueError("samples must be >= 1000")
    g = np.asarray(g, dtype=np.float64)
    norm = np.linalg.norm(g)
    if norm > ball_radius * (1 + 1e-9):
        raise ValueError("direction lies outside the ball")
    u0 = utilities(G, g)
    tested = 0
    if norm > 0:
        radial = g * (ball_radius / norm)
        tested += 1
        U = (G.columns.T @ radial)[None, :]
        if kernels.first_dominator(U, u0, weak_margin, strict_margin) == 0:
            return DominationVerdict(True, radial, tested)
    rng = np.random.default_rng(seed)
    remaining = samples
    while remaining > 0:
        m = min(chunk, remaining)
        S = rng.standard_normal((m, G.d))
        S *= ball_radius / np.linalg.norm(S, axis=1)[:, None]
        U = np.ascontiguousarray(S @ G.columns)
        hit = kernels.first_dominator(U, u0, weak_margin, strict_margin)
        if hit >= 0:
            return DominationVerdict(True, S[hit], tested + hit + 1)
        tested += m
        remaining -= m
    return DominationVerdict(False, None, tested)
