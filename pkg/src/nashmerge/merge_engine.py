"""Expert merging strategies over an :class:`ExpertStack`.

Propagating strategies carry a base expert from layer to layer,
``E_m[l+1] = E_m[l] + step(l)``, where ``step`` is built from the domain
vectors ``tau_i = E_i[l] - E_m[l]`` of layer ``l``:

- ``average``            step = (gamma / N) * sum_i M_i * tau_i
- ``ep_camex``           step = gamma * sum_i M_i * (s_i * tau_i)
- ``namex``              step = gamma * sum_i alpha_i * tau_i   (Nash weights)
- ``namex_momentum``     complex momentum over the Nash direction
- ``namex_quaternion``   quaternion momentum over the Nash direction
- ``ep_camex_momentum``  complex momentum over the ``average`` direction

``camex_static`` merges each layer against its own stored base without
propagation. Every strategy also emits the routed expert
``E_hat[l] = E_m[l] + eta * sum_i M_i * (s_i * tau_i)`` with ``tau`` taken
against the (propagated) base of that layer.
"""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .momentum import MomentumState, Quaternion, momentum_step_complex, momentum_step_quaternion
from .nash_core import NashConfig, Status, cross_signs, gram, solve_nash
from .tensor_store import Expert, ExpertStack, Layer, _atomic_write

log = logging.getLogger(__name__)

STRATEGIES = (
    "average",
    "camex_static",
    "ep_camex",
    "namex",
    "namex_momentum",
    "namex_quaternion",
    "ep_camex_momentum",
)
MOMENTUM_STRATEGIES = ("namex_momentum", "namex_quaternion", "ep_camex_momentum")
FIRST_LAYER_ONLY = "first"


class MergeConfigError(ValueError):
    pass


class DegenerateLayerError(RuntimeError):
    """The bargaining problem at a scheduled layer has a zero-norm domain vector."""

    def __init__(self, layer: int, detail: str = ""):
        self.layer = layer
        msg = f"Nash solver degenerate at layer {layer}"
        super().__init__(f"{msg}: {detail}" if detail else msg)


@dataclass
class MergeConfig:
    strategy: str = "namex"
    gamma: float = 1.0
    eta: float = 1.0
    beta: complex | Quaternion | None = None
    recompute_every: int | str = FIRST_LAYER_ONLY
    nash: NashConfig = field(default_factory=NashConfig)
    flatten: str = "per_layer"
    allow_degenerate: bool = False

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise MergeConfigError(f"unknown strategy {self.strategy!r}")
        if not (math.isfinite(self.gamma) and self.gamma >= 0):
            raise MergeConfigError("gamma must be a nonnegative real")
        if not (math.isfinite(self.eta) and self.eta >= 0):
            raise MergeConfigError("eta must be a nonnegative real")
        if self.strategy in MOMENTUM_STRATEGIES and not self.gamma > 0:
            raise MergeConfigError("momentum strategies need gamma > 0")
        if self.recompute_every != FIRST_LAYER_ONLY:
            if isinstance(self.recompute_every, bool) or not isinstance(self.recompute_every, int):
                raise MergeConfigError("recompute_every must be a positive int or 'first'")
            if self.recompute_every < 1:
                raise MergeConfigError("recompute_every must be >= 1")
        if self.flatten not in ("per_layer", "per_tensor"):
            raise MergeConfigError(f"unknown flatten mode {self.flatten!r}")
        if self.strategy == "namex_quaternion":
            b = self.beta if self.beta is not None else Quaternion(0.0)
            if not isinstance(b, Quaternion):
                b = Quaternion(*b) if isinstance(b, (tuple, list)) else Quaternion(float(np.real(b)))
            self.beta = b
        elif self.strategy in MOMENTUM_STRATEGIES:
            b = 0j if self.beta is None else self.beta
            if isinstance(b, Quaternion):
                raise MergeConfigError("complex momentum needs a complex beta")
            self.beta = complex(b)

    def solves_at(self, pos: int) -> bool:
        if self.recompute_every == FIRST_LAYER_ONLY:
            return pos == 0
        return pos % self.recompute_every == 0


@dataclass
class LayerTrace:
    layer: int
    strategy: str
    alpha: np.ndarray | None
    g_norm: float
    step_norm: float
    solver_iters: int = 0
    solver_calls: int = 0
    status: str | None = None
    cross_signs: list[int] | None = None
    uniform_routing: bool = False


@dataclass
class MergedOutput:
    bases: list[dict[str, np.ndarray]]
    routed: list[dict[str, np.ndarray]]
    trace: list[LayerTrace]
    final_base: dict[str, np.ndarray] | None = None

    def solver_calls(self) -> int:
        return sum(t.solver_calls for t in self.trace)

    def to_stack(self) -> ExpertStack:
        """Checkpoint view: propagated base plus a single routed ``merged`` expert per layer."""
        layers = []
        for t, base, routed in zip(self.trace, self.bases, self.routed):
            layers.append(
                Layer(
                    t.layer,
                    {n: a.astype(np.float32) for n, a in base.items()},
                    [Expert("merged", {n: a.astype(np.float32) for n, a in routed.items()})],
                    routing=np.array([1.0]),
                )
            )
        return ExpertStack(layers)


# ---------------------------------------------------------------------------
# flat layer view
# ---------------------------------------------------------------------------


@dataclass
class _Flat:
    index: int
    names: list[str]
    shapes: list[tuple[int, ...]]
    slices: list[slice]
    base: np.ndarray  # (d,)
    experts: np.ndarray  # (d, N), column-major
    curvature: np.ndarray | None  # (d, N); None means identity
    routing: np.ndarray  # (N,)
    uniform: bool

    @property
    def layout(self):
        return tuple(zip(self.names, self.shapes))

    def weighted(self, tau: np.ndarray) -> np.ndarray:
        return tau if self.curvature is None else self.curvature * tau

    def unflatten(self, vec: np.ndarray) -> dict[str, np.ndarray]:
        return {n: vec[s].reshape(shape).copy() for n, s, shape in zip(self.names, self.slices, self.shapes)}


def _flatten(layer: Layer) -> _Flat:
    if not layer.experts:
        raise MergeConfigError(f"layer {layer.index}: no experts")
    if not layer.base:
        raise MergeConfigError(f"layer {layer.index}: missing base expert")
    names = list(layer.base)
    shapes = [tuple(layer.base[n].shape) for n in names]
    slices, start = [], 0
    for shape in shapes:
        size = math.prod(shape)
        slices.append(slice(start, start + size))
        start += size
    base = np.concatenate([np.asarray(layer.base[n], np.float64).ravel() for n in names])
    experts = np.empty((start, len(layer.experts)), order="F")
    for i, e in enumerate(layer.experts):
        for n, s in zip(names, slices):
            experts[s, i] = e.tensors[n].ravel()
    curvature = None
    if layer.curvature is not None:
        curvature = np.ones_like(experts)
        for i, e in enumerate(layer.experts):
            for n, s in zip(names, slices):
                diag = layer.curvature_for(e.name, n)
                if diag is not None:
                    curvature[s, i] = np.asarray(diag, np.float64).ravel()
    routing = layer.routing_or_uniform()
    if np.any(routing < 0):
        raise MergeConfigError(f"layer {layer.index}: negative routing weight")
    return _Flat(layer.index, names, shapes, slices, base, experts, curvature, routing, layer.routing is None)


def _routed_vec(base: np.ndarray, fl: _Flat, eta: float, tau: np.ndarray | None = None) -> np.ndarray:
    if tau is None:
        tau = fl.experts - base[:, None]
    return base + eta * (fl.weighted(tau) @ fl.routing)


def routed_merge(layer: Layer, base: dict[str, np.ndarray] | None, cfg: MergeConfig) -> dict[str, np.ndarray]:
    """``base + eta * sum_i M_i * (s_i * tau_i)`` with ``tau_i = E_i - base``."""
    fl = _flatten(layer)
    b = fl.base if base is None else np.concatenate([np.asarray(base[n], np.float64).ravel() for n in fl.names])
    return fl.unflatten(_routed_vec(b, fl, cfg.eta))


# ---------------------------------------------------------------------------
# direction rules
# ---------------------------------------------------------------------------


class _NashDirection:
    """Nash weights on the configured recompute schedule, reused in between."""

    def __init__(self, cfg: MergeConfig):
        self.cfg = cfg
        self.alpha = None  # ndarray (per_layer) or list of ndarrays (per_tensor)
        self.n_experts = None
        self.layout = None

    def __call__(self, pos: int, fl: _Flat, tau: np.ndarray, rec: LayerTrace) -> np.ndarray:
        cfg = self.cfg
        if cfg.solves_at(pos):
            self._solve(fl, tau, rec)
        elif self.alpha is not None:
            if fl.experts.shape[1] != self.n_experts:
                raise MergeConfigError(
                    f"layer {fl.index}: cannot reuse weights solved for {self.n_experts} experts "
                    f"on a layer with {fl.experts.shape[1]}"
                )
            if cfg.flatten == "per_tensor" and fl.layout != self.layout:
                raise MergeConfigError(f"layer {fl.index}: per-tensor weights reused across a layout change")
        if self.alpha is None:
            rec.alpha = None
            return np.zeros(fl.base.shape[0])
        if cfg.flatten == "per_layer":
            g = tau @ self.alpha
            rec.alpha = self.alpha.copy()
        else:
            g = np.empty(fl.base.shape[0])
            for s, a in zip(fl.slices, self.alpha):
                g[s] = tau[s] @ a
            rec.alpha = np.mean(self.alpha, axis=0)
        radius = cfg.nash.ball_radius
        if radius is not None:
            norm = np.linalg.norm(g)
            if norm > 0:
                g = g * (radius / norm)
        return g

    def _solve(self, fl: _Flat, tau: np.ndarray, rec: LayerTrace) -> None:
        cfg = self.cfg
        blocks = [tau] if cfg.flatten == "per_layer" else [tau[s] for s in fl.slices]
        alphas, signs = [], None
        rec.status = Status.CONVERGED.value
        for block in blocks:
            K = gram(block)
            w = solve_nash(K, cfg.nash)
            rec.solver_calls += 1
            rec.solver_iters += w.iterations
            if w.status is Status.DEGENERATE:
                if not cfg.allow_degenerate:
                    raise DegenerateLayerError(fl.index, "zero-norm domain vector")
                rec.status = Status.DEGENERATE.value
                self.alpha = None
                self.n_experts = None
                return
            if w.status is Status.BUDGET_EXHAUSTED:
                log.warning(
                    "layer %d: Nash solve stopped at residual %.3g after %d steps",
                    fl.index, w.residual, w.iterations,
                )
                rec.status = Status.BUDGET_EXHAUSTED.value
            elif signs is None and cfg.flatten == "per_layer":
                signs = cross_signs(K, w)
            alphas.append(w.alpha)
        rec.cross_signs = signs
        self.alpha = alphas[0] if cfg.flatten == "per_layer" else alphas
        self.n_experts = fl.experts.shape[1]
        self.layout = fl.layout


def _average_direction(pos, fl, tau, rec):
    n = fl.experts.shape[1]
    rec.alpha = np.full(n, 1.0 / n)
    return fl.weighted(tau).sum(axis=1) / n


def _routed_direction(pos, fl, tau, rec):
    rec.alpha = fl.routing.copy()
    return fl.weighted(tau) @ fl.routing


# ---------------------------------------------------------------------------
# drivers
# ---------------------------------------------------------------------------


def _propagate(stack: ExpertStack, cfg: MergeConfig, direction_rule, momentum: str | None) -> MergedOutput:
    bases, routed, trace = [], [], []
    current = None
    layout = None
    state = None
    fl = None
    for pos, layer in enumerate(stack.layers):
        fl = _flatten(layer)
        if current is None or fl.layout != layout:
            # a layout change restarts propagation from this layer's stored base
            current = fl.base.copy()
            state = MomentumState.zeros(momentum, current.shape[0]) if momentum else None
        layout = fl.layout
        rec = LayerTrace(fl.index, cfg.strategy, None, 0.0, 0.0, uniform_routing=fl.uniform)
        tau = fl.experts - current[:, None]
        g = direction_rule(pos, fl, tau, rec)
        if momentum == "complex":
            state, step = momentum_step_complex(state, g, cfg.beta, cfg.gamma)
        elif momentum == "quaternion":
            state, step = momentum_step_quaternion(state, g, cfg.beta, cfg.gamma)
        else:
            step = cfg.gamma * g
        bases.append(fl.unflatten(current))
        routed.append(fl.unflatten(_routed_vec(current, fl, cfg.eta, tau)))
        nxt = current + step
        rec.g_norm = float(np.linalg.norm(g))
        rec.step_norm = float(np.linalg.norm(nxt - current))
        trace.append(rec)
        current = nxt
    final = fl.unflatten(current) if fl is not None else None
    return MergedOutput(bases, routed, trace, final)


def merge_average(stack: ExpertStack, cfg: MergeConfig) -> MergedOutput:
    return _propagate(stack, cfg, _average_direction, None)


def merge_ep_camex(stack: ExpertStack, cfg: MergeConfig) -> MergedOutput:
    return _propagate(stack, cfg, _routed_direction, None)


def merge_namex(stack: ExpertStack, cfg: MergeConfig) -> MergedOutput:
    return _propagate(stack, cfg, _NashDirection(cfg), None)


def merge_namex_momentum(stack: ExpertStack, cfg: MergeConfig) -> MergedOutput:
    if cfg.strategy == "namex_quaternion":
        return _propagate(stack, cfg, _NashDirection(cfg), "quaternion")
    if cfg.strategy == "ep_camex_momentum":
        return _propagate(stack, cfg, _average_direction, "complex")
    return _propagate(stack, cfg, _NashDirection(cfg), "complex")


def merge_camex_static(stack: ExpertStack, cfg: MergeConfig) -> MergedOutput:
    bases, routed, trace = [], [], []
    for layer in stack.layers:
        fl = _flatten(layer)
        tau = fl.experts - fl.base[:, None]
        delta = fl.weighted(tau) @ fl.routing
        bases.append(fl.unflatten(fl.base))
        routed.append(fl.unflatten(fl.base + cfg.eta * delta))
        trace.append(
            LayerTrace(fl.index, cfg.strategy, fl.routing.copy(), float(np.linalg.norm(delta)), 0.0,
                       uniform_routing=fl.uniform)
        )
    return MergedOutput(bases, routed, trace, None)


_DISPATCH = {
    "average": merge_average,
    "camex_static": merge_camex_static,
    "ep_camex": merge_ep_camex,
    "namex": merge_namex,
    "namex_momentum": merge_namex_momentum,
    "namex_quaternion": merge_namex_momentum,
    "ep_camex_momentum": merge_namex_momentum,
}


def merge(stack: ExpertStack, cfg: MergeConfig) -> MergedOutput:
    stack.validate()
    return _DISPATCH[cfg.strategy](stack, cfg)


# ---------------------------------------------------------------------------
# trace CSV
# ---------------------------------------------------------------------------


def trace_csv(trace: list[LayerTrace]) -> str:
    width = max((len(t.alpha) for t in trace if t.alpha is not None), default=0)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(
        ["layer", "strategy", *[f"alpha_{i + 1}" for i in range(width)],
         "g_norm", "step_norm", "solver_iters", "solver_calls"]
    )
    for t in trace:
        alpha = [] if t.alpha is None else [repr(float(a)) for a in t.alpha]
        alpha += [""] * (width - len(alpha))
        w.writerow([t.layer, t.strategy, *alpha, repr(t.g_norm), repr(t.step_norm), t.solver_iters, t.solver_calls])
    return buf.getvalue()


def write_trace_csv(trace: list[LayerTrace], path) -> None:
    _atomic_write(Path(path), trace_csv(trace).encode("utf-8"))
