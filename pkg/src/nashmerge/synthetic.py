"""Seeded synthetic expert stacks.

All randomness goes through ``numpy.random.Generator(PCG64(seed))``
(``numpy.random.default_rng``), so a seed fixes every tensor bit-for-bit.
"""

from __future__ import annotations

import numpy as np

from .tensor_store import Expert, ExpertStack, Layer

RNG_ALGORITHM = "numpy.random.PCG64"


def rng_for(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(seed))


def random_stack(
    layers: int,
    experts: int,
    dim: int | None = None,
    seed: int = 0,
    scale: float = 1.0,
    shapes: list[tuple[str, tuple[int, ...]]] | None = None,
    frozen: bool = False,
    routing: bool = False,
    curvature: bool = False,
) -> ExpertStack:
    """Standard-normal experts and base, times ``scale``.

    ``shapes`` overrides the default single ``weight`` tensor of shape
    ``(dim,)``. With ``frozen=True`` every layer repeats layer 0's tensors,
    which makes the forcing of momentum propagation stationary.
    """
    if layers < 0 or experts < 1:
        raise ValueError("need layers >= 0 and experts >= 1")
    if shapes is None:
        if dim is None or dim < 1:
            raise ValueError("dim must be >= 1")
        shapes = [("weight", (dim,))]
    rng = rng_for(seed)

    def draw():
        return {n: (scale * rng.standard_normal(s)).astype(np.float32) for n, s in shapes}

    out = []
    first = None
    for l in range(layers):
        if frozen and first is not None:
            layer = Layer(
                l,
                {n: t.copy() for n, t in first.base.items()},
                [Expert(e.name, {n: t.copy() for n, t in e.tensors.items()}) for e in first.experts],
                None if first.routing is None else first.routing.copy(),
                None if first.curvature is None else
                {k: {n: v.copy() for n, v in per.items()} for k, per in first.curvature.items()},
            )
        else:
            base = draw()
            exps = [Expert(f"expert_{i}", draw()) for i in range(experts)]
            s = rng.dirichlet(np.ones(experts)) if routing else None
            curv = None
            if curvature:
                curv = {e.name: {n: rng.uniform(0.5, 1.5, sh) for n, sh in shapes} for e in exps}
            layer = Layer(l, base, exps, s, curv)
        if first is None:
            first = layer
        out.append(layer)
    return ExpertStack(out)
