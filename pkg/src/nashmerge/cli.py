"""Command-line interface.

Exit codes: 0 success, 1 configuration error, 2 I/O error, 3 degenerate
Nash problem. Files are written to a temporary name and renamed, so a failing
command leaves no partial output.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import math
import sys

import numpy as np

from . import kernels
from .analysis import NotMLPError, cosine_similarity, pareto_check, utilities
from .merge_engine import (
    FIRST_LAYER_ONLY,
    DegenerateLayerError,
    MergeConfig,
    MergeConfigError,
    merge,
    write_trace_csv,
)
from .momentum import Quaternion
from .nash_core import NashConfig, NashError, Status, direction, domain_vectors, gram, interaction_split, solve_nash
from .stability import StabilityPoint, fit_log_slope, fujiwara_region, sweep
from .synthetic import RNG_ALGORITHM, random_stack
from .tensor_store import CheckpointError, read_checkpoint, read_problem_csv, write_checkpoint

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_DEGENERATE = 0, 1, 2, 3

STRATEGY_FLAGS = {
    "average": "average",
    "camex": "camex_static",
    "ep-camex": "ep_camex",
    "namex": "namex",
    "namex-mom": "namex_momentum",
    "namex-quat": "namex_quaternion",
    "ep-camex-mom": "ep_camex_momentum",
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _recompute(text: str):
    if text in ("first", "first_layer_only"):
        return FIRST_LAYER_ONLY
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a positive int or 'first', got {text!r}")
    if value < 1:
        raise argparse.ArgumentTypeError("--recompute-every must be >= 1")
    return value


def _add_merge_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--strategy", choices=sorted(STRATEGY_FLAGS), default="namex")
    p.add_argument("--gamma", type=float, default=1.0, help="propagation step size")
    p.add_argument("--eta", type=float, default=1.0, help="routed-merge step size")
    p.add_argument("--beta-re", type=float, default=0.0)
    p.add_argument("--beta-im", type=float, default=0.0)
    p.add_argument("--beta-quat", default="0.8,0.3,0.3,0.3", help="quaternion beta as w,x,y,z")
    p.add_argument("--recompute-every", type=_recompute, default=FIRST_LAYER_ONLY,
                   help="re-solve the Nash weights every k layers, or 'first'")
    p.add_argument("--tolerance", type=float, default=1e-10)
    p.add_argument("--max-iters", type=int, default=20)
    p.add_argument("--ball-radius", type=float, default=None)
    p.add_argument("--flatten", choices=("layer", "tensor"), default="layer")
    p.add_argument("--allow-degenerate", action="store_true",
                   help="skip the update at degenerate layers instead of failing")


def _nash_config(args) -> NashConfig:
    return NashConfig(args.tolerance, args.max_iters, args.ball_radius)


def _merge_config(args) -> MergeConfig:
    strategy = STRATEGY_FLAGS[args.strategy]
    if strategy == "namex_quaternion":
        beta = Quaternion.parse(args.beta_quat)
    else:
        beta = complex(args.beta_re, args.beta_im)
    return MergeConfig(
        strategy=strategy,
        gamma=args.gamma,
        eta=args.eta,
        beta=beta,
        recompute_every=args.recompute_every,
        nash=_nash_config(args),
        flatten="per_layer" if args.flatten == "layer" else "per_tensor",
        allow_degenerate=args.allow_degenerate,
    )


def _emit(obj) -> None:
    sys.stdout.write(json.dumps(obj, indent=1) + "\n")


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_merge(args) -> int:
    cfg = _merge_config(args)
    stack = read_checkpoint(args.input)
    out = merge(stack, cfg)
    write_checkpoint(out.to_stack(), args.output)
    if args.trace:
        write_trace_csv(out.trace, args.trace)
    _emit({"layers": len(out.trace), "strategy": cfg.strategy, "solver_calls": out.solver_calls()})
    return EXIT_OK


def cmd_solve(args) -> int:
    G = read_problem_csv(args.input)
    cfg = _nash_config(args)
    K = gram(G)
    w = solve_nash(K, cfg)
    result = {
        "alpha": [float(a) for a in w.alpha],
        "residual": w.residual if math.isfinite(w.residual) else None,
        "iterations": w.iterations,
        "status": w.status.value,
    }
    if w.status is Status.DEGENERATE:
        _emit(result)
        print("error: degenerate problem (zero-norm domain vector)", file=sys.stderr)
        return EXIT_DEGENERATE
    if w.converged:
        g = direction(G, w, cfg)
        result["direction_norm"] = float(np.linalg.norm(g))
        result["utilities"] = [float(v) for v in utilities(G, g)]
        splits = [interaction_split(K, w, j) for j in range(G.N)]
        result["cross_terms"] = [c for _, c in splits]
        result["cross_signs"] = [int(np.sign(c)) for _, c in splits]
    _emit(result)
    return EXIT_OK


def cmd_stability(args) -> int:
    if args.sweep:
        if args.grid < 2:
            raise UsageError("--grid must be >= 2")
        sw = sweep(args.alpha_sum, args.gamma, args.grid)
        if args.output:
            sw.write_csv(args.output)
            inside = sw.in_region
            _emit({
                "points": len(sw),
                "in_region": int(inside.sum()),
                "max_rho_in_region": float(sw.rho[inside].max()) if inside.any() else None,
                "bound_dominates": bool(np.all(sw.fujiwara >= sw.rho - 1e-12)),
            })
        else:
            sys.stdout.write(sw.to_csv())
        return EXIT_OK
    if args.r is None or args.u is None:
        raise UsageError("point mode needs --r and --u (or use --sweep)")
    if args.gamma_hat is not None:
        p = StabilityPoint.from_gamma_hat(args.r, args.u, args.gamma_hat, args.alpha_sum)
    else:
        p = StabilityPoint(args.r, args.u, args.gamma, args.alpha_sum)
    rep = fujiwara_region(p)
    _emit({
        "r": p.r, "u": p.u, "gamma": p.gamma, "alpha_sum": p.alpha_sum, "gamma_hat": p.gamma_hat,
        "rho": rep.spectral_radius,
        "fujiwara_bound": rep.fujiwara_bound,
        "in_region": rep.in_sufficient_region,
        "coefficients": list(rep.coefficients),
        "eigenvalues": [[float(e.real), float(e.imag)] for e in rep.eigenvalues],
    })
    return EXIT_OK


def cmd_simulate(args) -> int:
    if args.layers < 1 or args.experts < 1 or args.dim < 1:
        raise UsageError("--layers, --experts and --dim must be >= 1")
    stack = random_stack(args.layers, args.experts, args.dim, seed=args.seed, scale=args.scale,
                         frozen=args.frozen_alpha)
    cfg = _merge_config(args)
    if args.frozen_alpha:
        cfg = dataclasses.replace(cfg, recompute_every=FIRST_LAYER_ONLY)
    alpha_sum = None
    if args.gamma_hat is not None or args.frozen_alpha:
        w = solve_nash(gram(domain_vectors(stack.layers[0])), cfg.nash)
        alpha_sum = float(w.alpha.sum())
        if args.gamma_hat is not None:
            if not w.converged:
                raise NashError("cannot derive gamma from --gamma-hat: layer-0 solve did not converge")
            cfg = dataclasses.replace(cfg, gamma=args.gamma_hat / alpha_sum)
    if args.save_stack:
        write_checkpoint(stack, args.save_stack)
    out = merge(stack, cfg)
    write_trace_csv(out.trace, args.trace)
    summary = {"rows": len(out.trace), "strategy": cfg.strategy, "gamma": cfg.gamma, "seed": args.seed,
               "rng": RNG_ALGORITHM}
    if alpha_sum is not None:
        summary["alpha_sum"] = alpha_sum
    if args.frozen_alpha and cfg.strategy in ("namex_momentum", "namex") and alpha_sum:
        beta = cfg.beta if cfg.strategy == "namex_momentum" else 0j
        summary["rho"] = fujiwara_region(StabilityPoint.from_beta(beta, cfg.gamma, alpha_sum)).spectral_radius
        steps = np.array([t.step_norm for t in out.trace])
        steps = steps[steps > 1e-12 * max(steps.max(), 1e-300)]
        if steps.size >= 4:
            summary["fitted_slope"] = fit_log_slope(steps)
    _emit(summary)
    return EXIT_OK


def cmd_analyze(args) -> int:
    stack = read_checkpoint(args.input)
    if not 0 <= args.layer < stack.num_layers:
        raise UsageError(f"--layer {args.layer} out of range (checkpoint has {stack.num_layers} layers)")
    layer = stack.layers[args.layer]
    source = "parameters" if args.mode == "params" else "synthetic_activations"
    sim = cosine_similarity(layer, source, probe_seed=args.seed, probes=args.probes)
    sim.write(args.output)
    result = {"layer": layer.index, "source": source, "n": int(sim.matrix.shape[0])}
    if args.pareto:
        G = domain_vectors(layer)
        cfg = NashConfig(args.tolerance, args.max_iters, args.ball_radius)
        w = solve_nash(gram(G), cfg)
        if w.status is Status.DEGENERATE:
            raise DegenerateLayerError(layer.index, "zero-norm domain vector")
        if not w.converged:
            raise NashError(f"Nash solve did not converge on layer {layer.index}")
        g = direction(G, w, cfg)
        verdict = pareto_check(G, g, args.ball_radius, samples=args.samples, seed=args.seed)
        result["pareto"] = verdict.to_json()
    _emit(result)
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="nashmerge", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("merge", help="merge a checkpoint")
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--trace")
    _add_merge_flags(p)
    p.set_defaults(func=cmd_merge)

    p = sub.add_parser("solve", help="solve the bargaining weights for a CSV of domain vectors")
    p.add_argument("--input", required=True)
    p.add_argument("--tolerance", type=float, default=1e-10)
    p.add_argument("--max-iters", type=int, default=20)
    p.add_argument("--ball-radius", type=float, default=None)
    p.set_defaults(func=cmd_solve)

    p = sub.add_parser("stability", help="spectral radius / Fujiwara region of momentum propagation")
    p.add_argument("--r", type=float)
    p.add_argument("--u", type=float)
    p.add_argument("--gamma", type=float, default=2.0)
    p.add_argument("--gamma-hat", type=float)
    p.add_argument("--alpha-sum", type=float, default=0.5)
    p.add_argument("--sweep", action="store_true")
    p.add_argument("--grid", type=int, default=201)
    p.add_argument("--output")
    p.set_defaults(func=cmd_stability)

    p = sub.add_parser("simulate", help="merge a seeded synthetic stack and write its trace")
    p.add_argument("--layers", type=int, default=12)
    p.add_argument("--experts", type=int, default=8)
    p.add_argument("--dim", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--scale", type=float, default=1.0)
    p.add_argument("--trace", required=True)
    p.add_argument("--frozen-alpha", action="store_true",
                   help="repeat layer 0 across layers and solve the weights once")
    p.add_argument("--gamma-hat", type=float, help="set gamma = gamma_hat / sum(alpha at layer 0)")
    p.add_argument("--save-stack")
    _add_merge_flags(p)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("analyze", help="expert similarity and Pareto check for one layer")
    p.add_argument("--input", required=True)
    p.add_argument("--layer", type=int, default=0)
    p.add_argument("--mode", choices=("params", "activations"), default="params")
    p.add_argument("--output", required=True)
    p.add_argument("--probes", type=int, default=256)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--pareto", action="store_true")
    p.add_argument("--samples", type=int, default=10_000)
    p.add_argument("--ball-radius", type=float, default=1.0)
    p.add_argument("--tolerance", type=float, default=1e-10)
    p.add_argument("--max-iters", type=int, default=20)
    p.set_defaults(func=cmd_analyze)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        kernels.configure_threads()
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DegenerateLayerError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DEGENERATE
    except (CheckpointError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (MergeConfigError, NashError, NotMLPError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
