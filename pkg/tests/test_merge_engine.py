import math

import numpy as np
import pytest

from nashmerge.merge_engine import (
    DegenerateLayerError,
    MergeConfig,
    MergeConfigError,
    merge,
    routed_merge,
    trace_csv,
)
from nashmerge.momentum import Quaternion
from nashmerge.nash_core import NashConfig, solve_nash
from nashmerge.stability import StabilityPoint, block_matrix
from nashmerge.synthetic import random_stack
from nashmerge.tensor_store import ExpertStack

from conftest import make_layer


def flat(tensors):
    return np.concatenate([np.asarray(tensors[n], np.float64).ravel() for n in tensors])


def naive_namex(stack, gamma, schedule):
    """Loop-by-loop reference: re-solve on schedule, step the base along sum alpha_i tau_i."""
    E = None
    alpha = None
    bases = []
    for pos, layer in enumerate(stack.layers):
        if E is None:
            E = flat(layer.base)
        X = [flat(e.tensors) for e in layer.experts]
        tau = [x - E for x in X]
        if pos % schedule == 0:
            K = np.array([[float(np.dot(a, b)) for b in tau] for a in tau])
            alpha = solve_nash(K).alpha
        g = sum(a * t for a, t in zip(alpha, tau))
        bases.append(E.copy())
        E = E + gamma * g
    return bases, E


@pytest.mark.parametrize("schedule", [1, 3, 100])
def test_namex_matches_naive_loop(schedule):
    stack = random_stack(7, 4, seed=5, shapes=[("a", (4, 3)), ("b", (6,))])
    cfg = MergeConfig("namex", gamma=0.3, recompute_every=schedule)
    out = merge(stack, cfg)
    bases, final = naive_namex(stack, 0.3, schedule)
    for got, want in zip(out.bases, bases):
        np.testing.assert_allclose(flat(got), want, atol=1e-10)
    np.testing.assert_allclose(flat(out.final_base), final, atol=1e-10)
    assert [t.solver_calls for t in out.trace] == [1 if p % schedule == 0 else 0 for p in range(7)]


def test_average_matches_naive_loop():
    stack = random_stack(5, 3, dim=10, seed=1, curvature=True)
    out = merge(stack, MergeConfig("average", gamma=0.5))
    E = flat(stack.layers[0].base)
    for layer, got in zip(stack.layers, out.bases):
        np.testing.assert_allclose(flat(got), E, atol=1e-12)
        step = np.zeros_like(E)
        for e in layer.experts:
            step += flat(layer.curvature[e.name]) * (flat(e.tensors) - E)
        E = E + 0.5 * step / 3
    np.testing.assert_allclose(flat(out.final_base), E, atol=1e-12)


def test_ep_camex_matches_naive_loop():
    stack = random_stack(4, 3, dim=6, seed=2, routing=True, curvature=True)
    out = merge(stack, MergeConfig("ep_camex", gamma=0.7, eta=0.4))
    E = flat(stack.layers[0].base)
    for layer, base, routed in zip(stack.layers, out.bases, out.routed):
        np.testing.assert_allclose(flat(base), E, atol=1e-12)
        delta = sum(s * flat(layer.curvature[e.name]) * (flat(e.tensors) - E)
                    for s, e in zip(layer.routing, layer.experts))
        np.testing.assert_allclose(flat(routed), E + 0.4 * delta, atol=1e-12)
        E = E + 0.7 * delta


def test_camex_static_uses_stored_bases():
    stack = random_stack(3, 2, dim=5, seed=4)
    out = merge(stack, MergeConfig("camex_static", eta=1.0))
    for layer, base, routed in zip(stack.layers, out.bases, out.routed):
        np.testing.assert_array_equal(flat(base), flat(layer.base))
        mean = np.mean([flat(e.tensors) for e in layer.experts], axis=0)
        np.testing.assert_allclose(flat(routed), mean, atol=1e-6)
    assert out.solver_calls() == 0


def test_antisymmetric_pair_cancels():
    layer = make_layer([1.0, 1.0], [[2.0, 0.0], [0.0, 2.0]])
    out = merge(ExpertStack([layer]), MergeConfig("average"))
    np.testing.assert_allclose(out.routed[0]["w"], [1.0, 1.0], atol=1e-12)
    np.testing.assert_allclose(out.final_base["w"], [1.0, 1.0], atol=1e-12)


def test_gamma_zero_keeps_base():
    stack = random_stack(4, 3, dim=8, seed=9)
    for strategy in ("average", "ep_camex", "namex"):
        out = merge(stack, MergeConfig(strategy, gamma=0.0))
        for b in out.bases:
            np.testing.assert_array_equal(flat(b), flat(stack.layers[0].base).astype(np.float64))
        assert all(t.step_norm == 0.0 for t in out.trace)


def test_eta_zero_routed_equals_base():
    stack = random_stack(3, 2, dim=4, seed=9)
    out = merge(stack, MergeConfig("namex", eta=0.0))
    for b, r in zip(out.bases, out.routed):
        np.testing.assert_array_equal(flat(b), flat(r))


def test_one_hot_routing_endpoint():
    layer = make_layer([0.0, 0.0, 0.0], [[1, 2, 3], [4, 5, 6]], routing=[0.0, 1.0])
    got = routed_merge(layer, None, MergeConfig("ep_camex"))
    np.testing.assert_allclose(got["w"], [4, 5, 6])


def test_curvature_doubling_doubles_delta():
    base = [0.0, 0.0]
    experts = [[1.0, 2.0], [3.0, -1.0]]
    plain = routed_merge(make_layer(base, experts), None, MergeConfig("ep_camex"))
    curv = {"e0": {"w": np.full(2, 2.0)}, "e1": {"w": np.full(2, 2.0)}}
    doubled = routed_merge(make_layer(base, experts, curvature=curv), None, MergeConfig("ep_camex"))
    np.testing.assert_allclose(doubled["w"], 2 * plain["w"])


def test_single_expert_moves_gamma_along_unit_direction():
    layer = make_layer([0.0, 0.0], [[3.0, 4.0]])
    out = merge(ExpertStack([layer]), MergeConfig("namex", gamma=0.5))
    np.testing.assert_allclose(out.trace[0].alpha, [0.2])
    np.testing.assert_allclose(out.final_base["w"], [0.3, 0.4], atol=1e-12)
    assert out.trace[0].step_norm == pytest.approx(0.5)


def test_degenerate_layer_raises_with_index():
    base = [1.0, 2.0]
    stack = ExpertStack([make_layer(base, [base, base], index=0)])
    with pytest.raises(DegenerateLayerError, match="layer 0"):
        merge(stack, MergeConfig("namex"))


def test_degenerate_layer_allowed_is_no_op():
    base = [1.0, 2.0]
    stack = ExpertStack([make_layer(base, [base, [2.0, 2.0]], index=0)])
    out = merge(stack, MergeConfig("namex", allow_degenerate=True))
    assert out.trace[0].status == "degenerate"
    assert out.trace[0].step_norm == 0.0
    np.testing.assert_array_equal(out.final_base["w"], base)


def test_pair_stack_layer0_alpha(pair_stack):
    out = merge(pair_stack, MergeConfig("namex", gamma=1.0, recompute_every=1))
    np.testing.assert_allclose(out.trace[0].alpha, [0.76537, 0.54120], atol=1e-5)
    np.testing.assert_allclose(out.bases[1]["w"], [1.3065630, 0.5411961], atol=1e-6)
    assert out.trace[0].cross_signs is not None


@pytest.mark.parametrize("every,calls", [("first", 1), (1, 12), (2, 6), (5, 3), (12, 1), (7, 2)])
def test_schedule_counts(every, calls):
    stack = random_stack(12, 4, dim=16, seed=3)
    out = merge(stack, MergeConfig("namex", recompute_every=every))
    assert out.solver_calls() == calls
    assert calls == (1 if every == "first" else math.ceil(12 / every))


def test_reuse_across_changed_expert_count_errors():
    l0 = make_layer([0.0], [[1.0], [2.0]], index=0)
    l1 = make_layer([0.0], [[1.0], [2.0], [3.0]], index=1)
    with pytest.raises(MergeConfigError, match="layer 1"):
        merge(ExpertStack([l0, l1]), MergeConfig("namex"))


def test_per_layer_dims_can_vary_when_resolving():
    l0 = make_layer([0.0, 0.0], [[1.0, 0.0], [0.0, 1.0]], index=0)
    l1 = make_layer([0.0, 0.0, 0.0], [[1.0, 0.0, 0.0], [0.0, 1.0, 1.0]], index=1)
    out = merge(ExpertStack([l0, l1]), MergeConfig("namex", recompute_every=1))
    assert out.bases[1]["w"].shape == (3,)
    np.testing.assert_array_equal(out.bases[1]["w"], [0.0, 0.0, 0.0])


def test_per_tensor_alpha():
    stack = random_stack(2, 3, seed=1, shapes=[("a", (5,)), ("b", (7,))])
    out = merge(stack, MergeConfig("namex", flatten="per_tensor", recompute_every=1))
    assert out.trace[0].solver_calls == 2
    layer = stack.layers[0]
    E = flat(layer.base)
    step = []
    for name, sl in (("a", slice(0, 5)), ("b", slice(5, 12))):
        tau = np.stack([flat(e.tensors)[sl] - E[sl] for e in layer.experts], axis=1)
        step.append(tau @ solve_nash(tau.T @ tau).alpha)
    np.testing.assert_allclose(flat(out.bases[1]), E + np.concatenate(step), atol=1e-10)


def test_shapes_preserved():
    stack = random_stack(3, 2, seed=0, shapes=[("w1", (3, 4)), ("w2", (4, 2))])
    out = merge(stack, MergeConfig("namex_momentum", beta=0.5, gamma=0.1))
    for layer, b, r in zip(stack.layers, out.bases, out.routed):
        assert {n: t.shape for n, t in b.items()} == {n: t.shape for n, t in layer.base.items()}
        assert {n: t.shape for n, t in r.items()} == {n: t.shape for n, t in layer.base.items()}
    merged = out.to_stack()
    merged.validate()
    assert merged.num_layers == 3


def test_gamma_linearity_single_step():
    stack = random_stack(1, 3, dim=9, seed=6)
    d1 = flat(merge(stack, MergeConfig("namex", gamma=0.2)).final_base) - flat(stack.layers[0].base)
    d2 = flat(merge(stack, MergeConfig("namex", gamma=0.6)).final_base) - flat(stack.layers[0].base)
    np.testing.assert_allclose(d2, 3 * d1, atol=1e-10)


# strategy reductions


def test_momentum_beta_zero_equals_namex():
    stack = random_stack(12, 8, dim=64, seed=21)
    a = merge(stack, MergeConfig("namex", gamma=0.2, recompute_every=3))
    b = merge(stack, MergeConfig("namex_momentum", gamma=0.2, beta=0j, recompute_every=3))
    for x, y in zip(a.bases + [a.final_base], b.bases + [b.final_base]):
        np.testing.assert_allclose(flat(x), flat(y), atol=1e-10)


def test_real_momentum_is_heavy_ball():
    stack = random_stack(12, 8, dim=64, seed=22)
    beta, gamma = 0.6, 0.15
    out = merge(stack, MergeConfig("namex_momentum", gamma=gamma, beta=beta, recompute_every=1))
    traj = [flat(b) for b in out.bases] + [flat(out.final_base)]
    ref = [traj[0]]
    prev = traj[0]
    for l, layer in enumerate(stack.layers):
        E = ref[-1]
        tau = np.stack([flat(e.tensors) - E for e in layer.experts], axis=1)
        g = tau @ solve_nash(tau.T @ tau).alpha
        ref.append(E + gamma * g + beta * (E - prev))
        prev = E
    for x, y in zip(traj, ref):
        np.testing.assert_allclose(x, y, atol=1e-9)


def test_quaternion_real_equals_complex():
    stack = random_stack(12, 8, dim=64, seed=23)
    c = merge(stack, MergeConfig("namex_momentum", gamma=0.1, beta=0.7, recompute_every=2))
    q = merge(stack, MergeConfig("namex_quaternion", gamma=0.1, beta=Quaternion(0.7), recompute_every=2))
    for x, y in zip(c.bases + [c.final_base], q.bases + [q.final_base]):
        np.testing.assert_allclose(flat(x), flat(y), atol=1e-9)


def test_ep_camex_uniform_is_average():
    stack = random_stack(6, 4, dim=20, seed=24)
    a = merge(stack, MergeConfig("average", gamma=0.8))
    e = merge(stack, MergeConfig("ep_camex", gamma=0.8))
    for x, y in zip(a.bases + [a.final_base], e.bases + [e.final_base]):
        np.testing.assert_allclose(flat(x), flat(y), atol=1e-9)
    assert all(t.uniform_routing for t in e.trace)


def test_frozen_alpha_matrix_recurrence():
    d = 8
    stack = random_stack(100, 3, dim=d, seed=31, frozen=True)
    beta, gamma = 0.7 + 0.2j, 0.05
    out = merge(stack, MergeConfig("namex_momentum", gamma=gamma, beta=beta))
    alpha = out.trace[0].alpha
    layer = stack.layers[0]
    forcing = sum(a * flat(e.tensors) for a, e in zip(alpha, layer.experts))
    p = StabilityPoint(beta.real, beta.imag, gamma, float(alpha.sum()))
    R = block_matrix(p, d)
    q = np.concatenate([forcing, np.zeros(d), gamma * forcing])
    s = np.concatenate([np.zeros(d), np.zeros(d), flat(layer.base)])
    for l in range(100):
        np.testing.assert_allclose(flat(out.bases[l]), s[2 * d:], atol=1e-8)
        s = R @ s + q
    np.testing.assert_allclose(flat(out.final_base), s[2 * d:], atol=1e-8)


def test_config_validation():
    with pytest.raises(MergeConfigError):
        MergeConfig("bogus")
    with pytest.raises(MergeConfigError):
        MergeConfig("namex", gamma=-1)
    with pytest.raises(MergeConfigError):
        MergeConfig("namex_momentum", gamma=0.0)
    with pytest.raises(MergeConfigError):
        MergeConfig("namex", recompute_every=0)
    with pytest.raises(MergeConfigError):
        MergeConfig("namex", flatten="rows")
    with pytest.raises(MergeConfigError):
        MergeConfig("namex_momentum", beta=Quaternion(0.5, 0.1))


def test_ball_radius_direction():
    stack = random_stack(1, 3, dim=10, seed=8)
    out = merge(stack, MergeConfig("namex", gamma=1.0, nash=NashConfig(ball_radius=0.5)))
    assert out.trace[0].g_norm == pytest.approx(0.5)


def test_trace_csv_layout():
    stack = random_stack(3, 2, dim=4, seed=0)
    text = trace_csv(merge(stack, MergeConfig("namex", recompute_every=2)).trace)
    rows = [r.split(",") for r in text.strip().split("\n")]
    assert rows[0] == ["layer", "strategy", "alpha_1", "alpha_2", "g_norm", "step_norm", "solver_iters", "solver_calls"]
    assert len(rows) == 4
    assert [r[-1] for r in rows[1:]] == ["1", "0", "1"]
    assert all(math.isfinite(float(r[5])) for r in rows[1:])
