"""Residual family values, signs and Jacobians against the numeric oracle."""

import math

import numpy as np
import pytest

from kinofollow.factor_graph import FactorGraph, VariableKey, numeric_jacobian
from kinofollow.factors import (
    NoiseSpec,
    add_dynamics,
    add_integration,
    add_limits,
    add_observation,
    add_obstacle,
    add_prior,
)
from kinofollow.lie import SE2, rn
from kinofollow.models import LtvSde, Mushr, State, step
from kinofollow.world import SdfGrid, make_scene

R1 = rn(1)


def graph_with(manifold_values):
    """Build a graph from {key: (manifold, value)}."""
    g = FactorGraph()
    for key, (m, v) in manifold_values.items():
        g.add_variable(key, m, v)
    return g


def keys4():
    return (
        VariableKey("q", 1),
        VariableKey("q", 0),
        VariableKey("qdot", 0),
        VariableKey("dt", 0),
    )


def test_integration_residual_frozen_example():
    kq1, kq0, kqd, kdt = keys4()
    g = graph_with(
        {
            kq1: (SE2, np.zeros(3)),
            kq0: (SE2, np.zeros(3)),
            kqd: (rn(3), np.array([1.0, 0.0, math.pi / 2])),
            kdt: (R1, np.array([1.0])),
        }
    )
    fid = add_integration(g, SE2, kq1, kq0, kqd, kdt, sigma=0.01)
    r = g.factor(fid).residual_fn(
        g.estimate(kq1), g.estimate(kq0), g.estimate(kqd), g.estimate(kdt)
    )
    np.testing.assert_allclose(r, [-1.0, 0.0, -math.pi / 2], atol=1e-12)


def rollout_zeroes_residuals(model, q0, qd0, controls, dts):
    manifold = model.config_manifold
    vel = rn(model.vel_dim)
    states = [State(np.asarray(q0, float), np.asarray(qd0, float))]
    for u, dt in zip(controls, dts):
        states.append(step(model, states[-1], u, dt))

    g = FactorGraph()
    for i, s in enumerate(states):
        g.add_variable(VariableKey("q", i), manifold, s.q)
        g.add_variable(VariableKey("qdot", i), vel, s.qdot)
    for i, (u, dt) in enumerate(zip(controls, dts)):
        g.add_variable(VariableKey("u", i), rn(model.control_dim), u)
        g.add_variable(VariableKey("dt", i), R1, [dt])
        add_integration(
            g, manifold, VariableKey("q", i + 1), VariableKey("q", i),
            VariableKey("qdot", i), VariableKey("dt", i), sigma=0.01,
        )
        add_dynamics(
            g, model, VariableKey("qdot", i + 1), VariableKey("qdot", i),
            VariableKey("u", i), VariableKey("dt", i), sigma=0.05,
        )
    assert g.cost() == pytest.approx(0.0, abs=1e-24)
    for f in g.factors():
        r = f.residual_fn(*(g.estimate(k) for k in f.keys))
        np.testing.assert_allclose(r, 0.0, atol=1e-12)


def test_noiseless_rollout_zeroes_residuals_both_models():
    rng = np.random.default_rng(17)
    controls = rng.uniform(-0.2, 0.2, size=(8, 2))
    dts = rng.uniform(0.05, 0.5, size=8)
    rollout_zeroes_residuals(LtvSde(), [0.0, 0.0], [0.1, -0.2], controls, dts)

    controls = rng.uniform(-1.0, 1.0, size=(8, 2))
    dts = rng.uniform(0.05, 0.1, size=8)
    rollout_zeroes_residuals(
        Mushr(), [0.0, 0.0, 0.3], [0.5, 0.0, 0.1], controls, dts
    )


def test_observation_zero_residual_on_exact_prediction():
    m = Mushr()
    s = State(np.array([0.2, -0.4, 0.6]), np.array([0.9, 0.0, 0.5]))
    dt_z = 0.04
    z = SE2.compose(s.q, SE2.exp(s.qdot * dt_z))
    kq, kqd = VariableKey("q", 0), VariableKey("qdot", 0)
    g = graph_with({kq: (SE2, s.q), kqd: (rn(3), s.qdot)})
    fid = add_observation(
        g, SE2, kq, kqd, z, dt_z, NoiseSpec().observation(3, 0.01)
    )
    r = g.factor(fid).residual_fn(g.estimate(kq), g.estimate(kqd))
    np.testing.assert_allclose(r, 0.0, atol=1e-12)


def test_prior_direction_and_zero():
    k = VariableKey("u", 0)
    g = graph_with({k: (rn(2), np.array([0.3, 0.4]))})
    fid = add_prior(g, rn(2), k, [0.1, 0.4], np.full(2, 0.2), kind="prior_u")
    r = g.factor(fid).residual_fn(g.estimate(k))
    np.testing.assert_allclose(r, [-0.2, 0.0], atol=1e-15)


def test_obstacle_hinge_values():
    scene = make_scene("simple_obstacle", seed=0)
    field = SdfGrid(scene, resolution=0.05)
    k = VariableKey("q", 0)
    g = graph_with({k: (rn(2), np.array([4.0, 4.0]))})
    fid = add_obstacle(g, field, k, eps=0.3, sigma=0.01)
    f = g.factor(fid)

    # far away: inactive
    assert f.residual_fn(np.array([4.0, 4.0]))[0] == 0.0

    class Fake:
        def __init__(self, c):
            self.c = c

        def clearance(self, x, y):
            return self.c

        def clearance_grad(self, x, y):
            return 1.0, 0.0

    g2 = graph_with({k: (rn(2), np.zeros(2))})
    f2 = g2.factor(add_obstacle(g2, Fake(0.1), k, eps=0.3, sigma=0.01))
    assert f2.residual_fn(np.zeros(2))[0] == pytest.approx(0.2)
    f3 = g2.factor(add_obstacle(g2, Fake(0.3), k, eps=0.3, sigma=0.01))
    assert f3.residual_fn(np.zeros(2))[0] == pytest.approx(0.0)


def test_limits_hinge_values():
    k = VariableKey("u", 0)
    g = graph_with({k: (rn(2), np.array([-0.05, 0.1]))})
    fid = add_limits(g, k, lower=[0.0, -1.0], upper=[1.0, 1.0], sigma=1e-3)
    r = g.factor(fid).residual_fn(np.array([-0.05, 0.1]))
    np.testing.assert_allclose(r, [-0.05, 0.0], atol=1e-15)
    r = g.factor(fid).residual_fn(np.array([1.25, -1.5]))
    np.testing.assert_allclose(r, [0.25, -0.5], atol=1e-15)
    r = g.factor(fid).residual_fn(np.array([0.5, 0.0]))
    np.testing.assert_allclose(r, [0.0, 0.0], atol=1e-15)


def _assert_factor_jacobians(g, fid, atol=1e-5):
    f = g.factor(fid)
    vals = [g.estimate(k) for k in f.keys]
    analytic = np.hstack([np.atleast_2d(b) for b in f.jacobian_fn(*vals)])
    np.testing.assert_allclose(analytic, numeric_jacobian(g, fid), atol=atol)


def test_analytic_jacobians_match_numeric_everywhere():
    rng = np.random.default_rng(23)
    kq1, kq0, kqd, kdt = keys4()
    ku = VariableKey("u", 0)
    kqd1 = VariableKey("qdot", 1)

    for _ in range(100):
        # vector-space integration (double integrator configuration)
        g = graph_with(
            {
                kq1: (rn(2), rng.normal(size=2)),
                kq0: (rn(2), rng.normal(size=2)),
                kqd: (rn(2), rng.normal(size=2)),
                kdt: (R1, rng.uniform(0.05, 0.5, size=1)),
            }
        )
        _assert_factor_jacobians(
            g, add_integration(g, rn(2), kq1, kq0, kqd, kdt, 0.01)
        )

        # dynamics for both models
        g = graph_with(
            {
                kqd1: (rn(2), rng.normal(size=2)),
                kqd: (rn(2), rng.normal(size=2)),
                ku: (rn(2), rng.uniform(-0.2, 0.2, size=2)),
                kdt: (R1, rng.uniform(0.05, 0.5, size=1)),
            }
        )
        _assert_factor_jacobians(
            g, add_dynamics(g, LtvSde(), kqd1, kqd, ku, kdt, 0.05)
        )

        m = Mushr()
        g = graph_with(
            {
                kqd1: (rn(3), rng.normal(size=3)),
                kqd: (rn(3), rng.uniform(m.velocity_lower, m.velocity_upper)),
                ku: (rn(2), rng.uniform(-0.9, 0.9, size=2)),
                kdt: (R1, rng.uniform(0.05, 0.1, size=1)),
            }
        )
        _assert_factor_jacobians(g, add_dynamics(g, m, kqd1, kqd, ku, kdt, 0.05))

        # vector observation and prior
        g = graph_with(
            {
                kq0: (rn(2), rng.normal(size=2)),
                kqd: (rn(2), rng.normal(size=2)),
            }
        )
        _assert_factor_jacobians(
            g,
            add_observation(
                g, rn(2), kq0, kqd, rng.normal(size=2), rng.uniform(0, 0.05),
                NoiseSpec().observation(2, 0.01),
            ),
        )
        g = graph_with({ku: (rn(2), rng.normal(size=2))})
        _assert_factor_jacobians(
            g, add_prior(g, rn(2), ku, rng.normal(size=2), np.full(2, 0.2), "prior_u")
        )

        # limits away from the hinge corners
        v = rng.uniform(-2.0, 2.0, size=2)
        v[np.abs(np.abs(v) - 1.0) < 1e-3] += 0.01
        g = graph_with({ku: (rn(2), v)})
        _assert_factor_jacobians(
            g, add_limits(g, ku, [-1.0, -1.0], [1.0, 1.0], 1e-3)
        )


def test_se2_factor_jacobians_match_numeric():
    rng = np.random.default_rng(31)
    kq1, kq0, kqd, kdt = keys4()

    def pose():
        p = rng.normal(0, 2.0, 3)
        p[2] = rng.uniform(-math.pi, math.pi)
        return p

    for trial in range(100):
        twist = rng.uniform(Mushr().velocity_lower, Mushr().velocity_upper)
        if trial % 7 == 0:
            twist[2] = rng.normal(0, 1e-8)  # Taylor branch of Jr
        g = graph_with(
            {
                kq1: (SE2, pose()),
                kq0: (SE2, pose()),
                kqd: (rn(3), twist),
                kdt: (R1, rng.uniform(0.02, 0.5, size=1)),
            }
        )
        _assert_factor_jacobians(
            g, add_integration(g, SE2, kq1, kq0, kqd, kdt, 0.01)
        )

        g = graph_with({kq0: (SE2, pose()), kqd: (rn(3), twist)})
        _assert_factor_jacobians(
            g,
            add_observation(
                g, SE2, kq0, kqd, pose(), rng.uniform(0.0, 0.05),
                NoiseSpec().observation(3, 0.01),
            ),
        )

        g = graph_with({kq0: (SE2, pose())})
        _assert_factor_jacobians(
            g, add_prior(g, SE2, kq0, pose(), np.full(3, 0.05), "prior_q")
        )


def test_obstacle_jacobian_matches_numeric_inside_cells():
    scene = make_scene("forest", seed=0)
    field = SdfGrid(scene, resolution=0.05)
    rng = np.random.default_rng(29)
    k = VariableKey("q", 0)
    checked = 0
    while checked < 100:
        x = rng.uniform(-6.5, 6.5)
        y = rng.uniform(-6.5, 6.5)
        # keep away from cell edges and from the hinge boundary; the
        # bilinear gradient is discontinuous across both
        fx = (x - field.x0) / field.resolution - 0.5
        fy = (y - field.y0) / field.resolution - 0.5
        if min(fx % 1, 1 - fx % 1) < 0.05 or min(fy % 1, 1 - fy % 1) < 0.05:
            continue
        if abs(field.clearance(x, y) - 0.3) < 1e-3:
            continue
        g = graph_with({k: (SE2, np.array([x, y, rng.uniform(-3, 3)]))})
        _assert_factor_jacobians(
            g, add_obstacle(g, field, k, eps=0.3, sigma=0.01), atol=1e-4
        )
        checked += 1


def test_noise_spec_observation_floor():
    spec = NoiseSpec()
    np.testing.assert_allclose(spec.observation(2, 0.0), [1e-3, 1e-3])
    np.testing.assert_allclose(spec.observation(3, 0.03), [0.03, 0.03, 0.015])
    np.testing.assert_allclose(spec.q_prior(3), [0.05, 0.05, 0.05])


def test_integration_residual_is_left_composition_invariant():
    # moving both poses by a common rigid transform must not change the
    # residual: it only depends on the relative motion
    kq1, kq0, kqd, kdt = keys4()
    rng = np.random.default_rng(7)
    for _ in range(100):
        q0 = rng.uniform([-3, -3, -math.pi], [3, 3, math.pi])
        q1 = rng.uniform([-3, -3, -math.pi], [3, 3, math.pi])
        qdot = rng.uniform(-1.5, 1.5, size=3)
        dt = rng.uniform(0.01, 1.0, size=1)
        g_move = rng.uniform([-5, -5, -math.pi], [5, 5, math.pi])
        graph = graph_with(
            {
                kq1: (SE2, q1),
                kq0: (SE2, q0),
                kqd: (rn(3), qdot),
                kdt: (R1, dt),
            }
        )
        fid = add_integration(graph, SE2, kq1, kq0, kqd, kdt, sigma=0.01)
        fn = graph.factor(fid).residual_fn
        base = fn(q1, q0, qdot, dt)
        moved = fn(SE2.compose(g_move, q1), SE2.compose(g_move, q0), qdot, dt)
        np.testing.assert_allclose(moved, base, atol=1e-9)
