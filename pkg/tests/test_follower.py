"""Window lifecycle: construction, advance bookkeeping, fusion, fallbacks."""

import numpy as np
import pytest

from kinofollow.factor_graph import SolveReport
from kinofollow.follower import (
    Follower,
    ObservationMsg,
    WindowConfig,
    kdt,
    kq,
    kqd,
    ku,
    make_ablation_config,
)
from kinofollow.models import LtvSde, State
from kinofollow.planner import straight_line_trajectory
from kinofollow.world import GoalRegion, Scene, make_scene


def empty_scene() -> Scene:
    return Scene(kind="empty", seed=0, bounds=(-8.0, 8.0, -8.0, 8.0), obstacles=[])


def line_setup(n_fwd=10, n_hist=10, goal_x=4.0, **kw):
    """LTV follower on an exact straight-line trajectory, obstacle-free."""
    model = LtvSde()
    scene = empty_scene()
    start = State(np.array([-4.0, 0.0]), np.zeros(2))
    traj = straight_line_trajectory(model, start, np.array([goal_x, 0.0]))
    cfg = WindowConfig(n_fwd=n_fwd, n_hist=n_hist, **kw)
    return model, scene, traj, Follower(model, scene, traj, cfg)


def kind_counts(graph):
    out = {}
    for f in graph.factors():
        out[f.kind] = out.get(f.kind, 0) + 1
    return out


def obs_at(traj, t: float) -> ObservationMsg:
    """Exact pose on the piecewise-constant-twist plan at absolute time t."""
    rem = t
    for i in range(traj.num_edges):
        dt = float(traj.durations[i])
        if rem <= dt + 1e-12:
            st = traj.states[i]
            return ObservationMsg(st.q + st.qdot * rem, t)
        rem -= dt
    return ObservationMsg(traj.states[-1].q.copy(), t)


def test_initial_window_has_expected_structure():
    _, _, _, f = line_setup(n_fwd=1, n_hist=0)
    assert f.window_bounds() == (0, 1)
    assert f.graph.num_variables == 6  # q0 q1 qdot0 qdot1 u0 dt0
    assert kind_counts(f.graph) == {
        "integration": 1,
        "dynamics": 1,
        "obstacle": 2,
        "q_prior": 2,
        "qdot_prior": 2,
        "dt_prior": 1,
        "u_limits": 1,
        "dt_limits": 1,
    }
    assert f.audit_posterior() == []


def test_initial_window_clips_to_trajectory_end():
    _, _, traj, f = line_setup(n_fwd=10, goal_x=-3.2)
    assert traj.num_edges < 10
    assert f.window_bounds() == (0, traj.num_edges)


def test_advance_demotes_boundary_node_and_edge():
    _, _, _, f = line_setup()
    f.advance(0.5)
    assert f.curr == 1 and f.window_bounds() == (0, 11)
    # node 0 keeps only the integration constraint of edge 0
    on_q0 = [f.graph.factor(fid).kind for fid in f.graph.factors_on(kq(0))]
    assert on_q0 == ["integration"]
    sides = {fa.kind: fa.side for fa in f.graph.factors() if fa.ref == 0}
    assert sides["integration"] == "te" and sides["dynamics"] == "te"
    assert f.audit_posterior() == []


def test_advance_appends_next_plan_edge():
    _, _, traj, f = line_setup()
    f.advance(0.5)
    assert f.graph.has_variable(kq(11)) and f.graph.has_variable(kdt(10))
    np.testing.assert_allclose(f.graph.estimate(kq(11)), traj.states[11].q)
    assert f.graph.estimate(kdt(10))[0] == pytest.approx(traj.durations[10])


def test_advance_drops_history_beyond_depth():
    _, _, traj, f = line_setup(n_hist=1)
    f.ingest_observation(obs_at(traj, 0.1))
    f.advance(0.5)
    assert f.graph.has_variable(kq(0))
    f.advance(1.0)
    for key in (kq(0), kqd(0), ku(0), kdt(0)):
        assert not f.graph.has_variable(key)
    assert all(fa.ref != 0 for fa in f.graph.factors())
    assert f.audit_posterior() == []


def test_zero_history_window_never_grows_backwards():
    _, _, traj, f = line_setup(n_fwd=3, n_hist=0)
    f.ingest_observation(obs_at(traj, 0.2))
    f.advance(0.5)
    assert f.window_bounds() == (1, 4)
    assert not f.graph.has_variable(kq(0))
    assert f.audit_posterior() == []


def test_active_factor_count_stays_bounded():
    _, _, traj, f = line_setup(n_fwd=4, n_hist=3)
    bound = 8 * (4 + 3) + 3
    t = 0.0
    for _ in range(traj.num_edges):
        t += 0.5
        f.ingest_observation(obs_at(traj, t - 0.25))
        f.advance(t)
        non_obs = sum(1 for fa in f.graph.factors() if fa.kind != "observation")
        assert non_obs <= bound
        assert f.audit_posterior() == []


def test_observation_pulls_current_estimate():
    _, _, traj, f = line_setup()
    z = traj.states[0].q + np.array([0.0, 0.3])
    cmd = f.tick(0.0, [ObservationMsg(z, 0.0)])
    assert not cmd.degraded
    y = f.graph.estimate(kq(0))[1]
    assert 0.05 <= y <= 0.3


def test_exact_observations_keep_plan_fixed():
    _, _, traj, f = line_setup()
    for i in range(1, 100):
        t = i / 30.0
        cmd = f.tick(t, [obs_at(traj, t)])
        assert f.curr == i // 15
        np.testing.assert_allclose(cmd.u, 0.0, atol=1e-9)
        assert cmd.dt_estimate == pytest.approx(0.5, abs=1e-9)
        expected = np.array([-4.0 + 0.5 * t, 0.0])
        np.testing.assert_allclose(
            f.current_pose_estimate(t), expected, atol=1e-9
        )
        assert f.audit_posterior() == []


def test_advance_triggers_on_duration_boundary():
    _, _, traj, f = line_setup()
    f.tick(0.5 - 1e-3, [])
    assert f.curr == 0
    f.tick(0.5, [])
    assert f.curr == 1


def test_solver_failure_falls_back_to_planned_control():
    _, _, traj, f = line_setup()
    real_solve = f.graph.solve
    f.graph.solve = lambda config=None: SolveReport(
        iterations=0, initial_cost=0.0, final_cost=float("nan"),
        converged=False, failed=True, message="injected",
    )
    cmd = f.tick(0.01, [])
    assert cmd.degraded and f.degraded
    np.testing.assert_array_equal(cmd.u, traj.controls[0])
    assert cmd.dt_estimate == pytest.approx(traj.durations[0])
    f.graph.solve = real_solve
    cmd = f.tick(0.02, [])
    assert not cmd.degraded  # command recovers
    assert f.degraded  # but the run stays marked


def test_stale_observations_are_dropped():
    _, _, traj, f = line_setup()
    f.advance(0.5)
    before = f.graph.num_factors
    f.ingest_observation(obs_at(traj, 0.3))
    assert f.graph.num_factors == before
    assert f.dropped_observations == 1


def test_observation_offset_clamps_to_edge_duration():
    _, _, traj, f = line_setup()
    z = traj.states[1].q.copy()  # pose half a second in, i.e. one full edge
    f.ingest_observation(ObservationMsg(z, 10.0))
    fa = [x for x in f.graph.factors() if x.kind == "observation"][-1]
    r = fa.residual_fn(traj.states[0].q, traj.states[0].qdot)
    np.testing.assert_allclose(r, 0.0, atol=1e-12)


def test_duration_adapts_only_when_left_free():
    z_ahead = np.array([-3.8, 0.0])  # 0.2 m further along than planned
    _, _, _, f = line_setup()
    f.tick(0.0, [ObservationMsg(z_ahead, 0.0)])
    assert f.graph.estimate(kdt(0))[0] < 0.5 - 1e-3

    _, _, _, g = line_setup(time_as_variable=False)
    assert "dt_limits" not in kind_counts(g.graph)
    g.tick(0.0, [ObservationMsg(z_ahead, 0.0)])
    assert g.graph.estimate(kdt(0))[0] == pytest.approx(0.5, abs=1e-5)


def test_obstacle_backends_attach_consistently():
    model = LtvSde()
    scene = make_scene("forest", seed=0)
    start = State(np.array([-5.5, -5.5]), np.zeros(2))
    traj = straight_line_trajectory(model, start, np.array([5.5, 5.5]))

    none_f = Follower(model, scene, traj,
                      WindowConfig(obstacle_backend="none"))
    assert "obstacle" not in kind_counts(none_f.graph)
    assert none_f.audit_posterior() == []

    per_f = Follower(model, scene, traj,
                     WindowConfig(obstacle_backend="per_obstacle"))
    for i in range(*per_f.window_bounds()):
        q = traj.states[i].q
        reach = per_f.cfg.obstacle_eps + per_f.cfg.per_obstacle_margin
        hits = scene.obstacles_within(q[0], q[1], reach)
        attached = [fa for fa in per_f.graph.factors()
                    if fa.kind == "obstacle" and fa.ref == i]
        assert len(attached) == len(hits)
    assert per_f.audit_posterior() == []


def test_plan_end_keeps_estimating_with_zero_command():
    _, _, traj, f = line_setup(goal_x=-3.2)
    T = traj.num_edges
    t = 0.0
    for _ in range(T):
        t += float(traj.durations[f.curr])
        f.advance(t)
    assert f.curr == T
    f.goal = GoalRegion(traj.states[-1].q, eps=0.5)
    cmd = f.tick(t + 0.1, [obs_at(traj, t)])
    assert not cmd.degraded
    np.testing.assert_array_equal(cmd.u, np.zeros(2))
    assert cmd.dt_estimate == np.inf
    assert f.audit_posterior() == []
    assert f.goal_reached


def test_ablation_variants_map_to_configs():
    base = WindowConfig()
    assert make_ablation_config(base, "fwd1_hist0").n_fwd == 1
    assert make_ablation_config(base, "fwd1_hist0").n_hist == 0
    assert not make_ablation_config(base, "no_time_var").time_as_variable
    assert make_ablation_config(base, "obstacle_none").obstacle_backend == "none"
    assert make_ablation_config(base, "full") == base
    with pytest.raises(ValueError, match="variant"):
        make_ablation_config(base, "bogus")


def test_window_rejects_bad_geometry():
    with pytest.raises(ValueError, match="n_fwd"):
        WindowConfig(n_fwd=0)
    with pytest.raises(ValueError, match="backend"):
        WindowConfig(obstacle_backend="grid")
