"""Discrete-event execution of a desired trajectory against noisy dynamics.

The simulated clock is the only clock.  Three event streams interleave on a
heap: pose observations at the sensor rate, controller ticks at the tick
rate, and one floating "boundary" event that the closed-loop runner keeps
pinned to the follower's current edge-duration estimate so window advances
land exactly on the estimated boundary instead of waiting for the next tick.

Ground truth integrates the same semi-implicit rule the models define.
Without actuation noise the true chain is anchored once per control change
and queried by interpolation, which keeps a perfectly followed plan exact to
the last float.  With actuation noise the chain re-anchors at every event
and perturbs the body twist by sigma_x * sqrt(dt) per segment (Brownian
scaling, so results do not depend on the tick rate).  Every segment of true
motion is swept for collision at 0.01 m spacing before it is committed.

Noise magnitudes are indexed, not free: index 0 is exactly zero and the
remaining entries grow monotonically.  Observation noise perturbs the full
pose (half weight on the angle); observation timestamps jitter uniformly
within 5 ms whenever the observation channel is noisy at all.
"""

from __future__ import annotations

import heapq
import json
import math
from dataclasses import dataclass, field, replace

import numpy as np
import scipy.spatial

from .factors import NoiseSpec
from .follower import ControlCommand, Follower, ObservationMsg, WindowConfig
from .models import State, step
from .planner import arc_positions
from .world import GoalRegion, Scene, wrap_angle

SIGMA_X = (0.0, 0.002, 0.005, 0.008, 0.011, 0.015, 0.020)
SIGMA_Z = (0.0, 0.01, 0.03, 0.05)

# Closed-loop prior calibration.  The stock q-prior sigma anchors every
# horizon node so firmly that the integration chain drags the current-node
# estimate toward the plan; the controller then under-reports disturbances
# and the tracking error random-walks away.  Loosening only the pose priors
# keeps the horizon anchored while letting observations win on the node the
# control is read from.
TRACKING_PRIORS = NoiseSpec(q_prior_pos=0.5, q_prior_ang=0.5)

OUTCOMES = (
    "success",
    "collision",
    "timeout",
    "solver_degraded_success",
    "solver_failure",
)


@dataclass(frozen=True)
class NoiseLevels:
    """Indices into the actuation (sx) and observation (sz) noise scales."""

    sx: int = 0
    sz: int = 0

    def __post_init__(self):
        if not 0 <= self.sx < len(SIGMA_X):
            raise ValueError(f"sx index {self.sx} out of range")
        if not 0 <= self.sz < len(SIGMA_Z):
            raise ValueError(f"sz index {self.sz} out of range")

    @property
    def sigma_x(self) -> float:
        return SIGMA_X[self.sx]

    @property
    def sigma_z(self) -> float:
        return SIGMA_Z[self.sz]


@dataclass(frozen=True)
class SimConfig:
    tick_rate: float = 30.0
    obs_rate: float = 20.0
    jitter_max: float = 0.005
    timeout_factor: float = 3.0
    collision_spacing: float = 0.01
    window: WindowConfig = field(
        default_factory=lambda: WindowConfig(noise=TRACKING_PRIORS)
    )


def rng_streams(master_seed: int, traj_id: int = 0, rep: int = 0):
    """(dynamics, observation, jitter) generators for one run.

    The split is by spawn key, so every (trajectory, repetition) pair sees
    the same underlying draws at every noise level: levels scale shared
    standard normals instead of consuming different streams.
    """
    root = np.random.SeedSequence(entropy=master_seed, spawn_key=(traj_id, rep))
    dyn, obs, jit = (np.random.default_rng(s) for s in root.spawn(3))
    return dyn, obs, jit


def planner_seed(master_seed: int, traj_id: int = 0) -> int:
    root = np.random.SeedSequence(entropy=master_seed, spawn_key=(traj_id,))
    return int(root.generate_state(1)[0])


@dataclass
class RunRecord:
    outcome: str
    noise: NoiseLevels
    seed: int
    plan_duration: float
    executed_duration: float
    times: list
    true_q: list
    est_q: list
    observations: list  # (stamp, z)
    commands: list  # (t, u, dt_estimate)
    solve_ms: list
    degraded: bool = False
    dropped_observations: int = 0
    collision_time: float = float("nan")
    final_true_q: list = field(default_factory=list)

    def canonical_json(self) -> str:
        """Deterministic serialization; wall-clock timings excluded."""
        doc = {
            "outcome": self.outcome,
            "noise": [self.noise.sx, self.noise.sz],
            "seed": self.seed,
            "plan_duration": self.plan_duration,
            "executed_duration": self.executed_duration,
            "times": self.times,
            "true_q": self.true_q,
            "est_q": self.est_q,
            "observations": self.observations,
            "commands": self.commands,
            "degraded": self.degraded,
            "dropped_observations": self.dropped_observations,
            "collision_time": None
            if math.isnan(self.collision_time)
            else self.collision_time,
            "final_true_q": self.final_true_q,
        }
        return json.dumps(doc, sort_keys=True, separators=(",", ":"))


class TruthChain:
    """Ground-truth integrator with lazy anchoring and collision sweeps."""

    def __init__(self, model, scene: Scene, start: State, u0,
                 sigma_x: float, rng, spacing: float = 0.01):
        self.model = model
        self.scene = scene
        self.sigma_x = float(sigma_x)
        self.rng = rng
        self.spacing = float(spacing)
        self.t_anchor = 0.0
        self.anchor = start
        self.u = np.array(u0, dtype=float)
        self.t_now = 0.0
        self.collision_time = None

    def state_at(self, t: float) -> State:
        if t < self.t_anchor - 1e-9:
            raise ValueError("cannot query the truth before its anchor")
        return step(self.model, self.anchor, self.u, max(t - self.t_anchor, 0.0))

    def _sweep(self, s0: float, s1: float) -> float | None:
        """First collision time on the anchored arc segment, if any."""
        q, qdot = self.anchor.q, self.anchor.qdot
        speed = math.hypot(qdot[0], qdot[1])
        n = max(2, int(math.ceil(speed * (s1 - s0) / self.spacing)) + 1)
        s = np.linspace(s0, s1, n)
        xs, ys = arc_positions(q, qdot, s)
        xmin, xmax, ymin, ymax = self.scene.bounds
        bad = (
            (xs < xmin) | (xs > xmax) | (ys < ymin) | (ys > ymax)
            | (self.scene.clearance_batch(xs, ys) < 0.0)
        )
        if bad.any():
            return self.t_anchor + float(s[int(np.argmax(bad))])
        return None

    def advance(self, t: float) -> bool:
        """Move true time forward; False once the robot has hit something."""
        if self.collision_time is not None:
            return False
        if t <= self.t_now + 1e-15:
            return True
        hit = self._sweep(self.t_now - self.t_anchor, t - self.t_anchor)
        if hit is not None:
            self.collision_time = hit
            self.t_now = hit
            return False
        if self.sigma_x > 0.0:
            gap = t - self.t_anchor
            st = step(self.model, self.anchor, self.u, gap)
            kick = self.sigma_x * math.sqrt(gap) * self.rng.standard_normal(
                self.model.vel_dim
            )
            self.anchor = State(st.q, st.qdot + kick)
            self.t_anchor = t
        self.t_now = t
        return True

    def re_anchor(self, t: float) -> None:
        """Pin the anchor at ``t`` with one exact step.

        Must be called at every plan-edge boundary: edges are single-step
        rollout units, and letting one interpolation step span two edges
        (which happens whenever consecutive edges share a control) is not
        the same motion as the per-edge chain.
        """
        self.anchor = self.state_at(t)
        self.t_anchor = t

    def set_control(self, u, t: float) -> None:
        u = np.asarray(u, dtype=float)
        if np.array_equal(u, self.u):
            return  # mid-edge repeat; re-anchoring here would subdivide the step
        self.re_anchor(t)
        self.u = u.copy()


def observe(manifold, q, sigma_z: float, rng) -> np.ndarray:
    """Pose measurement: the true pose retracted by scaled standard normals."""
    if sigma_z <= 0.0:
        return np.array(q, dtype=float)
    xi = rng.standard_normal(manifold.dim) * sigma_z
    if manifold.dim == 3:
        xi[2] *= 0.5
    return manifold.compose(np.asarray(q, dtype=float), manifold.exp(xi))


def _obs_grid(rate: float, horizon: float):
    k, out = 0, []
    while k / rate <= horizon:
        out.append(k / rate)
        k += 1
    return out


def simulate_open_loop(model, scene: Scene, traj, goal: GoalRegion,
                       noise: NoiseLevels, master_seed: int,
                       traj_id: int = 0, rep: int = 0,
                       config: SimConfig | None = None) -> RunRecord:
    """Replay the planned controls verbatim; no estimation, no adaptation."""
    cfg = config or SimConfig()
    dyn_rng, _, _ = rng_streams(master_seed, traj_id, rep)
    truth = TruthChain(model, scene, traj.states[0], traj.controls[0],
                       noise.sigma_x, dyn_rng, cfg.collision_spacing)

    # planned control switch times, then a 30 Hz sampling grid on top
    switches = np.concatenate([[0.0], np.cumsum(traj.durations)])
    tick_dt = 1.0 / cfg.tick_rate
    horizon = float(switches[-1])
    grid = sorted(
        set(np.arange(1, math.ceil(horizon / tick_dt) + 1) * tick_dt)
        | set(switches[1:])
    )

    times, true_q = [0.0], [list(map(float, traj.states[0].q))]
    commands = [(0.0, [float(x) for x in traj.controls[0]],
                 float(traj.durations[0]))]
    edge = 0
    alive = True
    for t in grid:
        if t > horizon + 1e-12:
            break
        alive = truth.advance(t)
        if not alive:
            break
        while edge < traj.num_edges - 1 and t >= switches[edge + 1] - 1e-12:
            edge += 1
            truth.re_anchor(t)
            truth.set_control(traj.controls[edge], t)
            commands.append(
                (float(t), [float(x) for x in traj.controls[edge]],
                 float(traj.durations[edge]))
            )
        times.append(float(t))
        true_q.append([float(x) for x in truth.state_at(t).q])

    if not alive:
        outcome = "collision"
        executed = truth.collision_time
        final_q = []
    else:
        final = truth.state_at(horizon)
        executed = horizon
        final_q = [float(x) for x in final.q]
        outcome = "success" if goal.contains(final.q) else "timeout"

    return RunRecord(
        outcome=outcome,
        noise=noise,
        seed=master_seed,
        plan_duration=float(traj.duration),
        executed_duration=float(executed),
        times=times,
        true_q=true_q,
        est_q=[],
        observations=[],
        commands=commands,
        solve_ms=[],
        collision_time=truth.collision_time
        if truth.collision_time is not None
        else float("nan"),
        final_true_q=final_q,
    )


def simulate_closed_loop(model, scene: Scene, traj, goal: GoalRegion,
                         noise: NoiseLevels, master_seed: int,
                         traj_id: int = 0, rep: int = 0,
                         config: SimConfig | None = None) -> RunRecord:
    cfg = config or SimConfig()
    dyn_rng, obs_rng, jit_rng = rng_streams(master_seed, traj_id, rep)
    wcfg = cfg.window
    if wcfg.sigma_z != noise.sigma_z:
        wcfg = replace(wcfg, sigma_z=noise.sigma_z)
    follower = Follower(model, scene, traj, wcfg, start_time=0.0, goal=goal)
    truth = TruthChain(model, scene, traj.states[0], traj.controls[0],
                       noise.sigma_x, dyn_rng, cfg.collision_spacing)

    timeout = cfg.timeout_factor * float(traj.duration)
    tick_dt = 1.0 / cfg.tick_rate
    obs_dt = 1.0 / cfg.obs_rate
    manifold = model.config_manifold

    # heap entries: (time, priority, seq, kind, boundary version).
    # Observations outrank controller events at equal times so a tick always
    # sees measurements up to its own stamp; a single seq counter makes the
    # order total.  "boundary" events are controller ticks pinned to the
    # latest edge-duration estimate; stale versions pop inert.
    heap: list = []
    seq = 0

    def push(t, prio, kind, version=0):
        nonlocal seq
        heapq.heappush(heap, (t, prio, seq, kind, version))
        seq += 1

    push(0.0, 0, "obs")
    push(tick_dt, 1, "tick")
    boundary_latest = 0

    queue: list[ObservationMsg] = []
    times, true_q, est_q = [], [], []
    observations, commands, solve_ms = [], [], []
    alive = True
    reached = False
    t = 0.0
    last_tick_t = -1.0

    while heap:
        t, _, _, kind, version = heapq.heappop(heap)
        if t > timeout + 1e-12:
            t = timeout
            break
        if kind == "boundary" and version != boundary_latest:
            continue  # superseded by a later solve's estimate
        alive = truth.advance(t)
        if not alive:
            break

        if kind == "obs":
            z = observe(manifold, truth.state_at(t).q, noise.sigma_z, obs_rng)
            stamp = t
            if noise.sigma_z > 0.0:
                stamp = t + jit_rng.uniform(0.0, cfg.jitter_max)
            queue.append(ObservationMsg(z, stamp))
            observations.append((float(stamp), [float(x) for x in z]))
            push(t + obs_dt, 0, "obs")
            continue

        if kind == "tick":
            push(t + tick_dt, 1, "tick")  # the tick chain never skips a beat
        if t <= last_tick_t + 1e-12:
            continue  # tick and boundary coincide; the first one sufficed
        last_tick_t = t

        cmd = follower.tick(t, queue)
        queue = []
        solve_ms.append(follower.trace[-1]["tick_ms"])
        if follower.trace[-1]["advanced"]:
            truth.re_anchor(t)  # edge boundary for the executed motion too
        truth.set_control(cmd.u, t)

        times.append(float(t))
        true_q.append([float(x) for x in truth.state_at(t).q])
        est = follower.current_pose_estimate(t)
        est_q.append([float(x) for x in est])
        commands.append(
            (float(t), [float(x) for x in cmd.u], float(cmd.dt_estimate))
        )

        if follower.goal_reached:
            reached = True
            break
        # Arm at most one boundary wake-up per chain interval, and only from
        # chain ticks.  Re-arming from a boundary-triggered solve chases the
        # duration estimate at micro-second granularity whenever it creeps
        # (time adaptation under load lengthens edges), flooding the queue.
        if kind == "tick" and math.isfinite(cmd.dt_estimate):
            b = follower.last_advance + cmd.dt_estimate
            if t + 1e-9 < b < t + tick_dt - 1e-9:
                boundary_latest += 1
                push(b, 1, "boundary", boundary_latest)

    if not alive:
        outcome = "collision"
        executed = float(truth.collision_time)
        final_q = []
    else:
        final = truth.state_at(t)
        executed = float(t)
        final_q = [float(x) for x in final.q]
        if reached and goal.contains(final.q):
            outcome = "solver_degraded_success" if follower.degraded else "success"
        else:
            outcome = "solver_failure" if follower.degraded else "timeout"

    return RunRecord(
        outcome=outcome,
        noise=noise,
        seed=master_seed,
        plan_duration=float(traj.duration),
        executed_duration=executed,
        times=times,
        true_q=true_q,
        est_q=est_q,
        observations=observations,
        commands=commands,
        solve_ms=solve_ms,
        degraded=follower.degraded,
        dropped_observations=follower.dropped_observations,
        collision_time=truth.collision_time
        if truth.collision_time is not None
        else float("nan"),
        final_true_q=final_q,
    )


# -- metrics -------------------------------------------------------------------


@dataclass(frozen=True)
class Metrics:
    success: bool
    cost: float  # executed / planned duration, NaN unless successful
    trajectory_error: float
    estimation_error: float
    mean_solve_ms: float
    max_solve_ms: float
    time_to_collision: float  # fraction of the plan traversed, NaN if none


def dense_plan(model, traj, spacing: float = 0.01):
    """(positions, headings, cumulative time) sampled densely along the plan."""
    pos, ang, ts = [], [], []
    t0 = 0.0
    for i in range(traj.num_edges):
        st = traj.states[i]
        dt = float(traj.durations[i])
        speed = math.hypot(st.qdot[0], st.qdot[1])
        n = max(2, int(math.ceil(speed * dt / spacing)) + 1)
        s = np.linspace(0.0, dt, n, endpoint=False)
        xs, ys = arc_positions(st.q, st.qdot, s)
        pos.append(np.column_stack([xs, ys]))
        if len(st.q) == 3:
            ang.append(st.q[2] + st.qdot[2] * s)
        else:
            ang.append(np.zeros(len(s)))
        ts.append(t0 + s)
        t0 += dt
    qT = traj.states[-1].q
    pos.append(np.array([[qT[0], qT[1]]]))
    ang.append(np.array([qT[2] if len(qT) == 3 else 0.0]))
    ts.append(np.array([t0]))
    return np.concatenate(pos), np.concatenate(ang), np.concatenate(ts)


def _segment_distances(p, pos, idx):
    """Distance from each point to the polyline around its nearest sample."""
    best = np.full(len(p), np.inf)
    for lo, hi in ((np.maximum(idx - 1, 0), idx),
                   (idx, np.minimum(idx + 1, len(pos) - 1))):
        a, b = pos[lo], pos[hi]
        ab = b - a
        denom = (ab ** 2).sum(axis=1)
        t = np.where(denom > 0, ((p - a) * ab).sum(axis=1) / np.where(denom > 0, denom, 1.0), 0.0)
        t = np.clip(t, 0.0, 1.0)
        proj = a + t[:, None] * ab
        best = np.minimum(best, np.hypot(*(p - proj).T))
    return best


def _weighted_errors(q_arr, pos, ang, tree, se2: bool) -> np.ndarray:
    q_arr = np.asarray(q_arr, dtype=float)
    _, idx = tree.query(q_arr[:, :2])
    d = _segment_distances(q_arr[:, :2], pos, idx)
    err2 = d ** 2
    if se2:
        dth = np.array([wrap_angle(a) for a in q_arr[:, 2] - ang[idx]])
        err2 = err2 + (0.3 * dth) ** 2
    return np.sqrt(err2)


def compute_metrics(record: RunRecord, traj, model) -> Metrics:
    pos, ang, ts = dense_plan(model, traj)
    tree = scipy.spatial.cKDTree(pos)
    se2 = model.config_manifold.dim == 3

    success = record.outcome in ("success", "solver_degraded_success")
    cost = record.executed_duration / record.plan_duration if success else float("nan")

    traj_err = float("nan")
    if record.true_q:
        traj_err = float(
            _weighted_errors(record.true_q, pos, ang, tree, se2).mean()
        )

    est_err = float("nan")
    if record.est_q:
        e = np.asarray(record.est_q, dtype=float)
        g = np.asarray(record.true_q, dtype=float)[: len(e)]
        d2 = ((e[:, :2] - g[:, :2]) ** 2).sum(axis=1)
        if se2:
            dth = np.array([wrap_angle(a) for a in e[:, 2] - g[:, 2]])
            d2 = d2 + (0.3 * dth) ** 2
        est_err = float(np.sqrt(d2).mean())

    ttc = float("nan")
    if record.outcome == "collision" and record.true_q:
        last = np.asarray(record.true_q[-1], dtype=float)
        _, idx = tree.query(last[:2])
        ttc = float(ts[idx] / record.plan_duration)

    mean_ms = float(np.mean(record.solve_ms)) if record.solve_ms else float("nan")
    max_ms = float(np.max(record.solve_ms)) if record.solve_ms else float("nan")
    return Metrics(
        success=success,
        cost=float(cost),
        trajectory_error=traj_err,
        estimation_error=est_err,
        mean_solve_ms=mean_ms,
        max_solve_ms=max_ms,
        time_to_collision=ttc,
    )
