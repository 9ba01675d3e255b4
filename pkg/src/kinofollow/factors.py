"""Residual factor builders for trajectory graphs.

Six residual families connect the window variables:

* integration — next configuration vs the constant-twist prediction,
  ``r = q_next (-) (q (*) Exp(qdot * dt))``
* dynamics — next velocity vs the acceleration model,
  ``r = (qdot + f(u, qdot) * dt) - qdot_next``
* observation — a timestamped pose against the in-edge prediction,
  ``r = z (-) (q (*) Exp(qdot * dt_z))``
* prior — anchors a variable to its plan value, ``r = value (-) v``
* obstacle — one-sided hinge on clearance, ``r = max(eps - c(q), 0)``
* limits — one-sided hinge per coordinate outside [lower, upper]

Signs follow the conventions above; they only matter to tests since the
cost is quadratic.  Every factor carries an analytic Jacobian: the
vector-space families by inspection, the SE(2)-valued ones chained through
the adjoint and the right Jacobian of Exp (derivatives in right-perturbation
tangent coordinates, matching the solver's retraction).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .factor_graph import FactorGraph, VariableKey
from .lie import RnManifold, se2_ad, se2_jr, se2_jr_inv


@dataclass(frozen=True)
class NoiseSpec:
    """Default residual scales (standard deviations, SI units)."""

    integration: float = 0.01
    dynamics: float = 0.05
    q_prior_pos: float = 0.05
    q_prior_ang: float = 0.05
    qdot_prior: float = 0.2
    dt_prior: float = 0.02
    obstacle: float = 0.01
    limits: float = 0.001
    # observation sigma tracks the scenario's sensor noise but is floored
    # so exact sensors never produce an infinite weight
    observation_floor: float = 1e-3

    def q_prior(self, dim: int) -> np.ndarray:
        sig = np.full(dim, self.q_prior_pos)
        if dim == 3:
            sig[2] = self.q_prior_ang
        return sig

    def observation(self, dim: int, sigma_z: float) -> np.ndarray:
        s = max(sigma_z, self.observation_floor)
        sig = np.full(dim, s)
        if dim == 3:
            sig[2] = max(0.5 * sigma_z, self.observation_floor)
        return sig


def _dlog_between_first(manifold, r) -> np.ndarray:
    """d/da of log(between(a, b)) at between(a, b) == Exp(r)."""
    return -se2_jr_inv(r) @ se2_ad(manifold.exp(-r))


def add_integration(graph: FactorGraph, manifold, k_qnext, k_q, k_qdot, k_dt,
                    sigma: float, side: str = "", ref: int = -1) -> int:
    def residual(q_next, q, qdot, dt):
        pred = manifold.compose(q, manifold.exp(np.asarray(qdot) * dt[0]))
        return manifold.log(manifold.between(pred, q_next))

    if isinstance(manifold, RnManifold):
        n = manifold.dim
        eye = np.eye(n)

        def jac(q_next, q, qdot, dt):
            return [eye, -eye, -dt[0] * eye, -np.asarray(qdot).reshape(n, 1)]

    else:

        def jac(q_next, q, qdot, dt):
            v = np.asarray(qdot) * dt[0]
            pred = manifold.compose(q, manifold.exp(v))
            r = manifold.log(manifold.between(pred, q_next))
            # r sits at between(pred, q_next); q enters through pred
            Jfirst = _dlog_between_first(manifold, r)
            Ji = se2_jr_inv(r)
            Jv = se2_jr(v)
            return [
                Ji,
                Jfirst @ se2_ad(manifold.exp(-v)),
                Jfirst @ Jv * dt[0],
                (Jfirst @ Jv @ np.asarray(qdot)).reshape(3, 1),
            ]

    return graph.add_factor(
        (k_qnext, k_q, k_qdot, k_dt), residual,
        np.full(manifold.dim, sigma), jac, kind="integration", side=side, ref=ref,
    )


def add_dynamics(graph: FactorGraph, model, k_qdnext, k_qdot, k_u, k_dt,
                 sigma: float, side: str = "", ref: int = -1) -> int:
    n = model.vel_dim

    def residual(qd_next, qdot, u, dt):
        return qdot + model.accel(u, qdot) * dt[0] - qd_next

    eye = np.eye(n)

    def jac(qd_next, qdot, u, dt):
        dfdqd, dfdu = model.accel_jacobians(u, qdot)
        f = model.accel(u, qdot)
        return [-eye, eye + dfdqd * dt[0], dfdu * dt[0], f.reshape(n, 1)]

    return graph.add_factor(
        (k_qdnext, k_qdot, k_u, k_dt), residual,
        np.full(n, sigma), jac, kind="dynamics", side=side, ref=ref,
    )


def add_observation(graph: FactorGraph, manifold, k_q, k_qdot, z, dt_z: float,
                    sigmas, side: str = "te", ref: int = -1) -> int:
    z = np.array(z, dtype=float)
    dt_z = float(dt_z)

    def residual(q, qdot):
        pred = manifold.compose(q, manifold.exp(np.asarray(qdot) * dt_z))
        return manifold.log(manifold.between(pred, z))

    if isinstance(manifold, RnManifold):
        n = manifold.dim
        eye = np.eye(n)

        def jac(q, qdot):
            return [-eye, -dt_z * eye]

    else:

        def jac(q, qdot):
            v = np.asarray(qdot) * dt_z
            pred = manifold.compose(q, manifold.exp(v))
            r = manifold.log(manifold.between(pred, z))
            Jfirst = _dlog_between_first(manifold, r)
            return [
                Jfirst @ se2_ad(manifold.exp(-v)),
                Jfirst @ se2_jr(v) * dt_z,
            ]

    return graph.add_factor(
        (k_q, k_qdot), residual, sigmas, jac,
        kind="observation", side=side, ref=ref,
    )


def add_prior(graph: FactorGraph, manifold, key: VariableKey, value, sigmas,
              kind: str, side: str = "", ref: int = -1) -> int:
    anchor = np.array(value, dtype=float)

    def residual(v):
        return manifold.log(manifold.between(v, anchor))

    if isinstance(manifold, RnManifold):
        neg_eye = -np.eye(manifold.dim)

        def jac(v):
            return [neg_eye]

    else:

        def jac(v):
            r = manifold.log(manifold.between(v, anchor))
            return [_dlog_between_first(manifold, r)]

    return graph.add_factor((key,), residual, sigmas, jac, kind=kind,
                            side=side, ref=ref)


def add_obstacle(graph: FactorGraph, field, k_q, eps: float, sigma: float,
                 side: str = "", ref: int = -1) -> int:
    """Hinge on the clearance field: active (positive) once c(q) <= eps."""

    def residual(q):
        c = field.clearance(q[0], q[1])
        return np.array([eps - c if c <= eps else 0.0])

    def jac(q):
        c = field.clearance(q[0], q[1])
        g = np.zeros((1, len(q)))
        if c <= eps:
            gx, gy = field.clearance_grad(q[0], q[1])
            if len(q) == 3:
                # tangent perturbations move the position in the body frame
                ct, st = math.cos(q[2]), math.sin(q[2])
                g[0, 0] = -(gx * ct + gy * st)
                g[0, 1] = -(-gx * st + gy * ct)
            else:
                g[0, 0] = -gx
                g[0, 1] = -gy
        return [g]

    return graph.add_factor((k_q,), residual, np.array([sigma]), jac,
                            kind="obstacle", side=side, ref=ref)


def add_limits(graph: FactorGraph, key: VariableKey, lower, upper,
               sigma: float, kind: str = "limits", side: str = "",
               ref: int = -1) -> int:
    lo = np.atleast_1d(np.asarray(lower, dtype=float))
    hi = np.atleast_1d(np.asarray(upper, dtype=float))
    n = lo.size

    def residual(v):
        r = np.zeros(n)
        over = v >= hi
        under = v <= lo
        r[over] = v[over] - hi[over]
        r[under] = v[under] - lo[under]
        return r

    def jac(v):
        d = np.zeros(n)
        d[(v >= hi) | (v <= lo)] = 1.0
        return [np.diag(d)]

    return graph.add_factor((key,), residual, np.full(n, sigma), jac,
                            kind=kind, side=side, ref=ref)
