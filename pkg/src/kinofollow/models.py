"""Robot dynamics models sharing one semi-implicit step rule.

A model bundles a configuration manifold, a body-frame acceleration law
``f(u, qdot)`` and control bounds.  ``step`` advances a state exactly the
way the trajectory factors predict it:

    qdot' = qdot + f(u, qdot) * dt        (velocity first)
    q'    = q (*) Exp(qdot * dt)          (position from the pre-step twist)

so a plan rolled out edge by edge zeroes every integration and dynamics
residual by construction.

``LtvSde`` is a planar double integrator (f = u).  ``Mushr`` is a
second-order kinematic car: configuration on SE(2), body twist
(vx, vy, omega), throttle mapped to forward acceleration with linear drag,
lateral slip damped with a fast time constant, and yaw rate tracking the
kinematic value for the commanded steering angle.  The steering command
passes through a degree-5 polynomial clamped to the mechanical range.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .lie import SE2, rn


@dataclass(frozen=True)
class State:
    q: np.ndarray
    qdot: np.ndarray


@dataclass(frozen=True)
class LtvSde:
    """Planar double integrator: q in R^2, qdot in R^2, accel = u."""

    control_lower: tuple = (-0.2, -0.2)
    control_upper: tuple = (0.2, 0.2)
    velocity_lower: tuple = (-1.0, -1.0)
    velocity_upper: tuple = (1.0, 1.0)
    split_threshold: float = 0.5

    model_id = "ltv_sde"
    vel_dim = 2
    control_dim = 2

    @property
    def config_manifold(self):
        return rn(2)

    def accel(self, u, qdot):
        return np.asarray(u, dtype=float).copy()

    def accel_jacobians(self, u, qdot):
        return np.zeros((2, 2)), np.eye(2)

    def params_dict(self) -> dict:
        return {"model": self.model_id}


@dataclass(frozen=True)
class Mushr:
    """Second-order kinematic car with throttle/steering inputs in [-1, 1]."""

    k_a: float = 2.0          # throttle to forward acceleration gain
    k_w: float = 4.0          # yaw-rate tracking gain
    drag: float = 0.3         # forward speed damping
    wheelbase: float = 0.3
    tau_y: float = 0.05       # lateral slip decay time constant
    steering_coeffs: tuple = (0.0, 0.38, 0.0, 0.0, 0.0, 0.0)
    steering_clamp: float = 0.45
    control_lower: tuple = (-1.0, -1.0)
    control_upper: tuple = (1.0, 1.0)
    velocity_lower: tuple = (-0.5, -0.3, -2.5)
    velocity_upper: tuple = (2.0, 0.3, 2.5)
    split_threshold: float = 0.1

    model_id = "mushr"
    vel_dim = 3
    control_dim = 2

    @property
    def config_manifold(self):
        return SE2

    def effective_steering(self, cmd: float) -> float:
        d = 0.0
        for c in reversed(self.steering_coeffs):
            d = d * cmd + c
        return max(-self.steering_clamp, min(self.steering_clamp, d))

    def _steering_slope(self, cmd: float) -> float:
        # derivative of the polynomial, zero once the clamp is active
        raw = 0.0
        for c in reversed(self.steering_coeffs):
            raw = raw * cmd + c
        if abs(raw) >= self.steering_clamp:
            return 0.0
        slope = 0.0
        for k in range(len(self.steering_coeffs) - 1, 0, -1):
            slope = slope * cmd + k * self.steering_coeffs[k]
        return slope

    def accel(self, u, qdot):
        vx, vy, w = qdot
        delta = self.effective_steering(u[1])
        return np.array(
            [
                self.k_a * u[0] - self.drag * vx,
                -vy / self.tau_y,
                self.k_w * (vx * math.tan(delta) / self.wheelbase - w),
            ]
        )

    def accel_jacobians(self, u, qdot):
        vx = qdot[0]
        delta = self.effective_steering(u[1])
        tan_d = math.tan(delta)
        dfdqd = np.array(
            [
                [-self.drag, 0.0, 0.0],
                [0.0, -1.0 / self.tau_y, 0.0],
                [self.k_w * tan_d / self.wheelbase, 0.0, -self.k_w],
            ]
        )
        sec2 = 1.0 + tan_d * tan_d
        dfdu = np.array(
            [
                [self.k_a, 0.0],
                [0.0, 0.0],
                [0.0, self.k_w * vx * sec2 * self._steering_slope(u[1]) / self.wheelbase],
            ]
        )
        return dfdqd, dfdu

    def with_rho(self, k_a: float, k_w: float, drag: float) -> "Mushr":
        return replace(self, k_a=k_a, k_w=k_w, drag=drag)

    def params_dict(self) -> dict:
        return {
            "model": self.model_id,
            "k_a": self.k_a,
            "k_w": self.k_w,
            "drag": self.drag,
            "wheelbase": self.wheelbase,
            "tau_y": self.tau_y,
            "steering_coeffs": list(self.steering_coeffs),
            "steering_clamp": self.steering_clamp,
        }


def step(model, state: State, u, dt: float) -> State:
    """One semi-implicit update; matches the factor predictions exactly."""
    if dt < 0.0:
        raise ValueError(f"negative step dt={dt}")
    qdot = np.asarray(state.qdot, dtype=float)
    q_next = model.config_manifold.integrate(state.q, qdot, dt)
    qd_next = qdot + model.accel(u, qdot) * dt
    return State(q_next, qd_next)


def interpolate(model, state: State, u, s: float) -> State:
    """State partway through a step; identical to ``step`` with dt=s.

    Reading intermediate poses this way keeps dense collision checks and
    observations consistent with the piecewise-constant-twist semantics:
    queries never re-anchor the integration.
    """
    return step(model, state, u, s)


def get_model(model_id: str, params: dict | None = None):
    params = dict(params or {})
    params.pop("model", None)
    if model_id == "ltv_sde":
        known = {k: tuple(v) if isinstance(v, (list, tuple)) else v
                 for k, v in params.items()}
        return LtvSde(**known)
    if model_id == "mushr":
        if "steering_coeffs" in params:
            params["steering_coeffs"] = tuple(params["steering_coeffs"])
        return Mushr(**params)
    raise ValueError(f"unknown model id {model_id!r}")
