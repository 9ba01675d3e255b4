"""Manifold primitives for planar robot states.

Two manifolds cover every variable in this package: the planar rigid
transforms SE(2) and plain Euclidean vectors R^n.  Elements are stored as
flat float64 arrays (SE(2) as ``[x, y, theta]`` with theta kept in
(-pi, pi]); tangent vectors are arrays of the same length.  A manifold
object carries the semantics, so callers pair ``(manifold, array)``
instead of wrapping values in dedicated element types.

Conventions:

* ``compose(a, b)`` is the group product a * b, ``between(a, b)`` is
  a^-1 * b, and perturbations are applied on the right:
  ``retract(x, d) = compose(x, exp(d))``.
* ``exp``/``log`` use the closed-form SE(2) V-matrix with a second-order
  Taylor fallback below ``SMALL_ANGLE``.
* ``integrate(q, qdot, dt)`` advances a configuration along a constant
  body twist, ``compose(q, exp(qdot * dt))``; dt must be non-negative.
"""

from __future__ import annotations

import math

import numpy as np

TWO_PI = 2.0 * math.pi

# below this |theta| the V-matrix terms switch to their Taylor series
SMALL_ANGLE = 1e-6


def wrap_angle(theta: float) -> float:
    """Wrap an angle to the principal interval (-pi, pi]."""
    t = math.fmod(theta + math.pi, TWO_PI)
    if t <= 0.0:
        t += TWO_PI
    return t - math.pi


class SE2Manifold:
    """Planar rigid transforms; elements [x, y, theta], tangents [vx, vy, w]."""

    dim = 3
    name = "se2"

    def identity(self):
        return np.zeros(3)

    def compose(self, a, b):
        ax, ay, at = a
        bx, by, bt = b
        c, s = math.cos(at), math.sin(at)
        return np.array(
            [ax + c * bx - s * by, ay + s * bx + c * by, wrap_angle(at + bt)]
        )

    def inverse(self, a):
        ax, ay, at = a
        c, s = math.cos(at), math.sin(at)
        return np.array([-(c * ax + s * ay), -(-s * ax + c * ay), wrap_angle(-at)])

    def between(self, a, b):
        ax, ay, at = a
        bx, by, bt = b
        c, s = math.cos(at), math.sin(at)
        dx, dy = bx - ax, by - ay
        return np.array([c * dx + s * dy, -s * dx + c * dy, wrap_angle(bt - at)])

    def exp(self, v):
        vx, vy, w = v
        if abs(w) < SMALL_ANGLE:
            a = 1.0 - w * w / 6.0
            b = 0.5 * w - w * w * w / 24.0
        else:
            a = math.sin(w) / w
            b = (1.0 - math.cos(w)) / w
        return np.array([a * vx - b * vy, b * vx + a * vy, wrap_angle(w)])

    def log(self, g):
        x, y, t = g
        t = wrap_angle(t)
        if abs(t) < SMALL_ANGLE:
            a = 1.0 - t * t / 6.0
            b = 0.5 * t - t * t * t / 24.0
        else:
            a = math.sin(t) / t
            b = (1.0 - math.cos(t)) / t
        den = a * a + b * b
        return np.array([(a * x + b * y) / den, (-b * x + a * y) / den, t])

    def integrate(self, q, qdot, dt):
        if dt < 0.0:
            raise ValueError(f"negative integration step dt={dt}")
        return self.compose(q, self.exp(np.asarray(qdot) * dt))

    def local_distance(self, a, b, angle_weight=0.3):
        """Weighted configuration distance used for goals and tree metrics."""
        ax, ay, at = a
        bx, by, bt = b
        dt = wrap_angle(bt - at)
        return math.sqrt(
            (bx - ax) ** 2 + (by - ay) ** 2 + (angle_weight * dt) ** 2
        )


class RnManifold:
    """Euclidean R^n with trivial group structure (addition)."""

    name = "rn"

    def __init__(self, n: int):
        self.dim = int(n)

    def identity(self):
        return np.zeros(self.dim)

    def compose(self, a, b):
        return np.asarray(a, dtype=float) + np.asarray(b, dtype=float)

    def inverse(self, a):
        return -np.asarray(a, dtype=float)

    def between(self, a, b):
        return np.asarray(b, dtype=float) - np.asarray(a, dtype=float)

    def exp(self, v):
        return np.array(v, dtype=float)

    def log(self, g):
        return np.array(g, dtype=float)

    def integrate(self, q, qdot, dt):
        if dt < 0.0:
            raise ValueError(f"negative integration step dt={dt}")
        return np.asarray(q, dtype=float) + np.asarray(qdot, dtype=float) * dt

    def local_distance(self, a, b, angle_weight=0.3):
        return float(np.linalg.norm(np.asarray(b, float) - np.asarray(a, float)))


def se2_ad(g) -> np.ndarray:
    """Adjoint matrix of g: Exp(Ad(g) xi) == g * Exp(xi) * g^-1."""
    x, y, t = g
    c, s = math.cos(t), math.sin(t)
    return np.array([[c, -s, y], [s, c, -x], [0.0, 0.0, 1.0]])


def se2_jr(xi) -> np.ndarray:
    """Right Jacobian of Exp: Exp(xi + d) == Exp(xi) * Exp(Jr(xi) d)."""
    rx, ry, w = xi
    if abs(w) < SMALL_ANGLE:
        a = 1.0 - w * w / 6.0
        b = 0.5 * w - w * w * w / 24.0
        c1 = rx * w / 6.0 - 0.5 * ry
        c2 = 0.5 * rx + ry * w / 6.0
    else:
        sw, cw = math.sin(w), math.cos(w)
        a = sw / w
        b = (1.0 - cw) / w
        c1 = (w * rx - rx * sw + ry * cw - ry) / (w * w)
        c2 = (w * ry + rx - rx * cw - ry * sw) / (w * w)
    return np.array([[a, b, c1], [-b, a, c2], [0.0, 0.0, 1.0]])


def se2_jr_inv(xi) -> np.ndarray:
    """Inverse of the right Jacobian, via the 2x2 rotation-like block."""
    J = se2_jr(xi)
    a, b = J[0, 0], J[0, 1]
    den = a * a + b * b
    ia, ib = a / den, b / den
    c1, c2 = J[0, 2], J[1, 2]
    return np.array(
        [
            [ia, -ib, -(ia * c1 - ib * c2)],
            [ib, ia, -(ib * c1 + ia * c2)],
            [0.0, 0.0, 1.0],
        ]
    )


SE2 = SE2Manifold()

_RN_CACHE: dict[int, RnManifold] = {}


def rn(n: int) -> RnManifold:
    if n not in _RN_CACHE:
        _RN_CACHE[n] = RnManifold(n)
    return _RN_CACHE[n]


def retract(manifold, x, delta):
    """Right-perturb x by a tangent step; the solver's update rule."""
    return manifold.compose(x, manifold.exp(delta))
