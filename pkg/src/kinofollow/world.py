"""Scenes, clearance queries and goal regions.

A scene is a rectangular workspace with disc and box obstacles, a robot
footprint radius and a set of labeled anchor poses used as start/goal
candidates.  Clearance is signed distance from the footprint to the nearest
obstacle surface (negative inside an obstacle) with the workspace boundary
counted as an obstacle when ``walls`` is set.

Two query paths exist on purpose: exact per-obstacle distances (used by the
planner's dense edge checks and the per-obstacle factor variant) and a
precomputed grid field with bilinear interpolation (the default obstacle
factor backend).  The grid agrees with the exact field to within a cell
diagonal because clearance is 1-Lipschitz.

Three generators cover the experiment scenes:

* ``simple_obstacle`` — one centered box in a 10 x 10 m workspace.
* ``forest`` — 25 random discs with at least 1.2 m of corridor between
  any two surfaces, four corner anchors.
* ``bug_trap`` — a C-shaped wall with a 1.0 m mouth; the straight line
  from either start anchor to the goal anchor crosses the wall.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .lie import wrap_angle

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class Disc:
    cx: float
    cy: float
    r: float

    def distance(self, x, y):
        return np.hypot(x - self.cx, y - self.cy) - self.r

    def to_dict(self):
        return {"type": "disc", "cx": self.cx, "cy": self.cy, "r": self.r}


@dataclass(frozen=True)
class Rect:
    """Axis-aligned box given by center and half-extents, optionally rotated."""

    cx: float
    cy: float
    hw: float
    hh: float
    angle: float = 0.0

    def distance(self, x, y):
        dx = np.asarray(x) - self.cx
        dy = np.asarray(y) - self.cy
        if self.angle != 0.0:
            c, s = math.cos(-self.angle), math.sin(-self.angle)
            dx, dy = c * dx - s * dy, s * dx + c * dy
        px = np.abs(dx) - self.hw
        py = np.abs(dy) - self.hh
        outside = np.hypot(np.maximum(px, 0.0), np.maximum(py, 0.0))
        inside = np.minimum(np.maximum(px, py), 0.0)
        return outside + inside

    def to_dict(self):
        return {
            "type": "rect",
            "cx": self.cx, "cy": self.cy,
            "hw": self.hw, "hh": self.hh, "angle": self.angle,
        }


def _obstacle_from_dict(d):
    if d["type"] == "disc":
        return Disc(d["cx"], d["cy"], d["r"])
    if d["type"] == "rect":
        return Rect(d["cx"], d["cy"], d["hw"], d["hh"], d.get("angle", 0.0))
    raise ValueError(f"unknown obstacle type {d['type']!r}")


@dataclass
class Scene:
    kind: str
    seed: int
    bounds: tuple  # (xmin, xmax, ymin, ymax)
    obstacles: list
    footprint: float = 0.2
    walls: bool = True
    anchors: dict = field(default_factory=dict)
    goal_eps: float = 0.5

    @property
    def scene_id(self) -> str:
        return f"{self.kind}-{self.seed}"

    def _wall_distance(self, x, y):
        xmin, xmax, ymin, ymax = self.bounds
        return np.minimum.reduce(
            [np.asarray(x) - xmin, xmax - np.asarray(x),
             np.asarray(y) - ymin, ymax - np.asarray(y)]
        )

    def clearance(self, x: float, y: float) -> float:
        """Exact signed clearance of the footprint center (x, y)."""
        best = math.inf
        for ob in self.obstacles:
            best = min(best, float(ob.distance(x, y)))
        if self.walls:
            best = min(best, float(self._wall_distance(x, y)))
        return best - self.footprint

    def clearance_batch(self, xs, ys) -> np.ndarray:
        xs = np.asarray(xs, dtype=float)
        ys = np.asarray(ys, dtype=float)
        best = np.full(xs.shape, np.inf)
        for ob in self.obstacles:
            np.minimum(best, ob.distance(xs, ys), out=best)
        if self.walls:
            np.minimum(best, self._wall_distance(xs, ys), out=best)
        return best - self.footprint

    def clearance_grad(self, x: float, y: float, h: float = 1e-6):
        gx = (self.clearance(x + h, y) - self.clearance(x - h, y)) / (2 * h)
        gy = (self.clearance(x, y + h) - self.clearance(x, y - h)) / (2 * h)
        return gx, gy

    def nearest_obstacle(self, x: float, y: float):
        """(clearance, obstacle index) with -1 for the workspace walls."""
        best, idx = math.inf, -1
        for i, ob in enumerate(self.obstacles):
            d = float(ob.distance(x, y))
            if d < best:
                best, idx = d, i
        if self.walls:
            d = float(self._wall_distance(x, y))
            if d < best:
                best, idx = d, -1
        return best - self.footprint, idx

    def obstacles_within(self, x: float, y: float, eps: float):
        """Indices and clearances of obstacles closer than eps."""
        out = []
        for i, ob in enumerate(self.obstacles):
            d = float(ob.distance(x, y)) - self.footprint
            if d <= eps:
                out.append((i, d))
        if self.walls:
            d = float(self._wall_distance(x, y)) - self.footprint
            if d <= eps:
                out.append((-1, d))
        return out

    def obstacle_clearance_fn(self, index: int):
        """Per-obstacle clearance view with the Scene query interface."""
        return _SingleObstacleField(self, index)

    def collides(self, x: float, y: float) -> bool:
        return self.clearance(x, y) < 0.0

    def to_json(self) -> str:
        doc = {
            "kind": self.kind,
            "seed": self.seed,
            "bounds": list(self.bounds),
            "obstacles": [ob.to_dict() for ob in self.obstacles],
            "footprint": self.footprint,
            "walls": self.walls,
            "anchors": {k: list(v) for k, v in sorted(self.anchors.items())},
            "goal_eps": self.goal_eps,
        }
        return json.dumps(doc, sort_keys=True, indent=1)

    @staticmethod
    def from_json(text: str) -> "Scene":
        doc = json.loads(text)
        return Scene(
            kind=doc["kind"],
            seed=doc["seed"],
            bounds=tuple(doc["bounds"]),
            obstacles=[_obstacle_from_dict(d) for d in doc["obstacles"]],
            footprint=doc["footprint"],
            walls=doc["walls"],
            anchors={k: tuple(v) for k, v in doc["anchors"].items()},
            goal_eps=doc.get("goal_eps", 0.5),
        )


class _SingleObstacleField:
    def __init__(self, scene: Scene, index: int):
        self._scene = scene
        self._index = index

    def clearance(self, x, y):
        if self._index < 0:
            return float(self._scene._wall_distance(x, y)) - self._scene.footprint
        ob = self._scene.obstacles[self._index]
        return float(ob.distance(x, y)) - self._scene.footprint

    def clearance_grad(self, x, y, h: float = 1e-6):
        gx = (self.clearance(x + h, y) - self.clearance(x - h, y)) / (2 * h)
        gy = (self.clearance(x, y + h) - self.clearance(x, y - h)) / (2 * h)
        return gx, gy


class SdfGrid:
    """Bilinear clearance field sampled on a regular grid of cell centers.

    Out-of-workspace queries return +inf (and log once); the gradient there
    is zero.  Values already include the footprint offset.
    """

    def __init__(self, scene: Scene, resolution: float = 0.05):
        self.resolution = float(resolution)
        xmin, xmax, ymin, ymax = scene.bounds
        self.x0 = xmin
        self.y0 = ymin
        nx = max(2, int(math.ceil((xmax - xmin) / resolution)))
        ny = max(2, int(math.ceil((ymax - ymin) / resolution)))
        xs = xmin + (np.arange(nx) + 0.5) * resolution
        ys = ymin + (np.arange(ny) + 0.5) * resolution
        X, Y = np.meshgrid(xs, ys)
        self.values = scene.clearance_batch(X, Y)  # shape (ny, nx)
        self.nx, self.ny = nx, ny
        self._warned = False

    def _locate(self, x, y):
        fx = (x - self.x0) / self.resolution - 0.5
        fy = (y - self.y0) / self.resolution - 0.5
        ix = int(math.floor(fx))
        iy = int(math.floor(fy))
        if ix < 0 or iy < 0 or ix >= self.nx - 1 or iy >= self.ny - 1:
            return None
        return ix, iy, fx - ix, fy - iy

    def clearance(self, x: float, y: float) -> float:
        loc = self._locate(x, y)
        if loc is None:
            if not self._warned:
                log.warning("clearance query outside field at (%.3f, %.3f)", x, y)
                self._warned = True
            return math.inf
        ix, iy, tx, ty = loc
        v = self.values
        v00, v10 = v[iy, ix], v[iy, ix + 1]
        v01, v11 = v[iy + 1, ix], v[iy + 1, ix + 1]
        return (v00 * (1 - tx) + v10 * tx) * (1 - ty) + (v01 * (1 - tx) + v11 * tx) * ty

    def clearance_grad(self, x: float, y: float):
        loc = self._locate(x, y)
        if loc is None:
            return 0.0, 0.0
        ix, iy, tx, ty = loc
        v = self.values
        v00, v10 = v[iy, ix], v[iy, ix + 1]
        v01, v11 = v[iy + 1, ix], v[iy + 1, ix + 1]
        gx = ((v10 - v00) * (1 - ty) + (v11 - v01) * ty) / self.resolution
        gy = ((v01 - v00) * (1 - tx) + (v11 - v10) * tx) / self.resolution
        return gx, gy


@dataclass(frozen=True)
class GoalRegion:
    """Ball around a goal configuration under the weighted metric."""

    q_goal: tuple
    eps: float
    angle_weight: float = 0.3

    def distance(self, q) -> float:
        q = np.asarray(q, dtype=float)
        g = np.asarray(self.q_goal, dtype=float)
        d2 = (q[0] - g[0]) ** 2 + (q[1] - g[1]) ** 2
        if q.shape[0] == 3:
            d2 += (self.angle_weight * wrap_angle(q[2] - g[2])) ** 2
        return math.sqrt(d2)

    def contains(self, q) -> bool:
        return self.distance(q) < self.eps


def make_scene(kind: str, seed: int = 0) -> Scene:
    if kind == "simple_obstacle":
        return _make_simple(seed)
    if kind == "forest":
        return _make_forest(seed)
    if kind == "bug_trap":
        return _make_bug_trap(seed)
    raise ValueError(f"unknown scene kind {kind!r}")


def _make_simple(seed: int) -> Scene:
    rng = np.random.default_rng(seed + 17)
    hw = 0.6 * (1.0 + 0.1 * (rng.random() - 0.5))
    hh = 1.5 * (1.0 + 0.1 * (rng.random() - 0.5))
    return Scene(
        kind="simple_obstacle",
        seed=seed,
        bounds=(-5.0, 5.0, -5.0, 5.0),
        obstacles=[Rect(0.0, 0.0, hw, hh)],
        anchors={
            "west": (-4.0, 0.0, 0.0),
            "east": (4.0, 0.0, 0.0),
        },
        goal_eps=0.5,
    )


def _make_forest(seed: int) -> Scene:
    """25 discs, pairwise surface gaps >= 1.2 m, four corner anchors."""
    rng = np.random.default_rng(seed + 61)
    bounds = (-7.0, 7.0, -7.0, 7.0)
    anchors = {
        "sw": (-5.5, -5.5, math.pi / 4),
        "se": (5.5, -5.5, 3 * math.pi / 4),
        "ne": (5.5, 5.5, -3 * math.pi / 4),
        "nw": (-5.5, 5.5, -math.pi / 4),
    }
    corridor = 1.2
    anchor_margin = 1.4
    discs: list[Disc] = []
    tries = 0
    while len(discs) < 25:
        tries += 1
        if tries > 200000:
            raise RuntimeError(f"forest generation stalled for seed {seed}")
        r = rng.uniform(0.3, 0.6)
        x = rng.uniform(bounds[0] + r + 0.7, bounds[1] - r - 0.7)
        y = rng.uniform(bounds[2] + r + 0.7, bounds[3] - r - 0.7)
        ok = all(
            math.hypot(x - d.cx, y - d.cy) >= r + d.r + corridor for d in discs
        ) and all(
            math.hypot(x - ax, y - ay) >= r + anchor_margin
            for ax, ay, _ in anchors.values()
        )
        if ok:
            discs.append(Disc(x, y, r))
    return Scene(
        kind="forest",
        seed=seed,
        bounds=bounds,
        obstacles=discs,
        anchors=anchors,
        goal_eps=0.5,
    )


def _make_bug_trap(seed: int) -> Scene:
    """C-shaped trap, mouth 1.0 m wide facing west, goal inside."""
    top = Rect(0.5, 0.7, 2.0, 0.2)
    bottom = Rect(0.5, -0.7, 2.0, 0.2)
    cap = Rect(2.7, 0.0, 0.2, 0.9)
    return Scene(
        kind="bug_trap",
        seed=seed,
        bounds=(-5.0, 5.0, -5.0, 5.0),
        obstacles=[top, bottom, cap],
        anchors={
            "outside_ne": (4.0, 2.5, math.pi),
            "outside_sw": (-4.0, -3.0, 0.0),
            "inside": (1.8, 0.0, 0.0),
        },
        goal_eps=0.4,
    )
