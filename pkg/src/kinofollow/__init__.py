"""kinofollow: sliding-window factor-graph trajectory following.

The package turns a sampled kinodynamic plan into a factor graph and, while
the robot drives, simultaneously estimates the recent past of its trajectory
and adapts the controls and durations of the next few plan edges.  Submodules
build on each other roughly bottom-up:

``lie``
    SE(2) / R^n manifold arithmetic shared by every other module.
``factor_graph``
    Variables, residual factors and a Levenberg-Marquardt solver on manifolds.
``factors``
    The six residual families (integration, dynamics, observation, prior,
    obstacle, limits) as factor builders.
``models``
    Double-integrator and kinematic-car dynamics with a shared step rule.
``world``
    Scenes, signed clearance fields and goal regions.
``planner``
    A kinodynamic random tree planner plus plan post-processing.
``follower``
    The sliding-window controller that estimates and adapts online.
``sim``
    Event-driven closed/open-loop simulation with seeded noise.
``sysid``
    Dynamics parameter identification from driving logs.
``cli``
    Command-line entry points (plan / run / sweep / ablate / sysid).
"""

from . import lie
from .factor_graph import FactorGraph, SolveReport, SolverConfig, VariableKey
from .models import LtvSde, Mushr, State, get_model, step
from .planner import DesiredTrajectory, plan, split_edges
from .world import GoalRegion, Scene, make_scene

__all__ = [
    "lie",
    "FactorGraph",
    "SolveReport",
    "SolverConfig",
    "VariableKey",
    "LtvSde",
    "Mushr",
    "State",
    "get_model",
    "step",
    "DesiredTrajectory",
    "plan",
    "split_edges",
    "GoalRegion",
    "Scene",
    "make_scene",
]

__version__ = "0.1.0"
