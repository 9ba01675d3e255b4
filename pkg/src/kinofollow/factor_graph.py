"""Factor graph with a Levenberg-Marquardt solver on manifolds.

A graph holds typed variables (role + integer index) living on SE(2) or R^n
and residual factors connecting them.  Solving minimizes

    cost(x) = 0.5 * sum_f || r_f(x) / sigma_f ||^2

by damped Gauss-Newton steps applied through each variable's retraction
(``x <- compose(x, exp(delta))``; plain addition on R^n).  Damping scales the
diagonal of the normal matrix and starts at its floor, so the first attempt
is effectively an undamped Gauss-Newton step and well-posed affine problems
land on the least-squares solution in one or two accepted steps; the damping
factor only grows after a rejected step.  Problems up to ``dense_threshold`` total scalar dimensions
use dense Cholesky; larger ones assemble sparse normal equations and go
through a sparse LU factorization.

Failures are reported, not raised: a non-finite residual or normal equations
that stay singular at maximum damping produce a ``SolveReport`` with
``failed=True`` and the caller decides the fallback.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional, Sequence

import numpy as np
import scipy.linalg
import scipy.sparse
import scipy.sparse.linalg

from .lie import retract

_ROLE_RANK = {"q": 0, "qdot": 1, "u": 2, "dt": 3, "rho": 4}


@dataclass(frozen=True, order=True)
class VariableKey:
    """Typed handle for a graph variable, e.g. ('q', 12)."""

    role: str
    index: int

    def __repr__(self):
        return f"{self.role}[{self.index}]"


@dataclass
class _Variable:
    key: VariableKey
    manifold: object
    value: np.ndarray


@dataclass
class Factor:
    """One residual term.

    ``residual_fn`` maps the connected variables' current values (in key
    order) to an unweighted residual vector; ``sigmas`` holds one standard
    deviation per residual coordinate.  ``jacobian_fn``, when given, returns
    one (dim x var_dim) block per connected variable, with derivatives taken
    in the variable's tangent coordinates; otherwise the solver differentiates
    numerically.  ``kind`` names the residual family and ``side`` tags which
    half of the window posterior the factor belongs to ("te", "la" or "").
    """

    fid: int
    keys: tuple
    residual_fn: Callable
    dim: int
    sigmas: np.ndarray
    jacobian_fn: Optional[Callable] = None
    kind: str = ""
    side: str = ""
    ref: int = -1  # node or edge index the factor talks about, -1 if n/a


@dataclass
class SolverConfig:
    lambda_init: float = 1e-10  # floor start: first attempt is pure Gauss-Newton
    lambda_factor: float = 10.0
    lambda_min: float = 1e-10
    lambda_max: float = 1e4
    max_iterations: int = 100
    rel_cost_tol: float = 1e-8
    grad_tol: float = 1e-10
    abs_cost_tol: float = 1e-16
    dense_threshold: int = 500
    jacobian_step: float = 1e-6


@dataclass
class SolveReport:
    iterations: int
    initial_cost: float
    final_cost: float
    converged: bool
    failed: bool = False
    message: str = ""
    wall_time: float = 0.0


class FactorGraph:
    def __init__(self):
        self._variables: dict[VariableKey, _Variable] = {}
        self._factors: dict[int, Factor] = {}
        self._adjacency: dict[VariableKey, set[int]] = {}
        self._next_fid = 0
        self._dense_threshold = SolverConfig.dense_threshold
        # bumped on any structural or estimate change; lets callers cache
        # linearization-dependent products such as marginal covariances
        self.version = 0

    # -- structure ---------------------------------------------------------

    def add_variable(self, key: VariableKey, manifold, value) -> None:
        if key in self._variables:
            raise ValueError(f"duplicate variable {key}")
        val = np.array(value, dtype=float)
        if val.shape != (manifold.dim,):
            raise ValueError(f"{key}: value shape {val.shape} != ({manifold.dim},)")
        self._variables[key] = _Variable(key, manifold, val)
        self._adjacency[key] = set()
        self.version += 1

    def remove_variable(self, key: VariableKey) -> None:
        if key not in self._variables:
            raise KeyError(f"unknown variable {key}")
        if self._adjacency[key]:
            raise ValueError(
                f"variable {key} still referenced by factors {sorted(self._adjacency[key])}"
            )
        del self._variables[key]
        del self._adjacency[key]
        self.version += 1

    def has_variable(self, key: VariableKey) -> bool:
        return key in self._variables

    def add_factor(
        self,
        keys: Sequence[VariableKey],
        residual_fn: Callable,
        sigmas,
        jacobian_fn: Optional[Callable] = None,
        kind: str = "",
        side: str = "",
        ref: int = -1,
    ) -> int:
        keys = tuple(keys)
        for k in keys:
            if k not in self._variables:
                raise ValueError(f"factor references unknown variable {k}")
        sig = np.atleast_1d(np.asarray(sigmas, dtype=float))
        if np.any(sig <= 0):
            raise ValueError("factor sigmas must be positive")
        fid = self._next_fid
        self._next_fid += 1
        self._factors[fid] = Factor(
            fid, keys, residual_fn, len(sig), sig, jacobian_fn, kind, side, ref
        )
        for k in keys:
            self._adjacency[k].add(fid)
        self.version += 1
        return fid

    def remove_factor(self, fid: int) -> None:
        if fid not in self._factors:
            raise KeyError(f"unknown factor id {fid}")
        f = self._factors.pop(fid)
        for k in f.keys:
            self._adjacency[k].discard(fid)
        self.version += 1

    def factor(self, fid: int) -> Factor:
        return self._factors[fid]

    def factors(self) -> Iterable[Factor]:
        return (self._factors[fid] for fid in sorted(self._factors))

    def factors_on(self, key: VariableKey) -> list[int]:
        return sorted(self._adjacency[key])

    def variable_keys(self) -> list[VariableKey]:
        return sorted(
            self._variables,
            key=lambda k: (k.index, _ROLE_RANK.get(k.role, 99), k.role),
        )

    @property
    def num_variables(self) -> int:
        return len(self._variables)

    @property
    def num_factors(self) -> int:
        return len(self._factors)

    # -- estimates ---------------------------------------------------------

    def estimate(self, key: VariableKey) -> np.ndarray:
        return self._variables[key].value.copy()

    def set_estimate(self, key: VariableKey, value) -> None:
        var = self._variables[key]
        val = np.array(value, dtype=float)
        if val.shape != var.value.shape:
            raise ValueError(f"{key}: bad estimate shape {val.shape}")
        var.value = val
        self.version += 1

    def manifold(self, key: VariableKey):
        return self._variables[key].manifold

    def _values(self) -> dict:
        return {k: v.value for k, v in self._variables.items()}

    # -- residuals and linearization ----------------------------------------

    def cost(self, values: Optional[dict] = None) -> float:
        values = values if values is not None else self._values()
        total = 0.0
        for f in self._factors.values():
            r = f.residual_fn(*(values[k] for k in f.keys)) / f.sigmas
            total += float(r @ r)
        return 0.5 * total

    def _ordering(self):
        offsets = {}
        off = 0
        for key in self.variable_keys():
            d = self._variables[key].manifold.dim
            offsets[key] = (off, d)
            off += d
        return offsets, off

    def _linearize(self, values, offsets, total_dim, step):
        """Weighted residual vector and Jacobian at the given values."""
        rows = sum(f.dim for f in self._factors.values())
        wr = np.empty(rows)
        use_dense = total_dim <= self._dense_threshold
        if use_dense:
            J = np.zeros((rows, total_dim))
            data = rowi = coli = None
        else:
            J = None
            data, rowi, coli = [], [], []
        row = 0
        for fid in sorted(self._factors):
            f = self._factors[fid]
            vals = [values[k] for k in f.keys]
            r = np.atleast_1d(np.asarray(f.residual_fn(*vals), dtype=float))
            inv_sig = 1.0 / f.sigmas
            wr[row : row + f.dim] = r * inv_sig
            if f.jacobian_fn is not None:
                blocks = f.jacobian_fn(*vals)
            else:
                blocks = _numeric_blocks(self, f, vals, step)
            for k, B in zip(f.keys, blocks):
                off, d = offsets[k]
                Bw = np.atleast_2d(B) * inv_sig[:, None]
                if use_dense:
                    J[row : row + f.dim, off : off + d] = Bw
                else:
                    for i in range(f.dim):
                        for j in range(d):
                            v = Bw[i, j]
                            if v != 0.0:
                                data.append(v)
                                rowi.append(row + i)
                                coli.append(off + j)
            row += f.dim
        if use_dense:
            return wr, J
        Jsp = scipy.sparse.coo_matrix(
            (data, (rowi, coli)), shape=(rows, total_dim)
        ).tocsr()
        return wr, Jsp

    # -- solving -------------------------------------------------------------

    def solve(self, config: Optional[SolverConfig] = None) -> SolveReport:
        cfg = config or SolverConfig()
        self._dense_threshold = cfg.dense_threshold
        t0 = time.perf_counter()
        offsets, total_dim = self._ordering()
        values = {k: v.value.copy() for k, v in self._variables.items()}

        cost = self.cost(values)
        report = SolveReport(0, cost, cost, converged=False)
        if not math.isfinite(cost):
            report.failed = True
            report.message = "non-finite residual at initial estimate"
            report.wall_time = time.perf_counter() - t0
            return report
        if cost < cfg.abs_cost_tol or total_dim == 0:
            report.converged = True
            self._commit(values)
            report.wall_time = time.perf_counter() - t0
            return report

        lam = cfg.lambda_init
        accepted = 0
        for _ in range(cfg.max_iterations):
            wr, J = self._linearize(values, offsets, total_dim, cfg.jacobian_step)
            if not np.all(np.isfinite(wr)):
                report.failed = True
                report.message = "non-finite residual during solve"
                break
            dense = not scipy.sparse.issparse(J)
            if dense and not np.all(np.isfinite(J)):
                report.failed = True
                report.message = "non-finite jacobian during solve"
                break
            g = J.T @ wr
            gnorm = float(np.max(np.abs(g))) if g.size else 0.0
            if gnorm < cfg.grad_tol:
                report.converged = True
                break
            A = J.T @ J
            diag = np.maximum(np.asarray(A.diagonal()).ravel(), 1e-12)

            stepped = False
            while lam <= cfg.lambda_max:
                delta = _damped_solve(A, diag, g, lam, dense)
                if delta is None:
                    lam *= cfg.lambda_factor
                    continue
                cand = _retract_all(self, values, offsets, delta)
                new_cost = self.cost(cand)
                if math.isfinite(new_cost) and new_cost < cost:
                    rel = (cost - new_cost) / max(cost, 1e-300)
                    values = cand
                    cost = new_cost
                    accepted += 1
                    lam = max(lam / cfg.lambda_factor, cfg.lambda_min)
                    stepped = True
                    if rel < cfg.rel_cost_tol or cost < cfg.abs_cost_tol:
                        report.converged = True
                    break
                lam *= cfg.lambda_factor
            if not stepped:
                # no descent direction even at max damping: converged if the
                # gradient is already tiny, otherwise a genuine failure
                if gnorm < math.sqrt(cfg.grad_tol):
                    report.converged = True
                else:
                    report.failed = True
                    report.message = (
                        f"singular or non-descending normal equations "
                        f"(lambda>{cfg.lambda_max:g}, |grad|={gnorm:.3g})"
                    )
                break
            if report.converged:
                break

        report.iterations = accepted
        report.final_cost = cost
        if not report.failed:
            self._commit(values)
        report.wall_time = time.perf_counter() - t0
        return report

    def _commit(self, values):
        for k, v in values.items():
            self._variables[k].value = v
        self.version += 1

    # -- covariance ----------------------------------------------------------

    def marginal_covariance(self, key: VariableKey) -> np.ndarray:
        return self.marginals([key])[key]

    def marginals(self, keys: Sequence[VariableKey]) -> dict:
        """Marginal covariance blocks from the Gauss-Newton information matrix."""
        cfg = SolverConfig()
        self._dense_threshold = cfg.dense_threshold
        offsets, total_dim = self._ordering()
        values = self._values()
        wr, J = self._linearize(values, offsets, total_dim, cfg.jacobian_step)
        A = J.T @ J
        dense = not scipy.sparse.issparse(J)
        out = {}
        if dense:
            try:
                cho = scipy.linalg.cho_factor(A)
            except scipy.linalg.LinAlgError:
                raise _singular_information_error(self, A, offsets)
            cov = scipy.linalg.cho_solve(cho, np.eye(total_dim))
            for key in keys:
                off, d = offsets[key]
                out[key] = cov[off : off + d, off : off + d].copy()
        else:
            try:
                lu = scipy.sparse.linalg.splu(A.tocsc())
            except RuntimeError:
                raise _singular_information_error(self, A.toarray(), offsets)
            for key in keys:
                off, d = offsets[key]
                rhs = np.zeros((total_dim, d))
                rhs[off : off + d] = np.eye(d)
                sol = lu.solve(rhs)
                blk = sol[off : off + d]
                if not np.all(np.isfinite(blk)):
                    raise _singular_information_error(self, A.toarray(), offsets)
                out[key] = blk.copy()
        return out

    # -- debugging -------------------------------------------------------------

    def dump_json(self) -> str:
        """Deterministic JSON snapshot of structure and estimates."""
        doc = {
            "variables": [
                {
                    "role": k.role,
                    "index": k.index,
                    "manifold": self._variables[k].manifold.name,
                    "value": [float(x) for x in self._variables[k].value],
                }
                for k in self.variable_keys()
            ],
            "factors": [
                {
                    "id": f.fid,
                    "kind": f.kind,
                    "side": f.side,
                    "ref": f.ref,
                    "keys": [[k.role, k.index] for k in f.keys],
                    "sigmas": [float(s) for s in f.sigmas],
                }
                for f in self.factors()
            ],
        }
        return json.dumps(doc, sort_keys=True, separators=(",", ":"))


def _damped_solve(A, diag, g, lam, dense):
    """Solve (A + lam*diag(D)) delta = -g; None if the factorization fails."""
    if dense:
        M = A + np.diag(lam * diag)
        try:
            c = scipy.linalg.cho_factor(M)
            return scipy.linalg.cho_solve(c, -g)
        except scipy.linalg.LinAlgError:
            return None
    M = (A + scipy.sparse.diags(lam * diag)).tocsc()
    try:
        lu = scipy.sparse.linalg.splu(M)
        delta = lu.solve(-g)
    except RuntimeError:
        return None
    if not np.all(np.isfinite(delta)):
        return None
    return delta


def _retract_all(graph, values, offsets, delta):
    cand = {}
    for key, var in graph._variables.items():
        off, d = offsets[key]
        cand[key] = retract(var.manifold, values[key], delta[off : off + d])
    return cand


def _numeric_blocks(graph, factor, vals, step):
    blocks = []
    for i, key in enumerate(factor.keys):
        m = graph._variables[key].manifold
        B = np.empty((factor.dim, m.dim))
        for j in range(m.dim):
            e = np.zeros(m.dim)
            e[j] = step
            plus = list(vals)
            plus[i] = retract(m, vals[i], e)
            minus = list(vals)
            minus[i] = retract(m, vals[i], -e)
            rp = np.atleast_1d(factor.residual_fn(*plus))
            rm = np.atleast_1d(factor.residual_fn(*minus))
            B[:, j] = (rp - rm) / (2.0 * step)
        blocks.append(B)
    return blocks


def numeric_jacobian(graph: FactorGraph, fid: int, step: float = 1e-6) -> np.ndarray:
    """Central-difference Jacobian of one factor at the current estimates.

    Differentiation oracle for validating analytic factor Jacobians; columns
    follow the factor's own key order, derivatives in tangent coordinates.
    """
    f = graph.factor(fid)
    vals = [graph.estimate(k) for k in f.keys]
    blocks = _numeric_blocks(graph, f, vals, step)
    return np.hstack(blocks)


def _singular_information_error(graph, A, offsets):
    for key in graph.variable_keys():
        off, d = offsets[key]
        blk = A[off : off + d, off : off + d]
        if np.linalg.matrix_rank(blk, tol=1e-12) < d:
            return ValueError(
                f"information matrix singular: variable {key} is unconstrained"
            )
    return ValueError("information matrix singular (gauge freedom between variables)")
