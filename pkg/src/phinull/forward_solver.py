"""Semi-implicit Euler-Maruyama time stepping on the scenario tree.

One step from a node at t_k to its two children:

    (I - dt L_gamma) y_{k+1} = y_k + dt (drift(t_k, y_k) + 1_{M0} u_k)
                                    + dB (diffusion(t_k, y_k) + U_k)

with L_gamma = sum_i D_i(gamma_i D_i .) implicit and everything else
explicit at the left endpoint.  The implicit operator is symmetric positive
definite; its sparse factorization is computed once per (mesh, gamma, dt)
and shared across all nodes and by the adjoint sweep (the matrix is its own
transpose).  Drift is either the linear package sum_i a_{1i} A_i D_i y +
a_2 y + v or a Lipschitz nonlinearity F_1(t, x, y, grad_h y); diffusion is
U (+ F_2 in the full semilinear system).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from . import mesh as msh
from . import scenario as scn
from .errors import SolveError

SOLVE_RESIDUAL_TOL = 1e-12


@dataclass
class NonlinearitySpec:
    """Lipschitz drift/diffusion nonlinearities F_1, F_2 with declared constants.

    Each evaluator maps (t, pts, a, b) -> array, where a is the state value
    and b the tuple of discrete-gradient components, all on the primal mesh.
    F_i(t, x, 0, 0) = 0 is spot-checked on the full grid at t = 0 and the
    declared Lipschitz constants are sanity-checked on random pairs.
    """

    F1: Callable
    F2: Callable | None = None
    L1: float = 0.0
    L2: float = 0.0

    def validate(self, mesh: msh.MeshSpec, rng: np.random.Generator,
                 trials: int = 16) -> None:
        pts = mesh.points(mesh.extents_primal())
        zero = np.zeros(pts.shape[:-1])
        zgrad = tuple(zero.copy() for _ in range(mesh.n))
        for name, F, L in (("F1", self.F1, self.L1), ("F2", self.F2, self.L2)):
            if F is None:
                continue
            base = np.asarray(F(0.0, pts, zero, zgrad), dtype=float)
            if np.max(np.abs(base)) > 0.0:
                raise ValueError(f"{name}(t, x, 0, 0) must vanish identically")
            for _ in range(trials):
                a1, a2 = rng.standard_normal((2,) + zero.shape)
                b1 = tuple(rng.standard_normal(zero.shape) for _ in range(mesh.n))
                b2 = tuple(rng.standard_normal(zero.shape) for _ in range(mesh.n))
                num = np.abs(
                    np.asarray(F(0.3, pts, a1, b1)) - np.asarray(F(0.3, pts, a2, b2))
                )
                den = np.abs(a1 - a2) + sum(np.abs(x - y) for x, y in zip(b1, b2))
                ratio = np.max(num / np.maximum(den, 1e-12))
                if ratio > L * (1.0 + 1e-6):
                    raise ValueError(
                        f"empirical Lipschitz ratio {ratio:.6g} of {name} exceeds "
                        f"declared L={L:.6g}"
                    )


@dataclass
class ForwardProblem:
    """Data for the controlled forward system on one mesh/tree pair."""

    mesh: msh.MeshSpec
    gamma: msh.CoefficientField
    control_mask: np.ndarray  # boolean on the primal mesh (M0)
    y0: np.ndarray  # primal values; Dirichlet closure implied
    T: float = 1.0
    a1: Sequence[np.ndarray] | None = None  # per-direction primal fields
    a2: np.ndarray | None = None
    v: scn.AdaptedField | None = None
    nonlin: NonlinearitySpec | None = None

    def __post_init__(self):
        shape = self.mesh.shape(self.mesh.extents_primal())
        self.control_mask = np.asarray(self.control_mask, dtype=bool)
        if self.control_mask.shape != shape:
            raise ValueError("control mask must live on the primal mesh")
        self.y0 = np.asarray(self.y0, dtype=float)
        if self.y0.shape != shape:
            raise ValueError("y0 must live on the primal mesh")
        if self.a1 is not None and len(self.a1) != self.mesh.n:
            raise ValueError(f"need {self.mesh.n} first-order coefficient fields")

    @property
    def is_linear(self) -> bool:
        return self.nonlin is None

    def coefficient_bounds(self) -> dict:
        out = {}
        if self.a1 is not None:
            out["a1_max"] = max(float(np.max(np.abs(a))) for a in self.a1)
        if self.a2 is not None:
            out["a2_max"] = float(np.max(np.abs(self.a2)))
        return out


class ImplicitOperator:
    """Shared factorization of S = I - dt*L_gamma plus the explicit pieces."""

    def __init__(self, problem: ForwardProblem, dt: float):
        mesh = problem.mesh
        self.mesh = mesh
        self.dt = dt
        self.shape = mesh.shape(mesh.extents_primal())
        self.ndof = int(np.prod(self.shape))
        lap = msh.laplacian_matrix(mesh, problem.gamma)
        self.S = (sp.identity(self.ndof, format="csr") - dt * lap).tocsc()
        self._lu = spla.splu(self.S)
        self.first_order = None
        if problem.a1 is not None or problem.a2 is not None:
            op = sp.csr_matrix((self.ndof, self.ndof))
            if problem.a1 is not None:
                for i in range(1, mesh.n + 1):
                    C = msh.centered_gradient_matrix(mesh, i)
                    op = op + sp.diags(problem.a1[i - 1].ravel()) @ C
            if problem.a2 is not None:
                op = op + sp.diags(problem.a2.ravel())
            self.first_order = op.tocsr()
            self.first_order_adj = self.first_order.T.tocsr()

    def solve(self, rhs: np.ndarray) -> np.ndarray:
        """S^{-1} rhs for rhs of shape (..., ndof); checks the residual contract."""
        flat = rhs.reshape(-1, self.ndof)
        out = self._lu.solve(flat.T).T
        if not np.all(np.isfinite(out)):
            raise SolveError("implicit solve produced non-finite values")
        res = flat - out @ self.S.T
        rnorm = np.linalg.norm(res, axis=1)
        bnorm = np.maximum(np.linalg.norm(flat, axis=1), 1e-300)
        worst = float(np.max(rnorm / bnorm, initial=0.0))
        if worst > SOLVE_RESIDUAL_TOL:
            raise SolveError(
                f"implicit solve residual {worst:.3e} exceeds {SOLVE_RESIDUAL_TOL}"
            )
        return out.reshape(rhs.shape)

    def drift_apply(self, y_flat: np.ndarray) -> np.ndarray:
        if self.first_order is None:
            return np.zeros_like(y_flat)
        return y_flat @ self.first_order.T

    def drift_apply_adjoint(self, z_flat: np.ndarray) -> np.ndarray:
        if self.first_order is None:
            return np.zeros_like(z_flat)
        return z_flat @ self.first_order_adj.T


def _gradient_components(mesh: msh.MeshSpec, y_flat: np.ndarray) -> tuple:
    """Discrete gradient (A_i D_i y) of zero-extended states, vectorized."""
    shape = (y_flat.shape[0],) + mesh.shape(mesh.extents_primal())
    y = y_flat.reshape(shape)
    comps = []
    h2 = 2.0 * mesh.h
    for ax in range(mesh.n):
        g = np.zeros_like(y)
        sl_c = [slice(None)] * (mesh.n + 1)
        sl_p = [slice(None)] * (mesh.n + 1)
        sl_m = [slice(None)] * (mesh.n + 1)
        sl_c[ax + 1] = slice(1, -1)
        sl_p[ax + 1] = slice(2, None)
        sl_m[ax + 1] = slice(0, -2)
        g[tuple(sl_c)] = (y[tuple(sl_p)] - y[tuple(sl_m)]) / h2
        edge_lo = [slice(None)] * (mesh.n + 1)
        edge_lo[ax + 1] = 0
        edge_hi = [slice(None)] * (mesh.n + 1)
        edge_hi[ax + 1] = -1
        nxt = [slice(None)] * (mesh.n + 1)
        nxt[ax + 1] = 1
        prv = [slice(None)] * (mesh.n + 1)
        prv[ax + 1] = -2
        g[tuple(edge_lo)] = y[tuple(nxt)] / h2  # boundary value is zero
        g[tuple(edge_hi)] = -y[tuple(prv)] / h2
        comps.append(g.reshape(y_flat.shape))
    return tuple(comps)


def step(
    y: np.ndarray,
    t: float,
    problem: ForwardProblem,
    op: ImplicitOperator,
    u: np.ndarray | None = None,
    U: np.ndarray | None = None,
    v: np.ndarray | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Advance one node's state to its two children (+sqrt(dt), -sqrt(dt))."""
    mesh = problem.mesh
    flat = y.reshape(1, -1)
    dt = op.dt
    drift = op.drift_apply(flat)
    if problem.nonlin is not None:
        pts = mesh.points(mesh.extents_primal())
        grads = _gradient_components(mesh, flat)
        gshape = [g.reshape(y.shape) for g in grads]
        drift = drift + np.asarray(
            problem.nonlin.F1(t, pts, y, tuple(gshape)), dtype=float
        ).reshape(1, -1)
    if v is not None:
        drift = drift + v.reshape(1, -1)
    if u is not None:
        drift = drift + (problem.control_mask * u.reshape(y.shape)).reshape(1, -1)
    diffusion = np.zeros_like(flat)
    if problem.nonlin is not None and problem.nonlin.F2 is not None:
        pts = mesh.points(mesh.extents_primal())
        grads = _gradient_components(mesh, flat)
        gshape = [g.reshape(y.shape) for g in grads]
        diffusion = diffusion + np.asarray(
            problem.nonlin.F2(t, pts, y, tuple(gshape)), dtype=float
        ).reshape(1, -1)
    if U is not None:
        diffusion = diffusion + U.reshape(1, -1)
    sq = np.sqrt(dt)
    rhs_plus = flat + dt * drift + sq * diffusion
    rhs_minus = flat + dt * drift - sq * diffusion
    both = op.solve(np.vstack([rhs_plus, rhs_minus]))
    return both[0].reshape(y.shape), both[1].reshape(y.shape)


@dataclass
class SolveReport:
    terminal_l2: float
    weighted_state: float | None
    h1_trace: float | None
    gates: dict = field(default_factory=dict)
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        out = {
            "terminal_l2": self.terminal_l2,
            "weighted_state": self.weighted_state,
            "h1_trace": self.h1_trace,
        }
        out.update({f"gate::{k}": v for k, v in self.gates.items()})
        out.update(self.extra)
        return out


def _level_step(
    problem: ForwardProblem,
    op: ImplicitOperator,
    tree: scn.ScenarioTree,
    k: int,
    Y: np.ndarray,
    u_k: np.ndarray | None,
    U_k: np.ndarray | None,
    v_k: np.ndarray | None,
) -> np.ndarray:
    """Vectorized step of all level-k nodes to level k+1."""
    mesh = problem.mesh
    dt, sq = op.dt, np.sqrt(op.dt)
    t = tree.t(k)
    flat = Y.reshape(Y.shape[0], -1)
    drift = op.drift_apply(flat)
    if problem.nonlin is not None:
        pts = mesh.points(mesh.extents_primal())
        grads = _gradient_components(mesh, flat)
        a = flat.reshape(Y.shape)
        b = tuple(g.reshape(Y.shape) for g in grads)
        drift = drift + np.asarray(
            problem.nonlin.F1(t, pts, a, b), dtype=float
        ).reshape(flat.shape)
    if v_k is not None:
        drift = drift + v_k.reshape(flat.shape)
    if u_k is not None:
        masked = problem.control_mask * u_k.reshape(Y.shape)
        drift = drift + masked.reshape(flat.shape)
    diffusion = np.zeros_like(flat)
    if problem.nonlin is not None and problem.nonlin.F2 is not None:
        pts = mesh.points(mesh.extents_primal())
        grads = _gradient_components(mesh, flat)
        a = flat.reshape(Y.shape)
        b = tuple(g.reshape(Y.shape) for g in grads)
        diffusion = diffusion + np.asarray(
            problem.nonlin.F2(t, pts, a, b), dtype=float
        ).reshape(flat.shape)
    if U_k is not None:
        diffusion = diffusion + U_k.reshape(flat.shape)
    base = flat + dt * drift
    children = np.empty((2 * Y.shape[0],) + flat.shape[1:])
    children[0::2] = base + sq * diffusion
    children[1::2] = base - sq * diffusion
    out = op.solve(children)
    return out.reshape((2 * Y.shape[0],) + Y.shape[1:])


def solve_forward(
    problem: ForwardProblem,
    tree: scn.ScenarioTree,
    u: scn.AdaptedField | None = None,
    U: scn.AdaptedField | None = None,
    op: ImplicitOperator | None = None,
    weights=None,
) -> tuple[scn.AdaptedField, SolveReport]:
    """Full tree trajectory plus the standard diagnostics.

    When a CarlemanWeights instance is supplied, the report carries
    E int rho^2 |y|^2 dt and the weighted gradient trace
    sum_i E int s^-2 lam^-2 xi^-3 rho^2 |D_i y|^2 dt.
    """
    mesh = problem.mesh
    op = op or ImplicitOperator(problem, tree.dt)
    y = scn.AdaptedField.zeros(tree, mesh, mesh.extents_primal())
    y.levels[0][0] = problem.y0
    for k in range(tree.K):
        u_k = u.levels[k] if u is not None else None
        U_k = U.levels[k] if U is not None else None
        v_k = problem.v.levels[k] if problem.v is not None else None
        y.levels[k + 1] = _level_step(problem, op, tree, k, y.levels[k], u_k, U_k, v_k)
        if not np.all(np.isfinite(y.levels[k + 1])):
            raise SolveError(f"non-finite state at level {k + 1}")
    report = forward_report(y, problem, tree, weights)
    return y, report


def forward_report(
    y: scn.AdaptedField, problem: ForwardProblem, tree: scn.ScenarioTree, weights=None
) -> SolveReport:
    terminal = scn.expect_norm_sq_at(y, tree.K)
    weighted_state = None
    h1 = None
    gates = {}
    if weights is not None:
        mesh = problem.mesh
        rho2 = lambda t: weights.rho2_field(t, mesh.extents_primal())
        weighted_state = scn.space_time_expectation(y, weight_at=rho2)
        h1 = weighted_gradient_trace(y, problem, tree, weights)
        gates = weights.gate_report(mesh.h)
    report = SolveReport(
        terminal_l2=terminal,
        weighted_state=weighted_state,
        h1_trace=h1,
        gates=gates,
        extra=problem.coefficient_bounds(),
    )
    return report


def weighted_gradient_trace(
    y: scn.AdaptedField, problem: ForwardProblem, tree: scn.ScenarioTree, weights
) -> float:
    """sum_i E int_{Q_i*} s^-2 lam^-2 xi^-3 rho^2 |D_i y|^2 dt (left endpoints)."""
    mesh = problem.mesh
    lam = weights.params.lam
    total = 0.0
    hn = mesh.h**mesh.n
    for i in range(1, mesh.n + 1):
        dual_pts = mesh.points(mesh.extents_dual(i))
        xi = weights.xi_at(dual_pts)
        phi = weights.phi_at(dual_pts)
        for k in range(tree.K):
            t = tree.t(k)
            s = weights.s(t)
            w = s**-2 * lam**-2 * xi**-3 * np.exp(-2.0 * s * phi)
            lv = y.levels[k]
            dvals = _difference_on_dual(mesh, lv, i)
            total += tree.dt * hn * float((w * dvals**2).sum()) / tree.n_nodes(k)
    return total


def _difference_on_dual(mesh: msh.MeshSpec, level_vals: np.ndarray, i: int) -> np.ndarray:
    """D_i of zero-extended primal states, on the dual-i mesh, batched."""
    ax = i  # axis 0 is the node index
    padded = np.pad(
        level_vals,
        [(0, 0)] + [(1, 1) if a == ax - 1 else (0, 0) for a in range(mesh.n)],
        mode="constant",
    )
    lo = [slice(None)] * padded.ndim
    hi = [slice(None)] * padded.ndim
    lo[ax] = slice(0, -1)
    hi[ax] = slice(1, None)
    return (padded[tuple(hi)] - padded[tuple(lo)]) / mesh.h


def trajectory_csv(y: scn.AdaptedField, tree: scn.ScenarioTree, path) -> None:
    """Per-level export of E[y] and E[y^2] at every grid point."""
    with open(path, "w") as f:
        f.write("level,t,flat_index,mean,second_moment\n")
        for k in range(y.n_levels):
            mean = y.levels[k].mean(axis=0).ravel(order="F")
            second = (y.levels[k] ** 2).mean(axis=0).ravel(order="F")
            t = tree.t(k)
            for idx, (m_val, s_val) in enumerate(zip(mean, second)):
                f.write(
                    f"{k},{format(t, '.17g')},{idx},"
                    f"{format(m_val, '.17g')},{format(s_val, '.17g')}\n"
                )


def solve_forward_mc(
    problem: ForwardProblem,
    bundle: scn.PathBundle,
    u_det: Sequence[np.ndarray] | None = None,
    U_det: Sequence[np.ndarray] | None = None,
) -> dict:
    """Forward-only Monte Carlo run with deterministic (open-loop) controls.

    Returns E-statistics only; used by decay sweeps when a tree in K would be
    too coarse.  Controls, when given, are per-time-step primal arrays.
    """
    mesh = problem.mesh
    op = ImplicitOperator(problem, bundle.dt)
    inc = bundle.increments()
    n = bundle.n_paths
    Y = np.tile(problem.y0.reshape(1, -1), (n, 1))
    pts = mesh.points(mesh.extents_primal())
    for k in range(bundle.K):
        t = k * bundle.dt
        drift = op.drift_apply(Y)
        if problem.nonlin is not None:
            grads = _gradient_components(mesh, Y)
            a = Y.reshape((n,) + mesh.shape(mesh.extents_primal()))
            b = tuple(g.reshape(a.shape) for g in grads)
            drift = drift + np.asarray(problem.nonlin.F1(t, pts, a, b)).reshape(n, -1)
        if u_det is not None:
            drift = drift + (problem.control_mask * u_det[k]).ravel()[None, :]
        diffusion = np.zeros_like(Y)
        if problem.nonlin is not None and problem.nonlin.F2 is not None:
            grads = _gradient_components(mesh, Y)
            a = Y.reshape((n,) + mesh.shape(mesh.extents_primal()))
            b = tuple(g.reshape(a.shape) for g in grads)
            diffusion = diffusion + np.asarray(
                problem.nonlin.F2(t, pts, a, b)
            ).reshape(n, -1)
        if U_det is not None:
            diffusion = diffusion + U_det[k].ravel()[None, :]
        rhs = Y + bundle.dt * drift + inc[:, k : k + 1] * diffusion
        Y = op.solve(rhs)
    hn = mesh.h**mesh.n
    return {
        "terminal_l2": float(hn * np.mean(np.sum(Y**2, axis=1))),
        "terminal_mean_l2": float(hn * np.sum(np.mean(Y, axis=0) ** 2)),
        "n_paths": n,
    }
