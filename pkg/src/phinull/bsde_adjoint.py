"""Exact discrete adjoint of the forward stepping map on the binomial tree.

Write one forward step as y_{k+1}^{child} = S^{-1}(y_k + dt(L1 y_k + v + u)
+ dB U) with S = I - dt L_gamma.  Splitting any adapted z over children into
its conditional mean m_k and martingale slope w_k,

    m_k = (z_{k+1,+} + z_{k+1,-}) / 2,     w_k = (z_{k+1,+} - z_{k+1,-}) / (2 sqrt(dt)),

and defining the half-step states zeta_k = S^{-1} m_k, Zh_k = S^{-1} w_k, the
backward recursion

    z_k = zeta_k + dt L1* zeta_k + dt g_k

is the exact linear-algebraic transpose of the forward sweep: for any data,

    E<y_K, z_K> - <y_0, z_0>
        = sum_k dt E[ -<y_k, g_k> + <v_k + 1_{M0} u_k, zeta_k> + <U_k, Zh_k> ]    (*)

holds as a telescoping identity, exactly.  This is the discrete Ito/duality
backbone: with terminal z_K = y_K / eps and running source g = rho^2 y it
yields the optimality system of the penalized control problem, and the
control characterization holds with the half-step pair (zeta, Zh), which
coincides with (z, Z) up to O(dt).

The stored AdjointPair keeps z (recursion states, levels 0..K), the exact
martingale component Z (w above, levels 0..K-1), and the half-step pair.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import forward_solver as fwd
from . import scenario as scn


@dataclass
class AdjointPair:
    """Backward solution: z adapted, Z its exact martingale representation.

    zeta / Z_half are the half-step fields S^{-1} E[z_{k+1}|.] and
    S^{-1} w_k entering the duality identity and the control formulas.
    """

    z: scn.AdaptedField        # levels 0..K
    Z: scn.AdaptedField        # levels 0..K-1, z_{k+1} - E[z_{k+1}|.] = Z dB
    zeta: scn.AdaptedField     # levels 0..K-1
    Z_half: scn.AdaptedField   # levels 0..K-1


def solve_backward(
    terminal: np.ndarray,
    problem: fwd.ForwardProblem,
    tree: scn.ScenarioTree,
    op: fwd.ImplicitOperator | None = None,
    running_source: Callable[[int], np.ndarray] | scn.AdaptedField | None = None,
) -> AdjointPair:
    """Backward level sweep from leaf data `terminal` (shape (2^K, *primal)).

    running_source supplies g_k in (*): either an AdaptedField or a callable
    level -> array.  The implicit factorization is shared with the forward
    solver; S is symmetric so the transpose solve is the same solve.
    """
    mesh = problem.mesh
    op = op or fwd.ImplicitOperator(problem, tree.dt)
    shape = mesh.shape(mesh.extents_primal())
    K = tree.K
    z = scn.AdaptedField.zeros(tree, mesh, mesh.extents_primal())
    Z = scn.AdaptedField.zeros(tree, mesh, mesh.extents_primal(), n_levels=K)
    zeta = scn.AdaptedField.zeros(tree, mesh, mesh.extents_primal(), n_levels=K)
    Zh = scn.AdaptedField.zeros(tree, mesh, mesh.extents_primal(), n_levels=K)
    terminal = np.asarray(terminal, dtype=float)
    if terminal.shape != (tree.n_nodes(K),) + shape:
        raise ValueError(
            f"terminal data must have shape {(tree.n_nodes(K),) + shape}"
        )
    z.levels[K] = terminal.copy()
    for k in range(K - 1, -1, -1):
        child = z.levels[k + 1]
        m = 0.5 * (child[0::2] + child[1::2])
        w = (child[0::2] - child[1::2]) / (2.0 * tree.sqrt_dt)
        Z.levels[k] = w
        flat_m = m.reshape(m.shape[0], -1)
        flat_w = w.reshape(w.shape[0], -1)
        zeta_flat = op.solve(flat_m)
        Zh.levels[k] = op.solve(flat_w).reshape(w.shape)
        zeta.levels[k] = zeta_flat.reshape(m.shape)
        zk = zeta_flat + tree.dt * op.drift_apply_adjoint(zeta_flat)
        if running_source is not None:
            g = (
                running_source.levels[k]
                if isinstance(running_source, scn.AdaptedField)
                else running_source(k)
            )
            zk = zk + tree.dt * g.reshape(zk.shape)
        z.levels[k] = zk.reshape((tree.n_nodes(k),) + shape)
    return AdjointPair(z=z, Z=Z, zeta=zeta, Z_half=Zh)


def duality_gap(
    y: scn.AdaptedField,
    pair: AdjointPair,
    problem: fwd.ForwardProblem,
    tree: scn.ScenarioTree,
    u: scn.AdaptedField | None = None,
    U: scn.AdaptedField | None = None,
    running_source: scn.AdaptedField | Callable[[int], np.ndarray] | None = None,
) -> float:
    """Relative residual of the telescoping identity (*) for arbitrary data.

    The residual is scaled by the sum of the absolute values of every term
    entering the identity, so it stays meaningful when the two sides nearly
    cancel (or both vanish).
    """
    t_term = scn.expect_inner_at(y, pair.z, tree.K)
    i_term = scn.expect_inner_at(y, pair.z, 0)
    lhs = t_term - i_term
    rhs = 0.0
    magnitude = abs(t_term) + abs(i_term)
    hn = problem.mesh.h ** problem.mesh.n
    for k in range(tree.K):
        nn = tree.n_nodes(k)
        if running_source is not None:
            g = (
                running_source.levels[k]
                if isinstance(running_source, scn.AdaptedField)
                else running_source(k)
            )
            term = tree.dt * hn * float((y.levels[k] * g).sum()) / nn
            rhs -= term
            magnitude += abs(term)
        acc = np.zeros_like(pair.zeta.levels[k])
        if problem.v is not None:
            acc = acc + problem.v.levels[k]
        if u is not None:
            acc = acc + problem.control_mask * u.levels[k]
        term = tree.dt * hn * float((acc * pair.zeta.levels[k]).sum()) / nn
        rhs += term
        magnitude += abs(term)
        if U is not None:
            term = (
                tree.dt
                * hn
                * float((U.levels[k] * pair.Z_half.levels[k]).sum())
                / nn
            )
            rhs += term
            magnitude += abs(term)
    return abs(lhs - rhs) / magnitude if magnitude > 0 else 0.0


def ito_duality_residual(
    y: scn.AdaptedField,
    pair: AdjointPair,
    problem: fwd.ForwardProblem,
    tree: scn.ScenarioTree,
    weights,
    epsilon: float,
) -> tuple[float, dict]:
    """Residual of the penalized-problem energy identity at the optimum.

    With the characterized controls the telescoping identity reads

        (1/eps) E||y(T)||^2 + E int rho^2 |y|^2 dt
          + E int_{M0} s^3 lam^4 xi^3 r^2 |zeta|^2 dt
          + E int s^2 lam^2 xi^3 r^2 |Zh|^2 dt
        = E int zeta v dt + E <y(0), z(0)>.

    Returns |LHS - RHS| / (|LHS| + |RHS|) plus the individual terms.
    """
    mesh = problem.mesh
    lam = weights.params.lam
    hn = mesh.h**mesh.n
    pts = mesh.points(mesh.extents_primal())
    xi = weights.xi_at(pts)
    phi = weights.phi_at(pts)
    mask = problem.control_mask

    terminal = scn.expect_norm_sq_at(y, tree.K) / epsilon
    state = 0.0
    obs = 0.0
    mart = 0.0
    source = 0.0
    for k in range(tree.K):
        t = tree.t(k)
        s = weights.s(t)
        r2 = np.exp(2.0 * s * phi)
        rho2 = np.exp(-2.0 * s * phi)
        nn = tree.n_nodes(k)
        state += tree.dt * hn * float((rho2 * y.levels[k] ** 2).sum()) / nn
        wq = s**3 * lam**4 * xi**3 * r2 * mask
        obs += tree.dt * hn * float((wq * pair.zeta.levels[k] ** 2).sum()) / nn
        wU = s**2 * lam**2 * xi**3 * r2
        mart += tree.dt * hn * float((wU * pair.Z_half.levels[k] ** 2).sum()) / nn
        if problem.v is not None:
            source += (
                tree.dt
                * hn
                * float((problem.v.levels[k] * pair.zeta.levels[k]).sum())
                / nn
            )
    initial = scn.expect_inner_at(y, pair.z, 0)
    lhs = terminal + state + obs + mart
    rhs = source + initial
    scale = abs(lhs) + abs(rhs)
    residual = abs(lhs - rhs) / scale if scale > 0 else 0.0
    terms = {
        "terminal_over_eps": terminal,
        "weighted_state": state,
        "observation": obs,
        "martingale": mart,
        "source_pairing": source,
        "initial_pairing": initial,
    }
    return residual, terms


# ---------------------------------------------------------------------------
# dense assembly helpers (small instances; used by the transpose-exactness
# tests and available for debugging)

def control_dim(problem: fwd.ForwardProblem, tree: scn.ScenarioTree) -> int:
    n_mask = int(problem.control_mask.sum())
    ndof = int(np.prod(problem.mesh.shape(problem.mesh.extents_primal())))
    return sum(tree.n_nodes(k) * (n_mask + ndof) for k in range(tree.K))


def assemble_forward_matrix(
    problem: fwd.ForwardProblem, tree: scn.ScenarioTree
) -> np.ndarray:
    """Dense matrix of (u, U) -> (y_0..y_{K-1}, y_K) in weighted coordinates.

    Control coordinates carry sqrt(dt 2^{-k} h^n), state coordinates
    sqrt(dt 2^{-k} h^n) for running levels and sqrt(2^{-K} h^n) for the
    terminal block, so the backward map in the same coordinates is exactly
    the transpose.
    """
    mesh = problem.mesh
    ndof = int(np.prod(mesh.shape(mesh.extents_primal())))
    mask_idx = np.flatnonzero(problem.control_mask.ravel())
    op = fwd.ImplicitOperator(problem, tree.dt)
    hn = mesh.h**mesh.n

    def run(u_field, U_field):
        prob = fwd.ForwardProblem(
            mesh=mesh, gamma=problem.gamma, control_mask=problem.control_mask,
            y0=np.zeros_like(problem.y0), T=problem.T,
            a1=problem.a1, a2=problem.a2, v=None, nonlin=None,
        )
        y, _ = fwd.solve_forward(prob, tree, u=u_field, U=U_field, op=op)
        return y

    cols = []
    for k in range(tree.K):
        wk = np.sqrt(tree.dt * hn / tree.n_nodes(k))
        for node in range(tree.n_nodes(k)):
            for which, idx_set in (("u", mask_idx), ("U", np.arange(ndof))):
                for flat_idx in idx_set:
                    u_f = scn.AdaptedField.zeros(
                        tree, mesh, mesh.extents_primal(), n_levels=tree.K
                    )
                    U_f = scn.AdaptedField.zeros(
                        tree, mesh, mesh.extents_primal(), n_levels=tree.K
                    )
                    target = u_f if which == "u" else U_f
                    lvl = target.levels[k].reshape(tree.n_nodes(k), -1)
                    lvl[node, flat_idx] = 1.0 / wk
                    y = run(u_f, U_f)
                    col = []
                    for kk in range(tree.K):
                        wy = np.sqrt(tree.dt * hn / tree.n_nodes(kk))
                        col.append(wy * y.levels[kk].reshape(-1))
                    wT = np.sqrt(hn / tree.n_nodes(tree.K))
                    col.append(wT * y.levels[tree.K].reshape(-1))
                    cols.append(np.concatenate(col))
    return np.stack(cols, axis=1)


def assemble_backward_matrix(
    problem: fwd.ForwardProblem, tree: scn.ScenarioTree
) -> np.ndarray:
    """Dense matrix of (q_0..q_{K-1}, z_T) -> (zeta, Z_half), same coordinates.

    The duality (*) with running source g = +q gives
    sum_k dt E<y_k, q_k> + E<y_K, z_T> = sum_k dt E[<1u, zeta> + <U, Zh>]
    for homogeneous forward data, i.e. this map is the transpose of the
    forward matrix above.
    """
    mesh = problem.mesh
    ndof = int(np.prod(mesh.shape(mesh.extents_primal())))
    mask_idx = np.flatnonzero(problem.control_mask.ravel())
    op = fwd.ImplicitOperator(problem, tree.dt)
    hn = mesh.h**mesh.n

    def run(q_levels, zT):
        src = scn.AdaptedField(tree, q_levels, mesh, mesh.extents_primal())
        return solve_backward(zT, problem, tree, op=op, running_source=src)

    rows = []
    state_dims = [(k, tree.n_nodes(k)) for k in range(tree.K)]
    for k, nnodes in state_dims:
        wy = np.sqrt(tree.dt * hn / nnodes)
        for node in range(nnodes):
            for flat_idx in range(ndof):
                q_levels = [
                    np.zeros((tree.n_nodes(kk),) + mesh.shape(mesh.extents_primal()))
                    for kk in range(tree.K)
                ]
                q_levels[k].reshape(nnodes, -1)[node, flat_idx] = 1.0 / wy
                zT = np.zeros((tree.n_nodes(tree.K),) + mesh.shape(mesh.extents_primal()))
                pair = run(q_levels, zT)
                rows.append(_pack_adjoint(pair, problem, tree, mask_idx))
    wT = np.sqrt(hn / tree.n_nodes(tree.K))
    for node in range(tree.n_nodes(tree.K)):
        for flat_idx in range(ndof):
            q_levels = [
                np.zeros((tree.n_nodes(kk),) + mesh.shape(mesh.extents_primal()))
                for kk in range(tree.K)
            ]
            zT = np.zeros((tree.n_nodes(tree.K),) + mesh.shape(mesh.extents_primal()))
            zT.reshape(tree.n_nodes(tree.K), -1)[node, flat_idx] = 1.0 / wT
            pair = run(q_levels, zT)
            rows.append(_pack_adjoint(pair, problem, tree, mask_idx))
    # column c, input s convention: entry [c, s] is output c for basis input s
    return np.stack(rows, axis=1)


def _pack_adjoint(pair, problem, tree, mask_idx):
    mesh = problem.mesh
    hn = mesh.h**mesh.n
    out = []
    for k in range(tree.K):
        wk = np.sqrt(tree.dt * hn / tree.n_nodes(k))
        zeta = pair.zeta.levels[k].reshape(tree.n_nodes(k), -1)
        zh = pair.Z_half.levels[k].reshape(tree.n_nodes(k), -1)
        for node in range(tree.n_nodes(k)):
            out.append(wk * zeta[node, mask_idx])
            out.append(wk * zh[node, :])
    return np.concatenate(out)
