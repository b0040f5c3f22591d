"""Tensor-product meshes on (0,1)^n and the half-step average/difference calculus.

The primal mesh M holds the N^n interior points (i_1 h, ..., i_n h) with
h = 1/(N+1).  Shifting by h/2 along direction i gives the dual mesh M_i*
(N+1 points along axis i), and appending the two boundary layers gives the
closure (N+2 points per axis).  The operators

    A_i u(x) = (u(x + h/2 e_i) + u(x - h/2 e_i)) / 2
    D_i u(x) = (u(x + h/2 e_i) - u(x - h/2 e_i)) / h

map closure -> dual-i and dual-i -> primal along axis i, leaving the other
axes untouched.  A grid function therefore carries one extent per axis
("interior" | "dual" | "closed"); the familiar tags are the special cases

    primal   all axes interior
    dual-i   axis i dual, the rest interior
    closure  all axes closed

Mixed extents arise transiently when operators are chained (e.g. the
discrete gradient A_i D_i, or double-dual commutation checks) and are valid
inputs everywhere.

Quadrature is the plain h^n sum on every mesh, including the two
boundary-adjacent dual cells; this keeps summation by parts exact:

    <D_i u, v>_{M_i*} + <u, D_i v>_{M} = 0   for u with Dirichlet zeros.

Indexing is lexicographic with direction 1 fastest in flat serializations
(numpy arrays use axis k for direction k+1 and are flattened Fortran-order
when written to disk).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import scipy.sparse as sp

from .errors import DirectionError, MeshTagError

INTERIOR = "interior"
DUAL = "dual"
CLOSED = "closed"

_EXTENTS = (INTERIOR, DUAL, CLOSED)


@dataclass(frozen=True)
class MeshSpec:
    """Uniform tensor mesh on (0,1)^n with N interior points per axis."""

    n: int
    N: int

    def __post_init__(self):
        if self.n < 1:
            raise ValueError(f"spatial dimension must be >= 1, got {self.n}")
        if self.N < 1:
            raise ValueError(f"interior points per axis must be >= 1, got {self.N}")

    @property
    def h(self) -> float:
        # h is derived so that h*(N+1) == 1 holds exactly in floating point
        # whenever 1/(N+1) is representable; N is the stored quantity.
        return 1.0 / (self.N + 1)

    def axis_size(self, extent: str) -> int:
        if extent == INTERIOR:
            return self.N
        if extent == DUAL:
            return self.N + 1
        if extent == CLOSED:
            return self.N + 2
        raise MeshTagError(f"unknown axis extent {extent!r}")

    def axis_coords(self, extent: str) -> np.ndarray:
        h = self.h
        if extent == INTERIOR:
            return h * np.arange(1, self.N + 1)
        if extent == DUAL:
            return h * (np.arange(0, self.N + 1) + 0.5)
        if extent == CLOSED:
            return h * np.arange(0, self.N + 2)
        raise MeshTagError(f"unknown axis extent {extent!r}")

    def shape(self, extents: Sequence[str]) -> tuple[int, ...]:
        self._check_extents(extents)
        return tuple(self.axis_size(e) for e in extents)

    def points(self, extents: Sequence[str]) -> np.ndarray:
        """Coordinate array of shape (*shape, n)."""
        self._check_extents(extents)
        axes = [self.axis_coords(e) for e in extents]
        grids = np.meshgrid(*axes, indexing="ij")
        return np.stack(grids, axis=-1)

    def extents_primal(self) -> tuple[str, ...]:
        return (INTERIOR,) * self.n

    def extents_closure(self) -> tuple[str, ...]:
        return (CLOSED,) * self.n

    def extents_dual(self, i: int) -> tuple[str, ...]:
        ax = self._axis(i)
        return tuple(DUAL if k == ax else INTERIOR for k in range(self.n))

    def _axis(self, i: int) -> int:
        if not 1 <= i <= self.n:
            raise DirectionError(f"direction must be in 1..{self.n}, got {i}")
        return i - 1

    def _check_extents(self, extents: Sequence[str]) -> None:
        if len(extents) != self.n:
            raise MeshTagError(
                f"expected {self.n} axis extents, got {len(extents)}"
            )
        for e in extents:
            if e not in _EXTENTS:
                raise MeshTagError(f"unknown axis extent {e!r}")


@dataclass
class GridFunction:
    """Real values indexed by a mesh; the universal state/weight container."""

    mesh: MeshSpec
    values: np.ndarray
    extents: tuple[str, ...]

    def __post_init__(self):
        self.extents = tuple(self.extents)
        self.values = np.asarray(self.values, dtype=float)
        expected = self.mesh.shape(self.extents)
        if self.values.shape != expected:
            raise MeshTagError(
                f"values shape {self.values.shape} does not match extents "
                f"{self.extents} (expected {expected})"
            )

    @property
    def mesh_tag(self) -> str:
        ext = self.extents
        if all(e == INTERIOR for e in ext):
            return "primal"
        if all(e == CLOSED for e in ext):
            return "closure"
        dual_axes = [k for k, e in enumerate(ext) if e == DUAL]
        if len(dual_axes) == 1 and all(
            e == INTERIOR for k, e in enumerate(ext) if k != dual_axes[0]
        ):
            return f"dual-{dual_axes[0] + 1}"
        return "mixed(" + ",".join(ext) + ")"

    def copy(self) -> "GridFunction":
        return GridFunction(self.mesh, self.values.copy(), self.extents)

    def boundary_is_zero(self, tol: float = 0.0) -> bool:
        """True if every closed-axis boundary layer vanishes (|.| <= tol)."""
        for ax, e in enumerate(self.extents):
            if e != CLOSED:
                continue
            for idx in (0, -1):
                sl = [slice(None)] * self.values.ndim
                sl[ax] = idx
                if np.max(np.abs(self.values[tuple(sl)]), initial=0.0) > tol:
                    return False
        return True


def zeros(mesh: MeshSpec, extents: Sequence[str]) -> GridFunction:
    return GridFunction(mesh, np.zeros(mesh.shape(extents)), tuple(extents))


def from_callable(mesh: MeshSpec, fn: Callable, extents: Sequence[str]) -> GridFunction:
    """Sample fn(points)->array at the mesh points of the given extents."""
    pts = mesh.points(extents)
    vals = np.asarray(fn(pts), dtype=float)
    return GridFunction(mesh, vals, tuple(extents))


def _shift_extent(extent: str, op: str) -> str:
    if extent == CLOSED:
        return DUAL
    if extent == DUAL:
        return INTERIOR
    raise MeshTagError(
        f"cannot apply {op} along an axis with extent {extent!r}; "
        "need 'closed' or 'dual' values"
    )


def average(u: GridFunction, i: int) -> GridFunction:
    """Midpoint average A_i along direction i (half-step toward the finer mesh)."""
    ax = u.mesh._axis(i)
    new_extent = _shift_extent(u.extents[ax], "average")
    lo = [slice(None)] * u.values.ndim
    hi = [slice(None)] * u.values.ndim
    lo[ax] = slice(0, -1)
    hi[ax] = slice(1, None)
    vals = 0.5 * (u.values[tuple(lo)] + u.values[tuple(hi)])
    extents = list(u.extents)
    extents[ax] = new_extent
    return GridFunction(u.mesh, vals, tuple(extents))


def difference(u: GridFunction, i: int) -> GridFunction:
    """Half-step difference D_i along direction i."""
    ax = u.mesh._axis(i)
    new_extent = _shift_extent(u.extents[ax], "difference")
    lo = [slice(None)] * u.values.ndim
    hi = [slice(None)] * u.values.ndim
    lo[ax] = slice(0, -1)
    hi[ax] = slice(1, None)
    vals = (u.values[tuple(hi)] - u.values[tuple(lo)]) / u.mesh.h
    extents = list(u.extents)
    extents[ax] = new_extent
    return GridFunction(u.mesh, vals, tuple(extents))


def interior_part(u: GridFunction) -> GridFunction:
    """Restrict every closed axis to its interior slice."""
    sl = []
    extents = []
    for e in u.extents:
        if e == CLOSED:
            sl.append(slice(1, -1))
            extents.append(INTERIOR)
        else:
            sl.append(slice(None))
            extents.append(e)
    return GridFunction(u.mesh, u.values[tuple(sl)], tuple(extents))


def dirichlet_extend(u: GridFunction) -> GridFunction:
    """Extend every interior axis to the closure by padding zeros."""
    pad = []
    extents = []
    for e in u.extents:
        if e == INTERIOR:
            pad.append((1, 1))
            extents.append(CLOSED)
        else:
            pad.append((0, 0))
            extents.append(e)
    vals = np.pad(u.values, pad, mode="constant")
    return GridFunction(u.mesh, vals, tuple(extents))


def l2h_inner(u: GridFunction, v: GridFunction) -> float:
    """h^n-weighted inner product; both functions must share mesh and extents."""
    if u.mesh != v.mesh or u.extents != v.extents:
        raise MeshTagError(
            f"inner product needs matching meshes/extents, got "
            f"{u.mesh_tag} vs {v.mesh_tag}"
        )
    return float(u.mesh.h ** u.mesh.n * np.vdot(u.values, v.values))


def l2h_norm_sq(u: GridFunction) -> float:
    return l2h_inner(u, u)


def discrete_gradient(y: GridFunction) -> list[GridFunction]:
    """Components A_i(D_i y) of the discrete gradient, each on the primal mesh."""
    comps = []
    for i in range(1, y.mesh.n + 1):
        comps.append(interior_part(average(difference(y, i), i)))
    return comps


def div_form_laplacian(y: GridFunction, gamma: "CoefficientField") -> GridFunction:
    """Divergence-form operator sum_i D_i(gamma_i D_i y) on the primal mesh."""
    if any(e != CLOSED for e in y.extents):
        raise MeshTagError("div_form_laplacian expects a closure grid function")
    mesh = y.mesh
    out = np.zeros(mesh.shape(mesh.extents_primal()))
    for i in range(1, mesh.n + 1):
        d = difference(y, i)
        g = gamma.on_extents(i, d.extents)
        flux = GridFunction(mesh, g * d.values, d.extents)
        out += interior_part(difference(flux, i)).values
    return GridFunction(mesh, out, mesh.extents_primal())


def sbp_residual(u: GridFunction, v: GridFunction, i: int) -> float:
    """Relative residual of <D_i u, v>_{M_i*} + <u, D_i v>_M for Dirichlet u.

    u lives on the closure with zero boundary values, v on the dual-i mesh.
    The identity is exact up to roundoff, so the result should sit at the
    1e-16..1e-13 level for any inputs.
    """
    mesh = u.mesh
    if v.extents != mesh.extents_dual(i):
        raise MeshTagError(f"v must live on dual-{i}, got {v.mesh_tag}")
    if not u.boundary_is_zero():
        raise MeshTagError("sbp_residual needs u with exact Dirichlet zeros")
    du = difference(u, i)
    # restrict the non-i closed axes of D_i u down to the standard dual-i mesh
    du_std = interior_part(du)
    lhs = l2h_inner(du_std, v)
    rhs = l2h_inner(interior_part(u), difference(v, i))
    scale = abs(lhs) + abs(rhs)
    if scale == 0.0:
        return 0.0
    return abs(lhs + rhs) / scale


@dataclass
class CoefficientField:
    """Diffusion coefficients gamma_i sampled from user-supplied analytic closures.

    funcs[i-1](points) evaluates gamma_i at arbitrary coordinates; grad_funcs,
    when given, evaluates the spatial gradient analytically (otherwise reg()
    falls back to centered differences of the closure).
    """

    mesh: MeshSpec
    funcs: Sequence[Callable]
    gamma0: float
    grad_funcs: Sequence[Callable] | None = None
    _dual_cache: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if len(self.funcs) != self.mesh.n:
            raise ValueError(
                f"need {self.mesh.n} coefficient closures, got {len(self.funcs)}"
            )
        reg = self.reg()
        if not reg <= self.gamma0:
            raise ValueError(
                f"measured reg(gamma)={reg:.6g} exceeds declared bound "
                f"gamma0={self.gamma0:.6g}"
            )

    def on_extents(self, i: int, extents: Sequence[str]) -> np.ndarray:
        key = (i, tuple(extents))
        if key not in self._dual_cache:
            pts = self.mesh.points(extents)
            vals = np.asarray(self.funcs[i - 1](pts), dtype=float)
            vals = np.broadcast_to(vals, self.mesh.shape(extents)).copy()
            if np.any(vals <= 0.0):
                raise ValueError(f"gamma_{i} must be positive on the mesh")
            self._dual_cache[key] = vals
        return self._dual_cache[key]

    def on_dual(self, i: int) -> GridFunction:
        extents = self.mesh.extents_dual(i)
        return GridFunction(self.mesh, self.on_extents(i, extents), extents)

    def at(self, i: int, pts: np.ndarray) -> np.ndarray:
        return np.broadcast_to(
            np.asarray(self.funcs[i - 1](pts), dtype=float), pts.shape[:-1]
        )

    def reg(self) -> float:
        """Measured sup_i sup_x (gamma_i + 1/gamma_i + |grad gamma_i|^2)."""
        worst = 0.0
        h = self.mesh.h
        for i in range(1, self.mesh.n + 1):
            extents = self.mesh.extents_dual(i)
            pts = self.mesh.points(extents)
            g = self.at(i, pts)
            if self.grad_funcs is not None:
                grad = np.asarray(self.grad_funcs[i - 1](pts), dtype=float)
                grad_sq = np.sum(
                    np.broadcast_to(grad, pts.shape) ** 2, axis=-1
                )
            else:
                grad_sq = np.zeros_like(g)
                for k in range(self.mesh.n):
                    e = np.zeros(self.mesh.n)
                    e[k] = h
                    dk = (self.at(i, pts + e) - self.at(i, pts - e)) / (2 * h)
                    grad_sq += dk**2
            worst = max(worst, float(np.max(g + 1.0 / g + grad_sq)))
        return worst


def unit_coefficients(mesh: MeshSpec, gamma0: float = 2.0) -> CoefficientField:
    """gamma_i == 1 in every direction (reg = 2)."""
    ones = [lambda pts: np.ones(pts.shape[:-1]) for _ in range(mesh.n)]
    return CoefficientField(mesh, ones, gamma0)


def laplacian_matrix(mesh: MeshSpec, gamma: CoefficientField) -> sp.csr_matrix:
    """Sparse matrix of sum_i D_i(gamma_i D_i .) on primal DOFs (C-order flat).

    Symmetric negative definite for positive gamma; assembled once per
    (mesh, gamma) and shared by the time steppers.
    """
    shape = mesh.shape(mesh.extents_primal())
    ndof = int(np.prod(shape))
    h2 = mesh.h**2
    rows, cols, vals = [], [], []
    idx = np.arange(ndof).reshape(shape)
    for i in range(1, mesh.n + 1):
        ax = i - 1
        extents = list(mesh.extents_primal())
        extents[ax] = DUAL
        g = gamma.on_extents(i, extents)  # dual along ax, interior elsewhere
        sl_lo = [slice(None)] * mesh.n
        sl_hi = [slice(None)] * mesh.n
        sl_lo[ax] = slice(0, -1)
        sl_hi[ax] = slice(1, None)
        g_minus = g[tuple(sl_lo)]  # gamma at x - h/2
        g_plus = g[tuple(sl_hi)]  # gamma at x + h/2
        diag = -(g_plus + g_minus) / h2
        rows.append(idx.ravel())
        cols.append(idx.ravel())
        vals.append(diag.ravel())
        # off-diagonal couplings to the interior neighbor in +/- direction
        left = [slice(None)] * mesh.n
        right = [slice(None)] * mesh.n
        left[ax] = slice(0, -1)
        right[ax] = slice(1, None)
        rows.append(idx[tuple(left)].ravel())
        cols.append(idx[tuple(right)].ravel())
        vals.append((g_plus[tuple(left)] / h2).ravel())
        rows.append(idx[tuple(right)].ravel())
        cols.append(idx[tuple(left)].ravel())
        vals.append((g_plus[tuple(left)] / h2).ravel())
    mat = sp.coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(ndof, ndof),
    )
    return mat.tocsr()


def centered_gradient_matrix(mesh: MeshSpec, i: int) -> sp.csr_matrix:
    """Sparse matrix of A_i D_i (centered difference over 2h) on primal DOFs."""
    shape = mesh.shape(mesh.extents_primal())
    ndof = int(np.prod(shape))
    ax = mesh._axis(i)
    idx = np.arange(ndof).reshape(shape)
    rows, cols, vals = [], [], []
    left = [slice(None)] * mesh.n
    right = [slice(None)] * mesh.n
    left[ax] = slice(0, -1)
    right[ax] = slice(1, None)
    c = 1.0 / (2.0 * mesh.h)
    rows.append(idx[tuple(left)].ravel())
    cols.append(idx[tuple(right)].ravel())
    vals.append(np.full(idx[tuple(left)].size, c))
    rows.append(idx[tuple(right)].ravel())
    cols.append(idx[tuple(left)].ravel())
    vals.append(np.full(idx[tuple(left)].size, -c))
    mat = sp.coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(ndof, ndof),
    )
    return mat.tocsr()


def to_csv(u: GridFunction, path) -> None:
    """Flat CSV dump: header row then one value per line, direction 1 fastest."""
    dual_axes = [k + 1 for k, e in enumerate(u.extents) if e == DUAL]
    direction = dual_axes[0] if len(dual_axes) == 1 else 0
    with open(path, "w") as f:
        f.write("mesh_tag,n,N,direction\n")
        f.write(f"{u.mesh_tag},{u.mesh.n},{u.mesh.N},{direction}\n")
        for val in u.values.ravel(order="F"):
            f.write(format(val, ".17g") + "\n")
