"""Demo 1: the half-step operator calculus and its exactness properties.

Walks through the tensor mesh, the average/difference operators, the
divergence-form Laplacian, and the identities the whole laboratory leans on:
summation by parts, the discrete product rule, and A_i^2 = I + (h^2/4) D_i^2.
"""

import numpy as np
import scipy.linalg

from phinull import mesh as msh

mesh = msh.MeshSpec(n=1, N=15)
print(f"mesh: n={mesh.n}, N={mesh.N}, h=1/{mesh.N + 1}={mesh.h}")
print(f"point counts: primal={mesh.N}, dual={mesh.N + 1}, closure={mesh.N + 2}")

# -- averages and differences on polynomials ---------------------------------
x2 = msh.from_callable(mesh, lambda p: p[..., 0] ** 2, mesh.extents_closure())
av = msh.average(x2, 1)
dv = msh.difference(x2, 1)
xd = mesh.points(mesh.extents_dual(1))[..., 0]
print("\nA_1(x^2) - (x^2 + h^2/4):", np.max(np.abs(av.values - xd**2 - mesh.h**2 / 4)))
print("D_1(x^2) - 2x:            ", np.max(np.abs(dv.values - 2 * xd)))

# -- summation by parts is exact under Dirichlet data ------------------------
rng = np.random.default_rng(0)
u = msh.zeros(mesh, mesh.extents_closure())
u.values[1:-1] = rng.standard_normal(mesh.N)
v = msh.GridFunction(mesh, rng.standard_normal(mesh.N + 1), mesh.extents_dual(1))
print("\nsummation-by-parts residual (random data):", msh.sbp_residual(u, v, 1))

# -- discrete product rule ----------------------------------------------------
w = msh.GridFunction(mesh, rng.standard_normal(mesh.N + 2), mesh.extents_closure())
uv = msh.GridFunction(mesh, u.values * w.values, mesh.extents_closure())
lhs = msh.average(uv, 1).values
rhs = (msh.average(u, 1).values * msh.average(w, 1).values
       + mesh.h**2 / 4 * msh.difference(u, 1).values * msh.difference(w, 1).values)
print("product rule A(uv) = AuAv + (h^2/4)DuDv:", np.max(np.abs(lhs - rhs)))

# -- the divergence-form Laplacian and its spectrum ---------------------------
gamma = msh.unit_coefficients(mesh)
k = 3
xs = mesh.points(mesh.extents_closure())[..., 0]
mode = msh.GridFunction(mesh, np.sin(k * np.pi * xs), mesh.extents_closure())
out = msh.div_form_laplacian(mode, gamma)
mu = -(4.0 / mesh.h**2) * np.sin(k * np.pi * mesh.h / 2) ** 2
print(f"\nsine mode k={k}: max |L y - mu y| =",
      np.max(np.abs(out.values - mu * msh.interior_part(mode).values)))

A = msh.laplacian_matrix(mesh, gamma).toarray()
print("assembled matrix symmetry:", np.max(np.abs(A - A.T)))
print("largest eigenvalue (must be < 0):", scipy.linalg.eigvalsh(A).max())

# -- gradient consistency ------------------------------------------------------
errs = []
for N in (7, 15, 31):
    m2 = msh.MeshSpec(2, N)
    f = msh.from_callable(
        m2, lambda p: np.sin(np.pi * p[..., 0]) * np.sin(np.pi * p[..., 1]),
        m2.extents_closure(),
    )
    g1 = msh.discrete_gradient(f)[0]
    pts = m2.points(m2.extents_primal())
    exact = np.pi * np.cos(np.pi * pts[..., 0]) * np.sin(np.pi * pts[..., 1])
    errs.append(np.max(np.abs(g1.values - exact)))
slope = np.polyfit(np.log([1 / 8, 1 / 16, 1 / 32]), np.log(errs), 1)[0]
print(f"\ndiscrete gradient error slope over N=7,15,31: {slope:.3f} (expect ~2)")
