"""Demo 4: penalized control synthesis and its optimality certificates.

Minimizes the weighted quadratic functional over adapted control pairs,
verifies the control characterization and the energy identity, and shows the
penalty monotonicity of the terminal norm.
"""

import numpy as np

from phinull import forward_solver as fwd
from phinull import hum_control as hum
from phinull import mesh as msh
from phinull import scenario as scn
from phinull import weights as wgt

mesh = msh.MeshSpec(1, 15)
gamma = msh.unit_coefficients(mesh)
pts = mesh.points(mesh.extents_primal())[..., 0]
mask = (pts > 0.2) & (pts < 0.8)
rng = np.random.default_rng(3)
prob = fwd.ForwardProblem(mesh=mesh, gamma=gamma, control_mask=mask,
                          y0=rng.standard_normal(15))
tree = scn.ScenarioTree(K=6, T=1.0)
params = wgt.WeightParams(lam=0.3, tau=1.5, m=0.3, delta=0.25)
w = wgt.weight_fields(params, wgt.build_psi(mesh, [(0.2, 0.8)]))

sol = hum.minimize_j(prob, tree, hum.HumConfig(weights=w, epsilon=1e-2,
                                               cg_tol=1e-10, cg_max_iter=600))
print(f"CG converged in {sol.iterations} iterations; KKT residual {sol.kkt_residual:.2e}")
print("J terms:", {k: f"{v:.4e}" for k, v in sol.j_terms.items()})

res = hum.kkt_formula_residual(sol, prob, tree, w)
print("\ncontrol characterization (independent adjoint solve):")
print(f"  u  = -s^3 lam^4 xi^3 r^2 zeta on M0 : rel error {res['u_rel']:.2e}")
print(f"  U  = -s^2 lam^2 xi^3 r^2 Zh        : rel error {res['U_rel']:.2e}")
print(f"energy identity residual: {sol.duality_residual:.2e}")

print("\npenalty monotonicity of E|y(T)|^2:")
for eps in (1.0, 1e-2, 1e-4):
    s = hum.minimize_j(prob, tree, hum.HumConfig(weights=w, epsilon=eps,
                                                 cg_tol=1e-9, cg_max_iter=600))
    print(f"  eps={eps:8.0e}: terminal={s.j_terms['terminal']:.6e}")

rep = hum.verify_linear_bounds(sol, prob, tree, w)
print("\nmeasured inequality report:")
print(f"  terminal bound: lhs={rep.terminal_lhs:.3e} "
      f"E-factor={rep.e_factor:.3e} measured C={rep.c_measured:.3e}")
print(f"  energy ratio (4 lhs terms / 2 rhs terms): {rep.energy_ratio:.4f}")
print(f"  gradient estimate ratio: {rep.gradient_ratio:.4f}")
print("  gates:", rep.gates)
