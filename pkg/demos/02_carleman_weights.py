"""Demo 2: the Carleman weight system.

Builds the auxiliary profile psi for a control box, assembles the weight
fields xi, phi and the temporal schedule theta, and runs the stencil-ratio
checks that certify the asymptotic expansions used by the analysis.
"""

from pathlib import Path

import numpy as np

from phinull import mesh as msh
from phinull import weights as wgt

out = Path("demo_output")
out.mkdir(exist_ok=True)

mesh = msh.MeshSpec(1, 31)
psi = wgt.build_psi(mesh, [(0.3, 0.7)])
print("psi built for control box (0.3, 0.7)")
print("  observation box G1:", psi.interior_box)
print("  measured gradient floor off G1:", psi.grad_floor)
print("  max psi:", psi.psi.values.max(), " boundary:", psi.psi.values[0], psi.psi.values[-1])

params = wgt.desk_params()
w = wgt.weight_fields(params, psi)
print(f"\nweights at lam={params.lam}, tau={params.tau}, m={params.m}, "
      f"delta={params.delta}: sigma={params.sigma:.4f}")
print(f"  phi range: [{w.phi_min:.4f}, {w.phi_max:.4f}] (negative: {w.phi_negative})")
print("  gates at h=1/32:", w.gate_report(mesh.h))

sched = wgt.ThetaSchedule(params)
print("\ntheta(0), theta(T/4), theta(T/2), theta(T):",
      [sched.value(t) for t in (0.0, 0.25, 0.5, 1.0)])
print("junction mismatches (value, d1, d2):", sched.junction_mismatch())

# r rho = 1 never fails because rho is built as e^{-s phi}, not 1/r
pt = np.array([[0.45]])
print("\nr * rho at (t=0.3, x=0.45):", w.r(0.3, pt)[0] * w.rho(0.3, pt)[0])

# exact identity and second-order remainders of the stencil calculus
ident = wgt.asymptotic_check("avg2_identity", wgt.asymptotic_range_params(),
                             [(0.2, 0.8)], Ns=(7, 15, 31))
print("\nr A^2 rho = r rho + (h^2/4) r D^2 rho residuals:", ident.residuals)
desk = wgt.WeightParams(lam=0.5, tau=1.0, m=0.5, delta=0.25)
slope = wgt.asymptotic_check("xi3_average", desk, [(0.2, 0.8)], Ns=(7, 15, 31, 63))
print(f"r^2 A(xi^-3 rho^2) - xi^-3 remainder slope: {slope.slope:.3f}")
print("  remainders:", ["%.3e" % r for r in slope.residuals])

wgt.theta_trace_csv(params, out / "theta_trace.csv", samples=100)
wgt.weight_fields_csv(w, out / "weight_fields.csv")
print(f"\nwrote {out/'theta_trace.csv'} and {out/'weight_fields.csv'}")
