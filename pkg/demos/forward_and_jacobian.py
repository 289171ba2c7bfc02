"""Forward solves and sensitivities on the unit disk.

Solve the smoothed p-Laplace Neumann problem for a random log-conductivity,
look at how the trace coefficients move with p, then assemble the Jacobian
at the homogeneous conductivity and compare the four parametrizations.

Run:  python demos/forward_and_jacobian.py
"""
import numpy as np

from plaplace import (
    ConductivityField,
    EnergyParams,
    assemble_jacobian,
    build_disk_mesh,
    build_partition,
    project_trace,
    sample_config,
    sample_logconductivity,
    solve_forward,
    trig_currents,
)

mesh = build_disk_mesh(128)
part = build_partition(mesh, target_cells=240)
currents = trig_currents(mesh, 8)
print(f"mesh: {mesh.n_nodes} nodes, {mesh.n_triangles} triangles, {part.n_cells} cells")

# one member of prior sample A as the target coefficient
kappa = sample_logconductivity(sample_config("A", part), 1, 0)[0]
sigma = ConductivityField.from_log(kappa, "std", part)

print("\ncos1 current, leading trace coefficients (cos1, sin1, cos2, sin2):")
for p in (1.5, 2.0, 3.0):
    u = solve_forward(sigma, EnergyParams(p, 0.0), currents[0])
    c = project_trace(u.trace(), 2)
    print(f"  p={p:3.1f}  {np.array2string(c, precision=4)}  ({u.newton_steps} Newton steps)")

# at sigma = 1 the homogeneous solution is u = x for every p
unit = ConductivityField.constant(1.0, part)
u = solve_forward(unit, EnergyParams(2.5, 0.0), currents[0])
print(f"\nsigma = 1, p = 2.5: cos1 coefficient {project_trace(u.trace(), 1)[0]:.5f}")

# Jacobians in the four parametrizations at the same base point
p = 2.5
prm = EnergyParams(p, 0.1)
J = {k: assemble_jacobian(unit, prm, currents, parametrization=k)[0] for k in ("std", "inv", "nat", "exp")}
print(f"\nJacobian shape {J['std'].shape}")
q = p / (p - 1)
for k, r in (("inv", -1.0), ("nat", -q / p), ("exp", 1.0)):
    ratio = J[k].entries[J["std"].entries != 0] / J["std"].entries[J["std"].entries != 0]
    print(f"  J_{k} / J_std = {np.median(ratio):+.4f}  (expected {1 / r:+.4f})")
