"""Fields, norms and the deterministic flow of the membrane model.

Run with ``python demos/01_fields_and_flows.py``.  Every field on the axon
(0, 1) is stored as its first K sine coefficients.  Between channel jumps
the potential follows the heat equation plus an affine current, and that
flow has a closed form we can compare against a Runge-Kutta reference.
"""
import numpy as np

from pdmpctl.hodgkin_huxley import ChannelState as S, HHModel, HHParams
from pdmpctl.pdmp import integrate_flow
from pdmpctl.spectral import NormKind, eval_pointwise, norm, project, semigroup_apply

# A tent-shaped initial potential, projected onto 32 sine modes.
v0 = project(lambda z: 40.0 * np.minimum(z, 1 - z), 32)
print("tent field, first coefficients:", np.round(v0.coeffs[:4], 4))
for kind in NormKind:
    print(f"  {kind.name:7s} norm = {norm(v0, kind):.4f}")

# Pure diffusion damps high modes first, so the profile rounds off.
z = np.linspace(0, 1, 5)
for r in (0.0, 0.01, 0.1):
    print(f"heat semigroup r={r:<5}: v(z) =", np.round(eval_pointwise(semigroup_apply(v0, r).coeffs, z), 3))

# The membrane flow with every potassium and sodium channel open.
hh = HHModel.build(HHParams())
model = hh.to_pdmp()
open_all = (S.n4, S.m3h1, S.O1)
print("\nelectrode Lipschitz constants:", np.round(hh.lipschitz, 3))
exact = integrate_flow(model, v0.coeffs, open_all, 0.0, 1.0, method="expm")[1][-1]
ref = integrate_flow(model, v0.coeffs, open_all, 0.0, 1.0, substeps=20000, method="rk4")[1][-1]
print("closed form vs RK4 after 1 ms, L2 gap:", f"{np.linalg.norm(exact - ref):.2e}")
print("sensed potentials at the three sites (mV):", np.round(hh.sensed(exact), 2))
print("they relax toward the reversal potentials of the open channels,",
      f"which stay inside [{hh.params.V_minus}, {hh.params.V_plus}] mV")
