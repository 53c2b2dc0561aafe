"""
Moments under P and under the constructed measure
=================================================

Under ``P`` the exponential moment of ``|S_2|`` in the two-jump example is
dominated by ``exp(2N)``. The staged construction sizes each stage
tolerance from a geometric schedule; on this example the tolerances end
up so small that no damping pattern is admissible and ``Q = P``. A single
stage with the full tolerance does damp the smallest-``u`` atoms.

Run:  python demos/04_divergence_sweep.py
"""

import numpy as np

from emm import ExampleSpec, build_example_tree, divergence_sweep, stage_density

rows = divergence_sweep("two_jump", [16, 32, 64, 128, 256], 0.5)
print("   N   log E_P e^|S2|   log E_Q e^|S2|     sup Z")
for r in rows:
    print(f"{r['N']:4d}   {r['log_EP_exp_S2']:14.4f}   {r['log_EQ_exp_S2']:14.4f}   {r['sup_Z']:.6f}")

ex = build_example_tree(ExampleSpec("two_jump", 64))
tree = ex.tree
st = stage_density(tree, ex.S, 0.5, 2, np.abs(ex.S[tree.leaves, 0]))
damped = {a: v for a, v in st.atoms.items() if v["damped_children"]}
print(f"\nsingle stage at N=64: tolerance {st.eps_tilde:.4f}, log E[Y] {st.log_target:.3f}")
print("under P it is", round(rows[2]["log_EP_exp_S2"], 3))
print("damped atoms:", damped)
