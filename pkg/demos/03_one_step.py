"""
One atom at a time
==================

The weights on a single atom come either from a closed-form ratio (d = 1)
or from the gradient of a convex field minimized over the unit ball
(d > 1). A nested-grid minimizer gives an independent check of the
minimum value.

Run:  python demos/03_one_step.py
"""

import numpy as np

from emm import (
    OneStepProblem,
    minimize_field,
    minimize_field_net,
    one_step_density,
    predictable_range,
    stage_barrier_parameter,
)

# a rare child with a huge moment gets damped by 1/y, the rest absorb the shift
q = [0.01, 0.495, 0.495]
w = [1.0, 1.0, -0.505 / 0.495]
p = OneStepProblem.make(q, w, log_y=[50.0, 0.0, 0.0])
res = one_step_density(p, 0.5)
print("d=1  k = 2^%d" % res.k_exp, " z =", res.z, " sum q z w =", res.residual)

# two dimensions; the moments fit under 2^5, so no child needs damping
p2 = OneStepProblem.make([0.25, 0.25, 0.5], [[1, 1], [1, -1], [-1, 0]], log_y=[3.0, 1.0, 0.5])
res2 = one_step_density(p2, 0.5)
print("d=2  k = 2^%d" % res2.k_exp, " z =", np.round(res2.z, 6), " U =", res2.U)

# gradient path against the nested nets, with one child damped by hand
R = predictable_range(p2)
eps_f = stage_barrier_parameter(0.5)
alpha = np.array([0.05, 1.0, 1.0])
g = minimize_field(p2, R, eps_f, alpha)
for n in (4, 6, 8):
    net = minimize_field_net(p2, R, eps_f, alpha, n)
    print(f"n={n}  h(net)={net.value:.8f}  h(grad)={g.value:.8f}"
          f"  gap={abs(net.value - g.value):.2e}  bound={net.lipschitz * 2.0 ** (1 - n):.2e}")
print("on sphere:", g.on_boundary, " |U| =", round(float(np.linalg.norm(g.u)), 12),
      " multiplier =", round(g.mu, 6))
