"""Ball projection and the conditional pull-back on a single parameter vector.

Run: python walkthroughs/01_projection_basics.py
"""

import numpy as np

from proxtune.optim import Mode, ProximityPolicy, deviation_ratio, project_l2_ball, proximal_step, spd_condition
from proxtune.param_store import ParameterGroup

rng = np.random.default_rng(0)
theta0 = rng.normal(size=6)

# A hard ball: anything farther than gamma from theta0 is pulled back radially.
far = theta0 + 3.0 * rng.normal(size=6)
print("radius before projection:", np.linalg.norm(far - theta0))
print("radius after projection (gamma=1):", np.linalg.norm(project_l2_ball(far, theta0, 1.0) - theta0))

# The conditional variant checks two things. The sign of c_t = -g.(theta - theta0)
# must be negative, and the proposed radius must have grown. Adam proposals
# are not plain gradient steps (momentum, per-coordinate scaling), so a step
# can move outward even while the current gradient points along the
# displacement. That is the case the pull-back targets.
group = ParameterGroup("w", theta0 + 0.2 * rng.normal(size=6), 1, snapshot=theta0)
grad = group.displacement()  # c_t < 0
cases = {
    "proposal moves inward": group.values - 0.5 * grad,
    "proposal moves outward": group.values + 0.5 * grad,
    "outward, condition positive": group.values + 0.5 * grad,
}
for label, proposed in cases.items():
    g = -grad if "positive" in label else grad
    c = spd_condition(g, group.values, theta0)
    prev, new_r = np.linalg.norm(group.values - theta0), np.linalg.norm(proposed - theta0)
    out, step = proximal_step(group, g, proposed, 1.0, ProximityPolicy(Mode.SPD, lam=1.0))
    print(f"\n{label}: c_t={c:+.4f}  ratio={deviation_ratio(new_r, prev):.4f}  projected={step.projected}")
    print(f"  radius {prev:.4f} -> proposed {new_r:.4f} -> kept {np.linalg.norm(out - theta0):.4f}")

# With lambda=1 a projected step lands exactly back on the previous radius.
# Smaller lambda lets part of the growth through; lambda=0 is plain Adam.
proposed = cases["proposal moves outward"]
print()
for lam in (0.0, 0.25, 0.5, 1.0):
    out, _ = proximal_step(group, grad, proposed, lam, ProximityPolicy(Mode.SPD, lam=lam))
    print(f"lambda={lam:<5} kept radius {np.linalg.norm(out - theta0):.4f}")
