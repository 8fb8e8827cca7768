"""
Procedural robots and the unified joint space
=============================================

Every robot is a planar trunk with two or four leg chains, optionally ending
in wheels. All of them share one fixed action layout, so a single policy can
drive any of them.
"""

import numpy as np

from icloco import physics as P
from icloco.morph import CATEGORIES, N_SLOTS, kinematics_vector, sample_morphology, validate

# one robot per category, drawn from fixed seeds
robots = [sample_morphology(40 + i, cat) for i, cat in enumerate(CATEGORIES)]
for spec in robots:
    legs = len(spec.chains)
    wheels = sum(c.wheel is not None for c in spec.chains)
    print(f"{spec.category:<18} legs={legs} wheels={wheels} trunk={spec.trunk_length:.2f} m "
          f"mass={spec.trunk_mass:.1f} kg nominal height={spec.nominal_height:.2f} m  valid={not validate(spec)}")

# the shared action space has a fixed number of slots; absent ones are ignored
rb = P.build_robots(robots)
print(f"\n{N_SLOTS} action slots; present per robot:")
print(rb.active[:, 3:].astype(int))

# kinematics summary the conditioning baseline sees (fixed length for every robot)
kin = np.stack([kinematics_vector(s) for s in robots])
print("\nkinematics vector shape:", kin.shape)

# hold the joints at mid-range for two seconds and see who stays up
q = np.where(rb.active, rb.q_mid, 0.0)
q[:, 1] = [s.nominal_height + 0.02 for s in robots]
st = P.make_state(rb, q, np.zeros_like(q))
for _ in range(500):
    st = P.step(rb, st, q, 0.004)
for spec, z in zip(robots, st.q[:, 1]):
    print(f"{spec.category:<18} base height after 2 s of PD standing: {z:.3f} m")
