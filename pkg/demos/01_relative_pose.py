"""
Relative poses and angular error
================================

Two camera poses, the relative pose between them, and the error metrics
used throughout the package.
"""

import numpy as np

from siamreloc.pose import IDENTITY, Pose, angular_error_deg, quat_multiply, relative_pose

# a camera at the origin and a second one a meter along x, turned 90 degrees about z
c = np.cos(np.pi / 4)
ref = Pose([0.0, 0.0, 0.0], IDENTITY)
cur = Pose([1.0, 0.0, 0.0], [c, 0.0, 0.0, c])

rel = relative_pose(cur, ref)
print("x_rel", rel.x_rel)
print("q_rel", rel.q_rel)

# composing the reference with the relative rotation gives the current one back
print("recomposed", quat_multiply(ref.orientation, rel.q_rel))

# q and -q are the same rotation, so the angular error between them is zero
print("error vs -q", angular_error_deg(cur.orientation, -cur.orientation))
print("error vs reference", angular_error_deg(cur.orientation, ref.orientation))
