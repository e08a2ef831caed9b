"""
Why the map has to shrink
=========================

A robot 0.5 m from a wall steps 0.1 m closer, but odometry reports a 5 degree
yaw error and only 8 cm of travel. Looking up the old map with the wrong pose
says the wall is further away than it really is. Deflating every stored
distance by the registration bound restores a safe answer.
"""

import math

import numpy as np

from certmap.cesdf import MapPoseEstimate, VoxelGrid, certified_distance, deflate, deflation_at, propagate_esdf
from certmap.geom import RotoTranslation, angle_to_frobenius, invert, rot_z

# a thin slab of 1 cm voxels with a wall filling y >= 1
g = VoxelGrid.spanning((-0.5, -0.2, -0.05), (0.5, 1.3, 0.05), 0.01)
idx = np.argwhere(np.ones(g.dims, bool))
sdf = (1.0 - g.centers(idx)[:, 1]).reshape(g.dims)
g.observed[...] = True
g.tsdf_weight[...] = 1.0
g.tsdf[...] = np.clip(sdf, -g.truncation, g.truncation)
g.last_sdf[...] = g.tsdf
propagate_esdf(g)

# true motion: 0.1 m along +y; estimate: -5 degrees of yaw and 0.08 m
p_body = np.array([0.05, 0.4, 0.0])  # a point on the robot, 0.5 m from the wall
est_pose = RotoTranslation(rot_z(math.radians(-5.0)), [0.0, 0.08, 0.0])
eps_r = angle_to_frobenius(math.radians(5.0))
eps_t = 0.02
est = MapPoseEstimate(est_pose, invert(est_pose), eps_r, eps_t)

looked_up = g.esdf[tuple(g.index_of(est_pose.apply(p_body)))]
print(f"rotation bound for 5 degrees: {eps_r:.3f}")
print(f"true distance:               0.500 m")
print(f"uncorrected map lookup:      {looked_up:.3f} m  (too optimistic)")
print(f"deflation at the point:      {deflation_at(est, est_pose.apply(p_body)):.3f} m")

deflate(g, est)
print(f"certified distance:          {certified_distance(g, est_pose, p_body):.3f} m")
