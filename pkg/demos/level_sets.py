"""
Level sets, projection and code words
=====================================

Three 4-bit weight schemes side by side, and what happens to a handful of
weights when they are snapped onto each grid.
"""

import numpy as np

from msq import SP2, FixedPoint, PowerOfTwo, build_levels, encode, project

np.set_printoptions(precision=4, suppress=True, linewidth=100)

# Each scheme gives a symmetric grid in [-alpha, alpha]. Fixed-point is uniform,
# power-of-2 crowds its levels around zero, SP2 sits in between.
alpha = 1.0
for scheme in (FixedPoint(4), PowerOfTwo(4), SP2(2, 1)):
    ls = build_levels(scheme, alpha)
    print(f"{scheme!s:28} {len(ls):2d} levels  {ls.levels[ls.levels >= 0]}")

# SP2 with m1=2, m2=1 nominally has 15 code points, but 1/2 can be written as
# 1/2 + 0 or 0 + 1/2, and so on, leaving 13 distinct values.

# Projection is nearest-level after clipping; exact ties go to the smaller magnitude.
w = np.array([-1.3, -0.7, -0.1, 0.0, 0.06, 0.3, 0.5625, 0.9])
for scheme in (FixedPoint(4), PowerOfTwo(4), SP2(2, 1)):
    print(f"{scheme!s:28} {project(w, build_levels(scheme, alpha))}")

# SP2 code words hold two exponents; 0.625 = 2^-1 + 2^-3.
sp2 = build_levels(SP2(2, 1), alpha)
for v in (0.625, 1.0, 0.5, 0.0):
    print(v, encode(v, sp2))
