"""Independent region-membership oracle for the receding-horizon field.

Classifies points against the planar region definition directly: the unsafe set
is the safe-radius sphere at the current position united with the solid of
revolution of the triangle between the two tangent points and the apex.
"""

import numpy as np


def region_membership_oracle(points, o0, ok, r):
    """Boolean unsafe-region membership for (n, 3) points."""
    points = np.atleast_2d(np.asarray(points, dtype=float))
    o0 = np.asarray(o0, dtype=float)
    ok = np.asarray(ok, dtype=float)
    rel = points - o0
    in_sphere = np.linalg.norm(rel, axis=1) <= r

    h = float(np.linalg.norm(ok - o0))
    if h <= r:
        return in_sphere
    axis = (ok - o0) / h
    s = rel @ axis
    rho = np.linalg.norm(rel - np.outer(s, axis), axis=1)
    q = np.sqrt(h * h - r * r)
    # triangle vertices in the (s, rho) half-plane: tangent points and apex
    a = np.array([r * r / h, r * q / h])
    b = np.array([r * r / h, -r * q / h])
    c = np.array([h, 0.0])
    p2 = np.stack([s, rho], axis=1)

    def side(p, v0, v1):
        return (v1[0] - v0[0]) * (p[:, 1] - v0[1]) - (v1[1] - v0[1]) * (p[:, 0] - v0[0])

    d0 = side(p2, a, b)
    d1 = side(p2, b, c)
    d2 = side(p2, c, a)
    eps = 1e-12
    in_tri = ((d0 >= -eps) & (d1 >= -eps) & (d2 >= -eps)) | (
        (d0 <= eps) & (d1 <= eps) & (d2 <= eps)
    )
    return in_sphere | in_tri
