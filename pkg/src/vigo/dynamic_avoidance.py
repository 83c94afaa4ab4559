"""Receding-horizon distance field around tracked moving obstacles.

Each obstacle spawns an unsafe region shaped like a sphere around its
current position whose safe radius tapers linearly to zero at the last
linearly-predicted position: a spherical cap joined to the tangent cone
toward the prediction apex. The signed distance to the safe area is
positive inside the region, and its cubic clamp forms the dynamic cost.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

_STATIC_SPEED_EPS = 1e-3  # m/s below which an obstacle is treated as static


@dataclass
class RecedingHorizonField:
    """Cone-shaped unsafe region from current position to prediction apex.

    When the obstacle is (near) static, or the apex falls inside the safe
    sphere, the field degenerates to the sphere of radius ``r`` at ``o0``.
    """

    o0: np.ndarray
    ok: np.ndarray
    r: float
    axis: np.ndarray
    horizon_len: float
    predictions: np.ndarray
    size_z: float = np.inf
    center_z: float = 0.0
    margin: float = 0.0

    @property
    def is_spherical(self) -> bool:
        return self.horizon_len <= max(self.r, _STATIC_SPEED_EPS)

    # -- geometry ---------------------------------------------------------------

    def distances(self, points) -> np.ndarray:
        """Signed distance to the safe area for (n, 3) points (positive inside).

        The query reduces axisymmetrically to the plane through each point
        and the field axis. Behind the perpendicular-foot boundary the
        spherical cap distance applies; in the tapering region the distance
        is measured along the line through the point perpendicular to the
        cone edge; beyond the apex it is minus the distance to the apex.
        """
        points = np.atleast_2d(np.asarray(points, dtype=np.float64))
        rel = points - self.o0
        if self.is_spherical:
            return self.r - np.linalg.norm(rel, axis=1)

        h = self.horizon_len
        s = rel @ self.axis
        radial = rel - np.outer(s, self.axis)
        rho = np.linalg.norm(radial, axis=1)
        q = np.sqrt(h * h - self.r * self.r)

        s_foot = s - rho * self.r / q  # axis crossing of the edge-perpendicular
        out = np.empty(len(points))
        cap = s_foot <= 0.0
        apex = s_foot >= h
        mid = ~cap & ~apex
        out[cap] = self.r - np.sqrt(s[cap] ** 2 + rho[cap] ** 2)
        out[apex] = -np.sqrt((s[apex] - h) ** 2 + rho[apex] ** 2)
        # tapering region: signed distance to the tangent edge on the
        # point's side, = r - (r*s + q*rho)/h in cylindrical coordinates
        out[mid] = self.r - (self.r * s[mid] + q * rho[mid]) / h
        return out

    def gradients(self, points):
        """d(distance)/d(point); (n, 3). On-axis taper points fall back to
        the direction opposite the field axis (flagged via second return)."""
        points = np.atleast_2d(np.asarray(points, dtype=np.float64))
        rel = points - self.o0
        n = len(points)
        grad = np.zeros((n, 3))
        flagged = np.zeros(n, dtype=bool)
        if self.is_spherical:
            dist = np.linalg.norm(rel, axis=1)
            ok = dist > 1e-12
            grad[ok] = -rel[ok] / dist[ok, None]
            grad[~ok] = -self.axis
            flagged[~ok] = True
            return grad, flagged

        h = self.horizon_len
        s = rel @ self.axis
        radial = rel - np.outer(s, self.axis)
        rho = np.linalg.norm(radial, axis=1)
        q = np.sqrt(h * h - self.r * self.r)
        s_foot = s - rho * self.r / q

        cap = s_foot <= 0.0
        apex = s_foot >= h
        mid = ~cap & ~apex

        dist = np.sqrt(s**2 + rho**2)
        okc = cap & (dist > 1e-12)
        grad[okc] = -rel[okc] / dist[okc, None]
        bad = cap & ~okc
        grad[bad] = -self.axis
        flagged |= bad

        da = np.sqrt((s - h) ** 2 + rho**2)
        oka = apex & (da > 1e-12)
        rel_k = points - self.ok
        grad[oka] = -rel_k[oka] / da[oka, None]
        bada = apex & ~oka
        grad[bada] = -self.axis
        flagged |= bada

        okm = mid & (rho > 1e-12)
        rho_hat = np.zeros((n, 3))
        rho_hat[okm] = radial[okm] / rho[okm, None]
        grad[okm] = -(self.r / h) * self.axis - (q / h) * rho_hat[okm]
        badm = mid & ~okm
        grad[badm] = -self.axis
        flagged |= badm
        return grad, flagged

    def z_gate(self, points) -> np.ndarray:
        """Vertical applicability mask: the cost only acts near the
        obstacle's height band."""
        points = np.atleast_2d(np.asarray(points, dtype=np.float64))
        if not np.isfinite(self.size_z):
            return np.ones(len(points), dtype=bool)
        return np.abs(points[:, 2] - self.center_z) < 0.5 * self.size_z + self.margin


def predict(ob, k: int, dt_pred: float) -> np.ndarray:
    """Linear constant-velocity prediction: k future positions."""
    if k < 1:
        raise ValueError("k must be >= 1")
    if dt_pred <= 0:
        raise ValueError("dt_pred must be positive")
    o0 = np.asarray(ob.position, dtype=np.float64)
    v0 = np.asarray(ob.velocity, dtype=np.float64)
    steps = np.arange(1, k + 1, dtype=np.float64)
    return o0[None, :] + steps[:, None] * (dt_pred * v0[None, :])


def build_field(ob, k: int, dt_pred: float, margin: float,
                force_static: bool = False) -> RecedingHorizonField:
    """Field for one obstacle; ``force_static`` collapses it to the sphere
    at the current position (the no-receding-horizon ablation)."""
    o0 = np.asarray(ob.position, dtype=np.float64)
    size = np.asarray(ob.size, dtype=np.float64)
    r = 0.5 * max(size[0], size[1]) + margin
    speed = float(np.linalg.norm(np.asarray(ob.velocity, dtype=np.float64)))
    if force_static or speed < _STATIC_SPEED_EPS:
        preds = np.repeat(o0[None, :], k, axis=0)
        return RecedingHorizonField(
            o0=o0, ok=o0.copy(), r=r, axis=np.array([1.0, 0.0, 0.0]),
            horizon_len=0.0, predictions=preds,
            size_z=float(size[2]), center_z=float(o0[2]), margin=margin,
        )
    preds = predict(ob, k, dt_pred)
    ok = preds[-1]
    axis = ok - o0
    hlen = float(np.linalg.norm(axis))
    axis = axis / hlen
    return RecedingHorizonField(
        o0=o0, ok=ok, r=r, axis=axis, horizon_len=hlen, predictions=preds,
        size_z=float(size[2]), center_z=float(o0[2]), margin=margin,
    )


def distance_to_safe(p, f: RecedingHorizonField) -> float:
    """Signed distance of one point to the field's safe area."""
    return float(f.distances(np.asarray(p, dtype=np.float64)[None, :])[0])


class FieldBatch:
    """All fields of one planning context stacked for vectorized queries."""

    def __init__(self, fields):
        self.fields = list(fields)
        n = len(self.fields)
        self.o0 = np.array([f.o0 for f in self.fields]).reshape(n, 3)
        self.ok = np.array([f.ok for f in self.fields]).reshape(n, 3)
        self.axis = np.array([f.axis for f in self.fields]).reshape(n, 3)
        self.r = np.array([f.r for f in self.fields])
        self.h = np.array([f.horizon_len for f in self.fields])
        self.spherical = np.array([f.is_spherical for f in self.fields])
        self.z_lo = np.array([f.center_z - 0.5 * f.size_z - f.margin for f in self.fields])
        self.z_hi = np.array([f.center_z + 0.5 * f.size_z + f.margin for f in self.fields])

    def penetrations(self, pts):
        """Signed distances (m, n_fields) and the vertical gate mask."""
        m = len(pts)
        n = len(self.fields)
        rel = pts[:, None, :] - self.o0[None, :, :]  # (m, n, 3)
        s = np.einsum("mnk,nk->mn", rel, self.axis)
        radial = rel - s[:, :, None] * self.axis[None, :, :]
        rho = np.linalg.norm(radial, axis=2)
        dist0 = np.linalg.norm(rel, axis=2)

        dd = np.empty((m, n))
        grad = np.empty((m, n, 3))
        with np.errstate(divide="ignore", invalid="ignore"):
            sphere_dd = self.r[None, :] - dist0
            sphere_g = -rel / np.where(dist0 > 1e-12, dist0, 1.0)[:, :, None]

            q = np.sqrt(np.maximum(self.h**2 - self.r**2, 1e-12))
            s_foot = s - rho * (self.r / q)[None, :]
            cap = s_foot <= 0.0
            apex = s_foot >= self.h[None, :]
            mid = ~cap & ~apex

            rel_k = pts[:, None, :] - self.ok[None, :, :]
            dista = np.linalg.norm(rel_k, axis=2)
            taper = self.r[None, :] - (self.r[None, :] * s + q[None, :] * rho) / self.h[None, :]
            cone_dd = np.where(cap, sphere_dd, np.where(apex, -dista, taper))

            rho_hat = radial / np.where(rho > 1e-12, rho, 1.0)[:, :, None]
            g_mid = (-(self.r / self.h)[None, :, None] * self.axis[None, :, :]
                     - (q / self.h)[None, :, None] * rho_hat)
            g_apex = -rel_k / np.where(dista > 1e-12, dista, 1.0)[:, :, None]
            cone_g = np.where(cap[:, :, None], sphere_g,
                              np.where(apex[:, :, None], g_apex, g_mid))

            sph = self.spherical[None, :]
            dd = np.where(sph, sphere_dd, cone_dd)
            grad = np.where(sph[:, :, None], sphere_g, cone_g)

            # degenerate queries fall back to the direction opposite the axis
            degen = ((sph | cap) & (dist0 <= 1e-12)) \
                | (~sph & apex & (dista <= 1e-12)) \
                | (~sph & mid & (rho <= 1e-12))
            grad = np.where(degen[:, :, None], -self.axis[None, :, :], grad)

        gate = (pts[:, 2:3] > self.z_lo[None, :]) & (pts[:, 2:3] < self.z_hi[None, :])
        return dd, grad, gate


def dynamic_cost(s, fields):
    """Cubic penalty over all control points inside any field.

    Points outside a field's vertical band are exempt. Returns (cost, grad)
    with grad shaped like the control-point array.
    """
    pts = s.points
    grad = np.zeros_like(pts)
    if not fields:
        return 0.0, grad
    batch = fields if isinstance(fields, FieldBatch) else FieldBatch(fields)
    dd, gvec, gate = batch.penetrations(pts)
    act = gate & (dd > 0.0)
    if not act.any():
        return 0.0, grad
    w = np.where(act, 3.0 * dd**2, 0.0)
    grad += np.einsum("mn,mnk->mk", w, gvec)
    return float(np.sum((dd[act]) ** 3)), grad


def field_csv_rows(f: RecedingHorizonField, lo, hi, step: float):
    """Debug grid of signed distances over an x-y window at the o0 height."""
    xs = np.arange(lo[0], hi[0] + 1e-9, step)
    ys = np.arange(lo[1], hi[1] + 1e-9, step)
    rows = []
    for x in xs:
        for y in ys:
            p = np.array([x, y, f.o0[2]])
            rows.append((x, y, distance_to_safe(p, f)))
    return rows
