"""Planar geometry: angle wrapping, polylines, reference lines, oriented boxes."""

from __future__ import annotations

import numpy as np
from scipy.spatial import cKDTree


def wrap_angle(theta):
    """Wrap angles to (-pi, pi]."""
    out = np.mod(np.asarray(theta, dtype=float) + np.pi, 2.0 * np.pi) - np.pi
    out = np.where(out <= -np.pi, out + 2.0 * np.pi, out)
    if np.ndim(out) == 0:
        return float(out)
    return out


def rotation(theta: float) -> np.ndarray:
    c, s = np.cos(theta), np.sin(theta)
    return np.array([[c, -s], [s, c]])


def to_frame(points, origin, theta):
    """Express world points in the frame located at ``origin`` with heading ``theta``."""
    p = np.asarray(points, dtype=float) - np.asarray(origin, dtype=float)
    c, s = np.cos(theta), np.sin(theta)
    x = c * p[..., 0] + s * p[..., 1]
    y = -s * p[..., 0] + c * p[..., 1]
    return np.stack([x, y], axis=-1)


def from_frame(points, origin, theta):
    p = np.asarray(points, dtype=float)
    c, s = np.cos(theta), np.sin(theta)
    x = c * p[..., 0] - s * p[..., 1] + origin[0]
    y = s * p[..., 0] + c * p[..., 1] + origin[1]
    return np.stack([x, y], axis=-1)


def cumulative_length(poly: np.ndarray) -> np.ndarray:
    seg = np.linalg.norm(np.diff(poly, axis=0), axis=1)
    return np.concatenate([[0.0], np.cumsum(seg)])


def point_segment_distance(p, a, b):
    """Euclidean distance from points ``p`` to segments ``a-b`` (broadcasting)."""
    ab = b - a
    ap = p - a
    denom = np.sum(ab * ab, axis=-1)
    t = np.clip(np.sum(ap * ab, axis=-1) / np.where(denom > 0, denom, 1.0), 0.0, 1.0)
    closest = a + t[..., None] * ab
    return np.linalg.norm(p - closest, axis=-1)


def project_to_polyline(points, poly, cum=None):
    """Project points onto a polyline.

    Returns
    -------
    s : arc length of the closest point
    lateral : signed offset, positive to the left of the travel direction
    dist : unsigned distance to the polyline
    seg : index of the closest segment
    """
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    poly = np.asarray(poly, dtype=float)
    if cum is None:
        cum = cumulative_length(poly)
    a = poly[:-1]
    ab = poly[1:] - a
    seg_len2 = np.sum(ab * ab, axis=1)
    seg_len2 = np.where(seg_len2 > 0, seg_len2, 1.0)
    ap = pts[:, None, :] - a[None, :, :]
    t = np.clip(np.sum(ap * ab[None], axis=2) / seg_len2[None], 0.0, 1.0)
    closest = a[None] + t[..., None] * ab[None]
    d2 = np.sum((pts[:, None, :] - closest) ** 2, axis=2)
    seg = np.argmin(d2, axis=1)
    rows = np.arange(len(pts))
    tt = t[rows, seg]
    seg_vec = ab[seg]
    seg_len = np.sqrt(np.sum(seg_vec**2, axis=1))
    s = cum[seg] + tt * seg_len
    cross = seg_vec[:, 0] * ap[rows, seg, 1] - seg_vec[:, 1] * ap[rows, seg, 0]
    dist = np.sqrt(d2[rows, seg])
    lateral = np.where(cross >= 0, dist, -dist)
    return s, lateral, dist, seg


class PolylineIndex:
    """Exact nearest-segment queries on a polyline (or closed ring).

    Candidate segments come from a KD-tree over segment midpoints; a point is
    answered from its ``k`` candidates when the bound certifies that no other
    segment can be closer, and by brute force otherwise.
    """

    def __init__(self, poly, closed: bool = False, k: int = 6, max_seg: float = 2.0):
        poly = np.asarray(poly, dtype=float)
        if closed:
            poly = np.vstack([poly, poly[:1]])
        self.poly = poly
        self.cum = cumulative_length(poly)
        # subdivide long edges so the midpoint bound stays tight; arc length is unchanged
        pieces, owner, offset = [], [], []
        for i in range(len(poly) - 1):
            seg_len = self.cum[i + 1] - self.cum[i]
            m = max(1, int(np.ceil(seg_len / max_seg)))
            u = np.arange(m + 1) / m
            pts = poly[i] + u[:, None] * (poly[i + 1] - poly[i])
            pieces.append(pts[:-1])
            owner.extend([i] * m)
            offset.extend(self.cum[i] + u[:-1] * seg_len)
        fine = np.vstack(pieces + [poly[-1:]])
        self.owner = np.asarray(owner)
        self.offset = np.asarray(offset)
        self.a = fine[:-1]
        self.ab = fine[1:] - self.a
        self.half = 0.5 * np.linalg.norm(self.ab, axis=1)
        self.max_half = float(self.half.max())
        self.k = min(k, len(self.a))
        self.tree = cKDTree(self.a + 0.5 * self.ab)

    def _exact(self, pts, seg_idx):
        a = self.a[seg_idx]
        ab = self.ab[seg_idx]
        l2 = np.sum(ab * ab, axis=-1)
        ap = pts[:, None, :] - a
        t = np.clip(np.sum(ap * ab, axis=-1) / np.where(l2 > 0, l2, 1.0), 0.0, 1.0)
        d2 = np.sum((ap - t[..., None] * ab) ** 2, axis=-1)
        return t, d2

    def _candidates(self, pts, k):
        dmid, idx = self.tree.query(pts, k=k)
        idx = np.asarray(idx).reshape(len(pts), -1)
        dmid = np.asarray(dmid).reshape(len(pts), -1)
        t, d2 = self._exact(pts, idx)
        rows = np.arange(len(pts))
        # exact ties resolve to the lowest segment index, as a brute-force argmin would
        dmin = d2.min(axis=1)
        seg = np.where(d2 == dmin[:, None], idx, np.iinfo(np.int64).max).min(axis=1)
        jj = np.argmax(idx == seg[:, None], axis=1)
        tt = t[rows, jj]
        dist2 = d2[rows, jj]
        if k < len(self.a):
            safe = np.sqrt(dist2) <= dmid[:, -1] - self.max_half
        else:
            safe = np.ones(len(pts), bool)
        return seg, tt, dist2, safe

    def project(self, points):
        pts = np.atleast_2d(np.asarray(points, dtype=float)).reshape(-1, 2)
        seg = np.zeros(len(pts), np.int64)
        tt = np.zeros(len(pts))
        dist2 = np.zeros(len(pts))
        todo = np.arange(len(pts))
        k = self.k
        while len(todo):
            sg, t, d2, safe = self._candidates(pts[todo], k)
            seg[todo[safe]], tt[todo[safe]], dist2[todo[safe]] = sg[safe], t[safe], d2[safe]
            todo = todo[~safe]
            if k >= len(self.a):
                break
            k = min(4 * k, len(self.a))
        seg_vec = self.ab[seg]
        s = self.offset[seg] + tt * (2.0 * self.half[seg])
        ap = pts - self.a[seg]
        cross = seg_vec[:, 0] * ap[:, 1] - seg_vec[:, 1] * ap[:, 0]
        dist = np.sqrt(dist2)
        lateral = np.where(cross >= 0, dist, -dist)
        return s, lateral, dist, self.owner[seg]


def interpolate_polyline(poly, s, cum=None):
    """Point and tangent heading at arc length ``s``; linear extrapolation past the ends."""
    poly = np.asarray(poly, dtype=float)
    if cum is None:
        cum = cumulative_length(poly)
    s = np.asarray(s, dtype=float)
    seg = np.clip(np.searchsorted(cum, s, side="right") - 1, 0, len(poly) - 2)
    seg_vec = poly[seg + 1] - poly[seg]
    seg_len = cum[seg + 1] - cum[seg]
    u = (s - cum[seg]) / np.where(seg_len > 0, seg_len, 1.0)
    xy = poly[seg] + u[..., None] * seg_vec
    heading = np.arctan2(seg_vec[..., 1], seg_vec[..., 0])
    return xy, heading


class ReferenceLine:
    """Smooth route frame built from a polyline.

    Vertex tangents (mean of adjacent segment headings) are interpolated
    linearly in arc length and integrated into a dense curve, so headings and
    lateral offsets vary continuously. For polylines sampled from arcs the
    dense curve passes through the original vertices.
    """

    def __init__(self, points, spacing: float = 0.25):
        pts = np.asarray(points, dtype=float)
        if pts.ndim != 2 or len(pts) < 2:
            raise ValueError("reference line needs at least 2 points")
        self.source = pts
        cum = cumulative_length(pts)
        seg = np.diff(pts, axis=0)
        seg_heading = np.unwrap(np.arctan2(seg[:, 1], seg[:, 0]))
        vert = np.empty(len(pts))
        vert[0] = seg_heading[0]
        vert[-1] = seg_heading[-1]
        vert[1:-1] = 0.5 * (seg_heading[:-1] + seg_heading[1:])
        n = max(2, int(np.ceil(cum[-1] / spacing)) + 1)
        s = np.linspace(0.0, cum[-1], n)
        h_mid = np.interp(0.5 * (s[:-1] + s[1:]), cum, vert)
        ds = np.diff(s)
        # chord of a constant-curvature piece: length ds * sinc(dh / 2)
        dh = np.diff(np.interp(s, cum, vert))
        chord = ds * np.sinc(dh / (2.0 * np.pi))
        step = np.stack([chord * np.cos(h_mid), chord * np.sin(h_mid)], axis=1)
        dense = pts[0] + np.vstack([[0.0, 0.0], np.cumsum(step, axis=0)])
        self.points = dense
        self.cum = s
        self.heading = np.interp(s, cum, vert)
        self.length = float(s[-1])
        self._index = None

    @property
    def index(self) -> "PolylineIndex":
        if self._index is None:
            self._index = PolylineIndex(self.points)
        return self._index

    def heading_at(self, s):
        return np.interp(np.asarray(s, dtype=float), self.cum, self.heading)

    def position_at(self, s):
        xy, _ = interpolate_polyline(self.points, s, self.cum)
        return xy

    def frenet_to_world(self, s, d):
        xy = self.position_at(s)
        h = self.heading_at(s)
        d = np.asarray(d, dtype=float)
        normal = np.stack([-np.sin(h), np.cos(h)], axis=-1)
        return xy + d[..., None] * normal

    def project(self, points):
        """Arc length, signed lateral offset (left positive) and distance of each point."""
        pts = np.asarray(points, dtype=float)
        s, lat, dist, _ = self.index.project(pts.reshape(-1, 2))
        shape = pts.shape[:-1]
        return s.reshape(shape), lat.reshape(shape), dist.reshape(shape)


def box_corners(x, y, theta, half_length, half_width):
    """Corners of oriented rectangles, counter-clockwise; shape (..., 4, 2)."""
    x, y, theta, hl, hw = np.broadcast_arrays(
        *(np.asarray(v, dtype=float) for v in (x, y, theta, half_length, half_width))
    )
    c, s = np.cos(theta), np.sin(theta)
    lx = np.stack([hl, -hl, -hl, hl], axis=-1)
    ly = np.stack([hw, hw, -hw, -hw], axis=-1)
    cx = x[..., None] + c[..., None] * lx - s[..., None] * ly
    cy = y[..., None] + s[..., None] * lx + c[..., None] * ly
    # order above is (+,+), (-,+), (-,-), (+,-): counter-clockwise
    return np.stack([cx, cy], axis=-1)


def _sat_overlap(a, b):
    """Separating-axis test for convex quads (..., 4, 2). True where they touch or overlap."""
    overlap = np.ones(a.shape[:-2], dtype=bool)
    for poly in (a, b):
        edges = np.roll(poly, -1, axis=-2) - poly
        for k in range(2):
            axis = np.stack([-edges[..., k, 1], edges[..., k, 0]], axis=-1)
            pa = np.einsum("...vi,...i->...v", a, axis)
            pb = np.einsum("...vi,...i->...v", b, axis)
            separated = (pa.max(-1) < pb.min(-1)) | (pb.max(-1) < pa.min(-1))
            overlap &= ~separated
    return overlap


def box_distance(a, b):
    """Separation distance between convex quads ``a`` and ``b`` (..., 4, 2); 0 on overlap."""
    a, b = np.broadcast_arrays(a, b)
    ea0, ea1 = a, np.roll(a, -1, axis=-2)
    eb0, eb1 = b, np.roll(b, -1, axis=-2)
    # vertices of a against edges of b and vice versa: (..., 4 vertices, 4 edges)
    d_ab = point_segment_distance(a[..., :, None, :], eb0[..., None, :, :], eb1[..., None, :, :])
    d_ba = point_segment_distance(b[..., :, None, :], ea0[..., None, :, :], ea1[..., None, :, :])
    dist = np.minimum(d_ab.min(axis=(-1, -2)), d_ba.min(axis=(-1, -2)))
    return np.where(_sat_overlap(a, b), 0.0, dist)


def points_in_polygon(points, polygon):
    """Even-odd point-in-polygon test, vectorized over points."""
    p = np.asarray(points, dtype=float)
    poly = np.asarray(polygon, dtype=float)
    x, y = p[..., 0, None], p[..., 1, None]
    x0, y0 = poly[:, 0], poly[:, 1]
    x1, y1 = np.roll(x0, -1), np.roll(y0, -1)
    crosses = (y0 > y) != (y1 > y)
    dy = np.where(y1 != y0, y1 - y0, 1.0)
    xint = x0 + (y - y0) * (x1 - x0) / dy
    return np.sum(crosses & (x < xint), axis=-1) % 2 == 1


def polygon_signed_distance(points, polygon, chunk: int = 4096):
    """Signed distance to a simple polygon boundary, positive inside."""
    p = np.asarray(points, dtype=float)
    poly = np.asarray(polygon, dtype=float)
    a = poly
    b = np.roll(poly, -1, axis=0)
    flat = p.reshape(-1, 2)
    out = np.empty(len(flat))
    for i in range(0, len(flat), chunk):
        q = flat[i : i + chunk]
        d = point_segment_distance(q[:, None, :], a, b).min(axis=-1)
        out[i : i + chunk] = np.where(points_in_polygon(q, poly), d, -d)
    return out.reshape(p.shape[:-1])


def region_signed_distance(points, polygons):
    """Signed distance to a union of polygons (max over members; exact for disjoint members)."""
    if not polygons:
        p = np.asarray(points, dtype=float)
        return np.full(p.shape[:-1], -np.inf)
    return np.max([polygon_signed_distance(points, poly) for poly in polygons], axis=0)
