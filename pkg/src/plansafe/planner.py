"""Motion-primitive trajectory tree and the rule-hierarchy planner.

Each primitive pairs a target lateral offset from the route centerline with a
constant longitudinal acceleration. The lateral profile is a quintic in route
arc length (zero slope and curvature at its end), stretched until the heading
rate it induces respects the steering bound; the speed profile is linear in
time and clipped to ``[0, v_max]``. Two 1.5 s stages of 16 primitives give a
tree of 256 leaves.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

from .geometry import ReferenceLine, wrap_angle
from .rules import DEFAULT_RULES, RuleConfig, evaluate_plans
from .scene import Scene, AgentState
from .trajectory import DEFAULT_BOUNDS, Bounds, Trajectory, refit_controls

LATERAL_TARGETS = (-3.5, 0.0, 3.5, 7.0)
ACCELERATIONS = (-4.0, -1.0, 0.0, 2.0)
PRIMITIVES = tuple(itertools.product(LATERAL_TARGETS, ACCELERATIONS))


@dataclass(frozen=True)
class TreeConfig:
    lateral_targets: tuple = LATERAL_TARGETS
    accelerations: tuple = ACCELERATIONS
    stage_duration: float = 1.5
    dt: float = 0.1
    min_transition: float = 8.0
    omega_margin: float = 0.9
    ds: float = 0.05
    bounds: Bounds = DEFAULT_BOUNDS

    @property
    def primitives(self):
        return tuple(itertools.product(self.lateral_targets, self.accelerations))


DEFAULT_TREE = TreeConfig()


@dataclass(frozen=True, eq=False)
class TrajectoryTree:
    root: np.ndarray
    leaves: tuple
    labels: tuple  # ((offset1, accel1), (offset2, accel2)) per leaf

    def __len__(self):
        return len(self.leaves)

    def states(self) -> np.ndarray:
        return np.stack([l.states for l in self.leaves])


def _quintic(d0, d1, d2, target, L):
    """Coefficients of d(u), u in [0, L], from (d, d', d'') at 0 to (target, 0, 0) at L."""
    A = np.array(
        [
            [L**3, L**4, L**5],
            [3 * L**2, 4 * L**3, 5 * L**4],
            [6 * L, 12 * L**2, 20 * L**3],
        ]
    )
    rhs = np.array([target - d0 - d1 * L - 0.5 * d2 * L**2, -d1 - d2 * L, -d2])
    c3, c4, c5 = np.linalg.solve(A, rhs)
    return np.array([d0, d1, 0.5 * d2, c3, c4, c5])


def _eval_poly(c, u, deriv=0):
    p = np.polynomial.polynomial
    coef = p.polyder(c, deriv) if deriv else c
    return p.polyval(u, coef)


@dataclass
class _Lateral:
    """Piecewise lateral offset d(s): quintic on [s0, s0 + L], flat after."""

    s0: float
    L: float
    coef: np.ndarray
    target: float

    def value(self, s, deriv=0):
        u = np.asarray(s, dtype=float) - self.s0
        inside = u < self.L
        uc = np.clip(u, 0.0, self.L)
        val = _eval_poly(self.coef, uc, deriv)
        if deriv == 0:
            return np.where(inside, val, self.target)
        return np.where(inside, val, 0.0)


def _speed_profile(v0, a, t, v_max):
    """Speed and travelled distance for constant acceleration clipped to [0, v_max]."""
    t = np.asarray(t, dtype=float)
    if a > 0:
        t_sat = max((v_max - v0) / a, 0.0)
    elif a < 0:
        t_sat = v0 / -a
    else:
        t_sat = np.inf
    tt = np.minimum(t, t_sat)
    v = np.clip(v0 + a * tt, 0.0, v_max)
    dist = v0 * tt + 0.5 * a * tt**2
    if np.isfinite(t_sat):
        v_end = float(np.clip(v0 + a * t_sat, 0.0, v_max))
        dist = dist + v_end * np.maximum(t - t_sat, 0.0)
    return v, dist


class _PathBuilder:
    """Converts (lateral profile, path-length samples) to ego states on the route frame."""

    def __init__(self, ref: ReferenceLine, ds: float):
        self.ref = ref
        self.ds = ds

    def sample(self, segments, s_start, sigma, total):
        """States at path lengths ``sigma`` along the curve d(s) built from ``segments``.

        ``segments`` is a list of (s_from, _Lateral); the last one covers the tail.
        """
        n = int(np.ceil(total / self.ds)) + 3
        s = s_start + self.ds * np.arange(n)
        d = np.empty(n)
        for i, (s_from, lat) in enumerate(segments):
            s_to = segments[i + 1][0] if i + 1 < len(segments) else np.inf
            m = (s >= s_from) & (s < s_to)
            d[m] = lat.value(s[m])
        xy = self.ref.frenet_to_world(s, d)
        step = np.linalg.norm(np.diff(xy, axis=0), axis=1)
        path_len = np.concatenate([[0.0], np.cumsum(step)])
        # headings from chords of the fine path
        chord = np.diff(xy, axis=0)
        heading = np.unwrap(np.arctan2(chord[:, 1], chord[:, 0]))
        mid = 0.5 * (path_len[:-1] + path_len[1:])
        x = np.interp(sigma, path_len, xy[:, 0])
        y = np.interp(sigma, path_len, xy[:, 1])
        th = np.interp(sigma, mid, heading)
        s_at = np.interp(sigma, path_len, s)
        return x, y, th, s_at


def _lateral_state(segments, s):
    for i in range(len(segments) - 1, -1, -1):
        if s >= segments[i][0]:
            lat = segments[i][1]
            return float(lat.value(s)), float(lat.value(s, 1)), float(lat.value(s, 2))
    lat = segments[0][1]
    return float(lat.value(s)), float(lat.value(s, 1)), float(lat.value(s, 2))


def drivable_offsets(road, s) -> tuple[float, float]:
    """Lateral extent of the drivable area around route arc length ``s``."""
    ref = road.reference
    if not road.drivable:
        return -np.inf, np.inf
    from .geometry import region_signed_distance

    h = float(ref.heading_at(s))
    base = ref.position_at(np.array(s))
    normal = np.array([-np.sin(h), np.cos(h)])
    probe = np.arange(-30.0, 30.0001, 0.05)
    pts = base + probe[:, None] * normal
    inside = region_signed_distance(pts, list(road.drivable)) >= 0
    if not inside.any():
        return 0.0, 0.0
    centre = np.argmin(np.abs(probe))
    if not inside[centre]:
        idx = np.flatnonzero(inside)
        centre = idx[np.argmin(np.abs(probe[idx]))]
    lo = hi = centre
    while lo > 0 and inside[lo - 1]:
        lo -= 1
    while hi < len(probe) - 1 and inside[hi + 1]:
        hi += 1
    return float(probe[lo]), float(probe[hi])


def build_tree(ego: AgentState, road, config: TreeConfig = DEFAULT_TREE, half_dims=None) -> TrajectoryTree:
    """Two-stage primitive tree rooted at ``ego``; deterministic."""
    if len(road.route) < 2:
        raise ValueError("route centerline needs at least 2 points")
    cfg = config
    ref = road.reference
    bounds = cfg.bounds
    hl, hw = half_dims if half_dims is not None else (ego.half_length, ego.half_width)
    n_stage = int(round(cfg.stage_duration / cfg.dt))
    t_stage = cfg.dt * np.arange(n_stage + 1)
    builder = _PathBuilder(ref, cfg.ds)

    s0, d0, _ = ref.project(np.array([[ego.x, ego.y]]))
    s0, d0 = float(s0[0]), float(d0[0])
    rel = wrap_angle(ego.theta - float(ref.heading_at(s0)))
    slope0 = float(np.tan(np.clip(rel, -1.2, 1.2)))
    lo, hi = drivable_offsets(road, s0)
    targets = [float(np.clip(t, lo, hi)) for t in cfg.lateral_targets]
    omega_cap = bounds.omega_max * cfg.omega_margin

    def stage(segments, s_begin, sigma0, v0, target, accel):
        """Roll one stage; stretch the lateral transition until the heading rate is admissible."""
        # curvature restarts at zero: heading stays continuous, the heading rate may step
        d, d1, _ = _lateral_state(segments, s_begin)
        d2 = 0.0
        v, dist = _speed_profile(v0, accel, t_stage, bounds.v_max)
        v_peak = max(float(v.max()), 1e-3)
        dd = abs(target - d) + abs(d1) * 5.0
        L = max(cfg.min_transition, float(np.sqrt(6.0 * max(dd, 1e-6) * v_peak / omega_cap)))
        for _ in range(40):
            lat = _Lateral(s_begin, L, _quintic(d, d1, d2, target, L), target)
            segs = [sg for sg in segments if sg[0] < s_begin] + [(s_begin, lat)]
            total = sigma0 + float(dist[-1]) + 1.0
            x, y, th, s_at = builder.sample(segs, segments[0][0], sigma0 + dist, total)
            omega, _ = refit_controls(np.column_stack([x, y, th, v]), cfg.dt)
            if np.all(np.abs(omega) <= omega_cap) or (abs(target - d) < 1e-12 and abs(d1) < 1e-12):
                break
            L *= 1.3
        return segs, x, y, th, v, s_at, sigma0 + float(dist[-1])

    first = []
    # the start segment carries the ego's current slope into the first quintic
    start = [(s0, _StartLateral(d0, slope0))]
    for target, accel in itertools.product(targets, cfg.accelerations):
        first.append(stage(start, s0, 0.0, ego.v, target, accel))

    leaves, labels = [], []
    for (t1, a1), f in zip(itertools.product(cfg.lateral_targets, cfg.accelerations), first):
        segs1, x1, y1, th1, v1, s_at1, sigma1 = f
        s_end = float(s_at1[-1])
        for (t2, a2), target2 in zip(
            itertools.product(cfg.lateral_targets, cfg.accelerations),
            itertools.product(targets, cfg.accelerations),
        ):
            _, x2, y2, th2, v2, _, _ = stage(segs1, s_end, sigma1, float(v1[-1]), target2[0], a2)
            x = np.concatenate([x1, x2[1:]])
            y = np.concatenate([y1, y2[1:]])
            th = np.concatenate([th1, th2[1:]])
            v = np.concatenate([v1, v2[1:]])
            st = np.column_stack([x, y, wrap_angle(th), v])
            st[0] = [ego.x, ego.y, ego.theta, ego.v]
            leaves.append(Trajectory(st, cfg.dt, hl, hw))
            labels.append(((t1, a1), (t2, a2)))
    return TrajectoryTree(np.array([ego.x, ego.y, ego.theta, ego.v]), tuple(leaves), tuple(labels))


@dataclass
class _StartLateral:
    d0: float
    slope: float

    def value(self, s, deriv=0):
        s = np.asarray(s, dtype=float)
        if deriv == 0:
            return np.full(s.shape, self.d0)
        if deriv == 1:
            return np.full(s.shape, self.slope)
        return np.zeros(s.shape)


def rh_plan(scene: Scene, tree: TrajectoryTree | None = None, config: RuleConfig = DEFAULT_RULES, tree_config: TreeConfig = DEFAULT_TREE):
    """Pick the highest-reward leaf (lowest index on ties). Returns (best, tree, rewards)."""
    if tree is None:
        tree = build_tree(scene.ego.last, scene.road, tree_config)
    R, _ = evaluate_plans(tree.states(), scene, config)
    best = int(np.argmax(R))
    return tree.leaves[best], tree, R
