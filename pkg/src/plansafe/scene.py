"""Scene domain types, editing primitives, JSON I/O and a synthetic scene generator."""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

import shapely

from .geometry import (
    PolylineIndex,
    ReferenceLine,
    box_corners,
    box_distance,
    wrap_angle,
)

VEHICLE = "vehicle"
PEDESTRIAN = "pedestrian"
KINDS = (VEHICLE, PEDESTRIAN)

DEFAULT_FOOTPRINT = {VEHICLE: (2.3, 1.0), PEDESTRIAN: (0.4, 0.4)}

DT = 0.1
HISTORY_LEN = 10
HORIZON = 3.0


@dataclass(frozen=True)
class AgentState:
    x: float
    y: float
    theta: float
    v: float
    kind: str = VEHICLE
    half_length: float = DEFAULT_FOOTPRINT[VEHICLE][0]
    half_width: float = DEFAULT_FOOTPRINT[VEHICLE][1]

    def __post_init__(self):
        if not np.isfinite([self.x, self.y, self.theta, self.v]).all():
            raise ValueError("agent state must be finite")
        if self.v < 0:
            raise ValueError(f"speed must be non-negative, got {self.v}")
        if self.kind not in KINDS:
            raise ValueError(f"unknown agent kind {self.kind!r}")
        if self.half_length <= 0 or self.half_width <= 0:
            raise ValueError("footprint dimensions must be positive")
        object.__setattr__(self, "theta", wrap_angle(self.theta))

    @classmethod
    def of_kind(cls, x, y, theta, v, kind=VEHICLE):
        hl, hw = DEFAULT_FOOTPRINT[kind]
        return cls(float(x), float(y), float(theta), float(v), kind, hl, hw)

    @property
    def xy(self) -> np.ndarray:
        return np.array([self.x, self.y])

    def as_row(self) -> np.ndarray:
        return np.array([self.x, self.y, self.theta, self.v])


def _frozen(a) -> np.ndarray:
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class AgentTrack:
    """Fixed-rate history of one agent, most recent row last.

    ``states`` is an ``(n, 4)`` array of ``[x, y, theta, v]`` rows.
    """

    id: str
    states: np.ndarray
    kind: str = VEHICLE
    half_length: float = DEFAULT_FOOTPRINT[VEHICLE][0]
    half_width: float = DEFAULT_FOOTPRINT[VEHICLE][1]

    def __post_init__(self):
        st = np.array(self.states, dtype=float)
        if st.ndim != 2 or st.shape[1] != 4 or len(st) == 0:
            raise ValueError("track history must be a non-empty (n, 4) array")
        if not np.isfinite(st).all():
            raise ValueError(f"track {self.id} has non-finite states")
        if (st[:, 3] < 0).any():
            raise ValueError(f"track {self.id} has negative speed")
        st[:, 2] = wrap_angle(st[:, 2])
        object.__setattr__(self, "states", _frozen(st))
        if self.kind not in KINDS:
            raise ValueError(f"unknown agent kind {self.kind!r}")
        if self.half_length <= 0 or self.half_width <= 0:
            raise ValueError("footprint dimensions must be positive")

    @property
    def last(self) -> AgentState:
        x, y, th, v = self.states[-1]
        return AgentState(x, y, th, v, self.kind, self.half_length, self.half_width)

    @property
    def history(self) -> list[AgentState]:
        return [
            AgentState(x, y, th, v, self.kind, self.half_length, self.half_width)
            for x, y, th, v in self.states
        ]

    def __eq__(self, other):
        if not isinstance(other, AgentTrack):
            return NotImplemented
        return (
            self.id == other.id
            and self.kind == other.kind
            and self.half_length == other.half_length
            and self.half_width == other.half_width
            and np.array_equal(self.states, other.states)
        )

    __hash__ = None


@dataclass(frozen=True, eq=False)
class Lane:
    points: np.ndarray
    speed_limit: float

    def __post_init__(self):
        pts = np.array(self.points, dtype=float)
        if pts.ndim != 2 or pts.shape[1] != 2 or len(pts) < 2:
            raise ValueError("lane polyline needs at least 2 points")
        if self.speed_limit <= 0:
            raise ValueError("speed limit must be positive")
        object.__setattr__(self, "points", _frozen(pts))

    def __eq__(self, other):
        return (
            isinstance(other, Lane)
            and self.speed_limit == other.speed_limit
            and np.array_equal(self.points, other.points)
        )

    __hash__ = None


@dataclass(frozen=True, eq=False)
class TrafficLight:
    stop_point: np.ndarray
    state: str  # "red" | "green"

    def __post_init__(self):
        if self.state not in ("red", "green"):
            raise ValueError(f"traffic light state must be red or green, got {self.state!r}")
        object.__setattr__(self, "stop_point", _frozen(np.reshape(self.stop_point, 2)))

    def __eq__(self, other):
        return (
            isinstance(other, TrafficLight)
            and self.state == other.state
            and np.array_equal(self.stop_point, other.stop_point)
        )

    __hash__ = None


def _polyline(a, what) -> np.ndarray:
    pts = np.array(a, dtype=float)
    if pts.ndim != 2 or pts.shape[1] != 2 or len(pts) < 2:
        raise ValueError(f"{what} needs at least 2 points")
    return _frozen(pts)


@dataclass(frozen=True, eq=False)
class RoadGraph:
    lanes: tuple
    drivable: tuple
    crosswalks: tuple
    route: np.ndarray
    lights: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "lanes", tuple(self.lanes))
        object.__setattr__(self, "drivable", tuple(_polyline(p, "drivable polygon") for p in self.drivable))
        object.__setattr__(self, "crosswalks", tuple(_polyline(p, "crosswalk polygon") for p in self.crosswalks))
        object.__setattr__(self, "route", _polyline(self.route, "route centerline"))
        object.__setattr__(self, "lights", tuple(self.lights))
        if np.any(np.linalg.norm(np.diff(self.route, axis=0), axis=1) <= 0):
            raise ValueError("route centerline has repeated points")

    def __eq__(self, other):
        if not isinstance(other, RoadGraph):
            return NotImplemented
        return (
            self.lanes == other.lanes
            and self.lights == other.lights
            and len(self.drivable) == len(other.drivable)
            and all(np.array_equal(a, b) for a, b in zip(self.drivable, other.drivable))
            and len(self.crosswalks) == len(other.crosswalks)
            and all(np.array_equal(a, b) for a, b in zip(self.crosswalks, other.crosswalks))
            and np.array_equal(self.route, other.route)
        )

    __hash__ = None

    def _cached(self, key, build):
        val = self.__dict__.get(key)
        if val is None:
            val = build()
            object.__setattr__(self, key, val)
        return val

    @property
    def reference(self) -> ReferenceLine:
        return self._cached("_reference", lambda: ReferenceLine(self.route))

    @property
    def lane_indices(self) -> list:
        return self._cached("_lane_indices", lambda: [PolylineIndex(l.points) for l in self.lanes])

    def drivable_signed_distance(self, points) -> np.ndarray:
        """Signed distance to the drivable area (positive inside); max over polygons."""
        pts = np.asarray(points, dtype=float)
        if not self.drivable:
            return np.full(pts.shape[:-1], -np.inf)
        rings = self._cached("_drivable_rings", lambda: [PolylineIndex(p, closed=True) for p in self.drivable])
        polys = self._cached("_drivable_shapes", lambda: [shapely.Polygon(p) for p in self.drivable])
        flat = pts.reshape(-1, 2)
        best = np.full(len(flat), -np.inf)
        for ring, poly in zip(rings, polys):
            _, _, dist, _ = ring.project(flat)
            inside = shapely.contains_xy(poly, flat[:, 0], flat[:, 1]) | (dist == 0.0)
            best = np.maximum(best, np.where(inside, dist, -dist))
        return best.reshape(pts.shape[:-1])


@dataclass(frozen=True, eq=False)
class Scene:
    ego: AgentTrack
    agents: tuple
    road: RoadGraph
    dt: float = DT
    horizon: float = HORIZON

    def __post_init__(self):
        object.__setattr__(self, "agents", tuple(self.agents))
        if self.dt <= 0:
            raise ValueError("dt must be positive")
        if self.horizon <= 0:
            raise ValueError("horizon must be positive")
        ids = [a.id for a in self.agents]
        if len(set(ids)) != len(ids) or self.ego.id in ids:
            raise ValueError("agent ids must be unique")

    @property
    def n_steps(self) -> int:
        return int(round(self.horizon / self.dt))

    def agent(self, agent_id) -> AgentTrack:
        for a in self.agents:
            if a.id == agent_id:
                return a
        raise KeyError(agent_id)

    def __eq__(self, other):
        if not isinstance(other, Scene):
            return NotImplemented
        return (
            self.ego == other.ego
            and self.agents == other.agents
            and self.road == other.road
            and self.dt == other.dt
            and self.horizon == other.horizon
        )

    __hash__ = None


@dataclass(frozen=True)
class MonitorInput:
    """Missed-agent report from a component-level perception monitor."""

    present: bool = False
    state: Optional[AgentState] = None

    def __post_init__(self):
        if self.present and self.state is None:
            raise ValueError("a present failure needs a state")

    @classmethod
    def absent(cls) -> "MonitorInput":
        return cls(False, None)

    @classmethod
    def of(cls, state: AgentState) -> "MonitorInput":
        return cls(True, state)


# ---------------------------------------------------------------------------
# editing primitives


def agents_near(scene: Scene, point, radius: float) -> list:
    """Ids of agents whose most recent position lies within ``radius`` of ``point``."""
    if radius <= 0:
        raise ValueError("radius must be positive")
    if not scene.agents:
        return []
    pos = np.array([a.states[-1, :2] for a in scene.agents])
    d = np.linalg.norm(pos - np.asarray(point, dtype=float), axis=1)
    return [a.id for a, di in zip(scene.agents, d) if di <= radius]


def remove_agent(scene: Scene, agent_id) -> Scene:
    if agent_id not in {a.id for a in scene.agents}:
        raise KeyError(f"no agent with id {agent_id!r} in scene")
    return replace(scene, agents=tuple(a for a in scene.agents if a.id != agent_id))


def _fresh_id(scene: Scene) -> str:
    taken = {a.id for a in scene.agents} | {scene.ego.id}
    k = len(scene.agents)
    while f"a{k}" in taken:
        k += 1
    return f"a{k}"


def backfill_history(state: AgentState, n: int, dt: float) -> np.ndarray:
    """Constant-velocity backward extrapolation ending at ``state``."""
    k = np.arange(n - 1, -1, -1, dtype=float)
    vx, vy = state.v * np.cos(state.theta), state.v * np.sin(state.theta)
    return np.stack(
        [state.x - vx * k * dt, state.y - vy * k * dt, np.full(n, state.theta), np.full(n, state.v)],
        axis=1,
    )


def add_agent(scene: Scene, state: AgentState, agent_id=None) -> Scene:
    n = len(scene.ego.states)
    track = AgentTrack(
        agent_id if agent_id is not None else _fresh_id(scene),
        backfill_history(state, n, scene.dt),
        state.kind,
        state.half_length,
        state.half_width,
    )
    return replace(scene, agents=scene.agents + (track,))


def validate_scene(scene: Scene) -> None:
    """Raise ``ValueError`` when a scene breaks its structural invariants."""
    n = len(scene.ego.states)
    for a in scene.agents:
        if len(a.states) != n:
            raise ValueError(f"agent {a.id} history length {len(a.states)} != ego {n}")
    if abs(scene.n_steps * scene.dt - scene.horizon) > 1e-9:
        raise ValueError("horizon must be a multiple of dt")
    for lane in scene.road.lanes:
        if lane.speed_limit <= 0:
            raise ValueError("speed limit must be positive")
    if len(scene.road.route) < 2:
        raise ValueError("route centerline needs at least 2 points")


def footprint_corners(track_or_state) -> np.ndarray:
    if isinstance(track_or_state, AgentTrack):
        x, y, th, _ = track_or_state.states[-1]
        return box_corners(x, y, th, track_or_state.half_length, track_or_state.half_width)
    s = track_or_state
    return box_corners(s.x, s.y, s.theta, s.half_length, s.half_width)


def initial_overlaps(scene: Scene) -> int:
    """Number of pairs (ego included) whose current footprints overlap."""
    tracks = (scene.ego,) + scene.agents
    corners = np.array([footprint_corners(t) for t in tracks])
    count = 0
    for i in range(len(tracks)):
        for j in range(i + 1, len(tracks)):
            if box_distance(corners[i], corners[j]) <= 0.0:
                count += 1
    return count


# ---------------------------------------------------------------------------
# JSON


def _track_to_json(t: AgentTrack) -> dict:
    return {
        "id": t.id,
        "kind": t.kind,
        "half_length": t.half_length,
        "half_width": t.half_width,
        "states": t.states.tolist(),
    }


def _track_from_json(d: dict) -> AgentTrack:
    return AgentTrack(d["id"], np.array(d["states"], dtype=float), d["kind"], d["half_length"], d["half_width"])


def scene_to_dict(scene: Scene) -> dict:
    road = scene.road
    return {
        "dt": scene.dt,
        "horizon": scene.horizon,
        "ego": _track_to_json(scene.ego),
        "agents": [_track_to_json(a) for a in scene.agents],
        "road": {
            "lanes": [{"points": l.points.tolist(), "speed_limit": l.speed_limit} for l in road.lanes],
            "drivable": [p.tolist() for p in road.drivable],
            "crosswalks": [p.tolist() for p in road.crosswalks],
            "route": road.route.tolist(),
            "lights": [{"stop_point": l.stop_point.tolist(), "state": l.state} for l in road.lights],
        },
    }


def scene_from_dict(d: dict) -> Scene:
    unknown = set(d) - {"dt", "horizon", "ego", "agents", "road"}
    if unknown:
        raise ValueError(f"unknown scene keys: {sorted(unknown)}")
    r = d["road"]
    road = RoadGraph(
        lanes=[Lane(np.array(l["points"]), l["speed_limit"]) for l in r["lanes"]],
        drivable=[np.array(p) for p in r.get("drivable", [])],
        crosswalks=[np.array(p) for p in r.get("crosswalks", [])],
        route=np.array(r["route"]),
        lights=[TrafficLight(np.array(l["stop_point"]), l["state"]) for l in r.get("lights", [])],
    )
    return Scene(
        ego=_track_from_json(d["ego"]),
        agents=[_track_from_json(a) for a in d["agents"]],
        road=road,
        dt=d["dt"],
        horizon=d["horizon"],
    )


def dumps_scene(scene: Scene) -> str:
    return json.dumps(scene_to_dict(scene), separators=(",", ":"))


def loads_scene(text: str) -> Scene:
    return scene_from_dict(json.loads(text))


def monitor_to_dict(m: MonitorInput) -> dict:
    if not m.present:
        return {"present": False}
    s = m.state
    return {
        "present": True,
        "state": [s.x, s.y, s.theta, s.v],
        "kind": s.kind,
        "half_length": s.half_length,
        "half_width": s.half_width,
    }


def monitor_from_dict(d: dict) -> MonitorInput:
    if not d.get("present"):
        return MonitorInput.absent()
    x, y, th, v = d["state"]
    return MonitorInput.of(AgentState(x, y, th, v, d["kind"], d["half_length"], d["half_width"]))


# ---------------------------------------------------------------------------
# synthetic generation


@dataclass(frozen=True)
class SceneConfig:
    lanes: tuple = (1, 4)
    agents: tuple = (0, 8)
    speed_limit: tuple = (8.0, 15.0)
    curvature: tuple = (-0.015, 0.015)
    p_straight: float = 0.4
    lane_width: float = 3.5
    road_length: float = 180.0
    point_spacing: float = 2.0
    ego_speed: tuple = (0.0, 12.0)
    p_pedestrian: float = 0.2
    p_crosswalk: float = 0.3
    p_light: float = 0.4
    p_red: float = 0.5
    world_extent: float = 200.0
    dt: float = DT
    history: int = HISTORY_LEN
    horizon: float = HORIZON

    def check(self):
        lo, hi = self.lanes
        if lo < 1 or hi > 4 or lo > hi:
            raise ValueError("lane count range must lie in [1, 4]")
        lo, hi = self.agents
        if lo < 0 or hi > 8 or lo > hi:
            raise ValueError("agent count range must lie in [0, 8]")
        if self.dt <= 0:
            raise ValueError("dt must be positive")
        if self.speed_limit[0] <= 0:
            raise ValueError("speed limits must be positive")


def _arc(length, curvature, spacing):
    n = max(2, int(np.ceil(length / spacing)) + 1)
    s = np.linspace(0.0, length, n)
    if abs(curvature) < 1e-9:
        return np.stack([s, np.zeros_like(s)], axis=1), s
    r = 1.0 / curvature
    ang = s * curvature
    return np.stack([r * np.sin(ang), r * (1.0 - np.cos(ang))], axis=1), s


def _offset_curve(s, curvature, offset):
    """Points of the curve parallel to the base arc at lateral ``offset`` (left positive)."""
    if abs(curvature) < 1e-9:
        return np.stack([s, np.full_like(s, offset)], axis=1)
    ang = s * curvature
    r = 1.0 / curvature
    base = np.stack([r * np.sin(ang), r * (1.0 - np.cos(ang))], axis=1)
    normal = np.stack([-np.sin(ang), np.cos(ang)], axis=1)
    return base + offset * normal


def _history_along(ref: ReferenceLine, s_now, d, v, n, dt):
    k = np.arange(n - 1, -1, -1, dtype=float)
    s = s_now - v * k * dt
    xy = ref.frenet_to_world(s, np.full_like(s, d))
    th = ref.heading_at(s)
    return np.column_stack([xy, th, np.full(n, v)])


def generate_scene(seed: int, config: SceneConfig | None = None, n_agents: int | None = None) -> Scene:
    """Random multi-lane road segment with agents; deterministic in ``seed``."""
    cfg = config or SceneConfig()
    cfg.check()
    rng = np.random.default_rng(seed)
    n_lanes = int(rng.integers(cfg.lanes[0], cfg.lanes[1] + 1))
    kappa = 0.0 if rng.random() < cfg.p_straight else float(rng.uniform(*cfg.curvature))
    limit = float(rng.uniform(*cfg.speed_limit))
    route_idx = int(rng.integers(0, n_lanes))
    w = cfg.lane_width
    offsets = [(i - route_idx) * w for i in range(n_lanes)]

    _, s = _arc(cfg.road_length, kappa, cfg.point_spacing)
    local_lanes = [_offset_curve(s, kappa, o) for o in offsets]
    left_edge = _offset_curve(s, kappa, max(offsets) + w / 2)
    right_edge = _offset_curve(s, kappa, min(offsets) - w / 2)
    local_drivable = np.vstack([right_edge, left_edge[::-1]])

    # random world pose
    yaw = float(rng.uniform(-np.pi, np.pi))
    origin = rng.uniform(-cfg.world_extent, cfg.world_extent, size=2)
    c, sn = np.cos(yaw), np.sin(yaw)
    R = np.array([[c, -sn], [sn, c]])

    def world(p):
        return np.asarray(p) @ R.T + origin

    lanes = [Lane(world(p), limit) for p in local_lanes]
    route = world(local_lanes[route_idx])
    road_ref = ReferenceLine(route)
    n_hist = cfg.history
    dt = cfg.dt

    s_ego = float(rng.uniform(40.0, 60.0))
    crosswalks = []
    cw_s = None
    if rng.random() < cfg.p_crosswalk:
        cw_s = s_ego + float(rng.uniform(15.0, 60.0))
        lo, hi = min(offsets) - w / 2 - 2.0, max(offsets) + w / 2 + 2.0
        quad = [(cw_s - 2.0, lo), (cw_s + 2.0, lo), (cw_s + 2.0, hi), (cw_s - 2.0, hi)]
        crosswalks.append(
            np.array([road_ref.frenet_to_world(np.array(a), np.array(b)) for a, b in quad])
        )
    lights = []
    if rng.random() < cfg.p_light:
        stop_s = s_ego + float(rng.uniform(10.0, 50.0))
        state = "red" if rng.random() < cfg.p_red else "green"
        lights.append(TrafficLight(road_ref.position_at(stop_s), state))

    v_ego = float(rng.uniform(*cfg.ego_speed))
    ego_states = _history_along(road_ref, s_ego, 0.0, v_ego, n_hist, dt)
    ego = AgentTrack("ego", ego_states, VEHICLE, *DEFAULT_FOOTPRINT[VEHICLE])

    want = int(rng.integers(cfg.agents[0], cfg.agents[1] + 1)) if n_agents is None else int(n_agents)
    placed: list[AgentTrack] = []
    boxes = [footprint_corners(ego)]
    lane_refs = [ReferenceLine(l.points) for l in lanes]
    attempts = 0
    while len(placed) < want and attempts < 50 * max(want, 1):
        attempts += 1
        if rng.random() < cfg.p_pedestrian:
            kind = PEDESTRIAN
            hl, hw = DEFAULT_FOOTPRINT[PEDESTRIAN]
            v = float(rng.uniform(0.0, 1.8))
            if cw_s is not None and rng.random() < 0.5:
                s_a = cw_s + float(rng.uniform(-1.5, 1.5))
                d_a = float(rng.uniform(min(offsets) - w / 2 - 2.0, max(offsets) + w / 2 + 2.0))
                heading = road_ref.heading_at(s_a) + (np.pi / 2 if rng.random() < 0.5 else -np.pi / 2)
            else:
                s_a = s_ego + float(rng.uniform(-20.0, 60.0))
                side = 1.0 if rng.random() < 0.5 else -1.0
                edge = max(offsets) + w / 2 if side > 0 else min(offsets) - w / 2
                d_a = edge + side * float(rng.uniform(1.0, 4.0))
                heading = road_ref.heading_at(s_a) + (0.0 if rng.random() < 0.5 else np.pi)
            xy = road_ref.frenet_to_world(np.array(s_a), np.array(d_a))
            vx, vy = v * np.cos(heading), v * np.sin(heading)
            k = np.arange(n_hist - 1, -1, -1, dtype=float)
            states = np.column_stack(
                [xy[0] - vx * k * dt, xy[1] - vy * k * dt, np.full(n_hist, heading), np.full(n_hist, v)]
            )
        else:
            kind = VEHICLE
            hl, hw = DEFAULT_FOOTPRINT[VEHICLE]
            li = int(rng.integers(0, n_lanes))
            s_a = s_ego + float(rng.uniform(-30.0, 70.0))
            v = float(rng.uniform(0.0, limit * 1.1))
            states = _history_along(lane_refs[li], s_a, 0.0, v, n_hist, dt)
        x, y, th, _ = states[-1]
        box = box_corners(x, y, th, hl, hw)
        if any(box_distance(box, b) <= 0.5 for b in boxes):
            continue
        boxes.append(box)
        placed.append(AgentTrack(f"a{len(placed)}", states, kind, hl, hw))

    road = RoadGraph(lanes, [world(local_drivable)], crosswalks, route, lights)
    return Scene(ego, placed, road, dt, cfg.horizon)
