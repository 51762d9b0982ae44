"""Open-loop forecasts for non-ego agents.

Vehicles follow their nearest lane centerline at constant speed; pedestrians
(and vehicles with no lane within reach) move at constant velocity.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import interpolate_polyline, project_to_polyline, wrap_angle, cumulative_length
from .scene import PEDESTRIAN, AgentTrack, RoadGraph, Scene

LANE_ASSOCIATION_RADIUS = 5.0


@dataclass(frozen=True, eq=False)
class PredictedTrack:
    agent_id: str
    states: np.ndarray  # (T/dt, 4) rows at t = dt, 2dt, ..., T
    kind: str
    half_length: float
    half_width: float


def _steps(T: float, dt: float) -> int:
    n = int(round(T / dt))
    if abs(n * dt - T) > 1e-9 or n <= 0:
        raise ValueError(f"horizon {T} is not a positive multiple of dt {dt}")
    return n


def constant_velocity(state_row, n: int, dt: float) -> np.ndarray:
    x, y, th, v = state_row
    t = dt * np.arange(1, n + 1)
    return np.column_stack(
        [x + v * np.cos(th) * t, y + v * np.sin(th) * t, np.full(n, th), np.full(n, v)]
    )


def associate_lane(xy, theta, road: RoadGraph, radius: float = LANE_ASSOCIATION_RADIUS):
    """Nearest lane within ``radius``; ties broken by smaller heading difference.

    Returns ``(lane_index, s, reverse)`` or ``None``.
    """
    best = None
    for i, lane in enumerate(road.lanes):
        cum = cumulative_length(lane.points)
        s, _, dist, seg = project_to_polyline(xy, lane.points, cum)
        dist = float(dist[0])
        if dist > radius:
            continue
        seg_vec = lane.points[seg[0] + 1] - lane.points[seg[0]]
        dh = abs(wrap_angle(theta - np.arctan2(seg_vec[1], seg_vec[0])))
        key = (round(dist, 9), min(dh, np.pi - dh))
        if best is None or key < best[0]:
            best = (key, i, float(s[0]), dh > np.pi / 2)
    if best is None:
        return None
    return best[1], best[2], best[3]


def predict_agent(track: AgentTrack, road: RoadGraph, T: float, dt: float) -> PredictedTrack:
    n = _steps(T, dt)
    last = track.states[-1]
    x, y, th, v = last
    states = None
    if track.kind != PEDESTRIAN:
        if v == 0.0:
            states = np.tile(last, (n, 1))
        else:
            assoc = associate_lane(np.array([x, y]), th, road)
            if assoc is not None:
                li, s0, reverse = assoc
                pts = road.lanes[li].points
                cum = cumulative_length(pts)
                sign = -1.0 if reverse else 1.0
                s = s0 + sign * v * dt * np.arange(1, n + 1)
                xy, heading = interpolate_polyline(pts, s, cum)
                if reverse:
                    heading = heading + np.pi
                states = np.column_stack([xy, wrap_angle(heading), np.full(n, v)])
    if states is None:
        states = constant_velocity(last, n, dt)
    return PredictedTrack(track.id, states, track.kind, track.half_length, track.half_width)


def predict_all(scene: Scene) -> list[PredictedTrack]:
    return [predict_agent(a, scene.road, scene.horizon, scene.dt) for a in scene.agents]
