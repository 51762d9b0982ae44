"""Traffic-rule robustness, the rank-weighted hierarchy reward and class labels."""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from .geometry import box_corners, box_distance, wrap_angle
from .prediction import PredictedTrack, predict_all
from .scene import Scene
from .trajectory import Trajectory


class RuleId(enum.IntEnum):
    """Rules in decreasing order of importance; the value is the rank."""

    CollisionAvoidance = 1
    OffroadAvoidance = 2
    TrafficLight = 3
    SpeedLimit = 4
    Progression = 5
    NearCenterline = 6
    AlignedCenterline = 7


N_RULES = len(RuleId)
WEIGHTS = np.array([2.0 ** (8 - r) for r in RuleId])  # 128 ... 2


class SafetyClass(enum.IntEnum):
    SAFE = 0
    RISKY = 1
    CRITICAL = 2

    @property
    def label(self) -> str:
        return self.name.capitalize()

    @classmethod
    def parse(cls, value) -> "SafetyClass":
        if isinstance(value, str):
            return cls[value.upper()]
        return cls(int(value))


CLASS_NAMES = [c.label for c in SafetyClass]


@dataclass(frozen=True)
class RuleConfig:
    d_col: float = 0.5
    rho_max: float = 100.0
    progress_min: float = 1.0
    d_lat_max: float = 1.5
    theta_align_max: float = 0.5
    normalizers: tuple = (2.0, 2.0, 5.0, 2.0, 5.0, 1.5, 0.5)
    safe_above: float = 225.0
    critical_below: float = 150.0


DEFAULT_RULES = RuleConfig()


@dataclass(frozen=True)
class HierarchyReward:
    reward: float
    cls: SafetyClass


def _as_plan_array(plans) -> tuple[np.ndarray, float, float]:
    if isinstance(plans, Trajectory):
        return plans.states[None], plans.half_length, plans.half_width
    if isinstance(plans, np.ndarray):
        return plans if plans.ndim == 3 else plans[None], 2.3, 1.0
    plans = list(plans)
    return np.stack([p.states for p in plans]), plans[0].half_length, plans[0].half_width


def agent_futures(scene: Scene, predictions=None):
    """Per-agent state arrays over t = 0..T (current state prepended) plus footprints."""
    if predictions is None:
        predictions = predict_all(scene)
    rows, dims = [], []
    for track, pred in zip(scene.agents, predictions):
        rows.append(np.vstack([track.states[-1], pred.states]))
        dims.append((pred.half_length, pred.half_width))
    return rows, dims


def collision_robustness(ego_states, ego_dims, futures, dims, d_col, rho_max):
    """min over t and agents of footprint separation distance minus ``d_col``.

    ``ego_states`` is (P, N+1, 4); returns (P,). Exact box distances are only
    computed for pairs whose circumscribed-circle lower bound can beat the
    plan's best center distance (an upper bound on its box distance).
    """
    P = ego_states.shape[0]
    if not futures:
        return np.full(P, rho_max)
    ag_states = np.stack(futures, axis=1)  # (N+1, A, 4)
    ag_dims = np.asarray(dims, dtype=float)  # (A, 2)
    r_ego = float(np.hypot(*ego_dims))
    r_ag = np.hypot(ag_dims[:, 0], ag_dims[:, 1])
    diff = ego_states[:, :, None, :2] - ag_states[None, :, :, :2]
    cdist = np.sqrt(np.sum(diff * diff, axis=-1))  # (P, N+1, A)
    lower = cdist - r_ego - r_ag
    upper = cdist.min(axis=(1, 2))
    p, t, a = np.nonzero(lower <= upper[:, None, None])
    ego = box_corners(ego_states[p, t, 0], ego_states[p, t, 1], ego_states[p, t, 2], *ego_dims)
    ag = box_corners(ag_states[t, a, 0], ag_states[t, a, 1], ag_states[t, a, 2], ag_dims[a, 0], ag_dims[a, 1])
    d = box_distance(ego, ag)
    best = np.full(P, np.inf)
    np.minimum.at(best, p, d)
    return np.minimum(best - d_col, rho_max)


def collision_robustness_brute(ego_states, ego_dims, futures, dims, d_col, rho_max):
    """Reference: exact distance for every (plan, step, agent) triple."""
    P = ego_states.shape[0]
    if not futures:
        return np.full(P, rho_max)
    ego = box_corners(ego_states[..., 0], ego_states[..., 1], ego_states[..., 2], *ego_dims)  # (P, N+1, 4, 2)
    ag = np.stack(
        [box_corners(f[:, 0], f[:, 1], f[:, 2], hl, hw) for f, (hl, hw) in zip(futures, dims)], axis=1
    )  # (N+1, A, 4, 2)
    d = box_distance(ego[:, :, None], ag[None])  # (P, N+1, A)
    return np.minimum(d.min(axis=(1, 2)) - d_col, rho_max)


def robustness(plans, scene: Scene, predictions=None, config: RuleConfig = DEFAULT_RULES) -> np.ndarray:
    """Robustness of each rule for each plan; shape (P, 7), or (7,) for a single Trajectory."""
    single = isinstance(plans, Trajectory)
    st, hl, hw = _as_plan_array(plans)
    n = scene.n_steps + 1
    if st.shape[1] != n:
        raise ValueError(f"plan has {st.shape[1]} states, scene horizon needs {n}")
    if isinstance(plans, Trajectory) and abs(plans.dt - scene.dt) > 1e-12:
        raise ValueError("plan and scene dt differ")
    if predictions is not None:
        for p in predictions:
            if len(p.states) != n - 1:
                raise ValueError("prediction horizon does not match the plan")
    cfg = config
    P = st.shape[0]
    rho = np.empty((P, N_RULES))
    road = scene.road

    futures, dims = agent_futures(scene, predictions)
    rho[:, 0] = collision_robustness(st, (hl, hw), futures, dims, cfg.d_col, cfg.rho_max)

    corners = box_corners(st[..., 0], st[..., 1], st[..., 2], hl, hw)  # (P, N+1, 4, 2)
    if road.drivable:
        sd = road.drivable_signed_distance(corners)
        rho[:, 1] = np.minimum(sd.min(axis=(1, 2)), cfg.rho_max)
    else:
        rho[:, 1] = cfg.rho_max

    ref = road.reference
    flat = st[..., :2].reshape(-1, 2)
    s, lat, _ = ref.project(flat)
    s = s.reshape(P, n)
    lat = lat.reshape(P, n)

    rho3 = np.full(P, cfg.rho_max)
    front = s + hl
    for light in road.lights:
        if light.state != "red":
            continue
        s_stop = float(ref.project(light.stop_point[None])[0][0])
        relevant = front[:, 0] <= s_stop
        margin = s_stop - front.max(axis=1)
        rho3 = np.where(relevant, np.minimum(rho3, margin), rho3)
    rho[:, 2] = np.minimum(rho3, cfg.rho_max)

    if road.lanes:
        best_d = np.full(flat.shape[0], np.inf)
        limit = np.zeros(flat.shape[0])
        for lane, index in zip(road.lanes, road.lane_indices):
            _, _, dist, _ = index.project(flat)
            closer = dist < best_d
            best_d = np.where(closer, dist, best_d)
            limit = np.where(closer, lane.speed_limit, limit)
        rho[:, 3] = np.minimum((limit.reshape(P, n) - st[..., 3]).min(axis=1), cfg.rho_max)
    else:
        rho[:, 3] = cfg.rho_max

    rho[:, 4] = np.minimum(s[:, -1] - s[:, 0] - cfg.progress_min, cfg.rho_max)
    rho[:, 5] = cfg.d_lat_max - np.abs(lat).max(axis=1)
    align = np.abs(wrap_angle(st[..., 2] - ref.heading_at(s)))
    rho[:, 6] = cfg.theta_align_max - align.max(axis=1)
    return rho[0] if single else rho


def hierarchy_reward(rho, config: RuleConfig = DEFAULT_RULES) -> np.ndarray:
    """Rank-weighted reward; satisfied rules dominate, the clamped mean breaks ties."""
    rho = np.asarray(rho, dtype=float)
    if not np.isfinite(rho).all():
        raise ValueError("robustness values must be finite")
    norm = np.asarray(config.normalizers, dtype=float)
    discrete = (rho >= 0).astype(float) @ WEIGHTS
    tie = np.clip(rho / norm, -1.0, 1.0).sum(axis=-1) / N_RULES
    return discrete + tie


def classify_reward(R, config: RuleConfig = DEFAULT_RULES):
    """Safe above 225, Critical below 150, Risky in between (bounds inclusive)."""
    R = np.asarray(R, dtype=float)
    out = np.where(R > config.safe_above, SafetyClass.SAFE, np.where(R < config.critical_below, SafetyClass.CRITICAL, SafetyClass.RISKY))
    if out.ndim == 0:
        return SafetyClass(int(out))
    return out.astype(np.int64)


def evaluate_plans(plans, scene: Scene, config: RuleConfig = DEFAULT_RULES):
    """Ground-truth labelling: predict agents, score every plan, classify. Returns (R, classes)."""
    preds = predict_all(scene)
    rho = robustness(plans, scene, preds, config)
    R = hierarchy_reward(np.atleast_2d(rho), config)
    return R, classify_reward(R, config)


def evaluate_plan(plan: Trajectory, scene: Scene, config: RuleConfig = DEFAULT_RULES) -> HierarchyReward:
    R, cls = evaluate_plans(plan, scene, config)
    return HierarchyReward(float(R[0]), SafetyClass(int(cls[0])))
