"""Learned plan-safety monitor.

Given the perceived scene, the perception monitor's missed-agent report and a
batch of candidate plans, predict each plan's class (Safe / Risky / Critical)
under the reported failure. The network:

* per-type MLP embeddings (ego history, agent histories, monitor report, road
  points, plan states) with sinusoidal time encodings on the time axis only;
* road polylines become tokens by a point MLP and a max-pool per chunk;
* scene blocks alternate attention over time (within each element) and across
  elements (ego, agents, monitor; road tokens join as static keys);
* plan blocks apply self-attention over plan time and cross-attention to the
  scene context, which is computed once and shared by all plans of a scene;
* a learned query attends over itself and the plan tokens; a zero-initialized
  head maps it to three logits.

Gradients come from a hand-written backward pass of this fixed graph.
"""

from __future__ import annotations

import json
import logging
import struct
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import nn
from .config import to_dict
from .geometry import wrap_angle
from .rules import DEFAULT_RULES, SafetyClass
from .scene import AgentState, MonitorInput, Scene

log = logging.getLogger(__name__)

N_CLASSES = 3
HIST_FEATURES = 10
ROAD_FEATURES = 12
PLAN_FEATURES = 15
ROAD_TYPES = ("lane", "route", "boundary", "crosswalk", "light")


@dataclass(frozen=True)
class ModelConfig:
    d_model: int = 64
    heads: int = 4
    scene_blocks: int = 2
    plan_blocks: int = 2
    ffn_mult: int = 2
    history: int = 10
    plan_stride: int = 2
    road_radius: float = 60.0
    road_spacing: float = 2.0
    chunk: int = 8
    pos_scale: float = 20.0
    speed_scale: float = 10.0
    prox_scale: float = 15.0

    def check(self):
        if self.d_model % self.heads:
            raise ValueError("d_model must be divisible by heads")
        if min(self.d_model, self.heads, self.history, self.plan_stride, self.chunk) < 1:
            raise ValueError("model sizes must be positive")


DEFAULT_MODEL = ModelConfig()


# ---------------------------------------------------------------- encoding


@dataclass(frozen=True, eq=False)
class SceneTokens:
    """Plan-independent inputs of one scene, in the ego's current frame."""

    ego: np.ndarray  # (T, HIST_FEATURES)
    agents: np.ndarray  # (A, T, HIST_FEATURES)
    monitor: np.ndarray  # (HIST_FEATURES,)
    monitor_mask: bool
    road: np.ndarray  # (R, L, ROAD_FEATURES)
    road_point_mask: np.ndarray  # (R, L)
    agent_ids: tuple = ()


@dataclass(frozen=True, eq=False)
class TokenSet:
    scene: SceneTokens
    plans: np.ndarray  # (P, K, PLAN_FEATURES)

    @property
    def agent_mask(self) -> np.ndarray:
        return np.ones(len(self.scene.agents), bool)


def ego_frame(scene: Scene):
    e = scene.ego.states[-1]
    return e[:2].copy(), float(e[2])


def _to_local(xy, origin, theta):
    c, s = np.cos(theta), np.sin(theta)
    d = np.asarray(xy, dtype=float) - origin
    return np.stack([c * d[..., 0] + s * d[..., 1], -s * d[..., 0] + c * d[..., 1]], axis=-1)


def _state_features(xy, th, v, cfg: ModelConfig):
    r = np.hypot(xy[..., 0], xy[..., 1])
    return np.stack(
        [
            xy[..., 0] / cfg.pos_scale,
            xy[..., 1] / cfg.pos_scale,
            np.cos(th),
            np.sin(th),
            v / cfg.speed_scale,
            np.exp(-r / cfg.prox_scale),
        ],
        axis=-1,
    )


def _history_features(states, kind, hl, hw, origin, theta, cfg):
    xy = _to_local(states[..., :2], origin, theta)
    th = wrap_angle(states[..., 2] - theta)
    base = _state_features(xy, th, states[..., 3], cfg)
    extra = np.array([kind == "vehicle", kind == "pedestrian", hl / 2.3, hw / 1.0], dtype=float)
    return np.concatenate([base, np.broadcast_to(extra, base.shape[:-1] + (4,))], axis=-1)


def _pad_history(states, T):
    if len(states) >= T:
        return states[-T:]
    return np.vstack([np.repeat(states[:1], T - len(states), axis=0), states])


def _resample(poly, spacing, closed=False):
    poly = np.asarray(poly, dtype=float)
    if closed:
        poly = np.vstack([poly, poly[:1]])
    seg = np.linalg.norm(np.diff(poly, axis=0), axis=1)
    cum = np.concatenate([[0.0], np.cumsum(seg)])
    if cum[-1] <= 0:
        return poly[:1], np.array([[1.0, 0.0]])
    s = np.arange(0.0, cum[-1] + 1e-9, spacing)
    pts = np.column_stack([np.interp(s, cum, poly[:, 0]), np.interp(s, cum, poly[:, 1])])
    j = np.clip(np.searchsorted(cum, s, side="right") - 1, 0, len(seg) - 1)
    d = np.diff(poly, axis=0)[j]
    n = np.linalg.norm(d, axis=1, keepdims=True)
    return pts, d / np.where(n > 0, n, 1.0)


def _road_chunks(scene: Scene, origin, theta, cfg: ModelConfig):
    road = scene.road
    items = []  # (points_local, dirs_local, type, speed_limit, red)
    c, s = np.cos(theta), np.sin(theta)
    rot = np.array([[c, s], [-s, c]])

    def add(poly, typ, closed=False, limit=0.0, red=0.0):
        pts, dirs = _resample(_to_local(poly, origin, theta), cfg.road_spacing, closed)
        items.append((pts, dirs, typ, limit, red))

    for lane in road.lanes:
        add(lane.points, "lane", limit=lane.speed_limit)
    add(road.route, "route")
    for poly in road.drivable:
        add(poly, "boundary", closed=True)
    for poly in road.crosswalks:
        add(poly, "crosswalk", closed=True)
    for light in road.lights:
        p = _to_local(light.stop_point[None], origin, theta)
        items.append((p, np.array([[1.0, 0.0]]), "light", 0.0, 1.0 if light.state == "red" else 0.0))

    chunks = []
    for pts, dirs, typ, limit, red in items:
        keep = np.hypot(pts[:, 0], pts[:, 1]) <= cfg.road_radius
        if not keep.any():
            continue
        # consecutive kept runs, split into chunks of cfg.chunk points
        idx = np.flatnonzero(keep)
        runs = np.split(idx, np.flatnonzero(np.diff(idx) > 1) + 1)
        for run in runs:
            for k in range(0, len(run), cfg.chunk):
                sel = run[k : k + cfg.chunk]
                p, d = pts[sel], dirs[sel]
                r = np.hypot(p[:, 0], p[:, 1])
                onehot = np.zeros((len(sel), len(ROAD_TYPES)))
                onehot[:, ROAD_TYPES.index(typ)] = 1.0
                f = np.column_stack(
                    [
                        p / cfg.pos_scale,
                        d,
                        np.exp(-r / cfg.prox_scale),
                        onehot,
                        np.full(len(sel), limit / 15.0),
                        np.full(len(sel), red),
                    ]
                )
                chunks.append(f)
    R = max(len(chunks), 1)
    road = np.zeros((R, cfg.chunk, ROAD_FEATURES))
    mask = np.zeros((R, cfg.chunk), bool)
    for i, f in enumerate(chunks):
        road[i, : len(f)] = f
        mask[i, : len(f)] = True
    return road, mask


def encode_scene(perceived: Scene, failure: Optional[MonitorInput], cfg: ModelConfig = DEFAULT_MODEL) -> SceneTokens:
    origin, theta = ego_frame(perceived)
    T = cfg.history
    e = perceived.ego
    ego = _history_features(_pad_history(e.states, T), "vehicle", e.half_length, e.half_width, origin, theta, cfg)
    agents = np.zeros((len(perceived.agents), T, HIST_FEATURES))
    for i, a in enumerate(perceived.agents):
        agents[i] = _history_features(_pad_history(a.states, T), a.kind, a.half_length, a.half_width, origin, theta, cfg)
    if failure is not None and failure.present:
        f = failure.state
        mon = _history_features(np.array([f.x, f.y, f.theta, f.v]), f.kind, f.half_length, f.half_width, origin, theta, cfg)
        present = True
    else:
        mon = np.zeros(HIST_FEATURES)
        present = False
    road, pmask = _road_chunks(perceived, origin, theta, cfg)
    return SceneTokens(ego, agents, mon, present, road, pmask, tuple(a.id for a in perceived.agents))


def plan_steps(n_states: int, cfg: ModelConfig = DEFAULT_MODEL) -> np.ndarray:
    idx = np.arange(0, n_states, cfg.plan_stride)
    if idx[-1] != n_states - 1:
        idx = np.append(idx, n_states - 1)
    return idx


def _plan_road_features(perceived: Scene, st: np.ndarray) -> np.ndarray:
    """Route-relative quantities of plan states: (P, K, 5), all frame-invariant."""
    from .geometry import box_corners

    road = perceived.road
    hl, hw = perceived.ego.half_length, perceived.ego.half_width
    P, K = st.shape[:2]
    out = np.zeros((P, K, 5))
    if road.drivable:
        corners = box_corners(st[..., 0], st[..., 1], st[..., 2], hl, hw)
        out[..., 0] = np.clip(road.drivable_signed_distance(corners).min(axis=-1) / 2.0, -2.0, 2.0)
    else:
        out[..., 0] = 2.0
    s, lat, _ = road.reference.project(st[..., :2])
    out[..., 1] = np.clip(lat / 3.5, -3.0, 3.0)
    out[..., 2] = np.clip(wrap_angle(st[..., 2] - road.reference.heading_at(s)) / 0.5, -3.0, 3.0)
    if road.lanes:
        flat = st[..., :2].reshape(-1, 2)
        best = np.full(len(flat), np.inf)
        limit = np.zeros(len(flat))
        for lane, index in zip(road.lanes, road.lane_indices):
            dist = index.project(flat)[2]
            closer = dist < best
            best = np.where(closer, dist, best)
            limit = np.where(closer, lane.speed_limit, limit)
        out[..., 3] = np.clip((st[..., 3] - limit.reshape(P, K)) / 5.0, -3.0, 3.0)
    margin = np.ones((P, K))
    front = s + hl
    for light in road.lights:
        if light.state != "red":
            continue
        s_stop = float(road.reference.project(light.stop_point[None])[0][0])
        relevant = front[:, :1] <= s_stop
        margin = np.where(relevant, np.minimum(margin, np.clip((s_stop - front) / 10.0, -1.0, 1.0)), margin)
    out[..., 4] = margin
    return out


def _box_gap(st, agent, hl, hw, dims):
    """Separation between the ego box at plan states ``st`` (P, K, 4) and agent boxes.

    ``agent`` is (A, K, 4) agent states at the same times, ``dims`` (A, 2). The
    agent box is replaced by its axis-aligned hull in the ego frame, so the gap is
    a slight underestimate. Returns gaps (P, K, A) and ego-frame offsets (P, K, A, 2).
    """
    th = st[..., 2][..., None]
    agent = np.swapaxes(agent, 0, 1)[None]  # (1, K, A, 4)
    d = agent[..., :2] - st[:, :, None, :2]
    c, s = np.cos(th), np.sin(th)
    dx = c * d[..., 0] + s * d[..., 1]
    dy = -s * d[..., 0] + c * d[..., 1]
    rel = wrap_angle(agent[..., 2] - th)
    ahl, ahw = dims[:, 0], dims[:, 1]
    ex = ahl * np.abs(np.cos(rel)) + ahw * np.abs(np.sin(rel))
    ey = ahl * np.abs(np.sin(rel)) + ahw * np.abs(np.cos(rel))
    gx = np.abs(dx) - hl - ex
    gy = np.abs(dy) - hw - ey
    outside = np.hypot(np.maximum(gx, 0.0), np.maximum(gy, 0.0))
    gap = np.where((gx > 0) | (gy > 0), outside, np.maximum(gx, gy))
    return gap, np.stack([dx, dy], axis=-1)


def _constant_velocity(rows, t):
    """(A, 4) current states rolled forward to times ``t`` (K,) -> (A, K, 4)."""
    x, y, th, v = (rows[:, i : i + 1] for i in range(4))
    return np.stack(
        np.broadcast_arrays(x + v * np.cos(th) * t, y + v * np.sin(th) * t, th + 0 * t, v + 0 * t), axis=-1
    )


def _plan_agent_features(perceived: Scene, failure: Optional[MonitorInput], st: np.ndarray, t: np.ndarray) -> np.ndarray:
    """Time-aligned clearance of plan states to constant-velocity agents: (P, K, 4).

    Columns: gap to the nearest perceived agent, gap to the reported agent, and the
    ego-frame offset of whichever is nearest.
    """
    P, K = st.shape[:2]
    hl, hw = perceived.ego.half_length, perceived.ego.half_width
    out = np.zeros((P, K, 4))
    far = np.full((P, K), 10.0)
    best = far.copy()
    off = np.zeros((P, K, 2))
    cols = []
    for group in ("agents", "monitor"):
        if group == "agents":
            rows = np.array([a.states[-1] for a in perceived.agents]).reshape(-1, 4)
            dims = np.array([(a.half_length, a.half_width) for a in perceived.agents]).reshape(-1, 2)
        elif failure is not None and failure.present:
            f = failure.state
            rows = np.array([[f.x, f.y, f.theta, f.v]])
            dims = np.array([[f.half_length, f.half_width]])
        else:
            rows = np.zeros((0, 4))
            dims = np.zeros((0, 2))
        if len(rows) == 0:
            cols.append(far)
            continue
        gap, d = _box_gap(st, _constant_velocity(rows, t), hl, hw, dims)
        k = np.argmin(gap, axis=-1)
        g = np.take_along_axis(gap, k[..., None], -1)[..., 0]
        dk = np.take_along_axis(d, k[..., None, None], -2)[..., 0, :]
        closer = g < best
        best = np.where(closer, g, best)
        off = np.where(closer[..., None], dk, off)
        cols.append(np.minimum(g, 10.0))
    # centred on the collision margin so the sign matches the collision rule
    margin = DEFAULT_RULES.d_col
    out[..., 0] = np.clip((cols[0] - margin) / 2.0, -1.0, 2.0)
    out[..., 1] = np.clip((cols[1] - margin) / 2.0, -1.0, 2.0)
    out[..., 2:] = np.clip(off / 10.0, -2.0, 2.0) * (best < 10.0)[..., None]
    return out


def encode_plans(perceived: Scene, plans, cfg: ModelConfig = DEFAULT_MODEL, failure: Optional[MonitorInput] = None) -> np.ndarray:
    """(P, K, PLAN_FEATURES) features of plan states at the token steps.

    Ego-frame pose and speed; route-relative terms computed on the perceived
    road (footprint clearance to the drivable boundary, lateral and heading
    offsets, speed over the lane limit, margin to a red stop line); and the
    time-aligned clearance to perceived agents and to the reported agent.
    """
    st = plans.states if hasattr(plans, "states") else np.asarray(plans, dtype=float)
    if st.ndim == 2:
        st = st[None]
    if len(st) == 0:
        return np.zeros((0, 0, PLAN_FEATURES))
    origin, theta = ego_frame(perceived)
    steps = plan_steps(st.shape[1], cfg)
    st = st[:, steps]
    xy = _to_local(st[..., :2], origin, theta)
    base = _state_features(xy, wrap_angle(st[..., 2] - theta), st[..., 3], cfg)
    agents = _plan_agent_features(perceived, failure, st, perceived.dt * steps)
    return np.concatenate([base, _plan_road_features(perceived, st), agents], axis=-1)


def encode(perceived: Scene, failure: Optional[MonitorInput], plan, cfg: ModelConfig = DEFAULT_MODEL) -> TokenSet:
    return TokenSet(encode_scene(perceived, failure, cfg), encode_plans(perceived, plan, cfg, failure))


# ---------------------------------------------------------------- batching


@dataclass(frozen=True, eq=False)
class Batch:
    ego: np.ndarray  # (B, T, F)
    agents: np.ndarray  # (B, A, T, F)
    agent_mask: np.ndarray  # (B, A)
    monitor: np.ndarray  # (B, F)
    monitor_mask: np.ndarray  # (B,)
    road: np.ndarray  # (B, R, L, F)
    road_point_mask: np.ndarray  # (B, R, L)
    plans: np.ndarray  # (B, P, K, F)

    @property
    def road_mask(self) -> np.ndarray:
        return self.road_point_mask.any(axis=-1)


def collate(scenes: Sequence[SceneTokens], plans: Sequence[np.ndarray], dtype=np.float32) -> Batch:
    """Pad scenes to a common agent/road count; every scene must carry the same number of plans."""
    B = len(scenes)
    if B == 0:
        raise ValueError("empty batch")
    T = scenes[0].ego.shape[0]
    A = max(1, max(len(s.agents) for s in scenes))
    R = max(s.road.shape[0] for s in scenes)
    L = scenes[0].road.shape[1]
    P, K = plans[0].shape[:2]
    ego = np.zeros((B, T, HIST_FEATURES), dtype)
    agents = np.zeros((B, A, T, HIST_FEATURES), dtype)
    amask = np.zeros((B, A), bool)
    mon = np.zeros((B, HIST_FEATURES), dtype)
    mmask = np.zeros(B, bool)
    road = np.zeros((B, R, L, ROAD_FEATURES), dtype)
    pmask = np.zeros((B, R, L), bool)
    pl = np.zeros((B, P, K, PLAN_FEATURES), dtype)
    for i, (s, p) in enumerate(zip(scenes, plans)):
        if p.shape[:2] != (P, K):
            raise ValueError("all scenes in a batch need the same plan count and length")
        ego[i] = s.ego
        n = len(s.agents)
        if n:
            agents[i, :n] = s.agents
            amask[i, :n] = True
        mon[i] = s.monitor
        mmask[i] = s.monitor_mask
        r = s.road.shape[0]
        road[i, :r] = s.road
        pmask[i, :r] = s.road_point_mask
        pl[i] = p
    return Batch(ego, agents, amask, mon, mmask, road, pmask, pl)


# ---------------------------------------------------------------- parameters


def time_encoding(n: int, d: int, dtype=np.float32) -> np.ndarray:
    pos = np.arange(n)[:, None]
    i = np.arange(d // 2)[None]
    ang = pos / (10.0 ** (2 * i / max(d, 2)))  # short sequences: base 10 keeps frequencies distinct
    pe = np.zeros((n, d))
    pe[:, 0::2] = np.sin(ang)
    pe[:, 1::2] = np.cos(ang)[:, : (d - d // 2)]
    return pe.astype(dtype)


def init_params(cfg: ModelConfig = DEFAULT_MODEL, seed: int = 0, dtype=np.float32) -> dict:
    cfg.check()
    rng = np.random.default_rng(seed)
    d, h = cfg.d_model, cfg.d_model * cfg.ffn_mult
    p = {}
    nn.init_mlp(p, rng, "emb.ego", HIST_FEATURES, d, d, dtype)
    nn.init_mlp(p, rng, "emb.agent", HIST_FEATURES, d, d, dtype)
    nn.init_mlp(p, rng, "emb.monitor", HIST_FEATURES, d, d, dtype)
    nn.init_mlp(p, rng, "emb.road", ROAD_FEATURES, d, d, dtype)
    nn.init_mlp(p, rng, "emb.plan", PLAN_FEATURES, d, d, dtype)
    for i in range(cfg.scene_blocks):
        b = f"scene{i}"
        for ln in ("ln_t", "ln_e", "ln_r", "ln_f"):
            nn.init_layernorm(p, f"{b}.{ln}", d, dtype)
        nn.init_mha(p, rng, f"{b}.time", d, dtype)
        nn.init_mha(p, rng, f"{b}.elem", d, dtype)
        nn.init_mlp(p, rng, f"{b}.ffn", d, h, d, dtype)
    nn.init_layernorm(p, "ctx.ln", d, dtype)
    for j in range(cfg.plan_blocks):
        b = f"plan{j}"
        for ln in ("ln_s", "ln_c", "ln_f"):
            nn.init_layernorm(p, f"{b}.{ln}", d, dtype)
        nn.init_mha(p, rng, f"{b}.self", d, dtype)
        nn.init_mha(p, rng, f"{b}.cross", d, dtype)
        nn.init_mlp(p, rng, f"{b}.ffn", d, h, d, dtype)
    p["dec.query"] = (rng.standard_normal(d) * 0.1).astype(dtype)
    for ln in ("dec.ln", "dec.ln_f", "dec.ln_out"):
        nn.init_layernorm(p, ln, d, dtype)
    nn.init_mha(p, rng, "dec.attn", d, dtype)
    nn.init_mlp(p, rng, "dec.ffn", d, h, d, dtype)
    nn.init_linear(p, rng, "head", d, N_CLASSES, zero=True, dtype=dtype)
    return p


def n_parameters(params: dict) -> int:
    return int(sum(v.size for v in params.values()))


def flatten(params: dict) -> np.ndarray:
    return np.concatenate([params[k].ravel() for k in sorted(params)])


# ---------------------------------------------------------------- forward / backward


def _check(x, where):
    if not np.all(np.isfinite(x)):
        raise FloatingPointError(f"non-finite activations in {where}")


def forward(params: dict, batch: Batch, cfg: ModelConfig = DEFAULT_MODEL, keep_cache: bool = False):
    """Logits (B, P, 3); with ``keep_cache`` also the cache for :func:`backward`."""
    p = params
    dt = p["head.W"].dtype
    H = cfg.heads
    B, T = batch.ego.shape[:2]
    A = batch.agents.shape[1]
    R = batch.road.shape[1]
    P, K = batch.plans.shape[1:3]
    d = cfg.d_model
    E = A + 2
    c = {}

    ego_e, c["ego"] = nn.mlp_fwd(p, "emb.ego", batch.ego.astype(dt))
    ag_e, c["agent"] = nn.mlp_fwd(p, "emb.agent", batch.agents.astype(dt))
    mon_e, c["monitor"] = nn.mlp_fwd(p, "emb.monitor", batch.monitor.astype(dt))
    rp, c["road_pts"] = nn.mlp_fwd(p, "emb.road", batch.road.astype(dt))
    road, c["pool"] = nn.masked_max_fwd(rp, batch.road_point_mask)
    pe_t = time_encoding(T, d, dt)
    h = np.concatenate(
        [ego_e[:, None], ag_e, np.broadcast_to(mon_e[:, None, None, :], (B, 1, T, d))], axis=1
    ) + pe_t
    _check(h, "embeddings")
    elem_mask = np.concatenate([np.ones((B, 1), bool), batch.agent_mask, batch.monitor_mask[:, None]], axis=1)
    road_mask = batch.road_mask
    tmask = np.repeat(elem_mask.reshape(B * E, 1), T, axis=1)
    emask = np.concatenate(
        [np.repeat(elem_mask[:, None, :], T, axis=1), np.repeat(road_mask[:, None, :], T, axis=1)], axis=2
    ).reshape(B * T, E + R)

    for i in range(cfg.scene_blocks):
        b = f"scene{i}"
        x = h.reshape(B * E, T, d)
        n1, c[b + "ln_t"] = nn.layernorm_fwd(p, b + ".ln_t", x)
        a1, c[b + "time"] = nn.mha_fwd(p, b + ".time", n1, n1, tmask, H)
        x = x + a1
        y = x.reshape(B, E, T, d).transpose(0, 2, 1, 3).reshape(B * T, E, d)
        n2, c[b + "ln_e"] = nn.layernorm_fwd(p, b + ".ln_e", y)
        rn, c[b + "ln_r"] = nn.layernorm_fwd(p, b + ".ln_r", road)
        kv = np.concatenate([n2, np.repeat(rn, T, axis=0).reshape(B * T, R, d)], axis=1)
        a2, c[b + "elem"] = nn.mha_fwd(p, b + ".elem", n2, kv, emask, H)
        y = y + a2
        n3, c[b + "ln_f"] = nn.layernorm_fwd(p, b + ".ln_f", y)
        f, c[b + "ffn"] = nn.mlp_fwd(p, b + ".ffn", n3)
        y = y + f
        h = y.reshape(B, T, E, d).transpose(0, 2, 1, 3)
        _check(h, f"scene block {i}")

    ctx_raw = np.concatenate([h[:, :, -1, :], road], axis=1)
    ctx, c["ctx"] = nn.layernorm_fwd(p, "ctx.ln", ctx_raw)
    cmask = np.concatenate([elem_mask, road_mask], axis=1)

    z, c["plan_emb"] = nn.mlp_fwd(p, "emb.plan", batch.plans.astype(dt))
    z = z + time_encoding(K, d, dt)
    for j in range(cfg.plan_blocks):
        b = f"plan{j}"
        x = z.reshape(B * P, K, d)
        n1, c[b + "ln_s"] = nn.layernorm_fwd(p, b + ".ln_s", x)
        a1, c[b + "self"] = nn.mha_fwd(p, b + ".self", n1, n1, np.ones((B * P, K), bool), H)
        x = x + a1
        xq = x.reshape(B, P * K, d)
        n2, c[b + "ln_c"] = nn.layernorm_fwd(p, b + ".ln_c", xq)
        a2, c[b + "cross"] = nn.mha_fwd(p, b + ".cross", n2, ctx, cmask, H)
        xq = xq + a2
        n3, c[b + "ln_f"] = nn.layernorm_fwd(p, b + ".ln_f", xq)
        f, c[b + "ffn"] = nn.mlp_fwd(p, b + ".ffn", n3)
        xq = xq + f
        z = xq.reshape(B, P, K, d)
        _check(z, f"plan block {j}")

    x = z.reshape(B * P, K, d)
    q = np.broadcast_to(p["dec.query"], (B * P, 1, d))
    toks = np.concatenate([q, x], axis=1)
    n, c["dec_ln"] = nn.layernorm_fwd(p, "dec.ln", toks)
    a, c["dec_attn"] = nn.mha_fwd(p, "dec.attn", n[:, :1], n, np.ones((B * P, K + 1), bool), H)
    y = q + a
    n2, c["dec_ln_f"] = nn.layernorm_fwd(p, "dec.ln_f", y)
    f, c["dec_ffn"] = nn.mlp_fwd(p, "dec.ffn", n2)
    y = y + f
    yo, c["dec_ln_out"] = nn.layernorm_fwd(p, "dec.ln_out", y)
    logits, c["head"] = nn.linear_fwd(p, "head", yo)
    logits = logits.reshape(B, P, N_CLASSES)
    _check(logits, "head")
    if keep_cache:
        c["shape"] = (B, T, A, R, P, K, d, E)
        c["masks"] = (tmask, emask, cmask)
        return logits, c
    return logits


def backward(params: dict, dlogits: np.ndarray, cache: dict, cfg: ModelConfig = DEFAULT_MODEL) -> dict:
    """Gradients of sum(dlogits * logits) with respect to every parameter."""
    p = params
    c = cache
    g = {}
    B, T, A, R, P, K, d, E = c["shape"]

    dyo = nn.linear_bwd(p, g, "head", dlogits.reshape(B * P, 1, N_CLASSES), c["head"])
    dy = nn.layernorm_bwd(p, g, "dec.ln_out", dyo, c["dec_ln_out"])
    dn2 = nn.mlp_bwd(p, g, "dec.ffn", dy, c["dec_ffn"])
    dy = dy + nn.layernorm_bwd(p, g, "dec.ln_f", dn2, c["dec_ln_f"])
    dq = dy.copy()
    dnq, dnkv = nn.mha_bwd(p, g, "dec.attn", dy, c["dec_attn"])
    dn = dnkv
    dn[:, :1] += dnq
    dtoks = nn.layernorm_bwd(p, g, "dec.ln", dn, c["dec_ln"])
    dq = dq + dtoks[:, :1]
    g["dec.query"] = dq.reshape(-1, d).sum(axis=0)
    dz = dtoks[:, 1:].reshape(B, P, K, d)

    dctx = np.zeros((B, E + R, d), dtype=dz.dtype)
    for j in reversed(range(cfg.plan_blocks)):
        b = f"plan{j}"
        dxq = dz.reshape(B, P * K, d)
        dn3 = nn.mlp_bwd(p, g, b + ".ffn", dxq, c[b + "ffn"])
        dxq = dxq + nn.layernorm_bwd(p, g, b + ".ln_f", dn3, c[b + "ln_f"])
        dn2, dc = nn.mha_bwd(p, g, b + ".cross", dxq, c[b + "cross"])
        dctx += dc
        dxq = dxq + nn.layernorm_bwd(p, g, b + ".ln_c", dn2, c[b + "ln_c"])
        dx = dxq.reshape(B * P, K, d)
        dq1, dkv1 = nn.mha_bwd(p, g, b + ".self", dx, c[b + "self"])
        dx = dx + nn.layernorm_bwd(p, g, b + ".ln_s", dq1 + dkv1, c[b + "ln_s"])
        dz = dx.reshape(B, P, K, d)
    nn.mlp_bwd(p, g, "emb.plan", dz, c["plan_emb"])

    dctx_raw = nn.layernorm_bwd(p, g, "ctx.ln", dctx, c["ctx"])
    dh = np.zeros((B, E, T, d), dtype=dz.dtype)
    dh[:, :, -1, :] = dctx_raw[:, :E]
    droad = dctx_raw[:, E:].copy()

    for i in reversed(range(cfg.scene_blocks)):
        b = f"scene{i}"
        dy = dh.transpose(0, 2, 1, 3).reshape(B * T, E, d)
        dn3 = nn.mlp_bwd(p, g, b + ".ffn", dy, c[b + "ffn"])
        dy = dy + nn.layernorm_bwd(p, g, b + ".ln_f", dn3, c[b + "ln_f"])
        dn2, dkv = nn.mha_bwd(p, g, b + ".elem", dy, c[b + "elem"])
        dn2 = dn2 + dkv[:, :E]
        drn = dkv[:, E:].reshape(B, T, R, d).sum(axis=1)
        droad = droad + nn.layernorm_bwd(p, g, b + ".ln_r", drn, c[b + "ln_r"])
        dy = dy + nn.layernorm_bwd(p, g, b + ".ln_e", dn2, c[b + "ln_e"])
        dx = dy.reshape(B, T, E, d).transpose(0, 2, 1, 3).reshape(B * E, T, d)
        dq1, dkv1 = nn.mha_bwd(p, g, b + ".time", dx, c[b + "time"])
        dx = dx + nn.layernorm_bwd(p, g, b + ".ln_t", dq1 + dkv1, c[b + "ln_t"])
        dh = dx.reshape(B, E, T, d)

    nn.mlp_bwd(p, g, "emb.ego", dh[:, 0], c["ego"])
    nn.mlp_bwd(p, g, "emb.agent", dh[:, 1 : 1 + A], c["agent"])
    nn.mlp_bwd(p, g, "emb.monitor", dh[:, -1].sum(axis=1), c["monitor"])
    drp = nn.masked_max_bwd(droad, c["pool"])
    nn.mlp_bwd(p, g, "emb.road", drp, c["road_pts"])
    for k in p:
        if k not in g:
            g[k] = np.zeros_like(p[k])
    return g


# ---------------------------------------------------------------- loss


def softmax(logits):
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def class_weights(counts) -> np.ndarray:
    """Inverse-frequency weights normalized so a balanced set gets weight 1 per class."""
    counts = np.asarray(counts, dtype=float)
    total = counts.sum()
    present = counts > 0
    w = np.zeros(len(counts))
    w[present] = total / (present.sum() * counts[present])
    return w


def cross_entropy(logits, labels, weights=None):
    """Mean weighted cross-entropy and its gradient with respect to the logits."""
    logits = np.asarray(logits)
    flat = logits.reshape(-1, N_CLASSES).astype(np.float64)
    y = np.asarray(labels).reshape(-1)
    w = np.ones(N_CLASSES) if weights is None else np.asarray(weights, dtype=float)
    z = flat - flat.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    wy = w[y]
    N = len(y)
    loss = float(np.sum(-wy * logp[np.arange(N), y]) / N)
    grad = np.exp(logp)
    grad[np.arange(N), y] -= 1.0
    grad *= (wy / N)[:, None]
    return loss, grad.reshape(logits.shape).astype(logits.dtype)


def loss_and_grad(params, batch: Batch, labels, cfg: ModelConfig = DEFAULT_MODEL, weights=None):
    """(loss, gradient dict); ``labels`` is (B, P)."""
    logits, cache = forward(params, batch, cfg, keep_cache=True)
    loss, dlogits = cross_entropy(logits, labels, weights)
    return loss, backward(params, dlogits, cache, cfg)


def conservative_argmax(probs) -> np.ndarray:
    """Argmax with ties resolved toward the more severe class (Critical > Risky > Safe)."""
    probs = np.asarray(probs)
    return (N_CLASSES - 1 - np.argmax(probs[..., ::-1], axis=-1)).astype(np.int64)


@dataclass(frozen=True, eq=False)
class Prediction:
    logits: np.ndarray  # (P, 3)
    probs: np.ndarray  # (P, 3)
    classes: np.ndarray  # (P,)

    def __len__(self):
        return len(self.classes)

    def __getitem__(self, i):
        return Prediction(self.logits[i], self.probs[i], self.classes[i])


def _prediction(logits) -> Prediction:
    probs = softmax(logits.astype(np.float64))
    return Prediction(logits, probs, conservative_argmax(probs))


# ---------------------------------------------------------------- model wrapper


@dataclass
class QMonitor:
    """Parameters plus model configuration."""

    params: dict
    config: ModelConfig = DEFAULT_MODEL
    meta: dict = field(default_factory=dict)

    @classmethod
    def initialize(cls, config: ModelConfig = DEFAULT_MODEL, seed: int = 0, dtype=np.float32) -> "QMonitor":
        return cls(init_params(config, seed, dtype), config)

    @property
    def n_parameters(self) -> int:
        return n_parameters(self.params)

    def predict_tokens(self, scene_tokens: SceneTokens, plan_features: np.ndarray, chunk: int = 1024) -> Prediction:
        if len(plan_features) == 0:
            return Prediction(np.zeros((0, 3)), np.zeros((0, 3)), np.zeros(0, np.int64))
        out = []
        for k in range(0, len(plan_features), chunk):
            batch = collate([scene_tokens], [plan_features[k : k + chunk]], self.params["head.W"].dtype)
            out.append(forward(self.params, batch, self.config)[0])
        return _prediction(np.concatenate(out))

    def predict_batch(self, perceived: Scene, failure: Optional[MonitorInput], plans) -> Prediction:
        """One forward pass over all plans; the scene is encoded once."""
        st = _as_states(plans)
        if len(st) > 1024:
            raise ValueError("predict_batch takes at most 1024 plans")
        tokens = encode_scene(perceived, failure, self.config)
        return self.predict_tokens(tokens, encode_plans(perceived, st, self.config, failure))

    def predict_one(self, perceived: Scene, failure: Optional[MonitorInput], plan) -> Prediction:
        return self.predict_batch(perceived, failure, _as_states(plan)[:1])[0]


def _as_states(plans) -> np.ndarray:
    if hasattr(plans, "states") and callable(plans.states):
        return plans.states()
    if hasattr(plans, "states"):
        return plans.states[None]
    if isinstance(plans, np.ndarray):
        return plans if plans.ndim == 3 else plans[None]
    plans = list(plans)
    if not plans:
        return np.zeros((0, 0, 4))
    return np.stack([p.states if hasattr(p, "states") else np.asarray(p) for p in plans])


# ---------------------------------------------------------------- training


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    epochs: int = 30
    batch: int = 8  # scenes per step
    plans_per_scene: int = 32
    seed: int = 0
    class_weights: Optional[tuple] = None  # default: inverse training-set frequency
    weight_decay: float = 0.0
    val_fraction: float = 0.2
    clip: float = 1.0
    max_val_scenes: int = 64  # validation scenes scored per epoch

    def check(self):
        if self.lr <= 0 or self.epochs < 1 or self.batch < 1 or self.plans_per_scene < 1:
            raise ValueError("lr, epochs, batch and plans_per_scene must be positive")
        if not 0.0 <= self.val_fraction < 1.0:
            raise ValueError("val_fraction must lie in [0, 1)")


@dataclass(frozen=True, eq=False)
class EncodedSample:
    scene: SceneTokens
    plans: np.ndarray  # (256, K, F)
    labels: np.ndarray  # (256,)


def encode_sample(sample, cfg: ModelConfig = DEFAULT_MODEL, failure_override: Optional[MonitorInput] = None) -> EncodedSample:
    failure = sample.failure if failure_override is None else failure_override
    return EncodedSample(
        encode_scene(sample.perceived, failure, cfg),
        encode_plans(sample.perceived, sample.plan_states(), cfg, failure),
        np.asarray(sample.classes, dtype=np.int64),
    )


def balanced_accuracy(y_true, y_pred) -> float:
    y_true = np.asarray(y_true)
    y_pred = np.asarray(y_pred)
    rec = [np.mean(y_pred[y_true == k] == k) for k in range(N_CLASSES) if np.any(y_true == k)]
    return float(np.mean(rec)) if rec else float("nan")


def predict_encoded(model: QMonitor, encoded: Sequence[EncodedSample]) -> list:
    return [model.predict_tokens(e.scene, e.plans) for e in encoded]


def evaluate_encoded(model: QMonitor, encoded: Sequence[EncodedSample], weights=None) -> dict:
    preds = predict_encoded(model, encoded)
    logits = np.concatenate([p.logits for p in preds])
    y = np.concatenate([e.labels for e in encoded])
    loss, _ = cross_entropy(logits, y, weights)
    yp = np.concatenate([p.classes for p in preds])
    return {"loss": loss, "accuracy": float(np.mean(yp == y)), "balanced_accuracy": balanced_accuracy(y, yp)}


def train(train_set, val_set, model_config: ModelConfig = DEFAULT_MODEL, config: TrainConfig = TrainConfig(), init: Optional[QMonitor] = None, progress=None):
    """Train on encoded samples; returns (best-validation model, per-epoch log).

    ``train_set`` / ``val_set`` are sequences of :class:`EncodedSample`.
    """
    config.check()
    if len(train_set) == 0:
        raise ValueError("empty training split")
    rng = np.random.default_rng(config.seed)
    model = init or QMonitor.initialize(model_config, config.seed)
    params = model.params
    counts = np.bincount(np.concatenate([e.labels for e in train_set]), minlength=N_CLASSES)
    weights = np.asarray(config.class_weights, float) if config.class_weights is not None else class_weights(counts)
    steps_per_epoch = int(np.ceil(len(train_set) / config.batch))
    opt = nn.Adam(params, config.lr, total_steps=steps_per_epoch * config.epochs, weight_decay=config.weight_decay, clip=config.clip)
    val_set = list(val_set)[: config.max_val_scenes]
    history = []
    best = None
    best_key = None
    for epoch in range(config.epochs):
        t0 = time.perf_counter()
        order = rng.permutation(len(train_set))
        losses, correct, seen = [], 0, 0
        for k in range(0, len(order), config.batch):
            chosen = [train_set[i] for i in order[k : k + config.batch]]
            plans, labels = [], []
            for e in chosen:
                m = min(config.plans_per_scene, len(e.labels))
                idx = rng.choice(len(e.labels), m, replace=False) if m < len(e.labels) else np.arange(m)
                plans.append(e.plans[idx])
                labels.append(e.labels[idx])
            if len({len(l) for l in labels}) > 1:
                m = min(len(l) for l in labels)
                plans = [x[:m] for x in plans]
                labels = [x[:m] for x in labels]
            batch = collate([e.scene for e in chosen], plans, params["head.W"].dtype)
            y = np.stack(labels)
            logits, cache = forward(params, batch, model_config, keep_cache=True)
            loss, dlogits = cross_entropy(logits, y, weights)
            grads = backward(params, dlogits, cache, model_config)
            opt.step(params, grads)
            losses.append(loss)
            correct += int(np.sum(conservative_argmax(logits) == y))
            seen += y.size
        rec = {"epoch": epoch, "train_loss": float(np.mean(losses)), "train_accuracy": correct / max(seen, 1), "lr": opt.current_lr()}
        if val_set:
            v = evaluate_encoded(model, val_set, weights)
            rec.update({"val_loss": v["loss"], "val_accuracy": v["accuracy"], "val_balanced_accuracy": v["balanced_accuracy"]})
            key = v["balanced_accuracy"]
        else:
            key = -rec["train_loss"]
        rec["seconds"] = time.perf_counter() - t0
        history.append(rec)
        log.info("epoch %d %s", epoch, json.dumps({k: round(v, 4) if isinstance(v, float) else v for k, v in rec.items()}))
        if progress is not None:
            progress(rec)
        if best_key is None or key > best_key:
            best_key = key
            best = {k: v.copy() for k, v in params.items()}
    final = QMonitor(best, model_config, {"class_weights": weights.tolist(), "history": history})
    return final, history


# ---------------------------------------------------------------- repair and heatmap


def repair(model: QMonitor, perceived: Scene, failure: Optional[MonitorInput], candidate, tree):
    """Returns (plan, verdict, index) where ``index`` is the chosen leaf or None for the candidate.

    Safe candidates are returned unchanged. Otherwise the leaf predicted Safe with
    the highest Safe probability, else the leaf predicted Risky with the highest
    Risky probability, else the candidate with verdict Critical.
    """
    cand = _as_states(candidate)[:1]
    leaves = _as_states(tree)
    pred = model.predict_batch(perceived, failure, np.concatenate([cand, leaves]))
    if pred.classes[0] == SafetyClass.SAFE:
        return candidate, SafetyClass.SAFE, None
    cls = pred.classes[1:]
    probs = pred.probs[1:]
    for verdict in (SafetyClass.SAFE, SafetyClass.RISKY):
        ok = np.flatnonzero(cls == verdict)
        if len(ok):
            best = int(ok[np.argmax(probs[ok, verdict])])
            plan = tree.leaves[best] if hasattr(tree, "leaves") else leaves[best]
            return plan, verdict, best
    return candidate, SafetyClass.CRITICAL, None


@dataclass(frozen=True)
class HeatmapSpec:
    """Monitor positions on a regular grid in the ego frame (meters)."""

    x_range: tuple = (-40.0, 60.0)
    y_range: tuple = (-40.0, 40.0)
    resolution: float = 2.5
    speed: float = 5.0
    heading: str = "oncoming"  # "oncoming" faces the ego along the route, "along" follows it
    kind: str = "vehicle"

    def check(self):
        if self.resolution <= 0:
            raise ValueError("heatmap resolution must be positive")
        if self.heading not in ("oncoming", "along"):
            raise ValueError("heading must be 'oncoming' or 'along'")

    def axes(self):
        xs = np.arange(self.x_range[0], self.x_range[1] + 1e-9, self.resolution)
        ys = np.arange(self.y_range[0], self.y_range[1] + 1e-9, self.resolution)
        return xs, ys


def heatmap(model: QMonitor, perceived: Scene, candidate, spec: HeatmapSpec = HeatmapSpec(), chunk: int = 256):
    """Class of the candidate for a monitor report at every grid cell.

    Returns (classes (ny, nx), world points (ny, nx, 2), local xs, local ys).
    """
    from .scene import DEFAULT_FOOTPRINT

    spec.check()
    xs, ys = spec.axes()
    origin, theta = ego_frame(perceived)
    gx, gy = np.meshgrid(xs, ys)
    c, s = np.cos(theta), np.sin(theta)
    wx = origin[0] + c * gx - s * gy
    wy = origin[1] + s * gx + c * gy
    world = np.stack([wx, wy], axis=-1)
    ref = perceived.road.reference
    sr, _, _ = ref.project(world.reshape(-1, 2))
    heading = ref.heading_at(sr)
    if spec.heading == "oncoming":
        heading = heading + np.pi
    hl, hw = DEFAULT_FOOTPRINT[spec.kind]
    cand = _as_states(candidate)[:1]
    cfg = model.config
    base = encode_scene(perceived, None, cfg)
    scenes, plan_feats = [], []
    for (px, py), h in zip(world.reshape(-1, 2), heading):
        state = AgentState(px, py, h, spec.speed, spec.kind, hl, hw)
        mon = _history_features(state.as_row(), spec.kind, hl, hw, origin, theta, cfg)
        scenes.append(replace(base, monitor=mon, monitor_mask=True))
        plan_feats.append(encode_plans(perceived, cand, cfg, MonitorInput.of(state))[0][None])
    classes = np.empty(len(scenes), np.int64)
    dt = model.params["head.W"].dtype
    for k in range(0, len(scenes), chunk):
        part = scenes[k : k + chunk]
        batch = collate(part, plan_feats[k : k + chunk], dt)
        logits = forward(model.params, batch, cfg)[:, 0]
        classes[k : k + len(part)] = conservative_argmax(softmax(logits.astype(np.float64)))
    return classes.reshape(gx.shape), world, xs, ys


# ---------------------------------------------------------------- checkpoint


CKPT_MAGIC = b"SPQM"
CKPT_VERSION = 1


def save_checkpoint(model: QMonitor, path, extra: Optional[dict] = None) -> None:
    cfg = {"model": to_dict(model.config), "meta": model.meta}
    if extra:
        cfg.update(extra)
    blob = json.dumps(cfg, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<II", CKPT_VERSION, len(blob)))
        fh.write(blob)
        names = sorted(model.params)
        fh.write(struct.pack("<I", len(names)))
        for name in names:
            arr = np.ascontiguousarray(model.params[name], dtype="<f4")
            nb = name.encode()
            fh.write(struct.pack("<H", len(nb)))
            fh.write(nb)
            fh.write(struct.pack("<B", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.tobytes())


def load_checkpoint(path) -> QMonitor:
    from .config import from_dict

    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != CKPT_MAGIC:
        raise ValueError(f"{path}: not a monitor checkpoint (bad magic)")
    version, blen = struct.unpack_from("<II", data, 4)
    if version != CKPT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    pos = 12
    cfg = json.loads(data[pos : pos + blen].decode())
    pos += blen
    (count,) = struct.unpack_from("<I", data, pos)
    pos += 4
    params = {}
    for _ in range(count):
        (nl,) = struct.unpack_from("<H", data, pos)
        pos += 2
        name = data[pos : pos + nl].decode()
        pos += nl
        (nd,) = struct.unpack_from("<B", data, pos)
        pos += 1
        shape = struct.unpack_from(f"<{nd}I", data, pos)
        pos += 4 * nd
        size = int(np.prod(shape)) if nd else 1
        params[name] = np.frombuffer(data, "<f4", size, pos).reshape(shape).astype(np.float32)
        pos += 4 * size
    if pos != len(data):
        raise ValueError(f"{path}: trailing bytes after tensors")
    model_cfg = from_dict(ModelConfig, cfg["model"], "model")
    return QMonitor(params, model_cfg, cfg.get("meta", {}))
