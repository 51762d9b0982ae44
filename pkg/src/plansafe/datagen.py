"""Labeled dataset collection by simulated missed-agent failures.

Each sample: generate a scene, sample a failure location around the ego,
derive the perceived scene (what the planner saw) and the monitored scene (the
perceived scene with the missed agent restored), build the plan tree on the
perceived scene and label every leaf on the monitored scene.
"""

from __future__ import annotations

import json
import logging
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional

import numpy as np

from .config import config_hash, to_dict
from .geometry import rotation
from .planner import DEFAULT_TREE, TrajectoryTree, TreeConfig, build_tree
from .rules import DEFAULT_RULES, N_RULES, RuleConfig, SafetyClass, evaluate_plans
from .scene import (
    AgentState,
    MonitorInput,
    Scene,
    SceneConfig,
    add_agent,
    agents_near,
    generate_scene,
    monitor_from_dict,
    monitor_to_dict,
    remove_agent,
    scene_from_dict,
    scene_to_dict,
)

log = logging.getLogger(__name__)

NO_AGENTS = "no-agents"
NO_NEARBY = "no-nearby"
NEARBY_REMOVED = "nearby-removed"
NO_FAILURE = "no-failure"
BRANCHES = (NO_AGENTS, NO_NEARBY, NEARBY_REMOVED, NO_FAILURE)


@dataclass(frozen=True)
class DataConfig:
    sigma_pos: float = 20.0
    radius: float = 10.0
    failures_per_scene: int = 1
    p_no_failure: float = 0.0
    store_plans: bool = False
    scene: SceneConfig = field(default_factory=SceneConfig)

    def check(self):
        if self.sigma_pos < 0 or self.radius <= 0:
            raise ValueError("sigma_pos must be >= 0 and radius > 0")
        if self.failures_per_scene < 1:
            raise ValueError("failures_per_scene must be >= 1")
        if not 0.0 <= self.p_no_failure <= 1.0:
            raise ValueError("p_no_failure must lie in [0, 1]")
        self.scene.check()


DEFAULT_DATA = DataConfig()


@dataclass(frozen=True, eq=False)
class LabeledSample:
    index: int
    scene_seed: int
    perceived: Scene
    monitored: Scene
    failure: MonitorInput
    branch: str
    rewards: np.ndarray  # (256,)
    classes: np.ndarray  # (256,) int
    plans: Optional[np.ndarray] = None  # (256, N, 4); rebuilt from the perceived scene when absent

    def tree(self, config: TreeConfig = DEFAULT_TREE) -> TrajectoryTree:
        return build_tree(self.perceived.ego.last, self.perceived.road, config)

    def plan_states(self, config: TreeConfig = DEFAULT_TREE) -> np.ndarray:
        if self.plans is not None:
            return self.plans
        st = self.tree(config).states()
        object.__setattr__(self, "plans", st)
        return st


def sample_failure(scene: Scene, rng: np.random.Generator, sigma_pos: float = 20.0) -> np.ndarray:
    """Isotropic normal offset in the ego frame, returned in world coordinates."""
    ego = scene.ego.last
    offset = rng.normal(0.0, 1.0, 2) * sigma_pos
    return ego.xy + rotation(ego.theta) @ offset


def _on_lane_state(scene: Scene, p_mon, rng) -> AgentState:
    """Vehicle on the lane closest to ``p_mon``, lane heading, speed below the limit."""
    road = scene.road
    best = None
    for lane, index in zip(road.lanes, road.lane_indices):
        s, _, dist, seg = index.project(np.asarray(p_mon, float)[None])
        if best is None or dist[0] < best[0]:
            best = (dist[0], lane, index, s[0], seg[0])
    _, lane, index, s, seg = best
    a, b = lane.points[seg], lane.points[seg + 1]
    u = b - a
    t = np.clip(np.dot(np.asarray(p_mon) - a, u) / np.dot(u, u), 0.0, 1.0)
    xy = a + t * u
    theta = float(np.arctan2(u[1], u[0]))
    v = float(rng.uniform(0.0, lane.speed_limit))
    return AgentState.of_kind(xy[0], xy[1], theta, v)


def inject_failure(scene: Scene, p_mon, radius: float, rng: np.random.Generator):
    """Returns (perceived, monitored, failure, branch)."""
    if not scene.agents:
        state = _on_lane_state(scene, p_mon, rng)
        return scene, add_agent(scene, state), MonitorInput.of(state), NO_AGENTS
    near = agents_near(scene, p_mon, radius)
    if not near:
        track = scene.agents[int(rng.integers(len(scene.agents)))]
        last = track.last
        # duplicate shifted back by one footprint length so it does not coincide with the original
        back = 2.0 * last.half_length
        state = AgentState(
            last.x - back * np.cos(last.theta),
            last.y - back * np.sin(last.theta),
            last.theta,
            last.v,
            last.kind,
            last.half_length,
            last.half_width,
        )
        return scene, add_agent(scene, state), MonitorInput.of(state), NO_NEARBY
    agent_id = near[int(rng.integers(len(near)))]
    state = scene.agent(agent_id).last
    return remove_agent(scene, agent_id), scene, MonitorInput.of(state), NEARBY_REMOVED


def scene_seed(seed: int, scene_index: int) -> int:
    return int(np.random.SeedSequence([seed, scene_index]).generate_state(1)[0])


def make_sample(index: int, seed: int, config: DataConfig = DEFAULT_DATA, tree_config: TreeConfig = DEFAULT_TREE, rules: RuleConfig = DEFAULT_RULES) -> LabeledSample:
    """Sample ``index`` of the run; depends only on (seed, index, config)."""
    sidx = index // config.failures_per_scene
    sseed = scene_seed(seed, sidx)
    scene = generate_scene(sseed, config.scene)
    rng = np.random.default_rng([seed, index, 1])
    if rng.random() < config.p_no_failure:
        perceived, monitored, failure, branch = scene, scene, MonitorInput.absent(), NO_FAILURE
    else:
        p_mon = sample_failure(scene, rng, config.sigma_pos)
        perceived, monitored, failure, branch = inject_failure(scene, p_mon, config.radius, rng)
    tree = build_tree(perceived.ego.last, perceived.road, tree_config)
    states = tree.states()
    R, cls = evaluate_plans(states, monitored, rules)
    return LabeledSample(
        index, sseed, perceived, monitored, failure, branch, R, cls, states if config.store_plans else None
    )


def collect(n: int, seed: int, config: DataConfig = DEFAULT_DATA, tree_config: TreeConfig = DEFAULT_TREE, rules: RuleConfig = DEFAULT_RULES, stats: Optional[dict] = None) -> list:
    """Algorithm-1 loop. Failed samples are skipped and counted in ``stats['skipped']``."""
    if n < 1:
        raise ValueError("n must be >= 1")
    config.check()
    out = []
    skipped = []
    for i in range(n):
        try:
            out.append(make_sample(i, seed, config, tree_config, rules))
        except (ValueError, FloatingPointError) as exc:
            log.warning("sample %d skipped: %s", i, exc)
            skipped.append({"index": i, "error": str(exc)})
    if stats is not None:
        stats["skipped"] = skipped
    return out


def class_histogram(dataset: Iterable[LabeledSample]) -> np.ndarray:
    counts = np.zeros(len(SafetyClass), np.int64)
    for s in dataset:
        counts += np.bincount(s.classes, minlength=len(SafetyClass))
    return counts


def branch_histogram(dataset: Iterable[LabeledSample]) -> dict:
    c = Counter(s.branch for s in dataset)
    return {b: c.get(b, 0) for b in BRANCHES}


def split_by_scene(dataset, val_fraction: float = 0.2, seed: int = 0):
    """Train/validation split keyed on the scene seed so one scene never lands on both sides."""
    seeds = sorted({s.scene_seed for s in dataset})
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(seeds))
    n_val = int(round(val_fraction * len(seeds)))
    val_seeds = {seeds[i] for i in order[:n_val]}
    train = [s for s in dataset if s.scene_seed not in val_seeds]
    val = [s for s in dataset if s.scene_seed in val_seeds]
    return train, val


# ---------------------------------------------------------------- serialization


def sample_to_dict(s: LabeledSample) -> dict:
    d = {
        "index": s.index,
        "scene_seed": s.scene_seed,
        "branch": s.branch,
        "failure": monitor_to_dict(s.failure),
        "perceived": scene_to_dict(s.perceived),
        "monitored": scene_to_dict(s.monitored),
        "rewards": [float(r) for r in s.rewards],
        "classes": [int(c) for c in s.classes],
    }
    if s.plans is not None:
        d["plans"] = np.asarray(s.plans).tolist()
    return d


def sample_from_dict(d: dict) -> LabeledSample:
    plans = np.array(d["plans"], dtype=float) if "plans" in d else None
    return LabeledSample(
        int(d["index"]),
        int(d["scene_seed"]),
        scene_from_dict(d["perceived"]),
        scene_from_dict(d["monitored"]),
        monitor_from_dict(d["failure"]),
        d["branch"],
        np.array(d["rewards"], dtype=float),
        np.array(d["classes"], dtype=np.int64),
        plans,
    )


def write_dataset(samples, path, seed: int, config: DataConfig = DEFAULT_DATA, extra: Optional[dict] = None) -> dict:
    """Write JSONL plus ``meta.json`` next to it; returns the meta record."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        for s in samples:
            fh.write(json.dumps(sample_to_dict(s), separators=(",", ":")))
            fh.write("\n")
    hist = class_histogram(samples)
    meta = {
        "seed": seed,
        "n_samples": len(samples),
        "n_plans": int(hist.sum()),
        "config": to_dict(config),
        "config_hash": config_hash(config),
        "class_histogram": {c.label: int(n) for c, n in zip(SafetyClass, hist)},
        "branch_histogram": branch_histogram(samples),
    }
    if extra:
        meta.update(extra)
    with open(meta_path(path), "w") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return meta


def meta_path(path) -> Path:
    path = Path(path)
    return path.with_name("meta.json")


def read_dataset(path) -> list:
    out = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if line:
                out.append(sample_from_dict(json.loads(line)))
    return out


def relabel(sample: LabeledSample, tree_config: TreeConfig = DEFAULT_TREE, rules: RuleConfig = DEFAULT_RULES):
    """Recompute (rewards, classes) from the stored scenes."""
    return evaluate_plans(sample.plan_states(tree_config), sample.monitored, rules)
