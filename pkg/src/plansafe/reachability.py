"""Grid-based Hamilton-Jacobi reachability: forward tubes of a missed agent and
a two-player collision game, plus the reachability-based plan classifiers.

All tubes are solved with one scheme. In solver time ``tau`` the value obeys

    V_tau = min(0, min_u <grad V, g(x, u)>)

with ``g = -f`` for forward reachable tubes (the set grows along the agent's
motion) and ``g = f`` for backward tubes (lookback from the target). The
numerical Hamiltonian is Lax-Friedrichs with per-dimension dissipation equal to
the bound on ``|g_i|``, gradients are first-order one-sided differences, and
the ``min(0, .)`` freeze is applied as ``V <- min(V, V + dt * H)``, which makes
the tube monotone node by node. Dissipation is local: the bound on ``|g_i|``
over the controls at each node.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .geometry import wrap_angle
from .trajectory import DEFAULT_BOUNDS, Bounds

MAGIC = b"VGRD"
VERSION = 1


@dataclass(frozen=True)
class Grid:
    """Axis-aligned grid. Periodic axes span ``[lo, hi)`` with ``n`` cells; others have ``n`` nodes on ``[lo, hi]``."""

    lo: tuple
    hi: tuple
    n: tuple
    periodic: tuple
    dt_pde: Optional[float] = None

    def __post_init__(self):
        d = len(self.n)
        object.__setattr__(self, "lo", tuple(float(v) for v in self.lo))
        object.__setattr__(self, "hi", tuple(float(v) for v in self.hi))
        object.__setattr__(self, "n", tuple(int(v) for v in self.n))
        object.__setattr__(self, "periodic", tuple(bool(v) for v in self.periodic))
        if not (len(self.lo) == len(self.hi) == len(self.periodic) == d) or d == 0:
            raise ValueError("grid bounds, counts and periodic flags must have equal length")
        if any(c < 3 for c in self.n):
            raise ValueError("every grid dimension needs at least 3 cells")
        if any(h <= l for l, h in zip(self.lo, self.hi)):
            raise ValueError("grid upper bounds must exceed lower bounds")
        if self.dt_pde is not None and self.dt_pde <= 0:
            raise ValueError("dt_pde must be positive")

    @property
    def ndim(self) -> int:
        return len(self.n)

    @property
    def shape(self) -> tuple:
        return self.n

    @property
    def spacing(self) -> np.ndarray:
        return np.array(
            [(h - l) / (c if p else c - 1) for l, h, c, p in zip(self.lo, self.hi, self.n, self.periodic)]
        )

    def axis(self, i: int) -> np.ndarray:
        return self.lo[i] + self.spacing[i] * np.arange(self.n[i])

    def axes(self) -> list:
        return [self.axis(i) for i in range(self.ndim)]

    def mesh(self) -> list:
        """Broadcastable (sparse) coordinate arrays."""
        return np.meshgrid(*self.axes(), indexing="ij", sparse=True)

    def cell_diagonal(self, dims=None) -> float:
        h = self.spacing if dims is None else self.spacing[list(dims)]
        return float(np.linalg.norm(h))

    def to_dict(self) -> dict:
        return {"lo": list(self.lo), "hi": list(self.hi), "n": list(self.n), "periodic": list(self.periodic)}


def state_grid(kind: str, extent: float = 25.0, n_xy: Optional[int] = None, n_theta: Optional[int] = None, n_v: int = 11, v_max: float = DEFAULT_BOUNDS.v_max) -> Grid:
    """Default agent-frame grids: ``"3d"`` is 81x81x41, ``"4d"`` is 51x51x25x11."""
    if kind == "3d":
        n_xy = n_xy or 81
        n_theta = n_theta or 41
        return Grid((-extent, -extent, -np.pi), (extent, extent, np.pi), (n_xy, n_xy, n_theta), (False, False, True))
    if kind == "4d":
        n_xy = n_xy or 51
        n_theta = n_theta or 25
        return Grid(
            (-extent, -extent, -np.pi, 0.0), (extent, extent, np.pi, v_max), (n_xy, n_xy, n_theta, n_v), (False, False, True, False)
        )
    raise ValueError(f"unknown grid kind {kind!r}")


@dataclass(frozen=True, eq=False)
class ValueGrid:
    grid: Grid
    times: np.ndarray
    values: np.ndarray  # (len(times), *grid.shape)
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        times = np.asarray(self.times, dtype=float)
        values = np.asarray(self.values)
        if times.ndim != 1 or len(times) == 0 or np.any(np.diff(times) <= 0):
            raise ValueError("value grid times must be strictly increasing")
        if values.shape != (len(times),) + self.grid.shape:
            raise ValueError(f"values shape {values.shape} does not match {len(times)} x {self.grid.shape}")
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "values", values)

    @property
    def horizon(self) -> float:
        return float(self.times[-1])

    def slice_at(self, t: float) -> np.ndarray:
        """Values at time ``t`` (linear in time between stored slices)."""
        i, w = _time_weights(self.times, t)
        if w == 0.0:
            return self.values[i]
        return (1 - w) * self.values[i] + w * self.values[i + 1]


# ---------------------------------------------------------------- dynamics


class Dynamics:
    """Control-affine dynamics exposing the control-minimized Hamiltonian of ``sign * f``."""

    ndim = 0

    def hamiltonian(self, x, p, sign):  # min_u <p, sign * f(x, u)>
        raise NotImplementedError

    def alpha(self, x) -> list:
        """Per-axis dissipation: max over controls of ``|f_i|`` at each node (broadcastable)."""
        raise NotImplementedError


@dataclass(frozen=True)
class Unicycle3D(Dynamics):
    """Agent at fixed speed ``v``: state ``(x, y, theta)``, control ``omega``."""

    v: float
    omega_max: float = DEFAULT_BOUNDS.omega_max
    ndim = 3

    def hamiltonian(self, x, p, sign):
        _, _, th = x
        px, py, pth = p
        return sign * self.v * (px * np.cos(th) + py * np.sin(th)) - self.omega_max * np.abs(pth)

    def alpha(self, x):
        th = x[2]
        return [self.v * np.abs(np.cos(th)), self.v * np.abs(np.sin(th)), self.omega_max]


@dataclass(frozen=True)
class Unicycle4D(Dynamics):
    """State ``(x, y, theta, v)``; controls ``omega`` and ``a``. Acceleration is cut at the speed limits."""

    bounds: Bounds = DEFAULT_BOUNDS
    ndim = 4

    def hamiltonian(self, x, p, sign):
        _, _, th, v = x
        px, py, pth, pv = p
        b = self.bounds
        a_lo = np.where(v <= 1e-9, 0.0, b.a_min)
        a_hi = np.where(v >= b.v_max - 1e-9, 0.0, b.a_max)
        q = sign * pv
        return (
            sign * v * (px * np.cos(th) + py * np.sin(th))
            - b.omega_max * np.abs(pth)
            + np.minimum(a_lo * q, a_hi * q)
        )

    def alpha(self, x):
        _, _, th, v = x
        b = self.bounds
        a_lo = np.where(v <= 1e-9, 0.0, b.a_min)
        a_hi = np.where(v >= b.v_max - 1e-9, 0.0, b.a_max)
        return [v * np.abs(np.cos(th)), v * np.abs(np.sin(th)), b.omega_max, np.maximum(np.abs(a_lo), np.abs(a_hi))]


@dataclass(frozen=True)
class RelativeGame(Dynamics):
    """Agent relative to the ego in the ego frame; both steer to bring about a collision.

    x_r' = -v_e + v_a cos(th_r) + w_e y_r,  y_r' = v_a sin(th_r) - w_e x_r,  th_r' = w_a - w_e.
    """

    v_ego: float
    v_agent: float
    omega_max: float = DEFAULT_BOUNDS.omega_max
    ndim = 3

    def hamiltonian(self, x, p, sign):
        xr, yr, th = x
        px, py, pth = p
        drift = px * (-self.v_ego + self.v_agent * np.cos(th)) + py * self.v_agent * np.sin(th)
        # both players minimize: each contributes -omega_max * |switching function|
        return sign * drift - self.omega_max * (np.abs(px * yr - py * xr - pth) + np.abs(pth))

    def alpha(self, x):
        xr, yr, th = x
        w = self.omega_max
        return [
            np.abs(-self.v_ego + self.v_agent * np.cos(th)) + w * np.abs(yr),
            self.v_agent * np.abs(np.sin(th)) + w * np.abs(xr),
            2 * w,
        ]


# ---------------------------------------------------------------- solver


def _gradients(V, grid: Grid):
    """One-sided differences (backward, forward) per axis; linear extrapolation at open edges."""
    out = []
    for ax in range(grid.ndim):
        h = grid.spacing[ax]
        if grid.periodic[ax]:
            fwd = (np.roll(V, -1, axis=ax) - V) / h
            bwd = (V - np.roll(V, 1, axis=ax)) / h
        else:
            d = np.diff(V, axis=ax) / h
            first = np.take(d, [0], axis=ax)
            last = np.take(d, [-1], axis=ax)
            bwd = np.concatenate([first, d], axis=ax)
            fwd = np.concatenate([d, last], axis=ax)
        out.append((bwd, fwd))
    return out


def max_stable_dt(dyn: Dynamics, grid: Grid, cfl: float = 1.0) -> float:
    alpha = dyn.alpha(grid.mesh())
    rate = sum(float(np.max(a)) / h for a, h in zip(alpha, grid.spacing))
    return cfl / rate if rate > 0 else np.inf


def solve_tube(
    V0: np.ndarray,
    grid: Grid,
    dyn: Dynamics,
    T: float,
    forward: bool,
    save_every: float = 0.5,
    cfl: float = 0.8,
    meta: Optional[dict] = None,
) -> ValueGrid:
    """Evolve ``V0`` for solver time ``T`` with the frozen Lax-Friedrichs scheme."""
    if T <= 0:
        raise ValueError("horizon must be positive")
    dt_max = max_stable_dt(dyn, grid)
    if grid.dt_pde is not None and grid.dt_pde > dt_max:
        raise ValueError(f"dt_pde = {grid.dt_pde} violates the CFL condition; the maximum stable dt_pde is {dt_max:.6g} s")
    dt_target = grid.dt_pde if grid.dt_pde is not None else cfl * dt_max
    n_save = max(1, int(round(T / save_every)))
    times = np.linspace(0.0, T, n_save + 1)
    sign = -1.0 if forward else 1.0
    x = grid.mesh()
    alpha = dyn.alpha(x)
    V = np.array(V0, dtype=float)
    slices = [V.copy()]
    for k in range(n_save):
        span = times[k + 1] - times[k]
        steps = int(np.ceil(span / dt_target - 1e-9))
        dt = span / steps
        for _ in range(steps):
            grads = _gradients(V, grid)
            p = [0.5 * (b + f) for b, f in grads]
            H = dyn.hamiltonian(x, p, sign)
            for a, (b, f) in zip(alpha, grads):
                H = H + 0.5 * a * (f - b)
            if not np.all(np.isfinite(H)):
                raise FloatingPointError("non-finite Hamiltonian; reduce dt_pde")
            V = np.minimum(V, V + dt * H)
        slices.append(V.copy())
    return ValueGrid(grid, times, np.stack(slices), dict(meta or {}))


# ---------------------------------------------------------------- seeds and solves


def seed_value(
    grid: Grid,
    radius: float,
    theta_tol: float,
    v0: Optional[float] = None,
    v_tol: float = 0.0,
    theta_scale: float = 10.0,
    v_scale: float = 2.0,
) -> np.ndarray:
    """Signed distance (positive outside) to a disc of ``radius`` at the origin x a heading
    interval around 0 (x a speed interval around ``v0`` for 4D grids).

    Heading and speed excesses are scaled to meters (``theta_scale`` m/rad, ``v_scale`` s)
    so the thin heading slab is not eroded by numerical dissipation.
    """
    x = grid.mesh()
    d = np.sqrt(x[0] ** 2 + x[1] ** 2) - radius
    d = np.maximum(d, theta_scale * (np.abs(wrap_angle(x[2])) - theta_tol))
    if grid.ndim == 4:
        d = np.maximum(d, v_scale * (np.abs(x[3] - v0) - v_tol))
    return np.broadcast_to(d, grid.shape).astype(float)


@dataclass(frozen=True)
class FRTConfig:
    """Settings for the missed-agent forward tubes."""

    horizon: float = 3.0
    extent: float = 25.0
    n_xy_3d: int = 81
    n_theta_3d: int = 41
    n_xy_4d: int = 51
    n_theta_4d: int = 25
    n_v_4d: int = 11
    speeds_3d: tuple = (0.0, 2.5, 5.0, 7.5, 10.0, 12.5, 15.0)
    speeds_4d: tuple = (0.0, 5.0, 10.0, 15.0)
    seed_radius: Optional[float] = None  # default: circumscribed radius of the agent footprint
    save_every: float = 0.5
    cfl: float = 0.8


DEFAULT_FRT = FRTConfig()


def footprint_radius(half_length: float, half_width: float) -> float:
    return float(np.hypot(half_length, half_width))


def solve_frt(initial, mode: str = "3d", T: float = 3.0, config: FRTConfig = DEFAULT_FRT, bounds: Bounds = DEFAULT_BOUNDS, grid: Optional[Grid] = None) -> ValueGrid:
    """Forward reachable tube of an agent in its own frame (origin, heading 0 at t = 0).

    ``initial`` is an AgentState (its speed and footprint are used) or a speed.
    """
    if T <= 0 or T > 3.0 + 1e-9:
        raise ValueError("FRT horizon must lie in (0, 3] s")
    if hasattr(initial, "v"):
        v0 = float(initial.v)
        r = footprint_radius(initial.half_length, initial.half_width)
    else:
        v0 = float(initial)
        r = footprint_radius(2.3, 1.0)
    if config.seed_radius is not None:
        r = config.seed_radius
    if not 0 <= v0 <= bounds.v_max:
        raise ValueError(f"initial speed {v0} outside [0, {bounds.v_max}]")
    mode = mode.lower().replace("-fixed-v", "")
    if mode == "3d":
        grid = grid or state_grid("3d", config.extent, config.n_xy_3d, config.n_theta_3d)
        dyn = Unicycle3D(v0, bounds.omega_max)
        V0 = seed_value(grid, r, grid.spacing[2])
    elif mode == "4d":
        grid = grid or state_grid("4d", config.extent, config.n_xy_4d, config.n_theta_4d, config.n_v_4d, bounds.v_max)
        dyn = Unicycle4D(bounds)
        V0 = seed_value(grid, r, grid.spacing[2], v0, grid.spacing[3])
    else:
        raise ValueError(f"unknown FRT mode {mode!r}")
    meta = {"kind": "frt", "mode": mode, "v0": v0, "seed_radius": r, "horizon": T}
    return solve_tube(V0, grid, dyn, T, forward=True, save_every=config.save_every, cfl=config.cfl, meta=meta)


@dataclass(frozen=True)
class GameConfig:
    horizon: float = 3.0
    extent: float = 100.0
    n_xy: int = 101
    n_theta: int = 41
    target_radius: float = 3.0
    speeds: tuple = (0.0, 5.0, 10.0, 15.0)
    save_every: float = 0.5
    cfl: float = 0.8


DEFAULT_GAME = GameConfig()


def game_grid(config: GameConfig = DEFAULT_GAME) -> Grid:
    e = config.extent
    return Grid((-e, -e, -np.pi), (e, e, np.pi), (config.n_xy, config.n_xy, config.n_theta), (False, False, True))


def solve_brt_game(v_ego: float, v_agent: float, T: float = 3.0, config: GameConfig = DEFAULT_GAME, bounds: Bounds = DEFAULT_BOUNDS, grid: Optional[Grid] = None) -> ValueGrid:
    """Backward reachable tube of the collision set when both players seek a collision."""
    for v in (v_ego, v_agent):
        if not 0 <= v <= bounds.v_max:
            raise ValueError(f"speed {v} outside [0, {bounds.v_max}]")
    grid = grid or game_grid(config)
    x = grid.mesh()
    V0 = np.broadcast_to(np.sqrt(x[0] ** 2 + x[1] ** 2) - config.target_radius, grid.shape).astype(float)
    dyn = RelativeGame(float(v_ego), float(v_agent), bounds.omega_max)
    meta = {"kind": "brt_game", "v_ego": float(v_ego), "v_agent": float(v_agent), "target_radius": config.target_radius, "horizon": T}
    return solve_tube(V0, grid, dyn, T, forward=False, save_every=config.save_every, cfl=config.cfl, meta=meta)


# ---------------------------------------------------------------- queries


def _time_weights(times, t):
    """Index of the slice at or below ``t`` and the weight of the next one."""
    t = float(t)
    if t < times[0] - 1e-9 or t > times[-1] + 1e-9:
        raise ValueError(f"time {t} outside [{times[0]}, {times[-1]}]")
    if len(times) == 1:
        return 0, 0.0
    t = min(max(t, times[0]), times[-1])
    i = int(np.clip(np.searchsorted(times, t, side="right") - 1, 0, len(times) - 2))
    w = (t - times[i]) / (times[i + 1] - times[i])
    if w >= 1.0:
        return i + 1, 0.0
    return i, max(w, 0.0)


def _cell_coords(grid: Grid, x: np.ndarray, clamp: bool = False):
    """Lower node index and fractional offset per axis for points ``x`` (..., d)."""
    idx, frac = [], []
    h = grid.spacing
    for ax in range(grid.ndim):
        c = x[..., ax]
        if grid.periodic[ax]:
            period = grid.hi[ax] - grid.lo[ax]
            u = np.mod(c - grid.lo[ax], period) / h[ax]
            i = np.floor(u).astype(np.int64)
            f = u - i
            i = np.mod(i, grid.n[ax])
        else:
            u = (c - grid.lo[ax]) / h[ax]
            if clamp:
                u = np.clip(u, 0.0, grid.n[ax] - 1)
            elif np.any(u < -1e-9) or np.any(u > grid.n[ax] - 1 + 1e-9):
                raise ValueError(f"query coordinate on axis {ax} outside [{grid.lo[ax]}, {grid.hi[ax]}]")
            u = np.clip(u, 0.0, grid.n[ax] - 1)
            i = np.minimum(np.floor(u).astype(np.int64), grid.n[ax] - 2)
            f = u - i
        idx.append(i)
        frac.append(f)
    return idx, frac


def interpolate(grid: Grid, values: np.ndarray, x, clamp: bool = False) -> np.ndarray:
    """Multilinear interpolation of node ``values`` at points ``x`` (..., d); exact at nodes."""
    x = np.asarray(x, dtype=float)
    idx, frac = _cell_coords(grid, x, clamp)
    out = np.zeros(x.shape[:-1])
    for corner in range(2 ** grid.ndim):
        w = np.ones(x.shape[:-1])
        ii = []
        for ax in range(grid.ndim):
            bit = (corner >> ax) & 1
            j = idx[ax] + bit
            if grid.periodic[ax]:
                j = np.mod(j, grid.n[ax])
            else:
                j = np.minimum(j, grid.n[ax] - 1)
            ii.append(j)
            w = w * (frac[ax] if bit else 1.0 - frac[ax])
        # skip zero-weight corners so node queries return stored values exactly
        out = out + np.where(w > 0, w * values[tuple(ii)], 0.0)
    return out


def query(vg: ValueGrid, t: float, x) -> np.ndarray | float:
    """V(t, x): multilinear in space, linear in time."""
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != vg.grid.ndim:
        raise ValueError(f"state has {x.shape[-1]} components, grid has {vg.grid.ndim}")
    i, w = _time_weights(vg.times, t)
    val = interpolate(vg.grid, vg.values[i], x)
    if w > 0.0:
        val = (1 - w) * val + w * interpolate(vg.grid, vg.values[i + 1], x)
    return float(val) if val.ndim == 0 else val


# ---------------------------------------------------------------- binary I/O


def save_value_grid(vg: ValueGrid, path) -> None:
    g = vg.grid
    meta = json.dumps(vg.meta, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, g.ndim))
        for lo, hi, n, p in zip(g.lo, g.hi, g.n, g.periodic):
            fh.write(struct.pack("<ddIB", lo, hi, n, p))
        fh.write(struct.pack("<I", len(vg.times)))
        fh.write(np.asarray(vg.times, "<f8").tobytes())
        fh.write(struct.pack("<I", len(meta)))
        fh.write(meta)
        fh.write(np.ascontiguousarray(vg.values, dtype="<f4").tobytes())


def load_value_grid(path) -> ValueGrid:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != MAGIC:
        raise ValueError(f"{path}: not a value grid file (bad magic)")
    pos = 4

    def take(fmt):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(data):
            raise ValueError(f"{path}: truncated header")
        out = struct.unpack_from(fmt, data, pos)
        pos += size
        return out

    version, ndim = take("<II")
    if version != VERSION:
        raise ValueError(f"{path}: unsupported version {version}")
    if not 1 <= ndim <= 8:
        raise ValueError(f"{path}: implausible dimension count {ndim}")
    lo, hi, n, per = [], [], [], []
    for _ in range(ndim):
        a, b, c, p = take("<ddIB")
        lo.append(a), hi.append(b), n.append(c), per.append(bool(p))
    (nt,) = take("<I")
    times = np.frombuffer(data, "<f8", nt, pos).astype(float)
    pos += 8 * nt
    (mlen,) = take("<I")
    meta = json.loads(data[pos : pos + mlen].decode())
    pos += mlen
    grid = Grid(lo, hi, n, per)
    count = nt * int(np.prod(n))
    if len(data) - pos != 4 * count:
        raise ValueError(f"{path}: expected {count} float32 values, found {(len(data) - pos) / 4:g}")
    values = np.frombuffer(data, "<f4", count, pos).reshape((nt,) + grid.shape).copy()
    return ValueGrid(grid, times, values, meta)


# ---------------------------------------------------------------- families and classifiers


def _bracket(speeds, v):
    speeds = np.asarray(speeds, dtype=float)
    v = float(np.clip(v, speeds[0], speeds[-1]))
    j = int(np.clip(np.searchsorted(speeds, v, side="right") - 1, 0, len(speeds) - 2)) if len(speeds) > 1 else 0
    if len(speeds) == 1:
        return 0, 0, 0.0
    w = (v - speeds[j]) / (speeds[j + 1] - speeds[j])
    return j, j + 1, float(w)


@dataclass(frozen=True, eq=False)
class FRTFamily:
    """FRTs solved for a ladder of initial speeds; values interpolate linearly between members."""

    mode: str
    speeds: tuple
    members: tuple  # ValueGrid per speed

    def __post_init__(self):
        if len(self.speeds) != len(self.members) or not self.members:
            raise ValueError("one value grid per speed is required")
        if np.any(np.diff(self.speeds) <= 0):
            raise ValueError("family speeds must increase")
        maps = []
        for vg in self.members:
            final = vg.values[-1]
            maps.append(final.min(axis=tuple(range(2, final.ndim))))
        object.__setattr__(self, "_maps", maps)

    @property
    def grid(self) -> Grid:
        return self.members[0].grid

    @property
    def horizon(self) -> float:
        return self.members[0].horizon

    @property
    def seed_radius(self) -> float:
        return float(self.members[0].meta.get("seed_radius", 0.0))

    def planar_value(self, v0: float, xy) -> np.ndarray:
        """Final-time tube value minimized over heading (and speed) at agent-frame points."""
        g = self.grid
        g2 = Grid(g.lo[:2], g.hi[:2], g.n[:2], g.periodic[:2])
        i, j, w = _bracket(self.speeds, v0)
        out = interpolate(g2, self._maps[i], xy, clamp=True)
        if w > 0:
            out = (1 - w) * out + w * interpolate(g2, self._maps[j], xy, clamp=True)
        return out

    def reach_bound(self, v0: float, bounds: Bounds = DEFAULT_BOUNDS) -> float:
        """Distance beyond which no agent-centre can be at any time in the horizon."""
        T = self.horizon
        if self.mode == "3d":
            return v0 * T + self.seed_radius
        t_sat = max(bounds.v_max - v0, 0.0) / bounds.a_max
        if t_sat >= T:
            return v0 * T + 0.5 * bounds.a_max * T**2 + self.seed_radius
        return v0 * t_sat + 0.5 * bounds.a_max * t_sat**2 + bounds.v_max * (T - t_sat) + self.seed_radius


def solve_frt_family(mode: str = "3d", config: FRTConfig = DEFAULT_FRT, bounds: Bounds = DEFAULT_BOUNDS, speeds=None) -> FRTFamily:
    speeds = tuple(speeds if speeds is not None else (config.speeds_3d if mode == "3d" else config.speeds_4d))
    members = tuple(solve_frt(v, mode, config.horizon, config, bounds) for v in speeds)
    return FRTFamily(mode, speeds, members)


def _plan_states(plan) -> np.ndarray:
    st = plan.states if hasattr(plan, "states") else np.asarray(plan, dtype=float)
    return st if st.ndim == 3 else st[None]


def ego_margin(half_length: float = 2.3, half_width: float = 1.0, d_col: float = 0.5) -> float:
    """Clearance an ego centre needs from the tube: ego circumscribed radius plus ``d_col``."""
    return footprint_radius(half_length, half_width) + d_col


def classify_plan_frt(plan, family: FRTFamily, failure, d_col: float = 0.5, ego_dims=(2.3, 1.0)) -> np.ndarray | int:
    """Critical (2) if any plan state comes within the ego footprint of the tube, else Safe (0).

    ``plan`` is a Trajectory or an array of states (P, N, 4). Never returns Risky.
    """
    from .rules import SafetyClass

    st = _plan_states(plan)
    if failure is None or not failure.present:
        out = np.zeros(len(st), np.int64)
    else:
        f = failure.state
        c, s = np.cos(f.theta), np.sin(f.theta)
        dx = st[..., 0] - f.x
        dy = st[..., 1] - f.y
        rel = np.stack([c * dx + s * dy, -s * dx + c * dy], axis=-1)
        dist = np.hypot(rel[..., 0], rel[..., 1])
        margin = ego_margin(*ego_dims, d_col)
        val = family.planar_value(f.v, rel)
        near = dist <= family.reach_bound(f.v) + margin
        hit = (val < margin) & near
        out = np.where(hit.any(axis=1), int(SafetyClass.CRITICAL), int(SafetyClass.SAFE)).astype(np.int64)
    if hasattr(plan, "states"):
        return int(out[0])
    return out


@dataclass(frozen=True, eq=False)
class GameFamily:
    """Game BRTs over a grid of (ego speed, agent speed) pairs; bilinear in both speeds."""

    speeds: tuple
    members: tuple  # members[i][j] for ego speed i, agent speed j

    @property
    def grid(self) -> Grid:
        return self.members[0][0].grid

    @property
    def horizon(self) -> float:
        return self.members[0][0].horizon

    def value(self, v_ego, v_agent: float, lookback, rel) -> np.ndarray:
        """V at per-point lookback times; ``v_ego``, ``lookback`` broadcast against ``rel[..., 0]``."""
        rel = np.asarray(rel, dtype=float)
        v_ego = np.broadcast_to(np.asarray(v_ego, dtype=float), rel.shape[:-1])
        lookback = np.broadcast_to(np.asarray(lookback, dtype=float), rel.shape[:-1])
        j0, j1, wa = _bracket(self.speeds, v_agent)
        sp = np.asarray(self.speeds, dtype=float)
        ve = np.clip(v_ego, sp[0], sp[-1])
        i0 = np.clip(np.searchsorted(sp, ve, side="right") - 1, 0, len(sp) - 2)
        wi = (ve - sp[i0]) / (sp[i0 + 1] - sp[i0])
        out = np.zeros(rel.shape[:-1])
        times = self.members[0][0].times
        for lb in np.unique(lookback):
            m = lookback == lb
            for i in np.unique(i0[m]):
                mi = m & (i0 == i)
                pts = rel[mi]
                acc = np.zeros(len(pts))
                for di, wrow in ((0, 1 - wi[mi]), (1, wi[mi])):
                    for jj, wcol in ((j0, 1 - wa), (j1, wa)):
                        if np.all(wrow * wcol == 0):
                            continue
                        vg = self.members[i + di][jj]
                        acc += wrow * wcol * query(vg, float(lb), pts).reshape(-1)
                out[mi] = acc
        return out


def solve_game_family(config: GameConfig = DEFAULT_GAME, bounds: Bounds = DEFAULT_BOUNDS) -> GameFamily:
    grid = game_grid(config)
    members = tuple(
        tuple(solve_brt_game(ve, va, config.horizon, config, bounds, grid) for va in config.speeds) for ve in config.speeds
    )
    return GameFamily(tuple(config.speeds), members)


def classify_plan_game(plan, family: GameFamily, failure, dt: float = 0.1) -> np.ndarray | int:
    """Critical if, at some plan step k, the relative state between the plan state and the
    constant-velocity failure lies in the game BRT with lookback ``T - t_k``."""
    from .rules import SafetyClass

    st = _plan_states(plan)
    if failure is None or not failure.present:
        out = np.zeros(len(st), np.int64)
    else:
        f = failure.state
        T = family.horizon
        n = st.shape[1]
        t = np.minimum(dt * np.arange(n), T)
        ax = f.x + f.v * np.cos(f.theta) * t
        ay = f.y + f.v * np.sin(f.theta) * t
        th = st[..., 2]
        dx = ax - st[..., 0]
        dy = ay - st[..., 1]
        c, s = np.cos(th), np.sin(th)
        rel = np.stack([c * dx + s * dy, -s * dx + c * dy, wrap_angle(f.theta - th)], axis=-1)
        g = family.grid
        inside = (np.abs(rel[..., 0]) <= g.hi[0]) & (np.abs(rel[..., 1]) <= g.hi[1])
        lookback = np.broadcast_to(T - t, th.shape)
        val = np.full(th.shape, np.inf)
        if inside.any():
            val[inside] = family.value(st[..., 3][inside], f.v, lookback[inside], rel[inside])
        out = np.where((val <= 0).any(axis=1), int(SafetyClass.CRITICAL), int(SafetyClass.SAFE)).astype(np.int64)
    if hasattr(plan, "states"):
        return int(out[0])
    return out


def save_family(family, directory, prefix: str) -> list:
    """Write one VGRD file per member; returns the paths."""
    from pathlib import Path

    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    paths = []
    if isinstance(family, FRTFamily):
        for v, vg in zip(family.speeds, family.members):
            p = d / f"{prefix}_v{v:05.2f}.vgrd"
            save_value_grid(vg, p)
            paths.append(p)
    else:
        for i, ve in enumerate(family.speeds):
            for j, va in enumerate(family.speeds):
                p = d / f"{prefix}_e{ve:05.2f}_a{va:05.2f}.vgrd"
                save_value_grid(family.members[i][j], p)
                paths.append(p)
    return paths


def load_frt_family(directory, prefix: str) -> FRTFamily:
    from pathlib import Path

    paths = sorted(Path(directory).glob(f"{prefix}_v*.vgrd"))
    if not paths:
        raise FileNotFoundError(f"no {prefix} value tables in {directory}; run `reach-precompute` first")
    members = [load_value_grid(p) for p in paths]
    members.sort(key=lambda vg: vg.meta["v0"])
    return FRTFamily(members[0].meta["mode"], tuple(vg.meta["v0"] for vg in members), tuple(members))


def load_game_family(directory, prefix: str = "game") -> GameFamily:
    from pathlib import Path

    paths = sorted(Path(directory).glob(f"{prefix}_e*_a*.vgrd"))
    if not paths:
        raise FileNotFoundError(f"no {prefix} value tables in {directory}; run `reach-precompute` first")
    grids = [load_value_grid(p) for p in paths]
    speeds = sorted({vg.meta["v_ego"] for vg in grids})
    table = {(vg.meta["v_ego"], vg.meta["v_agent"]): vg for vg in grids}
    try:
        members = tuple(tuple(table[(ve, va)] for va in speeds) for ve in speeds)
    except KeyError as exc:
        raise ValueError(f"incomplete game table in {directory}: missing {exc}") from None
    return GameFamily(tuple(speeds), members)
