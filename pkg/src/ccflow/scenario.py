"""Synthetic BEV worlds, their rasterization and the on-disk dataset.

Conventions used throughout:

* Raster cell ``(row, col)`` has its center at local coordinates
  ``x = (col + 0.5 - W/2) * m``, ``y = (row + 0.5 - H/2) * m`` where ``m`` is
  meters per cell. Flow channel 0 is the column (x) component, channel 1 the
  row (y) component, both in cells.
* Timestep labels ``t <= 0`` are history frames spaced ``dt_history`` apart;
  ``t >= 1`` are forecast waypoints spaced ``dt_forecast`` apart.
* Flow is backward: at an occupied cell it points from the cell to where the
  same material point was at the previous timestep.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import ofr
from .errors import ConfigError, DataError, GenerationError

BEHAVIORS = ("stationary", "constant_velocity", "constant_turn")
WOMD_INPUTS = ("occupancy", "map_r", "map_g", "map_b", "flow_x", "flow_y")
AV2_INPUTS = ("occupancy", "lane", "ego_x", "ego_y")
TARGET_CHANNELS = ("observed", "occluded", "flow_x", "flow_y")
MOTION_INPUTS = frozenset({"flow_x", "flow_y", "ego_x", "ego_y"})
FLOW_BIN_EDGES = (0.0, 0.25, 0.5, 1.0, 2.0, 4.0, 8.0, 16.0, math.inf)
LANE_COLOR = (0.2, 0.6, 1.0)


@dataclass
class WorldConfig:
    mode: str = "womd"
    grid_size: int = 64
    meters_per_cell: float = 0.5
    history_frames: int = 5
    future_frames: int = 4
    dt_history: float = 0.1
    dt_forecast: float = 1.0
    agent_count: tuple[int, int] = (3, 8)
    speed_range: tuple[float, float] = (1.0, 3.0)
    stationary_fraction: float = 0.5
    turn_fraction: float = 0.0
    turn_rate_range: tuple[float, float] = (0.05, 0.25)
    length_range: tuple[float, float] = (3.6, 5.0)
    width_range: tuple[float, float] = (1.6, 2.2)
    lane_count: tuple[int, int] = (2, 4)
    ego_speed_range: tuple[float, float] = (0.0, 3.0)
    history_dropout: float = 0.15
    integer_motion: bool = False
    max_retries: int = 200

    def __post_init__(self):
        for name in ("agent_count", "speed_range", "turn_rate_range", "length_range",
                     "width_range", "lane_count", "ego_speed_range"):
            setattr(self, name, tuple(getattr(self, name)))
        if self.mode not in ("womd", "av2"):
            raise ConfigError(f"mode must be 'womd' or 'av2', got {self.mode!r}")
        if self.grid_size < 4 or self.history_frames < 1 or self.future_frames < 0:
            raise ConfigError("grid_size >= 4, history_frames >= 1 and future_frames >= 0 required")
        if not 0.0 <= self.stationary_fraction <= 1.0:
            raise ConfigError("stationary_fraction must lie in [0, 1]")
        if not 0.0 <= self.history_dropout < 1.0:
            raise ConfigError("history_dropout must lie in [0, 1)")
        if self.agent_count[0] < 1 or self.agent_count[1] < self.agent_count[0]:
            raise ConfigError(f"bad agent_count range {self.agent_count}")

    @property
    def frame_mode(self) -> str:
        return "static" if self.mode == "womd" else "ego_centric"

    @property
    def input_channels(self) -> tuple[str, ...]:
        return WOMD_INPUTS if self.mode == "womd" else AV2_INPUTS

    @property
    def extent(self) -> float:
        return self.grid_size * self.meters_per_cell

    def to_dict(self) -> dict:
        return {f.name: (list(v) if isinstance(v := getattr(self, f.name), tuple) else v)
                for f in dataclasses.fields(self)}

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()


PRESETS = {
    "womd-desk": dict(mode="womd", turn_fraction=0.2),
    "cv-desk": dict(mode="womd", turn_fraction=0.0),
    "av2-desk": dict(mode="av2", turn_fraction=0.2),
    "micro": dict(mode="womd", grid_size=16, history_frames=3, future_frames=2,
                  agent_count=(1, 1), stationary_fraction=0.0, speed_range=(1.0, 1.0),
                  length_range=(2.0, 2.0), width_range=(1.0, 1.0), history_dropout=0.0,
                  ego_speed_range=(0.0, 0.0), integer_motion=True),
}


def preset(name: str, **overrides) -> WorldConfig:
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    return WorldConfig(**{**PRESETS[name], **overrides})


@dataclass
class Agent:
    length: float
    width: float
    behavior: str
    speed: float
    turn_rate: float
    poses: np.ndarray  # (T, 3): x, y, heading
    valid: np.ndarray  # (T,) bool


@dataclass
class Lane:
    points: np.ndarray  # (N, 2) meters
    color: tuple[float, float, float] = LANE_COLOR


@dataclass
class Scenario:
    config: WorldConfig
    seed: int
    agents: list[Agent]
    lanes: list[Lane]
    ego_index: int = 0
    labels: np.ndarray = field(default=None)  # timestep label per pose row

    @property
    def frame_mode(self) -> str:
        return self.config.frame_mode

    def row(self, t: int) -> int:
        return t + self.config.history_frames

    def time_of(self, t: int) -> float:
        return t * self.config.dt_history if t <= 0 else t * self.config.dt_forecast

    def ego_pose(self, t: int) -> np.ndarray:
        return self.agents[self.ego_index].poses[self.row(t)]


@dataclass
class RasterFrame:
    t: int
    occupancy_observed: np.ndarray
    occupancy_occluded: np.ndarray
    flow: np.ndarray  # (2, H, W)
    semantic_map: np.ndarray | None = None  # (3, H, W), womd
    lane_occupancy: np.ndarray | None = None  # (1, H, W), av2
    egomotion: np.ndarray | None = None  # (2, H, W), av2

    @property
    def occupancy(self) -> np.ndarray:
        return np.maximum(self.occupancy_observed, self.occupancy_occluded)


@dataclass
class SampleRecord:
    inputs: np.ndarray  # (T_h, C_in, H, W)
    targets: np.ndarray  # (T_f, 4, H, W): observed, occluded, flow_x, flow_y
    current_occupancy: np.ndarray  # (H, W) true total occupancy at t = 0, target frame
    input_channels: tuple[str, ...]
    meta: dict = field(default_factory=dict)

    @property
    def history_frames(self) -> int:
        return self.inputs.shape[0]

    @property
    def future_frames(self) -> int:
        return self.targets.shape[0]

    @property
    def observed(self) -> np.ndarray:
        return self.targets[:, 0]

    @property
    def occluded(self) -> np.ndarray:
        return self.targets[:, 1]

    @property
    def flow(self) -> np.ndarray:
        return self.targets[:, 2:4]

    @property
    def occupancy(self) -> np.ndarray:
        return np.maximum(self.observed, self.occluded)

    def previous_occupancy(self) -> np.ndarray:
        """Total occupancy at k - 1 for every waypoint k (k = 1 uses t = 0)."""
        return np.concatenate([self.current_occupancy[None], self.occupancy[:-1]], axis=0)

    def channel_names(self) -> list[str]:
        names = [f"in{t}/{c}" for t in range(self.history_frames) for c in self.input_channels]
        names += [f"tgt{k}/{c}" for k in range(self.future_frames) for c in TARGET_CHANNELS]
        return names + ["current/occupancy"]

    def planes(self) -> np.ndarray:
        h, w = self.current_occupancy.shape
        return np.concatenate([self.inputs.reshape(-1, h, w), self.targets.reshape(-1, h, w),
                               self.current_occupancy[None]], axis=0)

    def to_bytes(self) -> bytes:
        return ofr.to_bytes(self.planes(), self.channel_names(), self.header())

    def header(self) -> dict:
        return {**self.meta, "T_h": self.history_frames, "T_f": self.future_frames,
                "input_channels": list(self.input_channels)}

    @classmethod
    def from_planes(cls, header: dict, planes: np.ndarray) -> "SampleRecord":
        th, tf = header["T_h"], header["T_f"]
        chans = tuple(header["input_channels"])
        n_in = th * len(chans)
        h, w = planes.shape[1:]
        meta = {k: v for k, v in header.items()
                if k not in ("T_h", "T_f", "input_channels", "channels", "height", "width", "dtype")}
        return cls(inputs=planes[:n_in].reshape(th, len(chans), h, w),
                   targets=planes[n_in:n_in + 4 * tf].reshape(tf, 4, h, w),
                   current_occupancy=planes[n_in + 4 * tf],
                   input_channels=chans, meta=meta)


# ---------------------------------------------------------------- kinematics

def _pose_at(x0, y0, h0, speed, turn_rate, behavior, time):
    if behavior == "stationary":
        return x0, y0, h0
    if behavior == "constant_velocity" or turn_rate == 0.0:
        return x0 + speed * math.cos(h0) * time, y0 + speed * math.sin(h0) * time, h0
    h = h0 + turn_rate * time
    r = speed / turn_rate
    return x0 + r * (math.sin(h) - math.sin(h0)), y0 - r * (math.cos(h) - math.cos(h0)), h


def _corners(x, y, h, length, width):
    c, s = math.cos(h), math.sin(h)
    hl, hw = length / 2, width / 2
    return np.array([[x + c * dx - s * dy, y + s * dx + c * dy]
                     for dx, dy in ((hl, hw), (hl, -hw), (-hl, -hw), (-hl, hw))])


def _rects_overlap(a: np.ndarray, b: np.ndarray) -> bool:
    # separating axis test on two convex quads
    for poly in (a, b):
        for i in range(4):
            edge = poly[(i + 1) % 4] - poly[i]
            axis = np.array([-edge[1], edge[0]])
            pa, pb = a @ axis, b @ axis
            if pa.max() < pb.min() or pb.max() < pa.min():
                return False
    return True


def sample_scenario(config: WorldConfig, seed: int) -> Scenario:
    """Draw a random world; deterministic in ``seed``."""
    rng = np.random.default_rng(seed)
    cfg = config
    half = cfg.extent / 2
    labels = np.arange(-cfg.history_frames, cfg.future_frames + 1)
    times = np.array([t * cfg.dt_history if t <= 0 else t * cfg.dt_forecast for t in labels])

    lanes = []
    for _ in range(rng.integers(cfg.lane_count[0], cfg.lane_count[1] + 1)):
        p = rng.uniform(-half * 0.8, half * 0.8, size=2)
        ang = rng.uniform(0, math.pi)
        d = np.array([math.cos(ang), math.sin(ang)])
        lanes.append(Lane(points=np.stack([p - 2 * half * d, p, p + 2 * half * d])))

    def draw_motion(speed_range, stationary_p):
        if rng.random() < stationary_p:
            return "stationary", 0.0, 0.0
        speed = float(rng.uniform(*speed_range))
        if speed == 0.0:
            return "stationary", 0.0, 0.0
        if rng.random() < cfg.turn_fraction:
            rate = float(rng.uniform(*cfg.turn_rate_range)) * (1 if rng.random() < 0.5 else -1)
            return "constant_turn", speed, rate
        return "constant_velocity", speed, 0.0

    def quantize(behavior, speed, heading):
        # integer cells per forecast interval, heading follows the velocity
        step = cfg.meters_per_cell / cfg.dt_forecast
        nx = round(speed * math.cos(heading) / step)
        ny = round(speed * math.sin(heading) / step)
        if nx == 0 and ny == 0:
            return "stationary", 0.0, heading, (0.0, 0.0)
        return behavior, math.hypot(nx, ny) * step, math.atan2(ny, nx), (nx * step, ny * step)

    n_agents = int(rng.integers(cfg.agent_count[0], cfg.agent_count[1] + 1))
    placed: list[tuple[float, float, float, float, float, str, float, float]] = []
    footprints: list[np.ndarray] = []

    # ego at the origin at t = 0
    ego_beh, ego_speed, ego_rate = draw_motion(cfg.ego_speed_range, 0.0 if cfg.ego_speed_range[1] > 0 else 1.0)
    ego_heading = float(rng.uniform(-math.pi, math.pi))
    if lanes and ego_beh != "stationary":
        d = lanes[0].points[2] - lanes[0].points[0]
        ego_heading = math.atan2(d[1], d[0])
    ego_len, ego_wid = float(np.mean(cfg.length_range)), float(np.mean(cfg.width_range))
    slots = [("ego", ego_len, ego_wid, ego_beh, ego_speed, ego_rate, ego_heading, (0.0, 0.0))]

    for _ in range(n_agents):
        length = float(rng.uniform(*cfg.length_range))
        width = float(rng.uniform(*cfg.width_range))
        beh, speed, rate = draw_motion(cfg.speed_range, cfg.stationary_fraction)
        slots.append(("agent", length, width, beh, speed, rate, None, None))

    for kind, length, width, beh, speed, rate, heading, pos in slots:
        for attempt in range(cfg.max_retries):
            if pos is None:
                # crowded or clipped lanes: fall back to free placement late in the budget
                if beh != "stationary" and lanes and attempt < cfg.max_retries // 2:
                    lane = lanes[int(rng.integers(len(lanes)))]
                    a, b = lane.points[0], lane.points[-1]
                    d = (b - a) / np.linalg.norm(b - a)
                    xy = lane.points[1] + d * rng.uniform(-half, half)
                    h = math.atan2(d[1], d[0]) + (math.pi if rng.random() < 0.5 else 0.0)
                else:
                    xy = rng.uniform(-half, half, size=2)
                    h = float(rng.uniform(-math.pi, math.pi))
                x, y = float(xy[0]), float(xy[1])
            else:
                x, y = pos
                h = heading
            b_, s_, r_ = beh, speed, rate
            vel = None
            if cfg.integer_motion and b_ != "stationary":
                b_, s_, h, vel = quantize("constant_velocity", s_, h)
                r_ = 0.0
            rect = _corners(x, y, h, length, width)
            inside = np.all(np.abs(rect) < half)
            if inside and not any(_rects_overlap(rect, f) for f in footprints):
                footprints.append(rect)
                placed.append((x, y, h, length, width, b_, s_, r_, vel))
                break
        else:
            raise GenerationError(
                f"seed {seed}: could not place {kind} without overlap after {cfg.max_retries} tries")

    agents = []
    n_hist = cfg.history_frames
    for i, (x, y, h, length, width, beh, speed, rate, vel) in enumerate(placed):
        poses = np.empty((len(times), 3))
        for j, tm in enumerate(times):
            if vel is not None:
                poses[j] = (x + vel[0] * tm, y + vel[1] * tm, h)
            else:
                poses[j] = _pose_at(x, y, h, speed, rate, beh, tm)
        valid = np.ones(len(times), dtype=bool)
        if i > 0 and cfg.history_dropout > 0:
            valid[:n_hist + 1] = rng.random(n_hist + 1) >= cfg.history_dropout
        agents.append(Agent(length=length, width=width, behavior=beh, speed=speed,
                            turn_rate=rate, poses=poses, valid=valid))
    return Scenario(config=cfg, seed=seed, agents=agents, lanes=lanes, ego_index=0, labels=labels)


# -------------------------------------------------------------- rasterizing

def _frame(scenario: Scenario, frame_time: int) -> tuple[np.ndarray, float]:
    """Origin and rotation angle mapping world to raster-local coordinates."""
    if scenario.frame_mode == "static":
        return np.zeros(2), 0.0
    ex, ey, eh = scenario.ego_pose(frame_time)
    # ego heading points along +y (increasing row)
    return np.array([ex, ey]), math.pi / 2 - eh


def _to_local(points: np.ndarray, origin: np.ndarray, phi: float) -> np.ndarray:
    c, s = math.cos(phi), math.sin(phi)
    d = points - origin
    return np.stack([c * d[..., 0] - s * d[..., 1], s * d[..., 0] + c * d[..., 1]], axis=-1)


def _to_world(local: np.ndarray, origin: np.ndarray, phi: float) -> np.ndarray:
    c, s = math.cos(phi), math.sin(phi)
    return np.stack([c * local[..., 0] + s * local[..., 1],
                     -s * local[..., 0] + c * local[..., 1]], axis=-1) + origin


def cell_centers(config: WorldConfig) -> np.ndarray:
    """(H, W, 2) local coordinates of cell centers, in meters."""
    n, m = config.grid_size, config.meters_per_cell
    idx = (np.arange(n) + 0.5 - n / 2) * m
    yy, xx = np.meshgrid(idx, idx, indexing="ij")
    return np.stack([xx, yy], axis=-1)


def _rendered(scenario: Scenario, mode: str) -> list[int]:
    # AV2-style rasters do not draw the ego vehicle
    return [i for i in range(len(scenario.agents)) if not (mode == "av2" and i == scenario.ego_index)]


def _ownership(scenario: Scenario, t: int, world: np.ndarray, agents: Sequence[int],
               use_validity: bool) -> tuple[np.ndarray, np.ndarray]:
    """Owner index per cell (-1 when empty) and agent-local coordinates of each cell."""
    owner = np.full(world.shape[:2], -1, dtype=int)
    local = np.zeros_like(world)
    r = scenario.row(t)
    for i in agents:
        a = scenario.agents[i]
        if use_validity and not a.valid[r]:
            continue
        x, y, h = a.poses[r]
        u = _to_local(world, np.array([x, y]), -h)
        inside = (np.abs(u[..., 0]) <= a.length / 2) & (np.abs(u[..., 1]) <= a.width / 2) & (owner < 0)
        owner[inside] = i
        local[inside] = u[inside]
    return owner, local


def _flow(scenario: Scenario, t: int, prev_t: int, owner: np.ndarray, local: np.ndarray,
          prev_frame: tuple[np.ndarray, float], cur_frame: tuple[np.ndarray, float],
          cur_local: np.ndarray, use_validity: bool) -> np.ndarray:
    m = scenario.config.meters_per_cell
    flow = np.zeros((2,) + owner.shape)
    pr, cr = scenario.row(prev_t), scenario.row(t)
    same_frame = np.array_equal(prev_frame[0], cur_frame[0]) and prev_frame[1] == cur_frame[1]
    for i in np.unique(owner[owner >= 0]):
        a = scenario.agents[i]
        if use_validity and not a.valid[pr]:
            continue
        mask = owner == i
        px, py, ph = a.poses[pr]
        prev_world = _to_world(local[mask], np.array([px, py]), -ph)
        if same_frame:
            # world displacement of the material point; exactly zero for an unmoved agent
            cx, cy, ch = a.poses[cr]
            delta = prev_world - _to_world(local[mask], np.array([cx, cy]), -ch)
            disp = _to_local(delta, np.zeros(2), cur_frame[1]) / m
        else:
            disp = (_to_local(prev_world, *prev_frame) - cur_local[mask]) / m
        flow[0][mask] = disp[:, 0]
        flow[1][mask] = disp[:, 1]
    return flow


def _segment_hits_rect(a: np.ndarray, b: np.ndarray, half_l: float, half_w: float) -> np.ndarray:
    """Liang-Barsky clip of segments a->b (agent-local) against a centered box."""
    d = b - a
    t0 = np.zeros(a.shape[:-1])
    t1 = np.ones(a.shape[:-1])
    ok = np.ones(a.shape[:-1], dtype=bool)
    for axis, lim in ((0, half_l), (1, half_w)):
        p0, dp = a[..., axis], d[..., axis]
        for sgn in (-1.0, 1.0):
            # constraint: sgn * (p0 + t dp) <= lim
            num = lim - sgn * p0
            den = sgn * dp
            par = den == 0
            ok &= ~(par & (num < 0))
            with np.errstate(divide="ignore", invalid="ignore"):
                r = num / den
            t1 = np.where(~par & (den > 0), np.minimum(t1, r), t1)
            t0 = np.where(~par & (den < 0), np.maximum(t0, r), t0)
    return ok & (t0 <= t1)


def occlusion_split(scenario: Scenario, t: int, frame_time: int | None = None,
                    mode: str | None = None, use_validity: bool = False) -> tuple[np.ndarray, np.ndarray]:
    """Observed and occluded occupancy masks at timestep ``t``.

    An occupied cell is occluded when the segment from the ego center to the
    cell center passes through another agent's rectangle.
    """
    mode = mode or scenario.config.mode
    frame_time = _default_frame_time(scenario, t) if frame_time is None else frame_time
    origin, phi = _frame(scenario, frame_time)
    world = _to_world(cell_centers(scenario.config), origin, phi)
    agents = _rendered(scenario, mode)
    owner, _ = _ownership(scenario, t, world, agents, use_validity)
    occupied = owner >= 0
    occluded = np.zeros(owner.shape, dtype=bool)
    r = scenario.row(t)
    ego_xy = scenario.agents[scenario.ego_index].poses[r, :2]
    cells = world[occupied]
    owners = owner[occupied]
    hit = np.zeros(len(cells), dtype=bool)
    for j in agents:
        if j == scenario.ego_index:
            continue
        a = scenario.agents[j]
        if use_validity and not a.valid[r]:
            continue
        x, y, h = a.poses[r]
        la = _to_local(ego_xy[None], np.array([x, y]), -h)
        lb = _to_local(cells, np.array([x, y]), -h)
        hits = _segment_hits_rect(np.broadcast_to(la, lb.shape), lb, a.length / 2, a.width / 2)
        hit |= hits & (owners != j)
    occluded[occupied] = hit
    observed = occupied & ~occluded
    return observed.astype(np.float32), occluded.astype(np.float32)


def _default_frame_time(scenario: Scenario, t: int) -> int:
    if scenario.frame_mode == "static":
        return 0
    return t if t <= 0 else 0


def _draw_lanes(scenario: Scenario, origin: np.ndarray, phi: float) -> list[np.ndarray]:
    cfg = scenario.config
    n, m = cfg.grid_size, cfg.meters_per_cell
    out = []
    for lane in scenario.lanes:
        mask = np.zeros((n, n), dtype=bool)
        for p, q in zip(lane.points[:-1], lane.points[1:]):
            steps = max(2, int(np.linalg.norm(q - p) / (m / 4)) + 1)
            pts = p + np.linspace(0, 1, steps)[:, None] * (q - p)
            loc = _to_local(pts, origin, phi)
            col = np.floor(loc[:, 0] / m + n / 2).astype(int)
            row = np.floor(loc[:, 1] / m + n / 2).astype(int)
            keep = (col >= 0) & (col < n) & (row >= 0) & (row < n)
            mask[row[keep], col[keep]] = True
        out.append(mask)
    return out


def rasterize(scenario: Scenario, t: int, mode: str | None = None, frame_time: int | None = None,
              use_validity: bool | None = None) -> RasterFrame:
    """Render one timestep.

    History frames (``t <= 0``) honor per-frame validity and, in ego-centric
    worlds, are drawn in the ego pose of their own timestep. Waypoints
    (``t >= 1``) are drawn in the frame of ``t = 0``.
    """
    cfg = scenario.config
    mode = mode or cfg.mode
    if not -cfg.history_frames + 1 <= t <= cfg.future_frames:
        raise ConfigError(f"timestep {t} outside [{-cfg.history_frames + 1}, {cfg.future_frames}]")
    frame_time = _default_frame_time(scenario, t) if frame_time is None else frame_time
    use_validity = (t <= 0) if use_validity is None else use_validity
    origin, phi = _frame(scenario, frame_time)
    cur_local = cell_centers(cfg)
    world = _to_world(cur_local, origin, phi)
    agents = _rendered(scenario, mode)
    owner, local = _ownership(scenario, t, world, agents, use_validity)

    own_frame = frame_time == t
    prev_frame_time = t - 1 if own_frame else frame_time
    prev_frame = _frame(scenario, prev_frame_time)
    flow = _flow(scenario, t, t - 1, owner, local, prev_frame, (origin, phi), cur_local, use_validity)

    if mode == "womd":
        observed, occluded = occlusion_split(scenario, t, frame_time, mode, use_validity)
    else:
        observed, occluded = (owner >= 0).astype(np.float32), np.zeros(owner.shape, np.float32)

    frame = RasterFrame(t=t, occupancy_observed=observed, occupancy_occluded=occluded,
                        flow=flow.astype(np.float32))
    lanes = _draw_lanes(scenario, origin, phi)
    if mode == "womd":
        sem = np.zeros((3, cfg.grid_size, cfg.grid_size), np.float32)
        for lane, mask in zip(scenario.lanes, lanes):
            for c in range(3):
                sem[c][mask] = lane.color[c]
        frame.semantic_map = sem
    else:
        lane_occ = np.zeros((1, cfg.grid_size, cfg.grid_size), np.float32)
        for mask in lanes:
            lane_occ[0][mask] = 1.0
        frame.lane_occupancy = lane_occ
        frame.egomotion = egomotion(scenario, t, frame_time).astype(np.float32)
    return frame


def egomotion(scenario: Scenario, t: int, frame_time: int | None = None) -> np.ndarray:
    """Backward flow induced on every cell by the ego moving from ``t - 1`` to ``t``.

    Zero whenever the raster frame does not move between the two timesteps
    (static worlds, and waypoints drawn in the frame of ``t = 0``).
    """
    cfg = scenario.config
    frame_time = _default_frame_time(scenario, t) if frame_time is None else frame_time
    if scenario.frame_mode == "static" or frame_time != t:
        return np.zeros((2, cfg.grid_size, cfg.grid_size))
    cur_local = cell_centers(cfg)
    world = _to_world(cur_local, *_frame(scenario, t))
    prev_local = _to_local(world, *_frame(scenario, t - 1))
    return np.moveaxis((prev_local - cur_local) / cfg.meters_per_cell, -1, 0)


def make_sample(scenario: Scenario) -> SampleRecord:
    cfg = scenario.config
    frames_in = [rasterize(scenario, t) for t in range(-cfg.history_frames + 1, 1)]
    inputs = np.stack([_input_planes(f, cfg.mode) for f in frames_in])
    targets = np.zeros((cfg.future_frames, 4, cfg.grid_size, cfg.grid_size), np.float32)
    for k in range(1, cfg.future_frames + 1):
        f = rasterize(scenario, k)
        targets[k - 1] = np.concatenate([f.occupancy_observed[None], f.occupancy_occluded[None], f.flow])
    current = rasterize(scenario, 0, frame_time=_default_frame_time(scenario, 1), use_validity=False)
    meta = {"mode": cfg.mode, "frame_mode": cfg.frame_mode, "meters_per_cell": cfg.meters_per_cell,
            "dt_history": cfg.dt_history, "dt_forecast": cfg.dt_forecast, "seed": int(scenario.seed)}
    return SampleRecord(inputs=inputs, targets=targets, current_occupancy=current.occupancy.astype(np.float32),
                        input_channels=cfg.input_channels, meta=meta)


def _input_planes(frame: RasterFrame, mode: str) -> np.ndarray:
    occ = frame.occupancy[None]
    if mode == "womd":
        return np.concatenate([occ, frame.semantic_map, frame.flow]).astype(np.float32)
    return np.concatenate([occ, frame.lane_occupancy, frame.egomotion]).astype(np.float32)


# ----------------------------------------------------------------- datasets

def _build_one(args):
    config, seed = args
    return make_sample(sample_scenario(config, seed)).to_bytes()


def derive_seeds(base_seed: int, count: int) -> list[int]:
    return [int(s) for s in np.random.SeedSequence(base_seed).generate_state(count, dtype=np.uint32)]


def build_dataset(config: WorldConfig, seeds: Sequence[int], out_dir: str | Path,
                  val_count: int = 0, workers: int = 1) -> Path:
    """Write one OFR file per seed plus ``manifest.jsonl`` and ``dataset.json``.

    The last ``val_count`` seeds form the validation split.
    """
    out = Path(out_dir)
    try:
        (out / "samples").mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataError(f"cannot create {out}: {exc}") from exc
    seeds = [int(s) for s in seeds]
    jobs = [(config, s) for s in seeds]
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            blobs = pool.map(_build_one, jobs, chunksize=8)
            blobs = list(blobs)
    else:
        blobs = [_build_one(j) for j in jobs]
    lines = []
    for i, (seed, blob) in enumerate(zip(seeds, blobs)):
        rel = f"samples/{i:06d}.ofr"
        try:
            (out / rel).write_bytes(blob)
        except OSError as exc:
            raise DataError(f"cannot write {out / rel}: {exc}") from exc
        split = "val" if i >= len(seeds) - val_count else "train"
        lines.append(json.dumps({"path": rel, "split": split, "seed": seed,
                                 "sha256": hashlib.sha256(blob).hexdigest()}, sort_keys=True))
    manifest = ("\n".join(lines) + "\n").encode() if lines else b""
    (out / "manifest.jsonl").write_bytes(manifest)
    info = {"config": config.to_dict(), "config_hash": config.digest(), "count": len(seeds),
            "manifest_sha256": hashlib.sha256(manifest).hexdigest()}
    (out / "dataset.json").write_text(json.dumps(info, indent=2, sort_keys=True) + "\n")
    return out / "manifest.jsonl"


class Dataset:
    """Read side of a built dataset directory."""

    def __init__(self, root: str | Path):
        self.root = Path(root)
        manifest = self.root / "manifest.jsonl" if self.root.is_dir() else self.root
        if self.root.is_file():
            self.root = self.root.parent
        try:
            text = manifest.read_text()
        except OSError as exc:
            raise DataError(f"cannot read manifest {manifest}: {exc}") from exc
        self.records = [json.loads(line) for line in text.splitlines() if line.strip()]
        info = self.root / "dataset.json"
        self.info = json.loads(info.read_text()) if info.exists() else {}

    def __len__(self):
        return len(self.records)

    def split(self, name: str) -> list[int]:
        return [i for i, r in enumerate(self.records) if r["split"] == name]

    def load(self, i: int, verify: bool = False) -> SampleRecord:
        rec = self.records[i]
        path = self.root / rec["path"]
        try:
            blob = path.read_bytes()
        except OSError as exc:
            raise DataError(f"cannot read {path}: {exc}") from exc
        if verify and hashlib.sha256(blob).hexdigest() != rec["sha256"]:
            raise DataError(f"{path}: checksum mismatch")
        return SampleRecord.from_planes(*ofr.from_bytes(blob, str(path)))

    def samples(self, split: str | None = None) -> list[SampleRecord]:
        idx = range(len(self)) if split is None else self.split(split)
        return [self.load(i) for i in idx]


# ---------------------------------------------------------------- analysis

@dataclass
class StatsReport:
    observed_density: np.ndarray
    occluded_density: np.ndarray
    flow_hist: np.ndarray
    bin_edges: tuple = FLOW_BIN_EDGES
    occupied_cells: int = 0
    samples: int = 0

    def hist_rows(self) -> list[tuple[str, str, int, float]]:
        total = max(int(self.flow_hist.sum()), 1)
        return [(_edge(lo), _edge(hi), int(c), float(c) / total)
                for lo, hi, c in zip(self.bin_edges[:-1], self.bin_edges[1:], self.flow_hist)]


def _edge(v: float) -> str:
    return "inf" if math.isinf(v) else f"{v:g}"


def flow_bins(magnitude: np.ndarray) -> np.ndarray:
    """Index of the half-open bin ``[lo, hi)`` holding each magnitude."""
    return np.searchsorted(np.array(FLOW_BIN_EDGES), magnitude, side="right") - 1


def dataset_stats(samples: Iterable[SampleRecord], grid_shape: tuple[int, int] | None = None) -> StatsReport:
    """Future occupancy density grids and the histogram of backward-flow magnitude."""
    obs = occ = None
    hist = np.zeros(len(FLOW_BIN_EDGES) - 1, dtype=np.int64)
    n = cells = 0
    for s in samples:
        if obs is None:
            obs = np.zeros(s.current_occupancy.shape)
            occ = np.zeros(s.current_occupancy.shape)
        obs += s.observed.sum(axis=0)
        occ += s.occluded.sum(axis=0)
        mask = s.occupancy > 0
        mag = np.hypot(s.flow[:, 0], s.flow[:, 1])[mask]
        hist += np.bincount(flow_bins(mag), minlength=len(hist))
        cells += int(mask.sum())
        n += 1
    if obs is None:
        shape = grid_shape or (0, 0)
        obs, occ = np.zeros(shape), np.zeros(shape)
    return StatsReport(observed_density=obs, occluded_density=occ, flow_hist=hist,
                       occupied_cells=cells, samples=n)
