"""Ground-truth world model and synthetic sensors.

Holds the brick stacks, the W-shaped wall, and the UAV plants; renders depth
and color images by ray casting against ground, boxes, and the transparent
channel wings; and resolves grasp/release contact events.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, asdict
from enum import Enum
from typing import Optional

import numpy as np
from scipy.special import ndtri

from .geometry import (CameraIntrinsics, Pose, camera_origin, ray_grid,
                       sensor_to_world, vec3, wrap_angle)
from .imgproc import ColorImage, DepthImage


class ConfigError(ValueError):
    """Raised for invalid or inconsistent scenario configuration."""


class BrickColor(str, Enum):
    RED = "RED"
    GREEN = "GREEN"
    BLUE = "BLUE"
    ORANGE = "ORANGE"


@dataclass(frozen=True)
class BrickSpec:
    color: BrickColor
    length: float
    weight: float
    score: int
    height: float = 0.2
    width: float = 0.2


BRICK_SPECS = {
    BrickColor.RED: BrickSpec(BrickColor.RED, 0.3, 1.0, 6),
    BrickColor.GREEN: BrickSpec(BrickColor.GREEN, 0.6, 1.0, 8),
    BrickColor.BLUE: BrickSpec(BrickColor.BLUE, 1.2, 1.5, 10),
    BrickColor.ORANGE: BrickSpec(BrickColor.ORANGE, 1.8, 2.0, 20),
}

# Ferromagnetic plate centered on every brick top.
PLATE_LENGTH = 0.20
PLATE_WIDTH = 0.14

# Distance from the plant reference point down to the gripper tip.
GRIPPER_DROP = 0.35

CHANNEL_LENGTH = 4.0
CHANNEL_TOP_HEIGHT = 1.7
WING_HEIGHT = 0.15
WING_THICKNESS = 0.02

SAND_RGB = (194, 178, 128)
WALL_RGB = (150, 150, 150)
PLATE_RGB = (250, 250, 250)
BODY_RGB = {
    BrickColor.RED: (200, 30, 30),
    BrickColor.GREEN: (30, 180, 40),
    BrickColor.BLUE: (30, 60, 200),
    BrickColor.ORANGE: (235, 120, 20),
}


class BrickState(str, Enum):
    ON_STACK = "on_stack"
    CARRIED = "carried"
    PLACED = "placed"
    DROPPED = "dropped"


@dataclass
class Brick:
    id: int
    spec: BrickSpec
    pose: Pose
    state: BrickState = BrickState.ON_STACK
    carried_by: Optional[int] = None
    channel: Optional[int] = None
    layer: Optional[int] = None

    @property
    def top_z(self) -> float:
        return self.pose.z + self.spec.height / 2.0


@dataclass
class WallChannel:
    id: int
    start: np.ndarray  # (2,)
    end: np.ndarray    # (2,)
    width: float
    top_height: float = CHANNEL_TOP_HEIGHT
    # Occupied intervals along the channel axis, one list per layer.
    layers: list = field(default_factory=lambda: [[], []])

    @property
    def length(self) -> float:
        return float(np.hypot(*(self.end - self.start)))

    @property
    def heading(self) -> float:
        d = self.end - self.start
        return math.atan2(d[1], d[0])

    @property
    def center(self) -> np.ndarray:
        return 0.5 * (self.start + self.end)

    @property
    def direction(self) -> np.ndarray:
        d = self.end - self.start
        return d / np.hypot(*d)

    def along(self, xy) -> float:
        return float((np.asarray(xy) - self.start) @ self.direction)

    def lateral(self, xy) -> float:
        d = self.direction
        rel = np.asarray(xy) - self.start
        return float(rel[0] * -d[1] + rel[1] * d[0])

    def surface_height_at(self, s: float) -> float:
        z = self.top_height
        for layer in self.layers:
            if any(lo - 1e-9 <= s <= hi + 1e-9 for lo, hi in layer):
                z += 0.2
            else:
                break
        return z


@dataclass
class NoiseConfig:
    depth_sigma_coeff: float = 0.0296  # sigma(d) = coeff * d^2
    depth_enabled: bool = True
    color_jitter: float = 0.10
    color_enabled: bool = True
    wing_dropout: float = 0.5
    gps_drift_sigma: float = 0.02  # m / sqrt(s), per horizontal axis
    p_bounce: float = 0.25
    bounce_enabled: bool = True

    @classmethod
    def off(cls) -> "NoiseConfig":
        return cls(
            depth_enabled=False,
            color_enabled=False,
            wing_dropout=0.0,
            gps_drift_sigma=0.0,
            bounce_enabled=False,
        )

    @classmethod
    def paper(cls) -> "NoiseConfig":
        return cls()


@dataclass
class CameraConfig:
    depth_width: int = 848
    depth_height: int = 480
    depth_hfov_deg: float = 90.0
    depth_min_range: float = 0.175
    depth_max_range: float = 10.0
    depth_fps: float = 30.0
    reduce_block: int = 8
    depth_fast_path: bool = False  # render the reduced grid directly
    color_width: int = 752
    color_height: int = 480
    color_hfov_deg: float = 120.0
    color_min_range: float = 0.25
    color_fps: float = 20.0

    @classmethod
    def paper(cls) -> "CameraConfig":
        return cls()

    @classmethod
    def fast(cls) -> "CameraConfig":
        return cls(
            depth_fps=5.0,
            color_fps=5.0,
            depth_fast_path=True,
            color_width=376,
            color_height=240,
        )

    def depth_intrinsics(self) -> CameraIntrinsics:
        return CameraIntrinsics.from_fov(
            self.depth_width, self.depth_height, math.radians(self.depth_hfov_deg)
        )

    def color_intrinsics(self) -> CameraIntrinsics:
        return CameraIntrinsics.from_fov(
            self.color_width, self.color_height, math.radians(self.color_hfov_deg)
        )


def _default_patterns() -> list:
    # 4 RED + 2 GREEN + 1 BLUE per layer for the three buildable channels.
    layer = ["RED", "RED", "GREEN", "RED", "GREEN", "RED", "BLUE"]
    return [[list(layer), list(layer)] for _ in range(3)]


@dataclass
class ArenaConfig:
    seed: int = 0
    bounds: tuple = (0.0, 0.0, 40.0, 50.0)
    max_altitude: float = 20.0
    fleet_size: int = 2
    uav_stack_center: tuple = (12.0, 14.0)
    uav_stack_heading: float = 0.0
    ugv_stack_center: tuple = (30.0, 12.0)
    ugv_stack_heading: float = 0.4
    wall_center: tuple = (20.0, 36.0)
    wall_heading: float = 0.1
    wall_zigzag: float = 0.7  # half-angle of the W kinks, radians
    channel_width: float = 0.30
    randomize_layout: bool = False
    patterns: list = field(default_factory=_default_patterns)
    tick_rate: float = 50.0
    duration_s: float = 1500.0
    scan_altitude: float = 4.5
    scan_speed: float = 3.0
    turn_speed: float = 1.5
    lane_overlap: float = 0.5
    transit_altitudes: tuple = (3.0, 4.0, 5.0)
    bus_latency_s: float = 0.1
    bus_jitter_s: float = 0.05
    bus_loss: float = 0.0
    heartbeat_timeout_s: float = 5.0
    noise: NoiseConfig = field(default_factory=NoiseConfig)
    cameras: CameraConfig = field(default_factory=CameraConfig)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "ArenaConfig":
        try:
            raw = json.loads(text)
        except json.JSONDecodeError as e:
            raise ConfigError(f"invalid JSON: {e}") from e
        return cls.from_dict(raw)

    @classmethod
    def from_dict(cls, raw: dict) -> "ArenaConfig":
        if not isinstance(raw, dict):
            raise ConfigError("configuration root must be an object")
        known = {f.name for f in cls.__dataclass_fields__.values()}
        unknown = set(raw) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        kwargs = dict(raw)
        if "noise" in kwargs:
            kwargs["noise"] = NoiseConfig(**kwargs["noise"])
        if "cameras" in kwargs:
            kwargs["cameras"] = CameraConfig(**kwargs["cameras"])
        for key in ("bounds", "uav_stack_center", "ugv_stack_center",
                    "wall_center", "transit_altitudes"):
            if key in kwargs:
                kwargs[key] = tuple(kwargs[key])
        cfg = cls(**kwargs)
        cfg.validate()
        return cfg

    def validate(self):
        x0, y0, x1, y1 = self.bounds
        if x1 <= x0 or y1 <= y0:
            raise ConfigError("empty arena bounds")
        if not (1 <= self.fleet_size <= 3):
            raise ConfigError("fleet size must be 1..3")
        if not (0.25 <= self.channel_width <= 0.40):
            raise ConfigError("channel width outside [0.25, 0.40]")
        if self.tick_rate <= 0 or self.duration_s <= 0:
            raise ConfigError("tick rate and duration must be positive")
        if len(self.patterns) < 3:
            raise ConfigError("patterns must cover the three buildable channels")
        for ch in self.patterns:
            for layer in ch:
                for name in layer:
                    if name not in ("RED", "GREEN", "BLUE"):
                        raise ConfigError(f"pattern color {name!r} not buildable")
        for pt, label in ((self.uav_stack_center, "uav stack"),
                          (self.ugv_stack_center, "ugv stack"),
                          (self.wall_center, "wall")):
            if not (x0 + 3 < pt[0] < x1 - 3 and y0 + 3 < pt[1] < y1 - 3):
                raise ConfigError(f"{label} center too close to the arena border")


@dataclass
class PlantCommand:
    reference: np.ndarray  # (3,) position setpoint in the navigation frame
    heading: float = 0.0
    speed: Optional[float] = None
    descend_floor: Optional[float] = None  # surface z; slows the final descent
    magnets: bool = False


@dataclass
class UavPlant:
    position: np.ndarray
    heading: float = 0.0
    velocity: np.ndarray = field(default_factory=lambda: np.zeros(3))
    v_max: float = 3.0
    a_max: float = 2.0
    yaw_rate: float = 1.5
    descent_limit: float = 0.25
    airframe_mass: float = 3.0
    estimated_mass: float = 3.0
    carried: Optional[Brick] = None
    magnets: bool = False
    hall_closed: bool = False
    resting: bool = False
    gps_drift: np.ndarray = field(default_factory=lambda: np.zeros(2))
    carry_ramp: float = 1.0
    battery: float = 1.0
    endurance_s: float = 2400.0
    home: np.ndarray = field(default_factory=lambda: np.zeros(3))

    @property
    def believed_position(self) -> np.ndarray:
        # GPS drift corrupts the horizontal belief; altitude is continuously
        # corrected from the rangefinder, so z belief tracks truth.
        out = self.position.copy()
        out[:2] += self.gps_drift
        return out

    @property
    def pose(self) -> Pose:
        return Pose(self.position.copy(), self.heading)

    @property
    def believed_pose(self) -> Pose:
        return Pose(self.believed_position, self.heading)

    @property
    def speed(self) -> float:
        return float(np.linalg.norm(self.velocity))

    @property
    def airborne(self) -> bool:
        return self.position[2] > 0.05 or self.speed > 0.05

    def at(self, target: np.ndarray, pos_tol: float = 0.1, vel_tol: float = 0.15) -> bool:
        err = np.linalg.norm(self.believed_position - np.asarray(target))
        return err < pos_tol and self.speed < vel_tol


def step_plant(plant: UavPlant, cmd: PlantCommand, dt: float) -> UavPlant:
    """Advance the kinematic plant toward the commanded reference.

    The control error is formed against the believed (GPS) position, so a
    drifting belief displaces the true position by the same amount.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    err = np.asarray(cmd.reference, dtype=float) - plant.believed_position
    dist = float(np.linalg.norm(err))
    if dist > 1e-9:
        cap = plant.v_max if cmd.speed is None else min(cmd.speed, plant.v_max)
        brake = math.sqrt(2.0 * plant.a_max * dist)
        v_des = err / dist * min(cap, brake)
    else:
        v_des = np.zeros(3)
    if cmd.descend_floor is not None:
        clearance = plant.position[2] - cmd.descend_floor
        if clearance < 1.0:
            v_des[2] = max(v_des[2], -plant.descent_limit)
    dv = v_des - plant.velocity
    dv_norm = float(np.linalg.norm(dv))
    limit = plant.a_max * dt
    if dv_norm > limit:
        dv *= limit / dv_norm
    plant.velocity = plant.velocity + dv
    plant.position = plant.position + plant.velocity * dt
    if plant.position[2] < 0.0:
        plant.position[2] = 0.0
        plant.velocity[2] = max(plant.velocity[2], 0.0)
    dh = wrap_angle(cmd.heading - plant.heading)
    step = np.clip(dh, -plant.yaw_rate * dt, plant.yaw_rate * dt)
    plant.heading = wrap_angle(plant.heading + step)
    return plant


@dataclass
class GraspOutcome:
    success: bool
    offset_error: float
    failure_mode: Optional[str] = None  # miss | weight_transfer | attitude_spike
    brick: Optional[Brick] = None


@dataclass
class PlaceOutcome:
    kind: str  # seated | bounced | dropped_free
    brick: Brick
    channel: Optional[int] = None
    layer: Optional[int] = None
    along: Optional[float] = None


@dataclass
class _RenderBox:
    center: np.ndarray  # (3,)
    half: np.ndarray    # (3,)
    yaw: float
    body_rgb: tuple
    plate: Optional[tuple] = None  # (length, width) on the top face
    dropout: float = 0.0


def _box_window(o, R, K, box: _RenderBox):
    rel = box.center - o
    s = R.T @ rel
    radius = float(np.linalg.norm(box.half))
    if s[2] <= max(0.05, -radius):
        return None
    denom = max(s[2] - radius, 0.05)
    u = K.cx + K.fx * s[0] / max(s[2], 0.05)
    v = K.cy + K.fy * s[1] / max(s[2], 0.05)
    ru = K.fx * radius / denom + 1
    rv = K.fy * radius / denom + 1
    x0 = max(0, int(math.floor(u - ru)))
    x1 = min(K.width, int(math.ceil(u + ru)) + 1)
    y0 = max(0, int(math.floor(v - rv)))
    y1 = min(K.height, int(math.ceil(v + rv)) + 1)
    if x0 >= x1 or y0 >= y1:
        return None
    return x0, x1, y0, y1


def _box_hits(o, R, xs, ys, window, box: _RenderBox):
    """Slab-test ray/box intersection over a pixel window.

    Returns (tmin, dirs_box_z, origin_box) so callers can classify faces.
    """
    x0, x1, y0, y1 = window
    ux = xs[x0:x1][None, :]
    uy = ys[y0:y1][:, None]
    dx = R[0, 0] * ux + R[0, 1] * uy + R[0, 2]
    dy = R[1, 0] * ux + R[1, 1] * uy + R[1, 2]
    dz = R[2, 0] * ux + R[2, 1] * uy + R[2, 2]
    c, s = math.cos(box.yaw), math.sin(box.yaw)
    bdx = c * dx + s * dy
    bdy = -s * dx + c * dy
    rel = o - box.center
    ox = c * rel[0] + s * rel[1]
    oy = -s * rel[0] + c * rel[1]
    oz = rel[2]
    tmin = np.full(bdx.shape, -np.inf)
    tmax = np.full(bdx.shape, np.inf)
    for d, org, h in ((bdx, ox, box.half[0]), (bdy, oy, box.half[1]), (dz, oz, box.half[2])):
        with np.errstate(divide="ignore", invalid="ignore"):
            t1 = (-h - org) / d
            t2 = (h - org) / d
        near = np.minimum(t1, t2)
        far = np.maximum(t1, t2)
        parallel = np.abs(d) < 1e-12
        if np.any(parallel):
            inside = abs(org) <= h
            near = np.where(parallel, -np.inf if inside else np.inf, near)
            far = np.where(parallel, np.inf if inside else -np.inf, far)
        tmin = np.maximum(tmin, near)
        tmax = np.minimum(tmax, far)
    hit = (tmax >= tmin) & (tmin > 1e-6)
    t = np.where(hit, tmin, np.inf)
    return t, (bdx, bdy, dz), (ox, oy, oz)


class World:
    """Owns all simulated state; advanced only by the orchestrator loop."""

    def __init__(self, config: ArenaConfig):
        config.validate()
        self.config = config
        ss = np.random.SeedSequence(config.seed)
        (self._rng_layout, self._rng_bounce, self._rng_drift,
         self._rng_wind) = [np.random.default_rng(s) for s in ss.spawn(4)]
        self.tick = 0
        self.depth_K = config.cameras.depth_intrinsics()
        self.color_K = config.cameras.color_intrinsics()
        self._build_layout()
        self.plants: list[UavPlant] = []
        for i in range(config.fleet_size):
            home = vec3(self.start_area[0] + 2.0 * i, self.start_area[1], 0.0)
            self.plants.append(UavPlant(position=home.copy(), home=home.copy()))

    # ------------------------------------------------------------ layout

    def _build_layout(self):
        cfg = self.config
        x0, y0, x1, y1 = cfg.bounds
        if cfg.randomize_layout:
            rng = self._rng_layout
            for _ in range(200):
                uav = np.array([rng.uniform(x0 + 8, x1 - 8), rng.uniform(y0 + 6, 0.5 * (y0 + y1))])
                ugv = np.array([rng.uniform(x0 + 5, x1 - 5), rng.uniform(y0 + 5, 0.5 * (y0 + y1))])
                wall = np.array([rng.uniform(x0 + 8, x1 - 8), rng.uniform(0.5 * (y0 + y1) + 4, y1 - 6)])
                if (np.linalg.norm(uav - ugv) > 12.0 and np.linalg.norm(uav - wall) > 10.0
                        and np.linalg.norm(ugv - wall) > 10.0):
                    break
            else:
                raise ConfigError("could not place the arena layout inside the bounds")
            uav_heading = rng.uniform(-0.4, 0.4)
            ugv_heading = rng.uniform(-math.pi, math.pi)
            wall_heading = rng.uniform(-0.4, 0.4)
        else:
            uav = np.array(cfg.uav_stack_center)
            ugv = np.array(cfg.ugv_stack_center)
            wall = np.array(cfg.wall_center)
            uav_heading = cfg.uav_stack_heading
            ugv_heading = cfg.ugv_stack_heading
            wall_heading = cfg.wall_heading
        self.uav_stack_center = uav
        self.uav_stack_heading = uav_heading
        self.ugv_stack_center = ugv
        self.start_area = np.array([0.5 * (x0 + x1), y0 + 2.0])
        self.bricks = self._build_uav_stack(uav, uav_heading)
        self.decoys = self._build_ugv_stack(ugv, ugv_heading)
        self.channels = self._build_wall(wall, wall_heading)

    def _build_uav_stack(self, center, heading) -> list[Brick]:
        # 8 x 4 m area, six rows along the long side:
        # 2 rows of RED (12 each), 2 of GREEN (6 each), 1 BLUE (6), 1 ORANGE (4).
        rows = [
            (BrickColor.RED, 12), (BrickColor.RED, 12),
            (BrickColor.GREEN, 6), (BrickColor.GREEN, 6),
            (BrickColor.BLUE, 6), (BrickColor.ORANGE, 4),
        ]
        c, s = math.cos(heading), math.sin(heading)
        along = np.array([c, s])
        across = np.array([-s, c])
        bricks = []
        bid = 0
        row_pitch = 4.0 / 6.0
        for ri, (color, count) in enumerate(rows):
            spec = BRICK_SPECS[color]
            v = (ri - 2.5) * row_pitch
            slot = 8.0 / count
            for k in range(count):
                u = (k + 0.5) * slot - 4.0
                xy = center + u * along + v * across
                pose = Pose(vec3(xy[0], xy[1], spec.height / 2.0), heading)
                bricks.append(Brick(id=bid, spec=spec, pose=pose))
                bid += 1
        return bricks

    def _build_ugv_stack(self, center, heading) -> list[_RenderBox]:
        # Decoy towers in a 4 x 2 m footprint, 0.6-0.8 m tall, plates on top.
        c, s = math.cos(heading), math.sin(heading)
        along = np.array([c, s])
        across = np.array([-s, c])
        boxes = []
        for i in range(4):
            for j in range(2):
                u = (i - 1.5) * 1.0
                v = (j - 0.5) * 1.0
                xy = center + u * along + v * across
                h = 0.8 if (i + j) % 2 == 0 else 0.6
                body = BODY_RGB[BrickColor.RED if (i + j) % 2 == 0 else BrickColor.GREEN]
                boxes.append(_RenderBox(
                    center=vec3(xy[0], xy[1], h / 2.0),
                    half=vec3(0.3, 0.15, h / 2.0),
                    yaw=heading,
                    body_rgb=body,
                    plate=(PLATE_LENGTH, PLATE_WIDTH),
                ))
        return boxes

    def _build_wall(self, center, heading) -> list[WallChannel]:
        cfg = self.config
        pts = [np.zeros(2)]
        for i in range(4):
            a = heading + (cfg.wall_zigzag if i % 2 == 0 else -cfg.wall_zigzag)
            pts.append(pts[-1] + CHANNEL_LENGTH * np.array([math.cos(a), math.sin(a)]))
        pts = np.array(pts)
        pts += center - pts.mean(axis=0)
        return [
            WallChannel(id=i, start=pts[i].copy(), end=pts[i + 1].copy(),
                        width=cfg.channel_width)
            for i in range(4)
        ]

    # ------------------------------------------------------------ scene

    def _scene_boxes(self) -> list[_RenderBox]:
        boxes = []
        for b in self.bricks:
            if b.state == BrickState.CARRIED:
                plant = self.plants[b.carried_by]
                cz = plant.position[2] - GRIPPER_DROP - b.spec.height / 2.0
                boxes.append(_RenderBox(
                    center=vec3(plant.position[0], plant.position[1], max(cz, b.spec.height / 2.0)),
                    half=vec3(b.spec.length / 2, b.spec.width / 2, b.spec.height / 2),
                    yaw=plant.heading,
                    body_rgb=BODY_RGB[b.spec.color],
                    plate=(PLATE_LENGTH, PLATE_WIDTH),
                ))
            else:
                boxes.append(_RenderBox(
                    center=b.pose.position.copy(),
                    half=vec3(b.spec.length / 2, b.spec.width / 2, b.spec.height / 2),
                    yaw=b.pose.heading,
                    body_rgb=BODY_RGB[b.spec.color],
                    plate=(PLATE_LENGTH, PLATE_WIDTH),
                ))
        boxes.extend(self.decoys)
        for ch in self.channels:
            mid = ch.center
            boxes.append(_RenderBox(
                center=vec3(mid[0], mid[1], ch.top_height / 2.0),
                half=vec3(ch.length / 2, ch.width / 2, ch.top_height / 2.0),
                yaw=ch.heading,
                body_rgb=WALL_RGB,
            ))
            d = ch.direction
            n = np.array([-d[1], d[0]])
            for side in (-1.0, 1.0):
                off = side * (ch.width / 2 - WING_THICKNESS / 2)
                wc = mid + n * off
                boxes.append(_RenderBox(
                    center=vec3(wc[0], wc[1], ch.top_height + WING_HEIGHT / 2.0),
                    half=vec3(ch.length / 2, WING_THICKNESS / 2, WING_HEIGHT / 2.0),
                    yaw=ch.heading,
                    body_rgb=WALL_RGB,
                    dropout=self.config.noise.wing_dropout,
                ))
        return boxes

    # ------------------------------------------------------------ sensors

    def render_depth(self, pose: Pose, K: Optional[CameraIntrinsics] = None,
                     rng: Optional[np.random.Generator] = None,
                     noise: Optional[bool] = None) -> DepthImage:
        """Z-depth render with sensor range limits and optional noise."""
        K = K or self.depth_K
        rng = rng if rng is not None else np.random.default_rng(0)
        add_noise = self.config.noise.depth_enabled if noise is None else noise
        t = self._render_depth_geometry(pose, K, rng)
        cam = self.config.cameras
        if add_noise:
            sigma = self.config.noise.depth_sigma_coeff * t * t
            finite = np.isfinite(t)
            noise_vals = rng.standard_normal(t.shape)
            t = np.where(finite, t + sigma * noise_vals, t)
        bad = ~np.isfinite(t) | (t < cam.depth_min_range) | (t > cam.depth_max_range)
        out = np.where(bad, 0.0, t).astype(np.float32)
        return DepthImage(out)

    def render_depth_reduced(self, pose: Pose,
                             rng: Optional[np.random.Generator] = None
                             ) -> tuple[DepthImage, CameraIntrinsics]:
        """Fast path: render the block-reduced grid directly.

        Geometry is supersampled 2x and min-pooled; the per-pixel noise of the
        full-resolution minimum filter is emulated by sampling the minimum of
        block-size**2 Gaussians through its inverse CDF. Statistically matches
        the full render followed by block_min_reduce.
        """
        cam = self.config.cameras
        block = cam.reduce_block
        K_red = self.depth_K.scaled(block)
        K_ss = self.depth_K.scaled(block / 2.0)
        rng = rng if rng is not None else np.random.default_rng(0)
        t = self._render_depth_geometry(pose, K_ss, rng)
        h2, w2 = K_red.height, K_red.width
        t = t[: 2 * h2, : 2 * w2].reshape(h2, 2, w2, 2).min(axis=(1, 3))
        if self.config.noise.depth_enabled:
            n = block * block
            u = rng.random(t.shape)
            m = ndtri(1.0 - (1.0 - u) ** (1.0 / n))  # min of n standard normals
            sigma = self.config.noise.depth_sigma_coeff * t * t
            t = np.where(np.isfinite(t), t + sigma * m, t)
        bad = ~np.isfinite(t) | (t < cam.depth_min_range) | (t > cam.depth_max_range)
        return DepthImage(np.where(bad, 0.0, t).astype(np.float32)), K_red

    def _render_depth_geometry(self, pose: Pose, K: CameraIntrinsics,
                               rng: np.random.Generator) -> np.ndarray:
        R = sensor_to_world(pose.heading)
        o = camera_origin(pose)
        xs, ys = ray_grid(K)
        dz = R[2, 0] * xs[None, :] + R[2, 1] * ys[:, None] + R[2, 2]
        t = np.full((K.height, K.width), np.inf)
        down = dz < -1e-9
        if o[2] > 0:
            np.divide(-o[2], dz, out=t, where=down)
        for box in self._scene_boxes():
            win = _box_window(o, R, K, box)
            if win is None:
                continue
            hits, _, _ = _box_hits(o, R, xs, ys, win, box)
            if box.dropout > 0.0:
                drop = rng.random(hits.shape) < box.dropout
                hits = np.where(drop, np.inf, hits)
            x0, x1, y0, y1 = win
            view = t[y0:y1, x0:x1]
            np.minimum(view, hits, out=view)
        return t

    def render_color(self, pose: Pose, K: Optional[CameraIntrinsics] = None,
                     rng: Optional[np.random.Generator] = None,
                     jitter: Optional[bool] = None) -> ColorImage:
        """Flat-shaded color render; transparent wings are invisible here."""
        K = K or self.color_K
        rng = rng if rng is not None else np.random.default_rng(0)
        add_jitter = self.config.noise.color_enabled if jitter is None else jitter
        R = sensor_to_world(pose.heading)
        o = camera_origin(pose)
        xs, ys = ray_grid(K)
        dz = R[2, 0] * xs[None, :] + R[2, 1] * ys[:, None] + R[2, 2]
        t = np.full((K.height, K.width), np.inf)
        down = dz < -1e-9
        if o[2] > 0:
            np.divide(-o[2], dz, out=t, where=down)
        rgb = np.zeros((K.height, K.width, 3), dtype=np.float32)
        rgb[down] = SAND_RGB
        for box in self._scene_boxes():
            if box.dropout > 0.0:
                continue  # transparent acrylic: no color-camera signature
            win = _box_window(o, R, K, box)
            if win is None:
                continue
            hits, dirs, org = _box_hits(o, R, xs, ys, win, box)
            x0, x1, y0, y1 = win
            view_t = t[y0:y1, x0:x1]
            closer = hits < view_t
            if not np.any(closer):
                continue
            np.minimum(view_t, hits, out=view_t)
            view_rgb = rgb[y0:y1, x0:x1]
            view_rgb[closer] = box.body_rgb
            if box.plate is not None:
                bdx, bdy, bdz = dirs
                ox, oy, oz = org
                px = ox + hits * bdx
                py = oy + hits * bdy
                pz = oz + hits * bdz
                on_top = np.abs(pz - box.half[2]) < 1e-6
                pl, pw = box.plate
                on_plate = (closer & on_top
                            & (np.abs(px) <= pl / 2) & (np.abs(py) <= pw / 2))
                view_rgb[on_plate] = PLATE_RGB
        if add_jitter:
            j = self.config.noise.color_jitter
            f = rng.uniform(1.0 - j, 1.0 + j, size=(K.height, K.width, 1))
            rgb *= f
        min_r = self.config.cameras.color_min_range
        too_close = t < min_r
        rgb[too_close] = 0
        return ColorImage(np.clip(np.rint(rgb), 0, 255).astype(np.uint8))

    def rangefinder_altitude(self, uav_index: int) -> float:
        return float(self.plants[uav_index].position[2])

    # ------------------------------------------------------------ physics

    def step_uav(self, uav_index: int, cmd: PlantCommand, dt: float) -> list[str]:
        plant = self.plants[uav_index]
        events: list[str] = []
        plant.magnets = cmd.magnets
        step_plant(plant, cmd, dt)
        sigma = self.config.noise.gps_drift_sigma
        if sigma > 0:
            plant.gps_drift = plant.gps_drift + self._rng_drift.normal(
                0.0, sigma * math.sqrt(dt), size=2
            )
        # Gripper contact while descending with magnets energized.
        plant.resting = False
        if plant.carried is None and plant.magnets:
            tip = plant.position[2] - GRIPPER_DROP
            surf_z, kind, obj = self._surface_under(plant.position[0], plant.position[1])
            if tip <= surf_z + 1e-3 and plant.velocity[2] <= 1e-3:
                outcome = attempt_grasp(plant, self)
                if outcome.success:
                    events.append("latched")
                else:
                    if outcome.failure_mode == "attitude_spike":
                        events.append("attitude_spike")
                    elif outcome.failure_mode == "miss":
                        events.append("miss")
                    plant.resting = True
                    plant.position[2] = surf_z + GRIPPER_DROP
                    plant.velocity[2] = max(plant.velocity[2], 0.0)
        elif plant.carried is None:
            tip = plant.position[2] - GRIPPER_DROP
            surf_z, _, _ = self._surface_under(plant.position[0], plant.position[1])
            if tip < surf_z:
                plant.resting = True
                plant.position[2] = surf_z + GRIPPER_DROP
                plant.velocity[2] = max(plant.velocity[2], 0.0)
        # Mass estimator: first-order convergence to the actual load.
        if plant.carried is not None and plant.carry_ramp < 1.0:
            plant.carry_ramp = min(1.0, plant.carry_ramp + dt / 0.5)
        load = plant.airframe_mass
        if plant.carried is not None:
            load += plant.carried.spec.weight * plant.carry_ramp
        if plant.resting:
            load -= 0.6 * plant.airframe_mass
        plant.estimated_mass += (load - plant.estimated_mass) * min(1.0, dt / 0.15)
        if plant.resting and plant.estimated_mass < 0.9 * plant.airframe_mass:
            events.append("weight_transfer")
        # Battery drains with thrust demand while airborne.
        if plant.airborne:
            demand = 0.6 + 0.4 * plant.estimated_mass / plant.airframe_mass
            plant.battery = max(0.0, plant.battery - demand * dt / plant.endurance_s)
        return events

    def _surface_under(self, x, y):
        best = (0.0, "ground", None)
        for b in self.bricks:
            if b.state in (BrickState.ON_STACK, BrickState.DROPPED):
                if self._in_footprint(b.pose, b.spec.length, b.spec.width, x, y):
                    if b.top_z > best[0]:
                        best = (b.top_z, "brick", b)
        for box in self.decoys:
            rel = np.array([x, y]) - box.center[:2]
            c, s = math.cos(box.yaw), math.sin(box.yaw)
            u = c * rel[0] + s * rel[1]
            v = -s * rel[0] + c * rel[1]
            if abs(u) <= box.half[0] and abs(v) <= box.half[1]:
                top = box.center[2] + box.half[2]
                if top > best[0]:
                    best = (top, "decoy", box)
        for ch in self.channels:
            sdist = ch.along((x, y))
            lat = ch.lateral((x, y))
            if 0 <= sdist <= ch.length and abs(lat) <= ch.width / 2:
                top = ch.surface_height_at(sdist)
                if top > best[0]:
                    best = (top, "channel", ch)
        return best

    @staticmethod
    def _in_footprint(pose: Pose, length, width, x, y) -> bool:
        rel = np.array([x, y]) - pose.position[:2]
        c, s = math.cos(pose.heading), math.sin(pose.heading)
        u = c * rel[0] + s * rel[1]
        v = -s * rel[0] + c * rel[1]
        return abs(u) <= length / 2 and abs(v) <= width / 2

    def step_world(self, dt: float):
        self.tick += 1

    # ------------------------------------------------------------ grasp / place

    def attempt_grasp_at(self, plant: UavPlant) -> GraspOutcome:
        return attempt_grasp(plant, self)

    def release_brick(self, uav_index: int) -> PlaceOutcome:
        plant = self.plants[uav_index]
        if plant.carried is None:
            raise ValueError("no brick carried")
        brick = plant.carried
        plant.carried = None
        plant.hall_closed = False
        plant.carry_ramp = 1.0
        x, y = plant.position[0], plant.position[1]
        bottom_z = plant.position[2] - GRIPPER_DROP - brick.spec.height
        for ch in self.channels:
            s = ch.along((x, y))
            lat = ch.lateral((x, y))
            margin = 0.02
            half_slack = (ch.width - brick.spec.width) / 2 + margin
            span = (s - brick.spec.length / 2, s + brick.spec.length / 2)
            # A release anywhere near the channel is a placement attempt;
            # misses inside this envelope count as bounces, not free drops.
            if not (-0.5 <= s <= ch.length + 0.5 and abs(lat) <= 1.0):
                continue
            lat_ok = abs(lat) <= half_slack
            # A slight overhang past the channel end still seats as long as
            # the center of mass stays over the channel.
            span_ok = (span[0] >= -0.08 and span[1] <= ch.length + 0.08
                       and 0.0 <= s <= ch.length)
            layer0 = ch.layers[0]
            overlap0 = _interval_overlap(span, layer0)
            if overlap0 == 0.0:
                layer = 0
                support_ok = True
            elif overlap0 >= (span[1] - span[0]) - 1e-6:
                layer = 1
                support_ok = _interval_overlap(span, ch.layers[1]) == 0.0
            else:
                layer = None
                support_ok = False
            surface = ch.top_height + (0.2 if layer == 1 else 0.0)
            height_ok = -0.05 <= bottom_z - surface <= 0.5
            seated = lat_ok and span_ok and support_ok and layer is not None and height_ok
            if seated and self.config.noise.bounce_enabled:
                if self._rng_bounce.random() < self.config.noise.p_bounce:
                    seated = False
            if seated:
                axis = ch.direction
                xy = ch.start + axis * s
                brick.state = BrickState.PLACED
                brick.channel = ch.id
                brick.layer = layer
                brick.pose = Pose(
                    vec3(xy[0], xy[1], surface + brick.spec.height / 2.0), ch.heading
                )
                ch.layers[layer].append((span[0], span[1]))
                ch.layers[layer].sort()
                return PlaceOutcome("seated", brick, ch.id, layer, s)
            # Bounced off: lands next to the wall on the ground.
            n = np.array([-ch.direction[1], ch.direction[0]])
            side = 1.0 if self._rng_bounce.random() < 0.5 else -1.0
            land = np.array([x, y]) + n * side * (ch.width + 0.3)
            brick.state = BrickState.DROPPED
            brick.pose = Pose(
                vec3(land[0], land[1], brick.spec.height / 2.0), plant.heading
            )
            return PlaceOutcome("bounced", brick, ch.id, None, s)
        # Over open ground: the brick simply returns to the world.
        brick.state = BrickState.DROPPED
        brick.pose = Pose(vec3(x, y, brick.spec.height / 2.0), plant.heading)
        return PlaceOutcome("dropped_free", brick)

    # ------------------------------------------------------------ queries

    def brick_state_counts(self) -> dict:
        counts: dict = {}
        for b in self.bricks:
            counts[b.state] = counts.get(b.state, 0) + 1
        return counts

    def ground_truth(self) -> dict:
        return {
            "bricks": [
                {
                    "id": b.id,
                    "color": b.spec.color.value,
                    "x": round(float(b.pose.position[0]), 6),
                    "y": round(float(b.pose.position[1]), 6),
                    "z": round(float(b.pose.position[2]), 6),
                    "heading": round(float(b.pose.heading), 6),
                    "state": b.state.value,
                }
                for b in self.bricks
            ],
            "channels": [
                {
                    "id": ch.id,
                    "start": [round(float(v), 6) for v in ch.start],
                    "end": [round(float(v), 6) for v in ch.end],
                    "width": ch.width,
                    "top_height": ch.top_height,
                }
                for ch in self.channels
            ],
            "ugv_stack_center": [round(float(v), 6) for v in self.ugv_stack_center],
            "uav_stack_center": [round(float(v), 6) for v in self.uav_stack_center],
            "uav_stack_heading": round(float(self.uav_stack_heading), 6),
        }


def _interval_overlap(span, intervals) -> float:
    total = 0.0
    for lo, hi in intervals:
        total += max(0.0, min(span[1], hi) - max(span[0], lo))
    return total


def attempt_grasp(plant: UavPlant, world: World) -> GraspOutcome:
    """Resolve a gripper-to-surface contact under the plant's current pose."""
    if not plant.magnets:
        raise ValueError("magnets must be energized to grasp")
    x, y = plant.position[0], plant.position[1]
    surf_z, kind, obj = world._surface_under(x, y)
    if kind == "brick":
        brick: Brick = obj
        rel = np.array([x, y]) - brick.pose.position[:2]
        c, s = math.cos(brick.pose.heading), math.sin(brick.pose.heading)
        u = c * rel[0] + s * rel[1]
        v = -s * rel[0] + c * rel[1]
        offset = math.hypot(u, v)
        on_plate = abs(u) <= PLATE_LENGTH / 2 and abs(v) <= PLATE_WIDTH / 2
        if on_plate and offset > PLATE_WIDTH / 2:
            # Latching this far from the center of mass torques the airframe.
            return GraspOutcome(False, offset, "attitude_spike", brick)
        if on_plate:
            plant.carried = brick
            plant.hall_closed = True
            plant.carry_ramp = 0.0
            brick.state = BrickState.CARRIED
            brick.carried_by = world.plants.index(plant)
            return GraspOutcome(True, offset, None, brick)
        return GraspOutcome(False, offset, "miss", brick)
    # Resting anywhere else transfers weight through the landing gear.
    mode = "miss" if kind == "ground" else "weight_transfer"
    return GraspOutcome(False, math.inf, mode, None)
