"""Mission, grasping, and placing state machines plus the visual-servo estimator.

Each machine is a pure transition function over a finite observation alphabet
(so liveness can be checked by exhaustive enumeration) wrapped by a controller
that classifies real observations and produces plant commands. Grasping flies
GPS-referenced until the low hover, then hands the loop to brick-relative
servoing; both realign attempts and the final approach follow that estimate.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Optional

import numpy as np

from .arena import GRIPPER_DROP, BrickSpec, PlantCommand
from .geometry import Pose, angle_diff, wrap_angle
from .perception import BrickDetection, PlacingSpotResult, SpotStatus


# ------------------------------------------------------------------ servoing

@dataclass
class ServoEstimate:
    """UAV position in the brick frame plus the remembered brick heading."""

    r_brick: np.ndarray   # (3,)
    brick_heading: float  # resolved orientation, (-pi, pi]
    brick_xy: np.ndarray  # (2,) last brick position used, navigation frame


def _brick_rotation(eta: float) -> np.ndarray:
    c, s = math.cos(eta), math.sin(eta)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def resolve_brick_heading(remembered: float, detected: float) -> float:
    """Pick detected vs detected+pi, whichever stays closer to the memory.

    Rectangular bricks are orientation-ambiguous by half a turn; continuity
    against the remembered value resolves the flip.
    """
    a = wrap_angle(detected)
    b = wrap_angle(detected + math.pi)
    return a if angle_diff(remembered, a) < angle_diff(remembered, b) else b


def servo_update(
    est: Optional[ServoEstimate],
    det: BrickDetection,
    uav_position: np.ndarray,
    brick_height: float = 0.2,
) -> ServoEstimate:
    """Refresh the brick-relative state from a detection of the target brick."""
    if est is None:
        eta = wrap_angle(det.heading)
    else:
        eta = resolve_brick_heading(est.brick_heading, det.heading)
    rel = np.array([
        uav_position[0] - det.center[0],
        uav_position[1] - det.center[1],
        uav_position[2] - brick_height,
    ])
    r = _brick_rotation(eta) @ rel
    return ServoEstimate(r_brick=r, brick_heading=eta,
                         brick_xy=np.asarray(det.center, dtype=float).copy())


def servo_dead_reckon(est: ServoEstimate, delta_world: np.ndarray) -> ServoEstimate:
    """Propagate the relative estimate by the UAV's own motion."""
    r = est.r_brick + _brick_rotation(est.brick_heading) @ np.asarray(delta_world)
    return ServoEstimate(r_brick=r, brick_heading=est.brick_heading,
                         brick_xy=est.brick_xy)


def servo_world_reference(est: ServoEstimate, r_target: np.ndarray,
                          believed: np.ndarray) -> np.ndarray:
    """World-frame reference that drives the relative state toward r_target."""
    delta = _brick_rotation(est.brick_heading).T @ (np.asarray(r_target) - est.r_brick)
    return np.asarray(believed, dtype=float) + delta


# ------------------------------------------------------------------ grasping

class GraspState(str, Enum):
    APPROACH = "approach"
    ALIGN1 = "align1"
    DESCEND = "descend"
    ALIGN2 = "align2"
    FINAL_DESCENT = "final_descent"
    GRASPED = "grasped"
    ASCEND = "ascend"
    DONE = "done"
    ABORTED = "aborted"


GRASP_TERMINAL = {GraspState.DONE, GraspState.ABORTED}

# Observation alphabet fields and their values. "mid" is the alignment
# hysteresis band: worse than the entry gate, better than the break gate.
GRASP_ALPHABET = {
    "det": ("none", "far", "mid", "near"),
    "low_hover": ("no", "yes"),       # reached the servo hand-over height
    "event": ("none", "latched", "mass_drop", "attitude_spike"),
    "ascended": ("no", "yes"),
    "attempts_left": ("no", "yes"),
    "timeout": ("no", "yes"),
}


def grasp_transition(state: GraspState, sym: dict) -> GraspState:
    """Pure transition function; total over the full observation alphabet."""
    if state in GRASP_TERMINAL:
        return state
    if state == GraspState.APPROACH:
        if sym["timeout"] == "yes":
            return GraspState.ABORTED
        if sym["det"] != "none":
            return GraspState.ALIGN1
        return GraspState.APPROACH
    if state == GraspState.ALIGN1:
        if sym["timeout"] == "yes":
            return GraspState.ABORTED
        if sym["det"] == "near":
            return GraspState.DESCEND
        return GraspState.ALIGN1
    if state == GraspState.DESCEND:
        if sym["event"] in ("mass_drop", "attitude_spike"):
            return GraspState.ASCEND
        if sym["det"] in ("far", "none"):
            return GraspState.ASCEND  # alignment broke: go up, retry
        if sym["low_hover"] == "yes":
            return GraspState.ALIGN2  # switch to visual servoing
        if sym["timeout"] == "yes":
            return GraspState.ASCEND
        return GraspState.DESCEND
    if state == GraspState.ALIGN2:
        if sym["event"] in ("mass_drop", "attitude_spike"):
            return GraspState.ASCEND
        if sym["timeout"] == "yes":
            return GraspState.ASCEND
        if sym["det"] == "near":
            return GraspState.FINAL_DESCENT
        return GraspState.ALIGN2
    if state == GraspState.FINAL_DESCENT:
        if sym["event"] == "latched":
            return GraspState.GRASPED
        if sym["event"] in ("mass_drop", "attitude_spike"):
            return GraspState.ASCEND
        if sym["timeout"] == "yes":
            return GraspState.ASCEND
        return GraspState.FINAL_DESCENT
    if state == GraspState.GRASPED:
        if sym["ascended"] == "yes":
            return GraspState.DONE
        return GraspState.GRASPED
    if state == GraspState.ASCEND:
        if sym["ascended"] == "yes":
            if sym["attempts_left"] == "yes":
                return GraspState.ALIGN1
            return GraspState.ABORTED
        return GraspState.ASCEND
    raise AssertionError(f"unhandled state {state}")


@dataclass
class GraspParams:
    align_gate: float = 0.2          # horizontal alignment to start the descent
    align_break: float = 0.35        # alignment loss during the descent
    descend_altitude: float = 0.8    # servo hand-over height above the brick
    approach_altitude: float = 2.2
    align2_tol0: float = 0.03
    align2_relax_rate: float = 0.002  # m per second
    align2_tol_max: float = 0.10
    max_attempts: int = 2
    mass_drop_factor: float = 0.9
    state_timeout: float = 25.0
    use_servoing: bool = True


class LocalizationMode(str, Enum):
    GPS = "gps"
    SERVOING = "servoing"
    OPTICFLOW = "opticflow"


GRASP_GREEN_STATES = {GraspState.ALIGN2, GraspState.FINAL_DESCENT}


@dataclass
class GraspStatus:
    state: GraspState
    running: bool
    success: bool
    banned_target: bool


class GraspController:
    """Drives one grasp attempt on an assigned brick."""

    def __init__(self, target_xy, spec: BrickSpec, params: GraspParams = None,
                 heading: float = 0.0):
        self.params = params or GraspParams()
        self.spec = spec
        self.target_xy = np.asarray(target_xy, dtype=float).copy()
        self.state = GraspState.APPROACH
        self.attempts = 0
        self.servo: Optional[ServoEstimate] = None
        self.carry_heading = heading
        self._state_t = 0.0
        self._align2_t = 0.0
        self._last_believed: Optional[np.ndarray] = None

    @property
    def mode(self) -> LocalizationMode:
        if self.params.use_servoing and self.state in GRASP_GREEN_STATES:
            return LocalizationMode.SERVOING
        return LocalizationMode.GPS

    def align2_tolerance(self) -> float:
        return min(
            self.params.align2_tol0 + self.params.align2_relax_rate * self._align2_t,
            self.params.align2_tol_max,
        )

    def step(self, believed: Pose, detections: list[BrickDetection],
             estimated_mass: float, airframe_mass: float, events: list[str],
             dt: float) -> tuple[PlantCommand, GraspStatus]:
        p = self.params
        pos = believed.position
        # Track the target with the best nearby detection.
        det = self._pick_detection(detections)
        if det is not None:
            if self.mode == LocalizationMode.SERVOING:
                self.servo = servo_update(self.servo, det, pos)
            else:
                self.target_xy = 0.5 * (self.target_xy + det.center)
                self.servo = servo_update(self.servo, det, pos)
        elif self.servo is not None and self._last_believed is not None:
            self.servo = servo_dead_reckon(self.servo, pos - self._last_believed)
        self._last_believed = pos.copy()

        horiz = float(np.linalg.norm(pos[:2] - self.target_xy))
        if self.mode == LocalizationMode.SERVOING and self.servo is not None:
            horiz = float(np.linalg.norm(self.servo.r_brick[:2]))
        gate = (self.align2_tolerance()
                if self.state == GraspState.ALIGN2 else p.align_gate)
        sym = {
            "det": ("none" if det is None and self.servo is None else
                    "near" if horiz < gate else
                    "far" if horiz > p.align_break else "mid"),
            "low_hover": "yes" if pos[2] <= self.spec.height + p.descend_altitude + 0.05
            else "no",
            "event": self._classify_event(events, estimated_mass, airframe_mass),
            "ascended": "yes" if pos[2] >= p.approach_altitude - 0.1 else "no",
            "attempts_left": "yes" if self.attempts < p.max_attempts else "no",
            "timeout": "yes" if self._state_t > p.state_timeout else "no",
        }
        prev = self.state
        nxt = grasp_transition(self.state, sym)
        if nxt is not prev:
            if prev == GraspState.DESCEND and nxt == GraspState.ASCEND:
                self.attempts += 1
            if nxt == GraspState.ALIGN2:
                self._align2_t = 0.0
            self.state = nxt
            self._state_t = 0.0
        else:
            self._state_t += dt
        if self.state == GraspState.ALIGN2:
            self._align2_t += dt
        cmd = self._command(believed)
        status = GraspStatus(
            state=self.state,
            running=self.state not in GRASP_TERMINAL,
            success=self.state == GraspState.DONE,
            banned_target=self.state == GraspState.ABORTED,
        )
        return cmd, status

    def _pick_detection(self, detections) -> Optional[BrickDetection]:
        best = None
        for d in detections:
            if d.color != self.spec.color:
                continue
            ref = self.servo.brick_xy if (
                self.mode == LocalizationMode.SERVOING and self.servo is not None
            ) else self.target_xy
            dist = float(np.linalg.norm(d.center - ref))
            if dist < 0.6 and (best is None or dist < best[0]):
                best = (dist, d)
        return best[1] if best else None

    def _classify_event(self, events, est_mass, airframe) -> str:
        if "latched" in events:
            return "latched"
        if "attitude_spike" in events:
            return "attitude_spike"
        if est_mass < self.params.mass_drop_factor * airframe:
            return "mass_drop"
        return "none"

    def _command(self, believed: Pose) -> PlantCommand:
        p = self.params
        pos = believed.position
        s = self.state
        brick_top = self.spec.height
        if s == GraspState.APPROACH:
            ref = np.array([self.target_xy[0], self.target_xy[1],
                            p.approach_altitude])
            return PlantCommand(ref, heading=self.carry_heading, speed=2.0)
        if s == GraspState.ALIGN1:
            ref = np.array([self.target_xy[0], self.target_xy[1],
                            p.approach_altitude])
            return PlantCommand(ref, heading=self.carry_heading, speed=1.0)
        if s == GraspState.DESCEND:
            ref = np.array([self.target_xy[0], self.target_xy[1],
                            brick_top + p.descend_altitude])
            return PlantCommand(ref, heading=self.carry_heading, speed=0.7,
                                descend_floor=brick_top)
        if s in (GraspState.ALIGN2, GraspState.FINAL_DESCENT):
            if p.use_servoing and self.servo is not None:
                hold = (p.descend_altitude if s == GraspState.ALIGN2
                        else GRIPPER_DROP - 0.03)
                target_rel = np.array([0.0, 0.0, hold])
                ref = servo_world_reference(self.servo, target_rel, pos)
            else:
                z = (brick_top + p.descend_altitude if s == GraspState.ALIGN2
                     else brick_top + GRIPPER_DROP - 0.03)
                ref = np.array([self.target_xy[0], self.target_xy[1], z])
            return PlantCommand(ref, heading=self.carry_heading, speed=0.4,
                                descend_floor=brick_top,
                                magnets=s == GraspState.FINAL_DESCENT)
        if s in (GraspState.GRASPED, GraspState.ASCEND, GraspState.DONE):
            ref = np.array([pos[0], pos[1], p.approach_altitude])
            return PlantCommand(ref, heading=self.carry_heading, speed=1.5,
                                magnets=s != GraspState.ASCEND)
        # ABORTED: hold position, magnets off.
        return PlantCommand(pos.copy(), heading=self.carry_heading, speed=0.5)


# ------------------------------------------------------------------ placing

class PlaceState(str, Enum):
    APPROACH = "approach"
    ALIGN = "align"
    DESCEND = "descend"
    RELEASE = "release"
    ASCEND = "ascend"
    DONE = "done"
    FAILED = "failed"


PLACE_TERMINAL = {PlaceState.DONE, PlaceState.FAILED}

PLACE_ALPHABET = {
    "spot": ("ok", "move_left", "not_visible", "no_space"),
    "aligned": ("no", "yes"),
    "at_height": ("no", "yes"),
    "released": ("no", "yes"),
    "ascended": ("no", "yes"),
    "timeout": ("no", "yes"),
}


def place_transition(state: PlaceState, sym: dict) -> PlaceState:
    if state in PLACE_TERMINAL:
        return state
    if state == PlaceState.APPROACH:
        if sym["timeout"] == "yes":
            return PlaceState.FAILED
        if sym["aligned"] == "yes" or sym["spot"] == "ok":
            return PlaceState.ALIGN
        return PlaceState.APPROACH
    if state == PlaceState.ALIGN:
        if sym["timeout"] == "yes" or sym["spot"] == "no_space":
            return PlaceState.FAILED
        if sym["spot"] == "ok" and sym["aligned"] == "yes":
            return PlaceState.DESCEND
        return PlaceState.ALIGN
    if state == PlaceState.DESCEND:
        if sym["spot"] == "not_visible" or sym["timeout"] == "yes":
            return PlaceState.FAILED  # wall lost mid-descent: drop and leave
        if sym["at_height"] == "yes":
            return PlaceState.RELEASE
        return PlaceState.DESCEND
    if state == PlaceState.RELEASE:
        if sym["released"] == "yes":
            return PlaceState.ASCEND
        return PlaceState.RELEASE
    if state == PlaceState.ASCEND:
        if sym["ascended"] == "yes":
            return PlaceState.DONE
        return PlaceState.ASCEND
    raise AssertionError(f"unhandled state {state}")


@dataclass
class PlaceParams:
    view_altitude: float = 2.3       # above the channel top while aligning
    release_clearance: float = 0.3   # brick bottom above the resting surface
    align_gate: float = 0.12
    move_left_step: float = 0.8
    state_timeout: float = 30.0


@dataclass
class PlaceStatus:
    state: PlaceState
    running: bool
    released: bool
    failed: bool


class PlaceController:
    """Aligns over the free end of the assigned channel and releases."""

    def __init__(self, channel_center, channel_direction, wall_top: float,
                 spec: BrickSpec, layer: int, expected_offset: float,
                 params: PlaceParams = None):
        self.params = params or PlaceParams()
        self.spec = spec
        self.layer = layer
        self.channel_center = np.asarray(channel_center, dtype=float)
        self.direction = np.asarray(channel_direction, dtype=float)
        self.direction = self.direction / np.linalg.norm(self.direction)
        self.wall_top = wall_top
        self.expected_offset = expected_offset
        self.state = PlaceState.APPROACH
        self.release_xy: Optional[np.ndarray] = None
        self.surface_z: Optional[float] = None
        self._released = False
        self._state_t = 0.0
        half = 0.0  # approach starts over the channel middle
        self._anchor = self.channel_center + self.direction * half

    @property
    def heading(self) -> float:
        return math.atan2(self.direction[1], self.direction[0])

    def _release_plant_z(self) -> float:
        surface = self.surface_z if self.surface_z is not None else (
            self.wall_top + 0.2 * self.layer
        )
        return (surface + self.params.release_clearance
                + self.spec.height + GRIPPER_DROP)

    def step(self, believed: Pose, spot: PlacingSpotResult,
             released_event: bool, dt: float) -> tuple[PlantCommand, PlaceStatus]:
        p = self.params
        pos = believed.position
        if spot.status == SpotStatus.OK and spot.spot is not None:
            self.release_xy = spot.spot.release_xy.copy()
            self.surface_z = spot.spot.surface_z
        aligned = (
            self.release_xy is not None
            and float(np.linalg.norm(pos[:2] - self.release_xy)) < p.align_gate
        )
        sym = {
            "spot": spot.status.value if spot.status != SpotStatus.OK else "ok",
            "aligned": "yes" if aligned else "no",
            "at_height": "yes" if pos[2] <= self._release_plant_z() + 0.05 else "no",
            "released": "yes" if (self._released or released_event) else "no",
            "ascended": "yes" if pos[2] >= self.wall_top + p.view_altitude - 0.15
            else "no",
            "timeout": "yes" if self._state_t > p.state_timeout else "no",
        }
        if self.state == PlaceState.DESCEND and self.release_xy is not None:
            # While descending the wall may legitimately leave the narrow
            # field of view near the release height; only an early loss fails.
            if sym["spot"] == "not_visible" and pos[2] < self.wall_top + 1.4:
                sym["spot"] = "ok"
        prev = self.state
        self.state = place_transition(self.state, sym)
        self._state_t = 0.0 if self.state is not prev else self._state_t + dt
        cmd = self._command(believed, spot)
        status = PlaceStatus(
            state=self.state,
            running=self.state not in PLACE_TERMINAL,
            released=self._released,
            failed=self.state == PlaceState.FAILED,
        )
        return cmd, status

    def request_release(self) -> bool:
        """The orchestrator calls this when the controller is in RELEASE."""
        if self.state == PlaceState.RELEASE and not self._released:
            self._released = True
            return True
        if self.state == PlaceState.FAILED and not self._released:
            self._released = True  # drop the brick rather than carry it around
            return True
        return False

    def _command(self, believed: Pose, spot: PlacingSpotResult) -> PlantCommand:
        p = self.params
        pos = believed.position
        view_z = self.wall_top + p.view_altitude
        if self.state == PlaceState.APPROACH:
            ref = np.array([self._anchor[0], self._anchor[1], view_z])
            return PlantCommand(ref, heading=self.heading, speed=1.5)
        if self.state == PlaceState.ALIGN:
            if spot.status == SpotStatus.EDGE_NOT_VISIBLE or self.release_xy is None:
                step = -self.direction * p.move_left_step
                ref = np.array([pos[0] + step[0], pos[1] + step[1], view_z])
            else:
                ref = np.array([self.release_xy[0], self.release_xy[1], view_z])
            return PlantCommand(ref, heading=self.heading, speed=0.8)
        if self.state == PlaceState.DESCEND:
            ref = np.array([self.release_xy[0], self.release_xy[1],
                            self._release_plant_z()])
            return PlantCommand(ref, heading=self.heading, speed=0.5,
                                descend_floor=self.wall_top + 0.2 * self.layer)
        if self.state == PlaceState.RELEASE:
            ref = np.array([pos[0], pos[1], pos[2]])
            return PlantCommand(ref, heading=self.heading, speed=0.3)
        # ASCEND / terminal states: climb back to the viewing height.
        ref = np.array([pos[0], pos[1], view_z + 0.5])
        return PlantCommand(ref, heading=self.heading, speed=1.5)


# ------------------------------------------------------------------ mission

class MissionState(str, Enum):
    PREPARE_WAIT = "prepare_wait"
    WAIT_FOR_MAP = "wait_for_map"
    WAIT_FOR_FINISH = "wait_for_finish"
    TAKE_OFF = "take_off"
    SCANNING = "scanning"
    ASSIGN_PLAN = "assign_plan"
    ASSIGN_NEXT_BRICK = "assign_next_brick"
    ASSIGN_CURRENT_BRICK = "assign_current_brick"
    CHECK_UAV = "check_uav"
    GRASPING = "grasping"
    PLACING = "placing"
    LAND = "land"
    EMERGENCY_LAND = "emergency_land"


MISSION_TERMINAL = {MissionState.LAND, MissionState.EMERGENCY_LAND}

MISSION_ALPHABET = {
    "role": ("scanner", "waiter", "builder"),
    "started": ("no", "yes"),
    "map_held": ("no", "yes"),
    "others_finished": ("no", "yes"),
    "airborne": ("no", "yes"),
    "scan_done": ("no", "yes"),
    "plan_ready": ("no", "yes"),
    "brick_available": ("no", "yes"),
    "check": ("ok", "battery_low", "sensor_fail"),
    "grasp": ("none", "success", "failed", "hard_fail"),
    "place": ("none", "placed", "lost_brick", "hard_fail"),
}


def mission_transition(state: MissionState, sym: dict) -> MissionState:
    if state in MISSION_TERMINAL:
        return state
    if state == MissionState.PREPARE_WAIT:
        if sym["started"] == "yes":
            if sym["role"] == "scanner":
                return MissionState.TAKE_OFF
            return MissionState.WAIT_FOR_MAP
        return MissionState.PREPARE_WAIT
    if state == MissionState.WAIT_FOR_MAP:
        if sym["map_held"] == "yes":
            if sym["role"] == "waiter":
                return MissionState.WAIT_FOR_FINISH
            return MissionState.TAKE_OFF
        return MissionState.WAIT_FOR_MAP
    if state == MissionState.WAIT_FOR_FINISH:
        if sym["others_finished"] == "yes":
            return MissionState.TAKE_OFF
        return MissionState.WAIT_FOR_FINISH
    if state == MissionState.TAKE_OFF:
        if sym["airborne"] == "yes":
            if sym["role"] == "scanner" and sym["map_held"] == "no":
                return MissionState.SCANNING
            return MissionState.ASSIGN_PLAN
        return MissionState.TAKE_OFF
    if state == MissionState.SCANNING:
        if sym["scan_done"] == "yes":
            return MissionState.ASSIGN_PLAN
        return MissionState.SCANNING
    if state == MissionState.ASSIGN_PLAN:
        if sym["plan_ready"] == "yes":
            return MissionState.ASSIGN_NEXT_BRICK
        if sym["map_held"] == "no":
            return MissionState.LAND  # cannot plan without a map
        return MissionState.ASSIGN_PLAN
    if state == MissionState.ASSIGN_NEXT_BRICK:
        if sym["brick_available"] == "yes":
            return MissionState.CHECK_UAV
        return MissionState.LAND
    if state == MissionState.ASSIGN_CURRENT_BRICK:
        return MissionState.CHECK_UAV
    if state == MissionState.CHECK_UAV:
        if sym["check"] == "ok":
            return MissionState.GRASPING
        return MissionState.LAND
    if state == MissionState.GRASPING:
        if sym["grasp"] == "success":
            return MissionState.PLACING
        if sym["grasp"] == "failed":
            return MissionState.ASSIGN_NEXT_BRICK
        if sym["grasp"] == "hard_fail":
            return MissionState.EMERGENCY_LAND
        return MissionState.GRASPING
    if state == MissionState.PLACING:
        if sym["place"] == "placed":
            return MissionState.ASSIGN_NEXT_BRICK
        if sym["place"] == "lost_brick":
            return MissionState.ASSIGN_CURRENT_BRICK
        if sym["place"] == "hard_fail":
            return MissionState.EMERGENCY_LAND
        return MissionState.PLACING
    raise AssertionError(f"unhandled state {state}")
