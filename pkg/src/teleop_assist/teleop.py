"""Teleoperation capture: tick records, snippet buffering/subsampling, scripted operators."""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from .scenarios import ScenarioDef, Subtask
from .world import (
    MAX_BASE_ANG,
    MAX_BASE_LIN,
    MAX_EE_DELTA,
    BasePose,
    HumanInput,
    Vec3,
    WorldState,
    normalize_angle,
)

DEFAULT_BUFFER_CAPACITY = 300


class OutOfOrderTickError(ValueError):
    """Raised when a record is pushed with a tick not greater than the last one."""


@dataclass(frozen=True)
class TickRecord:
    tick: int
    input: HumanInput
    base: BasePose
    ee: Vec3
    gripper_contents: Optional[str] = None


@dataclass(frozen=True)
class Snippet:
    """Subsampled teleoperation history; immutable and safe to hand to workers."""

    records: tuple  # tuple[TickRecord, ...], oldest first
    t_start: int
    t_end: int
    epoch: int

    def __len__(self) -> int:
        return len(self.records)

    def suffix(self, t: int) -> "Snippet":
        """The most recent t records (the full snippet if t exceeds the length)."""
        if t >= len(self.records):
            return self
        records = self.records[-t:]
        return replace(self, records=records, t_start=records[0].tick)


class InputBuffer:
    """Ring buffer of the most recent teleoperation ticks."""

    def __init__(self, capacity: int = DEFAULT_BUFFER_CAPACITY):
        self.capacity = capacity
        self._records = deque(maxlen=capacity)
        self._epochs = deque(maxlen=capacity)

    def __len__(self) -> int:
        return len(self._records)

    @property
    def last_tick(self) -> Optional[int]:
        return self._records[-1].tick if self._records else None

    def push(self, record: TickRecord, epoch: int) -> None:
        if self._records and record.tick <= self._records[-1].tick:
            raise OutOfOrderTickError(
                f"tick {record.tick} not after {self._records[-1].tick}"
            )
        self._records.append(record)
        self._epochs.append(epoch)

    def clear(self) -> None:
        self._records.clear()
        self._epochs.clear()

    def snapshot(self, t: int, stride: int = 1) -> Optional[Snippet]:
        """The last t*stride records subsampled at ``stride``; None if history is short."""
        if t < 1 or stride < 1:
            raise ValueError("t and stride must be positive")
        window = t * stride
        if len(self._records) < window:
            return None  # insufficient history: the caller stays silent
        records = list(self._records)[-window:]
        picked = tuple(records[::stride])
        return Snippet(
            records=picked,
            t_start=picked[0].tick,
            t_end=picked[-1].tick,
            epoch=self._epochs[-1],
        )


@dataclass
class ScriptedHumanConfig:
    gain: float = 1.2  # 1/s proportional gain toward the goal point
    noise_sigma: float = 0.0  # m/s Gaussian noise per ee velocity component
    distractor_prob: float = 0.0  # per-tick chance to begin a distractor dwell
    dwell_ticks: int = 12
    seed: int = 0
    speed_scale: float = 1.0  # scales commanded speeds; slow operators produce long snippets
    nav_hover_m: float = 1.3  # loiter outside this range while awaiting a navigation proposal
    door_hover_m: float = 0.45  # creep this close to doors being pushed
    reach_park_m: float = 0.68  # drive the base until a manipulation target is just inside reach
    ee_floor_speed: float = 0.012  # m/s minimum approach speed so evidence never washes out
    ee_stop_m: float = 0.03  # hold position once the gripper is this close
    manual_grip: bool = False  # toggle the gripper on contact (full-teleop operation)


# Skills whose teleoperation signal is base motion rather than end-effector motion.
BASE_DRIVEN_SKILLS = frozenset({"navigate_to_point_on_ground", "goto_landmark", "push_open_door"})
RELEASE_SKILLS = frozenset({"place_object", "pour_object"})


class ScriptedHuman:
    """Deterministic stand-in operator pursuing a scenario's ground-truth subtasks.

    Emits one HumanInput per tick toward the current goal, optionally corrupted
    by Gaussian noise and distractor dwells (stretches of steering toward a
    non-goal object, the ambiguity real operators exhibit). While waiting for a
    proposal it loiters near the goal with approach/retreat cycles so the
    motion always carries directional evidence.
    """

    def __init__(self, cfg: ScriptedHumanConfig, scenario: ScenarioDef):
        self.cfg = cfg
        self.scenario = scenario
        self.rng = np.random.default_rng(cfg.seed)
        self._dwell_left = 0
        self._dwell_target: Optional[str] = None
        self._forced_dwells = {}  # subtask index -> (object_id, ticks)
        self._forced_done = set()

    def force_dwell(self, subtask_index: int, object_id: str, ticks: int) -> None:
        """Schedule a deterministic feint toward ``object_id`` at the start of a subtask."""
        self._forced_dwells[subtask_index] = (object_id, ticks)

    def decide(self, proposal_intent, subtask: Subtask) -> str:
        """Confirm proposals matching the current ground-truth subtask, deny others."""
        if (
            proposal_intent.skill.value == subtask.skill
            and proposal_intent.object_id == subtask.object_id
        ):
            return "confirm"
        return "deny"

    def step(self, world: WorldState, subtask_index: int, subtask: Subtask) -> HumanInput:
        cfg = self.cfg
        goal_id = subtask.object_id

        forced = self._forced_dwells.get(subtask_index)
        if forced is not None and subtask_index not in self._forced_done:
            obj_id, ticks = forced
            self._dwell_target = obj_id
            self._dwell_left = ticks
            self._forced_done.add(subtask_index)

        if self._dwell_left > 0 and self._dwell_target is not None:
            self._dwell_left -= 1
            if world.has_object(self._dwell_target):
                return self._toward(world, self._dwell_target, subtask.skill, allow_grip=False)
            self._dwell_left = 0

        if cfg.distractor_prob > 0 and self.rng.random() < cfg.distractor_prob:
            contained = world.contained_ids()
            others = [
                o.id
                for o in world.objects
                if o.id != goal_id and not o.held_by_robot and o.id not in contained
            ]
            if others:
                self._dwell_target = others[int(self.rng.integers(len(others)))]
                self._dwell_left = cfg.dwell_ticks
                return self._toward(world, self._dwell_target, subtask.skill, allow_grip=False)

        return self._toward(world, goal_id, subtask.skill, allow_grip=True)

    def _toward(self, world: WorldState, object_id: str, skill: str, allow_grip: bool) -> HumanInput:
        if not world.has_object(object_id):
            return HumanInput()
        target = world.object(object_id).position
        if skill == "push_open_door":
            return self._drive_base(world, target, hover=self.cfg.door_hover_m)
        if skill in BASE_DRIVEN_SKILLS:
            return self._drive_base(world, target, hover=self.cfg.nav_hover_m)
        dist = world.base.dist_xy(target)
        if dist > self.cfg.reach_park_m:
            return self._drive_base(world, target, hover=self.cfg.reach_park_m)
        return self._move_ee(world, target, skill, allow_grip)

    def _drive_base(self, world: WorldState, target: Vec3, hover: float) -> HumanInput:
        cfg = self.cfg
        base = world.base
        dist = base.dist_xy(target)
        bearing = math.atan2(target.y - base.y, target.x - base.x)
        err = normalize_angle(bearing - base.theta)
        ang = max(-MAX_BASE_ANG, min(MAX_BASE_ANG, 2.0 * err * cfg.speed_scale))
        if abs(err) > 0.5:
            lin = 0.0
        else:
            margin = dist - hover
            if margin > 0.0:
                lin = min(MAX_BASE_LIN, cfg.gain * margin + 0.05) * cfg.speed_scale
            else:
                # hold position just outside the hover ring without going quiet
                lin = max(-0.05, min(0.03, cfg.gain * margin)) * cfg.speed_scale
        return HumanInput(base_lin=lin, base_ang=ang)

    def _move_ee(self, world: WorldState, target: Vec3, skill: str, allow_grip: bool) -> HumanInput:
        cfg = self.cfg
        if cfg.manual_grip and allow_grip:
            grip = self._manual_grip_input(world, target, skill)
            if grip is not None:
                return grip
        # operators look at what they manipulate: rotate the view cone onto the target
        bearing = math.atan2(target.y - world.base.y, target.x - world.base.x)
        err = normalize_angle(bearing - world.base.theta)
        ang = 0.0
        if abs(err) > 0.2:
            ang = max(-MAX_BASE_ANG, min(MAX_BASE_ANG, 2.0 * err * cfg.speed_scale))
        delta = target.sub(world.ee)
        dist = delta.norm()
        if dist <= cfg.ee_stop_m:
            v = np.zeros(3)
        else:
            direction = np.array([delta.x, delta.y, delta.z]) / dist
            speed = min(MAX_EE_DELTA, cfg.gain * dist) * cfg.speed_scale
            speed = max(speed, cfg.ee_floor_speed)
            v = direction * speed
        if cfg.noise_sigma > 0:
            v = v + self.rng.normal(0.0, cfg.noise_sigma, size=3)
        v = np.clip(v, -MAX_EE_DELTA, MAX_EE_DELTA)
        return HumanInput(
            base_ang=ang, ee_delta=Vec3(float(v[0]), float(v[1]), float(v[2]))
        )

    def _manual_grip_input(self, world: WorldState, target: Vec3, skill: str) -> Optional[HumanInput]:
        dist = world.ee.dist(target)
        if skill == "pick_up_object" and not world.gripper_closed and dist < 0.06:
            return HumanInput(grip_toggle=True)
        if skill in RELEASE_SKILLS and world.gripper_closed and world.gripper_contents is not None:
            above = Vec3(target.x, target.y, target.z + 0.05)
            if world.ee.dist(above) < 0.07:
                return HumanInput(grip_toggle=True)
        return None
