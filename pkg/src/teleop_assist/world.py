"""2.5-D kinematic world: mobile base, free-point end effector, tagged objects, occupancy grid.

The world is advanced functionally: ``step`` returns a new :class:`WorldState`
and never mutates its inputs, so any reference held by a background worker is
a stable snapshot. Exactly one owner (the session loop) is expected to drive
``step`` per session.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Iterable, Optional, Sequence, Union

import numpy as np

# Fixed tick rate: snippet timesteps are simulator ticks.
TICK_DT = 0.1

# Input clamps (units per HumanInput field docs).
MAX_BASE_LIN = 0.4
MAX_BASE_ANG = 0.9
MAX_EE_DELTA = 0.15

# End-effector workspace box, relative to the base: +-XY_HALF around the base
# in x/y, [0, 2*Z_HALF] in z.
WORKSPACE_XY_HALF = 0.9
WORKSPACE_Z_HALF = 0.9
WORKSPACE_Z_CENTER = 0.9

FOV_RAD = math.radians(110.0)
VIS_RANGE_M = 6.0
FOOTPRINT_RADIUS = 0.25
GRASP_RADIUS = 0.10
DOOR_CLEAR_RADIUS = 0.55

AFFORDANCE_TAGS = frozenset(
    {
        "graspable",
        "container",
        "pourable-target",
        "surface",
        "landmark",
        "door-push",
        "door-pull",
        "card-reader",
        "button",
        "navigable",
    }
)


class UnknownObjectError(KeyError):
    """Raised when an operation references an object id not present in the world."""


def normalize_angle(a: float) -> float:
    """Wrap an angle into (-pi, pi]."""
    a = math.fmod(a, 2.0 * math.pi)
    if a <= -math.pi:
        a += 2.0 * math.pi
    elif a > math.pi:
        a -= 2.0 * math.pi
    return a


@dataclass(frozen=True)
class Vec3:
    x: float
    y: float
    z: float

    def __post_init__(self):
        if not (math.isfinite(self.x) and math.isfinite(self.y) and math.isfinite(self.z)):
            raise ValueError(f"non-finite vector ({self.x}, {self.y}, {self.z})")

    def add(self, other: "Vec3") -> "Vec3":
        return Vec3(self.x + other.x, self.y + other.y, self.z + other.z)

    def sub(self, other: "Vec3") -> "Vec3":
        return Vec3(self.x - other.x, self.y - other.y, self.z - other.z)

    def scale(self, k: float) -> "Vec3":
        return Vec3(self.x * k, self.y * k, self.z * k)

    def norm(self) -> float:
        return math.sqrt(self.x * self.x + self.y * self.y + self.z * self.z)

    def dist(self, other: "Vec3") -> float:
        return self.sub(other).norm()

    def dist_xy(self, other: "Vec3") -> float:
        return math.hypot(self.x - other.x, self.y - other.y)

    def as_tuple(self) -> tuple:
        return (self.x, self.y, self.z)


ZERO3 = Vec3(0.0, 0.0, 0.0)


@dataclass(frozen=True)
class BasePose:
    x: float
    y: float
    theta: float

    def __post_init__(self):
        object.__setattr__(self, "theta", normalize_angle(self.theta))

    def heading(self) -> tuple:
        return (math.cos(self.theta), math.sin(self.theta))

    def dist_xy(self, p: Vec3) -> float:
        return math.hypot(self.x - p.x, self.y - p.y)


@dataclass(frozen=True)
class ObjectInstance:
    id: str
    class_name: str
    position: Vec3
    affordances: frozenset
    held_by_robot: bool = False
    contains: tuple = ()

    def __post_init__(self):
        if not self.affordances:
            raise ValueError(f"object {self.id!r} has an empty affordance set")
        unknown = set(self.affordances) - AFFORDANCE_TAGS
        if unknown:
            raise ValueError(f"object {self.id!r} has unknown affordances {sorted(unknown)}")

    def has(self, tag: str) -> bool:
        return tag in self.affordances


@dataclass(frozen=True)
class OccupancyGrid:
    """Static obstacle map; cell (ix, iy) covers [ix*res, (ix+1)*res) x [iy*res, ...)."""

    resolution: float
    width: int
    height: int
    occupied: np.ndarray  # bool, shape (width, height); treated as immutable

    @classmethod
    def empty(cls, width: int, height: int, resolution: float = 0.05) -> "OccupancyGrid":
        return cls(resolution, width, height, np.zeros((width, height), dtype=bool))

    def cell_of(self, x: float, y: float) -> tuple:
        return (int(math.floor(x / self.resolution)), int(math.floor(y / self.resolution)))

    def in_bounds(self, ix: int, iy: int) -> bool:
        return 0 <= ix < self.width and 0 <= iy < self.height

    def is_occupied_cell(self, ix: int, iy: int) -> bool:
        if not self.in_bounds(ix, iy):
            return True  # out of bounds is solid
        return bool(self.occupied[ix, iy])

    def with_rect(self, x0: float, y0: float, x1: float, y1: float) -> "OccupancyGrid":
        occ = self.occupied.copy()
        ix0, iy0 = self.cell_of(min(x0, x1), min(y0, y1))
        ix1, iy1 = self.cell_of(max(x0, x1) - 1e-9, max(y0, y1) - 1e-9)
        ix0, iy0 = max(ix0, 0), max(iy0, 0)
        ix1, iy1 = min(ix1, self.width - 1), min(iy1, self.height - 1)
        if ix1 >= ix0 and iy1 >= iy0:
            occ[ix0 : ix1 + 1, iy0 : iy1 + 1] = True
        return replace(self, occupied=occ)

    def cleared_around(self, x: float, y: float, radius: float) -> "OccupancyGrid":
        occ = self.occupied.copy()
        ix0, iy0 = self.cell_of(x - radius, y - radius)
        ix1, iy1 = self.cell_of(x + radius, y + radius)
        for ix in range(max(ix0, 0), min(ix1, self.width - 1) + 1):
            for iy in range(max(iy0, 0), min(iy1, self.height - 1) + 1):
                cx = (ix + 0.5) * self.resolution
                cy = (iy + 0.5) * self.resolution
                if math.hypot(cx - x, cy - y) <= radius:
                    occ[ix, iy] = False
        return replace(self, occupied=occ)

    def footprint_collides(self, x: float, y: float, radius: float = FOOTPRINT_RADIUS) -> bool:
        """Check a circular footprint against occupied cells by rasterizing its bounding box."""
        ix0, iy0 = self.cell_of(x - radius, y - radius)
        ix1, iy1 = self.cell_of(x + radius, y + radius)
        for ix in range(ix0, ix1 + 1):
            for iy in range(iy0, iy1 + 1):
                if not self.in_bounds(ix, iy):
                    return True
                if not self.occupied[ix, iy]:
                    continue
                # distance from circle center to the cell rectangle
                cx0, cy0 = ix * self.resolution, iy * self.resolution
                cx1, cy1 = cx0 + self.resolution, cy0 + self.resolution
                dx = max(cx0 - x, 0.0, x - cx1)
                dy = max(cy0 - y, 0.0, y - cy1)
                if math.hypot(dx, dy) <= radius:
                    return True
        return False


@dataclass(frozen=True)
class HumanInput:
    base_lin: float = 0.0
    base_ang: float = 0.0
    ee_delta: Vec3 = ZERO3
    grip_toggle: bool = False
    decision: Optional[str] = None  # "confirm" | "deny" | None

    @property
    def null_input(self) -> bool:
        return (
            self.base_lin == 0.0
            and self.base_ang == 0.0
            and self.ee_delta.norm() == 0.0
            and not self.grip_toggle
        )

    def clamped(self) -> "HumanInput":
        d = self.ee_delta
        return replace(
            self,
            base_lin=max(-MAX_BASE_LIN, min(MAX_BASE_LIN, self.base_lin)),
            base_ang=max(-MAX_BASE_ANG, min(MAX_BASE_ANG, self.base_ang)),
            ee_delta=Vec3(
                max(-MAX_EE_DELTA, min(MAX_EE_DELTA, d.x)),
                max(-MAX_EE_DELTA, min(MAX_EE_DELTA, d.y)),
                max(-MAX_EE_DELTA, min(MAX_EE_DELTA, d.z)),
            ),
        )


NULL_INPUT = HumanInput()


@dataclass(frozen=True)
class RobotAction:
    """One tick of autonomous control; the only channel a skill may mutate the world through."""

    base_lin: float = 0.0
    base_ang: float = 0.0
    ee_delta: Vec3 = ZERO3
    grip: Optional[str] = None  # "open" | "close"
    effect: Optional[tuple] = None  # ("open_door", id) | ("pour", src_id, dst_id)


Action = Union[HumanInput, RobotAction]


@dataclass(frozen=True)
class WorldState:
    base: BasePose
    ee: Vec3
    gripper_closed: bool
    gripper_contents: Optional[str]
    objects: tuple  # tuple[ObjectInstance, ...] in scenario declaration order
    grid: OccupancyGrid
    epoch: int = 0
    sim_time: float = 0.0
    blocked: bool = False  # set when the last step rejected base motion
    grasp_offset: Vec3 = ZERO3

    def __post_init__(self):
        if self.gripper_contents is not None and not self.gripper_closed:
            raise ValueError("gripper_contents set while gripper open")

    def object(self, object_id: str) -> ObjectInstance:
        for o in self.objects:
            if o.id == object_id:
                return o
        raise UnknownObjectError(object_id)

    def has_object(self, object_id: str) -> bool:
        return any(o.id == object_id for o in self.objects)

    def contained_ids(self) -> frozenset:
        out = set()
        for o in self.objects:
            out.update(o.contains)
        return frozenset(out)

    def workspace_box(self) -> tuple:
        lo = Vec3(
            self.base.x - WORKSPACE_XY_HALF,
            self.base.y - WORKSPACE_XY_HALF,
            WORKSPACE_Z_CENTER - WORKSPACE_Z_HALF,
        )
        hi = Vec3(
            self.base.x + WORKSPACE_XY_HALF,
            self.base.y + WORKSPACE_XY_HALF,
            WORKSPACE_Z_CENTER + WORKSPACE_Z_HALF,
        )
        return lo, hi


def _clamp_to_box(p: Vec3, lo: Vec3, hi: Vec3) -> Vec3:
    return Vec3(
        max(lo.x, min(hi.x, p.x)),
        max(lo.y, min(hi.y, p.y)),
        max(lo.z, min(hi.z, p.z)),
    )


def _with_object(objects: tuple, updated: ObjectInstance) -> tuple:
    return tuple(updated if o.id == updated.id else o for o in objects)


def step(world: WorldState, action: Action, dt: float) -> WorldState:
    """Advance the world one tick. Deterministic; rejected base motion sets ``blocked``."""
    if not (0.0 < dt <= 0.2):
        raise ValueError(f"dt out of range: {dt}")
    if isinstance(action, HumanInput):
        action = action.clamped()
        grip_cmd = None
        if action.grip_toggle:
            grip_cmd = "open" if world.gripper_closed else "close"
        effect = None
    else:
        grip_cmd = action.grip
        effect = action.effect

    epoch = world.epoch
    blocked = False

    # Base: unicycle kinematics, Euler integration with the pre-step heading.
    theta0 = world.base.theta
    nx = world.base.x + action.base_lin * math.cos(theta0) * dt
    ny = world.base.y + action.base_lin * math.sin(theta0) * dt
    ntheta = normalize_angle(theta0 + action.base_ang * dt)
    if (nx, ny) != (world.base.x, world.base.y) and world.grid.footprint_collides(nx, ny):
        nx, ny = world.base.x, world.base.y
        blocked = True
    base = BasePose(nx, ny, ntheta)

    # End effector: integrate then clamp into the (moved) workspace box.
    ee = world.ee.add(action.ee_delta.scale(dt))
    tmp = replace(world, base=base)
    lo, hi = tmp.workspace_box()
    ee = _clamp_to_box(ee, lo, hi)

    objects = world.objects
    gripper_closed = world.gripper_closed
    gripper_contents = world.gripper_contents
    grasp_offset = world.grasp_offset

    if grip_cmd == "close" and not gripper_closed:
        gripper_closed = True
        epoch += 1
        target = _nearest_graspable(world, ee)
        if target is not None:
            gripper_contents = target.id
            grasp_offset = ZERO3  # object snaps to the gripper center
            objects = _with_object(objects, replace(target, held_by_robot=True, position=ee))
    elif grip_cmd == "open" and gripper_closed:
        gripper_closed = False
        epoch += 1
        if gripper_contents is not None:
            held = world.object(gripper_contents)
            objects = _with_object(objects, replace(held, held_by_robot=False))
            gripper_contents = None
            grasp_offset = ZERO3

    # Held object tracks the end effector (constant grasp offset).
    if gripper_contents is not None:
        held = next(o for o in objects if o.id == gripper_contents)
        objects = _with_object(objects, replace(held, position=ee.add(grasp_offset)))

    grid = world.grid
    if effect is not None:
        objects, grid, changed = _apply_effect(world, objects, grid, effect, gripper_contents)
        if changed:
            epoch += 1

    # Contained objects ride along with their container.
    objects = _settle_contents(objects)

    return WorldState(
        base=base,
        ee=ee,
        gripper_closed=gripper_closed,
        gripper_contents=gripper_contents,
        objects=objects,
        grid=grid,
        epoch=epoch,
        sim_time=world.sim_time + dt,
        blocked=blocked,
        grasp_offset=grasp_offset,
    )


def _nearest_graspable(world: WorldState, ee: Vec3) -> Optional[ObjectInstance]:
    contained = world.contained_ids()
    best = None
    best_d = GRASP_RADIUS
    for o in sorted(world.objects, key=lambda o: o.id):
        if not o.has("graspable") or o.held_by_robot or o.id in contained:
            continue
        d = o.position.dist(ee)
        if d <= best_d:
            best, best_d = o, d
    return best


def _apply_effect(world, objects, grid, effect, gripper_contents):
    kind = effect[0]
    if kind == "open_door":
        anchor = next((o for o in objects if o.id == effect[1]), None)
        if anchor is None:
            return objects, grid, False
        door = anchor
        if not (door.has("door-push") or door.has("door-pull")):
            # reader/button anchors open the nearest door
            doors = [o for o in objects if o.has("door-push") or o.has("door-pull")]
            if not doors:
                return objects, grid, False
            door = min(doors, key=lambda o: (o.position.dist_xy(anchor.position), o.id))
        grid = grid.cleared_around(door.position.x, door.position.y, DOOR_CLEAR_RADIUS)
        return objects, grid, True
    if kind == "pour":
        src_id, dst_id = effect[1], effect[2]
        src = next((o for o in objects if o.id == src_id), None)
        dst = next((o for o in objects if o.id == dst_id), None)
        if src is None or dst is None or not src.contains:
            return objects, grid, False
        moved = src.contains
        objects = _with_object(objects, replace(src, contains=()))
        dst = next(o for o in objects if o.id == dst_id)
        objects = _with_object(objects, replace(dst, contains=dst.contains + moved))
        return objects, grid, True
    raise ValueError(f"unknown effect {effect!r}")


def _settle_contents(objects: tuple) -> tuple:
    by_id = {o.id: o for o in objects}
    for container in objects:
        for cid in container.contains:
            inner = by_id.get(cid)
            if inner is not None and inner.position != container.position:
                by_id[cid] = replace(inner, position=container.position)
    return tuple(by_id[o.id] for o in objects)


# Line-of-sight rays ignore cells this close to the target, so furniture does
# not occlude the objects sitting on it (or itself, when the object point sits
# at the center of a large footprint).
LOS_TARGET_SLACK = 0.65


def line_of_sight(grid: OccupancyGrid, x0: float, y0: float, x1: float, y1: float,
                  target_slack: float = LOS_TARGET_SLACK) -> bool:
    """True when no occupied cell lies on the segment, except within ``target_slack`` of the end."""
    length = math.hypot(x1 - x0, y1 - y0)
    if length <= target_slack:
        return True
    steps = max(2, int(length / (grid.resolution * 0.5)))
    for i in range(steps + 1):
        t = i / steps
        x = x0 + (x1 - x0) * t
        y = y0 + (y1 - y0) * t
        if math.hypot(x1 - x, y1 - y) <= target_slack:
            break
        ix, iy = grid.cell_of(x, y)
        if grid.in_bounds(ix, iy) and grid.occupied[ix, iy]:
            return False
    return True


def visible_objects(world: WorldState, fov_rad: float = FOV_RAD, range_m: float = VIS_RANGE_M) -> list:
    """Objects inside the forward view cone with clear line of sight, plus anything held.

    Objects inside a container are occluded by it and never reported.
    """
    contained = world.contained_ids()
    out = []
    for o in world.objects:
        if o.held_by_robot:
            out.append(o)
            continue
        if o.id in contained:
            continue
        d = world.base.dist_xy(o.position)
        if d > range_m:
            continue
        if d < 1e-9:
            out.append(o)
            continue
        bearing = math.atan2(o.position.y - world.base.y, o.position.x - world.base.x)
        if abs(normalize_angle(bearing - world.base.theta)) > fov_rad / 2.0:
            continue
        if line_of_sight(world.grid, world.base.x, world.base.y, o.position.x, o.position.y):
            out.append(o)
    return sorted(out, key=lambda o: o.id)


def distance_to(world: WorldState, object_id: str) -> float:
    """Planar base-to-object distance; the 0.7 m reach rule consumes this."""
    o = world.object(object_id)
    if o.held_by_robot:
        return 0.0
    return world.base.dist_xy(o.position)
