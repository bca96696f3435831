"""Parameterized skill library: parameter estimation, grid path planning, tick-wise execution."""

from __future__ import annotations

import heapq
import math
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .intent import NAVIGATION_SKILLS, Intent, REACH_M, SkillClass
from .world import (
    FOOTPRINT_RADIUS,
    MAX_BASE_ANG,
    MAX_BASE_LIN,
    MAX_EE_DELTA,
    BasePose,
    OccupancyGrid,
    RobotAction,
    Vec3,
    WorldState,
    normalize_angle,
)

SQRT2 = math.sqrt(2.0)

STANDOFF_M = 0.5
STANDOFF_FALLBACK_RADII = (0.5, 0.65, 0.8, 0.95, 1.1)
EE_TOUCH_M = 0.02
EE_ACT_TOUCH_M = 0.03
PLACE_DROP_HEIGHT = 0.03
POUR_HOVER_HEIGHT = 0.15
PUSH_ADVANCE_M = 0.6
RETRACT_TICKS = 8
DEFAULT_TIMEOUT_S = 30.0
BLOCKED_LIMIT_TICKS = 20
WAYPOINT_TOL_M = 0.08
GOAL_POS_TOL_M = 0.1
GOAL_ANG_TOL_RAD = math.radians(10.0)


class ParameterError(ValueError):
    """Skill parameters cannot be resolved against the current world."""


@dataclass(frozen=True)
class SkillParams:
    skill: SkillClass
    target_object: Optional[str] = None
    target_pose: Optional[BasePose] = None  # navigation standoff
    target_point: Optional[Vec3] = None  # manipulation contact point
    aux: dict = field(default_factory=dict)


@dataclass(frozen=True)
class SkillStatus:
    state: str  # "running" | "succeeded" | "failed"
    reason: str = ""

    @property
    def running(self) -> bool:
        return self.state == "running"

    @property
    def terminal(self) -> bool:
        return self.state in ("succeeded", "failed")


RUNNING = SkillStatus("running")
SUCCEEDED = SkillStatus("succeeded")


def failed(reason: str) -> SkillStatus:
    return SkillStatus("failed", reason)


@dataclass(frozen=True)
class SkillExecution:
    params: SkillParams
    phase: str
    status: SkillStatus = RUNNING
    path: Optional[tuple] = None  # ((x, y) waypoints in meters, ...)
    waypoint_index: int = 0
    ticks_elapsed: int = 0
    blocked_ticks: int = 0
    phase_ticks: int = 0
    timeout_ticks: int = int(DEFAULT_TIMEOUT_S * 10)
    advanced_m: float = 0.0


# ---------------------------------------------------------------------------
# Path planning
# ---------------------------------------------------------------------------


def _neighbors(grid: OccupancyGrid, node: tuple, blocked) -> list:
    ix, iy = node
    out = []
    for dx in (-1, 0, 1):
        for dy in (-1, 0, 1):
            if dx == 0 and dy == 0:
                continue
            jx, jy = ix + dx, iy + dy
            if not grid.in_bounds(jx, jy) or blocked(jx, jy):
                continue
            if dx != 0 and dy != 0:
                # no corner cutting: both orthogonal steps must be free
                if blocked(ix + dx, iy) or blocked(ix, iy + dy):
                    continue
            out.append(((jx, jy), SQRT2 if dx != 0 and dy != 0 else 1.0))
    return out


def inflate(grid: OccupancyGrid, radius: float):
    """Blocked-cell predicate treating cells within ``radius`` of an obstacle as occupied."""
    if radius <= 0.0:
        return lambda ix, iy: grid.is_occupied_cell(ix, iy)
    r_cells = int(math.ceil(radius / grid.resolution))
    occ = grid.occupied
    padded = occ.copy()
    for dx in range(-r_cells, r_cells + 1):
        for dy in range(-r_cells, r_cells + 1):
            if math.hypot(dx, dy) * grid.resolution > radius:
                continue
            shifted = np.zeros_like(occ)
            x0s, x1s = max(0, dx), occ.shape[0] + min(0, dx)
            y0s, y1s = max(0, dy), occ.shape[1] + min(0, dy)
            x0d, x1d = max(0, -dx), occ.shape[0] + min(0, -dx)
            y0d, y1d = max(0, -dy), occ.shape[1] + min(0, -dy)
            shifted[x0d:x1d, y0d:y1d] = occ[x0s:x1s, y0s:y1s]
            padded |= shifted
    return lambda ix, iy: (not grid.in_bounds(ix, iy)) or bool(padded[ix, iy])


def plan_path(
    grid: OccupancyGrid,
    start: tuple,
    goal: tuple,
    inflate_radius: float = 0.0,
) -> Optional[list]:
    """A* over 8-connected free cells with the Euclidean heuristic.

    Returns the cell path start..goal inclusive, or None when unreachable.
    Costs are in cell units (1 orthogonal, sqrt(2) diagonal).
    """
    blocked = inflate(grid, inflate_radius)
    if grid.is_occupied_cell(*start):
        raise ValueError(f"start cell {start} is not free")
    if not grid.in_bounds(*goal) or blocked(*goal):
        return None
    if start == goal:
        return [start]

    def h(node):
        return math.hypot(node[0] - goal[0], node[1] - goal[1])

    open_heap = [(h(start), 0.0, start)]
    g_cost = {start: 0.0}
    came = {}
    closed = set()
    while open_heap:
        _, g, node = heapq.heappop(open_heap)
        if node in closed:
            continue
        if node == goal:
            path = [node]
            while node in came:
                node = came[node]
                path.append(node)
            return path[::-1]
        closed.add(node)
        for nxt, w in _neighbors(grid, node, blocked):
            ng = g + w
            if ng < g_cost.get(nxt, math.inf):
                g_cost[nxt] = ng
                came[nxt] = node
                heapq.heappush(open_heap, (ng + h(nxt), ng, nxt))
    return None


def path_cost(path: list) -> float:
    """Cost of a cell path in cell units."""
    total = 0.0
    for a, b in zip(path, path[1:]):
        total += SQRT2 if a[0] != b[0] and a[1] != b[1] else 1.0
    return total


# ---------------------------------------------------------------------------
# Parameter estimation
# ---------------------------------------------------------------------------


def estimate_params(intent: Intent, world: WorldState) -> SkillParams:
    """Resolve the confirmed intent into concrete skill parameters from ground truth."""
    if not world.has_object(intent.object_id):
        raise ParameterError(f"target object {intent.object_id!r} is gone")
    obj = world.object(intent.object_id)
    skill = intent.skill

    if skill in NAVIGATION_SKILLS:
        pose = standoff_pose(world, obj.position)
        if pose is None:
            raise ParameterError(f"no free standoff around {intent.object_id!r}")
        return SkillParams(skill=skill, target_object=obj.id, target_pose=pose)

    if skill is SkillClass.PUSH_OPEN_DOOR:
        return SkillParams(skill=skill, target_object=obj.id, target_point=obj.position)

    point = obj.position
    if skill is SkillClass.PLACE_OBJECT:
        point = Vec3(point.x, point.y, point.z + PLACE_DROP_HEIGHT)
    elif skill is SkillClass.POUR_OBJECT:
        point = Vec3(point.x, point.y, point.z + POUR_HOVER_HEIGHT)
    return SkillParams(skill=skill, target_object=obj.id, target_point=point)


def standoff_pose(world: WorldState, target: Vec3, standoff: float = STANDOFF_M) -> Optional[BasePose]:
    """Free base pose near ``target`` facing it.

    Candidates on rings of expanding radius; the winner is the one closest to
    the robot's current position (with a mild preference for tighter rings),
    which keeps the standoff on the side the operator is approaching from.
    """
    radii = [standoff] + [r for r in STANDOFF_FALLBACK_RADII if r > standoff]
    best = None
    best_cost = math.inf
    for radius in radii:
        for k in range(16):
            ang = k * math.pi / 8.0
            x = target.x + radius * math.cos(ang)
            y = target.y + radius * math.sin(ang)
            if world.grid.footprint_collides(x, y, FOOTPRINT_RADIUS):
                continue
            # tighter rings strongly preferred; approach side breaks ties
            cost = math.hypot(x - world.base.x, y - world.base.y) + 2.0 * (radius - standoff)
            if cost < best_cost:
                theta = math.atan2(target.y - y, target.x - x)
                best = BasePose(x, y, theta)
                best_cost = cost
    return best


# ---------------------------------------------------------------------------
# Execution
# ---------------------------------------------------------------------------


def start_execution(params: SkillParams, world: WorldState, timeout_s: float = DEFAULT_TIMEOUT_S) -> SkillExecution:
    """Plan and validate a skill before its first tick; failures are in-status."""
    timeout_ticks = int(timeout_s * 10)
    skill = params.skill

    if skill in NAVIGATION_SKILLS:
        start = world.grid.cell_of(world.base.x, world.base.y)
        goal = world.grid.cell_of(params.target_pose.x, params.target_pose.y)
        # inflate by footprint plus half a cell diagonal so waypoint centers stay clear
        margin = FOOTPRINT_RADIUS + world.grid.resolution * 0.75
        cells = plan_path(world.grid, start, goal, inflate_radius=margin)
        if cells is None:
            return SkillExecution(params=params, phase="done", status=failed("no_path"), timeout_ticks=timeout_ticks)
        res = world.grid.resolution
        waypoints = tuple(((ix + 0.5) * res, (iy + 0.5) * res) for ix, iy in cells)
        waypoints = waypoints + ((params.target_pose.x, params.target_pose.y),)
        return SkillExecution(params=params, phase="follow", path=waypoints, timeout_ticks=timeout_ticks)

    # Manipulation-class skills refuse to start out of reach (defense in depth
    # behind the candidate rules).
    if params.target_object is not None:
        if not world.has_object(params.target_object):
            return SkillExecution(params=params, phase="done", status=failed("target_gone"), timeout_ticks=timeout_ticks)
        d = world.base.dist_xy(world.object(params.target_object).position)
        if d > REACH_M:
            return SkillExecution(params=params, phase="done", status=failed("out_of_reach"), timeout_ticks=timeout_ticks)

    if skill is SkillClass.PICK_UP_OBJECT:
        if world.gripper_contents is not None:
            return SkillExecution(params=params, phase="done", status=failed("gripper_full"), timeout_ticks=timeout_ticks)
        return SkillExecution(params=params, phase="approach", timeout_ticks=timeout_ticks)
    if skill in (SkillClass.PLACE_OBJECT, SkillClass.POUR_OBJECT):
        if world.gripper_contents is None:
            return SkillExecution(params=params, phase="done", status=failed("gripper_empty"), timeout_ticks=timeout_ticks)
        return SkillExecution(params=params, phase="approach", timeout_ticks=timeout_ticks)
    if skill is SkillClass.PUSH_OPEN_DOOR:
        return SkillExecution(params=params, phase="actuate", timeout_ticks=timeout_ticks)
    if skill in (SkillClass.TAP_CARD_OPEN_DOOR, SkillClass.PRESS_BUTTON):
        return SkillExecution(params=params, phase="approach", timeout_ticks=timeout_ticks)
    return SkillExecution(params=params, phase="done", status=failed("unknown_skill"), timeout_ticks=timeout_ticks)


def _ee_step_toward(world: WorldState, point: Vec3) -> Vec3:
    delta = point.sub(world.ee)
    dist = delta.norm()
    if dist < 1e-9:
        return Vec3(0.0, 0.0, 0.0)
    # one tick covers at most MAX_EE_DELTA * dt meters
    speed = min(MAX_EE_DELTA, dist / 0.1)
    return delta.scale(speed / dist)


def _drive_along(world: WorldState, exec_: SkillExecution) -> tuple:
    """Waypoint-following controller: rotate toward the waypoint, then drive."""
    wx, wy = exec_.path[exec_.waypoint_index]
    base = world.base
    dist = math.hypot(wx - base.x, wy - base.y)
    idx = exec_.waypoint_index
    while dist <= WAYPOINT_TOL_M and idx < len(exec_.path) - 1:
        idx += 1
        wx, wy = exec_.path[idx]
        dist = math.hypot(wx - base.x, wy - base.y)
    bearing = math.atan2(wy - base.y, wx - base.x)
    err = normalize_angle(bearing - base.theta)
    ang = max(-MAX_BASE_ANG, min(MAX_BASE_ANG, 3.0 * err))
    lin = 0.0
    if abs(err) < 0.4:
        lin = min(MAX_BASE_LIN, max(0.08, 1.5 * dist))
    return RobotAction(base_lin=lin, base_ang=ang), replace(exec_, waypoint_index=idx)


def skill_tick(exec_: SkillExecution, world: WorldState, dt: float = 0.1) -> tuple:
    """One tick of the skill's phase machine: (RobotAction, next execution state)."""
    if not exec_.status.running:
        return RobotAction(), exec_

    exec_ = replace(exec_, ticks_elapsed=exec_.ticks_elapsed + 1, phase_ticks=exec_.phase_ticks + 1)
    if exec_.ticks_elapsed > exec_.timeout_ticks:
        return RobotAction(), replace(exec_, status=failed("timeout"))
    blocked_ticks = exec_.blocked_ticks + 1 if world.blocked else 0
    if blocked_ticks > BLOCKED_LIMIT_TICKS:
        return RobotAction(), replace(exec_, status=failed("blocked"))
    exec_ = replace(exec_, blocked_ticks=blocked_ticks)

    skill = exec_.params.skill
    if skill in NAVIGATION_SKILLS:
        return _tick_navigate(exec_, world)
    if skill is SkillClass.PICK_UP_OBJECT:
        return _tick_pick(exec_, world)
    if skill in (SkillClass.PLACE_OBJECT, SkillClass.POUR_OBJECT):
        return _tick_place_or_pour(exec_, world)
    if skill is SkillClass.PUSH_OPEN_DOOR:
        return _tick_push(exec_, world, dt)
    if skill in (SkillClass.TAP_CARD_OPEN_DOOR, SkillClass.PRESS_BUTTON):
        return _tick_touch_opener(exec_, world)
    return RobotAction(), replace(exec_, status=failed("unknown_skill"))


def _tick_navigate(exec_: SkillExecution, world: WorldState) -> tuple:
    goal = exec_.params.target_pose
    base = world.base
    pos_err = math.hypot(goal.x - base.x, goal.y - base.y)
    if exec_.phase == "follow":
        if pos_err <= GOAL_POS_TOL_M:
            return RobotAction(), replace(exec_, phase="align", phase_ticks=0)
        return _drive_along(world, exec_)
    # align
    err = normalize_angle(goal.theta - base.theta)
    if abs(err) <= GOAL_ANG_TOL_RAD:
        return RobotAction(), replace(exec_, status=SUCCEEDED)
    ang = max(-MAX_BASE_ANG, min(MAX_BASE_ANG, 3.0 * err))
    return RobotAction(base_ang=ang), exec_


def _tick_pick(exec_: SkillExecution, world: WorldState) -> tuple:
    target_id = exec_.params.target_object
    if not world.has_object(target_id):
        return RobotAction(), replace(exec_, status=failed("target_gone"))
    target = world.object(target_id).position
    if exec_.phase == "approach":
        if world.ee.dist(target) <= EE_TOUCH_M:
            return RobotAction(grip="close"), replace(exec_, phase="verify", phase_ticks=0)
        return RobotAction(ee_delta=_ee_step_toward(world, target)), exec_
    if exec_.phase == "verify":
        if world.gripper_contents != target_id:
            return RobotAction(grip="open"), replace(exec_, status=failed("grasp_missed"))
        return RobotAction(), replace(exec_, phase="retract", phase_ticks=0)
    return _retract(exec_, world)


def _tick_place_or_pour(exec_: SkillExecution, world: WorldState) -> tuple:
    if world.gripper_contents is None:
        return RobotAction(), replace(exec_, status=failed("gripper_empty"))
    point = exec_.params.target_point
    if exec_.phase == "approach":
        if world.ee.dist(point) <= EE_ACT_TOUCH_M:
            return RobotAction(), replace(exec_, phase="actuate", phase_ticks=0)
        return RobotAction(ee_delta=_ee_step_toward(world, point)), exec_
    if exec_.phase == "actuate":
        if exec_.params.skill is SkillClass.PLACE_OBJECT:
            action = RobotAction(grip="open")
        else:
            action = RobotAction(effect=("pour", world.gripper_contents, exec_.params.target_object))
        return action, replace(exec_, phase="retract", phase_ticks=0)
    return _retract(exec_, world)


def _tick_push(exec_: SkillExecution, world: WorldState, dt: float) -> tuple:
    if exec_.phase == "actuate":
        action = RobotAction(effect=("open_door", exec_.params.target_object))
        return action, replace(exec_, phase="advance", phase_ticks=0, advanced_m=0.0)
    # advance: drive straight through the opened doorway
    if exec_.advanced_m >= PUSH_ADVANCE_M:
        return RobotAction(), replace(exec_, status=SUCCEEDED)
    lin = min(MAX_BASE_LIN, 0.3)
    return RobotAction(base_lin=lin), replace(exec_, advanced_m=exec_.advanced_m + lin * dt)


def _tick_touch_opener(exec_: SkillExecution, world: WorldState) -> tuple:
    target_id = exec_.params.target_object
    if not world.has_object(target_id):
        return RobotAction(), replace(exec_, status=failed("target_gone"))
    point = world.object(target_id).position
    if exec_.phase == "approach":
        if world.ee.dist(point) <= EE_ACT_TOUCH_M:
            return RobotAction(effect=("open_door", target_id)), replace(exec_, phase="retract", phase_ticks=0)
        return RobotAction(ee_delta=_ee_step_toward(world, point)), exec_
    return _retract(exec_, world)


def _retract(exec_: SkillExecution, world: WorldState) -> tuple:
    if exec_.phase_ticks >= RETRACT_TICKS:
        return RobotAction(), replace(exec_, status=SUCCEEDED)
    # pull the gripper up and back toward the base center
    home = Vec3(world.base.x, world.base.y, 1.0)
    return RobotAction(ee_delta=_ee_step_toward(world, home)), exec_
