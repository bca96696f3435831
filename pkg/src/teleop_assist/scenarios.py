"""Scenario files: validation, loading, and lookup of the shipped task worlds."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Optional

from .world import (
    AFFORDANCE_TAGS,
    FOOTPRINT_RADIUS,
    WORKSPACE_Z_CENTER,
    BasePose,
    ObjectInstance,
    OccupancyGrid,
    Vec3,
    WorldState,
)

SCENARIO_FORMAT_VERSION = 1

SKILL_NAMES = frozenset(
    {
        "pick_up_object",
        "place_object",
        "pour_object",
        "navigate_to_point_on_ground",
        "goto_landmark",
        "push_open_door",
        "tap_card_open_door",
        "press_button",
    }
)


class ScenarioError(ValueError):
    """Scenario validation failure; carries every violation found."""

    def __init__(self, violations):
        self.violations = list(violations)
        super().__init__("; ".join(self.violations))


@dataclass(frozen=True)
class Subtask:
    skill: str
    object_id: str


@dataclass(frozen=True)
class ScenarioDef:
    name: str
    resolution: float
    grid_size: tuple  # (nx, ny) cells
    occupied_rects: tuple  # ((x0, y0, x1, y1) meters, ...)
    robot_spawn: BasePose
    objects: tuple  # tuple[ObjectInstance, ...]
    ground_truth_subtasks: tuple  # tuple[Subtask, ...]
    time_limit_s: float
    ee_start: Optional[Vec3] = None
    notes: str = ""

    def to_dict(self) -> dict:
        return {
            "format_version": SCENARIO_FORMAT_VERSION,
            "name": self.name,
            "grid": {
                "resolution": self.resolution,
                "size": list(self.grid_size),
                "occupied_rects": [list(r) for r in self.occupied_rects],
            },
            "robot_spawn": {
                "x": self.robot_spawn.x,
                "y": self.robot_spawn.y,
                "theta": self.robot_spawn.theta,
            },
            "objects": [
                {
                    "id": o.id,
                    "class_name": o.class_name,
                    "position": list(o.position.as_tuple()),
                    "affordances": sorted(o.affordances),
                    "contains": list(o.contains),
                }
                for o in self.objects
            ],
            "ground_truth_subtasks": [
                {"skill": s.skill, "object_id": s.object_id} for s in self.ground_truth_subtasks
            ],
            "time_limit_s": self.time_limit_s,
            "notes": self.notes,
        }


def parse_scenario(data: dict) -> ScenarioDef:
    violations = []
    name = data.get("name") or "unnamed"
    grid = data.get("grid", {})
    resolution = float(grid.get("resolution", 0.05))
    size = grid.get("size", [120, 120])
    rects = tuple(tuple(float(v) for v in r) for r in grid.get("occupied_rects", []))
    spawn = data.get("robot_spawn", {})
    base = BasePose(float(spawn.get("x", 0.0)), float(spawn.get("y", 0.0)), float(spawn.get("theta", 0.0)))

    objects = []
    seen = set()
    for entry in data.get("objects", []) + data.get("landmarks", []):
        oid = entry.get("id", "")
        if not oid:
            violations.append("object with missing id")
            continue
        if oid in seen:
            violations.append(f"duplicate object id {oid!r}")
            continue
        seen.add(oid)
        pos = entry.get("position", [0, 0, 0])
        aff = frozenset(entry.get("affordances", []))
        unknown = aff - AFFORDANCE_TAGS
        if unknown:
            violations.append(f"object {oid!r}: unknown affordances {sorted(unknown)}")
            continue
        if not aff:
            violations.append(f"object {oid!r}: empty affordance set")
            continue
        objects.append(
            ObjectInstance(
                id=oid,
                class_name=entry.get("class_name", oid),
                position=Vec3(float(pos[0]), float(pos[1]), float(pos[2])),
                affordances=aff,
                contains=tuple(entry.get("contains", [])),
            )
        )

    contained_seen = set()
    for o in objects:
        for cid in o.contains:
            if cid in contained_seen:
                violations.append(f"object {cid!r} contained by more than one container")
            contained_seen.add(cid)
            if cid not in seen:
                violations.append(f"object {o.id!r} contains unknown id {cid!r}")

    subtasks = []
    for entry in data.get("ground_truth_subtasks", []):
        skill = entry.get("skill", "")
        oid = entry.get("object_id", "")
        if skill not in SKILL_NAMES:
            violations.append(f"ground-truth subtask has unknown skill {skill!r}")
        if oid not in seen:
            violations.append(f"ground-truth subtask references unknown object {oid!r}")
        subtasks.append(Subtask(skill=skill, object_id=oid))

    ee_start = None
    if "ee_start" in data:
        p = data["ee_start"]
        ee_start = Vec3(float(p[0]), float(p[1]), float(p[2]))

    defn = ScenarioDef(
        name=name,
        resolution=resolution,
        grid_size=(int(size[0]), int(size[1])),
        occupied_rects=rects,
        robot_spawn=base,
        objects=tuple(objects),
        ground_truth_subtasks=tuple(subtasks),
        time_limit_s=float(data.get("time_limit_s", 300.0)),
        ee_start=ee_start,
        notes=str(data.get("notes", "")),
    )

    violations.extend(_placement_violations(defn))
    if violations:
        raise ScenarioError(violations)
    return defn


def _placement_violations(defn: ScenarioDef):
    grid = build_grid(defn)
    out = []
    if grid.footprint_collides(defn.robot_spawn.x, defn.robot_spawn.y, FOOTPRINT_RADIUS):
        out.append("robot spawn footprint overlaps occupied cells")
    contained = set()
    for o in defn.objects:
        contained.update(o.contains)
    for o in defn.objects:
        if o.id in contained:
            continue  # contents ride inside their container
        ix, iy = grid.cell_of(o.position.x, o.position.y)
        if not grid.in_bounds(ix, iy):
            out.append(f"object {o.id!r} outside the grid")
    return out


def build_grid(defn: ScenarioDef) -> OccupancyGrid:
    grid = OccupancyGrid.empty(defn.grid_size[0], defn.grid_size[1], defn.resolution)
    for x0, y0, x1, y1 in defn.occupied_rects:
        grid = grid.with_rect(x0, y0, x1, y1)
    return grid


def load_scenario(defn: ScenarioDef) -> WorldState:
    """Instantiate the world at epoch 0 from a validated definition."""
    grid = build_grid(defn)
    spawn = defn.robot_spawn
    if defn.ee_start is not None:
        ee = defn.ee_start
    else:
        ee = Vec3(
            spawn.x + 0.3 * math.cos(spawn.theta),
            spawn.y + 0.3 * math.sin(spawn.theta),
            WORKSPACE_Z_CENTER,
        )
    return WorldState(
        base=spawn,
        ee=ee,
        gripper_closed=False,
        gripper_contents=None,
        objects=defn.objects,
        grid=grid,
        epoch=0,
        sim_time=0.0,
    )


def load_scenario_file(path) -> ScenarioDef:
    with open(path, "r", encoding="utf-8") as fh:
        data = json.load(fh)
    version = data.get("format_version", SCENARIO_FORMAT_VERSION)
    if version != SCENARIO_FORMAT_VERSION:
        raise ScenarioError([f"unsupported scenario format version {version}"])
    return parse_scenario(data)


def builtin_scenario_path(name: str) -> Path:
    base = resources.files("teleop_assist") / "scenarios" / f"{name}.scenario"
    return Path(str(base))


def find_scenario(name_or_path: str) -> ScenarioDef:
    """Resolve a scenario by shipped name ('shelf') or by file path."""
    p = Path(name_or_path)
    if p.exists():
        return load_scenario_file(p)
    builtin = builtin_scenario_path(name_or_path)
    if builtin.exists():
        return load_scenario_file(builtin)
    raise ScenarioError([f"unknown scenario {name_or_path!r}"])


BUILTIN_SCENARIOS = ("shelf", "toy", "door_v1", "door_v2", "door_v3")
