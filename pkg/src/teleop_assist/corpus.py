"""Evaluation corpus generation: scripted episodes on the shipped scenarios plus
constructed trap and ambiguity scenes, cut into labeled segments."""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from .arbiter import Session, SessionConfig
from .episode import (
    EpisodeWriter,
    Segment,
    canonical_json,
    drive_session,
    episode_outcome,
    extract_segments,
    load_segments,
    save_segments,
)
from .intent import EMPTY_HISTORY, GateConfig, generate_candidates
from .scenarios import ScenarioDef, Subtask, find_scenario, load_scenario, parse_scenario
from .teleop import ScriptedHuman, ScriptedHumanConfig
from .world import HumanInput, Vec3, WorldState

BUILTIN_CORPUS_SCENARIOS = ("shelf", "toy", "door_v1", "door_v2", "door_v3")


# ---------------------------------------------------------------------------
# Constructed scenes
# ---------------------------------------------------------------------------


def _parked_scene(name: str, objects: list, gt: list, notes: str,
                  theta: float = 1.5707963267948966) -> ScenarioDef:
    """4x4 m walled room with the robot parked mid-room."""
    return parse_scenario(
        {
            "format_version": 1,
            "name": name,
            "notes": notes,
            "grid": {
                "resolution": 0.05,
                "size": [80, 80],
                "occupied_rects": [
                    [0.0, 0.0, 4.0, 0.05],
                    [0.0, 3.95, 4.0, 4.0],
                    [0.0, 0.0, 0.05, 4.0],
                    [3.95, 0.0, 4.0, 4.0],
                ],
            },
            "robot_spawn": {"x": 2.0, "y": 1.4, "theta": theta},
            "ee_start": [2.0, 1.5, 0.9],
            "objects": objects,
            "ground_truth_subtasks": gt,
            "time_limit_s": 120.0,
        }
    )


def pour_trap_scenario(jitter: np.random.Generator) -> ScenarioDef:
    """Commonsense trap: the correct pour target is farther from the gripper path
    than several nonsense-but-feasible ones, so geometry-only inference picks wrong."""

    def j(scale=0.02):
        return float(jitter.uniform(-scale, scale))

    pot = [2.0 + j(), 1.95 + j(), 0.9]
    # distractors sit along and beside the gripper's feint path
    laptop = [2.32 + j(), 1.38 + j(), 0.9]
    box = [2.42 + j(), 1.78 + j(), 0.9]
    frame = [2.33 + j(), 1.98 + j(), 0.9]
    objects = [
        {
            "id": "jar",
            "class_name": "pasta jar",
            "position": [2.0, 1.5, 0.9],
            "affordances": ["graspable"],
            "contains": ["pasta"],
        },
        {"id": "pasta", "class_name": "pasta", "position": [2.0, 1.5, 0.9], "affordances": ["graspable"]},
        {"id": "pot", "class_name": "cooking pot", "position": pot, "affordances": ["container", "pourable-target"]},
        {"id": "laptop", "class_name": "laptop", "position": laptop, "affordances": ["pourable-target"]},
        {"id": "box", "class_name": "sweetener box", "position": box, "affordances": ["pourable-target"]},
        {"id": "frame", "class_name": "picture frame", "position": frame, "affordances": ["pourable-target"]},
    ]
    gt = [{"skill": "pour_object", "object_id": "pot"}]
    # face between the pot (ahead) and the laptop (off to the right) so all are in view
    return _parked_scene("trap_pour", objects, gt, "constructed commonsense trap scene", theta=0.75)


def place_ambiguity_scenario(jitter: np.random.Generator, goal_left: bool) -> ScenarioDef:
    """Mirror-symmetric receptacles; the operator hesitates at the decision point,
    so short recent windows are ambiguous while the full approach is clear."""

    def j(scale=0.015):
        return float(jitter.uniform(-scale, scale))

    objects = [
        {"id": "toy", "class_name": "toy robot", "position": [2.0, 1.5, 0.9], "affordances": ["graspable"]},
        {
            "id": "basket",
            "class_name": "wicker basket",
            "position": [1.6 + j(), 1.9 + j(), 0.9],
            "affordances": ["container"],
        },
        {
            "id": "bag",
            "class_name": "canvas bag",
            "position": [2.4 + j(), 1.9 + j(), 0.9],
            "affordances": ["container"],
        },
    ]
    goal = "basket" if goal_left else "bag"
    gt = [{"skill": "place_object", "object_id": goal}]
    return _parked_scene("ambiguous_place", objects, gt, "constructed symmetric ambiguity scene")


def pick_pair_scenario(jitter: np.random.Generator, goal_first: bool) -> ScenarioDef:
    """Two same-class jars separated angularly: direction, not distance, disambiguates."""

    def j(scale=0.015):
        return float(jitter.uniform(-scale, scale))

    objects = [
        {
            "id": "jar_a",
            "class_name": "pasta jar",
            "position": [1.7 + j(), 1.85 + j(), 1.15],
            "affordances": ["graspable"],
        },
        {
            "id": "jar_b",
            "class_name": "pasta jar",
            "position": [2.3 + j(), 1.85 + j(), 0.65],
            "affordances": ["graspable"],
        },
    ]
    goal = "jar_a" if goal_first else "jar_b"
    gt = [{"skill": "pick_up_object", "object_id": goal}]
    return _parked_scene("pick_pair", objects, gt, "constructed directional disambiguation scene")


def with_held_object(world: WorldState, object_id: str) -> WorldState:
    """Start a scene with the object already in the gripper."""
    obj = world.object(object_id)
    objects = tuple(
        replace(o, held_by_robot=True, position=world.ee) if o.id == object_id else o
        for o in world.objects
    )
    return replace(
        world,
        objects=objects,
        gripper_closed=True,
        gripper_contents=object_id,
    )


# ---------------------------------------------------------------------------
# Synthetic-scene operators (hand-rolled input scripts with phase control)
# ---------------------------------------------------------------------------

def _vel_toward(ee: Vec3, target: Vec3, speed: float) -> np.ndarray:
    d = target.sub(ee)
    n = d.norm()
    if n < 1e-9:
        return np.zeros(3)
    return np.array([d.x, d.y, d.z]) / n * speed


class _EeScript:
    """Base for synthetic end-effector operators: wander prologue plus noise."""

    def __init__(self, rng: np.random.Generator, noise_sigma: float, wander_ticks: int):
        self.rng = rng
        self.noise_sigma = noise_sigma
        self.wander_ticks = wander_ticks
        self._tick = 0

    def _wander(self) -> Optional[np.ndarray]:
        if self._tick >= self.wander_ticks:
            return None
        self._tick += 1
        ang = 0.9 * self._tick
        return np.array([math.cos(ang), math.sin(ang), 0.25 * math.sin(0.4 * ang)]) * 0.012

    def _noisy(self, v: np.ndarray) -> HumanInput:
        if self.noise_sigma > 0:
            v = v + self.rng.normal(0.0, self.noise_sigma, size=3)
        v = np.clip(v, -0.15, 0.15)
        return HumanInput(ee_delta=Vec3(float(v[0]), float(v[1]), float(v[2])))


class TrapScript(_EeScript):
    """Slow feint toward the wrong object, then a quicker veer to the true goal;
    the cut lands shortly after the veer while geometry still favors the feint."""

    def __init__(self, goal: Vec3, feint: Vec3, rng, noise_sigma=0.004,
                 wander_ticks=50, feint_stop_m=0.16, feint_speed=0.04,
                 veer_speed=0.065, cut_travel_m=0.12):
        super().__init__(rng, noise_sigma, wander_ticks)
        self.goal = goal
        self.feint = feint
        self.feint_stop_m = feint_stop_m
        self.feint_speed = feint_speed
        self.veer_speed = veer_speed
        self.cut_travel_m = cut_travel_m
        self._travel = 0.0
        self._feinting = True

    def __call__(self, tick: int, prev, session: Session) -> Optional[HumanInput]:
        ee = session.world.ee
        v = self._wander()
        if v is not None:
            return self._noisy(v)
        if self._feinting:
            if self.feint.sub(ee).norm() <= self.feint_stop_m:
                self._feinting = False
            else:
                return self._noisy(_vel_toward(ee, self.feint, self.feint_speed))
        if self._travel >= self.cut_travel_m or self.goal.sub(ee).norm() <= 0.06:
            return None
        self._travel += self.veer_speed * 0.1
        return self._noisy(_vel_toward(ee, self.goal, self.veer_speed))


class HesitationScript(_EeScript):
    """Commit toward the goal, then hesitate at the decision point (drift and
    second-guessing wiggles toward the alternative); the cut lands inside the
    hesitation, so recent motion is ambiguous while the full window is clear."""

    def __init__(self, goal: Vec3, other: Vec3, rng, noise_sigma=0.010,
                 wander_ticks=40, commit_stop_m=0.30, commit_speed=0.05,
                 hesitate_ticks=20, dwell_span=None, dwell_speed=0.035):
        super().__init__(rng, noise_sigma, wander_ticks)
        self.goal = goal
        self.other = other
        self.commit_stop_m = commit_stop_m
        self.commit_speed = commit_speed
        self.hesitate_ticks = hesitate_ticks
        self.dwell_span = dwell_span  # (start, end) offsets inside the hesitation
        self.dwell_speed = dwell_speed
        self._hesitated = 0
        self._committing = True

    def __call__(self, tick: int, prev, session: Session) -> Optional[HumanInput]:
        ee = session.world.ee
        v = self._wander()
        if v is not None:
            return self._noisy(v)
        if self._committing:
            if self.goal.sub(ee).norm() <= self.commit_stop_m:
                self._committing = False
            else:
                return self._noisy(_vel_toward(ee, self.goal, self.commit_speed))
        if self._hesitated >= self.hesitate_ticks:
            return None
        i = self._hesitated
        self._hesitated += 1
        if self.dwell_span is not None and self.dwell_span[0] <= i < self.dwell_span[1]:
            return self._noisy(_vel_toward(ee, self.other, self.dwell_speed))
        # idle second-guessing: noise-dominated drift
        return self._noisy(np.zeros(3))


class ApproachScript(_EeScript):
    """Plain approach cut partway: direction, not proximity, identifies the goal."""

    def __init__(self, goal: Vec3, rng, noise_sigma=0.005, wander_ticks=60,
                 speed=0.045, cut_after_ticks=30):
        super().__init__(rng, noise_sigma, wander_ticks)
        self.goal = goal
        self.speed = speed
        self.cut_after_ticks = cut_after_ticks
        self._approached = 0

    def __call__(self, tick: int, prev, session: Session) -> Optional[HumanInput]:
        ee = session.world.ee
        v = self._wander()
        if v is not None:
            return self._noisy(v)
        if self._approached >= self.cut_after_ticks or self.goal.sub(ee).norm() <= 0.06:
            return None
        self._approached += 1
        return self._noisy(_vel_toward(ee, self.goal, self.speed))


def _run_synthetic(defn: ScenarioDef, script: Callable, max_T: int, label: str,
                   hold: Optional[str] = None) -> Optional[Segment]:
    world = load_scenario(defn)
    if hold is not None:
        world = with_held_object(world, hold)
    config = SessionConfig(T=max_T, reasoner_choice="none", allow_any_T=True)
    session = Session(world, defn, config, inference_enabled=False)
    drive_session(session, script, max_ticks=1200)
    snippet = session.buffer.snapshot(max_T, stride=1)
    if snippet is None:
        return None
    candidates = tuple(generate_candidates(session.world, session.history))
    gt_sub = defn.ground_truth_subtasks[0]
    gt = next(
        (c for c in candidates if c.skill.value == gt_sub.skill and c.object_id == gt_sub.object_id),
        None,
    )
    if gt is None:
        return None
    return Segment(
        snippet=snippet,
        candidates=candidates,
        ground_truth=gt,
        scenario=defn.name,
        subtask_index=0,
        label=label,
        world=session.world,
    )


def make_trap_segment(seed: int, max_T: int = 100, noise_sigma: float = 0.004) -> Optional[Segment]:
    rng = np.random.default_rng([seed, 101])
    defn = pour_trap_scenario(rng)
    world_probe = load_scenario(defn)
    script = TrapScript(
        goal=world_probe.object("pot").position,
        feint=world_probe.object("laptop").position,
        rng=rng,
        noise_sigma=noise_sigma,
        wander_ticks=int(rng.integers(48, 64)),
        feint_stop_m=0.16,
        cut_travel_m=float(rng.uniform(0.10, 0.14)),
    )
    return _run_synthetic(defn, script, max_T, "trap", hold="jar")


def make_ambiguous_segment(seed: int, max_T: int = 100, noise_sigma: float = 0.010) -> Optional[Segment]:
    rng = np.random.default_rng([seed, 202])
    goal_left = bool(seed % 2 == 0)
    defn = place_ambiguity_scenario(rng, goal_left)
    world_probe = load_scenario(defn)
    goal_id = defn.ground_truth_subtasks[0].object_id
    other_id = "bag" if goal_id == "basket" else "basket"
    hesitate_ticks = int(rng.integers(10, 46))
    dwell_span = None
    if rng.random() < 0.6:
        length = int(rng.integers(7, 12))
        start = int(rng.integers(0, max(1, hesitate_ticks - 4)))
        dwell_span = (start, start + length)
    script = HesitationScript(
        goal=world_probe.object(goal_id).position,
        other=world_probe.object(other_id).position,
        rng=rng,
        noise_sigma=noise_sigma,
        wander_ticks=int(rng.integers(36, 52)),
        commit_stop_m=float(rng.uniform(0.27, 0.33)),
        hesitate_ticks=hesitate_ticks,
        dwell_span=dwell_span,
    )
    return _run_synthetic(defn, script, max_T, "ambiguous", hold="toy")


def make_pick_pair_segment(seed: int, max_T: int = 100, noise_sigma: float = 0.005) -> Optional[Segment]:
    rng = np.random.default_rng([seed, 303])
    defn = pick_pair_scenario(rng, bool(seed % 2 == 0))
    world_probe = load_scenario(defn)
    goal_id = defn.ground_truth_subtasks[0].object_id
    script = ApproachScript(
        goal=world_probe.object(goal_id).position,
        rng=rng,
        noise_sigma=noise_sigma,
        wander_ticks=int(rng.integers(56, 72)),
        cut_after_ticks=int(rng.integers(18, 44)),
    )
    return _run_synthetic(defn, script, max_T, "plain", hold=None)


# ---------------------------------------------------------------------------
# Scenario-episode segments
# ---------------------------------------------------------------------------


def run_scripted_episode(
    scenario: ScenarioDef,
    config: SessionConfig,
    human_cfg: ScriptedHumanConfig,
    mode: str = "builtin",
    forced_dwells: Optional[dict] = None,
) -> tuple:
    """Drive a full scripted session; returns (episode, session)."""
    world = load_scenario(scenario)
    inference = mode != "full-teleop"
    session = Session(world, scenario, config, inference_enabled=inference)
    script = ScriptedHuman(human_cfg, scenario)
    for index, (oid, ticks) in (forced_dwells or {}).items():
        script.force_dwell(index, oid, ticks)
    writer = EpisodeWriter(
        scenario_name=scenario.name,
        seed=human_cfg.seed,
        config=config.snapshot(),
        mode=mode,
    )
    limit_ticks = int(scenario.time_limit_s * 10)

    def source(tick, prev, session):
        if session.all_subtasks_done:
            return None
        if tick >= limit_ticks:
            return None
        from .arbiter import ControlMode

        if session.mode is ControlMode.PROPOSING and session.proposal is not None:
            subtask = session.current_subtask
            if subtask is None:
                return HumanInput(decision="deny")
            return HumanInput(decision=script.decide(session.proposal.intent, subtask))
        if session.mode is ControlMode.EXECUTING:
            return HumanInput()
        subtask = session.current_subtask
        return script.step(session.world, session.subtask_index, subtask)

    drive_session(session, source, writer, max_ticks=limit_ticks + 10)
    episode = writer.finalize(episode_outcome(session))
    return episode, session


def scenario_segments(name: str, seed: int, max_T: int, episodes: int = 2) -> list:
    """Mine segments from slow, noisy assisted runs of a shipped scenario.

    The session waits for a full max_T window before inferring, so every
    pre-proposal span is long enough to extract at max_T.
    """
    defn = find_scenario(name)
    out = []
    for k in range(episodes):
        cfg = SessionConfig(T=max_T, seed=seed * 1000 + k, allow_any_T=True)
        human = ScriptedHumanConfig(
            seed=seed * 1000 + k,
            noise_sigma=0.006,
            distractor_prob=0.004,
            dwell_ticks=10,
            speed_scale=0.42,
        )
        episode, _ = run_scripted_episode(defn, cfg, human)
        segments, _skipped = extract_segments(episode, max_T, scenario=defn)
        out.extend(segments)
    return out


# ---------------------------------------------------------------------------
# Corpus assembly
# ---------------------------------------------------------------------------


def generate_corpus(
    out_dir,
    n_segments: int = 200,
    seed: int = 0,
    max_T: int = 100,
    scenarios: tuple = BUILTIN_CORPUS_SCENARIOS,
    trap_fraction: float = 0.3,
    ambiguous_fraction: float = 0.3,
    scenario_episodes: int = 1,
) -> dict:
    """Build a labeled segment corpus; identical seeds produce identical corpora."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    n_trap = int(round(n_segments * trap_fraction))
    n_ambiguous = int(round(n_segments * ambiguous_fraction))

    segments = []
    for name in scenarios:
        segments.extend(scenario_segments(name, seed, max_T, episodes=scenario_episodes))

    k = 0
    made = 0
    while made < n_trap and k < n_trap * 4:
        seg = make_trap_segment(seed * 10000 + k, max_T)
        k += 1
        if seg is not None:
            segments.append(seg)
            made += 1
    k = 0
    made = 0
    while made < n_ambiguous and k < n_ambiguous * 4:
        seg = make_ambiguous_segment(seed * 20000 + k, max_T)
        k += 1
        if seg is not None:
            segments.append(seg)
            made += 1
    k = 0
    while len(segments) < n_segments and k < n_segments * 4:
        seg = make_pick_pair_segment(seed * 30000 + k, max_T)
        k += 1
        if seg is not None:
            segments.append(seg)

    save_segments(segments, out_dir / "segments.jsonl")
    hasher = hashlib.sha256()
    for seg in segments:
        hasher.update(canonical_json(seg.to_dict()).encode("utf-8"))
    per_scenario = {}
    per_label = {}
    for seg in segments:
        per_scenario[seg.scenario] = per_scenario.get(seg.scenario, 0) + 1
        per_label[seg.label] = per_label.get(seg.label, 0) + 1
    manifest = {
        "seed": seed,
        "max_T": max_T,
        "n_segments": len(segments),
        "per_scenario": per_scenario,
        "per_label": per_label,
        "corpus_hash": hasher.hexdigest(),
        "files": ["segments.jsonl"],
    }
    (out_dir / "manifest.json").write_text(canonical_json(manifest) + "\n", encoding="utf-8")
    return manifest


def load_corpus(corpus_dir) -> tuple:
    corpus_dir = Path(corpus_dir)
    manifest = json.loads((corpus_dir / "manifest.json").read_text(encoding="utf-8"))
    segments = load_segments(corpus_dir / "segments.jsonl")
    return manifest, segments
