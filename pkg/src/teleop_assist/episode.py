"""Episode recording, bit-exact replay, segment extraction, and metrics."""

from __future__ import annotations

import hashlib
import json
import math
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Optional, Sequence

from .arbiter import (
    ControlMode,
    Event,
    ReplayEngine,
    Session,
    SessionConfig,
    TickOutcome,
)
from .intent import (
    ExecutionHistory,
    GateConfig,
    InferenceResult,
    InferenceStatus,
    IntentCandidate,
    ScoreWeights,
    SkillClass,
    generate_candidates,
)
from .baselines import RBIIConfig
from .scenarios import ScenarioDef, Subtask, find_scenario, load_scenario
from .teleop import Snippet, TickRecord
from .world import BasePose, HumanInput, ObjectInstance, OccupancyGrid, Vec3, WorldState

import numpy as np

EPISODE_FORMAT_VERSION = 1


class EpisodeFormatError(ValueError):
    pass


class HashMismatchError(RuntimeError):
    """Replay produced a different trace: corruption or a determinism bug."""


# ---------------------------------------------------------------------------
# Canonical serialization
# ---------------------------------------------------------------------------


def _canon(value):
    if isinstance(value, float):
        if math.isnan(value) or math.isinf(value):
            raise ValueError("non-finite float in canonical record")
        if value == 0.0:
            return 0.0  # fold -0.0
        return value
    if isinstance(value, dict):
        return {k: _canon(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_canon(v) for v in value]
    return value


def canonical_json(obj: dict) -> str:
    """Stable field order, shortest round-trip floats, no NaN: hashable across runs."""
    return json.dumps(_canon(obj), sort_keys=True, separators=(",", ":"), allow_nan=False)


def _input_dict(h: HumanInput) -> dict:
    return {
        "bl": h.base_lin,
        "ba": h.base_ang,
        "ee": [h.ee_delta.x, h.ee_delta.y, h.ee_delta.z],
        "gt": h.grip_toggle,
        "dec": h.decision,
    }


def _input_from_dict(d: dict) -> HumanInput:
    return HumanInput(
        base_lin=float(d["bl"]),
        base_ang=float(d["ba"]),
        ee_delta=Vec3(float(d["ee"][0]), float(d["ee"][1]), float(d["ee"][2])),
        grip_toggle=bool(d["gt"]),
        decision=d.get("dec"),
    )


# ---------------------------------------------------------------------------
# Writer / reader
# ---------------------------------------------------------------------------


@dataclass
class Episode:
    header: dict
    body: list  # ordered record dicts ("tick" and "event" kinds)
    footer: dict

    @property
    def tick_records(self) -> list:
        return [r for r in self.body if r["kind"] == "tick"]

    @property
    def event_records(self) -> list:
        return [r for r in self.body if r["kind"] == "event"]

    def events_named(self, name: str) -> list:
        return [r for r in self.event_records if r["event"] == name]

    @property
    def trace_hash(self) -> str:
        return self.footer["trace_hash"]


class EpisodeWriter:
    def __init__(self, scenario_name: str, seed: int, config: dict, mode: str):
        self.header = {
            "kind": "header",
            "format_version": EPISODE_FORMAT_VERSION,
            "scenario": scenario_name,
            "seed": seed,
            "mode": mode,
            "config": config,
        }
        self.body = []
        self._hasher = hashlib.sha256()

    def _append(self, record: dict) -> None:
        line = canonical_json(record)
        self._hasher.update(line.encode("utf-8"))
        self._hasher.update(b"\n")
        self.body.append(record)

    def add_tick(self, outcome: TickOutcome, human_input: HumanInput, world: WorldState) -> None:
        self._append(
            {
                "kind": "tick",
                "t": outcome.tick,
                "mode": outcome.mode.value,
                "applied": outcome.applied,
                "input": _input_dict(human_input),
                "base": [world.base.x, world.base.y, world.base.theta],
                "ee": [world.ee.x, world.ee.y, world.ee.z],
                "grip": world.gripper_closed,
                "held": world.gripper_contents,
                "blocked": world.blocked,
                "epoch": world.epoch,
            }
        )
        for event in outcome.events:
            self.add_event(event)

    def add_event(self, event: Event) -> None:
        self._append({"kind": "event", "t": event.tick, "event": event.kind, "data": event.data})

    def finalize(self, outcome: dict) -> Episode:
        footer = {
            "kind": "footer",
            "outcome": outcome,
            "trace_hash": self._hasher.hexdigest(),
        }
        return Episode(header=self.header, body=self.body, footer=footer)


def save_episode(episode: Episode, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(canonical_json(episode.header) + "\n")
        for record in episode.body:
            fh.write(canonical_json(record) + "\n")
        fh.write(canonical_json(episode.footer) + "\n")
    return path


def read_episode(path) -> Episode:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if len(lines) < 2:
        raise EpisodeFormatError("episode file truncated: missing header or footer")
    try:
        header = json.loads(lines[0])
        footer = json.loads(lines[-1])
        body = [json.loads(line) for line in lines[1:-1]]
    except json.JSONDecodeError as exc:
        raise EpisodeFormatError(f"bad record: {exc}") from exc
    if header.get("kind") != "header":
        raise EpisodeFormatError("first record is not a header")
    if header.get("format_version") != EPISODE_FORMAT_VERSION:
        raise EpisodeFormatError(f"unsupported format version {header.get('format_version')}")
    if footer.get("kind") != "footer":
        raise EpisodeFormatError("last record is not a footer (truncated file?)")
    last_t = -1
    for record in body:
        if record.get("kind") == "tick":
            if record["t"] <= last_t:
                raise EpisodeFormatError(f"tick records out of order at t={record['t']}")
            last_t = record["t"]
    # verify stored body against the recorded hash
    hasher = hashlib.sha256()
    for record in body:
        hasher.update(canonical_json(record).encode("utf-8"))
        hasher.update(b"\n")
    if hasher.hexdigest() != footer.get("trace_hash"):
        raise HashMismatchError("stored body does not match the recorded trace hash")
    return Episode(header=header, body=body, footer=footer)


# ---------------------------------------------------------------------------
# Session driving (shared by live recording and replay)
# ---------------------------------------------------------------------------


def drive_session(
    session: Session,
    input_source: Callable[[int, Optional[TickOutcome], Session], Optional[HumanInput]],
    writer: Optional[EpisodeWriter] = None,
    max_ticks: int = 100000,
    hooks: Optional[list] = None,
) -> tuple:
    """Advance the session until the source returns None or max_ticks elapse."""
    outcomes = []
    prev: Optional[TickOutcome] = None
    for _ in range(max_ticks):
        human_input = input_source(session.tick_index, prev, session)
        if human_input is None:
            break
        outcome = session.tick(human_input)
        if writer is not None:
            writer.add_tick(outcome, human_input, session.world)
        if hooks:
            for hook in hooks:
                hook(outcome, human_input, session)
        outcomes.append(outcome)
        prev = outcome
    return outcomes, prev


def episode_outcome(session: Session) -> dict:
    done = session.all_subtasks_done
    return {
        "success": bool(done),
        "completion_time_s": round(session.world.sim_time, 6),
        "subtasks_completed": session.subtask_index,
        "subtasks_total": len(session.scenario.ground_truth_subtasks),
        "counters": dict(session.counters),
    }


# ---------------------------------------------------------------------------
# Replay
# ---------------------------------------------------------------------------


def _result_from_event(data: dict) -> InferenceResult:
    intent = None
    if data.get("skill") is not None:
        intent = IntentCandidate(
            skill=SkillClass.from_name(data["skill"]),
            object_id=data["object"],
            text=data.get("text") or "",
        )
    return InferenceResult(
        status=InferenceStatus(data["status"]),
        intent=intent,
        epoch=int(data.get("epoch", -1)),
        agree_count=int(data.get("agree_count", 0)),
        n_candidates=int(data.get("n_candidates", 0)),
    )


def config_from_snapshot(snap: dict) -> SessionConfig:
    weights = snap.get("weights", {})
    rbii = snap.get("rbii", {})
    return SessionConfig(
        T=int(snap.get("T", 100)),
        stride=int(snap.get("stride", 1)),
        gate=GateConfig(
            K=int(snap.get("K", 5)),
            eta=int(snap.get("eta", 4)),
            temperature=float(snap.get("temperature", 0.7)),
        ),
        deny_cooldown_ticks=int(snap.get("deny_cooldown_ticks", 50)),
        inference_period_ticks=int(snap.get("inference_period_ticks", 10)),
        inference_latency_ticks=int(snap.get("inference_latency_ticks", 5)),
        reasoner_choice=snap.get("reasoner_choice", "builtin"),
        weights=ScoreWeights(
            heading=float(weights.get("heading", 1.0)),
            approach=float(weights.get("approach", 1.0)),
            affordance=float(weights.get("affordance", 2.0)),
            reach_match=float(weights.get("reach_match", 1.0)),
        ),
        rbii=RBIIConfig(
            lam=float(rbii.get("lam", 5.0)),
            beta=float(rbii.get("beta", 3.0)),
            decision_threshold=float(rbii.get("decision_threshold", 0.8)),
            epsilon_floor=float(rbii.get("epsilon_floor", 1e-3)),
        ),
        baseline_object_only=bool(snap.get("baseline_object_only", True)),
        seed=int(snap.get("seed", 0)),
        skill_timeout_s=float(snap.get("skill_timeout_s", 30.0)),
        allow_any_T=True,
    )


def replay_episode(episode: Episode, scenario: Optional[ScenarioDef] = None) -> Episode:
    """Re-simulate from the header seed, recorded inputs, and recorded inference outcomes.

    Returns the regenerated episode; raises HashMismatchError when the trace
    diverges from the recording.
    """
    if scenario is None:
        scenario = find_scenario(episode.header["scenario"])
    config = config_from_snapshot(episode.header["config"])
    results_by_tick = {}
    for record in episode.body:
        if record["kind"] == "event" and record["event"] == "inference":
            results_by_tick.setdefault(record["t"], []).append(_result_from_event(record["data"]))
    inputs_by_tick = {r["t"]: _input_from_dict(r["input"]) for r in episode.tick_records}
    n_ticks = len(episode.tick_records)

    world = load_scenario(scenario)
    session = Session(world, scenario, config, engine=ReplayEngine(results_by_tick))
    writer = EpisodeWriter(
        scenario_name=episode.header["scenario"],
        seed=episode.header["seed"],
        config=episode.header["config"],
        mode=episode.header.get("mode", "replay"),
    )

    def source(tick, prev, session):
        if tick >= n_ticks:
            return None
        return inputs_by_tick.get(tick, HumanInput())

    drive_session(session, source, writer)
    replayed = writer.finalize(episode.footer["outcome"])
    if replayed.trace_hash != episode.trace_hash:
        raise HashMismatchError(
            f"replay hash {replayed.trace_hash[:12]} != recorded {episode.trace_hash[:12]}"
        )
    return replayed


# ---------------------------------------------------------------------------
# Segments
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Segment:
    snippet: Snippet
    candidates: tuple
    ground_truth: IntentCandidate
    scenario: str
    subtask_index: int
    label: str = "plain"  # plain | trap | ambiguous
    world: Optional[WorldState] = None

    def to_dict(self) -> dict:
        return {
            "scenario": self.scenario,
            "subtask_index": self.subtask_index,
            "label": self.label,
            "ground_truth": {
                "skill": self.ground_truth.skill.value,
                "object": self.ground_truth.object_id,
                "text": self.ground_truth.text,
            },
            "candidates": [
                {"skill": c.skill.value, "object": c.object_id, "text": c.text}
                for c in self.candidates
            ],
            "snippet": {
                "t_start": self.snippet.t_start,
                "t_end": self.snippet.t_end,
                "epoch": self.snippet.epoch,
                "records": [
                    {
                        "t": r.tick,
                        "input": _input_dict(r.input),
                        "base": [r.base.x, r.base.y, r.base.theta],
                        "ee": [r.ee.x, r.ee.y, r.ee.z],
                        "held": r.gripper_contents,
                    }
                    for r in self.snippet.records
                ],
            },
            "world": _world_to_dict(self.world) if self.world is not None else None,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "Segment":
        gt = data["ground_truth"]
        records = tuple(
            TickRecord(
                tick=int(r["t"]),
                input=_input_from_dict(r["input"]),
                base=BasePose(*[float(v) for v in r["base"]]),
                ee=Vec3(*[float(v) for v in r["ee"]]),
                gripper_contents=r.get("held"),
            )
            for r in data["snippet"]["records"]
        )
        snippet = Snippet(
            records=records,
            t_start=int(data["snippet"]["t_start"]),
            t_end=int(data["snippet"]["t_end"]),
            epoch=int(data["snippet"]["epoch"]),
        )
        return cls(
            snippet=snippet,
            candidates=tuple(
                IntentCandidate(
                    skill=SkillClass.from_name(c["skill"]), object_id=c["object"], text=c["text"]
                )
                for c in data["candidates"]
            ),
            ground_truth=IntentCandidate(
                skill=SkillClass.from_name(gt["skill"]), object_id=gt["object"], text=gt["text"]
            ),
            scenario=data["scenario"],
            subtask_index=int(data["subtask_index"]),
            label=data.get("label", "plain"),
            world=_world_from_dict(data["world"]) if data.get("world") else None,
        )


def _world_to_dict(world: WorldState) -> dict:
    return {
        "base": [world.base.x, world.base.y, world.base.theta],
        "ee": [world.ee.x, world.ee.y, world.ee.z],
        "gripper_closed": world.gripper_closed,
        "gripper_contents": world.gripper_contents,
        "epoch": world.epoch,
        "sim_time": world.sim_time,
        "grid": {"resolution": world.grid.resolution, "width": world.grid.width, "height": world.grid.height},
        "objects": [
            {
                "id": o.id,
                "class_name": o.class_name,
                "position": [o.position.x, o.position.y, o.position.z],
                "affordances": sorted(o.affordances),
                "held": o.held_by_robot,
                "contains": list(o.contains),
            }
            for o in world.objects
        ],
    }


def _world_from_dict(data: dict) -> WorldState:
    # Occupancy is not carried by segments; features and baselines never need it.
    g = data.get("grid", {"resolution": 0.05, "width": 200, "height": 200})
    grid = OccupancyGrid.empty(int(g["width"]), int(g["height"]), float(g["resolution"]))
    return WorldState(
        base=BasePose(*[float(v) for v in data["base"]]),
        ee=Vec3(*[float(v) for v in data["ee"]]),
        gripper_closed=bool(data["gripper_closed"]),
        gripper_contents=data.get("gripper_contents"),
        objects=tuple(
            ObjectInstance(
                id=o["id"],
                class_name=o["class_name"],
                position=Vec3(*[float(v) for v in o["position"]]),
                affordances=frozenset(o["affordances"]),
                held_by_robot=bool(o.get("held", False)),
                contains=tuple(o.get("contains", ())),
            )
            for o in data["objects"]
        ),
        grid=grid,
        epoch=int(data.get("epoch", 0)),
        sim_time=float(data.get("sim_time", 0.0)),
    )


def extract_segments(episode: Episode, T: int, scenario: Optional[ScenarioDef] = None) -> tuple:
    """Per subtask span: the final T teleop ticks before the first proposal (or span end).

    Returns (segments, skipped_count); spans with fewer than T teleop ticks are
    skipped with a warning count.
    """
    if T < 2:
        raise ValueError("T must be >= 2")
    if scenario is None:
        scenario = find_scenario(episode.header["scenario"])
    config = config_from_snapshot(episode.header["config"])
    results_by_tick = {}
    for record in episode.body:
        if record["kind"] == "event" and record["event"] == "inference":
            results_by_tick.setdefault(record["t"], []).append(_result_from_event(record["data"]))
    inputs_by_tick = {r["t"]: _input_from_dict(r["input"]) for r in episode.tick_records}
    n_ticks = len(episode.tick_records)

    world = load_scenario(scenario)
    session = Session(world, scenario, config, engine=ReplayEngine(results_by_tick))

    span_records = deque(maxlen=T)
    cuts = {}  # subtask index -> (snippet_records, world, history)
    state = {"span_index": 0}

    def capture(index):
        if index in cuts or len(span_records) < T:
            return
        records = tuple(span_records)
        cuts[index] = (records, session.world, session.history)

    def hook(outcome: TickOutcome, human_input: HumanInput, session: Session) -> None:
        if outcome.mode is ControlMode.TELEOP or outcome.applied == "human":
            # collect only genuine teleoperation ticks
            if outcome.mode is ControlMode.TELEOP:
                span_records.append(
                    TickRecord(
                        tick=outcome.tick,
                        input=human_input,
                        base=session.world.base,
                        ee=session.world.ee,
                        gripper_contents=session.world.gripper_contents,
                    )
                )
        for event in outcome.events:
            if event.kind == "proposal":
                capture(state["span_index"])
            elif event.kind == "subtask_success":
                capture(state["span_index"])
                state["span_index"] += 1
                span_records.clear()

    def source(tick, prev, session):
        if tick >= n_ticks:
            return None
        return inputs_by_tick.get(tick, HumanInput())

    drive_session(session, source, hooks=[hook])

    segments = []
    skipped = 0
    for index, subtask in enumerate(scenario.ground_truth_subtasks):
        if index not in cuts:
            skipped += 1
            continue
        records, world_at, history_at = cuts[index]
        candidates = tuple(generate_candidates(world_at, history_at))
        gt = _ground_truth_candidate(subtask, candidates, world_at)
        snippet = Snippet(
            records=records,
            t_start=records[0].tick,
            t_end=records[-1].tick,
            epoch=world_at.epoch,
        )
        segments.append(
            Segment(
                snippet=snippet,
                candidates=candidates,
                ground_truth=gt,
                scenario=scenario.name,
                subtask_index=index,
                world=world_at,
            )
        )
    return segments, skipped


def _ground_truth_candidate(subtask: Subtask, candidates: tuple, world: WorldState) -> IntentCandidate:
    for c in candidates:
        if c.skill.value == subtask.skill and c.object_id == subtask.object_id:
            return c
    return IntentCandidate(
        skill=SkillClass.from_name(subtask.skill), object_id=subtask.object_id, text=""
    )


# ---------------------------------------------------------------------------
# Metrics and predictor evaluation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Metrics:
    success: bool
    completion_time_s: float
    proposals_issued: int
    denied: int
    confirmed: int
    confident_results: int
    incorrect_confident: int

    @property
    def false_prediction_rate(self) -> float:
        if self.confident_results == 0:
            return 0.0
        return self.incorrect_confident / self.confident_results


def compute_metrics(episode: Episode) -> Metrics:
    outcome = episode.footer["outcome"]
    proposals = len(episode.events_named("proposal"))
    decisions = episode.events_named("decision")
    denied = sum(1 for d in decisions if d["data"]["value"] == "deny")
    confirmed = sum(1 for d in decisions if d["data"]["value"] == "confirm")
    inference = episode.events_named("inference")
    confident = [e for e in inference if e["data"]["status"] == "confident"]
    incorrect = [e for e in confident if e["data"].get("gt_match") is False]
    return Metrics(
        success=bool(outcome.get("success")),
        completion_time_s=float(outcome.get("completion_time_s", 0.0)),
        proposals_issued=proposals,
        denied=denied,
        confirmed=confirmed,
        confident_results=len(confident),
        incorrect_confident=len(incorrect),
    )


@dataclass(frozen=True)
class EvalReport:
    predictor: str
    n_segments: int
    accuracy: float
    coverage: float  # fraction of segments answered confidently
    false_prediction_rate: float  # wrong confident / total confident

    def as_dict(self) -> dict:
        return {
            "predictor": self.predictor,
            "n_segments": self.n_segments,
            "accuracy": self.accuracy,
            "coverage": self.coverage,
            "false_prediction_rate": self.false_prediction_rate,
        }


def evaluate_predictor(predictor, segments: Sequence[Segment], T: Optional[int] = None, seed: int = 0) -> EvalReport:
    """Accuracy over segments: correct iff both skill and object match the label.

    Unanswered (not confident) segments count against accuracy but are excluded
    from the false-prediction denominator.
    """
    if not segments:
        raise ValueError("no segments to evaluate")
    correct = 0
    answered = 0
    answered_wrong = 0
    for i, segment in enumerate(segments):
        rng = np.random.default_rng([seed, i])
        prediction = predictor.predict(segment, T=T, rng=rng)
        if prediction.intent is None or prediction.status != "confident":
            continue
        answered += 1
        if (
            prediction.intent.skill is segment.ground_truth.skill
            and prediction.intent.object_id == segment.ground_truth.object_id
        ):
            correct += 1
        else:
            answered_wrong += 1
    n = len(segments)
    return EvalReport(
        predictor=getattr(predictor, "name", type(predictor).__name__),
        n_segments=n,
        accuracy=correct / n,
        coverage=answered / n,
        false_prediction_rate=(answered_wrong / answered) if answered else 0.0,
    )


def save_segments(segments: Sequence[Segment], path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        for segment in segments:
            fh.write(canonical_json(segment.to_dict()) + "\n")
    return path


def load_segments(path) -> list:
    segments = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if line.strip():
            segments.append(Segment.from_dict(json.loads(line)))
    return segments
