"""Control switching between the human and autonomous skills, plus background inference plumbing.

The session owns the world and advances it once per tick. Inference runs on
immutable snapshots through an engine with submit/poll semantics; results come
back epoch-tagged and are dropped when stale. Proposals pause motion until the
operator confirms or denies.
"""

from __future__ import annotations

import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Callable, Optional

import numpy as np

from .baselines import (
    Belief,
    RBIIConfig,
    belief_decision,
    candidate_distance,
    hat_predict,
    rbii1_update,
    rbii2_update,
    rbii_init,
    reference_point,
)
from .intent import (
    DEFAULT_WEIGHTS,
    EMPTY_HISTORY,
    BASE_REFERENCE_SKILLS,
    EvidenceReasoner,
    ExecutionHistory,
    GateConfig,
    HistoryEntry,
    InferenceResult,
    InferenceStatus,
    Intent,
    IntentCandidate,
    ScoreWeights,
    SkillClass,
    evidence_reasoner_sample,
    extract_features,
    generate_candidates,
    infer,
)
from .scenarios import ScenarioDef, Subtask
from .skills import SkillExecution, estimate_params, failed, skill_tick, start_execution
from .teleop import InputBuffer, Snippet, TickRecord
from .world import NULL_INPUT, HumanInput, WorldState, step

TICK_DT = 0.1

CUE_TAKE_OVER = "Great! I will take over."
CUE_PAUSE = "Understood, I'll pause here. Feel free to continue."
CUE_RESUME = "Alright, you can take over now."


class ControlMode(Enum):
    TELEOP = "teleop"
    PROPOSING = "proposing"
    EXECUTING = "executing"


@dataclass(frozen=True)
class Proposal:
    id: int
    intent: Intent
    epoch: int
    cue_text: str


@dataclass
class SessionConfig:
    T: int = 100
    stride: int = 1
    gate: GateConfig = field(default_factory=GateConfig)
    deny_cooldown_ticks: int = 50
    inference_period_ticks: int = 10
    inference_latency_ticks: int = 5
    reasoner_choice: str = "builtin"  # builtin | endpoint | hat | rbii1 | rbii2 | none
    weights: ScoreWeights = DEFAULT_WEIGHTS
    rbii: RBIIConfig = field(default_factory=RBIIConfig)
    baseline_object_only: bool = True
    seed: int = 0
    skill_timeout_s: float = 30.0
    allow_any_T: bool = False
    endpoint: Optional[dict] = None  # EndpointConfig fields for reasoner_choice="endpoint"

    def __post_init__(self):
        if not self.allow_any_T and not (4 <= self.T <= 140):
            raise ValueError(f"T={self.T} outside [4, 140]; set allow_any_T to override")

    def snapshot(self) -> dict:
        return {
            "T": self.T,
            "stride": self.stride,
            "K": self.gate.K,
            "eta": self.gate.eta,
            "temperature": self.gate.temperature,
            "deny_cooldown_ticks": self.deny_cooldown_ticks,
            "inference_period_ticks": self.inference_period_ticks,
            "inference_latency_ticks": self.inference_latency_ticks,
            "reasoner_choice": self.reasoner_choice,
            "weights": {
                "heading": self.weights.heading,
                "approach": self.weights.approach,
                "affordance": self.weights.affordance,
                "reach_match": self.weights.reach_match,
            },
            "rbii": {
                "lam": self.rbii.lam,
                "beta": self.rbii.beta,
                "decision_threshold": self.rbii.decision_threshold,
                "epsilon_floor": self.rbii.epsilon_floor,
            },
            "baseline_object_only": self.baseline_object_only,
            "seed": self.seed,
            "skill_timeout_s": self.skill_timeout_s,
        }


@dataclass(frozen=True)
class Event:
    tick: int
    kind: str
    data: dict


@dataclass(frozen=True)
class InferenceJob:
    job_id: int
    snippet: Snippet
    world: WorldState
    history: ExecutionHistory
    epoch: int
    submitted_tick: int


@dataclass(frozen=True)
class TickOutcome:
    tick: int
    applied: str  # "human" | "skill"
    events: tuple
    mode: ControlMode
    proposal: Optional[Proposal]


# ---------------------------------------------------------------------------
# Inference engines
# ---------------------------------------------------------------------------


class DeterministicEngine:
    """Computes results at submit time, delivers them a fixed number of ticks later.

    Models background latency without threads so headless runs replay bit-exactly.
    """

    def __init__(self, strategy: Callable[[InferenceJob], InferenceResult], latency_ticks: int = 5):
        self._strategy = strategy
        self.latency_ticks = latency_ticks
        self._pending = []

    @property
    def busy(self) -> bool:
        return bool(self._pending)

    def submit(self, job: InferenceJob) -> None:
        result = self._strategy(job)
        self._pending.append((job.submitted_tick + self.latency_ticks, result))

    def poll(self, tick: int) -> list:
        due = [r for t, r in self._pending if t <= tick]
        self._pending = [(t, r) for t, r in self._pending if t > tick]
        return due


class ThreadedEngine:
    """Runs the strategy on a worker thread; results surface on later polls."""

    def __init__(self, strategy: Callable[[InferenceJob], InferenceResult], max_workers: int = 1):
        self._strategy = strategy
        self._pool = ThreadPoolExecutor(max_workers=max_workers)
        self._lock = threading.Lock()
        self._futures = []

    @property
    def busy(self) -> bool:
        with self._lock:
            return any(not f.done() for f in self._futures)

    def submit(self, job: InferenceJob) -> None:
        with self._lock:
            self._futures.append(self._pool.submit(self._strategy, job))

    def poll(self, tick: int) -> list:
        with self._lock:
            done = [f for f in self._futures if f.done()]
            self._futures = [f for f in self._futures if not f.done()]
        out = []
        for f in done:
            try:
                out.append(f.result())
            except Exception as exc:
                out.append(
                    InferenceResult(status=InferenceStatus.NOT_CONFIDENT, diagnostic=f"engine error: {exc}")
                )
        return out

    def shutdown(self) -> None:
        self._pool.shutdown(wait=False)


class ReplayEngine:
    """Feeds previously recorded results back at their recorded ticks."""

    def __init__(self, results_by_tick: dict):
        self._by_tick = {int(k): list(v) for k, v in results_by_tick.items()}

    @property
    def busy(self) -> bool:
        return False

    def submit(self, job: InferenceJob) -> None:
        pass

    def poll(self, tick: int) -> list:
        return self._by_tick.pop(tick, [])


# ---------------------------------------------------------------------------
# Inference strategies per reasoner choice
# ---------------------------------------------------------------------------


def _filter_to_predicted_skill(job: InferenceJob, candidates, weights) -> list:
    """Study protocol: the intent engine picks the skill, the baseline picks the object."""
    try:
        features = extract_features(job.snippet, candidates, job.world)
        rng = np.random.default_rng(0)
        best = evidence_reasoner_sample(features, 0.0, rng, weights)
    except Exception:
        return list(candidates)
    narrowed = [c for c in candidates if c.skill is best.skill]
    return narrowed or list(candidates)


def _fold_rbii(job: InferenceJob, candidates, cfg: RBIIConfig, variant: int) -> Belief:
    belief = rbii_init(candidates)
    records = job.snippet.records
    for prev, cur in zip(records, records[1:]):
        if variant == 1:
            prev_w = replace(job.world, base=prev.base, ee=prev.ee)
            cur_w = replace(job.world, base=cur.base, ee=cur.ee)
            prev_d = [candidate_distance(prev_w, c) for c in candidates]
            cur_d = [candidate_distance(cur_w, c) for c in candidates]
            belief = rbii1_update(belief, prev_d, cur_d, cfg.lam, cfg.epsilon_floor)
        else:
            cur_w = replace(job.world, base=cur.base, ee=cur.ee)
            belief = rbii2_update(belief, cur_w, cur.input, candidates, cfg.beta)
    return belief


def make_strategy(config: SessionConfig) -> Callable[[InferenceJob], InferenceResult]:
    choice = config.reasoner_choice

    if choice == "builtin":
        reasoner = EvidenceReasoner(config.weights)

        def run(job: InferenceJob) -> InferenceResult:
            rng = np.random.default_rng([config.seed, job.job_id])
            return infer(reasoner, job.snippet, job.world, job.history, config.gate, rng)

        return run

    if choice == "endpoint":
        from .vlm_client import EndpointConfig, EndpointReasoner

        endpoint_cfg = EndpointConfig(**(config.endpoint or {}))
        reasoner = EndpointReasoner(endpoint_cfg)

        def run(job: InferenceJob) -> InferenceResult:
            rng = np.random.default_rng([config.seed, job.job_id])
            return infer(reasoner, job.snippet, job.world, job.history, config.gate, rng)

        return run

    if choice == "hat":

        def run(job: InferenceJob) -> InferenceResult:
            candidates = generate_candidates(job.world, job.history)
            if not candidates:
                return InferenceResult(status=InferenceStatus.NO_CANDIDATES, epoch=job.epoch)
            if config.baseline_object_only:
                candidates = _filter_to_predicted_skill(job, candidates, config.weights)
            intent = hat_predict(job.world, candidates)
            return InferenceResult(
                status=InferenceStatus.CONFIDENT,
                intent=intent,
                epoch=job.epoch,
                n_candidates=len(candidates),
            )

        return run

    if choice in ("rbii1", "rbii2"):
        variant = 1 if choice == "rbii1" else 2

        def run(job: InferenceJob) -> InferenceResult:
            candidates = generate_candidates(job.world, job.history)
            if not candidates:
                return InferenceResult(status=InferenceStatus.NO_CANDIDATES, epoch=job.epoch)
            if config.baseline_object_only:
                candidates = _filter_to_predicted_skill(job, candidates, config.weights)
            belief = _fold_rbii(job, candidates, config.rbii, variant)
            decision = belief_decision(belief, config.rbii.decision_threshold)
            return replace(decision, epoch=job.epoch, n_candidates=len(candidates))

        return run

    if choice == "none":
        return lambda job: InferenceResult(status=InferenceStatus.NOT_CONFIDENT, epoch=job.epoch)

    raise ValueError(f"unknown reasoner choice {choice!r}")


# ---------------------------------------------------------------------------
# Session
# ---------------------------------------------------------------------------


class Session:
    """Single-operator session: one world, one mode, at most one in-flight inference job."""

    def __init__(
        self,
        world: WorldState,
        scenario: ScenarioDef,
        config: SessionConfig,
        engine=None,
        inference_enabled: bool = True,
    ):
        self.world = world
        self.scenario = scenario
        self.config = config
        self.mode = ControlMode.TELEOP
        self.buffer = InputBuffer()
        self.history = EMPTY_HISTORY
        self.proposal: Optional[Proposal] = None
        self.execution: Optional[SkillExecution] = None
        self.cooldown = 0
        self.tick_index = 0
        self.subtask_index = 0
        self.inference_enabled = inference_enabled and config.reasoner_choice != "none"
        self.engine = engine
        if self.engine is None and self.inference_enabled:
            self.engine = DeterministicEngine(make_strategy(config), config.inference_latency_ticks)
        self._job_counter = 0
        self._proposal_counter = 0
        self._initial_graspable = {}
        for o in world.objects:
            self._initial_graspable[o.id] = o.contains
        self.counters = {
            "proposals_issued": 0,
            "confirmed": 0,
            "denied": 0,
            "confident_results": 0,
            "incorrect_confident": 0,
            "inference_results": 0,
            "stale_dropped": 0,
        }

    # -- public API ---------------------------------------------------------

    @property
    def current_subtask(self) -> Optional[Subtask]:
        if self.subtask_index < len(self.scenario.ground_truth_subtasks):
            return self.scenario.ground_truth_subtasks[self.subtask_index]
        return None

    @property
    def all_subtasks_done(self) -> bool:
        return self.subtask_index >= len(self.scenario.ground_truth_subtasks)

    def tick(self, human_input: HumanInput) -> TickOutcome:
        events = []
        t = self.tick_index

        if self.engine is not None:
            for result in self.engine.poll(t):
                self._handle_result(t, result, events)

        if self.mode is ControlMode.TELEOP:
            applied = "human"
            self.cooldown = max(0, self.cooldown - 1)
            self.world = step(self.world, human_input, TICK_DT)
            record = TickRecord(
                tick=t,
                input=human_input,
                base=self.world.base,
                ee=self.world.ee,
                gripper_contents=self.world.gripper_contents,
            )
            self.buffer.push(record, self.world.epoch)
            self._maybe_dispatch(t)
        elif self.mode is ControlMode.PROPOSING:
            applied = "human"
            if human_input.decision is not None:
                self.handle_decision(human_input.decision, events)
            # motion is frozen while a proposal is pending
            self.world = step(self.world, NULL_INPUT, TICK_DT)
        else:  # EXECUTING
            applied = "skill"
            if human_input.decision == "deny" and self.execution is not None:
                self.execution = replace(self.execution, status=failed("aborted"))
                events.append(Event(t, "warning", {"detail": "execution aborted by operator"}))
                self.world = step(self.world, NULL_INPUT, TICK_DT)
            elif human_input.decision == "confirm":
                events.append(Event(t, "warning", {"detail": "confirm ignored while executing"}))
                action, self.execution = skill_tick(self.execution, self.world, TICK_DT)
                self.world = step(self.world, action, TICK_DT)
            else:
                action, self.execution = skill_tick(self.execution, self.world, TICK_DT)
                self.world = step(self.world, action, TICK_DT)
            if self.execution is not None and self.execution.status.terminal:
                self._finish_execution(t, events)

        self._check_subtasks(t, events)
        self.tick_index += 1
        return TickOutcome(
            tick=t,
            applied=applied,
            events=tuple(events),
            mode=self.mode,
            proposal=self.proposal,
        )

    def handle_decision(self, decision: str, events: list) -> None:
        t = self.tick_index
        if self.mode is not ControlMode.PROPOSING or self.proposal is None:
            events.append(Event(t, "warning", {"detail": f"decision {decision!r} outside proposing"}))
            return
        proposal = self.proposal
        events.append(Event(t, "decision", {"proposal_id": proposal.id, "value": decision}))
        if decision == "confirm":
            self.counters["confirmed"] += 1
            if proposal.epoch != self.world.epoch:
                events.append(Event(t, "warning", {"detail": "proposal stale at confirmation"}))
                self._to_teleop(t, events, cue=CUE_RESUME)
                return
            try:
                params = estimate_params(proposal.intent, self.world)
            except Exception as exc:
                events.append(Event(t, "warning", {"detail": f"parameter error: {exc}"}))
                self._to_teleop(t, events, cue=CUE_RESUME)
                return
            execution = start_execution(params, self.world, self.config.skill_timeout_s)
            if execution.status.terminal:
                events.append(
                    Event(t, "warning", {"detail": f"skill refused: {execution.status.reason}"})
                )
                self._to_teleop(t, events, cue=CUE_RESUME)
                return
            self.execution = execution
            self.proposal = None
            self.mode = ControlMode.EXECUTING
            self.world = replace(self.world, epoch=self.world.epoch + 1)
            events.append(Event(t, "cue", {"text": CUE_TAKE_OVER}))
            events.append(
                Event(
                    t,
                    "skill_start",
                    {"skill": proposal.intent.skill.value, "object": proposal.intent.object_id},
                )
            )
        elif decision == "deny":
            self.counters["denied"] += 1
            self.history = self.history.with_entry(
                HistoryEntry(proposal.intent.skill, proposal.intent.object_id, "denied")
            )
            self.cooldown = self.config.deny_cooldown_ticks
            self._to_teleop(t, events, cue=CUE_PAUSE)
        else:
            events.append(Event(t, "warning", {"detail": f"unknown decision {decision!r}"}))

    # -- internals ----------------------------------------------------------

    def _to_teleop(self, t: int, events: list, cue: Optional[str]) -> None:
        self.mode = ControlMode.TELEOP
        self.proposal = None
        self.execution = None
        self.world = replace(self.world, epoch=self.world.epoch + 1)
        if cue:
            events.append(Event(t, "cue", {"text": cue}))

    def _maybe_dispatch(self, t: int) -> None:
        if not self.inference_enabled or self.engine is None:
            return
        if t % self.config.inference_period_ticks != 0:
            return
        if self.engine.busy or self.cooldown > 0:
            return
        snippet = self.buffer.snapshot(self.config.T, self.config.stride)
        if snippet is None:
            return  # insufficient history: stay silent
        self._job_counter += 1
        job = InferenceJob(
            job_id=self._job_counter,
            snippet=snippet,
            world=self.world,
            history=self.history,
            epoch=self.world.epoch,
            submitted_tick=t,
        )
        self.engine.submit(job)

    def _handle_result(self, t: int, result: InferenceResult, events: list) -> None:
        self.counters["inference_results"] += 1
        gt_match = None
        if result.status is InferenceStatus.CONFIDENT:
            self.counters["confident_results"] += 1
            subtask = self.current_subtask
            gt_match = bool(
                subtask is not None
                and result.intent is not None
                and result.intent.skill.value == subtask.skill
                and result.intent.object_id == subtask.object_id
            )
            if not gt_match:
                self.counters["incorrect_confident"] += 1
        events.append(
            Event(
                t,
                "inference",
                {
                    "status": result.status.value,
                    "skill": result.intent.skill.value if result.intent else None,
                    "object": result.intent.object_id if result.intent else None,
                    "text": result.intent.text if result.intent else None,
                    "epoch": result.epoch,
                    "agree_count": result.agree_count,
                    "n_candidates": result.n_candidates,
                    "gt_match": gt_match,
                },
            )
        )
        if self.mode is not ControlMode.TELEOP:
            return
        if result.status is not InferenceStatus.CONFIDENT:
            return
        if result.epoch != self.world.epoch:
            self.counters["stale_dropped"] += 1
            return
        if self.cooldown > 0:
            return
        self._proposal_counter += 1
        proposal = Proposal(
            id=self._proposal_counter,
            intent=result.intent,
            epoch=result.epoch,
            cue_text=f"Proposal: {result.intent.text}",
        )
        self.proposal = proposal
        self.mode = ControlMode.PROPOSING
        self.counters["proposals_issued"] += 1
        events.append(
            Event(
                t,
                "proposal",
                {
                    "id": proposal.id,
                    "skill": proposal.intent.skill.value,
                    "object": proposal.intent.object_id,
                    "text": proposal.intent.text,
                    "epoch": proposal.epoch,
                },
            )
        )
        events.append(Event(t, "cue", {"text": proposal.cue_text}))

    def _finish_execution(self, t: int, events: list) -> None:
        execution = self.execution
        outcome = "succeeded" if execution.status.state == "succeeded" else "failed"
        events.append(
            Event(
                t,
                "skill_end",
                {
                    "skill": execution.params.skill.value,
                    "object": execution.params.target_object,
                    "state": execution.status.state,
                    "reason": execution.status.reason,
                },
            )
        )
        self.history = self.history.with_entry(
            HistoryEntry(execution.params.skill, execution.params.target_object or "", outcome)
        )
        self.buffer.clear()
        self._to_teleop(t, events, cue=CUE_RESUME)

    def _check_subtasks(self, t: int, events: list) -> None:
        subtask = self.current_subtask
        if subtask is None:
            return
        if self._subtask_satisfied(subtask):
            events.append(
                Event(
                    t,
                    "subtask_success",
                    {"index": self.subtask_index, "skill": subtask.skill, "object": subtask.object_id},
                )
            )
            self.subtask_index += 1
            self.world = replace(self.world, epoch=self.world.epoch + 1)

    def _subtask_satisfied(self, subtask: Subtask) -> bool:
        world = self.world
        skill = subtask.skill
        if not world.has_object(subtask.object_id):
            return False
        obj = world.object(subtask.object_id)
        if skill == "pick_up_object":
            return world.gripper_contents == subtask.object_id
        if skill == "place_object":
            placed = self._placed_object_id()
            if placed is None or world.gripper_contents == placed:
                return False
            if not world.has_object(placed):
                return False
            p = world.object(placed)
            return (
                p.position.dist_xy(obj.position) <= 0.12
                and p.position.z >= obj.position.z - 0.05
            )
        if skill == "pour_object":
            return bool(obj.contains)
        if skill in ("navigate_to_point_on_ground", "goto_landmark"):
            # wide furniture forces standoffs out to ~0.95 m from the object point
            return world.base.dist_xy(obj.position) <= 1.05
        if skill in ("push_open_door", "tap_card_open_door", "press_button"):
            door = self._door_for(subtask.object_id)
            if door is None:
                return False
            ix, iy = world.grid.cell_of(door.position.x, door.position.y)
            return not world.grid.is_occupied_cell(ix, iy)
        return False

    def _placed_object_id(self) -> Optional[str]:
        for i in range(self.subtask_index, -1, -1):
            if i >= len(self.scenario.ground_truth_subtasks):
                continue
            st = self.scenario.ground_truth_subtasks[i]
            if st.skill == "pick_up_object":
                return st.object_id
        return None

    def _door_for(self, object_id: str):
        if not self.world.has_object(object_id):
            return None
        anchor = self.world.object(object_id)
        if anchor.has("door-push") or anchor.has("door-pull"):
            return anchor
        doors = [o for o in self.world.objects if o.has("door-push") or o.has("door-pull")]
        if not doors:
            return None
        return min(doors, key=lambda o: (o.position.dist_xy(anchor.position), o.id))
