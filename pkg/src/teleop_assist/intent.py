"""Intent engine: candidate generation, motion features, the evidence reasoner, and the
self-consistency confidence gate."""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field
from enum import Enum
from typing import Optional, Sequence

import numpy as np

from .teleop import Snippet
from .world import TICK_DT, WorldState, distance_to, normalize_angle, visible_objects

REACH_M = 0.7  # manipulation range of the arms, measured from the base
MOTION_ANNOTATION_WINDOW = 20  # ticks summarized by the gripper-motion direction vector
MOTION_ANNOTATION_MIN_M = 0.01
ALIGN_MIN_MOTION_M = 0.015  # below this net displacement, direction carries no signal
RATE_NORM_FLOOR = 0.02  # m/s scale floor so noise-level rates never normalize to full scale


class SkillClass(Enum):
    """The eight parameterized skills; values are the canonical library names."""

    PICK_UP_OBJECT = "pick_up_object"
    PLACE_OBJECT = "place_object"
    POUR_OBJECT = "pour_object"
    NAVIGATE_TO_POINT = "navigate_to_point_on_ground"
    GO_TO_LANDMARK = "goto_landmark"
    PUSH_OPEN_DOOR = "push_open_door"
    TAP_CARD_OPEN_DOOR = "tap_card_open_door"
    PRESS_BUTTON = "press_button"

    @classmethod
    def from_name(cls, name: str) -> "SkillClass":
        for member in cls:
            if member.value == name:
                return member
        raise KeyError(name)


MANIPULATION_SKILLS = frozenset(
    {
        SkillClass.PICK_UP_OBJECT,
        SkillClass.PLACE_OBJECT,
        SkillClass.POUR_OBJECT,
        SkillClass.PRESS_BUTTON,
        SkillClass.TAP_CARD_OPEN_DOOR,
    }
)
NAVIGATION_SKILLS = frozenset({SkillClass.NAVIGATE_TO_POINT, SkillClass.GO_TO_LANDMARK})
# Skills read through base motion rather than gripper motion.
BASE_REFERENCE_SKILLS = NAVIGATION_SKILLS | {SkillClass.PUSH_OPEN_DOOR}


class EmptyCandidatesError(ValueError):
    pass


class DegenerateSnippetError(ValueError):
    pass


@dataclass(frozen=True)
class IntentCandidate:
    skill: SkillClass
    object_id: str
    text: str

    @property
    def key(self) -> tuple:
        return (self.skill.value, self.object_id)


# An inferred intent is one of the candidates that produced it.
Intent = IntentCandidate


@dataclass(frozen=True)
class HistoryEntry:
    skill: SkillClass
    object_id: str
    outcome: str  # "succeeded" | "failed" | "denied"


@dataclass(frozen=True)
class ExecutionHistory:
    entries: tuple = ()

    def completed(self) -> frozenset:
        return frozenset(
            (e.skill, e.object_id) for e in self.entries if e.outcome == "succeeded"
        )

    def with_entry(self, entry: HistoryEntry) -> "ExecutionHistory":
        return ExecutionHistory(self.entries + (entry,))


EMPTY_HISTORY = ExecutionHistory()


@dataclass(frozen=True)
class FeatureRecord:
    """Motion evidence for one candidate.

    Manipulation candidates are judged by arm motion with the base's own
    displacement subtracted out (driving past a table must not read as
    reaching for the objects on it); navigation candidates are judged by
    base motion.
    """

    approach_rate: float  # m/s of progress toward the target over the snippet
    heading_alignment: float  # cosine between motion direction and direction-to-target
    reachable: bool  # within the 0.7 m manipulation range
    affordance_consistent: bool  # the pairing makes everyday sense for this object class
    motion_annotation: tuple  # gripper motion direction over the last few ticks (unit or zero)


@dataclass(frozen=True)
class FeatureTable:
    entries: tuple  # tuple[(IntentCandidate, FeatureRecord), ...] in candidate order

    @property
    def candidates(self) -> tuple:
        return tuple(c for c, _ in self.entries)

    def record(self, candidate: IntentCandidate) -> FeatureRecord:
        for c, r in self.entries:
            if c.key == candidate.key:
                return r
        raise KeyError(candidate.key)


@dataclass(frozen=True)
class GateConfig:
    K: int = 5
    eta: int = 4
    temperature: float = 0.7

    def __post_init__(self):
        if not (1 <= self.eta <= self.K):
            raise ValueError(f"eta must satisfy 1 <= eta <= K, got eta={self.eta} K={self.K}")


class InferenceStatus(Enum):
    CONFIDENT = "confident"
    NOT_CONFIDENT = "not_confident"
    NO_CANDIDATES = "no_candidates"


@dataclass(frozen=True)
class InferenceResult:
    status: InferenceStatus
    intent: Optional[Intent] = None
    epoch: int = -1
    agree_count: int = 0
    n_candidates: int = 0
    diagnostic: str = ""


# ---------------------------------------------------------------------------
# Candidate generation
# ---------------------------------------------------------------------------

# Everyday-knowledge vocabulary: which object classes each skill sensibly targets.
# Word-level matching against the class name.
VESSEL_WORDS = frozenset(
    {"pot", "pan", "bowl", "cup", "mug", "sink", "pitcher", "glass", "jug", "kettle"}
)
RECEPTACLE_WORDS = frozenset(
    {
        "table",
        "shelf",
        "basket",
        "bag",
        "bin",
        "tray",
        "box",
        "chair",
        "counter",
        "crate",
        "can",
        "sink",
        "rack",
    }
)


def _class_words(class_name: str) -> frozenset:
    return frozenset(class_name.lower().replace("-", " ").split())


def affordance_consistent(skill: SkillClass, target_class: str, held_has_contents: bool) -> bool:
    """Does pairing this skill with this object class make everyday sense?

    Feasibility is the generator's job; this captures the semantic prior that,
    e.g., pouring onto a laptop is wrong even when physically possible.
    """
    words = _class_words(target_class)
    if skill is SkillClass.POUR_OBJECT:
        return held_has_contents and bool(words & VESSEL_WORDS)
    if skill is SkillClass.PLACE_OBJECT:
        if held_has_contents and words & VESSEL_WORDS:
            return False  # contents should be poured, not the container dropped in
        return bool(words & RECEPTACLE_WORDS)
    # The remaining skills are already scoped by affordance tags.
    return True


def _qualifier(world: WorldState, obj, group: list) -> str:
    """Distinguish same-class candidates by position, never by internal id."""
    if len(group) < 2:
        return ""
    zs = sorted(o.position.z for o in group)
    if zs[-1] - zs[0] > 0.2:
        if obj.position.z == max(o.position.z for o in group):
            return "upper "
        if obj.position.z == min(o.position.z for o in group):
            return "lower "
    bearing = math.atan2(obj.position.y - world.base.y, obj.position.x - world.base.x)
    rel = normalize_angle(bearing - world.base.theta)
    return "left " if rel > 0 else "right "


def _candidate_text(skill: SkillClass, desc: str, world: WorldState) -> str:
    held_desc = None
    contents_desc = None
    if world.gripper_contents is not None:
        held = world.object(world.gripper_contents)
        held_desc = held.class_name
        if held.contains:
            inner = world.object(held.contains[0])
            contents_desc = inner.class_name
    if skill is SkillClass.PICK_UP_OBJECT:
        return f"Pick up the {desc}"
    if skill is SkillClass.PLACE_OBJECT:
        what = held_desc or "held object"
        return f"Place the {what} in the {desc}"
    if skill is SkillClass.POUR_OBJECT:
        what = contents_desc or (f"contents of the {held_desc}" if held_desc else "contents")
        return f"Pour the {what} into the {desc}"
    if skill is SkillClass.NAVIGATE_TO_POINT:
        return f"Navigate to the {desc}"
    if skill is SkillClass.GO_TO_LANDMARK:
        return f"Go to the {desc}"
    if skill is SkillClass.PUSH_OPEN_DOOR:
        return f"Push open the {desc}"
    if skill is SkillClass.TAP_CARD_OPEN_DOOR:
        return f"Tap the access card on the {desc}"
    if skill is SkillClass.PRESS_BUTTON:
        return f"Press the {desc}"
    raise AssertionError(skill)


def generate_candidates(world: WorldState, history: ExecutionHistory = EMPTY_HISTORY) -> list:
    """Feasible (skill, object) pairs for the current scene.

    Rules: manipulation skills need the target within 0.7 m of the base; pick
    needs an empty gripper and a graspable target; place/pour need a held
    object and a receptacle-tagged target (pour also needs pourable contents);
    navigation targets navigable/landmark objects beyond reach; door/button
    skills need their tagged object nearby; pairs already performed are
    eliminated; objects inside containers or in the gripper are not targets.
    """
    done = history.completed()
    contained = world.contained_ids()
    holding = world.gripper_contents is not None
    held_has_contents = False
    if holding:
        held_has_contents = bool(world.object(world.gripper_contents).contains)

    visible = visible_objects(world)
    out = []
    for obj in visible:
        if obj.held_by_robot or obj.id in contained:
            continue
        dist = distance_to(world, obj.id)
        within = dist <= REACH_M
        pairs = []
        if within:
            if not holding and obj.has("graspable"):
                pairs.append(SkillClass.PICK_UP_OBJECT)
            if holding and (obj.has("container") or obj.has("surface")):
                pairs.append(SkillClass.PLACE_OBJECT)
            if (
                holding
                and held_has_contents
                and (obj.has("container") or obj.has("pourable-target"))
            ):
                pairs.append(SkillClass.POUR_OBJECT)
            if obj.has("button"):
                pairs.append(SkillClass.PRESS_BUTTON)
            if obj.has("card-reader"):
                pairs.append(SkillClass.TAP_CARD_OPEN_DOOR)
            if obj.has("door-push"):
                pairs.append(SkillClass.PUSH_OPEN_DOOR)
        else:
            if obj.has("navigable"):
                pairs.append(SkillClass.NAVIGATE_TO_POINT)
            if obj.has("landmark"):
                pairs.append(SkillClass.GO_TO_LANDMARK)
        for skill in pairs:
            if (skill, obj.id) in done:
                continue
            out.append((skill, obj))

    # Build display texts, qualifying same-class duplicates by position.
    by_class = {}
    for _, obj in out:
        by_class.setdefault(obj.class_name, [])
        if obj not in by_class[obj.class_name]:
            by_class[obj.class_name].append(obj)
    candidates = []
    for skill, obj in out:
        desc = _qualifier(world, obj, by_class[obj.class_name]) + obj.class_name
        candidates.append(IntentCandidate(skill=skill, object_id=obj.id, text=_candidate_text(skill, desc, world)))
    candidates.sort(key=lambda c: c.key)
    return candidates


# ---------------------------------------------------------------------------
# Feature extraction
# ---------------------------------------------------------------------------


def _reference_points(record, skill: SkillClass) -> tuple:
    if skill in BASE_REFERENCE_SKILLS:
        return (record.base.x, record.base.y, 0.0)
    return (record.ee.x, record.ee.y, record.ee.z)


def _target_point(obj, skill: SkillClass) -> tuple:
    if skill in BASE_REFERENCE_SKILLS:
        return (obj.position.x, obj.position.y, 0.0)
    return obj.position.as_tuple()


def _dist(a: tuple, b: tuple) -> float:
    return math.sqrt((a[0] - b[0]) ** 2 + (a[1] - b[1]) ** 2 + (a[2] - b[2]) ** 2)


def _cosine(a: tuple, b: tuple) -> float:
    na = math.sqrt(sum(v * v for v in a))
    nb = math.sqrt(sum(v * v for v in b))
    if na < 1e-9 or nb < 1e-9:
        return 0.0
    dot = sum(x * y for x, y in zip(a, b))
    return max(-1.0, min(1.0, dot / (na * nb)))


def _arm_displacement(first, last) -> tuple:
    """Gripper displacement with the base's translation removed (arm intent only)."""
    return (
        (last.ee.x - first.ee.x) - (last.base.x - first.base.x),
        (last.ee.y - first.ee.y) - (last.base.y - first.base.y),
        last.ee.z - first.ee.z,
    )


def motion_annotation(snippet: Snippet, window_ticks: int = MOTION_ANNOTATION_WINDOW) -> tuple:
    """Unit direction of gripper motion over the last ``window_ticks`` ticks (zero if still)."""
    records = [r for r in snippet.records if r.tick > snippet.t_end - window_ticks]
    if len(records) < 2:
        records = list(snippet.records[-2:])
    disp = _arm_displacement(records[0], records[-1])
    norm = math.sqrt(sum(v * v for v in disp))
    if norm < MOTION_ANNOTATION_MIN_M:
        return (0.0, 0.0, 0.0)
    return (disp[0] / norm, disp[1] / norm, disp[2] / norm)


def extract_features(snippet: Snippet, candidates: Sequence[IntentCandidate], world: WorldState) -> FeatureTable:
    """Per-candidate motion evidence computed from the snippet against the current scene."""
    if len(snippet.records) < 2:
        raise DegenerateSnippetError(f"snippet has {len(snippet.records)} record(s), need >= 2")
    first, last = snippet.records[0], snippet.records[-1]
    span_s = (last.tick - first.tick) * TICK_DT
    held_has_contents = False
    if world.gripper_contents is not None:
        held_has_contents = bool(world.object(world.gripper_contents).contains)
    annotation = motion_annotation(snippet)

    entries = []
    for cand in candidates:
        obj = world.object(cand.object_id)
        target = _target_point(obj, cand.skill)
        if cand.skill in BASE_REFERENCE_SKILLS:
            p0 = _reference_points(first, cand.skill)
            p1 = _reference_points(last, cand.skill)
            d0 = _dist(p0, target)
            d1 = _dist(p1, target)
            rate = (d0 - d1) / span_s if span_s > 0 else 0.0
            motion = (p1[0] - p0[0], p1[1] - p0[1], p1[2] - p0[2])
            to_target = (target[0] - p0[0], target[1] - p0[1], target[2] - p0[2])
            alignment = _cosine(motion, to_target)
        else:
            # arm intent: progress is the component of base-relative gripper
            # motion toward the target, so base travel contributes nothing
            p0 = (first.ee.x, first.ee.y, first.ee.z)
            motion = _arm_displacement(first, last)
            to_target = (target[0] - p0[0], target[1] - p0[1], target[2] - p0[2])
            alignment = _cosine(motion, to_target)
            tnorm = math.sqrt(sum(v * v for v in to_target))
            if span_s > 0 and tnorm > 1e-9:
                rate = sum(m * t for m, t in zip(motion, to_target)) / tnorm / span_s
            else:
                rate = 0.0
        record = FeatureRecord(
            approach_rate=rate,
            heading_alignment=alignment,
            reachable=distance_to(world, cand.object_id) <= REACH_M,
            affordance_consistent=affordance_consistent(cand.skill, obj.class_name, held_has_contents),
            motion_annotation=annotation,
        )
        entries.append((cand, record))
    return FeatureTable(entries=tuple(entries))


# ---------------------------------------------------------------------------
# Built-in evidence reasoner and the confidence gate
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ScoreWeights:
    heading: float = 1.0  # gripper/base motion direction term (the arrow analog)
    approach: float = 1.0
    affordance: float = 2.0  # everyday-knowledge prior dominates geometry
    reach_match: float = 1.0


DEFAULT_WEIGHTS = ScoreWeights()
# Ablation of the motion-direction annotation: the reasoner loses the heading term.
NO_MOTION_ANNOTATION_WEIGHTS = ScoreWeights(heading=0.0)


def score_candidates(features: FeatureTable, weights: ScoreWeights = DEFAULT_WEIGHTS) -> np.ndarray:
    rates = np.array([r.approach_rate for _, r in features.entries])
    peak = np.max(np.abs(rates)) if len(rates) else 0.0
    norm_rates = rates / peak if peak > 1e-9 else np.zeros_like(rates)
    scores = []
    for (cand, rec), nrate in zip(features.entries, norm_rates):
        wants_reach = cand.skill not in NAVIGATION_SKILLS
        reach_match = 1.0 if rec.reachable == wants_reach else 0.0
        scores.append(
            weights.heading * rec.heading_alignment
            + weights.approach * float(nrate)
            + weights.affordance * (1.0 if rec.affordance_consistent else 0.0)
            + weights.reach_match * reach_match
        )
    return np.array(scores)


def softmax_probs(scores: np.ndarray, temperature: float) -> np.ndarray:
    z = scores / temperature
    z = z - np.max(z)
    e = np.exp(z)
    return e / np.sum(e)


def evidence_reasoner_sample(
    features: FeatureTable,
    temperature: float,
    rng: np.random.Generator,
    weights: ScoreWeights = DEFAULT_WEIGHTS,
) -> IntentCandidate:
    """Sample one intent from the softmax over evidence scores.

    temperature -> 0 degenerates to the argmax with a lexicographic
    (skill, object) tie-break.
    """
    candidates = features.candidates
    if not candidates:
        raise EmptyCandidatesError("no candidates to sample from")
    scores = score_candidates(features, weights)
    if temperature < 1e-9:
        best = np.max(scores)
        tied = [c for c, s in zip(candidates, scores) if s >= best - 1e-12]
        return min(tied, key=lambda c: c.key)
    probs = softmax_probs(scores, temperature)
    idx = int(rng.choice(len(candidates), p=probs))
    return candidates[idx]


class EvidenceReasoner:
    """Deterministic-weights stand-in for a zero-shot scene reasoner."""

    name = "builtin"

    def __init__(self, weights: ScoreWeights = DEFAULT_WEIGHTS):
        self.weights = weights

    def sample(self, ctx: "ReasonerContext", temperature: float, rng: np.random.Generator):
        return evidence_reasoner_sample(ctx.features, temperature, rng, self.weights)


@dataclass(frozen=True)
class ReasonerContext:
    snippet: Snippet
    candidates: tuple
    features: FeatureTable
    world: WorldState
    history: ExecutionHistory


def self_consistency_gate(samples: Sequence[Optional[IntentCandidate]], eta: int) -> InferenceResult:
    """Confident(mode) iff a unique modal answer appears at least ``eta`` times.

    Failed samples (None) count toward K but never toward agreement. A tie for
    the mode is never confident.
    """
    k = len(samples)
    if k < 1:
        raise ValueError("need at least one sample")
    if not (1 <= eta <= k):
        raise ValueError(f"eta must satisfy 1 <= eta <= K, got eta={eta} K={k}")
    valid = [s for s in samples if s is not None]
    if not valid:
        return InferenceResult(status=InferenceStatus.NOT_CONFIDENT, diagnostic="no valid samples")
    counts = Counter(s.key for s in valid)
    top = max(counts.values())
    modes = [key for key, c in counts.items() if c == top]
    if len(modes) == 1 and top >= eta:
        winner = next(s for s in valid if s.key == modes[0])
        return InferenceResult(status=InferenceStatus.CONFIDENT, intent=winner, agree_count=top)
    return InferenceResult(status=InferenceStatus.NOT_CONFIDENT, agree_count=top)


def gate_predict(
    reasoner,
    snippet: Snippet,
    candidates: Sequence[IntentCandidate],
    world: WorldState,
    history: ExecutionHistory,
    gate: GateConfig,
    rng: np.random.Generator,
) -> InferenceResult:
    """Run K independently seeded reasoner samples through the gate."""
    if not candidates:
        return InferenceResult(status=InferenceStatus.NO_CANDIDATES, epoch=world.epoch)
    try:
        features = extract_features(snippet, candidates, world)
        ctx = ReasonerContext(
            snippet=snippet,
            candidates=tuple(candidates),
            features=features,
            world=world,
            history=history,
        )
        seeds = rng.integers(0, 2**63 - 1, size=gate.K)
        samples = []
        for k in range(gate.K):
            child = np.random.default_rng(int(seeds[k]))
            try:
                samples.append(reasoner.sample(ctx, gate.temperature, child))
            except Exception:  # a failed sample counts as disagreement
                samples.append(None)
    except DegenerateSnippetError as exc:
        return InferenceResult(
            status=InferenceStatus.NOT_CONFIDENT, epoch=world.epoch, diagnostic=str(exc)
        )
    result = self_consistency_gate(samples, gate.eta)
    return InferenceResult(
        status=result.status,
        intent=result.intent,
        epoch=world.epoch,
        agree_count=result.agree_count,
        n_candidates=len(candidates),
        diagnostic=result.diagnostic,
    )


def infer(
    reasoner,
    snippet: Snippet,
    world: WorldState,
    history: ExecutionHistory,
    gate: GateConfig,
    rng: np.random.Generator,
) -> InferenceResult:
    """Full inference pass: candidates, K gated reasoner calls, epoch-tagged result."""
    candidates = generate_candidates(world, history)
    return gate_predict(reasoner, snippet, candidates, world, history, gate, rng)
