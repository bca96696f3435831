"""Segment-level predictor adapters: the gated evidence reasoner and the baselines
behind one predict() interface for head-to-head evaluation."""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from .baselines import (
    RBIIConfig,
    belief_decision,
    candidate_distance,
    hat_predict,
    rbii1_update,
    rbii2_update,
    rbii_init,
)
from .intent import (
    DEFAULT_WEIGHTS,
    EMPTY_HISTORY,
    EvidenceReasoner,
    GateConfig,
    InferenceStatus,
    IntentCandidate,
    ScoreWeights,
    evidence_reasoner_sample,
    extract_features,
    gate_predict,
)


@dataclass(frozen=True)
class Prediction:
    status: str  # "confident" | "not_confident"
    intent: Optional[IntentCandidate] = None


def _suffix_snippet(segment, T):
    if T is None:
        return segment.snippet
    return segment.snippet.suffix(T)


def _skill_filtered(segment, snippet, weights: ScoreWeights) -> list:
    """Study protocol: the evidence reasoner names the skill, the baseline picks the object."""
    candidates = list(segment.candidates)
    if not candidates:
        return candidates
    try:
        features = extract_features(snippet, candidates, segment.world)
        best = evidence_reasoner_sample(features, 0.0, np.random.default_rng(0), weights)
    except Exception:
        return candidates
    narrowed = [c for c in candidates if c.skill is best.skill]
    return narrowed or candidates


class GatedEvidencePredictor:
    """K self-consistency samples of the evidence reasoner behind the agreement gate."""

    deterministic = False

    def __init__(self, gate: GateConfig = GateConfig(), weights: ScoreWeights = DEFAULT_WEIGHTS,
                 name: str = "builtin-gated"):
        self.gate = gate
        self.weights = weights
        self.name = name
        self._reasoner = EvidenceReasoner(weights)

    def predict(self, segment, T=None, rng=None) -> Prediction:
        rng = rng if rng is not None else np.random.default_rng(0)
        snippet = _suffix_snippet(segment, T)
        result = gate_predict(
            self._reasoner, snippet, segment.candidates, segment.world, EMPTY_HISTORY, self.gate, rng
        )
        if result.status is InferenceStatus.CONFIDENT:
            return Prediction(status="confident", intent=result.intent)
        return Prediction(status="not_confident")


class SingleSamplePredictor:
    """Gate ablation: one reasoner sample, always acted on."""

    deterministic = False

    def __init__(self, temperature: float = 0.7, weights: ScoreWeights = DEFAULT_WEIGHTS,
                 name: str = "builtin-ungated"):
        self.temperature = temperature
        self.weights = weights
        self.name = name

    def predict(self, segment, T=None, rng=None) -> Prediction:
        rng = rng if rng is not None else np.random.default_rng(0)
        if not segment.candidates:
            return Prediction(status="not_confident")
        snippet = _suffix_snippet(segment, T)
        try:
            features = extract_features(snippet, segment.candidates, segment.world)
            intent = evidence_reasoner_sample(features, self.temperature, rng, self.weights)
        except Exception:
            return Prediction(status="not_confident")
        return Prediction(status="confident", intent=intent)


class HatPredictor:
    """Proximity heuristic: the candidate nearest the skill-appropriate reference point."""

    deterministic = True

    def __init__(self, object_only: bool = True, weights: ScoreWeights = DEFAULT_WEIGHTS,
                 name: str = "hat"):
        self.object_only = object_only
        self.weights = weights
        self.name = name

    def predict(self, segment, T=None, rng=None) -> Prediction:
        candidates = list(segment.candidates)
        if not candidates:
            return Prediction(status="not_confident")
        snippet = _suffix_snippet(segment, T)
        if self.object_only:
            candidates = _skill_filtered(segment, snippet, self.weights)
        # proximity is judged at the end of the snippet
        last = snippet.records[-1]
        world = replace(segment.world, base=last.base, ee=last.ee)
        return Prediction(status="confident", intent=hat_predict(world, candidates))


class RbiiPredictor:
    """Recursive Bayes over the snippet; variant 1 uses distance progress, 2 uses inputs."""

    deterministic = True

    def __init__(self, variant: int, cfg: RBIIConfig = RBIIConfig(), object_only: bool = True,
                 weights: ScoreWeights = DEFAULT_WEIGHTS, thresholded: bool = False,
                 name: Optional[str] = None):
        if variant not in (1, 2):
            raise ValueError("variant must be 1 or 2")
        self.variant = variant
        self.cfg = cfg
        self.object_only = object_only
        self.weights = weights
        self.thresholded = thresholded
        self.name = name or f"rbii{variant}"

    def predict(self, segment, T=None, rng=None) -> Prediction:
        candidates = list(segment.candidates)
        if not candidates:
            return Prediction(status="not_confident")
        snippet = _suffix_snippet(segment, T)
        if self.object_only:
            candidates = _skill_filtered(segment, snippet, self.weights)
        belief = rbii_init(candidates)
        records = snippet.records
        for prev, cur in zip(records, records[1:]):
            if self.variant == 1:
                prev_w = replace(segment.world, base=prev.base, ee=prev.ee)
                cur_w = replace(segment.world, base=cur.base, ee=cur.ee)
                prev_d = [candidate_distance(prev_w, c) for c in candidates]
                cur_d = [candidate_distance(cur_w, c) for c in candidates]
                belief = rbii1_update(belief, prev_d, cur_d, self.cfg.lam, self.cfg.epsilon_floor)
            else:
                cur_w = replace(segment.world, base=cur.base, ee=cur.ee)
                belief = rbii2_update(belief, cur_w, cur.input, candidates, self.cfg.beta)
        if self.thresholded:
            result = belief_decision(belief, self.cfg.decision_threshold)
            if result.status is InferenceStatus.CONFIDENT:
                return Prediction(status="confident", intent=result.intent)
            return Prediction(status="not_confident")
        # accuracy evaluation: always answer with the posterior argmax
        idx = int(np.argmax(belief.probs))
        return Prediction(status="confident", intent=belief.candidates[idx])


class OraclePredictor:
    """Returns the label; a sanity ceiling for the evaluation plumbing."""

    deterministic = True
    name = "oracle"

    def predict(self, segment, T=None, rng=None) -> Prediction:
        return Prediction(status="confident", intent=segment.ground_truth)


class ConstantWrongPredictor:
    """Always answers the lexicographically first non-label candidate (floor for accuracy)."""

    deterministic = True
    name = "constant-wrong"

    def predict(self, segment, T=None, rng=None) -> Prediction:
        for c in sorted(segment.candidates, key=lambda c: c.key):
            if c.key != segment.ground_truth.key:
                return Prediction(status="confident", intent=c)
        return Prediction(status="not_confident")


def standard_predictors(gate: GateConfig = GateConfig(), rbii: RBIIConfig = RBIIConfig(),
                        weights: ScoreWeights = DEFAULT_WEIGHTS) -> list:
    """The comparison set used by the evaluation harness."""
    return [
        GatedEvidencePredictor(gate=gate, weights=weights),
        HatPredictor(weights=weights),
        RbiiPredictor(1, cfg=rbii, weights=weights),
        RbiiPredictor(2, cfg=rbii, weights=weights),
    ]
