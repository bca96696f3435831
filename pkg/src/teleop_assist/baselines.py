"""Proximity (HAT) and recursive-Bayes (RBII) intent baselines."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .intent import (
    BASE_REFERENCE_SKILLS,
    InferenceResult,
    InferenceStatus,
    Intent,
    IntentCandidate,
)
from .world import HumanInput, WorldState

NORMALIZATION_TOL = 1e-9


class DimensionMismatchError(ValueError):
    pass


@dataclass
class Belief:
    """Normalized posterior over a fixed candidate list."""

    candidates: tuple
    probs: np.ndarray

    def __post_init__(self):
        self.probs = np.asarray(self.probs, dtype=float)
        if len(self.probs) != len(self.candidates):
            raise DimensionMismatchError(
                f"{len(self.probs)} probabilities for {len(self.candidates)} candidates"
            )
        if np.any(self.probs < 0):
            raise ValueError("negative probability")
        if abs(float(np.sum(self.probs)) - 1.0) > NORMALIZATION_TOL:
            raise ValueError(f"belief sums to {float(np.sum(self.probs))}")


@dataclass(frozen=True)
class RBIIConfig:
    lam: float = 5.0  # 1/m distance-progress sensitivity (variant 1)
    beta: float = 3.0  # rationality coefficient (variant 2)
    decision_threshold: float = 0.8
    epsilon_floor: float = 1e-3  # keeps the posterior recoverable when users change their mind

    def __post_init__(self):
        if self.lam < 0 or self.beta < 0:
            raise ValueError("lam and beta must be non-negative")
        if not (0.0 < self.decision_threshold <= 1.0):
            raise ValueError("decision_threshold must be in (0, 1]")


def reference_point(world: WorldState, candidate: IntentCandidate) -> tuple:
    """Gripper point for manipulation candidates, base point for base-driven ones."""
    if candidate.skill in BASE_REFERENCE_SKILLS:
        return (world.base.x, world.base.y, 0.0)
    return world.ee.as_tuple()


def candidate_distance(world: WorldState, candidate: IntentCandidate) -> float:
    obj = world.object(candidate.object_id)
    ref = reference_point(world, candidate)
    if candidate.skill in BASE_REFERENCE_SKILLS:
        return math.hypot(obj.position.x - ref[0], obj.position.y - ref[1])
    return math.sqrt(
        (obj.position.x - ref[0]) ** 2
        + (obj.position.y - ref[1]) ** 2
        + (obj.position.z - ref[2]) ** 2
    )


def hat_predict(world: WorldState, candidates: Sequence[IntentCandidate]) -> Intent:
    """Nearest-target heuristic; ties break lexicographically by (skill, object)."""
    if not candidates:
        raise ValueError("hat_predict needs at least one candidate")
    return min(candidates, key=lambda c: (candidate_distance(world, c), c.key))


def rbii_init(candidates: Sequence[IntentCandidate]) -> Belief:
    if not candidates:
        raise ValueError("cannot initialize a belief over zero candidates")
    n = len(candidates)
    return Belief(candidates=tuple(candidates), probs=np.full(n, 1.0 / n))


def rbii1_update(
    belief: Belief,
    prev_dist: Sequence[float],
    cur_dist: Sequence[float],
    lam: float,
    epsilon_floor: float = 1e-3,
) -> Belief:
    """Distance-progress likelihood: L_i = max(exp(-lam * (cur_i - prev_i)), floor)."""
    prev = np.asarray(prev_dist, dtype=float)
    cur = np.asarray(cur_dist, dtype=float)
    if prev.shape != belief.probs.shape or cur.shape != belief.probs.shape:
        raise DimensionMismatchError("distance vectors must match the belief dimension")
    likelihood = np.maximum(np.exp(-lam * (cur - prev)), epsilon_floor)
    post = belief.probs * likelihood
    post = post / np.sum(post)
    return Belief(candidates=belief.candidates, probs=post)


# Discretized action alphabet: 8 compass directions plus the null action.
COMPASS = tuple(
    (math.cos(k * math.pi / 4.0), math.sin(k * math.pi / 4.0)) for k in range(8)
)


def _snap_to_compass(vx: float, vy: float) -> Optional[tuple]:
    if math.hypot(vx, vy) < 1e-6:
        return None
    return max(COMPASS, key=lambda d: vx * d[0] + vy * d[1])


def _observed_motion(world: WorldState, action: HumanInput) -> Optional[tuple]:
    """Planar motion the input commands: gripper velocity, else base velocity, else null."""
    ex, ey = action.ee_delta.x, action.ee_delta.y
    if math.hypot(ex, ey) >= 1e-6:
        return (ex, ey)
    if abs(action.base_lin) >= 1e-6:
        return (
            action.base_lin * math.cos(world.base.theta),
            action.base_lin * math.sin(world.base.theta),
        )
    return None


def boltzmann_likelihood(observed: tuple, goal_dir: tuple, beta: float) -> float:
    """P(a | goal) over the compass+null alphabet with utility cos(a, goal direction)."""
    snapped = _snap_to_compass(observed[0], observed[1])
    if snapped is None:
        return 1.0
    gn = math.hypot(goal_dir[0], goal_dir[1])
    if gn < 1e-9:
        return 1.0
    gx, gy = goal_dir[0] / gn, goal_dir[1] / gn
    util = snapped[0] * gx + snapped[1] * gy
    z = sum(math.exp(beta * (d[0] * gx + d[1] * gy)) for d in COMPASS) + math.exp(0.0)
    return math.exp(beta * util) / z


def rbii2_update(
    belief: Belief,
    world: WorldState,
    action: HumanInput,
    candidates: Sequence[IntentCandidate],
    beta: float,
) -> Belief:
    """Boltzmann-rational likelihood of the observed input under each candidate goal."""
    if len(candidates) != len(belief.probs):
        raise DimensionMismatchError("candidate list must match the belief dimension")
    if beta == 0.0:
        return Belief(candidates=belief.candidates, probs=belief.probs.copy())
    observed = _observed_motion(world, action)
    if observed is None:
        return Belief(candidates=belief.candidates, probs=belief.probs.copy())
    likelihood = np.empty(len(candidates))
    for i, cand in enumerate(candidates):
        obj = world.object(cand.object_id)
        ref = reference_point(world, cand)
        goal_dir = (obj.position.x - ref[0], obj.position.y - ref[1])
        likelihood[i] = boltzmann_likelihood(observed, goal_dir, beta)
    post = belief.probs * likelihood
    post = post / np.sum(post)
    return Belief(candidates=belief.candidates, probs=post)


def belief_decision(belief: Belief, threshold: float) -> InferenceResult:
    """Confident(argmax) iff the maximum is unique and clears the threshold."""
    probs = belief.probs
    top = float(np.max(probs))
    winners = [i for i, p in enumerate(probs) if p >= top - 1e-12]
    if len(winners) == 1 and top >= threshold:
        return InferenceResult(
            status=InferenceStatus.CONFIDENT,
            intent=belief.candidates[winners[0]],
            n_candidates=len(belief.candidates),
        )
    return InferenceResult(status=InferenceStatus.NOT_CONFIDENT, n_candidates=len(belief.candidates))
