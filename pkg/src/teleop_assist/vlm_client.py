"""Optional endpoint-backed reasoner: prompt assembly, chat-completions client, answer parsing.

The system is fully functional without this module; the built-in evidence
reasoner is the default. Everything here is a compatibility affordance for
driving inference through an OpenAI-style chat endpoint.
"""

from __future__ import annotations

import ast
import json
import os
import time
from dataclasses import dataclass, field
from typing import Optional, Sequence

import httpx

from .intent import ExecutionHistory, IntentCandidate, SkillClass, motion_annotation
from .teleop import Snippet
from .world import WorldState, distance_to, visible_objects

SKILL_LIBRARY_TEXT = """skill_name: pick_up_object
arguments: object_of_interest
description: pick_up_object skill moves its arms to pick up the object specified in the argument object_of_interest. The pick_up_object skill can only pick up objects within the reach of its arms and does not control the robot base.

skill_name: place_object
arguments: object_of_interest
description: place_object skill moves its arms to place what it is holding to the object specified in the argument object_of_interest. The place_object skill can only place objects within the reach of its arms and does not control the robot base. The robot should place objects onto containers like trash cans, sinks, or items with surfaces like chairs, tables, etc.

skill_name: tap_card_open_door
arguments: None
description: Opens the door by tapping the key card access, if key card access is needed.

skill_name: goto_landmark
arguments: Selected landmark image from the environment from various options.
description: Navigates to the landmark in the environment, example, bedroom, kitchen, tool shop, etc.

skill_name: navigate_to_point_on_ground
arguments: object
description: Moves the robot to a point near the selected object. This skill can be used to move to a point in the room to perform a task, example, navigating near the toaster to make a toast. You should use this skill if there is still some distance between the robot and the object of interest, e.g. there is some area on the floor in between, or there is some hallway. Do not use this if the robot is near and can reach the object directly.

skill_name: push_open_door
arguments: None
description: Opens the door if the robot is in front of the door. The robot moves forward to open the door.

skill_name: pour_object
arguments: object_of_interest
description: pour_object skill moves its arms to pour whatever it is holding to the object (containers) specified in the argument object_of_interest. The pour_object skill can only pour to objects (containers) within the reach of its arms and does not control the robot base.

skill_name: press_button
arguments: button position depending which button you want to press.
description: Equips the robot with the capability of pressing a button. The robot will push the button selected in the argument. The subtask must indicate which button to press, example, 'Press the accessibility button to open the door.'"""

CANDIDATE_RULES_TEXT = """First, give a list of possible tasks to perform, using the information of the scene, the relevant objects, and relevant skills.

Note:

- The robot can only manipulate objects that are within 0.7 meters of the robot. If the distance from the robot to the object is greater than 0.7 meters, then you SHOULD NOT include the manipulation skills in the task choices!

- The pick up and place skill should be used on smaller objects, and the navigate skill should be used on furniture, like tables, chairs, etc.
You should use the robot history: Eliminate the tasks that the robot has already performed. If the robot has picked up an object, it will not perform the task again!

Formulate your results in the format of multiple-choice questions.

Example 1: Given that I am farther away and the robot is moving, the possible subtasks to perform are:

    A) Navigate to the desk with pens on top of it.

    B) Navigate to the brown colored door.

Example 2: Given that I am near the table, the possible subtasks to perform are:

    A) Place the apple in the pink bowl.

    B) Pick up the screwdriver with blue handle.

Example 3: Given that I am near the table, the possible subtasks to perform are:

    A) Pick up the blue bowl with pink stripes.

    B) Pick up the apple.

    D) Pick up the purple bowl.

Example 4: Given that I am in the corridor, the possible subtasks to perform are:

    A) Go to the kitchen.

    B) Go to the classroom."""

INTENT_INSTRUCTIONS_HEAD = """INSTRUCTIONS:

You are given a sequence of images of the scene. The images are taken from the camera on a mobile robot that is moving its base. Your goal is to determine the robot's intent based on this sequence of robot observations. You want to make use of the list of skills, the history of the robot's movement, and the list of task choices to determine the human's goal.

The list of skills that the robot has are below. The tasks are using the skills listed here."""

INTENT_INSTRUCTIONS_TAIL = """Think step by step, keep in mind the following points:

1. Consider the given task choices.

2. Focus on the images, and see if there is a change in robot's point of view; see how it is moving and changing its position, or if the gripper is getting closer to one of the objects, or turning towards one of the landmarks.

If the robot gripper is moving, see where the gripper (as masked in the image) is moving towards based on the green arrow, and use that to determine the task choice option.

Then, given the images and the robot's movement, summarize the previous the robot's movement.

3. Then, summarize the previous executions made by the robot and feedback received from the human or environment.

Finally, answer: What is the robot trying to do? Choose from the list of possible task choices.

Example reasoning 1: The robot is moving towards the left, where there is a table with a bowl on it. Since it has already picked up an object, it most likely wants to place the object on the bowl. However, the distance to the table is farther for the robot (greater than 0.7 meters) to place the object. We should first navigate to the table with a bowl on it.

Example reasoning 2: The robot arm is moving closer towards the apple. The apple is already within the reach of the robot, that is, less than 0.7 meters. Therefore, it is likely that the robot will pick up the apple.

Example reasoning 3: The robot is moving towards the bookshelf with a book in its hand. It is most likely trying to place the book on the bookshelf. However, the robot is far away from the bookshelf. We should first navigate to the bookshelf.

Example reasoning 4: The robot is moving towards the table which has a book on it. The robot tried to pick up the book before, but it failed due to IK solver issues. Since the robot is far away from the table, we should first navigate to the table with a book on it using the navigate skill.

Example reasoning 5: The robot is near the book shelf which has one thriller and one comedy book. The robot tried to pick up the comedy book but the human stopped it. It is likely that the robot will try to pick up the thriller book.

Example reasoning 6: The robot is moving towards the bookshelf with a book in its hand. The robot tried to place the book on the book holder, but it failed due to IK solver issues. Since the robot is far away from the book holder, we should first navigate to the bookshelf using the navigate skill.

Example reasoning 7: The robot is holding a bottle in its hand. Given that there are several cups and containers on the table, It is likely that the robot will pour the liquid from the bottle into one of the cups or containers.

Provide the skill name in a valid JSON format. Your answer at the end in a valid JSON of this format: {{'subtask': '', 'skillname': ''}}

Avoid using the object id in the final JSON response. Describe the object(s) involved in the sub-task instead of using the object id in the JSON response. This is very important.

You should only choose from the list of task choices provided! This is very important.

If the arm is moving, you should see where the arm GRIPPER TIPS is moving towards, and use that to determine the task choice!! The gripper tip consists of 2 pointly black parts at the end of the gripper, don't consider the white part.

For example, if the gripper is mostly staying on the table level or below the table, then most likely the user is choosing objects on the table (i.e. the bottom row). Else if the gripper moves above the table and obstructs the objects on the table, then most likely the user is choosing something above the table on the top row.

You should judge the physical distance between the robot and the object. You can tell that by checking if there is some area (like ground, floor) in between robot and the object. If the robot is far away from the object, it will most likely perform NAVIGATION. It is unlikely that the robot will do tasks that involve touching the object if the robot is far away from the object, e.g. pick up, place, pressing button, tapping card, etc.

Pay attention to where the MASKED gripper is moving, and the direction of the arrow of the robot arm's movement!

The arrow means the direction of the gripper's movement. For example, if the arrow is pointing up and right, it means the gripper is moving to something on the top right.

ANSWER: Let's think step by step."""

SYSTEM_TEXT = (
    "You are assisting a mobile manipulator robot operated by a human. "
    "Answer precisely and finish with the requested JSON."
)


class ParseError(ValueError):
    pass


class EndpointError(RuntimeError):
    pass


class EndpointTimeout(EndpointError):
    pass


class EndpointNetworkError(EndpointError):
    pass


class EndpointAuthError(EndpointError):
    pass


class EndpointHTTPError(EndpointError):
    def __init__(self, status_code: int, detail: str = ""):
        self.status_code = status_code
        super().__init__(f"HTTP {status_code}: {detail}")


@dataclass(frozen=True)
class PromptBundle:
    system_text: str
    user_text: str
    image_placeholders: tuple = ()


@dataclass(frozen=True)
class EndpointConfig:
    base_url: str = "http://127.0.0.1:8731/v1"
    model: str = "desk-vlm"
    timeout_s: float = 20.0
    max_retries: int = 2
    api_key_env: str = "TELEOP_ASSIST_API_KEY"
    backoff_s: float = 0.5

    def __post_init__(self):
        if self.timeout_s <= 0:
            raise ValueError("timeout_s must be positive")


@dataclass(frozen=True)
class ParsedAnswer:
    subtask: str
    skillname: str

    @property
    def skill(self) -> SkillClass:
        return SkillClass.from_name(self.skillname)


# ---------------------------------------------------------------------------
# Scene rendering
# ---------------------------------------------------------------------------


def _scene_sketch(world: WorldState, size: int = 24) -> str:
    """Coarse top-down text sketch standing in for camera frames."""
    grid = world.grid
    sx = grid.width / size
    sy = grid.height / size
    rows = []
    for ry in range(size - 1, -1, -1):
        row = []
        for rx in range(size):
            ix0, ix1 = int(rx * sx), max(int((rx + 1) * sx), int(rx * sx) + 1)
            iy0, iy1 = int(ry * sy), max(int((ry + 1) * sy), int(ry * sy) + 1)
            cell = "#" if grid.occupied[ix0:ix1, iy0:iy1].any() else "."
            row.append(cell)
        rows.append(row)

    def mark(x, y, ch):
        rx = int(x / (grid.resolution * grid.width) * size)
        ry = int(y / (grid.resolution * grid.height) * size)
        if 0 <= rx < size and 0 <= ry < size:
            rows[size - 1 - ry][rx] = ch

    for i, obj in enumerate(visible_objects(world)):
        mark(obj.position.x, obj.position.y, chr(ord("a") + (i % 26)))
    mark(world.base.x, world.base.y, "R")
    return "\n".join("".join(r) for r in rows)


def _object_lines(world: WorldState) -> list:
    lines = []
    for obj in visible_objects(world):
        if obj.held_by_robot:
            lines.append(f"- {obj.class_name}: held by the robot gripper")
            continue
        d = distance_to(world, obj.id)
        tags = ", ".join(sorted(obj.affordances))
        lines.append(f"- {obj.class_name}: {d:.2f} m away ({tags})")
    return lines


def _history_lines(history: ExecutionHistory) -> list:
    if not history.entries:
        return ["(none)"]
    out = []
    for e in history.entries:
        out.append(f"- {e.skill.value} on {e.object_id}: {e.outcome}")
    return out


def _gripper_line(world: WorldState) -> str:
    if world.gripper_contents is not None:
        held = world.object(world.gripper_contents)
        return f"The gripper is closed and holding the {held.class_name}."
    return "The gripper is open and empty."


def _direction_phrase(vec: tuple) -> str:
    x, y, z = vec
    if x == 0.0 and y == 0.0 and z == 0.0:
        return "not moving"
    parts = []
    if abs(z) >= 0.35:
        parts.append("up" if z > 0 else "down")
    if abs(y) >= 0.35:
        parts.append("forward-left" if y > 0 else "forward-right")
    if abs(x) >= 0.35:
        parts.append("right" if x > 0 else "left")
    return " and ".join(parts) if parts else "holding position"


# ---------------------------------------------------------------------------
# Prompt assembly
# ---------------------------------------------------------------------------


def build_candidate_prompt(world: WorldState, history: ExecutionHistory) -> PromptBundle:
    """Prompt asking for the feasible subtask choices in the current scene."""
    lines = [
        "SCENE:",
        _gripper_line(world),
        "Detected objects with distances from the robot base:",
        *_object_lines(world),
        "",
        "HISTORY OF PAST EXECUTIONS:",
        *_history_lines(history),
        "",
        CANDIDATE_RULES_TEXT,
    ]
    return PromptBundle(
        system_text=SYSTEM_TEXT,
        user_text="\n".join(lines),
        image_placeholders=(_scene_sketch(world),),
    )


def build_intent_prompt(
    snippet: Snippet, candidates: Sequence[IntentCandidate], world: WorldState,
    history: ExecutionHistory = ExecutionHistory(),
) -> PromptBundle:
    """Prompt asking which candidate the teleoperation snippet is pursuing."""
    if not candidates:
        raise ValueError("need at least one candidate")
    choice_lines = []
    for i, cand in enumerate(candidates):
        letter = chr(ord("A") + i)
        choice_lines.append(f"{letter}) {cand.text}.")

    pose_lines = []
    for rec in snippet.records:
        pose_lines.append(
            f"t={rec.tick}: base=({rec.base.x:.2f}, {rec.base.y:.2f}, {rec.base.theta:.2f}) "
            f"gripper=({rec.ee.x:.2f}, {rec.ee.y:.2f}, {rec.ee.z:.2f})"
        )

    arrow = motion_annotation(snippet)
    arrow_line = f"The arrow of the gripper motion points {_direction_phrase(arrow)}."

    parts = [
        INTENT_INSTRUCTIONS_HEAD,
        "",
        SKILL_LIBRARY_TEXT,
        "",
        "HISTORY OF PAST EXECUTIONS: You should make use of this information for decision making.",
        "",
        *_history_lines(history),
        "",
        "Possible task choices:",
        "",
        *choice_lines,
        "",
        "Robot base and gripper poses over the subsampled history:",
        *pose_lines,
        "",
        arrow_line,
        _gripper_line(world),
        "",
        INTENT_INSTRUCTIONS_TAIL,
    ]
    return PromptBundle(
        system_text=SYSTEM_TEXT,
        user_text="\n".join(parts),
        image_placeholders=(_scene_sketch(world),),
    )


# ---------------------------------------------------------------------------
# Answer parsing
# ---------------------------------------------------------------------------


def _balanced_objects(text: str) -> list:
    """All top-level {...} substrings, left to right."""
    spans = []
    depth = 0
    start = -1
    for i, ch in enumerate(text):
        if ch == "{":
            if depth == 0:
                start = i
            depth += 1
        elif ch == "}":
            if depth > 0:
                depth -= 1
                if depth == 0 and start >= 0:
                    spans.append(text[start : i + 1])
    return spans


def _try_load(blob: str) -> Optional[dict]:
    for loader in (json.loads, ast.literal_eval):
        try:
            value = loader(blob)
        except Exception:
            continue
        if isinstance(value, dict):
            return value
    return None


def parse_intent_response(text: str) -> ParsedAnswer:
    """Extract the final {'subtask': ..., 'skillname': ...} object from free-form output.

    Tolerates code fences, single quotes, and surrounding prose. Raises
    ParseError when no object parses or the skill name is unknown; upstream a
    failed parse counts as a disagreeing sample.
    """
    if not isinstance(text, str) or not text:
        raise ParseError("empty response")
    for blob in reversed(_balanced_objects(text)):
        data = _try_load(blob)
        if data is None:
            continue
        lowered = {str(k).strip().lower(): v for k, v in data.items()}
        subtask = lowered.get("subtask")
        skillname = lowered.get("skillname", lowered.get("skill_name", lowered.get("skill")))
        if subtask is None or skillname is None:
            continue
        skillname = str(skillname).strip().lower()
        try:
            SkillClass.from_name(skillname)
        except KeyError:
            raise ParseError(f"unknown skill name {skillname!r}")
        return ParsedAnswer(subtask=str(subtask).strip(), skillname=skillname)
    raise ParseError("no parseable answer object found")


def _norm_tokens(text: str) -> frozenset:
    cleaned = "".join(ch.lower() if ch.isalnum() or ch.isspace() else " " for ch in text)
    return frozenset(cleaned.split())


def resolve_candidate(answer: ParsedAnswer, candidates: Sequence[IntentCandidate]) -> IntentCandidate:
    """Map a parsed answer back onto the candidate set by text, scoped to the named skill."""
    if not candidates:
        raise ParseError("no candidates to resolve against")
    skill = answer.skill
    pool = [c for c in candidates if c.skill is skill] or list(candidates)
    want = _norm_tokens(answer.subtask)
    for c in pool:
        if _norm_tokens(c.text) == want:
            return c
    scored = sorted(pool, key=lambda c: (-len(want & _norm_tokens(c.text)), c.key))
    return scored[0]


# ---------------------------------------------------------------------------
# Endpoint client
# ---------------------------------------------------------------------------


def call_endpoint(bundle: PromptBundle, cfg: EndpointConfig, temperature: float = 0.7) -> str:
    """POST to a chat-completions route; retry timeouts and 5xx with backoff."""
    url = cfg.base_url.rstrip("/") + "/chat/completions"
    headers = {"Content-Type": "application/json"}
    api_key = os.environ.get(cfg.api_key_env, "")
    if api_key:
        headers["Authorization"] = f"Bearer {api_key}"
    user_content = bundle.user_text
    if bundle.image_placeholders:
        sketches = "\n\n".join(bundle.image_placeholders)
        user_content = f"{user_content}\n\nSCENE SKETCH (top-down):\n{sketches}"
    payload = {
        "model": cfg.model,
        "temperature": temperature,
        "messages": [
            {"role": "system", "content": bundle.system_text},
            {"role": "user", "content": user_content},
        ],
    }

    last_error: Optional[Exception] = None
    for attempt in range(cfg.max_retries + 1):
        if attempt > 0:
            time.sleep(cfg.backoff_s * (2 ** (attempt - 1)))
        try:
            response = httpx.post(url, json=payload, headers=headers, timeout=cfg.timeout_s)
        except httpx.TimeoutException as exc:
            last_error = EndpointTimeout(str(exc))
            continue
        except httpx.HTTPError as exc:
            raise EndpointNetworkError(str(exc)) from exc
        if response.status_code in (401, 403):
            raise EndpointAuthError(f"HTTP {response.status_code}")
        if response.status_code >= 500:
            last_error = EndpointHTTPError(response.status_code, "server error")
            continue
        if response.status_code != 200:
            raise EndpointHTTPError(response.status_code, response.text[:200])
        try:
            data = response.json()
            return data["choices"][0]["message"]["content"]
        except Exception as exc:
            raise EndpointHTTPError(200, f"malformed body: {exc}") from exc
    raise last_error if last_error is not None else EndpointError("exhausted retries")


class EndpointReasoner:
    """Reasoner backend that asks the configured endpoint to pick a candidate."""

    name = "endpoint"

    def __init__(self, cfg: EndpointConfig):
        self.cfg = cfg

    def sample(self, ctx, temperature: float, rng) -> IntentCandidate:
        bundle = build_intent_prompt(ctx.snippet, ctx.candidates, ctx.world, ctx.history)
        text = call_endpoint(bundle, self.cfg, temperature)
        answer = parse_intent_response(text)
        return resolve_candidate(answer, ctx.candidates)
