"""Simplified single-agent Overcooked gridworld with an invisible oven timer.

Layout (col, row), origin top-left, 5 columns by 3 rows::

    . . O . .        O = oven
    D A . . S        D = onion dispenser, S = delivery counter, A = start
    . . N . .        N = number counter (dual task only, a plain counter otherwise)

Counters are not walkable.  The agent interacts with any counter that is
4-adjacent to its cell; there is no facing direction.

Trial cycle: pick an onion, place it in the oven (the timer starts at 0),
wait until the timer reaches the target duration, take the soup out and
deliver it (+1).  Nothing in the observation says when the soup is ready.

In the dual task, placing the onion also opens a 4-step number window.  On
each of those steps a number 1..10 is shown and the chosen action is the
answer: ``INTERACT`` for n < 5, ``WAIT`` for n >= 5, +1 if correct.

Timer convention: the placement step leaves the timer at 0 and every later
step advances it by one before the action resolves, so an ``INTERACT`` issued
k steps after placement sees timer value k.  ``info["oven_timer"]`` is the
value in effect during the step.
"""

from __future__ import annotations

import csv
import enum
from dataclasses import dataclass, field
from functools import cached_property, lru_cache
from typing import Iterable, Optional

import numpy as np

WIDTH = 5
HEIGHT = 3
EPISODE_LEN = 100
WINDOW_LEN = 4
TARGETS = (7, 8, 9, 10)
N_CHANNELS = 6
OBS_SHAPE = (N_CHANNELS, HEIGHT, WIDTH)

DISPENSER = (0, 1)
OVEN = (2, 0)
DELIVERY = (4, 1)
NUMBER_COUNTER = (2, 2)
START = (1, 1)

# static layout codes for observation channel 0 (scaled by 1/4)
CODE_EMPTY, CODE_DISPENSER, CODE_OVEN, CODE_DELIVERY, CODE_NUMBER = range(5)


class ConfigError(ValueError):
    """Invalid environment configuration."""


class EpisodeFinished(RuntimeError):
    """Raised when stepping an environment whose episode is over."""


class TaskKind(str, enum.Enum):
    SINGLE = "single"
    DUAL = "dual"


class Action(enum.IntEnum):
    WAIT = 0
    UP = 1
    DOWN = 2
    LEFT = 3
    RIGHT = 4
    INTERACT = 5


N_ACTIONS = len(Action)

MOVES = {
    Action.UP: (0, -1),
    Action.DOWN: (0, 1),
    Action.LEFT: (-1, 0),
    Action.RIGHT: (1, 0),
}


class Carrying(enum.IntEnum):
    NOTHING = 0
    ONION = 1
    SOUP = 2


class InteractOutcome(str, enum.Enum):
    PICK_ONION = "pick_onion"
    PLACE_ONION = "place_onion"
    TAKE_SOUP = "take_soup"
    DELIVER = "deliver"
    NOOP = "noop"


@dataclass(frozen=True)
class GridLayout:
    width: int
    height: int
    dispenser: tuple
    oven: tuple
    delivery: tuple
    number_counter: Optional[tuple]
    counters: frozenset
    start: tuple

    @property
    def walkable(self) -> frozenset:
        return frozenset(
            (x, y)
            for x in range(self.width)
            for y in range(self.height)
            if (x, y) not in self.counters
        )

    def is_walkable(self, pos) -> bool:
        x, y = pos
        return 0 <= x < self.width and 0 <= y < self.height and pos not in self.counters

    def neighbors(self, pos):
        x, y = pos
        for dx, dy in MOVES.values():
            n = (x + dx, y + dy)
            if self.is_walkable(n):
                yield n

    def adjacent(self, pos, cell) -> bool:
        return cell is not None and abs(pos[0] - cell[0]) + abs(pos[1] - cell[1]) == 1

    def _reach(self, cell) -> frozenset:
        return frozenset(p for p in self.walkable if self.adjacent(p, cell))

    @cached_property
    def dispenser_reach(self) -> frozenset:
        return self._reach(self.dispenser)

    @cached_property
    def oven_reach(self) -> frozenset:
        return self._reach(self.oven)

    @cached_property
    def delivery_reach(self) -> frozenset:
        return self._reach(self.delivery)

    @cached_property
    def observations(self) -> dict:
        return _static_observations(self)

    @cached_property
    def moves(self) -> dict:
        """``(pos, action) -> pos`` after a move, blocked moves included."""
        table = {}
        for p in self.walkable:
            for a, (dx, dy) in MOVES.items():
                dest = (p[0] + dx, p[1] + dy)
                table[p, int(a)] = dest if self.is_walkable(dest) else p
        return table

    def codes(self) -> np.ndarray:
        grid = np.zeros((self.height, self.width), dtype=np.float32)
        grid[self.dispenser[1], self.dispenser[0]] = CODE_DISPENSER
        grid[self.oven[1], self.oven[0]] = CODE_OVEN
        grid[self.delivery[1], self.delivery[0]] = CODE_DELIVERY
        if self.number_counter is not None:
            grid[self.number_counter[1], self.number_counter[0]] = CODE_NUMBER
        return grid


@lru_cache(maxsize=None)
def make_layout(task: TaskKind) -> GridLayout:
    # The number-counter cell is blocked in both variants so navigation is identical.
    task = TaskKind(task)
    return GridLayout(
        width=WIDTH,
        height=HEIGHT,
        dispenser=DISPENSER,
        oven=OVEN,
        delivery=DELIVERY,
        number_counter=NUMBER_COUNTER if task is TaskKind.DUAL else None,
        counters=frozenset({DISPENSER, OVEN, DELIVERY, NUMBER_COUNTER}),
        start=START,
    )


@dataclass
class EnvState:
    layout: GridLayout
    task: TaskKind
    target: int
    agent_pos: tuple
    carrying: Carrying = Carrying.NOTHING
    oven_cooking: bool = False
    oven_timer: int = 0
    window_remaining: int = 0
    current_number: Optional[int] = None
    step_count: int = 0
    trial_index: int = 0
    rng: np.random.Generator = field(default_factory=lambda: np.random.default_rng(0), repr=False)

    @property
    def window_active(self) -> bool:
        return self.window_remaining > 0

    @property
    def done(self) -> bool:
        return self.step_count >= EPISODE_LEN


@dataclass(slots=True)
class StepResult:
    observation: np.ndarray
    reward: float
    done: bool
    info: dict


def validate_target(target: int, allow_any_target: bool = False) -> int:
    if isinstance(target, bool) or int(target) != target:
        raise ConfigError(f"target duration must be an integer, got {target!r}")
    target = int(target)
    if allow_any_target:
        if target < 1:
            raise ConfigError(f"target duration must be positive, got {target}")
    elif target not in TARGETS:
        raise ConfigError(
            f"target duration {target} outside the experimental range {TARGETS}; "
            "pass allow_any_target=True to override"
        )
    return target


def reset(task, target: int, seed: int, allow_any_target: bool = False):
    """Return a fresh ``(EnvState, observation)`` pair."""
    task = TaskKind(task)
    target = validate_target(target, allow_any_target)
    layout = make_layout(task)
    state = EnvState(
        layout=layout,
        task=task,
        target=target,
        agent_pos=layout.start,
        rng=np.random.default_rng(seed),
    )
    return state, encode_observation(state)


def resolve_interact(state: EnvState) -> InteractOutcome:
    """Apply an ``INTERACT`` to the counter adjacent to the agent.

    Mutates ``state``.  Delivery increments ``trial_index``; the +1 reward
    is accounted for by the caller.
    """
    lay, pos, carrying = state.layout, state.agent_pos, state.carrying
    if carrying is Carrying.NOTHING and pos in lay.dispenser_reach:
        state.carrying = Carrying.ONION
        return InteractOutcome.PICK_ONION
    if pos in lay.oven_reach:
        if not state.oven_cooking:
            if carrying is Carrying.ONION:
                state.carrying = Carrying.NOTHING
                state.oven_cooking = True
                state.oven_timer = 0
                return InteractOutcome.PLACE_ONION
        elif state.oven_timer >= state.target and carrying is Carrying.NOTHING:
            state.carrying = Carrying.SOUP
            state.oven_cooking = False
            return InteractOutcome.TAKE_SOUP
    if carrying is Carrying.SOUP and pos in lay.delivery_reach:
        state.carrying = Carrying.NOTHING
        state.trial_index += 1
        return InteractOutcome.DELIVER
    return InteractOutcome.NOOP


def number_task_step(state: EnvState, action, rng: np.random.Generator):
    """Score one answer of the number-comparison window.

    Returns ``(reward, (remaining, current_number))`` and writes the new
    window state back into ``state``.
    """
    if state.task is not TaskKind.DUAL or not state.window_active:
        raise RuntimeError("number_task_step called while the number window is inactive")
    n = state.current_number
    if not isinstance(action, Action):
        action = Action(action)
    correct = action is (Action.INTERACT if n < 5 else Action.WAIT)
    state.window_remaining -= 1
    state.current_number = int(rng.integers(1, 11)) if state.window_active else None
    return (1.0 if correct else 0.0), (state.window_remaining, state.current_number)


def _static_observations(lay: GridLayout) -> dict:
    """Read-only tensors for every ``(pos, cooking, carrying)``; the number channel is left empty."""
    table = {}
    base = np.zeros(OBS_SHAPE, dtype=np.float32)
    base[0] = lay.codes() / np.float32(4.0)
    for pos in lay.walkable:
        for cooking in (False, True):
            for carrying in Carrying:
                obs = base.copy()
                obs[1, pos[1], pos[0]] = 1.0
                if cooking:
                    obs[2] = 1.0
                if carrying is Carrying.ONION:
                    obs[3] = 1.0
                elif carrying is Carrying.SOUP:
                    obs[4] = 1.0
                obs.flags.writeable = False
                table[pos, cooking, int(carrying)] = obs
    return table


def encode_observation(state: EnvState) -> np.ndarray:
    """Observation tensor ``(6, 3, 5)``; read-only, shared between identical states."""
    lay = state.layout
    obs = lay.observations[state.agent_pos, state.oven_cooking, int(state.carrying)]
    if state.window_remaining > 0 and lay.number_counter is not None:
        obs = obs.copy()
        nx, ny = lay.number_counter
        obs[5, ny, nx] = state.current_number / 10.0
        obs.flags.writeable = False
    return obs


_ACTIONS = tuple(Action)
_INTERACT, _WAIT = int(Action.INTERACT), int(Action.WAIT)


def step(state: EnvState, action) -> StepResult:
    """Advance ``state`` by one time step (in place)."""
    if state.step_count >= EPISODE_LEN:
        raise EpisodeFinished("episode finished; call reset()")
    a = action if type(action) is int and 0 <= action < N_ACTIONS else int(Action(action))
    lay = state.layout
    trial = state.trial_index
    if state.oven_cooking:
        state.oven_timer += 1
        timer = state.oven_timer
    else:
        timer = None
    window_number = state.current_number if state.window_remaining > 0 else None

    reward = 0.0
    outcome = None
    at_oven = False
    if a == _INTERACT:
        at_oven = state.agent_pos in lay.oven_reach
        outcome = resolve_interact(state)
        if outcome is InteractOutcome.DELIVER:
            reward = 1.0
        elif outcome is InteractOutcome.PLACE_ONION:
            timer = 0
    elif a != _WAIT:
        state.agent_pos = lay.moves[state.agent_pos, a]

    correct_number = False
    if window_number is not None:
        r, _ = number_task_step(state, _ACTIONS[a], state.rng)
        correct_number = r > 0
        reward += r

    if outcome is InteractOutcome.PLACE_ONION and state.task is TaskKind.DUAL:
        state.window_remaining = WINDOW_LEN
        state.current_number = int(state.rng.integers(1, 11))

    state.step_count += 1
    info = {
        "step": state.step_count - 1,
        "oven_timer": timer,
        "trial_index": trial,
        "number_value": window_number,
        "delivery_flag": outcome is InteractOutcome.DELIVER,
        "correct_number_flag": correct_number,
        "outcome": outcome,
        "at_oven": at_oven,
        "agent_pos": state.agent_pos,
    }
    return StepResult(encode_observation(state), reward, state.step_count >= EPISODE_LEN, info)


class OvenEnv:
    """Stateful wrapper: ``reset()`` then ``step(action)`` until done."""

    def __init__(self, task, target: int, allow_any_target: bool = False):
        self.task = TaskKind(task)
        self.target = validate_target(target, allow_any_target)
        self.allow_any_target = allow_any_target
        self.state: Optional[EnvState] = None

    def reset(self, seed: int) -> np.ndarray:
        self.state, obs = reset(self.task, self.target, seed, self.allow_any_target)
        return obs

    def step(self, action) -> StepResult:
        if self.state is None:
            raise EpisodeFinished("call reset() before step()")
        return step(self.state, action)


TRACE_COLUMNS = (
    "episode",
    "step",
    "trial",
    "action",
    "oven_timer",
    "number_value",
    "reward",
    "delivery",
    "correct_number",
)


def write_trace_csv(path, rows: Iterable[dict], extra_columns=()) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(TRACE_COLUMNS) + list(extra_columns), lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow(row)
