"""Optimal-throughput oracle and a scripted policy for the oven gridworld.

``max_soups`` runs backward induction over the time-expanded state graph
with its own transition model (it does not call into ``env``), so it can
be used to check both the simulator rules and the scripted policy.
"""

from __future__ import annotations

from collections import deque
from functools import lru_cache

from .env import (
    EPISODE_LEN,
    MOVES,
    Action,
    Carrying,
    EnvState,
    GridLayout,
    TaskKind,
    make_layout,
)


def bfs_distances(layout: GridLayout, goals) -> dict:
    """Shortest walkable distance from every walkable cell to any goal cell."""
    dist = {g: 0 for g in goals}
    queue = deque(goals)
    while queue:
        cur = queue.popleft()
        for n in layout.neighbors(cur):
            if n not in dist:
                dist[n] = dist[cur] + 1
                queue.append(n)
    return dist


def cells_adjacent_to(layout: GridLayout, cell) -> list:
    return sorted(p for p in layout.walkable if layout.adjacent(p, cell))


@lru_cache(maxsize=None)
def max_soups(task, target: int, episode_len: int = EPISODE_LEN) -> int:
    """Maximum deliveries achievable in one episode."""
    lay = make_layout(TaskKind(task))
    cells = sorted(lay.walkable)
    # oven state: -1 off, else timer capped at target
    ovens = [-1] + list(range(target + 1))
    states = [(p, c, o) for p in cells for c in (0, 1, 2) for o in ovens]

    def transition(s, a):
        pos, carry, oven = s
        if oven >= 0:
            oven = min(oven + 1, target)
        gain = 0
        if a in MOVES:
            dx, dy = MOVES[a]
            dest = (pos[0] + dx, pos[1] + dy)
            if lay.is_walkable(dest):
                pos = dest
        elif a is Action.INTERACT:
            if lay.adjacent(pos, lay.dispenser) and carry == 0:
                carry = 1
            elif lay.adjacent(pos, lay.oven) and oven < 0 and carry == 1:
                carry, oven = 0, 0
            elif lay.adjacent(pos, lay.oven) and oven >= target and carry == 0:
                carry, oven = 2, -1
            elif lay.adjacent(pos, lay.delivery) and carry == 2:
                carry, gain = 0, 1
        return (pos, carry, oven), gain

    value = {s: 0 for s in states}
    for _ in range(episode_len):
        value = {
            s: max(g + value[n] for n, g in (transition(s, a) for a in Action))
            for s in states
        }
    return value[(lay.start, 0, -1)]


class ScriptedPolicy:
    """Hand-written shortest-route policy with perfect knowledge of the oven timer.

    In the dual task it answers every number correctly while standing next to
    the oven.
    """

    def __init__(self, task):
        self.layout = make_layout(TaskKind(task))
        lay = self.layout
        self.to_dispenser = bfs_distances(lay, cells_adjacent_to(lay, lay.dispenser))
        self.to_delivery = bfs_distances(lay, cells_adjacent_to(lay, lay.delivery))
        oven_cells = cells_adjacent_to(lay, lay.oven)
        # wait at the oven cell closest to the delivery counter
        best = min(self.to_delivery[c] for c in oven_cells)
        self.to_oven = bfs_distances(lay, [c for c in oven_cells if self.to_delivery[c] == best])

    def _toward(self, pos, dist) -> Action:
        for a, (dx, dy) in MOVES.items():
            n = (pos[0] + dx, pos[1] + dy)
            if self.layout.is_walkable(n) and dist.get(n, 1 << 30) < dist[pos]:
                return a
        raise RuntimeError(f"no route from {pos}")

    def __call__(self, state: EnvState) -> Action:
        if state.window_active:
            return Action.INTERACT if state.current_number < 5 else Action.WAIT
        pos = state.agent_pos
        if state.carrying is Carrying.SOUP:
            dist = self.to_delivery
        elif state.carrying is Carrying.ONION or state.oven_cooking:
            dist = self.to_oven
        else:
            dist = self.to_dispenser
        if dist[pos] > 0:
            return self._toward(pos, dist)
        if state.carrying is Carrying.NOTHING and state.oven_cooking:
            return Action.INTERACT if state.oven_timer + 1 >= state.target else Action.WAIT
        return Action.INTERACT
