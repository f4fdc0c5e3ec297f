"""MultiRoom gridworld: procedural layouts, transitions, egocentric views.

The layout generator follows the MiniGrid MultiRoom recipe: rooms are
chained by a random walk, each new room sharing one wall (and one door)
with the previous room. Coordinates are (row, col); headings use the
MiniGrid order east=0, south=1, west=2, north=3 so that turning right is
``(d + 1) % 4``.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from enum import IntEnum
from typing import List, Optional, Tuple

import numpy as np

GRID_SIZE = 25
VIEW = 7

COLORS = ("red", "green", "blue", "purple", "yellow", "grey")
RED, GREEN, BLUE, PURPLE, YELLOW, GREY = range(6)


class Kind(IntEnum):
    UNSEEN = 0
    EMPTY = 1
    WALL = 2
    DOOR = 3
    GOAL = 4


class DoorState(IntEnum):
    NONE = 0
    OPEN = 1
    CLOSED = 2


class Heading(IntEnum):
    EAST = 0
    SOUTH = 1
    WEST = 2
    NORTH = 3


class Action(IntEnum):
    LEFT = 0
    RIGHT = 1
    FORWARD = 2
    PICKUP = 3
    DROP = 4
    TOGGLE = 5
    DONE = 6


N_ACTIONS = len(Action)
N_KINDS = len(Kind)
N_COLORS = len(COLORS)
N_STATES = len(DoorState)

# (drow, dcol) per heading
DIR_VEC = np.array([(0, 1), (1, 0), (0, -1), (-1, 0)])


@dataclass(frozen=True)
class EnvConfig:
    n_rooms: int = 2
    s_room: int = 4
    seed: int = 0

    def __post_init__(self):
        if self.n_rooms < 2:
            raise ValueError(f"n_rooms must be >= 2, got {self.n_rooms}")
        if self.s_room < 4:
            raise ValueError(f"s_room must be >= 4, got {self.s_room}")

    @property
    def t_max(self) -> int:
        return 20 * self.s_room

    @property
    def name(self) -> str:
        return f"MultiRoom-N{self.n_rooms}-S{self.s_room}"


ENV_NAMES = {
    "MultiRoom-N2-S4": (2, 4),
    "MultiRoom-N4-S5": (4, 5),
}


def env_config(name: str, seed: int = 0) -> EnvConfig:
    if name not in ENV_NAMES:
        raise ValueError(f"unknown environment {name!r}; choose from {sorted(ENV_NAMES)}")
    n, s = ENV_NAMES[name]
    return EnvConfig(n, s, seed)


@dataclass(frozen=True)
class Room:
    top: Tuple[int, int]   # (row, col) of the top-left wall cell
    size: Tuple[int, int]  # (rows, cols) including walls
    entry_door: Optional[Tuple[int, int]]

    def contains(self, r: int, c: int) -> bool:
        return (self.top[0] <= r < self.top[0] + self.size[0]
                and self.top[1] <= c < self.top[1] + self.size[1])

    def interior(self):
        r0, c0 = self.top
        for r in range(r0 + 1, r0 + self.size[0] - 1):
            for c in range(c0 + 1, c0 + self.size[1] - 1):
                yield r, c


@dataclass(frozen=True)
class WorldState:
    kind: np.ndarray     # (H, W) Kind codes
    color: np.ndarray    # (H, W) color codes
    door: np.ndarray     # (H, W) DoorState codes
    agent: Tuple[int, int]
    heading: int
    t: int
    t_max: int
    rooms: Tuple[Room, ...]
    goal: Tuple[int, int]
    terminated: bool = False
    # (H + 2*VIEW, W + 2*VIEW, 3) wall-padded stack of the three layers, for observe()
    cells: Optional[np.ndarray] = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        if self.cells is None:
            pad = np.stack([self.kind, self.color, self.door], axis=-1).astype(np.int64)
            pad = np.pad(pad, ((VIEW, VIEW), (VIEW, VIEW), (0, 0)), constant_values=0)
            pad[:VIEW, :, 0] = pad[-VIEW:, :, 0] = Kind.WALL
            pad[:, :VIEW, 0] = pad[:, -VIEW:, 0] = Kind.WALL
            pad[:VIEW, :, 1] = pad[-VIEW:, :, 1] = GREY
            pad[:, :VIEW, 1] = pad[:, -VIEW:, 1] = GREY
            pad.flags.writeable = False
            object.__setattr__(self, "cells", pad)

    @property
    def height(self) -> int:
        return self.kind.shape[0]

    @property
    def width(self) -> int:
        return self.kind.shape[1]

    def front(self) -> Tuple[int, int]:
        dr, dc = DIR_VEC[self.heading]
        return self.agent[0] + int(dr), self.agent[1] + int(dc)

    def doors(self) -> List[Tuple[int, int]]:
        rows, cols = np.nonzero(self.kind == Kind.DOOR)
        return list(zip(rows.tolist(), cols.tolist()))

    def same_as(self, other: "WorldState") -> bool:
        return (np.array_equal(self.kind, other.kind) and np.array_equal(self.color, other.color)
                and np.array_equal(self.door, other.door) and self.agent == other.agent
                and self.heading == other.heading and self.t == other.t and self.rooms == other.rooms
                and self.goal == other.goal and self.terminated == other.terminated)


# ---------------------------------------------------------------------------
# generation


def _place_rooms(rng, num_left, rooms, min_sz, max_sz, entry_wall, entry_pos, width, height) -> bool:
    # MiniGrid works in (x, y); entry_pos is (x, y) here.
    size_x = int(rng.integers(min_sz, max_sz + 1))
    size_y = int(rng.integers(min_sz, max_sz + 1))
    x, y = entry_pos
    if not rooms:
        top_x, top_y = x, y
    elif entry_wall == 0:
        top_x = x - size_x + 1
        top_y = int(rng.integers(y - size_y + 2, y))
    elif entry_wall == 1:
        top_x = int(rng.integers(x - size_x + 2, x))
        top_y = y - size_y + 1
    elif entry_wall == 2:
        top_x = x
        top_y = int(rng.integers(y - size_y + 2, y))
    else:
        top_x = int(rng.integers(x - size_x + 2, x))
        top_y = y
    if top_x < 0 or top_y < 0:
        return False
    if top_x + size_x > width or top_y + size_y >= height:
        return False
    for room in rooms[:-1]:
        rx, ry, rsx, rsy = room[0], room[1], room[2], room[3]
        non_overlap = (top_x + size_x < rx or rx + rsx <= top_x
                       or top_y + size_y < ry or ry + rsy <= top_y)
        if not non_overlap:
            return False
    rooms.append((top_x, top_y, size_x, size_y, entry_pos))
    if num_left == 1:
        return True
    for _ in range(8):
        exit_wall = int(rng.choice(sorted({0, 1, 2, 3} - {entry_wall})))
        next_entry = (exit_wall + 2) % 4
        if exit_wall == 0:
            exit_pos = (top_x + size_x - 1, top_y + int(rng.integers(1, size_y - 1)))
        elif exit_wall == 1:
            exit_pos = (top_x + int(rng.integers(1, size_x - 1)), top_y + size_y - 1)
        elif exit_wall == 2:
            exit_pos = (top_x, top_y + int(rng.integers(1, size_y - 1)))
        else:
            exit_pos = (top_x + int(rng.integers(1, size_x - 1)), top_y)
        if _place_rooms(rng, num_left - 1, rooms, min_sz, max_sz, next_entry, exit_pos, width, height):
            break
    return True


def generate(cfg: EnvConfig, rng: Optional[np.random.Generator] = None,
             size: int = GRID_SIZE, max_attempts: int = 10_000) -> WorldState:
    """Lay out ``cfg.n_rooms`` chained rooms, doors closed, goal in the last room."""
    if rng is None:
        rng = np.random.default_rng(cfg.seed)
    best: list = []
    for _ in range(max_attempts):
        cur: list = []
        entry = (int(rng.integers(0, size - 2)), int(rng.integers(0, size - 2)))
        _place_rooms(rng, cfg.n_rooms, cur, 4, cfg.s_room, 2, entry, size, size)
        if len(cur) > len(best):
            best = cur
        if len(best) >= cfg.n_rooms:
            break
    else:
        raise RuntimeError(f"could not place {cfg.n_rooms} rooms in {max_attempts} attempts")

    kind = np.full((size, size), Kind.EMPTY, dtype=np.int8)
    color = np.zeros((size, size), dtype=np.int8)
    door = np.zeros((size, size), dtype=np.int8)
    rooms = []
    prev_color = None
    for idx, (tx, ty, sx, sy, entry) in enumerate(best):
        kind[ty, tx:tx + sx] = Kind.WALL
        kind[ty + sy - 1, tx:tx + sx] = Kind.WALL
        kind[ty:ty + sy, tx] = Kind.WALL
        kind[ty:ty + sy, tx + sx - 1] = Kind.WALL
        color[ty, tx:tx + sx] = GREY
        color[ty + sy - 1, tx:tx + sx] = GREY
        color[ty:ty + sy, tx] = GREY
        color[ty:ty + sy, tx + sx - 1] = GREY
        door_rc = None
        if idx > 0:
            choices = [c for c in range(N_COLORS) if c != prev_color]
            c = int(rng.choice(choices))
            door_rc = (entry[1], entry[0])
            kind[door_rc] = Kind.DOOR
            color[door_rc] = c
            door[door_rc] = DoorState.CLOSED
            prev_color = c
        rooms.append(Room((ty, tx), (sy, sx), door_rc))

    def free_cell(room: Room) -> Tuple[int, int]:
        cells = [rc for rc in room.interior() if kind[rc] == Kind.EMPTY]
        return cells[int(rng.integers(len(cells)))]

    agent = free_cell(rooms[0])
    heading = int(rng.integers(4))
    goal = free_cell(rooms[-1])
    kind[goal] = Kind.GOAL
    color[goal] = GREEN
    for a in (kind, color, door):
        a.flags.writeable = False
    return WorldState(kind, color, door, agent, heading, 0, cfg.t_max, tuple(rooms), goal)


# ---------------------------------------------------------------------------
# dynamics


class EpisodeOver(RuntimeError):
    pass


def goal_reward(t: int, t_max: int) -> float:
    return 1.0 - 0.9 * (t / t_max)


def step(state: WorldState, action: int) -> Tuple[WorldState, float, bool]:
    """Apply one action; returns (next state, environment reward, terminated)."""
    if state.terminated:
        raise EpisodeOver("step() called on a terminated episode")
    action = Action(action)
    t = state.t + 1
    agent, heading, door = state.agent, state.heading, state.door
    reward, done = 0.0, False
    fr, fc = state.front()
    inside = 0 <= fr < state.height and 0 <= fc < state.width
    if action == Action.LEFT:
        heading = (heading - 1) % 4
    elif action == Action.RIGHT:
        heading = (heading + 1) % 4
    elif action == Action.FORWARD and inside:
        k = state.kind[fr, fc]
        if k == Kind.EMPTY or (k == Kind.DOOR and state.door[fr, fc] == DoorState.OPEN):
            agent = (fr, fc)
        elif k == Kind.GOAL:
            agent = (fr, fc)
            reward, done = goal_reward(t, state.t_max), True
    elif action == Action.TOGGLE and inside and state.kind[fr, fc] == Kind.DOOR:
        door = state.door.copy()
        door[fr, fc] = DoorState.CLOSED if door[fr, fc] == DoorState.OPEN else DoorState.OPEN
        door.flags.writeable = False
    if t >= state.t_max:
        done = True
    cells = state.cells if door is state.door else None
    nxt = dataclasses.replace(state, agent=agent, heading=heading, door=door, t=t, terminated=done,
                              cells=cells)
    return nxt, reward, done


# ---------------------------------------------------------------------------
# observation


def _view_offsets():
    # view cell (vr, vc), agent at (VIEW-1, VIEW//2) facing up
    vr, vc = np.mgrid[0:VIEW, 0:VIEW]
    fwd = (VIEW - 1) - vr
    right = vc - VIEW // 2
    rows, cols = [], []
    for d in range(4):
        f, r = DIR_VEC[d], DIR_VEC[(d + 1) % 4]
        rows.append(fwd * f[0] + right * r[0])
        cols.append(fwd * f[1] + right * r[1])
    return np.stack(rows), np.stack(cols)


_OFF_R, _OFF_C = _view_offsets()
_WALL, _DOOR, _CLOSED = int(Kind.WALL), int(Kind.DOOR), int(DoorState.CLOSED)


def _visibility(opaque: np.ndarray) -> np.ndarray:
    key = np.packbits(opaque).tobytes()
    mask = _VIS_CACHE.get(key)
    if mask is None:
        if len(_VIS_CACHE) > 200_000:
            _VIS_CACHE.clear()
        mask = _VIS_CACHE[key] = _propagate_visibility(opaque)
    return mask


_VIS_CACHE: dict = {}


def _propagate_visibility(opaque: np.ndarray) -> np.ndarray:
    """MiniGrid's forward-propagating visibility mask over the view."""
    mask = np.zeros((VIEW, VIEW), dtype=bool)
    mask[VIEW - 1, VIEW // 2] = True
    for j in range(VIEW - 1, -1, -1):
        for i in range(VIEW - 1):
            if not mask[j, i] or opaque[j, i]:
                continue
            mask[j, i + 1] = True
            if j > 0:
                mask[j - 1, i + 1] = True
                mask[j - 1, i] = True
        for i in range(VIEW - 1, 0, -1):
            if not mask[j, i] or opaque[j, i]:
                continue
            mask[j, i - 1] = True
            if j > 0:
                mask[j - 1, i - 1] = True
                mask[j - 1, i] = True
    return mask


def observe(state: WorldState) -> np.ndarray:
    """Egocentric (7, 7, 3) view: kind, color, door-state codes; occluded cells UNSEEN."""
    rows = state.agent[0] + VIEW + _OFF_R[state.heading]
    cols = state.agent[1] + VIEW + _OFF_C[state.heading]
    raw = state.cells[rows, cols]
    kind = raw[..., 0]
    opaque = (kind == _WALL) | ((kind == _DOOR) & (raw[..., 2] == _CLOSED))
    obs = raw * _visibility(opaque)[..., None]  # UNSEEN is the all-zero code
    return obs


def bfs_reachable(state: WorldState, target: Tuple[int, int], doors_open: bool = True) -> bool:
    from collections import deque

    seen = {state.agent}
    queue = deque([state.agent])
    while queue:
        r, c = queue.popleft()
        if (r, c) == target:
            return True
        for dr, dc in DIR_VEC:
            nr, nc = r + int(dr), c + int(dc)
            if not (0 <= nr < state.height and 0 <= nc < state.width) or (nr, nc) in seen:
                continue
            k = state.kind[nr, nc]
            if k == Kind.WALL or (k == Kind.DOOR and not doors_open and state.door[nr, nc] != DoorState.OPEN):
                continue
            seen.add((nr, nc))
            queue.append((nr, nc))
    return False


_ARROWS = {Heading.EAST: ">", Heading.SOUTH: "v", Heading.WEST: "<", Heading.NORTH: "^"}


def render_ascii(state: WorldState, crop: bool = True) -> str:
    """One char per cell: '#' wall, '*' goal, door colour initial (upper closed,
    lower open), agent as an arrow, '.' empty."""
    chars = np.full(state.kind.shape, ".", dtype="<U1")
    chars[state.kind == Kind.WALL] = "#"
    chars[state.kind == Kind.GOAL] = "*"
    for r, c in state.doors():
        ch = COLORS[state.color[r, c]][0]
        if COLORS[state.color[r, c]] == "grey":
            ch = "e"
        chars[r, c] = ch.upper() if state.door[r, c] == DoorState.CLOSED else ch
    chars[state.agent] = _ARROWS[Heading(state.heading)]
    if crop:
        rows, cols = np.nonzero(state.kind != Kind.EMPTY)
        chars = chars[rows.min():rows.max() + 1, cols.min():cols.max() + 1]
    return "\n".join("".join(row) for row in chars)
