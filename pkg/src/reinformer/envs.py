"""Deterministic toy environments and their offline dataset generators.

`GridMaze` is a discrete stitching testbed: the offline data holds one
zero-return route from the start to a dead end and one unit-return route to
the goal from elsewhere, overlapping at a single intersection, so reaching
the goal from the start requires composing the two. `LineWorld` is a dense
continuous-control task for the Gaussian policy head. Generators roll
scripted behavior through the environment itself, so replaying a stored
action sequence reproduces the stored states and rewards exactly.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable

import numpy as np

from .data import Trajectory
from .errors import ConfigError, ContractError

UP, DOWN, LEFT, RIGHT = 0, 1, 2, 3
MOVES = {UP: (0, -1), DOWN: (0, 1), LEFT: (-1, 0), RIGHT: (1, 0)}
ACTION_NAMES = {UP: "up", DOWN: "down", LEFT: "left", RIGHT: "right"}

# '#' wall, '.' floor, 'S' start, 'B' boom (absorbing, reward -1),
# 'G' goal (absorbing, reward +1), 'X' decoy dead end (plain floor).
#
# The failing route runs S -> intersection (2,2) -> up to X; the succeeding
# route runs X -> down through the intersection -> right and down to G. The
# two routes traverse the middle column in opposite directions, so the
# demonstrated action on those shared cells is determined by the return
# conditioning alone. The boom sits below the S corridor: following the
# high-return route's opening moves from the start walks into it.
DEFAULT_MAZE_LAYOUT = """\
##X##
##.##
S....
#B##.
####G
"""


@dataclass
class EnvStep:
    next_state: np.ndarray
    reward: float
    done: bool


class GridMaze:
    """Deterministic gridworld with one-hot cell observations.

    Moves into walls or off the grid leave the agent in place with reward 0.
    Entering the boom ends the episode with reward -1, entering the goal with
    reward +1, and entering the decoy dead end ends it with reward 0; every
    other reward is 0. Episodes truncate at `step_limit`.
    """

    def __init__(self, layout: str = DEFAULT_MAZE_LAYOUT, step_limit: int = 30):
        rows = [r for r in layout.splitlines() if r]
        if not rows or any(len(r) != len(rows[0]) for r in rows):
            raise ConfigError("maze layout rows must be nonempty and equal length")
        self.height = len(rows)
        self.width = len(rows[0])
        self.step_limit = step_limit
        self.walls: set[tuple[int, int]] = set()
        self.start = self.goal = self.boom = self.decoy = None
        for y, row in enumerate(rows):
            for x, ch in enumerate(row):
                cell = (x, y)
                if ch == "#":
                    self.walls.add(cell)
                elif ch == "S":
                    self.start = cell
                elif ch == "G":
                    self.goal = cell
                elif ch == "B":
                    self.boom = cell
                elif ch == "X":
                    self.decoy = cell
                elif ch != ".":
                    raise ConfigError(f"unknown maze layout character {ch!r}")
        if self.start is None or self.goal is None:
            raise ConfigError("maze layout needs exactly one start 'S' and one goal 'G'")
        self.intersection = self._find_intersection()
        self._pos: tuple[int, int] | None = None
        self._steps = 0
        self._done = True
        self.succeeded = False

    # -- topology -----------------------------------------------------------

    def in_bounds(self, cell) -> bool:
        x, y = cell
        return 0 <= x < self.width and 0 <= y < self.height

    def is_floor(self, cell) -> bool:
        return self.in_bounds(cell) and cell not in self.walls

    def floor_neighbors(self, cell) -> list[tuple[int, int]]:
        out = []
        for dx, dy in MOVES.values():
            nxt = (cell[0] + dx, cell[1] + dy)
            if self.is_floor(nxt):
                out.append(nxt)
        return out

    @property
    def absorbing(self) -> set:
        return {c for c in (self.boom, self.goal, self.decoy) if c is not None}

    def _find_intersection(self) -> tuple[int, int] | None:
        # The branch point of the corridors: a non-absorbing floor cell with
        # three or more non-absorbing floor neighbors.
        absorbing = self.absorbing
        for y in range(self.height):
            for x in range(self.width):
                cell = (x, y)
                if not self.is_floor(cell) or cell in absorbing:
                    continue
                n = [c for c in self.floor_neighbors(cell) if c not in absorbing]
                if len(n) >= 3:
                    return cell
        return None

    def shortest_path(self, src, dst) -> list[tuple[int, int]] | None:
        """BFS path over floor cells, never routing through absorbing cells."""
        blocked = self.absorbing - {src, dst}
        frontier = [src]
        came: dict = {src: None}
        while frontier:
            nxt = []
            for cell in frontier:
                if cell == dst:
                    path = [cell]
                    while came[path[-1]] is not None:
                        path.append(came[path[-1]])
                    return path[::-1]
                for nb in self.floor_neighbors(cell):
                    if nb in came or nb in blocked:
                        continue
                    came[nb] = cell
                    nxt.append(nb)
            frontier = nxt
        return None

    # -- dynamics -----------------------------------------------------------

    @property
    def state_dim(self) -> int:
        return self.width * self.height

    @property
    def n_actions(self) -> int:
        return 4

    def cell_state(self, cell) -> np.ndarray:
        state = np.zeros(self.state_dim)
        state[cell[1] * self.width + cell[0]] = 1.0
        return state

    def state_cell(self, state: np.ndarray) -> tuple[int, int]:
        idx = int(np.argmax(state))
        return (idx % self.width, idx // self.width)

    def reset(self, rng: np.random.Generator | None = None,
              start: tuple[int, int] | None = None) -> np.ndarray:
        del rng  # maze resets are deterministic
        cell = self.start if start is None else tuple(start)
        if not self.is_floor(cell):
            raise ContractError(f"cannot reset onto non-floor cell {cell}")
        self._pos = cell
        self._steps = 0
        self._done = False
        self.succeeded = False
        return self.cell_state(cell)

    @property
    def done(self) -> bool:
        return self._done

    def step(self, action: int) -> EnvStep:
        if self._done:
            raise ContractError("step called on a finished episode")
        if action not in MOVES:
            raise ContractError(f"unknown action id {action}")
        dx, dy = MOVES[action]
        target = (self._pos[0] + dx, self._pos[1] + dy)
        if self.is_floor(target):
            self._pos = target
        self._steps += 1
        reward = 0.0
        if self._pos == self.boom:
            reward = -1.0
            self._done = True
        elif self._pos == self.goal:
            reward = 1.0
            self._done = True
            self.succeeded = True
        elif self._pos == self.decoy:
            self._done = True
        elif self._steps >= self.step_limit:
            self._done = True
        return EnvStep(self.cell_state(self._pos), reward, self._done)


def _route_actions(path: list[tuple[int, int]]) -> list[int]:
    actions = []
    for (x0, y0), (x1, y1) in zip(path, path[1:]):
        delta = (x1 - x0, y1 - y0)
        for action, move in MOVES.items():
            if move == delta:
                actions.append(action)
                break
        else:
            raise ContractError(f"cells {x0, y0} -> {x1, y1} are not adjacent")
    return actions


def _rollout_scripted(env: GridMaze, start, actions: Iterable[int]) -> Trajectory:
    states = [env.reset(start=start)]
    rewards = []
    taken = []
    for action in actions:
        step = env.step(action)
        states.append(step.next_state)
        rewards.append(step.reward)
        taken.append(action)
        if step.done:
            break
    return Trajectory(states=np.stack(states), actions=np.array(taken, dtype=np.int64),
                      rewards=np.array(rewards), terminated=env._pos in env.absorbing)


def stitch_routes(maze: GridMaze) -> tuple[list, list]:
    """The two behavior routes: start -> decoy, and far cell -> goal.

    Both pass the intersection; neither contains both the start and the goal.
    """
    if maze.decoy is None or maze.intersection is None:
        raise ConfigError("stitch generation needs a decoy cell and an intersection")
    fail_route = maze.shortest_path(maze.start, maze.decoy)
    if fail_route is None or maze.intersection not in fail_route:
        raise ConfigError("no start -> decoy route through the intersection")
    best = None
    for y in range(maze.height):
        for x in range(maze.width):
            cell = (x, y)
            if not maze.is_floor(cell) or cell in (maze.start, maze.boom, maze.goal):
                continue
            path = maze.shortest_path(cell, maze.goal)
            if path is None or maze.intersection not in path or maze.start in path:
                continue
            if best is None or len(path) > len(best):
                best = path
    if best is None:
        raise ConfigError("no goal route through the intersection that avoids the start")
    return fail_route, best


def gen_stitch_dataset(maze: GridMaze, n_copies: int,
                       rng: np.random.Generator | None = None,
                       noise: float | None = None) -> list[Trajectory]:
    """n_copies each of the zero-return and unit-return routes.

    With `noise` in (0, 1], each emitted copy is replaced with that
    probability by a suffix of its route starting at or before the
    intersection, which diversifies contexts without changing the return
    multiset or the intersection coverage.
    """
    if n_copies < 1:
        raise ContractError(f"need at least one copy per route, got {n_copies}")
    if noise is not None and rng is None:
        raise ContractError("suffix noise requires an rng")
    dataset = []
    for route in stitch_routes(maze):
        cut = route.index(maze.intersection)
        for _ in range(n_copies):
            start = 0
            if noise and rng.random() < noise and cut >= 1:
                start = int(rng.integers(1, cut + 1))
            dataset.append(_rollout_scripted(maze, route[start],
                                             _route_actions(route[start:])))
    return dataset


class LineWorld:
    """1-D continuous control: move a point toward a fixed target.

    Actions are displacements clipped to [-action_limit, action_limit], the
    position is clamped to [-1, 1], and each step pays
    -(distance to target) + reward_shift. Episodes run exactly `horizon`
    steps.
    """

    def __init__(self, target: float = 0.0, horizon: int = 40,
                 action_limit: float = 0.2, reward_shift: float = 0.0):
        self.target = target
        self.horizon = horizon
        self.action_limit = action_limit
        self.reward_shift = reward_shift
        self._pos = 0.0
        self._steps = 0
        self._done = True
        self.succeeded = False

    state_dim = 1
    action_dim = 1

    @property
    def step_limit(self) -> int:
        return self.horizon

    @property
    def done(self) -> bool:
        return self._done

    @property
    def position(self) -> float:
        return self._pos

    def reset(self, rng: np.random.Generator | None = None,
              start: float | None = None) -> np.ndarray:
        if start is not None:
            self._pos = float(start)
        elif rng is not None:
            self._pos = float(rng.uniform(-1.0, 1.0))
        else:
            self._pos = -0.8
        self._steps = 0
        self._done = False
        self.succeeded = False
        return np.array([self._pos])

    def step(self, action) -> EnvStep:
        if self._done:
            raise ContractError("step called on a finished episode")
        a = float(np.clip(np.asarray(action, dtype=np.float64).reshape(-1)[0],
                          -self.action_limit, self.action_limit))
        self._pos = float(np.clip(self._pos + a, -1.0, 1.0))
        self._steps += 1
        reward = -abs(self._pos - self.target) + self.reward_shift
        if self._steps >= self.horizon:
            self._done = True
            self.succeeded = abs(self._pos - self.target) <= 0.1
        return EnvStep(np.array([self._pos]), reward, self._done)


def scripted_line_controller(strength: str):
    """Proportional controllers of graded quality with Gaussian jitter."""
    gain, jitter = {"strong": (0.6, 0.09), "weak": (0.15, 0.15)}[strength]

    def act(pos: float, target: float, rng: np.random.Generator) -> float:
        return gain * (target - pos) + jitter * rng.normal()

    return act


def gen_lineworld_dataset(env: LineWorld, episodes: int,
                          rng: np.random.Generator) -> list[Trajectory]:
    """Half strong, half weak scripted episodes from random starts."""
    if episodes < 1:
        raise ContractError(f"need at least one episode, got {episodes}")
    dataset = []
    for ep in range(episodes):
        controller = scripted_line_controller("strong" if ep % 2 == 0 else "weak")
        states = [env.reset(rng=rng)]
        actions, rewards = [], []
        while not env.done:
            raw = controller(env.position, env.target, rng)
            executed = float(np.clip(raw, -env.action_limit, env.action_limit))
            step = env.step(executed)
            states.append(step.next_state)
            actions.append([executed])
            rewards.append(step.reward)
        dataset.append(Trajectory(states=np.stack(states), actions=np.array(actions),
                                  rewards=np.array(rewards), terminated=False))
    return dataset
