"""Two-agent gridworld where the team is paid only for simultaneous goal arrival.

Both agents must stand on their own goal cells at the same step for the +10
reward; if exactly one stands on its goal the episode ends with a penalty.
Observations are local: own position and elapsed time, each normalized.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

ACTIONS = ("up", "down", "left", "right", "stay")
N_ACTIONS = len(ACTIONS)
# (dx, dy) per action; y grows downward.
_MOVES = ((0, -1), (0, 1), (-1, 0), (1, 0), (0, 0))


@dataclass(frozen=True)
class GridworldConfig:
    width: int = 7
    height: int = 7
    # Default layout: agents start in opposite corners and must swap.
    starts: tuple | None = None
    goals: tuple | None = None
    penalty_p: float = 2.0
    win_reward: float = 10.0
    t_max: int = 50
    # When true, each observation also carries the other agent's position.
    observe_other: bool = False

    def __post_init__(self):
        if self.width < 1 or self.height < 1 or self.t_max < 1:
            raise ValueError("degenerate grid")
        corners = ((0, 0), (self.width - 1, self.height - 1))
        if self.starts is None:
            object.__setattr__(self, "starts", corners)
        if self.goals is None:
            object.__setattr__(self, "goals", corners[::-1])
        if self.penalty_p < 0:
            raise ValueError("penalty must be non-negative")
        for cells in (self.starts, self.goals):
            for (x, y) in cells:
                if not (0 <= x < self.width and 0 <= y < self.height):
                    raise ValueError("cell outside grid")
        for start, goal in zip(self.starts, self.goals):
            if start == goal:
                raise ValueError("start equals goal")

    @property
    def n_agents(self) -> int:
        return len(self.starts)

    @property
    def obs_dim(self) -> int:
        return 3 + (2 * (self.n_agents - 1) if self.observe_other else 0)

    @property
    def state_dim(self) -> int:
        return 2 * self.n_agents


@dataclass(frozen=True)
class EnvState:
    positions: tuple  # ((x, y), ...) per agent
    t: int


@dataclass
class Transition:
    state: EnvState
    action: tuple  # one action index per agent
    reward: float
    next_state: EnvState
    terminal: bool
    obs: np.ndarray       # observations at state, shape (n_agents, obs_dim)
    next_obs: np.ndarray  # observations at next_state


@dataclass
class Trajectory:
    transitions: list = field(default_factory=list)
    episode_return: float = 0.0  # undiscounted sum of rewards
    desirable: int = 0           # 1 iff episode_return >= the return threshold

    def __len__(self) -> int:
        return len(self.transitions)


def reset(config: GridworldConfig) -> EnvState:
    return EnvState(positions=tuple(config.starts), t=0)


def observations(config: GridworldConfig, state: EnvState) -> np.ndarray:
    """Per-agent observation: (x/width, y/height, t/t_max), optionally others' cells."""
    obs = np.zeros((config.n_agents, config.obs_dim), dtype=np.float64)
    for i, (x, y) in enumerate(state.positions):
        obs[i, 0] = x / config.width
        obs[i, 1] = y / config.height
        obs[i, 2] = state.t / config.t_max
        if config.observe_other:
            col = 3
            for j, (ox, oy) in enumerate(state.positions):
                if j == i:
                    continue
                obs[i, col] = ox / config.width
                obs[i, col + 1] = oy / config.height
                col += 2
    return obs


def state_vector(config: GridworldConfig, state: EnvState) -> np.ndarray:
    """Global state as normalized cell coordinates of every agent."""
    out = np.zeros(config.state_dim, dtype=np.float64)
    for i, (x, y) in enumerate(state.positions):
        out[2 * i] = x / config.width
        out[2 * i + 1] = y / config.height
    return out


def step(config: GridworldConfig, state: EnvState, action: tuple) -> tuple:
    """Advance one step. Returns (next_state, reward, terminal).

    Moves off the grid are clamped to the boundary. Stepping a terminal
    state is a caller bug and raises.
    """
    if state.t >= config.t_max:
        raise ValueError("step on a terminal state")
    if len(action) != config.n_agents:
        raise ValueError("one action per agent required")
    new_positions = []
    for (x, y), a in zip(state.positions, action):
        dx, dy = _MOVES[a]
        nx = min(max(x + dx, 0), config.width - 1)
        ny = min(max(y + dy, 0), config.height - 1)
        new_positions.append((nx, ny))
    t_next = state.t + 1
    next_state = EnvState(positions=tuple(new_positions), t=t_next)

    on_goal = [pos == goal for pos, goal in zip(new_positions, config.goals)]
    if all(on_goal):
        return next_state, config.win_reward, True
    if any(on_goal):
        return next_state, -config.penalty_p, True
    return next_state, 0.0, t_next >= config.t_max


def label_desirability(episode_return: float, return_threshold: float) -> int:
    """1 iff the undiscounted episode return reaches the threshold."""
    return 1 if episode_return >= return_threshold else 0
