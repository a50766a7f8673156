"""Cooperative stochastic matrix games.

Environments follow a small Dec-POMDP contract: K agents act jointly, the
team receives one shared reward, each agent sees only its own observation,
and a global state identifier stays queryable for centralized training.

The flagship instance is the stochastic two-step game: agent 1's first
action selects one of two payoff matrices, the second joint action draws a
normally distributed team reward and ends the episode.  Arbitrary games of
this family load from a small text format (see load_matrix_game).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from importlib import resources
from typing import Sequence

import numpy as np

__all__ = [
    "GameConfigError",
    "EnvError",
    "TERMINAL",
    "DecPomdp",
    "StochasticMatrixGameConfig",
    "MatrixGame",
    "Transition",
    "EpisodeRecord",
    "parse_game_config",
    "load_matrix_game",
    "load_matrix_game_file",
    "two_step_game",
    "two_step_config",
    "preset_path",
]

TERMINAL = "terminal"


class GameConfigError(ValueError):
    """A matrix-game config is malformed or incomplete."""


class EnvError(RuntimeError):
    """Illegal interaction with an environment (bad action, stepping after
    the episode ended)."""


class DecPomdp:
    """Contract for cooperative multi-agent environments.

    Implementations provide: num_agents, action_counts (per-agent action
    set sizes), obs_dim, horizon, gamma, reset(rng) -> joint observation,
    step(joint_action, rng) -> (reward, next joint observation, terminal),
    and a queryable global `state` identifier at every step.
    """

    num_agents: int
    action_counts: tuple[int, ...]
    obs_dim: int
    horizon: int
    gamma: float

    def reset(self, rng=None) -> np.ndarray:
        raise NotImplementedError

    def step(self, joint_action: Sequence[int], rng) -> tuple[float, np.ndarray, bool]:
        raise NotImplementedError

    @property
    def state(self) -> str:
        raise NotImplementedError


JointAction = tuple[str, ...]


@dataclass(frozen=True)
class StochasticMatrixGameConfig:
    """Declarative form of a stochastic matrix game.

    transitions map (state, joint action labels) to a next state or
    TERMINAL; payoffs map the same keys to Normal(mu, sigma2) reward
    parameters.  Every joint action of every state needs both entries.
    """

    states: tuple[str, ...]
    initial: str
    actions: tuple[tuple[str, ...], ...]
    transitions: dict[tuple[str, JointAction], str]
    payoffs: dict[tuple[str, JointAction], tuple[float, float]]
    gamma: float = 0.99
    horizon: int = 100
    name: str = "matrix_game"

    def __post_init__(self):
        if len(self.states) < 1:
            raise GameConfigError("config declares no states")
        if len(set(self.states)) != len(self.states):
            raise GameConfigError("duplicate state names")
        if self.initial not in self.states:
            raise GameConfigError(f"initial state '{self.initial}' is not a declared state")
        if len(self.actions) < 1:
            raise GameConfigError("config declares no agents")
        for k, labels in enumerate(self.actions):
            if len(labels) < 1 or len(set(labels)) != len(labels):
                raise GameConfigError(f"agent {k + 1} has an empty or duplicated action set")
        if not 0.0 < self.gamma <= 1.0:
            raise GameConfigError(f"gamma must lie in (0, 1], got {self.gamma}")
        if self.horizon < 1:
            raise GameConfigError(f"horizon must be >= 1, got {self.horizon}")
        for (state, joint), target in self.transitions.items():
            self._check_key("transitions", state, joint)
            if target != TERMINAL and target not in self.states:
                raise GameConfigError(
                    f"transitions: state '{state}' action {joint} points to unknown state '{target}'"
                )
        for (state, joint), (mu, sigma2) in self.payoffs.items():
            self._check_key("payoffs", state, joint)
            if sigma2 < 0.0:
                raise GameConfigError(
                    f"payoffs: state '{state}' action {joint} has negative variance {sigma2}"
                )
            if not (np.isfinite(mu) and np.isfinite(sigma2)):
                raise GameConfigError(f"payoffs: state '{state}' action {joint} is not finite")
        for state in self.states:
            for joint in self.joint_actions():
                if (state, joint) not in self.transitions:
                    raise GameConfigError(
                        f"transitions: state '{state}' missing entry for joint action {joint}"
                    )
                if (state, joint) not in self.payoffs:
                    raise GameConfigError(
                        f"payoffs: state '{state}' missing entry for joint action {joint}"
                    )

    def _check_key(self, section: str, state: str, joint: JointAction) -> None:
        if state not in self.states:
            raise GameConfigError(f"{section}: unknown state '{state}'")
        if len(joint) != len(self.actions):
            raise GameConfigError(
                f"{section}: state '{state}' action {joint} has {len(joint)} components "
                f"for {len(self.actions)} agents"
            )
        for k, label in enumerate(joint):
            if label not in self.actions[k]:
                raise GameConfigError(
                    f"{section}: state '{state}' action {joint}: agent {k + 1} "
                    f"has no action '{label}'"
                )

    def joint_actions(self) -> list[JointAction]:
        joints: list[JointAction] = [()]
        for labels in self.actions:
            joints = [prior + (label,) for prior in joints for label in labels]
        return joints


@dataclass(frozen=True)
class Transition:
    """One environment step, as stored in replay."""

    state: str
    obs: np.ndarray
    actions: tuple[int, ...]
    reward: float
    next_state: str
    next_obs: np.ndarray
    terminal: bool


@dataclass
class EpisodeRecord:
    """Ordered transitions of one episode; validated on construction."""

    steps: list[Transition] = field(default_factory=list)

    def __post_init__(self):
        if not self.steps:
            raise EnvError("episode record must contain at least one step")
        for prev, nxt in zip(self.steps, self.steps[1:]):
            if prev.next_state != nxt.state:
                raise EnvError(
                    f"episode is not contiguous: step into '{prev.next_state}' "
                    f"followed by state '{nxt.state}'"
                )
        terminals = [t.terminal for t in self.steps]
        if sum(terminals) != 1 or not terminals[-1]:
            raise EnvError("episode must end with exactly one terminal step")

    def __len__(self) -> int:
        return len(self.steps)

    def total_reward(self) -> float:
        return float(sum(t.reward for t in self.steps))


class MatrixGame(DecPomdp):
    """A stochastic matrix game driven by a StochasticMatrixGameConfig.

    Each agent observes the one-hot encoding of the global state followed
    by its own one-hot agent id; observations are deterministic given the
    state.  Rewards are drawn from the configured Normal(mu, sigma2) using
    the generator passed to step, so runs replay exactly under a fixed
    seed (a zero-variance cell always pays exactly mu).
    """

    def __init__(self, config: StochasticMatrixGameConfig):
        self.config = config
        self.num_agents = len(config.actions)
        self.action_counts = tuple(len(labels) for labels in config.actions)
        self.obs_dim = len(config.states) + self.num_agents
        self.horizon = config.horizon
        self.gamma = config.gamma
        self._state_index = {name: i for i, name in enumerate(config.states)}
        self._obs_cache = {name: self._build_obs(name) for name in config.states}
        self._obs_cache[TERMINAL] = np.zeros((self.num_agents, self.obs_dim))
        self._state: str = config.initial
        self._t = 0

    def _build_obs(self, state: str) -> np.ndarray:
        obs = np.zeros((self.num_agents, self.obs_dim))
        obs[:, self._state_index[state]] = 1.0
        for k in range(self.num_agents):
            obs[k, len(self.config.states) + k] = 1.0
        return obs

    @property
    def state(self) -> str:
        return self._state

    @property
    def done(self) -> bool:
        return self._state == TERMINAL

    def state_row(self, state: str | None = None) -> np.ndarray:
        """One-hot global-state feature used by state-conditioned mixers."""
        name = self._state if state is None else state
        row = np.zeros(len(self.config.states))
        row[self._state_index[name]] = 1.0
        return row

    def observations_for(self, state: str) -> np.ndarray:
        return self._obs_cache[state].copy()

    def action_labels(self, joint_action: Sequence[int]) -> JointAction:
        return tuple(self.config.actions[k][a] for k, a in enumerate(joint_action))

    def action_indices(self, labels: Sequence[str]) -> tuple[int, ...]:
        if len(labels) != self.num_agents:
            raise EnvError(f"expected {self.num_agents} action labels, got {len(labels)}")
        out = []
        for k, label in enumerate(labels):
            if label not in self.config.actions[k]:
                raise EnvError(f"agent {k + 1} has no action '{label}'")
            out.append(self.config.actions[k].index(label))
        return tuple(out)

    def reset(self, rng=None) -> np.ndarray:
        self._state = self.config.initial
        self._t = 0
        return self.observations_for(self._state)

    def step(self, joint_action: Sequence[int], rng) -> tuple[float, np.ndarray, bool]:
        if self.done:
            raise EnvError("cannot step a terminated episode; call reset first")
        if len(joint_action) != self.num_agents:
            raise EnvError(f"expected {self.num_agents} actions, got {len(joint_action)}")
        for k, a in enumerate(joint_action):
            if not 0 <= int(a) < self.action_counts[k]:
                raise EnvError(
                    f"agent {k + 1} action index {a} out of range [0, {self.action_counts[k]})"
                )
        labels = self.action_labels(joint_action)
        key = (self._state, labels)
        mu, sigma2 = self.config.payoffs[key]
        # Draw unconditionally so the stream advances identically for
        # deterministic and stochastic cells; sigma = 0 pays exactly mu.
        reward = float(mu + np.sqrt(sigma2) * rng.standard_normal())
        self._t += 1
        target = self.config.transitions[key]
        if target != TERMINAL and self._t >= self.horizon:
            target = TERMINAL
        self._state = target
        terminal = target == TERMINAL
        return reward, self.observations_for(target), terminal


# ---------------------------------------------------------------------------
# Config text format.
#
# Header lines, then [transitions] and [payoffs] sections:
#
#     states: 1 2A 2B
#     initial: 1
#     actions: A B | A B        # one group per agent
#     gamma: 0.99               # optional
#     horizon: 2                # optional
#
#     [transitions]
#     1: A A -> 2A
#     2A: A A -> terminal
#
#     [payoffs]
#     2B: B B -> mu 8 sigma2 29
# ---------------------------------------------------------------------------


def parse_game_config(text: str, name: str = "matrix_game") -> StochasticMatrixGameConfig:
    """Parse the matrix-game text format into a validated config."""
    states: tuple[str, ...] | None = None
    initial: str | None = None
    actions: tuple[tuple[str, ...], ...] | None = None
    gamma = 0.99
    horizon = 100
    transitions: dict[tuple[str, JointAction], str] = {}
    payoffs: dict[tuple[str, JointAction], tuple[float, float]] = {}
    section = None

    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            section = line[1:-1].strip().lower()
            if section not in ("transitions", "payoffs"):
                raise GameConfigError(f"line {lineno}: unknown section '{section}'")
            continue
        if section is None:
            if ":" not in line:
                raise GameConfigError(f"line {lineno}: expected 'key: value', got '{line}'")
            key, _, value = line.partition(":")
            key = key.strip().lower()
            value = value.strip()
            if key == "states":
                states = tuple(value.split())
            elif key == "initial":
                initial = value
            elif key == "actions":
                actions = tuple(tuple(group.split()) for group in value.split("|"))
            elif key == "gamma":
                gamma = float(value)
            elif key == "horizon":
                horizon = int(value)
            else:
                raise GameConfigError(f"line {lineno}: unknown header '{key}'")
            continue

        if ":" not in line or "->" not in line:
            raise GameConfigError(
                f"line {lineno}: expected 'state: a1 a2 ... -> target', got '{line}'"
            )
        state_part, _, rest = line.partition(":")
        lhs, _, rhs = rest.partition("->")
        state = state_part.strip()
        joint = tuple(lhs.split())
        rhs = rhs.strip()
        key = (state, joint)
        if section == "transitions":
            if key in transitions:
                raise GameConfigError(
                    f"line {lineno}: duplicate transition for state '{state}' action {joint}"
                )
            transitions[key] = rhs
        else:
            tokens = rhs.split()
            if len(tokens) != 4 or tokens[0] != "mu" or tokens[2] != "sigma2":
                raise GameConfigError(
                    f"line {lineno}: expected 'mu <value> sigma2 <value>', got '{rhs}'"
                )
            try:
                mu, sigma2 = float(tokens[1]), float(tokens[3])
            except ValueError:
                raise GameConfigError(f"line {lineno}: non-numeric payoff '{rhs}'") from None
            if key in payoffs:
                raise GameConfigError(
                    f"line {lineno}: duplicate payoff for state '{state}' action {joint}"
                )
            payoffs[key] = (mu, sigma2)

    if states is None:
        raise GameConfigError("missing 'states' header")
    if initial is None:
        raise GameConfigError("missing 'initial' header")
    if actions is None:
        raise GameConfigError("missing 'actions' header")
    return StochasticMatrixGameConfig(
        states=states,
        initial=initial,
        actions=actions,
        transitions=transitions,
        payoffs=payoffs,
        gamma=gamma,
        horizon=horizon,
        name=name,
    )


def load_matrix_game(config_text: str, name: str = "matrix_game") -> MatrixGame:
    """Build a MatrixGame from config text (see module docstring format)."""
    return MatrixGame(parse_game_config(config_text, name=name))


def load_matrix_game_file(path) -> MatrixGame:
    with open(path, "r", encoding="utf-8") as handle:
        text = handle.read()
    import os

    return load_matrix_game(text, name=os.path.splitext(os.path.basename(str(path)))[0])


def preset_path(name: str = "two_step") -> str:
    """Filesystem path of a shipped .game preset."""
    return str(resources.files("dfaclab").joinpath(f"presets/{name}.game"))


def two_step_config() -> StochasticMatrixGameConfig:
    """The stochastic two-step game, built directly from its payoff table.

    State 1: agent 1's action picks the second-step matrix (A -> 2A,
    B -> 2B) regardless of agent 2; first-step reward is exactly 0.
    State 2A pays Normal(7, 0) for every cell; state 2B pays Normal(0, 2),
    Normal(1, 13) off-diagonal, and Normal(8, 29) for (B, B).  The episode
    then terminates.
    """
    states = ("1", "2A", "2B")
    acts = (("A", "B"), ("A", "B"))
    transitions: dict[tuple[str, JointAction], str] = {}
    payoffs: dict[tuple[str, JointAction], tuple[float, float]] = {}
    for a1 in "AB":
        for a2 in "AB":
            joint = (a1, a2)
            transitions[("1", joint)] = "2A" if a1 == "A" else "2B"
            payoffs[("1", joint)] = (0.0, 0.0)
            transitions[("2A", joint)] = TERMINAL
            payoffs[("2A", joint)] = (7.0, 0.0)
            transitions[("2B", joint)] = TERMINAL
    payoffs[("2B", ("A", "A"))] = (0.0, 2.0)
    payoffs[("2B", ("A", "B"))] = (1.0, 13.0)
    payoffs[("2B", ("B", "A"))] = (1.0, 13.0)
    payoffs[("2B", ("B", "B"))] = (8.0, 29.0)
    return StochasticMatrixGameConfig(
        states=states,
        initial="1",
        actions=acts,
        transitions=transitions,
        payoffs=payoffs,
        gamma=0.99,
        horizon=2,
        name="two_step",
    )


def two_step_game() -> MatrixGame:
    """Fresh instance of the stochastic two-step game."""
    return MatrixGame(two_step_config())
