"""Replay-based centralized training with decentralized execution.

One gradient step per collected episode once the buffer holds a batch;
targets bootstrap through the target network at actions chosen by the
online network (double-estimator convention); epsilon anneals linearly.
Every random draw comes from generators spawned off the config seed, so a
(seed, config) pair reproduces a run bitwise.

The training loop is single-threaded by contract.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from dfaclab.autodiff import backward, optimizer_step
from dfaclab.distribution import (
    LossConfig,
    expectation,
    huber_loss_graph,
    pairwise_loss_graph,
    stratified_grid,
)
from dfaclab.envs import EpisodeRecord, MatrixGame, Transition
from dfaclab.networks import (
    ALGORITHMS,
    JointValueModel,
    MixerError,
    compose_joint_quantiles,
    greedy_joint_action,
)

__all__ = [
    "TrainError",
    "TrainConfig",
    "EvalPoint",
    "RunMetrics",
    "ReplayBuffer",
    "collect_episode",
    "compute_targets",
    "train_on_batch",
    "train_step",
    "greedy_returns",
    "evaluate_greedy",
    "run_training",
    "digm_consistency_check",
]


class TrainError(ValueError):
    """Invalid training configuration or training-time precondition."""


@dataclass(frozen=True)
class TrainConfig:
    """Hyperparameters of one training run.

    Defaults are tuned for the two-step game and exposed rather than
    hidden: gamma 0.99, RMSProp at 5e-4, batches of 32 episodes over a
    500-episode buffer, target sync every 200 steps, epsilon 1.0 -> 0.05
    over 5000 episodes, and N = N' = 8, N-hat = 32 quantile samples.
    """

    algo: str = "dmix"
    gamma: float = 0.99
    learning_rate: float = 5e-4
    batch_size: int = 32
    buffer_capacity: int = 500
    target_update_interval: int = 200
    epsilon_start: float = 1.0
    epsilon_end: float = 0.05
    epsilon_anneal_episodes: int = 5000
    total_episodes: int = 20000
    eval_interval: int = 500
    eval_episodes: int = 100
    seed: int = 0
    loss: LossConfig = field(default_factory=LossConfig)

    def __post_init__(self):
        if self.algo not in ALGORITHMS:
            raise TrainError(f"unknown algorithm '{self.algo}' (expected one of {sorted(ALGORITHMS)})")
        if not 0.0 < self.gamma <= 1.0:
            raise TrainError(f"gamma must lie in (0, 1], got {self.gamma}")
        if self.learning_rate <= 0:
            raise TrainError(f"learning rate must be positive, got {self.learning_rate}")
        if not 1.0 >= self.epsilon_start >= self.epsilon_end >= 0.0:
            raise TrainError(
                f"need 1 >= epsilon_start >= epsilon_end >= 0, got "
                f"{self.epsilon_start} -> {self.epsilon_end}"
            )
        for name in ("batch_size", "buffer_capacity", "target_update_interval",
                     "eval_interval", "eval_episodes"):
            if getattr(self, name) < 1:
                raise TrainError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.epsilon_anneal_episodes < 0 or self.total_episodes < 0:
            raise TrainError("episode counts must be non-negative")
        if self.buffer_capacity < self.batch_size:
            raise TrainError("buffer capacity must be at least the batch size")

    def with_updates(self, **kwargs) -> "TrainConfig":
        return replace(self, **kwargs)

    def epsilon_at(self, episode: int) -> float:
        if self.epsilon_anneal_episodes == 0:
            return self.epsilon_end
        frac = min(1.0, episode / self.epsilon_anneal_episodes)
        return self.epsilon_start - (self.epsilon_start - self.epsilon_end) * frac


@dataclass(frozen=True)
class EvalPoint:
    episode: int
    greedy_return_mean: float
    td_loss: float
    epsilon: float


@dataclass
class RunMetrics:
    """Evaluation trace of a run plus the final learned factorization."""

    points: list[EvalPoint] = field(default_factory=list)
    factorization: object | None = None


class ReplayBuffer:
    """Ring buffer of episodes with oldest-first eviction."""

    def __init__(self, capacity: int):
        if capacity < 1:
            raise TrainError(f"buffer capacity must be >= 1, got {capacity}")
        self.capacity = capacity
        self._items: list[EpisodeRecord] = []
        self._cursor = 0

    def __len__(self) -> int:
        return len(self._items)

    def push(self, episode: EpisodeRecord) -> None:
        if len(self._items) < self.capacity:
            self._items.append(episode)
        else:
            self._items[self._cursor] = episode
            self._cursor = (self._cursor + 1) % self.capacity

    def sample(self, count: int, rng) -> list[EpisodeRecord]:
        """Uniform sample with replacement; reproducible under a fixed rng."""
        if not self._items:
            raise TrainError("cannot sample from an empty buffer")
        idx = rng.integers(0, len(self._items), size=count)
        return [self._items[i] for i in idx]

    def episodes(self) -> list[EpisodeRecord]:
        return list(self._items)


def collect_episode(env, model: JointValueModel, epsilon: float, rng) -> EpisodeRecord:
    """Roll out one episode with per-agent epsilon-greedy exploration.

    Each agent independently takes a uniform random action with
    probability epsilon, otherwise its greedy action from the mean
    utility.  The record keeps global state ids alongside observations.
    """
    obs = env.reset(rng)
    steps: list[Transition] = []
    for _ in range(env.horizon):
        state = env.state
        greedy: list[int] | None = None
        actions: list[int] = []
        for k in range(env.num_agents):
            if epsilon > 0.0 and rng.random() < epsilon:
                actions.append(int(rng.integers(env.action_counts[k])))
            else:
                if greedy is None:
                    greedy = greedy_joint_action(model, obs)
                actions.append(greedy[k])
        reward, next_obs, terminal = env.step(actions, rng)
        steps.append(Transition(
            state=state,
            obs=obs,
            actions=tuple(actions),
            reward=reward,
            next_state=env.state,
            next_obs=next_obs,
            terminal=terminal,
        ))
        obs = next_obs
        if terminal:
            break
    return EpisodeRecord(steps)


def _batch_arrays(env, transitions: Sequence[Transition]):
    obs = np.stack([t.obs for t in transitions])
    next_obs = np.stack([t.next_obs for t in transitions])
    actions = np.array([t.actions for t in transitions], dtype=np.int64)
    rewards = np.array([t.reward for t in transitions])
    terminal = np.array([t.terminal for t in transitions], dtype=bool)
    zeros = np.zeros(len(env.config.states))
    state_rows = np.stack([env.state_row(t.state) for t in transitions])
    next_rows = np.stack([
        zeros if t.terminal else env.state_row(t.next_state) for t in transitions
    ])
    return obs, state_rows, actions, rewards, next_obs, next_rows, terminal


def compute_targets(model: JointValueModel, transitions: Sequence[Transition],
                    gamma: float, n_target: int, rng, env, _arrays=None) -> np.ndarray:
    """Per-transition distributional TD targets, [batch, n_target].

    Next actions are each agent's argmax of the ONLINE mean utility; the
    values bootstrap through the TARGET network's joint quantiles at fresh
    shared omegas.  Terminal transitions use the reward exactly.  Targets
    are plain arrays and carry no gradient.
    """
    if n_target < 1:
        raise TrainError(f"n_target must be >= 1, got {n_target}")
    arrays = _arrays if _arrays is not None else _batch_arrays(env, transitions)
    _, _, _, rewards, next_obs, next_rows, terminal = arrays
    batch = len(transitions)
    next_actions = np.argmax(model.utility_means(next_obs), axis=2)
    if model.distributional:
        omegas = rng.random((batch, n_target))
    else:
        omegas = np.full((batch, 1), 0.5)
    joint = model.compose_graph(next_obs, next_rows, next_actions, omegas, target=True).value
    targets = rewards[:, None] + gamma * joint
    targets[terminal] = rewards[terminal, None]
    return targets


def _independent_targets(model: JointValueModel, transitions, gamma: float,
                         n_target: int, rng, env, _arrays=None) -> np.ndarray:
    """Per-agent bootstrapped targets for iql/diql, [batch, K, n_target]."""
    arrays = _arrays if _arrays is not None else _batch_arrays(env, transitions)
    _, _, _, rewards, next_obs, _, terminal = arrays
    batch = len(transitions)
    next_actions = np.argmax(model.utility_means(next_obs), axis=2)
    if model.distributional:
        omegas = rng.random((batch, n_target))
    else:
        omegas = np.full((batch, 1), 0.5)
    vals = model.action_values_graph(next_obs, next_actions, omegas, target=True).value
    targets = rewards[:, None, None] + gamma * vals
    targets[terminal] = rewards[terminal, None, None]
    return targets


def train_on_batch(model: JointValueModel, transitions: Sequence[Transition],
                   config: TrainConfig, env, omega_rng) -> float:
    """One gradient step on a fixed list of transitions; returns the loss.

    Distributional variants regress joint (or per-agent, for diql)
    quantiles at fresh shared omegas onto pairwise quantile-Huber targets;
    expected variants reduce to scalar Q-learning with a plain Huber loss.
    """
    if not transitions:
        raise TrainError("cannot train on an empty batch")
    batch = len(transitions)
    kappa = config.loss.kappa
    arrays = _batch_arrays(env, transitions)
    obs, state_rows, actions, *_ = arrays

    if model.mixer.variant == "none":
        if model.distributional:
            omegas = omega_rng.random((batch, config.loss.n_pred))
            pred = model.action_values_graph(obs, actions, omegas)
            targets = _independent_targets(model, transitions, config.gamma,
                                           config.loss.n_target, omega_rng, env,
                                           _arrays=arrays)
            flat_pred = _flatten_agents(pred)
            flat_omegas = np.repeat(omegas[:, None, :], model.num_agents, axis=1)
            loss = pairwise_loss_graph(flat_pred, flat_omegas.reshape(-1, omegas.shape[1]),
                                       targets.reshape(-1, targets.shape[2]), kappa)
        else:
            omegas = np.full((batch, 1), 0.5)
            pred = model.action_values_graph(obs, actions, omegas)
            targets = _independent_targets(model, transitions, config.gamma, 1, omega_rng, env,
                                           _arrays=arrays)
            loss = huber_loss_graph(_flatten_agents(pred), targets.reshape(-1, 1), kappa)
    else:
        if model.distributional:
            omegas = omega_rng.random((batch, config.loss.n_pred))
            pred = model.compose_graph(obs, state_rows, actions, omegas)
            targets = compute_targets(model, transitions, config.gamma,
                                      config.loss.n_target, omega_rng, env, _arrays=arrays)
            loss = pairwise_loss_graph(pred, omegas, targets, kappa)
        else:
            omegas = np.full((batch, 1), 0.5)
            pred = model.compose_graph(obs, state_rows, actions, omegas)
            targets = compute_targets(model, transitions, config.gamma, 1, omega_rng, env,
                                      _arrays=arrays)
            loss = huber_loss_graph(pred, targets, kappa)

    value = float(loss.value)
    backward(loss)
    optimizer_step(model.params, config.learning_rate)
    return value


def _flatten_agents(pred):
    from dfaclab import autodiff as ad

    batch, k, n = pred.value.shape
    return ad.reshape(pred, (batch * k, n))


def train_step(model: JointValueModel, buffer: ReplayBuffer, config: TrainConfig,
               env, sample_rng, omega_rng) -> float:
    """Sample a batch of episodes and take one gradient step."""
    if len(buffer) < config.batch_size:
        raise TrainError(
            f"buffer holds {len(buffer)} episodes; need at least {config.batch_size}"
        )
    episodes = buffer.sample(config.batch_size, sample_rng)
    transitions = [t for episode in episodes for t in episode.steps]
    return train_on_batch(model, transitions, config, env, omega_rng)


def greedy_returns(env, model: JointValueModel, episodes: int, rng) -> np.ndarray:
    """Undiscounted episode returns of the greedy joint policy."""
    by_state = None
    if isinstance(env, MatrixGame):
        # Observations depend only on the state, so the greedy action per
        # state can be computed once per evaluation.
        by_state = {
            s: greedy_joint_action(model, env.observations_for(s)) for s in env.config.states
        }
    returns = np.zeros(episodes)
    for i in range(episodes):
        obs = env.reset(rng)
        terminal = False
        while not terminal:
            actions = by_state[env.state] if by_state else greedy_joint_action(model, obs)
            reward, obs, terminal = env.step(actions, rng)
            returns[i] += reward
    return returns


def evaluate_greedy(env, model: JointValueModel, episodes: int, rng) -> float:
    """Mean undiscounted episode return of the greedy joint policy."""
    return float(np.mean(greedy_returns(env, model, episodes, rng)))


def run_training(env, config: TrainConfig) -> tuple[RunMetrics, JointValueModel]:
    """Full run: collect, train, sync targets, evaluate, tabulate.

    Returns the metrics trace and the trained model.  With zero episodes
    the model is returned untouched (fresh initialization) and the metrics
    are empty.
    """
    root = np.random.SeedSequence(config.seed)
    init_ss, episode_ss, sample_ss, omega_ss, eval_ss = root.spawn(5)
    model = JointValueModel.for_env(config.algo, env, np.random.default_rng(init_ss),
                                    n_eval=config.loss.n_eval)
    sample_rng = np.random.default_rng(sample_ss)
    omega_rng = np.random.default_rng(omega_ss)
    buffer = ReplayBuffer(config.buffer_capacity)

    points: list[EvalPoint] = []
    recent_losses: list[float] = []
    train_steps = 0
    for episode in range(config.total_episodes):
        eps = config.epsilon_at(episode)
        ep_rng = np.random.default_rng(episode_ss.spawn(1)[0])
        buffer.push(collect_episode(env, model, eps, ep_rng))
        if len(buffer) >= config.batch_size:
            loss = train_step(model, buffer, config, env, sample_rng, omega_rng)
            if not np.isfinite(loss):
                raise TrainError(f"non-finite loss at episode {episode}")
            recent_losses.append(loss)
            train_steps += 1
            if train_steps % config.target_update_interval == 0:
                model.sync_target()
        if (episode + 1) % config.eval_interval == 0:
            eval_rng = np.random.default_rng(eval_ss.spawn(1)[0])
            mean_return = evaluate_greedy(env, model, config.eval_episodes, eval_rng)
            td = float(np.mean(recent_losses)) if recent_losses else 0.0
            points.append(EvalPoint(episode + 1, mean_return, td, eps))
            recent_losses = []

    metrics = RunMetrics(points=points)
    if config.total_episodes > 0 and isinstance(env, MatrixGame):
        from dfaclab.reporting import factorization_table

        metrics.factorization = factorization_table(model, env)
    return metrics, model


def digm_consistency_check(model: JointValueModel, observations: np.ndarray,
                           state_row, n_grid: int = 32) -> bool:
    """Brute-force check that decentralized argmaxes realize the joint argmax.

    Enumerates every joint action, scores it by the expectation of the
    composed joint quantiles on a stratified grid, and compares the best
    (lexicographically first on ties) against the tuple of per-agent
    argmaxes of the mean utility on the same grid.
    """
    if model.mixer.variant == "none":
        raise MixerError("consistency check needs a mixer joining the agents")
    observations = np.asarray(observations, dtype=np.float64)
    grid = stratified_grid(n_grid)
    means = model.utility_means(observations, n_eval=n_grid)
    decentralized = tuple(int(np.argmax(row)) for row in means)
    best: tuple[int, ...] | None = None
    best_value = -np.inf
    for joint in itertools.product(range(model.n_actions), repeat=model.num_agents):
        batch = compose_joint_quantiles(model, observations, state_row, grid, joint)
        value = expectation(batch)
        if value > best_value:
            best_value = value
            best = joint
    return best == decentralized
