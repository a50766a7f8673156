"""Per-agent implicit-quantile utility networks, expected-value mixers, and
the composition that turns per-agent quantiles into joint return quantiles.

Architecture
    utility  F_k(obs, a | omega) = head(psi(obs) * phi(omega))_a, where psi
    is a one-hidden-layer ReLU encoder and phi embeds omega through cosine
    features; psi and phi share their output width so the elementwise
    product is defined.  All agents share one parameter set and see their
    own one-hot agent id inside the observation.

    mixers   additive (plain sum) or monotonic (state-conditioned
    hypernetworks whose mixing weights pass through absolute value, plus a
    state-dependent bias), applied to per-agent means.

    joint    for the distributional variants, per shared omega:
    F_jt(omega) = mix(Q_1..Q_K | s) + sum_k (F_k(omega) - Q_k), with Q_k
    the in-sample mean of agent k's values over the same omega batch, so
    the residual shape term has exactly zero in-sample mean.

Expected-value algorithms (iql/vdn/qmix) skip the quantile embedding
entirely: the utility is a single deterministic value per action, and the
modeled return therefore has zero variance by construction.

Forward evaluation is read-only over parameters and safe to run
concurrently; training and target syncs are single-writer.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from dfaclab import autodiff as ad
from dfaclab.autodiff import ParameterSet, Tensor
from dfaclab.distribution import QuantileBatch, stratified_grid

__all__ = [
    "NetworkError",
    "MixerError",
    "ALGORITHMS",
    "CosineEmbeddingSpec",
    "MixerSpec",
    "JointValueModel",
    "embed_quantile",
    "utility_quantiles",
    "utility_mean",
    "greedy_joint_action",
    "mix_expected",
    "compose_joint_quantiles",
    "sync_target",
]


class NetworkError(ValueError):
    """Invalid input to a network forward pass or constructor."""


class MixerError(NetworkError):
    """Operation requires a mixer the model does not have."""


# algo -> (distributional, mixer variant)
ALGORITHMS: Mapping[str, tuple[bool, str]] = {
    "iql": (False, "none"),
    "vdn": (False, "additive"),
    "qmix": (False, "monotonic"),
    "diql": (True, "none"),
    "ddn": (True, "additive"),
    "dmix": (True, "monotonic"),
}


@dataclass(frozen=True)
class CosineEmbeddingSpec:
    """Cosine feature count and embedding width for the quantile input."""

    n: int = 64
    embed_dim: int = 64

    def __post_init__(self):
        if self.n < 1 or self.embed_dim < 1:
            raise NetworkError(f"cosine embedding needs n, embed_dim >= 1, got {self}")


@dataclass(frozen=True)
class MixerSpec:
    """Mixer variant and, for the monotonic mixer, its hidden width."""

    variant: str = "additive"
    mixing_width: int = 8

    def __post_init__(self):
        if self.variant not in ("none", "additive", "monotonic"):
            raise NetworkError(f"unknown mixer variant '{self.variant}'")
        if self.mixing_width < 1:
            raise NetworkError(f"mixing width must be >= 1, got {self.mixing_width}")


def _init_linear(params: ParameterSet, prefix: str, fan_in: int, fan_out: int, rng) -> None:
    bound = 1.0 / np.sqrt(fan_in)
    params.add(f"{prefix}/W", rng.uniform(-bound, bound, size=(fan_in, fan_out)))
    params.add(f"{prefix}/b", rng.uniform(-bound, bound, size=fan_out))


def _linear(nodes: Mapping[str, Tensor], prefix: str, x: Tensor) -> Tensor:
    return ad.add(ad.matmul(x, nodes[f"{prefix}/W"]), nodes[f"{prefix}/b"])


class JointValueModel:
    """K shared-parameter utility networks, a mixer, and target copies."""

    def __init__(self, algo: str, *, num_agents: int, obs_dim: int, state_dim: int,
                 n_actions: int, rng, cosine: CosineEmbeddingSpec | None = None,
                 mixing_width: int = 8, n_eval: int = 32):
        if algo not in ALGORITHMS:
            raise NetworkError(f"unknown algorithm '{algo}' (expected one of {sorted(ALGORITHMS)})")
        if num_agents < 1 or obs_dim < 1 or state_dim < 1 or n_actions < 1 or n_eval < 1:
            raise NetworkError("model dimensions must all be >= 1")
        self.algo = algo
        self.distributional, variant = ALGORITHMS[algo]
        self.mixer = MixerSpec(variant=variant, mixing_width=mixing_width)
        self.num_agents = num_agents
        self.obs_dim = obs_dim
        self.state_dim = state_dim
        self.n_actions = n_actions
        self.cosine = cosine or CosineEmbeddingSpec()
        self.n_eval = n_eval

        self.params = ParameterSet()
        width = self.cosine.embed_dim
        _init_linear(self.params, "psi", obs_dim, width, rng)
        if self.distributional:
            _init_linear(self.params, "phi", self.cosine.n, width, rng)
        _init_linear(self.params, "head", width, n_actions, rng)
        if self.mixer.variant == "monotonic":
            m = self.mixer.mixing_width
            _init_linear(self.params, "hyper_w1", state_dim, num_agents * m, rng)
            _init_linear(self.params, "hyper_b1", state_dim, m, rng)
            _init_linear(self.params, "hyper_w2", state_dim, m, rng)
            _init_linear(self.params, "value_1", state_dim, m, rng)
            _init_linear(self.params, "value_2", m, 1, rng)

        self.target: dict[str, np.ndarray] = self.params.copy_values()
        self._target_nodes: dict[str, Tensor] = {}
        self._refresh_target_nodes()

    @classmethod
    def for_env(cls, algo: str, env, rng, **kwargs) -> "JointValueModel":
        """Build a model sized for a matrix-game environment."""
        counts = set(env.action_counts)
        if len(counts) != 1:
            raise NetworkError(
                "shared-parameter utilities require every agent to have the same "
                f"number of actions, got {env.action_counts}"
            )
        return cls(
            algo,
            num_agents=env.num_agents,
            obs_dim=env.obs_dim,
            state_dim=len(env.config.states),
            n_actions=counts.pop(),
            rng=rng,
            **kwargs,
        )

    # -- parameter plumbing -------------------------------------------------

    def _refresh_target_nodes(self) -> None:
        self._target_nodes = {name: ad.constant(value) for name, value in self.target.items()}

    def _nodes(self, target: bool) -> Mapping[str, Tensor]:
        return self._target_nodes if target else dict(self.params.items())

    def sync_target(self) -> None:
        """Copy online parameters into the target network."""
        self.target = self.params.copy_values()
        self._refresh_target_nodes()

    # -- forward passes -----------------------------------------------------

    def _check_obs_rows(self, rows: np.ndarray) -> None:
        if rows.ndim != 2 or rows.shape[1] != self.obs_dim:
            raise NetworkError(
                f"observation dimension mismatch: expected (*, {self.obs_dim}), "
                f"got {rows.shape}"
            )

    def _values_rows(self, nodes: Mapping[str, Tensor], obs_rows: np.ndarray,
                     omega_rows: np.ndarray) -> Tensor:
        """Utility values for R (observation, omega) rows -> [R, n_actions]."""
        self._check_obs_rows(obs_rows)
        psi = ad.relu(_linear(nodes, "psi", ad.constant(obs_rows)))
        if self.distributional:
            if omega_rows.shape != (obs_rows.shape[0],):
                raise NetworkError(
                    f"expected one omega per row, got {omega_rows.shape} "
                    f"for {obs_rows.shape[0]} rows"
                )
            if np.any(omega_rows < 0.0) or np.any(omega_rows > 1.0):
                raise NetworkError("quantile levels must lie in [0, 1]")
            angles = omega_rows[:, None] * (np.pi * np.arange(self.cosine.n))
            phi = ad.relu(_linear(nodes, "phi", ad.cos(ad.constant(angles))))
            merged = ad.mul(psi, phi)
        else:
            merged = psi
        return _linear(nodes, "head", merged)

    def utility_values(self, obs: np.ndarray, omegas: np.ndarray, *,
                       target: bool = False) -> np.ndarray:
        """All-action utility values on a shared grid.

        obs is [K, obs_dim] (or [B, K, obs_dim]); omegas is [n].  Returns
        [K, n_actions, n] (or [B, K, n_actions, n]).  Duplicate
        observation rows are forwarded once and fanned back out, which is
        what makes grid evaluation cheap on small-state games.
        """
        obs = np.asarray(obs, dtype=np.float64)
        omegas = np.asarray(omegas, dtype=np.float64).ravel()
        squeeze = obs.ndim == 2
        if squeeze:
            obs = obs[None]
        batch, k, _ = obs.shape
        n = len(omegas)
        flat = obs.reshape(batch * k, -1)
        unique, inverse = np.unique(flat, axis=0, return_inverse=True)
        rows = np.repeat(unique, n, axis=0)
        omega_rows = np.tile(omegas, len(unique))
        out = self._values_rows(self._nodes(target), rows, omega_rows)
        per_row = out.value.reshape(len(unique), n, self.n_actions)[inverse]
        values = per_row.reshape(batch, k, n, self.n_actions).transpose(0, 1, 3, 2)
        return values[0] if squeeze else values

    def utility_means(self, obs: np.ndarray, *, n_eval: int | None = None,
                      target: bool = False) -> np.ndarray:
        """Per-action means over the stratified grid: [.., K, n_actions]."""
        grid = stratified_grid(n_eval or self.n_eval)
        return self.utility_values(obs, grid, target=target).mean(axis=-1)

    def action_values_graph(self, obs: np.ndarray, actions: np.ndarray,
                            omegas: np.ndarray, *, target: bool = False) -> Tensor:
        """Taped utility values of the taken actions: [B, K, N].

        obs is [B, K, obs_dim]; actions [B, K] int indices; omegas [B, N]
        shared across agents (the comonotonic coupling).  The observation
        encoding runs once per (transition, agent) and the quantile
        embedding once per (transition, omega); both are broadcast into
        the (transition, agent, omega) layout on the tape.
        """
        nodes = self._nodes(target)
        batch, k, _ = obs.shape
        n = omegas.shape[1]
        obs_rows = obs.reshape(batch * k, -1)
        self._check_obs_rows(obs_rows)
        psi = ad.relu(_linear(nodes, "psi", ad.constant(obs_rows)))
        width = self.cosine.embed_dim
        if self.distributional:
            if np.any(omegas < 0.0) or np.any(omegas > 1.0):
                raise NetworkError("quantile levels must lie in [0, 1]")
            angles = omegas.reshape(-1)[:, None] * (np.pi * np.arange(self.cosine.n))
            phi = ad.relu(_linear(nodes, "phi", ad.cos(ad.constant(angles))))
            psi4 = ad.broadcast_to(ad.reshape(psi, (batch, k, 1, width)), (batch, k, n, width))
            phi4 = ad.broadcast_to(ad.reshape(phi, (batch, 1, n, width)), (batch, k, n, width))
            merged = ad.reshape(ad.mul(psi4, phi4), (batch * k * n, width))
            out = _linear(nodes, "head", merged)
            action_rows = np.repeat(actions.reshape(-1), n)
        else:
            out = _linear(nodes, "head", psi)
            action_rows = actions.reshape(-1)
        rows = out.value.shape[0]
        mask = np.zeros((rows, self.n_actions))
        mask[np.arange(rows), action_rows] = 1.0
        picked = ad.reduce_sum(ad.mul(out, mask), axis=1)
        if self.distributional:
            return ad.reshape(picked, (batch, k, n))
        single = ad.reshape(picked, (batch, k, 1))
        return single if n == 1 else ad.broadcast_to(single, (batch, k, n))

    def mix_graph(self, q: Tensor, state_rows: np.ndarray, *, target: bool = False) -> Tensor:
        """Mix per-agent expected utilities [B, K] into joint values [B]."""
        variant = self.mixer.variant
        if variant == "none":
            raise MixerError(f"algorithm '{self.algo}' has no mixer; agents learn independently")
        if variant == "additive":
            return ad.reduce_sum(q, axis=1)
        nodes = self._nodes(target)
        if state_rows.ndim != 2 or state_rows.shape[1] != self.state_dim:
            raise NetworkError(
                f"state dimension mismatch: expected (*, {self.state_dim}), got {state_rows.shape}"
            )
        batch = q.value.shape[0]
        m = self.mixer.mixing_width
        s = ad.constant(state_rows)
        w1 = ad.reshape(ad.absolute(_linear(nodes, "hyper_w1", s)), (batch, self.num_agents, m))
        b1 = _linear(nodes, "hyper_b1", s)
        hidden = ad.relu(ad.add(ad.reshape(ad.bmm(ad.reshape(q, (batch, 1, self.num_agents)), w1),
                                           (batch, m)), b1))
        w2 = ad.absolute(_linear(nodes, "hyper_w2", s))
        mixed = ad.reduce_sum(ad.mul(hidden, w2), axis=1)
        return ad.add(mixed, self.state_value_graph(state_rows, target=target))

    def state_value_graph(self, state_rows: np.ndarray, *, target: bool = False) -> Tensor:
        """State-dependent bias of the monotonic mixer: [B]."""
        if self.mixer.variant != "monotonic":
            raise MixerError("state-dependent bias exists only for the monotonic mixer")
        nodes = self._nodes(target)
        s = ad.constant(state_rows)
        hidden = ad.relu(_linear(nodes, "value_1", s))
        return ad.reshape(_linear(nodes, "value_2", hidden), (state_rows.shape[0],))

    def compose_graph(self, obs: np.ndarray, state_rows: np.ndarray, actions: np.ndarray,
                      omegas: np.ndarray, *, target: bool = False) -> Tensor:
        """Joint return quantiles for taken actions at shared omegas: [B, N].

        Distributional variants add the zero-in-sample-mean shape residual
        to the mixed means; expected variants broadcast the mixed value.
        """
        batch, n = omegas.shape
        values = self.action_values_graph(obs, actions, omegas, target=target)
        q = ad.reduce_mean(values, axis=2)
        mixed = self.mix_graph(q, state_rows, target=target)
        mixed_wide = ad.broadcast_to(ad.reshape(mixed, (batch, 1)), (batch, n))
        if not self.distributional:
            return mixed_wide
        centered = ad.sub(values, ad.broadcast_to(ad.reshape(q, (batch, self.num_agents, 1)),
                                                  values.value.shape))
        return ad.add(mixed_wide, ad.reduce_sum(centered, axis=1))


def embed_quantile(spec: CosineEmbeddingSpec, omega: float, weights: np.ndarray,
                   bias: np.ndarray) -> np.ndarray:
    """Cosine quantile embedding: ReLU of an affine map of [cos(pi*i*omega)].

    weights is [n, embed_dim], bias [embed_dim]; omega must lie in [0, 1].
    """
    if not 0.0 <= omega <= 1.0:
        raise NetworkError(f"quantile level must lie in [0, 1], got {omega}")
    weights = np.asarray(weights, dtype=np.float64)
    bias = np.asarray(bias, dtype=np.float64)
    if weights.shape != (spec.n, spec.embed_dim) or bias.shape != (spec.embed_dim,):
        raise NetworkError(
            f"embedding parameters must be ({spec.n}, {spec.embed_dim}) and "
            f"({spec.embed_dim},), got {weights.shape} and {bias.shape}"
        )
    features = np.cos(np.pi * np.arange(spec.n) * omega)
    return np.maximum(features @ weights + bias, 0.0)


def utility_quantiles(model: JointValueModel, observation: np.ndarray, omegas, *,
                      target: bool = False) -> np.ndarray:
    """One agent's quantile values for every action: [n_actions, n_omegas]."""
    observation = np.asarray(observation, dtype=np.float64)
    if observation.ndim != 1:
        raise NetworkError(f"expected a single observation vector, got shape {observation.shape}")
    omegas = np.asarray(omegas, dtype=np.float64).ravel()
    if omegas.size < 1:
        raise NetworkError("omegas must be non-empty")
    return model.utility_values(observation[None], omegas, target=target)[0]


def utility_mean(model: JointValueModel, observation: np.ndarray,
                 n_eval: int | None = None) -> np.ndarray:
    """Per-action expected utility over the stratified evaluation grid."""
    observation = np.asarray(observation, dtype=np.float64)
    return model.utility_means(observation[None], n_eval=n_eval)[0]


def greedy_joint_action(model: JointValueModel, observations: np.ndarray,
                        n_eval: int | None = None) -> list[int]:
    """Each agent's argmax of its mean utility; ties go to the lowest index."""
    observations = np.asarray(observations, dtype=np.float64)
    means = model.utility_means(observations, n_eval=n_eval)
    return [int(np.argmax(row)) for row in means]


def mix_expected(model: JointValueModel, q_values, state_row, *, target: bool = False) -> float:
    """Mix K expected utilities into the joint expected value."""
    q = np.asarray(q_values, dtype=np.float64).reshape(1, -1)
    if q.shape[1] != model.num_agents:
        raise NetworkError(f"expected {model.num_agents} utilities, got {q.shape[1]}")
    state = np.asarray(state_row, dtype=np.float64).reshape(1, -1)
    return float(model.mix_graph(ad.constant(q), state, target=target).value[0])


def _shared_grid(model: JointValueModel, omegas) -> np.ndarray:
    grid = np.asarray(omegas, dtype=np.float64)
    if grid.ndim == 2:
        if grid.shape[0] != model.num_agents:
            raise NetworkError(
                f"per-agent grids must be ({model.num_agents}, n), got {grid.shape}"
            )
        if np.any(grid != grid[0]):
            raise NetworkError("agents must share one omega grid (comonotonic coupling)")
        grid = grid[0]
    if grid.ndim != 1 or grid.size < 1:
        raise NetworkError(f"omegas must be a non-empty vector, got shape {grid.shape}")
    return grid


def compose_joint_quantiles(model: JointValueModel, observations: np.ndarray, state_row,
                            omegas, actions: Sequence[int], *, target: bool = False) -> QuantileBatch:
    """Joint return quantiles at shared omegas for one joint action."""
    grid = _shared_grid(model, omegas)
    observations = np.asarray(observations, dtype=np.float64)
    if observations.shape != (model.num_agents, model.obs_dim):
        raise NetworkError(
            f"expected observations of shape ({model.num_agents}, {model.obs_dim}), "
            f"got {observations.shape}"
        )
    state = np.asarray(state_row, dtype=np.float64).reshape(1, -1)
    action_arr = np.asarray(actions, dtype=np.int64).reshape(1, -1)
    node = model.compose_graph(observations[None], state, action_arr, grid[None], target=target)
    return QuantileBatch(grid.copy(), node.value[0])


def sync_target(model: JointValueModel) -> None:
    """Make the target parameters an exact copy of the online parameters."""
    model.sync_target()
