"""Tables, plot-data dumps, metric files, and model snapshots.

Everything written here is plain text (CSV for curves, JSON for tables and
snapshots), deterministic for a fixed model, and written atomically
(temp file + rename).  Plot rendering is out of scope; the dumps carry
enough for any external plotter.
"""

from __future__ import annotations

import json
import os
import tempfile
from dataclasses import dataclass, field

import numpy as np
from scipy.special import ndtri

from dfaclab.distribution import empirical_moments, stratified_grid
from dfaclab.envs import MatrixGame
from dfaclab.networks import (
    CosineEmbeddingSpec,
    JointValueModel,
    compose_joint_quantiles,
    utility_quantiles,
)
from dfaclab.training import RunMetrics

__all__ = [
    "ReportError",
    "FactorizationTable",
    "CdfSampleDump",
    "factorization_table",
    "cdf_dump",
    "metrics_csv",
    "save_snapshot",
    "load_snapshot",
]

SNAPSHOT_VERSION = 1


class ReportError(ValueError):
    """Invalid reporting request (unknown state, bad sample count, ...)."""


def _atomic_write(path, text: str) -> None:
    directory = os.path.dirname(os.path.abspath(path)) or "."
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as handle:
            handle.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


@dataclass
class FactorizationTable:
    """Sampled moments of the learned factorization, per state.

    joint[state]["a1,a2"] holds mean/variance of the composed joint
    quantiles (absent for mixerless algorithms); individual[state][k] maps
    each agent action label to its utility moments; state_value holds the
    monotonic mixer's state-dependent bias.  All moments use Bessel's
    correction over the stratified sample grid.
    """

    algo: str
    n_samples: int
    states: list[str]
    action_labels: list[list[str]]
    joint: dict = field(default_factory=dict)
    individual: dict = field(default_factory=dict)
    state_value: dict = field(default_factory=dict)

    def to_json(self) -> str:
        payload = {
            "algo": self.algo,
            "n_samples": self.n_samples,
            "states": self.states,
            "action_labels": self.action_labels,
            "joint": self.joint,
            "individual": self.individual,
            "state_value": self.state_value,
        }
        return json.dumps(payload, indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "FactorizationTable":
        raw = json.loads(text)
        return cls(
            algo=raw["algo"],
            n_samples=raw["n_samples"],
            states=raw["states"],
            action_labels=raw["action_labels"],
            joint=raw["joint"],
            individual=raw["individual"],
            state_value=raw["state_value"],
        )


def _moments(values) -> dict:
    mu, sigma2 = empirical_moments(values)
    return {"mu": mu, "sigma2": sigma2}


def factorization_table(model: JointValueModel, env, n_samples: int = 10000) -> FactorizationTable:
    """Tabulate learned joint and per-agent moments for every game cell."""
    if not isinstance(env, MatrixGame):
        raise ReportError("factorization tables need an environment with enumerable states")
    if n_samples < 1000:
        raise ReportError(f"n_samples must be >= 1000, got {n_samples}")
    grid = stratified_grid(n_samples)
    table = FactorizationTable(
        algo=model.algo,
        n_samples=n_samples,
        states=list(env.config.states),
        action_labels=[list(labels) for labels in env.config.actions],
    )
    for state in env.config.states:
        obs = env.observations_for(state)
        values = model.utility_values(obs, grid)
        table.individual[state] = [
            {label: _moments(values[k, a]) for a, label in enumerate(env.config.actions[k])}
            for k in range(model.num_agents)
        ]
        if model.mixer.variant != "none":
            state_row = env.state_row(state)
            cells = {}
            for joint_labels in env.config.joint_actions():
                idx = env.action_indices(joint_labels)
                batch = compose_joint_quantiles(model, obs, state_row, grid, idx)
                cells[",".join(joint_labels)] = _moments(batch.values)
            table.joint[state] = cells
        if model.mixer.variant == "monotonic":
            bias = float(model.state_value_graph(env.state_row(state)[None]).value[0])
            # The bias is a deterministic per-state scalar: zero variance.
            table.state_value[state] = {"mu": bias, "sigma2": 0.0}
    return table


@dataclass
class CdfSampleDump:
    """Per-curve sorted (value, cumulative probability) pairs.

    Sampled curves (per-agent utilities and the composed joint) use the
    empirical convention p_i = i/n over sorted values; the analytic true
    curve carries the Normal quantiles at the midpoint grid (i-1/2)/n so
    its probabilities are strictly increasing even when the distribution
    is degenerate (a step).
    """

    state: str
    actions: list[str]
    curves: dict[str, tuple[np.ndarray, np.ndarray]]

    def to_csv(self) -> str:
        lines = ["curve,value,cum_prob"]
        for name, (values, probs) in self.curves.items():
            for v, p in zip(values, probs):
                lines.append(f"{name},{v:.6f},{p:.6f}")
        return "\n".join(lines) + "\n"

    def write(self, path) -> None:
        _atomic_write(path, self.to_csv())


def cdf_dump(model: JointValueModel, env, state: str, action_labels, n_samples: int = 10000) -> CdfSampleDump:
    """Sampled utility/joint quantiles plus the true return CDF for a cell."""
    if not isinstance(env, MatrixGame):
        raise ReportError("CDF dumps need a matrix-game environment")
    if state not in env.config.states:
        raise ReportError(f"unknown state '{state}'")
    labels = tuple(action_labels)
    try:
        idx = env.action_indices(labels)
    except Exception as exc:
        raise ReportError(str(exc)) from None
    if n_samples < 2:
        raise ReportError(f"n_samples must be >= 2, got {n_samples}")

    grid = stratified_grid(n_samples)
    obs = env.observations_for(state)
    empirical = (np.arange(1, n_samples + 1)) / n_samples
    curves: dict[str, tuple[np.ndarray, np.ndarray]] = {}
    for k in range(model.num_agents):
        values = utility_quantiles(model, obs[k], grid)[idx[k]]
        curves[f"agent{k + 1}"] = (np.sort(values), empirical)
    if model.mixer.variant != "none":
        joint = compose_joint_quantiles(model, obs, env.state_row(state), grid, idx)
        curves["joint"] = (np.sort(joint.values), empirical)
    mu, sigma2 = env.config.payoffs[(state, labels)]
    true_values = mu + np.sqrt(sigma2) * ndtri(grid)
    curves["true"] = (true_values, grid.copy())
    return CdfSampleDump(state=state, actions=list(labels), curves=curves)


def metrics_csv(metrics: RunMetrics, path) -> None:
    """Write the evaluation trace as CSV with fixed 6-decimal formatting."""
    lines = ["episode,greedy_return_mean,td_loss,epsilon"]
    for point in metrics.points:
        lines.append(
            f"{point.episode},{point.greedy_return_mean:.6f},"
            f"{point.td_loss:.6f},{point.epsilon:.6f}"
        )
    _atomic_write(path, "\n".join(lines) + "\n")


def save_snapshot(model: JointValueModel, path, extra: dict | None = None) -> None:
    """Dump a model as versioned, self-describing JSON (name, shape, values)."""
    payload = {
        "format_version": SNAPSHOT_VERSION,
        "algo": model.algo,
        "num_agents": model.num_agents,
        "obs_dim": model.obs_dim,
        "state_dim": model.state_dim,
        "n_actions": model.n_actions,
        "n_eval": model.n_eval,
        "mixing_width": model.mixer.mixing_width,
        "cosine": {"n": model.cosine.n, "embed_dim": model.cosine.embed_dim},
        "params": {
            name: {"shape": list(node.value.shape), "data": node.value.ravel().tolist()}
            for name, node in model.params.items()
        },
        "target": {
            name: {"shape": list(value.shape), "data": value.ravel().tolist()}
            for name, value in model.target.items()
        },
    }
    if extra:
        payload["extra"] = extra
    _atomic_write(path, json.dumps(payload, indent=2, sort_keys=True))


def _unpack(entry) -> np.ndarray:
    return np.array(entry["data"], dtype=np.float64).reshape(entry["shape"])


def load_snapshot(path) -> JointValueModel:
    """Rebuild a model from a snapshot written by save_snapshot."""
    try:
        with open(path, "r", encoding="utf-8") as handle:
            raw = json.load(handle)
    except FileNotFoundError:
        raise ReportError(f"snapshot not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ReportError(f"snapshot is not valid JSON: {exc}") from None
    version = raw.get("format_version")
    if version != SNAPSHOT_VERSION:
        raise ReportError(f"unsupported snapshot version {version}")
    model = JointValueModel(
        raw["algo"],
        num_agents=raw["num_agents"],
        obs_dim=raw["obs_dim"],
        state_dim=raw["state_dim"],
        n_actions=raw["n_actions"],
        rng=np.random.default_rng(0),
        cosine=CosineEmbeddingSpec(**raw["cosine"]),
        mixing_width=raw["mixing_width"],
        n_eval=raw["n_eval"],
    )
    model.params.load_values({name: _unpack(entry) for name, entry in raw["params"].items()})
    model.target = {name: _unpack(entry) for name, entry in raw["target"].items()}
    model._refresh_target_nodes()
    return model
