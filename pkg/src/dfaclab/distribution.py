"""Distributional primitives: quantile batches, quantile Huber regression,
Wasserstein distances, quantile mixtures, and empirical moments.

A return distribution is represented by samples of its generalized inverse
CDF: pairs (omega, F^-1(omega)) with omega in [0, 1].  All functions here
are pure; they are safe to call from any thread.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from dfaclab import autodiff as ad
from dfaclab.autodiff import Tensor

__all__ = [
    "DistributionError",
    "QuantileBatch",
    "LossConfig",
    "stratified_grid",
    "huber",
    "quantile_huber",
    "pairwise_loss",
    "pairwise_loss_graph",
    "huber_loss_graph",
    "expectation",
    "wasserstein",
    "quantile_mixture",
    "empirical_moments",
]


class DistributionError(ValueError):
    """Invalid input to a distributional primitive."""


def stratified_grid(n: int) -> np.ndarray:
    """Fixed evaluation grid omega_i = (i - 1/2) / n, i = 1..n.

    Used wherever a reproducible quantile sample is needed (greedy action
    selection, tables, CDF dumps); training draws omegas uniformly instead.
    """
    if n < 1:
        raise DistributionError(f"stratified grid needs n >= 1, got {n}")
    return (np.arange(n, dtype=np.float64) + 0.5) / n


def _as_levels(omegas) -> np.ndarray:
    arr = np.atleast_1d(np.asarray(omegas, dtype=np.float64))
    if arr.ndim != 1:
        raise DistributionError(f"quantile levels must be 1-D, got shape {arr.shape}")
    if arr.size < 1:
        raise DistributionError("quantile levels must be non-empty")
    if np.any(arr < 0.0) or np.any(arr > 1.0):
        raise DistributionError("quantile levels must lie in [0, 1]")
    return arr


class QuantileBatch:
    """Paired quantile levels and values of a generalized inverse CDF."""

    __slots__ = ("omegas", "values")

    def __init__(self, omegas, values):
        self.omegas = _as_levels(omegas)
        self.values = np.atleast_1d(np.asarray(values, dtype=np.float64))
        if self.values.ndim != 1 or len(self.values) != len(self.omegas):
            raise DistributionError(
                f"levels and values must match: {len(self.omegas)} levels, "
                f"values shape {self.values.shape}"
            )

    def __len__(self) -> int:
        return len(self.omegas)

    def __repr__(self) -> str:
        return f"QuantileBatch(n={len(self)})"

    def same_grid(self, other: "QuantileBatch") -> bool:
        return np.array_equal(self.omegas, other.omegas)


@dataclass(frozen=True)
class LossConfig:
    """Quantile regression loss settings.

    kappa: Huber threshold; n_pred/n_target: prediction and target sample
    counts per update; n_eval: stratified sample count for mean estimates.
    """

    kappa: float = 1.0
    n_pred: int = 8
    n_target: int = 8
    n_eval: int = 32

    def __post_init__(self):
        if self.kappa <= 0:
            raise DistributionError(f"kappa must be positive, got {self.kappa}")
        for field in ("n_pred", "n_target", "n_eval"):
            if getattr(self, field) < 1:
                raise DistributionError(f"{field} must be >= 1, got {getattr(self, field)}")


def huber(delta: float, kappa: float = 1.0) -> float:
    """Huber loss: quadratic within |delta| <= kappa, linear outside."""
    if kappa <= 0:
        raise DistributionError(f"kappa must be positive, got {kappa}")
    adelta = abs(delta)
    if adelta <= kappa:
        return 0.5 * delta * delta
    return kappa * (adelta - 0.5 * kappa)


def quantile_huber(delta: float, omega: float, kappa: float = 1.0) -> float:
    """Asymmetric Huber loss: weight omega for delta >= 0, (1-omega) below."""
    if not 0.0 <= omega <= 1.0:
        raise DistributionError(f"quantile level must lie in [0, 1], got {omega}")
    weight = abs(omega - (1.0 if delta < 0 else 0.0))
    return weight * huber(delta, kappa) / kappa


def pairwise_loss(pred: QuantileBatch, target_values, kappa: float = 1.0) -> float:
    """Sum of pairwise quantile-Huber losses, averaged over targets.

    (1/N') sum_i sum_j rho_{omega_i}(target_j - pred_i).  Differentiable
    through the tape when built via pairwise_loss_graph; this wrapper
    evaluates the same graph on constants.
    """
    node = pairwise_loss_graph(ad.constant(pred.values), pred.omegas, target_values, kappa)
    return float(node.value)


def _huber_graph(delta: Tensor, kappa: float) -> Tensor:
    # min(|d|,k)^2/2 + k*relu(|d|-k) reproduces both Huber branches.
    adelta = ad.absolute(delta)
    clipped = ad.affine(ad.relu(ad.affine(adelta, -1.0, kappa)), -1.0, kappa)
    quad = ad.affine(ad.mul(clipped, clipped), 0.5, 0.0)
    lin = ad.affine(ad.relu(ad.affine(adelta, 1.0, -kappa)), kappa, 0.0)
    return ad.add(quad, lin)


def pairwise_loss_graph(pred_values: Tensor, pred_omegas, target_values, kappa: float = 1.0) -> Tensor:
    """Tape version of pairwise_loss.

    pred_values is [n_pred] or [batch, n_pred] (matching pred_omegas);
    target_values is [n_target] or [batch, n_target].  Returns a scalar
    node: the batch mean of the per-sample pairwise loss.  The asymmetric
    weight |omega - 1{delta < 0}| is a constant of the graph; gradients
    flow through the Huber term only.
    """
    if kappa <= 0:
        raise DistributionError(f"kappa must be positive, got {kappa}")
    omegas = np.asarray(pred_omegas, dtype=np.float64)
    targets = np.asarray(target_values, dtype=np.float64)
    pred = pred_values if pred_values.value.ndim == 2 else ad.reshape(pred_values, (1, -1))
    if omegas.ndim == 1:
        omegas = omegas[None, :]
    if targets.ndim == 1:
        targets = targets[None, :]
    batch, n_pred = pred.value.shape
    if omegas.shape != (batch, n_pred):
        raise DistributionError(
            f"omega shape {omegas.shape} does not match predictions {(batch, n_pred)}"
        )
    if targets.shape[0] != batch or targets.shape[1] < 1:
        raise DistributionError(f"target shape {targets.shape} does not match batch {batch}")
    if np.any(omegas < 0.0) or np.any(omegas > 1.0):
        raise DistributionError("quantile levels must lie in [0, 1]")
    n_target = targets.shape[1]

    pred3 = ad.broadcast_to(ad.reshape(pred, (batch, n_pred, 1)), (batch, n_pred, n_target))
    target3 = np.broadcast_to(targets[:, None, :], (batch, n_pred, n_target))
    delta = ad.sub(target3, pred3)
    hub = _huber_graph(delta, kappa)
    weight = np.abs(omegas[:, :, None] - (delta.value < 0.0))
    rho = ad.mul(hub, weight / kappa)
    return ad.affine(ad.reduce_sum(rho), 1.0 / (batch * n_target), 0.0)


def huber_loss_graph(pred: Tensor, target_values, kappa: float = 1.0) -> Tensor:
    """Plain (symmetric) Huber regression loss, batch mean.

    The degenerate single-sample case used by the expected-value
    algorithms; no quantile weighting.
    """
    if kappa <= 0:
        raise DistributionError(f"kappa must be positive, got {kappa}")
    targets = np.asarray(target_values, dtype=np.float64)
    if targets.shape != pred.value.shape:
        raise DistributionError(
            f"target shape {targets.shape} does not match predictions {pred.value.shape}"
        )
    delta = ad.sub(targets, pred)
    return ad.reduce_mean(_huber_graph(delta, kappa))


def expectation(batch: QuantileBatch) -> float:
    """Mean of the sampled quantile values (Monte-Carlo expectation)."""
    return float(np.mean(batch.values))


def wasserstein(a: QuantileBatch, b: QuantileBatch, p: float = 1.0) -> float:
    """p-Wasserstein distance estimated on a shared sorted omega grid."""
    if p < 1.0:
        raise DistributionError(f"order p must be >= 1, got {p}")
    if not a.same_grid(b):
        raise DistributionError("quantile batches must share the same omega grid")
    if np.any(np.diff(a.omegas) < 0.0):
        raise DistributionError("omega grid must be sorted non-decreasing")
    gaps = np.abs(a.values - b.values)
    return float(np.mean(gaps**p) ** (1.0 / p))


def quantile_mixture(components: Sequence[QuantileBatch], betas) -> QuantileBatch:
    """Non-negative linear combination of quantile functions on one grid.

    Pointwise F^-1(omega) = sum_k beta_k * F_k^-1(omega); equivalently the
    quantile function of the comonotonic sum of the scaled components.
    """
    if len(components) < 1:
        raise DistributionError("quantile mixture needs at least one component")
    weights = np.asarray(betas, dtype=np.float64)
    if weights.ndim != 1 or len(weights) != len(components):
        raise DistributionError(
            f"need one beta per component: {len(components)} components, "
            f"betas shape {weights.shape}"
        )
    if np.any(weights < 0.0):
        raise DistributionError("mixture weights must be non-negative")
    grid = components[0].omegas
    for k, comp in enumerate(components[1:], start=1):
        if not np.array_equal(grid, comp.omegas):
            raise DistributionError(f"component {k} does not share the omega grid of component 0")
    values = np.zeros_like(components[0].values)
    for weight, comp in zip(weights, components):
        values += weight * comp.values
    return QuantileBatch(grid.copy(), values)


def empirical_moments(samples) -> tuple[float, float]:
    """Sample mean and unbiased (Bessel-corrected) variance."""
    arr = np.asarray(samples, dtype=np.float64).ravel()
    if arr.size < 2:
        raise DistributionError(f"variance needs at least 2 samples, got {arr.size}")
    return float(np.mean(arr)), float(np.var(arr, ddof=1))
