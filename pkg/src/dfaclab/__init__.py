"""dfaclab: distributional value-function factorization for cooperative
multi-agent Q-learning, at desk scale.

Subpackages:
    autodiff      -- float64 tape, reverse-mode gradients, RMSProp
    distribution  -- quantile batches, quantile Huber regression, mixtures
    envs          -- stochastic matrix games, including the two-step game
    networks      -- implicit-quantile utilities, mixers, joint composition
    training      -- replay, distributional TD targets, the training loop
    reporting     -- factorization tables, CDF dumps, metrics files
"""

from dfaclab.autodiff import ParameterSet, Tensor, backward, optimizer_step
from dfaclab.distribution import (
    LossConfig,
    QuantileBatch,
    empirical_moments,
    expectation,
    huber,
    pairwise_loss,
    quantile_huber,
    quantile_mixture,
    wasserstein,
)
from dfaclab.envs import MatrixGame, load_matrix_game, two_step_game
from dfaclab.networks import (
    CosineEmbeddingSpec,
    JointValueModel,
    MixerSpec,
    compose_joint_quantiles,
    greedy_joint_action,
    mix_expected,
    sync_target,
    utility_mean,
    utility_quantiles,
)
from dfaclab.training import (
    ReplayBuffer,
    RunMetrics,
    TrainConfig,
    collect_episode,
    compute_targets,
    digm_consistency_check,
    run_training,
    train_step,
)

__version__ = "0.1.0"
