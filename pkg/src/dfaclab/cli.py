"""Command-line entry point.

Subcommands: train, eval, table, cdf, selftest.  The output directory is
taken from --out, falling back to the DFAC_OUT_DIR environment variable,
then the current directory.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from dfaclab import autodiff as ad
from dfaclab.distribution import (
    LossConfig,
    QuantileBatch,
    empirical_moments,
    expectation,
    quantile_huber,
    quantile_mixture,
)
from dfaclab.envs import load_matrix_game_file, two_step_game
from dfaclab.networks import ALGORITHMS, JointValueModel, compose_joint_quantiles
from dfaclab.reporting import (
    ReportError,
    cdf_dump,
    factorization_table,
    load_snapshot,
    metrics_csv,
    save_snapshot,
)
from dfaclab.training import (
    TrainConfig,
    digm_consistency_check,
    greedy_returns,
    run_training,
)

__all__ = ["cli_main", "main"]


def _resolve_out(arg: str | None) -> str:
    out = arg or os.environ.get("DFAC_OUT_DIR") or "."
    os.makedirs(out, exist_ok=True)
    return out


def _make_env(args):
    if getattr(args, "game", None):
        return load_matrix_game_file(args.game)
    return two_step_game()


def _load_train_config(args) -> TrainConfig:
    fields: dict = {}
    if getattr(args, "config", None):
        with open(args.config, "r", encoding="utf-8") as handle:
            raw = json.load(handle)
        if not isinstance(raw, dict):
            raise ValueError(f"config file {args.config} must hold a JSON object")
        loss_raw = raw.pop("loss", None)
        fields.update(raw)
        if loss_raw:
            fields["loss"] = LossConfig(**loss_raw)
    if args.algo is not None:
        fields["algo"] = args.algo
    if args.seed is not None:
        fields["seed"] = args.seed
    if getattr(args, "episodes", None) is not None:
        fields["total_episodes"] = args.episodes
    return TrainConfig(**fields)


def _cmd_train(args) -> int:
    env = _make_env(args)
    config = _load_train_config(args)
    out = _resolve_out(args.out)
    metrics, model = run_training(env, config)
    metrics_path = os.path.join(out, "metrics.csv")
    metrics_csv(metrics, metrics_path)
    snapshot_path = os.path.join(out, "model.snapshot")
    save_snapshot(model, snapshot_path, extra={"config": json.loads(_config_json(config))})
    if metrics.factorization is not None:
        table_path = os.path.join(out, "factorization.json")
        with_tmp = metrics.factorization.to_json()
        _write(table_path, with_tmp)
        print(f"wrote {table_path}")
    print(f"wrote {metrics_path}")
    print(f"wrote {snapshot_path}")
    if metrics.points:
        last = metrics.points[-1]
        print(
            f"final evaluation: episode {last.episode}, "
            f"greedy return {last.greedy_return_mean:.3f}, loss {last.td_loss:.4f}"
        )
    return 0


def _write(path, text) -> None:
    from dfaclab.reporting import _atomic_write

    _atomic_write(path, text if text.endswith("\n") else text + "\n")


def _config_json(config: TrainConfig) -> str:
    payload = {k: v for k, v in config.__dict__.items() if k != "loss"}
    payload["loss"] = dict(config.loss.__dict__)
    return json.dumps(payload, indent=2, sort_keys=True)


def _cmd_eval(args) -> int:
    env = _make_env(args)
    model = load_snapshot(args.snapshot)
    rng = np.random.default_rng(args.seed if args.seed is not None else 0)
    returns = greedy_returns(env, model, args.episodes, rng)
    mean, var = empirical_moments(returns)
    print(json.dumps({
        "episodes": int(args.episodes),
        "greedy_return_mean": mean,
        "greedy_return_variance": var,
    }, indent=2, sort_keys=True))
    return 0


def _cmd_table(args) -> int:
    env = _make_env(args)
    model = load_snapshot(args.snapshot)
    table = factorization_table(model, env, n_samples=args.samples)
    out = _resolve_out(args.out)
    path = os.path.join(out, "factorization.json")
    _write(path, table.to_json())
    print(table.to_json())
    print(f"wrote {path}", file=sys.stderr)
    return 0


def _cmd_cdf(args) -> int:
    env = _make_env(args)
    model = load_snapshot(args.snapshot)
    labels = [part.strip() for part in args.actions.split(",")]
    dump = cdf_dump(model, env, args.state, labels, n_samples=args.samples)
    out = _resolve_out(args.out)
    path = os.path.join(out, f"cdf_{args.state}_{'-'.join(labels)}.csv")
    dump.write(path)
    print(f"wrote {path}")
    return 0


# -- selftest invariant suites ----------------------------------------------


def _selftest_gradients() -> str | None:
    rng = np.random.default_rng(7)
    worst = 0.0
    for _ in range(20):
        params = ad.ParameterSet()
        dims = [int(rng.integers(2, 6)) for _ in range(4)]
        x = rng.standard_normal((3, dims[0]))
        weights = []
        for i in range(3):
            weights.append(params.add(f"w{i}", rng.standard_normal((dims[i], dims[i + 1])) * 0.5))
        h = ad.constant(x)
        for i, w in enumerate(weights):
            h = ad.matmul(h, w)
            if i < 2:
                h = ad.relu(h)
        loss = ad.reduce_mean(ad.mul(h, h))
        ad.backward(loss)
        analytic = {name: node.grad.copy() for name, node in params.items()}

        def value_at() -> float:
            h2 = x
            for i, w in enumerate(weights):
                h2 = h2 @ w.value
                if i < 2:
                    h2 = np.maximum(h2, 0.0)
            return float(np.mean(h2 * h2))

        for name, node in params.items():
            flat = node.value.ravel()
            for j in range(flat.size):
                orig = flat[j]
                flat[j] = orig + 1e-5
                up = value_at()
                flat[j] = orig - 1e-5
                down = value_at()
                flat[j] = orig
                numeric = (up - down) / 2e-5
                a = analytic[name].ravel()[j]
                err = abs(a - numeric) / max(1e-3, abs(a), abs(numeric))
                worst = max(worst, err)
        params.zero_grads()
    if worst > 1e-4:
        return f"max relative gradient error {worst:.2e} exceeds 1e-4"
    return None


def _selftest_monotonicity() -> str | None:
    rng = np.random.default_rng(11)
    for i in range(100):
        model = JointValueModel("dmix", num_agents=3, obs_dim=4, state_dim=3,
                                n_actions=2, rng=rng)
        q = rng.standard_normal((1, 3))
        state = rng.standard_normal((1, 3))
        base = float(model.mix_graph(ad.constant(q), state).value[0])
        for k in range(3):
            bumped = q.copy()
            bumped[0, k] += 0.1
            out = float(model.mix_graph(ad.constant(bumped), state).value[0])
            if out < base - 1e-12:
                return f"instance {i}: raising utility {k} lowered the mix ({base} -> {out})"
    return None


def _selftest_ddn_identity() -> str | None:
    rng = np.random.default_rng(23)
    env = two_step_game()
    model = JointValueModel.for_env("ddn", env, rng)
    obs = env.observations_for("2B")
    grid = (np.arange(16) + 0.5) / 16
    joint = compose_joint_quantiles(model, obs, env.state_row("2B"), grid, (1, 1))
    per_agent = model.utility_values(obs, grid)
    direct = per_agent[0, 1] + per_agent[1, 1]
    if np.max(np.abs(joint.values - direct)) > 1e-12:
        return "additive composition deviates from the pointwise sum"
    shape_mean = np.mean(joint.values) - (np.mean(per_agent[0, 1]) + np.mean(per_agent[1, 1]))
    if abs(shape_mean) > 1e-12:
        return f"in-sample shape term has non-zero mean {shape_mean:.2e}"
    return None


def _selftest_digm() -> str | None:
    rng = np.random.default_rng(31)
    for algo in ("ddn", "dmix"):
        for i in range(50):
            model = JointValueModel(algo, num_agents=2, obs_dim=5, state_dim=3,
                                    n_actions=3, rng=rng)
            obs = rng.standard_normal((2, 5))
            state = rng.standard_normal(3)
            if not digm_consistency_check(model, obs, state, n_grid=16):
                return f"{algo} instance {i}: joint argmax disagrees with per-agent argmaxes"
    return None


def _selftest_mixture() -> str | None:
    rng = np.random.default_rng(41)
    from scipy.special import ndtri

    omegas = np.sort(rng.random(100000))
    normal = QuantileBatch(omegas, ndtri(np.clip(omegas, 1e-12, 1 - 1e-12)))
    mix = quantile_mixture([normal, normal], [1.0, 1.0])
    _, var = empirical_moments(mix.values)
    if abs(var - 4.0) > 0.1:
        return f"comonotonic sum variance {var:.3f} outside 4 +/- 0.1"
    lhs = expectation(mix)
    rhs = 2.0 * expectation(normal)
    if abs(lhs - rhs) > 1e-12:
        return f"expectation linearity violated by {abs(lhs - rhs):.2e}"
    return None


def _selftest_env_moments() -> str | None:
    env = two_step_game()
    rng = np.random.default_rng(17)
    rewards = []
    for _ in range(10000):
        env.reset(rng)
        env.step((1, 0), rng)
        r, _, _ = env.step((1, 1), rng)
        rewards.append(r)
    mean, var = empirical_moments(rewards)
    if abs(mean - 8.0) > 0.2 or abs(var - 29.0) > 2.0:
        return f"(2B, B,B) sampled moments ({mean:.3f}, {var:.3f}) off Normal(8, 29)"
    env.reset(rng)
    env.step((0, 0), rng)
    r, _, _ = env.step((1, 1), rng)
    if r != 7.0:
        return f"(2A, B,B) reward {r} is not exactly 7"
    return None


def _selftest_loss_kernel() -> str | None:
    cases = [
        (quantile_huber(0.5, 0.5, 1.0), 0.0625),
        (quantile_huber(-0.5, 0.5, 1.0), 0.0625),
        (quantile_huber(0.0, 0.7, 1.0), 0.0),
    ]
    for got, want in cases:
        if abs(got - want) > 1e-12:
            return f"quantile Huber value {got} != {want}"
    return None


_SELFTESTS = [
    ("gradient_fidelity", _selftest_gradients),
    ("mixer_monotonicity", _selftest_monotonicity),
    ("ddn_identity", _selftest_ddn_identity),
    ("digm_consistency", _selftest_digm),
    ("quantile_mixture", _selftest_mixture),
    ("two_step_moments", _selftest_env_moments),
    ("loss_kernel", _selftest_loss_kernel),
]


def _cmd_selftest(args) -> int:
    failures = 0
    for name, check in _SELFTESTS:
        problem = check()
        if problem is None:
            print(f"PASS {name}")
        else:
            failures += 1
            print(f"FAIL {name}: {problem}")
    return 1 if failures else 0


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dfaclab",
        description="Distributional value-function factorization on stochastic matrix games.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add_env_flags(p):
        p.add_argument("--env", choices=["two_step"], default="two_step",
                       help="built-in environment (default: two_step)")
        p.add_argument("--game", help="path to a .game matrix-game config file")

    train = sub.add_parser("train", help="train a model and write artifacts")
    add_env_flags(train)
    train.add_argument("--algo", choices=sorted(ALGORITHMS), default=None,
                       help="algorithm tag (default from config: dmix)")
    train.add_argument("--seed", type=int, default=None)
    train.add_argument("--episodes", type=int, default=None,
                       help="override total training episodes")
    train.add_argument("--config", help="JSON file overriding TrainConfig fields")
    train.add_argument("--out", help="output directory (else $DFAC_OUT_DIR, else .)")
    train.set_defaults(func=_cmd_train)

    evalp = sub.add_parser("eval", help="evaluate a snapshot's greedy policy")
    add_env_flags(evalp)
    evalp.add_argument("--snapshot", required=True)
    evalp.add_argument("--episodes", type=int, default=1000)
    evalp.add_argument("--seed", type=int, default=0)
    evalp.set_defaults(func=_cmd_eval)

    table = sub.add_parser("table", help="emit the learned factorization table")
    add_env_flags(table)
    table.add_argument("--snapshot", required=True)
    table.add_argument("--samples", type=int, default=10000)
    table.add_argument("--out", help="output directory (else $DFAC_OUT_DIR, else .)")
    table.set_defaults(func=_cmd_table)

    cdf = sub.add_parser("cdf", help="dump sampled CDF curves for one cell")
    add_env_flags(cdf)
    cdf.add_argument("--snapshot", required=True)
    cdf.add_argument("--state", required=True)
    cdf.add_argument("--actions", required=True, help="comma-separated action labels, e.g. B,B")
    cdf.add_argument("--samples", type=int, default=10000)
    cdf.add_argument("--out", help="output directory (else $DFAC_OUT_DIR, else .)")
    cdf.set_defaults(func=_cmd_cdf)

    selftest = sub.add_parser("selftest", help="run the invariant suites")
    selftest.set_defaults(func=_cmd_selftest)
    return parser


def cli_main(argv=None) -> int:
    """Parse arguments and dispatch; returns the process exit status."""
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except (OSError, ValueError, ReportError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(cli_main(sys.argv[1:]))
