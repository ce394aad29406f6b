"""
Tests for the multi-critic TD3 learner: replay buffer, TD targets, the
min-critic actor gradient, the training loop and resume.
"""
from pathlib import Path

import numpy as np
import pytest

from tests.conftest import REQUIRES_LONG_RUN
from voltreach.config import load_config
from voltreach.errors import CheckpointFormatError, InfeasibleInitialConditionError, TrainingAbort
from voltreach.models import GridSpec, Td3Config, TrainSchedule
from voltreach.oracle import compare_learned_vs_oracle, evaluation_states, mc_estimate, risk_surface
from voltreach.reach import PowerReachEnv
from voltreach.td3 import (MAX_RESET_FAILURES, ActorPolicy, Batch, MultiCriticEnsemble, ReplayBuffer, Trainer,
                           Transition, actor_gradient, actor_update, critic_update, evaluate_policy, td_targets, train)
from voltreach.toy import ToyEnv, dp_evaluate_policy, dp_solve_toy, zero_policy

SMALL = Td3Config(hidden=[16, 16], batch_size=32, actor_lr=1e-3, critic_lr=1e-3)
SHORT = TrainSchedule(env_steps=300, learning_starts=100, eval_every=100, eval_episodes=5, checkpoint_every=150)


def random_batch(rng, n, obs_dim, n_heads, done=0.0):
    return Batch(obs=rng.uniform(-1, 1, (n, obs_dim)), actions=rng.uniform(-1, 1, (n, 1)),
                 rewards=rng.integers(0, 2, (n, n_heads)).astype(float),
                 next_obs=rng.uniform(-1, 1, (n, obs_dim)), dones=np.full((n, n_heads), done))


def test_replay_buffer_ring():
    buf = ReplayBuffer(3, obs_dim=2, n_heads=1)
    for i in range(5):
        buf.add(Transition(np.array([i, i]), 0.1 * i, np.array([0.0]), np.array([i, i]), np.array([0.0])))

    assert len(buf) == 3
    assert sorted(buf.obs[:, 0]) == [2.0, 3.0, 4.0]
    batch = buf.sample(8, np.random.default_rng(0))
    assert len(batch) == 8
    assert set(batch.obs[:, 0]) <= {2.0, 3.0, 4.0}


def test_empty_buffer_underflow():
    buf = ReplayBuffer(10, obs_dim=2, n_heads=1)
    with pytest.raises(TrainingAbort) as err:
        buf.sample(4, np.random.default_rng(0))
    assert err.value.reason == "buffer_underflow"


def test_ensemble_heads():
    """Test one critic pair per mechanism plus the total head when M >= 2"""
    rng = np.random.default_rng(0)
    single = MultiCriticEnsemble.create(2, ["Lower"], SMALL, rng)
    double = MultiCriticEnsemble.create(2, ["Lower", "Upper"], SMALL, rng)
    no_total = MultiCriticEnsemble.create(2, ["Lower", "Upper"], SMALL.model_copy(update={"total_critic": False}), rng)

    assert single.n_heads == 1 and not single.has_total
    assert double.head_labels == ["Lower", "Upper", "total"] and double.has_total
    assert no_total.n_heads == 2
    assert set(double.networks()) == {"actor", "actor_target"} | {
        f"{kind}_{label}" for kind in ("q1", "q2", "q1_target", "q2_target") for label in ("Lower", "Upper", "total")}


def test_values_min_over_mechanisms():
    rng = np.random.default_rng(0)
    ens = MultiCriticEnsemble.create(3, ["A", "B"], SMALL, rng)
    obs = rng.uniform(-1, 1, (7, 3))
    values = ens.values(obs)

    assert np.allclose(values["min"], np.minimum(values["A"], values["B"]))
    assert values["total"].shape == (7,)


def test_td_targets_cut_at_terminal():
    """With done the target is the reward alone"""
    rng = np.random.default_rng(1)
    ens = MultiCriticEnsemble.create(3, ["A", "B"], SMALL, rng)
    batch = random_batch(rng, 16, 3, ens.n_heads, done=1.0)

    assert np.array_equal(td_targets(batch, ens, SMALL, rng), batch.rewards)


def test_td_targets_bootstrap():
    """Noise-free targets bootstrap from the smaller target critic at the target action"""
    cfg = SMALL.model_copy(update={"target_sigma": 0.0})
    rng = np.random.default_rng(2)
    ens = MultiCriticEnsemble.create(3, ["A"], cfg, rng)
    batch = random_batch(rng, 16, 3, ens.n_heads)

    a_next = np.clip(ens.actor_target.forward(batch.next_obs), -1.0, 1.0)
    x = np.hstack([batch.next_obs, a_next])
    pair = ens.heads[0]
    q_next = np.minimum(pair.q1_target.forward(x)[:, 0], pair.q2_target.forward(x)[:, 0])

    targets = td_targets(batch, ens, cfg, rng)
    assert np.allclose(targets[:, 0], batch.rewards[:, 0] + q_next)


def test_critic_update_fits_terminal_rewards():
    rng = np.random.default_rng(3)
    ens = MultiCriticEnsemble.create(3, ["A"], SMALL, rng)
    batch = random_batch(rng, 64, 3, ens.n_heads, done=1.0)

    first = critic_update(batch, ens, SMALL, rng)[0]
    for _ in range(300):
        last = critic_update(batch, ens, SMALL, rng)[0]
    assert last < first


def test_actor_gradient_matches_finite_differences():
    """The actor gradient follows the per-sample minimum critic"""
    rng = np.random.default_rng(4)
    cfg = SMALL.model_copy(update={"hidden": [8]})
    ens = MultiCriticEnsemble.create(3, ["A", "B"], cfg, rng)
    for pair in ens.heads:
        pair.q1.weights[-1] *= 100.0
    obs = rng.uniform(-1, 1, (6, 3))

    def objective():
        return float(np.mean(ens.values(obs)["min"]))

    _, grads = actor_gradient(obs, ens)
    delta = 1e-6
    for p, g in zip(ens.actor.params, grads):
        for idx in list(np.ndindex(p.shape))[:3]:
            keep = p[idx]
            p[idx] = keep + delta
            plus = objective()
            p[idx] = keep - delta
            minus = objective()
            p[idx] = keep
            assert -g[idx] == pytest.approx((plus - minus) / (2 * delta), rel=1e-4, abs=1e-8)


def test_actor_update_moves_targets():
    rng = np.random.default_rng(5)
    ens = MultiCriticEnsemble.create(3, ["A"], SMALL, rng)
    before = ens.actor_target.weights[0].copy()
    batch = random_batch(rng, 32, 3, ens.n_heads)

    actor_update(batch, ens, SMALL)
    expected = (1 - SMALL.polyak) * before + SMALL.polyak * ens.actor.weights[0]
    assert np.allclose(ens.actor_target.weights[0], expected)


def test_load_networks_requires_every_network():
    rng = np.random.default_rng(0)
    ens = MultiCriticEnsemble.create(2, ["A"], SMALL, rng)
    nets = ens.networks()
    del nets["q2_target_A"]

    with pytest.raises(CheckpointFormatError):
        ens.load_networks(nets)


def test_actor_policy_is_a_copy():
    rng = np.random.default_rng(0)
    ens = MultiCriticEnsemble.create(2, ["A"], SMALL, rng)
    policy = ActorPolicy(ens.actor)
    obs = np.array([0.1, 0.2])
    before = policy(obs)
    ens.actor.weights[-1] += 1.0

    assert policy(obs) == before
    assert -1.0 <= before <= 1.0


def test_train_rejects_small_warmup(toy):
    schedule = SHORT.model_copy(update={"learning_starts": 10})
    with pytest.raises(TrainingAbort) as err:
        train(ToyEnv(toy, sample_horizon=True), SMALL, schedule, seed=0)
    assert err.value.reason == "buffer_underflow"


def test_nan_loss_aborts(toy):
    trainer = Trainer(ToyEnv(toy, sample_horizon=True), SMALL, SHORT, seed=0)
    for _ in range(40):
        trainer.env_step()
    trainer.ensemble.heads[0].q1.weights[0][:] = np.nan

    with pytest.raises(TrainingAbort) as err:
        trainer.gradient_step()
    assert err.value.reason == "nan_loss"


def test_short_training_run(toy, tmp_path):
    """Test the loop bookkeeping: steps, updates, curve and periodic checkpoints"""
    trainer = train(ToyEnv(toy, sample_horizon=True), SMALL, SHORT, seed=0, config_hash="h", out_dir=tmp_path)

    assert trainer.step == 300
    assert trainer.updates == 200
    curve = trainer.learning_curve()
    assert list(curve["step"]) == [100, 200, 300]
    assert list(curve.columns) == ["step", "critic_loss_m1", "actor_obj", "eval_risk_total", "eval_risk_m1"]
    assert curve["eval_risk_total"].between(0.0, 1.0).all()
    assert (tmp_path / "checkpoints" / "step_00000150.ckpt").exists()
    assert (tmp_path / "checkpoints" / "step_00000300.ckpt").exists()


def test_resume_reproduces_uninterrupted_run(toy, tmp_path):
    """Test that stop/resume at step 150 gives bit-identical networks"""
    full = Trainer(ToyEnv(toy, sample_horizon=True), SMALL, SHORT, seed=7).run()

    first = Trainer(ToyEnv(toy, sample_horizon=True), SMALL, SHORT, seed=7).run(until=150)
    first.save_resume(tmp_path / "resume.pkl")
    resumed = Trainer.resume(tmp_path / "resume.pkl", ToyEnv(toy, sample_horizon=True)).run()

    assert resumed.step == full.step
    for name, net in full.ensemble.networks().items():
        for a, b in zip(net.params, resumed.ensemble.networks()[name].params):
            assert np.array_equal(a, b), name
    assert resumed.learning_curve().equals(full.learning_curve())


def test_resume_missing_file(toy, tmp_path):
    with pytest.raises(CheckpointFormatError):
        Trainer.resume(tmp_path / "nothing.pkl", ToyEnv(toy))


def test_evaluate_policy_keys(toy):
    env = ToyEnv(toy.model_copy(update={"z_upper": 3.0}))
    ens = MultiCriticEnsemble.create(env.obs_dim, list(env.mechanism_labels), SMALL, np.random.default_rng(0))
    out = evaluate_policy(env, ens, episodes=20, seed=1)

    assert set(out) == {"eval_risk_total", "eval_risk_m1", "eval_risk_m2"}
    assert out["eval_risk_total"] == pytest.approx(out["eval_risk_m1"] + out["eval_risk_m2"])


class FlakyToyEnv(ToyEnv):
    """Toy whose first `failures` resets have no feasible start state"""

    def __init__(self, config, failures, **kwargs):
        super().__init__(config, **kwargs)
        self.failures = failures

    def reset(self, rng, horizon=None, **kwargs):
        if self.failures > 0:
            self.failures -= 1
            raise InfeasibleInitialConditionError("no steady state at the drawn operating point")
        return super().reset(rng, horizon, **kwargs)


def test_trainer_skips_infeasible_resets(toy):
    trainer = Trainer(FlakyToyEnv(toy, failures=3, sample_horizon=True), SMALL, SHORT, seed=0)
    trainer.env_step()

    assert trainer.infeasible_resets == 3
    assert trainer.step == 1


def test_trainer_aborts_without_feasible_start(toy):
    trainer = Trainer(FlakyToyEnv(toy, failures=10 ** 6, sample_horizon=True), SMALL, SHORT, seed=0)

    with pytest.raises(TrainingAbort) as err:
        trainer.env_step()
    assert err.value.reason == "infeasible_start"
    assert trainer.infeasible_resets == MAX_RESET_FAILURES


def test_policy_risk_comparison_smoke(toy):
    """Pushing up against the drift lowers the Monte Carlo risk of the zero-action baseline"""
    env = ToyEnv(toy)
    baseline = mc_estimate(env, None, 2000, seed=3, horizon=10.0, z0=1.0)
    pushed = mc_estimate(env, lambda obs: 1.0, 2000, seed=3, horizon=10.0, z0=1.0)
    joint = np.sqrt(baseline.std_error ** 2 + pushed.std_error ** 2)

    assert pushed.risk <= baseline.risk + 2.0 * joint
    assert pushed.risk < baseline.risk
    exact = dp_evaluate_policy(toy, GridSpec(), lambda h, z: np.ones_like(z)).value(10.0, 1.0)
    assert abs(pushed.p_safe - exact) <= 4.0 * max(pushed.std_error, 1e-3) + 0.01


def toy_config():
    return load_config(str(Path(__file__).parent.parent / "configs" / "toy.toml"))


@REQUIRES_LONG_RUN
def test_toy_training_matches_dp_oracle():
    """Trained toy value within 0.05 of the DP oracle on the 20 x 20 grid, and better than u = 0"""
    config = toy_config()
    env = ToyEnv(config.toy, sample_horizon=True)
    trainer = train(env, config.learner, config.schedule, config.run.seed)
    dp = dp_solve_toy(config.toy, config.oracle.grid)
    report = compare_learned_vs_oracle(env, trainer.ensemble, dp, points=20)

    assert report.max_abs_error <= 0.05
    assert report.action_agreement >= 0.9

    def learned_policy(h, z):
        return trainer.ensemble.act(np.array([env.obs_at(h, zi) for zi in z]))[:, 0]

    learned = dp_evaluate_policy(config.toy, config.oracle.grid, learned_policy)
    baseline = dp_evaluate_policy(config.toy, config.oracle.grid, zero_policy)
    hs, zs = evaluation_states(env, dp, 20)
    v_learned = np.array([learned.value(h, z) for h, z in zip(hs, zs)])
    v_baseline = np.array([baseline.value(h, z) for h, z in zip(hs, zs)])
    assert np.all(v_learned >= v_baseline - 0.05)
    assert v_learned.mean() > v_baseline.mean()

    policy = ActorPolicy(trainer.ensemble.actor)
    est_policy = mc_estimate(ToyEnv(config.toy), policy, 2000, seed=5, horizon=10.0, z0=1.0)
    est_base = mc_estimate(ToyEnv(config.toy), None, 2000, seed=5, horizon=10.0, z0=1.0)
    joint = np.sqrt(est_policy.std_error ** 2 + est_base.std_error ** 2)
    assert est_policy.risk <= est_base.risk + 2.0 * joint


@REQUIRES_LONG_RUN
def test_two_mechanism_training_decomposes():
    """Sum of the mechanism risks matches the total-critic risk within 0.1 after training"""
    config = toy_config()
    toy = config.toy.model_copy(update={"z_upper": 5.0})
    env = ToyEnv(toy, sample_horizon=True)
    trainer = train(env, config.learner, config.schedule, config.run.seed)
    report = compare_learned_vs_oracle(env, trainer.ensemble, dp_solve_toy(toy, config.oracle.grid), points=20)

    assert report.decomposition_error is not None
    assert report.decomposition_error <= 0.1


@REQUIRES_LONG_RUN
def test_trained_policy_no_worse_than_baseline():
    """Reference system: no cell where the trained policy is riskier than u = 0 beyond two standard errors"""
    config = load_config(str(Path(__file__).parent.parent / "configs" / "reference.toml"))
    env = PowerReachEnv(config.scenario, config.episode)
    trainer = train(env, config.learner, config.schedule, config.run.seed)
    policy = ActorPolicy(trainer.ensemble.actor)
    cells = dict(taus=[200.0, 300.0], p_g_values=[740.0, 760.0, 780.0], r_motor_values=[0.0], n=200, seed=0)

    base = risk_surface(config.scenario, config.episode, None, **cells).to_frame()
    learned = risk_surface(config.scenario, config.episode, policy, **cells).to_frame()

    for (_, b), (_, p) in zip(base.iterrows(), learned.iterrows()):
        se = np.sqrt(b["risk_total"] * (1 - b["risk_total"]) / b["n"]
                     + p["risk_total"] * (1 - p["risk_total"]) / p["n"])
        assert p["risk_total"] <= b["risk_total"] + 2.0 * se, (b["tau"], b["Pg"])
