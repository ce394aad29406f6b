"""
Multi-critic TD3.

One twin critic pair per mechanism (plus an optional pair on the total reward,
used only for evaluation) and a shared actor that maximises the minimum of the
mechanism critics. gamma = 1 with bootstrapping cut at terminal transitions, so
critic values estimate safety probabilities.
"""

import logging
import pickle
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np
import pandas as pd

from voltreach.errors import CheckpointFormatError, InfeasibleInitialConditionError, TrainingAbort
from voltreach.models import Td3Config, TrainSchedule
from voltreach.neural import Adam, Mlp, polyak_update, save_checkpoint
from voltreach.reach import AugmentedState, ReachEnv, risk_from_value, run_episode

logger = logging.getLogger(__name__)

MAX_RESET_FAILURES = 100


@dataclass
class Transition:
    obs: np.ndarray
    action: float
    rewards: np.ndarray
    next_obs: np.ndarray
    dones: np.ndarray


@dataclass
class Batch:
    obs: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    next_obs: np.ndarray
    dones: np.ndarray

    def __len__(self) -> int:
        return len(self.actions)


class ReplayBuffer:
    """Ring buffer; sampling is uniform with replacement over the filled slots."""

    def __init__(self, capacity: int, obs_dim: int, n_heads: int):
        self.capacity = capacity
        self.obs = np.zeros((capacity, obs_dim))
        self.actions = np.zeros((capacity, 1))
        self.rewards = np.zeros((capacity, n_heads))
        self.next_obs = np.zeros((capacity, obs_dim))
        self.dones = np.zeros((capacity, n_heads))
        self.pos = 0
        self.size = 0

    def __len__(self) -> int:
        return self.size

    def add(self, t: Transition) -> None:
        i = self.pos
        self.obs[i] = t.obs
        self.actions[i, 0] = t.action
        self.rewards[i] = t.rewards
        self.next_obs[i] = t.next_obs
        self.dones[i] = t.dones
        self.pos = (self.pos + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def sample(self, batch_size: int, rng: np.random.Generator) -> Batch:
        if self.size == 0:
            raise TrainingAbort("buffer_underflow", "sampling from an empty replay buffer")
        idx = rng.integers(0, self.size, size=batch_size)
        return Batch(self.obs[idx], self.actions[idx], self.rewards[idx], self.next_obs[idx], self.dones[idx])


@dataclass
class CriticPair:
    q1: Mlp
    q2: Mlp
    q1_target: Mlp
    q2_target: Mlp
    opt1: Adam
    opt2: Adam

    @classmethod
    def create(cls, in_dim: int, cfg: Td3Config, rng: np.random.Generator) -> "CriticPair":
        dims = [in_dim] + list(cfg.hidden) + [1]
        q1 = Mlp.init(dims, rng, head="linear")
        q2 = Mlp.init(dims, rng, head="linear")
        return cls(q1, q2, q1.copy(), q2.copy(),
                   Adam(cfg.critic_lr, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps),
                   Adam(cfg.critic_lr, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps))


@dataclass
class MultiCriticEnsemble:
    """
    heads[m] for m < n_mechanisms are the mechanism critics; a trailing head,
    when present, is trained on the total reward.
    """
    actor: Mlp
    actor_target: Mlp
    actor_opt: Adam
    heads: List[CriticPair]
    head_labels: List[str]
    n_mechanisms: int

    @classmethod
    def create(cls, obs_dim: int, mechanism_labels: List[str], cfg: Td3Config,
               rng: np.random.Generator) -> "MultiCriticEnsemble":
        actor = Mlp.init([obs_dim] + list(cfg.hidden) + [1], rng, head="tanh")
        labels = list(mechanism_labels)
        if cfg.total_critic and len(labels) >= 2:
            labels.append("total")
        heads = [CriticPair.create(obs_dim + 1, cfg, rng) for _ in labels]
        return cls(actor, actor.copy(), Adam(cfg.actor_lr, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps),
                   heads, labels, len(mechanism_labels))

    @property
    def has_total(self) -> bool:
        return len(self.heads) > self.n_mechanisms

    @property
    def n_heads(self) -> int:
        return len(self.heads)

    def act(self, obs: np.ndarray) -> np.ndarray:
        return self.actor.forward(obs)

    def q_values(self, obs: np.ndarray, actions: Optional[np.ndarray] = None) -> np.ndarray:
        """Q_1 of every head at (obs, actions) (actor action when None); shape (n, n_heads)."""
        obs = np.atleast_2d(obs)
        if actions is None:
            actions = self.actor.forward(obs)
        x = np.hstack([obs, np.reshape(actions, (-1, 1))])
        return np.hstack([pair.q1.forward(x) for pair in self.heads])

    def values(self, obs: np.ndarray) -> Dict[str, np.ndarray]:
        """Safety values per head under the actor, plus "min" over the mechanism heads."""
        q = self.q_values(obs)
        out = {label: q[:, i] for i, label in enumerate(self.head_labels)}
        out["min"] = q[:, :self.n_mechanisms].min(axis=1)
        return out

    def networks(self) -> Dict[str, Mlp]:
        nets = {"actor": self.actor, "actor_target": self.actor_target}
        for label, pair in zip(self.head_labels, self.heads):
            nets[f"q1_{label}"] = pair.q1
            nets[f"q2_{label}"] = pair.q2
            nets[f"q1_target_{label}"] = pair.q1_target
            nets[f"q2_target_{label}"] = pair.q2_target
        return nets

    def load_networks(self, nets: Dict[str, Mlp]) -> None:
        missing = set(self.networks()) - set(nets)
        if missing:
            raise CheckpointFormatError(f"checkpoint lacks networks: {sorted(missing)}")
        self.actor, self.actor_target = nets["actor"], nets["actor_target"]
        for label, pair in zip(self.head_labels, self.heads):
            pair.q1, pair.q2 = nets[f"q1_{label}"], nets[f"q2_{label}"]
            pair.q1_target, pair.q2_target = nets[f"q1_target_{label}"], nets[f"q2_target_{label}"]

    def update_targets(self, rho: float) -> None:
        polyak_update(self.actor_target, self.actor, rho)
        for pair in self.heads:
            polyak_update(pair.q1_target, pair.q1, rho)
            polyak_update(pair.q2_target, pair.q2, rho)


class ActorPolicy:
    """Deterministic policy from an actor network; picklable for worker pools."""

    def __init__(self, actor: Mlp):
        self.actor = actor.copy()

    def __call__(self, obs: np.ndarray) -> float:
        return float(self.actor.forward(obs)[0])


def _mse_step(net: Mlp, opt: Adam, x: np.ndarray, y: np.ndarray) -> float:
    q = net.forward(x)[:, 0]
    err = q - y
    grads, _ = net.backward((2.0 / len(y)) * err[:, None])
    opt.step(net.params, grads)
    return float(np.mean(err * err))


def td_targets(batch: Batch, ensemble: MultiCriticEnsemble, cfg: Td3Config,
               rng: np.random.Generator) -> np.ndarray:
    """Smoothed clipped double-Q targets, shape (n, n_heads)."""
    n = len(batch)
    noise = np.clip(cfg.target_sigma * rng.standard_normal((n, 1)), -cfg.target_clip, cfg.target_clip)
    next_a = np.clip(ensemble.actor_target.forward(batch.next_obs) + noise, -1.0, 1.0)
    x_next = np.hstack([batch.next_obs, next_a])
    targets = np.empty((n, ensemble.n_heads))
    for h, pair in enumerate(ensemble.heads):
        q_next = np.minimum(pair.q1_target.forward(x_next)[:, 0], pair.q2_target.forward(x_next)[:, 0])
        bootstrap = np.where(batch.dones[:, h] > 0, 0.0, cfg.gamma * q_next)
        targets[:, h] = batch.rewards[:, h] + bootstrap
    return targets


def critic_update(batch: Batch, ensemble: MultiCriticEnsemble, cfg: Td3Config,
                  rng: np.random.Generator) -> np.ndarray:
    """
    One regression step of every critic pair towards
    y = r + gamma (1 - done) min(Q1', Q2')(s', a'),  a' = clip(mu'(s') + clip(noise, +-c), -1, 1).
    Returns the mean of the twin losses per head.
    """
    targets = td_targets(batch, ensemble, cfg, rng)
    x = np.hstack([batch.obs, batch.actions])
    losses = np.empty(ensemble.n_heads)
    for h, pair in enumerate(ensemble.heads):
        y = targets[:, h]
        l1 = _mse_step(pair.q1, pair.opt1, x, y)
        l2 = _mse_step(pair.q2, pair.opt2, x, y)
        losses[h] = 0.5 * (l1 + l2)
    return losses


def actor_gradient(obs: np.ndarray, ensemble: MultiCriticEnsemble):
    """
    J = mean_i min_m Q1^(m)(s_i, mu(s_i)) and the actor parameter gradients of -J.
    The gradient of each sample flows through the critic attaining its minimum.
    """
    n = len(obs)
    a = ensemble.actor.forward(obs)
    x = np.hstack([obs, a])
    mech = ensemble.heads[:ensemble.n_mechanisms]
    q = np.hstack([pair.q1.forward(x) for pair in mech])
    pick = np.argmin(q, axis=1)
    objective = float(np.mean(q[np.arange(n), pick]))
    dq_da = np.zeros((n, 1))
    for m, pair in enumerate(mech):
        sel = (pick == m).astype(float)[:, None] / n
        if not sel.any():
            continue
        pair.q1.forward(x)
        _, dx = pair.q1.backward(sel)
        dq_da += dx[:, -1:]
    ensemble.actor.forward(obs)
    grads, _ = ensemble.actor.backward(-dq_da)
    return objective, grads


def actor_update(batch: Batch, ensemble: MultiCriticEnsemble, cfg: Td3Config) -> float:
    """One Adam ascent step on the min-critic objective, then polyak-update every target."""
    objective, grads = actor_gradient(batch.obs, ensemble)
    ensemble.actor_opt.step(ensemble.actor.params, grads)
    ensemble.update_targets(cfg.polyak)
    return objective


# ============================================================================
# Training loop
# ============================================================================

def evaluate_policy(env: ReachEnv, ensemble: MultiCriticEnsemble, episodes: int, seed: int) -> Dict[str, float]:
    """Greedy-policy Monte Carlo risk on a fixed evaluation stream."""
    streams = np.random.SeedSequence(seed).spawn(episodes)
    policy = ActorPolicy(ensemble.actor)
    failures = {label: 0 for label in env.mechanism_labels}
    unsafe = 0
    for ss in streams:
        result = run_episode(env, policy, np.random.default_rng(ss))
        if not result.safe:
            unsafe += 1
            failures[result.mechanism] += 1
    out = {"eval_risk_total": unsafe / episodes}
    for i, label in enumerate(env.mechanism_labels):
        out[f"eval_risk_m{i + 1}"] = failures[label] / episodes
    return out


@dataclass
class Trainer:
    """
    Interleaves environment steps and gradient steps. Every piece of mutable
    state lives on the instance, so a pickled trainer resumes bit for bit.
    """
    env: ReachEnv
    cfg: Td3Config
    schedule: TrainSchedule
    seed: int
    config_hash: str = ""
    ensemble: Optional[MultiCriticEnsemble] = None
    buffer: Optional[ReplayBuffer] = None
    rng: Optional[np.random.Generator] = None
    state: Optional[AugmentedState] = None
    step: int = 0
    updates: int = 0
    infeasible_resets: int = 0
    curve: List[Dict[str, float]] = field(default_factory=list)
    _losses: List[np.ndarray] = field(default_factory=list)
    _actor_obj: List[float] = field(default_factory=list)

    def __post_init__(self):
        if self.rng is None:
            self.rng = np.random.default_rng(self.seed)
        if self.ensemble is None:
            self.ensemble = MultiCriticEnsemble.create(self.env.obs_dim, list(self.env.mechanism_labels),
                                                       self.cfg, self.rng)
        if self.buffer is None:
            self.buffer = ReplayBuffer(self.cfg.buffer_capacity, self.env.obs_dim, self.ensemble.n_heads)

    def exploration_sigma(self) -> float:
        total = max(self.schedule.env_steps, 1)
        frac = min(self.step / total, 1.0)
        return self.cfg.expl_sigma + frac * (self.cfg.expl_sigma_final - self.cfg.expl_sigma)

    def _head_rewards(self, r, done: bool):
        rewards = r.as_array(with_total=self.ensemble.has_total)
        dones = np.full(self.ensemble.n_heads, 1.0 if done else 0.0)
        return rewards, dones

    def _reset(self) -> AugmentedState:
        """A live start state; infeasible draws and starts that are already unsafe are skipped."""
        failures = 0
        while failures < MAX_RESET_FAILURES:
            try:
                s, _ = self.env.reset(self.rng)
            except InfeasibleInitialConditionError as e:
                failures += 1
                self.infeasible_resets += 1
                logger.debug(f"infeasible reset skipped: step={self.step}, reason={e}")
                continue
            if not s.done:
                return s
            failures += 1
        raise TrainingAbort("infeasible_start", f"{failures} consecutive resets gave no live start state",
                            step=self.step)

    def env_step(self) -> None:
        if self.state is None or self.state.done:
            self.state = self._reset()
        s = self.state
        obs = self.env.observation(s)
        if self.step < self.schedule.learning_starts:
            a = float(self.rng.uniform(-1.0, 1.0))
        else:
            a = float(self.ensemble.act(obs)[0]) + self.exploration_sigma() * float(self.rng.standard_normal())
            a = min(max(a, -1.0), 1.0)
        s_next, r, done = self.env.step(s, a, self.rng)
        rewards, dones = self._head_rewards(r, done)
        self.buffer.add(Transition(obs, a, rewards, self.env.observation(s_next), dones))
        self.state = s_next
        self.step += 1

    def gradient_step(self) -> None:
        if len(self.buffer) < self.cfg.batch_size:
            raise TrainingAbort("buffer_underflow",
                                f"{len(self.buffer)} transitions stored, batch size {self.cfg.batch_size}",
                                step=self.step)
        batch = self.buffer.sample(self.cfg.batch_size, self.rng)
        losses = critic_update(batch, self.ensemble, self.cfg, self.rng)
        if not np.all(np.isfinite(losses)):
            raise TrainingAbort("nan_loss", f"critic losses {losses.tolist()}", step=self.step)
        self._losses.append(losses)
        self.updates += 1
        if self.updates % self.cfg.policy_delay == 0:
            obj = actor_update(batch, self.ensemble, self.cfg)
            if not np.isfinite(obj) or not self.ensemble.actor.is_finite():
                raise TrainingAbort("nan_loss", f"actor objective {obj}", step=self.step)
            self._actor_obj.append(obj)

    def record(self, evaluation: Dict[str, float]) -> Dict[str, float]:
        row: Dict[str, float] = {"step": self.step}
        mean_losses = np.mean(self._losses, axis=0) if self._losses else np.full(self.ensemble.n_heads, np.nan)
        for i, label in enumerate(self.ensemble.head_labels):
            key = "critic_loss_total" if label == "total" else f"critic_loss_m{i + 1}"
            row[key] = float(mean_losses[i])
        row["actor_obj"] = float(np.mean(self._actor_obj)) if self._actor_obj else float("nan")
        row.update(evaluation)
        self.curve.append(row)
        self._losses, self._actor_obj = [], []
        return row

    def evaluate(self) -> Dict[str, float]:
        return evaluate_policy(self.env, self.ensemble, self.schedule.eval_episodes, seed=self.seed + 1_000_003)

    def run(self, until: Optional[int] = None, out_dir: Optional[Path] = None) -> "Trainer":
        until = self.schedule.env_steps if until is None else min(until, self.schedule.env_steps)
        started = time.time()
        while self.step < until:
            self.env_step()
            if self.step > self.schedule.learning_starts:
                for _ in range(self.cfg.gradient_steps):
                    self.gradient_step()
            if self.step % self.schedule.eval_every == 0:
                row = self.record(self.evaluate())
                logger.info(f"evaluation: step={self.step}, risk_total={row['eval_risk_total']:.4f}, "
                            f"actor_obj={row['actor_obj']:.4f}")
            if out_dir is not None and self.step % self.schedule.checkpoint_every == 0:
                self.save_checkpoint(Path(out_dir) / "checkpoints" / f"step_{self.step:08d}.ckpt")
        logger.info(f"training segment done: step={self.step}, updates={self.updates}, "
                    f"infeasible_resets={self.infeasible_resets}, elapsed={time.time() - started:.1f}s")
        return self

    def learning_curve(self) -> pd.DataFrame:
        columns = ["step"]
        for i, label in enumerate(self.ensemble.head_labels):
            if label != "total":
                columns.append(f"critic_loss_m{i + 1}")
        if self.ensemble.has_total:
            columns.append("critic_loss_total")
        columns += ["actor_obj", "eval_risk_total"] + [f"eval_risk_m{i + 1}" for i in range(self.ensemble.n_mechanisms)]
        return pd.DataFrame(self.curve, columns=columns)

    def save_checkpoint(self, path: Path) -> str:
        return save_checkpoint(path, self.ensemble.networks(), self.config_hash)

    def save_resume(self, path: Path) -> None:
        """Pickle everything except the environment, which is rebuilt from the configuration."""
        state = {k: v for k, v in self.__dict__.items() if k != "env"}
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        with open(path, "wb") as f:
            pickle.dump(state, f)

    @classmethod
    def resume(cls, path: Path, env: ReachEnv) -> "Trainer":
        try:
            with open(path, "rb") as f:
                state = pickle.load(f)
        except FileNotFoundError:
            raise CheckpointFormatError(f"resume file not found: {path}")
        except (pickle.UnpicklingError, EOFError) as e:
            raise CheckpointFormatError(f"resume file is corrupt: {e}")
        trainer = cls.__new__(cls)
        trainer.__dict__.update(state)
        trainer.env = env
        return trainer


def train(env: ReachEnv, cfg: Td3Config, schedule: TrainSchedule, seed: int, config_hash: str = "",
          out_dir: Optional[Path] = None) -> Trainer:
    """Run the full schedule from scratch."""
    if cfg.gradient_steps > 0 and schedule.env_steps > schedule.learning_starts and \
            schedule.learning_starts + 1 < cfg.batch_size:
        raise TrainingAbort("buffer_underflow",
                            f"learning_starts={schedule.learning_starts} is below batch_size={cfg.batch_size}")
    return Trainer(env, cfg, schedule, seed, config_hash).run(out_dir=out_dir)


def critic_risk(ensemble: MultiCriticEnsemble, obs: np.ndarray) -> Dict[str, np.ndarray]:
    """Learned risk clip(1 - Q, 0, 1) per head."""
    return {label: risk_from_value(v) for label, v in ensemble.values(obs).items()}
