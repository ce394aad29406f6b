"""
Augmented-state safety MDP.

The state is s = [h, z]: remaining time h and the observable process state z.
Entering an unsafe set is absorbing and attributed to the first mechanism that
fires. Two execution modes share the same reward function:

    collapsed  (default) the episode ends at first absorption with the terminal
               reward vector 0 for the fired mechanism and 1 for the others, or
               pays 1 everywhere when h is inside the final window [0, dt)
    literal    z is frozen after absorption while h keeps counting down and
               reward(s) is paid on every visited state, s_0 included

Both modes give identical episode returns.
"""

import logging
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from voltreach.errors import InfeasibleInitialConditionError, NonConvergenceError
from voltreach.models import EpisodeConfig, ScenarioConfig
from voltreach.simulator import (BUS4, Mechanism, SimState, apply_disturbance, detect_instability, initialize,
                                 record_instability, sample_operating_point, set_operating_point, step_slow)

logger = logging.getLogger(__name__)

Policy = Callable[[np.ndarray], float]

MAX_REDRAWS = 50

EPISODE_LOG_COLUMNS = ["k", "h", "V4", "Eq", "Xoxl", "Pg", "Rmotor", "action", "V3ref",
                       "r_total", "r_gen", "r_motor", "status"]


class Status(str, Enum):
    LIVE = "Live"
    ABSORBED = "AbsorbedBy"
    TIME_UP = "TimeUp"


@dataclass
class RewardVector:
    """Total reward and one entry per mechanism, in the environment's mechanism order."""
    total: float
    mechanisms: np.ndarray

    @classmethod
    def zeros(cls, n: int) -> "RewardVector":
        return cls(0.0, np.zeros(n))

    def __add__(self, other: "RewardVector") -> "RewardVector":
        return RewardVector(self.total + other.total, self.mechanisms + other.mechanisms)

    def as_array(self, with_total: bool = False) -> np.ndarray:
        return np.append(self.mechanisms, self.total) if with_total else self.mechanisms.copy()


@dataclass
class AugmentedState:
    h: float
    z: np.ndarray
    z_norm: np.ndarray
    status: Status = Status.LIVE
    absorbed_by: Optional[int] = None
    k: int = 0
    handle: Any = field(default=None, repr=False)
    done: bool = False

    @property
    def live(self) -> bool:
        return self.status is Status.LIVE


def in_final_window(h: float, dt: float) -> bool:
    """h in [0, dt), with a relative tolerance for accumulated rounding."""
    tol = 1e-9 * dt
    return -tol <= h < dt - tol


def risk_from_value(v):
    """rho = clip(1 - v, 0, 1); accepts scalars and arrays."""
    rho = np.clip(1.0 - np.asarray(v, dtype=float), 0.0, 1.0)
    return float(rho) if rho.ndim == 0 else rho


def episode_return(rewards: Sequence[RewardVector]) -> RewardVector:
    if not rewards:
        raise ValueError("episode has no rewards")
    total = rewards[0]
    for r in rewards[1:]:
        total = total + r
    return total


class ReachEnv(ABC):
    """
    Shared episode machinery. Subclasses provide the underlying process through
    `_start`, `_advance` and `_observe`, and name their mechanisms.
    """

    mechanism_labels: Tuple[str, ...] = ()
    # infeasible operating-point draws replaced at reset
    redraws: int = 0

    def __init__(self, dt: float, horizon: float, horizon_max: float, sample_horizon: bool = False,
                 literal: bool = False):
        if dt <= 0 or horizon <= 0:
            raise ValueError("decision step and horizon must be positive")
        self.dt = dt
        self.horizon = horizon
        self.horizon_max = max(horizon_max, horizon)
        self.sample_horizon = sample_horizon
        self.literal = literal

    # -- subclass hooks -------------------------------------------------------

    @abstractmethod
    def _start(self, rng: np.random.Generator, **kwargs) -> Tuple[Any, Optional[int]]:
        """Initial process handle and the mechanism already firing at reset (if any)."""

    @abstractmethod
    def _advance(self, handle: Any, action: float, rng: np.random.Generator) -> Tuple[Any, Optional[int]]:
        """Advance the process by dt; returns the handle and the absorbing mechanism index (if any)."""

    @abstractmethod
    def _observe(self, handle: Any) -> Tuple[np.ndarray, np.ndarray]:
        """(raw z, normalised z)."""

    # -- public API -----------------------------------------------------------

    @property
    def n_mechanisms(self) -> int:
        return len(self.mechanism_labels)

    @property
    def obs_dim(self) -> int:
        return 1 + len(self._observe(self.reference_handle())[1])

    def reference_handle(self) -> Any:
        handle, _ = self._start(np.random.default_rng(0))
        return handle

    def normalise_h(self, h: float) -> float:
        return 2.0 * h / self.horizon_max - 1.0

    def observation(self, s: AugmentedState) -> np.ndarray:
        """Network input [h, z] with every entry scaled to roughly [-1, 1]."""
        return np.concatenate([[self.normalise_h(max(s.h, 0.0))], s.z_norm])

    def reset(self, rng: np.random.Generator, horizon: Optional[float] = None, **kwargs) -> Tuple[AugmentedState, RewardVector]:
        """
        Start an episode with h_0 = horizon.

        Returns the initial state and the reward paid on it: zero in the
        collapsed mode unless the process is already unsafe (then the terminal
        vector and done), reward(s_0) in the literal mode.
        """
        if horizon is None:
            horizon = self.horizon_max - float(rng.uniform(0.0, self.horizon_max)) if self.sample_horizon else self.horizon
        if horizon < 0:
            raise ValueError("horizon must be non-negative")
        handle, fired = self._start(rng, **kwargs)
        z, z_norm = self._observe(handle)
        s = AugmentedState(h=horizon, z=z, z_norm=z_norm, handle=handle)
        if fired is not None:
            s.status = Status.ABSORBED
            s.absorbed_by = fired
        if self.literal:
            return s, self.reward(s)
        if fired is not None:
            s.done = True
            return s, self.terminal_reward(fired)
        return s, RewardVector.zeros(self.n_mechanisms)

    def reward(self, s: AugmentedState) -> RewardVector:
        """r^(m) = 1 iff h in [0, dt) and not absorbed by m; r_total = 1 iff h in [0, dt) and live."""
        n = self.n_mechanisms
        if not in_final_window(s.h, self.dt):
            return RewardVector.zeros(n)
        mech = np.ones(n)
        if s.status is Status.ABSORBED:
            mech[s.absorbed_by] = 0.0
            return RewardVector(0.0, mech)
        return RewardVector(1.0, mech)

    def terminal_reward(self, mechanism: int) -> RewardVector:
        mech = np.ones(self.n_mechanisms)
        mech[mechanism] = 0.0
        return RewardVector(0.0, mech)

    def step(self, s: AugmentedState, action: float, rng: np.random.Generator) -> Tuple[AugmentedState, RewardVector, bool]:
        """One decision step; `s` is left untouched and a new state is returned."""
        if s.done:
            return s, RewardVector.zeros(self.n_mechanisms), True
        a = min(max(float(action), -1.0), 1.0)
        if self.literal:
            return self._step_literal(s, a, rng)

        if in_final_window(s.h, self.dt):
            s_next = AugmentedState(h=s.h - self.dt, z=s.z, z_norm=s.z_norm, status=Status.TIME_UP,
                                    k=s.k + 1, handle=s.handle, done=True)
            return s_next, RewardVector(1.0, np.ones(self.n_mechanisms)), True

        handle, fired = self._advance(s.handle, a, rng)
        z, z_norm = self._observe(handle)
        s_next = AugmentedState(h=s.h - self.dt, z=z, z_norm=z_norm, k=s.k + 1, handle=handle)
        if fired is not None:
            s_next.status = Status.ABSORBED
            s_next.absorbed_by = fired
            s_next.done = True
            return s_next, self.terminal_reward(fired), True
        return s_next, RewardVector.zeros(self.n_mechanisms), False

    def _step_literal(self, s: AugmentedState, a: float, rng: np.random.Generator) -> Tuple[AugmentedState, RewardVector, bool]:
        if s.status is Status.LIVE:
            handle, fired = self._advance(s.handle, a, rng)
            z, z_norm = self._observe(handle)
            s_next = AugmentedState(h=s.h - self.dt, z=z, z_norm=z_norm, k=s.k + 1, handle=handle)
            if fired is not None:
                s_next.status = Status.ABSORBED
                s_next.absorbed_by = fired
        else:
            s_next = AugmentedState(h=s.h - self.dt, z=s.z, z_norm=s.z_norm, status=s.status,
                                    absorbed_by=s.absorbed_by, k=s.k + 1, handle=s.handle)
        done = s_next.h < 0 and not in_final_window(s_next.h, self.dt)
        if done and s_next.status is Status.LIVE:
            s_next.status = Status.TIME_UP
        s_next.done = done
        return s_next, self.reward(s_next), done

    # -- episode logging --------------------------------------------------------

    def log_row(self, s: AugmentedState, action: float, r: RewardVector) -> Dict[str, Any]:
        return {"k": s.k, "h": s.h, "action": action, "r_total": r.total, "status": self.status_label(s)}

    def status_label(self, s: AugmentedState) -> str:
        if s.status is Status.ABSORBED:
            return f"AbsorbedBy({self.mechanism_labels[s.absorbed_by]})"
        return s.status.value


@dataclass
class EpisodeResult:
    returns: RewardVector
    steps: int
    mechanism: Optional[str]
    rows: List[Dict[str, Any]] = field(default_factory=list)

    @property
    def safe(self) -> bool:
        return self.mechanism is None


def run_episode(env: ReachEnv, policy: Optional[Policy], rng: np.random.Generator,
                horizon: Optional[float] = None, record: bool = False, **reset_kwargs) -> EpisodeResult:
    """Roll out one episode; `policy=None` is the zero-action baseline."""
    s, r0 = env.reset(rng, horizon=horizon, **reset_kwargs)
    rewards = [r0]
    rows = [env.log_row(s, float("nan"), r0)] if record else []
    done = s.done
    while not done:
        a = 0.0 if policy is None else float(policy(env.observation(s)))
        s, r, done = env.step(s, a, rng)
        rewards.append(r)
        if record:
            rows.append(env.log_row(s, a, r))
    mechanism = env.mechanism_labels[s.absorbed_by] if s.status is Status.ABSORBED else None
    return EpisodeResult(episode_return(rewards), s.k, mechanism, rows)


# ============================================================================
# Power-system environment
# ============================================================================

class PowerReachEnv(ReachEnv):
    """
    The four-bus system as a safety MDP. z = [V4, E'_q, X_oxl, P_g, R_motor];
    the action moves the LTC reference V3_ref by action_scale * a.

    With a nominal motor ratio of zero there is a single mechanism (GeneratorLoss).
    """

    def __init__(self, scenario: ScenarioConfig, episode: EpisodeConfig):
        if episode.h_int is not None:
            scenario = scenario.model_copy(update={"h_int": episode.h_int})
        steps = episode.decision_step / scenario.h_int
        if abs(steps - round(steps)) > 1e-9:
            raise ValueError(f"decision_step {episode.decision_step} is not a multiple of h_int {scenario.h_int}")
        if episode.disturbance_time > 0:
            lead = episode.disturbance_time / scenario.h_int
            if abs(lead - round(lead)) > 1e-9:
                raise ValueError("disturbance_time must be a multiple of h_int")
        super().__init__(episode.decision_step, episode.horizon, episode.horizon_max,
                         sample_horizon=episode.sample_horizon, literal=episode.literal)
        self.scenario = scenario
        self.episode = episode
        self.mechanisms: Tuple[Mechanism, ...] = ((Mechanism.GENERATOR_LOSS,) if episode.r_motor == 0.0
                                                  else (Mechanism.GENERATOR_LOSS, Mechanism.MOTOR_STALL))
        self.mechanism_labels = tuple(m.label for m in self.mechanisms)

    @property
    def obs_dim(self) -> int:
        return 1 + 5 + (1 if self.episode.include_v3ref else 0)

    def _mechanism_index(self, state: SimState) -> Optional[int]:
        if state.instability is None:
            return None
        mech = state.instability.mechanism
        # a stall cannot be attributed when the motor mechanism is not modelled
        return self.mechanisms.index(mech) if mech in self.mechanisms else 0

    def _start(self, rng: np.random.Generator, p_g_mw: Optional[float] = None,
               r_motor: Optional[float] = None, **kwargs) -> Tuple[SimState, Optional[int]]:
        ep = self.episode
        p_g = ep.p_g_mw if p_g_mw is None else p_g_mw
        r_nom = ep.r_motor if r_motor is None else r_motor
        p_nom = self.scenario.load.p_total_mw
        state = self._initial_state(rng, p_nom, r_nom, p_g)
        state.nominal = (p_nom, r_nom, p_g)
        try:
            if ep.disturbance_time > 0:
                step_slow(state, ep.disturbance_time)
            if self.scenario.disturbance.enabled and state.instability is None:
                apply_disturbance(state, self.scenario.disturbance)
        except NonConvergenceError as e:
            self._absorb_on_failure(state, e)
        return state, self._mechanism_index(state)

    def _initial_state(self, rng: np.random.Generator, p_nom: float, r_nom: float, p_g: float) -> SimState:
        """
        Initialise at a perturbed operating point. Draws without a steady state
        are redrawn (counted in `redraws`) unless the nominal point itself is
        infeasible, which is raised.
        """
        ep = self.episode
        nominal_checked = False
        for _ in range(MAX_REDRAWS):
            p, r = sample_operating_point(self.scenario, rng, p_nom, r_nom, ep.demand_sigma_mw, ep.ratio_sigma)
            try:
                return initialize(self.scenario, p_total_mw=p, r_motor=r, p_g_mw=p_g)
            except InfeasibleInitialConditionError as e:
                if not nominal_checked:
                    initialize(self.scenario, p_total_mw=p_nom, r_motor=r_nom, p_g_mw=p_g)
                    nominal_checked = True
                self.redraws += 1
                logger.debug(f"operating point redrawn: P={p:.1f}, R={r:.3f}, reason={e}")
        raise InfeasibleInitialConditionError(f"{MAX_REDRAWS} operating-point draws around P={p_nom:.1f}, "
                                              f"R={r_nom:.3f} had no steady state")

    def _absorb_on_failure(self, state: SimState, err: NonConvergenceError) -> None:
        event = detect_instability(state, state.window, solve_failed=True)
        event.t = err.t if err.t is not None else state.t
        record_instability(state, event)

    def _advance(self, handle: SimState, action: float, rng: np.random.Generator) -> Tuple[SimState, Optional[int]]:
        ep = self.episode
        state = handle.copy()
        state.ltc.v3_ref = min(max(state.ltc.v3_ref + ep.action_scale * action, ep.v3ref_min), ep.v3ref_max)
        p_nom, r_nom, _ = state.nominal
        try:
            if ep.demand_sigma_mw > 0 or ep.ratio_sigma > 0:
                p, r = sample_operating_point(self.scenario, rng, p_nom, r_nom, ep.demand_sigma_mw, ep.ratio_sigma)
                set_operating_point(state, p, r)
            step_slow(state, self.dt)
        except NonConvergenceError as e:
            self._absorb_on_failure(state, e)
        return state, self._mechanism_index(state)

    def raw_observation(self, state: SimState) -> np.ndarray:
        p_g_mw = state.gen.pm * self.scenario.network.s_base_mva if state.gen.online else 0.0
        r_motor = state.load.r_motor if len(self.mechanisms) > 1 else 0.0
        z = [abs(state.voltages[BUS4]), state.gen.eq, state.exc.x_oxl, p_g_mw, r_motor]
        if self.episode.include_v3ref:
            z.append(state.ltc.v3_ref)
        return np.array(z)

    def _observe(self, handle: SimState) -> Tuple[np.ndarray, np.ndarray]:
        z = self.raw_observation(handle)
        rg = self.episode.ranges
        bounds = [rg.v4, rg.eq, rg.xoxl, rg.p_g_mw, rg.r_motor] + ([rg.v3_ref] if self.episode.include_v3ref else [])
        lo = np.array([b[0] for b in bounds])
        hi = np.array([b[1] for b in bounds])
        return z, 2.0 * (z - lo) / (hi - lo) - 1.0

    def log_row(self, s: AugmentedState, action: float, r: RewardVector) -> Dict[str, Any]:
        state: SimState = s.handle
        r_motor = r.mechanisms[1] if len(self.mechanisms) > 1 else 1.0
        return {"k": s.k, "h": s.h, "V4": s.z[0], "Eq": s.z[1], "Xoxl": s.z[2], "Pg": s.z[3], "Rmotor": s.z[4],
                "action": action, "V3ref": state.ltc.v3_ref, "r_total": r.total, "r_gen": r.mechanisms[0],
                "r_motor": r_motor, "status": self.status_label(s)}


def episode_log_frame(rows: List[Dict[str, Any]]) -> pd.DataFrame:
    return pd.DataFrame(rows, columns=EPISODE_LOG_COLUMNS)
