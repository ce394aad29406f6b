"""
Ground truth for the learned estimates: Monte Carlo safety probabilities with
Wilson intervals, risk surfaces over (tau, P_g, R_motor) and the comparison of
a trained ensemble against the toy DP table.

Monte Carlo episode i of an estimate with seed s always draws from
default_rng(SeedSequence(s).spawn(n)[i]); worker pools return results in
episode order, so a parallel estimate equals the serial one.
"""

import logging
import math
import multiprocessing as mp
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy.stats import norm

from voltreach.errors import InfeasibleInitialConditionError
from voltreach.models import EpisodeConfig, ScenarioConfig
from voltreach.reach import Policy, PowerReachEnv, ReachEnv, risk_from_value, run_episode
from voltreach.td3 import MultiCriticEnsemble, critic_risk
from voltreach.toy import DpTable, ToyEnv, gaussian_expectation

logger = logging.getLogger(__name__)

RISK_SURFACE_COLUMNS = ["tau", "Pg", "Rmotor", "n", "risk_total", "lo", "hi", "risk_gen", "risk_motor"]


def wilson_interval(successes: int, n: int, confidence: float = 0.95) -> Tuple[float, float]:
    """Wilson score interval for a binomial proportion."""
    if n <= 0:
        raise ValueError("n must be positive")
    z = norm.ppf(0.5 + confidence / 2.0)
    p = successes / n
    denom = 1.0 + z * z / n
    centre = (p + z * z / (2 * n)) / denom
    half = z * math.sqrt(p * (1 - p) / n + z * z / (4 * n * n)) / denom
    return max(0.0, centre - half), min(1.0, centre + half)


@dataclass
class McEstimate:
    """Safety estimate with its Wilson interval and first-hit failure counts per mechanism."""
    n: int
    n_safe: int
    counts: Dict[str, int]
    p_safe: float
    lo: float
    hi: float
    confidence: float = 0.95
    infeasible: bool = False
    redraws: int = 0

    @property
    def risk(self) -> float:
        return (self.n - self.n_safe) / self.n if self.n else float("nan")

    @property
    def risk_lo(self) -> float:
        return 1.0 - self.hi

    @property
    def risk_hi(self) -> float:
        return 1.0 - self.lo

    def mechanism_risk(self, label: str) -> float:
        return self.counts.get(label, 0) / self.n if self.n else float("nan")

    @property
    def std_error(self) -> float:
        return math.sqrt(self.p_safe * (1.0 - self.p_safe) / self.n) if self.n else float("nan")

    @classmethod
    def from_counts(cls, n: int, n_safe: int, counts: Dict[str, int], confidence: float = 0.95,
                    redraws: int = 0) -> "McEstimate":
        lo, hi = wilson_interval(n_safe, n, confidence)
        return cls(n, n_safe, dict(counts), n_safe / n, lo, hi, confidence, redraws=redraws)

    @classmethod
    def infeasible_cell(cls) -> "McEstimate":
        return cls(0, 0, {}, float("nan"), float("nan"), float("nan"), infeasible=True)


def _run_one(args: Tuple[ReachEnv, Optional[Policy], np.random.SeedSequence, Optional[float], Dict[str, Any]]
             ) -> Tuple[Optional[str], int]:
    """First-hit mechanism of one episode and the operating-point redraws its reset needed."""
    env, policy, seq, horizon, reset_kwargs = args
    before = env.redraws
    result = run_episode(env, policy, np.random.default_rng(seq), horizon=horizon, **reset_kwargs)
    return result.mechanism, env.redraws - before


def mc_estimate(env: ReachEnv, policy: Optional[Policy], n: int, seed: int, horizon: Optional[float] = None,
                workers: int = 1, confidence: float = 0.95, **reset_kwargs) -> McEstimate:
    """
    Run n independent episodes and count first-hit failures.

    `policy=None` is the zero-action baseline. With workers > 1 the env and
    policy must be picklable.
    """
    if n < 1:
        raise ValueError("n must be at least 1")
    streams = np.random.SeedSequence(seed).spawn(n)
    jobs = [(env, policy, ss, horizon, reset_kwargs) for ss in streams]
    if workers > 1:
        with mp.Pool(processes=workers) as pool:
            outcomes = list(pool.imap(_run_one, jobs, chunksize=max(1, n // (4 * workers))))
    else:
        outcomes = [_run_one(job) for job in jobs]
    counts = {label: 0 for label in env.mechanism_labels}
    for mech, _ in outcomes:
        if mech is not None:
            counts[mech] += 1
    n_safe = sum(1 for mech, _ in outcomes if mech is None)
    redraws = sum(extra for _, extra in outcomes)
    est = McEstimate.from_counts(n, n_safe, counts, confidence, redraws=redraws)
    logger.debug(f"MC estimate: n={n}, safe={n_safe}, counts={counts}, redraws={redraws}, workers={workers}")
    return est


@dataclass
class RiskCell:
    tau: float
    p_g_mw: float
    r_motor: float
    estimate: McEstimate

    def row(self) -> Dict[str, Any]:
        est = self.estimate
        if est.infeasible:
            return {"tau": self.tau, "Pg": self.p_g_mw, "Rmotor": self.r_motor, "n": 0, "risk_total": float("nan"),
                    "lo": float("nan"), "hi": float("nan"), "risk_gen": float("nan"), "risk_motor": float("nan")}
        return {"tau": self.tau, "Pg": self.p_g_mw, "Rmotor": self.r_motor, "n": est.n, "risk_total": est.risk,
                "lo": est.risk_lo, "hi": est.risk_hi, "risk_gen": est.mechanism_risk("GeneratorLoss"),
                "risk_motor": est.mechanism_risk("MotorStall")}


@dataclass
class RiskSurface:
    cells: List[RiskCell] = field(default_factory=list)

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame([c.row() for c in self.cells], columns=RISK_SURFACE_COLUMNS)


def risk_surface(scenario: ScenarioConfig, episode: EpisodeConfig, policy: Optional[Policy],
                 taus: Sequence[float], p_g_values: Sequence[float], r_motor_values: Sequence[float],
                 n: int, seed: int, workers: int = 1, confidence: float = 0.95) -> RiskSurface:
    """
    Per-cell Monte Carlo estimates over the (tau, P_g, R_motor) grid.
    A cell is marked infeasible only when its nominal operating point has no
    pre-disturbance steady state; infeasible noisy draws are redrawn.
    """
    surface = RiskSurface()
    cell_seeds = iter(np.random.SeedSequence(seed).spawn(max(1, len(taus) * len(p_g_values) * len(r_motor_values))))
    for r_motor in r_motor_values:
        for p_g in p_g_values:
            env = PowerReachEnv(scenario, episode.model_copy(update={"p_g_mw": p_g, "r_motor": r_motor,
                                                                    "sample_horizon": False}))
            for tau in taus:
                cell_seed = int(next(cell_seeds).generate_state(1)[0])
                try:
                    est = mc_estimate(env, policy, n, cell_seed, horizon=tau, workers=workers, confidence=confidence)
                except InfeasibleInitialConditionError as e:
                    logger.warning(f"infeasible cell: tau={tau}, Pg={p_g}, Rmotor={r_motor}, reason={e}")
                    est = McEstimate.infeasible_cell()
                surface.cells.append(RiskCell(tau, p_g, r_motor, est))
                logger.info(f"risk cell: tau={tau}, Pg={p_g}, Rmotor={r_motor}, risk={est.risk:.4f}, "
                            f"redraws={est.redraws}")
    return surface


# ============================================================================
# Learned vs DP oracle
# ============================================================================

@dataclass
class ComparisonReport:
    max_abs_error: float
    mean_abs_error: float
    action_agreement: float
    n_states: int
    decomposition_error: Optional[float] = None
    worst_state: Tuple[float, float] = (float("nan"), float("nan"))
    action_agreement_exact: float = float("nan")

    def as_dict(self) -> Dict[str, Any]:
        return {"max_abs_error": self.max_abs_error, "mean_abs_error": self.mean_abs_error,
                "action_agreement": self.action_agreement, "action_agreement_exact": self.action_agreement_exact,
                "n_states": self.n_states,
                "decomposition_error": self.decomposition_error, "worst_state": list(self.worst_state)}


def evaluation_states(env: ToyEnv, dp: DpTable, points: int) -> Tuple[np.ndarray, np.ndarray]:
    """
    points x points grid: h spread evenly over [dt, N dt] and z over the safe
    part of the start range. Start horizons are sampled continuously, so every
    h in that span is reachable; v* is constant between decision times.
    """
    n_steps = dp.horizon_steps
    hs = np.linspace(dp.dt, n_steps * dp.dt, points)
    spacing = dp.z[1] - dp.z[0]
    lo = max(env.config.z0_low, spacing)
    hi = env.config.z0_high if env.config.z_upper is None else min(env.config.z0_high, env.config.z_upper - spacing)
    zs = np.linspace(lo, hi, points)
    hh, zz = np.meshgrid(hs, zs, indexing="ij")
    return hh.ravel(), zz.ravel()


def action_value(env: ToyEnv, dp: DpTable, h: float, z: float, u: float) -> float:
    """DP value of taking u at (h, z) and acting optimally afterwards."""
    cfg = env.config
    n = dp.index(h)
    prev = dp.values[n - 1]
    lo, hi = int(np.argmin(np.abs(dp.z))), (len(dp.z) - 1 if cfg.z_upper is None
                                            else int(np.argmin(np.abs(dp.z - cfg.z_upper))))
    tail = prev[hi] if cfg.z_upper is None else 0.0
    mu = np.array([z + env.drift(u)])
    return float(gaussian_expectation(dp.z[lo:hi + 1], prev[lo:hi + 1], mu, cfg.sigma * math.sqrt(cfg.dt), tail,
                                      open_top=cfg.z_upper is not None)[0])


def compare_learned_vs_oracle(env: ToyEnv, ensemble: MultiCriticEnsemble, dp: DpTable, points: int = 20,
                              action_tol: float = 0.01) -> ComparisonReport:
    """
    Value error of the learned safety value (min over mechanism critics, clipped
    to [0, 1]) against v*(h, z), and two agreement shares for the greedy action:
    `action_agreement` counts states where its DP value is within `action_tol`
    of v*, `action_agreement_exact` states where the greedy action snapped to
    the DP action grid is one of the DP argmax actions.
    """
    hs, zs = evaluation_states(env, dp, points)
    obs = np.array([env.obs_at(h, z) for h, z in zip(hs, zs)])
    values = ensemble.values(obs)
    learned = 1.0 - risk_from_value(values["min"])
    truth = np.array([dp.value(h, z) for h, z in zip(hs, zs)])
    err = np.abs(learned - truth)
    actions = ensemble.act(obs)[:, 0]
    agree = np.array([action_value(env, dp, h, z, a) >= dp.value(h, z) - action_tol
                      for h, z, a in zip(hs, zs, actions)])
    snapped = np.argmin(np.abs(dp.u[None, :] - actions[:, None]), axis=1)
    exact = []
    for h, z, k in zip(hs, zs, snapped):
        q = np.array([action_value(env, dp, h, z, u) for u in dp.u])
        exact.append(q[k] >= q.max() - 1e-12)
    decomposition = None
    if ensemble.has_total:
        mech_risk = sum(risk_from_value(values[label]) for label in ensemble.head_labels[:ensemble.n_mechanisms])
        decomposition = float(np.max(np.abs(mech_risk - risk_from_value(values["total"]))))
    worst = int(np.argmax(err))
    report = ComparisonReport(float(err.max()), float(err.mean()), float(agree.mean()), len(hs),
                              decomposition, (float(hs[worst]), float(zs[worst])), float(np.mean(exact)))
    logger.info(f"learned vs DP: max_err={report.max_abs_error:.4f}, mean_err={report.mean_abs_error:.4f}, "
                f"agreement={report.action_agreement:.3f}, exact_agreement={report.action_agreement_exact:.3f}")
    return report


def add_learned_risk(frame: pd.DataFrame, ensemble: MultiCriticEnsemble, scenario: ScenarioConfig,
                     episode: EpisodeConfig, seed: int) -> pd.DataFrame:
    """
    Append the critic risk clip(1 - Q, 0, 1) at each cell's initial state
    (columns learned_total, learned_gen, learned_motor) next to the MC columns.
    """
    frame = frame.copy()
    learned = {"learned_total": [], "learned_gen": [], "learned_motor": []}
    for _, row in frame.iterrows():
        env = PowerReachEnv(scenario, episode.model_copy(update={"p_g_mw": row["Pg"], "r_motor": row["Rmotor"],
                                                                "sample_horizon": False}))
        try:
            s, _ = env.reset(np.random.default_rng(seed), horizon=row["tau"])
        except InfeasibleInitialConditionError:
            for values in learned.values():
                values.append(float("nan"))
            continue
        risks = critic_risk(ensemble, env.observation(s)[None, :])
        labels = ensemble.head_labels
        learned["learned_gen"].append(float(risks[labels[0]][0]))
        learned["learned_motor"].append(float(risks[labels[1]][0]) if ensemble.n_mechanisms > 1 else 0.0)
        learned["learned_total"].append(float(risks["total" if ensemble.has_total else "min"][0]))
    for column, values in learned.items():
        frame[column] = values
    return frame
