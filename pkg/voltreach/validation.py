"""
Invariant suites behind `voltreach validate`.

Each check returns a CheckResult; `run_all` collects them into a
ValidationReport. The toy environment provides the exact references, so the
whole suite runs in seconds except the power-flow residual check.
"""

import logging
import math
from pathlib import Path
from typing import Callable, List, Optional

import numpy as np

from voltreach.errors import (CheckpointFormatError, GridCoverageError, InfeasibleInitialConditionError,
                              NonConvergenceError)
from voltreach.models import CheckResult, GridSpec, RunConfig, Td3Config, ToyConfig, ValidationReport
from voltreach.neural import Adam, Mlp, dumps_checkpoint, load_checkpoint, loads_checkpoint
from voltreach.oracle import mc_estimate
from voltreach.reach import run_episode
from voltreach.simulator import initialize, network_residual
from voltreach.td3 import MultiCriticEnsemble
from voltreach.toy import ToyEnv, dp_solve_toy

logger = logging.getLogger(__name__)


def sine_policy(obs: np.ndarray) -> float:
    return float(np.sin(3.0 * np.sum(obs)))


def check_return_equivalence(toy: ToyConfig, episodes: int = 1000, seed: int = 0) -> CheckResult:
    """Collapsed and literal rollouts on the same noise streams give the same returns."""
    collapsed = ToyEnv(toy, sample_horizon=True)
    literal = ToyEnv(toy, sample_horizon=True, literal=True)
    mismatches = 0
    for ss in np.random.SeedSequence(seed).spawn(episodes):
        a = run_episode(collapsed, sine_policy, np.random.default_rng(ss))
        b = run_episode(literal, sine_policy, np.random.default_rng(ss))
        if a.returns.total != b.returns.total or not np.array_equal(a.returns.mechanisms, b.returns.mechanisms):
            mismatches += 1
    return CheckResult(name="return_equivalence", passed=mismatches == 0,
                       detail={"episodes": episodes, "mismatches": mismatches})


def check_decomposition(toy: ToyConfig, n: int = 2000, seed: int = 0) -> CheckResult:
    """Mechanism failure counts partition the total failure count."""
    cfg = toy if toy.z_upper is not None else toy.model_copy(update={"z_upper": 3.0})
    env = ToyEnv(cfg)
    est = mc_estimate(env, None, n, seed, z0=1.5)
    failures = est.n - est.n_safe
    counted = sum(est.counts.values())
    risk_gap = abs(sum(est.mechanism_risk(label) for label in env.mechanism_labels) - est.risk)
    return CheckResult(name="decomposition", passed=counted == failures and risk_gap < 1e-12,
                       detail={"failures": failures, "counted": counted, "counts": est.counts, "risk_gap": risk_gap})


def check_monotonicity(toy: ToyConfig, grid: GridSpec, n: int = 2000, seed: int = 0) -> CheckResult:
    """Safety does not grow with the horizon, both in the DP table and in Monte Carlo."""
    dp = dp_solve_toy(toy, grid)
    dp_ok = bool(np.all(np.diff(dp.values, axis=0) <= 1e-12))
    env = ToyEnv(toy)
    taus = [toy.dt * k for k in range(1, int(toy.tau_max / toy.dt) + 1, max(1, int(toy.tau_max / toy.dt) // 4))]
    estimates = [mc_estimate(env, None, n, seed, horizon=tau, z0=1.0) for tau in taus]
    violations = []
    for (t1, e1), (t2, e2) in zip(zip(taus, estimates), zip(taus[1:], estimates[1:])):
        joint = math.sqrt(e1.std_error ** 2 + e2.std_error ** 2)
        if e1.p_safe < e2.p_safe - 2.0 * joint:
            violations.append([t1, t2])
    return CheckResult(name="horizon_monotonicity", passed=dp_ok and not violations,
                       detail={"dp_monotone": dp_ok, "taus": taus, "p_safe": [e.p_safe for e in estimates],
                               "violations": violations})


def gradient_check(net: Mlp, x: np.ndarray, upstream: np.ndarray, delta: float = 1e-5) -> float:
    """Largest relative error between backward() and central differences over all parameters."""
    net.forward(x)
    grads, _ = net.backward(upstream)
    worst = 0.0
    for p, g in zip(net.params, grads):
        fd = np.empty_like(p)
        for idx in np.ndindex(p.shape):
            keep = p[idx]
            p[idx] = keep + delta
            plus = float(np.sum(net.forward(x) * upstream))
            p[idx] = keep - delta
            minus = float(np.sum(net.forward(x) * upstream))
            p[idx] = keep
            fd[idx] = (plus - minus) / (2.0 * delta)
        scale = max(np.max(np.abs(g)), np.max(np.abs(fd)), 1e-12)
        worst = max(worst, float(np.max(np.abs(g - fd)) / scale))
    return worst


def check_gradients(nets: int = 10, seed: int = 0) -> CheckResult:
    rng = np.random.default_rng(seed)
    errors = []
    for i in range(nets):
        head = "tanh" if i % 2 else "linear"
        net = Mlp.init([3, 6, 5, 2], rng, head=head, final_scale=0.5)
        # nonzero biases keep ReLU pre-activations off the kink
        for b in net.biases:
            b[:] = rng.uniform(-0.5, 0.5, size=b.shape)
        x = rng.standard_normal((4, 3))
        errors.append(gradient_check(net, x, rng.standard_normal((4, 2))))
    return CheckResult(name="mlp_gradients", passed=max(errors) < 1e-4, detail={"max_relative_error": max(errors)})


def check_adam(steps: int = 200, lr: float = 0.1) -> CheckResult:
    """Adam on f(w) = w^2 from w = 1."""
    w = np.array([1.0])
    opt = Adam(lr)
    for _ in range(steps):
        opt.step([w], [2.0 * w])
    return CheckResult(name="adam_quadratic", passed=abs(float(w[0])) < 0.01, detail={"w": float(w[0])})


def check_dp_coverage(toy: ToyConfig, grid: GridSpec) -> CheckResult:
    try:
        dp = dp_solve_toy(toy, grid)
    except GridCoverageError as e:
        return CheckResult(name="dp_coverage", passed=False, detail={"error": str(e)})
    in_range = bool(np.all((dp.values >= -1e-12) & (dp.values <= 1.0 + 1e-12)))
    safe = dp.z > 0
    z_monotone = bool(np.all(np.diff(dp.values[:, safe], axis=1) >= -1e-9)) if toy.z_upper is None else True
    return CheckResult(name="dp_coverage", passed=in_range and z_monotone,
                       detail={"in_unit_interval": in_range, "monotone_in_z": z_monotone,
                               "steps": dp.horizon_steps, "nodes": len(dp.z)})


def check_checkpoint(path: Optional[str], learner: Td3Config, seed: int = 0) -> CheckResult:
    """An explicit checkpoint must load; otherwise a fresh ensemble must round-trip bit for bit."""
    if path:
        try:
            nets, config_hash = load_checkpoint(Path(path))
        except CheckpointFormatError as e:
            return CheckResult(name="checkpoint", passed=False, detail={"path": path, "error": str(e)})
        return CheckResult(name="checkpoint", passed=True, detail={"path": path, "networks": len(nets)})
    ens = MultiCriticEnsemble.create(2, ["Lower", "Upper"], learner, np.random.default_rng(seed))
    nets, _ = loads_checkpoint(dumps_checkpoint(ens.networks(), "roundtrip"))
    exact = all(np.array_equal(a, b) for name, net in ens.networks().items()
                for a, b in zip(net.params, nets[name].params))
    return CheckResult(name="checkpoint", passed=exact, detail={"round_trip_exact": exact})


def check_network_residual(config: RunConfig, tol: float = 1e-8) -> CheckResult:
    try:
        state = initialize(config.scenario)
    except (InfeasibleInitialConditionError, NonConvergenceError) as e:
        return CheckResult(name="network_residual", passed=False, detail={"error": str(e)})
    residual = network_residual(state)
    return CheckResult(name="network_residual", passed=residual < tol, detail={"residual": residual})


def run_all(config: RunConfig, seed: Optional[int] = None) -> ValidationReport:
    seed = config.run.seed if seed is None else seed
    toy, grid = config.toy, config.oracle.grid
    suite: List[Callable[[], CheckResult]] = [
        lambda: check_return_equivalence(toy, seed=seed),
        lambda: check_decomposition(toy, seed=seed),
        lambda: check_monotonicity(toy, grid, seed=seed),
        lambda: check_gradients(seed=seed),
        lambda: check_adam(),
        lambda: check_dp_coverage(toy, grid),
        lambda: check_checkpoint(config.run.checkpoint, config.learner, seed=seed),
        lambda: check_network_residual(config),
    ]
    results = []
    for check in suite:
        result = check()
        logger.info(f"check {result.name}: passed={result.passed}")
        results.append(result)
    return ValidationReport(passed=all(r.passed for r in results), checks=results)
