"""
Slow/fast simulator of the four-bus voltage-stability test system.

Fast states y = [delta, domega, E'_q, E_fd, slip] and the OXL integrator are
integrated with a partitioned explicit RK4 scheme: the network is re-solved at
every stage. The discrete devices (LTC tap logic, OXL activation) act between
fast steps in `step_slow`; a step in which X_oxl crosses its threshold is split
at the crossing. All per-unit values are on the system base except the motor
torque and inertia, which are on the motor rating.

Models:
    generator   one-axis (flux-decay) model, E'_q at angle delta behind jX'_d
    AVR         first-order with non-windup ceiling, OXL cap on E_fd
    OXL         timed integrator of the field-current excess
    motor       first-order slip model, steady-state equivalent circuit R_r/s + jX_m
    load        exponential P0 (V/V0)^alpha, Q0 (V/V0)^beta
    LTC         discrete taps with deadband, initial and subsequent delays
"""

import logging
import math
from collections import deque
from dataclasses import dataclass, field, replace
from enum import IntEnum
from typing import Callable, Deque, Dict, List, Optional, Tuple

import numpy as np
import pandas as pd

from voltreach.errors import InfeasibleInitialConditionError, NonConvergenceError
from voltreach.models import DisturbanceSpec, ScenarioConfig
from voltreach.network import (BUS1, BUS2, BUS3, BUS4, N_BUS, Injections, NetworkModel,
                               newton_raphson, power_mismatch, solve_injections)

logger = logging.getLogger(__name__)

TRAJECTORY_COLUMNS = ["t", "V1", "V2", "V3", "V4", "delta", "domega", "Eq", "Efd",
                      "Xoxl", "slip", "tap", "V3ref", "event"]

LOAD_RAMP_STEPS = 10
MIN_INITIAL_VOLTAGE = 0.7


class Mechanism(IntEnum):
    GENERATOR_LOSS = 1
    MOTOR_STALL = 2

    @property
    def label(self) -> str:
        return "GeneratorLoss" if self is Mechanism.GENERATOR_LOSS else "MotorStall"


@dataclass
class GeneratorState:
    delta: float
    domega: float
    eq: float
    efd: float
    pm: float
    online: bool = True


@dataclass
class AvrOxlState:
    v_ref: float
    x_oxl: float = 0.0
    oxl_active: bool = False


@dataclass
class MotorState:
    slip: float
    tm: float


@dataclass
class LoadModel:
    p_total_mw: float
    r_motor: float
    p0: float
    q0: float
    v0: float
    alpha: float
    beta: float


@dataclass
class LtcState:
    v3_ref: float
    timer_steps: int = 0
    direction: int = 0
    moves: int = 0
    sequence_moves: int = 0


@dataclass
class SimEvent:
    t: float
    kind: str
    detail: str = ""


@dataclass
class InstabilityEvent:
    mechanism: Mechanism
    t: float
    detail: str


@dataclass
class TrajectoryWindow:
    """Recent (t, delta, slip) samples used by the instability criteria."""
    length: float
    delta_ref: float
    samples: Deque[Tuple[float, float, float]] = field(default_factory=deque)

    def push(self, t: float, delta: float, slip: float) -> None:
        self.samples.append((t, delta, slip))
        while self.samples and self.samples[0][0] < t - self.length - 1e-9:
            self.samples.popleft()

    def copy(self) -> "TrajectoryWindow":
        return TrajectoryWindow(self.length, self.delta_ref, deque(self.samples))


@dataclass
class SimState:
    t: float
    gen: GeneratorState
    exc: AvrOxlState
    motor: MotorState
    load: LoadModel
    ltc: LtcState
    network: NetworkModel
    voltages: np.ndarray
    config: ScenarioConfig
    delta_ref: float
    events: List[SimEvent] = field(default_factory=list)
    instability: Optional[InstabilityEvent] = None
    window: Optional[TrajectoryWindow] = None
    nominal: Optional[Tuple[float, float, float]] = None

    def copy(self) -> "SimState":
        return replace(self, gen=replace(self.gen), exc=replace(self.exc), motor=replace(self.motor),
                       load=replace(self.load), ltc=replace(self.ltc), network=self.network.copy(),
                       voltages=self.voltages.copy(), events=list(self.events),
                       window=self.window.copy() if self.window else None)

    @property
    def fast(self) -> np.ndarray:
        return np.array([self.gen.delta, self.gen.domega, self.gen.eq, self.gen.efd, self.motor.slip])

    def set_fast(self, y: np.ndarray) -> None:
        self.gen.delta, self.gen.domega, self.gen.eq, self.gen.efd, self.motor.slip = (float(v) for v in y)

    def log(self, kind: str, detail: str = "") -> None:
        self.events.append(SimEvent(self.t, kind, detail))


@dataclass
class FastEquilibrium:
    delta: float
    eq: float
    efd: float
    slip: float
    voltages: np.ndarray
    residual: float


@dataclass
class SlowVariables:
    tap: float
    x_oxl: float
    oxl_active: bool
    pm: float
    v_ref: float
    load: LoadModel
    tm: float


# ============================================================================
# Device equations
# ============================================================================

def motor_torque(slip: float, vm: float, rr: float, xm: float) -> float:
    """Steady-state equivalent-circuit electrical torque (motor base), >= 0 for slip >= 0."""
    return vm * vm * rr * slip / (rr * rr + slip * slip * xm * xm)


def motor_slip(tm: float, vm: float, rr: float, xm: float) -> Optional[float]:
    """Stable (low-slip) root of T_e(s) = T_m, or None when the torque exceeds the peak."""
    if tm <= 0:
        return 0.0
    disc = (vm * vm * rr) ** 2 - 4.0 * (tm * xm * rr) ** 2
    if disc < 0:
        return None
    return (vm * vm * rr - math.sqrt(disc)) / (2.0 * tm * xm * xm)


def peak_torque_slip(config: ScenarioConfig) -> float:
    return config.motor.rr / config.motor.xm


def build_load(config: ScenarioConfig, p_total_mw: float, r_motor: float, v0: float = 1.0) -> Tuple[LoadModel, float]:
    """Split the demand between the exponential load and the motor; returns (load, motor torque)."""
    s_base = config.network.s_base_mva
    p_exp = (1.0 - r_motor) * p_total_mw / s_base
    q_exp = (1.0 - r_motor) * config.load.q_ratio * p_total_mw / s_base
    tm = r_motor * p_total_mw / config.motor.mva_base
    load = LoadModel(p_total_mw, r_motor, p_exp, q_exp, v0, config.load.alpha, config.load.beta)
    return load, tm


def _injections(state: SimState, y: np.ndarray) -> Injections:
    cfg = state.config
    inj = Injections()
    if state.gen.online:
        y_g = 1.0 / (1j * cfg.generator.xd_prime)
        inj.y_shunt[BUS2] = y_g
        inj.i_source[BUS2] = y[2] * complex(math.cos(y[0]), math.sin(y[0])) * y_g
    slip = y[4]
    if slip > 0:
        k = cfg.motor.mva_base / cfg.network.s_base_mva
        inj.y_shunt[BUS3] += k * slip / complex(cfg.motor.rr, slip * cfg.motor.xm)
    inj.p0[BUS3] = state.load.p0
    inj.q0[BUS3] = state.load.q0
    inj.v0[BUS3] = state.load.v0
    inj.alpha = state.load.alpha
    inj.beta = state.load.beta
    return inj


def _efd_limits(state: SimState) -> Tuple[float, float]:
    exc = state.config.exciter
    upper = exc.efd_max
    if state.exc.oxl_active:
        upper = min(upper, exc.ifd_limit)
    return exc.efd_min, upper


def generator_quantities(state: SimState, y: np.ndarray, v: np.ndarray) -> Tuple[float, float]:
    """(P_e, i_f) of the generator for fast states y and bus voltages v."""
    cfg = state.config.generator
    if not state.gen.online:
        return 0.0, 0.0
    delta, eq = y[0], y[2]
    v2 = v[BUS2]
    vm2, th2 = abs(v2), math.atan2(v2.imag, v2.real)
    p_e = eq * vm2 * math.sin(delta - th2) / cfg.xd_prime
    i_d = (eq - vm2 * math.cos(delta - th2)) / cfg.xd_prime
    return p_e, eq + (cfg.xd - cfg.xd_prime) * i_d


def field_current(state: SimState) -> float:
    return generator_quantities(state, state.fast, state.voltages)[1]


def fast_derivatives(state: SimState, y: np.ndarray, v: np.ndarray) -> np.ndarray:
    """dy/dt of the fast subsystem for fixed slow variables (the g(x, y) of the model)."""
    cfg = state.config
    dy = np.zeros(5)
    if state.gen.online:
        gen, exc = cfg.generator, cfg.exciter
        p_e, i_f = generator_quantities(state, y, v)
        dy[0] = gen.omega_s * y[1]
        dy[1] = (state.gen.pm - p_e - gen.d * y[1]) / (2.0 * gen.h)
        dy[2] = (y[3] - i_f) / gen.td0_prime
        defd = (exc.ka * (state.exc.v_ref - abs(v[BUS2])) - y[3]) / exc.ta
        lower, upper = _efd_limits(state)
        if (y[3] >= upper and defd > 0) or (y[3] <= lower and defd < 0):
            defd = 0.0
        dy[3] = defd
    mot = cfg.motor
    slip = y[4]
    ds = (state.motor.tm - motor_torque(slip, abs(v[BUS3]), mot.rr, mot.xm)) / (2.0 * mot.hm)
    if (slip >= 1.0 and ds > 0) or (slip <= 0.0 and ds < 0):
        ds = 0.0
    dy[4] = ds
    return dy


def _clamp_fast(state: SimState, y: np.ndarray) -> np.ndarray:
    lower, upper = _efd_limits(state)
    y[3] = min(max(y[3], lower), upper)
    y[4] = min(max(y[4], 0.0), 1.0)
    return y


# ============================================================================
# Network solve and fast stepping
# ============================================================================

def _solve(state: SimState, y: np.ndarray, v_start: np.ndarray) -> np.ndarray:
    net = state.config.network
    v, _, _ = solve_injections(state.network.ybus(), _injections(state, y), state.network.source_voltage,
                               v_start=v_start, tol=net.newton_tol, max_iter=net.newton_max_iter)
    return v


def solve_network(state: SimState) -> np.ndarray:
    """Bus voltages V1..V4 for the current fast states (warm start: cached solution)."""
    v_start = state.voltages if state.voltages is not None else None
    return _solve(state, state.fast, v_start)


def network_residual(state: SimState) -> float:
    mismatch = power_mismatch(state.network.ybus(), state.voltages, _injections(state, state.fast))
    return float(np.max(np.abs(mismatch[1:])))


def oxl_rate(state: SimState, y: np.ndarray, v: np.ndarray, x_oxl: float) -> float:
    """dX_oxl/dt: gain times the field-current excess, held at zero on the floor."""
    exc = state.config.exciter
    if not (exc.oxl_enabled and state.gen.online):
        return 0.0
    rate = exc.oxl_gain * (generator_quantities(state, y, v)[1] - exc.ifd_limit)
    return 0.0 if x_oxl <= 0.0 and rate < 0.0 else rate


def step_fast(state: SimState, h_int: float) -> SimState:
    """One partitioned RK4 step of the fast states and X_oxl; the network is re-solved at every stage."""
    if h_int <= 0:
        raise ValueError("h_int must be positive")

    def deriv(z: np.ndarray, v: np.ndarray) -> np.ndarray:
        return np.append(fast_derivatives(state, z[:5], v), oxl_rate(state, z[:5], v, z[5]))

    z0 = np.append(state.fast, state.exc.x_oxl)
    v0 = state.voltages
    try:
        k1 = deriv(z0, v0)
        z1 = z0 + 0.5 * h_int * k1
        v1 = _solve(state, z1[:5], v0)
        k2 = deriv(z1, v1)
        z2 = z0 + 0.5 * h_int * k2
        v2 = _solve(state, z2[:5], v1)
        k3 = deriv(z2, v2)
        z3 = z0 + h_int * k3
        v3 = _solve(state, z3[:5], v2)
        k4 = deriv(z3, v3)
        z_new = z0 + (h_int / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        y_new = _clamp_fast(state, z_new[:5])
        v_new = _solve(state, y_new, v3)
    except NonConvergenceError as e:
        raise e.at(state.t + h_int)
    state.set_fast(y_new)
    state.exc.x_oxl = max(0.0, float(z_new[5]))
    state.voltages = v_new
    state.t += h_int
    return state


def _fast_substep(state: SimState, h: float) -> None:
    """step_fast, split at the threshold crossing when the OXL arms inside the step."""
    exc = state.config.exciter
    if state.exc.oxl_active or not exc.oxl_enabled or state.exc.x_oxl >= exc.oxl_threshold:
        step_fast(state, h)
        return
    t0, y0, x0, v0 = state.t, state.fast, state.exc.x_oxl, state.voltages.copy()
    step_fast(state, h)
    x1 = state.exc.x_oxl
    theta = (exc.oxl_threshold - x0) / (x1 - x0) if x1 >= exc.oxl_threshold else 1.0
    if theta >= 1.0 - 1e-9:
        return
    state.t, state.exc.x_oxl, state.voltages = t0, x0, v0
    state.set_fast(y0)
    step_fast(state, theta * h)
    _activate_oxl(state)
    step_fast(state, (1.0 - theta) * h)
    state.t = t0 + h

# ============================================================================
# Slow devices
# ============================================================================

def _activate_oxl(state: SimState) -> None:
    exc = state.config.exciter
    state.exc.oxl_active = True
    state.gen.efd = min(state.gen.efd, exc.ifd_limit)
    state.log("oxl_activation", f"x_oxl={state.exc.x_oxl:.3f}")
    logger.info(f"OXL activated: t={state.t:.2f}, efd_cap={exc.ifd_limit}")


def _update_oxl(state: SimState) -> None:
    """Arm the cap at the threshold; release it once X_oxl has decayed to zero."""
    exc = state.config.exciter
    if not (exc.oxl_enabled and state.gen.online):
        return
    if not state.exc.oxl_active and state.exc.x_oxl >= exc.oxl_threshold:
        _activate_oxl(state)
    elif state.exc.oxl_active and state.exc.x_oxl <= 0.0:
        state.exc.oxl_active = False
        state.log("oxl_release")
        logger.info(f"OXL released: t={state.t:.2f}")


def _update_ltc(state: SimState, h: float) -> bool:
    ltc_cfg = state.config.ltc
    if not ltc_cfg.enabled:
        return False
    ltc = state.ltc
    err = abs(state.voltages[BUS3]) - ltc.v3_ref
    if abs(err) <= ltc_cfg.deadband:
        ltc.timer_steps = 0
        ltc.direction = 0
        ltc.sequence_moves = 0
        return False
    direction = -1 if err < 0 else 1
    if direction != ltc.direction:
        ltc.direction = direction
        ltc.timer_steps = 0
        ltc.sequence_moves = 0
    ltc.timer_steps += 1
    delay = ltc_cfg.delay_initial if ltc.sequence_moves == 0 else ltc_cfg.delay_subsequent
    if ltc.timer_steps < round(delay / h):
        return False
    ltc.timer_steps = 0
    ltc.sequence_moves += 1
    old = state.network.tap
    state.network.set_tap(old + direction * ltc_cfg.step)
    if state.network.tap == old:
        return False
    ltc.moves += 1
    state.log("tap", f"r={state.network.tap:.4f}")
    logger.debug(f"tap move: t={state.t:.2f}, r={state.network.tap:.4f}")
    return True


def step_slow(state: SimState, window: float) -> SimState:
    """
    Advance the whole system by `window` seconds.

    Each fast substep is followed by the OXL activation logic, the LTC tap
    logic and the instability criteria. Stepping stops at the first detected
    instability, which is stored on the state.

    Raises:
        NonConvergenceError: stamped with the time of the failed substep.
    """
    h = state.config.h_int
    n = int(round(window / h))
    if n < 1 or abs(n * h - window) > 1e-9 * max(1.0, window):
        raise ValueError(f"window {window} is not an integer multiple of h_int={h}")
    if state.instability is not None:
        return state
    for _ in range(n):
        _fast_substep(state, h)
        _update_oxl(state)
        if _update_ltc(state, h):
            try:
                state.voltages = solve_network(state)
            except NonConvergenceError as e:
                raise e.at(state.t)
        if state.window is not None:
            state.window.push(state.t, state.gen.delta, state.motor.slip)
        event = detect_instability(state, state.window)
        if event is not None:
            record_instability(state, event)
            break
    return state


def record_instability(state: SimState, event: InstabilityEvent) -> None:
    if state.instability is not None:
        return
    state.instability = event
    state.events.append(SimEvent(event.t, event.mechanism.label, event.detail))
    logger.info(f"instability detected: mechanism={event.mechanism.label}, t={event.t:.2f}, detail={event.detail}")


def apply_disturbance(state: SimState, event: DisturbanceSpec) -> SimState:
    state.network.trip(event.branch)
    state.delta_ref = state.gen.delta
    if state.window is not None:
        state.window.delta_ref = state.gen.delta
    state.log("trip", event.branch)
    state.voltages = solve_network(state)
    return state


def field_limited(state: SimState) -> bool:
    return state.exc.oxl_active or state.gen.efd >= state.config.exciter.efd_max - 1e-9


def detect_instability(state: SimState, history: Optional[TrajectoryWindow] = None,
                       solve_failed: bool = False) -> Optional[InstabilityEvent]:
    """
    Instability criteria, first match wins:
        solve failure    MotorStall if slip is beyond the peak-torque slip,
                         otherwise GeneratorLoss (field limited or by default)
        pole slip        |delta - delta_ref| >= pole_slip_angle -> GeneratorLoss
        stall            slip >= s_stall -> MotorStall
    """
    cfg = state.config
    if solve_failed:
        if state.motor.tm > 0 and state.motor.slip > peak_torque_slip(cfg):
            return InstabilityEvent(Mechanism.MOTOR_STALL, state.t,
                                    f"network solve failed with slip {state.motor.slip:.3f} beyond peak-torque slip")
        detail = "network solve failed while field limited" if field_limited(state) else "network solve failed"
        return InstabilityEvent(Mechanism.GENERATOR_LOSS, state.t, detail)

    if history is not None and history.samples:
        delta_ref = history.delta_ref
        deltas = [s[1] for s in history.samples]
        slips = [s[2] for s in history.samples]
    else:
        delta_ref = state.delta_ref
        deltas = [state.gen.delta]
        slips = [state.motor.slip]

    if state.gen.online:
        excursion = max(abs(d - delta_ref) for d in deltas)
        if excursion >= cfg.detection.pole_slip_angle:
            return InstabilityEvent(Mechanism.GENERATOR_LOSS, state.t,
                                    f"rotor angle excursion {math.degrees(excursion):.1f} deg")
    if max(slips) >= cfg.motor.s_stall:
        return InstabilityEvent(Mechanism.MOTOR_STALL, state.t, f"slip {max(slips):.3f} >= {cfg.motor.s_stall}")
    return None


# ============================================================================
# Steady state and short-term equilibrium
# ============================================================================

def _initial_flow(config: ScenarioConfig, network: NetworkModel, load: LoadModel, tm: float,
                  p_g: float, gen_online: bool, v_start: Optional[np.ndarray] = None) -> np.ndarray:
    """
    Power flow with the generator as a PV bus and the loads at their nominal powers.

    Without a warm start the demand is ramped up from zero in
    LOAD_RAMP_STEPS Newton solves, which keeps the iterate on the high-voltage
    branch of the PV curve.
    """
    ybus = network.ybus()
    vs = network.source_voltage
    mot = config.motor
    k = mot.mva_base / config.network.s_base_mva
    s_peak = peak_torque_slip(config)
    v_set = config.generator.v_setpoint
    p_load = load.p0 + k * tm

    def q_load(vm3: float) -> float:
        slip = motor_slip(tm, vm3, mot.rr, mot.xm)
        slip = s_peak if slip is None else slip
        return load.q0 + k * vm3 * vm3 * slip * slip * mot.xm / (mot.rr ** 2 + (slip * mot.xm) ** 2)

    def residual(x: np.ndarray, scale: float) -> np.ndarray:
        v = np.empty(N_BUS, dtype=complex)
        v[BUS1] = vs
        v[1:] = x[:3] + 1j * x[3:]
        s_net = v * np.conj(ybus @ v)
        if gen_online:
            gen = [s_net[BUS2].real - p_g, abs(v[BUS2]) ** 2 - v_set ** 2]
        else:
            gen = [s_net[BUS2].real, s_net[BUS2].imag]
        s3 = s_net[BUS3] + scale * (p_load + 1j * q_load(abs(v[BUS3])))
        return np.array(gen + [s3.real, s3.imag, s_net[BUS4].real, s_net[BUS4].imag])

    net = config.network
    if v_start is None:
        x = np.array([1.0, 1.0, 1.0, 0.0, 0.0, 0.0])
        scales = np.linspace(0.0, 1.0, LOAD_RAMP_STEPS + 1)
    else:
        x = np.concatenate([v_start[1:].real, v_start[1:].imag])
        scales = [1.0]
    for scale in scales:
        x, _, _ = newton_raphson(lambda z: residual(z, scale), x, tol=net.newton_tol, max_iter=net.newton_max_iter)
    v = np.empty(N_BUS, dtype=complex)
    v[BUS1] = vs
    v[1:] = x[:3] + 1j * x[3:]
    return v


def initialize(config: ScenarioConfig, p_total_mw: Optional[float] = None, r_motor: Optional[float] = None,
               p_g_mw: Optional[float] = None) -> SimState:
    """
    Pre-disturbance steady state for an operating condition.

    The initial tap is chosen so that V3 sits at the LTC reference, the
    exponential-load reference voltage V0 is the initial V3, and the AVR
    reference is backed out of the field voltage.

    Raises:
        InfeasibleInitialConditionError: no steady state for this operating point.
    """
    p_total_mw = config.load.p_total_mw if p_total_mw is None else p_total_mw
    r_motor = config.load.r_motor if r_motor is None else r_motor
    p_g_mw = config.p_g_mw if p_g_mw is None else p_g_mw
    gen_cfg, exc_cfg, mot, ltc_cfg = config.generator, config.exciter, config.motor, config.ltc
    s_base = config.network.s_base_mva
    online = gen_cfg.online

    if online and p_g_mw > gen_cfg.mva_rating:
        raise InfeasibleInitialConditionError(
            f"P_g={p_g_mw} MW exceeds the generator rating {gen_cfg.mva_rating} MVA")

    load, tm = build_load(config, p_total_mw, r_motor)
    network = NetworkModel.from_params(config.network, ltc_cfg, tap=min(max(1.0, ltc_cfg.r_min), ltc_cfg.r_max))
    p_g = p_g_mw / s_base if online else 0.0

    v = None
    for _ in range(50):
        try:
            v = _initial_flow(config, network, load, tm, p_g, online, v_start=v)
        except NonConvergenceError as e:
            raise InfeasibleInitialConditionError(f"no pre-disturbance power-flow solution: {e}")
        if not ltc_cfg.enabled:
            break
        vm3 = abs(v[BUS3])
        if abs(vm3 - ltc_cfg.v3_ref) < 1e-10:
            break
        old = network.tap
        network.set_tap(old * vm3 / ltc_cfg.v3_ref)
        if network.tap == old:
            break
    v_low = float(np.min(np.abs(v[1:])))
    if v_low < MIN_INITIAL_VOLTAGE:
        raise InfeasibleInitialConditionError(f"power flow settled on a low-voltage solution (min |V|={v_low:.4f})")
    vm3 = abs(v[BUS3])
    if ltc_cfg.enabled and abs(vm3 - ltc_cfg.v3_ref) > ltc_cfg.deadband:
        raise InfeasibleInitialConditionError(f"LTC cannot bring V3={vm3:.4f} into its deadband")

    slip = motor_slip(tm, vm3, mot.rr, mot.xm)
    if slip is None:
        raise InfeasibleInitialConditionError(f"motor torque {tm:.3f} exceeds its peak at V3={vm3:.4f}")
    load.v0 = vm3

    if online:
        v2 = v[BUS2]
        s_g = v2 * np.conj((network.ybus() @ v)[BUS2])
        i_g = np.conj(s_g / v2)
        e_int = v2 + 1j * gen_cfg.xd_prime * i_g
        eq, delta = abs(e_int), float(np.angle(e_int))
        angle = delta - float(np.angle(v2))
        if abs(angle) >= math.pi / 2:
            raise InfeasibleInitialConditionError(f"generator load angle {math.degrees(angle):.1f} deg")
        i_d = (eq - abs(v2) * math.cos(angle)) / gen_cfg.xd_prime
        efd = eq + (gen_cfg.xd - gen_cfg.xd_prime) * i_d
        if not exc_cfg.efd_min <= efd <= exc_cfg.efd_max:
            raise InfeasibleInitialConditionError(f"field voltage {efd:.3f} outside exciter limits")
        gen = GeneratorState(delta, 0.0, eq, efd, p_g, online=True)
        exc = AvrOxlState(v_ref=abs(v2) + efd / exc_cfg.ka)
    else:
        gen = GeneratorState(0.0, 0.0, 0.0, 0.0, 0.0, online=False)
        exc = AvrOxlState(v_ref=gen_cfg.v_setpoint)

    state = SimState(t=0.0, gen=gen, exc=exc, motor=MotorState(slip, tm), load=load,
                     ltc=LtcState(v3_ref=ltc_cfg.v3_ref), network=network, voltages=v, config=config,
                     delta_ref=gen.delta,
                     window=TrajectoryWindow(config.detection.window, gen.delta))
    try:
        state.voltages = solve_network(state)
    except NonConvergenceError as e:
        raise InfeasibleInitialConditionError(f"dynamic network does not reproduce the power flow: {e}")
    logger.debug(f"initialised: P_g={p_g_mw}, P_total={p_total_mw}, R_motor={r_motor}, "
                 f"tap={network.tap:.4f}, Eq={gen.eq:.4f}, Efd={gen.efd:.4f}, slip={slip:.4f}")
    return state


def set_operating_point(state: SimState, p_total_mw: float, r_motor: float) -> SimState:
    """Change demand and motor share in place (V0 of the exponential load is kept)."""
    load, tm = build_load(state.config, p_total_mw, r_motor, v0=state.load.v0)
    state.load = load
    state.motor.tm = tm
    try:
        state.voltages = solve_network(state)
    except NonConvergenceError as e:
        raise e.at(state.t)
    return state


def slow_variables(state: SimState) -> SlowVariables:
    return SlowVariables(tap=state.network.tap, x_oxl=state.exc.x_oxl, oxl_active=state.exc.oxl_active,
                         pm=state.gen.pm, v_ref=state.exc.v_ref, load=replace(state.load), tm=state.motor.tm)


def solve_short_term_equilibrium(template: SimState, slow: Optional[SlowVariables] = None) -> Optional[FastEquilibrium]:
    """
    Solve g(x, y) = 0 for the fast states and bus voltages at frozen slow variables.

    `template` supplies topology, parameters and the warm start; `slow`
    overrides its slow variables. Returns None when Newton fails, which is read
    as loss of short-term equilibrium.
    """
    trial = template.copy()
    if slow is not None:
        trial.network.set_tap(slow.tap)
        trial.exc.x_oxl = slow.x_oxl
        trial.exc.oxl_active = slow.oxl_active
        trial.gen.pm = slow.pm
        trial.exc.v_ref = slow.v_ref
        trial.load = replace(slow.load)
        trial.motor.tm = slow.tm
    cfg = trial.config
    ybus = trial.network.ybus()
    vs = trial.network.source_voltage
    mot, exc = cfg.motor, cfg.exciter
    guess = trial.fast

    def residual(x: np.ndarray, efd_fixed: Optional[float]) -> np.ndarray:
        y = np.array([x[0], 0.0, x[1], x[2], x[3]])
        v = np.empty(N_BUS, dtype=complex)
        v[BUS1] = vs
        v[1:] = x[4:7] + 1j * x[7:10]
        mismatch = power_mismatch(ybus, v, _injections(trial, y))[1:]
        if trial.gen.online:
            p_e, i_f = generator_quantities(trial, y, v)
            avr = exc.ka * (trial.exc.v_ref - abs(v[BUS2])) if efd_fixed is None else efd_fixed
            gen = [trial.gen.pm - p_e, x[2] - i_f, x[2] - avr]
        else:
            gen = [x[0] - guess[0], x[1] - guess[2], x[2] - guess[3]]
        motor = [trial.motor.tm - motor_torque(x[3], abs(v[BUS3]), mot.rr, mot.xm)]
        return np.concatenate([mismatch.real, mismatch.imag, gen, motor])

    x0 = np.concatenate([[guess[0], guess[2], guess[3], guess[4]], trial.voltages[1:].real, trial.voltages[1:].imag])

    def attempt(efd_fixed: Optional[float]) -> Optional[np.ndarray]:
        try:
            x, _, _ = newton_raphson(lambda z: residual(z, efd_fixed), x0,
                                     tol=cfg.network.newton_tol, max_iter=cfg.network.newton_max_iter)
        except NonConvergenceError:
            return None
        return x

    x = attempt(None)
    if x is not None and trial.gen.online:
        lower, upper = _efd_limits(trial)
        if x[2] > upper:
            x = attempt(upper)
        elif x[2] < lower:
            x = attempt(lower)
    if x is None or not np.all(np.isfinite(x)) or not 0.0 <= x[3] <= 1.0:
        return None
    v = np.empty(N_BUS, dtype=complex)
    v[BUS1] = vs
    v[1:] = x[4:7] + 1j * x[7:10]
    if np.any(np.abs(v[1:]) < 1e-3):
        return None
    res = float(np.max(np.abs(residual(x, None if not trial.gen.online else x[2]))))
    return FastEquilibrium(delta=float(x[0]), eq=float(x[1]), efd=float(x[2]), slip=float(x[3]),
                           voltages=v, residual=res)


# ============================================================================
# Trajectories
# ============================================================================

@dataclass
class Trajectory:
    frame: pd.DataFrame
    events: List[SimEvent]
    instability: Optional[InstabilityEvent]
    termination: str
    equilibrium_checks: List[Tuple[float, bool]] = field(default_factory=list)

    def event_kinds(self) -> List[str]:
        return [e.kind for e in self.events]

    def first_time(self, kind: str) -> Optional[float]:
        return next((e.t for e in self.events if e.kind == kind), None)

    def to_csv(self, path) -> None:
        self.frame.to_csv(path, index=False, float_format="%.10g")


def _row(state: SimState, label: str) -> Tuple:
    vm = np.abs(state.voltages)
    return (state.t, vm[BUS1], vm[BUS2], vm[BUS3], vm[BUS4], state.gen.delta, state.gen.domega, state.gen.eq,
            state.gen.efd, state.exc.x_oxl, state.motor.slip, state.network.tap, state.ltc.v3_ref, label)


def sample_operating_point(config: ScenarioConfig, rng: np.random.Generator, p_total_mw: float,
                           r_motor: float, demand_sigma_mw: float, ratio_sigma: float) -> Tuple[float, float]:
    """Gaussian perturbation of demand and motor ratio around their nominal values."""
    p = p_total_mw + demand_sigma_mw * rng.standard_normal()
    r = r_motor + ratio_sigma * rng.standard_normal()
    if r_motor == 0.0:
        r = 0.0
    return max(p, 0.0), min(max(r, 0.0), 1.0)


def simulate_trajectory(config: ScenarioConfig, action_source: Optional[Callable[[SimState], float]] = None,
                        rng: Optional[np.random.Generator] = None) -> Trajectory:
    """
    Time-domain rollout of a scenario at h_int resolution.

    `action_source`, when given, is queried every decision_step with the
    current state and returns a in [-1, 1]; V3_ref moves by action_scale * a.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    state = initialize(config)
    h = config.h_int
    n_total = int(round(config.horizon / h))
    dist = config.disturbance
    trip_step = int(round(dist.time / h)) if dist.enabled else None
    decide_every = int(round(config.decision_step / h))
    noise = config.noise
    noisy = noise.demand_sigma_mw > 0 or noise.ratio_sigma > 0
    noise_every = int(round(noise.interval / h))
    ltc = config.ltc

    rows = [_row(state, "")]
    checks: List[Tuple[float, bool]] = []
    termination = "horizon"
    for k in range(n_total):
        seen = len(state.events)
        try:
            if trip_step is not None and k == trip_step:
                apply_disturbance(state, dist)
            if action_source is not None and k % decide_every == 0:
                a = min(max(float(action_source(state)), -1.0), 1.0)
                state.ltc.v3_ref = min(max(state.ltc.v3_ref + config.action_scale * a, 0.9), 1.1)
            if noisy and k > 0 and k % noise_every == 0:
                p, r = sample_operating_point(config, rng, config.load.p_total_mw, config.load.r_motor,
                                              noise.demand_sigma_mw, noise.ratio_sigma)
                set_operating_point(state, p, r)
            if config.check_equilibrium and k % decide_every == 0:
                checks.append((state.t, solve_short_term_equilibrium(state) is not None))
            step_slow(state, h)
        except NonConvergenceError as e:
            event = detect_instability(state, state.window, solve_failed=True)
            event.t = e.t if e.t is not None else state.t
            record_instability(state, event)
        label = ";".join(ev.kind for ev in state.events[seen:])
        rows.append(_row(state, label))
        if state.instability is not None:
            termination = "instability"
            break

    frame = pd.DataFrame(rows, columns=TRAJECTORY_COLUMNS)
    return Trajectory(frame=frame, events=list(state.events), instability=state.instability,
                      termination=termination, equilibrium_checks=checks)
