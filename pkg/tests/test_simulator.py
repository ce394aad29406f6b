"""
Tests for the slow/fast simulator: steady-state initialisation, device
equations, the tie-line trip, tap logic and the instability criteria.
"""
import numpy as np
import pytest

from tests.conftest import REQUIRES_LONG_RUN
from voltreach.calibration import COLLAPSE_WINDOW, OXL_WINDOW, timeline
from voltreach.errors import InfeasibleInitialConditionError, UnknownBranchError
from voltreach.models import DisturbanceSpec, ScenarioConfig
from voltreach.network import BUS1, BUS3, BUS4
from voltreach.simulator import (TRAJECTORY_COLUMNS, Mechanism, apply_disturbance, build_load, detect_instability,
                                 fast_derivatives, initialize, motor_slip, motor_torque, network_residual,
                                 sample_operating_point, slow_variables, solve_short_term_equilibrium, step_slow,
                                 simulate_trajectory)


def test_motor_torque_peak():
    """Peak torque V^2 / (2 X_m) is reached at slip R_r / X_m"""
    rr, xm = 0.03, 0.4
    assert motor_torque(0.0, 1.0, rr, xm) == 0.0
    assert motor_torque(rr / xm, 1.0, rr, xm) == pytest.approx(1.0 / (2.0 * xm))
    assert motor_torque(rr / xm, 1.0, rr, xm) > motor_torque(0.5 * rr / xm, 1.0, rr, xm)


def test_motor_slip_inverts_torque():
    rr, xm = 0.03, 0.4
    slip = motor_slip(0.45, 1.0, rr, xm)

    assert 0.0 < slip < rr / xm
    assert motor_torque(slip, 1.0, rr, xm) == pytest.approx(0.45)
    # beyond the peak there is no operating point
    assert motor_slip(2.0, 1.0, rr, xm) is None


def test_build_load_splits_demand(scenario):
    load, tm = build_load(scenario, 1500.0, 0.3)

    assert load.p0 == pytest.approx(0.7 * 15.0)
    assert load.q0 == pytest.approx(0.7 * 0.2 * 15.0)
    # motor torque on the motor base
    assert tm == pytest.approx(0.45)


def test_initialize_is_a_steady_state(scenario):
    """Test that the initial state satisfies the network and device equations"""
    state = initialize(scenario)

    assert network_residual(state) < 1e-8
    assert abs(abs(state.voltages[BUS3]) - scenario.ltc.v3_ref) <= scenario.ltc.deadband
    assert np.max(np.abs(fast_derivatives(state, state.fast, state.voltages))) < 1e-5
    assert abs(state.voltages[BUS1]) == pytest.approx(scenario.network.source_voltage)
    assert scenario.ltc.r_min <= state.network.tap <= scenario.ltc.r_max
    assert state.exc.x_oxl == 0.0 and not state.exc.oxl_active


def test_initialize_with_motor(scenario):
    state = initialize(scenario, r_motor=0.3)

    assert network_residual(state) < 1e-8
    assert 0.0 < state.motor.slip < scenario.motor.rr / scenario.motor.xm
    assert np.max(np.abs(fast_derivatives(state, state.fast, state.voltages))) < 1e-5


def test_initialize_rejects_generator_overload(scenario):
    with pytest.raises(InfeasibleInitialConditionError):
        initialize(scenario, p_g_mw=900.0)


def test_initialize_rejects_unservable_demand(scenario):
    with pytest.raises(InfeasibleInitialConditionError):
        initialize(scenario, p_total_mw=10000.0)


def test_undisturbed_system_stays_put(scenario):
    """Test that one decision step without a disturbance keeps the equilibrium"""
    state = initialize(scenario)
    v4 = abs(state.voltages[BUS4])
    step_slow(state, 10.0)

    assert state.t == pytest.approx(10.0)
    assert state.instability is None
    assert abs(state.gen.domega) < 1e-6
    assert abs(state.voltages[BUS4]) == pytest.approx(v4, abs=1e-6)
    assert state.ltc.moves == 0


def test_step_slow_rejects_partial_window(scenario):
    state = initialize(scenario)
    with pytest.raises(ValueError):
        step_slow(state, 0.07)


def test_trip_lowers_voltage(scenario):
    """Test the tie-line trip: topology change, event and new network solution"""
    state = initialize(scenario)
    v4 = abs(state.voltages[BUS4])
    apply_disturbance(state, scenario.disturbance)

    assert state.network.transfer_reactance(BUS1, BUS4) == pytest.approx(0.065)
    assert [e.kind for e in state.events] == ["trip"]
    assert network_residual(state) < 1e-8
    assert abs(state.voltages[BUS4]) < v4


def test_trip_unknown_branch(scenario):
    state = initialize(scenario)
    with pytest.raises(UnknownBranchError):
        apply_disturbance(state, DisturbanceSpec(branch="tie_c"))


def test_ltc_first_move_after_initial_delay(scenario):
    """Raising the tap lowers V3; the first move comes after T_d0 = 30 s"""
    state = initialize(scenario)
    tap = state.network.tap
    state.ltc.v3_ref = 0.95

    step_slow(state, 20.0)
    assert state.ltc.moves == 0

    step_slow(state, 10.0)
    assert state.ltc.moves == 1
    assert state.network.tap == pytest.approx(tap + scenario.ltc.step)
    assert "tap" in [e.kind for e in state.events]


def test_detect_pole_slip(scenario):
    state = initialize(scenario)
    state.gen.delta = state.delta_ref + 7.0

    event = detect_instability(state)
    assert event.mechanism is Mechanism.GENERATOR_LOSS


def test_detect_motor_stall(scenario):
    state = initialize(scenario, r_motor=0.3)
    state.motor.slip = 0.96

    event = detect_instability(state)
    assert event.mechanism is Mechanism.MOTOR_STALL
    assert event.mechanism.label == "MotorStall"


def test_detect_solve_failure_attribution(scenario):
    """A failed solve beyond the peak-torque slip is a stall, otherwise a generator loss"""
    state = initialize(scenario, r_motor=0.3)
    assert detect_instability(state, solve_failed=True).mechanism is Mechanism.GENERATOR_LOSS

    state.motor.slip = 0.2
    assert detect_instability(state, solve_failed=True).mechanism is Mechanism.MOTOR_STALL


def test_no_instability_at_steady_state(scenario):
    state = initialize(scenario, r_motor=0.3)
    assert detect_instability(state) is None


def test_short_term_equilibrium_matches_initial_state(scenario):
    state = initialize(scenario)
    eq = solve_short_term_equilibrium(state)

    assert eq is not None
    assert eq.delta == pytest.approx(state.gen.delta, abs=1e-6)
    assert eq.eq == pytest.approx(state.gen.eq, abs=1e-6)
    assert eq.residual < 1e-8


def test_short_term_equilibrium_with_explicit_slow_variables(scenario):
    state = initialize(scenario)
    implicit = solve_short_term_equilibrium(state)
    explicit = solve_short_term_equilibrium(state, slow_variables(state))

    assert explicit is not None
    assert explicit.eq == pytest.approx(implicit.eq, abs=1e-9)
    assert explicit.delta == pytest.approx(implicit.delta, abs=1e-9)


def test_sample_operating_point_keeps_zero_motor(scenario):
    rng = np.random.default_rng(3)
    for _ in range(20):
        p, r = sample_operating_point(scenario, rng, 1500.0, 0.0, 5.0, 0.05)
        assert r == 0.0
        assert p > 0.0

    p, r = sample_operating_point(scenario, rng, 1500.0, 0.99, 0.0, 0.5)
    assert 0.0 <= r <= 1.0


def test_simulate_trajectory_short(scenario):
    """Test a short trajectory around the trip"""
    config = scenario.model_copy(update={"horizon": 20.0})
    traj = simulate_trajectory(config)

    assert list(traj.frame.columns) == TRAJECTORY_COLUMNS
    assert traj.first_time("trip") == pytest.approx(10.0)
    assert traj.frame["t"].iloc[0] == 0.0
    if traj.termination == "horizon":
        assert len(traj.frame) == 401


def test_simulate_trajectory_without_disturbance(scenario):
    config = scenario.model_copy(update={"horizon": 20.0,
                                         "disturbance": DisturbanceSpec(enabled=False)})
    traj = simulate_trajectory(config)

    assert traj.events == []
    assert traj.termination == "horizon"
    assert traj.frame["V3"].sub(1.0).abs().max() < 0.01


def test_trajectory_is_deterministic(scenario):
    config = scenario.model_copy(update={"horizon": 20.0})
    a = simulate_trajectory(config, rng=np.random.default_rng(1))
    b = simulate_trajectory(config, rng=np.random.default_rng(1))

    assert a.frame.equals(b.frame)


def _halving_error(config: ScenarioConfig, h: float) -> dict:
    coarse = simulate_trajectory(config.model_copy(update={"h_int": 2.0 * h}))
    fine = simulate_trajectory(config.model_copy(update={"h_int": h}))
    assert coarse.termination == fine.termination == "horizon"
    assert "oxl_activation" in coarse.event_kinds() and "oxl_activation" in fine.event_kinds()

    fine_on_coarse = fine.frame.iloc[::2].reset_index(drop=True)
    assert np.allclose(fine_on_coarse["t"], coarse.frame["t"])
    return {column: float(np.max(np.abs(fine_on_coarse[column] - coarse.frame[column])))
            for column in ("V2", "V4", "delta", "Eq", "Efd", "Xoxl")}


def test_step_halving():
    """Halving h_int from 0.02 s over 100 s, OXL activation included, changes no state by 1e-5"""
    errors = _halving_error(ScenarioConfig(horizon=100.0), 0.01)

    for column, err in errors.items():
        assert err < 1e-5, column


@REQUIRES_LONG_RUN
def test_step_halving_reference_step():
    errors = _halving_error(ScenarioConfig(horizon=100.0), 0.005)

    for column, err in errors.items():
        assert err < 1e-5, column


def test_reference_timeline_coarse_step():
    """Reference run: trip, first tap, OXL activation, then loss of the generator inside the windows"""
    config = ScenarioConfig(h_int=0.05, horizon=300.0)
    vm = np.abs(initialize(config).voltages)
    assert np.all((vm >= 0.95 - 1e-9) & (vm <= 1.05 + 1e-9))

    tl = timeline(simulate_trajectory(config))

    assert tl.after_trip(tl.first_tap) == pytest.approx(30.0)
    assert OXL_WINDOW[0] <= tl.after_trip(tl.oxl_activation) <= OXL_WINDOW[1]
    assert COLLAPSE_WINDOW[0] <= tl.after_trip(tl.collapse) <= COLLAPSE_WINDOW[1]
    assert tl.mechanism == "GeneratorLoss"
    assert tl.trip < tl.first_tap < tl.oxl_activation < tl.collapse


@REQUIRES_LONG_RUN
def test_reference_timeline():
    """Same timeline at the reference step h_int = 0.01"""
    tl = timeline(simulate_trajectory(ScenarioConfig()))

    assert tl.after_trip(tl.first_tap) == pytest.approx(30.0)
    assert OXL_WINDOW[0] <= tl.after_trip(tl.oxl_activation) <= OXL_WINDOW[1]
    assert COLLAPSE_WINDOW[0] <= tl.after_trip(tl.collapse) <= COLLAPSE_WINDOW[1]
    assert tl.mechanism == "GeneratorLoss"
    assert tl.trip < tl.first_tap < tl.oxl_activation < tl.collapse


def test_initialize_stays_on_high_voltage_branch(scenario):
    """A heavy motor share still initialises on the upper branch of the PV curve"""
    state = initialize(scenario, r_motor=0.55)
    vm = np.abs(state.voltages)

    assert vm.min() > 0.9
    assert abs(vm[BUS3] - scenario.ltc.v3_ref) <= scenario.ltc.deadband


def test_initialize_rejects_low_voltage_root(scenario, monkeypatch):
    def low_root(config, network, load, tm, p_g, gen_online, v_start=None):
        v = np.full(4, 0.45 + 0.0j)
        v[BUS1] = config.network.source_voltage
        return v

    monkeypatch.setattr("voltreach.simulator._initial_flow", low_root)
    with pytest.raises(InfeasibleInitialConditionError, match="low-voltage"):
        initialize(scenario)


def test_oxl_integrator_ramps_after_trip(scenario):
    """Field current above its limit after the trip: X_oxl only grows until activation"""
    traj = simulate_trajectory(scenario.model_copy(update={"horizon": 70.0}))
    xoxl = traj.frame["Xoxl"].to_numpy()
    trip_row = int(round(10.0 / scenario.h_int))

    assert np.all(xoxl[:trip_row] == 0.0)
    assert np.all(np.diff(xoxl) >= -1e-12)
    assert 0.0 < xoxl[-1] < scenario.exciter.oxl_threshold
    assert "oxl_activation" not in traj.event_kinds()


def test_oxl_caps_field_and_latches(scenario):
    state = initialize(scenario)
    apply_disturbance(state, scenario.disturbance)
    step_slow(state, 40.0)
    state.exc.x_oxl = scenario.exciter.oxl_threshold + 1.0

    step_slow(state, 1.0)
    assert state.exc.oxl_active
    assert [e.kind for e in state.events].count("oxl_activation") == 1
    assert state.gen.efd <= scenario.exciter.ifd_limit + 1e-12

    for _ in range(20):
        step_slow(state, 1.0)
        assert state.exc.oxl_active
        assert state.gen.efd <= scenario.exciter.ifd_limit + 1e-12
    assert "oxl_release" not in [e.kind for e in state.events]


def test_oxl_releases_when_integrator_empties(scenario):
    """Below the limit the integrator decays to zero and the cap is lifted"""
    state = initialize(scenario)
    state.exc.oxl_active = True
    state.exc.x_oxl = 1e-6

    step_slow(state, 1.0)

    assert not state.exc.oxl_active
    assert state.exc.x_oxl == 0.0
    assert "oxl_release" in [e.kind for e in state.events]


def test_ltc_repeated_moves(scenario):
    """Initial delay for the first move, then one move per subsequent delay"""
    state = initialize(scenario)
    tap = state.network.tap
    state.ltc.v3_ref = 0.92

    step_slow(state, 55.0)

    times = [e.t for e in state.events if e.kind == "tap"]
    assert times == pytest.approx([30.0, 40.0, 50.0])
    assert state.ltc.moves == 3
    assert state.network.tap == pytest.approx(tap + 3 * scenario.ltc.step)
    assert abs(state.voltages[BUS3]) > 0.92 + scenario.ltc.deadband


def test_heavy_motor_share_stalls(scenario):
    """With 60 % motor load the trip stalls the motor before the generator is lost"""
    config = scenario.model_copy(update={"horizon": 30.0,
                                         "load": scenario.load.model_copy(update={"r_motor": 0.6})})
    traj = simulate_trajectory(config)

    assert traj.termination == "instability"
    assert traj.instability.mechanism is Mechanism.MOTOR_STALL
    assert 10.0 < traj.instability.t < 15.0
