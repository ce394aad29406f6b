"""
Unit tests for the four-bus network model and the Newton-Raphson solvers.
"""
import numpy as np
import pytest

from voltreach.errors import NonConvergenceError, UnknownBranchError
from voltreach.models import LtcParams, NetworkParams
from voltreach.network import (BUS1, BUS2, BUS3, BUS4, Injections, NetworkModel, newton_raphson, power_mismatch,
                               solve_injections)


def make_network(tap=1.0):
    return NetworkModel.from_params(NetworkParams(), LtcParams(), tap=tap)


def test_ybus_symmetric_and_double_circuit():
    """Test that the admittance matrix is symmetric and the tie is a double circuit"""
    net = make_network()
    y = net.ybus()

    assert np.allclose(y, y.T)
    # two parallel 0.065 circuits
    assert net.transfer_reactance(BUS1, BUS4) == pytest.approx(0.0325)
    assert y[BUS1, BUS4] == pytest.approx(-2.0 / 0.065j)


def test_ltc_tap_on_bus4_side():
    """Test the off-nominal ratio placement of the LTC branch"""
    net = make_network(tap=0.95)
    y = net.ybus()
    ys = 1.0 / 0.004j

    assert y[BUS4, BUS3] == pytest.approx(-ys / 0.95)
    assert y[BUS3, BUS3] == pytest.approx(ys)


def test_set_tap_clamps_and_invalidates_cache():
    net = make_network()
    before = net.ybus().copy()

    net.set_tap(1.5)
    assert net.tap == 1.1
    assert not np.allclose(net.ybus(), before)

    net.set_tap(0.1)
    assert net.tap == 0.8


def test_trip_doubles_tie_reactance():
    """Test that tripping one circuit of the tie doubles the 1-4 reactance"""
    net = make_network()
    net.trip("tie_b")

    assert net.transfer_reactance(BUS1, BUS4) == pytest.approx(0.065)
    assert not net.branches["tie_b"].in_service
    assert net.is_connected()


def test_trip_unknown_or_repeated_branch():
    net = make_network()
    with pytest.raises(UnknownBranchError):
        net.trip("tie_c")

    net.trip("tie_a")
    with pytest.raises(UnknownBranchError):
        net.trip("tie_a")


def test_copy_is_independent():
    net = make_network()
    clone = net.copy()
    clone.trip("tie_a")

    assert net.branches["tie_a"].in_service


def test_nonpositive_reactance_rejected():
    net = make_network()
    net.branches["stepup"].x = 0.0
    with pytest.raises(ValueError):
        net.validate()


def test_solve_injections_unloaded_network():
    """Without loads or sources every bus sits at the source voltage"""
    net = make_network()
    v, iterations, residual = solve_injections(net.ybus(), Injections(), net.source_voltage)

    assert np.allclose(v, net.source_voltage)
    assert residual < 1e-10


def test_solve_injections_loaded_network():
    """Test a constant-power load at bus 3 solved to tolerance"""
    net = make_network()
    inj = Injections()
    inj.p0[BUS3] = 10.0
    inj.q0[BUS3] = 2.0

    v, _, residual = solve_injections(net.ybus(), inj, net.source_voltage)
    mismatch = power_mismatch(net.ybus(), v, inj)

    assert residual < 1e-10
    assert np.max(np.abs(mismatch[1:])) < 1e-9
    # voltage drops towards the load
    assert abs(v[BUS3]) < abs(v[BUS4]) < abs(v[BUS1])


def test_solve_injections_two_bus_closed_form():
    """A load at bus 4 behind the tie sees the lossless two-bus voltage"""
    net = make_network()
    inj = Injections()
    inj.p0[BUS4] = 10.0
    inj.q0[BUS4] = 2.0
    e, x = net.source_voltage, net.transfer_reactance(BUS1, BUS4)
    a = e * e - 2.0 * inj.q0[BUS4] * x
    v_sq = 0.5 * (a + np.sqrt(a * a - 4.0 * x * x * (inj.p0[BUS4] ** 2 + inj.q0[BUS4] ** 2)))

    v, _, _ = solve_injections(net.ybus(), inj, net.source_voltage)

    assert abs(v[BUS4]) == pytest.approx(np.sqrt(v_sq), abs=1e-9)
    assert abs(v[BUS4]) == pytest.approx(0.917629, abs=1e-6)
    assert np.angle(v[BUS4]) == pytest.approx(-np.arcsin(inj.p0[BUS4] * x / (e * np.sqrt(v_sq))), abs=1e-9)
    # no current flows into the unloaded stubs at tap 1
    assert abs(v[BUS2]) == pytest.approx(abs(v[BUS4]), abs=1e-9)
    assert abs(v[BUS3]) == pytest.approx(abs(v[BUS4]), abs=1e-9)


def test_solve_injections_beyond_maximum_transfer():
    """No solution exists for a load far beyond the maximum transfer"""
    net = make_network()
    inj = Injections()
    inj.p0[BUS3] = 100.0

    with pytest.raises(NonConvergenceError):
        solve_injections(net.ybus(), inj, net.source_voltage)


def test_newton_raphson_scalar_root():
    x, iterations, residual = newton_raphson(lambda x: x * x - 2.0, np.array([1.0]))

    assert x[0] == pytest.approx(np.sqrt(2.0), abs=1e-10)
    assert iterations > 0


def test_newton_raphson_singular_jacobian():
    with pytest.raises(NonConvergenceError):
        newton_raphson(lambda x: np.array([1.0]), np.array([0.0]))
