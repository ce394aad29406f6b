"""
Four-bus network model and Newton-Raphson solvers.

Bus numbering (index in arrays):
    bus 1 (0): remote Thevenin source, fixed voltage, angle reference
    bus 2 (1): local generator terminal
    bus 3 (2): load bus, secondary side of the LTC transformer
    bus 4 (3): transmission hub

Branches:
    tie_a, tie_b   1-4 double circuit
    stepup         2-4 generator step-up transformer
    ltc            4-3 LTC transformer, off-nominal ratio r on the bus 4 side

Devices enter the network solve through `Injections`: admittances added to the
diagonal (generator behind X'_d, motor at its current slip), Norton current
sources and exponential loads P = P0 (V/V0)^alpha, Q = Q0 (V/V0)^beta.
"""

import logging
from dataclasses import dataclass, field, replace
from typing import Callable, Dict, Optional, Tuple

import networkx as nx
import numpy as np

from voltreach.errors import NonConvergenceError, UnknownBranchError
from voltreach.models import LtcParams, NetworkParams

logger = logging.getLogger(__name__)

N_BUS = 4
SLACK = 0
UNKNOWN = np.array([1, 2, 3])
BUS1, BUS2, BUS3, BUS4 = range(N_BUS)
TIE_CIRCUITS = ("tie_a", "tie_b")


@dataclass
class Branch:
    name: str
    from_bus: int
    to_bus: int
    x: float
    r: float = 0.0
    b: float = 0.0
    in_service: bool = True
    has_tap: bool = False


@dataclass
class NetworkModel:
    branches: Dict[str, Branch]
    tap: float
    r_min: float
    r_max: float
    source_voltage: complex
    s_base_mva: float = 100.0
    v_base_kv: float = 400.0
    _ybus: Optional[np.ndarray] = field(default=None, repr=False, compare=False)

    @classmethod
    def from_params(cls, params: NetworkParams, ltc: LtcParams, tap: float = 1.0) -> "NetworkModel":
        branches = {
            "tie_a": Branch("tie_a", BUS1, BUS4, params.tie_reactance, params.tie_resistance, params.tie_shunt),
            "tie_b": Branch("tie_b", BUS1, BUS4, params.tie_reactance, params.tie_resistance, params.tie_shunt),
            "stepup": Branch("stepup", BUS2, BUS4, params.stepup_reactance),
            "ltc": Branch("ltc", BUS4, BUS3, params.ltc_reactance, has_tap=True),
        }
        model = cls(branches=branches, tap=tap, r_min=ltc.r_min, r_max=ltc.r_max,
                    source_voltage=complex(params.source_voltage, 0.0),
                    s_base_mva=params.s_base_mva, v_base_kv=params.v_base_kv)
        model.validate()
        return model

    def copy(self) -> "NetworkModel":
        return replace(self, branches={k: replace(b) for k, b in self.branches.items()}, _ybus=self._ybus)

    def validate(self) -> None:
        for br in self.branches.values():
            if br.x <= 0:
                raise ValueError(f"branch {br.name}: reactance must be strictly positive")
        if not self.r_min < self.r_max:
            raise ValueError("tap range requires r_min < r_max")
        if not self.r_min <= self.tap <= self.r_max:
            raise ValueError(f"tap ratio {self.tap} outside [{self.r_min}, {self.r_max}]")
        if any(self.branches[c].in_service for c in TIE_CIRCUITS) and not self.is_connected():
            raise ValueError("network graph is not connected")

    def is_connected(self) -> bool:
        graph = nx.Graph()
        graph.add_nodes_from(range(N_BUS))
        graph.add_edges_from((b.from_bus, b.to_bus) for b in self.branches.values() if b.in_service)
        return nx.is_connected(graph)

    def set_tap(self, tap: float) -> None:
        tap = min(max(tap, self.r_min), self.r_max)
        if tap != self.tap:
            self.tap = tap
            self._ybus = None

    def transfer_reactance(self, a: int, b: int) -> float:
        """Equivalent series reactance of the in-service parallel branches between two buses."""
        susceptance = sum(1.0 / br.x for br in self.branches.values()
                          if br.in_service and {br.from_bus, br.to_bus} == {a, b})
        return float("inf") if susceptance == 0 else 1.0 / susceptance

    def ybus(self) -> np.ndarray:
        """Bus admittance matrix (cached until the topology or the tap changes)."""
        if self._ybus is None:
            y = np.zeros((N_BUS, N_BUS), dtype=complex)
            for br in self.branches.values():
                if not br.in_service:
                    continue
                ys = 1.0 / complex(br.r, br.x)
                t = self.tap if br.has_tap else 1.0
                f, k = br.from_bus, br.to_bus
                y[f, f] += ys / t**2 + 0.5j * br.b
                y[k, k] += ys + 0.5j * br.b
                y[f, k] -= ys / t
                y[k, f] -= ys / t
            self._ybus = y
        return self._ybus

    def trip(self, branch: str) -> None:
        br = self.branches.get(branch)
        if br is None:
            raise UnknownBranchError(f"unknown branch: {branch}")
        if not br.in_service:
            raise UnknownBranchError(f"branch already out of service: {branch}")
        br.in_service = False
        self._ybus = None
        logger.info(f"branch tripped: name={branch}, x_14={self.transfer_reactance(BUS1, BUS4):.4f}")


@dataclass
class Injections:
    """Device contributions to the network equations, one entry per bus."""
    y_shunt: np.ndarray = field(default_factory=lambda: np.zeros(N_BUS, dtype=complex))
    i_source: np.ndarray = field(default_factory=lambda: np.zeros(N_BUS, dtype=complex))
    p0: np.ndarray = field(default_factory=lambda: np.zeros(N_BUS))
    q0: np.ndarray = field(default_factory=lambda: np.zeros(N_BUS))
    v0: np.ndarray = field(default_factory=lambda: np.ones(N_BUS))
    alpha: float = 0.0
    beta: float = 0.0


def load_power(vm: np.ndarray, inj: Injections) -> Tuple[np.ndarray, np.ndarray]:
    """Exponential load S(V) and dS/d|V| at the given magnitudes."""
    ratio = vm / inj.v0
    p = inj.p0 * ratio**inj.alpha
    q = inj.q0 * ratio**inj.beta
    dp = inj.alpha * inj.p0 * ratio**(inj.alpha - 1.0) / inj.v0 if inj.alpha != 0 else np.zeros_like(vm)
    dq = inj.beta * inj.q0 * ratio**(inj.beta - 1.0) / inj.v0 if inj.beta != 0 else np.zeros_like(vm)
    return p + 1j * q, dp + 1j * dq


def power_mismatch(ybus: np.ndarray, v: np.ndarray, inj: Injections) -> np.ndarray:
    """S_net + S_load at every bus; zero at non-slack buses for a solution."""
    current = (ybus + np.diag(inj.y_shunt)) @ v - inj.i_source
    s_load, _ = load_power(np.abs(v), inj)
    return v * np.conj(current) + s_load


def solve_injections(ybus: np.ndarray, inj: Injections, v_slack: complex,
                     v_start: Optional[np.ndarray] = None, tol: float = 1e-10,
                     max_iter: int = 50) -> Tuple[np.ndarray, int, float]:
    """
    Newton-Raphson on the rectangular bus voltages of buses 2..4.

    The Jacobian is assembled from the Wirtinger derivatives of
    F(V) = V * conj(Y V - I_src) + S_load(|V|).

    Returns:
        (V, iterations, residual) with V the full complex voltage vector.

    Raises:
        NonConvergenceError: max_iter reached, singular Jacobian or a bus
            voltage collapsing to zero.
    """
    y = ybus + np.diag(inj.y_shunt)
    v = np.ones(N_BUS, dtype=complex) if v_start is None else np.array(v_start, dtype=complex)
    v[SLACK] = v_slack
    u = UNKNOWN
    y_uu_conj = np.conj(y[np.ix_(u, u)])
    n = len(u)
    residual = float("inf")

    for iteration in range(max_iter + 1):
        vm = np.abs(v)
        if np.any(vm[u] < 1e-6):
            raise NonConvergenceError("bus voltage collapsed to zero", iterations=iteration, residual=residual)
        current = y @ v - inj.i_source
        s_load, ds_dvm = load_power(vm, inj)
        mismatch = (v * np.conj(current) + s_load)[u]
        residual = float(np.max(np.abs(mismatch)))
        if not np.isfinite(residual):
            raise NonConvergenceError("non-finite power mismatch", iterations=iteration, residual=residual)
        if residual < tol:
            return v, iteration, residual
        if iteration == max_iter:
            break

        vu = v[u]
        half = ds_dvm[u] / (2.0 * vm[u])
        a = np.diag(np.conj(current[u]) + half * np.conj(vu))
        b = vu[:, None] * y_uu_conj + np.diag(half * vu)
        d_de = a + b
        d_df = 1j * (a - b)
        jac = np.block([[d_de.real, d_df.real], [d_de.imag, d_df.imag]])
        rhs = -np.concatenate([mismatch.real, mismatch.imag])
        try:
            step = np.linalg.solve(jac, rhs)
        except np.linalg.LinAlgError:
            raise NonConvergenceError("singular network Jacobian", iterations=iteration, residual=residual)
        if not np.all(np.isfinite(step)):
            raise NonConvergenceError("singular network Jacobian", iterations=iteration, residual=residual)
        v[u] = vu + step[:n] + 1j * step[n:]

    raise NonConvergenceError(f"network solve did not converge in {max_iter} iterations",
                              iterations=max_iter, residual=residual)


def newton_raphson(residual: Callable[[np.ndarray], np.ndarray], x0: np.ndarray,
                   tol: float = 1e-10, max_iter: int = 50,
                   jacobian: Optional[Callable[[np.ndarray], np.ndarray]] = None,
                   fd_step: float = 1e-7) -> Tuple[np.ndarray, int, float]:
    """
    Generic Newton-Raphson with an optional central-difference Jacobian.

    Used for the steady-state initialisation and the short-term equilibrium,
    where the unknown vector mixes device states and bus voltages.
    """
    x = np.array(x0, dtype=float)
    norm = float("inf")
    for iteration in range(max_iter + 1):
        f = np.asarray(residual(x), dtype=float)
        norm = float(np.max(np.abs(f))) if f.size else 0.0
        if not np.isfinite(norm):
            raise NonConvergenceError("non-finite residual", iterations=iteration, residual=norm)
        if norm < tol:
            return x, iteration, norm
        if iteration == max_iter:
            break
        if jacobian is not None:
            jac = jacobian(x)
        else:
            jac = np.empty((f.size, x.size))
            for j in range(x.size):
                h = fd_step * max(1.0, abs(x[j]))
                xp = x.copy()
                xm = x.copy()
                xp[j] += h
                xm[j] -= h
                jac[:, j] = (np.asarray(residual(xp)) - np.asarray(residual(xm))) / (2.0 * h)
        try:
            step = np.linalg.solve(jac, -f)
        except np.linalg.LinAlgError:
            raise NonConvergenceError("singular Jacobian", iterations=iteration, residual=norm)
        if not np.all(np.isfinite(step)):
            raise NonConvergenceError("singular Jacobian", iterations=iteration, residual=norm)
        x = x + step
    raise NonConvergenceError(f"Newton did not converge in {max_iter} iterations",
                              iterations=max_iter, residual=norm)
