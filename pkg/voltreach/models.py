import math
from typing import Optional, List, Dict, Any, Literal, Tuple
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator #for defining and validating configuration sections


class StrictModel(BaseModel):
    """Base for every configuration section: unknown keys are rejected."""
    model_config = ConfigDict(extra="forbid", validate_assignment=True)


# ============================================================================
# Scenario (power-system simulator)
# ============================================================================
#
# All per-unit quantities are on the system base (s_base_mva). Machine data
# quoted on a machine rating must be converted before it goes in here.
#
# ============================================================================

#for defining the network section
class NetworkParams(StrictModel):
    s_base_mva: float = Field(100.0, gt=0, description="System MVA base")
    v_base_kv: float = Field(400.0, gt=0, description="Nominal voltage base (kV)")
    source_voltage: float = Field(1.05, gt=0, description="Remote Thevenin source magnitude at bus 1 (pu)")
    tie_reactance: float = Field(0.065, gt=0, description="Reactance of each of the two 1-4 circuits (pu)")
    tie_resistance: float = Field(0.0, ge=0)
    tie_shunt: float = Field(0.0, ge=0, description="Total charging susceptance of each tie circuit (pu)")
    stepup_reactance: float = Field(0.01875, gt=0, description="Generator step-up transformer 2-4 (pu)")
    ltc_reactance: float = Field(0.004, gt=0, description="LTC transformer 4-3 leakage reactance (pu)")
    newton_tol: float = Field(1e-10, gt=0, description="Power-mismatch tolerance of the network solve (pu)")
    newton_max_iter: int = Field(50, ge=1)


#for defining the generator section
class GeneratorParams(StrictModel):
    online: bool = True
    mva_rating: float = Field(800.0, gt=0)
    h: float = Field(28.0, gt=0, description="Inertia constant on system base (s)")
    d: float = Field(100.0, ge=0, description="Damping on system base (pu)")
    xd: float = Field(0.275, gt=0)
    xd_prime: float = Field(0.0375, gt=0)
    td0_prime: float = Field(7.0, gt=0, description="Open-circuit transient time constant (s)")
    v_setpoint: float = Field(1.03, gt=0, description="Terminal voltage used to initialise the AVR reference (pu)")
    frequency_hz: float = Field(50.0, gt=0)

    @model_validator(mode="after")
    def check_reactances(self) -> "GeneratorParams":
        if not self.xd > self.xd_prime:
            raise ValueError("xd must be greater than xd_prime")
        return self

    @property
    def omega_s(self) -> float:
        return 2.0 * math.pi * self.frequency_hz


#for defining the excitation section (AVR + OXL)
class ExciterParams(StrictModel):
    ka: float = Field(50.0, gt=0, description="AVR gain")
    ta: float = Field(0.2, gt=0, description="AVR time constant (s)")
    efd_max: float = Field(5.0, gt=0, description="Field voltage ceiling (pu)")
    efd_min: float = Field(0.0)
    oxl_enabled: bool = True
    ifd_limit: float = Field(2.5, gt=0, description="Field current limit i_f^lim (pu)")
    oxl_gain: float = Field(1.0, gt=0, description="OXL integration gain (1/s)")
    oxl_threshold: float = Field(25.0, gt=0, description="X_oxl level at which the cap is enforced (pu s)")


#for defining the induction motor section
class MotorParams(StrictModel):
    mva_base: float = Field(1000.0, gt=0, description="Motor rating, kept constant across R_motor")
    rr: float = Field(0.03, gt=0, description="Rotor resistance on motor base (pu)")
    xm: float = Field(0.4, gt=0, description="Total leakage reactance on motor base (pu)")
    hm: float = Field(0.3, gt=0, description="Motor inertia (s)")
    s_stall: float = Field(0.95, gt=0, le=1)


#for defining the composite load section
class LoadParams(StrictModel):
    p_total_mw: float = Field(1500.0, ge=0)
    q_ratio: float = Field(0.2, ge=0, description="Q_total / P_total of the nominal demand")
    r_motor: float = Field(0.0, ge=0, le=1)
    alpha: float = Field(1.5, ge=0)
    beta: float = Field(2.5, ge=0)


#for defining the LTC section
class LtcParams(StrictModel):
    enabled: bool = True
    deadband: float = Field(0.01, gt=0, description="Half-width d (pu)")
    delay_initial: float = Field(30.0, gt=0, description="T_d0 (s)")
    delay_subsequent: float = Field(10.0, gt=0, description="T_d (s)")
    step: float = Field(0.01, gt=0, description="Tap step (pu)")
    r_min: float = Field(0.8, gt=0)
    r_max: float = Field(1.1, gt=0)
    v3_ref: float = Field(1.0, ge=0.9, le=1.1)

    @model_validator(mode="after")
    def check_range(self) -> "LtcParams":
        if not self.r_min < self.r_max:
            raise ValueError("r_min must be smaller than r_max")
        return self


#for defining the disturbance
class DisturbanceSpec(StrictModel):
    enabled: bool = True
    time: float = Field(10.0, ge=0)
    branch: str = Field("tie_b", min_length=1)


#for defining the operating-condition noise of a scenario
class NoiseParams(StrictModel):
    demand_sigma_mw: float = Field(0.0, ge=0)
    ratio_sigma: float = Field(0.0, ge=0)
    interval: float = Field(10.0, gt=0, description="Resampling period (s)")


#for defining the instability criteria
class DetectionParams(StrictModel):
    pole_slip_angle: float = Field(2.0 * math.pi, gt=0, description="|delta - delta_ref| criterion (rad)")
    window: float = Field(10.0, gt=0, description="Length of the retained detection history (s)")


class ScenarioConfig(StrictModel):
    network: NetworkParams = Field(default_factory=NetworkParams)
    generator: GeneratorParams = Field(default_factory=GeneratorParams)
    exciter: ExciterParams = Field(default_factory=ExciterParams)
    motor: MotorParams = Field(default_factory=MotorParams)
    load: LoadParams = Field(default_factory=LoadParams)
    ltc: LtcParams = Field(default_factory=LtcParams)
    disturbance: DisturbanceSpec = Field(default_factory=DisturbanceSpec)
    noise: NoiseParams = Field(default_factory=NoiseParams)
    detection: DetectionParams = Field(default_factory=DetectionParams)
    p_g_mw: float = Field(730.0, ge=0, description="Generator active power P_g (MW)")
    horizon: float = Field(600.0, gt=0, description="Simulated time span (s)")
    h_int: float = Field(0.01, gt=0, description="Fast integration step (s)")
    decision_step: float = Field(10.0, gt=0, description="Period at which an action source is queried (s)")
    action_scale: float = Field(0.1, ge=0)
    check_equilibrium: bool = Field(False, description="Record quasi-static equilibrium existence at decision steps")

    @model_validator(mode="after")
    def check_steps(self) -> "ScenarioConfig":
        ratio = self.decision_step / self.h_int
        if abs(ratio - round(ratio)) > 1e-9:
            raise ValueError("decision_step must be an integer multiple of h_int")
        return self


# ============================================================================
# Episode (augmented-state safety MDP)
# ============================================================================

#for defining the observation normalisation ranges
class ObservationRanges(StrictModel):
    v4: Tuple[float, float] = (0.5, 1.2)
    eq: Tuple[float, float] = (0.5, 1.6)
    xoxl: Tuple[float, float] = (0.0, 50.0)
    p_g_mw: Tuple[float, float] = (0.0, 800.0)
    r_motor: Tuple[float, float] = (0.0, 1.0)
    v3_ref: Tuple[float, float] = (0.9, 1.1)


class EpisodeConfig(StrictModel):
    horizon: float = Field(300.0, gt=0, description="tau (s)")
    horizon_max: float = Field(600.0, gt=0, description="Upper end of training-time horizon sampling (s)")
    sample_horizon: bool = Field(False, description="Draw tau uniformly from (0, horizon_max] at every reset")
    decision_step: float = Field(10.0, gt=0, description="Delta t (s)")
    disturbance_time: float = Field(0.0, ge=0, description="Trip time relative to reset (s)")
    p_g_mw: float = Field(730.0, ge=0)
    r_motor: float = Field(0.0, ge=0, le=1)
    demand_sigma_mw: float = Field(5.0, ge=0)
    ratio_sigma: float = Field(0.05, ge=0)
    action_scale: float = Field(0.1, ge=0)
    v3ref_min: float = Field(0.9, gt=0)
    v3ref_max: float = Field(1.1, gt=0)
    include_v3ref: bool = Field(False, description="Append V3_ref to the observation")
    h_int: Optional[float] = Field(None, gt=0, description="Override of the scenario integration step (s)")
    literal: bool = Field(False, description="Literal mode: freeze z after absorption and keep counting h down")
    ranges: ObservationRanges = Field(default_factory=ObservationRanges)

    @model_validator(mode="after")
    def check_bounds(self) -> "EpisodeConfig":
        if not self.v3ref_min < self.v3ref_max:
            raise ValueError("v3ref_min must be smaller than v3ref_max")
        return self

    @property
    def n_steps(self) -> int:
        """N(tau) = floor(tau / dt)."""
        return int(math.floor(self.horizon / self.decision_step + 1e-12))


# ============================================================================
# Learner
# ============================================================================

class Td3Config(StrictModel):
    hidden: List[int] = Field(default_factory=lambda: [64, 64, 64])
    actor_lr: float = Field(1e-5, gt=0)
    critic_lr: float = Field(1e-4, gt=0)
    adam_beta1: float = Field(0.9, ge=0, lt=1)
    adam_beta2: float = Field(0.999, ge=0, lt=1)
    adam_eps: float = Field(1e-8, gt=0)
    gamma: float = Field(1.0, gt=0, le=1)
    polyak: float = Field(0.005, ge=0, le=1)
    policy_delay: int = Field(2, ge=1)
    expl_sigma: float = Field(0.2, ge=0)
    expl_sigma_final: float = Field(0.05, ge=0)
    target_sigma: float = Field(0.1, ge=0)
    target_clip: float = Field(0.3, ge=0)
    buffer_capacity: int = Field(1_000_000, ge=1)
    batch_size: int = Field(256, ge=1)
    gradient_steps: int = Field(1, ge=0, description="Gradient steps per environment step")
    total_critic: bool = Field(True, description="Train a total-safety critic pair when M >= 2")


class TrainSchedule(StrictModel):
    env_steps: int = Field(20000, ge=0)
    learning_starts: int = Field(1000, ge=0, description="Environment steps with uniform random actions before updates")
    eval_every: int = Field(2000, ge=1)
    eval_episodes: int = Field(50, ge=1)
    checkpoint_every: int = Field(5000, ge=1)


# ============================================================================
# Toy environment and oracle
# ============================================================================

class ToyConfig(StrictModel):
    b: float = 0.5
    c: float = 0.3
    sigma: float = Field(0.4, ge=0)
    dt: float = Field(1.0, gt=0)
    tau_max: float = Field(10.0, gt=0)
    z_upper: Optional[float] = Field(None, description="Optional second unsafe boundary z >= z_upper")
    z0_low: float = Field(0.0, description="Training start states are drawn from [z0_low, z0_high]")
    z0_high: float = Field(4.0)
    z_range: Tuple[float, float] = (-1.0, 8.0)

    @model_validator(mode="after")
    def check_start_range(self) -> "ToyConfig":
        if self.z0_high < self.z0_low:
            raise ValueError("z0_high must not be smaller than z0_low")
        if self.z_upper is not None and self.z_upper <= 0:
            raise ValueError("z_upper must be positive")
        return self


class GridSpec(StrictModel):
    z_min: float = -1.0
    z_max: float = 8.0
    n_z: int = Field(901, ge=3)
    n_u: int = Field(21, ge=1)


class OracleConfig(StrictModel):
    n_per_cell: int = Field(500, ge=1)
    confidence: float = Field(0.95, gt=0, lt=1)
    taus: List[float] = Field(default_factory=lambda: [60.0, 120.0, 200.0, 300.0, 600.0])
    p_g_values: List[float] = Field(default_factory=lambda: [680.0, 720.0, 740.0, 760.0, 780.0, 800.0])
    r_motor_values: List[float] = Field(default_factory=lambda: [0.0, 0.2, 0.4, 0.6])
    grid: GridSpec = Field(default_factory=GridSpec)
    eval_grid: int = Field(20, ge=1, description="Points per axis of the (h, z) comparison grid")

    @field_validator("taus")
    @classmethod
    def validate_taus(cls, v: List[float]) -> List[float]:
        if any(t <= 0 for t in v):
            raise ValueError("every tau must be positive")
        return v


# ============================================================================
# Run
# ============================================================================

class RunSection(StrictModel):
    env: Literal["power", "toy"] = "power"
    seed: int = Field(0, ge=0)
    out_dir: str = "runs"
    workers: int = Field(1, ge=1)
    checkpoint: Optional[str] = None


class RunConfig(StrictModel):
    scenario: ScenarioConfig = Field(default_factory=ScenarioConfig)
    episode: EpisodeConfig = Field(default_factory=EpisodeConfig)
    learner: Td3Config = Field(default_factory=Td3Config)
    schedule: TrainSchedule = Field(default_factory=TrainSchedule)
    toy: ToyConfig = Field(default_factory=ToyConfig)
    oracle: OracleConfig = Field(default_factory=OracleConfig)
    run: RunSection = Field(default_factory=RunSection)


#for defining the run manifest
class RunManifest(BaseModel):
    run_id: str
    command: str
    config_hash: str
    seed: int
    tool_version: str
    artifacts: Dict[str, str] = Field(default_factory=dict, description="artifact file name -> sha256")
    timings: Dict[str, float] = Field(default_factory=dict, description="phase -> wall-clock seconds")
    config: Dict[str, Any] = Field(default_factory=dict, description="effective configuration")


#for defining a single validation check result
class CheckResult(BaseModel):
    name: str
    passed: bool
    detail: Dict[str, Any] = Field(default_factory=dict)


#for defining the validation report
class ValidationReport(BaseModel):
    passed: bool
    checks: List[CheckResult]
