"""
Calibration of the reference scenario timeline.

The reference system should show, after the tie-line trip, OXL activation
roughly 60-120 s later and generator collapse roughly 200-400 s later. Two
bisections get there:

1. the field-current limit ifd_limit moves the OXL activation time (a higher
   limit integrates a smaller excess and activates later);
2. the generator power P_g moves the collapse time (more power collapses
   earlier), with the limit from step 1 held fixed.

The generator voltage setpoint is not searched: it is set so that the
pre-disturbance bus voltages sit inside [0.95, 1.05] pu with room for the LTC
to lower its ratio after the trip.

Each trial is a full `simulate_trajectory` run, so a coarser h_int can be
passed for the search and the result confirmed at the configured step.
"""

import logging
from dataclasses import asdict, dataclass, field
from typing import Callable, Dict, List, Optional, Tuple

from voltreach.errors import InfeasibleInitialConditionError
from voltreach.models import ScenarioConfig
from voltreach.simulator import Trajectory, simulate_trajectory

logger = logging.getLogger(__name__)

OXL_WINDOW = (60.0, 120.0)
COLLAPSE_WINDOW = (200.0, 400.0)


@dataclass
class Timeline:
    trip: Optional[float]
    first_tap: Optional[float]
    oxl_activation: Optional[float]
    collapse: Optional[float]
    mechanism: Optional[str]
    tap_moves: int

    def after_trip(self, t: Optional[float]) -> Optional[float]:
        if t is None or self.trip is None:
            return None
        return t - self.trip


def timeline(traj: Trajectory) -> Timeline:
    inst = traj.instability
    return Timeline(trip=traj.first_time("trip"), first_tap=traj.first_time("tap"),
                    oxl_activation=traj.first_time("oxl_activation"),
                    collapse=inst.t if inst else None, mechanism=inst.mechanism.label if inst else None,
                    tap_moves=traj.event_kinds().count("tap"))


@dataclass
class CalibrationReport:
    ifd_limit: float
    p_g_mw: float
    timeline: Timeline
    oxl_ok: bool
    collapse_ok: bool
    search_points: List[Dict[str, Optional[float]]] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return self.oxl_ok and self.collapse_ok

    def as_dict(self) -> Dict:
        out = asdict(self)
        out["ok"] = self.ok
        return out


def _bisect(trial: Callable[[float], int], lo: float, hi: float, max_iter: int) -> Tuple[float, bool]:
    """
    trial(x) returns -1 (x too small), 0 (inside the window) or +1 (x too large).
    Returns the last midpoint and whether it landed inside the window.
    """
    x = 0.5 * (lo + hi)
    for _ in range(max_iter):
        x = 0.5 * (lo + hi)
        verdict = trial(x)
        if verdict == 0:
            return x, True
        if verdict < 0:
            lo = x
        else:
            hi = x
    return x, False


def calibrate(config: ScenarioConfig, ifd_range: Tuple[float, float] = (1.8, 3.2),
              p_g_range: Tuple[float, float] = (600.0, 800.0), max_iter: int = 12,
              search_h_int: Optional[float] = None) -> CalibrationReport:
    """Tune ifd_limit and then p_g_mw so the reference timeline falls inside its windows."""
    search = config if search_h_int is None else config.model_copy(update={"h_int": search_h_int})
    search_points: List[Dict[str, Optional[float]]] = []

    def run(ifd: float, p_g: float) -> Optional[Timeline]:
        cfg = search.model_copy(update={"p_g_mw": p_g,
                                        "exciter": search.exciter.model_copy(update={"ifd_limit": ifd})})
        try:
            tl = timeline(simulate_trajectory(cfg))
        except InfeasibleInitialConditionError as e:
            logger.info(f"calibration trial infeasible: ifd_limit={ifd:.4f}, p_g={p_g:.1f}, reason={e}")
            search_points.append({"ifd_limit": ifd, "p_g_mw": p_g, "oxl": None, "collapse": None})
            return None
        search_points.append({"ifd_limit": ifd, "p_g_mw": p_g, "oxl": tl.after_trip(tl.oxl_activation),
                              "collapse": tl.after_trip(tl.collapse)})
        logger.info(f"calibration trial: ifd_limit={ifd:.4f}, p_g={p_g:.1f}, "
                    f"oxl_after_trip={tl.after_trip(tl.oxl_activation)}, collapse_after_trip={tl.after_trip(tl.collapse)}")
        return tl

    def oxl_side(ifd: float) -> int:
        tl = run(ifd, config.p_g_mw)
        if tl is None:
            return 1
        delay = tl.after_trip(tl.oxl_activation)
        if delay is None:
            return 1
        if delay < OXL_WINDOW[0]:
            return -1
        return 0 if delay <= OXL_WINDOW[1] else 1

    ifd, _ = _bisect(oxl_side, *ifd_range, max_iter=max_iter)

    def collapse_side(p_g: float) -> int:
        tl = run(ifd, p_g)
        if tl is None:
            return 1
        delay = tl.after_trip(tl.collapse)
        if delay is None or delay > COLLAPSE_WINDOW[1]:
            return -1
        return 0 if delay >= COLLAPSE_WINDOW[0] else 1

    p_g, _ = _bisect(collapse_side, *p_g_range, max_iter=max_iter)

    final_cfg = config.model_copy(update={"p_g_mw": p_g,
                                          "exciter": config.exciter.model_copy(update={"ifd_limit": ifd})})
    tl = timeline(simulate_trajectory(final_cfg))
    oxl_delay, collapse_delay = tl.after_trip(tl.oxl_activation), tl.after_trip(tl.collapse)
    report = CalibrationReport(
        ifd_limit=ifd, p_g_mw=p_g, timeline=tl,
        oxl_ok=oxl_delay is not None and OXL_WINDOW[0] <= oxl_delay <= OXL_WINDOW[1],
        collapse_ok=(collapse_delay is not None and COLLAPSE_WINDOW[0] <= collapse_delay <= COLLAPSE_WINDOW[1]
                     and tl.mechanism == "GeneratorLoss"),
        search_points=search_points)
    logger.info(f"calibration finished: ifd_limit={ifd:.4f}, p_g={p_g:.1f}, ok={report.ok}")
    return report


def calibrated_toml(report: CalibrationReport) -> str:
    return (
        "# calibrated reference timeline\n"
        "[scenario]\n"
        f"p_g_mw = {report.p_g_mw!r}\n"
        "\n"
        "[scenario.exciter]\n"
        f"ifd_limit = {report.ifd_limit!r}\n"
    )
