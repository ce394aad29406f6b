import argparse
import logging #for logging messages
import sys
import time
import uuid #for generating run identifiers
from pathlib import Path
from typing import Any, Dict, List, Optional

import numpy as np
import pandas as pd

from voltreach import __version__
from voltreach import config as settings
from voltreach.artifacts import ArtifactWriter
from voltreach.calibration import calibrate, calibrated_toml
from voltreach.errors import (CheckpointFormatError, ConfigError, InfeasibleInitialConditionError,
                              TrainingAbort, UnknownBranchError, ValidationFailure)
from voltreach.models import RunConfig
from voltreach.neural import load_checkpoint
from voltreach.oracle import add_learned_risk, compare_learned_vs_oracle, mc_estimate, risk_surface
from voltreach.reach import PowerReachEnv, ReachEnv
from voltreach.simulator import simulate_trajectory
from voltreach.td3 import ActorPolicy, MultiCriticEnsemble, Trainer, train
from voltreach.toy import ToyEnv, dp_solve_toy
from voltreach.validation import run_all

logger = logging.getLogger("voltreach")

EXIT_OK = 0
EXIT_COLLAPSED = 1
EXIT_CONFIG = 2
EXIT_TRAINING_ABORT = 3
EXIT_VALIDATION = 4
EXIT_CHECKPOINT = 5
EXIT_UNEXPECTED = 10


def setup_logging(level: str) -> None:
    logging.basicConfig(
        level=getattr(logging, level.upper(), logging.INFO),
        format="%(asctime)s - %(name)s - %(levelname)s - %(message)s"
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="voltreach",
                                     description="Mechanism-specific voltage-collapse risk by reachability learning")
    parser.add_argument("--config", help="TOML configuration file")
    parser.add_argument("--seed", type=int, help="master seed (overrides VOLTREACH_SEED and the file)")
    parser.add_argument("--out", help="output directory (overrides VOLTREACH_OUT_DIR and the file)")
    parser.add_argument("--workers", type=int, help="Monte Carlo worker processes")
    parser.add_argument("--log-level", default=settings.LOG_LEVEL)
    parser.add_argument("--version", action="version", version=f"voltreach {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    sim = sub.add_parser("simulate", help="time-domain run of the scenario; writes trajectory and events")
    sim.add_argument("--no-disturbance", action="store_true", help="run the undisturbed system")

    tr = sub.add_parser("train", help="multi-critic TD3 training")
    tr.add_argument("--env", choices=["power", "toy"], help="training environment")
    tr.add_argument("--steps", type=int, help="total environment steps of the schedule")
    tr.add_argument("--until", type=int, help="stop this segment after this many environment steps")
    tr.add_argument("--resume", help="resume file written by an earlier segment")

    ev = sub.add_parser("evaluate", help="risk surfaces for the zero-action baseline and a trained policy")
    ev.add_argument("--env", choices=["power", "toy"])
    ev.add_argument("--checkpoint", help="trained checkpoint for the policy surface")

    mc = sub.add_parser("mc", help="Monte Carlo risk surface")
    mc.add_argument("--env", choices=["power", "toy"])
    mc.add_argument("--checkpoint", help="evaluate a checkpointed policy instead of the baseline")
    mc.add_argument("--n", type=int, help="episodes per cell")

    va = sub.add_parser("validate", help="invariant suites")
    va.add_argument("--checkpoint", help="checkpoint whose checksum is verified")

    cal = sub.add_parser("calibrate", help="tune ifd_limit and P_g to the reference timeline")
    cal.add_argument("--search-h-int", type=float, help="coarser integration step for the search runs")
    cal.add_argument("--max-iter", type=int, default=12)
    return parser


def overrides_from_args(args: argparse.Namespace) -> Dict[str, Any]:
    """Command-line flags as a configuration tree (highest precedence)."""
    run: Dict[str, Any] = {}
    if args.seed is not None:
        run["seed"] = args.seed
    if args.out is not None:
        run["out_dir"] = args.out
    if args.workers is not None:
        run["workers"] = args.workers
    if getattr(args, "env", None):
        run["env"] = args.env
    if getattr(args, "checkpoint", None):
        run["checkpoint"] = args.checkpoint
    tree: Dict[str, Any] = {"run": run} if run else {}
    if getattr(args, "steps", None) is not None:
        tree["schedule"] = {"env_steps": args.steps}
    if getattr(args, "n", None) is not None:
        tree["oracle"] = {"n_per_cell": args.n}
    if getattr(args, "no_disturbance", False):
        tree["scenario"] = {"disturbance": {"enabled": False}}
    return tree


def make_env(config: RunConfig, training: bool = False) -> ReachEnv:
    if config.run.env == "toy":
        return ToyEnv(config.toy, sample_horizon=training)
    episode = config.episode.model_copy(update={"sample_horizon": True}) if training else config.episode
    try:
        return PowerReachEnv(config.scenario, episode)
    except ValueError as e:
        raise ConfigError(f"episode: {e}")


def load_ensemble(path: str, env: ReachEnv, config: RunConfig) -> MultiCriticEnsemble:
    nets, _ = load_checkpoint(Path(path))
    ensemble = MultiCriticEnsemble.create(env.obs_dim, list(env.mechanism_labels), config.learner,
                                          np.random.default_rng(0))
    ensemble.load_networks(nets)
    return ensemble


# ============================================================================
# Subcommands
# ============================================================================

def cmd_simulate(config: RunConfig, writer: ArtifactWriter, args: argparse.Namespace) -> int:
    with writer.timed("simulate"):
        traj = simulate_trajectory(config.scenario, rng=np.random.default_rng(config.run.seed))
    writer.write_csv("trajectory.csv", traj.frame)
    events = pd.DataFrame([{"t": e.t, "kind": e.kind, "detail": e.detail} for e in traj.events],
                          columns=["t", "kind", "detail"])
    writer.write_csv("events.csv", events)
    if traj.equilibrium_checks:
        writer.write_csv("equilibrium.csv", pd.DataFrame(traj.equilibrium_checks, columns=["t", "exists"]))
    logger.info(f"run_id={writer.run_id} - simulate: termination={traj.termination}, events={len(traj.events)}")
    return EXIT_COLLAPSED if traj.instability is not None else EXIT_OK


def cmd_train(config: RunConfig, writer: ArtifactWriter, args: argparse.Namespace) -> int:
    env = make_env(config, training=True)
    config_hash = settings.config_hash(config)
    with writer.timed("train"):
        if args.resume:
            trainer = Trainer.resume(Path(args.resume), env)
            trainer.schedule = config.schedule
        else:
            if args.until is None:
                trainer = train(env, config.learner, config.schedule, config.run.seed, config_hash, writer.out_dir)
            else:
                trainer = Trainer(env, config.learner, config.schedule, config.run.seed, config_hash)
        if args.resume or args.until is not None:
            trainer.run(until=args.until, out_dir=writer.out_dir)
    for ckpt in sorted((writer.out_dir / "checkpoints").glob("*.ckpt")):
        writer.register(ckpt)
    trainer.save_checkpoint(writer.out_dir / "final.ckpt")
    writer.register(writer.out_dir / "final.ckpt")
    trainer.save_resume(writer.out_dir / "resume.pkl")
    writer.write_csv("learning_curve.csv", trainer.learning_curve())
    if config.run.env == "toy":
        dp = dp_solve_toy(config.toy, config.oracle.grid)
        report = compare_learned_vs_oracle(env, trainer.ensemble, dp, points=config.oracle.eval_grid)
        writer.write_json("comparison.json", report.as_dict())
    logger.info(f"run_id={writer.run_id} - train: steps={trainer.step}, updates={trainer.updates}")
    return EXIT_OK


def _policy(config: RunConfig, env: ReachEnv):
    if not config.run.checkpoint:
        return None, None
    ensemble = load_ensemble(config.run.checkpoint, env, config)
    return ActorPolicy(ensemble.actor), ensemble


def _toy_mc_frame(config: RunConfig, env: ToyEnv, policy, seed: int) -> pd.DataFrame:
    rows = []
    for i, z0 in enumerate(np.linspace(config.toy.z0_low, config.toy.z0_high, config.oracle.eval_grid)):
        est = mc_estimate(env, policy, config.oracle.n_per_cell, seed + i, horizon=config.toy.tau_max,
                          workers=config.run.workers, confidence=config.oracle.confidence, z0=float(z0))
        row = {"tau": config.toy.tau_max, "z0": float(z0), "n": est.n, "risk_total": est.risk,
               "lo": est.risk_lo, "hi": est.risk_hi}
        for label in env.mechanism_labels:
            row[f"risk_{label.lower()}"] = est.mechanism_risk(label)
        rows.append(row)
    return pd.DataFrame(rows)


def cmd_evaluate(config: RunConfig, writer: ArtifactWriter, args: argparse.Namespace) -> int:
    env = make_env(config)
    policy, ensemble = _policy(config, env)
    oc = config.oracle
    if config.run.env == "toy":
        dp = dp_solve_toy(config.toy, oc.grid)
        writer.write_csv("dp_table.csv", dp.to_frame())
        writer.write_csv("risk_baseline.csv", _toy_mc_frame(config, env, None, config.run.seed))
        if ensemble is not None:
            writer.write_csv("risk_policy.csv", _toy_mc_frame(config, env, policy, config.run.seed))
            writer.write_json("comparison.json", compare_learned_vs_oracle(env, ensemble, dp, oc.eval_grid).as_dict())
        return EXIT_OK
    with writer.timed("baseline"):
        baseline = risk_surface(config.scenario, config.episode, None, oc.taus, oc.p_g_values, oc.r_motor_values,
                                oc.n_per_cell, config.run.seed, config.run.workers, oc.confidence)
    writer.write_csv("risk_surface_baseline.csv", baseline.to_frame())
    if ensemble is not None:
        with writer.timed("policy"):
            learned = risk_surface(config.scenario, config.episode, policy, oc.taus, oc.p_g_values,
                                   oc.r_motor_values, oc.n_per_cell, config.run.seed, config.run.workers,
                                   oc.confidence)
        frame = add_learned_risk(learned.to_frame(), ensemble, config.scenario, config.episode, config.run.seed)
        writer.write_csv("risk_surface_policy.csv", frame)
    return EXIT_OK


def cmd_mc(config: RunConfig, writer: ArtifactWriter, args: argparse.Namespace) -> int:
    env = make_env(config)
    policy, _ = _policy(config, env)
    oc = config.oracle
    with writer.timed("mc"):
        if config.run.env == "toy":
            frame = _toy_mc_frame(config, env, policy, config.run.seed)
        else:
            frame = risk_surface(config.scenario, config.episode, policy, oc.taus, oc.p_g_values,
                                 oc.r_motor_values, oc.n_per_cell, config.run.seed, config.run.workers,
                                 oc.confidence).to_frame()
    writer.write_csv("risk_surface.csv", frame)
    return EXIT_OK


def cmd_validate(config: RunConfig, writer: ArtifactWriter, args: argparse.Namespace) -> int:
    with writer.timed("validate"):
        report = run_all(config)
    writer.write_json("validation.json", report.model_dump(mode="json"))
    if not report.passed:
        failed = [c.name for c in report.checks if not c.passed]
        raise ValidationFailure(f"failed checks: {', '.join(failed)}")
    return EXIT_OK


def cmd_calibrate(config: RunConfig, writer: ArtifactWriter, args: argparse.Namespace) -> int:
    with writer.timed("calibrate"):
        report = calibrate(config.scenario, max_iter=args.max_iter, search_h_int=args.search_h_int)
    writer.write_text("calibrated.toml", calibrated_toml(report))
    writer.write_json("calibration.json", report.as_dict())
    return EXIT_OK if report.ok else EXIT_VALIDATION


COMMANDS = {
    "simulate": cmd_simulate,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "mc": cmd_mc,
    "validate": cmd_validate,
    "calibrate": cmd_calibrate,
}


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    setup_logging(args.log_level)
    run_id = str(uuid.uuid4())
    start_time = time.time()
    logger.info(f"run_id={run_id} - command={args.command}, version={__version__}")

    try:
        config = settings.load_config(args.config, overrides_from_args(args))
        if args.command == "evaluate" and args.checkpoint and not Path(args.checkpoint).exists():
            raise CheckpointFormatError(f"checkpoint not found: {args.checkpoint}")
        writer = ArtifactWriter(Path(config.run.out_dir), run_id)
        code = COMMANDS[args.command](config, writer, args)
        writer.write_manifest(args.command, settings.config_hash(config), config.run.seed, __version__,
                              config.model_dump(mode="json"))
        latency_ms = int((time.time() - start_time) * 1000)
        logger.info(f"run_id={run_id} - exit_code={code}, latency_ms={latency_ms}")
        return code

    except (ConfigError, InfeasibleInitialConditionError, UnknownBranchError) as e:
        logger.error(f"run_id={run_id} - Configuration Error: {str(e)}", exc_info=True)
        return EXIT_CONFIG
    except TrainingAbort as e:
        logger.error(f"run_id={run_id} - Training Aborted: reason={e.reason}, step={e.step}, detail={e.detail}",
                     exc_info=True)
        return EXIT_TRAINING_ABORT
    except ValidationFailure as e:
        logger.error(f"run_id={run_id} - Validation Failed: {str(e)}", exc_info=True)
        return EXIT_VALIDATION
    except CheckpointFormatError as e:
        logger.error(f"run_id={run_id} - Checkpoint Error: {str(e)}", exc_info=True)
        return EXIT_CHECKPOINT
    except Exception as e: #for handling other exceptions
        logger.error(f"run_id={run_id} - Error: {str(e)}", exc_info=True)
        return EXIT_UNEXPECTED


if __name__ == "__main__":
    sys.exit(main())
