"""
Experiment orchestration: generate phantoms, train regimes, evaluate, replay
"""

import asyncio
import logging
import multiprocessing
import time
from dataclasses import dataclass, field
from multiprocessing.connection import Connection
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

from .cascade import (
    CONFIG_FILE, MODEL_NAMES, CascadeLocalTrainer, cascade_from_weights, initial_weights,
    load_cascade, save_cascade, train_cascade
)
from .config import (
    ExperimentConfig, RuntimeConfig, dump_experiment_config, load_experiment_config,
    parse_experiment_config
)
from .evaluation import EvaluationKey, Evaluator, build_report, write_report_tables
from .exceptions import (
    ConfigurationError, DensityFedError, ErrorCode, FederationError, FileError
)
from .federation import ReplayResult, replay_session, run_aggregator, run_collaborator
from .file_writer import FileWriter
from .models import ComparisonReport, EvalRecord, PhantomSample, Regime
from .phantom import generate_dataset, noisy_dense_labels, read_dataset, split_by_subject, write_dataset
from .report_renderer import ReportRenderer
from .serialization import decode_weights, encode_weights
from .tensor_nn import ModelWeights
from .utils import format_duration, make_rng, setup_logging

logger = logging.getLogger(__name__)

CONFIG_NAME = "experiment.cfg"
DATA_DIR = "data"
MODELS_DIR = "models"
REPORTS_DIR = "reports"
SESSION_NAME = "session.mfls"

TRAIN_SPLIT = "train"
TEST_SPLIT = "test"

# seconds to wait for the aggregator to bind before giving up
STARTUP_TIMEOUT = 60.0


@dataclass
class CommandResult:
    """What a harness command produced"""
    command: str
    output_dir: str
    artifacts: List[str] = field(default_factory=list)
    duration: float = 0.0
    details: Dict[str, Any] = field(default_factory=dict)
    report: Optional[ComparisonReport] = None

    def to_dict(self) -> Dict[str, Any]:
        return {
            "command": self.command,
            "output_dir": self.output_dir,
            "artifacts": list(self.artifacts),
            "duration_seconds": round(self.duration, 3),
            "details": dict(self.details),
        }


def _output_dir(config: ExperimentConfig) -> Path:
    return Path(config.output_dir)


def _data_root(config: ExperimentConfig) -> Path:
    return _output_dir(config) / DATA_DIR


def regime_institutions(config: ExperimentConfig, regime: Regime) -> List[str]:
    """
    Institutions whose training data a regime uses

    Raises:
        ConfigurationError: A single-institution regime whose institution
            is not configured
    """
    names = sorted(config.institutions)
    if regime in (Regime.CENTRALIZED_POOLED, Regime.FEDERATED):
        return names
    institution = regime.value.split("-", 1)[1]
    if institution not in config.institutions:
        raise ConfigurationError(
            f"Regime {regime.value} needs an institution named '{institution}'",
            config_key="institutions",
            suggestions=[f"Configured institutions: {', '.join(names)}"],
        )
    return [institution]


def load_training_samples(config: ExperimentConfig, institution: str) -> List[PhantomSample]:
    """Training split of one institution, with label noise applied when configured"""
    samples = read_dataset(_data_root(config), institution, TRAIN_SPLIT)
    if config.label_noise > 0:
        samples = noisy_dense_labels(samples, config.label_noise,
                                     make_rng(config.seed, "label-noise", institution))
    return samples


# ---------------------------------------------------------------------------
# generate
# ---------------------------------------------------------------------------

def cmd_generate(config: ExperimentConfig, force: bool = False) -> CommandResult:
    """
    Generate every institution's phantom dataset with a subject-level test split

    Raises:
        FileError: Non-empty output directory without force
    """
    started = time.monotonic()
    writer = FileWriter(_output_dir(config), force=force, logger=logger)
    writer.prepare()
    writer.write_text(CONFIG_NAME, dump_experiment_config(config))
    artifacts = [CONFIG_NAME]
    data_writer = FileWriter(_data_root(config), force=force, logger=logger)
    counts = {}
    for name, profile in config.profiles().items():
        samples = generate_dataset(profile, config.seed)
        train, test = split_by_subject(samples, config.test_fraction, make_rng(config.seed, "test-split", name))
        split_of = {s.subject_id: TRAIN_SPLIT for s in train}
        split_of.update({s.subject_id: TEST_SPLIT for s in test})
        manifest = write_dataset(_data_root(config), name, samples, split_of, data_writer)
        artifacts.append(str(manifest.relative_to(_output_dir(config))))
        counts[name] = {TRAIN_SPLIT: len(train), TEST_SPLIT: len(test)}
        logger.info(f"Institution {name}: {len(train)} training and {len(test)} test images")
    return CommandResult("generate", str(_output_dir(config)), artifacts,
                         time.monotonic() - started, {"counts": counts})


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------

def cmd_train(config: ExperimentConfig, runtime: Optional[RuntimeConfig] = None,
              force: bool = False) -> CommandResult:
    """
    Train the configured regime and persist its cascade under models/<regime>/

    Centralized regimes train in-process on the selected pool; the
    federated regime runs one aggregator and one collaborator process per
    institution over loopback and records the session.
    """
    runtime = runtime or RuntimeConfig()
    started = time.monotonic()
    regime = config.regime
    writer = FileWriter(_output_dir(config), force=force, logger=logger)
    model_dir = Path(MODELS_DIR) / regime.value
    institutions = regime_institutions(config, regime)

    details: Dict[str, Any] = {"institutions": institutions}
    if regime is Regime.FEDERATED:
        session = writer.claim(model_dir / SESSION_NAME)
        weights, rounds = _run_federation_processes(config, runtime, institutions, session)
        model = cascade_from_weights(config.unet_config(), weights, config.train.threshold)
        details["rounds_completed"] = rounds
        artifacts = [str(model_dir / SESSION_NAME)]
    else:
        pool: List[PhantomSample] = []
        for name in institutions:
            pool.extend(load_training_samples(config, name))
        logger.info(f"Training {regime.value} on {len(pool)} images from {', '.join(institutions)}")
        model = train_cascade(pool, config.hyperparams(), config.unet_config(), config.seed,
                              config.train.threshold)
        artifacts = []

    save_cascade(model, writer, model_dir)
    artifacts.extend(str(model_dir / f"{name}.mflw") for name in MODEL_NAMES)
    artifacts.append(str(model_dir / CONFIG_FILE))
    duration = time.monotonic() - started
    logger.info(f"Trained {regime.value} in {format_duration(duration)}")
    return CommandResult("train", str(_output_dir(config)), artifacts, duration, details)


def _aggregator_process(config_text: str, rounds: int, expected: Sequence[str], host: str, port: int,
                        session_path: str, max_frame_bytes: int, round_timeout: float,
                        log_level: str, conn: Connection) -> None:
    setup_logging(log_level)
    config = parse_experiment_config(config_text, "aggregator")
    try:
        result = asyncio.run(run_aggregator(
            initial_weights(config.unet_config(), config.seed), rounds, list(expected), host, port,
            session_path=session_path,
            on_listening=lambda h, p: conn.send(("listening", h, p)),
            max_frame_bytes=max_frame_bytes,
            round_timeout=round_timeout,
        ))
        blobs = {name: encode_weights(weights) for name, weights in result.weights.items()}
        conn.send(("result", blobs, result.rounds_completed))
    except DensityFedError as e:
        conn.send(("error", e.message, e.error_code.value))
    except OSError as e:
        conn.send(("error", f"Aggregator could not listen on {host}:{port}: {e}", ErrorCode.CONNECTION_FAILED.value))
    finally:
        conn.close()


def _collaborator_process(config_text: str, institution: str, host: str, port: int,
                          max_frame_bytes: int, log_level: str) -> None:
    setup_logging(log_level)
    config = parse_experiment_config(config_text, f"collaborator {institution}")
    try:
        trainer = CascadeLocalTrainer(load_training_samples(config, institution), config.hyperparams(),
                                      config.unet_config(), config.seed)
    except DensityFedError as e:
        logging.getLogger(__name__).error(f"[{institution}] {e.message}")
        raise SystemExit(1)
    status = asyncio.run(run_collaborator(
        institution, trainer, host, port,
        connect_attempts=config.federation.connect_attempts,
        backoff_seconds=config.federation.backoff_seconds,
        max_frame_bytes=max_frame_bytes,
    ))
    raise SystemExit(status)


def _receive(conn: Connection, process: multiprocessing.process.BaseProcess,
             timeout: Optional[float]) -> Tuple[Any, ...]:
    deadline = None if timeout is None else time.monotonic() + timeout
    while True:
        if conn.poll(0.2):
            return conn.recv()
        if not process.is_alive() and not conn.poll(0):
            raise FederationError(f"Aggregator process exited with status {process.exitcode}")
        if deadline is not None and time.monotonic() > deadline:
            raise FederationError("Aggregator did not start listening in time",
                                  suggestions=["Check federation.host and federation.port"])


def _run_federation_processes(config: ExperimentConfig, runtime: RuntimeConfig, institutions: Sequence[str],
                              session_path: Path) -> Tuple[Dict[str, ModelWeights], int]:
    context = multiprocessing.get_context("spawn")
    config_text = dump_experiment_config(config)
    parent_conn, child_conn = context.Pipe()
    aggregator = context.Process(
        target=_aggregator_process, name="aggregator",
        args=(config_text, config.rounds, list(institutions), config.federation.host, config.federation.port,
              str(session_path), runtime.max_frame_bytes, runtime.round_timeout_seconds,
              runtime.log_level, child_conn),
    )
    aggregator.start()
    child_conn.close()
    collaborators: List[multiprocessing.process.BaseProcess] = []
    try:
        message = _receive(parent_conn, aggregator, STARTUP_TIMEOUT)
        if message[0] == "error":
            raise FederationError(message[1])
        _, host, port = message
        logger.info(f"Aggregator listening on {host}:{port}; starting {len(institutions)} collaborators")
        for name in institutions:
            process = context.Process(
                target=_collaborator_process, name=f"collaborator-{name}",
                args=(config_text, name, host, port, runtime.max_frame_bytes, runtime.log_level),
            )
            process.start()
            collaborators.append(process)

        message = _receive(parent_conn, aggregator, None)
        if message[0] == "error":
            raise FederationError(f"Federation failed: {message[1]}")
        _, blobs, rounds = message
        return {name: decode_weights(blob) for name, blob in blobs.items()}, rounds
    finally:
        for process in [aggregator] + collaborators:
            process.join(timeout=30.0)
            if process.is_alive():
                logger.warning(f"Terminating {process.name}")
                process.terminate()
                process.join()
            elif process.exitcode:
                logger.warning(f"{process.name} exited with status {process.exitcode}")
        parent_conn.close()


# ---------------------------------------------------------------------------
# Multi-host federation
# ---------------------------------------------------------------------------

def cmd_aggregate(config: ExperimentConfig, runtime: Optional[RuntimeConfig] = None,
                  force: bool = False) -> CommandResult:
    """Serve a federation at federation.host:port and persist the result as the federated model"""
    runtime = runtime or RuntimeConfig()
    started = time.monotonic()
    writer = FileWriter(_output_dir(config), force=force, logger=logger)
    model_dir = Path(MODELS_DIR) / Regime.FEDERATED.value
    session = writer.claim(model_dir / SESSION_NAME)
    result = asyncio.run(run_aggregator(
        initial_weights(config.unet_config(), config.seed), config.rounds, sorted(config.institutions),
        config.federation.host, config.federation.port,
        session_path=session,
        on_listening=lambda h, p: logger.info(f"Aggregator listening on {h}:{p}"),
        max_frame_bytes=runtime.max_frame_bytes,
        round_timeout=runtime.round_timeout_seconds,
    ))
    model = cascade_from_weights(config.unet_config(), result.weights, config.train.threshold)
    save_cascade(model, writer, model_dir)
    return CommandResult("aggregate", str(_output_dir(config)), [str(model_dir / SESSION_NAME)],
                         time.monotonic() - started,
                         {"rounds_completed": result.rounds_completed,
                          "participants": [(p.collaborator_id, p.sample_count) for p in result.participants]})


def cmd_collaborate(config: ExperimentConfig, institution: str,
                    runtime: Optional[RuntimeConfig] = None) -> int:
    """
    Join a federation as one institution

    Returns:
        Exit status of the collaborator
    """
    runtime = runtime or RuntimeConfig()
    if institution not in config.institutions:
        raise ConfigurationError(f"Unknown institution '{institution}'", config_key="institutions")
    trainer = CascadeLocalTrainer(load_training_samples(config, institution), config.hyperparams(),
                                  config.unet_config(), config.seed)
    return asyncio.run(run_collaborator(
        institution, trainer, config.federation.host, config.federation.port,
        connect_attempts=config.federation.connect_attempts,
        backoff_seconds=config.federation.backoff_seconds,
        max_frame_bytes=runtime.max_frame_bytes,
    ))


# ---------------------------------------------------------------------------
# evaluate
# ---------------------------------------------------------------------------

def trained_regimes(config: ExperimentConfig) -> List[Regime]:
    """Regimes with a persisted cascade, in canonical order"""
    models = _output_dir(config) / MODELS_DIR
    return [regime for regime in Regime if (models / regime.value / CONFIG_FILE).exists()]


def cmd_evaluate(config: ExperimentConfig, runtime: Optional[RuntimeConfig] = None,
                 force: bool = False) -> CommandResult:
    """
    Evaluate every trained regime on every institution's test split

    Writes the metric, paired-test, correlation, record and scatter CSVs
    plus report.md under reports/.

    Raises:
        FileError: No trained model or missing test data
    """
    runtime = runtime or RuntimeConfig()
    started = time.monotonic()
    regimes = trained_regimes(config)
    if not regimes:
        raise FileError(
            f"No trained models under {_output_dir(config) / MODELS_DIR}",
            ErrorCode.FILE_NOT_FOUND,
            file_path=str(_output_dir(config) / MODELS_DIR),
            suggestions=["Run 'densityfed train' for at least one regime first"],
        )
    evaluator = Evaluator(config.train.batch_size, runtime.eval_workers, config.train.tag_threshold, logger)
    test_sets = {name: read_dataset(_data_root(config), name, TEST_SPLIT) for name in sorted(config.institutions)}

    evaluations: Dict[EvaluationKey, List[EvalRecord]] = {}
    for regime in regimes:
        model = load_cascade(_output_dir(config) / MODELS_DIR / regime.value)
        for name, samples in test_sets.items():
            logger.info(f"Evaluating {regime.value} on {name} ({len(samples)} images)")
            evaluations[(regime, name)] = evaluator.evaluate(model, samples)

    training_labels = {}
    for name, samples in test_sets.items():
        labelled = noisy_dense_labels(samples, config.label_noise, make_rng(config.seed, "label-noise", name, TEST_SPLIT))
        training_labels[name] = [(truth.pd_truth, label.pd_truth) for truth, label in zip(samples, labelled)]

    report = build_report(evaluations, training_labels)
    writer = FileWriter(_output_dir(config) / REPORTS_DIR, force=force, logger=logger)
    artifacts = [str(Path(REPORTS_DIR) / name) for name in write_report_tables(report, writer, evaluations)]
    rendered = ReportRenderer(runtime.get_templates_dir()).render(
        report,
        context={
            "seed": config.seed,
            "label noise": config.label_noise,
            "regimes": ", ".join(r.value for r in regimes),
            "test institutions": ", ".join(test_sets),
        },
    )
    writer.write_text("report.md", rendered)
    artifacts.append(str(Path(REPORTS_DIR) / "report.md"))
    return CommandResult("evaluate", str(_output_dir(config)), artifacts, time.monotonic() - started,
                         {"regimes": [r.value for r in regimes]}, report)


# ---------------------------------------------------------------------------
# replay
# ---------------------------------------------------------------------------

def cmd_replay(session_path: Path, output_dir: Optional[Path] = None) -> Tuple[CommandResult, ReplayResult]:
    """
    Recompute a recorded federation offline

    Returns:
        The command result and the replay outcome; ``matches`` tells
        whether the recomputed weights equal the recorded broadcasts
    """
    started = time.monotonic()
    replay = replay_session(session_path)
    if replay.matches:
        logger.info(f"Replayed {replay.rounds} rounds from {session_path}: aggregates match")
    else:
        logger.warning(f"Replayed {replay.rounds} rounds from {session_path}: aggregates DIFFER from the recording")
    return CommandResult("replay", str(output_dir or session_path.parent), [str(session_path)],
                         time.monotonic() - started,
                         {"rounds": replay.rounds, "matches": replay.matches}), replay


def load_config(path: Optional[Path]) -> ExperimentConfig:
    """Experiment config from a file, or the defaults when no path is given"""
    return load_experiment_config(path) if path else ExperimentConfig()
