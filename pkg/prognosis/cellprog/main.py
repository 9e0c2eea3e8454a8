"""
Command-line entry point: one subcommand per pipeline stage.

    python -m cellprog.main synth --chemistry lifepo4 --cycles 5 --out runs/lfp
    python -m cellprog.main denoise --out runs/lfp
    python -m cellprog.main train --out runs/lfp --compare

Settings come from (lowest to highest precedence) the environment via
``cellprog.config``, a JSON ``--config`` file and the command-line flags.
"""
import argparse
import asyncio
import json
import logging
import os
import sys
from typing import Any, Dict, List, Optional, Sequence, Tuple

from pydantic import BaseModel, ConfigDict, Field, field_validator
from pydantic import ValidationError as ConfigError

from .config import (
    DEFAULT_PROTOCOL,
    DEFAULT_SEED,
    ERROR_FILE,
    GRID_BATCH_SIZES,
    GRID_EPOCHS,
    GRID_LEARNING_RATES,
    LOG_JSON,
    OUTPUT_DIR,
    PEAK_MATCH_GATE_V,
    PROMINENCE_FRACTION,
    RESAMPLE_POINTS,
    SMOOTHING_POLY_ORDER,
    SMOOTHING_WINDOW,
    SYNTH_DECIMATION,
    SYNTH_NOISE_A,
    SYNTH_NOISE_V,
    TRAIN_MAX_WORKERS,
)
from .core import Chemistry
from .errors import InvalidPath, PrognosisError
from .train import TrainConfig
from .utils.log import configure_logging
from .utils.state import write_json_atomic, write_manifest
from .utils.validators import validate_input_file, validate_output_dir
from .workers import AnalysisWorker, CyclerWorker, TrainingWorker

logger = logging.getLogger('cellprog')

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_RUNTIME = 2

WORKERS = {
    "synth": CyclerWorker, "ingest": CyclerWorker, "denoise": CyclerWorker,
    "train": TrainingWorker, "eval": TrainingWorker, "grid": TrainingWorker,
    "dca": AnalysisWorker, "peaks": AnalysisWorker, "report": AnalysisWorker,
}


class SynthOptions(BaseModel):
    model_config = ConfigDict(extra="forbid")

    cycles: int = Field(5, ge=1)
    noise_v: float = Field(SYNTH_NOISE_V, ge=0.0)
    noise_a: float = Field(SYNTH_NOISE_A, ge=0.0)
    fade_per_cycle: float = Field(0.001, ge=0.0, lt=1.0)
    decimation: int = Field(SYNTH_DECIMATION, ge=1)
    protocol: List[Tuple[float, float]] = Field(default_factory=lambda: list(DEFAULT_PROTOCOL), min_length=1)


class DenoiseOptions(BaseModel):
    model_config = ConfigDict(extra="forbid")

    q: Optional[float] = Field(None, gt=0.0)
    r: Optional[float] = Field(None, gt=0.0)


class AnalysisOptions(BaseModel):
    model_config = ConfigDict(extra="forbid")

    n_points: int = Field(RESAMPLE_POINTS, ge=2)
    window: int = Field(SMOOTHING_WINDOW, ge=1)
    poly_order: int = Field(SMOOTHING_POLY_ORDER, ge=0)
    fraction: float = Field(PROMINENCE_FRACTION, ge=0.0, le=1.0)
    gate_v: float = Field(PEAK_MATCH_GATE_V, gt=0.0)
    cycle: int = Field(1, ge=1)

    @field_validator("window")
    @classmethod
    def odd_window(cls, v: int) -> int:
        if v % 2 == 0:
            raise ValueError("smoothing window must be odd")
        return v


class GridOptions(BaseModel):
    model_config = ConfigDict(extra="forbid")

    batch_sizes: List[int] = Field(default_factory=lambda: list(GRID_BATCH_SIZES), min_length=1)
    epochs: List[int] = Field(default_factory=lambda: list(GRID_EPOCHS), min_length=1)
    learning_rates: List[float] = Field(default_factory=lambda: list(GRID_LEARNING_RATES), min_length=1)
    max_workers: int = Field(TRAIN_MAX_WORKERS, ge=1)


class RunConfig(BaseModel):
    """Everything one subcommand needs; echoed into the run manifest"""
    model_config = ConfigDict(extra="forbid")

    seed: int = DEFAULT_SEED
    out: str = OUTPUT_DIR
    verbose: bool = False
    log_json: bool = LOG_JSON
    chemistry: Chemistry = Chemistry.LIFEPO4
    input: Optional[List[str]] = None
    models: Optional[str] = None
    compare: bool = False
    synth: SynthOptions = Field(default_factory=SynthOptions)
    denoise: DenoiseOptions = Field(default_factory=DenoiseOptions)
    train: TrainConfig = Field(default_factory=TrainConfig)
    analysis: AnalysisOptions = Field(default_factory=AnalysisOptions)
    grid: GridOptions = Field(default_factory=GridOptions)

    @field_validator("chemistry", mode="before")
    @classmethod
    def chemistry_alias(cls, v: Any) -> Any:
        return Chemistry.from_name(v) if isinstance(v, str) else v

    def train_config(self) -> TrainConfig:
        """The training config with the run's global seed"""
        return self.train.model_copy(update={"seed": self.seed})


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run configuration file")
    common.add_argument("--seed", type=int, help="Global random seed")
    common.add_argument("--out", help="Output directory")
    common.add_argument("--chemistry", help="lifepo4 or linicoalo2 (aliases lfp, nca)")
    common.add_argument("-v", "--verbose", action="store_true", default=None, help="Debug logging")
    common.add_argument("--log-json", action="store_true", default=None, help="Structured JSON logs")

    def with_input(p: argparse.ArgumentParser) -> argparse.ArgumentParser:
        p.add_argument("--input", nargs="+", help="Cycler CSV file(s)")
        return p

    def with_train(p: argparse.ArgumentParser) -> argparse.ArgumentParser:
        p.add_argument("--variant", choices=["EkfCnn", "EkfCnnLstm"], help="Model variant")
        p.add_argument("--window-len", type=int)
        p.add_argument("--row-stride", type=int, help="Keep every n-th row of each step")
        p.add_argument("--pooled", action="store_true", default=None, help="One model over all regimes")
        return p

    parser = argparse.ArgumentParser(prog="cellprog", description="Battery capacity prognosis pipeline")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="Generate a synthetic cycling run")
    p.add_argument("--cycles", type=int)
    p.add_argument("--noise-v", type=float)
    p.add_argument("--noise-a", type=float)
    p.add_argument("--fade", type=float, help="Capacity fade per cycle")
    p.add_argument("--decimation", type=int)
    p.add_argument("--noiseless", action="store_true", help="Zero measurement noise")

    with_input(sub.add_parser("ingest", parents=[common], help="Parse and merge cycler exports"))

    p = with_input(sub.add_parser("denoise", parents=[common], help="EKF-denoise current and voltage"))
    p.add_argument("--q", type=float, help="Process noise variance")
    p.add_argument("--r", type=float, help="Measurement noise variance")

    p = with_train(with_input(sub.add_parser("train", parents=[common], help="Train capacity models")))
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--learning-rate", type=float)
    p.add_argument("--compare", action="store_true", default=None, help="Train both variants")

    p = with_input(sub.add_parser("eval", parents=[common], help="Evaluate saved checkpoints"))
    p.add_argument("--variant", choices=["EkfCnn", "EkfCnnLstm"])
    p.add_argument("--models", help="Checkpoint directory")

    p = with_train(with_input(sub.add_parser("grid", parents=[common], help="Hyperparameter grid search")))
    p.add_argument("--epochs", type=int, nargs="+", dest="grid_epochs")
    p.add_argument("--batch-sizes", type=int, nargs="+")
    p.add_argument("--learning-rates", type=float, nargs="+")
    p.add_argument("--max-workers", type=int)

    p = with_input(sub.add_parser("dca", parents=[common], help="dQ/dV curves per half-cycle"))
    p.add_argument("--points", type=int, help="Resampling grid size")
    p.add_argument("--window", type=int, help="Savitzky-Golay window (odd)")
    p.add_argument("--poly-order", type=int)

    p = sub.add_parser("peaks", parents=[common], help="Peak reports and C-rate trends")
    p.add_argument("--fraction", type=float, help="Prominence threshold fraction")
    p.add_argument("--gate", type=float, help="Peak matching gate in volts")
    p.add_argument("--cycle", type=int, help="Cycle used for the trends")

    sub.add_parser("report", parents=[common], help="Trend CSV/SVG, capacity summary, loss plots")
    return parser


def _flag_overrides(args: argparse.Namespace) -> Dict[str, Any]:
    """Nested override dict holding only the flags given on the command line"""
    flags = vars(args)

    def pick(mapping: Dict[str, str]) -> Dict[str, Any]:
        return {key: flags[flag] for flag, key in mapping.items() if flags.get(flag) is not None}

    overrides = pick({"seed": "seed", "out": "out", "verbose": "verbose", "log_json": "log_json",
                      "chemistry": "chemistry", "input": "input", "models": "models", "compare": "compare"})
    sections = {
        "synth": pick({"cycles": "cycles", "noise_v": "noise_v", "noise_a": "noise_a",
                       "fade": "fade_per_cycle", "decimation": "decimation"}),
        "denoise": pick({"q": "q", "r": "r"}),
        "train": pick({"variant": "model_variant", "window_len": "window_len", "row_stride": "row_stride",
                       "epochs": "epochs", "batch_size": "batch_size", "learning_rate": "learning_rate"}),
        "analysis": pick({"points": "n_points", "window": "window", "poly_order": "poly_order",
                          "fraction": "fraction", "gate": "gate_v", "cycle": "cycle"}),
        "grid": pick({"grid_epochs": "epochs", "batch_sizes": "batch_sizes",
                      "learning_rates": "learning_rates", "max_workers": "max_workers"}),
    }
    if flags.get("noiseless"):
        sections["synth"].update(noise_v=0.0, noise_a=0.0)
    if flags.get("pooled"):
        sections["train"]["per_c_rate"] = False
    overrides.update({name: values for name, values in sections.items() if values})
    return overrides


def _merge(base: Dict[str, Any], overrides: Dict[str, Any]) -> Dict[str, Any]:
    merged = dict(base)
    for key, value in overrides.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = _merge(merged[key], value)
        else:
            merged[key] = value
    return merged


def load_run_config(args: argparse.Namespace) -> RunConfig:
    """Config file values, overridden by flags, validated as one RunConfig"""
    data: Dict[str, Any] = {}
    if args.config:
        is_valid, error_message = validate_input_file(args.config, extensions=('json',))
        if not is_valid:
            raise InvalidPath(error_message, path=args.config)
        try:
            with open(args.config, 'r', encoding='utf-8') as f:
                data = json.load(f)
        except json.JSONDecodeError as e:
            raise InvalidPath(f"Invalid JSON in {args.config}: {str(e)}", path=args.config)
        if not isinstance(data, dict):
            raise InvalidPath(f"{args.config} must hold a JSON object", path=args.config)
    return RunConfig.model_validate(_merge(data, _flag_overrides(args)))


def write_error_record(output_dir: str, stage: str, error_type: str, message: str,
                       path: Optional[str] = None) -> Optional[str]:
    try:
        os.makedirs(output_dir, exist_ok=True)
        return write_json_atomic(os.path.join(output_dir, ERROR_FILE), {
            "stage": stage, "error_type": error_type, "message": message, "path": path,
        })
    except OSError as e:
        logger.error(f"Could not write error record: {str(e)}")
        return None


def cmd_run(argv: Optional[Sequence[str]] = None) -> int:
    """Parse ``argv``, run one stage and return the process exit code"""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code in (0, None) else EXIT_VALIDATION

    configure_logging("DEBUG" if args.verbose else None, args.log_json)
    out_fallback = args.out or OUTPUT_DIR
    try:
        config = load_run_config(args)
    except InvalidPath as e:
        logger.error(str(e))
        write_error_record(out_fallback, args.command, type(e).__name__, str(e), e.path)
        return EXIT_VALIDATION
    except (ConfigError, PrognosisError, ValueError) as e:
        logger.error(f"Invalid configuration: {str(e)}")
        write_error_record(out_fallback, args.command, type(e).__name__, str(e), args.config)
        return EXIT_VALIDATION
    if config.verbose or config.log_json:
        configure_logging("DEBUG" if config.verbose else None, config.log_json)

    is_valid, error_message = validate_output_dir(config.out)
    if not is_valid:
        logger.error(error_message)
        return EXIT_VALIDATION

    worker = WORKERS[args.command](config.out)
    result = asyncio.run(worker.process_message({"stage": args.command, "config": config}))
    write_manifest(config.out, args.command, config.model_dump(mode="json"), config.seed,
                   inputs=result["inputs"], outputs=result["outputs"])

    error_path = os.path.join(config.out, ERROR_FILE)
    if result["status"] == "failed":
        write_error_record(config.out, args.command, result["error_type"], result["error"], result["path"])
        return result.get("exit_code", EXIT_RUNTIME)
    if os.path.exists(error_path):
        os.remove(error_path)
    logger.info(f"{args.command} finished: {len(result['outputs'])} artifacts in {config.out}")
    return EXIT_OK


def main() -> None:
    sys.exit(cmd_run())


if __name__ == "__main__":
    main()
