"""
Command-line front end.

    cpft synth --users 1000 --items 200 --seed 7
    cpft ingest --input interactions.tsv --format tsv
    cpft pretrain --data runs/synth-.../dataset.bin
    cpft finetune --data ... --checkpoint runs/pretrain-.../checkpoint.bin
    cpft calibrate --data ... --checkpoint ...
    cpft evaluate --data ... --checkpoint ... [--show-user 3]
    cpft ablate --data ... --checkpoint ...
    cpft sensitivity --data ... --checkpoint ... --grid alpha=0.1,0.3,0.5,0.7
    cpft runs --limit 10 --verb finetune --status failed

Every verb except "runs" accepts --config FILE, --set key=value (repeatable),
--output-dir DIR and --from-manifest FILE. Each run writes into its own
timestamped directory under the output dir (CPFT_OUTPUT_DIR, default "runs")
and leaves a manifest.json there that is enough to replay it. "runs" only
reads the run ledger.

Exit codes: 0 success, 1 usage or configuration error, 2 data error,
3 training divergence.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
import uuid
from dataclasses import dataclass, field
from datetime import datetime
from pathlib import Path
from typing import Any, Callable, Dict, List, Literal, Optional, Sequence

from pydantic import BaseModel, ValidationError
from sqlalchemy.exc import SQLAlchemyError

from . import __version__
from .config import LOSS_CONFIGS, TrainConfig, apply_overrides, load_config, settings
from .conformal import split_cp, write_coverage_audit
from .core import (
    CheckpointFormatError,
    CPFTError,
    DataError,
    DivergenceDetected,
    EmptyCalibrationBatch,
    InteractionSequence,
    NoEligibleUsers,
    TrainingError,
    UnknownConfigKey,
)
from .data import (
    Dataset,
    SynthSpec,
    generate_synthetic,
    ingest,
    load_dataset,
    save_dataset,
    test_examples,
    validation_examples,
    write_vocabulary,
)
from .evaluation import MetricReport, evaluate, format_table, top_n_with_confidence, write_report
from .logging_config import LogContext, setup_logging
from .model import ModelParams, init_params, load_checkpoint, save_checkpoint
from .runs import format_runs, recent_runs, record_run_finished, record_run_started
from .training import finetune, pretrain, write_traces

logger = logging.getLogger(__name__)

Verb = Literal[
    "synth", "ingest", "pretrain", "finetune", "calibrate", "evaluate", "ablate", "sensitivity", "runs",
]

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_DIVERGED = 3

# Arguments that describe where a run goes rather than what it computes
_RUN_ONLY_ARGS = {"verb", "config", "overrides", "output_dir", "from_manifest"}


class UsageError(CPFTError):
    """Bad command line or unusable manifest."""


class Command(BaseModel):
    verb: Verb
    config_path: Optional[Path] = None
    overrides: List[str] = []
    output_dir: Optional[Path] = None
    from_manifest: Optional[Path] = None
    args: Dict[str, Any] = {}


@dataclass
class RunContext:
    run_id: str
    run_dir: Path
    config: TrainConfig
    args: Dict[str, Any]
    inputs: Dict[str, str] = field(default_factory=dict)
    outputs: Dict[str, str] = field(default_factory=dict)
    extra: Dict[str, Any] = field(default_factory=dict)

    def input(self, name: str) -> Path:
        value = self.args.get(name)
        if value is None:
            raise UsageError(f"--{name.replace('_', '-')} is required")
        path = Path(value)
        if not path.is_file():
            raise FileNotFoundError(f"{path} does not exist")
        self.inputs[name] = sha256_of(path)
        return path

    def output(self, name: str) -> Path:
        path = self.run_dir / name
        self.outputs[name] = ""
        return path


def sha256_of(path: Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


class CLIArgumentParser(argparse.ArgumentParser):
    """argparse exits with 2 on bad usage; this CLI reserves 2 for data errors."""

    def error(self, message: str):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# ---------------------------------------------------------------------------
# verbs


def _load_data(ctx: RunContext) -> Dataset:
    vocabulary = ctx.input("vocabulary") if ctx.args.get("vocabulary") else None
    return load_dataset(ctx.input("data"), vocabulary)


def _load_model(ctx: RunContext, dataset: Dataset) -> ModelParams:
    params = load_checkpoint(ctx.input("checkpoint"))
    if params.catalog_size != dataset.catalog_size:
        raise CheckpointFormatError(
            f"checkpoint scores {params.catalog_size} items but the dataset has {dataset.catalog_size}"
        )
    return params


def cmd_synth(ctx: RunContext) -> None:
    spec = SynthSpec(
        n_users=ctx.args["users"],
        n_items=ctx.args["items"],
        min_len=ctx.args["min_len"],
        max_len=ctx.args["max_len"],
        transition_concentration=ctx.args["concentration"],
        seed=ctx.config.seed if ctx.args.get("seed") is None else ctx.args["seed"],
    )
    dataset = generate_synthetic(spec)
    save_dataset(dataset, ctx.output("dataset.bin"))
    ctx.extra["synth"] = spec.model_dump()
    ctx.extra["stats"] = dataset.stats().model_dump()
    print(ctx.run_dir / "dataset.bin")


def cmd_ingest(ctx: RunContext) -> None:
    dataset = ingest(ctx.input("input"), ctx.args["format"])
    if not dataset.sequences:
        raise NoEligibleUsers("no user has at least three interactions")
    save_dataset(dataset, ctx.output("dataset.bin"))
    write_vocabulary(dataset.vocabulary or {}, ctx.output("vocabulary.tsv"))
    ctx.extra["stats"] = dataset.stats().model_dump()
    print(ctx.run_dir / "dataset.bin")


def cmd_pretrain(ctx: RunContext) -> None:
    cfg = ctx.config
    dataset = _load_data(ctx)
    params = init_params(dataset.catalog_size, cfg.d, cfg.encoder, cfg.seed, cfg.init_scale)
    with LogContext(stage="pretrain"):
        params, traces = pretrain(params, dataset, cfg)
    save_checkpoint(params, ctx.output("checkpoint.bin"))
    write_traces(traces, ctx.output("trace.jsonl"))
    print(ctx.run_dir / "checkpoint.bin")


def cmd_finetune(ctx: RunContext) -> None:
    dataset = _load_data(ctx)
    params = _load_model(ctx, dataset)
    with LogContext(stage="finetune"):
        params, traces = finetune(params, dataset, ctx.config)
    save_checkpoint(params, ctx.output("checkpoint.bin"))
    write_traces(traces, ctx.output("trace.jsonl"))
    print(ctx.run_dir / "checkpoint.bin")


def cmd_calibrate(ctx: RunContext) -> None:
    cfg = ctx.config
    dataset = _load_data(ctx)
    params = _load_model(ctx, dataset)
    splits = dataset.splits
    valid, tests = validation_examples(splits), test_examples(splits)
    result = split_cp(
        params, None,
        [(e.prefix, e.target) for e in valid],
        [(e.prefix, e.target) for e in tests],
        cfg.alpha,
        calib_users=[e.user for e in valid],
        test_users=[e.user for e in tests],
        max_len=cfg.max_seq_len,
    )
    write_coverage_audit(result, ctx.output("coverage_audit.jsonl"))
    summary = {
        "alpha": cfg.alpha,
        "n_calibration": result.threshold.n,
        "q_hat": result.threshold.q_hat,
        "coverage": result.coverage,
        "mean_set_size": result.mean_set_size,
    }
    ctx.output("calibration.json").write_text(json.dumps(summary, indent=2) + "\n", encoding="utf-8")
    print(f"alpha={cfg.alpha} q_hat={result.threshold.q_hat!r}")
    print(f"coverage={result.coverage!r}")
    print(f"mean_set_size={result.mean_set_size!r}")


def _evaluate(params: ModelParams, dataset: Dataset, cfg: TrainConfig) -> MetricReport:
    return evaluate(params, dataset, cfg.alpha, cfg.ks, cfg.mask_history, cfg.top_k_closest, cfg.max_seq_len)


def cmd_evaluate(ctx: RunContext) -> None:
    dataset = _load_data(ctx)
    params = _load_model(ctx, dataset)
    report = _evaluate(params, dataset, ctx.config)
    write_report(report, ctx.output("report.json"))
    print(format_table({"model": report}))

    user = ctx.args.get("show_user")
    if user is not None:
        seq = next((s for s in dataset.sequences if s.user == user), None)
        if seq is None:
            raise UsageError(f"user {user} is not in the dataset")
        history = InteractionSequence(user=seq.user, items=seq.items[:-1])
        top, set_size = top_n_with_confidence(params, history, ctx.args["top_n"], report.q_hat)
        print(f"\nuser {user}: history={list(history.items)} truth={seq.last} set_size={set_size}")
        for rank, (item, conf) in enumerate(top, start=1):
            mark = " *" if item == seq.last else ""
            print(f"  {rank:>2}. item {item:<6} confidence={conf:.4f}{mark}")


def _sweep(ctx: RunContext, variants: Dict[str, TrainConfig]) -> None:
    """Fine-tune the same pretrained checkpoint once per variant and evaluate each."""
    dataset = _load_data(ctx)
    pretrained = _load_model(ctx, dataset)
    reports: Dict[str, MetricReport] = {}
    for name, cfg in variants.items():
        logger.info(f"Sweep variant {name}")
        with LogContext(stage=f"finetune[{name}]"):
            params, traces = finetune(pretrained.copy(), dataset, cfg)
        write_traces(traces, ctx.output(f"trace-{name}.jsonl"))
        reports[name] = _evaluate(params, dataset, cfg)
        write_report(reports[name], ctx.output(f"report-{name}.json"))
    print(format_table(reports))


def cmd_ablate(ctx: RunContext) -> None:
    _sweep(ctx, {name: ctx.config.model_copy(update={"loss_config": name}) for name in LOSS_CONFIGS})


def parse_grid(spec: str) -> tuple[str, List[str]]:
    if "=" not in spec:
        raise UsageError(f"--grid expects key=v1,v2,... got '{spec}'")
    key, values = spec.split("=", 1)
    parts = [v.strip() for v in values.split(",") if v.strip()]
    if not parts:
        raise UsageError("--grid needs at least one value")
    return key.strip(), parts


def cmd_sensitivity(ctx: RunContext) -> None:
    key, values = parse_grid(ctx.args["grid"])
    _sweep(ctx, {f"{key}={v}": apply_overrides(ctx.config, [f"{key}={v}"]) for v in values})


COMMANDS: Dict[str, Callable[[RunContext], None]] = {
    "synth": cmd_synth,
    "ingest": cmd_ingest,
    "pretrain": cmd_pretrain,
    "finetune": cmd_finetune,
    "calibrate": cmd_calibrate,
    "evaluate": cmd_evaluate,
    "ablate": cmd_ablate,
    "sensitivity": cmd_sensitivity,
}


# ---------------------------------------------------------------------------
# run plumbing


def _resolve(command: Command) -> tuple[TrainConfig, Dict[str, Any]]:
    """Effective config and verb arguments; a manifest replaces both."""
    if command.from_manifest is not None:
        manifest = json.loads(Path(command.from_manifest).read_text(encoding="utf-8"))
        if manifest.get("verb") != command.verb:
            raise UsageError(f"manifest was written by '{manifest.get('verb')}', not '{command.verb}'")
        config = TrainConfig.model_validate(manifest["config"])
        args = dict(manifest.get("args", {}))
        for name, digest in manifest.get("inputs", {}).items():
            path = args.get(name)
            if path and Path(path).is_file() and sha256_of(Path(path)) != digest:
                logger.warning(f"Input {name} ({path}) changed since the manifest was written")
        return apply_overrides(config, command.overrides), args
    config = apply_overrides(load_config(command.config_path), command.overrides)
    return config, dict(command.args)


def _new_run(verb: str, output_dir: Optional[Path]) -> tuple[str, Path]:
    stamp = datetime.now().strftime("%Y%m%dT%H%M%S")
    run_id = f"{verb}-{stamp}-{uuid.uuid4().hex[:6]}"
    run_dir = Path(output_dir or settings.output_dir) / run_id
    run_dir.mkdir(parents=True, exist_ok=False)
    return run_id, run_dir


def _write_manifest(ctx: RunContext, verb: str, exit_code: int) -> Path:
    outputs = {name: sha256_of(ctx.run_dir / name) for name in ctx.outputs if (ctx.run_dir / name).is_file()}
    manifest = {
        "cpft_version": __version__,
        "run_id": ctx.run_id,
        "verb": verb,
        "args": ctx.args,
        "config": ctx.config.model_dump(mode="json"),
        "seed": ctx.config.seed,
        "inputs": ctx.inputs,
        "outputs": outputs,
        "exit_code": exit_code,
        **ctx.extra,
    }
    path = ctx.run_dir / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def exit_code_for(exc: BaseException) -> int:
    if isinstance(exc, (UsageError, UnknownConfigKey, ValidationError)):
        return EXIT_USAGE
    if isinstance(exc, DivergenceDetected):
        return EXIT_DIVERGED
    if isinstance(exc, (DataError, EmptyCalibrationBatch, FileNotFoundError)):
        return EXIT_DATA
    if isinstance(exc, TrainingError):
        return EXIT_DIVERGED
    return EXIT_DATA


def list_runs(args: Dict[str, Any]) -> int:
    """Print the newest ledger rows; writes no run directory."""
    try:
        rows = recent_runs(limit=args.get("limit", 20), verb=args.get("filter_verb"), status=args.get("status"))
    except SQLAlchemyError as e:
        logger.error(f"runs: cannot read the run ledger: {e}")
        return EXIT_DATA
    print(format_runs(rows))
    return EXIT_OK


def run(command: Command) -> int:
    """Execute one verb inside its own run directory; returns the exit code."""
    if command.verb == "runs":
        return list_runs(command.args)
    try:
        config, args = _resolve(command)
    except (CPFTError, ValidationError, OSError, json.JSONDecodeError, KeyError) as e:
        logger.error(f"{command.verb}: {e}")
        return EXIT_USAGE

    run_id, run_dir = _new_run(command.verb, command.output_dir)
    ctx = RunContext(run_id, run_dir, config, args)
    exit_code = EXIT_OK
    with LogContext(run_id=run_id, verb=command.verb):
        record_run_started(run_id, command.verb, str(run_dir), config.model_dump(mode="json"))
        logger.info(f"Run {run_id} started in {run_dir}")
        try:
            COMMANDS[command.verb](ctx)
        except (CPFTError, ValidationError, FileNotFoundError) as e:
            exit_code = exit_code_for(e)
            logger.error(f"{command.verb} failed ({type(e).__name__}): {e}")
        except Exception as e:
            exit_code = EXIT_DATA
            logger.error(f"{command.verb} failed unexpectedly: {e}", exc_info=True)
        finally:
            manifest = _write_manifest(ctx, command.verb, exit_code)
            record_run_finished(run_id, exit_code, sha256_of(manifest))
            logger.info(f"Run {run_id} finished with exit code {exit_code}")
    return exit_code


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="Flat TOML file of training keys")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="Override one config key (repeatable)")
    p.add_argument("--output-dir", type=Path, help="Parent of the run directory (default: CPFT_OUTPUT_DIR)")
    p.add_argument("--from-manifest", type=Path, help="Replay a previous run from its manifest.json")


def _add_model_inputs(p: argparse.ArgumentParser, checkpoint: bool = True) -> None:
    p.add_argument("--data", help="dataset.bin written by synth or ingest")
    p.add_argument("--vocabulary", help="vocabulary.tsv written by ingest")
    if checkpoint:
        p.add_argument("--checkpoint", help="checkpoint.bin written by pretrain or finetune")


def build_parser() -> argparse.ArgumentParser:
    parser = CLIArgumentParser(prog="cpft", description="Conformal fine-tuning for sequential recommenders")
    parser.add_argument("--version", action="version", version=f"cpft {__version__}")
    sub = parser.add_subparsers(dest="verb", required=True, parser_class=CLIArgumentParser)

    p = sub.add_parser("synth", help="Generate a synthetic Markov-chain dataset")
    p.add_argument("--users", type=int, default=1000)
    p.add_argument("--items", type=int, default=200)
    p.add_argument("--min-len", type=int, default=5)
    p.add_argument("--max-len", type=int, default=20)
    p.add_argument("--concentration", type=float, default=0.9, help="Probability of the designated successor")
    p.add_argument("--seed", type=int, help="Defaults to the config seed")
    _add_common(p)

    p = sub.add_parser("ingest", help="Convert a user/item/timestamp log into a dataset")
    p.add_argument("--input", help="Delimited file with user, item, timestamp columns")
    p.add_argument("--format", choices=["tsv", "csv"], default="tsv")
    _add_common(p)

    p = sub.add_parser("pretrain", help="Stage one: cross-entropy training")
    _add_model_inputs(p, checkpoint=False)
    _add_common(p)

    p = sub.add_parser("finetune", help="Stage two: conformal fine-tuning")
    _add_model_inputs(p)
    _add_common(p)

    p = sub.add_parser("calibrate", help="Split-conformal audit of a frozen model")
    _add_model_inputs(p)
    _add_common(p)

    p = sub.add_parser("evaluate", help="Leave-one-out ranking metrics and conformal diagnostics")
    _add_model_inputs(p)
    p.add_argument("--show-user", type=int, help="Print top items with confidence for one user")
    p.add_argument("--top-n", type=int, default=5)
    _add_common(p)

    p = sub.add_parser("ablate", help="Fine-tune and evaluate every loss configuration")
    _add_model_inputs(p)
    _add_common(p)

    p = sub.add_parser("sensitivity", help="Fine-tune and evaluate over a grid of one config key")
    _add_model_inputs(p)
    p.add_argument("--grid", required=True, metavar="KEY=V1,V2,...")
    _add_common(p)

    p = sub.add_parser("runs", help="List recent runs from the run ledger")
    p.add_argument("--limit", type=int, default=20)
    p.add_argument("--verb", dest="filter_verb", choices=list(COMMANDS), help="Only runs of this verb")
    p.add_argument("--status", choices=["started", "succeeded", "failed"])
    return parser


def parse_command(argv: Optional[Sequence[str]] = None) -> Command:
    ns = vars(build_parser().parse_args(argv))
    args = {k: (str(v) if isinstance(v, Path) else v) for k, v in ns.items() if k not in _RUN_ONLY_ARGS}
    return Command(
        verb=ns["verb"],
        config_path=ns.get("config"),
        overrides=ns.get("overrides") or [],
        output_dir=ns.get("output_dir"),
        from_manifest=ns.get("from_manifest"),
        args=args,
    )


def main(argv: Optional[Sequence[str]] = None) -> int:
    setup_logging()
    return run(parse_command(argv))


if __name__ == "__main__":
    sys.exit(main())
