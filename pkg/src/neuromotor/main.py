#!/usr/bin/env python
import argparse
import logging
import sys
from pathlib import Path
from typing import Optional

from dotenv import load_dotenv

from neuromotor.errors import NeuromotorError
from neuromotor.logs import configure_logging
from neuromotor.pipeline import EXIT_ANALYSIS, EXIT_INPUT, EXIT_OK, run_pipeline
from neuromotor.settings import STAGE_ORDER, load_config
from neuromotor.synth import SCENARIOS, gen_cohort, scenario_spec

logger = logging.getLogger("neuromotor.main")


def _int_list(text: str) -> list[int]:
    """Parse '1-8' or '2,4,6'."""
    values = []
    for part in text.split(","):
        part = part.strip()
        if "-" in part:
            low, high = part.split("-", 1)
            values.extend(range(int(low), int(high) + 1))
        elif part:
            values.append(int(part))
    if not values:
        raise argparse.ArgumentTypeError(f"no integers in {text!r}")
    return values


def _stage_list(text: str) -> list[str]:
    stages = [part.strip() for part in text.split(",") if part.strip()]
    unknown = [s for s in stages if s not in STAGE_ORDER]
    if unknown:
        raise argparse.ArgumentTypeError(f"unknown stages {unknown}; choose from {', '.join(STAGE_ORDER)}")
    return stages


def _common_flags() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(add_help=False)
    parser.add_argument("--manifest", type=Path, required=True, help="dataset manifest (JSON)")
    parser.add_argument("--out", type=Path, required=True, help="output directory")
    parser.add_argument("--seed", type=int, help="global seed")
    parser.add_argument("--workers", type=int, help="worker threads (default: physical cores)")
    parser.add_argument("--config", type=Path, help="YAML file merged over the packaged defaults")
    parser.add_argument("--quiet", action="store_true", help="warnings and errors only, no progress bars")
    parser.add_argument("--verbose", action="store_true", help="debug logging")
    return parser


def _add_dsp_flags(parser: argparse.ArgumentParser) -> None:
    group = parser.add_argument_group("EMG preprocessing")
    group.add_argument("--low-hz", type=float)
    group.add_argument("--high-hz", type=float)
    group.add_argument("--order", type=int)
    group.add_argument("--rms-window", type=int, help="RMS window in samples")
    group.add_argument("--causal", action="store_true", default=None, help="single-pass filter")


def _add_sync_flags(parser: argparse.ArgumentParser) -> None:
    group = parser.add_argument_group("synchronization")
    group.add_argument("--epsilon-frac", type=float, help="subtask dead band, fraction of peak target speed")
    group.add_argument("--align-threshold-ms", type=float)


def _add_metrics_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--rmse-mode", choices=["stacked", "norm-diff"])


def _add_synergy_flags(parser: argparse.ArgumentParser, prefix: str = "") -> None:
    group = parser.add_argument_group("synergy extraction")
    group.add_argument("--max-k", type=int)
    group.add_argument(f"--{prefix}restarts", dest="synergy_restarts", type=int, help="NMF restarts per rank")
    group.add_argument("--vaf-threshold", type=float)
    group.add_argument("--vaf-increment", type=float)
    group.add_argument("--procedure", type=int, action="append", choices=[1, 2, 3], dest="procedures")
    group.add_argument("--clusters", type=_int_list, help="cluster counts, e.g. 1-8")
    group.add_argument("--top-n", type=int, help="synergies per decomposition for procedure 2")
    group.add_argument("--segment-mode", choices=["direction", "repetition"])


def _add_hmm_flags(parser: argparse.ArgumentParser, prefix: str = "") -> None:
    group = parser.add_argument_group("HMM")
    group.add_argument("--states", type=int)
    group.add_argument(f"--{prefix}restarts", dest="hmm_restarts", type=int)
    group.add_argument(f"--{prefix}max-iter", dest="hmm_max_iter", type=int)
    group.add_argument(f"--{prefix}tol", dest="hmm_tol", type=float)
    group.add_argument("--decimate", type=int)
    group.add_argument("--covariance", choices=["diag", "full"])
    group.add_argument("--variance-floor", type=float)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="neuromotor", description="Rehabilitation-robot trial analysis.")
    commands = parser.add_subparsers(dest="command", required=True)
    common = _common_flags()

    commands.add_parser("validate", parents=[common], help="check a dataset against the canonical layout")
    _add_dsp_flags(commands.add_parser("dsp", parents=[common], help="EMG envelopes"))
    _add_sync_flags(commands.add_parser("sync", parents=[common], help="timeline alignment and offsets"))
    metrics = commands.add_parser("metrics", parents=[common], help="force metrics")
    _add_sync_flags(metrics)
    _add_metrics_flags(metrics)
    _add_synergy_flags(commands.add_parser("synergy", parents=[common], help="muscle synergies"))
    hmm = commands.add_parser("hmm", parents=[common], help="HMM subtask decoding")
    _add_hmm_flags(hmm)
    hmm.add_argument("--epsilon-frac", type=float)
    commands.add_parser("stats", parents=[common], help="cohort comparison")
    commands.add_parser("plot-data", parents=[common], help="plot-ready tables")

    analyze = commands.add_parser("analyze", parents=[common], help="run several stages")
    analyze.add_argument("--stages", type=_stage_list, help=f"comma list from {','.join(STAGE_ORDER)}")
    _add_dsp_flags(analyze)
    _add_sync_flags(analyze)
    _add_metrics_flags(analyze)
    _add_synergy_flags(analyze, prefix="synergy-")
    _add_hmm_flags(analyze, prefix="hmm-")

    synth = commands.add_parser("synth", help="write a synthetic dataset")
    synth.add_argument("--scenario", choices=sorted(SCENARIOS), required=True)
    synth.add_argument("--seed", type=int, default=0)
    synth.add_argument("--out", type=Path, required=True)
    synth.add_argument("--quiet", action="store_true")
    synth.add_argument("--verbose", action="store_true")
    return parser


def _prune(value):
    if isinstance(value, dict):
        pruned = {key: _prune(item) for key, item in value.items()}
        return {key: item for key, item in pruned.items() if item is not None and item != {}}
    return value


def overrides_from_args(args: argparse.Namespace) -> dict:
    """Translate parsed flags into the nested shape of the run configuration."""
    get = lambda name: getattr(args, name, None)  # noqa: E731
    stages = [args.command] if args.command != "analyze" else get("stages")
    return _prune({
        "manifest": get("manifest"),
        "out": get("out"),
        "stages": stages,
        "seed": get("seed"),
        "workers": get("workers"),
        "filter": {"low_hz": get("low_hz"), "high_hz": get("high_hz"), "order": get("order"), "causal": get("causal")},
        "envelope": {"rms_window": get("rms_window")},
        "sync": {"epsilon_frac": get("epsilon_frac"), "align_threshold_ms": get("align_threshold_ms")},
        "metrics": {"rmse_mode": get("rmse_mode")},
        "synergy": {
            "max_k": get("max_k"),
            "restarts": get("synergy_restarts"),
            "vaf_threshold": get("vaf_threshold"),
            "vaf_increment": get("vaf_increment"),
            "procedures": get("procedures"),
            "clusters": get("clusters"),
            "top_n": get("top_n"),
            "segment_mode": get("segment_mode"),
        },
        "hmm": {
            "states": get("states"),
            "restarts": get("hmm_restarts"),
            "max_iter": get("hmm_max_iter"),
            "tol": get("hmm_tol"),
            "decimate": get("decimate"),
            "covariance": get("covariance"),
            "variance_floor": get("variance_floor"),
        },
    })


def _synth(args: argparse.Namespace) -> int:
    try:
        gen_cohort(scenario_spec(args.scenario, args.seed), args.out, quiet=args.quiet)
    except NeuromotorError as exc:
        logger.error("%s", exc)
        return EXIT_ANALYSIS
    except OSError as exc:
        logger.error("cannot write %s: %s", args.out, exc)
        return EXIT_INPUT
    return EXIT_OK


def main(argv: Optional[list[str]] = None) -> int:
    load_dotenv(override=True)
    args = build_parser().parse_args(argv)
    configure_logging(verbose=args.verbose, quiet=args.quiet)
    if args.command == "synth":
        return _synth(args)
    try:
        config = load_config(overrides_from_args(args), config_file=args.config)
    except NeuromotorError as exc:
        logger.error("%s", exc)
        return EXIT_INPUT
    return run_pipeline(config, quiet=args.quiet)


def run():
    """
    Console entry point.
    """
    sys.exit(main())


if __name__ == "__main__":
    run()
