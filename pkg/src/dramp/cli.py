"""Command-line front end.

Commands: ``run`` (execute a simulation from a config file and/or flags),
``refine`` (re-refine an existing chain file), ``predict`` (scaling forecast
from a chain file), ``export-plotdata`` (tidy CSV extracts of a finished
run). Exit codes: 0 success, 1 configuration or input error, 2 runtime
error, 3 refusal to overwrite a completed run.

Every specification field is exposed as a ``--<key>`` flag with the same
name as its config-file key; flags override file values.
"""

from __future__ import annotations

import argparse
import sys
from typing import List, Optional

import numpy as np

from .config import FIELD_DESCRIPTIONS, build_spec, parse_config_file
from .driver import replay_adaptation_covariances, run_simulation
from .errors import RefusedOverwrite, SamplerError, SpecMismatch
from .parallel import (
    PREDICTION_GRID,
    ContributionTally,
    fit_geometric,
    predict_speedup,
    recommend_workers,
)
from .persist import read_chain, read_report_echo, write_sample
from .refine import refine_two_phase

__all__ = ["main", "build_parser"]

FIGURES = ("adaptation", "covariance", "contributions", "scaling")

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_RUNTIME = 2
EXIT_REFUSED = 3


def _fmt(value: float) -> str:
    return "%.17g" % value


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dramp",
        description="Adaptive MCMC sampler with delayed rejection, compact "
        "weighted chains, sample refinement and parallel protocols.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser(
        "run",
        help="run a simulation from a config file and/or flags",
        description="Run a simulation. Any --<key> flag overrides the same "
        "key in the config file. An interrupted run under the same output "
        "prefix is resumed automatically.",
    )
    run.add_argument("--config", help="flat key=value config file")
    for key, description in FIELD_DESCRIPTIONS.items():
        if key == "deterministic-test-mode":
            run.add_argument(
                "--%s" % key,
                action="store_const",
                const="true",
                default=None,
                help=description,
            )
        else:
            run.add_argument("--%s" % key, default=None, help=description)
    run.add_argument(
        "--force-overwrite",
        action="store_true",
        help="replace any existing run under the output prefix",
    )

    refine = sub.add_parser(
        "refine",
        help="refine an existing chain file into a decorrelated sample",
    )
    refine.add_argument("chain", help="chain file (ASCII or binary)")
    refine.add_argument("sample_out", help="refined sample output path")
    refine.add_argument(
        "--delimiter", default=",", help="column delimiter of ASCII inputs"
    )

    predict = sub.add_parser(
        "predict",
        help="forecast fork-join scaling from a chain file",
    )
    predict.add_argument("chain", help="chain file (ASCII or binary)")
    predict.add_argument(
        "--max-workers",
        type=int,
        default=4096,
        help="largest worker count in the printed table (powers of two)",
    )
    predict.add_argument(
        "--delimiter", default=",", help="column delimiter of ASCII inputs"
    )

    export = sub.add_parser(
        "export-plotdata",
        help="export tidy CSV data from a completed run",
    )
    export.add_argument("prefix", help="output prefix of the completed run")
    export.add_argument("figure", choices=FIGURES, help="which extract")
    export.add_argument("out_csv", help="CSV output path")
    return parser


def _collect_run_values(args) -> dict:
    values = {}
    if args.config:
        values.update(parse_config_file(args.config))
    for key in FIELD_DESCRIPTIONS:
        flag_value = getattr(args, key.replace("-", "_"))
        if flag_value is not None:
            values[key] = flag_value
    return values


def cmd_run(args) -> int:
    try:
        spec = build_spec(_collect_run_values(args))
    except (ValueError, OSError) as exc:
        print("configuration error: %s" % exc, file=sys.stderr)
        return EXIT_CONFIG
    try:
        result = run_simulation(spec, force_overwrite=args.force_overwrite)
    except RefusedOverwrite as exc:
        print("refused: %s" % exc, file=sys.stderr)
        return EXIT_REFUSED
    except SpecMismatch as exc:
        print("configuration error: %s" % exc, file=sys.stderr)
        return EXIT_CONFIG
    except (SamplerError, OSError) as exc:
        print("runtime error: %s" % exc, file=sys.stderr)
        return EXIT_RUNTIME
    summary = result.summaries[0]
    print("%s run under prefix %r" % ("resumed" if result.restarted else
                                      "completed", spec.output.prefix))
    print("unique states: %d, verbose length: %d, acceptance rate: %s" % (
        summary.chain.n_rows,
        summary.chain.verbose_length,
        _fmt(summary.mean_acceptance_rate),
    ))
    if result.refined is not None:
        print("refined sample size: %d" % result.refined.points.shape[0])
    for path in spec.output.all_paths():
        print("wrote %s" % path)
    return EXIT_OK


def cmd_refine(args) -> int:
    try:
        chain = read_chain(args.chain, args.delimiter)
        refined = refine_two_phase(chain)
        write_sample(args.sample_out, refined, args.delimiter)
    except (SamplerError, OSError, ValueError) as exc:
        print("%s: %s" % (type(exc).__name__, exc), file=sys.stderr)
        return EXIT_CONFIG
    print("source verbose length: %d" % refined.source_verbose_length)
    for i, rnd in enumerate(refined.rounds):
        print(
            "round %d: phase %d, aggregate IAC %s, kept %d"
            % (i + 1, rnd.phase, _fmt(rnd.iac_aggregate), rnd.kept_count)
        )
    print("final kept count: %d" % refined.points.shape[0])
    print("wrote %s" % args.sample_out)
    return EXIT_OK


def _forkjoin_tally(chain) -> Optional[ContributionTally]:
    """Contribution tally if the chain came from a fork-join run.

    The rank column of a fork-join chain fluctuates with each round's winner;
    serial and independent-chain files carry constant or block-sorted ids.
    The seed row belongs to no worker and is excluded.
    """
    pids = chain.process_ids[1:]
    if pids.size == 0 or np.all(pids[1:] >= pids[:-1]):
        return None
    worker_count = int(pids.max())
    counts = np.bincount(pids, minlength=worker_count + 1)[1:]
    return ContributionTally(worker_count=worker_count, counts=tuple(counts))


def cmd_predict(args) -> int:
    try:
        chain = read_chain(args.chain, args.delimiter)
    except (SamplerError, OSError) as exc:
        print("%s: %s" % (type(exc).__name__, exc), file=sys.stderr)
        return EXIT_CONFIG
    if chain.n_rows < 2:
        print(
            "missing statistics: chain records no accepted moves",
            file=sys.stderr,
        )
        return EXIT_CONFIG
    if args.max_workers < 1:
        print("max-workers must be >= 1", file=sys.stderr)
        return EXIT_CONFIG
    tally = _forkjoin_tally(chain)
    if tally is not None:
        p_hat = fit_geometric(tally)
        print("source: worker contribution tally (%d workers)" % tally.worker_count)
    else:
        p_hat = chain.n_rows / chain.verbose_length
        print("source: measured acceptance rate")
    print("p-hat: %s" % _fmt(p_hat))
    print("P,PredictedSpeedup")
    workers = 1
    while workers <= args.max_workers:
        print("%d,%s" % (workers, _fmt(predict_speedup(p_hat, workers))))
        workers *= 2
    print("recommended workers: %d" % recommend_workers(p_hat))
    return EXIT_OK


def _load_run(prefix: str):
    echo = dict(read_report_echo("%s_report.txt" % prefix))
    if not echo:
        raise ValueError(
            "report for prefix %r is missing its specification echo" % prefix
        )
    spec = build_spec(echo)
    ext = "txt" if spec.output.chain_format == "ascii" else "bin"
    chain = read_chain(
        "%s_chain.%s" % (prefix, ext), spec.output.delimiter
    )
    return spec, chain


def cmd_export_plotdata(args) -> int:
    try:
        spec, chain = _load_run(args.prefix)
        lines: List[str] = []
        if args.figure == "adaptation":
            measures = chain.adaptation_measures
            starts = chain.verbose_starts
            hits = np.nonzero(measures > 0.0)[0]
            if hits.size == 0:
                raise ValueError("run recorded no adaptation events")
            lines.append("VerboseIndex,Measure")
            for i in hits:
                lines.append("%d,%s" % (int(starts[i]), _fmt(float(measures[i]))))
        elif args.figure == "covariance":
            captured = replay_adaptation_covariances(spec)
            if not captured:
                raise ValueError("run recorded no adaptation events")
            lines.append("AdaptationIndex,Row,Col,Value")
            for index, (_, matrix) in enumerate(captured, start=1):
                d = matrix.shape[0]
                for i in range(d):
                    for j in range(d):
                        lines.append(
                            "%d,%d,%d,%s"
                            % (index, i + 1, j + 1, _fmt(float(matrix[i, j])))
                        )
        elif args.figure == "contributions":
            if spec.mode != "forkjoin":
                raise ValueError(
                    "contribution data exists only for forkjoin runs"
                )
            pids = chain.process_ids[1:]
            counts = np.bincount(pids, minlength=spec.worker_count + 1)[1:]
            tally = ContributionTally(
                worker_count=spec.worker_count, counts=tuple(int(c) for c in counts)
            )
            p_hat = fit_geometric(tally)
            lines.append("Rank,Count,FittedProbability")
            for rank, count in enumerate(tally.counts, start=1):
                lines.append("%d,%d,%s" % (rank, count, _fmt(p_hat)))
        else:  # scaling
            tally = _forkjoin_tally(chain)
            if tally is not None:
                p_hat = fit_geometric(tally)
                rounds = chain.verbose_length - 1
                observed = (
                    ((chain.n_rows - 1) / rounds) / p_hat if rounds > 0 else None
                )
            else:
                p_hat = chain.n_rows / chain.verbose_length
                observed = None
            lines.append("P,PredictedSpeedup,ObservedSpeedup")
            for workers in PREDICTION_GRID:
                obs = ""
                if observed is not None and workers == spec.worker_count:
                    obs = _fmt(observed)
                lines.append(
                    "%d,%s,%s" % (workers, _fmt(predict_speedup(p_hat, workers)), obs)
                )
        with open(args.out_csv, "wb") as fh:
            fh.write(("\n".join(lines) + "\n").encode("utf-8"))
    except (SamplerError, OSError, ValueError) as exc:
        print("%s: %s" % (type(exc).__name__, exc), file=sys.stderr)
        return EXIT_CONFIG
    print("wrote %s" % args.out_csv)
    return EXIT_OK


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command == "run":
        return cmd_run(args)
    if args.command == "refine":
        return cmd_refine(args)
    if args.command == "predict":
        return cmd_predict(args)
    return cmd_export_plotdata(args)


if __name__ == "__main__":
    sys.exit(main())
