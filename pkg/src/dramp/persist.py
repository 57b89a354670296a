"""Output file suite: chain, sample, report, progress, restart.

Chain files come in an ASCII and a binary codec that decode to identical
values; reals are rendered with 17 significant digits in ASCII, which
round-trips IEEE doubles exactly. All text files are written in binary mode
with LF line endings so that byte-identical reruns stay byte-identical across
platforms.

The restart file is a checksummed binary envelope around an exact state
payload (floats as hex strings), written atomically; a crash can only ever
leave the previous snapshot in place, never a corrupt one.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from dataclasses import dataclass
from enum import Enum
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .chain import ChainRow, CompactChain
from .errors import CorruptRestart, IoFailure
from .refine import RefinedSample

__all__ = [
    "RunState",
    "OutputSuite",
    "ChainWriter",
    "read_chain",
    "write_sample",
    "ProgressWriter",
    "write_report",
    "read_report_echo",
    "write_snapshot",
    "read_snapshot",
    "detect_incomplete",
    "CHAIN_MAGIC",
    "RESTART_MAGIC",
    "REPORT_TERMINATOR",
    "ECHO_BEGIN",
    "ECHO_END",
    "FORMAT_COMMENT",
]

CHAIN_MAGIC = b"DRMPCHN1"
RESTART_MAGIC = b"DRMPRST1"
FORMAT_COMMENT = "# format: v1"
REPORT_TERMINATOR = "# end of report: run complete"
ECHO_BEGIN = "# --- begin specification echo ---"
ECHO_END = "# --- end specification echo ---"

FIXED_COLUMNS = (
    "ProcessID",
    "DelayedRejectionStage",
    "MeanAcceptanceRate",
    "AdaptationMeasure",
    "BurninLocation",
    "SampleWeight",
    "SampleLogFunc",
)


class RunState(Enum):
    FRESH = "fresh"
    RESTARTABLE = "restartable"
    COMPLETE = "complete"


@dataclass(frozen=True)
class OutputSuite:
    """Filesystem layout of one simulation's outputs."""

    prefix: str
    chain_format: str = "ascii"
    delimiter: str = ","

    def __post_init__(self):
        if not self.prefix:
            raise ValueError("output prefix must be non-empty")
        if self.chain_format not in ("ascii", "binary"):
            raise ValueError(
                "chain_format must be 'ascii' or 'binary', got %r"
                % self.chain_format
            )
        if len(self.delimiter) != 1:
            raise ValueError("delimiter must be a single character")

    @property
    def chain_path(self) -> str:
        ext = "txt" if self.chain_format == "ascii" else "bin"
        return "%s_chain.%s" % (self.prefix, ext)

    @property
    def sample_path(self) -> str:
        return "%s_sample.txt" % self.prefix

    @property
    def report_path(self) -> str:
        return "%s_report.txt" % self.prefix

    @property
    def progress_path(self) -> str:
        return "%s_progress.txt" % self.prefix

    @property
    def restart_path(self) -> str:
        return "%s_restart.bin" % self.prefix

    def all_paths(self) -> Tuple[str, ...]:
        return (
            self.chain_path,
            self.sample_path,
            self.report_path,
            self.progress_path,
            self.restart_path,
        )


def _fmt(value: float) -> str:
    # 17 significant digits: lossless for IEEE doubles
    return "%.17g" % value


def _record_struct(dimension: int) -> struct.Struct:
    return struct.Struct("<IIddQQd" + "d" * dimension)


class ChainWriter:
    """Streaming chain-file writer for either codec.

    Binary mode underneath in both cases so tell() is a true byte offset;
    restart truncation depends on it.
    """

    def __init__(self, suite: OutputSuite, variable_names: Sequence[str],
                 append: bool = False):
        self.suite = suite
        self.variable_names = tuple(variable_names)
        self._struct = _record_struct(len(self.variable_names))
        self.rows_written = 0
        try:
            self._fh = open(suite.chain_path, "ab" if append else "wb")
        except OSError as exc:
            raise IoFailure("cannot open chain file: %s" % exc) from exc
        if not append:
            self._write_header()

    def _write_header(self) -> None:
        if self.suite.chain_format == "ascii":
            header = self.suite.delimiter.join(
                FIXED_COLUMNS + self.variable_names
            )
            self._fh.write(
                (FORMAT_COMMENT + "\n" + header + "\n").encode("utf-8")
            )
        else:
            names = "\x00".join(self.variable_names).encode("utf-8")
            self._fh.write(CHAIN_MAGIC)
            self._fh.write(
                struct.pack("<III", 1, len(self.variable_names), len(names))
            )
            self._fh.write(names)

    def write_row(self, row: ChainRow) -> None:
        try:
            if self.suite.chain_format == "ascii":
                fields = [
                    str(row.process_id),
                    str(row.dr_stage),
                    _fmt(row.mean_acceptance_rate),
                    _fmt(row.adaptation_measure),
                    str(row.burnin_location),
                    str(row.weight),
                    _fmt(row.log_func),
                ] + [_fmt(v) for v in row.state]
                self._fh.write(
                    (self.suite.delimiter.join(fields) + "\n").encode("utf-8")
                )
            else:
                self._fh.write(
                    self._struct.pack(
                        row.process_id,
                        row.dr_stage,
                        row.mean_acceptance_rate,
                        row.adaptation_measure,
                        row.burnin_location,
                        row.weight,
                        row.log_func,
                        *row.state,
                    )
                )
        except OSError as exc:
            raise IoFailure("chain write failed: %s" % exc) from exc
        self.rows_written += 1

    def flush(self) -> None:
        self._fh.flush()

    def tell(self) -> int:
        return self._fh.tell()

    def close(self) -> None:
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
        return False


def _read_chain_ascii(raw: bytes, delimiter: str) -> CompactChain:
    try:
        text = raw.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise IoFailure("chain file is not text: %s" % exc) from exc
    lines = text.split("\n")
    body = [ln for ln in lines if ln and not ln.startswith("#")]
    if not body:
        raise IoFailure("chain file has no header line")
    columns = body[0].split(delimiter)
    if tuple(columns[: len(FIXED_COLUMNS)]) != FIXED_COLUMNS:
        raise IoFailure(
            "unexpected chain header %r" % body[0][:120]
        )
    names = columns[len(FIXED_COLUMNS):]
    if not names:
        raise IoFailure("chain header declares no variables")
    chain = CompactChain(len(names), variable_names=names)
    n_fixed = len(FIXED_COLUMNS)
    for ln in body[1:]:
        parts = ln.split(delimiter)
        if len(parts) != n_fixed + len(names):
            raise IoFailure("malformed chain row %r" % ln[:120])
        chain.append_row(
            ChainRow(
                process_id=int(parts[0]),
                dr_stage=int(parts[1]),
                mean_acceptance_rate=float(parts[2]),
                adaptation_measure=float(parts[3]),
                burnin_location=int(parts[4]),
                weight=int(parts[5]),
                log_func=float(parts[6]),
                state=np.array([float(v) for v in parts[7:]], dtype=float),
            )
        )
    return chain


def _read_chain_binary(raw: bytes) -> CompactChain:
    head = struct.calcsize("<III")
    if len(raw) < len(CHAIN_MAGIC) + head:
        raise IoFailure("binary chain file truncated before header")
    offset = len(CHAIN_MAGIC)
    version, dimension, name_len = struct.unpack_from("<III", raw, offset)
    if version != 1:
        raise IoFailure("unsupported binary chain version %d" % version)
    offset += head
    if len(raw) < offset + name_len:
        raise IoFailure("binary chain file truncated in name block")
    names = raw[offset: offset + name_len].decode("utf-8").split("\x00")
    if len(names) != dimension:
        raise IoFailure(
            "name block holds %d names for dimension %d" % (len(names), dimension)
        )
    offset += name_len
    rec = _record_struct(dimension)
    n_body = len(raw) - offset
    if n_body % rec.size != 0:
        raise IoFailure(
            "binary chain body length %d is not a multiple of record size %d"
            % (n_body, rec.size)
        )
    chain = CompactChain(dimension, variable_names=names)
    for i in range(n_body // rec.size):
        values = rec.unpack_from(raw, offset + i * rec.size)
        chain.append_row(
            ChainRow(
                process_id=int(values[0]),
                dr_stage=int(values[1]),
                mean_acceptance_rate=values[2],
                adaptation_measure=values[3],
                burnin_location=int(values[4]),
                weight=int(values[5]),
                log_func=values[6],
                state=np.array(values[7:], dtype=float),
            )
        )
    return chain


def read_chain(path: str, delimiter: str = ",") -> CompactChain:
    """Load a chain file in either codec (sniffed by magic bytes)."""
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except OSError as exc:
        raise IoFailure("cannot read chain file: %s" % exc) from exc
    if raw.startswith(CHAIN_MAGIC):
        return _read_chain_binary(raw)
    return _read_chain_ascii(raw, delimiter)


def write_sample(path: str, refined: RefinedSample, delimiter: str = ",") -> None:
    names = tuple("Var%d" % (i + 1) for i in range(refined.dimension))
    try:
        with open(path, "wb") as fh:
            fh.write((FORMAT_COMMENT + "\n").encode("utf-8"))
            fh.write(
                (delimiter.join(("SampleLogFunc",) + names) + "\n").encode("utf-8")
            )
            for logf, point in zip(refined.log_funcs, refined.points):
                fields = [_fmt(float(logf))] + [_fmt(float(v)) for v in point]
                fh.write((delimiter.join(fields) + "\n").encode("utf-8"))
    except OSError as exc:
        raise IoFailure("cannot write sample file: %s" % exc) from exc


class ProgressWriter:
    """Appends one CSV line per progress tick (every 1000 verbose states)."""

    HEADER = (
        "VerboseLength,CompactLength,MeanAcceptanceRate,"
        "LastAdaptationMeasure,ElapsedSeconds"
    )

    def __init__(self, path: str, append: bool = False):
        try:
            self._fh = open(path, "ab" if append else "wb")
        except OSError as exc:
            raise IoFailure("cannot open progress file: %s" % exc) from exc
        if not append:
            self._fh.write(
                (FORMAT_COMMENT + "\n" + self.HEADER + "\n").encode("utf-8")
            )

    def write_tick(self, tick: dict, elapsed_seconds: Optional[float]) -> None:
        elapsed = "" if elapsed_seconds is None else "%.3f" % elapsed_seconds
        line = "%d,%d,%s,%s,%s\n" % (
            tick["verbose_length"],
            tick["compact_length"],
            _fmt(tick["mean_acceptance_rate"]),
            _fmt(tick["last_adaptation_measure"]),
            elapsed,
        )
        try:
            self._fh.write(line.encode("utf-8"))
            self._fh.flush()
        except OSError as exc:
            raise IoFailure("progress write failed: %s" % exc) from exc

    def tell(self) -> int:
        return self._fh.tell()

    def close(self) -> None:
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
        return False


def _windowed_means(values: np.ndarray, n_windows: int = 10) -> List[float]:
    if values.size == 0:
        return []
    n_windows = min(n_windows, values.size)
    splits = np.array_split(values, n_windows)
    return [float(np.mean(s)) for s in splits]


def write_report(
    suite: OutputSuite,
    echo: Sequence[Tuple[str, str, str]],
    summary,
    refinement: Optional[RefinedSample],
    speedup,
    mode: str,
    check=None,
    tally=None,
    complete: bool = True,
) -> None:
    """Write the human-readable report.

    ``echo`` carries (key, value, description) triples rendered between fixed
    sentinel lines in the flat key=value config format, so a report can be
    re-parsed to reproduce the exact simulation that produced it. ``complete``
    controls the terminator line that marks a finished run.
    """
    bar = "=" * 72
    lines: List[str] = [FORMAT_COMMENT, bar, "ADAPTIVE MCMC SIMULATION REPORT", bar, ""]
    lines.append("SPECIFICATION")
    lines.append("")
    lines.append(ECHO_BEGIN)
    for key, value, description in echo:
        lines.append("# %s" % description)
        lines.append("%s = %s" % (key, value))
    lines.append(ECHO_END)
    lines.append("")

    chain = summary.chain
    lines.append("ACCEPTANCE STATISTICS")
    lines.append("")
    lines.append("  unique states            : %d" % chain.n_rows)
    lines.append("  verbose (Markov) length  : %d" % chain.verbose_length)
    lines.append(
        "  mean acceptance rate     : %s" % _fmt(summary.mean_acceptance_rate)
    )
    lines.append(
        "  compression factor       : %s"
        % _fmt(chain.verbose_length / chain.n_rows)
    )
    for stage, (att, acc) in enumerate(
        zip(summary.stage_attempts, summary.stage_accepts)
    ):
        rate = acc / att if att else 0.0
        lines.append(
            "  stage %d: attempts %d, accepts %d, rate %s"
            % (stage, att, acc, _fmt(rate))
        )
    lines.append("")

    lines.append("ADAPTATION")
    lines.append("")
    lines.append("  adaptations performed    : %d" % summary.adaptation_count)
    measures = chain.adaptation_measures
    nonzero = measures[measures > 0.0]
    if nonzero.size:
        lines.append("  first measure            : %s" % _fmt(float(nonzero[0])))
        lines.append("  last measure             : %s" % _fmt(float(nonzero[-1])))
        means = _windowed_means(nonzero)
        lines.append(
            "  windowed means           : %s"
            % ", ".join(_fmt(v) for v in means)
        )
    lines.append("")

    lines.append("BURN-IN")
    lines.append("")
    lines.append("  verbose burn-in location : %d" % summary.burnin_location)
    lines.append("")

    lines.append("REFINEMENT")
    lines.append("")
    if refinement is None:
        lines.append("  not performed")
    else:
        lines.append(
            "  source verbose length    : %d" % refinement.source_verbose_length
        )
        lines.append("  refined sample size      : %d" % refinement.points.shape[0])
        for i, rnd in enumerate(refinement.rounds):
            lines.append(
                "  round %d: phase %d, aggregate IAC %s, kept %d"
                % (i + 1, rnd.phase, _fmt(rnd.iac_aggregate), rnd.kept_count)
            )
    lines.append("")

    if check is not None:
        lines.append("CONVERGENCE CHECK")
        lines.append("")
        lines.append(
            "  pairwise KS tests at alpha %s (Bonferroni %s)"
            % (_fmt(check.alpha), _fmt(check.corrected_alpha))
        )
        for (i, j, dim, stat, p) in check.entries:
            lines.append(
                "  chains %d vs %d, dim %d: D %s, p %s"
                % (i, j, dim, _fmt(stat), _fmt(p))
            )
        lines.append(
            "  verdict                  : %s"
            % ("no evidence of non-convergence" if check.all_pass else "FAILED")
        )
        lines.append("")

    if tally is not None:
        lines.append("WORKER CONTRIBUTIONS")
        lines.append("")
        for rank, count in enumerate(tally.counts, start=1):
            lines.append("  rank %4d: %d" % (rank, count))
        lines.append("")

    lines.append("SPEEDUP")
    lines.append("")
    lines.append("  mode                     : %s" % mode)
    lines.append(
        "  fitted acceptance prob   : %s" % _fmt(speedup.fitted_acceptance_prob)
    )
    lines.append("  predicted speedup table  :")
    for workers, value in speedup.predicted_curve:
        lines.append("    P %6d -> %s" % (workers, _fmt(value)))
    lines.append(
        "  recommended worker count : %d" % speedup.recommended_workers
    )
    if speedup.observed_speedup is not None:
        lines.append(
            "  observed speedup         : %s" % _fmt(speedup.observed_speedup)
        )
    lines.append("")
    lines.append(bar)
    if complete:
        lines.append(REPORT_TERMINATOR)
    try:
        with open(suite.report_path, "wb") as fh:
            fh.write(("\n".join(lines) + "\n").encode("utf-8"))
    except OSError as exc:
        raise IoFailure("cannot write report: %s" % exc) from exc


def read_report_echo(path: str) -> List[Tuple[str, str]]:
    """Recover the key=value specification echo from a report file."""
    try:
        with open(path, "rb") as fh:
            text = fh.read().decode("utf-8")
    except OSError as exc:
        raise IoFailure("cannot read report: %s" % exc) from exc
    items: List[Tuple[str, str]] = []
    inside = False
    for line in text.split("\n"):
        if line == ECHO_BEGIN:
            inside = True
            continue
        if line == ECHO_END:
            inside = False
            continue
        if inside and line and not line.startswith("#"):
            key, _, value = line.partition("=")
            items.append((key.strip(), value.strip()))
    return items


# --- exact state transport -------------------------------------------------

def _encode_exact(obj):
    if isinstance(obj, bool):
        return obj
    if isinstance(obj, (int, str)) or obj is None:
        return obj
    if isinstance(obj, float):
        return {"__float__": obj.hex()}
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.floating):
        return {"__float__": float(obj).hex()}
    if isinstance(obj, np.ndarray):
        return {
            "__array__": list(obj.shape),
            "data": [float(v).hex() for v in obj.ravel().tolist()],
        }
    if isinstance(obj, dict):
        return {str(k): _encode_exact(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_encode_exact(v) for v in obj]
    raise TypeError("cannot snapshot value of type %s" % type(obj).__name__)


def _decode_exact(obj):
    if isinstance(obj, dict):
        if "__float__" in obj and len(obj) == 1:
            return float.fromhex(obj["__float__"])
        if "__array__" in obj:
            flat = np.array(
                [float.fromhex(v) for v in obj["data"]], dtype=float
            )
            return flat.reshape(obj["__array__"])
        return {k: _decode_exact(v) for k, v in obj.items()}
    if isinstance(obj, list):
        return [_decode_exact(v) for v in obj]
    return obj


def write_snapshot(path: str, payload: dict) -> None:
    """Atomically persist a restart snapshot (write-new then rename)."""
    body = json.dumps(_encode_exact(payload), sort_keys=True).encode("utf-8")
    blob = (
        RESTART_MAGIC
        + struct.pack("<II", 1, len(body))
        + body
        + hashlib.sha256(body).digest()
    )
    tmp = path + ".tmp"
    try:
        with open(tmp, "wb") as fh:
            fh.write(blob)
        os.replace(tmp, path)
    except OSError as exc:
        raise IoFailure("cannot write restart snapshot: %s" % exc) from exc


def read_snapshot(path: str) -> dict:
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except OSError as exc:
        raise CorruptRestart("cannot read restart snapshot: %s" % exc) from exc
    head = len(RESTART_MAGIC) + struct.calcsize("<II")
    if len(raw) < head or not raw.startswith(RESTART_MAGIC):
        raise CorruptRestart("restart file lacks the snapshot magic")
    version, body_len = struct.unpack_from("<II", raw, len(RESTART_MAGIC))
    if version != 1:
        raise CorruptRestart("unsupported snapshot version %d" % version)
    if len(raw) != head + body_len + 32:
        raise CorruptRestart("snapshot length mismatch")
    body = raw[head: head + body_len]
    digest = raw[head + body_len:]
    if hashlib.sha256(body).digest() != digest:
        raise CorruptRestart("snapshot checksum mismatch")
    return _decode_exact(json.loads(body.decode("utf-8")))


def detect_incomplete(prefix: str) -> RunState:
    """Classify what a previous run left behind under this prefix.

    Complete: report present and properly terminated. Restartable: chain plus
    a checksum-valid restart snapshot without a terminated report. Fresh: no
    suite files at all. Anything else is reported as corrupt rather than
    silently treated as fresh.
    """
    report = "%s_report.txt" % prefix
    if os.path.exists(report):
        try:
            with open(report, "rb") as fh:
                text = fh.read().decode("utf-8", errors="replace")
        except OSError as exc:
            raise CorruptRestart("cannot read report: %s" % exc) from exc
        tail = [ln for ln in text.split("\n") if ln.strip()]
        if tail and tail[-1] == REPORT_TERMINATOR:
            return RunState.COMPLETE
    chain_candidates = [
        "%s_chain.txt" % prefix,
        "%s_chain.bin" % prefix,
    ]
    restart = "%s_restart.bin" % prefix
    chain_exists = any(os.path.exists(p) for p in chain_candidates)
    if chain_exists and os.path.exists(restart):
        read_snapshot(restart)  # raises CorruptRestart on damage
        return RunState.RESTARTABLE
    any_exists = chain_exists or any(
        os.path.exists(p)
        for p in (
            report,
            restart,
            "%s_sample.txt" % prefix,
            "%s_progress.txt" % prefix,
        )
    )
    if any_exists:
        raise CorruptRestart(
            "output files under prefix %r are neither complete nor resumable"
            % prefix
        )
    return RunState.FRESH
