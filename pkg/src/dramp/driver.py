"""Run orchestration: wires the sampling kernel to the output file suite.

The driver owns the kernel objects so it can snapshot their exact state at
every flush boundary (each adaptation and every 1000 written rows). A run
killed at any instant therefore resumes from the last snapshot: the chain and
progress files are truncated to the snapshot's byte offsets, the in-memory
chain is rebuilt from the truncated file, and the kernel counters, moment
accumulators and stream cursors are restored bit for bit. The completed
outputs of a resumed run are byte-identical to an uninterrupted one.

All three execution modes funnel every accepted state through the same
Kernel.commit bookkeeping, and the persistence handler here is shared, so the
file cadence is identical across modes as well.
"""

from __future__ import annotations

import os
import time
from dataclasses import dataclass
from typing import Callable, List, Optional, Tuple

import numpy as np

from .chain import CompactChain
from .config import (
    SimulationSpec,
    check_restart_compatibility,
    initial_proposal,
    make_target,
    spec_digest,
    spec_to_items,
)
from .errors import CorruptRestart, IoFailure, RefusedOverwrite, SamplerError
from .kernel import Kernel, KernelSummary, RoundStreams, SerialStreams
from .model import TargetDensity
from .parallel import ContributionTally, build_speedup_report, run_forkjoin
from .persist import (
    ChainWriter,
    ProgressWriter,
    RunState,
    detect_incomplete,
    read_chain,
    read_snapshot,
    write_report,
    write_sample,
    write_snapshot,
)
from .refine import (
    ConvergenceCheck,
    RefinedSample,
    cross_chain_check,
    refine_two_phase,
)

__all__ = ["RunResult", "run_simulation", "replay_adaptation_covariances"]

_SNAPSHOT_ROW_PERIOD = 1000


@dataclass(frozen=True)
class RunResult:
    """Everything a finished run produced, independent of the files."""

    spec: SimulationSpec
    restarted: bool
    summaries: Tuple[KernelSummary, ...]
    refined: Optional[RefinedSample]
    per_chain_refined: Tuple[Optional[RefinedSample], ...]
    check: Optional[ConvergenceCheck]
    tally: Optional[ContributionTally]
    speedup: object


class _SuiteFiles:
    """Open handles plus the write counters shared by all modes."""

    def __init__(self, spec: SimulationSpec, dimension: int, append: bool,
                 rows_written: int = 0):
        suite = spec.output
        names = tuple("Var%d" % (i + 1) for i in range(dimension))
        self.suite = suite
        self.writer = ChainWriter(suite, names, append=append)
        self.progress = ProgressWriter(suite.progress_path, append=append)
        self.rows_written = rows_written
        self._t0 = time.monotonic()
        self._blank_clock = spec.deterministic_test_mode

    def elapsed(self) -> Optional[float]:
        if self._blank_clock:
            return None
        return time.monotonic() - self._t0

    def write_row(self, row) -> None:
        self.writer.write_row(row)
        self.rows_written += 1

    def tick(self, tick: dict) -> None:
        self.progress.write_tick(tick, self.elapsed())

    def flush(self) -> None:
        self.writer.flush()

    def snapshot(self, payload: dict) -> None:
        write_snapshot(self.suite.restart_path, payload)

    def close(self) -> None:
        self.writer.close()
        self.progress.close()


def _payload(spec: SimulationSpec, sw: _SuiteFiles,
             kernel_state: Optional[dict], extra: dict) -> dict:
    body = {
        "format_version": 1,
        "spec_digest": spec_digest(spec),
        "mode": spec.mode,
        "chain_format": spec.output.chain_format,
        "delimiter": spec.output.delimiter,
        "n_chains": spec.n_chains,
        "worker_count": spec.worker_count,
        "rows_written": sw.rows_written,
        "chain_offset": sw.writer.tell(),
        "progress_offset": sw.progress.tell(),
        "kernel": kernel_state,
    }
    body.update(extra)
    return body


def _make_handler(
    kern: Kernel,
    sw: _SuiteFiles,
    spec: SimulationSpec,
    extra_fn: Callable[[], dict],
    on_event: Optional[Callable[[tuple], None]],
) -> Callable[[tuple], None]:
    """Shared persistence reaction to kernel events.

    Snapshots are taken between iterations only (events surface after commit
    returns), so a snapshot is always a consistent post-iteration state. The
    user callback runs after persistence so an exception thrown from it
    leaves a resumable suite behind, which is how the crash tests operate.
    """

    def handle(event: tuple) -> None:
        kind = event[0]
        if kind == "row_final":
            sw.write_row(kern.chain.row(event[1]))
            if sw.rows_written % _SNAPSHOT_ROW_PERIOD == 0:
                sw.flush()
                sw.snapshot(_payload(spec, sw, kern.state_dict(), extra_fn()))
        elif kind == "adapt":
            sw.flush()
            sw.snapshot(_payload(spec, sw, kern.state_dict(), extra_fn()))
        elif kind == "tick":
            sw.tick(event[1])
        if on_event is not None:
            on_event(event)

    return handle


def _slice_chain(chain: CompactChain, start: int, count: int) -> CompactChain:
    out = CompactChain(chain.dimension, variable_names=chain.variable_names)
    for i in range(start, start + count):
        out.append_row(chain.row(i))
    return out


def _require(condition: bool, message: str) -> None:
    if not condition:
        raise CorruptRestart(message)


def _remove_suite(spec: SimulationSpec) -> None:
    paths = set(spec.output.all_paths())
    # the chain extension depends on the codec; clear both variants
    paths.add("%s_chain.txt" % spec.output.prefix)
    paths.add("%s_chain.bin" % spec.output.prefix)
    paths.add(spec.output.restart_path + ".tmp")
    for path in paths:
        try:
            os.remove(path)
        except FileNotFoundError:
            pass


def _truncate_for_resume(spec: SimulationSpec, snap: dict) -> None:
    try:
        os.truncate(spec.output.chain_path, int(snap["chain_offset"]))
        os.truncate(spec.output.progress_path, int(snap["progress_offset"]))
    except OSError as exc:
        raise CorruptRestart(
            "cannot truncate output files to the snapshot boundary: %s" % exc
        ) from exc


def _finish(
    spec: SimulationSpec,
    sw: _SuiteFiles,
    summaries: List[KernelSummary],
    chains: List[CompactChain],
    tally: Optional[ContributionTally],
    p_hat: float,
    observed_speedup: Optional[float],
    restarted: bool,
) -> RunResult:
    per_chain: List[Optional[RefinedSample]] = []
    for chain in chains:
        try:
            per_chain.append(refine_two_phase(chain))
        except SamplerError:
            per_chain.append(None)
    usable = [r for r in per_chain if r is not None]
    check = None
    if spec.mode == "multichain":
        check = cross_chain_check(usable) if len(usable) >= 2 else None
    dimension = chains[0].dimension
    if not usable:
        pooled = RefinedSample(
            dimension=dimension,
            points=np.zeros((0, dimension)),
            log_funcs=np.zeros(0),
            source_verbose_length=chains[0].verbose_length,
            rounds=(),
        )
    elif len(usable) == 1:
        pooled = usable[0]
    else:
        pooled = RefinedSample(
            dimension=dimension,
            points=np.vstack([r.points for r in usable]),
            log_funcs=np.concatenate([r.log_funcs for r in usable]),
            source_verbose_length=sum(r.source_verbose_length for r in usable),
            rounds=usable[0].rounds,
        )
    write_sample(sw.suite.sample_path, pooled, spec.output.delimiter)
    speedup = build_speedup_report(p_hat, observed_speedup)
    write_report(
        sw.suite,
        spec_to_items(spec),
        summaries[0],
        usable[0] if usable else None,
        speedup,
        mode=spec.mode,
        check=check,
        tally=tally,
        complete=True,
    )
    return RunResult(
        spec=spec,
        restarted=restarted,
        summaries=tuple(summaries),
        refined=pooled,
        per_chain_refined=tuple(per_chain),
        check=check,
        tally=tally,
        speedup=speedup,
    )


def _run_serial(
    spec: SimulationSpec,
    target: TargetDensity,
    resume: Optional[dict],
    on_event,
) -> RunResult:
    proposal = initial_proposal(spec)
    if resume is None:
        sw = _SuiteFiles(spec, target.dimension, append=False)
        kern = Kernel(
            target, spec.kernel, proposal,
            SerialStreams(spec.kernel.rng_seed, chain_index=0),
        )
    else:
        stored = read_chain(spec.output.chain_path, spec.output.delimiter)
        _require(
            stored.n_rows == int(resume["rows_written"]),
            "chain file holds %d rows, snapshot says %d"
            % (stored.n_rows, int(resume["rows_written"])),
        )
        _require(
            stored.dimension == target.dimension,
            "chain file dimension %d does not match the target's %d"
            % (stored.dimension, target.dimension),
        )
        sw = _SuiteFiles(spec, target.dimension, append=True,
                         rows_written=stored.n_rows)
        kern = Kernel(
            target, spec.kernel, proposal,
            SerialStreams(spec.kernel.rng_seed, chain_index=0),
            chain=stored,
        )
        kern.load_state(resume["kernel"])
    try:
        handle = _make_handler(kern, sw, spec, dict, on_event)
        if resume is None:
            sw.flush()
            sw.snapshot(_payload(spec, sw, kern.state_dict(), {}))
        while not kern.done:
            for event in kern.step():
                handle(event)
        sw.write_row(kern.chain.row(kern.chain.n_rows - 1))
        sw.flush()
        summary = kern.summary()
        p_hat = summary.mean_acceptance_rate
        return _finish(
            spec, sw, [summary], [kern.chain], None, p_hat, None,
            restarted=resume is not None,
        )
    finally:
        sw.close()


def _run_multichain(
    spec: SimulationSpec,
    target: TargetDensity,
    resume: Optional[dict],
    on_event,
) -> RunResult:
    proposal = initial_proposal(spec)
    completed_rows: List[int] = []
    completed_meta: List[dict] = []
    summaries: List[KernelSummary] = []
    chains: List[CompactChain] = []
    first_index = 0
    restored_kernel: Optional[Kernel] = None

    if resume is None:
        sw = _SuiteFiles(spec, target.dimension, append=False)
    else:
        stored = read_chain(spec.output.chain_path, spec.output.delimiter)
        _require(
            stored.n_rows == int(resume["rows_written"]),
            "chain file holds %d rows, snapshot says %d"
            % (stored.n_rows, int(resume["rows_written"])),
        )
        completed_rows = [int(v) for v in resume["completed_rows"]]
        completed_meta = [dict(m) for m in resume["completed_meta"]]
        first_index = int(resume["chain_index"])
        offset = 0
        for meta, n_rows in zip(completed_meta, completed_rows):
            block = _slice_chain(stored, offset, n_rows)
            offset += n_rows
            chains.append(block)
            summaries.append(
                KernelSummary(
                    chain=block,
                    final_proposal=None,
                    stage_attempts=tuple(int(v) for v in meta["stage_attempts"]),
                    stage_accepts=tuple(int(v) for v in meta["stage_accepts"]),
                    burnin_location=int(meta["burnin"]),
                    adaptation_count=int(meta["adaptation_count"]),
                )
            )
        prefix = _slice_chain(stored, offset, stored.n_rows - offset)
        sw = _SuiteFiles(spec, target.dimension, append=True,
                         rows_written=stored.n_rows)
        if resume["kernel"] is None:
            _require(
                prefix.n_rows == 0,
                "snapshot taken between chains but %d stray rows follow the "
                "last completed chain" % prefix.n_rows,
            )
        else:
            restored_kernel = Kernel(
                target, spec.kernel, proposal,
                SerialStreams(spec.kernel.rng_seed, chain_index=first_index),
                process_id=first_index + 1,
                chain=prefix,
            )
            restored_kernel.load_state(resume["kernel"])

    def extra() -> dict:
        return {
            "chain_index": current_index[0],
            "completed_rows": list(completed_rows),
            "completed_meta": list(completed_meta),
        }

    current_index = [first_index]
    try:
        for index in range(first_index, spec.n_chains):
            current_index[0] = index
            if restored_kernel is not None and index == first_index:
                kern = restored_kernel
            else:
                kern = Kernel(
                    target, spec.kernel, proposal,
                    SerialStreams(spec.kernel.rng_seed, chain_index=index),
                    process_id=index + 1,
                )
                sw.flush()
                sw.snapshot(_payload(spec, sw, kern.state_dict(), extra()))
            handle = _make_handler(kern, sw, spec, extra, on_event)
            while not kern.done:
                for event in kern.step():
                    handle(event)
            sw.write_row(kern.chain.row(kern.chain.n_rows - 1))
            sw.flush()
            completed_rows.append(kern.chain.n_rows)
            completed_meta.append(
                {
                    "stage_attempts": list(kern.summary().stage_attempts),
                    "stage_accepts": list(kern.summary().stage_accepts),
                    "burnin": kern.summary().burnin_location,
                    "adaptation_count": kern.summary().adaptation_count,
                }
            )
            current_index[0] = index + 1
            sw.snapshot(_payload(spec, sw, None, extra()))
            summaries.append(kern.summary())
            chains.append(kern.chain)
        total_rows = sum(c.n_rows for c in chains)
        total_verbose = sum(c.verbose_length for c in chains)
        p_hat = total_rows / total_verbose
        return _finish(
            spec, sw, summaries, chains, None, p_hat, None,
            restarted=resume is not None,
        )
    finally:
        sw.close()


def _run_forkjoin(
    spec: SimulationSpec,
    target: TargetDensity,
    resume: Optional[dict],
    on_event,
) -> RunResult:
    proposal = initial_proposal(spec)
    if resume is None:
        sw = _SuiteFiles(spec, target.dimension, append=False)
        kern = Kernel(
            target, spec.kernel, proposal,
            RoundStreams(spec.kernel.rng_seed, rank=1),
        )
    else:
        stored = read_chain(spec.output.chain_path, spec.output.delimiter)
        _require(
            stored.n_rows == int(resume["rows_written"]),
            "chain file holds %d rows, snapshot says %d"
            % (stored.n_rows, int(resume["rows_written"])),
        )
        sw = _SuiteFiles(spec, target.dimension, append=True,
                         rows_written=stored.n_rows)
        kern = Kernel(
            target, spec.kernel, proposal,
            RoundStreams(spec.kernel.rng_seed, rank=1),
            chain=stored,
        )
        kern.load_state(resume["kernel"])
    try:
        handle = _make_handler(kern, sw, spec, dict, on_event)
        if resume is None:
            sw.flush()
            sw.snapshot(_payload(spec, sw, kern.state_dict(), {}))
        result = run_forkjoin(
            target, spec.kernel, proposal, spec.worker_count,
            on_event=handle, kernel=kern,
        )
        sw.write_row(kern.chain.row(kern.chain.n_rows - 1))
        sw.flush()
        summary = result.summary
        p_hat = result.speedup.fitted_acceptance_prob
        observed = None
        verbose = summary.chain.verbose_length
        if verbose > 1 and p_hat > 0.0:
            rounds = verbose - 1
            accepted = summary.chain.n_rows - 1
            observed = (accepted / rounds) / p_hat
        return _finish(
            spec, sw, [summary], [kern.chain], result.tally, p_hat, observed,
            restarted=resume is not None,
        )
    finally:
        sw.close()


def run_simulation(
    spec: SimulationSpec,
    force_overwrite: bool = False,
    on_event: Optional[Callable[[tuple], None]] = None,
) -> RunResult:
    """Execute a simulation end to end, resuming automatically if the output
    prefix holds an interrupted run.

    ``on_event`` observes every kernel event after it has been persisted; an
    exception raised from it aborts the run with a resumable suite on disk.
    Raises RefusedOverwrite when a completed run exists under the prefix and
    ``force_overwrite`` is not set.
    """
    parent = os.path.dirname(spec.output.prefix)
    if parent:
        try:
            os.makedirs(parent, exist_ok=True)
        except OSError as exc:
            raise IoFailure("cannot create output directory: %s" % exc) from exc
    if force_overwrite:
        _remove_suite(spec)
        state = RunState.FRESH
    else:
        state = detect_incomplete(spec.output.prefix)
    if state is RunState.COMPLETE:
        raise RefusedOverwrite(
            "a completed run already exists under prefix %r; pass "
            "force_overwrite to replace it" % spec.output.prefix
        )
    resume = None
    if state is RunState.RESTARTABLE:
        snap = read_snapshot(spec.output.restart_path)
        check_restart_compatibility(spec, snap)
        _require(
            snap.get("mode") == spec.mode,
            "snapshot mode %r does not match spec mode %r"
            % (snap.get("mode"), spec.mode),
        )
        _truncate_for_resume(spec, snap)
        resume = snap
    target = make_target(spec)
    if spec.mode == "serial":
        return _run_serial(spec, target, resume, on_event)
    if spec.mode == "multichain":
        return _run_multichain(spec, target, resume, on_event)
    return _run_forkjoin(spec, target, resume, on_event)


def replay_adaptation_covariances(
    spec: SimulationSpec,
) -> List[Tuple[int, np.ndarray]]:
    """Re-run a simulation in memory and capture the proposal shape matrix at
    every adaptation, as (chain_length, matrix) pairs.

    The trajectory is fully determined by the spec, so this reproduces
    exactly the matrices the original run adapted through. Multichain specs
    replay their first chain, whose stream convention matches a serial run.
    """
    target = make_target(spec)
    proposal = initial_proposal(spec)
    captured: List[Tuple[int, np.ndarray]] = []
    if spec.mode == "forkjoin":
        kern = Kernel(
            target, spec.kernel, proposal,
            RoundStreams(spec.kernel.rng_seed, rank=1),
        )

        def handler(event: tuple) -> None:
            if event[0] == "adapt":
                captured.append(
                    (event[1].at_chain_length, kern.proposal.covariance.copy())
                )

        run_forkjoin(
            target, spec.kernel, proposal, spec.worker_count,
            on_event=handler, kernel=kern,
        )
    else:
        kern = Kernel(
            target, spec.kernel, proposal,
            SerialStreams(spec.kernel.rng_seed, chain_index=0),
        )
        while not kern.done:
            for event in kern.step():
                if event[0] == "adapt":
                    captured.append(
                        (event[1].at_chain_length, kern.proposal.covariance.copy())
                    )
    return captured
