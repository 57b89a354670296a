"""Serial sampling loop: Metropolis acceptance with delayed rejection,
periodic proposal adaptation, burn-in tracking.

Every iteration proposes against the incumbent state. A rejection at stage k
falls through to stage k+1 with a narrower proposal, up to the configured
stage count; acceptance probabilities at the later stages carry correction
terms so that the combined kernel still satisfies detailed balance. A fully
rejected iteration bumps the incumbent's repeat weight.

RNG budget contract: every stage consumes exactly d standard normals plus one
uniform from the step's stream, whether or not the outcome is already decided.
Restart replay and the fork-join round protocol both depend on stream
consumption being a pure function of the event sequence.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

from . import rng as rng_mod
from .chain import ChainRow, CompactChain, WeightedMoments
from .errors import (
    DimensionMismatch,
    EmptyRange,
    InvalidAlpha,
    NonFiniteStart,
    StageOutOfRange,
)
from .model import TargetDensity
from .proposal import (
    AdaptationRecord,
    ProposalState,
    adapt,
    log_kernel_density,
    sample_candidate,
)

__all__ = [
    "REJECTED",
    "KernelConfig",
    "StepOutcome",
    "KernelSummary",
    "SerialStreams",
    "RoundStreams",
    "mh_accept_stage0",
    "dr_accept_stage1",
    "propose_cascade",
    "burnin_location",
    "Kernel",
    "run_kernel",
]

REJECTED = -1

NEG_INF = float("-inf")


@dataclass(frozen=True)
class KernelConfig:
    """Static per-run sampling parameters.

    ``chain_length_target`` counts unique (compact) states, matching the
    storage unit. ``adaptation_period`` is measured in unique states between
    proposal re-estimations; None resolves to max(10*d, 100). The first
    ``greedy_adaptation_count`` adaptations use moments of the accepted states
    only, which escapes bad start points faster; afterwards the full weighted
    history from the start feeds the estimate.
    """

    chain_length_target: int
    start_point: Tuple[float, ...]
    rng_seed: int
    dr_stage_count: int = 1
    adaptation_period: Optional[int] = None
    greedy_adaptation_count: int = 4

    def __post_init__(self):
        if self.chain_length_target < 1:
            raise ValueError(
                "chain_length_target must be >= 1, got %d" % self.chain_length_target
            )
        if self.dr_stage_count < 0:
            raise ValueError(
                "dr_stage_count must be >= 0, got %d" % self.dr_stage_count
            )
        if self.adaptation_period is not None and self.adaptation_period < 1:
            raise ValueError(
                "adaptation_period must be >= 1, got %d" % self.adaptation_period
            )
        if self.greedy_adaptation_count < 0:
            raise ValueError("greedy_adaptation_count must be >= 0")
        object.__setattr__(
            self, "start_point", tuple(float(v) for v in self.start_point)
        )

    def resolved_adaptation_period(self, dimension: int) -> int:
        if self.adaptation_period is not None:
            return self.adaptation_period
        return max(10 * dimension, 100)


@dataclass(frozen=True)
class StepOutcome:
    """Result of one full proposal cascade against an incumbent."""

    accepted_state: np.ndarray
    accepted_log_func: float
    accepted_at_stage: int  # REJECTED when every stage failed
    proposals_consumed: int


def mh_accept_stage0(log_current: float, log_candidate: float, u: float) -> bool:
    """Symmetric-proposal Metropolis rule: accept iff ln u < logCand - logCur."""
    lnu = math.log(u) if u > 0.0 else NEG_INF
    return lnu < log_candidate - log_current


def dr_accept_stage1(
    log_x: float,
    log_y1: float,
    log_y2: float,
    alpha1_y2y1: float,
    alpha1_xy1: float,
    u: float,
    log_q_ratio: float = 0.0,
) -> bool:
    """Stage-1 delayed-rejection rule for the path x -> y1 (rejected) -> y2.

    Accepts iff ln u < [log_y2 + ln(1 - alpha1_y2y1)]
                     - [log_x + ln(1 - alpha1_xy1)] + log_q_ratio.

    ``log_q_ratio`` is ln q0(y1 - y2) - ln q0(y1 - x), the first-stage kernel
    evaluated at the two displacements to y1. For proposals all centered at
    the incumbent these do NOT cancel (only the final-stage kernel does);
    dropping the term breaks detailed balance measurably. The default 0.0
    covers the symmetric desk cases where both displacements coincide.
    """
    if not (0.0 <= alpha1_y2y1 <= 1.0 and 0.0 <= alpha1_xy1 <= 1.0):
        raise InvalidAlpha(
            "alpha terms must lie in [0,1], got %g and %g"
            % (alpha1_y2y1, alpha1_xy1)
        )
    if alpha1_y2y1 >= 1.0:
        return False  # reverse move would be surely accepted; numerator vanishes
    log_num = log_y2 + math.log1p(-alpha1_y2y1)
    log_den = log_x + math.log1p(-alpha1_xy1)
    lnu = math.log(u) if u > 0.0 else NEG_INF
    return lnu < log_num - log_den + log_q_ratio


def _alpha0(log_from: float, log_to: float) -> float:
    """Stage-0 acceptance probability min(1, exp(log_to - log_from))."""
    if log_to >= log_from:
        return 1.0
    return math.exp(log_to - log_from)


def _log1mexp(a: float) -> float:
    """log(1 - exp(a)) for a <= 0."""
    if a >= 0.0:
        return NEG_INF
    if a > -0.6931471805599453:
        return math.log(-math.expm1(a))
    return math.log1p(-math.exp(a))


def _log_path_alpha(
    logfs: Sequence[float], states: Sequence[np.ndarray], proposal: ProposalState
) -> float:
    """Log acceptance probability of the path's last entry.

    ``states[0]`` is the path origin, states[1:-1] the rejected candidates in
    stage order, states[-1] the candidate under test at stage len(states)-2.
    All stage kernels are centered at the path origin, so the final-stage
    kernel term is symmetric and cancels; earlier-stage kernel terms and the
    rejection probabilities of both the forward and the reversed sub-paths
    remain. Recursive; exponential in stage index, fine for small cascades.
    """
    k = len(states) - 2
    if k == 0:
        diff = logfs[1] - logfs[0]
        return 0.0 if diff >= 0.0 else diff
    log_num = logfs[-1]
    log_den = logfs[0]
    if log_num == NEG_INF:
        return NEG_INF
    for j in range(k):
        log_den += log_kernel_density(proposal, states[0], states[j + 1], j)
        log_num += log_kernel_density(proposal, states[-1], states[-2 - j], j)
        fwd = _log_path_alpha(logfs[: j + 2], states[: j + 2], proposal)
        rev = _log_path_alpha(logfs[::-1][: j + 2], states[::-1][: j + 2], proposal)
        log_num += _log1mexp(rev)
        log_den += _log1mexp(fwd)
        if log_num == NEG_INF:
            return NEG_INF
    if log_den == NEG_INF:
        return 0.0  # zero-probability forward path; ratio diverges
    diff = log_num - log_den
    return 0.0 if diff >= 0.0 else diff


def propose_cascade(
    target: TargetDensity,
    proposal: ProposalState,
    incumbent: np.ndarray,
    log_incumbent: float,
    dr_stage_count: int,
    stream: np.random.Generator,
) -> StepOutcome:
    """Run one full proposal attempt: stage 0 plus up to dr_stage_count retries.

    Pure with respect to everything but the stream; shared verbatim by the
    serial kernel and the fork-join workers.
    """
    states: List[np.ndarray] = [incumbent]
    logfs: List[float] = [log_incumbent]
    consumed = 0
    for stage in range(dr_stage_count + 1):
        candidate = sample_candidate(proposal, incumbent, stage, stream)
        log_candidate = float(target.evaluate(candidate))
        u = float(stream.random())
        consumed += 1
        states.append(candidate)
        logfs.append(log_candidate)
        if stage == 0:
            accepted = mh_accept_stage0(log_incumbent, log_candidate, u)
        elif stage == 1:
            a_fwd = _alpha0(log_incumbent, logfs[1])
            a_rev = _alpha0(log_candidate, logfs[1])
            lqr = log_kernel_density(
                proposal, candidate, states[1], 0
            ) - log_kernel_density(proposal, incumbent, states[1], 0)
            accepted = dr_accept_stage1(
                log_incumbent, logfs[1], log_candidate, a_rev, a_fwd, u, lqr
            )
        else:
            la = _log_path_alpha(logfs, states, proposal)
            lnu = math.log(u) if u > 0.0 else NEG_INF
            accepted = lnu < la
        if accepted:
            return StepOutcome(candidate, log_candidate, stage, consumed)
    return StepOutcome(incumbent, log_incumbent, REJECTED, consumed)


def burnin_location(
    log_funcs: Sequence[float],
    dimension: int,
    weights: Optional[Sequence[int]] = None,
) -> int:
    """First verbose index whose log-density clears max - dimension/2.

    The threshold is the typical-set log-density deficit of a d-dimensional
    Gaussian. Falls back to the index of the maximum, though the maximum
    itself always qualifies.
    """
    logf = np.asarray(log_funcs, dtype=float)
    if logf.size == 0:
        raise EmptyRange("burn-in location of an empty series")
    if weights is None:
        starts = np.arange(logf.size, dtype=np.int64)
    else:
        w = np.asarray(weights, dtype=np.int64)
        starts = np.concatenate(([0], np.cumsum(w)[:-1]))
    threshold = float(np.max(logf)) - dimension / 2.0
    hits = np.nonzero(logf >= threshold)[0]
    row = int(hits[0]) if hits.size else int(np.argmax(logf))
    return int(starts[row])


class SerialStreams:
    """One continuous generator for the whole run (plain serial convention)."""

    kind = "serial"

    def __init__(self, seed: int, chain_index: int = 0):
        self.seed = int(seed)
        self.chain_index = int(chain_index)
        self._gen = rng_mod.chain_stream(self.seed, self.chain_index)

    def for_iteration(self, round_index: int) -> np.random.Generator:
        return self._gen

    def state_dict(self) -> dict:
        return {
            "kind": self.kind,
            "seed": self.seed,
            "chain_index": self.chain_index,
            "generator": rng_mod.stream_state(self._gen),
        }

    def load_state(self, state: dict) -> None:
        self._gen = rng_mod.restore_stream(state["generator"])


class RoundStreams:
    """A fresh generator per iteration, keyed by (seed, round, rank).

    This is the fork-join convention: worker ``rank`` in round ``i`` owns an
    independent stream regardless of what other workers or earlier rounds
    consumed. A serial kernel running under this convention with rank 1
    reproduces a one-worker fork-join run exactly.
    """

    kind = "per_round"

    def __init__(self, seed: int, rank: int = 1):
        self.seed = int(seed)
        self.rank = int(rank)

    def for_iteration(self, round_index: int) -> np.random.Generator:
        return rng_mod.round_stream(self.seed, round_index, self.rank)

    def state_dict(self) -> dict:
        return {"kind": self.kind, "seed": self.seed, "rank": self.rank}

    def load_state(self, state: dict) -> None:
        pass  # nothing stateful; streams are derived per round


@dataclass
class KernelSummary:
    """What a finished run hands to reporting and refinement."""

    chain: CompactChain
    final_proposal: ProposalState
    stage_attempts: Tuple[int, ...]
    stage_accepts: Tuple[int, ...]
    burnin_location: int
    adaptation_count: int

    @property
    def mean_acceptance_rate(self) -> float:
        return self.chain.n_rows / self.chain.verbose_length

    @property
    def stage0_acceptance_rate(self) -> float:
        if self.stage_attempts[0] == 0:
            return 0.0
        return self.stage_accepts[0] / self.stage_attempts[0]


class Kernel:
    """Stateful stepping engine behind run_kernel and the parallel drivers.

    Owns the chain, the running moment accumulators, the adaptation schedule
    and the burn-in tracker. ``step()`` advances one iteration and returns the
    bookkeeping events it produced, so callers can persist rows and snapshots
    between iterations, never mid-step.
    """

    def __init__(
        self,
        target: TargetDensity,
        config: KernelConfig,
        proposal: ProposalState,
        streams,
        process_id: int = 1,
        chain: Optional[CompactChain] = None,
    ):
        if target.dimension != proposal.dimension:
            raise DimensionMismatch(
                "target dimension %d, proposal dimension %d"
                % (target.dimension, proposal.dimension)
            )
        if config.dr_stage_count > len(proposal.dr_scales):
            raise StageOutOfRange(
                "dr_stage_count %d exceeds the %d configured stage scales"
                % (config.dr_stage_count, len(proposal.dr_scales))
            )
        self.target = target
        self.config = config
        self.proposal = proposal
        self.streams = streams
        self.process_id = process_id
        d = target.dimension
        self._period = config.resolved_adaptation_period(d)
        self._stage_attempts = [0] * (config.dr_stage_count + 1)
        self._stage_accepts = [0] * (config.dr_stage_count + 1)
        self._moments_full = WeightedMoments(d)
        self._moments_greedy = WeightedMoments(d)
        self._pending_measure = 0.0
        self._run_max = NEG_INF
        self._burnin = 0
        self._log_incumbent = NEG_INF
        if chain is not None:
            self.chain = chain  # restart path: counters arrive via load_state
            return
        self.chain = CompactChain(d)
        start = np.asarray(config.start_point, dtype=float)
        if start.shape != (d,):
            raise DimensionMismatch(
                "start point has %d entries, target dimension is %d"
                % (start.size, d)
            )
        log_start = float(target.evaluate(start))
        if not math.isfinite(log_start):
            raise NonFiniteStart(
                "start point has non-finite log-density %g" % log_start
            )
        self._log_incumbent = log_start
        self._run_max = log_start
        self._burnin = 0
        self.chain.append_row(
            ChainRow(
                process_id=process_id,
                dr_stage=0,
                mean_acceptance_rate=1.0,
                adaptation_measure=0.0,
                burnin_location=0,
                weight=1,
                log_func=log_start,
                state=start,
            )
        )
        self._moments_full.update(start, 1.0)
        self._moments_greedy.update(start, 1.0)

    @property
    def done(self) -> bool:
        return self.chain.n_rows >= self.config.chain_length_target

    @property
    def log_incumbent(self) -> float:
        return self._log_incumbent

    def _rescan_burnin(self) -> None:
        threshold = self._run_max - self.target.dimension / 2.0
        hits = np.nonzero(self.chain.log_funcs >= threshold)[0]
        row = int(hits[0]) if hits.size else int(np.argmax(self.chain.log_funcs))
        self._burnin = int(self.chain.verbose_starts[row])

    def step(self) -> List[tuple]:
        round_index = self.chain.verbose_length
        stream = self.streams.for_iteration(round_index)
        outcome = propose_cascade(
            self.target,
            self.proposal,
            self.chain.last_state(),
            self._log_incumbent,
            self.config.dr_stage_count,
            stream,
        )
        self.count_attempts(outcome.proposals_consumed)
        return self.commit(outcome, self.process_id)

    def count_attempts(self, proposals_consumed: int) -> None:
        for s in range(proposals_consumed):
            self._stage_attempts[s] += 1

    def commit(self, outcome: StepOutcome, process_id: int) -> List[tuple]:
        """Fold one cascade outcome into the chain and run the shared
        bookkeeping (moments, adaptation, burn-in, running columns).

        The fork-join collector calls this directly with the winning worker's
        outcome, so serial and parallel runs share every accounting rule.
        Stage ATTEMPT tallies stay with the caller (the collector counts
        scanned worker attempts, the serial step counts its own cascade);
        only the accept tally is shared here.
        """
        events: List[tuple] = []
        if outcome.accepted_at_stage != REJECTED:
            self._stage_accepts[outcome.accepted_at_stage] += 1
            finalized = self.chain.n_rows - 1
            self.chain.append_row(
                ChainRow(
                    process_id=process_id,
                    dr_stage=outcome.accepted_at_stage,
                    mean_acceptance_rate=0.0,  # restamped below
                    adaptation_measure=self._pending_measure,
                    burnin_location=self._burnin,
                    weight=1,
                    log_func=outcome.accepted_log_func,
                    state=outcome.accepted_state,
                )
            )
            self._pending_measure = 0.0
            self._log_incumbent = outcome.accepted_log_func
            events.append(("row_final", finalized))
            if outcome.accepted_log_func > self._run_max:
                self._run_max = outcome.accepted_log_func
                self._rescan_burnin()
            self._moments_greedy.update(outcome.accepted_state, 1.0)
        else:
            self.chain.increment_last(1)
        self._moments_full.update(self.chain.last_state(), 1.0)
        if (
            outcome.accepted_at_stage != REJECTED
            and self.chain.n_rows % self._period == 0
        ):
            use_greedy = (
                self.proposal.adaptation_count < self.config.greedy_adaptation_count
            )
            moments = self._moments_greedy if use_greedy else self._moments_full
            self.proposal, record = adapt(
                self.proposal,
                moments.mean,
                moments.covariance(),
                chain_length=self.chain.n_rows,
            )
            self._pending_measure = record.measure
            events.append(("adapt", record))
        self.chain.restamp_last(
            self.chain.n_rows / self.chain.verbose_length, self._burnin
        )
        if self.chain.verbose_length % 1000 == 0:
            events.append(
                (
                    "tick",
                    {
                        "verbose_length": self.chain.verbose_length,
                        "compact_length": self.chain.n_rows,
                        "mean_acceptance_rate": self.chain.n_rows
                        / self.chain.verbose_length,
                        "last_adaptation_measure": self._pending_measure,
                    },
                )
            )
        return events

    def summary(self) -> KernelSummary:
        return KernelSummary(
            chain=self.chain,
            final_proposal=self.proposal,
            stage_attempts=tuple(self._stage_attempts),
            stage_accepts=tuple(self._stage_accepts),
            burnin_location=self._burnin,
            adaptation_count=self.proposal.adaptation_count,
        )

    # restart transport: plain structures; persist owns the exact encoding
    def state_dict(self) -> dict:
        live = self.chain.row(self.chain.n_rows - 1)
        return {
            "stream": self.streams.state_dict(),
            "proposal": {
                "dimension": self.proposal.dimension,
                "covariance": self.proposal.covariance.copy(),
                "scale_factor": self.proposal.scale_factor,
                "dr_scales": list(self.proposal.dr_scales),
                "adaptation_count": self.proposal.adaptation_count,
            },
            "moments_full": {
                "total_weight": self._moments_full.total_weight,
                "mean": self._moments_full.mean.copy(),
                "m2": self._moments_full.m2.copy(),
            },
            "moments_greedy": {
                "total_weight": self._moments_greedy.total_weight,
                "mean": self._moments_greedy.mean.copy(),
                "m2": self._moments_greedy.m2.copy(),
            },
            "stage_attempts": list(self._stage_attempts),
            "stage_accepts": list(self._stage_accepts),
            "pending_measure": self._pending_measure,
            "run_max": self._run_max,
            "burnin": self._burnin,
            "log_incumbent": self._log_incumbent,
            "live_row": {
                "process_id": live.process_id,
                "dr_stage": live.dr_stage,
                "mean_acceptance_rate": live.mean_acceptance_rate,
                "adaptation_measure": live.adaptation_measure,
                "burnin_location": live.burnin_location,
                "weight": live.weight,
                "log_func": live.log_func,
                "state": live.state,
            },
        }

    def load_state(self, state: dict) -> None:
        """Restore counters and the live row after the chain prefix was
        rebuilt from the chain file. Inverse of state_dict."""
        self.streams.load_state(state["stream"])
        p = state["proposal"]
        base = ProposalState.create(
            int(p["dimension"]),
            covariance=np.asarray(p["covariance"], dtype=float),
            scale_factor=float(p["scale_factor"]),
            dr_scales=tuple(float(s) for s in p["dr_scales"]),
        )
        self.proposal = replace(base, adaptation_count=int(p["adaptation_count"]))
        for name, key in (
            ("_moments_full", "moments_full"),
            ("_moments_greedy", "moments_greedy"),
        ):
            m = WeightedMoments(self.target.dimension)
            m.total_weight = float(state[key]["total_weight"])
            m.mean = np.asarray(state[key]["mean"], dtype=float)
            m.m2 = np.asarray(state[key]["m2"], dtype=float)
            setattr(self, name, m)
        self._stage_attempts = [int(v) for v in state["stage_attempts"]]
        self._stage_accepts = [int(v) for v in state["stage_accepts"]]
        self._pending_measure = float(state["pending_measure"])
        self._run_max = float(state["run_max"])
        self._burnin = int(state["burnin"])
        self._log_incumbent = float(state["log_incumbent"])
        lr = state["live_row"]
        self.chain.append_row(
            ChainRow(
                process_id=int(lr["process_id"]),
                dr_stage=int(lr["dr_stage"]),
                mean_acceptance_rate=float(lr["mean_acceptance_rate"]),
                adaptation_measure=float(lr["adaptation_measure"]),
                burnin_location=int(lr["burnin_location"]),
                weight=int(lr["weight"]),
                log_func=float(lr["log_func"]),
                state=np.asarray(lr["state"], dtype=float),
            )
        )


def run_kernel(
    target: TargetDensity,
    config: KernelConfig,
    proposal: ProposalState,
    streams=None,
    on_event: Optional[Callable[[tuple], None]] = None,
) -> KernelSummary:
    """Run a full serial simulation and return its summary.

    ``streams`` defaults to the continuous serial convention seeded from the
    config. ``on_event`` receives each bookkeeping event (finalized row,
    adaptation, progress tick, completion) as it happens; persistence layers
    consume the stream, tests inject crashes through it.
    """
    if streams is None:
        streams = SerialStreams(config.rng_seed)
    kern = Kernel(target, config, proposal, streams)
    while not kern.done:
        events = kern.step()
        if on_event is not None:
            for ev in events:
                on_event(ev)
    if on_event is not None:
        on_event(("done", kern.chain.n_rows))
    return kern.summary()
