"""Simulated parallel execution.

Two modes, both deterministic and in-process:

Multi-chain: independent samplers with per-chain RNG streams; finished chains
are refined and cross-compared pairwise for convergence evidence.

Fork-join: one shared chain. Per round, every worker rank draws a full
proposal cascade against the incumbent from its own (seed, round, rank)
stream; the collector commits the lowest accepting rank's state, or bumps the
incumbent's weight when all reject. Under this commit rule the rank that
contributes each state follows a truncated geometric law in the per-attempt
acceptance probability, which is what makes scanning ranks in order a fair
work model and gives the closed-form speedup curve below.

Because every random draw is indexed by (round, rank), the outcome is a pure
function of (seed, spec, P): physical scheduling cannot change it. Scanning
stops at the first acceptance; the skipped higher ranks' streams are
independent of everything committed, so short-circuiting is exact, not an
approximation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np
from scipy.optimize import brentq

from . import rng as rng_mod
from .errors import DegenerateTally, SamplerError
from .kernel import (
    Kernel,
    KernelConfig,
    KernelSummary,
    REJECTED,
    RoundStreams,
    SerialStreams,
    StepOutcome,
    propose_cascade,
)
from .model import TargetDensity
from .proposal import ProposalState
from .refine import ConvergenceCheck, RefinedSample, cross_chain_check, refine_two_phase

__all__ = [
    "ContributionTally",
    "SpeedupReport",
    "MultiChainResult",
    "ForkJoinResult",
    "run_multichain",
    "run_forkjoin",
    "fit_geometric",
    "predict_speedup",
    "recommend_workers",
    "build_speedup_report",
    "PREDICTION_GRID",
]

# powers of two reported in the speedup table
PREDICTION_GRID = tuple(2 ** k for k in range(13))  # 1 .. 4096

WORKER_CAP = 2 ** 16


@dataclass(frozen=True)
class ContributionTally:
    """Accepted states credited to each worker rank (1-based ranks)."""

    worker_count: int
    counts: Tuple[int, ...]

    def __post_init__(self):
        if self.worker_count < 1:
            raise ValueError("worker_count must be >= 1")
        if len(self.counts) != self.worker_count:
            raise ValueError(
                "%d counts for %d workers" % (len(self.counts), self.worker_count)
            )
        if any(c < 0 for c in self.counts):
            raise ValueError("counts must be non-negative")

    @property
    def total(self) -> int:
        return sum(self.counts)


@dataclass(frozen=True)
class SpeedupReport:
    fitted_acceptance_prob: float
    predicted_curve: Tuple[Tuple[int, float], ...]
    recommended_workers: int
    observed_speedup: Optional[float] = None


@dataclass(frozen=True)
class MultiChainResult:
    summaries: Tuple[Optional[KernelSummary], ...]
    refined: Tuple[Optional[RefinedSample], ...]
    failures: Tuple[Tuple[int, str], ...]
    check: ConvergenceCheck


@dataclass(frozen=True)
class ForkJoinResult:
    summary: KernelSummary
    tally: ContributionTally
    speedup: SpeedupReport


def predict_speedup(p: float, worker_count: int) -> float:
    """Expected strong-scaling speedup of the round protocol at P workers.

    Serial needs 1/p proposal attempts per accepted state; P round-parallel
    workers need 1/(1 - (1-p)^P) rounds. The ratio (1 - (1-p)^P)/p is 1 at
    P=1, monotone in P, and saturates at 1/p.
    """
    if not 0.0 < p <= 1.0:
        raise ValueError("p must be in (0, 1], got %g" % p)
    if worker_count < 1:
        raise ValueError("worker_count must be >= 1, got %d" % worker_count)
    if p == 1.0 or worker_count == 1:
        return 1.0  # exact by definition; (1-(1-p))/p would round
    return (1.0 - (1.0 - p) ** worker_count) / p


def recommend_workers(p: float, efficiency_floor: float = 0.05) -> int:
    """Smallest P whose speedup reaches (1 - floor) of the 1/p saturation.

    Equivalent to (1-p)^P <= floor. Scanned upward (the curve is monotone)
    and capped at 2^16 for vanishing acceptance probabilities.
    """
    if not 0.0 < p <= 1.0:
        raise ValueError("p must be in (0, 1], got %g" % p)
    if not 0.0 < efficiency_floor < 1.0:
        raise ValueError(
            "efficiency_floor must be in (0, 1), got %g" % efficiency_floor
        )
    miss = 1.0 - p
    q = miss
    workers = 1
    while q > efficiency_floor and workers < WORKER_CAP:
        workers += 1
        q *= miss
    return workers


def fit_geometric(tally: ContributionTally) -> float:
    """Maximum-likelihood acceptance probability from a contribution tally.

    Model: P(rank = r) proportional to p (1-p)^(r-1) on r in {1..P}. The
    likelihood derivative is solved by bracketed root finding to 1e-10 in p.
    All mass in rank 1 means every round was won immediately: p = 1.
    """
    if tally.total < 1:
        raise DegenerateTally("tally holds no accepted states")
    counts = np.asarray(tally.counts, dtype=float)
    n = float(counts.sum())
    s = float(counts @ np.arange(tally.worker_count))  # sum of (rank-1) weights
    if s == 0.0:
        return 1.0
    big_p = tally.worker_count

    def dlogl(p: float) -> float:
        # 1 - q^P via expm1/log1p: the naive form loses ~11 digits near p=0
        # and flips the sign of the boundary test below
        q = 1.0 - p
        one_minus_q_pow = -math.expm1(big_p * math.log1p(-p))
        return n / p - s / q - n * big_p * q ** (big_p - 1) / one_minus_q_pow

    lo, hi = 1e-12, 1.0 - 1e-12
    if dlogl(lo) <= 0.0:
        return lo  # heavier-than-uniform tail; boundary solution
    return float(brentq(dlogl, lo, hi, xtol=1e-10))


def build_speedup_report(
    p_hat: float, observed_speedup: Optional[float] = None
) -> SpeedupReport:
    curve = tuple((big_p, predict_speedup(p_hat, big_p)) for big_p in PREDICTION_GRID)
    return SpeedupReport(
        fitted_acceptance_prob=p_hat,
        predicted_curve=curve,
        recommended_workers=recommend_workers(p_hat),
        observed_speedup=observed_speedup,
    )


def run_multichain(
    target: TargetDensity,
    config: KernelConfig,
    proposal: ProposalState,
    n_chains: int,
    on_event: Optional[Callable[[int, tuple], None]] = None,
) -> MultiChainResult:
    """Run independent chains and cross-compare their refined samples.

    Chain i draws from the (seed, i) stream and stamps process id i+1, so the
    result is reproducible for a fixed (seed, n_chains) no matter how the
    work would be scheduled. A failing chain is recorded and skipped by the
    comparison rather than aborting the rest. ``on_event`` receives
    (chain_index, event) pairs.
    """
    if n_chains < 1:
        raise ValueError("n_chains must be >= 1, got %d" % n_chains)
    summaries: List[Optional[KernelSummary]] = []
    refined: List[Optional[RefinedSample]] = []
    failures: List[Tuple[int, str]] = []
    for index in range(n_chains):
        try:
            kern = Kernel(
                target,
                config,
                proposal,
                SerialStreams(config.rng_seed, chain_index=index),
                process_id=index + 1,
            )
            while not kern.done:
                for event in kern.step():
                    if on_event is not None:
                        on_event(index, event)
            summaries.append(kern.summary())
        except SamplerError as exc:
            summaries.append(None)
            refined.append(None)
            failures.append((index, "%s: %s" % (type(exc).__name__, exc)))
            continue
        try:
            refined.append(refine_two_phase(summaries[-1].chain))
        except SamplerError as exc:
            refined.append(None)
            failures.append((index, "%s: %s" % (type(exc).__name__, exc)))
    check = cross_chain_check([r for r in refined if r is not None])
    return MultiChainResult(
        summaries=tuple(summaries),
        refined=tuple(refined),
        failures=tuple(failures),
        check=check,
    )


def run_forkjoin(
    target: TargetDensity,
    config: KernelConfig,
    proposal: ProposalState,
    worker_count: int,
    on_event: Optional[Callable[[tuple], None]] = None,
    kernel: Optional[Kernel] = None,
) -> ForkJoinResult:
    """Build one chain with P round-parallel workers.

    Adaptation, burn-in tracking and chain accounting run exactly as in the
    serial kernel (the collector commits through the same bookkeeping), so a
    one-worker fork-join run reproduces the serial chain under the per-round
    stream convention bit for bit. Pass ``kernel`` to resume a restored run;
    its tally is rebuilt from the chain's process id column.
    """
    if worker_count < 1:
        raise ValueError("worker_count must be >= 1, got %d" % worker_count)
    if kernel is None:
        kern = Kernel(
            target,
            config,
            proposal,
            RoundStreams(config.rng_seed, rank=1),
            process_id=1,
        )
    else:
        kern = kernel
    counts = [0] * worker_count
    if kern.chain.n_rows > 1:
        # resumed run: re-credit ranks from the already-built rows (row 0 is
        # the seed and belongs to no worker)
        for pid in kern.chain.process_ids[1:]:
            counts[int(pid) - 1] += 1
    while not kern.done:
        round_index = kern.chain.verbose_length
        incumbent = kern.chain.last_state()
        log_incumbent = kern.log_incumbent
        winner: Optional[StepOutcome] = None
        winner_rank = 0
        for rank in range(1, worker_count + 1):
            stream = rng_mod.round_stream(config.rng_seed, round_index, rank)
            outcome = propose_cascade(
                target,
                kern.proposal,
                incumbent,
                log_incumbent,
                config.dr_stage_count,
                stream,
            )
            kern.count_attempts(outcome.proposals_consumed)
            if outcome.accepted_at_stage != REJECTED:
                winner = outcome
                winner_rank = rank
                break
        if winner is None:
            events = kern.commit(
                StepOutcome(incumbent, log_incumbent, REJECTED, 0), 0
            )
        else:
            counts[winner_rank - 1] += 1
            events = kern.commit(winner, winner_rank)
        if on_event is not None:
            for event in events:
                on_event(event)
    if on_event is not None:
        on_event(("done", kern.chain.n_rows))
    tally = ContributionTally(worker_count=worker_count, counts=tuple(counts))
    p_hat = fit_geometric(tally) if tally.total >= 1 else 1.0
    return ForkJoinResult(
        summary=kern.summary(),
        tally=tally,
        speedup=build_speedup_report(p_hat),
    )
