"""Compact weighted chain storage.

A Markov chain that rejects often repeats states; storing each visited state
once with a repeat count ("weight") shrinks memory and disk by the mean
rejection run length. The expansion back to the full realization is the
verbose chain. Rows also carry per-row bookkeeping columns that the output
files report: contributing process, delayed-rejection stage, running
acceptance rate, adaptation measure, running burn-in location.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator, Optional, Sequence, Tuple

import numpy as np

from .errors import DimensionMismatch, EmptyRange

__all__ = [
    "ChainRow",
    "CompactChain",
    "WeightedMoments",
    "append_or_increment",
    "to_verbose",
    "chain_stats",
    "compression_factor",
]

_INITIAL_CAPACITY = 1024


@dataclass(eq=False)
class ChainRow:
    """One unique visited state plus its bookkeeping columns."""

    process_id: int
    dr_stage: int
    mean_acceptance_rate: float
    adaptation_measure: float
    burnin_location: int
    weight: int
    log_func: float
    state: np.ndarray


class CompactChain:
    """Growable column store for chain rows.

    Columns live in preallocated numpy arrays that double on demand; the
    kernel appends one row per accepted state and bumps the last row's weight
    on rejection, so appends must be cheap. Single writer by contract.
    """

    def __init__(
        self,
        dimension: int,
        variable_names: Optional[Sequence[str]] = None,
    ):
        if dimension < 1:
            raise DimensionMismatch("dimension must be >= 1, got %d" % dimension)
        if variable_names is None:
            variable_names = tuple("Var%d" % (i + 1) for i in range(dimension))
        else:
            variable_names = tuple(str(v) for v in variable_names)
            if len(variable_names) != dimension:
                raise DimensionMismatch(
                    "%d variable names for dimension %d"
                    % (len(variable_names), dimension)
                )
        self.dimension = dimension
        self.variable_names = variable_names
        cap = _INITIAL_CAPACITY
        self._process_id = np.zeros(cap, dtype=np.int64)
        self._dr_stage = np.zeros(cap, dtype=np.int64)
        self._mean_acceptance_rate = np.zeros(cap, dtype=np.float64)
        self._adaptation_measure = np.zeros(cap, dtype=np.float64)
        self._burnin_location = np.zeros(cap, dtype=np.int64)
        self._weight = np.zeros(cap, dtype=np.int64)
        self._log_func = np.zeros(cap, dtype=np.float64)
        self._verbose_start = np.zeros(cap, dtype=np.int64)
        self._states = np.zeros((cap, dimension), dtype=np.float64)
        self._n = 0
        self._verbose = 0

    @property
    def n_rows(self) -> int:
        return self._n

    @property
    def verbose_length(self) -> int:
        return self._verbose

    # read-only column views over the filled prefix
    @property
    def weights(self) -> np.ndarray:
        return self._weight[: self._n]

    @property
    def log_funcs(self) -> np.ndarray:
        return self._log_func[: self._n]

    @property
    def states(self) -> np.ndarray:
        return self._states[: self._n]

    @property
    def process_ids(self) -> np.ndarray:
        return self._process_id[: self._n]

    @property
    def dr_stages(self) -> np.ndarray:
        return self._dr_stage[: self._n]

    @property
    def mean_acceptance_rates(self) -> np.ndarray:
        return self._mean_acceptance_rate[: self._n]

    @property
    def adaptation_measures(self) -> np.ndarray:
        return self._adaptation_measure[: self._n]

    @property
    def burnin_locations(self) -> np.ndarray:
        return self._burnin_location[: self._n]

    @property
    def verbose_starts(self) -> np.ndarray:
        return self._verbose_start[: self._n]

    def _grow(self):
        cap = self._process_id.size * 2
        for name in (
            "_process_id",
            "_dr_stage",
            "_mean_acceptance_rate",
            "_adaptation_measure",
            "_burnin_location",
            "_weight",
            "_log_func",
            "_verbose_start",
        ):
            old = getattr(self, name)
            new = np.zeros(cap, dtype=old.dtype)
            new[: self._n] = old[: self._n]
            setattr(self, name, new)
        states = np.zeros((cap, self.dimension), dtype=np.float64)
        states[: self._n] = self._states[: self._n]
        self._states = states

    def append_row(self, row: ChainRow) -> None:
        state = np.asarray(row.state, dtype=float)
        if state.shape != (self.dimension,):
            raise DimensionMismatch(
                "state has shape %r, chain dimension is %d"
                % (state.shape, self.dimension)
            )
        if row.weight < 1:
            raise ValueError("weight must be >= 1, got %d" % row.weight)
        if self._n == self._process_id.size:
            self._grow()
        i = self._n
        self._process_id[i] = row.process_id
        self._dr_stage[i] = row.dr_stage
        self._mean_acceptance_rate[i] = row.mean_acceptance_rate
        self._adaptation_measure[i] = row.adaptation_measure
        self._burnin_location[i] = row.burnin_location
        self._weight[i] = row.weight
        self._log_func[i] = row.log_func
        self._verbose_start[i] = self._verbose
        self._states[i] = state
        self._n += 1
        self._verbose += row.weight

    def increment_last(self, extra_weight: int = 1) -> None:
        if self._n == 0:
            raise EmptyRange("cannot increment an empty chain")
        self._weight[self._n - 1] += extra_weight
        self._verbose += extra_weight

    def restamp_last(
        self, mean_acceptance_rate: float, burnin_location: int
    ) -> None:
        """Refresh the running columns of the live (last) row."""
        if self._n == 0:
            raise EmptyRange("cannot restamp an empty chain")
        self._mean_acceptance_rate[self._n - 1] = mean_acceptance_rate
        self._burnin_location[self._n - 1] = burnin_location

    def last_state(self) -> np.ndarray:
        if self._n == 0:
            raise EmptyRange("empty chain has no last state")
        return self._states[self._n - 1]

    def row(self, i: int) -> ChainRow:
        if not 0 <= i < self._n:
            raise IndexError("row %d out of range [0, %d)" % (i, self._n))
        return ChainRow(
            process_id=int(self._process_id[i]),
            dr_stage=int(self._dr_stage[i]),
            mean_acceptance_rate=float(self._mean_acceptance_rate[i]),
            adaptation_measure=float(self._adaptation_measure[i]),
            burnin_location=int(self._burnin_location[i]),
            weight=int(self._weight[i]),
            log_func=float(self._log_func[i]),
            state=self._states[i].copy(),
        )

    def rows(self) -> Iterator[ChainRow]:
        for i in range(self._n):
            yield self.row(i)


def append_or_increment(chain: CompactChain, row: ChainRow) -> CompactChain:
    """Add a visited state; a repeat of the last state merges into it.

    "Same state" is exact floating-point equality: the kernel hands back the
    incumbent array unmodified on rejection, so equality is structural and
    never tolerance-based. A reappearance of an earlier state after any other
    state starts a new row. Mutates and returns ``chain``.
    """
    state = np.asarray(row.state, dtype=float)
    if state.shape != (chain.dimension,):
        raise DimensionMismatch(
            "state has shape %r, chain dimension is %d"
            % (state.shape, chain.dimension)
        )
    if chain.n_rows > 0 and np.array_equal(chain.last_state(), state):
        chain.increment_last(row.weight)
        chain.restamp_last(row.mean_acceptance_rate, row.burnin_location)
    else:
        chain.append_row(row)
    return chain


def to_verbose(chain: CompactChain) -> Tuple[np.ndarray, np.ndarray]:
    """Expand to the full Markov realization.

    Returns (log_funcs, states) with each row repeated ``weight`` times in
    order; total length is the verbose length.
    """
    w = chain.weights
    return np.repeat(chain.log_funcs, w), np.repeat(chain.states, w, axis=0)


def chain_stats(
    chain: CompactChain, from_verbose_index: int = 0
) -> Tuple[np.ndarray, np.ndarray, float]:
    """Weighted moments and acceptance rate over a verbose tail.

    Moments cover verbose indices >= from_verbose_index with population
    normalization (divide by total weight); the acceptance rate is the number
    of rows intersecting the range over the verbose states in it.
    """
    total = chain.verbose_length
    if not 0 <= from_verbose_index < total:
        raise EmptyRange(
            "from_verbose_index %d outside [0, %d)" % (from_verbose_index, total)
        )
    starts = chain.verbose_starts
    weights = chain.weights
    ends = starts + weights
    first = int(np.searchsorted(ends, from_verbose_index, side="right"))
    eff = weights[first:].astype(np.float64).copy()
    eff[0] = float(ends[first] - from_verbose_index)
    points = chain.states[first:]
    w_total = float(eff.sum())
    mean = (eff @ points) / w_total
    centered = points - mean
    cov = (centered.T * eff) @ centered / w_total
    acceptance = (chain.n_rows - first) / w_total
    return mean, cov, float(acceptance)


def compression_factor(chain: CompactChain) -> float:
    """Verbose length over compact length; >= 1 by construction."""
    if chain.n_rows == 0:
        raise EmptyRange("empty chain has no compression factor")
    return chain.verbose_length / chain.n_rows


class WeightedMoments:
    """Streaming weighted mean and covariance, one rank-1 update per state.

    The symmetric update keeps the accumulator replayable: feeding the same
    sequence of (x, w) pairs reproduces bit-identical values, which the
    restart contract relies on. Covariance is population-normalized.
    """

    __slots__ = ("dimension", "total_weight", "mean", "m2")

    def __init__(self, dimension: int):
        self.dimension = dimension
        self.total_weight = 0.0
        self.mean = np.zeros(dimension)
        self.m2 = np.zeros((dimension, dimension))

    def update(self, x: np.ndarray, weight: float = 1.0) -> None:
        self.total_weight += weight
        frac = weight / self.total_weight
        delta = x - self.mean
        self.mean = self.mean + frac * delta
        self.m2 = self.m2 + weight * (1.0 - frac) * np.outer(delta, delta)

    def covariance(self) -> np.ndarray:
        if self.total_weight <= 0.0:
            raise EmptyRange("no observations accumulated")
        return self.m2 / self.total_weight
