"""Deterministic random-stream construction and exact state transport.

All randomness in the package flows through numpy Generators backed by
PCG64.  Streams are derived from integer index tuples fed to SeedSequence,
so every consumer (a serial run, chain i of a multi-chain run, rank r of
round k in a fork-join run) owns an independent, reconstructible stream.
"""

from __future__ import annotations

import numpy as np


def serial_stream(seed: int) -> np.random.Generator:
    """Stream for a single-chain run. Identical to chain_stream(seed, 0)."""
    return chain_stream(seed, 0)


def chain_stream(seed: int, chain_index: int) -> np.random.Generator:
    """Independent stream for one chain of a multi-chain run."""
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=(int(chain_index),))
    return np.random.Generator(np.random.PCG64(ss))


def round_stream(seed: int, round_index: int, rank: int) -> np.random.Generator:
    """Per-round, per-rank stream for the fork-join protocol.

    rank is 1-based; every (round, rank) pair gets its own stream so a
    worker's draws never depend on scheduling or on other workers.
    """
    ss = np.random.SeedSequence(
        entropy=int(seed), spawn_key=(int(round_index), int(rank))
    )
    return np.random.Generator(np.random.PCG64(ss))


def stream_state(gen: np.random.Generator) -> dict:
    """Bit-generator state as a JSON-safe dict (Python ints are exact)."""
    st = gen.bit_generator.state
    return {
        "bit_generator": st["bit_generator"],
        "state": int(st["state"]["state"]),
        "inc": int(st["state"]["inc"]),
        "has_uint32": int(st["has_uint32"]),
        "uinteger": int(st["uinteger"]),
    }


def restore_stream(state: dict) -> np.random.Generator:
    """Rebuild a Generator bit-for-bit from stream_state output."""
    if state.get("bit_generator") != "PCG64":
        raise ValueError("unsupported bit generator %r" % state.get("bit_generator"))
    bg = np.random.PCG64()
    bg.state = {
        "bit_generator": "PCG64",
        "state": {"state": int(state["state"]), "inc": int(state["inc"])},
        "has_uint32": int(state["has_uint32"]),
        "uinteger": int(state["uinteger"]),
    }
    return np.random.Generator(bg)
