"""Deterministic random stream derivation.

Every random decision in a run draws from a generator derived from the run
seed plus a short key path (stream label and integer indices). Distinct
key paths give statistically independent streams, so e.g. the occlusion
gate never perturbs the shuffle order, and per-image streams can be drawn
in any order (or in parallel) without changing results.
"""

from __future__ import annotations

import numpy as np

# Stream labels are mapped to fixed integers so key paths are stable
# across interpreter runs (no reliance on hash()).
_STREAM_IDS = {
    "init": 1,
    "shuffle": 2,
    "augment": 3,
    "gate": 4,
    "occlude": 5,
    "split": 6,
    "synth_bg": 7,
    "synth_pos": 8,
    "synth_glyph": 9,
    "erase": 10,
}


def derive_rng(seed: int, stream: str, *indices: int) -> np.random.Generator:
    """Return a fresh Generator for (seed, stream, *indices).

    Same arguments always produce the same stream; any change to an index
    produces an unrelated stream.
    """
    try:
        sid = _STREAM_IDS[stream]
    except KeyError:
        raise ValueError(f"unknown stream label: {stream!r}") from None
    entropy = [int(seed) & 0xFFFFFFFFFFFFFFFF, sid, *[int(i) for i in indices]]
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))


def open_unit_uniform(rng: np.random.Generator) -> float:
    """Uniform draw from the open interval (0, 1).

    Used for the per-batch gate variable r: with r strictly positive,
    a probability of 0 can never fire the gate, and with r strictly
    below 1 a probability-1 configuration always fires it.
    """
    # 53-bit integer in [1, 2^53 - 1] keeps the endpoints out exactly.
    return int(rng.integers(1, (1 << 53))) / float(1 << 53)
