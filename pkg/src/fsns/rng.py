"""Counter-based random number generation with derived keys.

Every stochastic draw in this package comes from a numpy Philox generator
whose 128-bit key is a pure function of a user seed plus a few integer or
string context words (stream id, step index, purpose tag).  Reproducing any
draw therefore requires only those words, never the history of earlier draws.
That is what makes bit-exact checkpoint resume and ensemble-order
independence possible: trajectory `j` at step `s` uses the key derived from
(seed, j, s, purpose) no matter which worker executes it or in which order.

Key derivation is a splitmix64 sponge: absorb the context words one 64-bit
chunk at a time, then squeeze two output words.  splitmix64 is a bijective
mixer with good avalanche behaviour, so distinct contexts give independent
Philox keys for all practical purposes.
"""

from __future__ import annotations

import numpy as np

_MASK64 = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15


def _mix(z: int) -> int:
    """splitmix64 output function (finalizer)."""
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9 & _MASK64
    z = (z ^ (z >> 27)) * 0x94D049BB133111EB & _MASK64
    return z ^ (z >> 31)


def _words(item) -> list[int]:
    """Encode one context item as a list of 64-bit words (length-prefixed for strings)."""
    if isinstance(item, str):
        raw = item.encode("utf8")
        nchunks = max(1, (len(raw) + 7) // 8)
        value = int.from_bytes(raw.ljust(8 * nchunks, b"\0"), "little")
        return [len(raw)] + [(value >> (64 * i)) & _MASK64 for i in range(nchunks)]
    if isinstance(item, (bool, np.bool_)):
        raise TypeError("boolean context words are ambiguous; use 0/1 explicitly")
    return [int(item) & _MASK64]


def derive_key(seed: int, *context) -> tuple[int, int]:
    """Derive a 2x64-bit Philox key from a seed and context words.

    Args:
      seed: master seed (any Python int; only the low 64 bits enter).
      *context: integers or short strings identifying the draw site, e.g.
        (stream_id, step, "force").  Strings are length-prefixed so that
        ("ab", "c") and ("a", "bc") derive different keys.

    Returns:
      Tuple (k0, k1) of unsigned 64-bit integers.
    """
    state = (int(seed) & _MASK64) ^ 0xD1B54A32D192ED03
    for item in context:
        for w in _words(item):
            state = (state + _GOLDEN) & _MASK64
            state ^= _mix(w)
    state = (state + _GOLDEN) & _MASK64
    k0 = _mix(state)
    state = (state + _GOLDEN) & _MASK64
    k1 = _mix(state)
    return k0, k1


def make_generator(seed: int, *context) -> np.random.Generator:
    """Return a numpy Generator on a Philox stream keyed by (seed, *context)."""
    k0, k1 = derive_key(seed, *context)
    bitgen = np.random.Philox(key=np.array([k0, k1], dtype=np.uint64))
    return np.random.Generator(bitgen)
