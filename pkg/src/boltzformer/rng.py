"""Counter-based random streams (Philox4x64-10 via numpy).

A stream is identified by ``(seed, *key)``. The key is hashed by numpy's
``SeedSequence`` into a Philox key, so the draws for a given identity are the
same on every platform and independent of what other streams consumed.

Decoder layout: the stream ``(seed, example_key, layer)`` yields an
``(m, n_cells)`` block of uniforms; row ``i`` belongs to query ``i``.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np


def substream(seed: int, *key: int) -> np.random.Generator:
    ss = np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in key))
    return np.random.Generator(np.random.Philox(ss))


def layer_uniforms(seed: int, example_keys: Sequence[int], layer: int, m: int, n_cells: int) -> np.ndarray:
    """Uniforms of shape ``(B, m, n_cells)`` for one decoder layer."""
    out = np.empty((len(example_keys), m, n_cells))
    for b, key in enumerate(example_keys):
        out[b] = substream(seed, key, layer).random((m, n_cells))
    return out
