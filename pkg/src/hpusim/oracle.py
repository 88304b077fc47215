"""Double-precision reference attention.

Deliberately naive: whole-sequence softmax on float64 copies of the inputs,
no tiling and no access to the KV store.
"""

import numpy as np


def reference_attention(q, k, v) -> np.ndarray:
    """softmax(q K^T / sqrt(d)) V for ``q`` of shape (g, d), ``k``/``v`` (L, d)."""
    q = np.asarray(q, dtype=np.float64)
    k = np.asarray(k, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    scores = q @ k.T / np.sqrt(q.shape[-1])
    scores -= scores.max(axis=-1, keepdims=True)
    p = np.exp(scores)
    p /= p.sum(axis=-1, keepdims=True)
    return p @ v
