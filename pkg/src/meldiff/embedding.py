import numpy as np


def step_embedding(t, dim=128):
    """Sinusoidal step code: e[2k] = sin(t w_k), e[2k+1] = cos(t w_k), w_k = 10000^(-2k/dim).

    ``t`` may be a scalar (returns ``[dim]``) or an array (returns ``t.shape + (dim,)``).
    """
    if dim <= 0 or dim % 2:
        raise ValueError(f"embedding dim must be positive and even, got {dim}")
    t = np.asarray(t, dtype=np.float64)
    freqs = 10000.0 ** (-np.arange(0, dim, 2, dtype=np.float64) / dim)
    angles = t[..., None] * freqs
    out = np.empty(t.shape + (dim,))
    out[..., 0::2] = np.sin(angles)
    out[..., 1::2] = np.cos(angles)
    return out
