"""Independent reference implementations used to cross-check the package.

Everything here is written against the *definitions* (dense attention with a
boolean visibility mask, scalar-loop metrics) rather than sharing code with
the implementations under test.
"""

import math

import numpy as np

from videdit.attention import AttentionMode


def mode_mask(mode: AttentionMode, num_frames: int, tokens_per_frame: int) -> np.ndarray:
    """Boolean visibility mask over the flattened (F*N) token axis.

    With a single frame every mode degenerates to plain self-attention, so
    all masks collapse to the full within-frame block.
    """
    f, n = num_frames, tokens_per_frame
    total = f * n
    mask = np.zeros((total, total), dtype=bool)
    if f == 1:
        mask[:] = True
        return mask
    if mode is AttentionMode.SELF:
        for i in range(f):
            mask[i * n : (i + 1) * n, i * n : (i + 1) * n] = True
    elif mode is AttentionMode.SC:
        for i in range(f):
            rows = slice(i * n, (i + 1) * n)
            if i == 0:
                mask[rows, 0:n] = True
            else:
                mask[rows, 0:n] = True
                mask[rows, (i - 1) * n : i * n] = True
    elif mode is AttentionMode.TEMPORAL_ONLY:
        for i in range(f):
            for j in range(f):
                for tok in range(n):
                    mask[i * n + tok, j * n + tok] = True
    elif mode is AttentionMode.ST:
        mask[:] = True
    else:
        raise ValueError(mode)
    return mask


def dense_masked_attention(features, mask, w_q, w_k, w_v, w_out, heads=1):
    """Dense attention over all F*N tokens with a pre-softmax boolean mask.

    float64 numpy with an explicit per-head loop and hand-rolled stable
    softmax; returns an F x N x D array.
    """
    feats = np.asarray(features, dtype=np.float64)
    f, n, d = feats.shape
    wq = np.asarray(w_q, dtype=np.float64)
    wk = np.asarray(w_k, dtype=np.float64)
    wv = np.asarray(w_v, dtype=np.float64)
    wo = np.asarray(w_out, dtype=np.float64)

    x = feats.reshape(f * n, d)
    q, k, v = x @ wq.T, x @ wk.T, x @ wv.T
    dh = d // heads
    out = np.zeros_like(x)
    for h in range(heads):
        cols = slice(h * dh, (h + 1) * dh)
        scores = (q[:, cols] @ k[:, cols].T) / math.sqrt(dh)
        scores = np.where(mask, scores, -np.inf)
        shifted = scores - scores.max(axis=1, keepdims=True)
        weights = np.exp(shifted)
        weights[~mask] = 0.0
        weights /= weights.sum(axis=1, keepdims=True)
        out[:, cols] = weights @ v[:, cols]
    return (out @ wo.T).reshape(f, n, d)


def scalar_mse(a, b) -> float:
    """Plain python-loop mean squared error in float64."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    total = 0.0
    for x, y in zip(a, b):
        total += (x - y) ** 2
    return total / len(a)
