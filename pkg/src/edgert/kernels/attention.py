"""Fused attention with an in-place KV cache.

The cache is a ring buffer when a sliding window is configured; absolute
token positions live in a separate position array, and the causal / window
mask is computed from that array each step, so cache memory is never
shifted. Attention itself is a streaming (online-softmax) pass over cache
blocks: the full score matrix is never materialized.

With ``quantize_cache`` the K/V states hold per-row (per cached token)
affine int8 codes next to a [capacity, 2] parameter array per cache, and
rows are dequantized block by block inside the streaming loop.

Worked example of the ring indexing (capacity 4, window 3):

    step p:      0    1    2    3    4    5
    slot p%4:    0    1    2    3    0    1
    positions: [0,-,-,-] ... [4,1,2,3] at p=4 -> mask keeps pos in (1, 4]

State writes happen through the argument views, which the runtime binds to
the state arena; this is the sanctioned non-computational update path.
"""

from __future__ import annotations

import numpy as np

from ..errors import ContextOverflow
from .registry import register_kernel
from .quantized import choose_qparams_per_token

_BLOCK = 32


def _append_rows(cache, qparams, new_rows, slot, quantized):
    """Store one token's K or V rows (all heads) at a ring slot."""
    if quantized:
        for h in range(new_rows.shape[0]):
            qp = choose_qparams_per_token(new_rows[h][None, :])[0]
            scale, zp = float(qp[0]), float(qp[1])
            codes = np.clip(np.rint(new_rows[h].astype(np.float64) / scale) + zp, -128, 127)
            cache[h, slot] = codes.astype(np.int8)
            if h == 0:
                qparams[slot] = qp
    else:
        cache[:, slot] = new_rows


def _dequant_block(block, qp_block):
    scales = qp_block[:, 0:1]
    zps = qp_block[:, 1:2]
    return (block.astype(np.float32) - zps) * scales


def _streaming_attend(q_vec, keys_f32, vals_f32, visible, k_cache_h, v_cache_h,
                      k_qp, v_qp, quantized, scale):
    """One query against the visible cache slots, online softmax over
    fixed-size blocks."""
    capacity = visible.shape[0]
    m = np.float32(-np.inf)
    denom = np.float32(0.0)
    acc = np.zeros(q_vec.shape[0], dtype=np.float32)
    for start in range(0, capacity, _BLOCK):
        stop = min(start + _BLOCK, capacity)
        vis = visible[start:stop]
        if not vis.any():
            continue
        if quantized:
            kb = _dequant_block(k_cache_h[start:stop], k_qp[start:stop])
            vb = _dequant_block(v_cache_h[start:stop], v_qp[start:stop])
        else:
            kb = keys_f32[start:stop]
            vb = vals_f32[start:stop]
        scores = (kb @ q_vec) * scale
        scores = np.where(vis, scores, np.float32(-np.inf))
        m_new = max(m, np.float32(scores.max()))
        correction = np.exp(m - m_new) if np.isfinite(m) else np.float32(0.0)
        weights = np.exp(scores - m_new, where=vis, out=np.zeros_like(scores))
        denom = denom * correction + weights.sum()
        acc = acc * correction + weights @ vb
        m = m_new
    return acc / denom


@register_kernel("custom.sdpa_with_kv_cache",
                 ("F32", "F32", "F32", "F32", "F32", "I64"), mutates_state=True)
@register_kernel("custom.sdpa_with_kv_cache",
                 ("F32", "F32", "F32", "I8", "I8", "I64", "F32", "F32"), mutates_state=True)
def _sdpa_with_kv_cache(args, attrs, out):
    quantized = bool(attrs.get("quantize_cache", False))
    window = int(attrs.get("window", 0))
    q, k_new, v_new, k_cache, v_cache, pos = args[:6]
    k_qp = args[6] if quantized else None
    v_qp = args[7] if quantized else None

    squeeze = q.ndim == 2
    if squeeze:
        q, k_new, v_new = q[None], k_new[None], v_new[None]
        k_cache, v_cache = k_cache[None], v_cache[None]

    n_heads, n_step, head_dim = q.shape
    capacity = k_cache.shape[1]
    count = int(pos.max()) + 1
    if window == 0 and count + n_step > capacity:
        raise ContextOverflow(f"cache holds {count} of {capacity}; cannot append {n_step}")

    for s in range(n_step):
        p = count + s
        slot = p % capacity if window else p
        pos[slot] = p
        _append_rows(k_cache, k_qp, k_new[:, s], slot, quantized)
        _append_rows(v_cache, v_qp, v_new[:, s], slot, quantized)

    scale = np.float32(1.0 / np.sqrt(head_dim))
    result = np.empty((n_heads, n_step, head_dim), dtype=np.float32)
    for s in range(n_step):
        p = count + s
        visible = (pos >= 0) & (pos <= p)
        if window:
            visible &= pos > p - window
        visible = np.asarray(visible)
        for h in range(n_heads):
            result[h, s] = _streaming_attend(
                q[h, s], k_cache[h], v_cache[h], visible,
                k_cache[h], v_cache[h], k_qp, v_qp, quantized, scale)

    out.write(result[0] if squeeze else result)
