"""Semantic token selection and cache-refilled pruned forwards.

The spatial block's prior-weight map scores each (h, w) position. Camera
attention keeps, per frame, the top-K positions of the view-averaged map;
motion attention keeps, per view, the top-K of the frame-averaged map.
Attention is computed only on kept positions; everything else is copied
from the previous step's cached attention output (or zeros, for the
degradation ablation). The FFN always runs on the full refilled tensor,
and the spatial block itself is never pruned.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .attention import (
    BlockOutput,
    BlockParams,
    ChainWeights,
    PriorSet,
    axis_attention,
    ffn,
    spatial_forward,
)
from .cache import RollingCache
from .core import CostCounters, Rng
from .errors import ParameterError, ShapeError

__all__ = [
    "TokenIndexSet",
    "token_count",
    "identify_tokens",
    "random_tokens",
    "pruned_camera_forward",
    "pruned_motion_forward",
    "pruned_chain_forward",
]


@dataclass
class TokenIndexSet:
    """Per-frame and per-view kept spatial indices over flattened H*W."""

    i_c: np.ndarray  # [F, K], strictly increasing per row
    i_m: np.ndarray  # [V, K]
    comp_c: np.ndarray  # [F, L-K], complements
    comp_m: np.ndarray  # [V, L-K]
    k: int
    ratio: float

    @classmethod
    def from_keep_lists(cls, i_c: np.ndarray, i_m: np.ndarray, length: int,
                        ratio: float) -> "TokenIndexSet":
        k = i_c.shape[1]
        full = np.arange(length)
        comp_c = np.stack([np.setdiff1d(full, row) for row in i_c])
        comp_m = np.stack([np.setdiff1d(full, row) for row in i_m])
        return cls(i_c, i_m, comp_c, comp_m, k, ratio)


def token_count(h: int, w: int, ratio: float, per_axis: bool = False) -> int:
    """Number of kept spatial positions for a pruning ratio.

    Default reading: a fraction of the H*W positions. The per-axis reading
    (ratio applied to H and W independently) is kept for the ablation
    sweep.
    """
    if not 0.0 < ratio <= 1.0:
        raise ParameterError(f"ratio {ratio} outside (0, 1]")
    if per_axis:
        return max(1, math.ceil(ratio * h)) * max(1, math.ceil(ratio * w))
    return max(1, math.ceil(ratio * h * w))


def _row_topk(scores: np.ndarray, k: int) -> np.ndarray:
    """Row-wise top-k indices, ascending, ties to the lower index."""
    order = np.argsort(-scores, axis=-1, kind="stable")[:, :k]
    return np.sort(order, axis=-1)


def identify_tokens(q_s: np.ndarray, ratio: float,
                    per_axis: bool = False) -> TokenIndexSet:
    """Select kept tokens from the spatial semantic map [F, V, H, W]."""
    if q_s.ndim != 4:
        raise ShapeError(f"semantic map must be [F,V,H,W], got {q_s.shape}")
    f, v, h, w = q_s.shape
    l = h * w
    k = token_count(h, w, ratio, per_axis)
    flat = q_s.reshape(f, v, l)
    i_c = _row_topk(flat.mean(axis=1), k)  # mean over views, per frame
    i_m = _row_topk(flat.mean(axis=0), k)  # mean over frames, per view
    return TokenIndexSet.from_keep_lists(i_c, i_m, l, ratio)


def random_tokens(f: int, v: int, h: int, w: int, ratio: float, rng: Rng,
                  per_axis: bool = False) -> TokenIndexSet:
    """Uniformly random keep lists with the same structure (ablation)."""
    l = h * w
    k = token_count(h, w, ratio, per_axis)
    def draw(rows: int) -> np.ndarray:
        out = np.empty((rows, k), dtype=np.int64)
        for r in range(rows):
            # k distinct indices via a seeded uniform shuffle key
            out[r] = np.sort(np.argsort(rng.uniform(l), kind="stable")[:k])
        return out
    return TokenIndexSet.from_keep_lists(draw(f), draw(v), l, ratio)


def _refill_along(positions_axis1: np.ndarray, computed: np.ndarray,
                  refill: np.ndarray) -> np.ndarray:
    """Overwrite refill[g, pos, ...] with computed rows, per group g."""
    out = refill.copy()
    idx = positions_axis1[:, :, None, None]
    np.put_along_axis(out, np.broadcast_to(idx, computed.shape), computed, axis=1)
    return out


def pruned_camera_forward(z_s: np.ndarray, k_c: np.ndarray, w: BlockParams,
                          idx: TokenIndexSet, cached_a_c: np.ndarray,
                          counters: CostCounters | None = None) -> BlockOutput:
    """Camera attention on kept positions only, complements from cache."""
    f, v, h, ww, c = z_s.shape
    l = h * ww
    if cached_a_c.shape != z_s.shape:
        raise ShapeError("cached camera attention shape mismatch")
    # [F, L, V, C] sequence layout, then keep K positions per frame.
    seq = np.ascontiguousarray(z_s.reshape(f, v, l, c).transpose(0, 2, 1, 3))
    kept = np.take_along_axis(seq, idx.i_c[:, :, None, None], axis=1)
    prior = np.take_along_axis(
        k_c.reshape(f, l, c), idx.i_c[:, :, None], axis=1
    )
    att, _ = axis_attention(
        kept.reshape(f * idx.k, v, c),
        prior.reshape(f * idx.k, 1, c),
        w, counters, block="camera",
    )
    cached_seq = np.ascontiguousarray(
        cached_a_c.reshape(f, v, l, c).transpose(0, 2, 1, 3)
    )
    full = _refill_along(idx.i_c, att.reshape(f, idx.k, v, c), cached_seq)
    attention = full.transpose(0, 2, 1, 3).reshape(f, v, h, ww, c)
    if counters is not None:
        counters.acquire_workspace(attention.size)
    out = ffn((z_s + attention).reshape(f * v, l, c), w, counters)
    return BlockOutput(out=out.reshape(f, v, h, ww, c), attention=attention)


def pruned_motion_forward(z_c: np.ndarray, k_m: np.ndarray, w: BlockParams,
                          idx: TokenIndexSet, cached_a_m: np.ndarray,
                          counters: CostCounters | None = None) -> BlockOutput:
    """Motion attention on kept positions only, complements from cache."""
    f, v, h, ww, c = z_c.shape
    l = h * ww
    if cached_a_m.shape != z_c.shape:
        raise ShapeError("cached motion attention shape mismatch")
    # [V, L, F, C] sequence layout, then keep K positions per view.
    seq = np.ascontiguousarray(z_c.reshape(f, v, l, c).transpose(1, 2, 0, 3))
    kept = np.take_along_axis(seq, idx.i_m[:, :, None, None], axis=1)
    prior = np.take_along_axis(
        k_m.reshape(v, l, c), idx.i_m[:, :, None], axis=1
    )
    att, _ = axis_attention(
        kept.reshape(v * idx.k, f, c),
        prior.reshape(v * idx.k, 1, c),
        w, counters, block="motion",
    )
    cached_seq = np.ascontiguousarray(
        cached_a_m.reshape(f, v, l, c).transpose(1, 2, 0, 3)
    )
    full = _refill_along(idx.i_m, att.reshape(v, idx.k, f, c), cached_seq)
    attention = full.transpose(2, 0, 1, 3).reshape(f, v, h, ww, c)
    if counters is not None:
        counters.acquire_workspace(attention.size)
    out = ffn((z_c + attention).reshape(f * v, l, c), w, counters)
    return BlockOutput(out=out.reshape(f, v, h, ww, c), attention=attention)


def pruned_chain_forward(
    z: np.ndarray,
    priors: PriorSet,
    w: ChainWeights,
    ratio: float,
    cache: RollingCache,
    layer: int,
    step: int,
    counters: CostCounters | None = None,
    per_axis: bool = False,
    random_rng: Rng | None = None,
    zero_refill: bool = False,
) -> np.ndarray:
    """One pruning-mode chain pass for a layer.

    Spatial runs dense and yields the semantic map; camera and motion run
    pruned with complements refilled from the cache (peeked, so the same
    entries also feed similarity recording). The step's own full-shape
    outputs then replace the previous entries.

    With ``random_rng`` set, keep lists are drawn uniformly instead of from
    the semantic map (ablation). With ``zero_refill``, complements are
    zero-filled instead of cache-filled (degradation ablation); the cache
    is still maintained.
    """
    f, v, h, ww, c = z.shape
    so = spatial_forward(z, priors.k_s, w.spatial, counters)
    if random_rng is not None:
        idx = random_tokens(f, v, h, ww, ratio, random_rng, per_axis)
    else:
        idx = identify_tokens(so.semantic, ratio, per_axis)

    # Each previous-step entry is peeked for refill and compared while it
    # is still cached, then consumed as soon as its block is superseded.
    cache.record_similarity(layer, "spatial", so.attention, step)
    cache.retrieve(layer, "spatial")

    refill_c = cache.peek(layer, "camera")
    if zero_refill:
        refill_c = np.zeros_like(refill_c)
    co = pruned_camera_forward(so.out, priors.k_c, w.camera, idx, refill_c,
                               counters)
    cache.record_similarity(layer, "camera", co.attention, step)
    cache.retrieve(layer, "camera")

    refill_m = cache.peek(layer, "motion")
    if zero_refill:
        refill_m = np.zeros_like(refill_m)
    mo = pruned_motion_forward(co.out, priors.k_m, w.motion, idx, refill_m,
                               counters)
    cache.record_similarity(layer, "motion", mo.attention, step)
    cache.retrieve(layer, "motion")

    cache.store(layer, so.attention, co.attention, mo.attention, step,
                from_workspace=True)
    return mo.out
