"""Deterministic dense-tensor primitives: matmul, softmax, selection,
scatter/gather, a seeded PRNG, and cost instrumentation.

Everything is float64 and single-threaded-deterministic: the same inputs
produce bit-identical outputs on every call. All array values flowing
through public operations are finite; callers can assert this cheaply with
:func:`assert_finite`.
"""

from __future__ import annotations

import ctypes
import math
import threading
from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateInputError, ParameterError, ShapeError

__all__ = [
    "CostCounters",
    "Rng",
    "matmul",
    "scratch",
    "softmax_last",
    "softmax_last_inplace",
    "tune_allocator",
    "cosine",
    "topk_indices",
    "gather_tokens",
    "scatter_refill",
    "psnr",
    "assert_finite",
]

PSNR_INF = math.inf


@dataclass
class CostCounters:
    """Hardware-independent cost model for a run.

    FLOPs are exact multiply-add counts of the matmuls involved plus one
    count per softmax exponential. ``live_elements`` models allocated
    float64 elements: persistent allocations (cache entries) go through
    :meth:`acquire`/:meth:`release`, while per-step transients go through
    :meth:`acquire_workspace` and are dropped in one shot by
    :meth:`release_workspace` at a step boundary.
    """

    flops_attention: int = 0
    flops_ffn: int = 0
    flops_mixing: int = 0
    live_elements: int = 0
    peak_live_elements: int = 0
    attention_by_block: dict[str, int] = field(
        default_factory=lambda: {"spatial": 0, "camera": 0, "motion": 0}
    )
    _workspace: int = 0

    def add_attention(self, flops: int, block: str | None = None) -> None:
        self.flops_attention += flops
        if block is not None:
            self.attention_by_block[block] += flops

    def add_ffn(self, flops: int) -> None:
        self.flops_ffn += flops

    def add_mixing(self, flops: int) -> None:
        self.flops_mixing += flops

    def acquire(self, elements: int) -> None:
        self.live_elements += elements
        if self.live_elements > self.peak_live_elements:
            self.peak_live_elements = self.live_elements

    def release(self, elements: int) -> None:
        if elements > self.live_elements:
            raise ParameterError("releasing more elements than are live")
        self.live_elements -= elements

    def acquire_workspace(self, elements: int) -> None:
        self._workspace += elements
        self.acquire(elements)

    def release_workspace(self) -> None:
        self.release(self._workspace)
        self._workspace = 0

    def transfer_workspace(self, elements: int) -> None:
        """Reclassify live workspace elements as persistent.

        Used when a tensor produced during a step (and already counted as
        workspace) is retained past the step boundary, e.g. a cache store:
        the elements stay live but survive :meth:`release_workspace`.
        """
        if elements > self._workspace:
            raise ParameterError(
                "transferring more elements than the workspace holds"
            )
        self._workspace -= elements

    @property
    def flops_total(self) -> int:
        return self.flops_attention + self.flops_ffn + self.flops_mixing


# SplitMix64 constants.
_GAMMA = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)
_U53 = 2.0 ** -53


class Rng:
    """Counter-based SplitMix64 stream with Box-Muller normals.

    The stream is a pure function of the seed: draw ``i`` mixes state
    ``seed + (i+1) * GAMMA`` (mod 2^64), so batches of any size produce the
    same sequence as one-at-a-time draws. Normals consume two 64-bit words
    per pair and fill output arrays in row-major order.
    """

    def __init__(self, seed: int):
        self.state = np.uint64(seed & 0xFFFFFFFFFFFFFFFF)

    def next_u64(self, n: int) -> np.ndarray:
        with np.errstate(over="ignore"):
            steps = (np.arange(1, n + 1, dtype=np.uint64)) * _GAMMA
            z = self.state + steps
            self.state = z[-1] if n else self.state
            z = (z ^ (z >> np.uint64(30))) * _MIX1
            z = (z ^ (z >> np.uint64(27))) * _MIX2
            z = z ^ (z >> np.uint64(31))
        return z

    def uniform(self, shape) -> np.ndarray:
        """i.i.d. uniforms in [0, 1) from the top 53 bits of each word."""
        n = int(np.prod(shape)) if np.ndim(shape) else int(shape)
        u = (self.next_u64(n) >> np.uint64(11)).astype(np.float64) * _U53
        return u.reshape(shape)

    def normal(self, shape) -> np.ndarray:
        """i.i.d. standard normals via Box-Muller, row-major fill order."""
        n = int(np.prod(shape))
        pairs = (n + 1) // 2
        words = self.next_u64(2 * pairs)
        # u1 in (0, 1] so log() is safe; u2 in [0, 1).
        u1 = ((words[0::2] >> np.uint64(11)).astype(np.float64) + 1.0) * _U53
        u2 = (words[1::2] >> np.uint64(11)).astype(np.float64) * _U53
        r = np.sqrt(-2.0 * np.log(u1))
        theta = 2.0 * np.pi * u2
        out = np.empty(2 * pairs)
        out[0::2] = r * np.cos(theta)
        out[1::2] = r * np.sin(theta)
        return out[:n].reshape(shape)


def randn(rng: Rng, shape) -> np.ndarray:
    """Standard-normal tensor, deterministic in (seed, shape)."""
    return rng.normal(shape)


def matmul(a: np.ndarray, b: np.ndarray, counters: CostCounters | None = None,
           block: str | None = None) -> np.ndarray:
    """2-D product; adds 2*m*n*k attention FLOPs to ``counters`` if given."""
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {a.shape} @ {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"inner axes disagree: {a.shape} @ {b.shape}")
    if counters is not None:
        m, k = a.shape
        n = b.shape[1]
        counters.add_attention(2 * m * n * k, block=block)
    return a @ b


_ALLOCATOR_TUNED = False


def tune_allocator() -> None:
    """Raise glibc's mmap/trim thresholds for large-array churn.

    Large transient arrays then come from malloc's free list instead of
    fresh kernel pages, which removes page-fault overhead from the hot
    loop. Purely a performance knob: results are unaffected, and the call
    is a no-op where glibc is unavailable.
    """
    global _ALLOCATOR_TUNED
    if _ALLOCATOR_TUNED:
        return
    _ALLOCATOR_TUNED = True
    try:
        libc = ctypes.CDLL("libc.so.6")
        libc.mallopt(-3, 1 << 30)  # M_MMAP_THRESHOLD
        libc.mallopt(-1, 1 << 30)  # M_TRIM_THRESHOLD
    except OSError:
        pass


class _ScratchPool(threading.local):
    """Per-thread reusable scratch arrays, keyed by (tag, shape).

    Reusing large intermediates avoids repeated page-faulting allocations
    in the hot path. Callers must only hand out buffers whose contents die
    before the same (tag, shape) is requested again; nothing returned to a
    caller of the public API may alias a scratch buffer.
    """

    def __init__(self):
        self.buffers: dict = {}


_POOL = _ScratchPool()


def scratch(tag: str, shape: tuple) -> np.ndarray:
    """Fetch (or create) a float64 scratch array of the given shape."""
    key = (tag, shape)
    buf = _POOL.buffers.get(key)
    if buf is None:
        buf = np.empty(shape)
        _POOL.buffers[key] = buf
    return buf


def softmax_last_inplace(x: np.ndarray) -> np.ndarray:
    """Max-subtracted softmax along the last axis, overwriting ``x``."""
    if x.shape[-1] < 1:
        raise ShapeError("softmax needs at least one element on the last axis")
    x -= np.max(x, axis=-1, keepdims=True)
    np.exp(x, out=x)
    x /= np.sum(x, axis=-1, keepdims=True)
    return x


def softmax_last(x: np.ndarray) -> np.ndarray:
    """Max-subtracted softmax along the last axis."""
    return softmax_last_inplace(x.astype(np.float64, copy=True))


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    """Cosine similarity over flattened data, in [-1, 1]."""
    if a.shape != b.shape:
        raise ShapeError(f"cosine shapes disagree: {a.shape} vs {b.shape}")
    af = a.ravel()
    bf = b.ravel()
    na = float(np.linalg.norm(af))
    nb = float(np.linalg.norm(bf))
    if na == 0.0 or nb == 0.0:
        raise DegenerateInputError("cosine of a zero-norm operand")
    return float(np.clip(float(af @ bf) / (na * nb), -1.0, 1.0))


def topk_indices(scores: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k largest scores, ascending, ties to the lower index."""
    scores = np.asarray(scores)
    if scores.ndim != 1:
        raise ShapeError("topk_indices expects a 1-D score vector")
    n = scores.shape[0]
    if not 1 <= k <= n:
        raise ParameterError(f"k={k} out of range for n={n}")
    order = np.argsort(-scores, kind="stable")
    return np.sort(order[:k])


def _check_indices(indices: np.ndarray, length: int) -> np.ndarray:
    idx = np.asarray(indices, dtype=np.int64)
    if idx.ndim != 1 or idx.size == 0:
        raise ParameterError("index list must be 1-D and non-empty")
    if idx[0] < 0 or idx[-1] >= length or np.any(np.diff(idx) <= 0):
        raise IndexError(f"indices must be strictly increasing in [0, {length})")
    return idx


def gather_tokens(x: np.ndarray, indices) -> np.ndarray:
    """Select spatial positions from a [..., H, W, C] tensor.

    The trailing (H, W) pair is flattened to L = H*W and the listed flat
    positions are kept; all other axes are preserved. Output is [..., K, C].
    """
    if x.ndim < 3:
        raise ShapeError("gather_tokens expects at least [H, W, C]")
    h, w, c = x.shape[-3], x.shape[-2], x.shape[-1]
    idx = _check_indices(indices, h * w)
    flat = x.reshape(x.shape[:-3] + (h * w, c))
    return np.take(flat, idx, axis=-2)


def scatter_refill(computed: np.ndarray, cached: np.ndarray, indices) -> np.ndarray:
    """Merge freshly computed positions into a cached full-shape tensor.

    ``cached`` is [..., H, W, C]; ``computed`` is [..., K, C] covering
    exactly the listed flat positions. Every output position comes from
    exactly one source.
    """
    if cached.ndim < 3:
        raise ShapeError("scatter_refill expects cached of shape [..., H, W, C]")
    h, w, c = cached.shape[-3], cached.shape[-2], cached.shape[-1]
    idx = _check_indices(indices, h * w)
    if computed.shape != cached.shape[:-3] + (idx.size, c):
        raise ShapeError(
            f"computed shape {computed.shape} does not cover {idx.size} positions"
        )
    out = cached.reshape(cached.shape[:-3] + (h * w, c)).copy()
    out[..., idx, :] = computed
    return out.reshape(cached.shape)


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """10*log10(peak^2 / MSE) with peak = max(max|a|, 1); +inf when MSE=0."""
    if a.shape != b.shape:
        raise ShapeError(f"psnr shapes disagree: {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_INF
    peak = max(float(np.max(np.abs(a))), 1.0)
    return 10.0 * math.log10(peak * peak / mse)


def assert_finite(x: np.ndarray, what: str = "tensor") -> None:
    if not np.all(np.isfinite(x)):
        raise FloatingPointError(f"{what} contains NaN/Inf")
