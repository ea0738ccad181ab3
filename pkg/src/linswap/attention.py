"""Attention mathematics: causal softmax attention, linear attention (parallel,
state-form, and recurrent), learnable feature maps, rotary embeddings, the
hybrid linear + sliding-window layer with its terraced variant and chunked
prefill, constant-memory decoding, and the entropy / effective-sequence-length
diagnostics.

All batched operations take [batch, heads, seq, dim] arrays. Training paths are
built from tape-recorded Tensor ops; decode paths are plain numpy (inference
only) and are pinned to the prefill paths by consistency tests.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import (
    NotStochastic,
    OddHeadDim,
    OutOfOrderToken,
    ShapeMismatch,
    StateDimMismatch,
    WindowTooSmall,
)
from .tensor import MASK_VALUE, Tensor

# Denominator guard for every linear-attention normalizer. An all-zero phi(k)
# prefix (possible with relu features) must yield 0, not NaN. The pure linear
# forms add it; the hybrid layer floors the shared denominator with it instead,
# so the window term's gamma factor cancels exactly when the linear sum is
# empty (the collapse-to-softmax contract holds to float precision).
EPS = 1e-6


def _floor_den(den: Tensor) -> Tensor:
    return T.masked_fill(den, den.data < EPS, EPS)


# --------------------------------------------------------------------------
# rotary embeddings
# --------------------------------------------------------------------------


def rope_angles(seq_len: int, head_dim: int, start_pos: int = 0, base: float = 10000.0):
    """cos/sin tables [seq, head_dim/2] for absolute positions start_pos.."""
    if head_dim % 2:
        raise OddHeadDim(f"head_dim {head_dim} must be even for rotary pairs")
    if start_pos < 0:
        raise ValueError("start_pos must be >= 0")
    pos = np.arange(start_pos, start_pos + seq_len, dtype=np.float64)
    inv_freq = base ** (-np.arange(0, head_dim, 2, dtype=np.float64) / head_dim)
    ang = pos[:, None] * inv_freq[None, :]
    return np.cos(ang), np.sin(ang)


def apply_rope(x, start_pos: int = 0, base: float = 10000.0):
    """Rotate each (2i, 2i+1) pair of the last axis by angle pos * base^(-2i/d).

    Accepts a Tensor (differentiable) or a numpy array; seq is axis -2.
    """
    is_np = not isinstance(x, Tensor)
    shape = x.shape
    cos, sin = rope_angles(shape[-2], shape[-1], start_pos, base)
    if is_np:
        cos = cos.astype(x.dtype)
        sin = sin.astype(x.dtype)
        xe, xo = x[..., 0::2], x[..., 1::2]
        out = np.empty_like(x)
        out[..., 0::2] = xe * cos - xo * sin
        out[..., 1::2] = xe * sin + xo * cos
        return out
    cos = Tensor(cos, dtype=x.dtype)
    sin = Tensor(sin, dtype=x.dtype)
    xe, xo = x[..., 0::2], x[..., 1::2]
    re = xe * cos - xo * sin
    ro = xe * sin + xo * cos
    return T.stack([re, ro], axis=-1).reshape(shape)


# --------------------------------------------------------------------------
# learnable feature maps
# --------------------------------------------------------------------------


@dataclass
class FeatureMapParams:
    """Per-head learnable feature map phi: R^d -> R^{d'} (t2r) or R^{2d'} (hedgehog).

    t2r:      relu(x @ W + b)
    hedgehog: concat(softmax(x @ W), softmax(-x @ W)) over the feature axis
    """

    kind: str
    weight: Tensor  # [heads, head_dim, feature_dim]
    bias: Tensor | None = None  # [heads, feature_dim], t2r only

    def __post_init__(self):
        if self.kind not in ("t2r", "hedgehog"):
            raise ShapeMismatch(f"unknown feature map kind {self.kind!r}")
        if self.weight.ndim != 3:
            raise ShapeMismatch(f"feature map weight must be [heads, d, d'], got {self.weight.shape}")
        if self.kind == "hedgehog" and self.bias is not None:
            raise ShapeMismatch("hedgehog feature map takes no bias")
        if self.bias is not None and self.bias.shape != (self.heads, self.feature_dim):
            raise ShapeMismatch(f"bias shape {self.bias.shape} vs heads/feature {self.heads}/{self.feature_dim}")

    @property
    def heads(self) -> int:
        return self.weight.shape[0]

    @property
    def head_dim(self) -> int:
        return self.weight.shape[1]

    @property
    def feature_dim(self) -> int:
        return self.weight.shape[2]

    @property
    def output_dim(self) -> int:
        return 2 * self.feature_dim if self.kind == "hedgehog" else self.feature_dim

    def parameters(self) -> list[Tensor]:
        return [self.weight] if self.bias is None else [self.weight, self.bias]


def init_feature_map(
    kind: str,
    n_heads: int,
    head_dim: int,
    feature_dim: int | None = None,
    rng: np.random.Generator | None = None,
    dtype=np.float32,
) -> FeatureMapParams:
    """Fresh trainable feature map. Default widths keep the effective output
    dimension equal to head_dim: d' = d for t2r, d' = d/2 for hedgehog."""
    rng = rng or np.random.default_rng(0)
    if feature_dim is None:
        feature_dim = head_dim if kind == "t2r" else max(1, head_dim // 2)
    bound = 1.0 / np.sqrt(head_dim)
    weight = Tensor(
        rng.uniform(-bound, bound, size=(n_heads, head_dim, feature_dim)).astype(dtype),
        requires_grad=True,
    )
    bias = None
    if kind == "t2r":
        bias = Tensor(np.zeros((n_heads, feature_dim), dtype=dtype), requires_grad=True)
    return FeatureMapParams(kind=kind, weight=weight, bias=bias)


def feature_map_apply(params: FeatureMapParams, x: Tensor) -> Tensor:
    """Apply phi to x [..., heads, seq, head_dim] -> [..., heads, seq, out_dim]."""
    if x.shape[-1] != params.head_dim or x.shape[-3] != params.heads:
        raise ShapeMismatch(f"feature map expects [..., {params.heads}, l, {params.head_dim}], got {x.shape}")
    proj = T.matmul(x, params.weight)
    if params.kind == "t2r":
        return T.relu(proj + params.bias.reshape(params.heads, 1, params.feature_dim))
    return T.concat([T.softmax(proj, -1), T.softmax(-proj, -1)], axis=-1)


def _phi_np(params: FeatureMapParams, x: np.ndarray) -> np.ndarray:
    """numpy twin of feature_map_apply for decode; x [b, h, d] or [b, h, n, d]."""
    w = params.weight.data
    proj = np.einsum("bhd,hdf->bhf", x, w) if x.ndim == 3 else np.einsum("bhnd,hdf->bhnf", x, w)
    if params.kind == "t2r":
        b = params.bias.data
        return np.maximum(proj + (b[:, None] if x.ndim == 4 else b), 0.0)
    return np.concatenate([_softmax_np(proj), _softmax_np(-proj)], axis=-1)


def _softmax_np(x: np.ndarray, axis: int = -1) -> np.ndarray:
    e = np.exp(x - x.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


# --------------------------------------------------------------------------
# softmax and linear attention
# --------------------------------------------------------------------------


def _check_qkv(q, k, v):
    if not (q.shape == k.shape == v.shape) or q.ndim != 4:
        raise ShapeMismatch(f"q/k/v must share a [b, h, l, d] shape: {q.shape} {k.shape} {v.shape}")


def causal_mask(seq_len: int) -> np.ndarray:
    """True above the diagonal (the positions to mask out)."""
    return np.triu(np.ones((seq_len, seq_len), dtype=bool), k=1)


def softmax_attention(q: Tensor, k: Tensor, v: Tensor, return_weights: bool = False):
    """Causal softmax attention with 1/sqrt(d) scaling; weights on request only."""
    _check_qkv(q, k, v)
    l, d = q.shape[-2], q.shape[-1]
    scores = T.matmul(q, T.swapaxes(k, -1, -2)) * (1.0 / np.sqrt(d))
    scores = T.masked_fill(scores, causal_mask(l), MASK_VALUE)
    a = T.softmax(scores, -1)
    y = T.matmul(a, v)
    return y, (a if return_weights else None)


def linear_attention_parallel(
    q: Tensor,
    k: Tensor,
    v: Tensor,
    phi_q: FeatureMapParams,
    phi_k: FeatureMapParams,
    return_weights: bool = False,
):
    """Linear attention, weight form: normalize phi(q)^T phi(k) scores per row."""
    _check_qkv(q, k, v)
    l = q.shape[-2]
    fq = feature_map_apply(phi_q, q)
    fk = feature_map_apply(phi_k, k)
    scores = T.masked_fill(T.matmul(fq, T.swapaxes(fk, -1, -2)), causal_mask(l), 0.0)
    den = scores.sum(-1, keepdims=True) + EPS
    y = T.matmul(scores, v) / den
    return y, (scores / den if return_weights else None)


def linear_attention_state(q: Tensor, k: Tensor, v: Tensor, phi_q, phi_k) -> Tensor:
    """Linear attention, kv-state form: cumulative sum of phi(k) v^T outer products."""
    _check_qkv(q, k, v)
    b, h, l, d = q.shape
    fq = feature_map_apply(phi_q, q)
    fk = feature_map_apply(phi_k, k)
    f = fq.shape[-1]
    outer = T.matmul(fk.reshape(b, h, l, f, 1), v.reshape(b, h, l, 1, d))
    s_cum = T.cumsum(outer, 2)
    num = T.matmul(fq.reshape(b, h, l, 1, f), s_cum).reshape(b, h, l, d)
    den = (fq * T.cumsum(fk, 2)).sum(-1, keepdims=True) + EPS
    return num / den


class LinearAttentionState:
    """Constant-size recurrent state: s = sum phi(k) v^T, z = sum phi(k)."""

    def __init__(self, batch: int, heads: int, feature_out_dim: int, head_dim: int, dtype=np.float32):
        self.s = np.zeros((batch, heads, feature_out_dim, head_dim), dtype=dtype)
        self.z = np.zeros((batch, heads, feature_out_dim), dtype=dtype)
        self.position = 0

    @property
    def nbytes(self) -> int:
        return self.s.nbytes + self.z.nbytes


def linear_attention_recurrent_step(
    state: LinearAttentionState,
    q_n: np.ndarray,
    k_n: np.ndarray,
    v_n: np.ndarray,
    phi_q: FeatureMapParams,
    phi_k: FeatureMapParams,
) -> np.ndarray:
    """One streaming step of linear attention; mutates state, returns y_n [b, h, d]."""
    if q_n.shape != state.s.shape[:2] + (state.s.shape[-1],):
        raise StateDimMismatch(f"token shape {q_n.shape} vs state {state.s.shape}")
    fk = _phi_np(phi_k, k_n)
    if fk.shape[-1] != state.s.shape[2]:
        raise StateDimMismatch(f"feature dim {fk.shape[-1]} vs state {state.s.shape[2]}")
    state.s += fk[..., :, None] * v_n[..., None, :]
    state.z += fk
    fq = _phi_np(phi_q, q_n)
    num = np.einsum("bhf,bhfd->bhd", fq, state.s)
    den = np.einsum("bhf,bhf->bh", fq, state.z) + EPS
    state.position += 1
    return num / den[..., None]


# --------------------------------------------------------------------------
# hybrid linear + sliding-window attention
# --------------------------------------------------------------------------

WINDOW_MODES = ("standard", "terraced")


@dataclass
class HybridAttnConfig:
    """One hybrid layer's parameterization: exact softmax over a recent window,
    linear attention over everything older, mixed under a shared normalizer.

    The effective window factor is sigmoid(gamma_raw) per head; the linear term
    carries a fixed factor of 1.
    """

    window_size: int
    window_mode: str
    gamma_raw: Tensor  # [heads]
    phi_q: FeatureMapParams
    phi_k: FeatureMapParams
    rope_base: float = 10000.0
    linear_factor: float = field(default=1.0)

    def __post_init__(self):
        if self.window_size < 1:
            raise WindowTooSmall(f"window_size {self.window_size} < 1")
        if self.window_mode not in WINDOW_MODES:
            raise ShapeMismatch(f"window_mode must be one of {WINDOW_MODES}")
        if self.linear_factor != 1.0:
            raise ShapeMismatch("linear_factor is fixed at 1.0")
        if self.gamma_raw.ndim != 1 or self.gamma_raw.shape[0] != self.phi_q.heads:
            raise ShapeMismatch(f"gamma_raw must be [heads], got {self.gamma_raw.shape}")

    @property
    def heads(self) -> int:
        return self.phi_q.heads

    def window_factor(self, override: float | None = None):
        """sigmoid(gamma_raw) as [1, h, 1, 1], or a test-hook constant."""
        if override is not None:
            return float(override)
        return T.sigmoid(self.gamma_raw).reshape(1, self.heads, 1, 1)

    def parameters(self) -> list[Tensor]:
        return [self.gamma_raw] + self.phi_q.parameters() + self.phi_k.parameters()


def make_hybrid_config(
    window_size: int,
    window_mode: str,
    feature_kind: str,
    n_heads: int,
    head_dim: int,
    feature_dim: int | None = None,
    rope_base: float = 10000.0,
    rng: np.random.Generator | None = None,
    gamma_init: float = 1.0,
    dtype=np.float32,
) -> HybridAttnConfig:
    rng = rng or np.random.default_rng(0)
    phi_q = init_feature_map(feature_kind, n_heads, head_dim, feature_dim, rng, dtype)
    phi_k = init_feature_map(feature_kind, n_heads, head_dim, feature_dim, rng, dtype)
    gamma = Tensor(np.full(n_heads, gamma_init, dtype=dtype), requires_grad=True)
    return HybridAttnConfig(window_size, window_mode, gamma, phi_q, phi_k, rope_base)


def _window_masks(l: int, w: int, mode: str) -> tuple[np.ndarray, np.ndarray]:
    """(window_mask, linear_mask) [l, l], True where the term applies (0-based)."""
    n = np.arange(l)[:, None]
    j = np.arange(l)[None, :]
    causal = j <= n
    if mode == "standard":
        win = causal & (n - j < w)
    else:
        win = causal & (j >= (n // w) * w)
    lin = causal & ~win
    return win, lin


def hybrid_attention_prefill(
    q: Tensor,
    k: Tensor,
    v: Tensor,
    cfg: HybridAttnConfig,
    window_factor_override: float | None = None,
) -> Tensor:
    """Hybrid attention over a full prompt. RoPE must already be applied to q, k.

    Standard mode runs the banded O(l * w * d) path; terraced mode runs the
    direct masked-score reference (terraced_prefill_chunked is the single-pass
    production variant and must agree with it).
    """
    _check_qkv(q, k, v)
    if cfg.window_mode == "standard":
        return _hybrid_standard_banded(q, k, v, cfg, window_factor_override)
    y, _ = _hybrid_naive(q, k, v, cfg, window_factor_override)
    return y


def _hybrid_standard_banded(q, k, v, cfg, override=None) -> Tensor:
    b, h, l, d = q.shape
    w = cfg.window_size
    w_eff = min(w, l)
    scale = 1.0 / np.sqrt(d)
    gamma = cfg.window_factor(override)

    # window logits by diagonal offset o: logit[., n, o] = q_n . k_{n-o} / sqrt(d)
    logit_cols = []
    v_cols = []
    for o in range(w_eff):
        k_sh = T.pad_axis(k, 2, o, 0)[:, :, :l] if o else k
        v_sh = T.pad_axis(v, 2, o, 0)[:, :, :l] if o else v
        logit_cols.append((q * k_sh).sum(-1) * scale)
        v_cols.append(v_sh)
    logits = T.stack(logit_cols, axis=-1)  # [b, h, l, w_eff]
    invalid = np.arange(w_eff)[None, :] > np.arange(l)[:, None]  # offset beyond t=0
    logits = T.masked_fill(logits, invalid, MASK_VALUE)

    c = logits.max(-1, keepdims=True)
    ew = gamma * T.exp(logits - c)  # [b, h, l, w_eff]
    win_den = ew.sum(-1, keepdims=True)
    v_band = T.stack(v_cols, axis=3)  # [b, h, l, w_eff, d]
    win_num = T.matmul(ew.reshape(b, h, l, 1, w_eff), v_band).reshape(b, h, l, d)

    # linear term over tokens older than the window: shift features by w
    fq = feature_map_apply(cfg.phi_q, q)
    fk = feature_map_apply(cfg.phi_k, k)
    f = fq.shape[-1]
    fk_sh = T.pad_axis(fk, 2, w, 0)[:, :, :l]
    v_old = T.pad_axis(v, 2, w, 0)[:, :, :l]
    outer = T.matmul(fk_sh.reshape(b, h, l, f, 1), v_old.reshape(b, h, l, 1, d))
    lin_num = T.matmul(fq.reshape(b, h, l, 1, f), T.cumsum(outer, 2)).reshape(b, h, l, d)
    lin_den = (fq * T.cumsum(fk_sh, 2)).sum(-1, keepdims=True)

    return (win_num + lin_num) / _floor_den(win_den + lin_den)


def _hybrid_naive(q, k, v, cfg, override=None):
    """Reference path: full masked score matrices, both modes; returns (y, weights)."""
    b, h, l, d = q.shape
    scale = 1.0 / np.sqrt(d)
    gamma = cfg.window_factor(override)
    win_mask, lin_mask = _window_masks(l, cfg.window_size, cfg.window_mode)

    scores = T.matmul(q, T.swapaxes(k, -1, -2)) * scale
    masked = T.masked_fill(scores, ~win_mask, MASK_VALUE)
    c = masked.max(-1, keepdims=True)
    ew = gamma * T.exp(masked - c)  # exp underflows to 0 off-window

    fq = feature_map_apply(cfg.phi_q, q)
    fk = feature_map_apply(cfg.phi_k, k)
    lin = T.masked_fill(T.matmul(fq, T.swapaxes(fk, -1, -2)), ~lin_mask, 0.0)

    den = _floor_den(ew.sum(-1, keepdims=True) + lin.sum(-1, keepdims=True))
    weights = (ew + lin) / den
    y = T.matmul(weights, v)
    return y, weights


def hybrid_attention_weights(q, k, v, cfg, window_factor_override: float | None = None) -> Tensor:
    """Materialized row-stochastic hybrid weights [b, h, l, l] (memory-heavy; opt-in)."""
    _, weights = _hybrid_naive(q, k, v, cfg, window_factor_override)
    return weights


def terraced_prefill_chunked(
    q: Tensor,
    k: Tensor,
    v: Tensor,
    cfg: HybridAttnConfig,
    window_factor_override: float | None = None,
    with_stats: bool = False,
):
    """Single pass over w-sized chunks with a running kv-state: softmax attention
    inside each chunk, linear attention against the state accumulated from all
    earlier chunks. Peak per-chunk scratch is proportional to w, not seq."""
    _check_qkv(q, k, v)
    if cfg.window_mode != "terraced":
        raise ShapeMismatch("terraced_prefill_chunked requires window_mode='terraced'")
    b, h, l, d = q.shape
    w = cfg.window_size
    scale = 1.0 / np.sqrt(d)
    gamma = cfg.window_factor(window_factor_override)

    fq = feature_map_apply(cfg.phi_q, q)
    fk = feature_map_apply(cfg.phi_k, k)
    f = fq.shape[-1]

    s_state = Tensor(np.zeros((b, h, f, d), dtype=q.dtype))
    z_state = Tensor(np.zeros((b, h, f, 1), dtype=q.dtype))
    outs = []
    peak_chunk_bytes = 0
    for start in range(0, l, w):
        stop = min(start + w, l)
        cw = stop - start
        qc, kc, vc = q[:, :, start:stop], k[:, :, start:stop], v[:, :, start:stop]
        fqc = fq[:, :, start:stop]

        scores = T.matmul(qc, T.swapaxes(kc, -1, -2)) * scale
        scores = T.masked_fill(scores, causal_mask(cw), MASK_VALUE)
        c = scores.max(-1, keepdims=True)
        ew = gamma * T.exp(scores - c)
        win_num = T.matmul(ew, vc)
        win_den = ew.sum(-1, keepdims=True)

        lin_num = T.matmul(fqc, s_state)
        lin_den = T.matmul(fqc, z_state)

        outs.append((win_num + lin_num) / _floor_den(win_den + lin_den))

        fkc = fk[:, :, start:stop]
        s_state = s_state + T.matmul(T.swapaxes(fkc, -1, -2), vc)
        z_state = z_state + T.swapaxes(fkc, -1, -2).sum(-1, keepdims=True)

        chunk_bytes = sum(t.data.nbytes for t in (scores, ew, win_num, lin_num, outs[-1]))
        peak_chunk_bytes = max(peak_chunk_bytes, chunk_bytes)

    y = T.concat(outs, axis=2) if len(outs) > 1 else outs[0]
    if with_stats:
        stats = {
            "peak_chunk_bytes": peak_chunk_bytes,
            "state_bytes": s_state.data.nbytes + z_state.data.nbytes,
            "chunks": (l + w - 1) // w,
        }
        return y, stats
    return y


# --------------------------------------------------------------------------
# constant-memory decoding
# --------------------------------------------------------------------------


class HybridDecodeState:
    """Recurrent state for one hybrid layer: kv-state (s, z) over evicted tokens
    plus a ring buffer of up to w post-RoPE (k, v) pairs. Allocation is fixed at
    construction, so byte size is constant for the whole generation."""

    def __init__(self, batch: int, heads: int, cfg: HybridAttnConfig, head_dim: int, dtype=np.float32):
        f = cfg.phi_k.output_dim
        w = cfg.window_size
        self.s = np.zeros((batch, heads, f, head_dim), dtype=dtype)
        self.z = np.zeros((batch, heads, f), dtype=dtype)
        self.k_cache = np.zeros((batch, heads, w, head_dim), dtype=dtype)
        self.v_cache = np.zeros((batch, heads, w, head_dim), dtype=dtype)
        self.filled = 0
        self.position = 0

    @property
    def nbytes(self) -> int:
        return self.s.nbytes + self.z.nbytes + self.k_cache.nbytes + self.v_cache.nbytes

    @property
    def state_bytes(self) -> int:
        return self.s.nbytes + self.z.nbytes

    @property
    def cache_bytes(self) -> int:
        return self.k_cache.nbytes + self.v_cache.nbytes

    def _fold(self, phi_k: FeatureMapParams, upto: int) -> None:
        """Move the first `upto` cached pairs into the kv-state."""
        if upto == 0:
            return
        ks = self.k_cache[:, :, :upto]
        vs = self.v_cache[:, :, :upto]
        fk = _phi_np(phi_k, ks)
        self.s += np.einsum("bhnf,bhnd->bhfd", fk, vs)
        self.z += fk.sum(axis=2)
        keep = self.filled - upto
        self.k_cache[:, :, :keep] = self.k_cache[:, :, upto:self.filled]
        self.v_cache[:, :, :keep] = self.v_cache[:, :, upto:self.filled]
        self.filled = keep


def hybrid_decode_step(
    state: HybridDecodeState,
    q_n: np.ndarray,
    k_n: np.ndarray,
    v_n: np.ndarray,
    cfg: HybridAttnConfig,
    position: int | None = None,
) -> np.ndarray:
    """One token of hybrid attention; q/k/v are post-RoPE [b, h, d]. Mutates state."""
    if q_n.shape != state.s.shape[:2] + (state.s.shape[-1],):
        raise StateDimMismatch(f"token shape {q_n.shape} vs state {state.s.shape}")
    if position is not None and position != state.position:
        raise OutOfOrderToken(f"expected position {state.position}, got {position}")
    w = cfg.window_size

    if cfg.window_mode == "standard":
        if state.filled == w:
            state._fold(cfg.phi_k, 1)
    else:  # terraced: crossing a w-boundary retires the whole previous chunk
        if state.position > 0 and state.position % w == 0:
            state._fold(cfg.phi_k, state.filled)

    state.k_cache[:, :, state.filled] = k_n
    state.v_cache[:, :, state.filled] = v_n
    state.filled += 1

    d = q_n.shape[-1]
    ks = state.k_cache[:, :, : state.filled]
    vs = state.v_cache[:, :, : state.filled]
    logits = np.einsum("bhd,bhnd->bhn", q_n, ks) / np.sqrt(d)
    c = logits.max(axis=-1, keepdims=True)
    gamma = _sigmoid_np(cfg.gamma_raw.data)[None, :, None]
    ew = gamma * np.exp(logits - c)
    win_num = np.einsum("bhn,bhnd->bhd", ew, vs)
    win_den = ew.sum(axis=-1)

    fq = _phi_np(cfg.phi_q, q_n)
    lin_num = np.einsum("bhf,bhfd->bhd", fq, state.s)
    lin_den = np.einsum("bhf,bhf->bh", fq, state.z)

    state.position += 1
    den = np.maximum(win_den + lin_den, EPS)
    return (win_num + lin_num) / den[..., None]


def _sigmoid_np(x: np.ndarray) -> np.ndarray:
    return 1.0 / (1.0 + np.exp(-x))


# --------------------------------------------------------------------------
# diagnostics
# --------------------------------------------------------------------------


def _check_stochastic(weights: np.ndarray, tol: float = 1e-4) -> None:
    sums = weights.sum(axis=-1)
    if (weights < -tol).any() or np.abs(sums - 1.0).max() > tol:
        raise NotStochastic(f"rows must be nonnegative and sum to 1 (max dev {np.abs(sums - 1).max():.2e})")


def attention_entropy(weights) -> np.ndarray:
    """Per-row entropy H = -sum a log a (0 log 0 = 0) of row-stochastic weights."""
    wts = np.asarray(weights.data if isinstance(weights, Tensor) else weights, dtype=np.float64)
    _check_stochastic(wts)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(wts > 0, wts * np.log(wts), 0.0)
    return -terms.sum(axis=-1)


def esl_per_query(weights) -> np.ndarray:
    """Effective sequence length sum_j (i - j) a[i, j] for every query row i."""
    wts = np.asarray(weights.data if isinstance(weights, Tensor) else weights, dtype=np.float64)
    _check_stochastic(wts)
    l = wts.shape[-1]
    lookback = np.maximum(np.arange(l)[:, None] - np.arange(l)[None, :], 0)
    return (wts * lookback).sum(axis=-1)


def effective_sequence_length(weights, i: int) -> np.ndarray:
    """ESL of query index i (1-based; i=1 attends only to itself, so 0)."""
    if i < 1:
        raise ValueError(f"query index {i} must be >= 1")
    return esl_per_query(weights)[..., i - 1]


def sample_esl(per_layer_weights: list) -> float:
    """Sample-level ESL: per-head sum over queries, averaged over heads, layers, batch."""
    per_layer = []
    for wts in per_layer_weights:
        q_esl = esl_per_query(wts)  # [b, h, l]
        per_layer.append(q_esl.sum(axis=-1).mean())
    return float(np.mean(per_layer))
