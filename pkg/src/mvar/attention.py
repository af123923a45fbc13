"""Dense and neighborhood attention kernels with hand-written backward passes.

Tensors are laid out ``(..., N, d)`` with any number of leading batch/head
dimensions. Both kernels return the output and the post-softmax weights;
the weights are detached and meant for inspection only.

Every kernel call reports its work to the active :func:`count_ops`
counters, so complexity claims can be checked against what actually ran.
Kernels also run on ``device="meta"`` tensors, where only shapes flow and
the counters still tick.
"""
from __future__ import annotations

import math
from contextlib import contextmanager
from dataclasses import dataclass
from functools import lru_cache
from typing import Iterator

import numpy as np
import torch

from .errors import InternalConsistency, InvalidArgument, InvalidMask

MASK_VARIANTS = ("full-causal", "diagonal", "none")


# ---------------------------------------------------------------------------
# operation counting


@dataclass
class OpCounter:
    """Work done by attention kernels.

    ``pairs`` counts query/key score slots (one per softmax entry);
    ``score_macs`` and ``mix_macs`` count multiply-accumulates in the
    ``Q K^T`` and ``P V`` products.
    """

    pairs: int = 0
    score_macs: int = 0
    mix_macs: int = 0
    softmax_elems: int = 0
    calls: int = 0

    @property
    def macs(self) -> int:
        return self.score_macs + self.mix_macs


_counters: list[OpCounter] = []


@contextmanager
def count_ops() -> Iterator[OpCounter]:
    counter = OpCounter()
    _counters.append(counter)
    try:
        yield counter
    finally:
        _counters.remove(counter)


def _record(pairs: int, d: int):
    for c in _counters:
        c.pairs += pairs
        c.score_macs += pairs * d
        c.mix_macs += pairs * d
        c.softmax_elems += pairs
        c.calls += 1


# ---------------------------------------------------------------------------
# masks


@dataclass(frozen=True)
class StageMaskSpec:
    counts: tuple[int, ...]
    variant: str

    def allows(self, query_stage: int, key_stage: int) -> bool:
        if self.variant == "full-causal":
            return key_stage <= query_stage
        if self.variant == "diagonal":
            return key_stage == query_stage
        return True

    def stage_ids(self) -> np.ndarray:
        return np.repeat(np.arange(len(self.counts)), self.counts)

    def dense(self) -> np.ndarray:
        """(N, N) boolean grid, True where the query row may see the key column."""
        s = self.stage_ids()
        q, k = s[:, None], s[None, :]
        if self.variant == "full-causal":
            return k <= q
        if self.variant == "diagonal":
            return k == q
        return np.ones((len(s), len(s)), dtype=bool)


def build_stage_mask(counts, variant: str) -> StageMaskSpec:
    counts = tuple(int(c) for c in counts)
    if not counts or any(c < 1 for c in counts):
        raise InvalidArgument(f"stage counts must be non-empty and positive, got {counts}")
    if variant not in MASK_VARIANTS:
        raise InvalidArgument(f"unknown mask variant {variant!r}")
    return StageMaskSpec(counts, variant)


# ---------------------------------------------------------------------------
# neighborhoods


def _span(pos: int, n: int, k: int) -> tuple[int, int]:
    """Start and length of a 1-D window of extent k centred at pos, clamped to [0, n)."""
    if k >= n:
        return 0, n
    start = min(max(pos - k // 2, 0), n - k)
    return start, k


def _check_window(window):
    kh, kw = window
    if kh < 1 or kw < 1 or kh % 2 == 0 or kw % 2 == 0:
        raise InvalidArgument(f"window extents must be odd and positive, got {window}")


def neighborhood_indices(i: int, grid: tuple[int, int], window: tuple[int, int]) -> list[int]:
    """Flat indices of the clamped window around token ``i``, row-major.

    Near borders the window is translated rather than cropped; if the
    window is at least as large as the grid along an axis it covers that
    whole axis.
    """
    h, w = grid
    _check_window(window)
    if not 0 <= i < h * w:
        raise InvalidArgument(f"token {i} outside {h}x{w} grid")
    r0, nr = _span(i // w, h, window[0])
    c0, nc = _span(i % w, w, window[1])
    return [(r0 + a) * w + (c0 + b) for a in range(nr) for b in range(nc)]


@lru_cache(maxsize=256)
def _table(grid: tuple[int, int], window: tuple[int, int]) -> tuple[np.ndarray, np.ndarray]:
    h, w = grid
    kh, kw = window
    rows = np.arange(h)
    cols = np.arange(w)
    rs = np.clip(rows - kh // 2, 0, max(h - kh, 0))
    cs = np.clip(cols - kw // 2, 0, max(w - kw, 0))
    a = np.arange(kh)
    b = np.arange(kw)
    rr = rs[:, None] + a[None, :]  # (h, kh)
    cc = cs[:, None] + b[None, :]  # (w, kw)
    r_ok = a[None, :] < min(kh, h)
    c_ok = b[None, :] < min(kw, w)
    idx = rr[:, None, :, None] * w + cc[None, :, None, :]  # (h, w, kh, kw)
    ok = r_ok[:, None, :, None] & c_ok[None, :, None, :]
    ok = np.broadcast_to(ok, idx.shape)
    idx = np.where(ok, idx, 0)
    n, k = h * w, kh * kw
    idx = idx.reshape(n, k)
    ok = np.ascontiguousarray(ok.reshape(n, k))
    idx.setflags(write=False)
    ok.setflags(write=False)
    return idx, ok


def neighborhood_table(grid, window) -> tuple[np.ndarray, np.ndarray]:
    """(N, k) neighbor indices and validity flags for every token.

    Each token owns exactly k = kh*kw slots. Slots beyond the grid (only
    when the window is larger than the grid) point at token 0 and are
    flagged invalid; kernels give them zero weight.
    """
    grid = (int(grid[0]), int(grid[1]))
    window = (int(window[0]), int(window[1]))
    _check_window(window)
    return _table(grid, window)


@lru_cache(maxsize=256)
def _torch_table(grid, window) -> tuple[torch.Tensor, torch.Tensor]:
    idx, ok = neighborhood_table(grid, window)
    return torch.tensor(idx, dtype=torch.long), torch.tensor(ok)


def neighborhood_mask(grid, window) -> np.ndarray:
    """(N, N) boolean grid equivalent of the neighborhood table."""
    idx, ok = neighborhood_table(grid, window)
    n = idx.shape[0]
    m = np.zeros((n, n), dtype=bool)
    rows = np.repeat(np.arange(n), idx.shape[1])
    m[rows[ok.ravel()], idx.ravel()[ok.ravel()]] = True
    return m


# ---------------------------------------------------------------------------
# kernels


def _wide(x: torch.Tensor) -> torch.Tensor:
    # Both kernels accumulate in float64 and round once on the way out, so
    # their results agree to the last bit or so whatever the summation order.
    return x.to(torch.promote_types(x.dtype, torch.float64))


def _softmax_rows(scores: torch.Tensor) -> torch.Tensor:
    return torch.softmax(scores, dim=-1)


class _DenseAttention(torch.autograd.Function):
    @staticmethod
    def forward(ctx, q, k, v, allowed):
        dtype = q.dtype
        q, k, v = _wide(q), _wide(k), _wide(v)
        scale = 1.0 / math.sqrt(q.shape[-1])
        scores = torch.matmul(q, k.transpose(-1, -2)) * scale
        if allowed is not None:
            scores = scores.masked_fill(~allowed, float("-inf"))
        p = _softmax_rows(scores)
        out = torch.matmul(p, v)
        ctx.save_for_backward(q, k, v, p)
        ctx.scale = scale
        ctx.dtype = dtype
        weights = p.to(dtype)
        ctx.mark_non_differentiable(weights)
        return out.to(dtype), weights

    @staticmethod
    def backward(ctx, grad_out, _grad_p):
        q, k, v, p = ctx.saved_tensors
        expected = p.shape[:-1] + (v.shape[-1],)
        if grad_out.shape != expected:
            raise InternalConsistency(
                f"upstream gradient {tuple(grad_out.shape)} does not match forward output {tuple(expected)}"
            )
        grad_out = _wide(grad_out)
        grad_v = torch.matmul(p.transpose(-1, -2), grad_out)
        grad_p = torch.matmul(grad_out, v.transpose(-1, -2))
        grad_s = p * (grad_p - (grad_p * p).sum(-1, keepdim=True))
        grad_q = torch.matmul(grad_s, k) * ctx.scale
        grad_k = torch.matmul(grad_s.transpose(-1, -2), q) * ctx.scale
        dtype = ctx.dtype
        return grad_q.to(dtype), grad_k.to(dtype), grad_v.to(dtype), None


def _tokens_first(x: torch.Tensor) -> torch.Tensor:
    """(..., N, d) -> contiguous (N, L, d) with the leading dims flattened into L."""
    n, d = x.shape[-2], x.shape[-1]
    return x.reshape(-1, n, d).transpose(0, 1).contiguous()


def _tokens_last(x: torch.Tensor, lead) -> torch.Tensor:
    """Inverse of :func:`_tokens_first` for an (N, L, c) tensor."""
    n, c = x.shape[0], x.shape[-1]
    return x.transpose(0, 1).reshape(*lead, n, c)


class _NeighborhoodAttention(torch.autograd.Function):
    # The token axis is moved to the front so gathers and scatter-adds run
    # along dim 0 of contiguous memory.

    @staticmethod
    def forward(ctx, q, k, v, idx, valid):
        dtype = q.dtype
        q, k, v = _wide(q), _wide(k), _wide(v)
        scale = 1.0 / math.sqrt(q.shape[-1])
        n, slots = idx.shape
        lead = q.shape[:-2]
        flat = idx.reshape(-1)
        qt, kt, vt = _tokens_first(q), _tokens_first(k), _tokens_first(v)
        l = qt.shape[1]
        k_nb = kt.index_select(0, flat).view(n, slots, l, -1)
        v_nb = vt.index_select(0, flat).view(n, slots, l, -1)
        scores = (qt.unsqueeze(1) * k_nb).sum(-1) * scale  # (N, k, L)
        scores = scores.masked_fill(~valid.unsqueeze(-1), float("-inf"))
        p = torch.softmax(scores, dim=1)
        out = (p.unsqueeze(-1) * v_nb).sum(1)  # (N, L, d)
        ctx.save_for_backward(qt, kt, vt, p, idx)
        ctx.scale = scale
        ctx.lead = lead
        ctx.dtype = dtype
        weights = _tokens_last(p.transpose(1, 2), lead).to(dtype)  # (..., N, k)
        ctx.mark_non_differentiable(weights)
        return _tokens_last(out, lead).to(dtype), weights

    @staticmethod
    def backward(ctx, grad_out, _grad_p):
        qt, kt, vt, p, idx = ctx.saved_tensors
        lead = ctx.lead
        if grad_out.shape != lead + (qt.shape[0], vt.shape[-1]):
            raise InternalConsistency(
                f"upstream gradient {tuple(grad_out.shape)} does not match forward output"
            )
        n, slots = idx.shape
        l = qt.shape[1]
        flat = idx.reshape(-1)
        k_nb = kt.index_select(0, flat).view(n, slots, l, -1)
        v_nb = vt.index_select(0, flat).view(n, slots, l, -1)
        go = _tokens_first(_wide(grad_out)).unsqueeze(1)  # (N, 1, L, d)
        grad_p = (go * v_nb).sum(-1)
        grad_s = p * (grad_p - (grad_p * p).sum(1, keepdim=True))
        gs = grad_s.unsqueeze(-1)
        grad_q = (gs * k_nb).sum(1) * ctx.scale
        contrib_k = (gs * qt.unsqueeze(1)).view(n * slots, l, -1) * ctx.scale
        contrib_v = (p.unsqueeze(-1) * go).view(n * slots, l, -1)
        grad_k = torch.zeros_like(kt).index_add_(0, flat, contrib_k)
        grad_v = torch.zeros_like(vt).index_add_(0, flat, contrib_v)
        return (
            _tokens_last(grad_q, lead).to(ctx.dtype),
            _tokens_last(grad_k, lead).to(ctx.dtype),
            _tokens_last(grad_v, lead).to(ctx.dtype),
            None,
            None,
        )


def _check_qkv(q, k, v):
    if (
        q.shape[:-2] != k.shape[:-2]
        or q.shape[-1] != k.shape[-1]
        or k.shape[:-1] != v.shape[:-1]
    ):
        raise InvalidArgument(f"Q/K/V shapes disagree: {q.shape}, {k.shape}, {v.shape}")


def full_attention(
    q: torch.Tensor,
    k: torch.Tensor,
    v: torch.Tensor,
    mask=None,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Softmax(Q K^T / sqrt(d)) V over all keys.

    ``mask`` is a :class:`StageMaskSpec` or a boolean (Nq, Nk) array/tensor
    that is True where attention is allowed. Keys may outnumber queries
    (queries attending over a longer key prefix).
    """
    _check_qkv(q, k, v)
    n, nk = q.shape[-2], k.shape[-2]
    allowed = None
    if mask is not None:
        if isinstance(mask, StageMaskSpec):
            mask = mask.dense()
        allowed = mask if torch.is_tensor(mask) else torch.from_numpy(np.array(mask, dtype=bool))
        if tuple(allowed.shape[-2:]) != (n, nk):
            raise InvalidMask(f"mask {tuple(allowed.shape)} does not match {n}x{nk} scores")
        if not bool(allowed.any(-1).all()):
            raise InvalidMask("mask leaves a query row with no visible key")
        allowed = allowed.to(device=q.device, dtype=torch.bool)
    _record(int(np.prod(q.shape[:-2], dtype=np.int64)) * n * nk, q.shape[-1])
    return _DenseAttention.apply(q, k, v, allowed)


def spatial_markov_attention(
    q: torch.Tensor,
    k: torch.Tensor,
    v: torch.Tensor,
    grid: tuple[int, int],
    window: tuple[int, int],
) -> tuple[torch.Tensor, torch.Tensor]:
    """Each token attends to the kh*kw keys in its clamped grid window.

    Returns the output (..., N, d) and weights (..., N, kh*kw) ordered like
    :func:`neighborhood_table`.
    """
    _check_qkv(q, k, v)
    h, w = grid
    if h * w != q.shape[-2] or k.shape[-2] != q.shape[-2]:
        raise InvalidArgument(f"grid {grid} does not hold {q.shape[-2]} tokens")
    idx, valid = _torch_table((int(h), int(w)), (int(window[0]), int(window[1])))
    idx, valid = idx.to(q.device), valid.to(q.device)
    lead = int(np.prod(q.shape[:-2], dtype=np.int64))
    _record(lead * idx.shape[0] * idx.shape[1], q.shape[-1])
    return _NeighborhoodAttention.apply(q, k, v, idx, valid)
