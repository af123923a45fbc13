"""Attention-redundancy measurements and attention cost accounting.

Cost is measured in query/key pair slots: one slot is one score entry, which
costs ``d`` multiply-accumulates for ``Q K^T`` and ``d`` more for mixing the
values, so MACs = 2 * d * pairs. Measured counts come from running the real
kernels on ``meta`` tensors under :func:`count_ops`.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .attention import count_ops, full_attention, neighborhood_mask, neighborhood_table, spatial_markov_attention
from .errors import InvalidArgument, InvalidInput
from .model import MVAR, DensePlan, LocalPlan, pack_training_stages
from .sampler import GenerationTrace

PARADIGMS = ("next-token", "next-scale", "markov")
_ALIASES = {"markov-next-scale": "markov", "mvar": "markov", "var": "next-scale", "ar": "next-token"}

ACCUMULATION_NOTE = "post-softmax weights averaged over layers, heads, queries and samples"


# ---------------------------------------------------------------------------
# scale attention


def accumulate_scale_attention(weights: np.ndarray, counts: Sequence[int]) -> np.ndarray:
    """(L, L) attention mass from query scale m onto key scale n.

    ``weights`` is (..., N, N) with rows summing to one; rows are partitioned
    by key scale, summed, then averaged over the queries of each scale and
    over all leading dimensions.
    """
    w = np.asarray(weights, dtype=np.float64)
    n = sum(counts)
    if w.shape[-2:] != (n, n):
        raise InvalidArgument(f"weights {w.shape[-2:]} do not cover {n} tokens")
    w = w.reshape(-1, n, n).mean(0)
    bounds = np.concatenate([[0], np.cumsum(counts)])
    L = len(counts)
    out = np.zeros((L, L))
    for m in range(L):
        rows = w[bounds[m]:bounds[m + 1]]
        for k in range(L):
            out[m, k] = rows[:, bounds[k]:bounds[k + 1]].sum(-1).mean()
    return out


def _recorded_forward(model: MVAR, maps, labels) -> list:
    record: list = []
    model.eval()
    with torch.no_grad():
        model(maps, labels, record=record)
    return record


def scale_attention_matrix(model: MVAR, maps, labels) -> np.ndarray:
    """Cross-scale attention mass of a full-causal baseline model."""
    if model.cfg.variant != "full-causal":
        raise InvalidInput("cross-scale attention needs a model trained with the full-causal mask")
    counts = model.cfg.scales.token_counts
    record = _recorded_forward(model, maps, labels)
    mats = [accumulate_scale_attention(w.numpy(), counts) for _, w in record]
    return np.mean(mats, axis=0)


# ---------------------------------------------------------------------------
# neighborhood mass


def window_mass(weights: np.ndarray, grid: tuple[int, int], windows: Sequence[int]) -> np.ndarray:
    """Mean mass inside each clamped s x s window around the query position.

    ``weights`` is (..., N, N) over one grid, rows normalised.
    """
    if not len(windows):
        raise InvalidArgument("window list is empty")
    w = np.asarray(weights, dtype=np.float64)
    n = grid[0] * grid[1]
    w = w.reshape(-1, n, n)
    out = []
    for s in windows:
        mask = neighborhood_mask(grid, (s, s))
        # the mass is a subset of a normalised row; clip float rounding above 1
        out.append(min(float((w * mask).sum(-1).mean()), 1.0))
    return np.array(out)


def _stage_blocks(model: MVAR, record) -> dict[int, list[np.ndarray]]:
    """Own-scale attention rows per stage, renormalised within the stage."""
    layout = pack_training_stages(model.cfg.scales, model.cfg.boundary, model.cfg.variant)
    counts = model.cfg.scales.token_counts
    depth = len(model.blocks)
    blocks: dict[int, list[np.ndarray]] = {}
    # records arrive in call order: packed stages first (if any), then standalone ones
    calls = ([layout.packed] if layout.packed else []) + [[l] for l in layout.standalone]
    for c, stages in enumerate(calls):
        for plan, w in record[c * depth:(c + 1) * depth]:
            w = w.numpy().astype(np.float64)
            if isinstance(plan, LocalPlan):
                idx, ok = neighborhood_table(plan.grid, plan.window)
                n = idx.shape[0]
                dense = np.zeros(w.shape[:-1] + (n,))
                rows = np.broadcast_to(np.arange(n)[:, None], idx.shape)
                np.add.at(dense, (..., rows[ok], idx[ok]), w[..., ok])
                blocks.setdefault(stages[0], []).append(dense / dense.sum(-1, keepdims=True))
                continue
            offset = 0
            for l in stages:
                sub = w[..., offset:offset + counts[l], offset:offset + counts[l]]
                total = sub.sum(-1, keepdims=True)
                blocks.setdefault(l, []).append(sub / np.where(total > 0, total, 1.0))
                offset += counts[l]
    return blocks


@dataclass
class NeighborhoodCurve:
    windows: list[int]
    per_stage: dict[int, list[float]] = field(default_factory=dict)  # 1-based stage -> masses
    mean: list[float] = field(default_factory=list)


def neighborhood_mass_curve(model: MVAR, windows: Sequence[int], maps, labels) -> NeighborhoodCurve:
    """Share of each query's own-scale attention inside growing windows.

    The conditioning block of stage ``l`` lives on stage ``l``'s own grid
    (previous tokens are upsampled into it), so the window is centred on
    the query's own position there. Single-token stages are skipped.
    """
    windows = [int(s) for s in windows]
    if not windows:
        raise InvalidArgument("window list is empty")
    record = _recorded_forward(model, maps, labels)
    blocks = _stage_blocks(model, record)
    curve = NeighborhoodCurve(windows)
    for l, mats in sorted(blocks.items()):
        grid = model.sizes[l]
        if grid[0] * grid[1] == 1:
            continue
        masses = np.mean([window_mass(m, grid, windows) for m in mats], axis=0)
        curve.per_stage[l + 1] = masses.tolist()
    if curve.per_stage:
        curve.mean = np.mean(list(curve.per_stage.values()), axis=0).tolist()
    return curve


# ---------------------------------------------------------------------------
# attention cost


@dataclass
class StageFlops:
    stage: int
    tokens: int
    analytic: int  # pair slots
    measured: int


@dataclass
class FlopReport:
    paradigm: str
    d: int
    stages: list[StageFlops]
    closed_form: int | None = None

    @property
    def analytic_total(self) -> int:
        return sum(s.analytic for s in self.stages)

    @property
    def measured_total(self) -> int:
        return sum(s.measured for s in self.stages)

    @property
    def analytic_macs(self) -> int:
        return 2 * self.d * self.analytic_total

    @property
    def measured_macs(self) -> int:
        return 2 * self.d * self.measured_total


def normalize_paradigm(name: str) -> str:
    name = _ALIASES.get(name, name)
    if name not in PARADIGMS:
        raise InvalidArgument(f"unknown paradigm {name!r}; pick one of {PARADIGMS}")
    return name


def _window_from_k(k) -> tuple[int, int]:
    if isinstance(k, (tuple, list)):
        return int(k[0]), int(k[1])
    side = math.isqrt(int(k))
    if side * side != int(k) or side % 2 == 0:
        raise InvalidArgument(f"k={k} is not the area of an odd square window")
    return side, side


def geometric_schedule(a, L: int) -> list[tuple[int, int]]:
    if int(a) != a or a < 2:
        raise InvalidArgument(f"closed forms need an integer ratio a >= 2, got {a}")
    if L < 1:
        raise InvalidArgument("L must be >= 1")
    a = int(a)
    return [(a ** (l - 1), a ** (l - 1)) for l in range(1, L + 1)]


def closed_form_pairs(paradigm: str, a: int, L: int, k: int) -> int:
    """Closed-form pair counts for a geometric schedule with side a^(l-1)."""
    paradigm = normalize_paradigm(paradigm)
    geometric_schedule(a, L)
    a = int(a)
    N = a ** (2 * (L - 1))
    if paradigm == "next-token":
        return N * (N + 1) * (2 * N + 1) // 6
    if paradigm == "next-scale":
        return sum(((a ** (2 * l) - 1) // (a * a - 1)) ** 2 for l in range(1, L + 1))
    return k * (a * a * N - 1) // (a * a - 1)


def _measure(fn) -> int:
    with count_ops() as c:
        fn()
    return c.pairs


def attention_flops(
    paradigm: str,
    a: int | None = None,
    L: int | None = None,
    schedule: Sequence[tuple[int, int]] | None = None,
    k=9,
    d: int = 1,
) -> FlopReport:
    """Analytic and measured attention cost of generating one image.

    Give either ``(a, L)`` for the geometric schedule behind the closed
    forms, or an explicit ``schedule``.
    """
    paradigm = normalize_paradigm(paradigm)
    window = _window_from_k(k)
    k_area = window[0] * window[1]
    closed = None
    if schedule is None:
        if a is None or L is None:
            raise InvalidArgument("pass either (a, L) or a schedule")
        schedule = geometric_schedule(a, L)
        closed = closed_form_pairs(paradigm, a, L, k_area)
    sizes = [(int(h), int(w)) for h, w in schedule]
    counts = [h * w for h, w in sizes]
    meta = dict(device="meta", dtype=torch.float32)
    stages = []
    if paradigm == "next-token":
        # raster order over the final token grid; every step re-attends over
        # the whole prefix without a cache
        for i in range(1, counts[-1] + 1):
            q = torch.empty(1, i, d, **meta)
            stages.append(StageFlops(i, i, i * i, _measure(lambda: full_attention(q, q, q))))
    elif paradigm == "next-scale":
        total = 0
        for l, n in enumerate(counts, start=1):
            total += n
            q = torch.empty(1, total, d, **meta)
            stages.append(StageFlops(l, n, total * total, _measure(lambda: full_attention(q, q, q))))
    else:
        for l, ((h, w), n) in enumerate(zip(sizes, counts), start=1):
            q = torch.empty(1, n, d, **meta)
            measured = _measure(lambda: spatial_markov_attention(q, q, q, (h, w), window))
            stages.append(StageFlops(l, n, n * k_area, measured))
    return FlopReport(paradigm, d, stages, closed)


# ---------------------------------------------------------------------------
# memory


@dataclass
class MemoryReport:
    paradigm: str
    stage_tokens: list[int]
    retained_bytes: list[int]  # carried out of each stage into the next
    retained_reals: list[int]
    peak_live_bytes: int

    @property
    def retained_total(self) -> int:
        return sum(self.retained_bytes[:-1])


def memory_report(trace: GenerationTrace, bytes_per_real: int = 4) -> MemoryReport:
    """Per-stage retained state and a peak live-activation estimate.

    The estimate is the larger, over stages, of the stage's own token
    activations (tokens x embed_dim reals) plus whatever was carried in.
    """
    tokens = [r.tokens for r in trace.stages]
    kept = [r.retained_bytes for r in trace.stages]
    reals = [r.retained_reals for r in trace.stages]
    carried_in = [0] + kept[:-1]
    peak = max((t * trace.embed_dim * bytes_per_real + c for t, c in zip(tokens, carried_in)), default=0)
    return MemoryReport(trace.paradigm, tokens, kept, reals, peak)


# ---------------------------------------------------------------------------
# emission


def write_scale_attn_csv(path, matrix: np.ndarray):
    L = matrix.shape[0]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["query_scale"] + [f"key_{n + 1}" for n in range(L)])
        for m in range(L):
            w.writerow([m + 1] + [f"{x:.8f}" for x in matrix[m]])


def write_neighborhood_csv(path, curve: NeighborhoodCurve):
    stages = sorted(curve.per_stage)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["window"] + [f"mass_stage{l}" for l in stages] + ["mass_mean"])
        for i, s in enumerate(curve.windows):
            row = [s] + [f"{curve.per_stage[l][i]:.8f}" for l in stages]
            row.append(f"{curve.mean[i]:.8f}" if curve.mean else "")
            w.writerow(row)


def write_flops_csv(path, reports: Sequence[FlopReport]):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["paradigm", "stage", "analytic", "measured"])
        for r in reports:
            for s in r.stages:
                w.writerow([r.paradigm, s.stage, s.analytic, s.measured])
            closed = r.closed_form if r.closed_form is not None else r.analytic_total
            w.writerow([r.paradigm, "total", closed, r.measured_total])


def write_memory_csv(path, reports: Sequence[MemoryReport]):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["paradigm", "stage", "tokens", "retained_bytes", "retained_reals", "peak_live_bytes"])
        for r in reports:
            for l, (t, b, n) in enumerate(zip(r.stage_tokens, r.retained_bytes, r.retained_reals), start=1):
                w.writerow([r.paradigm, l, t, b, n, r.peak_live_bytes])


def write_pgm(path, matrix: np.ndarray, cell: int = 16):
    """Greyscale heatmap, one ``cell`` x ``cell`` block per matrix entry."""
    m = np.asarray(matrix, dtype=np.float64)
    top = m.max() if m.size and m.max() > 0 else 1.0
    px = np.round(255 * np.clip(m / top, 0, 1)).astype(np.uint8)
    px = np.kron(px, np.ones((cell, cell), dtype=np.uint8))
    h, w = px.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(px.tobytes())
