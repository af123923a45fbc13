"""Scale-Markov next-scale transformer.

Each stage ``l`` sees only an embedding of the previous token map
``r_{l-1}`` (or the class start token for the first stage), upsampled to
its own grid. Coarse stages are trained packed into one sequence under a
block-diagonal mask; fine stages run standalone with neighborhood
attention. A ``full-causal`` variant packs every stage under the
lower-block-triangular mask instead, as a dense next-scale baseline.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from functools import lru_cache
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .attention import (
    build_stage_mask,
    full_attention,
    neighborhood_mask,
    spatial_markov_attention,
)
from .errors import InvalidArgument, InvalidConfig, InvalidTarget, NumericFailure
from .quantizer import ScaleSchedule, interp_matrix

VARIANTS = ("markov", "full-causal")


@dataclass
class ModelConfig:
    depth: int = 4
    embed_dim: int = 64
    head_count: int = 4
    vocab_size: int = 64
    schedule: list = field(default_factory=lambda: [[1, 1], [2, 2], [4, 4], [8, 8]])
    window: list = field(default_factory=lambda: [3, 3])
    class_count: int = 10
    dropout: float = 0.1
    class_dropout: float = 0.1
    variant: str = "markov"
    pack_boundary: int = 0  # 0 picks the default
    mlp_ratio: int = 4

    def __post_init__(self):
        self.schedule = [list(map(int, s)) for s in self.schedule]
        self.window = [int(x) for x in self.window]
        self.validate()

    def validate(self):
        if self.depth < 1 or self.embed_dim < 1 or self.head_count < 1:
            raise InvalidConfig("depth, embed_dim and head_count must be positive")
        if self.embed_dim % self.head_count:
            raise InvalidConfig(f"embed_dim {self.embed_dim} not divisible by head_count {self.head_count}")
        if len(self.window) != 2 or any(k < 1 or k % 2 == 0 for k in self.window):
            raise InvalidConfig(f"window extents must be odd and positive, got {self.window}")
        if not (0 <= self.dropout < 1 and 0 <= self.class_dropout < 1):
            raise InvalidConfig("dropout rates must lie in [0, 1)")
        if self.vocab_size < 1 or self.class_count < 1:
            raise InvalidConfig("vocab_size and class_count must be positive")
        if self.variant not in VARIANTS:
            raise InvalidConfig(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        try:
            ScaleSchedule(tuple(map(tuple, self.schedule)))
        except InvalidArgument as e:
            raise InvalidConfig(str(e)) from None
        if self.pack_boundary < 0 or self.pack_boundary > len(self.schedule):
            raise InvalidConfig(
                f"pack_boundary {self.pack_boundary} outside schedule of {len(self.schedule)} scales"
            )

    @property
    def scales(self) -> ScaleSchedule:
        return ScaleSchedule(tuple(map(tuple, self.schedule)))

    @property
    def boundary(self) -> int:
        return self.pack_boundary or default_pack_boundary(self.scales)

    def to_dict(self) -> dict:
        return asdict(self)


def default_pack_boundary(schedule: ScaleSchedule) -> int:
    """Most leading scales whose packed length fits within the final scale."""
    counts = schedule.token_counts
    total, boundary = 0, 0
    for n in counts:
        total += n
        if total > counts[-1]:
            break
        boundary += 1
    return max(boundary, 1)


def uses_local_attention(grid: Sequence[int], window: Sequence[int]) -> bool:
    """Neighborhood attention only once the grid outgrows the window."""
    return min(grid) > min(window)


def analytic_param_count(cfg: ModelConfig) -> int:
    d, v = cfg.embed_dim, cfg.vocab_size
    hidden = cfg.mlp_ratio * d
    per_block = (
        4 * d  # two layer norms
        + 3 * d * d + 3 * d  # qkv
        + d * d + d  # output projection
        + d * hidden + hidden  # mlp in
        + hidden * d + d  # mlp out
    )
    pos = sum(h * w for h, w in cfg.schedule) * d
    return v * d + (cfg.class_count + 1) * d + pos + cfg.depth * per_block + 2 * d + d * v + v


# ---------------------------------------------------------------------------
# attention plans


@dataclass(frozen=True)
class DensePlan:
    """Dense attention, optionally restricted by a boolean (N, N) mask."""

    mask: np.ndarray | None = None


@dataclass(frozen=True)
class LocalPlan:
    grid: tuple[int, int]
    window: tuple[int, int]


def stage_plan(grid, window):
    if uses_local_attention(grid, window):
        return LocalPlan(tuple(grid), tuple(window))
    return DensePlan(None)


@lru_cache(maxsize=64)
def _packed_mask(sizes: tuple, window: tuple, variant: str) -> np.ndarray:
    counts = [h * w for h, w in sizes]
    mask = build_stage_mask(counts, variant).dense()
    if variant == "diagonal":
        offset = 0
        for (h, w), n in zip(sizes, counts):
            if uses_local_attention((h, w), window):
                mask[offset:offset + n, offset:offset + n] = neighborhood_mask((h, w), window)
            offset += n
    mask.setflags(write=False)
    return mask


@dataclass
class PackedStages:
    """Training layout of one pyramid.

    ``packed`` lists the stage indices sharing one masked sequence,
    ``standalone`` the stages evaluated on their own (no mask).
    """

    packed: list[int]
    standalone: list[int]
    variant: str
    lengths: list[int]

    @property
    def packed_length(self) -> int:
        return sum(self.lengths[l] for l in self.packed)


def pack_training_stages(schedule: ScaleSchedule, boundary: int, variant: str = "markov") -> PackedStages:
    if boundary < 1 or boundary > len(schedule):
        raise InvalidConfig(f"packing boundary {boundary} does not fit a {len(schedule)}-scale schedule")
    lengths = schedule.token_counts
    if variant == "full-causal":
        return PackedStages(list(range(len(schedule))), [], "full-causal", lengths)
    packed = list(range(boundary)) if boundary > 1 else []
    standalone = [l for l in range(len(schedule)) if l not in packed]
    return PackedStages(packed, standalone, "diagonal", lengths)


# ---------------------------------------------------------------------------
# modules


class Block(nn.Module):
    def __init__(self, dim: int, heads: int, mlp_ratio: int, dropout: float):
        super().__init__()
        self.heads = heads
        self.ln1 = nn.LayerNorm(dim)
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)
        self.ln2 = nn.LayerNorm(dim)
        self.fc1 = nn.Linear(dim, mlp_ratio * dim)
        self.fc2 = nn.Linear(mlp_ratio * dim, dim)
        self.drop = nn.Dropout(dropout)

    def split_heads(self, x: torch.Tensor):
        b, n, d = x.shape
        q, k, v = self.qkv(self.ln1(x)).chunk(3, dim=-1)
        shape = (b, n, self.heads, d // self.heads)
        return tuple(t.reshape(shape).transpose(1, 2) for t in (q, k, v))

    def merge(self, x: torch.Tensor, attended: torch.Tensor) -> torch.Tensor:
        b, h, n, dh = attended.shape
        attended = attended.transpose(1, 2).reshape(b, n, h * dh)
        x = x + self.drop(self.proj(attended))
        return x + self.drop(self.fc2(F.gelu(self.fc1(self.ln2(x)))))

    def forward(self, x: torch.Tensor, plan, record: list | None = None) -> torch.Tensor:
        q, k, v = self.split_heads(x)
        if isinstance(plan, LocalPlan):
            out, weights = spatial_markov_attention(q, k, v, plan.grid, plan.window)
        else:
            out, weights = full_attention(q, k, v, plan.mask)
        if record is not None:
            record.append((plan, weights))
        return self.merge(x, out)


class MVAR(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.sizes = [tuple(s) for s in cfg.schedule]
        self.window = tuple(cfg.window)
        d = cfg.embed_dim
        self.null_class = cfg.class_count
        self.code_embed = nn.Embedding(cfg.vocab_size, d)
        self.class_embed = nn.Embedding(cfg.class_count + 1, d)
        self.pos = nn.ParameterList([nn.Parameter(torch.zeros(h, w, d)) for h, w in self.sizes])
        self.blocks = nn.ModuleList(
            [Block(d, cfg.head_count, cfg.mlp_ratio, cfg.dropout) for _ in range(cfg.depth)]
        )
        self.norm = nn.LayerNorm(d)
        self.head = nn.Linear(d, cfg.vocab_size)
        self.reset_parameters()

    def reset_parameters(self):
        # width-aware scale, sqrt(1 / 3d), as in the VAR backbone
        std = math.sqrt(1.0 / (3 * self.cfg.embed_dim))
        for name, p in self.named_parameters():
            if name.endswith("bias"):
                nn.init.zeros_(p)
            elif ".ln" in name or name.startswith("norm"):
                nn.init.ones_(p)
            else:
                nn.init.trunc_normal_(p, std=std, a=-2 * std, b=2 * std)

    # -- inputs ------------------------------------------------------------

    def _upsample(self, grid: torch.Tensor, target) -> torch.Tensor:
        h, w = grid.shape[-3], grid.shape[-2]
        if (h, w) == tuple(target):
            return grid
        rh = torch.as_tensor(interp_matrix(h, target[0]), dtype=grid.dtype)
        rw = torch.as_tensor(interp_matrix(w, target[1]), dtype=grid.dtype)
        return torch.einsum("ih,bhwc,jw->bijc", rh, grid, rw)

    def embed_stage_input(self, previous: torch.Tensor, l: int) -> torch.Tensor:
        """Input grid (B, h_l, w_l, D) for stage ``l`` (0-based).

        ``previous`` holds class labels (B,) for ``l == 0``, otherwise the
        token map of stage ``l - 1`` as (B, h, w) indices.
        """
        if not 0 <= l < len(self.sizes):
            raise InvalidArgument(f"stage {l} outside schedule of {len(self.sizes)}")
        h, w = self.sizes[l]
        if l == 0:
            if previous.dim() != 1:
                raise InvalidArgument("first stage expects a vector of class labels")
            start = self.class_embed(previous)[:, None, None, :]
            return start + self.pos[0]
        if tuple(previous.shape[-2:]) != self.sizes[l - 1]:
            raise InvalidArgument(
                f"stage {l} expects a {self.sizes[l - 1]} token map, got {tuple(previous.shape[-2:])}"
            )
        emb = self.code_embed(previous)
        return self._upsample(emb, (h, w)) + self.pos[l]

    def drop_labels(self, labels: torch.Tensor) -> torch.Tensor:
        if not self.training or self.cfg.class_dropout == 0:
            return labels
        drop = torch.rand(labels.shape) < self.cfg.class_dropout
        return torch.where(drop, torch.full_like(labels, self.null_class), labels)

    # -- forward -----------------------------------------------------------

    def _run_blocks(self, x: torch.Tensor, plan, where: str, record=None) -> torch.Tensor:
        for i, block in enumerate(self.blocks):
            x = block(x, plan, record)
            if not torch.isfinite(x).all():
                raise NumericFailure(f"non-finite activation in {where}, block {i}")
        return self.head(self.norm(x))

    def forward_stage(self, x: torch.Tensor, l: int, record=None) -> torch.Tensor:
        """Logits (B, h_l, w_l, V) for one standalone stage input grid."""
        b, h, w, d = x.shape
        if (h, w) != self.sizes[l]:
            raise InvalidArgument(f"stage {l} input is {(h, w)}, schedule says {self.sizes[l]}")
        if not torch.isfinite(x).all():
            raise NumericFailure(f"non-finite input at stage {l}")
        plan = stage_plan((h, w), self.window)
        logits = self._run_blocks(x.reshape(b, h * w, d), plan, f"stage {l}", record)
        return logits.reshape(b, h, w, -1)

    def packed_mask(self, stages: Sequence[int], variant: str) -> np.ndarray:
        return _packed_mask(tuple(self.sizes[l] for l in stages), self.window, variant)

    def forward_packed(self, x: torch.Tensor, stages: Sequence[int], variant: str, record=None) -> list[torch.Tensor]:
        """Run a packed sequence (B, sum N_l, D); returns per-stage logits grids."""
        mask = self.packed_mask(stages, variant)
        if not torch.isfinite(x).all():
            raise NumericFailure(f"non-finite packed input for stages {list(stages)}")
        logits = self._run_blocks(x, DensePlan(mask), f"packed stages {list(stages)}", record)
        out, offset = [], 0
        for l in stages:
            h, w = self.sizes[l]
            out.append(logits[:, offset:offset + h * w].reshape(x.shape[0], h, w, -1))
            offset += h * w
        return out

    def stage_inputs(self, maps: Sequence[torch.Tensor], labels: torch.Tensor) -> list[torch.Tensor]:
        """Teacher-forced inputs for every stage from ground-truth maps."""
        inputs = [self.embed_stage_input(labels, 0)]
        for l in range(1, len(self.sizes)):
            inputs.append(self.embed_stage_input(maps[l - 1], l))
        return inputs

    def pack(self, inputs: Sequence[torch.Tensor], stages: Sequence[int]) -> torch.Tensor:
        b, d = inputs[0].shape[0], inputs[0].shape[-1]
        return torch.cat([inputs[l].reshape(b, -1, d) for l in stages], dim=1)

    def forward(self, maps: Sequence[torch.Tensor], labels: torch.Tensor, record=None) -> list[torch.Tensor]:
        """Per-stage logits for a teacher-forced pyramid batch."""
        layout = pack_training_stages(self.cfg.scales, self.cfg.boundary, self.cfg.variant)
        inputs = self.stage_inputs(maps, self.drop_labels(labels))
        logits: list = [None] * len(self.sizes)
        if layout.packed:
            packed = self.forward_packed(self.pack(inputs, layout.packed), layout.packed, layout.variant, record)
            for l, lg in zip(layout.packed, packed):
                logits[l] = lg
        for l in layout.standalone:
            logits[l] = self.forward_stage(inputs[l], l, record)
        return logits


def stage_loss(logits: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Mean token-wise cross-entropy of one stage."""
    v = logits.shape[-1]
    if logits.shape[:-1] != target.shape:
        raise InvalidArgument(f"logits {tuple(logits.shape)} and target {tuple(target.shape)} disagree")
    if target.numel() and (int(target.max()) >= v or int(target.min()) < 0):
        raise InvalidTarget(f"target index outside [0, {v})")
    return F.cross_entropy(logits.reshape(-1, v), target.reshape(-1))


def pyramid_log_likelihood(logits: Sequence[torch.Tensor], maps: Sequence[torch.Tensor]) -> torch.Tensor:
    """Sum over stages of token log-probabilities, per batch item."""
    total = 0.0
    for lg, tgt in zip(logits, maps):
        logp = torch.log_softmax(lg, dim=-1)
        total = total + logp.gather(-1, tgt.unsqueeze(-1)).squeeze(-1).flatten(1).sum(1)
    return total
