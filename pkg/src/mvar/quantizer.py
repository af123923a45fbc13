"""Multi-scale residual tokenization.

A feature map ``f`` of shape (h, w, C) is turned into a pyramid of token
maps ``r_1 .. r_L`` by repeatedly quantizing the downsampled residual
``f - f_hat`` and folding the upsampled code grid back into ``f_hat``.
All grids are channel-last and may carry leading batch dimensions.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import CorruptPyramid, InvalidArgument


@dataclass(frozen=True)
class ScaleSchedule:
    sizes: tuple[tuple[int, int], ...]

    def __post_init__(self):
        sizes = tuple((int(h), int(w)) for h, w in self.sizes)
        object.__setattr__(self, "sizes", sizes)
        if not sizes:
            raise InvalidArgument("schedule needs at least one scale")
        for h, w in sizes:
            if h < 1 or w < 1:
                raise InvalidArgument(f"non-positive scale {(h, w)}")
        for (h0, w0), (h1, w1) in zip(sizes, sizes[1:]):
            if h1 < h0 or w1 < w0:
                raise InvalidArgument(f"schedule decreases at {(h0, w0)} -> {(h1, w1)}")

    @classmethod
    def square(cls, sides: Sequence[int]) -> "ScaleSchedule":
        return cls(tuple((s, s) for s in sides))

    def __len__(self):
        return len(self.sizes)

    def __iter__(self):
        return iter(self.sizes)

    def __getitem__(self, i):
        return self.sizes[i]

    @property
    def final(self) -> tuple[int, int]:
        return self.sizes[-1]

    @property
    def token_counts(self) -> list[int]:
        return [h * w for h, w in self.sizes]

    def to_list(self) -> list[list[int]]:
        return [list(s) for s in self.sizes]


@dataclass(frozen=True)
class Codebook:
    vectors: np.ndarray  # (V, C) float32

    def __post_init__(self):
        v = np.asarray(self.vectors, dtype=np.float32)
        if v.ndim != 2 or v.shape[0] < 1:
            raise InvalidArgument(f"codebook must be (V, C) with V >= 1, got {v.shape}")
        if not np.all(np.isfinite(v)):
            raise InvalidArgument("codebook contains non-finite entries")
        object.__setattr__(self, "vectors", v)

    @property
    def size(self) -> int:
        return self.vectors.shape[0]

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def lookup(self, indices: np.ndarray) -> np.ndarray:
        indices = np.asarray(indices)
        if indices.size and (indices.min() < 0 or indices.max() >= self.size):
            raise CorruptPyramid(
                f"token index out of range [0, {self.size}): "
                f"min={indices.min()} max={indices.max()}"
            )
        return self.vectors.astype(np.float64)[indices]


@dataclass
class ResidualPyramid:
    """Token maps, one per scale; each has shape (..., h_l, w_l)."""

    maps: list[np.ndarray] = field(default_factory=list)

    def __len__(self):
        return len(self.maps)

    def __getitem__(self, i):
        return self.maps[i]

    def shapes(self) -> list[tuple[int, int]]:
        return [tuple(m.shape[-2:]) for m in self.maps]

    def select(self, index) -> "ResidualPyramid":
        """Pick batch element(s) out of every map."""
        return ResidualPyramid([m[index] for m in self.maps])


_CHUNK = 4096


def interp_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Row-stochastic (n_out, n_in) linear-interpolation weights.

    Sampling grid is corner aligned: output sample ``i`` sits at source
    coordinate ``i * (n_in - 1) / (n_out - 1)``. A single output sample is
    taken at the source centre.
    """
    if n_out == 1:
        coords = np.array([(n_in - 1) / 2.0])
    else:
        coords = np.arange(n_out) * ((n_in - 1) / (n_out - 1))
    lo = np.floor(coords).astype(np.int64)
    lo = np.clip(lo, 0, n_in - 1)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = coords - lo
    m = np.zeros((n_out, n_in))
    rows = np.arange(n_out)
    np.add.at(m, (rows, lo), 1.0 - frac)
    np.add.at(m, (rows, hi), frac)
    return m


def _resize(grid: np.ndarray, target: tuple[int, int]) -> np.ndarray:
    h, w = grid.shape[-3], grid.shape[-2]
    th, tw = target
    if (h, w) == (th, tw):
        return grid.copy()
    rh = interp_matrix(h, th)
    rw = interp_matrix(w, tw)
    return np.einsum("ih,...hwc,jw->...ijc", rh, grid, rw)


def downsample(grid: np.ndarray, target: tuple[int, int]) -> np.ndarray:
    grid = np.asarray(grid, dtype=np.float64)
    h, w = grid.shape[-3], grid.shape[-2]
    th, tw = target
    if th < 1 or tw < 1 or th > h or tw > w:
        raise InvalidArgument(f"cannot downsample {(h, w)} to {(th, tw)}")
    return _resize(grid, (th, tw))


def upsample(grid: np.ndarray, target: tuple[int, int]) -> np.ndarray:
    grid = np.asarray(grid, dtype=np.float64)
    h, w = grid.shape[-3], grid.shape[-2]
    th, tw = target
    if th < h or tw < w:
        raise InvalidArgument(f"cannot upsample {(h, w)} to {(th, tw)}")
    return _resize(grid, (th, tw))


def nearest_code(vectors: np.ndarray, codebook: Codebook) -> np.ndarray:
    """Index of the closest code (squared L2) for each vector; ties go low."""
    x = np.asarray(vectors, dtype=np.float64)
    if x.shape[-1] != codebook.dim:
        raise InvalidArgument(f"vector dim {x.shape[-1]} != codebook dim {codebook.dim}")
    z = codebook.vectors.astype(np.float64)
    flat = x.reshape(-1, x.shape[-1])
    out = np.empty(flat.shape[0], dtype=np.int64)
    for start in range(0, flat.shape[0], _CHUNK):
        block = flat[start:start + _CHUNK]
        d2 = ((block[:, None, :] - z[None, :, :]) ** 2).sum(-1)
        # argmin returns the first minimum, which is the lowest index
        out[start:start + _CHUNK] = d2.argmin(axis=1)
    return out.reshape(x.shape[:-1])


def _check_feature_map(f: np.ndarray, schedule: ScaleSchedule, codebook: Codebook):
    if f.ndim < 3:
        raise InvalidArgument(f"feature map needs (..., h, w, C), got {f.shape}")
    if tuple(f.shape[-3:-1]) != schedule.final:
        raise InvalidArgument(f"feature map {f.shape[-3:-1]} != final scale {schedule.final}")
    if f.shape[-1] != codebook.dim:
        raise InvalidArgument(f"channels {f.shape[-1]} != codebook dim {codebook.dim}")
    if not np.all(np.isfinite(f)):
        raise InvalidArgument("feature map contains non-finite entries")


def _has_zero_code(codebook: Codebook) -> bool:
    return not np.any(codebook.vectors[0])


def _guarded_scale(residual: np.ndarray, size, codebook: Codebook):
    """Quantize one scale, keeping each token only if it shrinks the residual.

    Tokens are visited row-major; a nearest code whose upsampled footprint
    would raise ``||residual||`` is replaced by code 0 (the zero vector).
    """
    h, w = residual.shape[-3], residual.shape[-2]
    tokens = nearest_code(downsample(residual, size), codebook)
    up_h = interp_matrix(size[0], h)
    up_w = interp_matrix(size[1], w)
    z = codebook.vectors.astype(np.float64)
    residual = residual.copy()
    for i in range(size[0]):
        for j in range(size[1]):
            u = np.outer(up_h[:, i], up_w[:, j])
            code = z[tokens[..., i, j]]
            proj = np.einsum("hw,...hwc,...c->...", u, residual, code)
            delta = (u * u).sum() * (code * code).sum(-1) - 2.0 * proj
            keep = delta < 0
            tokens[..., i, j] = np.where(keep, tokens[..., i, j], 0)
            step = np.where(keep[..., None], 1.0, 0.0) * code
            residual -= u[..., None] * step[..., None, None, :]
    return tokens


def encode_pyramid(
    f: np.ndarray,
    schedule: ScaleSchedule,
    codebook: Codebook,
    guard: bool = True,
) -> ResidualPyramid:
    """Residual pyramid of ``f``.

    With ``guard`` (and a zero vector at code 0) every token is checked
    against the full-resolution residual, so reconstruction error never
    grows from one scale to the next. ``guard=False`` is the bare
    nearest-code loop.
    """
    f = np.asarray(f, dtype=np.float64)
    _check_feature_map(f, schedule, codebook)
    guard = guard and _has_zero_code(codebook)
    full = schedule.final
    f_hat = np.zeros_like(f)
    maps = []
    for size in schedule:
        if guard and size != full:
            tokens = _guarded_scale(f - f_hat, size, codebook)
        else:
            tokens = nearest_code(downsample(f - f_hat, size), codebook)
        f_hat = f_hat + upsample(codebook.lookup(tokens), full)
        maps.append(tokens)
    return ResidualPyramid(maps)


def decode_pyramid(
    pyramid: ResidualPyramid,
    codebook: Codebook,
    schedule: ScaleSchedule,
    upto: int | None = None,
) -> np.ndarray:
    """Sum of upsampled code grids; ``upto`` limits it to the first maps."""
    n = len(pyramid) if upto is None else upto
    if len(pyramid) > len(schedule) or n > len(pyramid):
        raise CorruptPyramid(f"pyramid has {len(pyramid)} maps, schedule {len(schedule)}")
    for l, m in enumerate(pyramid.maps):
        if tuple(m.shape[-2:]) != schedule[l]:
            raise CorruptPyramid(f"map {l} has shape {m.shape[-2:]}, expected {schedule[l]}")
    lead = pyramid.maps[0].shape[:-2]
    out = np.zeros(lead + schedule.final + (codebook.dim,))
    for m in pyramid.maps[:n]:
        out = out + upsample(codebook.lookup(m), schedule.final)
    return out


def fit_codebook(samples: np.ndarray, V: int, seed: int, iters: int = 50) -> Codebook:
    """k-means codebook whose code 0 is pinned to the zero vector."""
    x = np.asarray(samples, dtype=np.float64)
    x = x.reshape(-1, x.shape[-1])
    if V < 1:
        raise InvalidArgument("V must be >= 1")
    if x.shape[0] < V:
        raise InvalidArgument(f"need at least V={V} samples, got {x.shape[0]}")
    rng = np.random.default_rng(seed)
    pick = rng.choice(x.shape[0], size=V, replace=False)
    centroids = x[pick].copy()
    centroids[0] = 0.0
    for _ in range(iters):
        assign = nearest_code(x, Codebook(centroids))
        new = centroids.copy()
        for j in range(1, V):
            members = x[assign == j]
            if len(members):
                new[j] = members.mean(axis=0)
        if np.array_equal(new, centroids):
            break
        centroids = new
    return Codebook(centroids.astype(np.float32))
