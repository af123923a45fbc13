"""Coarse-to-fine generation without a key/value cache.

Each stage is computed from the previous token map alone. A reference
sampler that does keep per-block keys and values across stages lives
alongside for equivalence testing and memory accounting.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .attention import full_attention, neighborhood_mask
from .errors import InvalidArgument, InvalidConfig, NumericFailure
from .model import MVAR, uses_local_attention
from .quantizer import Codebook, ResidualPyramid, decode_pyramid


@dataclass
class SamplerConfig:
    guidance: float = 2.7
    top_k: int = 0  # 0 means the whole vocabulary
    top_p: float = 0.99
    seed: int = 0
    class_label: int = 0  # -1 samples unconditionally

    def validate(self, vocab_size: int | None = None):
        if self.guidance < 0:
            raise InvalidConfig("guidance must be >= 0")
        if not 0 < self.top_p <= 1:
            raise InvalidConfig("top_p must lie in (0, 1]")
        if self.top_k < 0 or (vocab_size is not None and self.top_k > vocab_size):
            raise InvalidConfig(f"top_k must lie in [1, {vocab_size}] (or 0 for all)")

    def __post_init__(self):
        self.validate()


def cfg_combine(cond, uncond, scale: float):
    """Classifier-free guidance: uncond + s * (cond - uncond)."""
    if tuple(cond.shape) != tuple(uncond.shape):
        raise InvalidArgument(f"cond {tuple(cond.shape)} and uncond {tuple(uncond.shape)} disagree")
    # written as a convex-style blend so s=0 and s=1 reproduce the inputs exactly
    return (1.0 - scale) * uncond + scale * cond


def filter_top_k_top_p(logits, top_k: int, top_p: float) -> np.ndarray:
    """Filtered, renormalised probabilities over the last axis.

    Codes are ranked by descending logit (lower index first on ties);
    the best ``top_k`` survive, then the shortest prefix of those whose
    renormalised mass reaches ``top_p``.
    """
    x = np.asarray(logits, dtype=np.float64)
    v = x.shape[-1]
    k = v if top_k in (0, None) else int(top_k)
    if not 1 <= k <= v:
        raise InvalidArgument(f"top_k {top_k} outside [1, {v}]")
    if not 0 < top_p <= 1:
        raise InvalidArgument(f"top_p {top_p} outside (0, 1]")
    flat = x.reshape(-1, v)
    order = np.argsort(-flat, axis=-1, kind="stable")[:, :k]
    ranked = np.take_along_axis(flat, order, axis=-1)
    with np.errstate(invalid="ignore", over="ignore"):
        ranked = np.exp(ranked - ranked[:, :1])
        ranked /= ranked.sum(-1, keepdims=True)
    cum = np.cumsum(ranked, axis=-1)
    n_keep = np.minimum((cum < top_p).sum(-1) + 1, k)
    keep = np.arange(k)[None, :] < n_keep[:, None]
    ranked = np.where(keep, ranked, 0.0)
    total = ranked.sum(-1, keepdims=True)
    if not np.all(np.isfinite(total)) or np.any(total <= 0):
        raise NumericFailure("no probability mass left after top-k/top-p filtering")
    out = np.zeros_like(flat)
    np.put_along_axis(out, order, ranked / total, axis=-1)
    return out.reshape(x.shape)


def _uniforms(seed: int, stage: int, n: int) -> np.ndarray:
    """Counter-based stream: draw ``i`` belongs to position ``i`` of the stage."""
    bits = np.random.Philox(key=np.array([seed, stage], dtype=np.uint64))
    return np.random.Generator(bits).random(n)


def sample_from_probs(probs: np.ndarray, uniforms: np.ndarray) -> np.ndarray:
    flat = probs.reshape(-1, probs.shape[-1])
    cdf = np.cumsum(flat, axis=-1)
    idx = (cdf <= uniforms.reshape(-1, 1)).sum(-1)
    last = flat.shape[-1] - 1 - np.argmax(flat[:, ::-1] > 0, axis=-1)
    return np.minimum(idx, last).reshape(probs.shape[:-1])


def sample_token_map(logits, cfg: SamplerConfig, stage: int = 0) -> np.ndarray:
    """Independent draw per position, positions in row-major order."""
    probs = filter_top_k_top_p(logits, cfg.top_k, cfg.top_p)
    n = int(np.prod(probs.shape[:-1]))
    return sample_from_probs(probs, _uniforms(cfg.seed, stage, n))


# ---------------------------------------------------------------------------
# instrumentation


@dataclass
class StageRecord:
    stage: int
    tokens: int
    retained_bytes: int  # activation bytes carried into the next stage, per sample
    retained_reals: int


@dataclass
class GenerationTrace:
    """What crossed each stage boundary besides the sampled token map."""

    stages: list[StageRecord] = field(default_factory=list)
    embed_dim: int = 0
    paradigm: str = "markov"

    def end_stage(self, stage: int, tokens: int, carry: dict, batch: int):
        reals = sum(t.numel() for ts in carry.values() for t in ts) // max(batch, 1)
        nbytes = sum(t.numel() * t.element_size() for ts in carry.values() for t in ts) // max(batch, 1)
        self.stages.append(StageRecord(stage, tokens, nbytes, reals))

    @property
    def retained_bytes(self) -> int:
        """Bytes retained across boundaries, summed over all transitions that feed a later stage."""
        return sum(r.retained_bytes for r in self.stages[:-1])


@dataclass
class GenerationResult:
    pyramid: ResidualPyramid
    image: np.ndarray
    intermediates: list[np.ndarray]
    trace: GenerationTrace


def _labels(model: MVAR, cfg: SamplerConfig) -> tuple[torch.Tensor, torch.Tensor]:
    label = model.null_class if cfg.class_label < 0 else cfg.class_label
    if label > model.null_class:
        raise InvalidConfig(f"class label {cfg.class_label} outside {model.cfg.class_count} classes")
    return torch.tensor([label]), torch.tensor([model.null_class])


def _check_codebook(model: MVAR, codebook: Codebook):
    if codebook.size != model.cfg.vocab_size:
        raise InvalidConfig(f"codebook of {codebook.size} codes vs vocabulary {model.cfg.vocab_size}")


def _finish(maps, codebook, model, trace, intermediates) -> GenerationResult:
    pyramid = ResidualPyramid(maps)
    sched = model.cfg.scales
    image = decode_pyramid(pyramid, codebook, sched)
    stages = [decode_pyramid(pyramid, codebook, sched, upto=l) for l in range(1, len(maps) + 1)] if intermediates else []
    return GenerationResult(pyramid, image, stages, trace)


@torch.no_grad()
def generate(model: MVAR, codebook: Codebook, cfg: SamplerConfig, intermediates: bool = False) -> GenerationResult:
    """Sample one pyramid. Only the previous token map crosses stage boundaries.

    Models trained with the full-causal baseline mask need earlier stages
    and are routed to :func:`generate_with_cache`.
    """
    cfg.validate(model.cfg.vocab_size)
    _check_codebook(model, codebook)
    if model.cfg.variant == "full-causal":
        return generate_with_cache(model, codebook, cfg, intermediates)
    model.eval()
    trace = GenerationTrace(embed_dim=model.cfg.embed_dim, paradigm="markov")
    cond, uncond = _labels(model, cfg)
    prev = torch.cat([cond, uncond])
    maps = []
    for l in range(len(model.sizes)):
        carry: dict = {}  # nothing but the token map is handed to the next stage
        x = model.embed_stage_input(prev, l)
        logits = model.forward_stage(x, l)
        guided = cfg_combine(logits[0], logits[1], cfg.guidance)
        tokens = sample_token_map(guided.numpy(), cfg, stage=l)
        maps.append(tokens)
        trace.end_stage(l, tokens.size, carry, batch=2)
        prev = torch.from_numpy(np.stack([tokens, tokens]))
    return _finish(maps, codebook, model, trace, intermediates)


@torch.no_grad()
def generate_with_cache(model: MVAR, codebook: Codebook, cfg: SamplerConfig, intermediates: bool = False) -> GenerationResult:
    """Reference sampler that keeps every block's keys and values across stages.

    Queries of stage ``l`` attend over all cached keys plus their own; the
    model's mask variant decides which of those are visible. For scale-Markov
    models every cached key is masked out, so the tokens must match
    :func:`generate`.
    """
    cfg.validate(model.cfg.vocab_size)
    _check_codebook(model, codebook)
    model.eval()
    full_causal = model.cfg.variant == "full-causal"
    trace = GenerationTrace(embed_dim=model.cfg.embed_dim, paradigm="full-causal" if full_causal else "markov-cached")
    cond, uncond = _labels(model, cfg)
    prev = torch.cat([cond, uncond])
    cache_k = [None] * len(model.blocks)
    cache_v = [None] * len(model.blocks)
    maps = []
    for l, (h, w) in enumerate(model.sizes):
        x = model.embed_stage_input(prev, l)
        b, n, d = x.shape[0], h * w, x.shape[-1]
        x = x.reshape(b, n, d)
        n_prev = 0 if cache_k[0] is None else cache_k[0].shape[-2]
        if full_causal or not uses_local_attention((h, w), model.window):
            own = np.ones((n, n), dtype=bool)
        else:
            own = neighborhood_mask((h, w), model.window)
        mask = np.concatenate([np.full((n, n_prev), full_causal), own], axis=1)
        for i, block in enumerate(model.blocks):
            q, k, v = block.split_heads(x)
            if cache_k[i] is not None:
                k = torch.cat([cache_k[i], k], dim=-2)
                v = torch.cat([cache_v[i], v], dim=-2)
            cache_k[i], cache_v[i] = k, v
            out, _ = full_attention(q, k, v, mask)
            x = block.merge(x, out)
        logits = model.head(model.norm(x)).reshape(b, h, w, -1)
        guided = cfg_combine(logits[0], logits[1], cfg.guidance)
        tokens = sample_token_map(guided.numpy(), cfg, stage=l)
        maps.append(tokens)
        trace.end_stage(l, tokens.size, {"k": cache_k, "v": cache_v}, batch=b)
        prev = torch.from_numpy(np.stack([tokens, tokens]))
    return _finish(maps, codebook, model, trace, intermediates)


# ---------------------------------------------------------------------------
# output


def to_pixels(image: np.ndarray) -> np.ndarray:
    return np.clip(np.round(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)


def write_ppm(path, image: np.ndarray) -> None:
    """Binary P6 pixmap from an (h, w, 3) image in [0, 1]."""
    px = to_pixels(image)
    if px.ndim != 3 or px.shape[-1] != 3:
        raise InvalidArgument(f"PPM needs (h, w, 3), got {px.shape}")
    h, w, _ = px.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(px.tobytes())


def read_ppm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    parts = data.split(b"\n", 3)
    if parts[0] != b"P6":
        raise InvalidArgument(f"{path} is not a binary PPM")
    w, h = map(int, parts[1].split())
    return np.frombuffer(parts[3], dtype=np.uint8).reshape(h, w, 3)


def write_generation(result: GenerationResult, out_dir, stem: str = "sample") -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = [out / f"{stem}.ppm"]
    write_ppm(paths[0], result.image)
    for l, img in enumerate(result.intermediates, start=1):
        p = out / f"{stem}_stage{l}.ppm"
        write_ppm(p, img)
        paths.append(p)
    return paths
