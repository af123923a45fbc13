"""Training loop, learning-rate schedule and checkpoint (de)hydration."""
from __future__ import annotations

import base64
import csv
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .data import SyntheticDataset
from .errors import InvalidConfig, NumericFailure
from .model import MVAR, ModelConfig, stage_loss
from .quantizer import Codebook, encode_pyramid, fit_codebook

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    lr: float = 1e-4
    weight_decay: float = 0.05
    betas: list = field(default_factory=lambda: [0.9, 0.95])
    batch_size: int = 16
    epochs: int = 30
    warmup_epochs: int = 3
    max_grad_norm: float = 2.0
    seed: int = 0
    checkpoint_every: int = 0  # steps; 0 saves only the final checkpoint

    def __post_init__(self):
        self.betas = [float(b) for b in self.betas]
        self.validate()

    def validate(self):
        if self.lr < 0:
            raise InvalidConfig("lr must be non-negative")
        if len(self.betas) != 2 or not all(0 <= b < 1 for b in self.betas):
            raise InvalidConfig(f"betas must be two numbers in [0, 1), got {self.betas}")
        if self.max_grad_norm <= 0:
            raise InvalidConfig("max_grad_norm must be positive")
        if self.batch_size < 1 or self.epochs < 0 or self.warmup_epochs < 0:
            raise InvalidConfig("batch_size must be positive, epochs and warmup_epochs non-negative")


@dataclass
class DataConfig:
    train_size: int = 1600
    val_size: int = 160
    seed: int = 0
    codebook_samples: int = 20000
    codebook_iters: int = 50

    def __post_init__(self):
        if self.train_size < 1 or self.val_size < 0 or self.codebook_samples < 1:
            raise InvalidConfig("dataset sizes must be positive")


def lr_at(step: int, base: float, warmup_steps: int) -> float:
    """Rate used for the 1-based optimisation step ``step``: linear warmup, then flat."""
    if warmup_steps > 0 and step < warmup_steps:
        return base * step / warmup_steps
    return base


@dataclass
class TrainState:
    model: MVAR
    optimizer: torch.optim.Optimizer
    codebook: Codebook
    model_config: ModelConfig
    train_config: TrainConfig
    step: int = 0
    warmup_steps: int = 0


def make_optimizer(model: MVAR, cfg: TrainConfig) -> torch.optim.AdamW:
    return torch.optim.AdamW(
        model.parameters(),
        lr=cfg.lr,
        betas=tuple(cfg.betas),
        weight_decay=cfg.weight_decay,
    )


def init_state(model_cfg: ModelConfig, train_cfg: TrainConfig, codebook: Codebook) -> TrainState:
    if codebook.size != model_cfg.vocab_size:
        raise InvalidConfig(f"codebook has {codebook.size} codes, model expects {model_cfg.vocab_size}")
    torch.manual_seed(train_cfg.seed)
    model = MVAR(model_cfg)
    return TrainState(model, make_optimizer(model, train_cfg), codebook, model_cfg, train_cfg)


def fit_dataset_codebook(dataset: SyntheticDataset, V: int, data_cfg: DataConfig) -> Codebook:
    images, _ = dataset.split("train")
    pixels = images.reshape(-1, images.shape[-1])
    rng = np.random.default_rng(data_cfg.seed)
    n = min(data_cfg.codebook_samples, len(pixels))
    pick = np.sort(rng.choice(len(pixels), size=n, replace=False))
    return fit_codebook(pixels[pick], V, seed=data_cfg.seed, iters=data_cfg.codebook_iters)


def _step_seed(seed: int, step: int) -> int:
    return (seed * 1_000_003 + step) % (2**63)


def train_step(state: TrainState, images: np.ndarray, labels: np.ndarray) -> list[float]:
    """One optimisation step; returns the per-stage losses (before the update)."""
    if len(images) == 0:
        raise InvalidConfig("empty batch")
    cfg = state.train_config
    model = state.model
    schedule = state.model_config.scales
    pyramid = encode_pyramid(images, schedule, state.codebook)
    maps = [torch.from_numpy(m) for m in pyramid.maps]
    labels = torch.as_tensor(labels, dtype=torch.long)

    lr = lr_at(state.step + 1, cfg.lr, state.warmup_steps)
    for group in state.optimizer.param_groups:
        group["lr"] = lr
    torch.manual_seed(_step_seed(cfg.seed, state.step))

    model.train()
    logits = model(maps, labels)
    losses = [stage_loss(lg, tgt) for lg, tgt in zip(logits, maps)]
    for l, loss in enumerate(losses):
        if not torch.isfinite(loss):
            raise NumericFailure(f"non-finite loss at stage {l + 1} (step {state.step + 1})")
    total = torch.stack(losses).sum()
    state.optimizer.zero_grad(set_to_none=True)
    total.backward()
    torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.max_grad_norm)
    state.optimizer.step()
    state.step += 1
    return [float(x.detach()) for x in losses]


# ---------------------------------------------------------------------------
# checkpoints


def state_to_checkpoint(state: TrainState, extra: dict | None = None) -> Checkpoint:
    params = {k: v.detach().cpu().numpy() for k, v in state.model.state_dict().items()}
    optim = {}
    steps = {}
    names = {id(p): n for n, p in state.model.named_parameters()}
    for group in state.optimizer.param_groups:
        for p in group["params"]:
            s = state.optimizer.state.get(p)
            if not s:
                continue
            name = names[id(p)]
            optim[f"exp_avg/{name}"] = s["exp_avg"].detach().cpu().numpy()
            optim[f"exp_avg_sq/{name}"] = s["exp_avg_sq"].detach().cpu().numpy()
            steps[name] = float(s["step"])
    rng = base64.b64encode(torch.get_rng_state().numpy().tobytes()).decode("ascii")
    return Checkpoint(
        model_config=state.model_config.to_dict(),
        codebook=state.codebook.vectors,
        params=params,
        optimizer=optim,
        step=state.step,
        train_config=asdict(state.train_config),
        rng_state=rng,
        extra={"optimizer_steps": steps, "warmup_steps": state.warmup_steps, **(extra or {})},
    )


def model_from_checkpoint(ckpt: Checkpoint) -> tuple[MVAR, Codebook, ModelConfig]:
    cfg = ModelConfig(**ckpt.model_config)
    model = MVAR(cfg)
    model.load_state_dict({k: torch.from_numpy(v.copy()) for k, v in ckpt.params.items()})
    model.eval()
    return model, Codebook(ckpt.codebook), cfg


def state_from_checkpoint(ckpt: Checkpoint, train_cfg: TrainConfig | None = None) -> TrainState:
    model, codebook, model_cfg = model_from_checkpoint(ckpt)
    train_cfg = train_cfg or TrainConfig(**ckpt.train_config)
    optimizer = make_optimizer(model, train_cfg)
    steps = ckpt.extra.get("optimizer_steps", {})
    for name, p in model.named_parameters():
        if name in steps:
            optimizer.state[p] = {
                "step": torch.tensor(steps[name]),
                "exp_avg": torch.from_numpy(ckpt.optimizer[f"exp_avg/{name}"].copy()),
                "exp_avg_sq": torch.from_numpy(ckpt.optimizer[f"exp_avg_sq/{name}"].copy()),
            }
    if ckpt.rng_state:
        raw = np.frombuffer(base64.b64decode(ckpt.rng_state), dtype=np.uint8).copy()
        torch.set_rng_state(torch.from_numpy(raw))
    return TrainState(
        model,
        optimizer,
        codebook,
        model_cfg,
        train_cfg,
        step=ckpt.step,
        warmup_steps=int(ckpt.extra.get("warmup_steps", 0)),
    )


# ---------------------------------------------------------------------------
# full runs


def batch_indices(step: int, train_size: int, batch_size: int, seed: int) -> np.ndarray:
    """Sample indices of 0-based ``step``: a fresh permutation per epoch."""
    per_epoch = train_size // batch_size
    epoch, pos = divmod(step, per_epoch)
    perm = np.random.default_rng([seed, epoch]).permutation(train_size)
    return perm[pos * batch_size:(pos + 1) * batch_size]


def _probe_writable(out: Path):
    out.mkdir(parents=True, exist_ok=True)
    probe = out / ".write-probe"
    probe.write_bytes(b"")
    probe.unlink()


def run_training(
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    data_cfg: DataConfig,
    out_dir,
    deterministic: bool = True,
    resume=None,
    max_steps: int | None = None,
    progress_every: int = 0,
) -> tuple[TrainState, Path]:
    """Train from scratch (or resume) and write metrics + checkpoints to ``out_dir``.

    Returns the final state and the path of the final checkpoint. In
    deterministic mode the ``wall_ms`` column is written as 0 so reruns
    produce identical bytes.
    """
    out = Path(out_dir)
    try:
        _probe_writable(out)
    except OSError as e:
        raise OSError(f"output path {out} is not writable: {e}") from e

    size = tuple(model_cfg.schedule[-1])
    dataset = SyntheticDataset(model_cfg.class_count, size, data_cfg.train_size, data_cfg.val_size, data_cfg.seed)
    images, labels = dataset.split("train")
    if data_cfg.train_size < train_cfg.batch_size:
        raise InvalidConfig("train_size smaller than batch_size")
    per_epoch = data_cfg.train_size // train_cfg.batch_size
    total_steps = train_cfg.epochs * per_epoch
    if max_steps is not None:
        total_steps = min(total_steps, max_steps)

    if resume is not None:
        state = state_from_checkpoint(load_checkpoint(resume), train_cfg)
    else:
        codebook = fit_dataset_codebook(dataset, model_cfg.vocab_size, data_cfg)
        state = init_state(model_cfg, train_cfg, codebook)
        state.warmup_steps = train_cfg.warmup_epochs * per_epoch

    n_stages = len(model_cfg.schedule)
    header = ["step", "lr", "loss_total"] + [f"loss_{l + 1}" for l in range(n_stages)] + ["wall_ms"]
    final_path = out / "checkpoint.ckpt"
    with open(out / "metrics.csv", "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        while state.step < total_steps:
            t0 = time.perf_counter()
            idx = batch_indices(state.step, data_cfg.train_size, train_cfg.batch_size, train_cfg.seed)
            lr = lr_at(state.step + 1, train_cfg.lr, state.warmup_steps)
            losses = train_step(state, images[idx], labels[idx])
            wall = 0 if deterministic else int(round((time.perf_counter() - t0) * 1000))
            writer.writerow(
                [state.step, f"{lr:.8g}", f"{sum(losses):.8g}"] + [f"{x:.8g}" for x in losses] + [wall]
            )
            if progress_every and state.step % progress_every == 0:
                log.info("step %d/%d loss %.4f", state.step, total_steps, sum(losses))
            if train_cfg.checkpoint_every and state.step % train_cfg.checkpoint_every == 0:
                save_checkpoint(state_to_checkpoint(state), out / f"checkpoint_step{state.step}.ckpt")
    save_checkpoint(state_to_checkpoint(state), final_path)
    return state, final_path


def read_metrics(path) -> dict[str, np.ndarray]:
    with open(path) as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        return {}
    return {k: np.array([float(r[k]) for r in rows]) for k in rows[0]}


def uniform_loss(vocab_size: int, n_stages: int) -> float:
    """Total loss of a predictor that spreads mass evenly over the vocabulary."""
    return n_stages * math.log(vocab_size)
