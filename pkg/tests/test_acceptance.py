"""Acceptance suite: one test per criterion, each printing a pass/fail line.

Run on its own with ``pytest tests/test_acceptance.py -v -s``; the lines are
also repeated in the terminal summary.
"""
import math
import subprocess
import sys
import time
from pathlib import Path

import numpy as np
import pytest
import torch

from mvar.analysis import attention_flops, closed_form_pairs, neighborhood_mass_curve, scale_attention_matrix
from mvar.attention import full_attention, neighborhood_mask, spatial_markov_attention
from mvar.config import load_config
from mvar.data import SyntheticDataset
from mvar.model import MVAR, DensePlan, LocalPlan, ModelConfig, stage_loss
from mvar.quantizer import ScaleSchedule, decode_pyramid, encode_pyramid, fit_codebook
from mvar.sampler import SamplerConfig, generate, generate_with_cache
from mvar.trainer import DataConfig, fit_dataset_codebook, read_metrics, run_training, uniform_loss

TOY = Path(__file__).resolve().parents[1] / "configs" / "toy.json"


class Timer:
    def __enter__(self):
        self.t0 = time.perf_counter()
        return self

    def __exit__(self, *exc):
        self.seconds = time.perf_counter() - self.t0


# -- shared toy runs ---------------------------------------------------------


@pytest.fixture(scope="module")
def toy_run(tmp_path_factory):
    """The 3,000-step toy run (30 epochs of 100 steps)."""
    cfg = load_config(TOY)
    out = tmp_path_factory.mktemp("toy")
    torch.set_num_threads(1)
    with Timer() as t:
        state, _ = run_training(cfg.model, cfg.train, cfg.data, out)
    return state, read_metrics(out / "metrics.csv"), t.seconds, cfg


@pytest.fixture(scope="module")
def baseline_run(tmp_path_factory):
    """Short full-causal baseline so cross-scale weights exist."""
    cfg = load_config(TOY, ["model.variant=full-causal"])
    out = tmp_path_factory.mktemp("baseline")
    with Timer() as t:
        state, _ = run_training(cfg.model, cfg.train, cfg.data, out, max_steps=300)
    return state, t.seconds


def val_batch(state, cfg, n=32):
    size = tuple(cfg.model.schedule[-1])
    data = SyntheticDataset(cfg.model.class_count, size, cfg.data.train_size, n, cfg.data.seed)
    images, labels = data.split("val")
    pyramid = encode_pyramid(images, cfg.model.scales, state.codebook)
    return [torch.from_numpy(m) for m in pyramid.maps], torch.from_numpy(labels)


# -- 1 -----------------------------------------------------------------------


def test_criterion_1_neighborhood_oracle(acceptance_log):
    worst = 0.0
    with Timer() as t:
        for seed in range(100):
            g = torch.Generator().manual_seed(seed)
            for h in range(1, 7):
                for w in range(1, 7):
                    q, k, v = (torch.randn(2, h * w, 8, generator=g) for _ in range(3))
                    for kh in (1, 3, 5, 7):
                        for kw in (1, 3, 5, 7):
                            local, _ = spatial_markov_attention(q, k, v, (h, w), (kh, kw))
                            dense, _ = full_attention(q, k, v, neighborhood_mask((h, w), (kh, kw)))
                            worst = max(worst, (local - dense).abs().max().item())
    ok = worst <= 1e-6 and t.seconds < 60
    acceptance_log(1, "neighborhood vs masked dense", ok, f"max |diff| {worst:.2e}, {t.seconds:.1f}s")
    assert worst <= 1e-6
    assert t.seconds < 60


# -- 2 -----------------------------------------------------------------------


def test_criterion_2_complexity_algebra(acceptance_log):
    mismatches = []
    with Timer() as t:
        for a in (2, 3):
            for L in range(2, 6):
                # k only enters the scale-Markov cost
                for k in (1, 9, 25, 49):
                    r = attention_flops("markov", a=a, L=L, k=k)
                    if not r.measured_total == r.analytic_total == closed_form_pairs("markov", a, L, k):
                        mismatches.append(("markov", a, L, k))
                for paradigm in ("next-scale", "next-token"):
                    r = attention_flops(paradigm, a=a, L=L)
                    if not r.measured_total == r.analytic_total == closed_form_pairs(paradigm, a, L, 9):
                        mismatches.append((paradigm, a, L))
        spots = (
            attention_flops("markov", a=2, L=4, k=9).measured_total,
            attention_flops("next-scale", a=2, L=4).measured_total,
            attention_flops("next-token", a=2, L=4).measured_total,
        )
    ok = not mismatches and spots == (765, 7692, 89_440) and t.seconds < 10
    acceptance_log(2, "counters equal closed forms", ok, f"spots {spots}, {len(mismatches)} mismatches, {t.seconds:.1f}s")
    assert not mismatches
    assert spots == (765, 7692, 89_440)
    assert t.seconds < 10


# -- 3 -----------------------------------------------------------------------


def test_criterion_3_scale_markov_independence(acceptance_log):
    worst, weakest_own = 0.0, math.inf
    with Timer() as t:
        for seed in range(20):
            torch.manual_seed(seed)
            # pack all four scales so the 8x8 block also carries its neighborhood mask
            cfg = ModelConfig(depth=2, embed_dim=16, head_count=2, vocab_size=16, pack_boundary=4, variant="markov")
            model = MVAR(cfg).train()
            stages = list(range(4))
            maps = [torch.randint(0, 16, (3, h, w)) for h, w in model.sizes]
            labels = torch.randint(0, 10, (3,))
            x = model.pack(model.stage_inputs(maps, labels), stages).detach().requires_grad_()
            logits = model.forward_packed(x, stages, "diagonal")
            bounds = np.cumsum([0] + cfg.scales.token_counts)
            for l in stages:
                (grad,) = torch.autograd.grad(stage_loss(logits[l], maps[l]), x, retain_graph=True)
                own = torch.zeros(grad.shape[1], dtype=torch.bool)
                own[bounds[l]:bounds[l + 1]] = True
                worst = max(worst, grad[:, ~own].abs().max().item())
                weakest_own = min(weakest_own, grad[:, own].abs().max().item())
    ok = worst <= 1e-8 and weakest_own > 0 and t.seconds < 60
    acceptance_log(3, "scale-Markov gradient independence", ok, f"max cross-stage |grad| {worst:.1e}, {t.seconds:.1f}s")
    assert worst <= 1e-8
    assert weakest_own > 0
    assert t.seconds < 60


# -- 4 -----------------------------------------------------------------------


def test_criterion_4_gradient_checks(acceptance_log):
    h = 1e-3
    torch.manual_seed(0)
    # the 4x4 scale outgrows the 3x3 window, so both attention forms are exercised
    cfg = ModelConfig(
        depth=2, embed_dim=8, head_count=2, vocab_size=16, class_count=3,
        schedule=[[1, 1], [2, 2], [4, 4]], window=[3, 3], dropout=0.0, class_dropout=0.0,
    )
    model = MVAR(cfg).double().eval()
    maps = [torch.randint(0, 16, (2, a, b)) for a, b in model.sizes]
    labels = torch.tensor([0, 2])

    def loss():
        return sum(stage_loss(lg, m) for lg, m in zip(model(maps, labels), maps))

    record = []
    with torch.no_grad():
        model(maps, labels, record=record)
    kinds = {type(plan) for plan, _ in record}

    worst, name_worst = 0.0, ""
    with Timer() as t:
        model.zero_grad()
        loss().backward()
        for name, p in model.named_parameters():
            analytic = p.grad.detach().clone()
            numeric = torch.zeros_like(p)
            flat, nflat = p.data.view(-1), numeric.view(-1)
            with torch.no_grad():
                for i in range(flat.numel()):
                    old = flat[i].item()
                    flat[i] = old + h
                    up = loss().item()
                    flat[i] = old - h
                    down = loss().item()
                    flat[i] = old
                    nflat[i] = (up - down) / (2 * h)
            scale = max(analytic.norm().item(), numeric.norm().item())
            err = 0.0 if scale < 1e-12 else (analytic - numeric).norm().item() / scale
            if err > worst:
                worst, name_worst = err, name
    ok = worst <= 1e-4 and kinds == {DensePlan, LocalPlan} and t.seconds < 300
    acceptance_log(4, "gradient check vs central differences", ok, f"worst rel err {worst:.1e} ({name_worst}), {t.seconds:.1f}s")
    assert kinds == {DensePlan, LocalPlan}
    assert worst <= 1e-4
    assert t.seconds < 300


# -- 5 -----------------------------------------------------------------------


def test_criterion_5_kv_cache_free_equivalence(acceptance_log):
    cfg = ModelConfig()
    data = SyntheticDataset(cfg.class_count, (8, 8), 200, 0, seed=0)
    codebook = fit_dataset_codebook(data, cfg.vocab_size, DataConfig(codebook_samples=5000, codebook_iters=10))
    mismatched, retained = [], 0
    with Timer() as t:
        for seed in range(20):
            torch.manual_seed(seed)
            model = MVAR(cfg).eval()
            sc = SamplerConfig(seed=seed, class_label=seed % cfg.class_count)
            a, b = generate(model, codebook, sc), generate_with_cache(model, codebook, sc)
            if not all(np.array_equal(x, y) for x, y in zip(a.pyramid.maps, b.pyramid.maps)):
                mismatched.append(seed)
            retained += a.trace.retained_bytes
    ok = not mismatched and retained == 0 and t.seconds < 60
    acceptance_log(5, "stateless sampler equals cached reference", ok, f"{len(mismatched)} mismatched seeds, retained {retained} B, {t.seconds:.1f}s")
    assert not mismatched
    assert retained == 0
    assert t.seconds < 60


# -- 6 -----------------------------------------------------------------------


def test_criterion_6_residual_monotonicity(acceptance_log):
    sched = ScaleSchedule.square([1, 2, 4, 8])
    rng = np.random.default_rng(0)
    codebook = fit_codebook(rng.normal(size=(4000, 3)), 32, seed=0, iters=20)
    violations = 0
    with Timer() as t:
        for _ in range(100):
            f = rng.normal(size=(8, 8, 3))
            pyramid = encode_pyramid(f, sched, codebook)
            errs = [np.linalg.norm(f - decode_pyramid(pyramid, codebook, sched, upto=l)) for l in range(1, 5)]
            violations += sum(b > a for a, b in zip(errs, errs[1:]))
    ok = violations == 0 and t.seconds < 60
    acceptance_log(6, "residual coding monotonicity", ok, f"{violations} violations over 100 maps, {t.seconds:.1f}s")
    assert violations == 0
    assert t.seconds < 60


# -- 7 -----------------------------------------------------------------------


def test_criterion_7_desk_scale_learning(toy_run, acceptance_log):
    _, metrics, seconds, cfg = toy_run
    losses = metrics["loss_total"]
    tail = losses[-len(losses) // 10:].mean()
    threshold = 0.7 * uniform_loss(cfg.model.vocab_size, len(cfg.model.schedule))
    ok = len(losses) == 3000 and tail <= threshold and seconds < 1800
    acceptance_log(7, "desk-scale learning", ok, f"final-10% loss {tail:.3f} <= {threshold:.3f}, {len(losses)} steps, {seconds:.0f}s")
    assert len(losses) == 3000
    assert tail <= threshold
    assert seconds < 1800


# -- 8 -----------------------------------------------------------------------


def test_criterion_8_redundancy_measurements(toy_run, baseline_run, acceptance_log):
    markov_state, _, _, cfg = toy_run
    base_state, base_seconds = baseline_run
    windows = [1, 3, 5, 7, 9]
    with Timer() as t:
        matrix = scale_attention_matrix(base_state.model, *val_batch(base_state, cfg))
        curves = [
            neighborhood_mass_curve(markov_state.model, windows, *val_batch(markov_state, cfg)),
            neighborhood_mass_curve(base_state.model, windows, *val_batch(base_state, cfg)),
        ]
    rows_ok = np.allclose(matrix.sum(1), 1.0, rtol=0, atol=1e-6)
    causal_ok = bool(np.all(matrix[np.triu_indices(len(matrix), 1)] == 0.0) and np.all(matrix >= 0))
    series = [m for c in curves for m in list(c.per_stage.values()) + [c.mean]]
    monotone = all(np.all(np.diff(m) >= 0) for m in series)
    bounded = all(max(m) <= 1.0 for m in series)
    seconds = t.seconds + base_seconds
    ok = rows_ok and causal_ok and monotone and bounded and seconds < 120
    acceptance_log(
        8, "redundancy measurements well-formed", ok,
        f"baseline own-scale mass {np.diag(matrix).round(3).tolist()}, mean curve {np.round(curves[1].mean, 3).tolist()}, {seconds:.0f}s",
    )
    assert rows_ok and causal_ok
    assert monotone and bounded
    assert seconds < 120


# -- 9 -----------------------------------------------------------------------


def _cli(*args):
    return subprocess.run([sys.executable, "-m", "mvar", *map(str, args)], capture_output=True, text=True, check=True)


def test_criterion_9_reproducibility(tmp_path, acceptance_log):
    with Timer() as t:
        for run in ("a", "b"):
            _cli("train", "--config", TOY, "--max-steps", 40, "--out", tmp_path / run / "train", "--threads", 1)
            _cli(
                "sample", "--checkpoint", tmp_path / run / "train" / "checkpoint.ckpt", "--count", 3,
                "--intermediates", "--out", tmp_path / run / "sample", "--threads", 1,
            )
    files = ["train/metrics.csv"] + sorted(str(p.relative_to(tmp_path / "a")) for p in (tmp_path / "a").glob("sample/*.ppm"))
    differing = [f for f in files if (tmp_path / "a" / f).read_bytes() != (tmp_path / "b" / f).read_bytes()]
    ok = not differing and len(files) == 1 + 3 * 5 and t.seconds < 300
    acceptance_log(9, "byte-identical reruns", ok, f"{len(files)} files compared, {len(differing)} differ, {t.seconds:.0f}s")
    assert not differing
    assert len(files) == 16
    assert t.seconds < 300
