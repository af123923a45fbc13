"""``mvar`` command line: train, sample, analyze, bench, inspect.

Exit status is 0 on success, 2 for usage and configuration errors (reported
before any compute), 1 for runtime failures.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from pathlib import Path

import torch

from .analysis import (
    ACCUMULATION_NOTE,
    PARADIGMS,
    attention_flops,
    memory_report,
    neighborhood_mass_curve,
    normalize_paradigm,
    scale_attention_matrix,
    write_flops_csv,
    write_memory_csv,
    write_neighborhood_csv,
    write_pgm,
    write_scale_attn_csv,
)
from .checkpoint import load_checkpoint
from .config import RunConfig, load_config, schema_text
from .data import SyntheticDataset
from .errors import InvalidConfig, MVARError
from .model import analytic_param_count
from .quantizer import encode_pyramid
from .sampler import generate, write_generation
from .trainer import model_from_checkpoint, read_metrics, run_training

log = logging.getLogger("mvar")


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# helpers


def _threads(value) -> int:
    raw = value if value is not None else os.environ.get("MVAR_THREADS")
    if raw is None:
        return os.cpu_count() or 1
    try:
        n = int(raw)
    except ValueError:
        raise UsageError(f"--threads/MVAR_THREADS must be an integer, got {raw!r}") from None
    if n < 1:
        raise UsageError("--threads must be >= 1")
    return n


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def write_manifest(out: Path, command: str, cfg: RunConfig | None, seed, threads: int, artifacts) -> Path:
    entries = []
    for p in sorted(set(Path(a) for a in artifacts)):
        entries.append({"path": str(p.relative_to(out)) if p.is_relative_to(out) else str(p), "sha256": _sha256(p)})
    manifest = {
        "command": command,
        "config_hash": cfg.hash() if cfg is not None else None,
        "config": cfg.to_dict() if cfg is not None else None,
        "seed": seed,
        "threads": threads,
        "deterministic": threads == 1,
        "artifacts": entries,
    }
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def _config(args) -> RunConfig:
    try:
        return load_config(args.config, args.set or ())
    except InvalidConfig as e:
        raise UsageError(str(e)) from None


def _load_model(path):
    ckpt = load_checkpoint(path)
    model, codebook, model_cfg = model_from_checkpoint(ckpt)
    return ckpt, model, codebook, model_cfg


def _check_schedule(cfg: RunConfig, model_cfg, explicit: bool, path):
    if explicit and cfg.model.schedule != model_cfg.schedule:
        raise InvalidConfig(
            f"config schedule {cfg.model.schedule} does not match checkpoint {path} schedule {model_cfg.schedule}"
        )


# ---------------------------------------------------------------------------
# subcommands


def cmd_train(args, cfg: RunConfig, threads: int) -> int:
    out = Path(args.out)
    if args.seed is not None:
        cfg.train.seed = args.seed
    if args.epochs is not None:
        cfg.train.epochs = args.epochs
    state, ckpt_path = run_training(
        cfg.model,
        cfg.train,
        cfg.data,
        out,
        deterministic=threads == 1,
        resume=args.resume,
        max_steps=args.max_steps,
        progress_every=args.log_every,
    )
    artifacts = [out / "metrics.csv", ckpt_path]
    artifacts += sorted(out.glob("checkpoint_step*.ckpt"))
    metrics = read_metrics(out / "metrics.csv")
    if metrics:
        from .plotting import plot_losses

        plot_losses(metrics, out / "loss.png")
        artifacts.append(out / "loss.png")
    write_manifest(out, "train", cfg, cfg.train.seed, threads, artifacts)
    print(f"trained {state.step} steps; checkpoint {ckpt_path}")
    return 0


def cmd_sample(args, cfg: RunConfig, threads: int) -> int:
    out = Path(args.out)
    ckpt, model, codebook, model_cfg = _load_model(args.checkpoint)
    _check_schedule(cfg, model_cfg, args.config is not None, args.checkpoint)
    sc = cfg.sample
    if args.seed is not None:
        sc.seed = args.seed
    if args.unconditional:
        sc.class_label = -1
    elif args.class_label is not None:
        sc.class_label = args.class_label
    if args.guidance is not None:
        sc.guidance = args.guidance
    sc.validate(model_cfg.vocab_size)
    base = sc.seed
    paths = []
    traces = []
    for i in range(args.count):
        sc.seed = base + i
        result = generate(model, codebook, sc, intermediates=args.intermediates)
        paths += write_generation(result, out, stem=f"sample_{i:03d}")
        traces.append(memory_report(result.trace))
    write_memory_csv(out / "memory.csv", traces[:1])
    sc.seed = base
    write_manifest(out, "sample", cfg, base, threads, paths + [out / "memory.csv"])
    for p in paths:
        print(p)
    return 0


def _encoded_samples(model_cfg, codebook, cfg: RunConfig, count: int):
    size = tuple(model_cfg.schedule[-1])
    data = SyntheticDataset(model_cfg.class_count, size, cfg.data.train_size, max(cfg.data.val_size, count), cfg.data.seed)
    images, labels = data.split("val")
    images, labels = images[:count], labels[:count]
    pyramid = encode_pyramid(images, model_cfg.scales, codebook)
    return [torch.from_numpy(m) for m in pyramid.maps], torch.from_numpy(labels)


def cmd_analyze(args, cfg: RunConfig, threads: int) -> int:
    from .plotting import plot_neighborhood_curve, plot_scale_attention

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.seed is not None:
        cfg.sample.seed = args.seed
    windows = [int(w) for w in args.windows.split(",") if w.strip()]
    models = [("primary", args.checkpoint)] + ([("baseline", args.baseline)] if args.baseline else [])
    artifacts = []
    memory = []
    meta = {"accumulation": ACCUMULATION_NOTE, "windows": windows, "samples": args.samples, "models": {}}
    matrix_done = False
    for role, path in models:
        _, model, codebook, model_cfg = _load_model(path)
        maps, labels = _encoded_samples(model_cfg, codebook, cfg, args.samples)
        curve = neighborhood_mass_curve(model, windows, maps, labels)
        suffix = "" if role == "primary" else "_baseline"
        write_neighborhood_csv(out / f"neighborhood_curve{suffix}.csv", curve)
        plot_neighborhood_curve(curve, out / f"neighborhood_curve{suffix}.png")
        artifacts += [out / f"neighborhood_curve{suffix}.csv", out / f"neighborhood_curve{suffix}.png"]
        if model_cfg.variant == "full-causal" and not matrix_done:
            matrix = scale_attention_matrix(model, maps, labels)
            write_scale_attn_csv(out / "scale_attn.csv", matrix)
            write_pgm(out / "scale_attn.pgm", matrix)
            plot_scale_attention(matrix, out / "scale_attn.png")
            artifacts += [out / "scale_attn.csv", out / "scale_attn.pgm", out / "scale_attn.png"]
            matrix_done = True
        memory.append(memory_report(generate(model, codebook, cfg.sample).trace))
        meta["models"][role] = {"checkpoint": str(path), "variant": model_cfg.variant}
    if not matrix_done:
        print("note: no full-causal checkpoint given, scale_attn.csv skipped", file=sys.stderr)
    write_memory_csv(out / "memory.csv", memory)
    (out / "analysis_meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    artifacts += [out / "memory.csv", out / "analysis_meta.json"]
    write_manifest(out, "analyze", cfg, cfg.sample.seed, threads, artifacts)
    for p in artifacts:
        print(p)
    return 0


def cmd_bench(args, cfg: RunConfig | None, threads: int) -> int:
    from .plotting import plot_flops

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    names = PARADIGMS if args.paradigm == "all" else [normalize_paradigm(args.paradigm)]
    reports = []
    for name in names:
        if args.schedule:
            r = attention_flops(name, schedule=args.schedule, k=args.k, d=args.d)
        else:
            r = attention_flops(name, a=args.a, L=args.L, k=args.k, d=args.d)
        if r.analytic_total != r.measured_total or (r.closed_form is not None and r.closed_form != r.measured_total):
            raise MVARError(f"{name}: counter {r.measured_total} disagrees with closed form {r.closed_form}")
        reports.append(r)
        print(f"{name}: {r.measured_total} pair-units ({r.measured_macs} MACs at d={r.d})")
    write_flops_csv(out / "flops.csv", reports)
    plot_flops(reports, out / "flops.png")
    write_manifest(out, "bench", cfg, None, threads, [out / "flops.csv", out / "flops.png"])
    return 0


def inspect_summary(path) -> dict:
    ckpt = load_checkpoint(path)
    model_cfg = RunConfig.from_dict({"model": ckpt.model_config}).model
    return {
        "path": str(path),
        "format_version": ckpt.version,
        "schedule": model_cfg.schedule,
        "variant": model_cfg.variant,
        "param_count": ckpt.param_count,
        "analytic_param_count": analytic_param_count(model_cfg),
        "codebook_size": int(ckpt.codebook.shape[0]),
        "step": ckpt.step,
    }


def cmd_inspect(args, cfg, threads: int) -> int:
    info = inspect_summary(args.checkpoint)
    if args.json:
        print(json.dumps(info, sort_keys=True))
    else:
        for k, v in info.items():
            print(f"{k}: {v}")
    return 0


# ---------------------------------------------------------------------------
# parser


def _schedule_arg(text: str):
    try:
        sides = json.loads(text if text.lstrip().startswith("[") else f"[{text}]")
        return [[int(s), int(s)] if isinstance(s, int) else [int(s[0]), int(s[1])] for s in sides]
    except (ValueError, TypeError, IndexError):
        raise argparse.ArgumentTypeError(f"bad schedule {text!r}; use e.g. 1,2,4,8") from None


def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.RawDescriptionHelpFormatter
    schema = schema_text()
    parser = argparse.ArgumentParser(prog="mvar", description=__doc__, epilog=schema, formatter_class=fmt)
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run configuration")
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key (repeatable)")
    common.add_argument("--out", default="mvar-out", help="output directory (default: %(default)s)")
    common.add_argument("--seed", type=int, help="seed for this command")
    common.add_argument("--threads", type=int, help="worker threads; 1 forces deterministic mode (env MVAR_THREADS)")

    p = sub.add_parser("train", parents=[common], help="train a model", epilog=schema, formatter_class=fmt)
    p.add_argument("--epochs", type=int, help="override train.epochs")
    p.add_argument("--max-steps", type=int, help="stop after this many optimisation steps")
    p.add_argument("--resume", help="checkpoint to resume from")
    p.add_argument("--log-every", type=int, default=0, help="log the loss every N steps")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sample", parents=[common], help="generate images", epilog=schema, formatter_class=fmt)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--count", type=int, default=1, help="number of images (seeds seed, seed+1, ...)")
    who = p.add_mutually_exclusive_group()
    who.add_argument("--class", dest="class_label", type=int, help="class to condition on")
    who.add_argument("--unconditional", action="store_true", help="sample with the null class")
    p.add_argument("--guidance", type=float, help="override sample.guidance")
    p.add_argument("--intermediates", action="store_true", help="also write per-stage reconstructions")
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("analyze", parents=[common], help="attention redundancy report", epilog=schema, formatter_class=fmt)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--baseline", help="full-causal checkpoint for the cross-scale matrix")
    p.add_argument("--windows", default="1,3,5,7,9", help="comma-separated window sides")
    p.add_argument("--samples", type=int, default=32, help="validation images to average over")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("bench", parents=[common], help="count attention pair interactions")
    p.add_argument("--paradigm", default="markov", choices=list(PARADIGMS) + ["markov-next-scale", "all"])
    p.add_argument("--a", type=int, help="scale ratio (side of stage l is a^(l-1))")
    p.add_argument("--L", type=int, help="number of scales")
    p.add_argument("--schedule", type=_schedule_arg, help="explicit sides, e.g. 1,2,3,4; excludes --a/--L")
    p.add_argument("--k", type=int, default=9, help="neighborhood size (odd square)")
    p.add_argument("--d", type=int, default=1, help="head dimension for MAC totals")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("inspect", help="summarise a checkpoint")
    p.add_argument("checkpoint")
    p.add_argument("--json", action="store_true", help="machine-readable output")
    p.add_argument("--threads", type=int, help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_inspect)
    return parser


def _validate(parser, args):
    if args.command == "bench":
        if args.schedule and (args.a is not None or args.L is not None):
            parser.error("--schedule conflicts with --a/--L")
        if not args.schedule and (args.a is None or args.L is None):
            parser.error("bench needs --a and --L, or --schedule")
    if args.command == "sample" and args.count < 1:
        parser.error("--count must be >= 1")
    if args.command == "analyze" and args.samples < 1:
        parser.error("--samples must be >= 1")
    if args.command == "train" and args.epochs is not None and args.epochs < 0:
        parser.error("--epochs must be >= 0")


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)  # exits 2 on usage errors
    _validate(parser, args)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        threads = _threads(getattr(args, "threads", None))
        cfg = _config(args) if hasattr(args, "config") else None
    except UsageError as e:
        parser.print_usage(sys.stderr)
        print(f"mvar: error: {e}", file=sys.stderr)
        return 2
    torch.set_num_threads(threads)
    if threads == 1:
        torch.use_deterministic_algorithms(True)
    try:
        return args.func(args, cfg, threads)
    except (MVARError, OSError) as e:
        print(f"mvar: error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
