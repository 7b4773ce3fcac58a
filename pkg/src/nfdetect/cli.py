"""Command line: train, bench, detect, noise-gen, plot.

Any subcommand accepts ``--config FILE``: ``key = value`` lines (``#``
comments, blank lines ignored) whose keys are that subcommand's long option
names with or without leading dashes. Flags given on the command line win.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import bench as B
from .channel import FrameBatch, MimoScenario, read_frame_file
from .detectors import DetectorConfig, run_detector, DetectorConfigError
from .flow.checkpoint import load_checkpoint, save_checkpoint
from .flow.model import CompiledFlow, FlowConfig
from .flow.train import TrainOptions, train
from .noise import FAMILIES, NoiseSpec, sample_noise, write_noise_file

log = logging.getLogger("nfdetect")


class ConfigFileError(ValueError):
    pass


def read_config_file(path) -> dict[str, str]:
    out = {}
    for n, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigFileError(f"{path}:{n}: expected 'key = value'")
        k, v = (s.strip() for s in line.split("=", 1))
        out[k.lstrip("-").replace("-", "_")] = v
    return out


def _floats(text: str) -> tuple[float, ...]:
    return tuple(float(v) for v in text.split(",") if v.strip())


def _labels(text: str) -> tuple[str, ...]:
    return tuple(v.strip() for v in text.split(";" if ";" in text else ",") if v.strip())


def _noise_from(args, n_tx: int) -> NoiseSpec:
    """Noise spec from flags; ``--snr`` rescales any family to power ``2*sigma**2``."""
    fam = args.noise_family
    if fam == "sas":
        spec = NoiseSpec(fam, alpha=args.alpha, sigma=args.sigma)
    elif fam == "gaussian":
        spec = NoiseSpec(fam, sigma=args.sigma)
    elif fam == "nakagami":
        spec = NoiseSpec(fam, m=args.m, omega=args.omega)
    else:
        spec = NoiseSpec(fam)
    if args.snr is not None:
        spec = spec.at_sigma(MimoScenario(n_tx, 1, args.snr).sigma)
    return spec


def _add_noise_flags(p, family_default="sas"):
    p.add_argument("--noise-family", "--family", dest="noise_family", choices=FAMILIES, default=family_default)
    p.add_argument("--alpha", type=float, default=2.0, help="SaS characteristic exponent")
    p.add_argument("--m", type=float, default=2.0, help="Nakagami shape")
    p.add_argument("--omega", type=float, default=1.0, help="Nakagami spread (mean power)")
    p.add_argument("--sigma", type=float, default=1.0, help="noise scale (ignored when --snr is given)")
    p.add_argument("--snr", type=float, default=None, help="SNR in dB; sets sigma from --ntx")


# --- subcommands ---------------------------------------------------------------------


def cmd_train(args) -> int:
    spec = _noise_from(args, args.ntx)
    data = sample_noise(spec, args.samples, args.nrx, args.seed)
    cfg = FlowConfig(dim=args.nrx, k_steps=args.k_steps, hidden_width=args.hidden)
    opts = TrainOptions(batch_size=args.batch, epochs=args.epochs, lr=args.lr, seed=args.seed)
    res = train(cfg, data, opts)
    meta = {
        "noise": spec.describe(), "snr_db": args.snr, "n_tx": args.ntx, "samples": args.samples,
        "epochs": args.epochs, "seed": args.seed, "final_nll": res.final_nll,
    }
    save_checkpoint(res.params, args.out, meta)
    print(json.dumps({"checkpoint": str(args.out), "final_nll": res.final_nll, "best_epoch": res.best_epoch}))
    return 0


def _plan_from(args) -> B.BenchPlan:
    overrides = {}
    for flag, field_name in (("frames", "frames"), ("seed", "seed"), ("csv", "csv_path"),
                             ("checkpoints", "checkpoint_dir"), ("train_samples", "train_samples"),
                             ("train_epochs", "train_epochs"), ("workers", "workers")):
        if getattr(args, flag) is not None:
            overrides[field_name] = getattr(args, flag)
    if args.train_missing is not None:
        overrides["train_missing"] = args.train_missing
    if args.no_timing:
        overrides["timing"] = False
    if args.preset:
        return B.preset(args.preset, **overrides)
    if not (args.axis and args.values and args.detectors):
        raise B.BenchConfigError("without --preset, give --axis, --values and --detectors")
    kw = {"alpha": args.alpha} if args.noise_family == "sas" else {}
    plan = B.BenchPlan(
        "custom", args.ntx, args.nrx, NoiseSpec(args.noise_family, **kw), args.axis,
        _floats(args.values), _labels(args.detectors), args.snr, csv_path="custom.csv",
    )
    return replace(plan, **overrides) if overrides else plan


def cmd_bench(args) -> int:
    plan = _plan_from(args)
    records = B.run_sweep(plan)
    failed = [r for r in records if r.failed]
    for r in records:
        status = "FAILED" if r.failed else f"ber={r.ber:.3e}"
        print(f"{r.detector:24s} snr={r.snr_db:g} alpha={r.alpha:g} {status}")
    if args.plot and plan.csv_path:
        from .plot import emit_plot

        emit_plot(plan.csv_path, args.plot, plan.axis)
    return 1 if failed else 0


def cmd_detect(args) -> int:
    frames = read_frame_file(args.frames)
    if not frames:
        raise ValueError(f"{args.frames} holds no frames")
    cfg = DetectorConfig.from_label(args.detector) if "(" in args.detector else DetectorConfig(args.detector, T=args.T, E=args.E)
    meta = {}
    if cfg.needs_flow:
        if not args.checkpoint:
            raise DetectorConfigError(f"{cfg.label} needs --checkpoint")
        ck = load_checkpoint(args.checkpoint)
        cfg.flow = CompiledFlow(ck.params, saturate=True)
        meta = ck.metadata
    n_tx = frames[0].H.shape[1]
    noise_var = args.noise_var
    if noise_var is None and "noise" in meta:
        noise_var = NoiseSpec.from_description(meta["noise"]).nominal_power
    if noise_var is None and args.snr is not None:
        noise_var = 2.0 * MimoScenario(n_tx, 1, args.snr).sigma ** 2
    if cfg.kind == "oracle_mle":
        cfg.noise_for_oracle = _noise_from(args, n_tx)
    if noise_var is None:
        noise_var = 1.0
    batch = FrameBatch(
        np.stack([f.H for f in frames]), np.stack([f.symbols for f in frames]),
        np.stack([f.w for f in frames]), np.stack([f.y for f in frames]),
    )
    out = run_detector(cfg, batch, noise_var)
    for i in range(len(frames)):
        x = out.x_hat[i]
        print(json.dumps({
            "frame": i, "detector": cfg.label, "symbols": out.symbols[i].tolist(),
            "x_hat": [[float(v.real), float(v.imag)] for v in x],
            "score": float(out.scores[i]) if math.isfinite(out.scores[i]) else None,
            "evaluations": int(out.evaluations[i]), "iterations": int(out.iterations[i]),
            "diverged": bool(out.diverged[i]),
        }))
    return 0


def cmd_noise_gen(args) -> int:
    spec = _noise_from(args, args.ntx)
    batch = sample_noise(spec, args.count, args.dim, args.seed)
    write_noise_file(args.out, batch.samples)
    print(json.dumps({"out": str(args.out), "count": args.count, "dim": args.dim, "noise": spec.describe()}))
    return 0


def cmd_plot(args) -> int:
    from .plot import emit_plot

    out = emit_plot(args.csv, args.out, args.axis, args.title)
    print(out)
    return 0


# --- parser ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    top = argparse.ArgumentParser(prog="nfdetect", description="Flow-based MIMO detection under non-Gaussian noise.")
    top.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = top.add_subparsers(dest="command", metavar="COMMAND")

    p = sub.add_parser("train", help="train a flow on simulated noise and write a checkpoint")
    _add_noise_flags(p)
    p.add_argument("--ntx", type=int, default=4)
    p.add_argument("--nrx", type=int, default=4, help="receive antennas = flow dimension")
    p.add_argument("--k-steps", type=int, default=4)
    p.add_argument("--hidden", type=int, default=8)
    p.add_argument("--batch", type=int, default=1024)
    p.add_argument("--epochs", type=int, default=60)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--samples", type=int, default=B.DESK_TRAIN_SAMPLES)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("bench", help="run a BER sweep (preset or custom) into a CSV")
    p.add_argument("--preset", choices=sorted(B.PRESETS))
    _add_noise_flags(p)
    p.add_argument("--axis", choices=("snr", "alpha"))
    p.add_argument("--values", help="comma-separated axis values")
    p.add_argument("--detectors", help="comma-separated labels, e.g. manfe,e_mle,ggamp(30)_manfe(1)")
    p.add_argument("--ntx", type=int, default=4)
    p.add_argument("--nrx", type=int, default=4)
    p.add_argument("--frames", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--csv")
    p.add_argument("--checkpoints", help="checkpoint registry directory")
    p.add_argument("--train-missing", dest="train_missing", action="store_true", default=None)
    p.add_argument("--no-train-missing", dest="train_missing", action="store_false")
    p.add_argument("--train-samples", type=int)
    p.add_argument("--train-epochs", type=int)
    p.add_argument("--workers", type=int)
    p.add_argument("--no-timing", action="store_true", help="write wall_time_s as 0 for byte-stable CSVs")
    p.add_argument("--plot", help="also write an SVG plot here")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("detect", help="detect every frame of a frame file, one JSON line each")
    p.add_argument("--frames", required=True, help="binary frame file")
    p.add_argument("--detector", default="e_mle", help="kind (e_mle, manfe, ggamp, ...) or label like ggamp(30)_manfe(1)")
    p.add_argument("--checkpoint")
    p.add_argument("--T", type=int, default=30)
    p.add_argument("--E", type=int, default=1)
    p.add_argument("--noise-var", type=float, help="complex noise variance handed to GAMP")
    _add_noise_flags(p, family_default="gaussian")
    p.set_defaults(func=cmd_detect)

    p = sub.add_parser("noise-gen", help="write seeded noise samples to a binary noise file")
    _add_noise_flags(p)
    p.add_argument("--ntx", type=int, default=4, help="used with --snr to set sigma")
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--dim", type=int, default=4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_noise_gen)

    p = sub.add_parser("plot", help="render a sweep CSV as an SVG")
    p.add_argument("--csv", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--axis", choices=("snr", "alpha"))
    p.add_argument("--title")
    p.set_defaults(func=cmd_plot)

    for sp in sub.choices.values():
        sp.add_argument("--config", help="key = value file of option defaults")
    return top


def _config_path(argv: list[str]) -> str | None:
    for i, tok in enumerate(argv):
        if tok == "--config" and i + 1 < len(argv):
            return argv[i + 1]
        if tok.startswith("--config="):
            return tok.split("=", 1)[1]
    return None


def _apply_config(parser: argparse.ArgumentParser, argv: list[str]) -> argparse.Namespace:
    path = _config_path(argv)
    subs = parser._subparsers._group_actions[0].choices
    command = next((t for t in argv if t in subs), None)
    if path and command:
        sub = subs[command]
        known = {a.dest: a for a in sub._actions}
        defaults = {}
        for k, v in read_config_file(path).items():
            if k not in known or k in ("config", "help"):
                raise ConfigFileError(f"{path}: unknown option {k!r} for {command}")
            act = known[k]
            if act.nargs == 0:  # store_true / store_false flags
                defaults[k] = v.lower() in ("1", "true", "yes", "on")
            else:
                defaults[k] = act.type(v) if act.type else v
            act.required = False
        sub.set_defaults(**defaults)
    return parser.parse_args(argv)


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    if not argv:
        parser.print_usage(sys.stderr)
        return 2
    try:
        args = _apply_config(parser, argv)
    except SystemExit as exc:  # argparse usage errors
        return int(exc.code or 0)
    except (OSError, ConfigFileError) as exc:
        print(f"nfdetect: error: {exc}", file=sys.stderr)
        return 2
    if args.command is None:
        parser.print_usage(sys.stderr)
        return 2
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        return args.func(args)
    except Exception as exc:
        print(f"nfdetect: error: {exc}", file=sys.stderr)
        return 1
