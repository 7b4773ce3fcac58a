"""Seeded Monte Carlo BER sweeps with a resumable CSV log.

Every frame is a pure function of ``(seed, point index, frame index)``, so a
point gives the same bit-error count for any chunking or worker count.
BER denominator: ``frames * n_tx * 2`` (QPSK, two bits per symbol).
"""

from __future__ import annotations

import csv
import logging
import math
import os
import time
import zlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import rng
from .channel import BITS_PER_SYMBOL, FRAME_BLOCK, MimoScenario, bit_errors, gen_frames
from .detectors import DetectorConfig, run_detector
from .flow.checkpoint import load_checkpoint, save_checkpoint
from .flow.model import CompiledFlow, FlowConfig
from .flow.train import TrainOptions, train
from .noise import NoiseSpec, draw_noise

log = logging.getLogger(__name__)

CSV_COLUMNS = (
    "detector", "family", "alpha", "sigma", "snr_db", "n_tx", "n_rx",
    "frames", "bit_errors", "ber", "divergence_count", "seed", "wall_time_s",
)
MIN_FRAMES = 1000
CHUNK_FRAMES = 16 * FRAME_BLOCK
DESK_FRAMES = 100_000
DESK_TRAIN_SAMPLES = 120_000  # 10^5 for training plus a 2*10^4 held-out tail


class BenchConfigError(ValueError):
    pass


class MissingCheckpointError(BenchConfigError):
    pass


# --- plan ---------------------------------------------------------------------


@dataclass
class BenchPlan:
    name: str
    n_tx: int
    n_rx: int
    noise: NoiseSpec  # template; the alpha axis overrides its alpha
    axis: str  # "snr" or "alpha"
    values: tuple[float, ...]
    detectors: tuple[str, ...]
    fixed_snr: float | None = None  # SNR of every point of an alpha sweep
    frames: int = DESK_FRAMES
    seed: int = 0
    csv_path: str | None = None
    checkpoint_dir: str = "checkpoints"
    train_missing: bool = False
    train_samples: int = DESK_TRAIN_SAMPLES
    train_epochs: int = 60
    workers: int = 1
    timing: bool = True  # False writes wall_time_s = 0 so reruns are byte-identical

    def __post_init__(self):
        self.values = tuple(float(v) for v in self.values)
        self.detectors = tuple(self.detectors)
        if self.axis not in ("snr", "alpha"):
            raise BenchConfigError(f"axis must be 'snr' or 'alpha', got {self.axis!r}")
        if not self.values:
            raise BenchConfigError("sweep needs at least one axis value")
        if not self.detectors:
            raise BenchConfigError("plan needs at least one detector")
        if self.frames < MIN_FRAMES:
            raise BenchConfigError(f"frames must be >= {MIN_FRAMES}, got {self.frames}")
        if self.axis == "alpha":
            if self.noise.family != "sas":
                raise BenchConfigError("an alpha sweep needs the sas noise family")
            if self.fixed_snr is None:
                raise BenchConfigError("an alpha sweep needs fixed_snr")
        if self.workers < 1:
            raise BenchConfigError("workers must be >= 1")
        for label in self.detectors:
            DetectorConfig.from_label(label)

    def scenario(self, point: int) -> MimoScenario:
        v = self.values[point]
        if self.axis == "snr":
            return MimoScenario(self.n_tx, self.n_rx, v, self.noise, self.seed, point)
        return MimoScenario(self.n_tx, self.n_rx, self.fixed_snr, replace(self.noise, alpha=v), self.seed, point)

    def scenarios(self) -> list[MimoScenario]:
        return [self.scenario(i) for i in range(len(self.values))]


def _preset(name, n, noise, axis, values, detectors, fixed_snr=None) -> BenchPlan:
    return BenchPlan(
        name, n, n, noise, axis, values, detectors, fixed_snr,
        csv_path=f"{name}.csv", train_missing=True,
    )


_ALPHAS = tuple(round(1.0 + 0.1 * i, 1) for i in range(11))
_SNRS = (10.0, 15.0, 20.0, 25.0, 30.0)
_FULL = ("manfe", "e_mle", "ggamp(30)", "ggamp(30)_manfe(1)", "ggamp(30)_manfe(2)")
_NEIGHBOR = ("ggamp(30)", "ggamp(30)_emle(2)", "ggamp(30)_manfe(1)", "ggamp(30)_manfe(2)")
_ORACLE = ("manfe", "oracle_mle", "e_mle", "ggamp(30)", "ggamp(30)_manfe(1)")

PRESETS = {
    "fig3-desk": lambda: _preset("fig3-desk", 4, NoiseSpec("sas"), "alpha", _ALPHAS, _FULL, 25.0),
    "fig4-desk": lambda: _preset("fig4-desk", 4, NoiseSpec("sas", alpha=1.9), "snr", _SNRS, _FULL),
    "fig5-desk": lambda: _preset("fig5-desk", 4, NoiseSpec("sas", alpha=1.5), "snr", _SNRS, _FULL),
    "fig6-desk": lambda: _preset("fig6-desk", 4, NoiseSpec("sas", alpha=1.1), "snr", _SNRS, _FULL),
    "fig7-desk": lambda: _preset("fig7-desk", 8, NoiseSpec("sas"), "alpha", _ALPHAS, _NEIGHBOR, 25.0),
    "fig8-desk": lambda: _preset("fig8-desk", 8, NoiseSpec("sas", alpha=1.9), "snr", _SNRS, _NEIGHBOR),
    "fig9-desk": lambda: _preset("fig9-desk", 4, NoiseSpec("nakagami", m=2.0), "snr", (0.0, 5.0, 10.0, 15.0), _ORACLE),
    "fig10-desk": lambda: _preset("fig10-desk", 4, NoiseSpec("gaussian_mixture"), "snr", (0.0, 5.0, 10.0, 15.0), _ORACLE),
}


def preset(name: str, **overrides) -> BenchPlan:
    if name not in PRESETS:
        raise BenchConfigError(f"unknown preset {name!r}; available: {', '.join(PRESETS)}")
    plan = PRESETS[name]()
    return replace(plan, **overrides) if overrides else plan


# --- checkpoint registry --------------------------------------------------------


def checkpoint_key(scenario: MimoScenario) -> tuple:
    """``(family, alpha, sigma, snr, N, M)``; alpha is only meaningful for sas."""
    noise = scenario.noise
    alpha = noise.alpha if noise.family == "sas" else None
    return (noise.family, alpha, scenario.sigma, scenario.snr_db, scenario.n_tx, scenario.n_rx)


def key_filename(key: tuple) -> str:
    family, alpha, sigma, snr, n, m = key
    a = "na" if alpha is None else f"{alpha:g}"
    return f"{family}_a{a}_s{sigma:.6e}_snr{snr:g}_N{n}_M{m}.ckpt"


class CheckpointRegistry:
    """Trained flows on disk, one per noise configuration.

    With ``train_missing`` a missing flow is trained on demand from noise
    drawn with a seed derived from its key; otherwise lookups of unknown
    keys raise :class:`MissingCheckpointError`.
    """

    def __init__(self, root, train_missing: bool = False, train_samples: int = DESK_TRAIN_SAMPLES,
                 train_epochs: int = 60, seed: int = 0):
        self.root = Path(root)
        self.train_missing = train_missing
        self.train_samples = train_samples
        self.train_epochs = train_epochs
        self.seed = seed
        self._cache: dict[tuple, CompiledFlow] = {}

    def path(self, scenario: MimoScenario) -> Path:
        return self.root / key_filename(checkpoint_key(scenario))

    def missing(self, scenarios) -> list[tuple]:
        return [checkpoint_key(s) for s in scenarios if not self.path(s).exists()]

    def require(self, scenarios) -> None:
        if self.train_missing:
            return
        gone = self.missing(scenarios)
        if gone:
            names = ", ".join(f"(family={k[0]}, alpha={k[1]}, snr={k[3]})" for k in gone)
            raise MissingCheckpointError(f"no trained flow in {self.root} for {names}; train them or enable train_missing")

    def resolve(self, scenario: MimoScenario) -> CompiledFlow:
        key = checkpoint_key(scenario)
        if key in self._cache:
            return self._cache[key]
        path = self.path(scenario)
        if not path.exists():
            self.require([scenario])
            self.train_for(scenario)
        flow = CompiledFlow(load_checkpoint(path).params, saturate=True)
        self._cache[key] = flow
        return flow

    def train_for(self, scenario: MimoScenario) -> Path:
        key = checkpoint_key(scenario)
        data_seed = zlib.crc32(key_filename(key).encode())
        spec = scenario.point_noise
        gen = rng.stream(self.seed, rng.TRAIN_DATA, data_seed)
        samples = draw_noise(spec, (self.train_samples, scenario.n_rx), gen)
        log.info("training flow for %s", key_filename(key))
        res = train(FlowConfig(dim=scenario.n_rx), samples, TrainOptions(epochs=self.train_epochs, seed=self.seed))
        meta = {
            "noise": spec.describe(),
            "snr_db": scenario.snr_db,
            "n_tx": scenario.n_tx,
            "samples": self.train_samples,
            "epochs": self.train_epochs,
            "seed": self.seed,
            "final_nll": res.final_nll,
        }
        self.root.mkdir(parents=True, exist_ok=True)
        path = self.path(scenario)
        tmp = path.with_suffix(".tmp")
        save_checkpoint(res.params, tmp, meta)
        os.replace(tmp, path)
        return path


# --- records ----------------------------------------------------------------------


@dataclass
class BerRecord:
    detector: str
    family: str
    alpha: float
    sigma: float
    snr_db: float
    n_tx: int
    n_rx: int
    frames: int
    bit_errors: int  # -1 marks a point that failed
    ber: float
    divergence_count: int
    seed: int
    wall_time_s: float
    error: str = field(default="", compare=False)

    @property
    def failed(self) -> bool:
        return self.bit_errors < 0

    def key(self) -> tuple:
        return (self.detector, self.family, self.alpha, self.sigma, self.snr_db,
                self.n_tx, self.n_rx, self.frames, self.seed)

    def to_row(self) -> dict:
        row = asdict(self)
        row.pop("error")
        return {k: repr(v) if isinstance(v, float) else str(v) for k, v in row.items()}

    @classmethod
    def from_row(cls, row: dict) -> "BerRecord":
        kinds = {f.name: f.type for f in fields(cls)}
        out = {}
        for k in CSV_COLUMNS:
            kind = kinds[k]
            out[k] = row[k] if kind == "str" else int(row[k]) if kind == "int" else float(row[k])
        return cls(**out)


def write_csv(path, records) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=CSV_COLUMNS, lineterminator="\n")
        w.writeheader()
        for r in records:
            w.writerow(r.to_row())
    os.replace(tmp, path)


def read_csv(path) -> list[BerRecord]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != CSV_COLUMNS:
            raise BenchConfigError(f"{path}: unexpected CSV columns {reader.fieldnames}")
        return [BerRecord.from_row(row) for row in reader]


# --- running ------------------------------------------------------------------------


def _chunk_result(scenario: MimoScenario, cfg: DetectorConfig, start: int, count: int) -> tuple[int, int]:
    frames = gen_frames(scenario, count, start)
    out = run_detector(cfg, frames, scenario.point_noise.nominal_power)
    return bit_errors(out.symbols, frames.symbols), int(out.diverged.sum())


def _chunk_job(args):
    return _chunk_result(*args)


def detector_for(label: str, scenario: MimoScenario, registry: CheckpointRegistry | None) -> DetectorConfig:
    cfg = DetectorConfig.from_label(label)
    if cfg.needs_flow:
        if registry is None:
            raise MissingCheckpointError(f"{label} needs a checkpoint registry")
        cfg.flow = registry.resolve(scenario)
    if cfg.kind == "oracle_mle":
        cfg.noise_for_oracle = scenario.point_noise
    return cfg


def run_point(plan: BenchPlan, point: int, detector: str, registry: CheckpointRegistry | None = None) -> BerRecord:
    """BER of one detector at one sweep point; pure in ``(plan, point, seed)``."""
    sc = plan.scenario(point)
    cfg = detector_for(detector, sc, registry)
    t0 = time.perf_counter()
    jobs = [(sc, cfg, lo, min(CHUNK_FRAMES, plan.frames - lo)) for lo in range(0, plan.frames, CHUNK_FRAMES)]
    if plan.workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=plan.workers) as pool:
            parts = list(pool.map(_chunk_job, jobs))
    else:
        parts = [_chunk_result(*j) for j in jobs]
    errs = sum(p[0] for p in parts)
    div = sum(p[1] for p in parts)
    wall = time.perf_counter() - t0 if plan.timing else 0.0
    return BerRecord(
        detector, sc.noise.family, float(sc.noise.alpha), float(sc.sigma), float(sc.snr_db),
        sc.n_tx, sc.n_rx, plan.frames, errs, errs / (plan.frames * sc.n_tx * BITS_PER_SYMBOL),
        div, plan.seed, wall,
    )


def _failed_record(plan: BenchPlan, point: int, detector: str, exc: Exception) -> BerRecord:
    sc = plan.scenario(point)
    return BerRecord(
        detector, sc.noise.family, float(sc.noise.alpha), float(sc.sigma), float(sc.snr_db),
        sc.n_tx, sc.n_rx, plan.frames, -1, math.nan, -1, plan.seed, 0.0, error=f"{type(exc).__name__}: {exc}",
    )


def make_registry(plan: BenchPlan) -> CheckpointRegistry:
    return CheckpointRegistry(plan.checkpoint_dir, plan.train_missing, plan.train_samples, plan.train_epochs, plan.seed)


def run_sweep(plan: BenchPlan, registry: CheckpointRegistry | None = None, stop_after: int | None = None) -> list[BerRecord]:
    """Run every (point, detector) pair, rewriting the CSV after each one.

    Rows already in the CSV without an error marker are kept and skipped,
    so an interrupted sweep resumes where it stopped. ``stop_after`` ends
    the run after that many new rows (used to exercise resumption).
    """
    registry = registry or make_registry(plan)
    scenarios = plan.scenarios()
    if any(DetectorConfig.from_label(d).needs_flow for d in plan.detectors):
        registry.require(scenarios)
    done = {}
    if plan.csv_path and Path(plan.csv_path).exists():
        done = {r.key(): r for r in read_csv(plan.csv_path) if not r.failed}
    records, fresh = [], 0
    for point in range(len(scenarios)):
        for det in plan.detectors:
            probe = _failed_record(plan, point, det, RuntimeError())
            if probe.key() in done:
                records.append(done[probe.key()])
                continue
            if stop_after is not None and fresh >= stop_after:
                return records
            try:
                rec = run_point(plan, point, det, registry)
            except Exception as exc:  # recorded, the sweep goes on
                log.error("point %d %s failed: %s", point, det, exc)
                rec = _failed_record(plan, point, det, exc)
            records.append(rec)
            fresh += 1
            if plan.csv_path:
                write_csv(plan.csv_path, records + [r for k, r in done.items() if k not in {x.key() for x in records}])
    if plan.csv_path:
        write_csv(plan.csv_path, records)
    return records
