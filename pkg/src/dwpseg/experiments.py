"""Four-method benchmark, table emission, kernel-grid images, config and CLI.

Workspace layout used by ``table`` and ``run``::

    data/                 MVOL1 volumes + index.json
    source/final.ckpt     source-trained U-Net
    source/snapshots/     epoch_XXXX.ckpt kernel snapshots
    kernels.kds           harvested kernel dataset
    priors/               prior_XX.ckpt (+ .json sidecars)
    metrics.csv           one MetricsRecord per line
    table.txt, table.json formatted and full-precision IoU table
    manifest.json         resolved config, version, seeds, stage timings
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import json
import logging
import math
import os
import subprocess
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Iterable, Optional, Sequence

import numpy as np

from . import __version__
from .checkpoint import CheckpointError, save_paramset
from .data import (SplitSpec, Volume, VolumeFormatError, load_dataset, make_splits, substream,
                   write_dataset)
from .dwp import VAEConfig, load_priors, sample_kernels, save_priors, train_vae
from .harvest import (SHARED, KernelSlice, SnapshotSchedule, export_kernel_dataset,
                      load_snapshots, read_kernel_dataset, train_source)
from .numerics import NonFiniteError, set_single_threaded, torch_generator
from .segnet import UNetConfig, build_unet, evaluate, he_random, predict_proba, train_plain
from .vi import LIKELIHOOD_SCALES, VITrainConfig, predict, train_dwp

log = logging.getLogger(__name__)

METHODS = ("dwp", "pr", "prf", "ri")
METHOD_TITLES = {"dwp": "UNet-DWP", "pr": "UNet-PR", "prf": "UNet-PRf", "ri": "UNet-RI"}
CSV_HEADER = ["method", "train_size", "seed", "dice", "iou", "wall_seconds"]

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_USAGE = 2
EXIT_CONFIG = 3
EXIT_MISSING = 4
EXIT_FORMAT = 5
EXIT_NUMERIC = 6


class ConfigError(ValueError):
    pass


class MissingArtifactError(FileNotFoundError):
    def __init__(self, path, what: str = "artifact"):
        super().__init__(f"missing {what}: {path}")
        self.path = Path(path)


# --------------------------------------------------------------------------
# configuration


@dataclass
class DataConfig:
    n_source: int = 40
    n_target: int = 70
    dims: tuple[int, int, int] = (32, 32, 32)

    def __post_init__(self):
        self.dims = tuple(int(d) for d in self.dims)
        if len(self.dims) != 3 or self.n_source < 1 or self.n_target < 2:
            raise ValueError("data needs three dims, n_source >= 1 and n_target >= 2")


@dataclass
class SourceConfig:
    epochs: int = 60
    lr: float = 1e-3
    burn_in: int = 20
    every: int = 10


@dataclass
class HarvestConfig:
    mode: str = SHARED

    def __post_init__(self):
        if self.mode not in (SHARED, "per_layer"):
            raise ValueError(f"harvest mode must be 'shared' or 'per_layer', got {self.mode!r}")


@dataclass
class TargetConfig:
    """Training budget shared by all four methods."""
    epochs: int = 150
    max_steps: Optional[int] = 600
    lr: float = 1e-3
    lambda_dice: float = 1.0

    def __post_init__(self):
        if self.epochs < 0 or (self.max_steps is not None and self.max_steps < 0):
            raise ValueError("epochs and max_steps must be non-negative")

    def epochs_for(self, n_train: int) -> int:
        if self.max_steps is None:
            return self.epochs
        return min(self.epochs, math.ceil(self.max_steps / n_train))


@dataclass
class VIConfig:
    lr_psi: float = 1e-3
    mc_samples: int = 1
    likelihood_scale: str = "voxel_sum"
    predict_mode: str = "mean"
    predict_samples: int = 8

    def __post_init__(self):
        if self.likelihood_scale not in LIKELIHOOD_SCALES:
            raise ValueError(f"likelihood_scale must be one of {LIKELIHOOD_SCALES}")
        if self.predict_mode not in ("mean", "mc_average"):
            raise ValueError("predict_mode must be 'mean' or 'mc_average'")


@dataclass
class TableConfig:
    train_sizes: tuple[int, ...] = (5, 10, 15, 20)
    seeds: tuple[int, ...] = (1, 2, 3)
    test_size: int = 50
    methods: tuple[str, ...] = METHODS

    def __post_init__(self):
        self.train_sizes = tuple(int(s) for s in self.train_sizes)
        self.seeds = tuple(int(s) for s in self.seeds)
        self.methods = tuple(self.methods)
        bad = set(self.methods) - set(METHODS)
        if bad:
            raise ValueError(f"unknown methods {sorted(bad)}")


@dataclass
class MasterConfig:
    seed: int = 1
    data: DataConfig = field(default_factory=DataConfig)
    unet: UNetConfig = field(default_factory=UNetConfig)
    source: SourceConfig = field(default_factory=SourceConfig)
    harvest: HarvestConfig = field(default_factory=HarvestConfig)
    vae: VAEConfig = field(default_factory=VAEConfig)
    target: TargetConfig = field(default_factory=TargetConfig)
    vi: VIConfig = field(default_factory=VIConfig)
    table: TableConfig = field(default_factory=TableConfig)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def _build(cls, raw: Any, where: str):
    if not isinstance(raw, dict):
        raise ConfigError(f"{where or 'config'}: expected an object, got {type(raw).__name__}")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(raw) - set(fields))
    if unknown:
        raise ConfigError(f"{where or 'config'}: unknown keys {unknown}")
    defaults = cls()
    kwargs = {}
    for name, value in raw.items():
        key = f"{where}.{name}" if where else name
        if cls is MasterConfig and name in _SECTIONS:
            kwargs[name] = _build(_SECTIONS[name], value, key)
        elif value is None and "Optional" in str(fields[name].type):
            kwargs[name] = None
        else:
            kwargs[name] = _check_type(value, getattr(defaults, name), key)
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where or 'config'}: {exc}") from None


def _check_type(value, default, key: str):
    if isinstance(default, bool):
        ok = isinstance(value, bool)
    elif isinstance(default, int):
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif isinstance(default, float):
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
    elif isinstance(default, str):
        ok = isinstance(value, str)
    elif isinstance(default, tuple):
        ok = isinstance(value, list)
    else:
        ok = isinstance(value, int) and not isinstance(value, bool)
    if not ok:
        raise ConfigError(f"{key}: bad value {value!r}")
    return float(value) if isinstance(default, float) else value


_SECTIONS = {"data": DataConfig, "unet": UNetConfig, "source": SourceConfig,
             "harvest": HarvestConfig, "vae": VAEConfig, "target": TargetConfig,
             "vi": VIConfig, "table": TableConfig}


def config_from_dict(raw: dict) -> MasterConfig:
    return _build(MasterConfig, raw, "")


def load_config(path: str | os.PathLike | None) -> MasterConfig:
    """Read a JSON master config; missing keys take defaults, unknown keys are errors."""
    if path is None:
        return MasterConfig()
    try:
        text = Path(path).read_text()
    except FileNotFoundError:
        raise MissingArtifactError(path, "config file") from None
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: malformed JSON ({exc})") from None
    return config_from_dict(raw)


def code_fingerprint() -> str:
    """sha256 over the package sources; identifies the code that produced an artifact."""
    h = hashlib.sha256()
    for path in sorted(Path(__file__).resolve().parent.glob("*.py")):
        h.update(path.name.encode())
        h.update(path.read_bytes())
    return h.hexdigest()[:16]


def version_string() -> str:
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty", "--tags"],
                             cwd=Path(__file__).resolve().parent, capture_output=True,
                             text=True, timeout=10)
        if out.returncode == 0 and out.stdout.strip():
            return f"{__version__}+g{out.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


def write_manifest(path: str | os.PathLike, command: str, cfg: MasterConfig, **extra) -> None:
    manifest = {"command": command, "version": version_string(),
                "code_fingerprint": code_fingerprint(), "config": cfg.to_dict(),
                "seeds": {"master": cfg.seed, "splits": list(cfg.table.seeds)}}
    manifest.update(extra)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(manifest, indent=1, default=str) + "\n")


# --------------------------------------------------------------------------
# pipeline stages


@dataclass(frozen=True)
class Workspace:
    root: Path

    def __post_init__(self):
        object.__setattr__(self, "root", Path(self.root))

    data = property(lambda self: self.root / "data")
    source_ckpt = property(lambda self: self.root / "source" / "final.ckpt")
    snapshots = property(lambda self: self.root / "source" / "snapshots")
    kernels = property(lambda self: self.root / "kernels.kds")
    priors = property(lambda self: self.root / "priors")
    metrics = property(lambda self: self.root / "metrics.csv")


def require(path: Path, what: str = "artifact") -> Path:
    if not Path(path).exists():
        raise MissingArtifactError(path, what)
    return Path(path)


def stage_gen_data(out: Path, cfg: MasterConfig, seed: Optional[int] = None) -> dict:
    seed = cfg.seed if seed is None else seed
    return write_dataset(out, seed, cfg.data.n_source, cfg.data.n_target, cfg.data.dims)


def stage_train_source(data_dir: Path, ckpt: Path, snapshot_dir: Path, cfg: MasterConfig):
    source = load_dataset(require(Path(data_dir) / "index.json", "dataset index").parent,
                          "source")
    sched = SnapshotSchedule(cfg.source.epochs, cfg.source.burn_in, cfg.source.every)
    final, snaps = train_source(source, cfg.unet, sched, substream(cfg.seed, "source"),
                                lr=cfg.source.lr, snapshot_dir=snapshot_dir)
    if Path(ckpt).resolve() != (Path(snapshot_dir) / "final.ckpt").resolve():
        save_paramset(ckpt, final)
    return final, snaps


def stage_harvest(snapshot_dir: Path, mode: str, out: Path):
    snaps = load_snapshots(require(snapshot_dir, "snapshot directory"))
    if not snaps:
        raise MissingArtifactError(Path(snapshot_dir) / "epoch_*.ckpt", "kernel snapshots")
    return export_kernel_dataset(snaps, mode, out)


def stage_train_prior(kernels: Path, out: Path, cfg: MasterConfig):
    ds = read_kernel_dataset(require(kernels, "kernel dataset"))
    priors = {key: train_vae(ds.groups[key], cfg.vae, substream(cfg.seed, f"vae/{key}"), key)
              for key in sorted(ds.groups)}
    save_priors(priors, out)
    return priors


def prepare_workspace(ws: Workspace, cfg: MasterConfig) -> dict[str, float]:
    """Run every missing pipeline stage; returns per-stage wall seconds."""
    timings = {}

    def timed(name, fn):
        t0 = time.perf_counter()
        fn()
        timings[name] = time.perf_counter() - t0

    if not (ws.data / "index.json").exists():
        timed("gen_data", lambda: stage_gen_data(ws.data, cfg))
    if not ws.source_ckpt.exists():
        timed("train_source",
              lambda: stage_train_source(ws.data, ws.source_ckpt, ws.snapshots, cfg))
    if not ws.kernels.exists():
        timed("harvest", lambda: stage_harvest(ws.snapshots, cfg.harvest.mode, ws.kernels))
    if not any(ws.priors.glob("prior_*.ckpt")):
        timed("train_prior", lambda: stage_train_prior(ws.kernels, ws.priors, cfg))
    return timings


# --------------------------------------------------------------------------
# methods


def prf_freeze_set(cfg: UNetConfig) -> frozenset[str]:
    """Everything except the first encoder block, the last decoder block and the output conv."""
    keep = {"enc0", "dec0", "out"}
    return frozenset(n for n in cfg.param_shapes() if cfg.block_of(n) not in keep)


@dataclass(frozen=True)
class MethodSpec:
    name: str
    checkpoint: Optional[Path] = None
    freeze: frozenset = frozenset()
    priors: Optional[Path] = None

    def __post_init__(self):
        if self.name not in METHODS:
            raise ValueError(f"unknown method {self.name!r}; expected one of {METHODS}")
        if self.name == "prf" and (not self.freeze or self.checkpoint is None):
            raise ValueError("prf needs a checkpoint and a nonempty freeze set")
        if self.name == "pr" and self.checkpoint is None:
            raise ValueError("pr needs a checkpoint")
        if self.name == "dwp" and self.priors is None:
            raise ValueError("dwp needs a prior")
        if self.name == "ri" and self.checkpoint is not None:
            raise ValueError("ri starts from random weights, not a checkpoint")
        if self.name != "prf" and self.freeze:
            raise ValueError(f"{self.name} does not freeze layers")


def method_spec(name: str, ws: Workspace, cfg: MasterConfig) -> MethodSpec:
    if name == "ri":
        return MethodSpec("ri")
    if name == "pr":
        return MethodSpec("pr", checkpoint=ws.source_ckpt)
    if name == "prf":
        return MethodSpec("prf", checkpoint=ws.source_ckpt, freeze=prf_freeze_set(cfg.unet))
    if name == "dwp":
        return MethodSpec("dwp", priors=ws.priors)
    raise ValueError(f"unknown method {name!r}; expected one of {METHODS}")


@dataclass
class MetricsRecord:
    method: str
    train_size: int
    seed: int
    dice: float
    iou: float
    wall_seconds: float

    def __post_init__(self):
        for k in ("dice", "iou"):
            v = getattr(self, k)
            if not (0.0 <= v <= 1.0):
                raise ValueError(f"{k}={v} outside [0, 1]")

    def row(self) -> list[str]:
        return [self.method, str(self.train_size), str(self.seed), repr(self.dice),
                repr(self.iou), f"{self.wall_seconds:.3f}"]


def cell_rng(master_seed: int, train_size: int, seed: int) -> np.random.Generator:
    """Per-cell stream; shared by the four methods so RI and DWP start from the same draw."""
    return np.random.default_rng(np.random.SeedSequence([int(master_seed), int(seed),
                                                         int(train_size)]))


@dataclass
class Fitted:
    """A trained model: plain weights for pr/prf/ri, a posterior for dwp."""
    predict: Callable[[Volume], np.ndarray]
    params: Optional[dict] = None
    run: Any = None


def _check_artifacts(m: MethodSpec) -> None:
    for path, what in ((m.checkpoint, "source checkpoint"), (m.priors, "prior directory")):
        if path is not None:
            require(path, what)
    if m.priors is not None and not any(Path(m.priors).glob("prior_*.ckpt")):
        raise MissingArtifactError(Path(m.priors) / "prior_*.ckpt", "prior checkpoints")


def fit_method(m: MethodSpec, train: Sequence[Volume], cfg: MasterConfig,
               rng: np.random.Generator) -> Fitted:
    _check_artifacts(m)
    net = cfg.unet
    epochs = cfg.target.epochs_for(len(train))
    if m.name == "dwp":
        vcfg = VITrainConfig(epochs=epochs, lr_theta=cfg.target.lr, lr_psi=cfg.vi.lr_psi,
                             mc_samples=cfg.vi.mc_samples,
                             likelihood_scale=cfg.vi.likelihood_scale, prior_mode="dwp",
                             lambda_dice=cfg.target.lambda_dice)
        run = train_dwp(train, net, load_priors(m.priors), vcfg, rng=rng)
        gen = torch_generator(rng)
        return Fitted(lambda v: predict(run.posterior, v, net, cfg.vi.predict_mode,
                                        cfg.vi.predict_samples, gen), run=run)
    if m.checkpoint is None:
        p0 = he_random(net, rng)
    else:
        p0 = build_unet(net, "from_checkpoint", checkpoint=m.checkpoint)
    params, _ = train_plain(train, p0, net, freeze=m.freeze, epochs=epochs, lr=cfg.target.lr,
                            rng=rng, lambda_dice=cfg.target.lambda_dice)
    return Fitted(lambda v: predict_proba(params, v, net), params=params)


def run_method(m: MethodSpec, split: SplitSpec, volumes: dict[str, Volume], cfg: MasterConfig,
               rng: np.random.Generator) -> MetricsRecord:
    """Train one method on ``split.train_ids`` and score it on ``split.test_ids``."""
    _check_artifacts(m)
    train = [volumes[i] for i in split.train_ids]
    test = [volumes[i] for i in split.test_ids]
    t0 = time.perf_counter()
    fitted = fit_method(m, train, cfg, rng)
    dice, iou = evaluate(fitted.predict, test)
    return MetricsRecord(m.name, len(train), split.seed, dice, iou, time.perf_counter() - t0)


# --------------------------------------------------------------------------
# CSV and table


class CsvWriter:
    """Single writer for metrics rows; writes the header once."""

    def __init__(self, path: str | os.PathLike):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        if not self.path.exists() or self.path.stat().st_size == 0:
            with open(self.path, "w", newline="") as fh:
                csv.writer(fh).writerow(CSV_HEADER)

    def append(self, rec: MetricsRecord) -> None:
        with open(self.path, "a", newline="") as fh:
            csv.writer(fh).writerow(rec.row())


def read_metrics(path: str | os.PathLike) -> list[MetricsRecord]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != CSV_HEADER:
            raise ValueError(f"{path}: unexpected header {reader.fieldnames}")
        return [MetricsRecord(r["method"], int(r["train_size"]), int(r["seed"]),
                              float(r["dice"]), float(r["iou"]), float(r["wall_seconds"]))
                for r in reader]


def summarize(records: Iterable[MetricsRecord], sizes: Sequence[int],
              methods: Sequence[str]) -> dict:
    """Mean and sample std (ddof=1) of IoU per (size, method) cell."""
    cells = {}
    recs = list(records)
    for s in sizes:
        for m in methods:
            vals = [r.iou for r in recs if r.train_size == s and r.method == m]
            if vals:
                std = float(np.std(vals, ddof=1)) if len(vals) > 1 else 0.0
                cells[f"{m}/{s}"] = {"mean": float(np.mean(vals)), "std": std, "n": len(vals)}
    return cells


def format_table(cells: dict, sizes: Sequence[int], methods: Sequence[str],
                 expected_n: Optional[int] = None, digits: int = 2) -> str:
    """Table 1 layout: one row per train size, one "m (s)" column per method."""
    header = ["Train size"] + [METHOD_TITLES[m] for m in methods]
    rows = [header]
    for s in sizes:
        row = [str(s)]
        for m in methods:
            c = cells.get(f"{m}/{s}")
            if c is None:
                row.append("--")
                continue
            text = f"{c['mean']:.{digits}f} ({c['std']:.{digits}f})"
            if expected_n is not None and c["n"] < expected_n:
                text += f" [{c['n']}/{expected_n}]"
            row.append(text)
        rows.append(row)
    widths = [max(len(r[i]) for r in rows) for i in range(len(header))]
    return "\n".join("  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip()
                     for r in rows) + "\n"


def run_table(cfg: MasterConfig, out_dir: str | os.PathLike,
              on_record: Optional[Callable[[MetricsRecord], None]] = None) -> dict:
    """Every (train size, method, seed) cell; resumes from rows already in metrics.csv."""
    set_single_threaded()
    ws = Workspace(out_dir)
    t0 = time.perf_counter()
    timings = prepare_workspace(ws, cfg)
    target = {v.id: v for v in load_dataset(ws.data, "target")}
    ids = sorted(target)
    done = set()
    earlier = 0.0
    if ws.metrics.exists() and ws.metrics.stat().st_size:
        done = {(r.method, r.train_size, r.seed) for r in read_metrics(ws.metrics)}
        old = ws.root / "manifest.json"
        if done and old.exists():
            earlier = json.loads(old.read_text()).get("cumulative_seconds", 0.0)
    writer = CsvWriter(ws.metrics)
    failures = []
    for size in cfg.table.train_sizes:
        for seed in cfg.table.seeds:
            split = make_splits(ids, size, cfg.table.test_size, seed)
            for name in cfg.table.methods:
                if (name, size, seed) in done:
                    continue
                try:
                    rec = run_method(method_spec(name, ws, cfg), split, target, cfg,
                                     cell_rng(cfg.seed, size, seed))
                except (NonFiniteError, ValueError, RuntimeError) as exc:
                    log.error("cell %s/%d/%d failed: %s", name, size, seed, exc)
                    failures.append({"method": name, "train_size": size, "seed": seed,
                                     "error": f"{type(exc).__name__}: {exc}"})
                    continue
                writer.append(rec)
                log.info("%s size=%d seed=%d dice=%.4f iou=%.4f (%.0fs)", name, size, seed,
                         rec.dice, rec.iou, rec.wall_seconds)
                if on_record is not None:
                    on_record(rec)
    records = read_metrics(ws.metrics)
    cells = summarize(records, cfg.table.train_sizes, cfg.table.methods)
    text = format_table(cells, cfg.table.train_sizes, cfg.table.methods,
                        expected_n=len(cfg.table.seeds))
    (ws.root / "table.txt").write_text(text)
    (ws.root / "table.json").write_text(json.dumps(
        {"metric": "iou", "std": "sample (ddof=1)", "cells": cells}, indent=1) + "\n")
    total = time.perf_counter() - t0
    write_manifest(ws.root / "manifest.json", "table", cfg, stage_seconds=timings,
                   table_seconds=total, cumulative_seconds=earlier + total,
                   resumed_cells=len(done), failures=failures)
    return {"cells": cells, "text": text, "failures": failures, "seconds": earlier + total}


# --------------------------------------------------------------------------
# kernel grid


def _kernel_array(k) -> np.ndarray:
    values = k.values if isinstance(k, KernelSlice) else k
    a = np.asarray(values, dtype=np.float64)
    if a.shape != (3, 3, 3):
        raise ValueError(f"kernel must be 3x3x3, got {a.shape}")
    return a


def kernel_grid(kernels: Sequence, columns: Optional[int] = None) -> np.ndarray:
    """uint8 image: each kernel as three 3x3 depth tiles, 1-px separators everywhere inside."""
    ks = [_kernel_array(k) for k in kernels]
    if not ks:
        raise ValueError("need at least one kernel")
    columns = columns or math.ceil(math.sqrt(len(ks)))
    rows = math.ceil(len(ks) / columns)
    cell_w, cell_h = 3 * 3 + 2, 3
    img = np.zeros((rows * (cell_h + 1) - 1, columns * (cell_w + 1) - 1), dtype=np.uint8)
    for idx, k in enumerate(ks):
        lo, hi = k.min(), k.max()
        if hi > lo:
            tile = np.rint((k - lo) / (hi - lo) * 255).astype(np.uint8)
        else:
            tile = np.full(k.shape, 128, dtype=np.uint8)
        r, c = divmod(idx, columns)
        y, x = r * (cell_h + 1), c * (cell_w + 1)
        for d in range(3):
            img[y:y + 3, x + 4 * d:x + 4 * d + 3] = tile[d]
    return img


def write_pgm(path: str | os.PathLike, img: np.ndarray) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    h, w = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode())
        fh.write(np.ascontiguousarray(img, dtype=np.uint8).tobytes())


def render_kernel_grid(kernels: Sequence, path: str | os.PathLike,
                       columns: Optional[int] = None) -> np.ndarray:
    img = kernel_grid(kernels, columns)
    write_pgm(path, img)
    return img


# --------------------------------------------------------------------------
# CLI


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="dwpseg", description="Deep-weight-prior transfer benchmark on synthetic volumes.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="write the synthetic two-domain dataset")
    g.add_argument("--out", required=True, type=Path)
    g.add_argument("--seed", required=True, type=int)
    g.add_argument("--volumes", type=int, help="target volumes (default from config)")
    g.add_argument("--source-volumes", type=int)
    g.add_argument("--config", type=Path)

    g = sub.add_parser("train-source", help="train the source U-Net with kernel snapshots")
    g.add_argument("--data", required=True, type=Path)
    g.add_argument("--out", required=True, type=Path, help="final checkpoint path")
    g.add_argument("--snapshots", type=Path, help="default: <out dir>/snapshots")
    g.add_argument("--config", type=Path)

    g = sub.add_parser("harvest", help="collect kernel slices from snapshots")
    g.add_argument("--snapshots", required=True, type=Path)
    g.add_argument("--mode", choices=(SHARED, "per_layer"), default=SHARED)
    g.add_argument("--out", required=True, type=Path)

    g = sub.add_parser("train-prior", help="fit the kernel VAE(s)")
    g.add_argument("--kernels", required=True, type=Path)
    g.add_argument("--out", required=True, type=Path, help="prior directory")
    g.add_argument("--config", type=Path)

    g = sub.add_parser("run", help="one benchmark cell, appended to a CSV")
    g.add_argument("--method", required=True, choices=METHODS)
    g.add_argument("--train-size", required=True, type=int, choices=(5, 10, 15, 20))
    g.add_argument("--seed", required=True, type=int)
    g.add_argument("--out", required=True, type=Path)
    g.add_argument("--workdir", type=Path, default=Path("."),
                   help="workspace holding data/, source/ and priors/")
    g.add_argument("--data", type=Path)
    g.add_argument("--checkpoint", type=Path)
    g.add_argument("--prior", type=Path)
    g.add_argument("--config", type=Path)

    g = sub.add_parser("table", help="full benchmark table (runs missing stages)")
    g.add_argument("--config", type=Path)
    g.add_argument("--out", required=True, type=Path)

    g = sub.add_parser("sample-prior", help="render prior samples as a PGM grid")
    g.add_argument("--prior", required=True, type=Path)
    g.add_argument("--n", type=int, default=64)
    g.add_argument("--out", required=True, type=Path)
    g.add_argument("--group", help="prior group key (default: first)")
    g.add_argument("--seed", type=int, default=0)
    return p


def _cmd(args) -> None:
    cfg = load_config(getattr(args, "config", None))
    set_single_threaded(cfg.seed)
    if args.command == "gen-data":
        if args.volumes is not None:
            cfg.data.n_target = args.volumes
        if args.source_volumes is not None:
            cfg.data.n_source = args.source_volumes
        cfg.seed = args.seed
        stage_gen_data(args.out, cfg, args.seed)
        write_manifest(args.out / "manifest.json", "gen-data", cfg)
    elif args.command == "train-source":
        snaps = args.snapshots or args.out.parent / "snapshots"
        stage_train_source(args.data, args.out, snaps, cfg)
        write_manifest(args.out.with_name(args.out.name + ".manifest.json"), "train-source",
                       cfg, snapshots=str(snaps))
    elif args.command == "harvest":
        ds = stage_harvest(args.snapshots, args.mode, args.out)
        write_manifest(args.out.with_name(args.out.name + ".manifest.json"), "harvest", cfg,
                       mode=args.mode, sizes=ds.sizes)
    elif args.command == "train-prior":
        priors = stage_train_prior(args.kernels, args.out, cfg)
        write_manifest(args.out / "manifest.json", "train-prior", cfg,
                       final_bound={k: p.trace[-1] if p.trace else None
                                    for k, p in priors.items()})
    elif args.command == "run":
        ws = Workspace(args.workdir)
        data = args.data or ws.data
        spec = method_spec(args.method, ws, cfg)
        spec = dataclasses.replace(spec, checkpoint=args.checkpoint or spec.checkpoint,
                                   priors=args.prior or spec.priors)
        require(data / "index.json", "dataset index")
        target = {v.id: v for v in load_dataset(data, "target")}
        split = make_splits(sorted(target), args.train_size, cfg.table.test_size, args.seed)
        rec = run_method(spec, split, target, cfg, cell_rng(cfg.seed, args.train_size, args.seed))
        CsvWriter(args.out).append(rec)
        write_manifest(args.out.with_name(args.out.name + ".manifest.json"), "run", cfg,
                       method=args.method, train_size=args.train_size, split_seed=args.seed,
                       split=json.loads(split.to_json()))
        print(",".join(rec.row()))
    elif args.command == "table":
        result = run_table(cfg, args.out)
        sys.stdout.write(result["text"])
    elif args.command == "sample-prior":
        priors = load_priors(require(args.prior, "prior directory"))
        if not priors:
            raise MissingArtifactError(args.prior / "prior_*.ckpt", "prior checkpoints")
        key = args.group or sorted(priors)[0]
        if key not in priors:
            raise ConfigError(f"unknown prior group {key!r}; have {sorted(priors)}")
        render_kernel_grid(sample_kernels(priors[key], args.n, args.seed), args.out)


def cli_main(argv: Optional[Sequence[str]] = None) -> int:
    parser = _parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(message)s")
    try:
        _cmd(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (MissingArtifactError, FileNotFoundError) as exc:
        print(f"missing file: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except (VolumeFormatError, CheckpointError) as exc:
        print(f"format error: {exc}", file=sys.stderr)
        return EXIT_FORMAT
    except NonFiniteError as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ValueError, KeyError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    return EXIT_OK


def main() -> None:
    sys.exit(cli_main())
