"""Source-domain training with kernel snapshots, and the KDS1 kernel dataset."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .checkpoint import load_paramset, save_paramset
from .data import Volume
from .numerics import KERNEL, ParamSet
from .segnet import UNetConfig, he_random, train_plain

MAGIC = b"KDS1\n"
SHARED = "shared"
GROUPING_MODES = ("shared", "per_layer")
SLICE = KERNEL ** 3


@dataclass
class KernelSlice:
    values: np.ndarray  # (3,3,3)
    layer_name: str
    in_index: int
    out_index: int
    snapshot_epoch: int

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float32).reshape(KERNEL, KERNEL, KERNEL)
        if not np.isfinite(self.values).all():
            raise ValueError(f"non-finite kernel slice from {self.layer_name}")


@dataclass
class SnapshotSchedule:
    epochs: int
    burn_in: int
    every: int

    def __post_init__(self):
        if self.every < 1:
            raise ValueError("every must be >= 1")
        if not 0 <= self.burn_in < self.epochs:
            raise ValueError(f"burn_in ({self.burn_in}) must be in [0, epochs={self.epochs})")

    def epochs_to_snapshot(self) -> list[int]:
        first = (self.burn_in // self.every + 1) * self.every
        marks = list(range(first, self.epochs + 1, self.every))
        if not marks or marks[-1] != self.epochs:
            marks.append(self.epochs)
        return marks


@dataclass
class KernelDataset:
    """Harvested slices grouped by key; each group is an (n, 3, 3, 3) float32 array.

    Per-slice provenance (layer, channel indices, epoch) is kept in memory
    when available but is not part of the KDS1 file.
    """
    groups: dict[str, np.ndarray]
    grouping_mode: str = SHARED
    provenance: dict[str, list[tuple[str, int, int, int]]] = field(default_factory=dict)

    def __post_init__(self):
        if self.grouping_mode not in GROUPING_MODES:
            raise ValueError(f"unknown grouping mode {self.grouping_mode!r}")
        for key, arr in self.groups.items():
            if arr.ndim != 4 or arr.shape[1:] != (KERNEL,) * 3:
                raise ValueError(f"group {key!r} must hold (n,3,3,3) slices, got {arr.shape}")

    @property
    def sizes(self) -> dict[str, int]:
        return {k: len(v) for k, v in self.groups.items()}

    def flat(self, key: str) -> np.ndarray:
        return self.groups[key].reshape(-1, SLICE)

    def slices(self, key: str) -> list[KernelSlice]:
        prov = self.provenance.get(key)
        out = []
        for i, values in enumerate(self.groups[key]):
            layer, p, k, e = prov[i] if prov else (key, -1, -1, -1)
            out.append(KernelSlice(values, layer, p, k, e))
        return out

    def __eq__(self, other):
        if not isinstance(other, KernelDataset):
            return NotImplemented
        return (self.grouping_mode == other.grouping_mode
                and list(self.groups) == list(other.groups)
                and all(np.array_equal(self.groups[k], other.groups[k]) for k in self.groups))


def conv_layers(params: ParamSet) -> list[str]:
    """Names of 3x3x3 conv weight tensors, in ParamSet order."""
    return [n for n, t in params.items()
            if t.dim() == 5 and tuple(t.shape[2:]) == (KERNEL,) * 3]


def snapshot_kernels(params: ParamSet, epoch: int) -> list[KernelSlice]:
    out = []
    for name in conv_layers(params):
        w = params[name].detach().cpu().numpy()
        for k in range(w.shape[0]):
            for p in range(w.shape[1]):
                out.append(KernelSlice(w[k, p], name, p, k, epoch))
    return out


def train_source(source: Sequence[Volume], cfg: UNetConfig, schedule: SnapshotSchedule,
                 rng: np.random.Generator, lr: float = 1e-3,
                 snapshot_dir: str | os.PathLike | None = None,
                 ) -> tuple[ParamSet, list[tuple[int, ParamSet]]]:
    """Train on the source pool, keeping conv-kernel snapshots per the schedule.

    When ``snapshot_dir`` is given each snapshot is also written there as
    ``epoch_XXXX.ckpt`` and the final weights as ``final.ckpt``.
    """
    if not source:
        raise ValueError("empty source set")
    marks = set(schedule.epochs_to_snapshot())
    snapshots: list[tuple[int, ParamSet]] = []

    def keep(epoch: int, params: ParamSet) -> None:
        if epoch in marks:
            snap = {n: params[n].detach().clone() for n in conv_layers(params)}
            snapshots.append((epoch, snap))
            if snapshot_dir is not None:
                save_paramset(Path(snapshot_dir) / f"epoch_{epoch:04d}.ckpt", snap)

    p0 = he_random(cfg, rng)
    final, _ = train_plain(source, p0, cfg, epochs=schedule.epochs, lr=lr, rng=rng,
                           on_epoch_end=keep)
    if snapshot_dir is not None:
        save_paramset(Path(snapshot_dir) / "final.ckpt", final)
    return final, snapshots


def load_snapshots(snapshot_dir: str | os.PathLike) -> list[tuple[int, ParamSet]]:
    paths = sorted(Path(snapshot_dir).glob("epoch_*.ckpt"))
    if not paths:
        raise FileNotFoundError(f"no epoch_*.ckpt snapshots in {snapshot_dir}")
    return [(int(p.stem.split("_")[1]), load_paramset(p)) for p in paths]


def build_kernel_dataset(snapshots: Iterable[tuple[int, ParamSet]],
                         grouping_mode: str = SHARED) -> KernelDataset:
    if grouping_mode not in GROUPING_MODES:
        raise ValueError(f"unknown grouping mode {grouping_mode!r}")
    values: dict[str, list[np.ndarray]] = {}
    prov: dict[str, list[tuple[str, int, int, int]]] = {}
    for epoch, params in snapshots:
        for s in snapshot_kernels(params, epoch):
            key = SHARED if grouping_mode == SHARED else s.layer_name
            values.setdefault(key, []).append(s.values)
            prov.setdefault(key, []).append((s.layer_name, s.in_index, s.out_index, epoch))
    if not values:
        raise ValueError("no kernel slices to export")
    groups = {k: np.stack(v).astype(np.float32) for k, v in values.items()}
    return KernelDataset(groups, grouping_mode, prov)


def write_kernel_dataset(ds: KernelDataset, path: str | os.PathLike) -> None:
    header = {"grouping": ds.grouping_mode,
              "groups": [{"key": k, "count": len(v)} for k, v in ds.groups.items()]}
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(json.dumps(header, separators=(",", ":")).encode())
        fh.write(b"\n")
        for arr in ds.groups.values():
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def read_kernel_dataset(path: str | os.PathLike) -> KernelDataset:
    raw = Path(path).read_bytes()
    if not raw.startswith(MAGIC):
        raise ValueError(f"{path}: bad magic, not a KDS1 file")
    end = raw.find(b"\n", len(MAGIC))
    header = json.loads(raw[len(MAGIC):end])
    payload = raw[end + 1:]
    expected = sum(g["count"] for g in header["groups"]) * SLICE * 4
    if len(payload) != expected:
        raise ValueError(f"{path}: payload size mismatch ({len(payload)} != {expected})")
    groups = {}
    offset = 0
    for g in header["groups"]:
        n = g["count"] * SLICE * 4
        arr = np.frombuffer(payload[offset:offset + n], dtype="<f4")
        groups[g["key"]] = arr.reshape(-1, KERNEL, KERNEL, KERNEL).astype(np.float32)
        offset += n
    return KernelDataset(groups, header["grouping"])


def export_kernel_dataset(snapshots: Sequence[tuple[int, ParamSet]], grouping_mode: str,
                          path: str | os.PathLike) -> KernelDataset:
    if not snapshots:
        raise ValueError("need at least one snapshot")
    ds = build_kernel_dataset(snapshots, grouping_mode)
    write_kernel_dataset(ds, path)
    return ds


def expected_slice_count(cfg: UNetConfig) -> int:
    return sum(ci * co for _, ci, co in cfg.conv_shapes())
