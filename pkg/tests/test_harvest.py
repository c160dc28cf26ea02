import json

import numpy as np
import pytest
import torch

from dwpseg.data import generate_pool
from dwpseg.harvest import (SnapshotSchedule, build_kernel_dataset, conv_layers,
                            expected_slice_count, export_kernel_dataset, load_snapshots,
                            read_kernel_dataset, snapshot_kernels, train_source)
from dwpseg.segnet import UNetConfig, he_random
from oracles import unet_kernel_slice_count


@pytest.mark.parametrize("epochs,burn_in,every,expected", [
    (60, 20, 10, [30, 40, 50, 60]),
    (60, 25, 10, [30, 40, 50, 60]),
    (65, 20, 10, [30, 40, 50, 60, 65]),
    (5, 0, 1, [1, 2, 3, 4, 5]),
    (10, 9, 4, [10]),
])
def test_schedule(epochs, burn_in, every, expected):
    assert SnapshotSchedule(epochs, burn_in, every).epochs_to_snapshot() == expected


def test_schedule_rejects_burn_in_past_end():
    with pytest.raises(ValueError):
        SnapshotSchedule(10, 10, 2)


def test_single_layer_slices():
    w = torch.arange(4 * 2 * 27, dtype=torch.float32).reshape(4, 2, 3, 3, 3)
    slices = snapshot_kernels({"c.weight": w, "c.bias": torch.zeros(4)}, epoch=7)
    assert len(slices) == 8
    s = slices[3]  # out 1, in 1
    assert (s.out_index, s.in_index, s.snapshot_epoch, s.layer_name) == (1, 1, 7, "c.weight")
    np.testing.assert_array_equal(s.values, w[1, 1].numpy())


def test_desk_slice_count():
    cfg = UNetConfig()
    n = len(snapshot_kernels(he_random(cfg, 0), 1))
    assert n == expected_slice_count(cfg) == unet_kernel_slice_count(3, 8, 1)


def test_zero_params_give_zero_slices():
    cfg = UNetConfig(levels=2, base_channels=2)
    zero = {k: torch.zeros_like(v) for k, v in he_random(cfg, 0).items()}
    assert all(not s.values.any() for s in snapshot_kernels(zero, 0))


def _single_layer_snaps(n):
    g = torch.Generator().manual_seed(0)
    return [(e, {"c.weight": torch.randn(4, 2, 3, 3, 3, generator=g)}) for e in range(n)]


def test_export_shared(tmp_path):
    ds = export_kernel_dataset(_single_layer_snaps(4), "shared", tmp_path / "k.kds")
    assert ds.sizes == {"shared": 32}


def test_export_per_layer(tmp_path):
    cfg = UNetConfig(levels=2, base_channels=2)
    params = he_random(cfg, 0)
    keep = conv_layers(params)[:3]
    ds = export_kernel_dataset([(1, {k: params[k] for k in keep})], "per_layer", tmp_path / "k.kds")
    assert list(ds.groups) == keep
    assert ds.sizes[keep[0]] == 1 * 2


def test_kds_roundtrip_and_layout(tmp_path):
    ds = export_kernel_dataset(_single_layer_snaps(2), "shared", tmp_path / "k.kds")
    assert read_kernel_dataset(tmp_path / "k.kds") == ds
    magic, header, payload = (tmp_path / "k.kds").read_bytes().split(b"\n", 2)
    assert magic == b"KDS1"
    assert json.loads(header) == {"grouping": "shared", "groups": [{"key": "shared", "count": 16}]}
    assert len(payload) == 16 * 27 * 4


def test_export_rejects_empty(tmp_path):
    with pytest.raises(ValueError):
        export_kernel_dataset([], "shared", tmp_path / "k.kds")
    with pytest.raises(ValueError):
        build_kernel_dataset([(0, {"b": torch.zeros(3)})])


def test_kernel_dataset_provenance():
    ds = build_kernel_dataset(_single_layer_snaps(2))
    slices = ds.slices("shared")
    assert slices[9].snapshot_epoch == 1 and slices[9].out_index == 0 and slices[9].in_index == 1


def test_train_source_rejects_empty():
    with pytest.raises(ValueError):
        train_source([], UNetConfig(), SnapshotSchedule(2, 0, 1), np.random.default_rng(0))


def test_train_source_zero_lr_snapshots_equal_init(tmp_path):
    cfg = UNetConfig(levels=2, base_channels=2)
    vols = generate_pool("source", 2, 0, (16, 16, 16))
    init = he_random(cfg, np.random.default_rng(5))
    final, snaps = train_source(vols, cfg, SnapshotSchedule(3, 1, 1), np.random.default_rng(5),
                                lr=0.0, snapshot_dir=tmp_path)
    assert [e for e, _ in snaps] == [2, 3]
    for _, snap in snaps:
        assert all(torch.equal(snap[k], init[k]) for k in snap)
    loaded = load_snapshots(tmp_path)
    assert [e for e, _ in loaded] == [2, 3]
    assert (tmp_path / "final.ckpt").exists()
