import csv
import json
import statistics

import numpy as np
import pytest
import torch

from dwpseg.data import load_dataset, make_splits
from dwpseg.experiments import (CSV_HEADER, EXIT_CONFIG, EXIT_MISSING, EXIT_OK, EXIT_USAGE,
                                ConfigError, CsvWriter, MethodSpec, MetricsRecord,
                                MissingArtifactError, Workspace, cell_rng, cli_main,
                                config_from_dict, fit_method, format_table, kernel_grid,
                                load_config, method_spec, prepare_workspace, prf_freeze_set,
                                read_metrics, render_kernel_grid, run_method, run_table,
                                summarize)
from dwpseg.harvest import KernelSlice
from dwpseg.segnet import UNetConfig, evaluate, he_random, predict_proba
from oracles import read_pgm

TINY = {
    "seed": 1,
    "data": {"n_source": 3, "n_target": 8, "dims": [16, 16, 16]},
    "unet": {"levels": 2, "base_channels": 2},
    "source": {"epochs": 2, "burn_in": 0, "every": 1},
    "vae": {"latent_dim": 2, "encoder_hidden": [8], "decoder_hidden": [8], "epochs": 2,
            "batch_size": 64},
    "target": {"epochs": 1, "max_steps": None},
    "table": {"train_sizes": [2, 3], "seeds": [1, 2], "test_size": 3},
}


@pytest.fixture(scope="module")
def tiny(tmp_path_factory):
    cfg = config_from_dict(TINY)
    ws = Workspace(tmp_path_factory.mktemp("ws"))
    prepare_workspace(ws, cfg)
    vols = {v.id: v for v in load_dataset(ws.data, "target")}
    return cfg, ws, vols


# ---------------------------------------------------------------- config


def test_config_defaults():
    cfg = load_config(None)
    assert cfg.table.train_sizes == (5, 10, 15, 20)
    assert cfg.table.seeds == (1, 2, 3) and cfg.table.test_size == 50
    assert cfg.source.epochs == 60 and cfg.target.epochs == 150
    assert cfg.unet == UNetConfig()


def test_config_partial_keys_default(tmp_path):
    (tmp_path / "c.json").write_text(json.dumps({"vi": {"mc_samples": 2}}))
    cfg = load_config(tmp_path / "c.json")
    assert cfg.vi.mc_samples == 2 and cfg.vi.lr_psi == 1e-3 and cfg.seed == 1


@pytest.mark.parametrize("raw, match", [
    ({"bogus": 1}, "unknown keys"),
    ({"vi": {"lr": 1}}, "unknown keys"),
    ({"source": {"epochs": "ten"}}, "bad value"),
    ({"vi": {"likelihood_scale": "nope"}}, "likelihood_scale"),
    ({"table": {"methods": ["dwp", "xx"]}}, "unknown methods"),
    ({"data": []}, "expected an object"),
])
def test_config_rejections(raw, match):
    with pytest.raises(ConfigError, match=match):
        config_from_dict(raw)


def test_config_null_max_steps():
    assert config_from_dict({"target": {"max_steps": None}}).target.max_steps is None
    assert config_from_dict({}).target.epochs_for(5) == 120


# ---------------------------------------------------------------- methods


def test_method_spec_invariants(tmp_path):
    with pytest.raises(ValueError):
        MethodSpec("prf", checkpoint=tmp_path)
    with pytest.raises(ValueError):
        MethodSpec("prf", freeze=frozenset({"x"}))
    with pytest.raises(ValueError):
        MethodSpec("dwp")
    with pytest.raises(ValueError):
        MethodSpec("ri", checkpoint=tmp_path)
    with pytest.raises(ValueError):
        MethodSpec("svm")


def test_prf_freeze_set_is_complement_of_first_and_last_blocks():
    cfg = UNetConfig()
    frozen = prf_freeze_set(cfg)
    trained = set(cfg.param_shapes()) - frozen
    assert trained == {n for n in cfg.param_shapes()
                       if n.split(".")[0] in ("enc0", "up0", "dec0", "out")}
    assert "enc1.conv1.weight" in frozen and "up1.conv.bias" in frozen


def test_prf_leaves_frozen_tensors_identical(tiny):
    cfg, ws, vols = tiny
    spec = method_spec("prf", ws, cfg)
    from dwpseg.checkpoint import load_paramset
    src = load_paramset(ws.source_ckpt)
    fitted = fit_method(spec, list(vols.values())[:2], cfg, np.random.default_rng(0))
    assert all(torch.equal(fitted.params[n], src[n]) for n in spec.freeze)
    assert any(not torch.equal(fitted.params[n], src[n]) for n in set(src) - spec.freeze)


def test_ri_zero_epochs_equals_untrained(tiny):
    cfg, ws, vols = tiny
    cfg0 = config_from_dict({**TINY, "target": {"epochs": 0}})
    split = make_splits(sorted(vols), 2, 3, 1)
    rec = run_method(MethodSpec("ri"), split, vols, cfg0, np.random.default_rng(7))
    p0 = he_random(cfg.unet, np.random.default_rng(7))
    ref = evaluate(lambda v: predict_proba(p0, v, cfg.unet), [vols[i] for i in split.test_ids])
    assert (rec.dice, rec.iou) == ref


@pytest.mark.parametrize("name", ["dwp", "pr", "prf", "ri"])
def test_every_method_in_unit_interval(tiny, name):
    cfg, ws, vols = tiny
    split = make_splits(sorted(vols), 2, 3, 1)
    rec = run_method(method_spec(name, ws, cfg), split, vols, cfg, cell_rng(1, 2, 1))
    assert 0 <= rec.iou <= rec.dice <= 1
    assert rec.method == name and rec.train_size == 2 and rec.seed == 1


def test_missing_artifact_names_path(tiny, tmp_path):
    cfg, _, vols = tiny
    split = make_splits(sorted(vols), 2, 3, 1)
    missing = tmp_path / "nope.ckpt"
    with pytest.raises(MissingArtifactError, match="nope.ckpt"):
        run_method(MethodSpec("pr", checkpoint=missing), split, vols, cfg,
                   np.random.default_rng(0))
    with pytest.raises(MissingArtifactError, match="prior"):
        run_method(MethodSpec("dwp", priors=tmp_path), split, vols, cfg,
                   np.random.default_rng(0))


def test_metrics_record_bounds():
    with pytest.raises(ValueError):
        MetricsRecord("ri", 5, 1, 1.2, 0.5, 0.0)


# ---------------------------------------------------------------- table


def _fake_records():
    rng = np.random.default_rng(0)
    recs = []
    for s in (5, 10, 15, 20):
        for m in ("dwp", "pr", "prf", "ri"):
            for seed in (1, 2, 3):
                iou = float(rng.uniform(0.2, 0.7))
                recs.append(MetricsRecord(m, s, seed, min(1.0, iou * 1.3), iou, 1.0))
    return recs


def test_table_layout_and_independent_recompute(tmp_path):
    w = CsvWriter(tmp_path / "m.csv")
    for r in _fake_records():
        w.append(r)
    sizes, methods = (5, 10, 15, 20), ("dwp", "pr", "prf", "ri")
    cells = summarize(read_metrics(tmp_path / "m.csv"), sizes, methods)
    text = format_table(cells, sizes, methods)
    lines = text.strip().splitlines()
    assert len(lines) == 5
    assert lines[0].split()[:2] == ["Train", "size"]
    assert "UNet-DWP" in lines[0] and "UNet-RI" in lines[0]
    for line in lines[1:]:
        assert len([t for t in line.split() if t.startswith("(")]) == 4

    with open(tmp_path / "m.csv", newline="") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == CSV_HEADER
    for s in sizes:
        for m in methods:
            vals = [float(r[4]) for r in rows[1:] if r[0] == m and int(r[1]) == s]
            assert abs(cells[f"{m}/{s}"]["mean"] - statistics.fmean(vals)) <= 1e-9
            assert abs(cells[f"{m}/{s}"]["std"] - statistics.stdev(vals)) <= 1e-9


def test_table_marks_missing_and_partial_cells():
    recs = [r for r in _fake_records() if not (r.method == "prf" and r.train_size == 10)]
    recs = [r for r in recs if not (r.method == "ri" and r.train_size == 5 and r.seed == 3)]
    cells = summarize(recs, (5, 10), ("prf", "ri"))
    text = format_table(cells, (5, 10), ("prf", "ri"), expected_n=3)
    row5, row10 = text.splitlines()[1:3]
    assert "--" in row10 and "[2/3]" in row5


def test_run_table_tiny(tiny):
    cfg, ws, _ = tiny
    result = run_table(cfg, ws.root)
    recs = read_metrics(ws.metrics)
    assert len(recs) == 2 * 2 * 4 and not result["failures"]
    assert all(0 <= r.iou <= r.dice <= 1 for r in recs)
    table = json.loads((ws.root / "table.json").read_text())
    assert set(table["cells"]) == {f"{m}/{s}" for m in cfg.table.methods for s in (2, 3)}
    manifest = json.loads((ws.root / "manifest.json").read_text())
    assert manifest["config"]["table"]["test_size"] == 3 and manifest["version"]
    # resume: nothing left to do, rows unchanged
    before = ws.metrics.read_text()
    run_table(cfg, ws.root)
    assert ws.metrics.read_text() == before


# ---------------------------------------------------------------- kernel grid


def test_grid_single_kernel_layout(tmp_path):
    k = np.arange(27, dtype=np.float32).reshape(3, 3, 3)
    img = render_kernel_grid([k], tmp_path / "k.pgm")
    assert img.shape == (3, 11)
    assert img[:, 3].max() == 0 and img[:, 7].max() == 0
    assert img[0, 0] == 0 and img[2, 10] == 255
    back, maxval = read_pgm(tmp_path / "k.pgm")
    assert maxval == 255 and np.array_equal(back, img)


def test_grid_constant_kernel_mid_gray():
    img = kernel_grid([KernelSlice(np.full((3, 3, 3), 0.7, np.float32), "x", 0, 0, 0)])
    tiles = np.delete(img, [3, 7], axis=1)
    assert np.all(tiles == 128)


def test_grid_row_major_with_separators():
    ks = [np.full((3, 3, 3), float(i)) + np.eye(3)[None] for i in range(5)]
    img = kernel_grid(ks, columns=2)
    assert img.shape == (3 * 3 + 2, 2 * 11 + 1)
    assert img[3].max() == 0 and img[:, 11].max() == 0


def test_grid_rejects_empty_and_bad_shape():
    with pytest.raises(ValueError):
        kernel_grid([])
    with pytest.raises(ValueError):
        kernel_grid([np.zeros((3, 3))])


# ---------------------------------------------------------------- CLI


def _tree(root):
    return {p.relative_to(root).as_posix(): p.read_bytes()
            for p in sorted(root.rglob("*")) if p.is_file()}


def test_cli_gen_data_twice_identical(tmp_path):
    args = ["--seed", "3", "--volumes", "4", "--source-volumes", "2"]
    assert cli_main(["gen-data", "--out", str(tmp_path / "a"), *args]) == EXIT_OK
    assert cli_main(["gen-data", "--out", str(tmp_path / "b"), *args]) == EXIT_OK
    a, b = _tree(tmp_path / "a"), _tree(tmp_path / "b")
    assert a == b and len(a) == 4 + 2 + 2


def test_cli_usage_errors():
    assert cli_main(["frobnicate"]) == EXIT_USAGE
    assert cli_main([]) == EXIT_USAGE
    assert cli_main(["--help"]) == EXIT_OK


def test_cli_malformed_config_no_outputs(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    out = tmp_path / "out"
    assert cli_main(["table", "--config", str(bad), "--out", str(out)]) == EXIT_CONFIG
    assert not out.exists()
    bad.write_text(json.dumps({"nope": 1}))
    assert cli_main(["table", "--config", str(bad), "--out", str(out)]) == EXIT_CONFIG
    assert not out.exists()


def test_cli_missing_files(tmp_path, capsys):
    assert cli_main(["harvest", "--snapshots", str(tmp_path / "none"),
                     "--out", str(tmp_path / "k.kds")]) == EXIT_MISSING
    assert cli_main(["sample-prior", "--prior", str(tmp_path / "none"),
                     "--out", str(tmp_path / "g.pgm")]) == EXIT_MISSING
    assert cli_main(["run", "--method", "dwp", "--train-size", "5", "--seed", "1",
                     "--out", str(tmp_path / "m.csv"), "--workdir", str(tmp_path)]) == EXIT_MISSING
    assert "index.json" in capsys.readouterr().err


def test_cli_pipeline_and_manifest(tmp_path, tiny):
    cfg_path = tmp_path / "cfg.json"
    cfg_path.write_text(json.dumps(TINY))
    ws = tmp_path / "ws"
    steps = [
        ["gen-data", "--out", str(ws / "data"), "--seed", "1", "--config", str(cfg_path)],
        ["train-source", "--data", str(ws / "data"), "--out", str(ws / "source/final.ckpt"),
         "--config", str(cfg_path)],
        ["harvest", "--snapshots", str(ws / "source/snapshots"), "--out", str(ws / "kernels.kds")],
        ["train-prior", "--kernels", str(ws / "kernels.kds"), "--out", str(ws / "priors"),
         "--config", str(cfg_path)],
        ["sample-prior", "--prior", str(ws / "priors"), "--n", "64", "--out", str(ws / "g.pgm")],
    ]
    for argv in steps:
        assert cli_main(argv) == EXIT_OK, argv
    img, _ = read_pgm(ws / "g.pgm")
    assert img.shape == (8 * 4 - 1, 8 * 12 - 1)
    manifest = json.loads((ws / "priors/manifest.json").read_text())
    assert manifest["config"]["vae"]["latent_dim"] == 2
    assert manifest["config"]["vi"]["likelihood_scale"] == "voxel_sum"  # defaulted
    assert manifest["seeds"]["master"] == 1 and manifest["version"]
