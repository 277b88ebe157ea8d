import json

import numpy as np
import pytest

from wavediff.cli import EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC, EXIT_OK, main
from wavediff.metrics import read_report
from wavediff.nn.checkpoint import Checkpoint
from wavediff.pipeline import (
    DataError,
    DatasetManifest,
    PipelineConfig,
    generate_shapes,
    mesh_to_pair,
    load_dataset,
    prepare_dataset,
    sha256_file,
)
from wavediff.shapes import box_mesh, chair_mesh, icosphere
from wavediff.volume import InvalidConfigError, TsdfConfig, load_obj, save_obj

SMALL = {
    "tsdf": {"resolution": 32},
    "wavelet": {"level": 2},
    "generator": {"widths": [4, 8], "time_dim": 8, "time_hidden": 8},
    "detail": {"widths": [4, 8]},
    "train_generator": {"iters": 4, "batch": 2, "lr": 1e-3},
    "train_detail": {"iters": 4, "batch": 2, "lr": 1e-3},
    "sampling": {"steps_div": 50, "count": 2},
    "evaluation": {"points": 128},
}


def write_meshes(directory):
    directory.mkdir(parents=True, exist_ok=True)
    save_obj(icosphere(3, 0.8), directory / "a_sphere.obj")
    save_obj(box_mesh((-1, -0.5, -0.8), (1, 0.5, 0.8)), directory / "b_box.obj")
    save_obj(chair_mesh(0, 40), directory / "c_chair.obj")
    (directory / "d_broken.obj").write_text("v 0 0 0\nf 1 2 3\n")


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("ws")
    write_meshes(root / "meshes")
    (root / "cfg.json").write_text(json.dumps(SMALL))
    cfg = ["--config", str(root / "cfg.json")]
    assert main(cfg + ["prepare", "--in", str(root / "meshes"), "--out", str(root / "data")]) == EXIT_OK
    assert main(cfg + ["train-gen", "--data", str(root / "data"), "--out", str(root / "gen.ckpt"),
                       "--log", str(root / "gen.csv")]) == EXIT_OK
    assert main(cfg + ["train-detail", "--data", str(root / "data"), "--out", str(root / "det.ckpt")]) == EXIT_OK
    return root, cfg


def test_config_round_trip_and_errors(tmp_path):
    cfg = PipelineConfig.from_dict(SMALL)
    assert cfg.coarse_resolution == 8 and cfg.generator.widths == (4, 8)
    cfg.save(tmp_path / "c.json")
    assert PipelineConfig.load(tmp_path / "c.json") == cfg
    bad = [
        {"paths": {}},
        {"tsdf": {"resolution": 32, "colour": 1}},
        {"tsdf": {"resolution": 24}},
        {"wavelet": {"filters": "db2"}},
        {"tsdf": {"resolution": 16}, "wavelet": {"level": 3}, "generator": {"widths": [4, 8, 8]}},
        {"sampling": "fast"},
    ]
    for d in bad:
        with pytest.raises(InvalidConfigError):
            PipelineConfig.from_dict(d)
    (tmp_path / "broken.json").write_text("{not json")
    with pytest.raises(InvalidConfigError):
        PipelineConfig.load(tmp_path / "broken.json")


def test_prepare_dataset_records_failures_and_is_idempotent(tmp_path):
    write_meshes(tmp_path / "m")
    cfg = PipelineConfig.from_dict(SMALL)
    first = prepare_dataset(tmp_path / "m", tmp_path / "d", cfg)
    assert len(first.ok) == 3 and len(first.failed) == 1 and first.computed == 4
    assert first.failed[0].source == "d_broken.obj" and first.failed[0].error
    again = prepare_dataset(tmp_path / "m", tmp_path / "d", cfg)
    assert again.computed == 0 and again.skipped == 4
    # a changed source is recomputed, the rest are not
    save_obj(icosphere(2, 0.5), tmp_path / "m" / "a_sphere.obj")
    third = prepare_dataset(tmp_path / "m", tmp_path / "d", cfg)
    assert third.computed == 1 and third.skipped == 3
    # different settings recompute everything
    other = prepare_dataset(tmp_path / "m", tmp_path / "d", PipelineConfig.from_dict({**SMALL, "wavelet": {"level": 1}}))
    assert other.computed == 4
    pairs = load_dataset(tmp_path / "d")
    assert len(pairs) == 3 and pairs[0].level == 1 and pairs[0].source_meta == TsdfConfig(32)


def test_load_dataset_checks_hashes(tmp_path):
    write_meshes(tmp_path / "m")
    prepare_dataset(tmp_path / "m", tmp_path / "d", PipelineConfig.from_dict(SMALL))
    entry = DatasetManifest.load(tmp_path / "d").ok[0]
    path = tmp_path / "d" / entry.wvp
    data = bytearray(path.read_bytes())
    data[-1] ^= 0xFF
    path.write_bytes(bytes(data))
    with pytest.raises(DataError):
        load_dataset(tmp_path / "d")
    # preparing again repairs the tampered pair
    fixed = prepare_dataset(tmp_path / "m", tmp_path / "d", PipelineConfig.from_dict(SMALL))
    assert fixed.computed == 1
    assert len(load_dataset(tmp_path / "d")) == 3
    with pytest.raises(DataError):
        load_dataset(tmp_path / "missing")


def test_prepare_single_mesh_reports_deviation(tmp_path, capsys):
    save_obj(icosphere(3, 1.0), tmp_path / "s.obj")
    code = main(["prepare", "--in", str(tmp_path / "s.obj"), "--out", str(tmp_path / "s.wvp"), "--res", "32",
                 "--level", "2"])
    assert code == EXIT_OK
    stats = json.loads(capsys.readouterr().out)
    assert stats["full_pyramid_max_abs"] < 1e-12
    assert 0 <= stats["mean_over_tau"] < 0.1


def test_training_outputs(workspace):
    root, _ = workspace
    gen = Checkpoint.load(root / "gen.ckpt")
    assert gen.meta["iters"] == 4 and gen.meta["wavelet"]["level"] == 2 and gen.meta["tsdf"]["resolution"] == 32
    assert gen.config.widths == (4, 8)
    assert (root / "gen.csv").read_text().splitlines()[0] == "iter,loss"
    assert Checkpoint.load(root / "det.ckpt").config.kind == "detail"


def test_generate_is_byte_identical(workspace):
    root, cfg = workspace
    outs = []
    for name in ("g1", "g2"):
        args = cfg + ["generate", "--checkpoint", str(root / "gen.ckpt"), "--detail", str(root / "det.ckpt"),
                      "--seed", "7", "--out-dir", str(root / name)]
        assert main(args) == EXIT_OK
        outs.append(sorted((root / name).glob("*.obj")))
    assert len(outs[0]) == 2
    for a, b in zip(*outs):
        assert a.read_bytes() == b.read_bytes()
    meta = json.loads((root / "g1" / "metadata.json").read_text())
    assert meta["seed"] == 7 and meta["detail_predictor"] is True and meta["steps_div"] == 50
    assert meta["shapes"][0]["sha256"] == sha256_file(outs[0][0])


def test_generate_without_config_adopts_checkpoint_settings(workspace):
    root, cfg = workspace
    args = ["generate", "--checkpoint", str(root / "gen.ckpt"), "--count", "1", "--steps-div", "50",
            "--seed", "7", "--out-dir", str(root / "nocfg"), "--trace-dir", str(root / "trace")]
    assert main(args) == EXIT_OK
    meta = json.loads((root / "nocfg" / "metadata.json").read_text())
    assert meta["detail_predictor"] is False and meta["mode"] == "no-detail"
    # 1000 / 50 visited steps plus the initial noise volume
    assert len(list((root / "trace").glob("*.vol"))) == 21


def test_generate_detects_architecture_mismatch(workspace, tmp_path):
    root, _ = workspace
    other = dict(SMALL, generator={"widths": [8, 8], "time_dim": 8, "time_hidden": 8})
    (tmp_path / "other.json").write_text(json.dumps(other))
    args = ["--config", str(tmp_path / "other.json"), "generate", "--checkpoint", str(root / "gen.ckpt"),
            "--out-dir", str(tmp_path / "o")]
    assert main(args) == EXIT_CONFIG


def test_non_finite_sampling_exits_numerically(workspace, tmp_path):
    root, cfg = workspace
    gen = Checkpoint.load(root / "gen.ckpt")
    gen.params = np.full_like(gen.params, np.nan)
    gen.save(tmp_path / "nan.ckpt")
    args = cfg + ["generate", "--checkpoint", str(tmp_path / "nan.ckpt"), "--out-dir", str(tmp_path / "o")]
    assert main(args) == EXIT_NUMERIC


def test_cli_exit_codes(workspace, tmp_path):
    root, cfg = workspace
    assert main(["--config", str(tmp_path / "nope.json"), "generate", "--checkpoint", "x", "--out-dir", "y"]) \
        == EXIT_CONFIG
    assert main(cfg + ["train-gen", "--data", str(tmp_path / "none"), "--out", str(tmp_path / "g")]) == EXIT_DATA
    assert main(cfg + ["train-gen", "--data", str(root / "data"), "--res", "16", "--out", str(tmp_path / "g")]) \
        == EXIT_CONFIG
    broken = bytearray((root / "gen.ckpt").read_bytes())
    broken[50] ^= 1
    (tmp_path / "broken.ckpt").write_bytes(bytes(broken))
    assert main(cfg + ["generate", "--checkpoint", str(tmp_path / "broken.ckpt"), "--out-dir", str(tmp_path)]) \
        == EXIT_DATA
    assert main(["prepare", "--in", str(tmp_path / "absent.obj"), "--out", str(tmp_path / "x.wvp")]) == EXIT_DATA
    with pytest.raises(SystemExit):
        main(["frobnicate"])


def test_evaluate_and_ablate(workspace, capsys):
    root, cfg = workspace
    if not (root / "g1").exists():
        main(cfg + ["generate", "--checkpoint", str(root / "gen.ckpt"), "--detail", str(root / "det.ckpt"),
                    "--seed", "7", "--out-dir", str(root / "g1")])
    out = root / "eval.csv"
    assert main(cfg + ["evaluate", "--gen", str(root / "g1"), "--ref", str(root / "meshes_ok"), "--out", str(out)]) \
        == EXIT_DATA
    refs = root / "meshes_ok"
    refs.mkdir()
    for name in ("a_sphere.obj", "b_box.obj"):
        (refs / name).write_bytes((root / "meshes" / name).read_bytes())
    assert main(cfg + ["evaluate", "--gen", str(root / "g1"), "--ref", str(refs), "--out", str(out)]) == EXIT_OK
    values = read_report(out)
    assert {k for k, _ in values} == {"MMD", "COV", "1-NNA"}
    assert 0 <= values[("COV", "CD")] <= 1 and 0 <= values[("1-NNA", "EMD")] <= 1
    code = main(cfg + ["ablate", "--data", str(root / "data"), "--checkpoint", str(root / "gen.ckpt"),
                       "--detail", str(root / "det.ckpt"), "--out-dir", str(root / "abl")])
    assert code == EXIT_OK
    full, bare = read_report(root / "abl" / "full" / "report.csv"), read_report(root / "abl" / "no-detail" / "report.csv")
    assert set(full) == set(bare)
    assert json.loads((root / "abl" / "no-detail" / "metadata.json").read_text())["detail_predictor"] is False
    # the coarse samples are shared, so the two modes differ only through the detail volume
    a = load_obj(root / "abl" / "full" / "shape_0000.obj")
    b = load_obj(root / "abl" / "no-detail" / "shape_0000.obj")
    assert not (len(a.vertices) == len(b.vertices) and np.array_equal(a.vertices, b.vertices))


def test_generate_shapes_api_matches_cli(workspace, tmp_path):
    root, _ = workspace
    cfg = PipelineConfig.from_dict(dict(SMALL, sampling={"steps_div": 50, "count": 1, "seed": 7}))
    paths = generate_shapes(root / "gen.ckpt", root / "det.ckpt", 1, cfg, tmp_path)
    assert paths[0].read_bytes() == (root / "g1" / "shape_0000.obj").read_bytes()


def test_gaussian_oracle_end_to_end():
    from wavediff.diffusion import GaussianOracle, sample_many
    from wavediff.wavelet import WaveletPair, reconstruct_from_pair

    cfg = PipelineConfig.from_dict(SMALL)
    pair, _ = mesh_to_pair(icosphere(3, 0.8), cfg)
    truth = reconstruct_from_pair(pair).values
    sched = cfg.noise_schedule()
    oracle = GaussianOracle(pair.coarse.values, 0.01 * pair.coarse.values.std(), sched)
    trace = sample_many(oracle, sched, pair.coarse.resolution, 10, seed=3, sample_indices=[0])[0]
    got = reconstruct_from_pair(WaveletPair(pair.level, pair.coarse.with_values(trace.final), pair.detail,
                                            pair.source_meta)).values
    assert np.sqrt(np.mean((got - truth) ** 2)) <= 0.1 * np.sqrt(np.mean(truth**2))


def test_round_trip_surface_stays_within_two_voxels():
    from wavediff.metrics import chamfer, sample_surface
    from wavediff.pipeline import coarse_to_mesh
    from wavediff.volume import normalize_mesh

    cfg = PipelineConfig.from_dict(SMALL)
    for mesh in (icosphere(3, 0.8), chair_mesh(1, 40)):
        pair, _ = mesh_to_pair(mesh, cfg)
        rebuilt = coarse_to_mesh(pair.coarse.values, pair.detail.values, cfg)
        source = normalize_mesh(mesh.cleaned(), cfg.tsdf.extent)
        cd = chamfer(sample_surface(rebuilt, 2048, seed=1), sample_surface(source, 2048, seed=2))
        voxel = 2 * cfg.tsdf.extent / cfg.tsdf.resolution
        assert cd <= (2 * voxel) ** 2
