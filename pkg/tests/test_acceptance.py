"""End-to-end acceptance checks, one test per criterion.

Each test prints a single ``CRITERION n PASS|FAIL`` line with the measured
numbers before asserting, so ``pytest -v`` output doubles as a report.
"""

import json
import time

import numpy as np
import pytest
from test_metrics import cd_oracle, cov_oracle, emd_oracle, mmd_oracle, nna_oracle

from wavediff.cli import EXIT_OK, main
from wavediff.diffusion import GaussianOracle, build_schedule, sample_many
from wavediff.isosurface import euler_characteristic, marching_cubes, mesh_is_watertight
from wavediff.metrics import chamfer, coverage, emd, mmd, one_nna
from wavediff.nn.models import UNetConfig
from wavediff.nn.train import TrainConfig, predict_detail, train_detail, train_generator
from wavediff.pipeline import PipelineConfig, mesh_to_pair, pair_deviation
from wavediff.shapes import chair_mesh, chair_tsdf, sphere_tsdf
from wavediff.volume import VolumeGrid
from wavediff.wavelet import compact_pair, decompose, reconstruct_full, retained_fraction


@pytest.fixture
def report(capsys):
    def emit(n: int, ok: bool, detail: str):
        with capsys.disabled():
            print(f"\nCRITERION {n} {'PASS' if ok else 'FAIL'}: {detail}")
        assert ok, detail

    return emit


def test_criterion_1_lossless_pyramid(report):
    t0 = time.time()
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(20):
        v = VolumeGrid(rng.uniform(-0.1, 0.1, (64,) * 3), 0.45, 0.1)
        back = reconstruct_full(decompose(v, "bior6.8", 3), "bior6.8")
        worst = max(worst, np.abs(back.values - v.values).max() / np.abs(v.values).max())
    elapsed = time.time() - t0
    report(1, worst <= 1e-8 and elapsed < 60, f"max relative Linf error {worst:.2e} over 20 volumes, {elapsed:.1f}s")


def test_criterion_2_compact_pair_fidelity(report):
    t0 = time.time()
    cfg = PipelineConfig.from_dict({"tsdf": {"resolution": 128}, "wavelet": {"level": 3}})
    ratios = []
    for seed in range(3):
        pair, tsdf = mesh_to_pair(chair_mesh(seed), cfg)
        ratios.append(pair_deviation(pair, tsdf, cfg.wavelet.filters)["mean_over_tau"])
    elapsed = time.time() - t0
    ok = max(ratios) <= 0.10 and elapsed < 300
    report(2, ok, f"mean |dTSDF| / tau per chair = {[round(r, 4) for r in ratios]}, {elapsed:.1f}s")


def test_criterion_3_retained_fraction(report):
    f = retained_fraction(256, 3)
    ok = f == (32**3 + 64**3) / 256**3 and f < 0.03
    report(3, ok, f"retained fraction at 256^3, J=3: {100 * f:.4f}%")


def test_criterion_4_schedule(report):
    s = build_schedule(1000, 1e-4, 0.02)
    ab_prev = np.concatenate([[1.0], s.alpha_bar[1:-1]])
    var = (1 - ab_prev) / (1 - s.alpha_bar[1:]) * s.beta[1:]
    err = max(abs(s.beta[1] - 1e-4), abs(s.beta[1000] - 0.02), abs(s.sigma[1]),
              np.abs(s.sigma[1:] ** 2 - var).max())
    report(4, err <= 1e-12, f"max deviation {err:.1e}")


def test_criterion_5_gaussian_oracle_sampling(report):
    t0 = time.time()
    s = build_schedule()
    mu, sd = 0.3, 0.5
    lines, ok = [], True
    for factor in (1, 10):
        traces = sample_many(GaussianOracle(mu, sd, s), s, 16, factor, seed=1, sample_indices=range(64))
        x = np.stack([t.final for t in traces])
        em, es = abs(x.mean() - mu) / mu, abs(x.std() - sd) / sd
        ok &= em <= 0.05 and es <= 0.10
        lines.append(f"factor {factor}: mean err {100 * em:.2f}%, std err {100 * es:.2f}%")
    elapsed = time.time() - t0
    report(5, ok and elapsed < 300, "; ".join(lines) + f", {elapsed:.1f}s")


def test_criterion_6_gradient_suite(report):
    import test_nn

    t0 = time.time()
    failures = []
    for name, (fn, arrays) in sorted(test_nn.OPS.items()):
        try:
            test_nn.grad_check(fn, *arrays)
        except AssertionError as exc:
            failures.append(f"{name}: {exc}")
    checks = [test_nn.test_attention_gradients, test_nn.test_time_embedding_gradients,
              lambda: test_nn.test_whole_network_parameter_gradients("denoiser"),
              lambda: test_nn.test_whole_network_parameter_gradients("detail")]
    for check in checks:
        try:
            check()
        except AssertionError as exc:
            failures.append(str(exc))
    elapsed = time.time() - t0
    n = len(test_nn.OPS) + len(checks)
    report(6, not failures and elapsed < 120, f"{n - len(failures)}/{n} gradient checks passed, {elapsed:.1f}s "
           + "; ".join(failures))


TOY_WIDTHS = (8, 16, 16)


def test_criterion_7_toy_training(report):
    t0 = time.time()
    pairs = [compact_pair(decompose(chair_tsdf(seed, 128), "bior6.8", 3), 3) for seed in range(10)]
    assert pairs[0].coarse.resolution == 16
    gen_hist = []
    train_generator([p.coarse for p in pairs], TrainConfig(iters=2000, lr=1e-4, batch=4),
                    UNetConfig(widths=TOY_WIDTHS), history=gen_hist)
    start, end = float(np.mean(gen_hist[:50])), float(np.mean(gen_hist[-100:]))
    t1 = time.time()
    # the detail set reuses the first four chairs at 64^3 (coarse 8^3, detail 16^3)
    det_pairs = [compact_pair(decompose(chair_tsdf(seed, 64), "bior6.8", 3), 3) for seed in range(4)]
    ckpt = train_detail(det_pairs, TrainConfig(iters=5000, lr=3e-3, batch=4, lr_decay="cosine"),
                        UNetConfig(kind="detail", widths=TOY_WIDTHS))
    target = np.stack([p.detail.values for p in det_pairs])
    pred = predict_detail(ckpt, np.stack([p.coarse.values for p in det_pairs]))
    ratio = float(np.mean((pred - target) ** 2) / target.var())
    elapsed = time.time() - t0
    ok = 0.8 <= start <= 1.2 and end < 0.5 and ratio < 0.01 and elapsed < 1800
    report(7, ok, f"generator loss {start:.3f} -> {end:.3f} ({t1 - t0:.0f}s); "
           f"detail residual {100 * ratio:.3f}% of target variance ({time.time() - t1:.0f}s); total {elapsed:.0f}s")


def test_criterion_8_sphere_isosurface(report):
    r = 0.3
    grid = sphere_tsdf(64, r)
    mesh = marching_cubes(grid)
    area = mesh.triangle_areas().sum() / (4 * np.pi * r**2)
    radial = np.abs(np.linalg.norm(mesh.vertices, axis=1) - r).max()
    diag = np.sqrt(3) * grid.voxel_size
    watertight = mesh_is_watertight(mesh)
    ok = watertight and abs(area - 1) <= 0.05 and radial <= diag
    report(8, ok, f"watertight={watertight}, chi={euler_characteristic(mesh)}, area ratio {area:.5f}, "
           f"max radial error {radial:.2e} (voxel diagonal {diag:.2e})")


def test_criterion_9_metric_oracles(report):
    rng = np.random.default_rng(9)
    mismatches = []
    for _ in range(5):
        n = int(rng.integers(2, 9))
        a, b = rng.standard_normal((n, 3)), rng.standard_normal((n, 3))
        if not np.isclose(chamfer(a, b), cd_oracle(a, b), rtol=1e-12, atol=0):
            mismatches.append("CD")
        if not np.isclose(emd(a, b), emd_oracle(a, b), rtol=1e-12, atol=0):
            mismatches.append("EMD")
    gen = [rng.standard_normal((6, 3)) for _ in range(6)]
    ref = [rng.standard_normal((6, 3)) * 1.3 for _ in range(6)]
    for kind, dist in (("CD", cd_oracle), ("EMD", emd_oracle)):
        if not np.isclose(mmd(gen, ref, kind), mmd_oracle(gen, ref, dist), rtol=1e-12, atol=0):
            mismatches.append(f"MMD-{kind}")
        if coverage(gen, ref, kind) != cov_oracle(gen, ref, dist):
            mismatches.append(f"COV-{kind}")
        if one_nna(gen, ref, kind) != nna_oracle(gen, ref, dist):
            mismatches.append(f"1-NNA-{kind}")
        if mmd(ref, ref, kind) != 0.0 or coverage(ref, ref, kind) != 1.0:
            mismatches.append(f"identity-{kind}")
    report(9, not mismatches, "all metrics match brute force" if not mismatches else f"mismatch: {mismatches}")


def test_criterion_10_deterministic_generation(report, tmp_path):
    from test_pipeline import SMALL, write_meshes

    write_meshes(tmp_path / "meshes")
    (tmp_path / "cfg.json").write_text(json.dumps(SMALL))
    cfg = ["--config", str(tmp_path / "cfg.json")]
    assert main(cfg + ["prepare", "--in", str(tmp_path / "meshes"), "--out", str(tmp_path / "data")]) == EXIT_OK
    assert main(cfg + ["train-gen", "--data", str(tmp_path / "data"), "--out", str(tmp_path / "g.ckpt")]) == EXIT_OK
    assert main(cfg + ["train-detail", "--data", str(tmp_path / "data"), "--out", str(tmp_path / "d.ckpt")]) == EXIT_OK
    runs = []
    for name in ("run1", "run2"):
        code = main(cfg + ["generate", "--checkpoint", str(tmp_path / "g.ckpt"), "--detail", str(tmp_path / "d.ckpt"),
                           "--count", "3", "--seed", "42", "--out-dir", str(tmp_path / name)])
        assert code == EXIT_OK
        runs.append({p.name: p.read_bytes() for p in sorted((tmp_path / name).glob("*.obj"))})
    same = runs[0] == runs[1] and len(runs[0]) == 3
    report(10, same, f"{len(runs[0])} OBJ files, byte-identical across runs: {same}")
