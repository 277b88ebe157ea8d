import itertools

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.spatial.transform import Rotation

from wavediff.metrics import (
    UNIT_SCALE,
    chamfer,
    coverage,
    emd,
    evaluate_sets,
    mmd,
    one_nna,
    read_report,
    sample_surface,
)
from wavediff.shapes import box_mesh
from wavediff.volume import InvalidInputError, TriangleMesh


def cd_oracle(a, b):
    da = [min(np.sum((p - q) ** 2) for q in b) for p in a]
    db = [min(np.sum((p - q) ** 2) for q in a) for p in b]
    return sum(da) / len(a) + sum(db) / len(b)


def emd_oracle(a, b):
    best = np.inf
    for perm in itertools.permutations(range(len(b))):
        best = min(best, sum(np.sqrt(np.sum((a[i] - b[j]) ** 2)) for i, j in enumerate(perm)))
    return best / len(a)


ORACLES = {"CD": cd_oracle, "EMD": emd_oracle}


def mmd_oracle(gen, ref, dist):
    return sum(min(dist(g, r) for g in gen) for r in ref) / len(ref)


def cov_oracle(gen, ref, dist):
    matched = set()
    for g in gen:
        d = [dist(g, r) for r in ref]
        matched.add(d.index(min(d)))
    return len(matched) / len(ref)


def nna_oracle(gen, ref, dist):
    clouds = [(c, 0) for c in gen] + [(c, 1) for c in ref]
    correct = 0
    for i, (c, label) in enumerate(clouds):
        best, best_label = np.inf, None
        for j, (o, other) in enumerate(clouds):
            if i != j and dist(c, o) < best:
                best, best_label = dist(c, o), other
        correct += best_label == label
    return correct / len(clouds)


def clouds(seed, count, n):
    rng = np.random.default_rng(seed)
    return [rng.standard_normal((n, 3)) * rng.uniform(0.5, 1.5) for _ in range(count)]


@given(st.integers(0, 10_000), st.integers(1, 8), st.integers(1, 8))
def test_chamfer_matches_double_loop(seed, n, m):
    rng = np.random.default_rng(seed)
    a, b = rng.standard_normal((n, 3)), rng.standard_normal((m, 3))
    assert chamfer(a, b) == pytest.approx(cd_oracle(a, b), rel=1e-12, abs=1e-15)


@pytest.mark.parametrize("seed", range(3))
def test_emd_matches_permutation_search(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.standard_normal((8, 3)), rng.standard_normal((8, 3))
    assert emd(a, b) == pytest.approx(emd_oracle(a, b), rel=1e-12)


def test_hand_examples():
    a = np.zeros((1, 3))
    b = np.array([[1.0, 0, 0]])
    assert chamfer(a, b) == 2.0
    assert emd(a, b) == 1.0
    pts = np.random.default_rng(0).standard_normal((6, 3))
    assert chamfer(pts, pts) == 0.0 and emd(pts, pts) == 0.0
    # a pure translation is transported exactly along itself
    assert emd(pts, pts + [0.0, 3.0, 4.0]) == pytest.approx(5.0)


@pytest.mark.parametrize("kind", ["CD", "EMD"])
def test_set_metrics_match_oracles(kind):
    gen, ref = clouds(1, 6, 6), clouds(2, 6, 6)
    dist = ORACLES[kind]
    assert mmd(gen, ref, kind) == pytest.approx(mmd_oracle(gen, ref, dist), rel=1e-12)
    assert coverage(gen, ref, kind) == cov_oracle(gen, ref, dist)
    assert one_nna(gen, ref, kind) == nna_oracle(gen, ref, dist)


@pytest.mark.parametrize("kind", ["CD", "EMD"])
def test_identical_sets(kind):
    ref = clouds(3, 5, 6)
    assert mmd(ref, ref, kind) == 0.0
    assert coverage(ref, ref, kind) == 1.0


def test_coverage_collapsed_generator():
    ref = clouds(4, 4, 5)
    gen = [ref[2].copy() for _ in range(4)]
    assert coverage(gen, ref) == 0.25


def test_one_nna_on_separated_sets():
    gen = clouds(5, 4, 6)
    ref = [c + 100.0 for c in clouds(6, 4, 6)]
    assert one_nna(gen, ref) == 1.0


def test_rigid_invariance(rng):
    a, b = rng.standard_normal((7, 3)), rng.standard_normal((7, 3))
    rot = Rotation.random(random_state=3).as_matrix()
    shift = rng.standard_normal(3)
    assert chamfer(a @ rot.T + shift, b @ rot.T + shift) == pytest.approx(chamfer(a, b), rel=1e-10)
    assert emd(a @ rot.T + shift, b @ rot.T + shift) == pytest.approx(emd(a, b), rel=1e-10)


def test_emd_subsamples_large_clouds(rng):
    a, b = rng.standard_normal((1500, 3)), rng.standard_normal((1500, 3)) + [0.5, 0, 0]
    sub = emd(a, b)
    assert sub == emd(a, b)
    # the fixed-size subsample estimates the full transport cost
    assert sub == pytest.approx(emd(a, b, max_points=1500), rel=0.1)


def test_metric_errors():
    with pytest.raises(InvalidInputError):
        chamfer(np.zeros((0, 3)), np.zeros((2, 3)))
    with pytest.raises(InvalidInputError):
        emd(np.zeros((2, 3)), np.zeros((3, 3)))
    with pytest.raises(InvalidInputError):
        one_nna(clouds(0, 1, 4), clouds(1, 3, 4))
    with pytest.raises(InvalidInputError):
        mmd([], clouds(1, 3, 4))
    with pytest.raises(InvalidInputError):
        chamfer(np.array([[np.nan, 0, 0]]), np.zeros((1, 3)))


def test_area_weighted_sampling():
    v = np.array([[0, 0, 0], [1, 0, 0], [0, 2, 0], [10, 0, 0], [13, 0, 0], [10, 2, 0]], float)
    mesh = TriangleMesh(v, np.array([[0, 1, 2], [3, 4, 5]]))
    n = 20000
    pts = sample_surface(mesh, n, seed=1)
    share = np.mean(pts[:, 0] >= 10)
    # binomial with p = 0.75: three standard deviations
    assert abs(share - 0.75) <= 3 * np.sqrt(0.75 * 0.25 / n)
    assert np.array_equal(pts, sample_surface(mesh, n, seed=1))


def test_samples_lie_on_the_surface():
    pts = sample_surface(box_mesh(), 4000, seed=2)
    assert np.allclose(np.abs(pts).max(axis=1), 1.0)
    assert np.all(np.abs(pts) <= 1.0 + 1e-12)
    with pytest.raises(InvalidInputError):
        sample_surface(TriangleMesh(np.zeros((3, 3)), np.array([[0, 1, 2]])))


def test_report_csv(tmp_path):
    gen, ref = clouds(7, 3, 8), clouds(8, 3, 8)
    report = evaluate_sets(gen, ref)
    report.write_csv(tmp_path / "r.csv")
    lines = (tmp_path / "r.csv").read_text().splitlines()
    assert lines[0] == "metric,distance_kind,value,unit_scale"
    assert len(lines) == 7
    assert "MMD,CD" in lines[1] and lines[1].endswith(",0.001")
    back = read_report(tmp_path / "r.csv")
    for key, value in report.values.items():
        assert back[key] == pytest.approx(value, rel=1e-8)
    assert UNIT_SCALE == {"CD": 1e-3, "EMD": 1e-2}


def test_single_generated_cloud():
    ref = clouds(10, 5, 6)
    x = clouds(11, 1, 6)
    assert coverage(x, ref) == 1 / len(ref)
    assert mmd(x, ref) == pytest.approx(np.mean([chamfer(x[0], r) for r in ref]), rel=1e-12)


def test_one_nna_near_half_for_same_distribution():
    rng = np.random.default_rng(12)
    pool = [rng.standard_normal((32, 3)) for _ in range(80)]
    assert abs(one_nna(pool[:40], pool[40:]) - 0.5) <= 0.2


def test_set_metrics_are_rigidly_invariant():
    gen, ref = clouds(13, 4, 6), clouds(14, 4, 6)
    rot = Rotation.random(random_state=5).as_matrix()
    move = lambda cs: [c @ rot.T + [0.3, -1.0, 2.0] for c in cs]
    for kind in ("CD", "EMD"):
        assert mmd(move(gen), move(ref), kind) == pytest.approx(mmd(gen, ref, kind), abs=1e-9)
        assert coverage(move(gen), move(ref), kind) == coverage(gen, ref, kind)
        assert one_nna(move(gen), move(ref), kind) == one_nna(gen, ref, kind)


def test_samples_on_single_triangle():
    tri = TriangleMesh(np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0]], float), np.array([[0, 1, 2]]))
    pts = sample_surface(tri, 1000, seed=3)
    assert np.all(pts[:, 2] == 0) and np.all(pts[:, :2] >= 0) and np.all(pts[:, 0] + pts[:, 1] <= 1 + 1e-12)
