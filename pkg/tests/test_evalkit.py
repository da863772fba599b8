import csv
import io
import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.spatial.transform import Rotation

from posediff.evalkit import (Similarity, are, evaluate, merge_reports, reports_to_csv, reports_to_json,
                              rre, rte, similarity_align, transform_poses, umeyama)
from posediff.geometry import PoseTuple, quat_canonical, quat_to_rotmat, rotmat_to_quat
from posediff.scenegen import SceneSpec, generate_scene


def random_poses(rng, n):
    p = rng.standard_normal((n, 8))
    p[:, 1:5] = quat_canonical(p[:, 1:5])
    p[:, 5:] *= 3
    return PoseTuple(p)


def rz(deg):
    return Rotation.from_euler("z", deg, degrees=True).as_matrix()


def random_similarity(rng, scale=True):
    return Similarity(rng.uniform(0.3, 4.0) if scale else 1.0,
                      Rotation.random(random_state=rng.integers(1 << 31)).as_matrix(),
                      rng.standard_normal(3) * 5)


# ----------------------------------------------------------------------- ARE

def test_are_examples():
    assert are(np.eye(3), np.eye(3)) == 0.0
    assert are(rz(30), np.eye(3)) == pytest.approx(30.0, abs=1e-12)
    assert are(rz(180), np.eye(3)) == pytest.approx(180.0, abs=1e-9)


def test_are_matches_quaternion_oracle():
    rng = np.random.default_rng(0)
    for _ in range(200):
        qa, qb = quat_canonical(rng.standard_normal(4)), quat_canonical(rng.standard_normal(4))
        oracle = np.degrees(2 * np.arccos(min(1.0, abs(float(qa @ qb)))))
        assert are(quat_to_rotmat(qa), quat_to_rotmat(qb)) == pytest.approx(oracle, abs=1e-6)


def test_are_log_map_definition():
    # 2^-1/2 ||log(R* R^T)||_F via the skew matrix of the rotation vector
    rng = np.random.default_rng(1)
    for _ in range(20):
        R, Rs = Rotation.random(2, random_state=rng.integers(1 << 31)).as_matrix()
        w = Rotation.from_matrix(Rs @ R.T).as_rotvec()
        W = np.array([[0, -w[2], w[1]], [w[2], 0, -w[0]], [-w[1], w[0], 0]])
        assert are(R, Rs) == pytest.approx(np.degrees(np.linalg.norm(W) / np.sqrt(2)), abs=1e-9)


# ----------------------------------------------------------------- alignment

def test_align_identity():
    gt = random_poses(np.random.default_rng(2), 5)
    aligned, sim = similarity_align(gt, gt)
    assert sim.scale == pytest.approx(1.0) and np.allclose(sim.rotation, np.eye(3))
    assert sim.residual <= 1e-20 and np.allclose(aligned.centers, gt.centers)


def test_align_construct_and_recover():
    rng = np.random.default_rng(3)
    gt = random_poses(rng, 6)
    # pred centers = (1/3) R_z(-90) gt centers, so the aligning similarity is scale 3, R_z(90)
    pred = transform_poses(gt, Similarity(1 / 3, rz(-90), np.zeros(3)))
    aligned, sim = similarity_align(pred, gt)
    assert sim.scale == pytest.approx(3.0, abs=1e-9)
    assert np.allclose(sim.rotation, rz(90), atol=1e-9)
    assert sim.residual <= 1e-9
    assert np.allclose(aligned.params, gt.params, atol=1e-9) or np.allclose(
        aligned.rotations, gt.rotations, atol=1e-9)


def test_align_beats_random_similarities():
    rng = np.random.default_rng(4)
    gt = random_poses(rng, 8)
    pred = PoseTuple(gt.params + np.r_[0, 0, 0, 0, 0, 1, 1, 1] * 0.3 * rng.standard_normal((8, 8)))
    _, best = similarity_align(pred, gt)
    for _ in range(1000):
        sim = random_similarity(rng)
        if rng.uniform() < 0.5:
            # random perturbations of the optimum probe its neighbourhood too
            sim = Similarity(best.scale * rng.uniform(0.9, 1.1),
                             Rotation.from_rotvec(rng.normal(0, 0.05, 3)).as_matrix() @ best.rotation,
                             best.translation + rng.normal(0, 0.1, 3))
        res = ((sim.apply_points(pred.centers) - gt.centers) ** 2).sum()
        assert best.residual <= res + 1e-12


def test_alignment_idempotent():
    rng = np.random.default_rng(5)
    for _ in range(20):
        gt = random_poses(rng, 5)
        pred = random_poses(rng, 5)
        aligned, _ = similarity_align(pred, gt)
        _, again = similarity_align(aligned, gt)
        assert again.scale == pytest.approx(1.0, abs=1e-9)
        assert np.allclose(again.rotation, np.eye(3), atol=1e-9)
        assert np.allclose(again.translation, 0, atol=1e-9)


def test_coincident_centers_flagged(caplog):
    gt = random_poses(np.random.default_rng(6), 4)
    p = gt.params.copy()
    p[:, 5:] = np.einsum("nij,j->ni", gt.rotations, [-1.0, 2.0, 0.5])  # every center at (1, -2, -0.5)
    pred = PoseTuple(p)
    aligned, sim = similarity_align(pred, gt)
    assert sim.degenerate and aligned is pred
    assert "coincide" in caplog.text


# ------------------------------------------------------------ relative metrics

def test_relative_metrics_zero_on_gt():
    gt = random_poses(np.random.default_rng(7), 5)
    assert np.allclose(rre(gt, gt), 0, atol=1e-6)
    assert np.allclose(rte(gt, gt), 0, atol=1e-6)
    assert len(rre(gt, gt)) == 20


def test_rte_opposite_direction():
    gt = PoseTuple([[0, 1, 0, 0, 0, 0, 0, 0], [0, 1, 0, 0, 0, 1, 0, 0]])
    flipped = PoseTuple([[0, 1, 0, 0, 0, 0, 0, 0], [0, 1, 0, 0, 0, -1, 0, 0]])
    assert np.allclose(rte(flipped, gt), 180.0)


def test_rte_excludes_zero_translation():
    gt = PoseTuple([[0, 1, 0, 0, 0, 0, 0, 0], [0, 1, 0, 0, 0, 1, 0, 0], [0, 1, 0, 0, 0, 0, 1, 0]])
    pred = PoseTuple([[0, 1, 0, 0, 0, 0, 0, 0], [0, 1, 0, 0, 0, 0, 0, 0], [0, 1, 0, 0, 0, 0, 1, 0]])
    errs, excluded = rte(pred, gt, return_excluded=True)
    assert excluded == 2 and np.isnan(errs).sum() == 2


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2 ** 31 - 1))
def test_relative_metrics_gauge_invariant(seed):
    rng = np.random.default_rng(seed)
    gt, pred = random_poses(rng, 5), random_poses(rng, 5)
    moved = transform_poses(pred, random_similarity(rng, scale=False))
    assert np.allclose(rre(moved, gt), rre(pred, gt), atol=1e-9)
    assert np.allclose(rte(moved, gt), rte(pred, gt), atol=1e-9)


def test_quaternion_sign_invariance():
    rng = np.random.default_rng(8)
    gt, pred = random_poses(rng, 5), random_poses(rng, 5)
    p = pred.params.copy()
    p[::2, 1:5] *= -1
    flipped = PoseTuple(p)
    a, b = evaluate(pred, gt), evaluate(flipped, gt)
    for m in ("are", "ate", "rre", "rte"):
        assert np.allclose(getattr(a, m), getattr(b, m), atol=1e-9)


# --------------------------------------------------------------------- report

def test_report_perfect_prediction():
    sc = generate_scene(SceneSpec(n_frames=5, seed=0))
    r = evaluate(sc.ground_truth, sc.ground_truth)
    assert r.mARE == r.mATE == r.mRRE == r.mRTE == 1.0


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2 ** 31 - 1))
def test_threshold_monotone(seed):
    rng = np.random.default_rng(seed)
    gt = random_poses(rng, 6)
    pred = PoseTuple(gt.params + 0.3 * rng.standard_normal(gt.params.shape))
    r = evaluate(pred, gt, angle_thresholds=np.sort(rng.uniform(0, 90, 6)))
    for m in ("are", "ate", "rre", "rte"):
        acc = list(r.accuracy(m).values())
        assert all(0 <= a <= 1 for a in acc)
        assert all(x <= y for x, y in zip(acc, acc[1:]))


def test_serialization():
    rng = np.random.default_rng(9)
    gt = random_poses(rng, 4)
    reports = [evaluate(random_poses(rng, 4), gt, scene=f"s{k}") for k in range(2)]
    payload = json.loads(reports_to_json(reports))
    assert [s["scene"] for s in payload["scenes"]] == ["s0", "s1"]
    assert payload["summary"]["mean_accuracy"]["mRRE"] == pytest.approx(merge_reports(reports).mRRE)
    rows = list(csv.DictReader(io.StringIO(reports_to_csv(reports))))
    # one row per scene, metric and threshold
    assert len(rows) == 2 * 4 * 4
    assert reports_to_csv(reports) == reports_to_csv(reports)
