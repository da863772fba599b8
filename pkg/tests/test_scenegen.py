from itertools import combinations

import numpy as np
import pytest
from scipy.spatial.distance import pdist
from scipy.stats import binom

from posediff.geometry import project, scene_sampson_error
from posediff.scenegen import (SceneGenerationError, SceneSpec, generate_dataset, generate_scene,
                               with_corruption)


@pytest.mark.parametrize("trajectory", ["orbit", "linear"])
def test_noiseless_scene_is_epipolar_consistent(trajectory):
    for seed in range(10):
        sc = generate_scene(SceneSpec(n_frames=6, trajectory=trajectory, seed=seed))
        assert scene_sampson_error(sc.ground_truth.params, sc.matches, np.inf) <= 1e-8
        assert len(sc.matches) == 15


def test_seed_fixed_is_deterministic():
    spec = SceneSpec(n_frames=5, match_noise_sigma=0.01, outlier_rate=0.1, seed=7)
    a, b = generate_scene(spec), generate_scene(spec)
    assert np.array_equal(a.ground_truth.params, b.ground_truth.params)
    assert np.array_equal(a.conditioning, b.conditioning)
    for ma, mb in zip(a.matches, b.matches):
        assert np.array_equal(ma.points_i, mb.points_i) and np.array_equal(ma.points_j, mb.points_j)


def test_outlier_count_matches_mask():
    spec = SceneSpec(n_frames=2, n_points=400, max_matches_per_pair=100, outlier_rate=0.2, seed=3)
    sc = generate_scene(spec)
    clean = with_corruption(sc)
    (corr,), (mask,) = sc.matches, sc.outlier_masks
    assert len(corr) == 100
    # 99.9% two-sided binomial interval around 20
    lo, hi = binom.ppf([0.0005, 0.9995], 100, 0.2)
    assert lo <= mask.sum() <= hi
    moved = (corr.points_j != clean.matches[0].points_j).any(axis=1)
    assert np.array_equal(moved, mask)
    assert np.array_equal(corr.points_i, clean.matches[0].points_i)


def test_outlier_rate_over_many_pairs():
    sc = generate_scene(SceneSpec(n_frames=8, outlier_rate=0.2, seed=4))
    flags = np.concatenate(sc.outlier_masks)
    n = len(flags)
    assert abs(flags.mean() - 0.2) <= 4 * np.sqrt(0.2 * 0.8 / n)


def test_corruption_keeps_geometry():
    sc = generate_scene(SceneSpec(n_frames=4, seed=5))
    noisy = with_corruption(sc, 0.01, 0.3)
    assert np.array_equal(sc.ground_truth.params, noisy.ground_truth.params)
    assert np.array_equal(sc.conditioning, noisy.conditioning)
    assert scene_sampson_error(noisy.ground_truth.params, noisy.matches, np.inf) > 1e-3


def test_projection_round_trip():
    sc = generate_scene(SceneSpec(n_frames=5, seed=6))
    cams = sc.ground_truth.cameras
    for corr in sc.matches:
        # every stored point is the projection of some scene point in both frames
        pi = project(cams[corr.i], sc.points)
        pj = project(cams[corr.j], sc.points)
        for a, b in zip(corr.points_i, corr.points_j):
            k = np.argmin(np.linalg.norm(pi - a, axis=1))
            assert np.allclose(pi[k], a, atol=1e-12) and np.allclose(pj[k], b, atol=1e-12)


def test_points_visible_in_two_frames():
    sc = generate_scene(SceneSpec(n_frames=5, seed=8))
    seen = np.zeros(len(sc.points), int)
    for cam in sc.ground_truth.cameras:
        p_c = cam.to_camera_frame(sc.points)
        uv = cam.focal * p_c[:, :2] / p_c[:, 2:3]
        seen += (p_c[:, 2] > 0) & (np.abs(uv) <= 1).all(axis=1)
    assert (seen >= 2).all()


def test_orbit_looks_at_centroid():
    sc = generate_scene(SceneSpec(n_frames=6, seed=9))
    centroid = sc.points.mean(axis=0)
    for cam in sc.ground_truth.cameras:
        d = cam.to_camera_frame(centroid[None])[0]
        assert np.degrees(np.arctan2(np.linalg.norm(d[:2]), d[2])) < 10


def test_linear_centers_nearly_collinear():
    sc = generate_scene(SceneSpec(n_frames=8, trajectory="linear", seed=10))
    c = sc.ground_truth.centers
    sv = np.linalg.svd(c - c.mean(0), compute_uv=False)
    assert sv[1] < 0.2 * sv[0]


def test_spec_validation():
    with pytest.raises(ValueError):
        SceneSpec(n_frames=1)
    with pytest.raises(ValueError):
        SceneSpec(n_points=7)
    with pytest.raises(ValueError):
        SceneSpec(outlier_rate=1.0)
    with pytest.raises(ValueError):
        SceneSpec(trajectory="spiral")


def test_unattainable_visibility():
    # with a very long focal length almost no point lands inside the frame
    with pytest.raises(SceneGenerationError):
        generate_scene(SceneSpec(n_frames=6, n_points=8, focal_range=(40.0, 50.0), seed=1))


def test_dataset_split():
    ds = generate_dataset(10, SceneSpec(n_frames=3), seed=0, train_ratio=0.8)
    assert len(ds.train) == 8 and len(ds.test) == 2
    assert not {s.name for s in ds.train} & {s.name for s in ds.test}
    again = generate_dataset(10, SceneSpec(n_frames=3), seed=0, train_ratio=0.8)
    assert [s.name for s in ds.test] == [s.name for s in again.test]
    with pytest.raises(ValueError):
        generate_dataset(1)


def test_different_seeds_differ():
    a = generate_dataset(3, SceneSpec(n_frames=3), seed=0)
    b = generate_dataset(3, SceneSpec(n_frames=3), seed=1)
    for sa, sb in zip(a.scenes, b.scenes):
        assert not np.allclose(sa.ground_truth.params, sb.ground_truth.params)


def test_embeddings_differ_across_frames():
    for seed in range(10):
        sc = generate_scene(SceneSpec(n_frames=8, seed=seed))
        d = pdist(sc.conditioning)
        assert d.min() > 1e-3 * np.linalg.norm(sc.conditioning, axis=1).mean()


def test_every_pair_has_eight_matches():
    sc = generate_scene(SceneSpec(n_frames=10, seed=11))
    assert {(m.i, m.j) for m in sc.matches} == set(combinations(range(10), 2))
    assert min(len(m) for m in sc.matches) >= 8
