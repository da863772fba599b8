import json

import numpy as np
import pytest

from posediff import io as pio
from posediff.scenegen import SceneSpec, generate_dataset, generate_scene


def test_cameras_roundtrip(tmp_path):
    poses = generate_scene(SceneSpec(n_frames=4, seed=0)).ground_truth
    pio.save_cameras(tmp_path / "c.json", poses)
    back = pio.load_cameras(tmp_path / "c.json")
    assert np.array_equal(back.params, poses.params)


def test_matches_roundtrip(tmp_path):
    sc = generate_scene(SceneSpec(n_frames=3, seed=1, match_noise_sigma=0.01))
    pio.save_matches(tmp_path / "m.json", sc.matches)
    back = pio.load_matches(tmp_path / "m.json")
    for a, b in zip(sc.matches, back):
        assert (a.i, a.j) == (b.i, b.j)
        assert np.array_equal(a.points_i, b.points_i) and np.array_equal(a.points_j, b.points_j)


def test_scene_roundtrip(tmp_path):
    sc = generate_scene(SceneSpec(n_frames=3, seed=2, outlier_rate=0.2), name="s")
    pio.save_scene(tmp_path / "s.json", sc)
    back = pio.load_scene(tmp_path / "s.json")
    assert back.name == "s" and back.spec == sc.spec
    assert np.array_equal(back.conditioning, sc.conditioning)
    assert np.array_equal(back.ground_truth.params, sc.ground_truth.params)
    assert all(np.array_equal(a, b) for a, b in zip(back.outlier_masks, sc.outlier_masks))
    # save -> load -> save is byte-stable
    pio.save_scene(tmp_path / "t.json", back)
    assert (tmp_path / "s.json").read_bytes() == (tmp_path / "t.json").read_bytes()


def test_dataset_layout(tmp_path):
    spec = SceneSpec(n_frames=3)
    ds = generate_dataset(5, spec, seed=3)
    pio.save_dataset(tmp_path, ds, spec=spec, seed=3)
    manifest = pio.load_manifest(tmp_path)
    assert manifest["seed"] == 3
    assert sorted(manifest["splits"]["train"] + manifest["splits"]["test"]) == [s.name for s in
                                                                                sorted(ds.scenes, key=lambda s: s.name)]
    for s in ds.scenes:
        assert (tmp_path / f"{s.name}.json").exists()
    back = pio.load_dataset(tmp_path)
    assert [s.name for s in back.test] == [s.name for s in ds.test]
    assert pio.resolve_scene(ds.test[0].name, tmp_path).name == ds.test[0].name


def test_bad_files(tmp_path):
    (tmp_path / "bad.json").write_text("{not json")
    with pytest.raises(pio.DataError):
        pio.load_cameras(tmp_path / "bad.json")
    (tmp_path / "c.json").write_text(json.dumps({"cameras": [{"log_focal": 0, "quat": [1, 0, 0], "trans": [0, 0, 0]}]}))
    with pytest.raises(pio.DataError):
        pio.load_cameras(tmp_path / "c.json")
    with pytest.raises(pio.DataError):
        pio.load_manifest(tmp_path)
