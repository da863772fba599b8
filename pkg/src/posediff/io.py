"""JSON file formats for cameras, correspondences and synthetic datasets.

Floats are written with ``repr`` precision, so every round trip is exact.
Dataset directories hold one ``<name>.json`` per scene plus ``manifest.json``.
"""
from __future__ import annotations

import json
import os
from pathlib import Path

import numpy as np

from .geometry import CorrespondenceSet, GeometryError, PoseTuple
from .scenegen import Dataset, SceneRecord, SceneSpec

DATASET_FORMAT_VERSION = 1


class DataError(ValueError):
    """A file is missing, malformed or inconsistent."""


def _dump(obj, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")


def _load(path):
    try:
        return json.loads(Path(path).read_text())
    except FileNotFoundError as exc:
        raise DataError(f"no such file: {path}") from exc
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: invalid JSON ({exc})") from exc


# ------------------------------------------------------------------ cameras

def cameras_to_json(poses: PoseTuple) -> dict:
    return {"cameras": [
        {"log_focal": float(p[0]), "quat": [float(v) for v in p[1:5]],
         "trans": [float(v) for v in p[5:8]]}
        for p in poses.params
    ]}


def cameras_from_json(doc) -> PoseTuple:
    try:
        rows = [[c["log_focal"], *c["quat"], *c["trans"]] for c in doc["cameras"]]
        params = np.array(rows, dtype=float)
    except (KeyError, TypeError, ValueError) as exc:
        raise DataError(f"malformed camera document: {exc}") from exc
    if params.ndim != 2 or params.shape[1] != 8 or len(params) == 0:
        raise DataError("camera document needs a non-empty list of 8-parameter cameras")
    if not np.isfinite(params).all():
        raise DataError("camera parameters must be finite")
    return PoseTuple(params)


def save_cameras(path, poses: PoseTuple):
    _dump(cameras_to_json(poses), path)


def load_cameras(path) -> PoseTuple:
    return cameras_from_json(_load(path))


# ----------------------------------------------------------- correspondences

def matches_to_json(matches) -> dict:
    return {"pairs": [
        {"i": int(m.i), "j": int(m.j), "points_i": np.asarray(m.points_i).tolist(),
         "points_j": np.asarray(m.points_j).tolist()}
        for m in matches
    ]}


def matches_from_json(doc) -> list:
    try:
        return [CorrespondenceSet(int(p["i"]), int(p["j"]), np.asarray(p["points_i"], float),
                                  np.asarray(p["points_j"], float))
                for p in doc["pairs"]]
    except (KeyError, TypeError, ValueError, GeometryError) as exc:
        raise DataError(f"malformed correspondence document: {exc}") from exc


def save_matches(path, matches):
    _dump(matches_to_json(matches), path)


def load_matches(path) -> list:
    return matches_from_json(_load(path))


# -------------------------------------------------------------------- scenes

def scene_to_json(scene: SceneRecord) -> dict:
    doc = {"name": scene.name, "spec": scene.spec.to_dict(),
           "conditioning": np.asarray(scene.conditioning).tolist(),
           "outlier_masks": [np.asarray(m, bool).astype(int).tolist() for m in scene.outlier_masks]}
    doc.update(cameras_to_json(scene.ground_truth))
    doc.update(matches_to_json(scene.matches))
    return doc


def scene_from_json(doc) -> SceneRecord:
    try:
        gt = cameras_from_json(doc)
        cond = np.asarray(doc["conditioning"], float)
        spec = SceneSpec.from_dict(doc["spec"])
        masks = [np.asarray(m, bool) for m in doc.get("outlier_masks", [])]
        name = str(doc.get("name", ""))
    except (KeyError, TypeError, ValueError) as exc:
        raise DataError(f"malformed scene document: {exc}") from exc
    if cond.ndim != 2 or len(cond) != len(gt):
        raise DataError("conditioning must hold one embedding per camera")
    matches = matches_from_json(doc)
    for m in matches:
        if not (0 <= m.i < len(gt) and 0 <= m.j < len(gt)):
            raise DataError(f"pair ({m.i}, {m.j}) references a missing frame")
    return SceneRecord(ground_truth=gt, conditioning=cond, matches=matches, spec=spec,
                       outlier_masks=masks, name=name)


def save_scene(path, scene: SceneRecord):
    _dump(scene_to_json(scene), path)


def load_scene(path) -> SceneRecord:
    return scene_from_json(_load(path))


def save_dataset(directory, dataset: Dataset, spec: SceneSpec | None = None, seed: int | None = None):
    """Write every scene plus a manifest listing the splits and generating settings."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for scene in dataset.scenes:
        save_scene(directory / f"{scene.name}.json", scene)
    manifest = {
        "format_version": DATASET_FORMAT_VERSION,
        "seed": seed,
        "spec": spec.to_dict() if spec is not None else None,
        "splits": {"train": [s.name for s in dataset.train], "test": [s.name for s in dataset.test]},
    }
    _dump(manifest, directory / "manifest.json")


def load_manifest(directory) -> dict:
    manifest = _load(Path(directory) / "manifest.json")
    if manifest.get("format_version") != DATASET_FORMAT_VERSION:
        raise DataError(f"unsupported dataset format version {manifest.get('format_version')!r}")
    return manifest


def load_dataset(directory, splits=("train", "test")) -> Dataset:
    directory = Path(directory)
    manifest = load_manifest(directory)
    parts = {}
    for split in ("train", "test"):
        names = manifest["splits"].get(split, []) if split in splits else []
        parts[split] = [load_scene(directory / f"{name}.json") for name in names]
    return Dataset(parts["train"], parts["test"])


def resolve_scene(path_or_name, dataset_dir=None) -> SceneRecord:
    """Load a scene from a file path, or by name from ``dataset_dir``."""
    p = Path(path_or_name)
    if p.suffix != ".json" and dataset_dir is not None:
        p = Path(dataset_dir) / f"{path_or_name}.json"
    if not os.path.exists(p):
        raise DataError(f"scene not found: {path_or_name}")
    return load_scene(p)
