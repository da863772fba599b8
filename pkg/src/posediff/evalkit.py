"""Pose accuracy metrics, similarity alignment and threshold aggregation.

Absolute metrics (ARE, ATE) are computed after aligning predicted camera
centers to the ground truth with one least-squares similarity. Relative
metrics (RRE, RTE) use all ordered frame pairs and need no alignment.
"""
from __future__ import annotations

import csv
import io
import json
import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.transform import Rotation

from .geometry import PoseTuple, rotmat_to_quat

log = logging.getLogger(__name__)

ANGLE_THRESHOLDS = (5.0, 10.0, 15.0, 30.0)
ATE_THRESHOLDS = (0.1, 0.25, 0.5, 1.0)


def are(R, R_star) -> float:
    """Geodesic angle in degrees between two rotations, ``2^-1/2 ||log(R* R^T)||_F``."""
    rel = np.asarray(R_star) @ np.asarray(R).T
    return float(np.degrees(Rotation.from_matrix(rel).magnitude()))


def _are_batch(R, R_star):
    rel = np.einsum("nij,nkj->nik", R_star, R)
    return np.degrees(Rotation.from_matrix(rel).magnitude())


@dataclass
class Similarity:
    scale: float
    rotation: np.ndarray
    translation: np.ndarray
    residual: float = 0.0
    degenerate: bool = False

    def apply_points(self, c):
        return self.scale * np.asarray(c) @ self.rotation.T + self.translation


def umeyama(src, dst, with_scale: bool = True) -> Similarity:
    """Least-squares similarity ``dst ≈ s Q src + b`` (Umeyama's closed form)."""
    src, dst = np.asarray(src, float), np.asarray(dst, float)
    mu_s, mu_d = src.mean(0), dst.mean(0)
    xs, xd = src - mu_s, dst - mu_d
    var_s = (xs ** 2).sum() / len(src)
    if var_s < 1e-24:
        return Similarity(1.0, np.eye(3), mu_d - mu_s, degenerate=True)
    cov = xd.T @ xs / len(src)
    U, D, Vt = np.linalg.svd(cov)
    S = np.eye(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        S[2, 2] = -1.0
    Q = U @ S @ Vt
    s = float(np.trace(np.diag(D) @ S) / var_s) if with_scale else 1.0
    b = mu_d - s * Q @ mu_s
    res = float(((s * src @ Q.T + b - dst) ** 2).sum())
    return Similarity(s, Q, b, res)


def transform_poses(poses: PoseTuple, sim: Similarity) -> PoseTuple:
    """Apply a world similarity to every camera (centers move, orientations rotate)."""
    R = poses.rotations
    c = sim.apply_points(poses.centers)
    R_new = np.einsum("nij,kj->nik", R, sim.rotation)
    t_new = -np.einsum("nij,nj->ni", R_new, c)
    q = rotmat_to_quat(R_new)
    return PoseTuple(np.concatenate([poses.log_focals[:, None], q, t_new], axis=1))


def similarity_align(pred: PoseTuple, gt: PoseTuple):
    """Align ``pred`` to ``gt`` by the best similarity over optical centers.

    Returns ``(aligned, similarity)``; with coincident predicted centers the
    alignment is skipped and ``similarity.degenerate`` is set.
    """
    if len(pred) != len(gt):
        raise ValueError("pred and gt differ in frame count")
    sim = umeyama(pred.centers, gt.centers)
    if sim.degenerate:
        log.warning("similarity_align: predicted centers coincide; alignment skipped")
        return pred, sim
    return transform_poses(pred, sim), sim


def ate(pred_aligned: PoseTuple, gt: PoseTuple) -> np.ndarray:
    return np.linalg.norm(pred_aligned.centers - gt.centers, axis=1)


def ordered_pairs(n):
    return [(i, j) for i in range(n) for j in range(n) if i != j]


def rre(pred: PoseTuple, gt: PoseTuple) -> np.ndarray:
    """Relative rotation error (degrees) for every ordered pair ``i != j``."""
    R, Rs = pred.rotations, gt.rotations
    pairs = ordered_pairs(len(pred))
    i, j = np.array(pairs).T
    rel = np.einsum("nij,nkj->nik", R[i], R[j])
    rel_s = np.einsum("nij,nkj->nik", Rs[i], Rs[j])
    return _are_batch(rel, rel_s)


def relative_translations(poses: PoseTuple, pairs):
    """Translation of ``g_j o g_i^-1`` for each pair."""
    R, t = poses.rotations, poses.trans
    i, j = np.array(pairs).T
    R_ij = np.einsum("nij,nkj->nik", R[j], R[i])
    return t[j] - np.einsum("nij,nj->ni", R_ij, t[i])


def rte(pred: PoseTuple, gt: PoseTuple, return_excluded: bool = False):
    """Angle (degrees) between predicted and true relative translation directions.

    Pairs where either relative translation vanishes are excluded (NaN).
    """
    pairs = ordered_pairs(len(pred))
    a = relative_translations(pred, pairs)
    b = relative_translations(gt, pairs)
    na, nb = np.linalg.norm(a, axis=1), np.linalg.norm(b, axis=1)
    ok = (na > 1e-12) & (nb > 1e-12)
    out = np.full(len(pairs), np.nan)
    # atan2 of (|a x b|, a.b) is the arccos of the normalized dot, without its loss of precision near 0 and 180
    ua, ub = a[ok] / na[ok, None], b[ok] / nb[ok, None]
    out[ok] = np.degrees(np.arctan2(np.linalg.norm(np.cross(ua, ub), axis=1), (ua * ub).sum(1)))
    if return_excluded:
        return out, int((~ok).sum())
    return out


def scene_scale(gt: PoseTuple) -> float:
    """Mean distance of ground-truth optical centers from their centroid."""
    c = gt.centers
    return float(np.linalg.norm(c - c.mean(0), axis=1).mean())


def _accuracy(errors, thresholds):
    errors = np.asarray(errors, float)
    errors = errors[np.isfinite(errors)]
    if len(errors) == 0:
        return {float(t): 0.0 for t in thresholds}
    return {float(t): float((errors < t).mean()) for t in thresholds}


@dataclass
class MetricReport:
    """Threshold accuracies, their means and the raw per-frame / per-pair errors."""

    are: list = field(default_factory=list)
    ate: list = field(default_factory=list)
    rre: list = field(default_factory=list)
    rte: list = field(default_factory=list)
    angle_thresholds: tuple = ANGLE_THRESHOLDS
    ate_thresholds: tuple = ATE_THRESHOLDS
    scene: str = ""
    n_frames: int = 0

    def accuracy(self, metric: str) -> dict:
        th = self.ate_thresholds if metric == "ate" else self.angle_thresholds
        return _accuracy(getattr(self, metric), th)

    def mean_accuracy(self, metric: str) -> float:
        return float(np.mean(list(self.accuracy(metric).values())))

    @property
    def mARE(self):
        return self.mean_accuracy("are")

    @property
    def mATE(self):
        return self.mean_accuracy("ate")

    @property
    def mRRE(self):
        return self.mean_accuracy("rre")

    @property
    def mRTE(self):
        return self.mean_accuracy("rte")

    def mean_error(self, metric: str) -> float:
        v = np.asarray(getattr(self, metric), float)
        return float(np.nanmean(v)) if len(v) else float("nan")

    def to_dict(self) -> dict:
        return {
            "scene": self.scene,
            "n_frames": self.n_frames,
            "angle_thresholds": list(self.angle_thresholds),
            "ate_thresholds": list(self.ate_thresholds),
            "accuracy": {m: {str(k): v for k, v in self.accuracy(m).items()}
                         for m in ("are", "ate", "rre", "rte")},
            "mean_accuracy": {"mARE": self.mARE, "mATE": self.mATE,
                              "mRRE": self.mRRE, "mRTE": self.mRTE},
            "errors": {m: [None if not np.isfinite(x) else float(x) for x in getattr(self, m)]
                       for m in ("are", "ate", "rre", "rte")},
        }

    def csv_rows(self):
        for m in ("are", "ate", "rre", "rte"):
            for tau, acc in self.accuracy(m).items():
                yield {"scene": self.scene, "n_frames": self.n_frames, "metric": m,
                       "threshold": tau, "accuracy": acc}


def evaluate(pred: PoseTuple, gt: PoseTuple, angle_thresholds=ANGLE_THRESHOLDS,
             ate_thresholds=ATE_THRESHOLDS, scene: str = "") -> MetricReport:
    """Full metric report of one scene. ATE is expressed as a fraction of :func:`scene_scale`."""
    aligned, _ = similarity_align(pred, gt)
    return MetricReport(
        are=list(_are_batch(aligned.rotations, gt.rotations)),
        ate=list(ate(aligned, gt) / max(scene_scale(gt), 1e-12)),
        rre=list(rre(pred, gt)),
        rte=list(rte(pred, gt)),
        angle_thresholds=tuple(angle_thresholds),
        ate_thresholds=tuple(ate_thresholds),
        scene=scene,
        n_frames=len(gt),
    )


def merge_reports(reports, scene: str = "all") -> MetricReport:
    """Pool raw errors of several scene reports into one."""
    reports = list(reports)
    first = reports[0]
    return MetricReport(
        are=[x for r in reports for x in r.are],
        ate=[x for r in reports for x in r.ate],
        rre=[x for r in reports for x in r.rre],
        rte=[x for r in reports for x in r.rte],
        angle_thresholds=first.angle_thresholds,
        ate_thresholds=first.ate_thresholds,
        scene=scene,
        n_frames=int(np.mean([r.n_frames for r in reports])),
    )


def reports_to_json(reports) -> str:
    reports = list(reports)
    payload = {"scenes": [r.to_dict() for r in reports],
               "summary": merge_reports(reports).to_dict() if reports else None}
    return json.dumps(payload, indent=2, sort_keys=True) + "\n"


def reports_to_csv(reports) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=["scene", "n_frames", "metric", "threshold", "accuracy"],
                            lineterminator="\n")
    writer.writeheader()
    for r in reports:
        writer.writerows(r.csv_rows())
    return buf.getvalue()


def pose_regression_baseline(train_scenes, eval_scenes, config=None, schedule=None,
                             model_config=None, guidance=None, model=None, pivot: int = 0):
    """Train the denoiser architecture as a one-shot pose regressor and evaluate it.

    The model sees zero pose tokens at ``t = T`` and regresses the pivot-normalized
    poses with the same L2 loss and training settings as the diffusion model.
    Passing ``guidance`` refines every regressed tuple with the same number of
    guidance iterations guided sampling would spend. Pass a trained ``model`` to
    skip training. Returns ``(pooled_report, per_scene_reports, model)``.
    """
    import dataclasses

    from .denoiser import TrainConfig, regress_poses, train
    from .diffusion import make_schedule
    from .guidance import refine_poses

    schedule = schedule or make_schedule()
    if model is None:
        config = dataclasses.replace(config or TrainConfig(), regression=True)
        model = train(list(train_scenes), config, schedule, model_config).model
    reports = []
    for scene in eval_scenes:
        pred = regress_poses(model, schedule, scene.conditioning, pivot)
        if guidance is not None and guidance.active:
            pred = refine_poses(pred, scene.matches, guidance, pivot)
        reports.append(evaluate(pred, scene.ground_truth, scene=scene.name))
    return merge_reports(reports), reports, model
