"""Camera parametrization, projection and the robust Sampson epipolar error.

A camera is stored as a flat 8-vector::

    (log_focal, q_w, q_x, q_y, q_z, t_x, t_y, t_z)

with ``K = diag(f, f, 1)``, ``f = exp(log_focal)`` and the principal point at
the image center, which is the origin of the normalized image coordinates
used throughout (``[-1, 1]^2``). Extrinsics map world to camera:
``p_c = R p_w + t``.

The Sampson error is implemented once, in torch, so the same expression
serves both evaluation and reverse-mode gradients.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import torch

log = logging.getLogger(__name__)

PARAM_DIM = 8
DEFAULT_EPSILON = 10.0
# a correspondence whose Sampson denominator falls below this is skipped
DENOM_EPS = 1e-18


class GeometryError(ValueError):
    """Raised for degenerate or physically impossible geometric configurations."""


class BehindCameraError(GeometryError):
    pass


class DegenerateGeometryError(GeometryError):
    pass


# ---------------------------------------------------------------- quaternions

def quat_normalize(q):
    q = np.asarray(q, dtype=float)
    n = np.linalg.norm(q, axis=-1, keepdims=True)
    if np.any(n == 0):
        raise GeometryError("cannot normalize a zero quaternion")
    return q / n


def quat_canonical(q):
    """Unit quaternion with non-negative scalar part."""
    q = quat_normalize(q)
    sign = np.where(q[..., :1] < 0, -1.0, 1.0)
    return q * sign


def quat_conj(q):
    q = np.asarray(q, dtype=float)
    return q * np.array([1.0, -1.0, -1.0, -1.0])


def quat_mul(a, b):
    """Hamilton product ``a * b`` (rotation ``b`` first, then ``a``)."""
    aw, ax, ay, az = np.moveaxis(np.asarray(a, dtype=float), -1, 0)
    bw, bx, by, bz = np.moveaxis(np.asarray(b, dtype=float), -1, 0)
    return np.stack([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ], axis=-1)


def quat_to_rotmat(q):
    """Rotation matrix of a (not necessarily unit) quaternion ``(w, x, y, z)``."""
    w, x, y, z = np.moveaxis(quat_normalize(q), -1, 0)
    R = np.stack([
        1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
        2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
        2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y),
    ], axis=-1)
    return R.reshape(R.shape[:-1] + (3, 3))


def rotmat_to_quat(R):
    """Unit quaternion (w >= 0) of a rotation matrix; Shepperd's method."""
    R = np.asarray(R, dtype=float)
    batch = R.shape[:-2]
    R = R.reshape(-1, 3, 3)
    out = np.empty((R.shape[0], 4))
    for k, m in enumerate(R):
        tr = np.trace(m)
        diag = np.diag(m)
        i = int(np.argmax(np.r_[tr, diag]))
        if i == 0:
            s = 2.0 * np.sqrt(1.0 + tr)
            q = [0.25 * s, (m[2, 1] - m[1, 2]) / s, (m[0, 2] - m[2, 0]) / s, (m[1, 0] - m[0, 1]) / s]
        elif i == 1:
            s = 2.0 * np.sqrt(1.0 + m[0, 0] - m[1, 1] - m[2, 2])
            q = [(m[2, 1] - m[1, 2]) / s, 0.25 * s, (m[0, 1] + m[1, 0]) / s, (m[0, 2] + m[2, 0]) / s]
        elif i == 2:
            s = 2.0 * np.sqrt(1.0 + m[1, 1] - m[0, 0] - m[2, 2])
            q = [(m[0, 2] - m[2, 0]) / s, (m[0, 1] + m[1, 0]) / s, 0.25 * s, (m[1, 2] + m[2, 1]) / s]
        else:
            s = 2.0 * np.sqrt(1.0 + m[2, 2] - m[0, 0] - m[1, 1])
            q = [(m[1, 0] - m[0, 1]) / s, (m[0, 2] + m[2, 0]) / s, (m[1, 2] + m[2, 1]) / s, 0.25 * s]
        out[k] = q
    return quat_canonical(out).reshape(batch + (4,))


def skew(v):
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


# -------------------------------------------------------------------- cameras

@dataclass
class Camera:
    """Pinhole camera with a single focal length and centered principal point."""

    log_focal: float = 0.0
    quat: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0, 0.0, 0.0]))
    trans: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.log_focal = float(self.log_focal)
        self.quat = quat_normalize(np.asarray(self.quat, dtype=float))
        self.trans = np.asarray(self.trans, dtype=float).reshape(3)

    @property
    def focal(self) -> float:
        return float(np.exp(self.log_focal))

    @property
    def principal_point(self) -> np.ndarray:
        return np.zeros(2)

    @property
    def K(self) -> np.ndarray:
        f = self.focal
        return np.diag([f, f, 1.0])

    @property
    def R(self) -> np.ndarray:
        return quat_to_rotmat(self.quat)

    @property
    def center(self) -> np.ndarray:
        """Optical center in world coordinates, ``c = -R^T t``."""
        return -self.R.T @ self.trans

    def to_vector(self) -> np.ndarray:
        return np.concatenate([[self.log_focal], self.quat, self.trans])

    @classmethod
    def from_vector(cls, v) -> "Camera":
        v = np.asarray(v, dtype=float)
        if v.shape != (PARAM_DIM,):
            raise ValueError(f"camera vector must have shape (8,), got {v.shape}")
        return cls(v[0], v[1:5], v[5:8])

    @classmethod
    def from_rt(cls, R, t, focal: float = 1.0) -> "Camera":
        return cls(np.log(focal), rotmat_to_quat(R), t)

    def to_camera_frame(self, p_w) -> np.ndarray:
        return np.asarray(p_w, dtype=float) @ self.R.T + self.trans


def project(camera: Camera, p_w) -> np.ndarray:
    """Project world point(s) ``(..., 3)`` to normalized image coordinates ``(..., 2)``."""
    p_c = camera.to_camera_frame(p_w)
    z = p_c[..., 2]
    if np.any(z <= 0):
        raise BehindCameraError("point has non-positive depth in camera frame")
    return camera.focal * p_c[..., :2] / z[..., None]


def relative_pose(cam_i: Camera, cam_j: Camera):
    """``(R_ij, t_ij)`` of ``g_j o g_i^-1``, mapping camera-i coordinates to camera j."""
    R_ij = cam_j.R @ cam_i.R.T
    return R_ij, cam_j.trans - R_ij @ cam_i.trans


def fundamental_matrix(cam_i: Camera, cam_j: Camera) -> np.ndarray:
    """F with ``p_j^T F p_i = 0`` for homogeneous projections of one world point."""
    R_ij, t_ij = relative_pose(cam_i, cam_j)
    if np.linalg.norm(t_ij) < 1e-12 * max(1.0, np.linalg.norm(cam_i.trans)):
        raise DegenerateGeometryError("camera centers coincide; F is undefined")
    E = skew(t_ij) @ R_ij
    Kinv_i = np.diag([1.0 / cam_i.focal, 1.0 / cam_i.focal, 1.0])
    Kinv_j = np.diag([1.0 / cam_j.focal, 1.0 / cam_j.focal, 1.0])
    return Kinv_j.T @ E @ Kinv_i


# ------------------------------------------------------------ correspondences

@dataclass
class CorrespondenceSet:
    """Matched points between frames ``i`` and ``j`` in normalized image coordinates."""

    i: int
    j: int
    points_i: np.ndarray
    points_j: np.ndarray

    def __post_init__(self):
        self.i, self.j = int(self.i), int(self.j)
        self.points_i = np.asarray(self.points_i, dtype=float).reshape(-1, 2)
        self.points_j = np.asarray(self.points_j, dtype=float).reshape(-1, 2)
        if len(self.points_i) != len(self.points_j):
            raise ValueError("points_i and points_j differ in length")
        if len(self.points_i) == 0:
            raise ValueError("a correspondence set needs at least one match")
        if not (np.isfinite(self.points_i).all() and np.isfinite(self.points_j).all()):
            raise ValueError("correspondence coordinates must be finite")

    @property
    def pair_index(self):
        return self.i, self.j

    def __len__(self):
        return len(self.points_i)


# ------------------------------------------------------------- torch kernels

def quat_to_rotmat_torch(q: torch.Tensor) -> torch.Tensor:
    q = q / q.norm(dim=-1, keepdim=True)
    w, x, y, z = q.unbind(-1)
    R = torch.stack([
        1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
        2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
        2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y),
    ], dim=-1)
    return R.reshape(q.shape[:-1] + (3, 3))


def fundamental_torch(params_i: torch.Tensor, params_j: torch.Tensor) -> torch.Tensor:
    """Batched, differentiable F from camera 8-vectors ``(..., 8)``."""
    R_i = quat_to_rotmat_torch(params_i[..., 1:5])
    R_j = quat_to_rotmat_torch(params_j[..., 1:5])
    R_ij = R_j @ R_i.transpose(-1, -2)
    t_ij = params_j[..., 5:8] - (R_ij @ params_i[..., 5:8, None])[..., 0]
    tx, ty, tz = t_ij.unbind(-1)
    zero = torch.zeros_like(tx)
    T = torch.stack([zero, -tz, ty, tz, zero, -tx, -ty, tx, zero], dim=-1)
    E = T.reshape(t_ij.shape[:-1] + (3, 3)) @ R_ij
    one = torch.ones_like(tx)
    inv_fi = torch.exp(-params_i[..., 0])
    inv_fj = torch.exp(-params_j[..., 0])
    ki = torch.stack([inv_fi, inv_fi, one], dim=-1)
    kj = torch.stack([inv_fj, inv_fj, one], dim=-1)
    return kj[..., :, None] * E * ki[..., None, :]


def sampson_terms_torch(F: torch.Tensor, pts_i: torch.Tensor, pts_j: torch.Tensor):
    """Unclamped per-correspondence Sampson terms and their validity mask.

    ``F`` is ``(M, 3, 3)`` (one matrix per correspondence) or broadcastable,
    ``pts_*`` are ``(M, 2)``. The numerator is the squared epipolar residual.
    """
    ones = torch.ones_like(pts_i[..., :1])
    xi = torch.cat([pts_i, ones], dim=-1)
    xj = torch.cat([pts_j, ones], dim=-1)
    Fxi = (F @ xi[..., None])[..., 0]
    Ftxj = (F.transpose(-1, -2) @ xj[..., None])[..., 0]
    num = (xj * Fxi).sum(-1) ** 2
    den = Fxi[..., 0] ** 2 + Fxi[..., 1] ** 2 + Ftxj[..., 0] ** 2 + Ftxj[..., 1] ** 2
    valid = den > DENOM_EPS
    safe_den = torch.where(valid, den, torch.ones_like(den))
    terms = torch.where(valid, num / safe_den, torch.zeros_like(num))
    return terms, valid


def robust_clamp(terms: torch.Tensor, epsilon: float) -> torch.Tensor:
    """``min(z, epsilon)`` with zero gradient on clamped entries."""
    if np.isinf(epsilon):
        return terms
    return torch.where(terms < epsilon, terms, torch.full_like(terms, epsilon))


def _check_epsilon(epsilon):
    if not epsilon > 0:
        raise ValueError(f"epsilon must be positive, got {epsilon}")


def _pair_tensors(cam_i: Camera, cam_j: Camera, corr: CorrespondenceSet, requires_grad=False):
    pi = torch.tensor(cam_i.to_vector(), dtype=torch.float64, requires_grad=requires_grad)
    pj = torch.tensor(cam_j.to_vector(), dtype=torch.float64, requires_grad=requires_grad)
    xi = torch.from_numpy(corr.points_i).to(torch.float64)
    xj = torch.from_numpy(corr.points_j).to(torch.float64)
    return pi, pj, xi, xj


def sampson_error(cam_i: Camera, cam_j: Camera, corr: CorrespondenceSet,
                  epsilon: float = DEFAULT_EPSILON, return_skipped: bool = False):
    """Robust Sampson error ``sum_k min(d_k, epsilon)`` of one image pair.

    Correspondences with a vanishing denominator (both points at the
    epipoles) are skipped; their number is returned when ``return_skipped``.
    """
    _check_epsilon(epsilon)
    pi, pj, xi, xj = _pair_tensors(cam_i, cam_j, corr)
    terms, valid = sampson_terms_torch(fundamental_torch(pi, pj), xi, xj)
    err = float(robust_clamp(terms, epsilon).sum())
    skipped = int((~valid).sum())
    if skipped:
        log.debug("sampson_error: skipped %d degenerate correspondences", skipped)
    return (err, skipped) if return_skipped else err


def sampson_gradient(cam_i: Camera, cam_j: Camera, corr: CorrespondenceSet,
                     epsilon: float = DEFAULT_EPSILON):
    """Gradient of :func:`sampson_error` w.r.t. both cameras' 8-vectors.

    Returns ``(grad_i, grad_j)``. Clamped terms contribute nothing.
    """
    _check_epsilon(epsilon)
    pi, pj, xi, xj = _pair_tensors(cam_i, cam_j, corr, requires_grad=True)
    terms, _ = sampson_terms_torch(fundamental_torch(pi, pj), xi, xj)
    total = robust_clamp(terms, epsilon).sum()
    gi, gj = torch.autograd.grad(total, (pi, pj), allow_unused=False)
    return gi.numpy(), gj.numpy()


# ---------------------------------------------------------- stacked matches

@dataclass
class StackedMatches:
    """All correspondences of a scene flattened for batched evaluation.

    ``pairs`` holds the ``(i, j)`` frame indices of every matched pair and
    ``pair_of`` maps each correspondence to its row in ``pairs``; matches of
    one pair are stored contiguously, starting at ``starts[k]``.
    """

    pairs: np.ndarray
    pair_of: np.ndarray
    pts_i: np.ndarray
    pts_j: np.ndarray

    @classmethod
    def from_sets(cls, matches, n_frames: int | None = None) -> "StackedMatches | None":
        matches = list(matches)
        if not matches:
            return None
        for m in matches:
            if n_frames is not None and not (0 <= m.i < n_frames and 0 <= m.j < n_frames):
                raise IndexError(f"pair ({m.i}, {m.j}) references a missing frame (N={n_frames})")
        return cls(
            np.array([[m.i, m.j] for m in matches]),
            np.concatenate([np.full(len(m), k) for k, m in enumerate(matches)]),
            np.concatenate([m.points_i for m in matches]),
            np.concatenate([m.points_j for m in matches]),
        )

    def __len__(self):
        return len(self.pair_of)

    @property
    def starts(self) -> np.ndarray:
        return np.flatnonzero(np.r_[True, np.diff(self.pair_of) != 0])


def total_sampson_torch(params: torch.Tensor, stacked: StackedMatches,
                        epsilon: float = DEFAULT_EPSILON, pixel_scale: float = 1.0) -> torch.Tensor:
    """Sum of robust Sampson errors over every pair of a scene (differentiable).

    ``params`` is the ``(N, 8)`` pose block. With ``pixel_scale`` the image
    coordinates are read as scaled by that factor, so ``epsilon`` is expressed
    in squared pixels of that nominal resolution.
    """
    pairs = torch.from_numpy(stacked.pairs)
    F = fundamental_torch(params[pairs[:, 0]], params[pairs[:, 1]])
    pts_i = torch.from_numpy(stacked.pts_i).to(params.dtype)
    pts_j = torch.from_numpy(stacked.pts_j).to(params.dtype)
    terms, _ = sampson_terms_torch(F[torch.from_numpy(stacked.pair_of)], pts_i, pts_j)
    # scaling image coordinates by s scales every Sampson term by s^2
    terms = terms * float(pixel_scale) ** 2
    return robust_clamp(terms, epsilon).sum()


# closed-form derivatives of R(q) w.r.t. the unit quaternion components
def _drot_dquat(q):
    w, x, y, z = np.moveaxis(q, -1, 0)
    o = np.zeros_like(w)
    dw = [o, -z, y, z, o, -x, -y, x, o]
    dx = [o, y, z, y, -2 * x, -w, z, w, -2 * x]
    dy = [-2 * y, x, w, x, o, z, -w, z, -2 * y]
    dz = [-2 * z, -w, x, w, -2 * z, y, x, y, o]
    J = np.stack([np.stack(d, axis=-1) for d in (dw, dx, dy, dz)], axis=-2)
    return 2.0 * J.reshape(q.shape[:-1] + (4, 3, 3))


def _vee_of_skew_grad(A):
    """Gradient w.r.t. ``v`` of ``<A, skew(v)>``."""
    return np.stack([A[..., 2, 1] - A[..., 1, 2], A[..., 0, 2] - A[..., 2, 0],
                     A[..., 1, 0] - A[..., 0, 1]], axis=-1)


def total_sampson_and_grad(params, stacked: StackedMatches, epsilon: float = DEFAULT_EPSILON,
                           pixel_scale: float = 1.0):
    """Closed-form value and gradient of :func:`total_sampson_torch` (numpy).

    Returns ``(value, grad)`` with ``grad`` of shape ``(N, 8)``. Gradients
    flow through quaternion normalization; clamped or degenerate terms give
    no gradient.
    """
    params = np.asarray(params, dtype=float)
    qn = np.linalg.norm(params[:, 1:5], axis=1, keepdims=True)
    qhat = params[:, 1:5] / qn
    R = quat_to_rotmat(qhat)
    inv_f = np.exp(-params[:, 0])
    ii, jj = stacked.pairs[:, 0], stacked.pairs[:, 1]
    R_ij = R[jj] @ np.swapaxes(R[ii], -1, -2)
    t_ij = params[jj, 5:8] - np.einsum("pab,pb->pa", R_ij, params[ii, 5:8])
    tx, ty, tz = t_ij.T
    z0 = np.zeros_like(tx)
    T = np.stack([z0, -tz, ty, tz, z0, -tx, -ty, tx, z0], axis=-1).reshape(-1, 3, 3)
    E = T @ R_ij
    ki = np.stack([inv_f[ii], inv_f[ii], np.ones_like(tx)], axis=-1)
    kj = np.stack([inv_f[jj], inv_f[jj], np.ones_like(tx)], axis=-1)
    F = kj[:, :, None] * E * ki[:, None, :]

    s2 = float(pixel_scale) ** 2
    Fm = F[stacked.pair_of]
    xi = np.concatenate([stacked.pts_i, np.ones((len(stacked), 1))], axis=1)
    xj = np.concatenate([stacked.pts_j, np.ones((len(stacked), 1))], axis=1)
    a = np.einsum("mab,mb->ma", Fm, xi)
    b = np.einsum("mba,mb->ma", Fm, xj)
    r = (xj * a).sum(1)
    d = a[:, 0] ** 2 + a[:, 1] ** 2 + b[:, 0] ** 2 + b[:, 1] ** 2
    valid = d > DENOM_EPS
    d_safe = np.where(valid, d, 1.0)
    terms = np.where(valid, s2 * r * r / d_safe, 0.0)
    live = valid & (terms < epsilon)
    value = float(np.where(live, terms, np.minimum(terms, epsilon)).sum())

    # d term / dF = s2 * (2 r/d xj xi^T - r^2/d^2 (2 (a*m) xi^T + 2 xj (b*m)^T)), m = (1, 1, 0)
    c1 = np.where(live, s2 * 2.0 * r / d_safe, 0.0)
    c2 = np.where(live, s2 * 2.0 * r * r / d_safe ** 2, 0.0)
    am = a * np.array([1.0, 1.0, 0.0])
    bm = b * np.array([1.0, 1.0, 0.0])
    u = c1[:, None] * xj - c2[:, None] * am
    per = u[:, :, None] * xi[:, None, :] - c2[:, None, None] * xj[:, :, None] * bm[:, None, :]
    G = np.add.reduceat(per.reshape(len(stacked), 9), stacked.starts, axis=0).reshape(-1, 3, 3)
    present = stacked.pair_of[stacked.starts]
    G_full = np.zeros_like(F)
    G_full[present] = G
    G = G_full

    grad = np.zeros_like(params)
    GF = G * F
    np.add.at(grad[:, 0], ii, -GF[:, :, :2].sum(axis=(1, 2)))
    np.add.at(grad[:, 0], jj, -GF[:, :2, :].sum(axis=(1, 2)))
    GE = kj[:, :, None] * G * ki[:, None, :]
    g_tij = _vee_of_skew_grad(GE @ np.swapaxes(R_ij, -1, -2))
    g_Rij = np.swapaxes(T, -1, -2) @ GE - g_tij[:, :, None] * params[ii, None, 5:8]
    np.add.at(grad[:, 5:8], jj, g_tij)
    np.add.at(grad[:, 5:8], ii, -np.einsum("pba,pb->pa", R_ij, g_tij))
    g_R = np.zeros((len(params), 3, 3))
    np.add.at(g_R, jj, g_Rij @ R[ii])
    np.add.at(g_R, ii, np.swapaxes(g_Rij, -1, -2) @ R[jj])
    g_qhat = np.einsum("nab,nkab->nk", g_R, _drot_dquat(qhat))
    g_q = (g_qhat - qhat * (qhat * g_qhat).sum(1, keepdims=True)) / qn
    grad[:, 1:5] = g_q
    return value, grad


def scene_sampson_error(params, matches, epsilon: float = DEFAULT_EPSILON,
                        pixel_scale: float = 1.0) -> float:
    """Numpy convenience wrapper of :func:`total_sampson_torch`."""
    params = np.asarray(params, dtype=float)
    stacked = StackedMatches.from_sets(matches, len(params))
    if stacked is None:
        return 0.0
    return total_sampson_and_grad(params, stacked, epsilon, pixel_scale)[0]


# ----------------------------------------------------------------- pose tuple

class PoseTuple:
    """Ordered cameras of one scene, backed by an ``(N, 8)`` parameter block."""

    def __init__(self, params):
        params = np.array(params, dtype=float)
        if params.ndim != 2 or params.shape[1] != PARAM_DIM:
            raise ValueError(f"pose block must have shape (N, 8), got {params.shape}")
        self.params = params

    @classmethod
    def from_cameras(cls, cameras) -> "PoseTuple":
        return cls(np.stack([c.to_vector() for c in cameras]))

    @property
    def cameras(self) -> list[Camera]:
        return [Camera.from_vector(v) for v in self.params]

    def __len__(self):
        return len(self.params)

    def __getitem__(self, k) -> Camera:
        return Camera.from_vector(self.params[k])

    def __repr__(self):
        return f"PoseTuple(N={len(self)})"

    @property
    def log_focals(self):
        return self.params[:, 0]

    @property
    def quats(self):
        return self.params[:, 1:5]

    @property
    def trans(self):
        return self.params[:, 5:8]

    @property
    def rotations(self) -> np.ndarray:
        return quat_to_rotmat(self.quats)

    @property
    def centers(self) -> np.ndarray:
        return -np.einsum("nji,nj->ni", self.rotations, self.trans)

    def normalized(self) -> "PoseTuple":
        """Copy with unit quaternions (``w >= 0``)."""
        p = self.params.copy()
        p[:, 1:5] = quat_canonical(p[:, 1:5])
        return PoseTuple(p)

    def is_valid(self) -> bool:
        q_ok = np.allclose(np.linalg.norm(self.quats, axis=1), 1.0, atol=1e-9)
        return bool(q_ok and np.isfinite(self.params).all())

    def subset(self, idx) -> "PoseTuple":
        return PoseTuple(self.params[np.asarray(idx)])
