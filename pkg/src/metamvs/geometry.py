"""Pinhole cameras, plane-sweep homographies and depth-based warping."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import difftensor as dt
from .difftensor import Tensor


@dataclass(frozen=True)
class Camera:
    """Pinhole camera with world-to-camera pose ``x_cam = R @ X + t``."""

    K: np.ndarray
    R: np.ndarray
    t: np.ndarray
    width: int
    height: int

    def __post_init__(self):
        object.__setattr__(self, "K", np.asarray(self.K, dtype=np.float64).reshape(3, 3))
        object.__setattr__(self, "R", np.asarray(self.R, dtype=np.float64).reshape(3, 3))
        object.__setattr__(self, "t", np.asarray(self.t, dtype=np.float64).reshape(3))

    def validate(self, tol: float = 1e-6) -> None:
        K, R = self.K, self.R
        if abs(K[1, 0]) > 0 or abs(K[2, 0]) > 0 or abs(K[2, 1]) > 0 or K[0, 0] <= 0 or K[1, 1] <= 0:
            raise ValueError("intrinsics must be upper triangular with positive focal lengths")
        if np.abs(R.T @ R - np.eye(3)).max() > tol or np.linalg.det(R) < 0:
            raise ValueError("rotation must be orthonormal with det +1")

    @property
    def center(self) -> np.ndarray:
        return -self.R.T @ self.t

    def scaled(self, factor: float) -> "Camera":
        """Camera for an image resampled by ``factor`` (pixel centres at integers)."""
        K = self.K.copy()
        K[0, 0] *= factor
        K[0, 1] *= factor
        K[1, 1] *= factor
        K[0, 2] = (K[0, 2] + 0.5) * factor - 0.5
        K[1, 2] = (K[1, 2] + 0.5) * factor - 0.5
        return Camera(K, self.R, self.t, int(round(self.width * factor)), int(round(self.height * factor)))

    def transformed(self, Rw: np.ndarray, tw: np.ndarray) -> "Camera":
        """Same camera after the world is moved by ``X -> Rw @ X + tw``."""
        R = self.R @ Rw.T
        return Camera(self.K, R, self.t - R @ tw, self.width, self.height)


def look_at(center, target, up=(0.0, -1.0, 0.0)) -> tuple[np.ndarray, np.ndarray]:
    """World-to-camera (R, t) for a camera at ``center`` looking at ``target``.

    Camera axes follow the usual vision convention: x right, y down, z forward.
    """
    center = np.asarray(center, dtype=np.float64)
    z = np.asarray(target, dtype=np.float64) - center
    z /= np.linalg.norm(z)
    x = np.cross(np.asarray(up, dtype=np.float64), z)
    x = -x / np.linalg.norm(x)
    y = np.cross(z, x)
    R = np.stack([x, y, z])
    return R, -R @ center


def project(cam: Camera, X) -> tuple[np.ndarray, np.ndarray]:
    """Project world points (..., 3) to pixels (..., 2) and z-depths (...)."""
    X = np.asarray(X, dtype=np.float64)
    xc = X @ cam.R.T + cam.t
    x = xc @ cam.K.T
    depth = x[..., 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        pix = x[..., :2] / depth[..., None]
    return pix, depth


def backproject(cam: Camera, pixel, depth) -> np.ndarray:
    """Inverse of :func:`project`: world points for pixels at given z-depths."""
    pixel = np.asarray(pixel, dtype=np.float64)
    depth = np.asarray(depth, dtype=np.float64)
    if np.any(depth <= 0):
        raise ValueError("backproject requires positive depth")
    homog = np.concatenate([pixel, np.ones(pixel.shape[:-1] + (1,))], axis=-1)
    rays = homog @ np.linalg.inv(cam.K).T
    xc = rays * depth[..., None]
    return (xc - cam.t) @ cam.R


def pixel_grid(height: int, width: int) -> np.ndarray:
    """(2, H, W) array of integer pixel coordinates, x first."""
    ys, xs = np.mgrid[0:height, 0:width].astype(np.float64)
    return np.stack([xs, ys])


def relative_pose(ref: Camera, src: Camera) -> tuple[np.ndarray, np.ndarray]:
    """(R, t) mapping reference-camera coordinates to source-camera coordinates."""
    R_rel = src.R @ ref.R.T
    return R_rel, src.t - R_rel @ ref.t


def plane_sweep_homography(ref: Camera, src: Camera, depth: float) -> np.ndarray:
    """Homography from reference to source pixels for the plane z_ref = depth."""
    if depth <= 0:
        raise ValueError("plane depth must be positive")
    if abs(np.linalg.det(ref.K)) < 1e-12 or abs(np.linalg.det(src.K)) < 1e-12:
        raise np.linalg.LinAlgError("singular intrinsics")
    R_rel, t_rel = relative_pose(ref, src)
    n = np.array([0.0, 0.0, 1.0])
    H = src.K @ (R_rel + np.outer(t_rel, n) / depth) @ np.linalg.inv(ref.K)
    if abs(H[2, 2]) > 1e-15:
        H = H / H[2, 2]
    return H


def apply_homography(H: np.ndarray, pixels: np.ndarray) -> np.ndarray:
    """Map (2, ...) pixel coordinates through ``H``; non-positive w gives NaN."""
    x, y = pixels[0], pixels[1]
    u = H[0, 0] * x + H[0, 1] * y + H[0, 2]
    v = H[1, 0] * x + H[1, 1] * y + H[1, 2]
    w = H[2, 0] * x + H[2, 1] * y + H[2, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.stack([u / w, v / w])
    out[:, ~(w > 0)] = np.nan
    return out


def warp_with_depth(src_img: Tensor, ref_cam: Camera, src_cam: Camera, depth_map) -> tuple[Tensor, np.ndarray]:
    """Warp ``src_img`` (C,H,W) into the reference view through ``depth_map``.

    Returns the warped image and the out-of-image projection mask (float 0/1),
    which is zero where the source sample falls outside the image or the
    point lies behind the source camera. Differentiable in both the image and
    the depth map.
    """
    depth_map = depth_map if isinstance(depth_map, Tensor) else Tensor(np.asarray(depth_map))
    H, W = depth_map.shape
    rays = np.einsum("ij,jhw->ihw", np.linalg.inv(ref_cam.K), np.concatenate(
        [pixel_grid(H, W), np.ones((1, H, W))]))
    R_rel, t_rel = relative_pose(ref_cam, src_cam)
    # source homogeneous pixel = a * depth + b, with a and b constant per pixel
    a = np.einsum("ij,jhw->ihw", src_cam.K @ R_rel, rays).astype(depth_map.dtype)
    b = (src_cam.K @ t_rel).astype(depth_map.dtype)
    hx = depth_map * a[0] + b[0]
    hy = depth_map * a[1] + b[1]
    hz = depth_map * a[2] + b[2]
    in_front = hz.data > 1e-6
    hz_safe = dt.where(in_front, hz, 1.0)
    u = dt.where(in_front, hx / hz_safe, -1.0)
    v = dt.where(in_front, hy / hz_safe, -1.0)
    warped, valid = dt.bilinear_sample(src_img, dt.stack([u, v]))
    return warped, valid * in_front


def warp_feature_volume(src_feat: Tensor, ref_cam: Camera, src_cam: Camera, depth_values) -> Tensor:
    """Plane-sweep ``src_feat`` (C,H,W) into the reference view: (C,D,H,W).

    Samples falling outside the source image are zero.
    """
    depth_values = np.asarray(depth_values, dtype=np.float64)
    if depth_values.size == 0:
        raise ValueError("depth_values must not be empty")
    if np.any(depth_values <= 0) or np.any(np.diff(depth_values) <= 0):
        raise ValueError("depth_values must be positive and strictly increasing")
    C, H, W = src_feat.shape
    grid = pixel_grid(H, W)
    coords = np.stack([apply_homography(plane_sweep_homography(ref_cam, src_cam, d), grid)
                       for d in depth_values], axis=1)  # (2, D, H, W)
    D = len(depth_values)
    sampled, _ = dt.bilinear_sample(src_feat, coords.reshape(2, D * H, W).astype(src_feat.dtype))
    return sampled.reshape(C, D, H, W)


def depth_hypotheses(d_min: float, d_max: float, count: int, inverse: bool = False) -> np.ndarray:
    """``count`` depth planes over [d_min, d_max], uniform in depth or inverse depth."""
    if count == 1:
        return np.array([0.5 * (d_min + d_max)])
    if inverse:
        return np.sort(1.0 / np.linspace(1.0 / d_min, 1.0 / d_max, count))
    return np.linspace(d_min, d_max, count)
