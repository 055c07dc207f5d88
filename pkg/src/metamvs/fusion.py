"""Depth-map filtering, geometric consistency and point-cloud fusion."""

from __future__ import annotations

import re
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .geometry import Camera, backproject, pixel_grid, project


@dataclass
class PointCloud:
    points: np.ndarray                  # (M, 3)
    colors: np.ndarray                  # (M, 3) in [0, 1]
    support: np.ndarray | None = None   # (M,) number of consistent neighbour views

    def __post_init__(self):
        self.points = np.asarray(self.points).reshape(-1, 3)
        self.colors = np.asarray(self.colors, dtype=np.float64).reshape(-1, 3)
        if len(self.colors) != len(self.points):
            raise ValueError(f"{len(self.points)} points but {len(self.colors)} colors")
        if self.support is not None:
            self.support = np.asarray(self.support, dtype=np.int64).reshape(-1)
            if len(self.support) != len(self.points):
                raise ValueError("support length differs from point count")

    def __len__(self) -> int:
        return len(self.points)

    @classmethod
    def empty(cls) -> "PointCloud":
        return cls(np.zeros((0, 3)), np.zeros((0, 3)), np.zeros(0, np.int64))


@dataclass
class FusionView:
    depth: np.ndarray                 # (H, W), 0 = invalid
    cam: Camera                       # camera at depth-map resolution
    image: np.ndarray                 # (3, H, W) colors at depth-map resolution
    prob: np.ndarray | None = None    # (H, W) probability map
    conf: np.ndarray | None = None    # (H, W) mean learned confidence, optional filter


@dataclass(frozen=True)
class FusionConfig:
    reproj_px: float = 1.0
    rel_depth: float = 0.01
    prob_threshold: float = 0.8
    min_views: int = 2
    num_neighbors: int | None = None   # nearest views by viewing direction; None = all
    conf_threshold: float | None = None


def confidence_filter(depth: np.ndarray, prob: np.ndarray, threshold: float) -> np.ndarray:
    """Zero out depths whose probability is not strictly above ``threshold``."""
    if not 0.0 <= threshold <= 1.0:
        raise ValueError(f"threshold must be in [0, 1], got {threshold}")
    depth = np.asarray(depth)
    return np.where(np.asarray(prob) > threshold, depth, 0.0).astype(depth.dtype)


@dataclass
class Consistency:
    consistent: np.ndarray    # (H, W) bool
    depth_reproj: np.ndarray  # (H, W) depth in the reference view of the matched source point
    points_src: np.ndarray    # (H, W, 3) matched source surface points
    src_index: np.ndarray     # (H, W) flat index of the matched source pixel, -1 if none


def consistency_check(depth_ref: np.ndarray, cam_ref: Camera, depth_src: np.ndarray, cam_src: Camera,
                      reproj_px: float = 1.0, rel_depth: float = 0.01) -> Consistency:
    """Forward-backward reprojection test of every reference pixel against one source view.

    A reference pixel p with depth d is lifted to 3D and projected into the
    source view; the source depth is read at the nearest pixel q, lifted from
    there and projected back. p is consistent when the round trip lands within
    ``reproj_px`` pixels of p and its depth differs from d by less than
    ``rel_depth`` relative.
    """
    depth_ref = np.asarray(depth_ref, dtype=np.float64)
    depth_src = np.asarray(depth_src, dtype=np.float64)
    H, W = depth_ref.shape
    Hs, Ws = depth_src.shape
    grid = pixel_grid(H, W).transpose(1, 2, 0)
    valid = depth_ref > 0
    consistent = np.zeros((H, W), bool)
    depth_reproj = np.zeros((H, W))
    points_src = np.zeros((H, W, 3))
    src_index = np.full((H, W), -1, np.int64)
    if not valid.any():
        return Consistency(consistent, depth_reproj, points_src, src_index)

    p = grid[valid]
    X = backproject(cam_ref, p, depth_ref[valid])
    q, zq = project(cam_src, X)
    finite = np.isfinite(q).all(axis=1)
    qi = np.full(q.shape, -1, np.int64)
    qi[finite] = np.round(np.clip(q[finite], -1, 1e9)).astype(np.int64)
    inside = (zq > 0) & (qi[:, 0] >= 0) & (qi[:, 0] < Ws) & (qi[:, 1] >= 0) & (qi[:, 1] < Hs)
    d_src = np.zeros(len(p))
    d_src[inside] = depth_src[qi[inside, 1], qi[inside, 0]]
    ok = inside & (d_src > 0)
    Xs = np.zeros_like(X)
    Xs[ok] = backproject(cam_src, qi[ok].astype(np.float64), d_src[ok])
    p2, d2 = project(cam_ref, Xs[ok])
    err = np.full(len(p), np.inf)
    rel = np.full(len(p), np.inf)
    err[ok] = np.linalg.norm(p2 - p[ok], axis=1)
    rel[ok] = np.abs(d2 - depth_ref[valid][ok]) / depth_ref[valid][ok]
    good = ok & (err < reproj_px) & (rel < rel_depth)

    consistent[valid] = good
    dr = np.zeros(len(p))
    dr[ok] = d2
    depth_reproj[valid] = dr
    points_src[valid] = Xs
    idx = np.full(len(p), -1, np.int64)
    idx[ok] = qi[ok, 1] * Ws + qi[ok, 0]
    src_index[valid] = idx
    return Consistency(consistent, depth_reproj, points_src, src_index)


def _view_key(v: FusionView) -> tuple:
    return tuple(np.round(np.concatenate([v.cam.center, v.cam.R.ravel()]), 12))


def _neighbors(views: list[FusionView], i: int, count: int | None) -> list[int]:
    others = [j for j in range(len(views)) if j != i]
    if count is None or count >= len(others):
        return others
    axis = views[i].cam.R[2]
    ang = [np.arccos(np.clip(axis @ views[j].cam.R[2], -1, 1)) for j in others]
    return [others[j] for j in np.argsort(ang, kind="stable")[:count]]


def fuse(views: list[FusionView], cfg: FusionConfig = FusionConfig()) -> PointCloud:
    """Fuse per-view depth maps into one point cloud.

    Views are processed in a canonical order (sorted by camera pose) so the
    result does not depend on the order they are passed in. Each retained
    pixel's point is the mean of its own 3D point and those of its consistent
    neighbours; the matched neighbour pixels are then consumed so the same
    surface point is not emitted twice.
    """
    if len(views) < 2:
        raise ValueError("fusion needs at least two views")
    views = sorted(views, key=_view_key)
    depths = []
    for v in views:
        d = np.asarray(v.depth, dtype=np.float64)
        if v.prob is not None:
            d = confidence_filter(d, v.prob, cfg.prob_threshold)
        if cfg.conf_threshold is not None and v.conf is not None:
            d = np.where(np.asarray(v.conf) > cfg.conf_threshold, d, 0.0)
        depths.append(d)
    consumed = [np.zeros(d.shape, bool) for d in depths]
    pts, cols, sup = [], [], []
    for i, v in enumerate(views):
        H, W = depths[i].shape
        nbrs = _neighbors(views, i, cfg.num_neighbors)
        checks = [consistency_check(depths[i], v.cam, depths[j], views[j].cam, cfg.reproj_px, cfg.rel_depth)
                  for j in nbrs]
        count = np.zeros((H, W), np.int64)
        acc = np.zeros((H, W, 3))
        for c in checks:
            count += c.consistent
            acc += np.where(c.consistent[..., None], c.points_src, 0.0)
        keep = (depths[i] > 0) & ~consumed[i] & (count >= cfg.min_views)
        if not keep.any():
            continue
        grid = pixel_grid(H, W).transpose(1, 2, 0)
        own = backproject(v.cam, grid[keep], depths[i][keep])
        pts.append((own + acc[keep]) / (1 + count[keep])[:, None])
        cols.append(np.asarray(v.image)[:, keep].T)
        sup.append(count[keep])
        for j, c in zip(nbrs, checks):
            hit = keep & c.consistent
            consumed[j].ravel()[c.src_index[hit]] = True
    if not pts:
        warnings.warn("fusion produced an empty point cloud", RuntimeWarning, stacklevel=2)
        return PointCloud.empty()
    return PointCloud(np.concatenate(pts), np.clip(np.concatenate(cols), 0, 1), np.concatenate(sup))


# ---------------------------------------------------------------------------
# PLY
# ---------------------------------------------------------------------------

_PLY_DTYPE = np.dtype([("x", "<f4"), ("y", "<f4"), ("z", "<f4"), ("red", "u1"), ("green", "u1"), ("blue", "u1")])


def write_ply(cloud: PointCloud, path) -> None:
    """Binary little-endian PLY with float32 xyz and uint8 rgb."""
    n = len(cloud)
    rec = np.empty(n, dtype=_PLY_DTYPE)
    for k, name in enumerate("xyz"):
        rec[name] = cloud.points[:, k]
    rgb = np.clip(np.round(cloud.colors * 255.0), 0, 255).astype(np.uint8)
    for k, name in enumerate(("red", "green", "blue")):
        rec[name] = rgb[:, k]
    header = ("ply\nformat binary_little_endian 1.0\n"
              f"element vertex {n}\n"
              "property float x\nproperty float y\nproperty float z\n"
              "property uchar red\nproperty uchar green\nproperty uchar blue\n"
              "end_header\n")
    with open(path, "wb") as f:
        f.write(header.encode("ascii"))
        f.write(rec.tobytes())


def read_ply(path) -> PointCloud:
    blob = Path(path).read_bytes()
    end = blob.find(b"end_header\n")
    if not blob.startswith(b"ply\n") or end < 0:
        raise ValueError(f"{path}: malformed PLY header")
    header = blob[:end].decode("ascii", errors="replace")
    if "format binary_little_endian 1.0" not in header:
        raise ValueError(f"{path}: only binary little-endian PLY is supported")
    m = re.search(r"element vertex (\d+)", header)
    if not m:
        raise ValueError(f"{path}: PLY header lacks a vertex count")
    props = re.findall(r"property (\w+) (\w+)", header)
    if props != [("float", "x"), ("float", "y"), ("float", "z"),
                 ("uchar", "red"), ("uchar", "green"), ("uchar", "blue")]:
        raise ValueError(f"{path}: unexpected PLY vertex properties {props}")
    n = int(m.group(1))
    payload = blob[end + len(b"end_header\n"):]
    if len(payload) < n * _PLY_DTYPE.itemsize:
        raise ValueError(f"{path}: truncated PLY payload")
    rec = np.frombuffer(payload, dtype=_PLY_DTYPE, count=n)
    points = np.stack([rec["x"], rec["y"], rec["z"]], axis=1)
    colors = np.stack([rec["red"], rec["green"], rec["blue"]], axis=1) / 255.0
    return PointCloud(points, colors)
