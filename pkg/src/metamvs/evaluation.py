"""Point-cloud accuracy, completeness and precision / recall / F-score."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from .fusion import PointCloud, read_ply
from .geometry import pixel_grid


def _points(cloud) -> np.ndarray:
    pts = cloud.points if isinstance(cloud, PointCloud) else np.asarray(cloud)
    pts = np.asarray(pts, dtype=np.float64).reshape(-1, 3)
    if len(pts) == 0:
        raise ValueError("point cloud is empty")
    return pts


def nn_distances(query, ref) -> np.ndarray:
    """Distance from every query point to its nearest reference point.

    The tree only picks the neighbour; the distance itself is recomputed with
    the same expression a brute-force search uses, so both agree bit for bit.
    """
    q, r = _points(query), _points(ref)
    _, idx = cKDTree(r).query(q, k=1)
    d = q - r[idx]
    return np.sqrt(np.sum(d * d, axis=1))


def nn_distances_brute(query, ref) -> np.ndarray:
    q, r = _points(query), _points(ref)
    out = np.empty(len(q))
    for i, p in enumerate(q):
        d = p - r
        out[i] = np.sqrt(np.sum(d * d, axis=1)).min()
    return out


def _mean_inliers(dist: np.ndarray, max_dist: float) -> float:
    inl = dist[dist <= max_dist]
    # with every point rejected the metric saturates at the outlier bound
    return float(inl.mean()) if len(inl) else float(max_dist)


def accuracy(est, gt, max_dist: float = np.inf) -> float:
    """Mean distance from estimated points to the ground truth, outliers excluded."""
    return _mean_inliers(nn_distances(est, gt), max_dist)


def completeness(est, gt, max_dist: float = np.inf) -> float:
    """Mean distance from ground-truth points to the estimate, outliers excluded."""
    return _mean_inliers(nn_distances(gt, est), max_dist)


def _prf(d_est: np.ndarray, d_gt: np.ndarray, tau: float) -> tuple[float, float, float]:
    p = 100.0 * float(np.mean(d_est < tau))
    r = 100.0 * float(np.mean(d_gt < tau))
    f = 2 * p * r / (p + r) if p + r > 0 else 0.0
    return p, r, f


def precision_recall_f(est, gt, tau: float) -> tuple[float, float, float]:
    """Percent of estimated points within ``tau`` of the ground truth, percent of
    ground-truth points within ``tau`` of the estimate, and their harmonic mean."""
    if not tau > 0:
        raise ValueError("tau must be positive")
    return _prf(nn_distances(est, gt), nn_distances(gt, est), tau)


@dataclass
class ThresholdScore:
    tau: float
    precision: float
    recall: float
    f_score: float


@dataclass
class EvalReport:
    accuracy: float
    completeness: float
    overall: float
    max_dist: float
    n_est: int
    n_gt: int
    est_outliers: int
    gt_outliers: int
    scores: list[ThresholdScore] = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=1, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        obj = json.loads(text)
        obj["scores"] = [ThresholdScore(**s) for s in obj["scores"]]
        return cls(**obj)

    def table(self) -> str:
        cols = ["acc.", "comp.", "over."]
        vals = [self.accuracy, self.completeness, self.overall]
        for s in self.scores:
            cols += [f"prec@{s.tau:g}", f"rec@{s.tau:g}", f"F@{s.tau:g}"]
            vals += [s.precision, s.recall, s.f_score]
        width = max(12, max(len(c) for c in cols) + 2)
        head = "".join(c.rjust(width) for c in cols)
        row = "".join(f"{v:.4f}".rjust(width) for v in vals)
        return head + "\n" + row + "\n"


def sample_scene_surface(scene, density: int = 2, scale: float = 0.25) -> PointCloud:
    """Ground-truth points by ray casting every camera of a synthetic scene.

    Rays are cast on a grid ``density`` times finer per axis than the depth
    maps (``scale`` times the image size), i.e. ``density**2`` times the point
    density fusion can produce.
    """
    from .scene_synth import cast_rays  # local: keeps evaluation usable without the renderer

    pts = []
    for cam in scene.cameras:
        small = cam.scaled(scale)
        H, W = small.height * density, small.width * density
        fine = small.scaled(density)
        grid = pixel_grid(H, W).reshape(2, -1).T
        _, X, which = cast_rays(scene, fine, grid)
        pts.append(X[which >= 0])
    pts = np.concatenate(pts)
    return PointCloud(pts, np.full(pts.shape, 0.5))


def evaluate_scene(est, gt, thresholds=(0.05, 0.1), max_dist: float = np.inf) -> EvalReport:
    """Full report for an estimated cloud (PointCloud or PLY path) against a
    ground-truth cloud, PLY path, or synthetic scene description."""
    if isinstance(est, (str, Path)):
        est = read_ply(est)
    if isinstance(gt, (str, Path)):
        gt = read_ply(gt)
    elif not isinstance(gt, PointCloud) and hasattr(gt, "cameras"):
        gt = sample_scene_surface(gt)
    d_est = nn_distances(est, gt)
    d_gt = nn_distances(gt, est)
    acc = _mean_inliers(d_est, max_dist)
    comp = _mean_inliers(d_gt, max_dist)
    scores = []
    for tau in thresholds:
        if not tau > 0:
            raise ValueError("thresholds must be positive")
        scores.append(ThresholdScore(float(tau), *_prf(d_est, d_gt, tau)))
    return EvalReport(acc, comp, (acc + comp) / 2, float(max_dist), len(d_est), len(d_gt),
                      int(np.sum(d_est > max_dist)), int(np.sum(d_gt > max_dist)), scores)
