"""Self-supervised and supervised training objectives."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import difftensor as dt
from .difftensor import Tensor
from .network import DepthPrediction, NetConfig, forward
from .scene_synth import MultiViewSample

SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2


@dataclass(frozen=True)
class LossWeights:
    gamma_photo: float = 5.0
    gamma_ssim: float = 1.0
    gamma_smooth: float = 0.01
    # -mean(log C) term that keeps the confidence masks from collapsing to 0
    mask_reg: float = 0.01
    average_views: bool = True

    def __post_init__(self):
        if min(self.gamma_photo, self.gamma_ssim, self.gamma_smooth, self.mask_reg) < 0:
            raise ValueError("loss weights must be non-negative")


def _box3(x: Tensor) -> Tensor:
    """3x3 mean filter over the last two axes with reflection at the border."""
    H, W = x.shape[-2:]
    p = dt.pad(x, 1, (x.ndim - 2, x.ndim - 1), mode="reflect")
    acc = None
    for dy in range(3):
        for dx in range(3):
            s = p[..., dy:dy + H, dx:dx + W]
            acc = s if acc is None else acc + s
    return acc * (1.0 / 9.0)


def ssim_map(a, b) -> Tensor:
    """Per-pixel SSIM of two (C,H,W) images, averaged over channels."""
    a = a if isinstance(a, Tensor) else Tensor(np.asarray(a))
    b = b if isinstance(b, Tensor) else Tensor(np.asarray(b), dtype=a.dtype)
    if a.shape != b.shape:
        raise dt.DimensionError(f"SSIM inputs differ in shape: {a.shape} vs {b.shape}")
    mu_a, mu_b = _box3(a), _box3(b)
    mu_ab = mu_a * mu_b
    mu_a2, mu_b2 = dt.square(mu_a), dt.square(mu_b)
    var_a = _box3(dt.square(a)) - mu_a2
    var_b = _box3(dt.square(b)) - mu_b2
    cov = _box3(a * b) - mu_ab
    num = (2 * mu_ab + SSIM_C1) * (2 * cov + SSIM_C2)
    den = (mu_a2 + mu_b2 + SSIM_C1) * (var_a + var_b + SSIM_C2)
    return (num / den).mean(axis=0)


def reconstruction_loss(ref_image, warped: list[Tensor], proj_masks: np.ndarray, conf_masks: Tensor | None,
                        weights: LossWeights) -> Tensor:
    """Confidence-weighted photometric L1 plus SSIM dissimilarity over neighbours.

    The learned confidence gates only the photometric term; the projection
    mask gates both. Norms are means over pixels (and channels).
    """
    n = len(warped)
    if len(proj_masks) != n or (conf_masks is not None and conf_masks.shape[0] != n):
        raise dt.DimensionError(f"{n} warped views but {len(proj_masks)} projection masks"
                                + ("" if conf_masks is None else f" / {conf_masks.shape[0]} confidence masks"))
    ref = np.asarray(ref_image.data if isinstance(ref_image, Tensor) else ref_image)
    total = None
    for i, w in enumerate(warped):
        ref_i = ref.astype(w.dtype)
        proj = proj_masks[i].astype(w.dtype)
        weight = proj if conf_masks is None else conf_masks[i] * proj
        photo = (dt.tabs(w - ref_i) * weight).mean()
        ssim = ssim_map(ref_i * proj, w * proj)
        term = weights.gamma_photo * photo + weights.gamma_ssim * (1.0 - ssim).mean()
        total = term if total is None else total + term
    if weights.average_views:
        total = total * (1.0 / n)
    return total


def recon_loss(pred: DepthPrediction, sample: MultiViewSample, weights: LossWeights) -> Tensor:
    if len(pred.warped) != sample.num_neighbors:
        raise dt.DimensionError(f"prediction has {len(pred.warped)} neighbours, sample {sample.num_neighbors}")
    ref_small, _ = sample.small_images()
    return reconstruction_loss(ref_small, pred.warped, pred.proj_masks, pred.conf_masks, weights)


def smooth_loss(depth: Tensor, image) -> Tensor:
    """Edge-aware first-order smoothness of ``depth`` (H,W) given ``image`` (C,H,W).

    Forward differences; each direction is averaged over the pixels where its
    difference exists and the two directions are added.
    """
    img = np.asarray(image.data if isinstance(image, Tensor) else image, dtype=np.float64)
    if img.shape[-2:] != depth.shape:
        raise dt.DimensionError(f"image {img.shape} and depth {depth.shape} resolutions differ")
    H, W = depth.shape
    total = Tensor(np.zeros((), depth.dtype))
    if W > 1:
        wx = np.exp(-np.sqrt((np.diff(img, axis=2) ** 2).sum(axis=0))).astype(depth.dtype)
        total = total + (dt.tabs(depth[:, 1:] - depth[:, :-1]) * wx).mean()
    if H > 1:
        wy = np.exp(-np.sqrt((np.diff(img, axis=1) ** 2).sum(axis=0))).astype(depth.dtype)
        total = total + (dt.tabs(depth[1:, :] - depth[:-1, :]) * wy).mean()
    return total


def mask_regularizer(conf_masks: Tensor | None) -> Tensor:
    if conf_masks is None:
        return Tensor(np.zeros((), np.float32))
    return -dt.log(conf_masks).mean()


def self_loss_from_prediction(pred: DepthPrediction, sample: MultiViewSample, weights: LossWeights) -> Tensor:
    ref_small, _ = sample.small_images()
    return recon_loss(pred, sample, weights) + weights.gamma_smooth * smooth_loss(pred.depth, ref_small)


def self_loss(params, sample: MultiViewSample, cfg: NetConfig, weights: LossWeights) -> tuple[Tensor, DepthPrediction]:
    """Reconstruction plus weighted smoothness loss; returns (loss, prediction)."""
    pred = forward(params, sample, cfg)
    return self_loss_from_prediction(pred, sample, weights), pred


def depth_l1(depth: Tensor, gt_depth: np.ndarray) -> Tensor:
    """Mean absolute depth error over pixels with valid (>0) ground truth."""
    gt = np.asarray(gt_depth)
    if gt.shape != depth.shape:
        raise dt.DimensionError(f"depth {depth.shape} and ground truth {gt.shape} differ")
    valid = gt > 0
    count = int(valid.sum())
    if count == 0:
        return Tensor(np.zeros((), depth.dtype)) + depth.sum() * 0.0
    diff = dt.tabs(depth - gt.astype(depth.dtype)) * valid.astype(depth.dtype)
    return diff.sum() * (1.0 / count)


def sup_loss(params, sample: MultiViewSample, cfg: NetConfig) -> tuple[Tensor, DepthPrediction]:
    if sample.gt_depth is None:
        raise ValueError("supervised loss needs a sample with ground-truth depth")
    pred = forward(params, sample, cfg)
    return depth_l1(pred.depth, sample.gt_depth), pred


class LossLog:
    """In-memory loss history with an append-only CSV mirror."""

    def __init__(self, path=None):
        self.rows: list[tuple[int, str, float]] = []
        self.path = Path(path) if path is not None else None
        if self.path is not None and not self.path.exists():
            self.path.parent.mkdir(parents=True, exist_ok=True)
            with open(self.path, "w", newline="") as f:
                csv.writer(f).writerow(["step", "loss", "value"])

    def append(self, step: int, name: str, value: float) -> None:
        self.rows.append((int(step), name, float(value)))
        if self.path is not None:
            with open(self.path, "a", newline="") as f:
                csv.writer(f).writerow([int(step), name, repr(float(value))])

    def values(self, name: str) -> list[float]:
        return [v for _, n, v in self.rows if n == name]
