"""Plane-sweep depth network with a learned per-neighbour confidence mask.

Pipeline: shared 2D feature extractor (x1/4 resolution) -> plane-sweep warping
of neighbour features -> per-channel variance cost volume -> 3D encoder-decoder
-> softmax over depth -> soft-argmin depth. Neighbour images are then warped
with the predicted depth, and their photometric error maps plus out-of-image
masks feed a small CNN that predicts one confidence mask per neighbour.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import difftensor as dt
from .difftensor import ParamSet, Tensor
from .geometry import depth_hypotheses, warp_feature_volume, warp_with_depth
from .scene_synth import MultiViewSample

FEAT, REG, MASK = "feat.", "reg.", "mask."


@dataclass(frozen=True)
class NetConfig:
    feat_channels: int = 8
    feat_hidden: int = 8
    reg_base: int = 8
    reg_levels: int = 2
    mask_hidden: int = 8
    num_depths: int = 16
    inverse_depth: bool = False
    use_mask: bool = True


@dataclass
class DepthPrediction:
    depth: Tensor                 # (H', W')
    prob: np.ndarray              # (H', W') 4-bin probability around the argmax
    prob_volume: Tensor           # (D, H', W')
    depth_values: np.ndarray      # (D,)
    warped: list[Tensor]          # per neighbour (3, H', W')
    proj_masks: np.ndarray        # (N, H', W') in {0, 1}
    error_maps: np.ndarray        # (N, 3, H', W'), no gradient
    conf_masks: Tensor | None     # (N, H', W') in (0, 1); None when the mask net is off


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------

def _feat_layers(cfg: NetConfig) -> list[tuple[int, int, int]]:
    h = cfg.feat_hidden
    return [(3, h, 1), (h, h, 1), (h, 2 * h, 2), (2 * h, 2 * h, 1), (2 * h, 2 * h, 2),
            (2 * h, cfg.feat_channels, 1)]


def _reg_layers(cfg: NetConfig) -> dict[str, tuple[int, int]]:
    b = cfg.reg_base
    layers = {"e0": (cfg.feat_channels, b)}
    for lvl in range(1, cfg.reg_levels + 1):
        cin, cout = b * 2 ** (lvl - 1), b * 2 ** lvl
        layers[f"down{lvl}"] = (cin, cout)
        layers[f"same{lvl}"] = (cout, cout)
    for lvl in range(cfg.reg_levels, 0, -1):
        layers[f"up{lvl}"] = (b * 2 ** lvl, b * 2 ** (lvl - 1))
    layers["out"] = (b, 1)
    return layers


def _mask_layers(cfg: NetConfig) -> list[tuple[int, int]]:
    h = cfg.mask_hidden
    return [(4, h), (h, h), (h, h), (h, 1)]


def init_params(cfg: NetConfig, seed: int = 0) -> ParamSet:
    """Kaiming-uniform kernels, zero biases, unit scale / zero shift norms."""
    rng = np.random.default_rng(seed)
    ps = ParamSet()

    def conv(name, cin, cout, nd, norm):
        ps[name + ".w"] = dt.kaiming_uniform(rng, (cout, cin) + (3,) * nd)
        ps[name + ".b"] = np.zeros(cout, np.float32)
        if norm:
            ps[name + ".scale"] = np.ones(cout, np.float32)
            ps[name + ".shift"] = np.zeros(cout, np.float32)

    layers = _feat_layers(cfg)
    for i, (cin, cout, _) in enumerate(layers):
        conv(f"{FEAT}c{i}", cin, cout, 2, i < len(layers) - 1)
    for name, (cin, cout) in _reg_layers(cfg).items():
        conv(f"{REG}{name}", cin, cout, 3, name != "out")
    mlayers = _mask_layers(cfg)
    for i, (cin, cout) in enumerate(mlayers):
        conv(f"{MASK}c{i}", cin, cout, 2, i < len(mlayers) - 1)
    return ps


def tau_names(params: ParamSet) -> list[str]:
    """Names of the confidence-mask subnetwork parameters."""
    return [k for k in params if k.startswith(MASK)]


def partition(params: ParamSet) -> dict[str, list[str]]:
    return {p: [k for k in params if k.startswith(p)] for p in (FEAT, REG, MASK)}


def _as_leaves(params) -> dict[str, Tensor]:
    if isinstance(params, ParamSet):
        return {k: Tensor(v) for k, v in params.items()}
    return params


# ---------------------------------------------------------------------------
# sub-networks
# ---------------------------------------------------------------------------

def _block(x: Tensor, P: dict, name: str, nd: int, stride: int = 1, act: bool = True) -> Tensor:
    conv = dt.conv2d if nd == 2 else dt.conv3d
    y = conv(x, P[name + ".w"], P[name + ".b"], stride=stride, padding=1)
    if name + ".scale" in P:
        y = dt.spatial_norm(y, P[name + ".scale"], P[name + ".shift"], nd)
    return dt.relu(y) if act else y


def extract_features(images: Tensor, params, cfg: NetConfig) -> Tensor:
    """Features at 1/4 resolution for (3,H,W) or a batch (B,3,H,W) of images."""
    P = _as_leaves(params)
    H, W = images.shape[-2:]
    if H % 4 or W % 4:
        raise ValueError(f"image size {H}x{W} must be divisible by 4")
    x = images
    layers = _feat_layers(cfg)
    for i, (_, _, stride) in enumerate(layers):
        x = _block(x, P, f"{FEAT}c{i}", 2, stride, act=i < len(layers) - 1)
    return x


def build_cost_volume(ref_feat: Tensor, warped_feats: list[Tensor], proj_valid: list[np.ndarray] | None = None) -> Tensor:
    """Per-channel variance over the reference and warped neighbour features.

    ``ref_feat`` is (C,H,W), each warped volume (C,D,H,W). Locations where a
    neighbour sample was invalid contribute the value 0.
    """
    if not warped_feats:
        raise ValueError("need at least one warped neighbour volume")
    C, H, W = ref_feat.shape
    for w in warped_feats:
        if w.ndim != 4 or w.shape[0] != C or w.shape[2:] != (H, W):
            raise dt.DimensionError(f"warped volume {w.shape} does not match reference features {ref_feat.shape}")
    if proj_valid is not None:
        warped_feats = [w * v[None].astype(w.dtype) for w, v in zip(warped_feats, proj_valid)]
    ref = ref_feat.reshape(C, 1, H, W)
    # variance of the deviations from the reference view (shift invariance):
    # the reference contributes a zero deviation, identical views give exactly
    # zero, and the float64 reductions make the result independent of the
    # neighbour order
    dev = dt.stack([w - ref for w in warped_feats], axis=0)
    n = len(warped_feats) + 1
    mean_dev = dev.sum(axis=0) * (1.0 / n)
    mean_sq = dt.square(dev).sum(axis=0) * (1.0 / n)
    return dt.relu(mean_sq - dt.square(mean_dev))


def regularize_volume(cost: Tensor, params, cfg: NetConfig) -> Tensor:
    """3D encoder-decoder over a (C,D,H,W) cost volume -> (D,H,W) probabilities."""
    P = _as_leaves(params)
    f = 2 ** cfg.reg_levels
    if any(n % f for n in cost.shape[1:]):
        raise ValueError(f"cost volume {cost.shape} spatial dims must be divisible by {f}")
    x = _block(cost, P, f"{REG}e0", 3)
    skips = [x]
    for lvl in range(1, cfg.reg_levels + 1):
        x = _block(x, P, f"{REG}down{lvl}", 3, stride=2)
        x = _block(x, P, f"{REG}same{lvl}", 3)
        skips.append(x)
    for lvl in range(cfg.reg_levels, 0, -1):
        x = _block(dt.upsample2x(x, 3), P, f"{REG}up{lvl}", 3) + skips[lvl - 1]
    x = _block(x, P, f"{REG}out", 3, act=False)
    return dt.softmax_over_depth(-x.reshape(x.shape[1:]))


def soft_argmin_depth(prob: Tensor, depth_values) -> tuple[Tensor, np.ndarray]:
    """Expected depth under ``prob`` (D,H,W) and the 4-bin confidence map.

    The confidence sums the probabilities of bins argmax-1 .. argmax+2.
    """
    depth_values = np.asarray(depth_values, dtype=prob.dtype)
    D = prob.shape[0]
    if depth_values.shape != (D,):
        raise dt.DimensionError(f"{D} probability bins but {depth_values.shape} depth values")
    depth = (prob * depth_values.reshape(D, 1, 1)).sum(axis=0)
    p = prob.data
    j = np.argmax(p, axis=0)
    padded = np.concatenate([np.zeros((1,) + p.shape[1:], p.dtype), p, np.zeros((2,) + p.shape[1:], p.dtype)])
    rows, cols = np.indices(j.shape)
    conf = sum(padded[j + k, rows, cols] for k in range(4))
    return depth, np.clip(conf, 0.0, 1.0)


def predict_confidence(error_maps: np.ndarray, proj_masks: np.ndarray, params, cfg: NetConfig) -> Tensor:
    """Confidence masks (N,H,W) in (0,1) from per-neighbour error maps and masks."""
    P = _as_leaves(params)
    error_maps = np.asarray(error_maps)
    proj_masks = np.asarray(proj_masks)
    if error_maps.ndim != 4 or error_maps.shape[1] != 3:
        raise dt.DimensionError(f"error maps must be (N,3,H,W), got {error_maps.shape}")
    if proj_masks.shape != (error_maps.shape[0],) + error_maps.shape[2:]:
        raise dt.DimensionError(f"projection masks {proj_masks.shape} do not match error maps {error_maps.shape}")
    dtype = P[f"{MASK}c0.w"].dtype
    x = Tensor(np.concatenate([error_maps, proj_masks[:, None]], axis=1).astype(dtype))
    n = len(_mask_layers(cfg))
    for i in range(n):
        x = _block(x, P, f"{MASK}c{i}", 2, act=i < n - 1)
    return dt.sigmoid(x.reshape(x.shape[0], x.shape[2], x.shape[3]))


# ---------------------------------------------------------------------------
# full forward pass
# ---------------------------------------------------------------------------

def forward(params, sample: MultiViewSample, cfg: NetConfig, depth_values=None) -> DepthPrediction:
    P = _as_leaves(params)
    dtype = P[f"{FEAT}c0.w"].dtype
    if depth_values is None:
        depth_values = depth_hypotheses(*sample.depth_range, cfg.num_depths, cfg.inverse_depth)
    depth_values = np.asarray(depth_values, dtype=np.float64)
    ref_small, src_small = sample.small_images()
    ref_cam, src_cams = sample.small_cams()

    imgs = Tensor(np.stack([sample.ref_image] + list(sample.src_images)).astype(dtype))
    feats = extract_features(imgs, P, cfg)
    ref_feat = feats[0]
    warped_feats = [warp_feature_volume(feats[i + 1], ref_cam, cam, depth_values)
                    for i, cam in enumerate(src_cams)]
    cost = build_cost_volume(ref_feat, warped_feats)
    prob_volume = regularize_volume(cost, P, cfg)
    depth, prob = soft_argmin_depth(prob_volume, depth_values)

    warped, masks = [], []
    ref_data = ref_small.astype(dtype)
    for img, cam in zip(src_small, src_cams):
        w, m = warp_with_depth(Tensor(img.astype(dtype)), ref_cam, cam, depth)
        warped.append(w)
        masks.append(m)
    proj_masks = np.stack(masks)
    # the mask net judges errors of the current depth; no gradient flows back into depth
    error_maps = np.stack([np.abs(ref_data - w.data) * m for w, m in zip(warped, masks)])
    conf = predict_confidence(error_maps, proj_masks, P, cfg) if cfg.use_mask else None
    return DepthPrediction(depth, prob, prob_volume, depth_values, warped, proj_masks, error_maps, conf)
