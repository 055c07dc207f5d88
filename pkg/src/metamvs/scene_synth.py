"""Deterministic synthetic multi-domain scenes rendered by analytic ray casting.

Each scene is a textured background plane plus a few occluders (spheres and a
tilted rectangle) seen by a small arc of cameras. Rendering is Lambertian with
a per-domain light, ambient level, texture family and sensor noise, and
returns exact z-depth so every downstream stage can be checked against ground
truth.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .geometry import Camera, look_at, project
from . import io as mvsio

TEXTURES = ("checker", "noise", "stripes")


@dataclass(frozen=True)
class DomainSpec:
    id: str
    texture: str = "checker"
    light_dir: tuple[float, float, float] = (0.3, -0.6, -1.0)
    intensity: float = 0.8
    ambient: float = 0.3
    noise_sigma: float = 0.01
    d_min: float = 2.0
    d_max: float = 4.0
    tint: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        if self.texture not in TEXTURES:
            raise ValueError(f"unknown texture family {self.texture!r}")
        if not self.d_min > 0 or not self.d_max > self.d_min:
            raise ValueError("depth range must satisfy 0 < d_min < d_max")
        if not self.intensity > 0:
            raise ValueError("light intensity must be positive")
        if self.noise_sigma < 0:
            raise ValueError("noise sigma must be non-negative")

    @property
    def depth_range(self) -> tuple[float, float]:
        return (self.d_min, self.d_max)


def default_domains() -> tuple[list[DomainSpec], list[DomainSpec]]:
    """Training domains and the held-out target domain used by the presets."""
    train = [
        DomainSpec("checker_bright", "checker", (0.3, -0.6, -1.0), 0.75, 0.3, 0.01, 2.0, 4.0, (1.0, 0.95, 0.9)),
        DomainSpec("stripes_dim", "stripes", (-0.5, -0.4, -1.0), 0.5, 0.2, 0.02, 2.5, 5.0, (0.8, 0.9, 1.0)),
        DomainSpec("noise_warm", "noise", (0.1, -0.8, -1.0), 0.7, 0.25, 0.015, 1.5, 3.0, (1.0, 0.85, 0.7)),
    ]
    target = [
        DomainSpec("target_cool", "noise", (-0.2, -0.3, -1.0), 0.45, 0.35, 0.01, 3.0, 6.0, (0.7, 0.9, 1.0)),
    ]
    return train, target


# ---------------------------------------------------------------------------
# textures and primitives
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Texture:
    kind: str
    frequency: float
    angle: float
    phase: float
    color_a: tuple[float, float, float]
    color_b: tuple[float, float, float]
    seed: int

    def value(self, s: np.ndarray, t: np.ndarray) -> np.ndarray:
        """Texture blend weight in [0, 1] at surface coordinates (s, t)."""
        c, sn = np.cos(self.angle), np.sin(self.angle)
        a = (c * s + sn * t) * self.frequency + self.phase
        b = (-sn * s + c * t) * self.frequency + self.phase
        if self.kind == "checker":
            return np.mod(np.floor(a) + np.floor(b), 2.0)
        if self.kind == "stripes":
            return 0.5 + 0.5 * np.sin(2 * np.pi * a)
        return 0.65 * _value_noise(a, b, self.seed) + 0.35 * _value_noise(2.1 * a, 2.1 * b, self.seed + 1)

    def albedo(self, s: np.ndarray, t: np.ndarray) -> np.ndarray:
        v = self.value(s, t)[..., None]
        return np.asarray(self.color_a) * (1 - v) + np.asarray(self.color_b) * v


def _lattice(ix: np.ndarray, iy: np.ndarray, seed: int) -> np.ndarray:
    # integer hash -> [0, 1)
    h = (ix.astype(np.int64) * 374761393 + iy.astype(np.int64) * 668265263 + seed * 2147483647) & 0xFFFFFFFF
    h = ((h ^ (h >> 13)) * 1274126177) & 0xFFFFFFFF
    h = h ^ (h >> 16)
    return (h & 0xFFFFFF) / float(0x1000000)


def _value_noise(x: np.ndarray, y: np.ndarray, seed: int) -> np.ndarray:
    x0, y0 = np.floor(x), np.floor(y)
    fx, fy = x - x0, y - y0
    sx, sy = fx * fx * (3 - 2 * fx), fy * fy * (3 - 2 * fy)
    v00 = _lattice(x0, y0, seed)
    v10 = _lattice(x0 + 1, y0, seed)
    v01 = _lattice(x0, y0 + 1, seed)
    v11 = _lattice(x0 + 1, y0 + 1, seed)
    top = v00 * (1 - sx) + v10 * sx
    bottom = v01 * (1 - sx) + v11 * sx
    return top * (1 - sy) + bottom * sy


@dataclass(frozen=True)
class Plane:
    point: tuple[float, float, float]
    normal: tuple[float, float, float]
    axis_u: tuple[float, float, float]
    half_extent: float  # 0 means unbounded
    texture: Texture

    def intersect(self, origin: np.ndarray, dirs: np.ndarray) -> np.ndarray:
        n = np.asarray(self.normal)
        p0 = np.asarray(self.point)
        denom = dirs @ n
        with np.errstate(divide="ignore", invalid="ignore"):
            t = ((p0 - origin) @ n) / denom
        t = np.where((np.abs(denom) > 1e-12) & (t > 1e-9), t, np.inf)
        if self.half_extent > 0:
            hit = origin + dirs * np.where(np.isfinite(t), t, 0)[:, None]
            s, q = self._surface_coords(hit)
            inside = (np.abs(s) <= self.half_extent) & (np.abs(q) <= self.half_extent)
            t = np.where(inside, t, np.inf)
        return t

    def _surface_coords(self, pts: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        u = np.asarray(self.axis_u)
        v = np.cross(np.asarray(self.normal), u)
        d = pts - np.asarray(self.point)
        return d @ u, d @ v

    def shade_inputs(self, pts: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        s, q = self._surface_coords(pts)
        return np.broadcast_to(np.asarray(self.normal), pts.shape), self.texture.albedo(s, q)


@dataclass(frozen=True)
class Sphere:
    center: tuple[float, float, float]
    radius: float
    texture: Texture

    def intersect(self, origin: np.ndarray, dirs: np.ndarray) -> np.ndarray:
        oc = origin - np.asarray(self.center)
        a = np.einsum("ij,ij->i", dirs, dirs)
        b = 2 * dirs @ oc
        c = oc @ oc - self.radius ** 2
        disc = b * b - 4 * a * c
        root = np.sqrt(np.maximum(disc, 0))
        t0 = (-b - root) / (2 * a)
        t1 = (-b + root) / (2 * a)
        t = np.where(t0 > 1e-9, t0, t1)
        return np.where((disc >= 0) & (t > 1e-9), t, np.inf)

    def shade_inputs(self, pts: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        d = pts - np.asarray(self.center)
        n = d / self.radius
        lon = np.arctan2(n[:, 0], -n[:, 2])
        lat = np.arcsin(np.clip(n[:, 1], -1, 1))
        return n, self.texture.albedo(self.radius * lon, self.radius * lat)


# ---------------------------------------------------------------------------
# scenes
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RigConfig:
    num_views: int = 5
    spacing_deg: float = 10.0
    elevation_deg: float = 3.0
    width: int = 80
    height: int = 64
    focal: float = 80.0
    output_scale: int = 4
    supersample: int = 2


@dataclass
class SceneSpec:
    seed: int
    domain_id: str
    background: Plane
    primitives: list
    cameras: list[Camera]
    depth_range: tuple[float, float]

    @property
    def surfaces(self) -> list:
        return [self.background] + list(self.primitives)

    def to_json(self) -> str:
        def enc(o):
            if isinstance(o, Camera):
                return {"K": o.K.tolist(), "R": o.R.tolist(), "t": o.t.tolist(),
                        "width": o.width, "height": o.height}
            if isinstance(o, np.ndarray):
                return o.tolist()
            if isinstance(o, (Plane, Sphere, Texture)):
                return {"type": type(o).__name__, **asdict(o)}
            raise TypeError(type(o))

        payload = {"seed": self.seed, "domain_id": self.domain_id, "background": self.background,
                   "primitives": self.primitives, "cameras": self.cameras,
                   "depth_range": list(self.depth_range)}
        return json.dumps(payload, default=enc, sort_keys=True)


def _rig_cameras(rig: RigConfig, distance: float) -> list[Camera]:
    K = np.array([[rig.focal, 0, (rig.width - 1) / 2],
                  [0, rig.focal, (rig.height - 1) / 2],
                  [0, 0, 1]])
    cams = []
    for j in range(rig.num_views):
        az = np.deg2rad((j - (rig.num_views - 1) / 2) * rig.spacing_deg)
        el = np.deg2rad(rig.elevation_deg * (1 if j % 2 else -1)) if rig.num_views > 1 else 0.0
        center = distance * np.array([np.sin(az) * np.cos(el), np.sin(el), -np.cos(az) * np.cos(el)])
        R, t = look_at(center, np.zeros(3))
        cams.append(Camera(K, R, t, rig.width, rig.height))
    return cams


def _random_texture(rng: np.random.Generator, domain: DomainSpec, scale: float) -> Texture:
    tint = np.asarray(domain.tint)
    ca = np.clip(rng.uniform(0.05, 0.45, 3) * tint, 0, 1)
    cb = np.clip(rng.uniform(0.55, 1.0, 3) * tint, 0, 1)
    freq = {"checker": 5.0, "stripes": 5.0, "noise": 7.0}[domain.texture] / scale
    return Texture(domain.texture, float(freq * rng.uniform(0.8, 1.25)), float(rng.uniform(0, np.pi)),
                   float(rng.uniform(0, 1)), tuple(map(float, ca)), tuple(map(float, cb)),
                   int(rng.integers(0, 2 ** 31 - 1)))


def _plane_depth_factors(cam: Camera, normal: np.ndarray) -> np.ndarray:
    """1 / (n_cam . ray) at the four image corners (z-depth = distance * factor)."""
    n_c = cam.R @ normal
    corners = np.array([[0, 0], [cam.width - 1, 0], [0, cam.height - 1], [cam.width - 1, cam.height - 1]], float)
    rays = np.concatenate([corners, np.ones((4, 1))], axis=1) @ np.linalg.inv(cam.K).T
    return 1.0 / (rays @ n_c)


def generate_scene(seed: int, domain: DomainSpec, rig: RigConfig = RigConfig(),
                   layout: str = "default", plane_depth: float | None = None) -> SceneSpec:
    """Build a scene whose visible depths all fall inside the domain's range.

    ``layout="plane"`` gives a single background plane fronto-parallel to the
    central camera at ``plane_depth`` (default: mid range), no occluders.
    """
    rng = np.random.default_rng([seed, int(hashlib.sha256(domain.id.encode()).hexdigest()[:8], 16)])
    d_min, d_max = domain.d_min, domain.d_max
    span = d_max - d_min
    distance = d_min + 0.55 * span
    cams = _rig_cameras(rig, distance)
    normal = np.array([0.0, 0.0, -1.0])  # facing the cameras
    if layout == "plane":
        z0 = plane_depth if plane_depth is not None else 0.5 * (d_min + d_max)
        bg = Plane((0.0, 0.0, z0 - distance), tuple(normal), (1.0, 0.0, 0.0), 0.0,
                   _random_texture(rng, domain, span))
        return SceneSpec(seed, domain.id, bg, [], cams, (d_min, d_max))
    if layout != "default":
        raise ValueError(f"unknown layout {layout!r}")

    # background: farthest corner depth over all cameras at 95% of the range
    target_far = d_min + 0.95 * span
    # distance from camera centre to plane z = z_bg is z_bg - c_z
    z_bg = min(target_far / _plane_depth_factors(c, -normal).max() + c.center[2] for c in cams)
    bg = Plane((0.0, 0.0, float(z_bg)), tuple(normal), (1.0, 0.0, 0.0), 0.0, _random_texture(rng, domain, span))

    prims: list = []
    near_limit = d_min + 0.04 * span
    # world z of the nearest allowed depth for the most distant camera
    z_near = max(c.center[2] for c in cams) + near_limit
    for attempt in range(200):
        prims = []
        n_spheres = int(rng.integers(1, 3))
        for _ in range(n_spheres):
            r = float(rng.uniform(0.09, 0.15) * span)
            lo, hi = z_near + r, z_bg - r - 0.05 * span
            c = np.array([rng.uniform(-0.3, 0.3) * span, rng.uniform(-0.2, 0.2) * span, rng.uniform(lo, hi)])
            prims.append(Sphere(tuple(map(float, c)), r, _random_texture(rng, domain, span)))
        tilt = rng.uniform(-0.5, 0.5, 2)
        n = np.array([np.sin(tilt[0]), np.sin(tilt[1]), -1.0])
        n /= np.linalg.norm(n)
        u = np.cross(np.array([0.0, 1.0, 0.0]), n)
        u /= np.linalg.norm(u)
        ext = float(rng.uniform(0.12, 0.2) * span)
        lo, hi = z_near + 0.5 * ext, z_bg - 0.5 * ext - 0.05 * span
        p = np.array([rng.uniform(-0.35, 0.35) * span, rng.uniform(-0.25, 0.25) * span, rng.uniform(lo, hi)])
        prims.append(Plane(tuple(map(float, p)), tuple(map(float, n)), tuple(map(float, u)),
                           ext, _random_texture(rng, domain, span)))
        if _layout_ok(prims, cams, near_limit, z_bg):
            break
    else:
        raise RuntimeError("could not place occluders inside the depth range")
    scene = SceneSpec(seed, domain.id, bg, prims, cams, (d_min, d_max))
    return scene


def _layout_ok(prims, cams, near_limit: float, z_bg: float) -> bool:
    for prim in prims:
        if isinstance(prim, Sphere):
            c = np.asarray(prim.center)
            if c[2] + prim.radius >= z_bg:
                return False
            pts = c[None]
            near = [(cam.R @ c + cam.t)[2] - prim.radius for cam in cams]
        else:
            u = np.asarray(prim.axis_u)
            v = np.cross(np.asarray(prim.normal), u)
            e = prim.half_extent
            pts = np.asarray(prim.point) + np.array([s * u * e + q * v * e for s in (-1, 1) for q in (-1, 1)])
            if pts[:, 2].max() >= z_bg:
                return False
            near = [project(cam, pts)[1].min() for cam in cams]
        if min(near) < near_limit:
            return False
        # the primitive's centre must be inside every view's frustum
        centre = pts.mean(axis=0)
        for cam in cams:
            pix, depth = project(cam, centre)
            if depth <= 0 or not (0 <= pix[0] <= cam.width - 1 and 0 <= pix[1] <= cam.height - 1):
                return False
    return True


def cast_rays(scene: SceneSpec, cam: Camera, pixels: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Nearest hit for rays through ``pixels`` (P,2).

    Returns (z-depth, world points, surface index); misses get depth inf and
    index -1.
    """
    homog = np.concatenate([pixels, np.ones((len(pixels), 1))], axis=1)
    rays_cam = homog @ np.linalg.inv(cam.K).T  # z component 1 -> t is z-depth
    dirs = rays_cam @ cam.R  # world directions, R^T applied row-wise
    origin = cam.center
    best = np.full(len(pixels), np.inf)
    which = np.full(len(pixels), -1)
    for i, surf in enumerate(scene.surfaces):
        t = surf.intersect(origin, dirs)
        closer = t < best
        best = np.where(closer, t, best)
        which = np.where(closer, i, which)
    pts = origin + dirs * np.where(np.isfinite(best), best, 0)[:, None]
    return best, pts, which


def _shade(scene: SceneSpec, domain: DomainSpec, pts: np.ndarray, which: np.ndarray,
           view_dirs: np.ndarray) -> np.ndarray:
    light = np.asarray(domain.light_dir, dtype=np.float64)
    light = light / np.linalg.norm(light)
    color = np.zeros((len(pts), 3))
    for i, surf in enumerate(scene.surfaces):
        sel = which == i
        if not np.any(sel):
            continue
        n, albedo = surf.shade_inputs(pts[sel])
        n = np.array(n, dtype=np.float64)
        flip = np.einsum("ij,ij->i", n, view_dirs[sel]) > 0
        n[flip] *= -1
        lambert = np.maximum(0.0, n @ light)
        color[sel] = albedo * (domain.intensity * lambert + domain.ambient)[:, None]
    return color


def render_view(scene: SceneSpec, camera: Camera, domain: DomainSpec, noise_seed: int | None = None,
                supersample: int = 2, output_scale: int = 4, clamp: bool = True) -> tuple[np.ndarray, np.ndarray]:
    """Render a (3,H,W) image and the (H/s, W/s) z-depth map for ``camera``.

    Shading is ``albedo * (intensity * max(0, n.l) + ambient)``; Gaussian
    noise is added to the image only.
    """
    H, W = camera.height, camera.width
    ss = supersample
    offs = (np.arange(ss) + 0.5) / ss - 0.5
    ys, xs = np.mgrid[0:H, 0:W].astype(np.float64)
    acc = np.zeros((H * W, 3))
    for oy in offs:
        for ox in offs:
            pix = np.stack([xs.ravel() + ox, ys.ravel() + oy], axis=1)
            _, pts, which = cast_rays(scene, camera, pix)
            view_dirs = pts - camera.center
            acc += _shade(scene, domain, pts, which, view_dirs)
    image = (acc / ss ** 2).reshape(H, W, 3).transpose(2, 0, 1)
    if domain.noise_sigma > 0:
        if noise_seed is None:
            noise_seed = int.from_bytes(hashlib.sha256(
                np.concatenate([camera.R.ravel(), camera.t]).tobytes() + str(scene.seed).encode()).digest()[:8], "little")
        image = image + np.random.default_rng(noise_seed).normal(0, domain.noise_sigma, image.shape)
    if clamp:
        image = np.clip(image, 0.0, 1.0)
    out_cam = camera.scaled(1.0 / output_scale)
    oh, ow = out_cam.height, out_cam.width
    oys, oxs = np.mgrid[0:oh, 0:ow].astype(np.float64)
    depth, _, which = cast_rays(scene, out_cam, np.stack([oxs.ravel(), oys.ravel()], axis=1))
    depth = np.where(which >= 0, depth, 0.0).reshape(oh, ow)
    return image.astype(np.float32), depth.astype(np.float32)


# ---------------------------------------------------------------------------
# multi-view samples and datasets
# ---------------------------------------------------------------------------

def downsample(image: np.ndarray, factor: int) -> np.ndarray:
    """Area-average a (C,H,W) image by an integer factor."""
    C, H, W = image.shape
    return image.reshape(C, H // factor, factor, W // factor, factor).mean(axis=(2, 4), dtype=np.float64).astype(image.dtype)


@dataclass
class MultiViewSample:
    ref_image: np.ndarray
    ref_cam: Camera
    src_images: list[np.ndarray]
    src_cams: list[Camera]
    depth_range: tuple[float, float]
    gt_depth: np.ndarray | None = None
    domain_id: str = ""
    scene_id: str = ""
    ref_view: int = 0
    src_views: tuple[int, ...] = ()
    output_scale: int = 4
    _small: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if len(self.src_images) < 1 or len(self.src_images) != len(self.src_cams):
            raise ValueError("a sample needs >= 1 neighbour view with one camera per image")

    @property
    def num_neighbors(self) -> int:
        return len(self.src_images)

    def small_images(self) -> tuple[np.ndarray, list[np.ndarray]]:
        """Reference and neighbour images area-downsampled to depth resolution."""
        if "imgs" not in self._small:
            s = self.output_scale
            self._small["imgs"] = (downsample(self.ref_image, s), [downsample(i, s) for i in self.src_images])
        return self._small["imgs"]

    def small_cams(self) -> tuple[Camera, list[Camera]]:
        s = 1.0 / self.output_scale
        return self.ref_cam.scaled(s), [c.scaled(s) for c in self.src_cams]

    def without_gt(self) -> "MultiViewSample":
        return MultiViewSample(self.ref_image, self.ref_cam, self.src_images, self.src_cams, self.depth_range,
                               None, self.domain_id, self.scene_id, self.ref_view, self.src_views,
                               self.output_scale)


@dataclass
class SceneRecord:
    scene_id: str
    domain: DomainSpec
    spec: SceneSpec | None
    images: list[np.ndarray]
    depths: list[np.ndarray]
    cams: list[Camera]
    split: str
    output_scale: int = 4


def neighbor_views(cams: list[Camera], ref: int, n: int) -> list[int]:
    """The ``n`` cameras whose viewing directions are angularly closest to ``ref``."""
    if n > len(cams) - 1:
        raise ValueError(f"requested {n} neighbours but only {len(cams) - 1} other views exist")
    axis = cams[ref].R[2]
    angles = [(np.arccos(np.clip(c.R[2] @ axis, -1, 1)), i) for i, c in enumerate(cams) if i != ref]
    return [i for _, i in sorted(angles)[:n]]


def samples_for_scene(rec: SceneRecord, num_neighbors: int, with_gt: bool = True) -> list[MultiViewSample]:
    out = []
    for ref in range(len(rec.cams)):
        nb = neighbor_views(rec.cams, ref, num_neighbors)
        out.append(MultiViewSample(
            rec.images[ref], rec.cams[ref], [rec.images[j] for j in nb], [rec.cams[j] for j in nb],
            rec.domain.depth_range, rec.depths[ref] if with_gt else None, rec.domain.id, rec.scene_id,
            ref, tuple(nb), rec.output_scale))
    return out


def render_scene(scene_id: str, seed: int, domain: DomainSpec, rig: RigConfig, split: str) -> SceneRecord:
    spec = generate_scene(seed, domain, rig)
    images, depths = [], []
    for v, cam in enumerate(spec.cameras):
        img, depth = render_view(spec, cam, domain, noise_seed=seed * 1000 + v,
                                 supersample=rig.supersample, output_scale=rig.output_scale)
        images.append(img)
        depths.append(depth)
    return SceneRecord(scene_id, domain, spec, images, depths, list(spec.cameras), split, rig.output_scale)


@dataclass
class DatasetConfig:
    train_domains: list[DomainSpec] = field(default_factory=lambda: default_domains()[0])
    target_domains: list[DomainSpec] = field(default_factory=lambda: default_domains()[1])
    scenes_per_domain: int = 4
    val_scenes_per_domain: int = 1
    target_scenes: int = 2
    num_neighbors: int = 2
    rig: RigConfig = field(default_factory=RigConfig)
    seed: int = 0
    shuffle: bool = True
    # "per_view" pools train and validation scenes and holds out one
    # reference view of every scene instead; other values keep whole scenes
    split: str = "stored"


@dataclass
class SceneDataset:
    train: list[MultiViewSample]
    val: list[MultiViewSample]
    target: list[MultiViewSample]
    scenes: dict[str, SceneRecord]

    def by_domain(self, split: str = "train") -> dict[str, list[int]]:
        index: dict[str, list[int]] = {}
        for i, s in enumerate(getattr(self, split)):
            index.setdefault(s.domain_id, []).append(i)
        return index

    def scene_ids(self, split: str) -> list[str]:
        return [k for k, r in self.scenes.items() if r.split == split]


def make_dataset(cfg: DatasetConfig) -> SceneDataset:
    """Render every scene and assemble train / val / held-out target splits.

    Target-domain samples carry ground truth for evaluation only; fine-tuning
    code must use ``sample.without_gt()`` or ignore the field.
    """
    if len(cfg.train_domains) < 2 or len(cfg.target_domains) < 1:
        raise ValueError("need >= 2 training domains and >= 1 held-out domain")
    if cfg.num_neighbors > cfg.rig.num_views - 1:
        raise ValueError(f"num_neighbors={cfg.num_neighbors} exceeds the {cfg.rig.num_views - 1} available")
    if not 1 <= cfg.val_scenes_per_domain < cfg.scenes_per_domain:
        raise ValueError("each training domain needs >= 1 train and >= 1 validation scene")
    scenes: dict[str, SceneRecord] = {}
    train, val, target = [], [], []
    seed_seq = np.random.SeedSequence(cfg.seed)
    for d_idx, domain in enumerate(cfg.train_domains + cfg.target_domains):
        is_target = d_idx >= len(cfg.train_domains)
        count = cfg.target_scenes if is_target else cfg.scenes_per_domain
        for s in range(count):
            scene_seed = int(seed_seq.spawn(1)[0].generate_state(1)[0] % (2 ** 31))
            if is_target:
                split = "target"
            else:
                split = "val" if s >= count - cfg.val_scenes_per_domain else "train"
            sid = f"{domain.id}_{s:03d}"
            rec = render_scene(sid, scene_seed, domain, cfg.rig, split)
            scenes[sid] = rec
            {"train": train, "val": val, "target": target}[split].extend(
                samples_for_scene(rec, cfg.num_neighbors))
    if cfg.split == "per_view":
        train, val = split_by_view(train + val, cfg.seed)
    if cfg.shuffle:
        rng = np.random.default_rng(seed_seq.spawn(1)[0])
        train = [train[i] for i in rng.permutation(len(train))]
    return SceneDataset(train, val, target, scenes)


def split_by_view(samples: list[MultiViewSample], seed: int, held_per_scene: int = 1
                  ) -> tuple[list[MultiViewSample], list[MultiViewSample]]:
    """Hold out ``held_per_scene`` reference views of every scene for validation.

    Every scene then supervises the outer loop, with views the inner loop
    never adapts on. The result does not depend on the input order.
    """
    by_scene: dict[str, dict[int, MultiViewSample]] = {}
    for smp in samples:
        by_scene.setdefault(smp.scene_id, {})[smp.ref_view] = smp
    rng = np.random.default_rng(seed)
    train, val = [], []
    for sid in sorted(by_scene):
        views = sorted(by_scene[sid])
        if len(views) <= held_per_scene:
            raise ValueError(f"scene {sid!r} has too few views to hold out {held_per_scene}")
        held = set(rng.choice(views, size=held_per_scene, replace=False).tolist())
        for v in views:
            (val if v in held else train).append(by_scene[sid][v])
    return train, val


# ---------------------------------------------------------------------------
# on-disk layout
# ---------------------------------------------------------------------------

def write_scene(rec: SceneRecord, root, image_format: str = "pfm") -> Path:
    """One directory per scene: images/, depths/, cams/ and scene.json."""
    d = Path(root) / rec.scene_id
    for sub in ("images", "depths", "cams"):
        (d / sub).mkdir(parents=True, exist_ok=True)
    for v, (img, depth, cam) in enumerate(zip(rec.images, rec.depths, rec.cams)):
        if image_format == "pfm":
            mvsio.write_pfm(d / "images" / f"{v:08d}.pfm", img)
        elif image_format == "ppm":
            mvsio.write_ppm(d / "images" / f"{v:08d}.ppm", img)
        else:
            raise ValueError(f"unknown image format {image_format!r}")
        mvsio.write_pfm(d / "depths" / f"{v:08d}.pfm", depth)
        mvsio.write_cam_txt(d / "cams" / f"{v:08d}_cam.txt", cam, rec.domain.depth_range)
    meta = {"scene_id": rec.scene_id, "split": rec.split, "domain": asdict(rec.domain),
            "num_views": len(rec.cams), "output_scale": rec.output_scale, "image_format": image_format}
    if rec.spec is not None:
        meta["scene_spec"] = json.loads(rec.spec.to_json())
    (d / "scene.json").write_text(json.dumps(meta, indent=2, sort_keys=True))
    return d


def read_scene(path) -> SceneRecord:
    d = Path(path)
    meta = json.loads((d / "scene.json").read_text())
    dom = meta["domain"]
    domain = DomainSpec(**{k: tuple(v) if isinstance(v, list) else v for k, v in dom.items()})
    ext = meta.get("image_format", "pfm")
    images, depths, cams = [], [], []
    for v in range(meta["num_views"]):
        img = mvsio.read_image(d / "images" / f"{v:08d}.{ext}")
        cam, _ = mvsio.read_cam_txt(d / "cams" / f"{v:08d}_cam.txt", img.shape[2], img.shape[1])
        depth_path = d / "depths" / f"{v:08d}.pfm"
        images.append(img)
        depths.append(mvsio.read_pfm(depth_path) if depth_path.exists() else None)
        cams.append(cam)
    spec = scene_spec_from_json(meta["scene_spec"]) if "scene_spec" in meta else None
    return SceneRecord(meta["scene_id"], domain, spec, images, depths, cams, meta["split"], meta["output_scale"])


def scene_spec_from_json(obj: dict) -> SceneSpec:
    def surf(o):
        o = dict(o)
        kind = o.pop("type")
        tex = dict(o.pop("texture"))
        tex.pop("type", None)
        tex = Texture(**{k: tuple(v) if isinstance(v, list) else v for k, v in tex.items()})
        o = {k: tuple(v) if isinstance(v, list) else v for k, v in o.items()}
        return Plane(texture=tex, **o) if kind == "Plane" else Sphere(texture=tex, **o)

    cams = [Camera(np.array(c["K"]), np.array(c["R"]), np.array(c["t"]), c["width"], c["height"])
            for c in obj["cameras"]]
    return SceneSpec(obj["seed"], obj["domain_id"], surf(obj["background"]),
                     [surf(p) for p in obj["primitives"]], cams, tuple(obj["depth_range"]))


def write_dataset(ds: SceneDataset, root, image_format: str = "pfm") -> None:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    for rec in ds.scenes.values():
        write_scene(rec, root, image_format)


def read_dataset(root, num_neighbors: int = 2, shuffle_seed: int | None = 0, split: str = "stored",
                 val_per_domain: int = 1, split_seed: int = 0) -> SceneDataset:
    """Load every scene under ``root``.

    ``split="stored"`` keeps the train/val flag written with each scene.
    ``split="per_scene"`` ignores it and holds out ``val_per_domain`` randomly
    chosen scenes of every non-target domain; in both cases whole scenes go to
    one side. ``split="per_view"`` holds out reference views instead (see
    :func:`split_by_view`).
    """
    if split not in ("stored", "per_scene", "per_view"):
        raise ValueError(f"unknown split policy {split!r}")
    scenes = {}
    for d in sorted(p for p in Path(root).iterdir() if (p / "scene.json").exists()):
        rec = read_scene(d)
        scenes[rec.scene_id] = rec
    if not scenes:
        raise FileNotFoundError(f"no scenes found under {root}")
    if split == "per_scene":
        rng = np.random.default_rng(split_seed)
        by_domain: dict[str, list[str]] = {}
        for sid, rec in scenes.items():
            if rec.split != "target":
                by_domain.setdefault(rec.domain.id, []).append(sid)
        for dom in sorted(by_domain):
            ids = sorted(by_domain[dom])
            if len(ids) <= val_per_domain:
                raise ValueError(f"domain {dom!r} has too few scenes to hold out {val_per_domain}")
            held = set(rng.choice(ids, size=val_per_domain, replace=False).tolist())
            for sid in ids:
                scenes[sid].split = "val" if sid in held else "train"
    splits: dict[str, list] = {"train": [], "val": [], "target": []}
    for rec in scenes.values():
        splits[rec.split].extend(samples_for_scene(rec, num_neighbors))
    train = splits["train"]
    if split == "per_view":
        train, splits["val"] = split_by_view(train + splits["val"], split_seed)
    if shuffle_seed is not None:
        rng = np.random.default_rng(shuffle_seed)
        train = [train[i] for i in rng.permutation(len(train))]
    return SceneDataset(train, splits["val"], splits["target"], scenes)
