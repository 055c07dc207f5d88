"""PFM / PPM images and MVS-style camera text files."""

from __future__ import annotations

import re
from pathlib import Path

import numpy as np

from .geometry import Camera


def write_pfm(path, array: np.ndarray) -> None:
    """Write (H,W) or (3,H,W) float data as little-endian PFM."""
    array = np.asarray(array, dtype=np.float32)
    if array.ndim == 3:
        if array.shape[0] != 3:
            raise ValueError(f"color PFM needs 3 channels, got shape {array.shape}")
        header, data = "PF", np.transpose(array, (1, 2, 0))
    elif array.ndim == 2:
        header, data = "Pf", array
    else:
        raise ValueError(f"PFM data must be 2-D or 3-D, got shape {array.shape}")
    h, w = data.shape[:2]
    with open(path, "wb") as f:
        f.write(f"{header}\n{w} {h}\n-1.0\n".encode("ascii"))
        f.write(np.ascontiguousarray(np.flipud(data), dtype="<f4").tobytes())


def read_pfm(path) -> np.ndarray:
    with open(path, "rb") as f:
        header = f.readline().decode("ascii").strip()
        if header not in ("PF", "Pf"):
            raise ValueError(f"{path}: not a PFM file")
        dims = f.readline().decode("ascii")
        match = re.match(r"^(\d+)\s+(\d+)\s*$", dims)
        if not match:
            raise ValueError(f"{path}: malformed PFM size line {dims!r}")
        w, h = map(int, match.groups())
        scale = float(f.readline().decode("ascii").strip())
        dtype = "<f4" if scale < 0 else ">f4"
        channels = 3 if header == "PF" else 1
        raw = f.read()
    count = w * h * channels
    if len(raw) < 4 * count:
        raise ValueError(f"{path}: truncated PFM payload")
    data = np.frombuffer(raw, dtype=dtype, count=count).astype(np.float32)
    data = np.flipud(data.reshape(h, w, channels) if channels == 3 else data.reshape(h, w))
    if channels == 3:
        return np.ascontiguousarray(np.transpose(data, (2, 0, 1)))
    return np.ascontiguousarray(data)


def write_ppm(path, image: np.ndarray) -> None:
    """Write a (3,H,W) image in [0,1] as binary 8-bit PPM."""
    img = np.clip(np.round(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)
    _, h, w = img.shape
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(np.transpose(img, (1, 2, 0)).tobytes())


def read_ppm(path) -> np.ndarray:
    blob = Path(path).read_bytes()
    match = re.match(rb"P6\s+(\d+)\s+(\d+)\s+(\d+)\s", blob)
    if not match:
        raise ValueError(f"{path}: not a binary PPM file")
    w, h, maxval = map(int, match.groups())
    data = np.frombuffer(blob, dtype=np.uint8, count=w * h * 3, offset=match.end())
    return np.transpose(data.reshape(h, w, 3), (2, 0, 1)).astype(np.float32) / maxval


def read_image(path) -> np.ndarray:
    return read_pfm(path) if str(path).endswith(".pfm") else read_ppm(path)


def write_cam_txt(path, cam: Camera, depth_range: tuple[float, float]) -> None:
    """Intrinsics (3x3), then extrinsics [R|t] (3x4), then ``depth_min depth_max``."""
    lines = ["intrinsic"]
    lines += [" ".join(repr(float(v)) for v in row) for row in cam.K]
    lines += ["", "extrinsic"]
    Rt = np.concatenate([cam.R, cam.t[:, None]], axis=1)
    lines += [" ".join(repr(float(v)) for v in row) for row in Rt]
    lines += ["", f"{float(depth_range[0])!r} {float(depth_range[1])!r}", ""]
    Path(path).write_text("\n".join(lines))


def read_cam_txt(path, width: int, height: int) -> tuple[Camera, tuple[float, float]]:
    rows = []
    for line in Path(path).read_text().splitlines():
        parts = line.split()
        if not parts:
            continue
        try:
            rows.append([float(p) for p in parts])
        except ValueError:
            continue  # section labels
    if len(rows) < 7 or any(len(r) != 3 for r in rows[:3]) or any(len(r) != 4 for r in rows[3:6]):
        raise ValueError(f"{path}: malformed camera file")
    K = np.array(rows[:3])
    Rt = np.array(rows[3:6])
    d_min, d_max = rows[6][:2]
    return Camera(K, Rt[:, :3], Rt[:, 3], width, height), (d_min, d_max)
