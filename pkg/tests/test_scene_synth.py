import dataclasses

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from metamvs import io as mvsio
from metamvs.geometry import backproject, pixel_grid, project
from metamvs.scene_synth import (DatasetConfig, DomainSpec, RigConfig, Sphere, Texture, cast_rays, default_domains,
                                 generate_scene, make_dataset, neighbor_views, read_dataset, read_scene,
                                 render_view, samples_for_scene, split_by_view, write_dataset)

DOM = default_domains()[0][0]


def test_generate_scene_deterministic():
    a = generate_scene(11, DOM)
    b = generate_scene(11, DOM)
    assert a.to_json() == b.to_json()
    assert generate_scene(12, DOM).to_json() != a.to_json()


def test_fronto_parallel_plane_depth():
    dom = dataclasses.replace(DOM, noise_sigma=0.0)
    rig = RigConfig(num_views=1)
    scene = generate_scene(0, dom, rig, layout="plane", plane_depth=3.1)
    _, depth = render_view(scene, scene.cameras[0], dom)
    np.testing.assert_allclose(depth, 3.1, atol=1e-5)


def test_sphere_center_depth():
    dom = dataclasses.replace(DOM, noise_sigma=0.0)
    rig = RigConfig(num_views=1, width=81, height=65)
    scene = generate_scene(0, dom, rig, layout="plane", plane_depth=3.9)
    cam = scene.cameras[0]
    z_c, r = 3.0, 0.4
    center = backproject(cam, np.array([(cam.width - 1) / 2, (cam.height - 1) / 2]), z_c)
    scene.primitives.append(Sphere(tuple(center), r, scene.background.texture))
    _, depth = render_view(scene, cam, dom, output_scale=1)
    assert depth[32, 40] == pytest.approx(z_c - r, abs=1e-5)


def test_intensity_scales_image():
    base = DomainSpec("a", "noise", noise_sigma=0.0, ambient=0.0, intensity=0.4)
    brighter = dataclasses.replace(base, intensity=0.8)
    scene = generate_scene(3, base)
    cam = scene.cameras[1]
    a, _ = render_view(scene, cam, base, clamp=False)
    b, _ = render_view(scene, cam, brighter, clamp=False)
    lit = a > 1e-3
    np.testing.assert_allclose(b[lit] / a[lit], 2.0, rtol=1e-5)


def test_ambient_only_gives_albedo():
    dom = DomainSpec("flat", "checker", noise_sigma=0.0, ambient=1.0, intensity=1e-12)
    rig = RigConfig(num_views=1, supersample=1)
    scene = generate_scene(5, dom, rig, layout="plane")
    cam = scene.cameras[0]
    img, _ = render_view(scene, cam, dom, supersample=1)
    grid = pixel_grid(cam.height, cam.width).reshape(2, -1).T
    _, pts, _ = cast_rays(scene, cam, grid)
    _, albedo = scene.background.shade_inputs(pts)
    np.testing.assert_allclose(img, albedo.T.reshape(3, cam.height, cam.width), atol=1e-6)


@pytest.mark.parametrize("seed", range(6))
def test_depths_inside_domain_range(seed):
    for dom in default_domains()[0] + default_domains()[1]:
        scene = generate_scene(seed, dom)
        for cam in scene.cameras:
            _, depth = render_view(scene, cam, dom)
            assert depth.min() >= dom.d_min and depth.max() <= dom.d_max


def test_image_range_and_shapes():
    scene = generate_scene(1, DOM)
    img, depth = render_view(scene, scene.cameras[0], DOM)
    assert img.shape == (3, 64, 80) and depth.shape == (16, 20)
    assert img.min() >= 0 and img.max() <= 1


@given(st.integers(0, 10 ** 5))
@settings(max_examples=8, deadline=None)
def test_gt_depth_reprojection_consistency(seed):
    scene = generate_scene(seed, DOM)
    ref, src = scene.cameras[1], scene.cameras[2]
    _, d_ref = render_view(scene, ref, DOM, output_scale=1, supersample=1)
    H, W = d_ref.shape
    grid = pixel_grid(H, W).reshape(2, -1).T
    X = backproject(ref, grid, d_ref.ravel().astype(np.float64))
    pix, z = project(src, X)
    inside = (pix[:, 0] >= 0) & (pix[:, 0] <= W - 1) & (pix[:, 1] >= 0) & (pix[:, 1] <= H - 1)
    # depth the source camera sees at the exact reprojected location. A
    # point is occluded when something lies in front of it (seen < z);
    # nothing may ever be seen behind a surface point.
    seen, _, _ = cast_rays(scene, src, pix[inside])
    diff = seen - z[inside]
    occluded = diff < -1e-3
    assert (~occluded).mean() > 0.7
    assert np.abs(diff[~occluded]).max() < 1e-3


def test_neighbor_views_are_angularly_closest():
    scene = generate_scene(0, DOM)
    assert neighbor_views(scene.cameras, 2, 2) == sorted(neighbor_views(scene.cameras, 2, 2), key=lambda j: abs(j - 2))
    assert set(neighbor_views(scene.cameras, 0, 2)) == {1, 2}
    with pytest.raises(ValueError):
        neighbor_views(scene.cameras, 0, 5)


def test_dataset_counts_and_disjoint(small_dataset):
    ds = small_dataset
    views = 5
    assert len(ds.val) == 3 * views  # one held-out scene per training domain
    assert len(ds.train) == 3 * views and len(ds.target) == views
    assert not {s.scene_id for s in ds.train} & {s.scene_id for s in ds.val}
    assert all(s.num_neighbors == 2 for s in ds.train + ds.val + ds.target)
    assert {s.domain_id for s in ds.target} == {"target_cool"}
    assert all(s.gt_depth is not None for s in ds.target)
    assert sorted(ds.by_domain("val")) == sorted(d.id for d in default_domains()[0])


def test_four_scenes_split_three_one():
    ds = make_dataset(DatasetConfig(seed=1, scenes_per_domain=4, target_scenes=1, rig=RigConfig(supersample=1)))
    assert len(ds.val) == 3 * 5
    assert len(ds.train) == 3 * 3 * 5


def test_dataset_shuffle_deterministic():
    cfg = DatasetConfig(seed=2, scenes_per_domain=2, target_scenes=1, rig=RigConfig(supersample=1))
    a, b = make_dataset(cfg), make_dataset(cfg)
    assert [(s.scene_id, s.ref_view) for s in a.train] == [(s.scene_id, s.ref_view) for s in b.train]
    assert all(np.array_equal(x.ref_image, y.ref_image) for x, y in zip(a.train, b.train))


def test_dataset_rejects_too_many_neighbours():
    with pytest.raises(ValueError):
        make_dataset(DatasetConfig(num_neighbors=5))
    with pytest.raises(ValueError):
        make_dataset(DatasetConfig(train_domains=default_domains()[0][:1]))


def test_domain_spec_validation():
    with pytest.raises(ValueError):
        DomainSpec("x", d_min=3.0, d_max=2.0)
    with pytest.raises(ValueError):
        DomainSpec("x", intensity=0.0)
    with pytest.raises(ValueError):
        DomainSpec("x", noise_sigma=-1.0)
    with pytest.raises(ValueError):
        DomainSpec("x", texture="marble")


@pytest.mark.parametrize("fmt", ["pfm", "ppm"])
def test_dataset_disk_roundtrip(small_dataset, tmp_path, fmt):
    write_dataset(small_dataset, tmp_path, fmt)
    back = read_dataset(tmp_path, 2, shuffle_seed=None)
    assert len(back.train) == len(small_dataset.train) and len(back.val) == len(small_dataset.val)
    sid = small_dataset.val[0].scene_id
    rec, orig = read_scene(tmp_path / sid), small_dataset.scenes[sid]
    for a, b in zip(rec.depths, orig.depths):
        np.testing.assert_array_equal(a, b)
    for a, b in zip(rec.cams, orig.cams):
        np.testing.assert_array_equal(a.K, b.K)
        np.testing.assert_array_equal(a.R, b.R)
    tol = 0 if fmt == "pfm" else 0.5 / 255 + 1e-7
    np.testing.assert_allclose(rec.images[0], orig.images[0], atol=tol)
    assert rec.spec.to_json() == orig.spec.to_json()


def test_per_scene_split_policy(small_dataset, tmp_path):
    write_dataset(small_dataset, tmp_path)
    a = read_dataset(tmp_path, split="per_scene", split_seed=4)
    b = read_dataset(tmp_path, split="per_scene", split_seed=4)
    assert [s.scene_id for s in a.val] == [s.scene_id for s in b.val]
    assert len(a.val) == 3 * 5
    assert not {s.scene_id for s in a.train} & {s.scene_id for s in a.val}
    assert {s.scene_id for s in a.target} == {s.scene_id for s in small_dataset.target}
    with pytest.raises(ValueError):
        read_dataset(tmp_path, split="by_sample")


def _keys(samples):
    return sorted((s.scene_id, s.ref_view) for s in samples)


@given(st.integers(0, 2 ** 31 - 1))
@settings(max_examples=20, deadline=None)
def test_split_by_view_partitions_views(small_dataset, seed):
    pool = small_dataset.train + small_dataset.val
    train, val = split_by_view(pool, seed)
    assert _keys(train + val) == _keys(pool)
    # one held-out view per scene, and every scene on both sides
    assert sorted(s.scene_id for s in val) == sorted({s.scene_id for s in pool})
    assert {s.scene_id for s in train} == {s.scene_id for s in pool}
    again = split_by_view(pool[::-1], seed)
    assert _keys(again[1]) == _keys(val)


def test_per_view_split_same_from_memory_and_disk(small_dataset, tmp_path):
    write_dataset(small_dataset, tmp_path)
    disk = read_dataset(tmp_path, split="per_view", split_seed=0)
    mem = make_dataset(DatasetConfig(seed=0, scenes_per_domain=2, target_scenes=1, split="per_view"))
    assert _keys(disk.val) == _keys(mem.val) and _keys(disk.train) == _keys(mem.train)
    assert len(mem.val) == 3 * 2
    with pytest.raises(ValueError):
        split_by_view(small_dataset.train[:1], 0)


def test_samples_without_gt(small_dataset):
    rec = next(iter(small_dataset.scenes.values()))
    samples = samples_for_scene(rec, 3, with_gt=False)
    assert len(samples) == 5 and all(s.gt_depth is None and s.num_neighbors == 3 for s in samples)
    assert small_dataset.train[0].without_gt().gt_depth is None


def test_pfm_roundtrip(tmp_path):
    r = np.random.default_rng(0)
    for arr in (r.normal(size=(7, 9)).astype(np.float32), r.uniform(size=(3, 5, 4)).astype(np.float32)):
        mvsio.write_pfm(tmp_path / "x.pfm", arr)
        back = mvsio.read_pfm(tmp_path / "x.pfm")
        assert back.dtype == np.float32
        np.testing.assert_array_equal(back, arr)


def test_pfm_rejects_garbage(tmp_path):
    (tmp_path / "bad.pfm").write_bytes(b"P7\n1 1\n-1\n0000")
    with pytest.raises(ValueError):
        mvsio.read_pfm(tmp_path / "bad.pfm")


def test_cam_txt_roundtrip(tmp_path):
    scene = generate_scene(0, DOM)
    cam = scene.cameras[3]
    mvsio.write_cam_txt(tmp_path / "c.txt", cam, (2.0, 4.0))
    back, rng_ = mvsio.read_cam_txt(tmp_path / "c.txt", cam.width, cam.height)
    np.testing.assert_array_equal(back.K, cam.K)
    np.testing.assert_array_equal(back.R, cam.R)
    np.testing.assert_array_equal(back.t, cam.t)
    assert rng_ == (2.0, 4.0)
    (tmp_path / "bad.txt").write_text("intrinsic\n1 2\n")
    with pytest.raises(ValueError):
        mvsio.read_cam_txt(tmp_path / "bad.txt", 4, 4)


def test_texture_weights_in_unit_range():
    s, t = np.meshgrid(np.linspace(-3, 3, 50), np.linspace(-3, 3, 50))
    for kind in ("checker", "noise", "stripes"):
        v = Texture(kind, 3.0, 0.3, 0.1, (0, 0, 0), (1, 1, 1), 7).value(s, t)
        assert v.min() >= 0 and v.max() <= 1
