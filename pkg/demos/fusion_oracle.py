"""Fuse ground-truth depth renders of one synthetic scene and score the cloud.

With perfect depth maps the fused cloud should sit on the surfaces, so the
accuracy printed here is the floor the learned pipeline is measured against.

    python demos/fusion_oracle.py --seed 3 --out oracle.ply
"""

import argparse

import numpy as np

from metamvs.evaluation import evaluate_scene, sample_scene_surface
from metamvs.fusion import FusionConfig, FusionView, fuse, write_ply
from metamvs.scene_synth import default_domains, generate_scene, render_view


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seed", type=int, default=3)
    ap.add_argument("--out", default="oracle.ply")
    args = ap.parse_args()

    domain = default_domains()[1][0]
    scene = generate_scene(args.seed, domain)
    views = []
    for cam in scene.cameras:
        img, depth = render_view(scene, cam, domain)
        # depth maps come out at 1/4 of the image size
        views.append(FusionView(depth.astype(np.float64), cam.scaled(0.25), img[:, ::4, ::4]))
    cloud = fuse(views, FusionConfig(min_views=2))
    write_ply(cloud, args.out)

    span = domain.d_max - domain.d_min
    rep = evaluate_scene(cloud, sample_scene_surface(scene), [0.02 * span, 0.05 * span], 0.2 * span)
    print(f"{len(cloud)} fused points -> {args.out}")
    print(rep.table(), end="")


if __name__ == "__main__":
    main()
