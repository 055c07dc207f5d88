"""Compare a meta-trained and a supervised-pretrained initialization on the
held-out domain, before and after self-supervised fine-tuning.

    python demos/meta_vs_supervised.py --seed 0

Runs in about three minutes per seed on one core.
"""

import argparse
import dataclasses
import time

from metamvs.cli import dataset_config, loss_weights, meta_config, net_config
from metamvs.config import build_config
from metamvs.meta import fine_tune, mean_depth_mae, meta_train, supervised_train
from metamvs.network import init_params
from metamvs.scene_synth import make_dataset


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--steps", type=int, help="fine-tune steps (default from the desk preset)")
    args = ap.parse_args()

    cfg = build_config("desk", {"seed": args.seed})
    net, weights, ft = net_config(cfg), loss_weights(cfg), cfg.finetune
    steps = args.steps if args.steps is not None else ft.steps
    ds = make_dataset(dataclasses.replace(dataset_config(cfg), seed=args.seed))
    mc = dataclasses.replace(meta_config(cfg), seed=args.seed)
    p0 = init_params(net, args.seed)

    t = time.time()
    inits = {"meta": meta_train(mc, ds.train, ds.val, p0, net, weights).params}
    inits["supervised"], _ = supervised_train(p0, ds.train, mc.beta, mc.max_iters, net, seed=args.seed)
    print(f"pretraining took {time.time() - t:.0f} s")

    for name, p in inits.items():
        before = mean_depth_mae(p, ds.target, net)
        tuned, hist = fine_tune(p, ds.target, ft.lr, steps, net, weights, batch_size=ft.batch_size,
                                seed=args.seed)
        after = mean_depth_mae(tuned, ds.target, net)
        print(f"{name:>10}: held-out MAE {before:.4f} -> {after:.4f} after {steps} steps "
              f"(L_self {hist[0]:.4f} -> {hist[-1]:.4f})")


if __name__ == "__main__":
    main()
