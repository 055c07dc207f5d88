"""Command line entry point: ``metamvs <command> [options]``.

Commands: gen-data, meta-train, fine-tune, predict, fuse, eval. Each command
writes ``manifest.json`` next to its outputs with the resolved config, input
and output hashes and timings.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import platform
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from . import difftensor as dt
from . import io as mvsio
from .config import ConfigError, RunConfig, load_config
from .difftensor import ParamSet
from .evaluation import evaluate_scene, sample_scene_surface
from .fusion import FusionConfig, FusionView, fuse, write_ply
from .losses import LossLog, LossWeights
from .meta import MetaConfig, TrainState, fine_tune, meta_train
from .network import NetConfig, forward, init_params
from .scene_synth import (DatasetConfig, RigConfig, default_domains, downsample, make_dataset, read_dataset,
                          read_scene, samples_for_scene, write_dataset)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_NUMERIC = 4


# ---------------------------------------------------------------------------
# config -> component configs
# ---------------------------------------------------------------------------

def dataset_config(cfg: RunConfig) -> DatasetConfig:
    d = cfg.data
    rig = RigConfig(num_views=d.num_views, spacing_deg=d.spacing_deg, width=d.width, height=d.height,
                    focal=d.focal, supersample=d.supersample)
    train, target = default_domains()
    return DatasetConfig(train, target, d.scenes_per_domain, d.val_scenes_per_domain, d.target_scenes,
                         d.num_neighbors_train, rig, cfg.seed, split=d.split)


def net_config(cfg: RunConfig) -> NetConfig:
    n = cfg.net
    return NetConfig(n.feat_channels, n.feat_hidden, n.reg_base, n.reg_levels, n.mask_hidden, n.num_depths,
                     n.inverse_depth, n.use_mask)


def loss_weights(cfg: RunConfig) -> LossWeights:
    lw = cfg.loss
    return LossWeights(lw.gamma_photo, lw.gamma_ssim, lw.gamma_smooth, lw.mask_reg, lw.average_views)


def meta_config(cfg: RunConfig) -> MetaConfig:
    m = cfg.meta
    return MetaConfig(m.k, m.alpha, m.beta, m.policy, m.outer_batch, m.max_iters, m.patience, m.smoothing,
                      m.eval_every, m.checkpoint_every, m.outer_optimizer, m.train_tau, cfg.seed)


def fusion_config(cfg: RunConfig) -> FusionConfig:
    f = cfg.fusion
    return FusionConfig(f.reproj_px, f.rel_depth, f.prob_threshold, f.min_views, f.num_neighbors, f.conf_threshold)


# ---------------------------------------------------------------------------
# manifests
# ---------------------------------------------------------------------------

def content_hash(path) -> str:
    """sha256 over a file, or over the sorted relative paths and contents of a tree."""
    p = Path(path)
    h = hashlib.sha256()
    if p.is_file():
        h.update(p.read_bytes())
        return h.hexdigest()
    for f in sorted(x for x in p.rglob("*") if x.is_file() and x.name != "manifest.json"):
        h.update(str(f.relative_to(p)).encode())
        h.update(b"\0")
        h.update(f.read_bytes())
    return h.hexdigest()


def write_manifest(out: Path, command: str, cfg: RunConfig, argv: list[str], inputs: dict, started: float,
                   extra: dict | None = None) -> None:
    outputs = {str(f.relative_to(out)): content_hash(f)
               for f in sorted(out.rglob("*")) if f.is_file() and f.name != "manifest.json"}
    manifest = {
        "command": command,
        "argv": argv,
        "version": __version__,
        "config": cfg.to_dict(),
        "config_hash": cfg.digest(),
        "seed": cfg.seed,
        "inputs": {k: content_hash(v) for k, v in sorted(inputs.items())},
        "outputs": outputs,
        "timings": {"started": time.strftime("%Y-%m-%dT%H:%M:%S", time.localtime(started)),
                    "seconds": round(time.time() - started, 3)},
        "python": platform.python_version(),
        "numpy": np.__version__,
    }
    if extra:
        manifest.update(extra)
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))


def _progress(**fields) -> None:
    print(" ".join(f"{k}={v:.6g}" if isinstance(v, float) else f"{k}={v}" for k, v in fields.items()), flush=True)


def _params_path(path) -> Path:
    p = Path(path)
    if p.is_dir():
        p = p / "params.mmvs"
    if not p.exists():
        raise FileNotFoundError(f"no parameter file at {p}")
    return p


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_gen_data(cfg: RunConfig, args) -> dict:
    ds = make_dataset(dataset_config(cfg))
    write_dataset(ds, args.out, cfg.data.image_format)
    _progress(scenes=len(ds.scenes), train=len(ds.train), val=len(ds.val), target=len(ds.target))
    return {}


def cmd_meta_train(cfg: RunConfig, args) -> dict:
    ds = read_dataset(args.data, cfg.data.num_neighbors_train, shuffle_seed=cfg.seed, split=cfg.data.split,
                      val_per_domain=cfg.data.val_scenes_per_domain, split_seed=cfg.seed)
    net, mc, weights = net_config(cfg), meta_config(cfg), loss_weights(cfg)
    ckpt = args.out / "checkpoint"
    log_path = args.out / "losses.csv"
    state = None
    if args.resume:
        if not (ckpt / "checkpoint.json").exists():
            raise FileNotFoundError(f"nothing to resume in {ckpt}")
        state = TrainState.load(ckpt, mc, net)
        # rewrite the CSV from the restored history so the log has no gaps or repeats
        log_path.unlink(missing_ok=True)
        restored = state.log.rows
        state.log = LossLog(log_path)
        for row in restored:
            state.log.append(*row)
    elif log_path.exists():
        log_path.unlink()
    params = init_params(net, cfg.seed)

    def report(st: TrainState):
        _progress(step=st.iteration, sup=st.log.values("sup")[-1], smoothed=st.smoothed_val)

    state = meta_train(mc, ds.train, ds.val, params, net, weights, state=state, checkpoint_dir=ckpt,
                       log_path=log_path if state is None else None, progress=report)
    state.params.save(args.out / "params.mmvs")
    return {"iterations": state.iteration, "params_sha256": state.params.digest()}


def cmd_fine_tune(cfg: RunConfig, args) -> dict:
    ds = read_dataset(args.data, cfg.data.num_neighbors_train, shuffle_seed=None)
    params = ParamSet.load(_params_path(args.checkpoint))
    ft = cfg.finetune
    (args.out / "losses.csv").unlink(missing_ok=True)
    log = LossLog(args.out / "losses.csv")
    tuned, hist = fine_tune(params, ds.target, ft.lr, ft.steps, net_config(cfg), loss_weights(cfg),
                            ft.freeze_tau, ft.batch_size, ft.optimizer, cfg.seed, log)
    for i in range(0, len(hist), max(1, len(hist) // 10)):
        _progress(step=i, self=hist[i])
    tuned.save(args.out / "params.mmvs")
    return {"params_sha256": tuned.digest()}


def cmd_predict(cfg: RunConfig, args) -> dict:
    rec = read_scene(args.scene)
    params = ParamSet.load(_params_path(args.checkpoint))
    net = net_config(cfg)
    n = min(cfg.data.num_neighbors_test, len(rec.cams) - 1)
    for sub in ("depth", "prob", "conf"):
        (args.out / sub).mkdir(parents=True, exist_ok=True)
    with dt.no_grad():
        for s in samples_for_scene(rec, n, with_gt=False):
            pred = forward(params, s, net)
            depth = pred.depth.data
            if not np.all(np.isfinite(depth)):
                raise dt.NumericalError(f"non-finite depth predicted for view {s.ref_view}")
            name = f"{s.ref_view:08d}.pfm"
            mvsio.write_pfm(args.out / "depth" / name, depth)
            mvsio.write_pfm(args.out / "prob" / name, pred.prob)
            conf = pred.conf_masks.data.mean(axis=0) if pred.conf_masks is not None else np.ones_like(depth)
            mvsio.write_pfm(args.out / "conf" / name, conf)
            _progress(view=s.ref_view, depth_min=float(depth.min()), depth_max=float(depth.max()),
                      prob=float(pred.prob.mean()))
    return {"views": len(rec.cams), "neighbors": n}


def cmd_fuse(cfg: RunConfig, args) -> dict:
    rec = read_scene(args.scene)
    views = []
    for v, (img, cam) in enumerate(zip(rec.images, rec.cams)):
        name = f"{v:08d}.pfm"
        depth = mvsio.read_pfm(args.pred / "depth" / name)
        prob = mvsio.read_pfm(args.pred / "prob" / name)
        conf_path = args.pred / "conf" / name
        conf = mvsio.read_pfm(conf_path) if conf_path.exists() else None
        views.append(FusionView(depth, cam.scaled(1.0 / rec.output_scale), downsample(img, rec.output_scale),
                                prob, conf))
    cloud = fuse(views, fusion_config(cfg))
    write_ply(cloud, args.out / "cloud.ply")
    _progress(points=len(cloud))
    return {"points": len(cloud)}


def cmd_eval(cfg: RunConfig, args) -> dict:
    rec = read_scene(args.scene)
    if rec.spec is None:
        raise ValueError(f"{args.scene}: scene has no analytic description to sample ground truth from")
    span = rec.domain.d_max - rec.domain.d_min
    gt = sample_scene_surface(rec.spec, cfg.eval.gt_density, 1.0 / rec.output_scale)
    report = evaluate_scene(args.ply, gt, [t * span for t in cfg.eval.thresholds], cfg.eval.max_dist * span)
    (args.out / "report.json").write_text(report.to_json())
    (args.out / "report.txt").write_text(report.table())
    print(report.table(), end="")
    return {"depth_span": span}


COMMANDS = {
    "gen-data": (cmd_gen_data, "render the synthetic multi-domain dataset"),
    "meta-train": (cmd_meta_train, "meta-train the depth network"),
    "fine-tune": (cmd_fine_tune, "self-supervised fine-tuning on the held-out domain"),
    "predict": (cmd_predict, "predict depth, probability and confidence maps for a scene"),
    "fuse": (cmd_fuse, "fuse predicted depth maps into a PLY point cloud"),
    "eval": (cmd_eval, "score a fused point cloud against scene ground truth"),
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="JSON run config")
    common.add_argument("--seed", type=int, help="overrides the config seed")
    common.add_argument("--out", type=Path, required=True, help="output directory")
    common.add_argument("--preset", choices=("desk", "paper"), help="defaults to the config's preset, else desk")
    parser = argparse.ArgumentParser(prog="metamvs", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, helptext) in COMMANDS.items():
        p = sub.add_parser(name, parents=[common], help=helptext)
        if name in ("meta-train", "fine-tune"):
            p.add_argument("--data", type=Path, required=True, help="dataset directory from gen-data")
        if name == "meta-train":
            p.add_argument("--resume", action="store_true", help="continue from OUT/checkpoint")
        if name in ("fine-tune", "predict"):
            p.add_argument("--checkpoint", type=Path, required=True, help="params.mmvs or its directory")
        if name in ("predict", "fuse", "eval"):
            p.add_argument("--scene", type=Path, required=True, help="scene directory")
        if name == "fuse":
            p.add_argument("--pred", type=Path, required=True, help="output directory of predict")
        if name == "eval":
            p.add_argument("--ply", type=Path, required=True, help="fused point cloud")
    return parser


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    args = build_parser().parse_args(argv)
    func, _ = COMMANDS[args.command]
    started = time.time()
    try:
        cfg = load_config(args.config, args.preset, args.seed)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as e:
        print(f"I/O error: {e}", file=sys.stderr)
        return EXIT_IO
    inputs = {k: getattr(args, k) for k in ("config", "data", "checkpoint", "scene", "pred", "ply")
              if getattr(args, k, None) is not None}
    try:
        args.out.mkdir(parents=True, exist_ok=True)
        for k, v in inputs.items():
            if not Path(v).exists():
                raise FileNotFoundError(f"--{k} path does not exist: {v}")
        with np.errstate(over="ignore", under="ignore"):
            extra = func(cfg, args)
        write_manifest(args.out, args.command, cfg, argv, inputs, started, {"result": extra})
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (dt.NumericalError, FloatingPointError) as e:
        print(f"numerical error: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, KeyError, ValueError) as e:
        # malformed or inconsistent input files end up here
        print(f"I/O error: {e}", file=sys.stderr)
        return EXIT_IO
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
