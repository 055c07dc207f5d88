"""First-order meta-learning of a self-supervised MVS network and the
self-supervised fine-tuning driver.

One meta iteration adapts a copy of the base parameters with ``k`` plain
gradient steps on the self-supervised loss (one training sample per step),
then evaluates the supervised loss of the adapted copy on a validation sample
and applies that gradient to the base parameters.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import difftensor as dt
from .difftensor import Adam, ParamSet, sgd_step
from .losses import LossLog, LossWeights, mask_regularizer, self_loss, self_loss_from_prediction, sup_loss
from .network import NetConfig, forward, tau_names
from .scene_synth import MultiViewSample

POLICIES = ("scenes", "domains", "uniform")
OPTIMIZERS = ("sgd", "adam")


@dataclass(frozen=True)
class MetaConfig:
    k: int = 3
    alpha: float = 1e-4
    beta: float = 1e-4
    # how the k inner samples and the validation batch are drawn:
    # "scenes" - k distinct scenes of one random domain, validated on that
    # domain; "domains" - k distinct scenes spread over as many domains as
    # possible; "uniform" - independent draws
    policy: str = "scenes"
    outer_batch: int = 1
    max_iters: int = 1000
    patience: int = 50
    smoothing: float = 0.9
    eval_every: int = 10
    checkpoint_every: int = 0
    outer_optimizer: str = "sgd"
    train_tau: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.k < 0:
            raise ValueError("k must be >= 0")
        if self.alpha < 0 or not self.beta > 0:
            raise ValueError("alpha must be >= 0 and beta > 0")
        if self.policy not in POLICIES:
            raise ValueError(f"unknown sampling policy {self.policy!r}; expected one of {POLICIES}")
        if self.outer_optimizer not in OPTIMIZERS:
            raise ValueError(f"unknown optimizer {self.outer_optimizer!r}")
        if self.outer_batch < 1 or self.max_iters < 0 or self.patience < 1:
            raise ValueError("outer_batch and patience must be >= 1, max_iters >= 0")
        if not 0 <= self.smoothing < 1:
            raise ValueError("smoothing must be in [0, 1)")


# fields that only decide how long a run goes on; a checkpoint may be resumed
# with different values for them
RUN_LENGTH = ("max_iters", "patience", "eval_every", "checkpoint_every")


def config_hash(*configs) -> str:
    blob = json.dumps([asdict(c) for c in configs], sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def resume_hash(cfg: MetaConfig, net_cfg: NetConfig) -> str:
    """Hash of everything that must match for a checkpoint to be resumable."""
    body = {k: v for k, v in asdict(cfg).items() if k not in RUN_LENGTH}
    blob = json.dumps([body, asdict(net_cfg)], sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def _grads(leaves: dict, params: ParamSet) -> ParamSet:
    return ParamSet((k, leaves[k].grad if leaves[k].grad is not None else np.zeros_like(v))
                    for k, v in params.items())


def _check_finite(value: float, what: str) -> None:
    if not math.isfinite(value):
        raise dt.NumericalError(f"non-finite {what}: {value}")


def self_grad(params: ParamSet, sample: MultiViewSample, net_cfg: NetConfig, weights: LossWeights,
              frozen: Sequence[str] = (), mask_reg: bool = False) -> tuple[float, ParamSet]:
    """L_self and its gradient. ``mask_reg`` adds the mask regularizer to the
    objective (not to the returned loss value)."""
    leaves = params.leaves(frozen)
    pred = forward(leaves, sample, net_cfg)
    loss = self_loss_from_prediction(pred, sample, weights)
    value = float(loss.data)
    _check_finite(value, "self-supervised loss")
    if mask_reg and pred.conf_masks is not None and weights.mask_reg > 0:
        loss = loss + weights.mask_reg * mask_regularizer(pred.conf_masks)
    loss.backward()
    return value, _grads(leaves, params)


def sup_grad(params: ParamSet, samples: Sequence[MultiViewSample], net_cfg: NetConfig) -> tuple[float, ParamSet]:
    """Mean supervised loss over ``samples`` and its gradient."""
    total, acc = 0.0, None
    for s in samples:
        leaves = params.leaves()
        loss, _ = sup_loss(leaves, s, net_cfg)
        loss.backward()
        g = _grads(leaves, params)
        total += float(loss.data)
        acc = g if acc is None else ParamSet((k, acc[k] + g[k]) for k in acc)
    n = len(samples)
    _check_finite(total, "supervised loss")
    return total / n, ParamSet((k, (v / n).astype(params[k].dtype)) for k, v in acc.items())


def adapt(params: ParamSet, samples: Sequence[MultiViewSample], alpha: float, net_cfg: NetConfig,
          weights: LossWeights, train_tau: bool = True) -> tuple[ParamSet, list[float]]:
    """``len(samples)`` gradient steps of size ``alpha`` on L_self, one per sample.

    Works on a copy; ``params`` is left untouched. Returns the adapted set and
    the L_self value seen before each step.
    """
    frozen = () if train_tau else tau_names(params)
    theta = params.clone()
    history = []
    for s in samples:
        value, g = self_grad(theta, s, net_cfg, weights, frozen, mask_reg=train_tau)
        history.append(value)
        theta = sgd_step(theta, g, alpha, frozen)
    return theta, history


# ---------------------------------------------------------------------------
# training state and checkpoints
# ---------------------------------------------------------------------------

@dataclass
class TrainState:
    params: ParamSet
    rng: np.random.Generator
    iteration: int = 0
    optimizer: Adam | None = None
    log: LossLog = field(default_factory=LossLog)
    smoothed_val: float | None = None
    best_val: float = math.inf
    best_iter: int = 0
    best_params: ParamSet | None = None

    @classmethod
    def fresh(cls, params: ParamSet, cfg: MetaConfig, log_path=None) -> "TrainState":
        opt = Adam(cfg.beta) if cfg.outer_optimizer == "adam" else None
        return cls(params.clone(), np.random.default_rng(cfg.seed), optimizer=opt, log=LossLog(log_path))

    def converged(self, cfg: MetaConfig) -> bool:
        return self.iteration - self.best_iter >= cfg.patience

    def save(self, directory, cfg: MetaConfig, net_cfg: NetConfig) -> Path:
        """Write params, optimizer state, best params and a JSON sidecar."""
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        self.params.save(d / "params.mmvs")
        if self.optimizer is not None:
            self.optimizer.state().save(d / "optimizer.mmvs")
        if self.best_params is not None:
            self.best_params.save(d / "best.mmvs")
        sidecar = {
            "iteration": self.iteration,
            "seed": cfg.seed,
            "config_hash": resume_hash(cfg, net_cfg),
            "meta_config": asdict(cfg),
            "net_config": asdict(net_cfg),
            "rng_state": self.rng.bit_generator.state,
            "smoothed_val": self.smoothed_val,
            "best_val": self.best_val if math.isfinite(self.best_val) else None,
            "best_iter": self.best_iter,
            "params_sha256": self.params.digest(),
            "log": [list(r) for r in self.log.rows],
        }
        (d / "checkpoint.json").write_text(json.dumps(sidecar, indent=1, sort_keys=True))
        return d

    @classmethod
    def load(cls, directory, cfg: MetaConfig, net_cfg: NetConfig, log_path=None) -> "TrainState":
        d = Path(directory)
        side = json.loads((d / "checkpoint.json").read_text())
        if side["config_hash"] != resume_hash(cfg, net_cfg):
            raise ValueError(f"{d}: checkpoint was written with a different configuration")
        params = ParamSet.load(d / "params.mmvs")
        if params.digest() != side["params_sha256"]:
            raise ValueError(f"{d}: parameter file does not match its sidecar hash")
        rng = np.random.default_rng()
        rng.bit_generator.state = side["rng_state"]
        opt = None
        if cfg.outer_optimizer == "adam":
            opt = Adam(cfg.beta)
            if (d / "optimizer.mmvs").exists():
                opt.load_state(ParamSet.load(d / "optimizer.mmvs"))
        log = LossLog(None)
        log.rows = [(int(s), n, float(v)) for s, n, v in side["log"]]
        if log_path is not None:
            log.path = Path(log_path)
        best = ParamSet.load(d / "best.mmvs") if (d / "best.mmvs").exists() else None
        return cls(params, rng, side["iteration"], opt, log, side["smoothed_val"],
                   side["best_val"] if side["best_val"] is not None else math.inf, side["best_iter"], best)


# ---------------------------------------------------------------------------
# meta-training
# ---------------------------------------------------------------------------

def _group(samples: Sequence[MultiViewSample], key: str) -> dict[str, list[int]]:
    groups: dict[str, list[int]] = {}
    for i, s in enumerate(samples):
        groups.setdefault(getattr(s, key), []).append(i)
    return groups


def _cycle(rng: np.random.Generator, items: list, k: int) -> list:
    """``k`` items without repeats until every item has been used once."""
    out: list = []
    while len(out) < k:
        out.extend(items[i] for i in rng.permutation(len(items)))
    return out[:k]


def draw_task(rng: np.random.Generator, train: Sequence[MultiViewSample], val: Sequence[MultiViewSample],
              cfg: MetaConfig) -> tuple[list[MultiViewSample], list[MultiViewSample]]:
    """Pick the k inner samples and the outer validation batch."""
    if cfg.policy == "uniform":
        inner = [train[i] for i in rng.integers(len(train), size=cfg.k)]
        outer = [val[i] for i in rng.integers(len(val), size=cfg.outer_batch)]
        return inner, outer
    by_scene = _group(train, "scene_id")
    scenes_of: dict[str, list[str]] = {}
    for sid in sorted(by_scene):
        scenes_of.setdefault(train[by_scene[sid][0]].domain_id, []).append(sid)
    domains = sorted(scenes_of)
    vgroups = _group(val, "domain_id")
    if cfg.policy == "scenes":
        domain = domains[rng.integers(len(domains))]
        chosen = _cycle(rng, scenes_of[domain], cfg.k)
        vpool = vgroups.get(domain) or list(range(len(val)))
    else:
        used: set[str] = set()
        chosen = []
        for domain in _cycle(rng, domains, cfg.k):
            fresh = [s for s in scenes_of[domain] if s not in used] or scenes_of[domain]
            sid = fresh[rng.integers(len(fresh))]
            used.add(sid)
            chosen.append(sid)
        vpool = list(range(len(val)))
    inner = [train[by_scene[sid][rng.integers(len(by_scene[sid]))]] for sid in chosen]
    outer = [val[vpool[i]] for i in rng.integers(len(vpool), size=cfg.outer_batch)]
    return inner, outer


def meta_step(state: TrainState, train: Sequence[MultiViewSample], val: Sequence[MultiViewSample],
              cfg: MetaConfig, net_cfg: NetConfig, weights: LossWeights) -> TrainState:
    """One outer iteration; ``state`` is updated in place and returned."""
    if not train and cfg.k > 0:
        raise ValueError("training split is empty")
    if not val:
        raise ValueError("validation split is empty")
    inner, outer = draw_task(state.rng, train, val, cfg)
    adapted, self_hist = adapt(state.params, [s.without_gt() for s in inner], cfg.alpha, net_cfg, weights,
                               cfg.train_tau)
    sup_value, g = sup_grad(adapted, outer, net_cfg)
    # the supervised loss does not reach the mask net, so its parameters keep
    # whatever the inner loop made of them
    tau = set(tau_names(state.params))
    if state.optimizer is not None:
        new = state.optimizer.step(state.params, g, frozen=tau)
    else:
        new = sgd_step(state.params, g, cfg.beta, frozen=tau)
    for name in tau:
        new[name] = adapted[name].copy()
    state.params = new
    state.iteration += 1
    for i, v in enumerate(self_hist):
        state.log.append(state.iteration, f"self_{i}", v)
    state.log.append(state.iteration, "sup", sup_value)
    s = cfg.smoothing
    state.smoothed_val = sup_value if state.smoothed_val is None else s * state.smoothed_val + (1 - s) * sup_value
    if state.smoothed_val < state.best_val:
        state.best_val, state.best_iter = state.smoothed_val, state.iteration
        state.best_params = state.params.clone()
    return state


def meta_train(cfg: MetaConfig, train: Sequence[MultiViewSample], val: Sequence[MultiViewSample],
               params: ParamSet, net_cfg: NetConfig, weights: LossWeights, state: TrainState | None = None,
               checkpoint_dir=None, log_path=None, progress: Callable[[TrainState], None] | None = None) -> TrainState:
    """Run meta iterations until ``max_iters`` or a validation plateau.

    Pass ``state`` (e.g. from :meth:`TrainState.load`) to resume.
    """
    if state is None:
        state = TrainState.fresh(params, cfg, log_path)
    while state.iteration < cfg.max_iters and not state.converged(cfg):
        meta_step(state, train, val, cfg, net_cfg, weights)
        if progress is not None and (state.iteration % cfg.eval_every == 0 or state.iteration == cfg.max_iters):
            progress(state)
        if checkpoint_dir is not None and cfg.checkpoint_every and state.iteration % cfg.checkpoint_every == 0:
            state.save(checkpoint_dir, cfg, net_cfg)
    if checkpoint_dir is not None:
        state.save(checkpoint_dir, cfg, net_cfg)
    return state


# ---------------------------------------------------------------------------
# baselines and fine-tuning
# ---------------------------------------------------------------------------

def _batches(rng: np.random.Generator, n: int, batch: int):
    """Endless stream of index batches drawn from shuffled passes over range(n)."""
    order: list[int] = []
    while True:
        out = []
        while len(out) < batch:
            if not order:
                order = list(rng.permutation(n))
            out.append(int(order.pop()))
        yield out


def _make_optimizer(kind: str, lr: float):
    if kind not in OPTIMIZERS:
        raise ValueError(f"unknown optimizer {kind!r}")
    return Adam(lr) if kind == "adam" else None


def fine_tune(params: ParamSet, samples: Sequence[MultiViewSample], lr: float, steps: int, net_cfg: NetConfig,
              weights: LossWeights, freeze_tau: bool = True, batch_size: int = 4, optimizer: str = "sgd",
              seed: int = 0, log: LossLog | None = None) -> tuple[ParamSet, list[float]]:
    """Self-supervised fine-tuning; ground truth, if present, is never read.

    Returns the tuned parameters and the batch-mean L_self before each step.
    """
    if steps < 0 or batch_size < 1:
        raise ValueError("steps must be >= 0 and batch_size >= 1")
    if steps and not samples:
        raise ValueError("fine-tuning needs at least one sample")
    samples = [s.without_gt() for s in samples]
    frozen = tau_names(params) if freeze_tau else []
    opt = _make_optimizer(optimizer, lr)
    rng = np.random.default_rng(seed)
    batches = _batches(rng, len(samples), batch_size)
    theta = params.clone()
    history = []
    for step in range(steps):
        idx = next(batches)
        total, acc = 0.0, None
        for i in idx:
            value, g = self_grad(theta, samples[i], net_cfg, weights, frozen, mask_reg=not freeze_tau)
            total += value
            acc = g if acc is None else ParamSet((k, acc[k] + g[k]) for k in acc)
        g = ParamSet((k, (v / len(idx)).astype(theta[k].dtype)) for k, v in acc.items())
        history.append(total / len(idx))
        if log is not None:
            log.append(step, "self", history[-1])
        theta = opt.step(theta, g, frozen) if opt is not None else sgd_step(theta, g, lr, frozen)
    return theta, history


def supervised_train(params: ParamSet, samples: Sequence[MultiViewSample], lr: float, steps: int,
                     net_cfg: NetConfig, batch_size: int = 1, optimizer: str = "sgd", seed: int = 0,
                     log: LossLog | None = None,
                     stop: Callable[[int, ParamSet], bool] | None = None) -> tuple[ParamSet, list[float]]:
    """Plain supervised training on ``samples``; ``stop(step, params)`` may end it early."""
    if not samples:
        raise ValueError("supervised training needs at least one sample")
    opt = _make_optimizer(optimizer, lr)
    rng = np.random.default_rng(seed)
    batches = _batches(rng, len(samples), batch_size)
    theta = params.clone()
    history = []
    for step in range(steps):
        value, g = sup_grad(theta, [samples[i] for i in next(batches)], net_cfg)
        history.append(value)
        if log is not None:
            log.append(step, "sup", value)
        theta = opt.step(theta, g) if opt is not None else sgd_step(theta, g, lr)
        if stop is not None and stop(step + 1, theta):
            break
    return theta, history


def mean_self_loss(params: ParamSet, samples: Sequence[MultiViewSample], net_cfg: NetConfig,
                   weights: LossWeights) -> float:
    with dt.no_grad():
        return float(np.mean([float(self_loss(params, s, net_cfg, weights)[0].data) for s in samples]))


def mean_depth_mae(params: ParamSet, samples: Sequence[MultiViewSample], net_cfg: NetConfig) -> float:
    with dt.no_grad():
        return float(np.mean([float(sup_loss(params, s, net_cfg)[0].data) for s in samples]))
