import math

import numpy as np
import pytest

from metamvs import difftensor as dt
from metamvs.difftensor import ParamSet, sgd_step
from metamvs.losses import LossWeights, self_loss
from metamvs.meta import (MetaConfig, TrainState, adapt, draw_task, fine_tune, meta_step, meta_train, sup_grad,
                          supervised_train)
from metamvs.network import NetConfig, init_params, tau_names

W = LossWeights()
SMALL = NetConfig(feat_channels=4, feat_hidden=4, reg_base=4, reg_levels=1, mask_hidden=4, num_depths=8)


@pytest.fixture(scope="module")
def p_small():
    return init_params(SMALL, 0)


def _max_diff(a: ParamSet, b: ParamSet) -> float:
    return max(float(np.max(np.abs(a[k].astype(np.float64) - b[k]))) for k in a)


def test_config_validation():
    for bad in (dict(k=-1), dict(beta=0.0), dict(alpha=-1.0), dict(policy="tasks"), dict(outer_optimizer="rms"),
                dict(outer_batch=0), dict(smoothing=1.0)):
        with pytest.raises(ValueError):
            MetaConfig(**bad)


def test_adapt_trivial_cases(small_dataset, p_small):
    inner = small_dataset.train[:2]
    same, hist = adapt(p_small, [], 0.5, SMALL, W)
    assert same.digest() == p_small.digest() and hist == []
    same, hist = adapt(p_small, inner, 0.0, SMALL, W)
    assert same.digest() == p_small.digest() and len(hist) == 2


def test_adapt_does_not_mutate(small_dataset, p_small):
    before = p_small.digest()
    out, _ = adapt(p_small, small_dataset.train[:2], 0.5, SMALL, W)
    assert p_small.digest() == before and out.digest() != before


def test_adapt_single_step_matches_finite_difference(small_dataset):
    # one scalar bias of the regularizer output, all else fixed
    p = ParamSet((k, v.astype(np.float64)) for k, v in init_params(NetConfig(use_mask=False), 0).items())
    cfg = NetConfig(use_mask=False)
    s = small_dataset.train[0].without_gt()
    name = [n for n in p if n.startswith("reg.") and n.endswith(".b")][-1]

    def loss_at(b):
        q = p.clone()
        q[name] = q[name] + (b - q[name].flat[0]) * (np.arange(q[name].size) == 0).reshape(q[name].shape)
        with dt.no_grad():
            return float(self_loss(q, s, cfg, W)[0].data)

    b0, h = float(p[name].flat[0]), 1e-6
    g = (loss_at(b0 + h) - loss_at(b0 - h)) / (2 * h)
    alpha = 0.3
    out, _ = adapt(p, [s], alpha, cfg, W)
    assert out[name].flat[0] == pytest.approx(b0 - alpha * g, rel=1e-5, abs=1e-9)


@pytest.mark.parametrize("variant", [dict(k=0), dict(alpha=0.0)])
def test_meta_step_degenerates_to_supervised_step(small_dataset, p_small, variant):
    cfg = MetaConfig(**{**dict(k=3, alpha=0.5, beta=0.7, seed=4), **variant})
    state = TrainState.fresh(p_small, cfg)
    # the same draw the step will make
    _, outer = draw_task(np.random.default_rng(4), small_dataset.train, small_dataset.val, cfg)
    meta_step(state, small_dataset.train, small_dataset.val, cfg, SMALL, W)
    _, g = sup_grad(p_small, outer, SMALL)
    direct = sgd_step(p_small, g, 0.7)
    assert _max_diff(state.params, direct) < 1e-7
    assert state.iteration == 1


def test_meta_step_errors(small_dataset, p_small):
    cfg = MetaConfig(k=1)
    with pytest.raises(ValueError):
        meta_step(TrainState.fresh(p_small, cfg), small_dataset.train, [], cfg, SMALL, W)
    with pytest.raises(ValueError):
        meta_step(TrainState.fresh(p_small, cfg), [], small_dataset.val, cfg, SMALL, W)


def test_task_policies(small_dataset):
    train, val = small_dataset.train, small_dataset.val
    rng = np.random.default_rng(0)
    for _ in range(20):
        inner, outer = draw_task(rng, train, val, MetaConfig(k=3, policy="scenes"))
        assert len({s.domain_id for s in inner + outer}) == 1
        inner, _ = draw_task(rng, train, val, MetaConfig(k=3, policy="domains"))
        assert len({s.domain_id for s in inner}) == 3
        inner, outer = draw_task(rng, train, val, MetaConfig(k=5, policy="uniform", outer_batch=2))
        assert len(inner) == 5 and len(outer) == 2


def test_tau_follows_inner_loop(small_dataset, p_small):
    cfg = MetaConfig(k=2, alpha=0.5, beta=0.5, seed=1)
    state = TrainState.fresh(p_small, cfg)
    inner, _ = draw_task(np.random.default_rng(1), small_dataset.train, small_dataset.val, cfg)
    adapted, _ = adapt(p_small, [s.without_gt() for s in inner], 0.5, SMALL, W)
    meta_step(state, small_dataset.train, small_dataset.val, cfg, SMALL, W)
    for name in tau_names(p_small):
        np.testing.assert_array_equal(state.params[name], adapted[name])
    frozen = MetaConfig(k=2, alpha=0.5, beta=0.5, seed=1, train_tau=False)
    state = meta_step(TrainState.fresh(p_small, frozen), small_dataset.train, small_dataset.val, frozen, SMALL, W)
    for name in tau_names(p_small):
        np.testing.assert_array_equal(state.params[name], p_small[name])


def _run(small_dataset, p_small, cfg, **kw):
    return meta_train(cfg, small_dataset.train, small_dataset.val, p_small, SMALL, W, **kw)


def test_meta_train_deterministic_and_logged(small_dataset, p_small, tmp_path):
    cfg = MetaConfig(k=2, alpha=0.5, beta=0.5, max_iters=3, seed=2)
    a = _run(small_dataset, p_small, cfg, checkpoint_dir=tmp_path / "a", log_path=tmp_path / "a.csv")
    b = _run(small_dataset, p_small, cfg, checkpoint_dir=tmp_path / "b")
    assert a.params.digest() == b.params.digest()
    assert (tmp_path / "a" / "params.mmvs").read_bytes() == (tmp_path / "b" / "params.mmvs").read_bytes()
    assert [r[0] for r in a.log.rows if r[1] == "sup"] == [1, 2, 3]
    assert len(a.log.values("self_0")) == 3 and len(a.log.values("self_1")) == 3
    assert len((tmp_path / "a.csv").read_text().splitlines()) == 1 + 3 * 3


@pytest.mark.parametrize("optimizer", ["sgd", "adam"])
def test_resume_is_bit_exact(small_dataset, p_small, tmp_path, optimizer):
    cfg = MetaConfig(k=2, alpha=0.5, beta=0.05 if optimizer == "adam" else 0.5, max_iters=4, seed=3,
                     outer_optimizer=optimizer)
    full = _run(small_dataset, p_small, cfg)
    half = MetaConfig(**{**cfg.__dict__, "max_iters": 2})
    _run(small_dataset, p_small, half, checkpoint_dir=tmp_path)
    state = TrainState.load(tmp_path, cfg, SMALL)
    resumed = _run(small_dataset, p_small, cfg, state=state)
    assert resumed.params.digest() == full.params.digest()
    assert resumed.log.rows == full.log.rows
    assert resumed.rng.bit_generator.state == full.rng.bit_generator.state


def test_load_rejects_other_config(small_dataset, p_small, tmp_path):
    cfg = MetaConfig(k=1, alpha=0.5, beta=0.5, max_iters=1)
    _run(small_dataset, p_small, cfg, checkpoint_dir=tmp_path)
    with pytest.raises(ValueError):
        TrainState.load(tmp_path, MetaConfig(k=2, alpha=0.5, beta=0.5, max_iters=1), SMALL)


def test_early_stop_on_plateau(small_dataset, p_small):
    # a tiny beta cannot improve the smoothed loss for long
    cfg = MetaConfig(k=0, beta=1e-12, max_iters=50, patience=3, smoothing=0.0, seed=5)
    state = _run(small_dataset, p_small, cfg)
    assert state.iteration < 50 and state.converged(cfg)
    assert math.isfinite(state.best_val) and state.best_params is not None


def test_fine_tune_trivial_and_frozen_tau(small_dataset, p_small):
    target = small_dataset.target[:2]
    same, hist = fine_tune(p_small, target, 0.5, 0, SMALL, W)
    assert same.digest() == p_small.digest() and hist == []
    tuned, hist = fine_tune(p_small, target, 0.5, 3, SMALL, W, batch_size=2)
    assert len(hist) == 3 and tuned.digest() != p_small.digest()
    for name in tau_names(p_small):
        assert tuned[name].tobytes() == p_small[name].tobytes()
    loose, _ = fine_tune(p_small, target, 0.5, 2, SMALL, W, freeze_tau=False)
    assert any(loose[n].tobytes() != p_small[n].tobytes() for n in tau_names(p_small))


def test_fine_tune_never_reads_gt(small_dataset, p_small):
    a, _ = fine_tune(p_small, small_dataset.target[:2], 0.5, 2, SMALL, W)
    b, _ = fine_tune(p_small, [s.without_gt() for s in small_dataset.target[:2]], 0.5, 2, SMALL, W)
    assert a.digest() == b.digest()
    with pytest.raises(ValueError):
        fine_tune(p_small, [], 0.5, 1, SMALL, W)


def test_supervised_train_early_stop(small_dataset, p_small):
    _, hist = supervised_train(p_small, small_dataset.train[:1], 0.5, 10, SMALL, stop=lambda i, _: i == 2)
    assert len(hist) == 2


@pytest.mark.slow
def test_meta_steps_reduce_sup_loss(small_dataset):
    # 30 meta iterations: the last five validation losses sit below the
    # first five in at least two of three seeds
    wins = 0
    for seed in range(3):
        cfg = MetaConfig(k=3, alpha=0.5, beta=1.0, max_iters=30, patience=10 ** 6, seed=seed)
        state = meta_train(cfg, small_dataset.train, small_dataset.val, init_params(SMALL, seed), SMALL, W)
        sup = state.log.values("sup")
        wins += np.median(sup[-5:]) < np.median(sup[:5])
    assert wins >= 2
