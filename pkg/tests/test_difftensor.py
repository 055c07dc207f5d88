import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from metamvs import difftensor as dt
from metamvs.difftensor import ParamSet, Tensor

PRIMITIVE_TOL = 1e-4


def rng(seed):
    return np.random.default_rng(seed)


# ---------------------------------------------------------------------------
# forward values
# ---------------------------------------------------------------------------

def test_conv2d_identity_kernel():
    x = rng(0).normal(size=(1, 3, 3))
    w = np.ones((1, 1, 1, 1))
    out = dt.conv2d(Tensor(x), Tensor(w), Tensor(np.zeros(1)))
    np.testing.assert_array_equal(out.data, x)


def test_conv2d_all_ones_center_is_nine():
    out = dt.conv2d(Tensor(np.ones((1, 3, 3))), Tensor(np.ones((1, 1, 3, 3))), padding=1)
    assert out.data[0, 1, 1] == 9.0
    assert out.data[0, 0, 0] == 4.0


def test_conv3d_identity_and_box_sum():
    x = rng(1).normal(size=(1, 2, 3, 4))
    out = dt.conv3d(Tensor(x), Tensor(np.ones((1, 1, 1, 1, 1))))
    np.testing.assert_array_equal(out.data, x)
    box = dt.conv3d(Tensor(np.ones((1, 2, 2, 2))), Tensor(np.ones((1, 1, 2, 2, 2))))
    assert box.shape == (1, 1, 1, 1) and box.data.item() == 8.0


def test_conv_channel_mismatch_names_shapes():
    with pytest.raises(dt.DimensionError, match=r"\(2, 4, 4\).*\(1, 3, 3, 3\)"):
        dt.conv2d(Tensor(np.ones((2, 4, 4))), Tensor(np.ones((1, 3, 3, 3))))


def test_conv_stride_two_output_size():
    out = dt.conv2d(Tensor(np.ones((3, 64, 80))), Tensor(np.ones((4, 3, 3, 3))), stride=2, padding=1)
    assert out.shape == (4, 32, 40)


def test_bilinear_identity_interpolation_and_outside():
    img = rng(2).normal(size=(2, 4, 5))
    ys, xs = np.mgrid[0:4, 0:5].astype(float)
    out, valid = dt.bilinear_sample(Tensor(img), np.stack([xs, ys]))
    np.testing.assert_allclose(out.data, img, atol=1e-6)
    assert valid.all()
    line = Tensor(np.array([[[0.0, 1.0]]]))
    v, ok = dt.bilinear_sample(line, np.array([[0.25], [0.0]]))
    assert v.data.item() == pytest.approx(0.25) and ok.item() == 1
    v, ok = dt.bilinear_sample(line, np.array([[-5.0], [-5.0]]))
    assert v.data.item() == 0 and ok.item() == 0


def test_bilinear_validity_is_exact_bounds():
    img = Tensor(np.ones((1, 3, 4)))
    coords = np.array([[0.0, 3.0, 3.001, -1e-3, -1e-9, 1.5], [0.0, 2.0, 1.0, 1.0, 1.0, np.nan]])
    _, valid = dt.bilinear_sample(img, coords)
    np.testing.assert_array_equal(valid, [1, 1, 0, 0, 1, 0])


def test_softmax_over_depth_cases():
    assert np.all(dt.softmax_over_depth(Tensor(rng(3).normal(size=(1, 2, 2)))).data == 1)
    two = dt.softmax_over_depth(Tensor(np.zeros((2, 1, 1))))
    np.testing.assert_allclose(two.data.ravel(), [0.5, 0.5])
    p = dt.softmax_over_depth(Tensor(np.log(np.array([1.0, 3.0])).reshape(2, 1, 1)))
    np.testing.assert_allclose(p.data.ravel(), [0.25, 0.75], atol=1e-12)


def test_softmax_stable_for_large_inputs():
    p = dt.softmax(Tensor(np.array([1000.0, 1000.0, -1000.0])), axis=0)
    np.testing.assert_allclose(p.data, [0.5, 0.5, 0.0])


@given(st.integers(1, 6), st.integers(1, 4), st.integers(0, 10 ** 6))
@settings(max_examples=25, deadline=None)
def test_softmax_sums_to_one(d, h, seed):
    x = rng(seed).normal(scale=20, size=(d, h, 3)).astype(np.float32)
    s = dt.softmax_over_depth(Tensor(x)).data.sum(axis=0)
    assert np.all(np.abs(s - 1) < 1e-6)


@given(st.integers(0, 10 ** 6))
@settings(max_examples=25, deadline=None)
def test_sigmoid_open_interval_relu_nonnegative(seed):
    x = rng(seed).normal(scale=10, size=50).astype(np.float32)
    s = dt.sigmoid(Tensor(x)).data
    assert np.all((s > 0) & (s < 1))
    assert np.all(dt.relu(Tensor(x)).data >= 0)


def test_upsample_nearest():
    x = Tensor(np.arange(4.0).reshape(1, 2, 2))
    up = dt.upsample2x(x, 2).data
    np.testing.assert_array_equal(up[0], [[0, 0, 1, 1], [0, 0, 1, 1], [2, 2, 3, 3], [2, 2, 3, 3]])


def test_spatial_norm_zero_mean_unit_variance():
    x = rng(4).normal(loc=3, scale=5, size=(2, 6, 7))
    y = dt.spatial_norm(Tensor(x), Tensor(np.ones(2)), Tensor(np.zeros(2)), nd=2).data
    np.testing.assert_allclose(y.mean(axis=(1, 2)), 0, atol=1e-10)
    np.testing.assert_allclose(y.var(axis=(1, 2)), 1, atol=1e-3)


def test_float32_storage_and_float64_reduction():
    x = Tensor(np.full(10 ** 6, 0.1, np.float32))
    assert x.dtype == np.float32
    total = x.sum()
    # float64 accumulation keeps the sum close to the exact value
    assert abs(float(total.data) - 1e5) < 1e-2


# ---------------------------------------------------------------------------
# gradients
# ---------------------------------------------------------------------------

def _weights(seed, shape):
    return rng(seed + 100).normal(size=shape)


PRIMITIVES = {
    "add": (lambda a, b: a + b, [(3, 4), (4,)]),
    "mul": (lambda a, b: a * b, [(3, 4), (3, 1)]),
    "div": (lambda a, b: a / (dt.square(b) + 1.0), [(2, 5), (2, 5)]),
    "abs": (lambda a: dt.tabs(a), [(4, 5)]),
    "relu": (lambda a: dt.relu(a), [(4, 5)]),
    "sigmoid": (lambda a: dt.sigmoid(a), [(3, 6)]),
    "exp_log": (lambda a: dt.log(dt.exp(a) + 1.0), [(3, 3)]),
    "sqrt": (lambda a: dt.sqrt(dt.square(a) + 0.5), [(6,)]),
    "mean": (lambda a: a.mean(axis=(1, 2), keepdims=True) * a, [(2, 3, 4)]),
    "variance": (lambda a: dt.variance(a, axis=(1, 2)), [(2, 4, 5)]),
    "softmax": (lambda a: dt.softmax_over_depth(a), [(4, 3, 2)]),
    "conv2d": (lambda x, w, b: dt.conv2d(x, w, b, padding=1), [(2, 5, 5), (3, 2, 3, 3), (3,)]),
    "conv2d_stride": (lambda x, w: dt.conv2d(x, w, stride=2, padding=1), [(2, 6, 5), (2, 2, 3, 3)]),
    "conv3d": (lambda x, w, b: dt.conv3d(x, w, b, padding=1), [(2, 4, 4, 3), (2, 2, 3, 3, 3), (2,)]),
    "conv3d_stride": (lambda x, w: dt.conv3d(x, w, stride=2, padding=1), [(2, 4, 4, 6), (3, 2, 3, 3, 3)]),
    "spatial_norm": (lambda x, s, b: dt.spatial_norm(x, s, b, nd=2), [(3, 4, 5), (3,), (3,)]),
    "upsample3d": (lambda x: dt.upsample2x(x, 3), [(2, 2, 3, 2)]),
    "reflect_pad": (lambda x: dt.pad(x, 1, (1, 2), mode="reflect"), [(2, 4, 5)]),
    "zero_pad": (lambda x: dt.pad(x, 2, (0,)), [(3, 2)]),
    "getitem": (lambda x: x[:, 1:3] * x[:, :2], [(3, 4)]),
    "stack_concat": (lambda a, b: dt.concat([dt.stack([a, b]), dt.stack([b, a])], axis=1), [(2, 3), (2, 3)]),
    "where": (lambda a, b: dt.where(np.array([True, False, True]), a, b), [(3,), (3,)]),
    "power": (lambda a: dt.power(dt.square(a) + 1.0, 1.5), [(5,)]),
}


@pytest.mark.parametrize("name", sorted(PRIMITIVES))
@pytest.mark.parametrize("seed", [0, 1, 2])
def test_primitive_gradients(name, seed):
    fn, shapes = PRIMITIVES[name]
    arrays = [rng(seed * 17 + i).normal(size=s) for i, s in enumerate(shapes)]
    probe = None

    def scalar(*ts):
        nonlocal probe
        out = fn(*ts)
        if probe is None:
            probe = _weights(seed, out.shape)
        return (out * probe).sum()

    assert dt.gradcheck(scalar, *arrays) < PRIMITIVE_TOL


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_bilinear_gradients_away_from_cell_edges(seed):
    r = rng(seed)
    img = r.normal(size=(2, 5, 6))
    # keep samples inside cells so the finite difference never crosses a grid line
    base = r.integers(0, 4, size=(2, 3, 3)).astype(float)
    coords = base + r.uniform(0.1, 0.9, size=base.shape)
    probe = r.normal(size=(2, 3, 3))
    err = dt.gradcheck(lambda i, c: (dt.bilinear_sample(i, c)[0] * probe).sum(), img, coords, h=1e-4)
    assert err < PRIMITIVE_TOL


def test_gradient_accumulates_over_reuse():
    x = Tensor(np.array([2.0]), requires_grad=True)
    (x * x + x).sum().backward()
    assert x.grad.item() == pytest.approx(5.0)


def test_graph_freed_after_backward():
    x = Tensor(np.ones(3), requires_grad=True)
    y = dt.exp(x).sum()
    y.backward()
    assert y._parents == () and y._backward is None


def test_no_grad_builds_no_graph():
    x = Tensor(np.ones(3), requires_grad=True)
    with dt.no_grad():
        y = (x * 2).sum()
    assert not y.requires_grad


def test_debug_mode_raises_on_nan():
    with dt.debug_mode(), np.errstate(invalid="ignore"):
        with pytest.raises(dt.NumericalError):
            dt.log(Tensor(np.array([-1.0])))


def test_shape_mismatch_is_dimension_error():
    with pytest.raises(dt.DimensionError):
        Tensor(np.ones((2, 3))) + Tensor(np.ones((4, 3)))


def test_backward_is_bit_reproducible():
    def run():
        x = Tensor(rng(5).normal(size=(2, 8, 8)).astype(np.float32), requires_grad=True)
        w = Tensor(rng(6).normal(size=(3, 2, 3, 3)).astype(np.float32), requires_grad=True)
        dt.relu(dt.conv2d(x, w, padding=1)).mean().backward()
        return x.grad.tobytes() + w.grad.tobytes()

    assert run() == run()


# ---------------------------------------------------------------------------
# parameters and optimizers
# ---------------------------------------------------------------------------

def _params(seed=0):
    r = rng(seed)
    return ParamSet([("a.w", r.normal(size=(2, 3)).astype(np.float32)), ("b", np.float32(r.normal(size=4)))])


def test_paramset_roundtrip_bit_exact(tmp_path):
    p = _params()
    q = ParamSet.from_bytes(p.to_bytes())
    assert q.names() == p.names()
    for k in p:
        assert q[k].tobytes() == p[k].tobytes() and q[k].shape == p[k].shape
    p.save(tmp_path / "p.mmvs")
    assert ParamSet.load(tmp_path / "p.mmvs").digest() == p.digest()


def test_paramset_header_layout():
    blob = ParamSet([("x", np.array([1.5], np.float32))]).to_bytes()
    assert blob[:4] == b"MMVS"
    assert int.from_bytes(blob[4:8], "little") == 1
    assert blob.endswith(np.array([1.5], "<f4").tobytes())


def test_paramset_rejects_bad_magic():
    with pytest.raises(ValueError):
        ParamSet.from_bytes(b"XXXX" + bytes(8))


def test_clone_is_independent():
    p = _params()
    h = p.digest()
    q = p.clone()
    q["a.w"][0, 0] += 1
    assert p.digest() == h and q.digest() != h


def test_sgd_step_cases():
    p = ParamSet([("x", np.array(1.0, np.float32))])
    g = ParamSet([("x", np.array(2.0, np.float32))])
    assert dt.sgd_step(p, g, 0.0)["x"] == p["x"]
    assert dt.sgd_step(p, g, 0.1)["x"] == pytest.approx(0.8)
    assert p["x"] == 1.0
    twice = dt.sgd_step(dt.sgd_step(p, g, 0.1), g, 0.1)["x"]
    assert twice == pytest.approx(dt.sgd_step(p, ParamSet([("x", 2 * g["x"])]), 0.1)["x"])


def test_sgd_step_frozen_and_mismatch():
    p, g = _params(0), _params(1)
    q = dt.sgd_step(p, g, 0.5, frozen=["b"])
    assert q["b"].tobytes() == p["b"].tobytes()
    assert not np.array_equal(q["a.w"], p["a.w"])
    with pytest.raises(dt.DimensionError):
        dt.sgd_step(p, ParamSet([("a.w", np.zeros((2, 3)))]), 0.1)


def test_adam_state_roundtrip():
    p, g = _params(0), _params(1)
    a = dt.Adam(0.01)
    p1 = a.step(p, g)
    b = dt.Adam(0.01)
    b.load_state(ParamSet.from_bytes(a.state().to_bytes()))
    assert a.step(p1, g).digest() == b.step(p1, g).digest()


def test_kaiming_uniform_bounds():
    w = dt.kaiming_uniform(rng(0), (8, 4, 3, 3))
    bound = np.sqrt(6 / (4 * 9))
    assert w.dtype == np.float32 and np.abs(w).max() <= bound
