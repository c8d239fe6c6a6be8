import numpy as np
import pytest

from subflow import diffcore as dc
from subflow.errors import NumericsError, ShapeError, StateError


def test_matmul_hand_value():
    out = dc.matmul(dc.Tensor([[1, 2], [3, 4]]), dc.Tensor([[1], [1]]))
    assert np.array_equal(out.data, [[3], [7]])


def test_relu_definition():
    out = dc.relu(dc.Tensor([-1.0, 0.0, 2.0]))
    assert np.array_equal(out.data, [0.0, 0.0, 2.0])


def test_conv2d_all_ones_no_padding():
    out = dc.conv2d(dc.Tensor(np.ones((1, 3, 3))), dc.Tensor(np.ones((1, 1, 3, 3))))
    assert out.data.shape == (1, 1, 1)
    assert out.data[0, 0, 0] == pytest.approx(9.0)


def test_matmul_shape_mismatch_names_op():
    with pytest.raises(ShapeError, match="matmul"):
        dc.matmul(dc.Tensor(np.ones((2, 3))), dc.Tensor(np.ones((2, 3))))


def test_conv2d_kernel_does_not_fit():
    with pytest.raises(ShapeError, match="conv2d"):
        dc.conv2d(dc.Tensor(np.ones((1, 2, 2))), dc.Tensor(np.ones((1, 1, 3, 3))))


def test_forward_is_deterministic():
    x = dc.named_stream(3, "det").standard_normal((5, 5)).astype(np.float32)
    a = dc.tanh(dc.matmul(dc.Tensor(x), dc.Tensor(x))).data
    b = dc.tanh(dc.matmul(dc.Tensor(x), dc.Tensor(x))).data
    assert np.array_equal(a, b)


def test_nonfinite_forward_raises():
    with pytest.raises(NumericsError, match="log"):
        dc.log(dc.Tensor([0.0]))


def test_backward_square():
    x = dc.Tensor(3.0, requires_grad=True)
    dc.mul(x, x).backward()
    assert x.grad == pytest.approx(6.0)


def test_backward_relu_subgradient_zero_at_zero():
    x = dc.Tensor([-1.0, 2.0], requires_grad=True)
    dc.tsum(dc.relu(x)).backward()
    assert np.array_equal(x.grad, [0.0, 1.0])
    z = dc.Tensor([0.0], requires_grad=True)
    dc.tsum(dc.relu(z)).backward()
    assert z.grad[0] == 0.0


def test_backward_requires_scalar():
    x = dc.Tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(ShapeError, match="scalar"):
        dc.mul(x, x).backward()


def test_backward_terminates_on_deep_chains():
    # tape walk is iterative; thousands of chained ops must not hit recursion limits
    x = dc.Tensor(1.0, requires_grad=True)
    y = x
    for _ in range(5000):
        y = dc.mul(y, 1.0001)
    y.backward()
    assert x.grad is not None and np.isfinite(x.grad)


def test_backward_accumulates_without_zeroing():
    x = dc.Tensor(2.0, requires_grad=True)
    dc.mul(x, x).backward()
    first = float(x.grad)
    dc.mul(x, x).backward()
    assert float(x.grad) == pytest.approx(2 * first)


def test_dense_net_gradients_match_finite_differences():
    spec = dc.DenseNetSpec((3, 8, 8, 8, 2), "tanh", seed=5)
    net = dc.DenseNet(spec)
    x = dc.named_stream(1, "gc-input").standard_normal((4, 3))
    assert dc.finite_diff_check(net, x, 1e-3) < 1e-3


def test_conv_stack_gradients_match_finite_differences():
    layers = [
        dc.Conv2dLayer(2, 3, 3, stride=2, padding=1, seed=9, name="c0"),
        dc.Conv2dLayer(3, 2, 2, stride=1, padding=0, seed=9, name="c1"),
    ]
    net = dc.ConvStack(layers, "relu")
    x = dc.named_stream(2, "gc-conv").uniform(0.1, 1.0, size=(2, 6, 6))
    assert dc.finite_diff_check(net, x, 1e-3) < 1e-3


def test_conv2d_input_gradient():
    # dx path checked against central differences on the input image
    layer = dc.Conv2dLayer(1, 2, 3, stride=2, padding=1, seed=4, name="cx")
    x0 = dc.named_stream(7, "gc-dx").standard_normal((1, 5, 5))
    xt = dc.Tensor(x0.astype(np.float64), requires_grad=True)
    dc.tsum(layer(xt)).backward()
    analytic = xt.grad.copy()
    h = 1e-4
    for idx in [(0, 0, 0), (0, 2, 3), (0, 4, 4), (0, 1, 2)]:
        bumped = x0.copy()
        bumped[idx] += h
        up = dc.tsum(layer(dc.Tensor(bumped))).item()
        bumped[idx] -= 2 * h
        dn = dc.tsum(layer(dc.Tensor(bumped))).item()
        numeric = (up - dn) / (2 * h)
        assert analytic[idx] == pytest.approx(numeric, rel=1e-3, abs=1e-5)


def test_adam_first_step_hand_value():
    p = dc.Tensor(1.0, requires_grad=True)
    p.grad = np.array(1.0, dtype=np.float32)
    opt = dc.Adam([p], lr=0.1)
    opt.step()
    # bias correction at step 1 gives m_hat = g, v_hat = g^2, update = lr * g/(|g|+eps)
    assert float(p.data) == pytest.approx(0.9, abs=1e-6)


def test_adam_zero_grad_leaves_params_unchanged():
    p = dc.Tensor([1.0, -2.0], requires_grad=True)
    p.grad = np.zeros(2, dtype=np.float32)
    before = p.data.copy()
    dc.Adam([p], lr=0.5).step()
    assert np.array_equal(p.data, before)


def test_adam_step_count_increments():
    p = dc.Tensor(1.0, requires_grad=True)
    opt = dc.Adam([p], lr=0.1)
    for _ in range(2):
        p.grad = np.array(1.0, dtype=np.float32)
        opt.step()
        opt.zero_grad()
    assert opt.state.step_count == 2


def test_adam_missing_grad_raises():
    p = dc.Tensor(1.0, requires_grad=True)
    with pytest.raises(StateError, match="grad"):
        dc.Adam([p]).step()


def test_adam_leaves_grads_untouched():
    p = dc.Tensor(1.0, requires_grad=True)
    p.grad = np.array(2.0, dtype=np.float32)
    dc.Adam([p], lr=0.1).step()
    assert float(p.grad) == pytest.approx(2.0)


def test_finite_diff_linear_net_is_exact():
    spec = dc.DenseNetSpec((1, 1), "none", seed=0)
    net = dc.DenseNet(spec)
    net.weights[0].data = np.array([[2.0]], dtype=np.float32)
    assert dc.finite_diff_check(net, np.array([[3.0]]), 1e-3) < 1e-6


def test_finite_diff_rejects_nonpositive_h():
    net = dc.DenseNet(dc.DenseNetSpec((1, 1), "none", seed=0))
    with pytest.raises(ValueError, match="positive"):
        dc.finite_diff_check(net, np.array([[1.0]]), 0.0)


def test_training_determinism_bit_identical():
    def run():
        net = dc.DenseNet(dc.DenseNetSpec((4, 6, 2), "relu", seed=11))
        opt = dc.Adam(net.parameters(), lr=1e-2)
        x = dc.named_stream(11, "train-x").standard_normal((8, 4)).astype(np.float32)
        y = dc.named_stream(11, "train-y").standard_normal((8, 2)).astype(np.float32)
        for _ in range(25):
            d = dc.sub(net(dc.Tensor(x)), dc.Tensor(y))
            dc.tmean(dc.mul(d, d)).backward()
            opt.step()
            opt.zero_grad()
        return [p.data.copy() for p in net.parameters()]

    a, b = run(), run()
    assert all(np.array_equal(p, q) for p, q in zip(a, b))


def test_seeded_init_reproducible():
    w1 = dc.glorot_uniform(42, "layer.w", 8, 4, (8, 4))
    w2 = dc.glorot_uniform(42, "layer.w", 8, 4, (8, 4))
    w3 = dc.glorot_uniform(43, "layer.w", 8, 4, (8, 4))
    assert np.array_equal(w1, w2)
    assert not np.array_equal(w1, w3)
    bound = np.sqrt(6.0 / 12.0)
    assert np.all(np.abs(w1) <= bound)


def test_prms_round_trip(tmp_path):
    path = tmp_path / "ck.prms"
    tensors = [np.arange(6, dtype=np.float32).reshape(2, 3),
               np.array(5.0, dtype=np.float32),
               np.linspace(-1, 1, 7, dtype=np.float32)]
    dc.save_params(path, tensors)
    loaded = dc.load_params(path)
    assert len(loaded) == 3
    for a, b in zip(tensors, loaded):
        assert a.shape == b.shape
        assert np.array_equal(a, b)


def test_prms_bad_magic(tmp_path):
    path = tmp_path / "bad.prms"
    path.write_bytes(b"NOPE" + b"\x00" * 16)
    with pytest.raises(Exception, match="magic"):
        dc.load_params(path)


def test_prms_truncated(tmp_path):
    path = tmp_path / "trunc.prms"
    dc.save_params(path, [np.ones((4, 4), dtype=np.float32)])
    raw = path.read_bytes()
    path.write_bytes(raw[:-8])
    with pytest.raises(Exception, match="truncated"):
        dc.load_params(path)


def test_conv2d_matches_naive_reference():
    rng = dc.named_stream(5, "conv-ref")
    x = rng.standard_normal((3, 7, 6)).astype(np.float32)
    w = rng.standard_normal((4, 3, 3, 2)).astype(np.float32)
    b = rng.standard_normal(4).astype(np.float32)
    stride, pad = 2, 1
    out = dc.conv2d(dc.Tensor(x), dc.Tensor(w), dc.Tensor(b), stride=stride, padding=pad).data

    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad)))
    hout = (xp.shape[1] - 3) // stride + 1
    wout = (xp.shape[2] - 2) // stride + 1
    ref = np.zeros((4, hout, wout), dtype=np.float64)
    for o in range(4):
        for i in range(hout):
            for j in range(wout):
                patch = xp[:, i * stride:i * stride + 3, j * stride:j * stride + 2]
                ref[o, i, j] = (patch * w[o]).sum() + b[o]
    assert np.allclose(out, ref, atol=1e-5)


def test_pool_and_upsample_shapes_and_values():
    x = dc.Tensor(np.arange(16, dtype=np.float32).reshape(1, 4, 4))
    pooled = dc.avg_pool2d(x, 2)
    assert pooled.data.shape == (1, 2, 2)
    assert pooled.data[0, 0, 0] == pytest.approx((0 + 1 + 4 + 5) / 4)
    up = dc.upsample2x(pooled)
    assert up.data.shape == (1, 4, 4)
    assert np.all(up.data[0, :2, :2] == pooled.data[0, 0, 0])
