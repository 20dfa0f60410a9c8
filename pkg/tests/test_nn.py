import zlib

import numpy as np
import pytest

import gradcheck
from coughscreen.nn import (
    Adam,
    AdamState,
    BatchNorm2d,
    Conv2d,
    Linear,
    Tensor,
    adam_step,
    no_grad,
)
from coughscreen.nn import functional as F
from coughscreen.nn.checkpoint import MAGIC, CheckpointError, load_checkpoint, save_checkpoint


@pytest.mark.parametrize("name", sorted(gradcheck.CASES))
def test_finite_difference_gradients(name):
    worst, tol = gradcheck.run_case(name, seed=zlib.crc32(name.encode()), shapes=20)
    assert worst < tol, f"{name}: relative error {worst:.2e}"


def test_conv_matches_direct_loops(rng):
    x = rng.standard_normal((2, 3, 5, 4))
    w = rng.standard_normal((4, 3, 3, 3))
    b = rng.standard_normal(4)
    out = F.conv2d(Tensor(x), Tensor(w), Tensor(b)).data
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    ref = np.zeros((2, 4, 5, 4))
    for n in range(2):
        for f in range(4):
            for i in range(5):
                for j in range(4):
                    ref[n, f, i, j] = np.sum(xp[n, :, i:i + 3, j:j + 3] * w[f]) + b[f]
    np.testing.assert_allclose(out, ref, atol=1e-10)


def test_maxpool_odd_sizes_and_ties():
    x = np.array([[[[1.0, 1.0, 3.0], [1.0, 1.0, 2.0], [5.0, 0.0, 9.0]]]])
    t = Tensor(x, requires_grad=True)
    out = F.max_pool2(t)
    np.testing.assert_array_equal(out.data[0, 0], [[1.0, 3.0], [5.0, 9.0]])
    F.sum(out).backward()
    # a tie sends the whole gradient to the first maximum in row-major order
    np.testing.assert_array_equal(t.grad[0, 0], [[1, 0, 1], [0, 0, 0], [1, 0, 1]])


def test_adaptive_avg_pool_regions():
    x = np.arange(25, dtype=float).reshape(1, 1, 5, 5)
    out = F.adaptive_avg_pool2d(Tensor(x), (2, 2)).data[0, 0]
    # region i spans [floor(i*5/2), floor((i+1)*5/2)): rows/cols [0, 2) and [2, 5)
    a = x[0, 0]
    ref = [[a[:2, :2].mean(), a[:2, 2:].mean()], [a[2:, :2].mean(), a[2:, 2:].mean()]]
    np.testing.assert_allclose(out, ref)
    q = np.arange(16, dtype=float).reshape(1, 1, 4, 4)
    quads = F.adaptive_avg_pool2d(Tensor(q), (2, 2)).data[0, 0]
    np.testing.assert_allclose(quads, [[2.5, 4.5], [10.5, 12.5]])
    two = np.arange(4, dtype=float).reshape(1, 1, 2, 2)
    np.testing.assert_array_equal(F.adaptive_avg_pool2d(Tensor(two), (2, 2)).data, two)
    with pytest.raises(ValueError):
        F.adaptive_avg_pool2d(Tensor(np.zeros((1, 1, 1, 4))), (2, 2))


def test_maxpool_examples():
    np.testing.assert_array_equal(F.max_pool2(Tensor(np.array([[[[1.0, 2.0], [3.0, 4.0]]]]))).data, [[[[4.0]]]])
    t = Tensor(np.ones((1, 1, 4, 4)), requires_grad=True)
    F.sum(F.max_pool2(t)).backward()
    expected = np.zeros((4, 4))
    expected[::2, ::2] = 1
    np.testing.assert_array_equal(t.grad[0, 0], expected)


def test_batchnorm_running_stats_and_eval(rng):
    bn = BatchNorm2d(3)
    x = rng.standard_normal((4, 3, 2, 2)) * 2 + 1
    bn(Tensor(x.astype(np.float32)))
    m = x.mean(axis=(0, 2, 3))
    v = x.var(axis=(0, 2, 3), ddof=1)
    np.testing.assert_allclose(bn.running_mean, 0.1 * m, rtol=1e-5)
    np.testing.assert_allclose(bn.running_var, 0.9 + 0.1 * v, rtol=1e-5)
    bn.eval()
    before = bn.running_mean.copy()
    y = bn(Tensor(x.astype(np.float32))).data
    np.testing.assert_array_equal(bn.running_mean, before)
    ref = (x - bn.running_mean[None, :, None, None]) / np.sqrt(bn.running_var[None, :, None, None] + 1e-5)
    np.testing.assert_allclose(y, ref, rtol=1e-4, atol=1e-5)


def test_batchnorm_rejects_single_sample_batches():
    with pytest.raises(ValueError):
        BatchNorm2d(2)(Tensor(np.zeros((1, 2, 1, 1), np.float32)))


def test_no_grad_builds_no_graph():
    w = Tensor(np.ones(3), requires_grad=True)
    with no_grad():
        y = F.mul(w, Tensor(np.ones(3)))
    assert not y.requires_grad and y._parents == ()


def test_gradients_accumulate_over_uses():
    x = Tensor(np.array([2.0]), requires_grad=True)
    F.sum(F.add(F.mul(x, x), x)).backward()
    np.testing.assert_allclose(x.grad, [5.0])


def test_layer_initialisation(rng):
    conv = Conv2d(3, 32, rng)
    bound = np.sqrt(6 / 27)
    assert np.abs(conv.weight.data).max() <= bound and np.all(conv.bias.data == 0)
    lin = Linear(256, 128, rng)
    assert lin.weight.shape == (256, 128) and np.abs(lin.weight.data).max() <= np.sqrt(6 / 256)
    assert conv.weight.dtype == np.float32


def test_adam_zero_gradient_leaves_parameters():
    p = np.array([1.0, -2.0])
    adam_step([p], [np.zeros(2)], AdamState())
    np.testing.assert_array_equal(p, [1.0, -2.0])


def test_adam_first_step_is_lr_times_sign(rng):
    p = rng.standard_normal(5)
    g = rng.standard_normal(5)
    before = p.copy()
    adam_step([p], [g], AdamState(lr=1e-3))
    np.testing.assert_allclose(before - p, 1e-3 * np.sign(g), rtol=1e-6)


def test_adam_descends_a_quadratic():
    w = Tensor(np.array([3.0, -2.0]), requires_grad=True)
    opt = Adam([w], lr=0.05)
    first = None
    for _ in range(100):
        opt.zero_grad()
        loss = F.sum(F.mul(w, w))
        loss.backward()
        opt.step()
        first = first if first is not None else float(loss.data)
    assert float(np.sum(w.data ** 2)) < 0.1 * first


def test_checkpoint_roundtrip(tmp_path, rng):
    state = {"a.w": rng.standard_normal((3, 4)).astype(np.float32), "b": np.arange(5, dtype=np.float64),
             "scalar": np.array(2.5)}
    save_checkpoint(tmp_path / "c.bin", state, {"k": [1, 2]})
    raw = (tmp_path / "c.bin").read_bytes()
    assert raw[:8] == MAGIC
    cfg, loaded = load_checkpoint(tmp_path / "c.bin")
    assert cfg == {"k": [1, 2]} and set(loaded) == set(state)
    for k in state:
        assert loaded[k].dtype == state[k].dtype
        np.testing.assert_array_equal(loaded[k], state[k])


def test_checkpoint_errors(tmp_path):
    (tmp_path / "x.bin").write_bytes(b"garbage!")
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "x.bin")
    save_checkpoint(tmp_path / "c.bin", {"w": np.ones(100)}, {})
    raw = (tmp_path / "c.bin").read_bytes()
    (tmp_path / "t.bin").write_bytes(raw[:-10])
    with pytest.raises(CheckpointError, match="truncated"):
        load_checkpoint(tmp_path / "t.bin")
    (tmp_path / "v.bin").write_bytes(raw[:8] + (99).to_bytes(4, "little") + raw[12:])
    with pytest.raises(CheckpointError, match="version"):
        load_checkpoint(tmp_path / "v.bin")
