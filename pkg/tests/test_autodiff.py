"""Layer-graph engine: forward values, adjoints, dropout semantics, container."""

import numpy as np
import pytest

from mixterp import autodiff as ad
from mixterp.errors import DataFormatError, ShapeError, UsageError


def test_dense_forward_value():
    g = ad.Graph()
    g.input("x", (2,))
    g.dense("fc", "x", 2)
    g.set_param("fc/W", np.array([[1.0, 2.0], [3.0, 4.0]], dtype=np.float32))
    g.set_param("fc/b", np.array([0.5, -0.5], dtype=np.float32))
    tr = ad.forward(g, {"x": np.array([[1.0, 1.0]], dtype=np.float32)})
    np.testing.assert_allclose(tr.values["fc"], [[4.5, 5.5]], rtol=1e-6)


def test_sigmoid_gradient_at_zero():
    # d sigmoid/dx at 0 is exactly 1/4; surfaces through the input gradient
    g = ad.Graph(np.float64)
    g.input("x", (1,))
    g.sigmoid("s", "x")
    tr = ad.forward(g, {"x": np.zeros((1, 1))})
    assert tr.values["s"][0, 0] == pytest.approx(0.5)
    grads = ad.backward(g, tr, {"s": np.ones((1, 1))})
    assert grads["x"][0, 0] == pytest.approx(0.25, abs=1e-12)


def test_softplus_matches_reference():
    g = ad.Graph(np.float64)
    g.input("x", (5,))
    g.softplus("sp", "x")
    x = np.array([[-700.0, -2.0, 0.0, 2.0, 700.0]])
    tr = ad.forward(g, {"x": x})
    ref = np.log1p(np.exp(-np.abs(x))) + np.maximum(x, 0)
    np.testing.assert_allclose(tr.values["sp"], ref, rtol=1e-12)
    assert np.isfinite(tr.values["sp"]).all()
    assert tr.values["sp"][0, -1] == pytest.approx(700.0)


def test_relu_gradient_gates_on_sign():
    g = ad.Graph(np.float64)
    g.input("x", (4,))
    g.relu("r", "x")
    x = np.array([[-3.0, -0.5, 0.5, 3.0]])
    tr = ad.forward(g, {"x": x})
    grads = ad.backward(g, tr, {"r": np.ones((1, 4))})
    np.testing.assert_array_equal(grads["x"], [[0.0, 0.0, 1.0, 1.0]])


def test_maxpool_first_index_wins_on_tie():
    # window holds the max twice; row-major first occurrence takes the gradient
    g = ad.Graph(np.float64)
    g.input("x", (1, 2, 2))
    g.maxpool2x2("p", "x")
    x = np.array([[[[1.0, 5.0], [5.0, 3.0]]]])
    tr = ad.forward(g, {"x": x})
    assert tr.values["p"][0, 0, 0, 0] == 5.0
    grads = ad.backward(g, tr, {"p": np.full((1, 1, 1, 1), 2.0)})
    np.testing.assert_array_equal(grads["x"],
                                  [[[[0.0, 2.0], [0.0, 0.0]]]])


def test_conv2d_matches_quadruple_loop():
    rng = np.random.default_rng(42)
    b, c_in, c_out, h, w, k = 3, 2, 4, 6, 5, 3
    g = ad.Graph(np.float64)
    g.input("x", (c_in, h, w))
    g.conv2d("c", "x", c_out, kernel=k, rng=rng)
    x = rng.normal(size=(b, c_in, h, w))
    tr = ad.forward(g, {"x": x})

    wgt = g.nodes["c"].params["W"]
    bias = g.nodes["c"].params["b"]
    pad = k // 2
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    ref = np.zeros((b, c_out, h, w))
    for n in range(b):
        for o in range(c_out):
            for i in range(h):
                for j in range(w):
                    acc = bias[o]
                    for ci in range(c_in):
                        for di in range(k):
                            for dj in range(k):
                                acc += wgt[o, ci, di, dj] * xp[n, ci, i + di, j + dj]
                    ref[n, o, i, j] = acc
    np.testing.assert_allclose(tr.values["c"], ref, atol=1e-6)


def test_finite_difference_per_op():
    rng = np.random.default_rng(0)
    # dense -> relu -> dense, inputs kept away from the relu kink
    g = ad.Graph(np.float64)
    g.input("x", (3,))
    g.dense("d1", "x", 4, rng=rng)
    g.relu("r", "d1")
    g.dense("d2", "r", 2, rng=rng)
    x = rng.normal(size=(5, 3)) + 3.0
    assert ad.finite_difference_check(g, {"x": x}, 1e-4) < 1e-6


def test_finite_difference_conv_pool_graph():
    rng = np.random.default_rng(3)
    g = ad.Graph(np.float64)
    g.input("img", (1, 4, 4))
    g.conv2d("c1", "img", 2, rng=rng)
    g.sigmoid("s", "c1")
    g.maxpool2x2("p", "s")
    g.flatten("f", "p")
    g.dense("out", "f", 1, rng=rng)
    img = rng.normal(size=(2, 1, 4, 4))
    assert ad.finite_difference_check(g, {"img": img}, 1e-4) < 1e-6


def test_finite_difference_full_two_branch_graph():
    # composite graph exercising every op kind under frozen train-mode masks
    rng = np.random.default_rng(11)
    g = ad.Graph(np.float64)
    g.input("img", (1, 8, 8))
    g.conv2d("c1", "img", 2, rng=rng)
    g.relu("c1r", "c1")
    g.spatial_dropout("c1d", "c1r", 0.3)
    g.maxpool2x2("p1", "c1d")
    g.flatten("flat", "p1")
    g.input("loc", (3,))
    g.dense("side", "loc", 4, rng=rng)
    g.softplus("side_sp", "side")
    g.concat("cat", ["flat", "side_sp"])
    g.dropout("catd", "cat", 0.4)
    g.dense("head", "catd", 2, rng=rng)
    g.sigmoid("headsig", "head")
    inputs = {"img": rng.normal(size=(3, 1, 8, 8)),
              "loc": rng.normal(size=(3, 3))}
    # small step keeps +-eps probes on one side of relu kinks and pool ties
    err = ad.finite_difference_check(
        g, inputs, 1e-5, mode="train", rng=np.random.default_rng(5))
    assert err < 1e-4


def test_inverted_dropout_expectation():
    # E[mask * x] = x: surviving entries are scaled by 1/(1-rate)
    g = ad.Graph(np.float64)
    g.input("x", (4,))
    g.dropout("d", "x", 0.5)
    n = 100_000
    x = np.ones((n, 4))
    tr = ad.forward(g, {"x": x}, mode="train", rng=np.random.default_rng(8))
    mean = tr.values["d"].mean()
    assert mean == pytest.approx(1.0, abs=0.01)
    kept = tr.values["d"][tr.values["d"] > 0]
    assert np.all(kept == 2.0)  # exact scale factor at rate 0.5


def test_dropout_deterministic_mode_is_identity():
    g = ad.Graph(np.float64)
    g.input("x", (6,))
    g.dropout("d", "x", 0.9)
    x = np.arange(12, dtype=np.float64).reshape(2, 6)
    tr = ad.forward(g, {"x": x})
    np.testing.assert_array_equal(tr.values["d"], x)
    assert tr.masks == {}


def test_spatial_dropout_zeroes_whole_channels():
    g = ad.Graph(np.float64)
    g.input("x", (8, 4, 4))
    g.spatial_dropout("sd", "x", 0.5)
    x = np.ones((16, 8, 4, 4))
    tr = ad.forward(g, {"x": x}, mode="mc-sample", rng=np.random.default_rng(2))
    out = tr.values["sd"]
    # every (sample, channel) plane is either all zero or all 2.0
    flat = out.reshape(16, 8, -1)
    for s in range(16):
        for c in range(8):
            plane = flat[s, c]
            assert np.all(plane == plane[0])
            assert plane[0] in (0.0, 2.0)


def test_shared_mask_ties_batch_rows():
    g = ad.Graph(np.float64)
    g.input("x", (32,))
    g.dropout("d", "x", 0.5)
    x = np.ones((10, 32))
    tr = ad.forward(g, {"x": x}, mode="mc-sample",
                    rng=np.random.default_rng(4), shared_mask=True)
    out = tr.values["d"]
    assert tr.masks["d"].shape == (1, 32)
    for row in out[1:]:
        np.testing.assert_array_equal(row, out[0])


def test_mask_replay_and_determinism():
    g = ad.Graph(np.float64)
    g.input("x", (16,))
    g.dropout("d", "x", 0.5)
    x = np.ones((4, 16))
    t1 = ad.forward(g, {"x": x}, mode="train", rng=np.random.default_rng(7))
    t2 = ad.forward(g, {"x": x}, mode="train", rng=np.random.default_rng(7))
    np.testing.assert_array_equal(t1.values["d"], t2.values["d"])
    t3 = ad.forward(g, {"x": x}, mode="train", masks=t1.masks)
    np.testing.assert_array_equal(t1.values["d"], t3.values["d"])
    # a different seed must (overwhelmingly) give different masks
    t4 = ad.forward(g, {"x": x}, mode="train", rng=np.random.default_rng(9))
    assert not np.array_equal(t1.values["d"], t4.values["d"])


def test_multi_head_seed_gradients_accumulate():
    rng = np.random.default_rng(21)
    g = ad.Graph(np.float64)
    g.input("x", (3,))
    g.dense("trunk", "x", 4, rng=rng)
    g.dense("mu", "trunk", 1, rng=rng)
    g.dense("sig", "trunk", 1, rng=rng)
    x = rng.normal(size=(6, 3))
    tr = ad.forward(g, {"x": x})
    seeds = {"mu": np.full((6, 1), 0.3), "sig": np.full((6, 1), -0.7)}
    joint = ad.backward(g, tr, seeds)
    a = ad.backward(g, tr, {"mu": seeds["mu"]})
    b = ad.backward(g, tr, {"sig": seeds["sig"]})
    np.testing.assert_allclose(joint["trunk/W"],
                               a["trunk/W"] + b["trunk/W"], rtol=1e-12)


def test_parameter_count_and_order():
    g = ad.Graph()
    g.input("img", (2, 8, 8))
    g.conv2d("c", "img", 4)          # 4*2*9 + 4 = 76
    g.flatten("f", "c")
    g.dense("d", "f", 3)             # 256*3 + 3 = 771
    assert g.parameter_count() == 76 + 4 * 64 * 3 + 3
    assert list(g.params().keys()) == ["c/W", "c/b", "d/W", "d/b"]


def test_float32_storage_float64_verify():
    rng = np.random.default_rng(13)
    g = ad.Graph(np.float32)
    g.input("x", (4,))
    g.dense("d", "x", 4, rng=rng)
    tr = ad.forward(g, {"x": np.ones((2, 4), dtype=np.float32)})
    assert tr.values["d"].dtype == np.float32
    g64 = g.cast(np.float64)
    assert g64.nodes["d"].params["W"].dtype == np.float64
    np.testing.assert_allclose(g64.nodes["d"].params["W"],
                               g.nodes["d"].params["W"])


def test_build_time_shape_validation():
    g = ad.Graph()
    g.input("img", (1, 5, 6))
    with pytest.raises(ShapeError):
        g.maxpool2x2("p", "img")  # odd height
    with pytest.raises(ShapeError):
        g.dense("d", "img", 3)  # dense on an image
    g2 = ad.Graph()
    g2.input("x", (3,))
    with pytest.raises(UsageError):
        g2.input("x", (3,))  # duplicate name
    with pytest.raises(UsageError):
        g2.dropout("d", "x", 1.0)


def test_forward_runtime_validation():
    g = ad.Graph()
    g.input("x", (3,))
    g.dropout("d", "x", 0.5)
    with pytest.raises(UsageError):
        ad.forward(g, {}, mode="deterministic")
    with pytest.raises(ShapeError):
        ad.forward(g, {"x": np.ones((2, 4))})
    with pytest.raises(UsageError):
        ad.forward(g, {"x": np.ones((2, 3))}, mode="warp")
    with pytest.raises(UsageError):
        ad.forward(g, {"x": np.ones((2, 3))}, mode="train")  # rng required


def test_tensor_container_roundtrip_bitexact(tmp_path):
    rng = np.random.default_rng(0)
    tensors = {
        "c1/W": rng.normal(size=(4, 2, 3, 3)).astype(np.float32),
        "c1/b": rng.normal(size=4).astype(np.float32),
        "step": np.float32(17.0).reshape(()),
    }
    cfg = {"seed": "123", "epochs": "10"}
    path = tmp_path / "model.mtx"
    ad.write_tensors(path, tensors, cfg)
    back, cfg2 = ad.read_tensors(path)
    assert cfg2 == cfg
    assert list(back.keys()) == list(tensors.keys())
    for k in tensors:
        assert back[k].tobytes() == tensors[k].tobytes()
        assert back[k].shape == tensors[k].shape
    # writing twice yields identical bytes
    path2 = tmp_path / "model2.mtx"
    ad.write_tensors(path2, tensors, cfg)
    assert path.read_bytes() == path2.read_bytes()


def test_tensor_container_rejects_garbage(tmp_path):
    p = tmp_path / "bad.mtx"
    p.write_bytes(b"not a tensor file\njunk")
    with pytest.raises(DataFormatError):
        ad.read_tensors(p)
    q = tmp_path / "trunc.mtx"
    ad.write_tensors(q, {"w": np.ones(8, dtype=np.float32)}, {})
    q.write_bytes(q.read_bytes()[:-4])
    with pytest.raises(DataFormatError):
        ad.read_tensors(q)
