"""Graph-runner tests. Convolution and pooling are checked against
brute-force loop oracles; whole graphs against step-by-step compositions of
those oracles. Fixture models are built by the independent test encoder."""

import numpy as np
import pytest

import onnxenc as enc
from cervifuse import onnx_rt
from cervifuse.errors import InferenceError, TrunkLoadError


# ---------------------------------------------------------------- oracles

def conv_loops(x, w, b=None, strides=(1, 1), pads=(0, 0, 0, 0), group=1):
    bsz, cin, h, wd = x.shape
    m, cg, kh, kw = w.shape
    pt, pl, pb, pr = pads
    sh, sw = strides
    ho = (h + pt + pb - kh) // sh + 1
    wo = (wd + pl + pr - kw) // sw + 1
    xp = np.pad(x.astype(np.float64), ((0, 0), (0, 0), (pt, pb), (pl, pr)))
    mg = m // group
    out = np.zeros((bsz, m, ho, wo))
    for bi in range(bsz):
        for mi in range(m):
            g = mi // mg
            for i in range(ho):
                for j in range(wo):
                    acc = 0.0
                    for c in range(cg):
                        for u in range(kh):
                            for v in range(kw):
                                acc += xp[bi, g * cg + c, i * sh + u, j * sw + v] \
                                    * float(w[mi, c, u, v])
                    out[bi, mi, i, j] = acc + (float(b[mi]) if b is not None else 0.0)
    return out


def maxpool_loops(x, kernel, strides, pads=(0, 0, 0, 0)):
    bsz, c, h, w = x.shape
    pt, pl, pb, pr = pads
    kh, kw = kernel
    sh, sw = strides
    xp = np.pad(x.astype(np.float64), ((0, 0), (0, 0), (pt, pb), (pl, pr)),
                constant_values=-np.inf)
    ho = (h + pt + pb - kh) // sh + 1
    wo = (w + pl + pr - kw) // sw + 1
    out = np.zeros((bsz, c, ho, wo))
    for bi in range(bsz):
        for ci in range(c):
            for i in range(ho):
                for j in range(wo):
                    out[bi, ci, i, j] = xp[bi, ci, i * sh:i * sh + kh,
                                           j * sw:j * sw + kw].max()
    return out


def bn_formula(x, scale, bias, mean, var, eps):
    return scale.reshape(1, -1, 1, 1) * (x - mean.reshape(1, -1, 1, 1)) \
        / np.sqrt(var.reshape(1, -1, 1, 1) + eps) + bias.reshape(1, -1, 1, 1)


def _rand(shape, seed):
    return np.random.default_rng(seed).normal(size=shape).astype(np.float32)


# ------------------------------------------------------------- kernel ops

@pytest.mark.parametrize("kwargs", [
    {},
    {"strides": (2, 2), "pads": (1, 1, 1, 1)},
    {"pads": (1, 2, 0, 1)},
    {"strides": (2, 1)},
])
def test_conv2d_matches_loop_oracle(kwargs):
    x = _rand((2, 4, 6, 5), 0)
    w = _rand((6, 4, 3, 3), 1)
    b = _rand((6,), 2)
    got = onnx_rt.conv2d(x, w, b, **kwargs)
    want = conv_loops(x, w, b, **kwargs)
    assert got.shape == want.shape
    assert np.allclose(got, want, atol=1e-4)


def test_conv2d_grouped_matches_loop_oracle():
    x = _rand((1, 4, 5, 5), 3)
    w = _rand((6, 2, 3, 3), 4)
    got = onnx_rt.conv2d(x, w, None, pads=(1, 1, 1, 1), group=2)
    assert np.allclose(got, conv_loops(x, w, None, pads=(1, 1, 1, 1), group=2),
                       atol=1e-4)


def test_conv2d_depthwise_matches_loop_oracle():
    x = _rand((2, 5, 6, 6), 5)
    w = _rand((5, 1, 3, 3), 6)
    b = _rand((5,), 7)
    got = onnx_rt.conv2d(x, w, b, pads=(1, 1, 1, 1), group=5)
    assert np.allclose(got, conv_loops(x, w, b, pads=(1, 1, 1, 1), group=5),
                       atol=1e-4)


def test_conv2d_channel_mismatch():
    with pytest.raises(InferenceError):
        onnx_rt.conv2d(_rand((1, 3, 4, 4), 0), _rand((2, 4, 3, 3), 1))


@pytest.mark.parametrize("kernel,strides,pads", [
    ((2, 2), (2, 2), (0, 0, 0, 0)),
    ((3, 3), (2, 2), (1, 1, 1, 1)),
    ((2, 3), (1, 2), (0, 1, 0, 1)),
])
def test_maxpool_matches_loop_oracle(kernel, strides, pads):
    x = _rand((2, 3, 7, 8), 8)
    got = onnx_rt.maxpool2d(x, kernel, strides, pads)
    assert np.allclose(got, maxpool_loops(x, kernel, strides, pads))


# ------------------------------------------------------------ whole graph

def _residual_model(use_float_data=False):
    w1 = _rand((4, 3, 3, 3), 10)
    b1 = _rand((4,), 11)
    w2 = _rand((4, 4, 3, 3), 12)
    b2 = _rand((4,), 13)
    scale = np.abs(_rand((4,), 14)) + 0.5
    bias = _rand((4,), 15)
    mean = _rand((4,), 16)
    var = np.abs(_rand((4,), 17)) + 0.2

    nodes = [
        enc.node("Conv", ["x", "w1", "b1"], ["c1"], "conv1",
                 attrs=[enc.attr_ints("strides", (1, 1)),
                        enc.attr_ints("pads", (1, 1, 1, 1))]),
        enc.node("Relu", ["c1"], ["r1"], "relu1"),
        enc.node("Conv", ["r1", "w2", "b2"], ["c2"], "conv2",
                 attrs=[enc.attr_ints("pads", (1, 1, 1, 1))]),
        enc.node("Add", ["c2", "r1"], ["sum1"], "add1"),
        enc.node("BatchNormalization", ["sum1", "g", "be", "mu", "va"], ["bn1"],
                 "bn1", attrs=[enc.attr_float("epsilon", 1e-3)]),
        enc.node("MaxPool", ["bn1"], ["pool1"], "pool1",
                 attrs=[enc.attr_ints("kernel_shape", (2, 2)),
                        enc.attr_ints("strides", (2, 2))]),
    ]
    inits = [enc.tensor("w1", w1, use_float_data), enc.tensor("b1", b1),
             enc.tensor("w2", w2), enc.tensor("b2", b2),
             enc.tensor("g", scale), enc.tensor("be", bias),
             enc.tensor("mu", mean), enc.tensor("va", var)]
    g = enc.graph(nodes, inits, [enc.value_info("x", (1, 3, 8, 8)),
                                 enc.value_info("w1", (4, 3, 3, 3))],
                  [enc.value_info("pool1", (1, 4, 4, 4))], name="resnet_ish")
    weights = dict(w1=w1, b1=b1, w2=w2, b2=b2, scale=scale, bias=bias,
                   mean=mean, var=var)
    return enc.model(g, opset=13), weights


def _oracle_forward(x, wts):
    c1 = conv_loops(x, wts["w1"], wts["b1"], pads=(1, 1, 1, 1))
    r1 = np.maximum(c1, 0)
    c2 = conv_loops(r1.astype(np.float32), wts["w2"], wts["b2"], pads=(1, 1, 1, 1))
    s = c2 + r1
    bn = bn_formula(s, wts["scale"].astype(np.float64), wts["bias"].astype(np.float64),
                    wts["mean"].astype(np.float64), wts["var"].astype(np.float64), 1e-3)
    return maxpool_loops(bn.astype(np.float32), (2, 2), (2, 2))


def test_graph_runner_matches_composed_oracle(tmp_path):
    blob, wts = _residual_model()
    path = tmp_path / "m.onnx"
    path.write_bytes(blob)
    graph = onnx_rt.load_onnx(path)
    runner = onnx_rt.GraphRunner(graph)
    x = _rand((1, 3, 8, 8), 20)
    got = runner.run({"x": x})
    want = _oracle_forward(x, wts)
    assert got.shape == (1, 4, 4, 4)
    assert np.allclose(got, want, atol=1e-3)


def test_graph_parse_details(tmp_path):
    blob, wts = _residual_model()
    graph = onnx_rt.load_model_bytes(blob)
    assert graph.name == "resnet_ish"
    assert graph.opset == 13
    # graph inputs listed alongside an initializer: only true feeds remain
    assert graph.input_names == ["x"]
    assert set(graph.initializers) == {"w1", "b1", "w2", "b2", "g", "be", "mu", "va"}
    assert np.array_equal(graph.initializers["w1"], wts["w1"])
    assert graph.output_names == ["pool1"]
    assert [n.op_type for n in graph.nodes] == [
        "Conv", "Relu", "Conv", "Add", "BatchNormalization", "MaxPool"]


def test_float_data_initializers_parse_equal():
    blob_raw, _ = _residual_model(use_float_data=False)
    blob_fd, _ = _residual_model(use_float_data=True)
    a = onnx_rt.load_model_bytes(blob_raw).initializers["w1"]
    b = onnx_rt.load_model_bytes(blob_fd).initializers["w1"]
    assert np.array_equal(a, b)


def test_intermediate_outputs_retrievable():
    blob, wts = _residual_model()
    runner = onnx_rt.GraphRunner(onnx_rt.load_model_bytes(blob))
    x = _rand((1, 3, 8, 8), 21)
    r1 = runner.run({"x": x}, output_name="r1")
    want = np.maximum(conv_loops(x, wts["w1"], wts["b1"], pads=(1, 1, 1, 1)), 0)
    assert np.allclose(r1, want, atol=1e-4)


# ----------------------------------------------------------------- errors

def test_unsupported_op_rejected_at_load():
    g = enc.graph([enc.node("Gemm", ["x", "w"], ["y"])],
                  [enc.tensor("w", np.ones((2, 2), np.float32))],
                  [enc.value_info("x")], [enc.value_info("y")])
    graph = onnx_rt.load_model_bytes(enc.model(g))
    with pytest.raises(TrunkLoadError, match="Gemm"):
        onnx_rt.GraphRunner(graph)


def test_missing_feed_raises():
    blob, _ = _residual_model()
    runner = onnx_rt.GraphRunner(onnx_rt.load_model_bytes(blob))
    with pytest.raises(InferenceError, match="missing feed"):
        runner.run({})


def test_unproduced_output_rejected():
    g = enc.graph([enc.node("Relu", ["x"], ["y"])], [],
                  [enc.value_info("x")], [enc.value_info("zzz")])
    with pytest.raises(TrunkLoadError, match="zzz"):
        onnx_rt.GraphRunner(onnx_rt.load_model_bytes(enc.model(g)))


def test_junk_bytes_rejected():
    with pytest.raises(TrunkLoadError):
        onnx_rt.load_model_bytes(b"\xff\xff\xff\xff\xff\xff\xff\xff\xff\xff")
    with pytest.raises(TrunkLoadError):
        onnx_rt.load_model_bytes(b"")


def test_dilated_conv_rejected():
    g = enc.graph([enc.node("Conv", ["x", "w"], ["y"],
                            attrs=[enc.attr_ints("dilations", (2, 2))])],
                  [enc.tensor("w", np.ones((1, 1, 3, 3), np.float32))],
                  [enc.value_info("x")], [enc.value_info("y")])
    runner = onnx_rt.GraphRunner(onnx_rt.load_model_bytes(enc.model(g)))
    with pytest.raises(InferenceError, match="dilated"):
        runner.run({"x": np.ones((1, 1, 5, 5), np.float32)})


def test_ceil_mode_maxpool_rejected():
    g = enc.graph([enc.node("MaxPool", ["x"], ["y"],
                            attrs=[enc.attr_ints("kernel_shape", (2, 2)),
                                   enc.attr_int("ceil_mode", 1)])],
                  [], [enc.value_info("x")], [enc.value_info("y")])
    runner = onnx_rt.GraphRunner(onnx_rt.load_model_bytes(enc.model(g)))
    with pytest.raises(InferenceError, match="ceil_mode"):
        runner.run({"x": np.ones((1, 1, 5, 5), np.float32)})


def test_missing_intermediate_value():
    g = enc.graph([enc.node("Relu", ["ghost"], ["y"])], [],
                  [enc.value_info("x")], [enc.value_info("y")])
    runner = onnx_rt.GraphRunner(onnx_rt.load_model_bytes(enc.model(g)))
    with pytest.raises(InferenceError, match="ghost"):
        runner.run({"x": np.ones((1, 1, 2, 2), np.float32)})
