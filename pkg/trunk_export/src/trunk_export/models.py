"""Source-framework models: four classic convolutional trunks built in
numpy, truncated at the final convolutional block (pre-pooling; the
downstream consumer owns the global pooling).

Weights are He-initialized from a seed, so a (model, seed) pair is fully
reproducible. Pretrained parameter files can replace the random draws
later without touching the graph construction; the exporter only reads
the weights dict.

The reference forward pass here is the ground truth exports are verified
against. Its operator implementations deliberately differ from the ones
in runner.py (single-contraction windows here, shift-and-accumulate
there) so a comparison between the two is meaningful.
"""

import math

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ExportError, GraphError
from .graphdef import GraphDef, Node

_BN_EPS = 1e-5


# ------------------------------------------------------- reference operators

def conv_ref(x, w, b, strides=(1, 1), pads=(0, 0, 0, 0), group=1):
    cin = x.shape[1]
    m, cg, kh, kw = w.shape
    pt, pl, pb, pr = pads
    xp = np.pad(x, ((0, 0), (0, 0), (pt, pb), (pl, pr)))
    sh, sw = strides
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::sh, ::sw]
    if group == cin and cg == 1 and m == cin:
        out = np.einsum("bcijhw,chw->bcij", win, w[:, 0], optimize=True)
    elif group == 1:
        out = np.tensordot(win, w, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    else:
        mg = m // group
        parts = [np.tensordot(win[:, g * cg:(g + 1) * cg], w[g * mg:(g + 1) * mg],
                              axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
                 for g in range(group)]
        out = np.concatenate(parts, axis=1)
    out = np.ascontiguousarray(out, dtype=np.float32)
    return out + b.reshape(1, -1, 1, 1)


def maxpool_ref(x, kernel, strides, pads=(0, 0, 0, 0)):
    pt, pl, pb, pr = pads
    xp = np.pad(x, ((0, 0), (0, 0), (pt, pb), (pl, pr)), constant_values=-np.inf)
    kh, kw = kernel
    sh, sw = strides
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::sh, ::sw]
    return np.ascontiguousarray(win.max(axis=(4, 5)), dtype=np.float32)


def bn_ref(x, scale, bias, mean, var, eps):
    shape = (1, -1, 1, 1)
    xhat = (x - mean.reshape(shape)) / np.sqrt(var.reshape(shape) + eps)
    return (xhat * scale.reshape(shape) + bias.reshape(shape)).astype(np.float32)


def reference_forward(graph: GraphDef, x: np.ndarray) -> np.ndarray:
    """Run a GraphDef on a float32 NCHW batch with the reference operators."""
    vals = {graph.input_name: np.asarray(x, dtype=np.float32)}
    for node in graph.nodes:
        get = lambda i: graph.weights.get(node.inputs[i], vals.get(node.inputs[i]))
        if node.op == "Conv":
            a = node.attrs
            out = conv_ref(get(0), get(1), get(2),
                           strides=tuple(a.get("strides", (1, 1))),
                           pads=tuple(a.get("pads", (0, 0, 0, 0))),
                           group=a.get("group", 1))
        elif node.op == "Relu":
            out = np.maximum(get(0), 0)
        elif node.op == "MaxPool":
            a = node.attrs
            out = maxpool_ref(get(0), tuple(a["kernel_shape"]),
                              tuple(a.get("strides", a["kernel_shape"])),
                              tuple(a.get("pads", (0, 0, 0, 0))))
        elif node.op == "Add":
            out = get(0) + get(1)
        elif node.op == "BatchNormalization":
            out = bn_ref(get(0), get(1), get(2), get(3), get(4),
                         node.attrs.get("epsilon", _BN_EPS))
        else:
            raise GraphError(f"reference forward: unsupported op {node.op!r}")
        vals[node.output] = out
    return vals[graph.output_name]


# ------------------------------------------------------------ graph builder

class _Builder:
    """Appends nodes in execution order and draws weights from one rng."""

    def __init__(self, name: str, rng: np.random.Generator):
        self.name = name
        self.rng = rng
        self.nodes = []
        self.weights = {}
        self.input_name = "input"

    def _weight(self, name, arr):
        if name in self.weights:
            raise GraphError(f"duplicate weight name {name}")
        self.weights[name] = np.ascontiguousarray(arr, dtype=np.float32)
        return name

    def conv(self, tag, src, cin, cout, k=3, stride=1, pad=None, group=1):
        if pad is None:
            pad = (k - 1) // 2
        std = math.sqrt(2.0 / ((cin // group) * k * k))
        w = self._weight(f"{tag}_W",
                         self.rng.normal(0, std, (cout, cin // group, k, k)))
        b = self._weight(f"{tag}_b", self.rng.normal(0, 0.05, cout))
        attrs = {"strides": [stride, stride], "pads": [pad, pad, pad, pad]}
        if group != 1:
            attrs["group"] = group
        self.nodes.append(Node("Conv", [src, w, b], tag, attrs))
        return tag

    def bn(self, tag, src, c, scale_range=(0.8, 1.2)):
        names = [
            self._weight(f"{tag}_scale", self.rng.uniform(*scale_range, c)),
            self._weight(f"{tag}_bias", self.rng.normal(0, 0.1, c)),
            self._weight(f"{tag}_mean", self.rng.normal(0, 0.2, c)),
            self._weight(f"{tag}_var", self.rng.uniform(0.5, 1.5, c)),
        ]
        self.nodes.append(Node("BatchNormalization", [src] + names, tag,
                               {"epsilon": _BN_EPS}))
        return tag

    def relu(self, tag, src):
        self.nodes.append(Node("Relu", [src], tag))
        return tag

    def maxpool(self, tag, src, k, stride, pad=0):
        self.nodes.append(Node("MaxPool", [src], tag,
                               {"kernel_shape": [k, k], "strides": [stride, stride],
                                "pads": [pad, pad, pad, pad]}))
        return tag

    def add(self, tag, a, b):
        self.nodes.append(Node("Add", [a, b], tag))
        return tag

    def graph(self, output_name) -> GraphDef:
        g = GraphDef(self.name, self.input_name, output_name,
                     self.nodes, self.weights)
        g.validate()
        return g


# ------------------------------------------------------------- architectures

def _vgg(name, rng, block_sizes):
    """Stacked 3x3 conv blocks with 2x2 pools between them; the pool after
    the last block is omitted (truncation point)."""
    b = _Builder(name, rng)
    x = b.input_name
    cin = 3
    last_block = len(block_sizes)
    for i, (cout, n_convs) in enumerate(block_sizes, start=1):
        for j in range(1, n_convs + 1):
            x = b.conv(f"block{i}_conv{j}", x, cin, cout, k=3)
            x = b.relu(f"block{i}_conv{j}_relu", x)
            cin = cout
        if i != last_block:
            x = b.maxpool(f"block{i}_pool", x, k=2, stride=2)
    return b.graph(x)


def build_vgg16(seed: int) -> GraphDef:
    rng = np.random.default_rng(seed)
    return _vgg("vgg16", rng, [(64, 2), (128, 2), (256, 3), (512, 3), (512, 3)])


def build_vgg19(seed: int) -> GraphDef:
    rng = np.random.default_rng(seed)
    return _vgg("vgg19", rng, [(64, 2), (128, 2), (256, 4), (512, 4), (512, 4)])


def build_resnet50(seed: int) -> GraphDef:
    """Bottleneck residual net, 3-4-6-3 blocks, stride on the 3x3 conv.

    The closing BN of every residual branch gets a small scale so branch
    outputs stay well below the trunk signal; with dozens of additive
    blocks this keeps float32 activations in a comparable range.
    """
    rng = np.random.default_rng(seed)
    b = _Builder("resnet50", rng)
    x = b.conv("conv1", b.input_name, 3, 64, k=7, stride=2, pad=3)
    x = b.bn("conv1_bn", x, 64)
    x = b.relu("conv1_relu", x)
    x = b.maxpool("pool1", x, k=3, stride=2, pad=1)
    cin = 64
    stages = [(64, 256, 3, 1), (128, 512, 4, 2), (256, 1024, 6, 2),
              (512, 2048, 3, 2)]
    for si, (mid, cout, blocks, first_stride) in enumerate(stages, start=1):
        for bi in range(1, blocks + 1):
            tag = f"s{si}b{bi}"
            stride = first_stride if bi == 1 else 1
            if bi == 1:
                sc = b.conv(f"{tag}_proj", x, cin, cout, k=1, stride=stride)
                sc = b.bn(f"{tag}_proj_bn", sc, cout)
            else:
                sc = x
            h = b.conv(f"{tag}_c1", x, cin, mid, k=1)
            h = b.bn(f"{tag}_c1_bn", h, mid)
            h = b.relu(f"{tag}_c1_relu", h)
            h = b.conv(f"{tag}_c2", h, mid, mid, k=3, stride=stride)
            h = b.bn(f"{tag}_c2_bn", h, mid)
            h = b.relu(f"{tag}_c2_relu", h)
            h = b.conv(f"{tag}_c3", h, mid, cout, k=1)
            h = b.bn(f"{tag}_c3_bn", h, cout, scale_range=(0.05, 0.15))
            x = b.add(f"{tag}_add", h, sc)
            x = b.relu(f"{tag}_out", x)
            cin = cout
    return b.graph(x)


def _sepconv(b, tag, src, cin, cout):
    """Depthwise 3x3 followed by pointwise 1x1."""
    h = b.conv(f"{tag}_dw", src, cin, cin, k=3, group=cin)
    return b.conv(f"{tag}_pw", h, cin, cout, k=1)


def build_xception(seed: int) -> GraphDef:
    """Depthwise-separable trunk in the entry/middle/exit layout."""
    rng = np.random.default_rng(seed)
    b = _Builder("xception", rng)
    x = b.conv("conv1", b.input_name, 3, 32, k=3, stride=2)
    x = b.bn("conv1_bn", x, 32)
    x = b.relu("conv1_relu", x)
    x = b.conv("conv2", x, 32, 64, k=3)
    x = b.bn("conv2_bn", x, 64)
    x = b.relu("conv2_relu", x)
    cin = 64
    for i, cout in enumerate((128, 256, 728), start=1):
        tag = f"entry{i}"
        sc = b.conv(f"{tag}_proj", x, cin, cout, k=1, stride=2)
        sc = b.bn(f"{tag}_proj_bn", sc, cout)
        h = _sepconv(b, f"{tag}_sep1", x, cin, cout)
        h = b.bn(f"{tag}_sep1_bn", h, cout)
        h = b.relu(f"{tag}_sep1_relu", h)
        h = _sepconv(b, f"{tag}_sep2", h, cout, cout)
        h = b.bn(f"{tag}_sep2_bn", h, cout, scale_range=(0.05, 0.15))
        h = b.maxpool(f"{tag}_pool", h, k=3, stride=2, pad=1)
        x = b.add(f"{tag}_add", h, sc)
        x = b.relu(f"{tag}_out", x)
        cin = cout
    for i in range(1, 9):
        tag = f"middle{i}"
        h = x
        for j in (1, 2, 3):
            h = _sepconv(b, f"{tag}_sep{j}", h, 728, 728)
            last = j == 3
            h = b.bn(f"{tag}_sep{j}_bn", h, 728,
                     scale_range=(0.05, 0.15) if last else (0.8, 1.2))
            if not last:
                h = b.relu(f"{tag}_sep{j}_relu", h)
        x = b.add(f"{tag}_add", h, x)
        x = b.relu(f"{tag}_out", x)
    sc = b.conv("exit_proj", x, 728, 1024, k=1, stride=2)
    sc = b.bn("exit_proj_bn", sc, 1024)
    h = _sepconv(b, "exit_sep1", x, 728, 728)
    h = b.bn("exit_sep1_bn", h, 728)
    h = b.relu("exit_sep1_relu", h)
    h = _sepconv(b, "exit_sep2", h, 728, 1024)
    h = b.bn("exit_sep2_bn", h, 1024, scale_range=(0.05, 0.15))
    h = b.maxpool("exit_pool", h, k=3, stride=2, pad=1)
    x = b.add("exit_add", h, sc)
    x = b.relu("exit_out", x)
    x = _sepconv(b, "exit_sep3", x, 1024, 1536)
    x = b.bn("exit_sep3_bn", x, 1536)
    x = b.relu("exit_sep3_relu", x)
    x = _sepconv(b, "exit_sep4", x, 1536, 2048)
    x = b.bn("exit_sep4_bn", x, 2048)
    x = b.relu("exit_sep4_relu", x)
    return b.graph(x)


# name -> (builder, output_dim, preprocessing for the manifest)
CATALOG = {
    "vgg16": (build_vgg16, 512,
              {"channel_order": "bgr", "scale": 1.0,
               "mean": [103.939, 116.779, 123.68], "std": [1.0, 1.0, 1.0]}),
    "vgg19": (build_vgg19, 512,
              {"channel_order": "bgr", "scale": 1.0,
               "mean": [103.939, 116.779, 123.68], "std": [1.0, 1.0, 1.0]}),
    "resnet50": (build_resnet50, 2048,
                 {"channel_order": "bgr", "scale": 1.0,
                  "mean": [103.939, 116.779, 123.68], "std": [1.0, 1.0, 1.0]}),
    "xception": (build_xception, 2048,
                 {"channel_order": "rgb", "scale": 1.0 / 127.5,
                  "mean": [1.0, 1.0, 1.0], "std": [1.0, 1.0, 1.0]}),
}


def build(model_name: str, seed: int = 0) -> GraphDef:
    try:
        builder, _dim, _pp = CATALOG[model_name]
    except KeyError:
        raise ExportError(
            f"unknown model {model_name!r}; supported: "
            f"{', '.join(sorted(CATALOG))}") from None
    return builder(seed)
