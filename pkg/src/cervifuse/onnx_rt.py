"""Minimal ONNX reader and executor.

Parses the protobuf wire format directly (no protobuf dependency) for the
small subset of fields a frozen convolutional trunk needs, and runs the graph
with numpy. Supported ops: Conv (strides/pads/groups), Relu, MaxPool, Add,
BatchNormalization (inference). Tensors are float32 NCHW throughout.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import InferenceError, TrunkLoadError

# wire types
_VARINT, _I64, _LEN, _I32 = 0, 1, 2, 5


def _read_varint(buf: bytes, pos: int):
    result = 0
    shift = 0
    while True:
        if pos >= len(buf):
            raise TrunkLoadError("truncated varint in model file")
        b = buf[pos]
        pos += 1
        result |= (b & 0x7F) << shift
        if not b & 0x80:
            return result, pos
        shift += 7
        if shift > 63:
            raise TrunkLoadError("varint overflow in model file")


def _iter_fields(buf: bytes):
    """Yield (field_number, wire_type, value). value is an int for varint
    fields and a bytes slice for the others."""
    pos = 0
    while pos < len(buf):
        tag, pos = _read_varint(buf, pos)
        fno, wt = tag >> 3, tag & 7
        if wt == _VARINT:
            val, pos = _read_varint(buf, pos)
        elif wt == _I64:
            val, pos = buf[pos:pos + 8], pos + 8
        elif wt == _I32:
            val, pos = buf[pos:pos + 4], pos + 4
        elif wt == _LEN:
            n, pos = _read_varint(buf, pos)
            if pos + n > len(buf):
                raise TrunkLoadError("truncated field in model file")
            val, pos = buf[pos:pos + n], pos + n
        else:
            raise TrunkLoadError(f"unsupported wire type {wt}")
        yield fno, wt, val


def _packed_varints(val, wt):
    if wt == _VARINT:
        return [val]
    out = []
    pos = 0
    while pos < len(val):
        v, pos = _read_varint(val, pos)
        out.append(v)
    return out


@dataclass
class OnnxNode:
    op_type: str
    name: str = ""
    inputs: list = field(default_factory=list)
    outputs: list = field(default_factory=list)
    attrs: dict = field(default_factory=dict)


@dataclass
class OnnxGraph:
    name: str
    nodes: list
    initializers: dict          # name -> float32 ndarray
    input_names: list           # graph inputs that must be fed
    output_names: list
    opset: int


# AttributeProto.type values
_ATTR_FLOAT, _ATTR_INT, _ATTR_STRING = 1, 2, 3
_ATTR_FLOATS, _ATTR_INTS = 6, 7


def _parse_attribute(buf: bytes):
    name, atype = "", None
    f_val, i_val, s_val = None, None, None
    floats, ints = [], []
    for fno, wt, val in _iter_fields(buf):
        if fno == 1:
            name = val.decode("utf-8")
        elif fno == 2:
            f_val = np.frombuffer(val, dtype="<f4")[0]
        elif fno == 3:
            i_val = val if isinstance(val, int) else int.from_bytes(val, "little")
        elif fno == 4:
            s_val = val.decode("utf-8")
        elif fno == 7:
            floats.extend(np.frombuffer(val, dtype="<f4").tolist()
                          if wt == _LEN else [np.frombuffer(val, dtype="<f4")[0]])
        elif fno == 8:
            ints.extend(_packed_varints(val, wt))
        elif fno == 20:
            atype = val
    if atype == _ATTR_FLOAT:
        return name, float(f_val)
    if atype == _ATTR_INT:
        return name, int(i_val)
    if atype == _ATTR_STRING:
        return name, s_val
    if atype == _ATTR_FLOATS:
        return name, [float(x) for x in floats]
    if atype == _ATTR_INTS:
        return name, [int(x) for x in ints]
    # type tag missing: fall back on whichever field was present
    for candidate in (i_val, f_val, s_val):
        if candidate is not None:
            return name, candidate
    if ints:
        return name, ints
    if floats:
        return name, floats
    raise TrunkLoadError(f"attribute {name!r} has an unsupported type {atype}")


def _parse_node(buf: bytes) -> OnnxNode:
    node = OnnxNode(op_type="")
    for fno, _wt, val in _iter_fields(buf):
        if fno == 1:
            node.inputs.append(val.decode("utf-8"))
        elif fno == 2:
            node.outputs.append(val.decode("utf-8"))
        elif fno == 3:
            node.name = val.decode("utf-8")
        elif fno == 4:
            node.op_type = val.decode("utf-8")
        elif fno == 5:
            k, v = _parse_attribute(val)
            node.attrs[k] = v
        elif fno == 7 and val:
            domain = val.decode("utf-8")
            if domain not in ("", "ai.onnx"):
                raise TrunkLoadError(f"unsupported op domain {domain!r}")
    return node


_FLOAT_DTYPE = 1  # TensorProto.DataType.FLOAT


def _parse_tensor(buf: bytes):
    dims, name = [], ""
    data_type = None
    raw, floats = None, None
    for fno, wt, val in _iter_fields(buf):
        if fno == 1:
            dims.extend(_packed_varints(val, wt))
        elif fno == 2:
            data_type = val
        elif fno == 4:
            floats = np.frombuffer(val, dtype="<f4") if wt == _LEN else \
                np.frombuffer(val, dtype="<f4")
        elif fno == 8:
            name = val.decode("utf-8")
        elif fno == 9:
            raw = val
    if data_type != _FLOAT_DTYPE:
        raise TrunkLoadError(f"initializer {name!r}: only float32 tensors supported")
    if raw is not None:
        arr = np.frombuffer(raw, dtype="<f4")
    elif floats is not None:
        arr = np.asarray(floats, dtype=np.float32)
    else:
        arr = np.zeros(0, dtype=np.float32)
    expect = int(np.prod(dims)) if dims else arr.size
    if arr.size != expect:
        raise TrunkLoadError(f"initializer {name!r}: payload size {arr.size} != shape {dims}")
    return name, arr.reshape(dims).astype(np.float32)


def _value_info_name(buf: bytes) -> str:
    for fno, _wt, val in _iter_fields(buf):
        if fno == 1:
            return val.decode("utf-8")
    return ""


def _parse_graph(buf: bytes, opset: int) -> OnnxGraph:
    nodes, inits, inputs, outputs = [], {}, [], []
    gname = ""
    for fno, _wt, val in _iter_fields(buf):
        if fno == 1:
            nodes.append(_parse_node(val))
        elif fno == 2:
            gname = val.decode("utf-8")
        elif fno == 5:
            name, arr = _parse_tensor(val)
            inits[name] = arr
        elif fno == 11:
            inputs.append(_value_info_name(val))
        elif fno == 12:
            outputs.append(_value_info_name(val))
    feed_inputs = [n for n in inputs if n not in inits]
    return OnnxGraph(name=gname, nodes=nodes, initializers=inits,
                     input_names=feed_inputs, output_names=outputs, opset=opset)


def load_model_bytes(data: bytes) -> OnnxGraph:
    graph_buf = None
    opset = 0
    for fno, _wt, val in _iter_fields(data):
        if fno == 7:
            graph_buf = val
        elif fno == 8:
            for sub_fno, _swt, sub in _iter_fields(val):
                if sub_fno == 2:
                    opset = sub if isinstance(sub, int) else 0
    if graph_buf is None:
        raise TrunkLoadError("model file holds no graph")
    return _parse_graph(graph_buf, opset)


def load_onnx(path) -> OnnxGraph:
    try:
        with open(path, "rb") as f:
            data = f.read()
    except OSError as e:
        raise TrunkLoadError(f"cannot read model file {path}: {e}") from None
    return load_model_bytes(data)


# ------------------------------------------------------------- operators

def _pair(attrs, key, default):
    v = attrs.get(key, default)
    return [int(x) for x in v]


def conv2d(x, w, b=None, strides=(1, 1), pads=(0, 0, 0, 0), group=1):
    """NCHW convolution. pads are (top, left, bottom, right)."""
    batch, cin, _h, _w = x.shape
    m, cg, kh, kw = w.shape
    if cg * group != cin or m % group:
        raise InferenceError(
            f"conv channel mismatch: x has {cin}, weights {m}x{cg} with {group} groups")
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
        parts = []
        for g in range(group):
            xg = win[:, g * cg:(g + 1) * cg]
            wg = w[g * mg:(g + 1) * mg]
            parts.append(np.tensordot(xg, wg, axes=([1, 4, 5], [1, 2, 3]))
                         .transpose(0, 3, 1, 2))
        out = np.concatenate(parts, axis=1)
    out = np.ascontiguousarray(out, dtype=np.float32)
    if b is not None:
        out += b.reshape(1, -1, 1, 1)
    return out


def maxpool2d(x, kernel, strides, pads=(0, 0, 0, 0)):
    pt, pl, pb, pr = pads
    xp = np.pad(x, ((0, 0), (0, 0), (pt, pb), (pl, pr)),
                constant_values=-np.inf)
    kh, kw = kernel
    sh, sw = strides
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::sh, ::sw]
    return np.ascontiguousarray(win.max(axis=(4, 5)), dtype=np.float32)


def _run_conv(node, vals):
    x = vals[node.inputs[0]]
    w = vals[node.inputs[1]]
    b = vals[node.inputs[2]] if len(node.inputs) > 2 and node.inputs[2] else None
    attrs = node.attrs
    if any(d != 1 for d in attrs.get("dilations", [1, 1])):
        raise InferenceError("dilated convolution is not supported")
    auto_pad = attrs.get("auto_pad", "NOTSET")
    if auto_pad not in ("NOTSET", ""):
        raise InferenceError(f"auto_pad {auto_pad!r} is not supported")
    return conv2d(x, w, b,
                  strides=_pair(attrs, "strides", (1, 1)),
                  pads=_pair(attrs, "pads", (0, 0, 0, 0)),
                  group=int(attrs.get("group", 1)))


def _run_maxpool(node, vals):
    attrs = node.attrs
    if attrs.get("ceil_mode", 0):
        raise InferenceError("ceil_mode maxpool is not supported")
    kernel = _pair(attrs, "kernel_shape", None)
    return maxpool2d(vals[node.inputs[0]], kernel,
                     strides=_pair(attrs, "strides", kernel),
                     pads=_pair(attrs, "pads", (0, 0, 0, 0)))


def _run_batchnorm(node, vals):
    if node.attrs.get("training_mode", 0):
        raise InferenceError("training-mode batchnorm is not supported")
    x, scale, bias, mean, var = (vals[n] for n in node.inputs[:5])
    eps = node.attrs.get("epsilon", 1e-5)
    shape = (1, -1, 1, 1)
    inv = (scale / np.sqrt(var + eps)).astype(np.float32)
    return x * inv.reshape(shape) + (bias - mean * inv).reshape(shape).astype(np.float32)


_OPS = {
    "Conv": _run_conv,
    "Relu": lambda node, vals: np.maximum(vals[node.inputs[0]], 0),
    "MaxPool": _run_maxpool,
    "Add": lambda node, vals: vals[node.inputs[0]] + vals[node.inputs[1]],
    "BatchNormalization": _run_batchnorm,
}


class GraphRunner:
    """Executes an OnnxGraph on float32 feeds, node-list order."""

    def __init__(self, graph: OnnxGraph):
        self.graph = graph
        known = set(graph.initializers) | set(graph.input_names)
        for node in graph.nodes:
            if node.op_type not in _OPS:
                raise TrunkLoadError(
                    f"unsupported op {node.op_type!r} in graph {graph.name!r}")
            known.update(node.outputs)
        missing = [o for o in graph.output_names if o not in known]
        if missing:
            raise TrunkLoadError(f"graph output(s) {missing} produced by no node")

    def run(self, feeds: dict, output_name: str | None = None) -> np.ndarray:
        vals = dict(self.graph.initializers)
        for name in self.graph.input_names:
            if name not in feeds:
                raise InferenceError(f"missing feed for graph input {name!r}")
            vals[name] = np.asarray(feeds[name], dtype=np.float32)
        for node in self.graph.nodes:
            for inp in node.inputs:
                if inp and inp not in vals:
                    raise InferenceError(
                        f"node {node.name or node.op_type}: input {inp!r} not computed")
            result = _OPS[node.op_type](node, vals)
            vals[node.outputs[0]] = result
        target = output_name or self.graph.output_names[0]
        if target not in vals:
            raise InferenceError(f"output {target!r} not produced by the graph")
        return vals[target]
