"""Independent executor for exported model files.

Decodes the ONNX bytes back from disk and runs them with operator
implementations that share no code with models.py: convolution is
shift-and-accumulate over kernel offsets (k*k small contractions instead
of one big one), pooling is an offset-maximum loop, batchnorm folds its
constants before applying them. Disagreement between this path and the
reference forward is what export verification measures.
"""

import numpy as np

from .errors import DecodeError

_FLOAT = 1


def _read_varint(buf, pos):
    result, shift = 0, 0
    while True:
        if pos >= len(buf):
            raise DecodeError("truncated varint")
        byte = buf[pos]
        pos += 1
        result |= (byte & 0x7F) << shift
        if not byte & 0x80:
            return result, pos
        shift += 7
        if shift > 63:
            raise DecodeError("varint overflow")


def _fields(buf):
    pos = 0
    while pos < len(buf):
        tag, pos = _read_varint(buf, pos)
        fno, wt = tag >> 3, tag & 7
        if wt == 0:
            val, pos = _read_varint(buf, pos)
        elif wt == 1:
            val, pos = buf[pos:pos + 8], pos + 8
        elif wt == 5:
            val, pos = buf[pos:pos + 4], pos + 4
        elif wt == 2:
            n, pos = _read_varint(buf, pos)
            if pos + n > len(buf):
                raise DecodeError("truncated length-delimited field")
            val, pos = buf[pos:pos + n], pos + n
        else:
            raise DecodeError(f"unsupported wire type {wt}")
        yield fno, wt, val


def _repeated_varints(val, wt):
    if wt == 0:
        return [val]
    out, pos = [], 0
    while pos < len(val):
        v, pos = _read_varint(val, pos)
        out.append(v)
    return out


def _decode_attr(buf):
    name, atype = "", None
    ival, fval = None, None
    ints = []
    for fno, wt, val in _fields(buf):
        if fno == 1:
            name = val.decode()
        elif fno == 2:
            fval = float(np.frombuffer(val, "<f4")[0])
        elif fno == 3:
            ival = val
        elif fno == 8:
            ints.extend(_repeated_varints(val, wt))
        elif fno == 20:
            atype = val
    if atype == 1:
        return name, fval
    if atype == 2:
        return name, int(ival)
    if atype == 7:
        return name, [int(v) for v in ints]
    raise DecodeError(f"attribute {name!r}: unsupported type {atype}")


def _decode_node(buf):
    inputs, outputs, attrs = [], [], {}
    op = ""
    for fno, _wt, val in _fields(buf):
        if fno == 1:
            inputs.append(val.decode())
        elif fno == 2:
            outputs.append(val.decode())
        elif fno == 4:
            op = val.decode()
        elif fno == 5:
            k, v = _decode_attr(val)
            attrs[k] = v
    if not op or not outputs:
        raise DecodeError("node without op_type or output")
    return {"op": op, "inputs": inputs, "output": outputs[0], "attrs": attrs}


def _decode_tensor(buf):
    dims, name, dtype, raw = [], "", None, None
    for fno, wt, val in _fields(buf):
        if fno == 1:
            dims.extend(_repeated_varints(val, wt))
        elif fno == 2:
            dtype = val
        elif fno == 8:
            name = val.decode()
        elif fno == 9:
            raw = val
    if dtype != _FLOAT:
        raise DecodeError(f"initializer {name!r}: not float32")
    if raw is None:
        raise DecodeError(f"initializer {name!r}: no raw payload")
    arr = np.frombuffer(raw, "<f4")
    if arr.size != int(np.prod(dims)):
        raise DecodeError(f"initializer {name!r}: payload does not match dims {dims}")
    return name, arr.reshape(dims)


def _value_name(buf):
    for fno, _wt, val in _fields(buf):
        if fno == 1:
            return val.decode()
    raise DecodeError("value info without a name")


def decode(data: bytes) -> dict:
    """ModelProto bytes -> {nodes, weights, input_name, output_name}."""
    graph_buf = None
    for fno, _wt, val in _fields(data):
        if fno == 7:
            graph_buf = val
    if graph_buf is None:
        raise DecodeError("model holds no graph")
    nodes, weights, inputs, outputs = [], {}, [], []
    for fno, _wt, val in _fields(graph_buf):
        if fno == 1:
            nodes.append(_decode_node(val))
        elif fno == 5:
            name, arr = _decode_tensor(val)
            weights[name] = arr
        elif fno == 11:
            inputs.append(_value_name(val))
        elif fno == 12:
            outputs.append(_value_name(val))
    feed = [n for n in inputs if n not in weights]
    if len(feed) != 1 or len(outputs) != 1:
        raise DecodeError(
            f"expected exactly one data input and one output, got {feed}/{outputs}")
    return {"nodes": nodes, "weights": weights,
            "input_name": feed[0], "output_name": outputs[0]}


def load(path) -> dict:
    try:
        with open(path, "rb") as f:
            data = f.read()
    except OSError as e:
        raise DecodeError(f"cannot read model file {path}: {e}") from None
    return decode(data)


# ---------------------------------------------------------------- operators

def _conv(x, w, b, strides, pads, group):
    n, cin, _, _ = x.shape
    m, cg, kh, kw = w.shape
    if cg * group != cin or m % group:
        raise DecodeError(f"conv channel mismatch: {cin} in, {m}x{cg}x{group}")
    pt, pl, pb, pr = pads
    xp = np.pad(x, ((0, 0), (0, 0), (pt, pb), (pl, pr)))
    sh, sw = strides
    oh = (xp.shape[2] - kh) // sh + 1
    ow = (xp.shape[3] - kw) // sw + 1
    acc = np.zeros((n, m, oh, ow), dtype=np.float32)
    mg = m // group
    for di in range(kh):
        for dj in range(kw):
            xs = xp[:, :, di:di + oh * sh:sh, dj:dj + ow * sw:sw]
            if group == cin and cg == 1 and m == cin:
                acc += xs * w[:, 0, di, dj].reshape(1, -1, 1, 1)
            elif group == 1:
                acc += np.einsum("nchw,mc->nmhw", xs, w[:, :, di, dj],
                                 optimize=True)
            else:
                for g in range(group):
                    acc[:, g * mg:(g + 1) * mg] += np.einsum(
                        "nchw,mc->nmhw", xs[:, g * cg:(g + 1) * cg],
                        w[g * mg:(g + 1) * mg, :, di, dj], optimize=True)
    if b is not None:
        acc += b.reshape(1, -1, 1, 1)
    return acc


def _maxpool(x, kernel, strides, pads):
    pt, pl, pb, pr = pads
    xp = np.pad(x, ((0, 0), (0, 0), (pt, pb), (pl, pr)),
                constant_values=-np.inf)
    kh, kw = kernel
    sh, sw = strides
    oh = (xp.shape[2] - kh) // sh + 1
    ow = (xp.shape[3] - kw) // sw + 1
    out = np.full((x.shape[0], x.shape[1], oh, ow), -np.inf, dtype=np.float32)
    for di in range(kh):
        for dj in range(kw):
            np.maximum(out, xp[:, :, di:di + oh * sh:sh, dj:dj + ow * sw:sw],
                       out=out)
    return out


def _batchnorm(x, scale, bias, mean, var, eps):
    inv = (scale / np.sqrt(var + eps)).astype(np.float32)
    shift = (bias - mean * inv).astype(np.float32)
    return x * inv.reshape(1, -1, 1, 1) + shift.reshape(1, -1, 1, 1)


def run(decoded: dict, x: np.ndarray) -> np.ndarray:
    """Execute a decoded graph on a float32 NCHW batch."""
    weights = decoded["weights"]
    vals = {decoded["input_name"]: np.asarray(x, dtype=np.float32)}

    def fetch(name):
        if name in weights:
            return weights[name]
        if name in vals:
            return vals[name]
        raise DecodeError(f"value {name!r} used before definition")

    for node in decoded["nodes"]:
        op, ins, attrs = node["op"], node["inputs"], node["attrs"]
        if op == "Conv":
            out = _conv(fetch(ins[0]), fetch(ins[1]),
                        fetch(ins[2]) if len(ins) > 2 else None,
                        strides=attrs.get("strides", [1, 1]),
                        pads=attrs.get("pads", [0, 0, 0, 0]),
                        group=attrs.get("group", 1))
        elif op == "Relu":
            out = np.maximum(fetch(ins[0]), 0)
        elif op == "MaxPool":
            out = _maxpool(fetch(ins[0]), attrs["kernel_shape"],
                           attrs.get("strides", attrs["kernel_shape"]),
                           attrs.get("pads", [0, 0, 0, 0]))
        elif op == "Add":
            out = fetch(ins[0]) + fetch(ins[1])
        elif op == "BatchNormalization":
            out = _batchnorm(*(fetch(i) for i in ins[:5]),
                             eps=attrs.get("epsilon", 1e-5))
        else:
            raise DecodeError(f"unsupported op {op!r} in exported graph")
        vals[node["output"]] = out
    if decoded["output_name"] not in vals:
        raise DecodeError(f"graph never produced {decoded['output_name']!r}")
    return vals[decoded["output_name"]]
