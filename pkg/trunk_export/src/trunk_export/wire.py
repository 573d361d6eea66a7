"""ONNX protobuf wire-format writer.

Hand-rolled encoder for the small message subset a frozen convolutional
trunk needs: ModelProto / GraphProto / NodeProto / AttributeProto /
TensorProto with float32 initializers stored as raw_data. No protobuf
dependency; field numbers follow the public onnx.proto3.
"""

import struct

import numpy as np

_FLOAT = 1  # TensorProto.DataType.FLOAT


def varint(n: int) -> bytes:
    if n < 0:
        raise ValueError("negative varint")
    out = bytearray()
    while True:
        b = n & 0x7F
        n >>= 7
        if n:
            out.append(b | 0x80)
        else:
            out.append(b)
            return bytes(out)


def _key(fno: int, wt: int) -> bytes:
    return varint((fno << 3) | wt)


def _len_field(fno: int, payload: bytes) -> bytes:
    return _key(fno, 2) + varint(len(payload)) + payload


def _varint_field(fno: int, value: int) -> bytes:
    return _key(fno, 0) + varint(value)


def _string_field(fno: int, s: str) -> bytes:
    return _len_field(fno, s.encode("utf-8"))


# AttributeProto: name=1, f=2, i=3, s=4, floats=7, ints=8, type=20
def attr_int(name: str, v: int) -> bytes:
    return _string_field(1, name) + _varint_field(3, int(v)) + _varint_field(20, 2)


def attr_float(name: str, v: float) -> bytes:
    return (_string_field(1, name) + _key(2, 5) + struct.pack("<f", v)
            + _varint_field(20, 1))


def attr_string(name: str, v: str) -> bytes:
    return _string_field(1, name) + _string_field(4, v) + _varint_field(20, 3)


def attr_ints(name: str, vals) -> bytes:
    packed = b"".join(varint(int(v)) for v in vals)
    return _string_field(1, name) + _len_field(8, packed) + _varint_field(20, 7)


# NodeProto: input=1, output=2, name=3, op_type=4, attribute=5
def node(op_type: str, inputs, outputs, name: str = "", attrs=()) -> bytes:
    buf = b"".join(_string_field(1, i) for i in inputs)
    buf += b"".join(_string_field(2, o) for o in outputs)
    if name:
        buf += _string_field(3, name)
    buf += _string_field(4, op_type)
    buf += b"".join(_len_field(5, a) for a in attrs)
    return buf


# TensorProto: dims=1, data_type=2, name=8, raw_data=9
def tensor(name: str, arr: np.ndarray) -> bytes:
    arr = np.ascontiguousarray(arr, dtype="<f4")
    buf = _len_field(1, b"".join(varint(d) for d in arr.shape))
    buf += _varint_field(2, _FLOAT)
    buf += _string_field(8, name)
    buf += _len_field(9, arr.tobytes())
    return buf


# ValueInfoProto: name=1, type=2; TypeProto.tensor_type with elem_type + dims
def value_info(name: str, shape=()) -> bytes:
    dims = b"".join(_len_field(1, _varint_field(1, d)) for d in shape)
    tensor_type = _varint_field(1, _FLOAT) + _len_field(2, dims)
    return _string_field(1, name) + _len_field(2, _len_field(1, tensor_type))


# GraphProto: node=1, name=2, initializer=5, input=11, output=12
def graph(nodes, initializers, inputs, outputs, name: str) -> bytes:
    buf = b"".join(_len_field(1, n) for n in nodes)
    buf += _string_field(2, name)
    buf += b"".join(_len_field(5, t) for t in initializers)
    buf += b"".join(_len_field(11, v) for v in inputs)
    buf += b"".join(_len_field(12, v) for v in outputs)
    return buf


# ModelProto: ir_version=1, producer_name=2, graph=7, opset_import=8
def model(graph_bytes: bytes, opset: int = 13,
          producer: str = "trunk-export") -> bytes:
    opset_id = _string_field(1, "") + _varint_field(2, opset)
    return (_varint_field(1, 8)
            + _string_field(2, producer)
            + _len_field(7, graph_bytes)
            + _len_field(8, opset_id))
