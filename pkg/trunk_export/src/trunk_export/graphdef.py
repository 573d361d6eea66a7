"""In-memory trunk graph definition and its serialization to the wire.

A GraphDef is an ordered node list over named float32 values: one data
input, one declared output, weights held by name. Node order is execution
order; every node input must already be defined when the node runs. This
is the single source of truth for a model — the reference forward pass,
the serializer, and the manifest all read from it.
"""

from dataclasses import dataclass, field

import numpy as np

from . import wire
from .errors import GraphError

SUPPORTED_OPS = ("Conv", "Relu", "MaxPool", "Add", "BatchNormalization")


@dataclass
class Node:
    op: str
    inputs: list
    output: str
    attrs: dict = field(default_factory=dict)


@dataclass
class GraphDef:
    name: str
    input_name: str
    output_name: str
    nodes: list
    weights: dict  # name -> float32 ndarray

    def validate(self) -> None:
        if not self.nodes:
            raise GraphError(f"graph {self.name}: empty node list")
        defined = {self.input_name} | set(self.weights)
        for node in self.nodes:
            if node.op not in SUPPORTED_OPS:
                raise GraphError(f"graph {self.name}: unsupported op {node.op!r}")
            for inp in node.inputs:
                if inp not in defined:
                    raise GraphError(
                        f"graph {self.name}: node {node.output!r} reads "
                        f"undefined value {inp!r}")
            if node.output in defined:
                raise GraphError(
                    f"graph {self.name}: value {node.output!r} defined twice")
            defined.add(node.output)
        if self.output_name not in defined - {self.input_name} - set(self.weights):
            raise GraphError(
                f"graph {self.name}: output {self.output_name!r} produced by no node")
        for name, arr in self.weights.items():
            if arr.dtype != np.float32:
                raise GraphError(f"graph {self.name}: weight {name} is {arr.dtype}")
            if not np.all(np.isfinite(arr)):
                raise GraphError(f"graph {self.name}: weight {name} is not finite")

    def n_params(self) -> int:
        return sum(int(a.size) for a in self.weights.values())


def _encode_attrs(attrs: dict):
    out = []
    for key in sorted(attrs):
        val = attrs[key]
        if isinstance(val, float):
            out.append(wire.attr_float(key, val))
        elif isinstance(val, (list, tuple)):
            out.append(wire.attr_ints(key, val))
        elif isinstance(val, int):
            out.append(wire.attr_int(key, val))
        else:
            raise GraphError(f"attribute {key}: unsupported value {val!r}")
    return out


def to_onnx_bytes(graph: GraphDef) -> bytes:
    """Serialize a validated GraphDef to ONNX ModelProto bytes.

    Weight order follows insertion order of the weights dict, node order is
    preserved, so serialization is byte-deterministic for a fixed build.
    """
    graph.validate()
    nodes = [wire.node(n.op, n.inputs, [n.output], name=n.output,
                       attrs=_encode_attrs(n.attrs))
             for n in graph.nodes]
    inits = [wire.tensor(name, arr) for name, arr in graph.weights.items()]
    inputs = [wire.value_info(graph.input_name)]
    outputs = [wire.value_info(graph.output_name)]
    gbytes = wire.graph(nodes, inits, inputs, outputs, name=graph.name)
    return wire.model(gbytes)
