"""Weight checkpoints: versioned binary container plus a JSON graph sidecar.

Binary layout (little-endian):
    magic   5 bytes  b"UWNN\\0"
    version u32
    mlen    u64      manifest length in bytes
    manifest          UTF-8 JSON: per-node parameter shapes in graph order
    payload           float32 parameter data, weight then bias per node

The sidecar ``<path>.json`` describes the full layer graph so a network
can be rebuilt without the code that constructed it.
"""

import json
import struct
from pathlib import Path

import numpy as np

from .layers import Layer
from .network import Network, Node

MAGIC = b"UWNN\x00"
VERSION = 1


class CheckpointError(ValueError):
    pass


def _graph_spec(net: Network) -> dict:
    nodes = []
    for n in net.nodes:
        nodes.append({
            "name": n.name,
            "kind": n.layer.kind,
            "inputs": list(n.inputs),
            "hyper": n.layer.hyper,
            "weight_shape": None if n.layer.weight is None else list(n.layer.weight.shape),
            "bias_shape": None if n.layer.bias is None else list(n.layer.bias.shape),
        })
    return {
        "format": "uwstereo-network",
        "version": VERSION,
        "inputs": net.input_names,
        "output": net.output,
        "parameter_count": net.parameter_count,
        "nodes": nodes,
    }


def save(net: Network, path, meta: dict = None) -> Path:
    """Write ``path`` (binary weights) and ``path.json`` (graph sidecar).

    ``meta`` rides along in the sidecar for model-level settings the
    graph alone does not capture (patch sizes, thresholds, ...).
    """
    path = Path(path)
    spec = _graph_spec(net)
    if meta:
        spec["meta"] = meta
    manifest = json.dumps(
        [{"name": n["name"], "weight_shape": n["weight_shape"],
          "bias_shape": n["bias_shape"]} for n in spec["nodes"] if n["weight_shape"]]
    ).encode()
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", VERSION))
        f.write(struct.pack("<Q", len(manifest)))
        f.write(manifest)
        for node in net.param_nodes():
            f.write(np.ascontiguousarray(node.layer.weight, dtype="<f4").tobytes())
            f.write(np.ascontiguousarray(node.layer.bias, dtype="<f4").tobytes())
    sidecar = path.with_name(path.name + ".json")
    sidecar.write_text(json.dumps(spec, indent=1))
    return path


def load_meta(path) -> dict:
    sidecar = Path(path).with_name(Path(path).name + ".json")
    if not sidecar.exists():
        raise CheckpointError(f"missing graph sidecar {sidecar}")
    return json.loads(sidecar.read_text()).get("meta", {})


def load(path) -> Network:
    path = Path(path)
    sidecar = path.with_name(path.name + ".json")
    if not sidecar.exists():
        raise CheckpointError(f"missing graph sidecar {sidecar}")
    spec = json.loads(sidecar.read_text())
    if spec.get("format") != "uwstereo-network":
        raise CheckpointError(f"{sidecar} is not a network sidecar")
    with open(path, "rb") as f:
        if f.read(len(MAGIC)) != MAGIC:
            raise CheckpointError(f"{path}: bad magic")
        (version,) = struct.unpack("<I", f.read(4))
        if version != VERSION:
            raise CheckpointError(f"{path}: unsupported version {version}")
        (mlen,) = struct.unpack("<Q", f.read(8))
        manifest = json.loads(f.read(mlen).decode())
        payload = f.read()

    nodes = []
    offset = 0
    by_name = {m["name"]: m for m in manifest}
    for nd in spec["nodes"]:
        w = b = None
        if nd["weight_shape"]:
            m = by_name.get(nd["name"])
            if m is None or m["weight_shape"] != nd["weight_shape"]:
                raise CheckpointError(f"{path}: manifest/sidecar disagree on {nd['name']}")
            wn = int(np.prod(nd["weight_shape"]))
            bn = int(np.prod(nd["bias_shape"]))
            need = (wn + bn) * 4
            if offset + need > len(payload):
                raise CheckpointError(f"{path}: payload truncated at node {nd['name']}")
            w = np.frombuffer(payload, dtype="<f4", count=wn, offset=offset
                              ).reshape(nd["weight_shape"]).copy()
            offset += wn * 4
            b = np.frombuffer(payload, dtype="<f4", count=bn, offset=offset
                              ).reshape(nd["bias_shape"]).copy()
            offset += bn * 4
        nodes.append(Node(nd["name"], Layer(nd["kind"], nd["name"], w, b, nd["hyper"]),
                          list(nd["inputs"])))
    if offset != len(payload):
        raise CheckpointError(f"{path}: {len(payload) - offset} trailing payload bytes")
    return Network(spec["inputs"], nodes, spec["output"])
