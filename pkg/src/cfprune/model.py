"""Model representation: typed layer DAG plus weight store.

The on-disk format ("cfmodel/1") is a JSON manifest next to a single
little-endian float32 blob.  The manifest lists every node with its params
and weight references (shape + byte offset into the blob) and carries a
CRC-32 of the blob, so load(save(m)) is bit-exact.

A pseudo source id (the manifest's "input" field) stands for the image
batch; it is not a node and has no weights.
"""

from __future__ import annotations

import json
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    ChecksumError,
    CyclicGraphError,
    ModelFormatError,
    ShapeError,
    UnsupportedTopologyError,
)
from .tensor_ops import apply_layer, conv2d

FORMAT_VERSION = "cfmodel/1"

NODE_KINDS = (
    "conv",
    "batchnorm",
    "relu",
    "maxpool",
    "avgpool",
    "global_avgpool",
    "add",
    "concat",
    "linear",
)

# Kinds that pass channels through one-to-one (index-preserving).
_CHANNEL_TRANSPARENT = ("relu", "batchnorm", "maxpool", "avgpool", "global_avgpool")

# Order in which each kind's weight arrays are serialized.
_WEIGHT_ORDER = {
    "conv": ("weight", "bias"),
    "batchnorm": ("mean", "var", "scale", "shift"),
    "linear": ("weight", "bias"),
}


@dataclass
class LayerNode:
    id: str
    kind: str
    inputs: list[str]
    params: dict = field(default_factory=dict)
    tap: bool = False


@dataclass
class FilterRef:
    """One filter (output channel) of a conv node."""

    layer_id: str
    index: int


@dataclass
class ActivationSet:
    """Post-activation tensors captured at tap nodes, plus the final logits."""

    activations: dict[str, np.ndarray]
    logits: np.ndarray


class ModelGraph:
    def __init__(self, nodes, weights, input_id, output_id, input_shape, class_count=None):
        self.nodes = list(nodes)
        self.weights = weights  # node id -> {name: float32 ndarray}
        self.input_id = input_id
        self.output_id = output_id
        self.input_shape = tuple(int(d) for d in input_shape)
        self.class_count = class_count
        self._index = {n.id: n for n in self.nodes}
        if len(self._index) != len(self.nodes):
            raise ModelFormatError("duplicate node ids in graph")
        self.validate()

    # -- structure ---------------------------------------------------------

    def node(self, node_id) -> LayerNode:
        return self._index[node_id]

    def has_node(self, node_id) -> bool:
        return node_id in self._index

    def successors(self, node_id) -> list[str]:
        return [n.id for n in self.nodes if node_id in n.inputs]

    def topo_order(self) -> list[str]:
        indeg = {n.id: sum(1 for i in n.inputs if i != self.input_id) for n in self.nodes}
        succ = {n.id: [] for n in self.nodes}
        for n in self.nodes:
            for i in n.inputs:
                if i != self.input_id:
                    succ[i].append(n.id)
        ready = sorted(nid for nid, d in indeg.items() if d == 0)
        order = []
        while ready:
            nid = ready.pop(0)
            order.append(nid)
            for s in succ[nid]:
                indeg[s] -= 1
                if indeg[s] == 0:
                    ready.append(s)
            ready.sort()
        if len(order) != len(self.nodes):
            raise CyclicGraphError("node graph contains a cycle")
        return order

    def validate(self):
        for n in self.nodes:
            if n.kind not in NODE_KINDS:
                raise ModelFormatError(f"node {n.id}: unknown kind {n.kind!r}")
            for i in n.inputs:
                if i != self.input_id and i not in self._index:
                    raise ModelFormatError(f"node {n.id}: unknown input {i!r}")
        if self.nodes and self.output_id not in self._index:
            raise ModelFormatError(f"output node {self.output_id!r} does not exist")
        self.topo_order()  # raises CyclicGraphError on cycles
        shapes = self.infer_shapes()
        for n in self.nodes:
            if n.kind == "conv":
                w = self.weights[n.id]["weight"]
                in_ch = shapes[n.inputs[0]][0]
                if w.shape[1] != in_ch:
                    raise ShapeError(
                        f"conv {n.id}: weight expects {w.shape[1]} input channels, producer has {in_ch}",
                        expected=w.shape[1],
                        actual=in_ch,
                    )

    def infer_shapes(self) -> dict[str, tuple]:
        """Channel/height/width of every node's output, keyed by id.

        The pseudo input id maps to the model input shape.
        """
        shapes = {self.input_id: self.input_shape}
        for nid in self.topo_order():
            n = self._index[nid]
            ins = [shapes[i] for i in n.inputs]
            c, h, w = ins[0]
            if n.kind == "conv":
                wt = self.weights[nid]["weight"]
                s, p = int(n.params.get("stride", 1)), int(n.params.get("padding", 0))
                kh, kw = wt.shape[2], wt.shape[3]
                shapes[nid] = (wt.shape[0], (h + 2 * p - kh) // s + 1, (w + 2 * p - kw) // s + 1)
            elif n.kind in ("maxpool", "avgpool"):
                k = int(n.params["kernel"])
                s = int(n.params.get("stride", k))
                p = int(n.params.get("padding", 0))
                shapes[nid] = (c, (h + 2 * p - k) // s + 1, (w + 2 * p - k) // s + 1)
            elif n.kind == "global_avgpool":
                shapes[nid] = (c, 1, 1)
            elif n.kind == "add":
                for other in ins[1:]:
                    if other != ins[0]:
                        raise ShapeError(f"add {nid}: mismatched input shapes", expected=ins[0], actual=other)
                shapes[nid] = ins[0]
            elif n.kind == "concat":
                for other in ins[1:]:
                    if other[1:] != ins[0][1:]:
                        raise ShapeError(f"concat {nid}: spatial dims differ", expected=ins[0], actual=other)
                shapes[nid] = (sum(i[0] for i in ins), h, w)
            elif n.kind == "linear":
                shapes[nid] = (self.weights[nid]["weight"].shape[0], 1, 1)
            else:  # relu, batchnorm
                shapes[nid] = ins[0]
        return shapes

    def conv_ids(self) -> list[str]:
        order = self.topo_order()
        return [nid for nid in order if self._index[nid].kind == "conv"]

    def tap_ids(self) -> list[str]:
        order = self.topo_order()
        return [nid for nid in order if self._index[nid].tap]

    def copy(self) -> "ModelGraph":
        nodes = [LayerNode(n.id, n.kind, list(n.inputs), dict(n.params), n.tap) for n in self.nodes]
        weights = {nid: {k: v.copy() for k, v in ws.items()} for nid, ws in self.weights.items()}
        return ModelGraph(nodes, weights, self.input_id, self.output_id, self.input_shape, self.class_count)


# -- serialization ----------------------------------------------------------


def save_model(model: ModelGraph, out_dir, manifest_name="model.json", blob_name="weights.bin"):
    """Write a cfmodel/1 manifest+blob pair into `out_dir`."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    chunks = []
    offset = 0
    node_entries = []
    for n in model.nodes:
        entry = {"id": n.id, "kind": n.kind, "inputs": list(n.inputs), "params": dict(n.params), "tap": bool(n.tap)}
        wlist = []
        for name in _WEIGHT_ORDER.get(n.kind, ()):
            arr = model.weights.get(n.id, {}).get(name)
            if arr is None:
                continue
            data = np.ascontiguousarray(arr, dtype="<f4").tobytes()
            wlist.append({"name": name, "shape": [int(d) for d in arr.shape], "offset": offset})
            chunks.append(data)
            offset += len(data)
        if wlist:
            entry["weights"] = wlist
        node_entries.append(entry)
    blob = b"".join(chunks)
    manifest = {
        "version": FORMAT_VERSION,
        "input": model.input_id,
        "output": model.output_id,
        "metadata": {"input_shape": list(model.input_shape), "class_count": model.class_count},
        "weights_file": blob_name,
        "blob_size": len(blob),
        "crc32": zlib.crc32(blob) & 0xFFFFFFFF,
        "nodes": node_entries,
    }
    (out_dir / blob_name).write_bytes(blob)
    (out_dir / manifest_name).write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return out_dir / manifest_name


def load_model(manifest_path) -> ModelGraph:
    """Load a cfmodel/1 model, verifying CRC and declared shapes."""
    manifest_path = Path(manifest_path)
    try:
        manifest = json.loads(manifest_path.read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise ModelFormatError(f"cannot read manifest {manifest_path}: {e}") from e
    if manifest.get("version") != FORMAT_VERSION:
        raise ModelFormatError(f"unsupported model version {manifest.get('version')!r}")
    blob_path = manifest_path.parent / manifest.get("weights_file", "weights.bin")
    try:
        blob = blob_path.read_bytes()
    except OSError as e:
        raise ModelFormatError(f"cannot read weight blob {blob_path}: {e}") from e
    if "blob_size" in manifest and len(blob) != manifest["blob_size"]:
        raise ModelFormatError(
            f"weight blob is {len(blob)} bytes, manifest declares {manifest['blob_size']}"
        )
    crc = zlib.crc32(blob) & 0xFFFFFFFF
    if crc != manifest.get("crc32"):
        raise ChecksumError(f"weight blob CRC-32 {crc:#010x} != manifest {manifest.get('crc32', 0):#010x}")

    nodes, weights = [], {}
    for entry in manifest["nodes"]:
        node = LayerNode(
            id=entry["id"],
            kind=entry["kind"],
            inputs=list(entry["inputs"]),
            params=dict(entry.get("params", {})),
            tap=bool(entry.get("tap", False)),
        )
        nodes.append(node)
        ws = {}
        for ref in entry.get("weights", ()):
            shape = tuple(int(d) for d in ref["shape"])
            count = int(np.prod(shape)) if shape else 1
            start, end = int(ref["offset"]), int(ref["offset"]) + 4 * count
            if start < 0 or end > len(blob):
                raise ShapeError(
                    f"node {entry['id']} weight {ref['name']!r} declares shape {list(shape)} "
                    f"needing {count} floats, blob has {(len(blob) - start) // 4} from offset {start}"
                )
            ws[ref["name"]] = np.frombuffer(blob[start:end], dtype="<f4").reshape(shape).copy()
        if ws:
            weights[entry["id"]] = ws
    meta = manifest.get("metadata", {})
    return ModelGraph(
        nodes,
        weights,
        input_id=manifest["input"],
        output_id=manifest.get("output", nodes[-1].id if nodes else manifest["input"]),
        input_shape=meta.get("input_shape", [3, 32, 32]),
        class_count=meta.get("class_count"),
    )


# -- execution ---------------------------------------------------------------


def _node_eval(model, node, inputs):
    if node.kind == "conv":
        w = model.weights[node.id]
        return conv2d(
            inputs[0],
            w["weight"],
            w.get("bias"),
            stride=int(node.params.get("stride", 1)),
            padding=int(node.params.get("padding", 0)),
        )
    params = dict(node.params)
    params.update(model.weights.get(node.id, {}))
    return apply_layer(node.kind, inputs, params)


def forward_capture(model: ModelGraph, batch, taps=None) -> ActivationSet:
    """Run the network on `batch`, recording post-activation tensors at taps.

    `taps` defaults to every node marked tap=True.  The final node's output
    is returned as logits (flattened to (batch, features)).
    """
    batch = np.asarray(batch, dtype=np.float32)
    if batch.ndim != 4 or batch.shape[1:] != model.input_shape:
        raise ShapeError("batch shape does not match model input",
                         expected=("b",) + model.input_shape, actual=batch.shape)
    if taps is None:
        taps = set(model.tap_ids())
    else:
        taps = set(taps)
        for t in taps:
            if not model.has_node(t):
                raise ModelFormatError(f"unknown tap node {t!r}")
    acts = _evaluate(model, batch, needed=taps | {model.output_id} if model.nodes else taps)
    captured = {t: acts[t] for t in taps}
    if model.nodes:
        logits = acts[model.output_id]
    else:
        logits = batch
    return ActivationSet(activations=captured, logits=logits.reshape(batch.shape[0], -1))


def _evaluate(model, batch, needed):
    """Evaluate exactly the ancestors of `needed`; free tensors eagerly."""
    order = model.topo_order()
    want = set(needed)
    # restrict to ancestors of wanted nodes
    keep = set()
    pending = list(want)
    while pending:
        nid = pending.pop()
        if nid in keep or nid == model.input_id:
            continue
        keep.add(nid)
        pending.extend(i for i in model.node(nid).inputs if i != model.input_id)
    remaining = {nid: 0 for nid in keep}
    remaining[model.input_id] = 0
    for nid in keep:
        for i in model.node(nid).inputs:
            if i in remaining:
                remaining[i] += 1
    values = {model.input_id: batch}
    out = {}
    for nid in order:
        if nid not in keep:
            continue
        node = model.node(nid)
        try:
            result = _node_eval(model, node, [values[i] for i in node.inputs])
        except KeyError as e:
            raise ModelFormatError(f"node {nid}: missing weights {e}") from e
        values[nid] = result
        if nid in want:
            out[nid] = result
        for i in node.inputs:
            remaining[i] -= 1
            if remaining[i] == 0 and i not in want and i != model.input_id:
                values.pop(i, None)
    return out


# -- accounting ---------------------------------------------------------------


def count_flops_params(model: ModelGraph) -> tuple[int, int]:
    """(flops, params): one MAC = one FLOP; conv and linear only.

    Params count weight + bias + batchnorm affine (scale/shift) elements;
    batchnorm running stats, pooling and activations are free.
    """
    shapes = model.infer_shapes()
    flops = 0
    params = 0
    for n in model.nodes:
        ws = model.weights.get(n.id, {})
        if n.kind == "conv":
            w = ws["weight"]
            _, h_out, w_out = shapes[n.id]
            flops += int(np.prod(w.shape)) * h_out * w_out
            params += int(np.prod(w.shape))
            if "bias" in ws:
                params += w.shape[0]
        elif n.kind == "linear":
            w = ws["weight"]
            flops += int(np.prod(w.shape))
            params += int(np.prod(w.shape))
            if "bias" in ws:
                params += w.shape[0]
        elif n.kind == "batchnorm":
            params += int(ws["scale"].size + ws["shift"].size)
    return int(flops), int(params)


# -- pruning dependencies ------------------------------------------------------


@dataclass
class ConsumerRef:
    """A node whose input channels track a producer's output channels.

    channel_map sends a producer output-channel index to the consumer's
    input-channel index.  tap_id names the sampled relu feeding this
    consumer (None if the path carries no tap).
    """

    node_id: str
    kind: str
    channel_map: dict[int, int]
    tap_id: str | None = None


@dataclass
class PruneScope:
    layer_id: str
    consumers: list[ConsumerRef]
    coupling: frozenset[str]


def member_tap(model: ModelGraph, conv_id: str) -> str | None:
    """The sampled relu whose maps this conv's similarity is estimated on.

    Nearest tap-marked relu reachable through channel-index-preserving
    nodes (batchnorm, pools, add).
    """
    frontier = [conv_id]
    seen = set()
    while frontier:
        nid = frontier.pop(0)
        for s in model.successors(nid):
            if s in seen:
                continue
            seen.add(s)
            node = model.node(s)
            if node.kind == "relu":
                if node.tap:
                    return s
                frontier.append(s)
            elif node.kind in _CHANNEL_TRANSPARENT or node.kind == "add":
                frontier.append(s)
    return None


def resolve_dependencies(model: ModelGraph, layer_id: str) -> PruneScope:
    """Consumers of a conv layer's output channels, plus its coupling group.

    Walks forward through channel-transparent nodes; concat shifts channel
    indices by the widths of earlier branches; add requires identity
    mapping and couples the producing conv layers.
    """
    if not model.has_node(layer_id) or model.node(layer_id).kind != "conv":
        raise UnsupportedTopologyError(f"{layer_id!r} is not a conv node", node_id=layer_id)
    shapes = model.infer_shapes()
    n_out = shapes[layer_id][0]
    consumers: dict[str, ConsumerRef] = {}

    # state: (node we arrived at, offset applied so far, last tap seen)
    frontier = [(layer_id, 0, None)]
    visited = set()
    while frontier:
        nid, offset, tap = frontier.pop(0)
        for succ in model.successors(nid):
            node = model.node(succ)
            if node.kind in ("conv", "linear"):
                if node.kind == "linear":
                    c_in, h_in, w_in = shapes[node.inputs[0]]
                    if (h_in, w_in) != (1, 1):
                        raise UnsupportedTopologyError(
                            "linear consumer with spatial extent > 1x1", node_id=succ)
                cmap = {j: offset + j for j in range(n_out)}
                _record_consumer(consumers, ConsumerRef(succ, node.kind, cmap, tap))
                continue
            if node.kind == "batchnorm":
                cmap = {j: offset + j for j in range(n_out)}
                _record_consumer(consumers, ConsumerRef(succ, "batchnorm", cmap, tap))
                state = (succ, offset, tap)
            elif node.kind == "relu":
                state = (succ, offset, succ if node.tap else tap)
            elif node.kind in ("maxpool", "avgpool", "global_avgpool"):
                state = (succ, offset, tap)
            elif node.kind == "add":
                if offset != 0:
                    raise UnsupportedTopologyError(
                        "add fed through a concat offset; channel mapping ambiguous", node_id=succ)
                state = (succ, offset, tap)
            elif node.kind == "concat":
                slot = node.inputs.index(nid)
                extra = sum(shapes[i][0] for i in node.inputs[:slot])
                state = (succ, offset + extra, tap)
            else:
                raise UnsupportedTopologyError(f"cannot map channels through {node.kind}", node_id=succ)
            if state[:2] not in visited:
                visited.add(state[:2])
                frontier.append(state)

    return PruneScope(layer_id, list(consumers.values()), coupling_group(model, layer_id))


def _record_consumer(consumers, ref):
    prev = consumers.get(ref.node_id)
    if prev is None:
        consumers[ref.node_id] = ref
        return
    if prev.channel_map != ref.channel_map:
        raise UnsupportedTopologyError(
            "consumer reachable with two different channel maps", node_id=ref.node_id)
    if prev.tap_id is None:
        prev.tap_id = ref.tap_id


def coupling_groups(model: ModelGraph) -> list[frozenset[str]]:
    """Partition of conv layers into groups forced to share keep sets.

    Convs whose outputs meet at an add node (directly or through
    channel-transparent nodes / chained adds) are coupled; every other
    conv is a singleton.
    """
    parent = {cid: cid for cid in model.conv_ids()}

    def find(x):
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    def union(a, b):
        ra, rb = find(a), find(b)
        if ra != rb:
            parent[max(ra, rb)] = min(ra, rb)

    for n in model.nodes:
        if n.kind != "add":
            continue
        contributors = []
        for branch in n.inputs:
            contributors.extend(_trace_back_convs(model, branch, n.id))
        for a, b in zip(contributors, contributors[1:]):
            union(a, b)

    groups = {}
    for cid in model.conv_ids():
        groups.setdefault(find(cid), set()).add(cid)
    return [frozenset(g) for g in groups.values()]


def _trace_back_convs(model, nid, add_id):
    """Conv layers whose output channels flow index-preserved into `nid`."""
    if nid == model.input_id:
        raise UnsupportedTopologyError(
            "residual add fed directly by the model input", node_id=add_id)
    node = model.node(nid)
    if node.kind == "conv":
        return [nid]
    if node.kind == "add" or node.kind in _CHANNEL_TRANSPARENT:
        out = []
        for i in node.inputs:
            out.extend(_trace_back_convs(model, i, add_id))
        return out
    raise UnsupportedTopologyError(
        f"cannot couple through {node.kind} feeding an add", node_id=add_id)


def coupling_group(model: ModelGraph, layer_id: str) -> frozenset[str]:
    for g in coupling_groups(model):
        if layer_id in g:
            return g
    return frozenset({layer_id})
