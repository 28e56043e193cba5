"""Checkpoint conversion into the cfmodel/1 manifest + blob format.

Every parameter and buffer tensor of the source checkpoint must map onto
exactly one manifest entry (num_batches_tracked counters are explicitly
discarded); a leftover or missing tensor is a hard error.  Batchnorm is
exported unfused (running stats plus affine) so the consumer controls any
folding.  A sidecar export_log.json records the source-to-node mapping.
"""

from __future__ import annotations

import json
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .arch import TEMPLATE_IDS, build_template

MODEL_VERSION = "cfmodel/1"

# state_dict suffix -> (manifest weight name, required)
_SUFFIXES = {
    "conv": (("weight", "weight", True), ("bias", "bias", False)),
    "linear": (("weight", "weight", True), ("bias", "bias", False)),
    "batchnorm": (("running_mean", "mean", True), ("running_var", "var", True),
                  ("weight", "scale", True), ("bias", "shift", True)),
}

_IGNORED_SUFFIX = "num_batches_tracked"


class ExportError(Exception):
    pass


@dataclass
class ExportSpec:
    checkpoint: str
    arch: str  # template id or path to a custom template JSON
    out_dir: str


def load_state_dict(path) -> dict:
    try:
        payload = torch.load(path, map_location="cpu", weights_only=True)
    except Exception as e:
        raise ExportError(f"cannot load checkpoint {path}: {e}") from e
    if isinstance(payload, dict) and "state_dict" in payload:
        payload = payload["state_dict"]
    if not isinstance(payload, dict):
        raise ExportError(f"checkpoint {path} does not contain a state dict")
    return {k: v for k, v in payload.items()}


def resolve_template(arch: str) -> dict:
    if arch in TEMPLATE_IDS:
        return build_template(arch)
    path = Path(arch)
    if path.exists():
        template = json.loads(path.read_text())
        for key in ("input", "output", "input_shape", "nodes"):
            if key not in template:
                raise ExportError(f"custom template {arch} lacks key {key!r}")
        return template
    raise ExportError(f"unknown architecture template {arch!r} (not an id or file)")


def export_model(spec: ExportSpec):
    """Write model.json + weights.bin (+ export_log.json) for a checkpoint."""
    state = load_state_dict(spec.checkpoint)
    template = resolve_template(spec.arch)
    consumed = set()
    mapping = {}
    chunks = []
    offset = 0
    node_entries = []

    for node in template["nodes"]:
        entry = {"id": node["id"], "kind": node["kind"], "inputs": list(node["inputs"]),
                 "params": dict(node.get("params", {})), "tap": bool(node.get("tap", False))}
        source = node.get("source")
        if source is not None:
            wlist = []
            for suffix, name, required in _SUFFIXES[node["kind"]]:
                key = f"{source}.{suffix}"
                tensor = state.get(key)
                if tensor is None:
                    if required:
                        raise ExportError(
                            f"checkpoint lacks tensor {key!r} needed by node {node['id']}")
                    continue
                consumed.add(key)
                arr = np.ascontiguousarray(tensor.detach().numpy(), dtype="<f4")
                data = arr.tobytes()
                wlist.append({"name": name, "shape": [int(d) for d in arr.shape],
                              "offset": offset})
                mapping[key] = f"{node['id']}.{name}"
                chunks.append(data)
                offset += len(data)
            entry["weights"] = wlist
        node_entries.append(entry)

    ignored = [k for k in state if k.endswith(_IGNORED_SUFFIX)]
    consumed.update(ignored)
    leftover = sorted(set(state) - consumed)
    if leftover:
        raise ExportError(f"checkpoint tensors not mapped by template: {leftover}")

    blob = b"".join(chunks)
    manifest = {
        "version": MODEL_VERSION,
        "input": template["input"],
        "output": template["output"],
        "metadata": {"input_shape": list(template["input_shape"]),
                     "class_count": template.get("class_count")},
        "weights_file": "weights.bin",
        "blob_size": len(blob),
        "crc32": zlib.crc32(blob) & 0xFFFFFFFF,
        "nodes": node_entries,
    }
    out = Path(spec.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "weights.bin").write_bytes(blob)
    (out / "model.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    (out / "export_log.json").write_text(json.dumps(
        {"checkpoint": str(spec.checkpoint), "arch": spec.arch,
         "mapping": mapping, "ignored": sorted(ignored)},
        indent=1, sort_keys=True))
    return out / "model.json"
