"""Seeded model builders used by the CLI demo, tests, and benchmarks.

Weights are He-style random draws from a caller-provided seed, so every
template is reproducible.  Taps are placed on the relu following each conv
(for residual blocks: the relu after the add), which is where feature-map
similarity is estimated.
"""

from __future__ import annotations

import numpy as np

from .model import LayerNode, ModelGraph

VGG16_CHANNELS = [64, 64, "M", 128, 128, "M", 256, 256, 256, "M", 512, 512, 512, "M", 512, 512, 512, "M"]


def _conv_weights(rng, n_out, n_in, k, bias=True):
    std = np.sqrt(2.0 / (n_in * k * k))
    w = {"weight": (rng.standard_normal((n_out, n_in, k, k)) * std).astype(np.float32)}
    if bias:
        w["bias"] = (rng.standard_normal(n_out) * 0.01).astype(np.float32)
    return w


def _bn_weights(rng, n, identity=False):
    if identity:
        return {
            "mean": np.zeros(n, dtype=np.float32),
            "var": np.ones(n, dtype=np.float32),
            "scale": np.ones(n, dtype=np.float32),
            "shift": np.zeros(n, dtype=np.float32),
        }
    return {
        "mean": (rng.standard_normal(n) * 0.1).astype(np.float32),
        "var": (0.5 + rng.random(n)).astype(np.float32),
        "scale": (0.8 + 0.4 * rng.random(n)).astype(np.float32),
        "shift": (rng.standard_normal(n) * 0.1).astype(np.float32),
    }


def _linear_weights(rng, n_out, n_in):
    std = np.sqrt(1.0 / n_in)
    return {
        "weight": (rng.standard_normal((n_out, n_in)) * std).astype(np.float32),
        "bias": np.zeros(n_out, dtype=np.float32),
    }


def build_vgg16_cifar(seed=0, class_count=10) -> ModelGraph:
    """13-conv VGG variant for 32x32 inputs with two linear layers."""
    rng = np.random.default_rng(seed)
    nodes, weights = [], {}
    prev, prev_ch = "images", 3
    ci = 0
    for spec in VGG16_CHANNELS:
        if spec == "M":
            nid = f"pool{ci}"
            nodes.append(LayerNode(nid, "maxpool", [prev], {"kernel": 2, "stride": 2}))
            prev = nid
            continue
        ci += 1
        conv, bn, relu = f"conv{ci}", f"bn{ci}", f"relu{ci}"
        nodes.append(LayerNode(conv, "conv", [prev], {"stride": 1, "padding": 1}))
        weights[conv] = _conv_weights(rng, spec, prev_ch, 3)
        nodes.append(LayerNode(bn, "batchnorm", [conv], {"epsilon": 1e-5}))
        weights[bn] = _bn_weights(rng, spec)
        nodes.append(LayerNode(relu, "relu", [bn], tap=True))
        prev, prev_ch = relu, spec
    nodes.append(LayerNode("fc1", "linear", [prev]))
    weights["fc1"] = _linear_weights(rng, 512, prev_ch)
    nodes.append(LayerNode("fc_relu", "relu", ["fc1"]))
    nodes.append(LayerNode("fc2", "linear", ["fc_relu"]))
    weights["fc2"] = _linear_weights(rng, class_count, 512)
    return ModelGraph(nodes, weights, "images", "fc2", (3, 32, 32), class_count)


def build_resnet56_cifar(seed=0, class_count=10) -> ModelGraph:
    return build_resnet_cifar(depth=56, seed=seed, class_count=class_count)


def build_resnet_cifar(depth=20, seed=0, class_count=10, base_width=16) -> ModelGraph:
    """CIFAR-style ResNet: 3 stages of (depth-2)/6 basic blocks each.

    Stage transitions use a strided 1x1 projection conv on the shortcut, so
    the projection joins the stage's coupling group.
    """
    if (depth - 2) % 6:
        raise ValueError(f"resnet depth must be 6n+2, got {depth}")
    blocks = (depth - 2) // 6
    rng = np.random.default_rng(seed)
    nodes, weights = [], {}

    nodes.append(LayerNode("conv0", "conv", ["images"], {"stride": 1, "padding": 1}))
    weights["conv0"] = _conv_weights(rng, base_width, 3, 3, bias=False)
    nodes.append(LayerNode("bn0", "batchnorm", ["conv0"], {"epsilon": 1e-5}))
    weights["bn0"] = _bn_weights(rng, base_width)
    nodes.append(LayerNode("relu0", "relu", ["bn0"], tap=True))

    prev, prev_ch = "relu0", base_width
    for stage, ch in enumerate((base_width, base_width * 2, base_width * 4)):
        for blk in range(blocks):
            tag = f"s{stage}b{blk}"
            stride = 2 if (stage > 0 and blk == 0) else 1
            shortcut = prev
            if stride != 1 or prev_ch != ch:
                proj, pbn = f"{tag}_proj", f"{tag}_proj_bn"
                nodes.append(LayerNode(proj, "conv", [prev], {"stride": stride, "padding": 0}))
                weights[proj] = _conv_weights(rng, ch, prev_ch, 1, bias=False)
                nodes.append(LayerNode(pbn, "batchnorm", [proj], {"epsilon": 1e-5}))
                weights[pbn] = _bn_weights(rng, ch)
                shortcut = pbn
            ca, cb = f"{tag}_conv_a", f"{tag}_conv_b"
            nodes.append(LayerNode(ca, "conv", [prev], {"stride": stride, "padding": 1}))
            weights[ca] = _conv_weights(rng, ch, prev_ch, 3, bias=False)
            nodes.append(LayerNode(f"{tag}_bn_a", "batchnorm", [ca], {"epsilon": 1e-5}))
            weights[f"{tag}_bn_a"] = _bn_weights(rng, ch)
            nodes.append(LayerNode(f"{tag}_relu_a", "relu", [f"{tag}_bn_a"], tap=True))
            nodes.append(LayerNode(cb, "conv", [f"{tag}_relu_a"], {"stride": 1, "padding": 1}))
            weights[cb] = _conv_weights(rng, ch, ch, 3, bias=False)
            nodes.append(LayerNode(f"{tag}_bn_b", "batchnorm", [cb], {"epsilon": 1e-5}))
            weights[f"{tag}_bn_b"] = _bn_weights(rng, ch)
            nodes.append(LayerNode(f"{tag}_add", "add", [f"{tag}_bn_b", shortcut]))
            nodes.append(LayerNode(f"{tag}_relu", "relu", [f"{tag}_add"], tap=True))
            prev, prev_ch = f"{tag}_relu", ch

    nodes.append(LayerNode("gap", "global_avgpool", [prev]))
    nodes.append(LayerNode("fc", "linear", ["gap"]))
    weights["fc"] = _linear_weights(rng, class_count, prev_ch)
    return ModelGraph(nodes, weights, "images", "fc", (3, 32, 32), class_count)


def build_toy_net(seed=0, channels=8, input_shape=(3, 8, 8), class_count=4, batchnorm=True) -> ModelGraph:
    """Small conv(+bn)-relu-conv-relu-gap-linear net for tests and the demo."""
    rng = np.random.default_rng(seed)
    c_in = input_shape[0]
    nodes = [LayerNode("conv1", "conv", ["images"], {"stride": 1, "padding": 1})]
    weights = {"conv1": _conv_weights(rng, channels, c_in, 3)}
    prev = "conv1"
    if batchnorm:
        nodes.append(LayerNode("bn1", "batchnorm", ["conv1"], {"epsilon": 1e-5}))
        weights["bn1"] = _bn_weights(rng, channels)
        prev = "bn1"
    nodes.append(LayerNode("relu1", "relu", [prev], tap=True))
    nodes.append(LayerNode("conv2", "conv", ["relu1"], {"stride": 1, "padding": 1}))
    weights["conv2"] = _conv_weights(rng, channels, channels, 3)
    nodes.append(LayerNode("relu2", "relu", ["conv2"], tap=True))
    nodes.append(LayerNode("gap", "global_avgpool", ["relu2"]))
    nodes.append(LayerNode("fc", "linear", ["gap"]))
    weights["fc"] = _linear_weights(rng, class_count, channels)
    return ModelGraph(nodes, weights, "images", "fc", input_shape, class_count)


def duplicate_filters(model: ModelGraph, layer_id: str, pairs, noise=0.0, seed=0) -> ModelGraph:
    """Copy filter `src` over `dst` for each (src, dst) pair, including the
    conv bias and any batchnorm entries, so the two channels produce
    identical maps.  Optional Gaussian noise perturbs the copies."""
    rng = np.random.default_rng(seed)
    out = model.copy()
    w = out.weights[layer_id]
    bn_id = next((n.id for n in out.nodes if n.kind == "batchnorm" and n.inputs == [layer_id]), None)
    for src, dst in pairs:
        w["weight"][dst] = w["weight"][src]
        if noise:
            w["weight"][dst] += (rng.standard_normal(w["weight"][dst].shape) * noise).astype(np.float32)
        if "bias" in w:
            w["bias"][dst] = w["bias"][src]
        if bn_id is not None:
            for name in ("mean", "var", "scale", "shift"):
                out.weights[bn_id][name][dst] = out.weights[bn_id][name][src]
    return out


def build_duplicate_toy_net(seed=0, channels=8, dup_pairs=((0, 1),), noise=0.0,
                            ensure_live=True, **kwargs) -> ModelGraph:
    """Toy net whose first conv holds exactly duplicated filters.

    With ensure_live (default), the builder retries seeds until every
    channel's tap map varies on every probe image, so the duplicate pairs
    are the only redundancy: a relu-dead channel would otherwise dilute
    the pair similarity (a degenerate image contributes 0 to the mean) and
    become a competing prune candidate.
    """
    from .data import synthesize_cifar_like
    from .model import forward_capture

    for salt in range(64):
        base = build_toy_net(seed=seed + 7919 * salt, channels=channels, **kwargs)
        net = duplicate_filters(base, "conv1", dup_pairs, noise=noise, seed=seed + 1)
        if not ensure_live:
            return net
        # liveliness must hold for noise-like and smooth image statistics
        rng = np.random.default_rng(seed + 13)
        probes = [rng.random((8,) + net.input_shape, dtype=np.float32)]
        c, h, w = net.input_shape
        if c <= 3 and h == w and h >= 8:
            smooth = synthesize_cifar_like(8, seed=seed + 13, size=h)
            probes.append(np.ascontiguousarray(smooth[:, :c]))
        ok = True
        for probe in probes:
            maps = forward_capture(net, probe, taps={"relu1"}).activations["relu1"]
            ok = ok and float(maps.std(axis=(2, 3)).min()) > 1e-3
        if ok:
            return net
    raise RuntimeError("no live duplicate toy net found for this seed")


def build_residual_toy(seed=0, channels=8, input_shape=(3, 8, 8), class_count=4) -> ModelGraph:
    """One basic residual block behind a stem conv; used for coupling tests."""
    rng = np.random.default_rng(seed)
    nodes = [
        LayerNode("stem", "conv", ["images"], {"stride": 1, "padding": 1}),
        LayerNode("stem_bn", "batchnorm", ["stem"], {"epsilon": 1e-5}),
        LayerNode("stem_relu", "relu", ["stem_bn"], tap=True),
        LayerNode("conv_a", "conv", ["stem_relu"], {"stride": 1, "padding": 1}),
        LayerNode("bn_a", "batchnorm", ["conv_a"], {"epsilon": 1e-5}),
        LayerNode("relu_a", "relu", ["bn_a"], tap=True),
        LayerNode("conv_b", "conv", ["relu_a"], {"stride": 1, "padding": 1}),
        LayerNode("bn_b", "batchnorm", ["conv_b"], {"epsilon": 1e-5}),
        LayerNode("add", "add", ["bn_b", "stem_relu"]),
        LayerNode("relu_out", "relu", ["add"], tap=True),
        LayerNode("gap", "global_avgpool", ["relu_out"]),
        LayerNode("fc", "linear", ["gap"]),
    ]
    weights = {
        "stem": _conv_weights(rng, channels, input_shape[0], 3, bias=False),
        "stem_bn": _bn_weights(rng, channels),
        "conv_a": _conv_weights(rng, channels, channels, 3, bias=False),
        "bn_a": _bn_weights(rng, channels),
        "conv_b": _conv_weights(rng, channels, channels, 3, bias=False),
        "bn_b": _bn_weights(rng, channels),
        "fc": _linear_weights(rng, class_count, channels),
    }
    return ModelGraph(nodes, weights, "images", "fc", input_shape, class_count)
