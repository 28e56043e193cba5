"""Architecture templates: torch module definitions plus the node list
mapping each checkpoint tensor onto a cfmodel/1 manifest entry.

A template is a list of node dicts (id, kind, inputs, params, tap,
source) where `source` names the state_dict prefix holding that node's
tensors.  Builders cover the CIFAR VGG-16 variant (13 convs + batchnorm,
512-512-10 classifier) and CIFAR ResNet-56 with strided 1x1 projection
shortcuts.
"""

from __future__ import annotations

import torch
import torch.nn as nn

VGG16_PLAN = [64, 64, "M", 128, 128, "M", 256, 256, 256, "M",
              512, 512, 512, "M", 512, 512, 512, "M"]

TEMPLATE_IDS = ("vgg16-cifar", "resnet56-cifar")


class VGG16Cifar(nn.Module):
    def __init__(self, class_count=10):
        super().__init__()
        in_ch = 3
        ci = 0
        layers = {}
        self._order = []
        for spec in VGG16_PLAN:
            if spec == "M":
                name = f"pool{ci}"
                layers[name] = nn.MaxPool2d(2, 2)
            else:
                ci += 1
                layers[f"conv{ci}"] = nn.Conv2d(in_ch, spec, 3, padding=1)
                layers[f"bn{ci}"] = nn.BatchNorm2d(spec)
                layers[f"relu{ci}"] = nn.ReLU()
                in_ch = spec
                self._order.extend([f"conv{ci}", f"bn{ci}", f"relu{ci}"])
                continue
            self._order.append(name)
        for name, mod in layers.items():
            setattr(self, name, mod)
        self.fc1 = nn.Linear(512, 512)
        self.fc_relu = nn.ReLU()
        self.fc2 = nn.Linear(512, class_count)

    def forward(self, x):
        for name in self._order:
            x = getattr(self, name)(x)
        x = torch.flatten(x, 1)
        x = self.fc_relu(self.fc1(x))
        return self.fc2(x)


class BasicBlock(nn.Module):
    def __init__(self, in_ch, out_ch, stride):
        super().__init__()
        self.conv_a = nn.Conv2d(in_ch, out_ch, 3, stride=stride, padding=1, bias=False)
        self.bn_a = nn.BatchNorm2d(out_ch)
        self.conv_b = nn.Conv2d(out_ch, out_ch, 3, padding=1, bias=False)
        self.bn_b = nn.BatchNorm2d(out_ch)
        self.proj = None
        self.proj_bn = None
        if stride != 1 or in_ch != out_ch:
            self.proj = nn.Conv2d(in_ch, out_ch, 1, stride=stride, bias=False)
            self.proj_bn = nn.BatchNorm2d(out_ch)

    def forward(self, x):
        shortcut = x if self.proj is None else self.proj_bn(self.proj(x))
        out = torch.relu(self.bn_a(self.conv_a(x)))
        out = self.bn_b(self.conv_b(out))
        return torch.relu(out + shortcut)


class ResNet56Cifar(nn.Module):
    def __init__(self, class_count=10, base_width=16, blocks=9):
        super().__init__()
        self.conv0 = nn.Conv2d(3, base_width, 3, padding=1, bias=False)
        self.bn0 = nn.BatchNorm2d(base_width)
        self.stages = nn.ModuleList()
        in_ch = base_width
        for stage, ch in enumerate((base_width, base_width * 2, base_width * 4)):
            for blk in range(blocks):
                stride = 2 if (stage > 0 and blk == 0) else 1
                self.stages.append(BasicBlock(in_ch, ch, stride))
                in_ch = ch
        self.fc = nn.Linear(in_ch, class_count)

    def forward(self, x):
        x = torch.relu(self.bn0(self.conv0(x)))
        for block in self.stages:
            x = block(x)
        x = x.mean(dim=(2, 3))
        return self.fc(x)


def _conv_node(nid, inputs, source, stride=1, padding=1):
    return {"id": nid, "kind": "conv", "inputs": inputs,
            "params": {"stride": stride, "padding": padding}, "tap": False,
            "source": source}


def _bn_node(nid, inputs, source, eps=1e-5):
    return {"id": nid, "kind": "batchnorm", "inputs": inputs,
            "params": {"epsilon": eps}, "tap": False, "source": source}


def _relu_node(nid, inputs, tap):
    return {"id": nid, "kind": "relu", "inputs": inputs, "params": {},
            "tap": tap, "source": None}


def vgg16_template(class_count=10):
    nodes = []
    prev = "images"
    ci = 0
    for spec in VGG16_PLAN:
        if spec == "M":
            nodes.append({"id": f"pool{ci}", "kind": "maxpool", "inputs": [prev],
                          "params": {"kernel": 2, "stride": 2}, "tap": False, "source": None})
            prev = f"pool{ci}"
            continue
        ci += 1
        nodes.append(_conv_node(f"conv{ci}", [prev], f"conv{ci}"))
        nodes.append(_bn_node(f"bn{ci}", [f"conv{ci}"], f"bn{ci}"))
        nodes.append(_relu_node(f"relu{ci}", [f"bn{ci}"], tap=True))
        prev = f"relu{ci}"
    nodes.append({"id": "fc1", "kind": "linear", "inputs": [prev], "params": {},
                  "tap": False, "source": "fc1"})
    nodes.append(_relu_node("fc_relu", ["fc1"], tap=False))
    nodes.append({"id": "fc2", "kind": "linear", "inputs": ["fc_relu"], "params": {},
                  "tap": False, "source": "fc2"})
    return {"input": "images", "output": "fc2",
            "input_shape": [3, 32, 32], "class_count": class_count, "nodes": nodes}


def resnet56_template(class_count=10, base_width=16, blocks=9):
    nodes = [
        _conv_node("conv0", ["images"], "conv0"),
        _bn_node("bn0", ["conv0"], "bn0"),
        _relu_node("relu0", ["bn0"], tap=True),
    ]
    prev, in_ch = "relu0", base_width
    idx = 0
    for stage, ch in enumerate((base_width, base_width * 2, base_width * 4)):
        for blk in range(blocks):
            tag = f"s{stage}b{blk}"
            src = f"stages.{idx}"
            idx += 1
            stride = 2 if (stage > 0 and blk == 0) else 1
            shortcut = prev
            if stride != 1 or in_ch != ch:
                nodes.append(_conv_node(f"{tag}_proj", [prev], f"{src}.proj",
                                        stride=stride, padding=0))
                nodes.append(_bn_node(f"{tag}_proj_bn", [f"{tag}_proj"], f"{src}.proj_bn"))
                shortcut = f"{tag}_proj_bn"
            nodes.append(_conv_node(f"{tag}_conv_a", [prev], f"{src}.conv_a", stride=stride))
            nodes.append(_bn_node(f"{tag}_bn_a", [f"{tag}_conv_a"], f"{src}.bn_a"))
            nodes.append(_relu_node(f"{tag}_relu_a", [f"{tag}_bn_a"], tap=True))
            nodes.append(_conv_node(f"{tag}_conv_b", [f"{tag}_relu_a"], f"{src}.conv_b"))
            nodes.append(_bn_node(f"{tag}_bn_b", [f"{tag}_conv_b"], f"{src}.bn_b"))
            nodes.append({"id": f"{tag}_add", "kind": "add",
                          "inputs": [f"{tag}_bn_b", shortcut], "params": {},
                          "tap": False, "source": None})
            nodes.append(_relu_node(f"{tag}_relu", [f"{tag}_add"], tap=True))
            prev, in_ch = f"{tag}_relu", ch
    nodes.append({"id": "gap", "kind": "global_avgpool", "inputs": [prev],
                  "params": {}, "tap": False, "source": None})
    nodes.append({"id": "fc", "kind": "linear", "inputs": ["gap"], "params": {},
                  "tap": False, "source": "fc"})
    return {"input": "images", "output": "fc",
            "input_shape": [3, 32, 32], "class_count": class_count, "nodes": nodes}


def build_module(arch: str) -> nn.Module:
    if arch == "vgg16-cifar":
        return VGG16Cifar()
    if arch == "resnet56-cifar":
        return ResNet56Cifar()
    raise ValueError(f"unknown architecture template {arch!r}")


def build_template(arch: str) -> dict:
    if arch == "vgg16-cifar":
        return vgg16_template()
    if arch == "resnet56-cifar":
        return resnet56_template()
    raise ValueError(f"unknown architecture template {arch!r}")
