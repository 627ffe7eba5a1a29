"""The M-peer training graph and the single-network deployment export.

A backbone is a stack of convolutional stages followed by global average
pooling and a linear classifier. Peers share the leading stages (the stem)
and each owns the trailing ``branch_stages`` stages, its classifier and a
projection head mapping the pooled feature to a unit-norm embedding.
"""
import copy
import json
from dataclasses import asdict, dataclass, field
from typing import List, Tuple

import torch
import torch.nn.functional as F
from torch import nn

from .errors import InvalidInputError


@dataclass(frozen=True)
class BackboneSpec:
    """Convolutional classifier made of stages.

    ``widths[i]``/``depths[i]`` give the channel count and number of blocks
    in stage ``i``. With ``block="plain"`` a block is conv-BN-ReLU and every
    stage but the last ends with a 2x2 max-pool. With ``block="residual"``
    blocks are two-conv basic residual blocks, stages after the first
    downsample with a stride-2 first block, and stage 0 starts with a
    conv-BN-ReLU on the input (widths (16, 32, 64) and depths (5, 5, 5) give
    ResNet-32).
    """

    num_classes: int = 10
    in_channels: int = 3
    resolution: int = 16
    widths: Tuple[int, ...] = (16, 32, 64)
    depths: Tuple[int, ...] = (1, 1, 1)
    branch_stages: int = 2
    embed_dim: int = 128
    proj_layers: int = 1
    block: str = "plain"

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(self.widths))
        object.__setattr__(self, "depths", tuple(self.depths))
        if len(self.widths) != len(self.depths):
            raise InvalidInputError("widths and depths must have the same length")
        if len(self.widths) < 3:
            raise InvalidInputError("the backbone needs at least 3 stages")
        if not 1 <= self.branch_stages <= len(self.widths):
            raise InvalidInputError(f"branch_stages must be in [1, {len(self.widths)}]")
        if self.num_classes < 2:
            raise InvalidInputError("need at least 2 classes")
        if self.proj_layers < 1:
            raise InvalidInputError("proj_layers must be at least 1")
        if self.block not in ("plain", "residual"):
            raise InvalidInputError(f"block must be 'plain' or 'residual', got {self.block!r}")

    @property
    def feature_dim(self):
        return self.widths[-1]

    def to_dict(self):
        d = asdict(self)
        d["widths"] = list(self.widths)
        d["depths"] = list(self.depths)
        return d


class BasicBlock(nn.Module):
    def __init__(self, c_in, c_out, stride):
        super().__init__()
        self.conv1 = nn.Conv2d(c_in, c_out, 3, stride=stride, padding=1, bias=False)
        self.bn1 = nn.BatchNorm2d(c_out)
        self.conv2 = nn.Conv2d(c_out, c_out, 3, padding=1, bias=False)
        self.bn2 = nn.BatchNorm2d(c_out)
        self.shortcut = nn.Sequential()
        if stride != 1 or c_in != c_out:
            self.shortcut = nn.Sequential(nn.Conv2d(c_in, c_out, 1, stride=stride, bias=False), nn.BatchNorm2d(c_out))

    def forward(self, x):
        out = F.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return F.relu(out + self.shortcut(x))


def _residual_stage(spec, i):
    layers = []
    if i == 0:
        layers += [nn.Conv2d(spec.in_channels, spec.widths[0], 3, padding=1, bias=False),
                   nn.BatchNorm2d(spec.widths[0]), nn.ReLU(inplace=True)]
    c_in = spec.widths[max(i - 1, 0)]
    for j in range(spec.depths[i]):
        stride = 2 if i > 0 and j == 0 else 1
        layers.append(BasicBlock(c_in, spec.widths[i], stride))
        c_in = spec.widths[i]
    return nn.Sequential(*layers)


def _stage(spec, i):
    if spec.block == "residual":
        return _residual_stage(spec, i)
    c_in = spec.in_channels if i == 0 else spec.widths[i - 1]
    layers = []
    for _ in range(spec.depths[i]):
        layers += [
            nn.Conv2d(c_in, spec.widths[i], 3, padding=1, bias=False),
            nn.BatchNorm2d(spec.widths[i]),
            nn.ReLU(inplace=True),
        ]
        c_in = spec.widths[i]
    if i < len(spec.widths) - 1:
        layers.append(nn.MaxPool2d(2))
    return nn.Sequential(*layers)


def _stem(spec):
    n_stem = len(spec.widths) - spec.branch_stages
    return nn.Sequential(*[_stage(spec, i) for i in range(n_stem)])


def _projection(spec):
    if spec.proj_layers == 1:
        return nn.Linear(spec.feature_dim, spec.embed_dim)
    layers = []
    for _ in range(spec.proj_layers - 1):
        layers += [nn.Linear(spec.feature_dim, spec.feature_dim), nn.ReLU(inplace=True)]
    layers.append(nn.Linear(spec.feature_dim, spec.embed_dim))
    return nn.Sequential(*layers)


class Branch(nn.Module):
    """High-level stages, pooling, classifier and projection head of one peer."""

    def __init__(self, spec):
        super().__init__()
        n_stem = len(spec.widths) - spec.branch_stages
        self.stages = nn.Sequential(*[_stage(spec, i) for i in range(n_stem, len(spec.widths))])
        self.classifier = nn.Linear(spec.feature_dim, spec.num_classes)
        self.projection = _projection(spec)

    def features(self, h):
        return self.stages(h).mean(dim=(2, 3))

    def forward(self, h):
        feat = self.features(h)
        return self.classifier(feat), F.normalize(self.projection(feat), dim=-1), feat


@dataclass
class PeerOutput:
    logits: torch.Tensor
    embedding: torch.Tensor
    features: torch.Tensor = field(repr=False)


class PeerGraph(nn.Module):
    """``M`` peers over a shared (or replicated) stem.

    ``stems`` holds one module when the stem is shared, otherwise ``M``.
    Peer ``M - 1`` (zero-based) is the deployment peer.
    """

    def __init__(self, spec, M, share_stem=True):
        super().__init__()
        if M < 1:
            raise InvalidInputError(f"need at least one peer, got M={M}")
        self.spec = spec
        self.M = M
        self.share_stem = share_stem
        self.stems = nn.ModuleList([_stem(spec) for _ in range(1 if share_stem else M)])
        self.branches = nn.ModuleList([Branch(spec) for _ in range(M)])

    def stem_for(self, m):
        return self.stems[0 if self.share_stem else m]

    def _check_input(self, x):
        s = self.spec
        expected = (s.in_channels, s.resolution, s.resolution)
        if x.ndim != 4 or tuple(x.shape[1:]) != expected:
            raise InvalidInputError(f"expected a batch of shape (B, {expected[0]}, {expected[1]}, {expected[2]}), got {tuple(x.shape)}")

    def forward(self, x) -> List[PeerOutput]:
        self._check_input(x)
        outputs = []
        shared = self.stems[0](x) if self.share_stem else None
        for m, branch in enumerate(self.branches):
            h = shared if self.share_stem else self.stems[m](x)
            logits, emb, feat = branch(h)
            outputs.append(PeerOutput(logits, emb, feat))
        return outputs

    def describe(self):
        return {
            "kind": "peer_graph",
            "backbone": self.spec.to_dict(),
            "M": self.M,
            "share_stem": self.share_stem,
            "parameters": parameter_count(self),
        }


def build(spec, M, share_stem=True, seed=0, dtype=torch.float32):
    """Deterministically initialized :class:`PeerGraph`."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        graph = PeerGraph(spec, M, share_stem=share_stem)
    return graph.to(dtype)


def parameter_count(module):
    return sum(p.numel() for p in module.parameters())


class DeploymentNet(nn.Module):
    """A single classifier: stem, the high-level stages of one peer, its
    classifier. No projection head."""

    def __init__(self, spec, stem, stages, classifier):
        super().__init__()
        self.spec = spec
        self.stem = stem
        self.stages = stages
        self.classifier = classifier

    def features(self, x):
        return self.stages(self.stem(x)).mean(dim=(2, 3))

    def forward(self, x):
        return self.classifier(self.features(x))

    def describe(self):
        return {
            "kind": "deployment_net",
            "backbone": self.spec.to_dict(),
            "parameters": parameter_count(self),
        }

    @classmethod
    def from_spec(cls, spec):
        branch = Branch(spec)
        return cls(spec, _stem(spec), branch.stages, branch.classifier)


def single_network_parameter_count(spec):
    return parameter_count(DeploymentNet.from_spec(spec))


def export_deployment(graph):
    """Standalone copy of the last peer; reproduces its logits exactly."""
    m = graph.M - 1
    branch = graph.branches[m]
    net = DeploymentNet(
        graph.spec,
        copy.deepcopy(graph.stem_for(m)),
        copy.deepcopy(branch.stages),
        copy.deepcopy(branch.classifier),
    )
    net.train(graph.training)
    return net


def save_deployment(net, path, structure_path=None):
    """Write ``net`` as a standalone state file plus a JSON structure file."""
    torch.save({"spec": net.spec.to_dict(), "state_dict": net.state_dict()}, path)
    structure_path = structure_path or str(path) + ".json"
    with open(structure_path, "w") as fh:
        json.dump(net.describe(), fh, indent=2)
    return structure_path


def load_deployment(path):
    blob = torch.load(path, weights_only=True)
    spec = BackboneSpec(**blob["spec"])
    net = DeploymentNet.from_spec(spec)
    dtype = next(t.dtype for t in blob["state_dict"].values() if t.is_floating_point())
    net.to(dtype).load_state_dict(blob["state_dict"])
    return net
