"""Backbone + projection head networks."""

from __future__ import annotations

import copy
import hashlib
from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import DataError, StateError

DTYPES = {"float32": torch.float32, "float64": torch.float64}


@dataclass(frozen=True)
class ArchConfig:
    in_channels: int = 3
    widths: tuple = (16, 32, 64)
    head_hidden: int = 128
    dim: int = 128
    dtype: str = "float32"

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))

    def to_dict(self):
        d = asdict(self)
        d["widths"] = list(self.widths)
        return d

    @property
    def torch_dtype(self):
        return DTYPES[self.dtype]


class ConvBackbone(nn.Module):
    """Stack of stride-2 conv blocks; a desk-scale stand-in for a ResNet trunk."""

    def __init__(self, in_channels, widths):
        super().__init__()
        layers = []
        c = in_channels
        for k, w in enumerate(widths):
            stride = 1 if k == 0 else 2
            layers += [nn.Conv2d(c, w, 3, stride=stride, padding=1), nn.GroupNorm(min(8, w), w), nn.ReLU()]
            c = w
        self.body = nn.Sequential(*layers)
        self.out_channels = c

    def forward(self, x):
        return self.body(x)


class ProjectionHead(nn.Module):
    """Global average pool, then linear-ReLU-linear, then unit normalization."""

    def __init__(self, in_features, hidden, dim):
        super().__init__()
        self.fc1 = nn.Linear(in_features, hidden)
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, fmap):
        pooled = fmap.mean(dim=(2, 3))
        return F.normalize(self.fc2(F.relu(self.fc1(pooled))), dim=1)


class EmbeddingNet(nn.Module):
    def __init__(self, arch: ArchConfig):
        super().__init__()
        self.backbone = ConvBackbone(arch.in_channels, arch.widths)
        self.head = ProjectionHead(self.backbone.out_channels, arch.head_hidden, arch.dim)

    def forward(self, x):
        return self.head(self.backbone(x))

    def features(self, x):
        """Pooled backbone features, the representation the linear probe reads."""
        return self.backbone(x).mean(dim=(2, 3))


def build_net(arch: ArchConfig, seed: int) -> EmbeddingNet:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        net = EmbeddingNet(arch)
    return net.to(arch.torch_dtype)


def reinit_head(net: EmbeddingNet, arch: ArchConfig, seed: int):
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        head = ProjectionHead(net.backbone.out_channels, arch.head_hidden, arch.dim)
    net.head = head.to(arch.torch_dtype)


class NetworkHandle:
    """A network plus its architecture and freeze state."""

    def __init__(self, net: EmbeddingNet, arch: ArchConfig, frozen=False):
        self.net = net
        self.arch = arch
        self.frozen = False
        if frozen:
            self.freeze()

    def freeze(self):
        self.frozen = True
        for p in self.net.parameters():
            p.requires_grad_(False)
        self.net.eval()
        return self

    @property
    def dtype(self):
        return self.arch.torch_dtype

    def named_arrays(self):
        return {k: v.detach().cpu().numpy().copy() for k, v in self.net.state_dict().items()}

    def param_hash(self):
        h = hashlib.sha256()
        for k, v in sorted(self.net.state_dict().items()):
            h.update(k.encode())
            h.update(v.detach().cpu().numpy().tobytes())
        return h.hexdigest()

    def to_tensor(self, x):
        return torch.as_tensor(np.ascontiguousarray(x), dtype=self.dtype)

    @torch.no_grad()
    def embed(self, x, batch_size=256):
        """Unit embeddings of an ``N x C x H x W`` array, as numpy."""
        return self._map(self.net, x, batch_size)

    @torch.no_grad()
    def features(self, x, batch_size=256):
        return self._map(self.net.features, x, batch_size)

    def _map(self, fn, x, batch_size):
        was_training = self.net.training
        self.net.eval()
        out = [fn(self.to_tensor(x[k : k + batch_size])).cpu().numpy() for k in range(0, len(x), batch_size)]
        self.net.train(was_training)
        return np.concatenate(out).astype(np.float64)

    def check_trainable(self):
        if self.frozen:
            raise StateError("refusing to update a frozen network")


def init_from_anchor(anchor: NetworkHandle, seed: int = 0) -> NetworkHandle:
    """Unfrozen deep copy of the anchor; training the copy never touches the anchor.

    ``seed`` is unused when the anchor carries a head; it keeps the signature
    uniform with random initialization.
    """
    for name, p in anchor.net.state_dict().items():
        if not torch.all(torch.isfinite(p)):
            raise DataError(f"anchor parameter {name} is not finite")
    net = copy.deepcopy(anchor.net)
    for p in net.parameters():
        p.requires_grad_(True)
    net.train()
    return NetworkHandle(net, anchor.arch, frozen=False)


def random_network(arch: ArchConfig, seed: int) -> NetworkHandle:
    return NetworkHandle(build_net(arch, seed), arch)
