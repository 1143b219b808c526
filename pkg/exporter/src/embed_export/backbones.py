"""Vision backbones with a uniform embed(batch) -> features interface.

The embedding is always the penultimate pooled activation, recorded per
backbone in the manifest. Zoo entries (``resnet18``, ``resnet50``,
``vit_b_16``) load pretrained weights from torchvision and therefore need
network access; the ``-untrained`` variants and ``lenet5`` initialize
deterministically from a fixed seed and work offline.
"""

from __future__ import annotations

import torch
from torch import nn
from torchvision import models, transforms

from .errors import ExportError

_IMAGENET_NORM = transforms.Normalize(
    mean=[0.485, 0.456, 0.406], std=[0.229, 0.224, 0.225]
)


class LeNet5(nn.Module):
    """Classic 32x32 LeNet-5 trunk; the 84-wide fc2 output is the embedding."""

    def __init__(self):
        super().__init__()
        self.features = nn.Sequential(
            nn.Conv2d(3, 6, kernel_size=5),
            nn.Tanh(),
            nn.AvgPool2d(2),
            nn.Conv2d(6, 16, kernel_size=5),
            nn.Tanh(),
            nn.AvgPool2d(2),
        )
        self.fc1 = nn.Linear(16 * 5 * 5, 120)
        self.fc2 = nn.Linear(120, 84)

    def forward(self, x):
        h = self.features(x).flatten(1)
        h = torch.tanh(self.fc1(h))
        return torch.tanh(self.fc2(h))


class Backbone:
    def __init__(self, name: str, module: nn.Module, embed, preprocess, width: int, note: str):
        self.name = name
        self.module = module.eval()
        self._embed = embed
        self.preprocess = preprocess
        self.width = width
        self.note = note
        for p in self.module.parameters():
            p.requires_grad_(False)

    @torch.no_grad()
    def embed(self, batch: torch.Tensor) -> torch.Tensor:
        return self._embed(batch)


def _small_input_preprocess():
    return transforms.Compose([
        transforms.Resize((32, 32)),
        transforms.ToTensor(),
        transforms.Normalize(mean=[0.5] * 3, std=[0.5] * 3),
    ])


def _imagenet_preprocess():
    return transforms.Compose([
        transforms.Resize(256),
        transforms.CenterCrop(224),
        transforms.ToTensor(),
        _IMAGENET_NORM,
    ])


def _resnet(name: str, ctor, weights, width: int) -> Backbone:
    try:
        net = ctor(weights=weights)
    except Exception as exc:  # weight download failed or unavailable
        raise ExportError(
            f"could not fetch pretrained weights for {name!r}: {exc}; "
            f"use '{name}-untrained' for an offline deterministic backbone"
        ) from exc
    trunk = nn.Sequential(*list(net.children())[:-1])  # up to global avgpool

    def embed(batch):
        return trunk(batch).flatten(1)

    return Backbone(name, trunk, embed, _imagenet_preprocess(), width,
                    "global average pool before the classification head")


def _resnet_untrained(name: str, ctor, width: int) -> Backbone:
    torch.manual_seed(0)
    net = ctor(weights=None)
    trunk = nn.Sequential(*list(net.children())[:-1])

    def embed(batch):
        return trunk(batch).flatten(1)

    return Backbone(name, trunk, embed, _imagenet_preprocess(), width,
                    "global average pool; deterministic seed-0 initialization, no training")


def _vit(name: str) -> Backbone:
    try:
        net = models.vit_b_16(weights=models.ViT_B_16_Weights.IMAGENET1K_V1)
    except Exception as exc:
        raise ExportError(
            f"could not fetch pretrained weights for {name!r}: {exc}"
        ) from exc

    def embed(batch):
        feats = net._process_input(batch)
        cls = net.class_token.expand(feats.shape[0], -1, -1)
        feats = torch.cat([cls, feats], dim=1)
        feats = net.encoder(feats)
        return feats[:, 0]

    return Backbone(name, net, embed, _imagenet_preprocess(), 768,
                    "class-token encoder output before the head")


def _lenet5() -> Backbone:
    torch.manual_seed(0)
    net = LeNet5()

    def embed(batch):
        return net(batch)

    return Backbone("lenet5", net, embed, _small_input_preprocess(), 84,
                    "fc2 activation; deterministic seed-0 initialization, no training")


_BUILDERS = {
    "lenet5": _lenet5,
    "resnet18": lambda: _resnet("resnet18", models.resnet18, models.ResNet18_Weights.IMAGENET1K_V1, 512),
    "resnet50": lambda: _resnet("resnet50", models.resnet50, models.ResNet50_Weights.IMAGENET1K_V1, 2048),
    "vit_b_16": lambda: _vit("vit_b_16"),
    "resnet18-untrained": lambda: _resnet_untrained("resnet18-untrained", models.resnet18, 512),
    "resnet50-untrained": lambda: _resnet_untrained("resnet50-untrained", models.resnet50, 2048),
}

ALLOWED_BACKBONES = tuple(sorted(_BUILDERS))


def load_backbone(name: str) -> Backbone:
    if name not in _BUILDERS:
        raise ExportError(
            f"unknown backbone {name!r}; allowed: {', '.join(ALLOWED_BACKBONES)}"
        )
    return _BUILDERS[name]()
