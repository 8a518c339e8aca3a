"""Multi-Geometry Projection network: shared trunk, classification head,
hypersphere head and Poincare-ball head."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple

import torch
from torch import nn

from .errors import ContractViolation
from .geometry import BallConfig, exp_map_origin, feature_clip, sphere_project

ARCHITECTURES = ("mlp", "small_conv", "resnet_like")


@dataclass(frozen=True)
class BackboneConfig:
    architecture: str = "mlp"
    input_shape: tuple = (16,)
    embed_dim: int = 128
    num_classes: int = 4
    hidden_dim: int = 128
    ball: BallConfig = field(default_factory=BallConfig)

    def __post_init__(self):
        if self.architecture not in ARCHITECTURES:
            raise ContractViolation(f"unknown architecture {self.architecture!r}")
        if self.embed_dim < 2:
            raise ContractViolation("embed_dim must be >= 2")
        if self.num_classes < 2:
            raise ContractViolation("num_classes must be >= 2")
        object.__setattr__(self, "input_shape", tuple(int(s) for s in self.input_shape))


class DualHeadOutput(NamedTuple):
    logits: torch.Tensor
    sphere_embedding: torch.Tensor
    ball_embedding: torch.Tensor
    penultimate: torch.Tensor


class _ResBlock(nn.Module):
    def __init__(self, cin, cout, stride):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, stride, 1, bias=False)
        self.bn1 = nn.BatchNorm2d(cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, 1, 1, bias=False)
        self.bn2 = nn.BatchNorm2d(cout)
        self.shortcut = nn.Sequential()
        if stride != 1 or cin != cout:
            self.shortcut = nn.Sequential(nn.Conv2d(cin, cout, 1, stride, bias=False), nn.BatchNorm2d(cout))

    def forward(self, x):
        out = torch.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return torch.relu(out + self.shortcut(x))


def _build_trunk(cfg: BackboneConfig) -> tuple[nn.Module, int]:
    h = cfg.hidden_dim
    if cfg.architecture == "mlp":
        if len(cfg.input_shape) != 1:
            raise ContractViolation("mlp backbone expects a flat input_shape")
        # linear last layer: the penultimate feature is never an all-zero ReLU output
        trunk = nn.Sequential(
            nn.Linear(cfg.input_shape[0], h), nn.ReLU(),
            nn.Linear(h, h), nn.ReLU(),
            nn.Linear(h, h),
        )
        return trunk, h
    if len(cfg.input_shape) != 3:
        raise ContractViolation("convolutional backbones expect (channels, height, width)")
    cin = cfg.input_shape[0]
    if cfg.architecture == "small_conv":
        layers = []
        for cout in (32, 64, 128):
            layers += [nn.Conv2d(cin, cout, 3, padding=1), nn.BatchNorm2d(cout), nn.ReLU(), nn.MaxPool2d(2)]
            cin = cout
        layers += [nn.AdaptiveAvgPool2d(1), nn.Flatten()]
        return nn.Sequential(*layers), cin
    # resnet_like: ResNet-18 layout at reduced width
    widths = (32, 64, 128, 256)
    layers = [nn.Conv2d(cin, widths[0], 3, 1, 1, bias=False), nn.BatchNorm2d(widths[0]), nn.ReLU()]
    cin = widths[0]
    for i, w in enumerate(widths):
        stride = 1 if i == 0 else 2
        layers += [_ResBlock(cin, w, stride), _ResBlock(w, w, 1)]
        cin = w
    layers += [nn.AdaptiveAvgPool2d(1), nn.Flatten()]
    return nn.Sequential(*layers), cin


class MGPNet(nn.Module):
    """Backbone with three heads sharing one penultimate feature.

    The ball head is ``linear -> feature_clip -> exp_map_origin``; the sphere
    head is ``linear -> L2 normalise``.
    """

    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        self.cfg = cfg
        self.trunk, feat_dim = _build_trunk(cfg)
        self.classifier = nn.Linear(feat_dim, cfg.num_classes)
        self.sphere_head = nn.Linear(feat_dim, cfg.embed_dim)
        self.ball_head = nn.Linear(feat_dim, cfg.embed_dim)

    def _check_input(self, x):
        if tuple(x.shape[1:]) != self.cfg.input_shape:
            raise ContractViolation(
                f"expected input of shape (N, {', '.join(map(str, self.cfg.input_shape))}), got {tuple(x.shape)}")

    def penultimate(self, x: torch.Tensor) -> torch.Tensor:
        self._check_input(x)
        return self.trunk(x)

    def forward(self, x: torch.Tensor) -> DualHeadOutput:
        feat = self.penultimate(x)
        ball = self.cfg.ball
        z_s = sphere_project(self.sphere_head(feat))
        z_h = exp_map_origin(feature_clip(self.ball_head(feat), ball.clip_radius), ball)
        return DualHeadOutput(self.classifier(feat), z_s, z_h, feat)

    def embed_for_scoring(self, x: torch.Tensor) -> torch.Tensor:
        """L2-normalised penultimate features, used by the OOD scorers."""
        feat = self.penultimate(x)
        # conv trunks end in a ReLU and can emit exact zeros; keep those rows at zero instead of failing
        n = torch.linalg.vector_norm(feat, dim=-1, keepdim=True)
        return feat / n.clamp_min(1e-12)

    def param_groups(self):
        """Parameter groups (all Euclidean) split by trunk and head, for the optimizer."""
        return [
            {"params": list(self.trunk.parameters()), "name": "trunk", "manifold": "euclidean"},
            {"params": list(self.classifier.parameters()), "name": "classifier", "manifold": "euclidean"},
            {"params": list(self.sphere_head.parameters()), "name": "sphere_head", "manifold": "euclidean"},
            {"params": list(self.ball_head.parameters()), "name": "ball_head", "manifold": "euclidean"},
        ]


def forward_logits(model, x):
    """Logits from either an MGPNet-like model or a plain classifier."""
    out = model(x)
    return out.logits if hasattr(out, "logits") else out
