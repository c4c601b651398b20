"""Two-branch regression network for extrinsic correction.

An RGB branch and a depth branch with identical layout feed a shared
aggregation trunk; two decoupled heads regress the rotation vector and the
translation.  Normalization is GroupNorm so that single-sample batches train
and inference is batch-composition independent.
"""

from dataclasses import dataclass

import torch
from torch import nn


@dataclass(frozen=True)
class NetworkSpec:
    height: int = 64
    width: int = 64
    base_channels: int = 16
    dropout: float = 0.5

    def __post_init__(self):
        if self.height < 16 or self.width < 16:
            raise ValueError("input must be at least 16x16")
        if self.height % 16 or self.width % 16:
            raise ValueError("input sides must be multiples of 16")
        if self.base_channels < 1:
            raise ValueError("base_channels must be positive")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")


def _norm(channels: int) -> nn.GroupNorm:
    return nn.GroupNorm(min(8, channels), channels)


class ResidualBlock(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.conv1 = nn.Conv2d(channels, channels, 3, padding=1, bias=False)
        self.n1 = _norm(channels)
        self.conv2 = nn.Conv2d(channels, channels, 3, padding=1, bias=False)
        self.n2 = _norm(channels)

    def forward(self, x):
        h = torch.relu(self.n1(self.conv1(x)))
        h = self.n2(self.conv2(h))
        return torch.relu(x + h)


class Branch(nn.Module):
    """Stem plus two stages, each halving resolution; ends at 2c channels."""

    def __init__(self, in_channels: int, c: int):
        super().__init__()
        self.stem = nn.Conv2d(in_channels, c, 3, stride=2, padding=1, bias=False)
        self.stem_norm = _norm(c)
        self.block1 = ResidualBlock(c)
        self.down = nn.Conv2d(c, 2 * c, 3, stride=2, padding=1, bias=False)
        self.down_norm = _norm(2 * c)
        self.block2 = ResidualBlock(2 * c)

    def forward(self, x):
        h = torch.relu(self.stem_norm(self.stem(x)))
        h = self.block1(h)
        h = torch.relu(self.down_norm(self.down(h)))
        return self.block2(h)


class Head(nn.Module):
    """1x1 conv, dropout, then a linear map from the flattened feature map.

    The fully connected layer sees the spatial layout; pooling it away
    destroys exactly the displacement information the pose lives in.
    """

    def __init__(self, channels: int, feat_h: int, feat_w: int, dropout: float):
        super().__init__()
        self.conv = nn.Conv2d(channels, channels, 1, bias=False)
        self.norm = _norm(channels)
        self.drop = nn.Dropout(dropout)
        self.fc = nn.Linear(channels * feat_h * feat_w, 3)

    def forward(self, x):
        h = torch.relu(self.norm(self.conv(x)))
        h = h.flatten(start_dim=1)
        return self.fc(self.drop(h))


class TwoBranchNet(nn.Module):
    def __init__(self, spec: NetworkSpec):
        super().__init__()
        c = spec.base_channels
        self.spec = spec
        self.rgb_branch = Branch(3, c)
        self.depth_branch = Branch(1, c)
        self.agg1_conv = nn.Conv2d(4 * c, 4 * c, 3, stride=2, padding=1, bias=False)
        self.agg1_norm = _norm(4 * c)
        self.agg1_block = ResidualBlock(4 * c)
        self.agg2_conv = nn.Conv2d(4 * c, 2 * c, 3, stride=2, padding=1, bias=False)
        self.agg2_norm = _norm(2 * c)
        self.agg2_block = ResidualBlock(2 * c)
        self.match = nn.Conv2d(2 * c, 2 * c, 3, padding=1, bias=False)
        self.match_norm = _norm(2 * c)
        # four stride-2 layers: feature grid is 1/16 of the input
        feat_h, feat_w = spec.height // 16, spec.width // 16
        self.rot_head = Head(2 * c, feat_h, feat_w, spec.dropout)
        self.trans_head = Head(2 * c, feat_h, feat_w, spec.dropout)

    def forward(self, rgb: torch.Tensor, depth: torch.Tensor):
        if rgb.ndim != 4 or rgb.shape[1] != 3:
            raise ValueError(f"rgb must be (N, 3, H, W), got {tuple(rgb.shape)}")
        if depth.ndim != 4 or depth.shape[1] != 1:
            raise ValueError(f"depth must be (N, 1, H, W), got {tuple(depth.shape)}")
        expect = (self.spec.height, self.spec.width)
        if tuple(rgb.shape[2:]) != expect or tuple(depth.shape[2:]) != expect:
            raise ValueError(f"inputs must be {expect}")
        h = torch.cat([self.rgb_branch(rgb), self.depth_branch(depth)], dim=1)
        h = torch.relu(self.agg1_norm(self.agg1_conv(h)))
        h = self.agg1_block(h)
        h = torch.relu(self.agg2_norm(self.agg2_conv(h)))
        h = self.agg2_block(h)
        h = torch.relu(self.match_norm(self.match(h)))
        return self.rot_head(h), self.trans_head(h)


def he_init(module: nn.Module) -> None:
    for m in module.modules():
        if isinstance(m, nn.Conv2d):
            nn.init.kaiming_normal_(m.weight, nonlinearity="relu")
        elif isinstance(m, nn.Linear):
            nn.init.kaiming_normal_(m.weight, nonlinearity="relu")
            nn.init.zeros_(m.bias)
        elif isinstance(m, nn.GroupNorm):
            nn.init.ones_(m.weight)
            nn.init.zeros_(m.bias)


def build_network(spec: NetworkSpec, pretrained_rgb: dict | None = None) -> TwoBranchNet:
    """Construct the network in float64.

    Without pretrained weights every conv and linear layer gets He-Normal
    initialization.  With an RGB-branch state dict, both branches start from
    it; the depth stem collapses the RGB stem by averaging over the input
    channel so single-channel input sees the same response scale.
    """
    net = TwoBranchNet(spec).double()
    he_init(net)
    # start near the identity correction: full-scale head weights emit poses
    # wild enough to project the entire cloud off-screen
    with torch.no_grad():
        net.rot_head.fc.weight.mul_(0.01)
        net.trans_head.fc.weight.mul_(0.01)
    if pretrained_rgb is not None:
        net.rgb_branch.load_state_dict(pretrained_rgb)
        depth_state = {k: v.clone() for k, v in pretrained_rgb.items()}
        depth_state["stem.weight"] = pretrained_rgb["stem.weight"].mean(
            dim=1, keepdim=True
        )
        net.depth_branch.load_state_dict(depth_state)
    return net
