"""Toy multi-level Siamese RPN: shared backbone, depthwise-correlation heads, level fusion."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..autodiff import Conv2d, Module, Parameter, Tensor, ops
from ..errors import DimensionError
from .anchors import AnchorGrid

LEVELS = (2, 3, 4)


@dataclass(frozen=True)
class ModelConfig:
    template_size: int = 64
    search_size: int = 128
    stride: int = 8
    widths: tuple[int, int, int] = (32, 64, 64)
    adjust_channels: int = 32
    head_hidden: int = 32
    anchor_base: float = 32.0
    anchor_ratios: tuple[float, ...] = (1.0,)
    seed: int = 0

    @property
    def k(self) -> int:
        return len(self.anchor_ratios)

    @property
    def score_size(self) -> int:
        return (self.search_size - self.template_size) // self.stride + 1

    def anchor_grid(self) -> AnchorGrid:
        return AnchorGrid(self.score_size, self.stride, self.search_size, self.anchor_base, tuple(self.anchor_ratios))

    def to_dict(self) -> dict:
        return {
            "template_size": self.template_size, "search_size": self.search_size, "stride": self.stride,
            "widths": list(self.widths), "adjust_channels": self.adjust_channels,
            "head_hidden": self.head_hidden, "anchor_base": self.anchor_base,
            "anchor_ratios": list(self.anchor_ratios), "seed": self.seed,
        }


class Block(Module):
    """conv3x3 -> relu -> conv3x3 -> relu, optionally followed by a 2x2 max-pool."""

    def __init__(self, rng, in_ch, out_ch, pool: bool = False):
        self.conv1 = Conv2d(rng, in_ch, out_ch, 3, padding=1)
        self.conv2 = Conv2d(rng, out_ch, out_ch, 3, padding=1)
        self.pool = pool

    def forward(self, x: Tensor) -> Tensor:
        x = ops.relu(self.conv2(ops.relu(self.conv1(x))))
        return ops.maxpool2d(x, 2) if self.pool else x


class Backbone(Module):
    """Three blocks whose outputs all sit at stride 8 (toy analogue of ResNet blocks 2-4).

    A 4x4/stride-4 patch stem and the max-pool closing block 2 do the
    downsampling; 3x3 stride-2 convs cannot divide even crop sizes exactly.
    """

    def __init__(self, rng, widths=(32, 64, 64)):
        c2, c3, c4 = widths
        self.stem = Conv2d(rng, 3, c2, 4, stride=4)
        self.block2 = Block(rng, c2, c2, pool=True)
        self.block3 = Block(rng, c2, c3)
        self.block4 = Block(rng, c3, c4)

    def forward(self, x: Tensor) -> list[Tensor]:
        f2 = self.block2(ops.relu(self.stem(x)))
        f3 = self.block3(f2)
        f4 = self.block4(f3)
        return [f2, f3, f4]


def _centre(r: Tensor) -> Tensor:
    # removing each channel's spatial mean leaves only the positional contrast the heads need;
    # parameter-free stand-in for the batch norm that usually follows the correlation
    return r - ops.mean(r, axis=(2, 3), keepdims=True)


class DepthwiseRPN(Module):
    """One level's head: adjust layers, depthwise xcorr, then 1x1 conv stacks for cls and reg."""

    def __init__(self, rng, in_ch: int, adj: int, hidden: int, k: int):
        self.cls_z = Conv2d(rng, in_ch, adj, 1)
        self.cls_x = Conv2d(rng, in_ch, adj, 1)
        self.reg_z = Conv2d(rng, in_ch, adj, 1)
        self.reg_x = Conv2d(rng, in_ch, adj, 1)
        self.cls_h = Conv2d(rng, adj, hidden, 1)
        self.cls_o = Conv2d(rng, hidden, 2 * k, 1)
        self.reg_h = Conv2d(rng, adj, hidden, 1)
        self.reg_o = Conv2d(rng, hidden, 4 * k, 1)

    def forward(self, z: Tensor, x: Tensor) -> tuple[Tensor, Tensor]:
        cls = _centre(ops.depthwise_xcorr(self.cls_x(x), self.cls_z(z)))
        reg = _centre(ops.depthwise_xcorr(self.reg_x(x), self.reg_z(z)))
        cls = self.cls_o(ops.relu(self.cls_h(cls)))
        reg = self.reg_o(ops.relu(self.reg_h(reg)))
        return cls, reg


@dataclass
class RPNOutput:
    cls: Tensor  # fused (N, 2k, s, s): channels [bg_0..bg_k-1, fg_0..fg_k-1]
    reg: Tensor  # fused (N, 4k, s, s): channels [dx_*, dy_*, dw_*, dh_*]
    level_cls: list[Tensor] = field(default_factory=list)
    level_reg: list[Tensor] = field(default_factory=list)


class SiameseRPN(Module):
    def __init__(self, config: ModelConfig = ModelConfig()):
        self.config = config
        rng = np.random.default_rng(config.seed)
        self.backbone = Backbone(rng, config.widths)
        self.heads = [DepthwiseRPN(rng, c, config.adjust_channels, config.head_hidden, config.k)
                      for c in config.widths]
        self.cls_weight = Parameter(np.zeros(len(LEVELS)))
        self.reg_weight = Parameter(np.zeros(len(LEVELS)))

    def backbone_parameters(self) -> list[Parameter]:
        return self.backbone.parameters()

    def head_parameters(self) -> list[Parameter]:
        ids = {id(p) for p in self.backbone.parameters()}
        return [p for p in self.parameters() if id(p) not in ids]

    def extract_features(self, crop: Tensor) -> list[Tensor]:
        size = crop.shape[-1]
        if crop.ndim != 4 or crop.shape[1] != 3 or crop.shape[-2] != size or size not in (
                self.config.template_size, self.config.search_size):
            raise DimensionError(
                f"crop must be (N,3,S,S) with S in {{{self.config.template_size}, {self.config.search_size}}}, "
                f"got {crop.shape}")
        return self.backbone(crop)

    def rpn_head(self, zf: list[Tensor], xf: list[Tensor]) -> RPNOutput:
        level_cls, level_reg = [], []
        for head, z, x in zip(self.heads, zf, xf):
            c, r = head(z, x)
            level_cls.append(c)
            level_reg.append(r)
        wc = ops.softmax(self.cls_weight, axis=0)
        wr = ops.softmax(self.reg_weight, axis=0)
        cls = level_cls[0] * wc[0]
        reg = level_reg[0] * wr[0]
        for i in range(1, len(level_cls)):
            cls = cls + level_cls[i] * wc[i]
            reg = reg + level_reg[i] * wr[i]
        return RPNOutput(cls, reg, level_cls, level_reg)

    def forward(self, template: Tensor, search: Tensor):
        zf = self.extract_features(template)
        xf = self.extract_features(search)
        return self.rpn_head(zf, xf), zf, xf


def fg_probability(cls: np.ndarray, k: int) -> np.ndarray:
    """Softmax over the (bg, fg) channel pair; returns (N, k, s, s) foreground scores."""
    bg, fg = cls[:, :k], cls[:, k:]
    m = np.maximum(bg, fg)
    e_bg, e_fg = np.exp(bg - m), np.exp(fg - m)
    return e_fg / (e_bg + e_fg)


def reg_deltas(reg: np.ndarray, k: int) -> np.ndarray:
    """(N, 4k, s, s) -> (N, k, s, s, 4)."""
    n, _, s, _ = reg.shape
    return reg.reshape(n, 4, k, s, s).transpose(0, 2, 3, 4, 1)
