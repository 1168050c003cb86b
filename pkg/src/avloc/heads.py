"""Multimodal decoder: shared per-level fusion block plus cls / reg heads."""
import math
from dataclasses import dataclass
from typing import List

import torch
from torch import nn

from .encoders import TransformerBlock


@dataclass
class HeadOutputs:
    cls_logits: List[torch.Tensor]  # per level [B, T_l, C]
    reg: List[torch.Tensor]         # per level [B, 2, C, T_l], stride units, >= 0
    masks: List[torch.Tensor]       # per level [B, T_l]

    @property
    def cls(self):
        return [x.sigmoid() for x in self.cls_logits]


class ChannelLayerNorm(nn.Module):
    """LayerNorm over channels of a ``[B, C, T]`` tensor."""

    def __init__(self, dim):
        super().__init__()
        self.ln = nn.LayerNorm(dim)

    def forward(self, x):
        return self.ln(x.transpose(1, 2)).transpose(1, 2)


class ConvHead(nn.Module):
    """Three kernel-3 1D convolutions with LayerNorm + ReLU between them."""

    def __init__(self, in_dim, feat_dim, out_dim, num_layers=3, kernel_size=3):
        super().__init__()
        self.body = nn.ModuleList()
        for idx in range(num_layers - 1):
            self.body.append(nn.Conv1d(in_dim if idx == 0 else feat_dim, feat_dim,
                                       kernel_size, padding=kernel_size // 2))
            self.body.append(ChannelLayerNorm(feat_dim))
            self.body.append(nn.ReLU())
        self.last = nn.Conv1d(feat_dim, out_dim, kernel_size, padding=kernel_size // 2)

    def forward(self, x, mask):
        # x [B, T, C_in]; conv layers run channels-first
        m = mask[:, None, :].to(x.dtype)
        out = x.transpose(1, 2)
        for layer in self.body:
            out = layer(out)
            if isinstance(layer, nn.Conv1d):
                out = out * m
        return self.last(out) * m


class ClassificationHead(ConvHead):
    def __init__(self, in_dim, feat_dim, num_classes, prior_prob=0.01):
        super().__init__(in_dim, feat_dim, num_classes)
        # prior init keeps the focal loss small at the first step
        nn.init.constant_(self.last.bias, -math.log((1 - prior_prob) / prior_prob))

    def forward(self, x, mask):
        return super().forward(x, mask).transpose(1, 2)  # [B, T, C] logits


class RegressionHead(ConvHead):
    def __init__(self, in_dim, feat_dim, num_classes):
        super().__init__(in_dim, feat_dim, 2 * num_classes)
        self.num_classes = num_classes

    def forward(self, x, mask):
        out = torch.relu(super().forward(x, mask))  # [B, 2C, T]
        B, _, T = out.shape
        return out.view(B, self.num_classes, 2, T).transpose(1, 2)  # [B, 2, C, T]


class MultimodalDecoder(nn.Module):
    """Fusion block and heads; one set of weights serves every pyramid level."""

    def __init__(self, dim, num_classes, n_heads=4, expansion=4, dropout=0.1, prior_prob=0.01):
        super().__init__()
        self.fusion = TransformerBlock(2 * dim, n_heads, expansion, dropout)
        self.cls_head = ClassificationHead(2 * dim, dim, num_classes, prior_prob)
        self.reg_head = RegressionHead(2 * dim, dim, num_classes)

    def fuse(self, Z, masks):
        return [self.fusion(z, m) for z, m in zip(Z, masks)]

    def forward(self, Z, masks) -> HeadOutputs:
        fused = self.fuse(Z, masks)
        cls_logits = [self.cls_head(f, m) for f, m in zip(fused, masks)]
        reg = [self.reg_head(f, m) for f, m in zip(fused, masks)]
        return HeadOutputs(cls_logits=cls_logits, reg=reg, masks=list(masks))
