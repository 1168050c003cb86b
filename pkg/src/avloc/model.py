"""The full detector: unimodal encoders, correspondence loss, cross-modal pyramid, heads."""
from dataclasses import dataclass

import torch
from torch import nn

from .config import ModelConfig
from .correspondence import LocalCorrespondence, lcf_loss
from .encoders import UnimodalEncoders
from .heads import HeadOutputs, MultimodalDecoder
from .losses import assign_labels, detection_losses, total_loss
from .pyramid import CrossModalPyramid, FeaturePyramid


@dataclass
class ModelOutputs:
    F_v: torch.Tensor   # unimodal features [B, T, D]
    F_a: torch.Tensor
    mask: torch.Tensor  # [B, T]
    pyramid: FeaturePyramid
    heads: HeadOutputs


def level_lengths(T, n_levels):
    out = []
    for _ in range(n_levels):
        T = -(-T // 2)
        out.append(T)
    return out


class EventDetector(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        self.encoders = UnimodalEncoders(cfg.d_in, cfg.D, cfg.L_u, cfg.H, cfg.ffn_expansion,
                                         cfg.dropout, cfg.use_pos_enc)
        self.lcf = LocalCorrespondence(cfg.D, cfg.g_type, cfg.tau_init, cfg.sigma_init,
                                       cfg.smoothing)
        self.pyramid = CrossModalPyramid(cfg.D, cfg.L_c, cfg.H, cfg.W, cfg.attention_mode,
                                         cfg.shift_even_blocks, cfg.ffn_expansion, cfg.dropout)
        self.decoder = MultimodalDecoder(cfg.D, cfg.C, cfg.H, cfg.ffn_expansion, cfg.dropout,
                                         cfg.prior_prob)

    @property
    def strides(self):
        return self.pyramid.strides

    def forward(self, visual, audio, mask=None) -> ModelOutputs:
        if mask is None:
            mask = torch.ones(visual.shape[:2], dtype=torch.bool, device=visual.device)
        F_v, F_a = self.encoders(visual, audio, mask)
        pyr = self.pyramid(F_v, F_a, mask)
        heads = self.decoder(pyr.Z, pyr.masks)
        return ModelOutputs(F_v=F_v, F_a=F_a, mask=mask, pyramid=pyr, heads=heads)

    def assign(self, annotations_batch, T, valid_lengths, seconds_per_segment=1.0):
        lengths = level_lengths(T, self.cfg.L_c)
        return [assign_labels(anns, lengths, self.strides, self.cfg.ranges, self.cfg.C,
                              seconds_per_segment, valid_length=vl)
                for anns, vl in zip(annotations_batch, valid_lengths)]

    def loss(self, out: ModelOutputs, assignments, alpha=None):
        alpha = self.cfg.alpha if alpha is None else alpha
        cls, reg = detection_losses(out.heads, assignments, self.cfg.focal_gamma,
                                    self.cfg.focal_alpha)
        lcf = lcf_loss(out.F_v, out.F_a, self.lcf, out.mask)
        return total_loss(cls, reg, lcf, alpha)
