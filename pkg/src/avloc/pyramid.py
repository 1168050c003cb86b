"""Cross-modal feature pyramid built from adaptive-window cross attention.

Each block halves the temporal resolution, then lets each modality query
the other. In ``adaptive`` mode the keys/values for a base window of ``W``
query positions are ``W`` points resampled (linear interpolation) from a
per-head target window whose scale and offset are predicted from the keys
of that base window. ``fixed`` uses the base window itself and ``global``
attends densely over the level.
"""
from dataclasses import dataclass, field
from typing import List

import torch
import torch.nn.functional as F
from torch import nn

from .encoders import FeedForward, masked_attention

ATTENTION_MODES = ("adaptive", "fixed", "global")


@dataclass
class WindowGeometry:
    scale: torch.Tensor          # P, [B, nW, H]
    offset: torch.Tensor         # O, [B, nW, H]
    positions: torch.Tensor      # clamped sample positions, [B, nW, H, W]
    raw_positions: torch.Tensor  # before clamping, [B, nW, H, W]


@dataclass
class FeaturePyramid:
    Z_v: List[torch.Tensor]
    Z_a: List[torch.Tensor]
    Z: List[torch.Tensor]
    masks: List[torch.Tensor]
    strides: List[int] = field(default_factory=list)

    @property
    def lengths(self):
        return [z.shape[1] for z in self.Z]


class DepthwiseDownsample(nn.Module):
    """Depth-wise conv, kernel 3, stride 2, padding 1: ``T -> ceil(T / 2)``."""

    def __init__(self, dim):
        super().__init__()
        self.conv = nn.Conv1d(dim, dim, kernel_size=3, stride=2, padding=1, groups=dim)

    def forward(self, x, mask=None):
        out = self.conv(x.transpose(1, 2)).transpose(1, 2)
        if mask is None:
            return out, None
        mask = mask[:, ::2]
        return out * mask[..., None].to(out.dtype), mask


def downsample(z, module: DepthwiseDownsample):
    """Apply ``module`` to a single ``[T, D]`` sequence."""
    out, _ = module(z[None])
    return out[0]


def window_layout(T, W, shift=0):
    """Return ``(n_windows, pad_left, pad_right)`` for partitioning length ``T``."""
    total = shift + T
    n_windows = -(-total // W)
    return n_windows, shift, n_windows * W - total


def partition_windows(x, W, shift=0, mask=None):
    """Split ``[B, T, ...]`` into ``[B, nW, W, ...]`` windows.

    The sequence is zero-padded by ``shift`` on the left and up to a multiple
    of ``W`` on the right. The returned ``[B, nW, W]`` mask is False on
    padding (and on positions already False in ``mask``).
    """
    B, T = x.shape[:2]
    n_windows, left, right = window_layout(T, W, shift)
    pad = [0, 0] * (x.dim() - 2) + [left, right]
    xp = F.pad(x, pad)
    if mask is None:
        mask = torch.ones(B, T, dtype=torch.bool, device=x.device)
    mp = F.pad(mask, [left, right], value=False)
    return xp.reshape(B, n_windows, W, *x.shape[2:]), mp.reshape(B, n_windows, W)


def merge_windows(windows, T, shift=0):
    """Inverse of :func:`partition_windows`."""
    B, n_windows, W = windows.shape[:3]
    flat = windows.reshape(B, n_windows * W, *windows.shape[3:])
    return flat[:, shift:shift + T]


class WindowAdaptation(nn.Module):
    """Average pool -> LeakyReLU -> 1x1 map to a (scale, offset) pair per head.

    The final map is zero-initialised, so at init every head's target window
    equals its base window (P = 1, O = 0).
    """

    def __init__(self, dim, n_heads, negative_slope=0.01):
        super().__init__()
        self.n_heads = n_heads
        self.act = nn.LeakyReLU(negative_slope)
        self.proj = nn.Linear(dim, 2 * n_heads)
        nn.init.zeros_(self.proj.weight)
        nn.init.zeros_(self.proj.bias)

    def forward(self, k_windows, valid=None):
        # k_windows [B, nW, W, H, d]; valid [B, nW, W]
        B, nW, W = k_windows.shape[:3]
        flat = k_windows.reshape(B, nW, W, -1)
        if valid is None:
            pooled = flat.mean(dim=2)
        else:
            w = valid[..., None].to(flat.dtype)
            pooled = (flat * w).sum(dim=2) / w.sum(dim=2).clamp_min(1.0)
        raw = self.proj(self.act(pooled))
        scale = raw[..., : self.n_heads].exp()
        offset = raw[..., self.n_heads:]
        return scale, offset


def window_adaptation(K_w, module: WindowAdaptation):
    """Single-window form: ``K_w`` [W, H, D'] -> ``(P, O)`` each [1, H]."""
    P, O = module(K_w[None, None])
    return P[0], O[0]


def build_target_window(window_start, W, scale, offset, T_l):
    """Sample positions for target windows derived from base windows.

    ``window_start`` is the first index of each base window (a tensor
    broadcastable to ``scale``). The centre moves by ``offset`` segments and
    the half-extent ``(W - 1) / 2`` is multiplied by ``scale``; ``W`` evenly
    spaced positions are then clamped into ``[0, T_l - 1]``.
    """
    half = (W - 1) / 2
    steps = torch.arange(W, dtype=scale.dtype, device=scale.device) - half
    centre = window_start + half + offset
    raw = centre[..., None] + scale[..., None] * steps
    return WindowGeometry(scale=scale, offset=offset,
                          positions=raw.clamp(0, T_l - 1), raw_positions=raw)


def sample_features(z, positions):
    """Linearly interpolate ``z`` [B, T, H, d] at ``positions`` [B, nW, H, W].

    Returns ``[B, nW, W, H, d]``.
    """
    B, T, H, d = z.shape
    _, nW, _, W = positions.shape
    zt = z.permute(0, 2, 1, 3)  # [B, H, T, d]
    pos = positions.permute(0, 2, 1, 3).reshape(B, H, nW * W)
    i0 = pos.detach().floor().long().clamp(0, T - 1)
    i1 = (i0 + 1).clamp(max=T - 1)
    frac = (pos - i0.to(pos.dtype))[..., None]
    z0 = zt.gather(2, i0[..., None].expand(-1, -1, -1, d))
    z1 = zt.gather(2, i1[..., None].expand(-1, -1, -1, d))
    out = (1 - frac) * z0 + frac * z1
    return out.reshape(B, H, nW, W, d).permute(0, 2, 3, 1, 4)


def cswa(q_windows, k_hat, v_hat, q_valid=None, k_valid=None):
    """Window attention: query window ``w`` attends only to its ``W`` samples.

    ``q_windows`` [B, nW, W, H, d]; ``k_hat``/``v_hat`` [B, nW, Wk, H, d];
    ``q_valid`` [B, nW, W]; ``k_valid`` [B, nW, H, Wk]. Returns
    ``[B, nW, W, H, d]`` with masked queries zeroed.
    """
    q = q_windows.permute(0, 1, 3, 2, 4)
    k = k_hat.permute(0, 1, 3, 2, 4)
    v = v_hat.permute(0, 1, 3, 2, 4)
    key_mask = None if k_valid is None else k_valid[..., None, :]
    out = masked_attention(q, k, v, key_mask).permute(0, 1, 3, 2, 4)
    if q_valid is not None:
        out = out * q_valid[..., None, None].to(out.dtype)
    return out


class CrossModalWindowAttention(nn.Module):
    """Queries from one modality, keys/values from the other."""

    def __init__(self, dim, n_heads, window_size, mode="adaptive", attn_drop=0.0):
        super().__init__()
        if mode not in ATTENTION_MODES:
            raise ValueError(f"attention_mode must be one of {ATTENTION_MODES}, got {mode!r}")
        assert dim % n_heads == 0, "dim must be divisible by n_heads"
        self.dim = dim
        self.n_heads = n_heads
        self.head_dim = dim // n_heads
        self.window_size = window_size
        self.mode = mode
        self.q_proj = nn.Linear(dim, dim)
        self.k_proj = nn.Linear(dim, dim)
        self.v_proj = nn.Linear(dim, dim)
        self.out_proj = nn.Linear(dim, dim)
        self.drop = nn.Dropout(attn_drop)
        self.adapt = WindowAdaptation(dim, n_heads)
        self.keys_per_query = None
        self.last_geometry = None

    def _heads(self, x):
        B, T, _ = x.shape
        return x.view(B, T, self.n_heads, self.head_dim)

    def forward(self, x_q, x_kv, mask=None, shift=0):
        B, T, D = x_q.shape
        if mask is None:
            mask = torch.ones(B, T, dtype=torch.bool, device=x_q.device)
        q = self._heads(self.q_proj(x_q))
        k = self._heads(self.k_proj(x_kv))
        v = self._heads(self.v_proj(x_kv))

        if self.mode == "global":
            out = masked_attention(q.transpose(1, 2), k.transpose(1, 2), v.transpose(1, 2),
                                   mask[:, None, None, :]).transpose(1, 2)
            self.keys_per_query = T
            self.last_geometry = None
        else:
            out = self._window_attention(q, k, v, mask, shift)
        out = self.out_proj(out.reshape(B, T, D))
        return self.drop(out) * mask[..., None].to(out.dtype)

    def _window_attention(self, q, k, v, mask, shift):
        B, T = mask.shape
        W, H = self.window_size, self.n_heads
        q_w, q_valid = partition_windows(q, W, shift, mask)
        n_windows = q_w.shape[1]
        if self.mode == "adaptive":
            k_w, _ = partition_windows(k, W, shift, mask)
            scale, offset = self.adapt(k_w, q_valid)
        else:
            scale = q.new_ones(B, n_windows, H)
            offset = q.new_zeros(B, n_windows, H)
        starts = (torch.arange(n_windows, device=q.device, dtype=q.dtype) * W - shift)
        geom = build_target_window(starts[None, :, None], W, scale, offset, T)
        # samples outside the valid span are masked, not duplicated from the edge
        length = mask.sum(dim=1).to(q.dtype)[:, None, None, None]
        k_valid = (geom.raw_positions >= 0) & (geom.raw_positions <= length - 1)
        k_hat = sample_features(k, geom.positions)
        v_hat = sample_features(v, geom.positions)
        self.keys_per_query = k_hat.shape[2]
        self.last_geometry = geom
        out_w = cswa(q_w, k_hat, v_hat, q_valid, k_valid)
        return merge_windows(out_w, T, shift)


class LacBlock(nn.Module):
    """Downsample both streams, cross-attend in both directions, then FFN."""

    def __init__(self, dim, n_heads, window_size, mode="adaptive", block_index=0,
                 shift_even_blocks=True, expansion=4, dropout=0.1):
        super().__init__()
        self.block_index = block_index
        self.shift = window_size // 2 if (shift_even_blocks and block_index % 2 == 0) else 0
        self.down_v = DepthwiseDownsample(dim)
        self.down_a = DepthwiseDownsample(dim)
        self.ln_vq, self.ln_vkv = nn.LayerNorm(dim), nn.LayerNorm(dim)
        self.ln_aq, self.ln_akv = nn.LayerNorm(dim), nn.LayerNorm(dim)
        # visual queries audio -> audio-aware visual stream, and vice versa
        self.attn_v = CrossModalWindowAttention(dim, n_heads, window_size, mode, dropout)
        self.attn_a = CrossModalWindowAttention(dim, n_heads, window_size, mode, dropout)
        self.ln_fv, self.ln_fa = nn.LayerNorm(dim), nn.LayerNorm(dim)
        self.ffn_v = FeedForward(dim, expansion, dropout)
        self.ffn_a = FeedForward(dim, expansion, dropout)

    @property
    def mode(self):
        return self.attn_v.mode

    @mode.setter
    def mode(self, value):
        if value not in ATTENTION_MODES:
            raise ValueError(f"attention_mode must be one of {ATTENTION_MODES}, got {value!r}")
        self.attn_v.mode = value
        self.attn_a.mode = value

    def forward(self, z_v, z_a, mask=None):
        if z_v.shape[:2] != z_a.shape[:2]:
            raise ValueError("both modalities must share batch and temporal length")
        if mask is None:
            mask = torch.ones(z_v.shape[:2], dtype=torch.bool, device=z_v.device)
        z_v, mask_v = self.down_v(z_v, mask)
        z_a, _ = self.down_a(z_a, mask)
        mask = mask_v
        h_v = z_v + self.attn_v(self.ln_vq(z_v), self.ln_vkv(z_a), mask, self.shift)
        h_a = z_a + self.attn_a(self.ln_aq(z_a), self.ln_akv(z_v), mask, self.shift)
        m = mask[..., None].to(h_v.dtype)
        z_v = (h_v + self.ffn_v(self.ln_fv(h_v))) * m
        z_a = (h_a + self.ffn_a(self.ln_fa(h_a))) * m
        return z_v, z_a, mask


class CrossModalPyramid(nn.Module):
    def __init__(self, dim, n_levels, n_heads, window_size, mode="adaptive",
                 shift_even_blocks=True, expansion=4, dropout=0.1):
        super().__init__()
        if n_levels < 1:
            raise ValueError("L_c must be >= 1")
        if dim % n_heads:
            raise ValueError(f"D={dim} must be divisible by H={n_heads}")
        self.blocks = nn.ModuleList(
            LacBlock(dim, n_heads, window_size, mode, l, shift_even_blocks, expansion, dropout)
            for l in range(n_levels))

    @property
    def strides(self):
        return [2 ** (l + 1) for l in range(len(self.blocks))]

    def set_mode(self, mode):
        for blk in self.blocks:
            blk.mode = mode

    def forward(self, F_v, F_a, mask=None):
        T = F_v.shape[1]
        need = 2 ** (len(self.blocks) - 1)
        if T < need:
            raise ValueError(
                f"sequence length T={T} too short for L_c={len(self.blocks)} levels "
                f"(need T >= {need})")
        z_v, z_a = F_v, F_a
        if mask is None:
            mask = torch.ones(F_v.shape[:2], dtype=torch.bool, device=F_v.device)
        Z_v, Z_a, Z, masks = [], [], [], []
        for blk in self.blocks:
            z_v, z_a, mask = blk(z_v, z_a, mask)
            Z_v.append(z_v)
            Z_a.append(z_a)
            Z.append(torch.cat([z_v, z_a], dim=-1))
            masks.append(mask)
        return FeaturePyramid(Z_v=Z_v, Z_a=Z_a, Z=Z, masks=masks, strides=self.strides)


def run_pyramid(F_v, F_a, pyramid: CrossModalPyramid, mask=None):
    return pyramid(F_v, F_a, mask)
