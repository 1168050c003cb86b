"""Per-modality input embedding and self-attention encoders.

Tensors are laid out ``[B, T, D]`` with a ``[B, T]`` bool mask of valid
segments throughout the package.
"""
import math

import torch
from torch import nn


def sinusoid_table(T, D, dtype=torch.float32, device=None):
    pos = torch.arange(T, dtype=torch.float64, device=device)[:, None]
    i = torch.arange(0, D, 2, dtype=torch.float64, device=device)
    freq = torch.exp(-math.log(10000.0) * i / D)
    table = torch.zeros(T, D, dtype=torch.float64, device=device)
    table[:, 0::2] = torch.sin(pos * freq)
    table[:, 1::2] = torch.cos(pos * freq[: D // 2])
    return table.to(dtype)


def masked_attention(q, k, v, key_mask=None):
    """Scaled dot-product attention; ``q`` [..., Tq, d], ``k``/``v`` [..., Tk, d].

    ``key_mask`` broadcasts against the ``[..., Tq, Tk]`` logits. Queries whose
    keys are all masked get a zero output instead of nan.
    """
    logits = (q @ k.transpose(-2, -1)) / math.sqrt(q.shape[-1])
    if key_mask is not None:
        logits = logits.masked_fill(~key_mask, float("-inf"))
        any_valid = key_mask.any(dim=-1, keepdim=True)
        logits = torch.where(any_valid, logits, torch.zeros_like(logits))
        attn = torch.softmax(logits, dim=-1) * any_valid.to(logits.dtype)
    else:
        attn = torch.softmax(logits, dim=-1)
    return attn @ v


class MultiHeadAttention(nn.Module):
    def __init__(self, dim, n_heads, attn_drop=0.0):
        super().__init__()
        assert dim % n_heads == 0, "dim must be divisible by n_heads"
        self.n_heads = n_heads
        self.q_proj = nn.Linear(dim, dim)
        self.k_proj = nn.Linear(dim, dim)
        self.v_proj = nn.Linear(dim, dim)
        self.out_proj = nn.Linear(dim, dim)
        self.drop = nn.Dropout(attn_drop)

    def _split(self, x):
        B, T, D = x.shape
        return x.view(B, T, self.n_heads, D // self.n_heads).transpose(1, 2)

    def forward(self, x_q, x_kv, kv_mask=None):
        q = self._split(self.q_proj(x_q))
        k = self._split(self.k_proj(x_kv))
        v = self._split(self.v_proj(x_kv))
        key_mask = None if kv_mask is None else kv_mask[:, None, None, :]
        out = masked_attention(q, k, v, key_mask)
        B, H, T, d = out.shape
        out = out.transpose(1, 2).reshape(B, T, H * d)
        return self.drop(self.out_proj(out))


class FeedForward(nn.Module):
    def __init__(self, dim, expansion=4, dropout=0.0):
        super().__init__()
        self.net = nn.Sequential(
            nn.Linear(dim, dim * expansion),
            nn.GELU(),
            nn.Dropout(dropout),
            nn.Linear(dim * expansion, dim),
            nn.Dropout(dropout),
        )

    def forward(self, x):
        return self.net(x)


class TransformerBlock(nn.Module):
    """Pre-norm self-attention + feed-forward block with residuals."""

    def __init__(self, dim, n_heads, expansion=4, dropout=0.1):
        super().__init__()
        self.ln_attn = nn.LayerNorm(dim)
        self.attn = MultiHeadAttention(dim, n_heads, attn_drop=dropout)
        self.ln_ffn = nn.LayerNorm(dim)
        self.ffn = FeedForward(dim, expansion, dropout)

    def forward(self, x, mask=None):
        h = self.ln_attn(x)
        x = x + self.attn(h, h, mask)
        x = x + self.ffn(self.ln_ffn(x))
        if mask is not None:
            x = x * mask[..., None].to(x.dtype)
        return x


class InputEmbedding(nn.Module):
    """Affine map ``D_in -> D`` followed by an additive sinusoidal position code."""

    def __init__(self, d_in, dim, use_pos_enc=True):
        super().__init__()
        self.proj = nn.Linear(d_in, dim)
        self.use_pos_enc = use_pos_enc

    def forward(self, x, mask=None):
        if x.shape[1] == 0:
            raise ValueError("cannot embed an empty sequence (T=0)")
        out = self.proj(x)
        if self.use_pos_enc:
            out = out + sinusoid_table(x.shape[1], out.shape[-1], out.dtype, out.device)
        if mask is not None:
            out = out * mask[..., None].to(out.dtype)
        return out


class UnimodalEncoder(nn.Module):
    def __init__(self, dim, n_layers, n_heads, expansion=4, dropout=0.1):
        super().__init__()
        self.blocks = nn.ModuleList(
            TransformerBlock(dim, n_heads, expansion, dropout) for _ in range(n_layers))

    def forward(self, x, mask=None):
        for blk in self.blocks:
            x = blk(x, mask)
        if not torch.isfinite(x).all():
            raise FloatingPointError("non-finite unimodal features")
        return x


class UnimodalEncoders(nn.Module):
    """Embedding plus ``L_u`` self-attention blocks for each modality, unshared."""

    def __init__(self, d_in, dim, n_layers=2, n_heads=4, expansion=4, dropout=0.1,
                 use_pos_enc=True):
        super().__init__()
        self.embed_v = InputEmbedding(d_in, dim, use_pos_enc)
        self.embed_a = InputEmbedding(d_in, dim, use_pos_enc)
        self.enc_v = UnimodalEncoder(dim, n_layers, n_heads, expansion, dropout)
        self.enc_a = UnimodalEncoder(dim, n_layers, n_heads, expansion, dropout)

    def embed_inputs(self, visual, audio, mask=None):
        return self.embed_v(visual, mask), self.embed_a(audio, mask)

    def forward(self, visual, audio, mask=None):
        F_v, F_a = self.embed_inputs(visual, audio, mask)
        return self.enc_v(F_v, mask), self.enc_a(F_a, mask)


def embed_inputs(sample, embedding: UnimodalEncoders):
    """Embed a single ``VideoSample`` -> ``(F_v, F_a)`` each ``[T, D]``."""
    p = next(embedding.parameters())
    visual = torch.as_tensor(sample.visual_feats, dtype=p.dtype, device=p.device)[None]
    audio = torch.as_tensor(sample.audio_feats, dtype=p.dtype, device=p.device)[None]
    F_v, F_a = embedding.embed_inputs(visual, audio)
    return F_v[0], F_a[0]


def encode_unimodal(F, encoder: UnimodalEncoder, mask=None):
    """Run one modality's encoder on a ``[T, D]`` or ``[B, T, D]`` sequence."""
    squeeze = F.dim() == 2
    x = F[None] if squeeze else F
    out = encoder(x, mask)
    return out[0] if squeeze else out
