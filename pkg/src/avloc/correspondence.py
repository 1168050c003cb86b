"""Locality-aware audio-visual contrastive loss.

Segment pairs from the same video are positives whose target weight decays
with their temporal distance (a Gaussian across the diagonal of the
segment-by-segment grid); pairs from different videos are negatives.
"""
import math
import warnings
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

G_TYPES = ("diagonal", "softened", "fixed_gaussian", "adjustable_gaussian")
TAU_MIN = 1e-4
NORM_EPS = 1e-12


@dataclass
class CorrespondenceMatrix:
    G: torch.Tensor         # [M, M]
    video_of: torch.Tensor  # [M] video index of each flat segment


def gaussian_weight(dist, sigma):
    """Un-normalised Gaussian target for segments ``dist`` apart (mean 0)."""
    d = dist / math.sqrt(2.0)
    return torch.exp(-d ** 2 / (2 * sigma ** 2)) / (sigma * math.sqrt(2 * math.pi))


def build_G(batch_shape, sigma=1.0, mask=None, g_type="adjustable_gaussian",
            normalize=True, smoothing=0.2, dtype=torch.float64, device=None):
    """Build the ``[B*T, B*T]`` correspondence target for a batch.

    ``mask`` is an optional ``[B, T]`` bool tensor of valid segments; padded
    segments get all-zero rows and columns. With ``normalize`` every row with
    a positive sum is rescaled to sum to one.
    """
    B, T = batch_shape
    if B < 1 or T < 1:
        raise ValueError(f"batch_shape must be positive, got {batch_shape}")
    if g_type not in G_TYPES:
        raise ValueError(f"unknown g_type {g_type!r}; expected one of {G_TYPES}")
    if not torch.is_tensor(sigma):
        sigma = torch.tensor(float(sigma), dtype=dtype, device=device)
    if g_type.endswith("gaussian") and not bool(sigma > 0):
        raise ValueError(f"sigma must be > 0, got {float(sigma)}")

    M = B * T
    video_of = torch.arange(B, device=device).repeat_interleave(T)
    seg = torch.arange(T, device=device, dtype=dtype).repeat(B)
    same_video = video_of[:, None] == video_of[None, :]
    valid = torch.ones(M, dtype=torch.bool, device=device) if mask is None \
        else mask.reshape(M).to(device=device, dtype=torch.bool)
    pair_valid = valid[:, None] & valid[None, :]

    if g_type == "diagonal":
        G = torch.eye(M, dtype=dtype, device=device)
    elif g_type == "softened":
        # label smoothing over every valid column, cross-video included
        n_valid = int(valid.sum())
        off = smoothing / max(n_valid - 1, 1)
        G = torch.full((M, M), off, dtype=dtype, device=device)
        G.fill_diagonal_(1.0 - smoothing)
        if n_valid == 1:
            G.fill_diagonal_(1.0)
    else:
        if g_type == "fixed_gaussian":
            sigma = torch.ones((), dtype=dtype, device=device)
        dist = (seg[:, None] - seg[None, :]).abs()
        G = gaussian_weight(dist, sigma.to(dtype)) * same_video.to(dtype)

    G = G * pair_valid.to(dtype)
    if normalize:
        row_sum = G.sum(dim=1, keepdim=True)
        G = torch.where(row_sum > 0, G / row_sum.clamp_min(torch.finfo(dtype).tiny), G)
    return CorrespondenceMatrix(G=G, video_of=video_of)


def _inv_softplus(y):
    return math.log(math.expm1(y))


class LocalCorrespondence(nn.Module):
    """Learned parameters of the contrastive loss.

    Holds the two halving projections, ``log_tau`` (tau = exp(log_tau)) and
    ``sigma_raw`` (sigma = softplus(sigma_raw)).
    """

    def __init__(self, dim, g_type="adjustable_gaussian", tau_init=0.07, sigma_init=1.0,
                 smoothing=0.2):
        super().__init__()
        if g_type not in G_TYPES:
            raise ValueError(f"unknown g_type {g_type!r}; expected one of {G_TYPES}")
        self.g_type = g_type
        self.smoothing = smoothing
        self.proj_dim = dim // 2
        self.proj_v = nn.Linear(dim, self.proj_dim)
        self.proj_a = nn.Linear(dim, self.proj_dim)
        self.log_tau = nn.Parameter(torch.tensor(math.log(tau_init)))
        self.sigma_raw = nn.Parameter(torch.tensor(_inv_softplus(sigma_init)),
                                      requires_grad=(g_type == "adjustable_gaussian"))

    @property
    def tau(self):
        return self.log_tau.exp()

    @property
    def sigma(self):
        return F.softplus(self.sigma_raw)

    def forward(self, F_v, F_a, mask=None):
        return lcf_loss(F_v, F_a, self, mask)


def project_halved(F_v, F_a, params: LocalCorrespondence):
    """Project ``[M, D]`` features to ``[M, D//2]`` and L2-normalise each row."""
    v = params.proj_v(F_v)
    a = params.proj_a(F_a)
    v = v / (v.norm(dim=-1, keepdim=True) + NORM_EPS)
    a = a / (a.norm(dim=-1, keepdim=True) + NORM_EPS)
    return v, a


def _clamped_tau(tau, dtype=torch.float64):
    if not torch.is_tensor(tau):
        tau = torch.tensor(float(tau), dtype=dtype)
    if bool(tau < TAU_MIN):
        warnings.warn(f"temperature {float(tau):.2e} below {TAU_MIN}; clamping", RuntimeWarning)
    return tau.clamp_min(TAU_MIN)


def lcf_loss_v2a(v, a, G: CorrespondenceMatrix, tau, valid=None):
    """Soft-target InfoNCE of anchors ``v`` against candidates ``a``.

    ``valid`` ([M] bool) removes padded candidates from the softmax. The loss
    is averaged over anchors whose target row is non-zero.
    """
    tau = _clamped_tau(tau, v.dtype)
    logits = (v @ a.T) / tau
    if valid is not None:
        logits = logits.masked_fill(~valid[None, :], float("-inf"))
    log_p = torch.log_softmax(logits, dim=1)
    weights = G.G.to(log_p.dtype)
    # 0 * -inf on masked columns would yield nan
    log_p = torch.where(weights > 0, log_p, torch.zeros_like(log_p))
    per_anchor = -(weights * log_p).sum(dim=1)
    anchors = weights.sum(dim=1) > 0
    if not bool(anchors.any()):
        return per_anchor.sum() * 0.0
    return per_anchor[anchors].mean()


def lcf_loss(F_v, F_a, params: LocalCorrespondence, mask=None):
    """Symmetric (v2a + a2v) / 2 loss on ``[B, T, D]`` features."""
    B, T, _ = F_v.shape
    valid = None if mask is None else mask.reshape(B * T).bool()
    v, a = project_halved(F_v.reshape(B * T, -1), F_a.reshape(B * T, -1), params)
    G = build_G((B, T), params.sigma, mask=mask, g_type=params.g_type,
                smoothing=params.smoothing, dtype=v.dtype, device=v.device)
    v2a = lcf_loss_v2a(v, a, G, params.tau, valid)
    # the raw target is symmetric, so the row-normalised G serves both anchor sides
    a2v = lcf_loss_v2a(a, v, G, params.tau, valid)
    return 0.5 * (v2a + a2v)
