"""Pixel-level bi-cross attention.

The pooled classifier state (one query per sample) attends over every
voxel of the MRI and of the PET volume. Voxel sequences reach 10^5 rows,
so the softmax is streamed over chunks with a running max.
"""
import math

import torch
import torch.nn as nn

__all__ = [
    "serialize_voxels",
    "unserialize_voxels",
    "attention_weights",
    "streaming_attention",
    "CrossAttend",
    "BiCrossAttention",
]

DEFAULT_CHUNK = 16384


def serialize_voxels(v):
    """[..., C, D, H, W] -> [..., D*H*W, C]; voxel (d, h, w) lands at row d*H*W + h*W + w."""
    return v.flatten(-3).transpose(-1, -2)


def unserialize_voxels(rows, dims):
    """Inverse of :func:`serialize_voxels` for spatial ``dims = (D, H, W)``."""
    return rows.transpose(-1, -2).unflatten(-1, tuple(dims))


def attention_weights(q, k):
    """Monolithic softmax weights, q [B, dk], k [B, V, dk] -> [B, V]."""
    scores = torch.einsum("bk,bvk->bv", q, k) / math.sqrt(q.shape[-1])
    return torch.softmax(scores, dim=-1)


def streaming_attention(q, x_seq, w_k, w_v, chunk_size=DEFAULT_CHUNK):
    """softmax(q K^T / sqrt(dk)) V computed chunk-by-chunk over voxel rows.

    Keys and values are formed per chunk (``x @ w_k.T``) so the full
    [B, V, dk] tensors never materialise.
    """
    n_vox = x_seq.shape[1]
    if n_vox == 0:
        raise ValueError("cannot attend over an empty voxel sequence")
    scale = 1.0 / math.sqrt(q.shape[-1])
    run_max = None
    denom = None
    acc = None
    for start in range(0, n_vox, chunk_size):
        x = x_seq[:, start:start + chunk_size]
        k = x @ w_k.T
        v = x @ w_v.T
        s = torch.einsum("bk,bvk->bv", q, k) * scale
        m = s.max(dim=-1, keepdim=True).values
        if run_max is None:
            new_max = m
        else:
            new_max = torch.maximum(run_max, m)
        p = torch.exp(s - new_max)
        part_den = p.sum(dim=-1, keepdim=True)
        part_acc = torch.einsum("bv,bvk->bk", p, v)
        if run_max is None:
            denom, acc = part_den, part_acc
        else:
            rescale = torch.exp(run_max - new_max)
            denom = denom * rescale + part_den
            acc = acc * rescale + part_acc
        run_max = new_max
    return acc / denom


class CrossAttend(nn.Module):
    """Single-head attention from the pooled state onto one voxel sequence."""

    def __init__(self, d, d_k, voxel_channels=1):
        super().__init__()
        self.w_q = nn.Linear(d, d_k, bias=False)
        self.w_k = nn.Linear(voxel_channels, d_k, bias=False)
        self.w_v = nn.Linear(voxel_channels, d_k, bias=False)
        self.w_o = nn.Linear(d_k, d, bias=False)
        self.chunk_size = DEFAULT_CHUNK

    def attend(self, y, x_seq):
        """Pre-projection attention output [B, dk]."""
        q = self.w_q(y)
        return streaming_attention(q, x_seq, self.w_k.weight, self.w_v.weight, self.chunk_size)

    def weights(self, y, x_seq):
        return attention_weights(self.w_q(y), self.w_k(x_seq))

    def forward(self, y, x_seq):
        return self.w_o(self.attend(y, x_seq))


class BiCrossAttention(nn.Module):
    """y1 = y + att(y, MRI) + att(y, PET);  y2 = y1 + LN(FFN(LN(y1)))."""

    def __init__(self, d, d_k, voxel_channels=1):
        super().__init__()
        self.mri = CrossAttend(d, d_k, voxel_channels)
        self.pet = CrossAttend(d, d_k, voxel_channels)
        self.norm_in = nn.LayerNorm(d)
        self.ffn = nn.Sequential(nn.Linear(d, 4 * d), nn.GELU(), nn.Linear(4 * d, d))
        self.norm_out = nn.LayerNorm(d)

    def forward(self, y, mri, pet):
        """y [B, d]; mri, pet are volumes [B, C, D, H, W] or voxel rows [B, V, C]."""
        if mri.dim() == 5:
            mri = serialize_voxels(mri)
        if pet.dim() == 5:
            pet = serialize_voxels(pet)
        y1 = y + self.mri(y, mri) + self.pet(y, pet)
        return y1 + self.norm_out(self.ffn(self.norm_in(y1)))

    def zero_(self):
        """Zero every parameter (the fuse then passes y through unchanged)."""
        with torch.no_grad():
            for p in self.parameters():
                p.zero_()
        return self
