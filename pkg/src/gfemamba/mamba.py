"""Selective-scan sequence classifier.

Residual stack ``x_{i+1} = Mamba(RMSNorm(x_i)) + x_i`` over the fused
token sequence, mean-pooled and handed to the bi-cross attention head.
"""
from dataclasses import dataclass
import math

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import kernels
from .attention import BiCrossAttention

__all__ = [
    "ClassifierConfig",
    "rms_norm",
    "selective_scan",
    "MambaInner",
    "MambaBlock",
    "MambaClassifier",
]

RMS_EPS = 1e-6


@dataclass
class ClassifierConfig:
    d: int = 64
    depth: int = 6
    expansion: int = 2
    state_dim: int = 16
    conv_kernel: int = 4
    attn_dim: int = 32
    scan_mode: str = "sequential"
    dt_min: float = 1e-3
    dt_max: float = 1e-1

    def __post_init__(self):
        if self.depth < 1:
            raise ValueError(f"depth must be >= 1, got {self.depth}")
        if self.expansion < 1:
            raise ValueError(f"expansion must be >= 1, got {self.expansion}")
        if self.conv_kernel < 1:
            raise ValueError(f"conv_kernel must be >= 1, got {self.conv_kernel}")
        if self.scan_mode not in ("sequential", "parallel"):
            raise ValueError(f"unknown scan_mode {self.scan_mode!r}")

    @property
    def d_inner(self):
        return self.expansion * self.d

    @property
    def dt_rank(self):
        return math.ceil(self.d / 16)


def rms_norm(x, gain, eps=RMS_EPS):
    """Divide each row by ``sqrt(mean(x**2) + eps)`` and scale by ``gain``."""
    return x * torch.rsqrt(x.pow(2).mean(dim=-1, keepdim=True) + eps) * gain


def _as_array(t):
    return np.ascontiguousarray(t.detach().cpu().numpy())


class _SequentialScan(torch.autograd.Function):
    """Sequential recurrence on the compiled kernels, with a hand-written adjoint."""

    @staticmethod
    def forward(ctx, u, delta, A, Bm, Cm, D):
        arrays = [_as_array(t) for t in (u, delta, A, Bm, Cm, D)]
        y, hs = kernels.scan_forward(*arrays)
        ctx.save_for_backward(u, delta, A, Bm, Cm, D)
        ctx.hs = hs
        return torch.from_numpy(y).to(u.device)

    @staticmethod
    def backward(ctx, gy):
        saved = [_as_array(t) for t in ctx.saved_tensors]
        grads = kernels.scan_backward(_as_array(gy), *saved, ctx.hs)
        dev = gy.device
        return tuple(torch.from_numpy(g).to(dev) for g in grads)


def _compose_pairs(a, b):
    """Scan one level down: pair element 2i with 2i+1 (h -> a*h + b maps)."""
    a0, a1 = a[:, 0::2], a[:, 1::2]
    b0, b1 = b[:, 0::2], b[:, 1::2]
    return a1 * a0, a1 * b0 + b1


def _affine_scan(a, b):
    """Inclusive scan of affine maps along axis 1, work-efficient tree form.

    Returns the offsets of the prefix compositions, i.e. h_t for h_0 = 0.
    """
    L = a.shape[1]
    if L == 1:
        return b
    if L % 2:
        a = torch.cat([a, torch.ones_like(a[:, :1])], dim=1)
        b = torch.cat([b, torch.zeros_like(b[:, :1])], dim=1)
    pa, pb = _compose_pairs(a, b)
    odd = _affine_scan(pa, pb)  # h at positions 1, 3, 5, ...
    # h at even position 2i = a_{2i} * h_{2i-1} + b_{2i}, with h_{-1} = 0
    prev = torch.cat([torch.zeros_like(odd[:, :1]), odd[:, :-1]], dim=1)
    even = a[:, 0::2] * prev + b[:, 0::2]
    out = torch.stack([even, odd], dim=2).flatten(1, 2)
    return out[:, :L]


def selective_scan(u, delta, A, Bm, Cm, D, mode="sequential"):
    """Run the selective state-space recurrence.

    Parameters
    ----------
    u, delta : Tensor [B, L, Di]
        Scan input and positive step sizes.
    A : Tensor [Di, S]
        Diagonal state matrix (non-positive for stability).
    Bm, Cm : Tensor [B, L, S]
        Input-dependent input/readout projections.
    D : Tensor [Di]
        Skip connection.
    mode : {"sequential", "parallel"}
        ``sequential`` runs the compiled recurrence; ``parallel`` an
        associative tree scan in torch. The two agree to rounding.

    Returns
    -------
    Tensor [B, L, Di]
    """
    squeeze = u.dim() == 2
    if squeeze:
        u, delta, Bm, Cm = (t.unsqueeze(0) for t in (u, delta, Bm, Cm))
    if mode == "sequential":
        y = _SequentialScan.apply(u, delta, A, Bm, Cm, D)
    elif mode == "parallel":
        dt = delta.unsqueeze(-1)
        a = torch.exp(dt * A)
        b = dt * Bm.unsqueeze(2) * u.unsqueeze(-1)
        h = _affine_scan(a, b)
        y = torch.einsum("blcs,bls->blc", h, Cm) + D * u
    else:
        raise ValueError(f"unknown scan mode {mode!r}")
    bad = ~torch.isfinite(y)
    if bad.any():
        t = int(bad.nonzero()[0, 1])
        raise FloatingPointError(f"non-finite selective scan output at position t={t}")
    return y.squeeze(0) if squeeze else y


class MambaInner(nn.Module):
    """project -> (x, z); x: causal depthwise conv, SiLU, scan; y * SiLU(z); project."""

    def __init__(self, cfg: ClassifierConfig):
        super().__init__()
        self.cfg = cfg
        di, S = cfg.d_inner, cfg.state_dim
        self.in_proj = nn.Linear(cfg.d, 2 * di)
        self.conv = nn.Conv1d(di, di, cfg.conv_kernel, groups=di, padding=0)
        self.x_proj = nn.Linear(di, cfg.dt_rank + 2 * S, bias=False)
        self.dt_proj = nn.Linear(cfg.dt_rank, di)
        A = torch.arange(1, S + 1, dtype=torch.float32).repeat(di, 1)
        self.A_log = nn.Parameter(torch.log(A))
        self.D = nn.Parameter(torch.ones(di))
        self.out_proj = nn.Linear(di, cfg.d)
        # dt bias so that softplus(bias) is log-uniform in [dt_min, dt_max]
        dt = torch.exp(torch.rand(di) * (math.log(cfg.dt_max) - math.log(cfg.dt_min)) + math.log(cfg.dt_min))
        with torch.no_grad():
            self.dt_proj.bias.copy_(dt + torch.log(-torch.expm1(-dt)))

    def forward(self, x):
        cfg = self.cfg
        L = x.shape[1]
        xz = self.in_proj(x)
        xs, z = xz.chunk(2, dim=-1)
        xs = F.pad(xs.transpose(1, 2), (cfg.conv_kernel - 1, 0))
        xs = F.silu(self.conv(xs)[..., :L].transpose(1, 2))
        dbc = self.x_proj(xs)
        dt, Bm, Cm = dbc.split([cfg.dt_rank, cfg.state_dim, cfg.state_dim], dim=-1)
        delta = F.softplus(self.dt_proj(dt))
        A = -torch.exp(self.A_log)
        y = selective_scan(xs, delta, A, Bm, Cm, self.D, mode=cfg.scan_mode)
        return self.out_proj(y * F.silu(z))


class MambaBlock(nn.Module):
    def __init__(self, cfg: ClassifierConfig):
        super().__init__()
        self.gain = nn.Parameter(torch.ones(cfg.d))
        self.mixer = MambaInner(cfg)

    def forward(self, x):
        return self.mixer(rms_norm(x, self.gain)) + x


class MambaClassifier(nn.Module):
    """Mamba stack, sequence mean, bi-cross attention over voxels, 2-way head."""

    def __init__(self, cfg: ClassifierConfig, voxel_channels=1):
        super().__init__()
        self.cfg = cfg
        self.blocks = nn.ModuleList(MambaBlock(cfg) for _ in range(cfg.depth))
        self.attn = BiCrossAttention(cfg.d, cfg.attn_dim, voxel_channels)
        self.head = nn.Linear(cfg.d, 2)

    def pool(self, x):
        """Blocks then mean over the sequence axis: [B, L, d] -> [B, d]."""
        for block in self.blocks:
            x = block(x)
        return x.mean(dim=1)

    def classify(self, pooled, mri, pet):
        return self.head(self.attn(pooled, mri, pet))

    def forward(self, x, mri, pet):
        return self.classify(self.pool(x), mri, pet)
