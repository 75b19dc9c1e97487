"""3D GAN with a ViT middle block (MRI -> PET).

Encoder (3 x [maxpool, groupnorm, conv, relu]) -> depth-mosaic flatten ->
patch tokens -> transformer blocks -> tokens back to the latent grid ->
decoder (3 x [groupnorm, transposed conv, relu]) -> 1x1 conv -> sigmoid.

The ViT input and output tokens double as the latent MRI / latent PET
features consumed by the classifier.
"""
from dataclasses import dataclass, asdict
import math

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import DivergenceError, ValidationError

__all__ = [
    "GeneratorConfig",
    "mosaic_grid",
    "latent_dims",
    "check_volume_dims",
    "latent_to_patches",
    "patches_to_latent",
    "Encoder",
    "Decoder",
    "ViTMiddle",
    "Generator",
    "Discriminator",
    "RandomConvFeatures",
    "SliceWiseFeatures",
    "build_perceptual",
    "adversarial_g_term",
    "adversarial_d_loss",
    "generator_loss",
    "discriminator_loss",
    "SCORE_EPS",
]

SCORE_EPS = 1e-7
AXES = ("depth", "height", "width")


@dataclass
class GeneratorConfig:
    volume_dims: tuple = (32, 64, 64)
    encoder_channels: tuple = (8, 16, 32)
    patch_size: int = 4
    vit_depth: int = 4
    vit_heads: int = 4
    mlp_ratio: int = 4
    group_norm_groups: int = 4
    mosaic: str = "square"
    perceptual_extractor: str = "fixed_random_conv"
    perceptual_channels: tuple = (8, 16, 32)
    perceptual_seed: int = 1234
    adversarial: str = "saturating"
    literal_losses: bool = False

    def __post_init__(self):
        self.volume_dims = tuple(int(v) for v in self.volume_dims)
        self.encoder_channels = tuple(int(c) for c in self.encoder_channels)
        self.perceptual_channels = tuple(int(c) for c in self.perceptual_channels)
        if len(self.encoder_channels) != 3:
            raise ValidationError("encoder_channels must list 3 ints")
        if self.vit_depth < 1:
            raise ValidationError("vit_depth must be >= 1")
        if self.mosaic not in ("square", "rect"):
            raise ValidationError(f"mosaic must be 'square' or 'rect', got {self.mosaic!r}")
        if self.adversarial not in ("saturating", "non_saturating"):
            raise ValidationError(f"unknown adversarial mode {self.adversarial!r}")
        if self.perceptual_extractor not in ("fixed_random_conv", "external_pretrained"):
            raise ValidationError(f"unknown perceptual_extractor {self.perceptual_extractor!r}")
        check_volume_dims(self.volume_dims, self.mosaic)
        g = latent_dims(self)
        if self.token_dim % self.vit_heads:
            raise ValidationError(f"token dim {self.token_dim} not divisible by vit_heads={self.vit_heads}")
        rows, cols = mosaic_grid(g[1], self.mosaic)
        for axis, n in (("height", g[2] * rows), ("width", g[3] * cols)):
            if n % self.patch_size:
                raise ValidationError(f"patch_size {self.patch_size} does not divide flattened {axis} {n}")

    @property
    def decoder_channels(self):
        return tuple(reversed(self.encoder_channels))

    @property
    def latent_channels(self):
        return self.encoder_channels[-1]

    @property
    def token_dim(self):
        return self.patch_size ** 2 * self.latent_channels

    @property
    def n_tokens(self):
        C, D, H, W = latent_dims(self)
        rows, cols = mosaic_grid(D, self.mosaic)
        return (H * rows // self.patch_size) * (W * cols // self.patch_size)

    def to_dict(self):
        return asdict(self)


def mosaic_grid(depth, layout="square"):
    """Tile ``depth`` slices into (rows, cols).

    ``square`` needs a perfect square; ``rect`` picks the largest divisor
    not above sqrt(depth) for rows and reduces to ``square`` when it can.
    """
    root = math.isqrt(depth)
    if layout == "square":
        if root * root != depth:
            raise ValidationError(f"latent depth {depth} is not a perfect square")
        return root, root
    rows = max(r for r in range(1, root + 1) if depth % r == 0)
    return rows, depth // rows


def check_volume_dims(dims, layout="square"):
    dims = tuple(dims)
    if len(dims) != 3:
        raise ValidationError(f"expected 3 spatial dims, got {dims}")
    for axis, n in zip(AXES, dims):
        if n < 8 or n % 8:
            raise ValidationError(f"{axis}={n} not divisible by 8")
    mosaic_grid(dims[0] // 8, layout)
    return dims


def latent_dims(cfg):
    D, H, W = cfg.volume_dims
    return (cfg.latent_channels, D // 8, H // 8, W // 8)


def _batched(x, ndim):
    if x.dim() == ndim - 1:
        return x.unsqueeze(0), True
    return x, False


def latent_to_patches(g, p, layout="square"):
    """[B, C, D, H, W] latent grid -> [B, N, p*p*C] tokens.

    Depth slices tile a rows x cols mosaic (row-major), giving a 2-D map
    [rows*H, cols*W, C]; the map is cut into p x p patches in row-major
    patch order and each patch flattens as (py, px, C).
    """
    g, squeeze = _batched(g, 5)
    B, C, D, H, W = g.shape
    rows, cols = mosaic_grid(D, layout)
    Hm, Wm = rows * H, cols * W
    if Hm % p or Wm % p:
        raise ValidationError(f"patch size {p} does not divide mosaic {Hm}x{Wm}")
    m = g.reshape(B, C, rows, cols, H, W).permute(0, 2, 4, 3, 5, 1).reshape(B, Hm, Wm, C)
    t = m.reshape(B, Hm // p, p, Wm // p, p, C).permute(0, 1, 3, 2, 4, 5)
    t = t.reshape(B, (Hm // p) * (Wm // p), p * p * C)
    return t.squeeze(0) if squeeze else t


def patches_to_latent(tokens, dims, p, layout="square"):
    """Exact inverse of :func:`latent_to_patches` for latent ``dims = (C, D, H, W)``."""
    tokens, squeeze = _batched(tokens, 3)
    C, D, H, W = dims
    rows, cols = mosaic_grid(D, layout)
    Hm, Wm = rows * H, cols * W
    if Hm % p or Wm % p:
        raise ValidationError(f"patch size {p} does not divide mosaic {Hm}x{Wm}")
    n_expected = (Hm // p) * (Wm // p)
    B, N, T = tokens.shape
    if N != n_expected or T != p * p * C:
        raise ValidationError(
            f"token array [{N}, {T}] inconsistent with latent {tuple(dims)}: expected [{n_expected}, {p * p * C}]"
        )
    m = tokens.reshape(B, Hm // p, Wm // p, p, p, C).permute(0, 1, 3, 2, 4, 5).reshape(B, Hm, Wm, C)
    g = m.reshape(B, rows, H, cols, W, C).permute(0, 5, 1, 3, 2, 4).reshape(B, C, D, H, W)
    return g.squeeze(0) if squeeze else g


def _groups(groups, channels):
    return math.gcd(groups, channels)


class DownBlock(nn.Module):
    def __init__(self, cin, cout, groups):
        super().__init__()
        self.pool = nn.MaxPool3d(2)
        self.norm = nn.GroupNorm(_groups(groups, cin), cin)
        self.conv = nn.Conv3d(cin, cout, 3, padding=1)

    def forward(self, x):
        return F.relu(self.conv(self.norm(self.pool(x))))


class UpBlock(nn.Module):
    def __init__(self, cin, cout, groups):
        super().__init__()
        self.norm = nn.GroupNorm(_groups(groups, cin), cin)
        self.conv = nn.ConvTranspose3d(cin, cout, 2, stride=2)

    def forward(self, x):
        return F.relu(self.conv(self.norm(x)))


class Encoder(nn.Module):
    def __init__(self, channels, groups, in_channels=1):
        super().__init__()
        chans = (in_channels,) + tuple(channels)
        for i in range(3):
            self.add_module(f"block{i}", DownBlock(chans[i], chans[i + 1], groups))

    def forward(self, x):
        D, H, W = x.shape[-3:]
        for axis, n in zip(AXES, (D, H, W)):
            if n < 8 or n % 8:
                raise ValidationError(f"{axis}={n} not divisible by 8")
        for i in range(3):
            x = getattr(self, f"block{i}")(x)
        return x


class Decoder(nn.Module):
    def __init__(self, channels, groups, out_channels=1):
        super().__init__()
        chans = (channels[0],) + tuple(channels)
        for i in range(3):
            self.add_module(f"block{i}", UpBlock(chans[i], chans[i + 1], groups))
        self.head = nn.Conv3d(channels[-1], out_channels, 1)

    def forward(self, g):
        for i in range(3):
            g = getattr(self, f"block{i}")(g)
        return torch.sigmoid(self.head(g))


class SelfAttention(nn.Module):
    def __init__(self, dim, heads):
        super().__init__()
        self.heads = heads
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)

    def weights(self, x):
        B, N, E = x.shape
        q, k, _ = self.qkv(x).reshape(B, N, 3, self.heads, E // self.heads).permute(2, 0, 3, 1, 4)
        return torch.softmax(q @ k.transpose(-1, -2) / math.sqrt(E // self.heads), dim=-1)

    def forward(self, x):
        B, N, E = x.shape
        q, k, v = self.qkv(x).reshape(B, N, 3, self.heads, E // self.heads).permute(2, 0, 3, 1, 4)
        attn = torch.softmax(q @ k.transpose(-1, -2) / math.sqrt(E // self.heads), dim=-1)
        return self.proj((attn @ v).transpose(1, 2).reshape(B, N, E))


class TransformerBlock(nn.Module):
    def __init__(self, dim, heads, mlp_ratio):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = SelfAttention(dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        self.fc1 = nn.Linear(dim, mlp_ratio * dim)
        self.fc2 = nn.Linear(mlp_ratio * dim, dim)

    def forward(self, x):
        x = x + self.attn(self.norm1(x))
        return x + self.fc2(F.gelu(self.fc1(self.norm2(x))))


class ViTMiddle(nn.Module):
    """Learned positional embedding, then pre-norm transformer blocks."""

    def __init__(self, n_tokens, dim, depth, heads, mlp_ratio=4):
        super().__init__()
        self.dim = dim
        self.pos = nn.Parameter(torch.randn(n_tokens, dim) * 0.02)
        self.blocks = nn.ModuleList(TransformerBlock(dim, heads, mlp_ratio) for _ in range(depth))

    def forward(self, tokens):
        if tokens.shape[-1] != self.dim or tokens.shape[-2] != self.pos.shape[0]:
            raise ValidationError(
                f"token array {tuple(tokens.shape[-2:])} does not match ViT ({self.pos.shape[0]}, {self.dim})"
            )
        tokens, squeeze = _batched(tokens, 3)
        x = tokens + self.pos
        for block in self.blocks:
            x = block(x)
        return x.squeeze(0) if squeeze else x

    def zero_output_projections_(self):
        with torch.no_grad():
            for block in self.blocks:
                for lin in (block.attn.proj, block.fc2):
                    lin.weight.zero_()
                    lin.bias.zero_()
        return self


class Generator(nn.Module):
    def __init__(self, cfg: GeneratorConfig):
        super().__init__()
        self.cfg = cfg
        self.encoder = Encoder(cfg.encoder_channels, cfg.group_norm_groups)
        self.vit = ViTMiddle(cfg.n_tokens, cfg.token_dim, cfg.vit_depth, cfg.vit_heads, cfg.mlp_ratio)
        self.decoder = Decoder(cfg.decoder_channels, cfg.group_norm_groups)

    def encode(self, v):
        v, squeeze = _batched(v, 5)
        self._check_input(v)
        g = self.encoder(v)
        return g.squeeze(0) if squeeze else g

    def decode(self, g):
        g, squeeze = _batched(g, 5)
        want = latent_dims(self.cfg)
        if tuple(g.shape[1:]) != want:
            raise ValidationError(f"latent grid {tuple(g.shape[1:])} does not match expected {want}")
        v = self.decoder(g)
        return v.squeeze(0) if squeeze else v

    def to_patches(self, g):
        return latent_to_patches(g, self.cfg.patch_size, self.cfg.mosaic)

    def from_patches(self, tokens):
        return patches_to_latent(tokens, latent_dims(self.cfg), self.cfg.patch_size, self.cfg.mosaic)

    def _check_input(self, v):
        check_volume_dims(v.shape[-3:], self.cfg.mosaic)

    def forward(self, v):
        """Returns (generated PET, x_LMP tokens, x_LPP tokens)."""
        x_lmp = self.to_patches(self.encode(v))
        x_lpp = self.vit(x_lmp)
        pet = self.decode(self.from_patches(x_lpp))
        return pet, x_lmp, x_lpp


class Discriminator(nn.Module):
    """Same 3-stage downsampler; feature map -> mean pool -> affine -> sigmoid."""

    def __init__(self, cfg: GeneratorConfig):
        super().__init__()
        self.encoder = Encoder(cfg.encoder_channels, cfg.group_norm_groups)
        self.head = nn.Linear(cfg.latent_channels, 1)

    def forward(self, v):
        v, squeeze = _batched(v, 5)
        fmap = self.encoder(v)
        score = torch.sigmoid(self.head(fmap.mean(dim=(2, 3, 4)))).squeeze(-1)
        if squeeze:
            return fmap.squeeze(0), score.squeeze(0)
        return fmap, score


class RandomConvFeatures(nn.Module):
    """Frozen, seeded stack of three strided 3-D convolutions."""

    def __init__(self, channels=(8, 16, 32), seed=1234, in_channels=1):
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        chans = (in_channels,) + tuple(channels)
        self.convs = nn.ModuleList()
        for cin, cout in zip(chans[:-1], chans[1:]):
            conv = nn.Conv3d(cin, cout, 3, stride=2, padding=1)
            bound = 1.0 / math.sqrt(cin * 27)
            with torch.no_grad():
                conv.weight.copy_((torch.rand(conv.weight.shape, generator=gen) * 2 - 1) * math.sqrt(6) * bound)
                conv.bias.copy_((torch.rand(conv.bias.shape, generator=gen) * 2 - 1) * bound)
            conv.requires_grad_(False)
            self.convs.append(conv)

    def forward(self, v):
        feats = []
        x = v
        for conv in self.convs:
            x = F.relu(conv(x))
            feats.append(x.flatten(1))
        return torch.cat(feats, dim=1)


class SliceWiseFeatures(nn.Module):
    """Adapter running an external 2-D extractor over every axial slice.

    ``extractor`` maps [N, 3, H, W] images to features; the single channel
    is repeated to three. Its parameters are frozen.
    """

    def __init__(self, extractor):
        super().__init__()
        self.extractor = extractor
        self.extractor.requires_grad_(False)

    def forward(self, v):
        B, C, D, H, W = v.shape
        slices = v.permute(0, 2, 1, 3, 4).reshape(B * D, C, H, W)
        if C == 1:
            slices = slices.expand(-1, 3, -1, -1)
        return self.extractor(slices).reshape(B, -1)


def build_perceptual(cfg, extractor=None):
    if cfg.perceptual_extractor == "fixed_random_conv":
        return RandomConvFeatures(cfg.perceptual_channels, cfg.perceptual_seed)
    if extractor is None:
        raise ValidationError("external_pretrained perceptual extractor requires an extractor module")
    return SliceWiseFeatures(extractor)


def adversarial_g_term(fake_score, mode="saturating"):
    """Generator adversarial term from discriminator scores on generated PET."""
    s = fake_score.clamp(SCORE_EPS, 1 - SCORE_EPS)
    if mode == "saturating":
        return torch.log1p(-s).mean()
    return -torch.log(s).mean()


def adversarial_d_loss(real_score, fake_score, literal=False):
    """-[log D(real) + log(1 - D(fake))]; ``literal`` gives log(1 - D(real)) + log D(fake)."""
    r = real_score.clamp(SCORE_EPS, 1 - SCORE_EPS)
    f = fake_score.clamp(SCORE_EPS, 1 - SCORE_EPS)
    if literal:
        return (torch.log1p(-r) + torch.log(f)).mean()
    return -(torch.log(r) + torch.log1p(-f)).mean()


def _finite(parts):
    for name, value in parts.items():
        if not torch.isfinite(value).all():
            raise DivergenceError(f"non-finite {name} loss: {value.item()}", part=name)


def generator_loss(gen, disc, perceptual, x_m, y_p, cfg=None):
    """Reconstruction MSE + adversarial term + perceptual MSE.

    Returns ``(total, parts, outputs)`` where ``parts`` holds the three
    terms as tensors and ``outputs`` is the generator's (pet, x_lmp, x_lpp).
    """
    cfg = cfg or gen.cfg
    outputs = gen(x_m)
    fake = outputs[0]
    if fake.shape != y_p.shape:
        raise ValidationError(f"generated {tuple(fake.shape)} and target {tuple(y_p.shape)} differ")
    _, score = disc(fake)
    recon = F.mse_loss(fake, y_p)
    adv = adversarial_g_term(score, cfg.adversarial)
    if cfg.literal_losses:
        perc = F.mse_loss(perceptual(_as_batch(x_m)), perceptual(_as_batch(y_p)))
    else:
        perc = F.mse_loss(perceptual(_as_batch(fake)), perceptual(_as_batch(y_p)))
    parts = {"recon": recon, "adv": adv, "perceptual": perc}
    _finite(parts)
    return recon + adv + perc, parts, outputs


def discriminator_loss(gen, disc, x_m, y_p, cfg=None, fake=None):
    """Discriminator objective with the generator held constant."""
    cfg = cfg or gen.cfg
    if fake is None:
        with torch.no_grad():
            fake = gen(x_m)[0]
    _, real_score = disc(y_p)
    _, fake_score = disc(fake.detach())
    loss = adversarial_d_loss(real_score, fake_score, cfg.literal_losses)
    _finite({"discriminator": loss})
    return loss


def _as_batch(v):
    return v.unsqueeze(0) if v.dim() == 4 else v
