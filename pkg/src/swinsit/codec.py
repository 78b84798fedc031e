"""Swin-transformer semantic codec.

The encoder turns a [B, H, W, 3] image batch into k power-normalized complex
channel symbols per image; the decoder mirrors it back to an image. Stages
follow the hierarchical layout: a 2x2 patch embedding, then per stage a run
of (shifted-)window attention blocks and a patch-merge downsampler; the
decoder reverses the hierarchy with patch-divide upsamplers.

Spatial packing conventions (fixed so checkpoints and symbol streams are
reproducible):

* patch embedding flattens each 2x2x3 patch in raster order
  (row, column, channel) before the linear projection;
* patch merging concatenates the 2x2 neighbor tokens in the same raster
  order; patch division mirrors it;
* complex packing pairs consecutive reals (even index = real part, odd
  index = imaginary part) in row-major token-then-channel order.
"""

import math
from dataclasses import dataclass, field, asdict

import torch
import torch.nn as nn
import torch.nn.functional as F

__all__ = [
    "StageConfig",
    "PatchEmbed",
    "PatchMerge",
    "PatchDivide",
    "SwinBlock",
    "SwinEncoder",
    "SwinDecoder",
    "power_normalize",
    "unpack_symbols",
    "rate_to_channels",
]


@dataclass
class StageConfig:
    """Architecture of the hierarchical codec.

    ``output_channels`` (C) sets the symbol budget: the encoder emits
    k = l_S * C / 2 complex symbols, where l_S is the final token count.
    """

    depths: list = field(default_factory=lambda: [2, 4])
    channels: list = field(default_factory=lambda: [128, 256])
    num_heads: list = field(default_factory=lambda: [4, 8])
    window_size: int = 4
    output_channels: int = 28

    def __post_init__(self):
        if not (len(self.depths) == len(self.channels) == len(self.num_heads)):
            raise ValueError("depths, channels and num_heads must have equal length")
        if self.output_channels <= 0 or self.output_channels % 2:
            raise ValueError("output_channels must be a positive even integer")
        if self.window_size < 1:
            raise ValueError("window_size must be >= 1")
        for c, h in zip(self.channels, self.num_heads):
            if c % h:
                raise ValueError(f"channels {c} not divisible by heads {h}")

    @property
    def num_stages(self):
        return len(self.depths)

    def token_grid(self, image_hw, stage=None):
        """Token grid (H', W') after ``stage`` downsamplings (default: all)."""
        s = self.num_stages if stage is None else stage
        h, w = image_hw
        return h >> s, w >> s

    def num_symbols(self, image_hw):
        gh, gw = self.token_grid(image_hw)
        return gh * gw * self.output_channels // 2

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def rate_to_channels(rate, image_hw, num_stages):
    """Largest even C with k = l_S*C/2 <= R*n (n = H*W*3)."""
    h, w = image_hw
    n = h * w * 3
    tokens = (h >> num_stages) * (w >> num_stages)
    if tokens == 0:
        raise ValueError("image too small for the requested stage count")
    c = 2 * int(rate * n / tokens)
    if c < 2:
        raise ValueError(f"rate {rate} too low for grid {tokens} tokens")
    return c


def window_partition(x, ws):
    # [B, H, W, C] -> [B*nW, ws*ws, C]
    b, h, w, c = x.shape
    x = x.view(b, h // ws, ws, w // ws, ws, c)
    return x.permute(0, 1, 3, 2, 4, 5).reshape(-1, ws * ws, c)


def window_reverse(windows, ws, hw):
    h, w = hw
    c = windows.shape[-1]
    b = windows.shape[0] // ((h // ws) * (w // ws))
    x = windows.view(b, h // ws, w // ws, ws, ws, c)
    return x.permute(0, 1, 3, 2, 4, 5).reshape(b, h, w, c)


class PatchEmbed(nn.Module):
    """2x2 non-overlapping patches, linearly projected to C1 channels."""

    def __init__(self, out_channels, in_channels=3):
        super().__init__()
        self.patch = 2
        self.proj = nn.Linear(self.patch * self.patch * in_channels, out_channels)

    def forward(self, images):
        if images.dim() != 4 or images.shape[-1] != 3:
            raise ValueError("expected [B, H, W, 3] images")
        b, h, w, c = images.shape
        p = self.patch
        if h % p or w % p:
            raise ValueError(f"image sides ({h}, {w}) must be even")
        x = images.view(b, h // p, p, w // p, p, c)
        x = x.permute(0, 1, 3, 2, 4, 5).reshape(b, (h // p) * (w // p), p * p * c)
        return self.proj(x), (h // p, w // p)


class PatchMerge(nn.Module):
    """Quarter the token count; project 4 raster-ordered neighbors to C_out."""

    def __init__(self, in_channels, out_channels):
        super().__init__()
        self.proj = nn.Linear(4 * in_channels, out_channels)

    def forward(self, tokens, hw):
        b, l, c = tokens.shape
        h, w = hw
        if l != h * w:
            raise ValueError(f"token count {l} does not match grid {hw}")
        if h % 2 or w % 2:
            raise ValueError(f"token grid {hw} must have even sides")
        x = tokens.view(b, h // 2, 2, w // 2, 2, c)
        x = x.permute(0, 1, 3, 2, 4, 5).reshape(b, (h // 2) * (w // 2), 4 * c)
        return self.proj(x), (h // 2, w // 2)


class PatchDivide(nn.Module):
    """Double the grid sides; each token projects to a 2x2 block of C_out."""

    def __init__(self, in_channels, out_channels):
        super().__init__()
        self.out_channels = out_channels
        self.proj = nn.Linear(in_channels, 4 * out_channels)

    def forward(self, tokens, hw):
        b, l, c = tokens.shape
        h, w = hw
        if l != h * w:
            raise ValueError(f"token count {l} does not match grid {hw}")
        x = self.proj(tokens).view(b, h, w, 2, 2, self.out_channels)
        x = x.permute(0, 1, 3, 2, 4, 5).reshape(b, 4 * l, self.out_channels)
        return x, (2 * h, 2 * w)


def _relative_position_index(ws):
    coords = torch.stack(
        torch.meshgrid(torch.arange(ws), torch.arange(ws), indexing="ij")
    )
    flat = coords.flatten(1)
    rel = flat[:, :, None] - flat[:, None, :]
    rel = rel.permute(1, 2, 0).contiguous()
    rel[:, :, 0] += ws - 1
    rel[:, :, 1] += ws - 1
    rel[:, :, 0] *= 2 * ws - 1
    return rel.sum(-1)


class WindowAttention(nn.Module):
    """Multi-head self-attention within a window, with relative position bias."""

    def __init__(self, dim, num_heads, window_size):
        super().__init__()
        self.dim = dim
        self.num_heads = num_heads
        self.window_size = window_size
        self.scale = (dim // num_heads) ** -0.5
        self.qkv = nn.Linear(dim, dim * 3)
        self.proj = nn.Linear(dim, dim)
        self.relative_bias = nn.Parameter(
            torch.zeros((2 * window_size - 1) ** 2, num_heads)
        )
        self.register_buffer(
            "relative_index", _relative_position_index(window_size), persistent=False
        )
        nn.init.trunc_normal_(self.relative_bias, std=0.02)

    def forward(self, x, mask=None):
        bw, n, c = x.shape
        qkv = (
            self.qkv(x)
            .view(bw, n, 3, self.num_heads, c // self.num_heads)
            .permute(2, 0, 3, 1, 4)
        )
        q, k, v = qkv[0], qkv[1], qkv[2]
        attn = (q @ k.transpose(-2, -1)) * self.scale
        bias = self.relative_bias[self.relative_index.view(-1)].view(n, n, -1)
        attn = attn + bias.permute(2, 0, 1).unsqueeze(0).to(attn.dtype)
        if mask is not None:
            nw = mask.shape[0]
            attn = attn.view(bw // nw, nw, self.num_heads, n, n) + mask.to(attn.dtype)[
                None, :, None
            ]
            attn = attn.view(bw, self.num_heads, n, n)
        attn = attn.softmax(dim=-1)
        x = (attn @ v).transpose(1, 2).reshape(bw, n, c)
        return self.proj(x)


class SwinBlock(nn.Module):
    """Pre-norm windowed attention + MLP, both on residual branches.

    ``shift`` > 0 cyclically shifts the grid by that many tokens before
    windowing (with the usual boundary mask), so alternating blocks mix
    across former window edges. When the window covers the whole grid the
    shift is disabled.
    """

    def __init__(self, dim, num_heads, window_size, shift=0, mlp_ratio=4):
        super().__init__()
        self.window_size = window_size
        self.shift = shift
        self.norm1 = nn.LayerNorm(dim)
        self.attn = WindowAttention(dim, num_heads, window_size)
        self.norm2 = nn.LayerNorm(dim)
        hidden = int(dim * mlp_ratio)
        self.mlp = nn.Sequential(
            nn.Linear(dim, hidden), nn.GELU(), nn.Linear(hidden, dim)
        )
        self._mask_cache = {}

    def _shift_mask(self, hw, device):
        key = hw
        if key in self._mask_cache:
            return self._mask_cache[key]
        h, w = hw
        ws, shift = self.window_size, self.shift
        zones = torch.zeros(1, h, w, 1, device=device)
        slices = (slice(0, -ws), slice(-ws, -shift), slice(-shift, None))
        count = 0
        for hs in slices:
            for wsl in slices:
                zones[:, hs, wsl, :] = count
                count += 1
        windows = window_partition(zones, ws).squeeze(-1)
        diff = windows.unsqueeze(1) - windows.unsqueeze(2)
        mask = torch.where(diff != 0, -100.0, 0.0)
        self._mask_cache[key] = mask
        return mask

    def forward(self, tokens, hw):
        b, l, c = tokens.shape
        h, w = hw
        if l != h * w:
            raise ValueError(f"token count {l} does not match grid {hw}")
        ws = self.window_size
        if h % ws or w % ws:
            raise ValueError(f"window {ws} does not divide grid {hw}")
        shift = self.shift if ws < min(h, w) else 0

        shortcut = tokens
        x = self.norm1(tokens).view(b, h, w, c)
        if shift:
            x = torch.roll(x, (-shift, -shift), dims=(1, 2))
        windows = window_partition(x, ws)
        mask = self._shift_mask(hw, x.device) if shift else None
        windows = self.attn(windows, mask)
        x = window_reverse(windows, ws, hw)
        if shift:
            x = torch.roll(x, (shift, shift), dims=(1, 2))
        tokens = shortcut + x.reshape(b, l, c)
        return tokens + self.mlp(self.norm2(tokens))


def _make_blocks(dim, num_heads, window_size, depth):
    return nn.ModuleList(
        SwinBlock(
            dim,
            num_heads,
            window_size,
            shift=0 if i % 2 == 0 else window_size // 2,
        )
        for i in range(depth)
    )


def power_normalize(tokens):
    """Pair reals into complex symbols and scale each item to unit average power.

    Accepts [B, l, C] token maps (C even) or any [B, 2k] real layout; returns
    [B, k] complex symbols with (1/k) sum |y_i|^2 = 1 per batch item.
    """
    b = tokens.shape[0]
    flat = tokens.reshape(b, -1)
    if flat.shape[1] % 2:
        raise ValueError("need an even number of reals to form complex symbols")
    pairs = flat.reshape(b, -1, 2)
    y = torch.view_as_complex(pairs.contiguous())
    power = (y.real**2 + y.imag**2).mean(dim=1, keepdim=True)
    if (power == 0).any():
        raise ValueError("all-zero input has no power to normalize")
    return y / torch.sqrt(power)


def unpack_symbols(symbols, tokens, channels):
    """Inverse packing: [B, k] complex -> [B, tokens, channels] reals."""
    b, k = symbols.shape
    if 2 * k != tokens * channels:
        raise ValueError(
            f"{k} symbols cannot fill a {tokens}x{channels} token map"
        )
    reals = torch.view_as_real(symbols).reshape(b, -1)
    return reals.reshape(b, tokens, channels)


class SwinEncoder(nn.Module):
    """Semantic encoder: patch embed, stages, SNR enhancement, symbol head."""

    def __init__(self, cfg: StageConfig, snr_module=None):
        super().__init__()
        self.cfg = cfg
        self.patch_embed = PatchEmbed(cfg.channels[0])
        self.merges = nn.ModuleList(
            PatchMerge(cfg.channels[s - 1], cfg.channels[s])
            for s in range(1, cfg.num_stages)
        )
        self.stages = nn.ModuleList(
            _make_blocks(cfg.channels[s], cfg.num_heads[s], cfg.window_size, cfg.depths[s])
            for s in range(cfg.num_stages)
        )
        self.snr_aware = snr_module
        self.head = nn.Linear(cfg.channels[-1], cfg.output_channels)

    def forward(self, images, snr_db):
        tokens, hw = self.patch_embed(images)
        for s, blocks in enumerate(self.stages):
            if s > 0:
                tokens, hw = self.merges[s - 1](tokens, hw)
            for block in blocks:
                tokens = block(tokens, hw)
        if self.snr_aware is not None:
            tokens = self.snr_aware(tokens, snr_db)
        return power_normalize(self.head(tokens))


class SwinDecoder(nn.Module):
    """Semantic decoder mirroring the encoder stage by stage.

    The final patch division projects straight to 3 image channels at full
    resolution. Output is hard-clipped to [0, 1] in eval mode and left
    unclipped during training.
    """

    def __init__(self, cfg: StageConfig, snr_module=None):
        super().__init__()
        self.cfg = cfg
        self.head = nn.Linear(cfg.output_channels, cfg.channels[-1])
        self.snr_aware = snr_module
        self.stages = nn.ModuleList(
            _make_blocks(cfg.channels[s], cfg.num_heads[s], cfg.window_size, cfg.depths[s])
            for s in range(cfg.num_stages)
        )
        self.divides = nn.ModuleList(
            PatchDivide(cfg.channels[s], cfg.channels[s - 1] if s > 0 else 3)
            for s in range(cfg.num_stages)
        )

    def forward(self, symbols, snr_db, image_hw):
        h, w = image_hw
        s = self.cfg.num_stages
        if (h >> s) << s != h or (w >> s) << s != w:
            raise ValueError(f"image size {image_hw} not divisible by 2^{s}")
        hw = self.cfg.token_grid(image_hw)
        expected = self.cfg.num_symbols(image_hw)
        if symbols.shape[-1] != expected:
            raise ValueError(
                f"got {symbols.shape[-1]} symbols, expected {expected} for {image_hw}"
            )
        tokens = unpack_symbols(symbols, hw[0] * hw[1], self.cfg.output_channels)
        tokens = self.head(tokens)
        if self.snr_aware is not None:
            tokens = self.snr_aware(tokens, snr_db)
        for s in reversed(range(self.cfg.num_stages)):
            for block in self.stages[s]:
                tokens = block(tokens, hw)
            tokens, hw = self.divides[s](tokens, hw)
        images = tokens.reshape(tokens.shape[0], h, w, 3)
        return images if self.training else images.clamp(0.0, 1.0)
