"""Conditional 1-D U-Net that maps a noised visit embedding to the predicted
next-visit embedding.

The input vector is projected to the widest level and reshaped into a
(channels, length) feature map. Each downsampling level applies a residual
block (with the diffusion-step embedding injected pre-activation) and a
stride-2 convolution that halves the length. On the way up, each skip
connection is fused with the conditioning vector through a level-wise
attention block before being concatenated with the upsampled feature. Level
widths follow a configurable dimension list (default [1024, 512, 256],
i.e. channels x length of 4x256 -> 4x128 -> 4x64).
"""

from __future__ import annotations

import math

import torch
from torch import nn
from torch.nn import functional as F

from .embedding import sinusoidal_position_encoding


class ResBlock1d(nn.Module):
    """Conv -> BatchNorm -> (+ step embedding) -> ReLU, with identity skip."""

    def __init__(self, channels: int, step_dim: int):
        super().__init__()
        self.conv = nn.Conv1d(channels, channels, kernel_size=3, padding=1)
        self.norm = nn.BatchNorm1d(channels)
        self.step_proj = nn.Linear(step_dim, channels)

    def forward(self, x: torch.Tensor, step_emb: torch.Tensor) -> torch.Tensor:
        h = self.norm(self.conv(x))
        h = h + self.step_proj(step_emb).unsqueeze(-1)
        return F.relu(h) + x


class ConditionAttention(nn.Module):
    """Fuses the conditioning vector into one level's feature map.

    The flattened feature and the level-projected condition are mapped by
    square query/key/value matrices over the full level width and reshaped to
    (channels, length); channels act as tokens. Row-stochastic scores weight
    the value tokens, and the result is max-pooled over the context-token
    axis after being added to the layer-normalized input, which keeps the
    output shape equal to the input shape.
    """

    def __init__(self, channels: int, length: int, condition_dim: int):
        super().__init__()
        width = channels * length
        self.channels = channels
        self.length = length
        self.query = nn.Linear(width, width, bias=False)
        self.key = nn.Linear(width, width, bias=False)
        self.value = nn.Linear(width, width, bias=False)
        self.condition_proj = nn.Linear(condition_dim, width)
        self.norm = nn.LayerNorm(length)

    def scores(self, x: torch.Tensor, condition: torch.Tensor) -> torch.Tensor:
        """Row-stochastic attention weights of shape (batch, channels, channels)."""
        batch = x.shape[0]
        width = self.channels * self.length
        q = self.query(x.flatten(1)).view(batch, self.channels, self.length)
        k = self.key(self.condition_proj(condition)).view(batch, self.channels, self.length)
        return torch.softmax(q @ k.transpose(1, 2) / math.sqrt(width), dim=-1)

    def forward(self, x: torch.Tensor, condition: torch.Tensor) -> torch.Tensor:
        batch = x.shape[0]
        attn = self.scores(x, condition)
        v = self.value(self.condition_proj(condition)).view(batch, self.channels, self.length)
        # keep the per-context-token contributions separate so the pooling
        # below runs over the context axis
        pair = attn.unsqueeze(-1) * v.unsqueeze(1)
        fused = self.norm(x).unsqueeze(2) + pair
        return fused.max(dim=2).values


class ConditionalUNet1d(nn.Module):
    """Denoiser conditioned on a context vector and the diffusion step.

    Args:
        dim: input/output vector width.
        condition_dim: width of the conditioning vector.
        level_widths: total feature width per level; consecutive entries must
            halve and every entry must be divisible by ``channels``.
        channels: channel count shared by all levels.
        num_steps: largest valid 1-based diffusion step.
        step_dim: width of the sinusoidal step embedding (even).
        use_condition_attention: when off, skip connections pass through
            unchanged and no attention parameters exist.
    """

    def __init__(self, dim: int, condition_dim: int,
                 level_widths: tuple[int, ...] = (1024, 512, 256), channels: int = 4,
                 num_steps: int = 50, step_dim: int = 64,
                 use_condition_attention: bool = True):
        super().__init__()
        if len(level_widths) < 1:
            raise ValueError("need at least one level")
        for width in level_widths:
            if width % channels != 0:
                raise ValueError(f"level width {width} not divisible by {channels} channels")
        for a, b in zip(level_widths, level_widths[1:]):
            if a != 2 * b:
                raise ValueError(f"level widths must halve, got {a} -> {b}")
        if (level_widths[-1] // channels) % 2 != 0 and len(level_widths) > 1:
            raise ValueError("deepest level length must be even")
        self.dim = dim
        self.condition_dim = condition_dim
        self.level_widths = tuple(level_widths)
        self.channels = channels
        self.num_steps = num_steps
        self.use_condition_attention = use_condition_attention
        self.lengths = tuple(w // channels for w in level_widths)

        steps = torch.arange(num_steps + 1, dtype=torch.float32)
        self.register_buffer("step_table", sinusoidal_position_encoding(steps, step_dim))

        self.in_proj = nn.Linear(dim, level_widths[0])
        self.out_proj = nn.Linear(level_widths[0], dim)
        inner = len(level_widths) - 1
        self.down_blocks = nn.ModuleList(ResBlock1d(channels, step_dim) for _ in range(inner))
        self.down_convs = nn.ModuleList(
            nn.Conv1d(channels, channels, kernel_size=3, stride=2, padding=1)
            for _ in range(inner))
        self.bottleneck = ResBlock1d(channels, step_dim)
        if use_condition_attention:
            self.skip_attention = nn.ModuleList(
                ConditionAttention(channels, self.lengths[l], condition_dim)
                for l in range(inner))
        self.up_deconvs = nn.ModuleList(
            nn.ConvTranspose1d(channels, channels, kernel_size=4, stride=2, padding=1)
            for _ in range(inner))
        self.up_norms = nn.ModuleList(nn.BatchNorm1d(channels) for _ in range(inner))
        self.fuse_convs = nn.ModuleList(
            nn.Conv1d(2 * channels, channels, kernel_size=3, padding=1)
            for _ in range(inner))
        self.up_blocks = nn.ModuleList(ResBlock1d(channels, step_dim) for _ in range(inner))

    def step_embedding(self, step: int | torch.Tensor, *, batch: int,
                       dtype: torch.dtype) -> torch.Tensor:
        idx = torch.as_tensor(step, dtype=torch.long)
        if torch.any(idx < 1) or torch.any(idx > self.num_steps):
            raise ValueError(f"step out of range 1..{self.num_steps}")
        emb = self.step_table[idx].to(dtype)
        if emb.dim() == 1:
            emb = emb.unsqueeze(0).expand(batch, -1)
        return emb

    def upsample_fuse(self, level: int, skip: torch.Tensor, below: torch.Tensor,
                      step_emb: torch.Tensor) -> torch.Tensor:
        """Deconv the deeper feature, concatenate with the skip, fuse, refine."""
        up = F.relu(self.up_norms[level](self.up_deconvs[level](below)))
        fused = self.fuse_convs[level](torch.cat([skip, up], dim=1))
        return self.up_blocks[level](fused, step_emb)

    def forward(self, v: torch.Tensor, condition: torch.Tensor,
                step: int | torch.Tensor) -> torch.Tensor:
        squeeze = v.dim() == 1
        if squeeze:
            v = v.unsqueeze(0)
            condition = condition.unsqueeze(0)
        batch = v.shape[0]
        step_emb = self.step_embedding(step, batch=batch, dtype=v.dtype)
        x = self.in_proj(v).view(batch, self.channels, self.lengths[0])
        skips = []
        for level in range(len(self.level_widths) - 1):
            x = self.down_blocks[level](x, step_emb)
            skips.append(x)
            x = self.down_convs[level](x)
        x = self.bottleneck(x, step_emb)
        for level in reversed(range(len(self.level_widths) - 1)):
            skip = skips[level]
            if self.use_condition_attention:
                skip = self.skip_attention[level](skip, condition)
            x = self.upsample_fuse(level, skip, x, step_emb)
        out = self.out_proj(x.flatten(1))
        return out.squeeze(0) if squeeze else out
