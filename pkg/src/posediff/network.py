"""Denoising network: texture encoder, cross-attention texture blocks and the pose-conditioned UNet."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import NamedTuple

import torch
import torch.nn as nn
import torch.nn.functional as F


@dataclass
class ModelConfig:
    image_height: int = 64
    image_width: int = 48
    image_channels: int = 3
    pose_channels: int = 12
    base_width: int = 64
    channel_multipliers: tuple[int, ...] = (1, 1, 2, 2, 4)
    num_res_blocks: int = 2
    # (h, w) pairs where texture blocks run; must be realized stage resolutions
    tdb_resolutions: tuple[tuple[int, int], ...] = ((16, 12), (8, 6), (4, 3))
    tdb_encoder: bool = True
    tdb_decoder: bool = True
    tdb_norm: bool = True
    attention_heads: int = 1
    time_embed_dim: int = 256
    variance_head: bool = True
    norm_groups: int = 8

    def __post_init__(self):
        self.channel_multipliers = tuple(int(m) for m in self.channel_multipliers)
        self.tdb_resolutions = tuple(tuple(int(x) for x in r) for r in self.tdb_resolutions)
        self.validate()

    @property
    def stage_resolutions(self) -> list[tuple[int, int]]:
        return [
            (self.image_height >> i, self.image_width >> i) for i in range(len(self.channel_multipliers))
        ]

    def stage_widths(self) -> list[int]:
        return [self.base_width * m for m in self.channel_multipliers]

    def validate(self):
        stages = len(self.channel_multipliers)
        if stages < 1:
            raise ValueError("need at least one UNet stage")
        div = 2 ** (stages - 1)
        if self.image_height % div or self.image_width % div:
            raise ValueError(
                f"image size {self.image_height}x{self.image_width} not divisible by 2^(stages-1) = {div}"
            )
        missing = set(self.tdb_resolutions) - set(self.stage_resolutions)
        if missing:
            raise ValueError(f"tdb_resolutions {sorted(missing)} are not UNet stage resolutions {self.stage_resolutions}")
        for w in self.stage_widths():
            if w % self.norm_groups:
                raise ValueError(f"stage width {w} not divisible by norm_groups={self.norm_groups}")
            if w % self.attention_heads:
                raise ValueError(f"stage width {w} not divisible by attention_heads={self.attention_heads}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["channel_multipliers"] = list(self.channel_multipliers)
        d["tdb_resolutions"] = [list(r) for r in self.tdb_resolutions]
        return d


class NoisePrediction(NamedTuple):
    eps_hat: torch.Tensor
    v: torch.Tensor | None


def sinusoidal_embedding(t: torch.Tensor, dim: int, max_period: float = 10000.0) -> torch.Tensor:
    """Raw sin/cos features of the timestep: first half cos, second half sin."""
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=torch.float64) / half)
    args = t.to(torch.float64)[:, None] * freqs[None]
    emb = torch.cat([torch.cos(args), torch.sin(args)], dim=1)
    if dim % 2:
        emb = torch.cat([emb, torch.zeros_like(emb[:, :1])], dim=1)
    return emb


class TimeEmbedding(nn.Module):
    def __init__(self, in_dim: int, out_dim: int):
        super().__init__()
        self.in_dim = in_dim
        self.proj = nn.Sequential(nn.Linear(in_dim, out_dim), nn.SiLU(), nn.Linear(out_dim, out_dim))

    def forward(self, t: torch.Tensor) -> torch.Tensor:
        w = self.proj[0].weight
        return self.proj(sinusoidal_embedding(t, self.in_dim).to(dtype=w.dtype, device=w.device))


def time_embed(t: torch.Tensor, dim: int, module: TimeEmbedding | None = None) -> torch.Tensor:
    """Timestep embedding ``[batch, dim]``; raw sinusoids when no projection module is given."""
    if module is None:
        return sinusoidal_embedding(torch.as_tensor(t), dim)
    return module(torch.as_tensor(t))


class ResBlock(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, temb_dim: int | None, groups: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(min(groups, in_ch), in_ch)
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, padding=1)
        self.temb = nn.Linear(temb_dim, out_ch) if temb_dim else None
        self.norm2 = nn.GroupNorm(groups, out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1)
        self.skip = nn.Conv2d(in_ch, out_ch, 1) if in_ch != out_ch else nn.Identity()

    def forward(self, x, temb=None):
        h = self.conv1(F.silu(self.norm1(x)))
        if self.temb is not None:
            h = h + self.temb(F.silu(temb))[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return self.skip(x) + h


def attention_weights(q: torch.Tensor, k: torch.Tensor) -> torch.Tensor:
    """softmax(Q K^T / sqrt(C)) over key positions. q: [B, Nq, C], k: [B, Nk, C]."""
    scale = 1.0 / math.sqrt(q.shape[-1])
    return torch.softmax(torch.bmm(q, k.transpose(1, 2)) * scale, dim=-1)


class TextureDiffusionBlock(nn.Module):
    """Cross-attention from noise features (queries) to texture features (keys/values).

    Output is ``W softmax(Q K^T / sqrt(C)) V + F_h`` with layer-specific 1x1
    projections. ``W`` starts at zero so the block is an identity at init.
    """

    def __init__(self, channels: int, texture_channels: int, heads: int = 1, norm_groups: int | None = 8):
        super().__init__()
        self.channels = channels
        self.heads = heads
        self.norm = nn.GroupNorm(norm_groups, channels) if norm_groups else nn.Identity()
        self.to_q = nn.Conv2d(channels, channels, 1)
        self.to_k = nn.Conv2d(texture_channels, channels, 1)
        self.to_v = nn.Conv2d(texture_channels, channels, 1)
        self.out = nn.Conv2d(channels, channels, 1)
        nn.init.zeros_(self.out.weight)
        nn.init.zeros_(self.out.bias)

    def forward(self, f_h: torch.Tensor, f_s: torch.Tensor, return_weights: bool = False):
        b, c, h, w = f_h.shape
        if f_s.shape[0] != b:
            raise ValueError(f"texture batch {f_s.shape[0]} != feature batch {b}")
        nh = self.heads
        d = c // nh
        q = self.to_q(self.norm(f_h)).reshape(b * nh, d, h * w).transpose(1, 2)
        k = self.to_k(f_s).reshape(b * nh, d, -1).transpose(1, 2)
        v = self.to_v(f_s).reshape(b * nh, d, -1).transpose(1, 2)
        attn = attention_weights(q, k)
        mixed = torch.bmm(attn, v).transpose(1, 2).reshape(b, c, h, w)
        out = self.out(mixed) + f_h
        if return_weights:
            return out, attn.reshape(b, nh, h * w, -1)
        return out


def tdb_attend(f_h: torch.Tensor, f_s: torch.Tensor, block: TextureDiffusionBlock) -> torch.Tensor:
    return block(f_h, f_s)


class TextureEncoder(nn.Module):
    """Convolutional pyramid over the source image, tapped at the texture-block resolutions."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        widths = config.stage_widths()
        res = config.stage_resolutions
        self.stem = nn.Conv2d(config.image_channels, widths[0], 3, padding=1)
        self.blocks = nn.ModuleList()
        self.downs = nn.ModuleList()
        ch = widths[0]
        for i, w in enumerate(widths):
            self.blocks.append(ResBlock(ch, w, None, config.norm_groups))
            ch = w
            if i < len(widths) - 1:
                self.downs.append(nn.Conv2d(ch, ch, 3, stride=2, padding=1))
        self.taps = [i for i, r in enumerate(res) if r in set(config.tdb_resolutions)]

    def forward(self, x_s: torch.Tensor) -> list[torch.Tensor]:
        cfg = self.config
        expected = (cfg.image_channels, cfg.image_height, cfg.image_width)
        if tuple(x_s.shape[1:]) != expected:
            raise ValueError(f"source image shape {tuple(x_s.shape[1:])} != {expected}")
        feats = []
        h = self.stem(x_s)
        for i, block in enumerate(self.blocks):
            h = block(h)
            if i in self.taps:
                feats.append(h)
            if i < len(self.downs):
                h = self.downs[i](h)
        return feats


class PoseTextureUNet(nn.Module):
    """epsilon_theta(y_t, t, x_p, x_s): UNet over concat(y_t, x_p) with texture cross-attention."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        widths = config.stage_widths()
        res = config.stage_resolutions
        tdb_res = set(config.tdb_resolutions)
        groups = config.norm_groups
        norm = groups if config.tdb_norm else None
        temb = config.time_embed_dim

        self.texture_encoder = TextureEncoder(config)
        self.time_embedding = TimeEmbedding(widths[0], temb)
        self.stem = nn.Conv2d(config.image_channels + config.pose_channels, widths[0], 3, padding=1)

        self.enc_blocks = nn.ModuleList()
        self.enc_tdb = nn.ModuleDict()
        self.downs = nn.ModuleList()
        ch = widths[0]
        skip_ch = []
        for i, w in enumerate(widths):
            stage = nn.ModuleList()
            for _ in range(config.num_res_blocks):
                stage.append(ResBlock(ch, w, temb, groups))
                ch = w
            self.enc_blocks.append(stage)
            if config.tdb_encoder and res[i] in tdb_res:
                self.enc_tdb[str(i)] = TextureDiffusionBlock(w, w, config.attention_heads, norm)
            skip_ch.append(ch)
            if i < len(widths) - 1:
                self.downs.append(nn.Conv2d(ch, ch, 3, stride=2, padding=1))

        self.mid = nn.ModuleList([ResBlock(ch, ch, temb, groups), ResBlock(ch, ch, temb, groups)])

        self.dec_blocks = nn.ModuleList()
        self.dec_tdb = nn.ModuleDict()
        self.ups = nn.ModuleList()
        for i in reversed(range(len(widths))):
            w = widths[i]
            stage = nn.ModuleList()
            stage.append(ResBlock(ch + skip_ch[i], w, temb, groups))
            for _ in range(config.num_res_blocks - 1):
                stage.append(ResBlock(w, w, temb, groups))
            ch = w
            self.dec_blocks.append(stage)
            if config.tdb_decoder and res[i] in tdb_res:
                self.dec_tdb[str(i)] = TextureDiffusionBlock(w, w, config.attention_heads, norm)
            if i > 0:
                self.ups.append(nn.Conv2d(ch, ch, 3, padding=1))

        out_ch = config.image_channels * (2 if config.variance_head else 1)
        self.out_norm = nn.GroupNorm(groups, ch)
        self.out = nn.Conv2d(ch, out_ch, 3, padding=1)
        nn.init.zeros_(self.out.weight)
        nn.init.zeros_(self.out.bias)

    def encode_texture(self, x_s: torch.Tensor) -> list[torch.Tensor]:
        """Multi-scale texture features, ordered fine to coarse."""
        return self.texture_encoder(x_s)

    def predict_noise(
        self, y_t: torch.Tensor, t: torch.Tensor, x_p: torch.Tensor, features: list[torch.Tensor]
    ) -> NoisePrediction:
        cfg = self.config
        if y_t.shape[2:] != x_p.shape[2:] or y_t.shape[0] != x_p.shape[0]:
            raise ValueError(f"y_t {tuple(y_t.shape)} and x_p {tuple(x_p.shape)} are not aligned")
        if x_p.shape[1] != cfg.pose_channels or y_t.shape[1] != cfg.image_channels:
            raise ValueError("channel count does not match the model config")
        if not (torch.isfinite(y_t).all() and torch.isfinite(x_p).all()):
            raise ValueError("non-finite network input")
        res = cfg.stage_resolutions
        tex = {r: f for r, f in zip([res[i] for i in self.texture_encoder.taps], features)}

        emb = self.time_embedding(torch.as_tensor(t, device=y_t.device))
        h = self.stem(torch.cat([y_t, x_p], dim=1))
        skips = []
        for i, stage in enumerate(self.enc_blocks):
            for block in stage:
                h = block(h, emb)
            if str(i) in self.enc_tdb:
                h = self.enc_tdb[str(i)](h, tex[res[i]])
            skips.append(h)
            if i < len(self.downs):
                h = self.downs[i](h)
        for block in self.mid:
            h = block(h, emb)
        n = len(self.enc_blocks)
        for j, stage in enumerate(self.dec_blocks):
            i = n - 1 - j
            h = torch.cat([h, skips[i]], dim=1)
            for block in stage:
                h = block(h, emb)
            if str(i) in self.dec_tdb:
                h = self.dec_tdb[str(i)](h, tex[res[i]])
            if i > 0:
                h = self.ups[j](F.interpolate(h, scale_factor=2, mode="nearest"))
        out = self.out(F.silu(self.out_norm(h)))
        c = cfg.image_channels
        if cfg.variance_head:
            return NoisePrediction(out[:, :c], torch.sigmoid(out[:, c:]))
        return NoisePrediction(out, None)

    def forward(self, y_t, t, x_p, x_s) -> NoisePrediction:
        return self.predict_noise(y_t, t, x_p, self.encode_texture(x_s))


def encode_texture(model: PoseTextureUNet, x_s: torch.Tensor) -> list[torch.Tensor]:
    return model.encode_texture(x_s)


def predict_noise(model: PoseTextureUNet, y_t, t, x_p, features) -> NoisePrediction:
    return model.predict_noise(y_t, t, x_p, features)
