"""Perception stack: frame encoder, prompt-conditioned mask decoder, and a
memory module that propagates masks across frames by cross-attention.

The decoder is driven either by a projected SEG hidden state (keyframes) or
by a learned track token over memory-fused features (all other frames).
Memory entries hold frame features gated elementwise by their downsampled
mask, so attention only matches against object evidence.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .lm import resize_frame


@dataclass
class SamConfig:
    input_side: int = 64
    stride: int = 4
    channels: int = 64
    lm_dim: int = 128
    memory_capacity: int = 5
    decoder_rounds: int = 2
    n_heads: int = 4

    @property
    def grid(self) -> int:
        return self.input_side // self.stride

    def to_dict(self) -> dict:
        return {
            "input_side": self.input_side,
            "stride": self.stride,
            "channels": self.channels,
            "lm_dim": self.lm_dim,
            "memory_capacity": self.memory_capacity,
            "decoder_rounds": self.decoder_rounds,
            "n_heads": self.n_heads,
        }


@dataclass
class FrameFeatures:
    fmap: torch.Tensor  # (C, h, w)
    stride: int

    def __post_init__(self):
        if self.fmap.ndim != 3:
            raise ValueError(f"feature map must be C x h x w, got {tuple(self.fmap.shape)}")


@dataclass
class MemoryEntry:
    features: FrameFeatures
    mask: np.ndarray  # (H, W) binary
    frame_index: int


@dataclass(frozen=True)
class MemoryBank:
    """Bounded FIFO of memory entries; update returns a new bank."""

    entries: tuple = ()
    capacity: int = 5

    def __len__(self) -> int:
        return len(self.entries)


def update_memory(bank: MemoryBank, entry: MemoryEntry) -> MemoryBank:
    """Append an entry, evicting the oldest past capacity (value semantics)."""
    entries = bank.entries + (entry,)
    if len(entries) > bank.capacity:
        entries = entries[len(entries) - bank.capacity :]
    return MemoryBank(entries=entries, capacity=bank.capacity)


def build_2d_sincos(h: int, w: int, dim: int) -> torch.Tensor:
    """Fixed 2-D sin/cos positional encoding, shape (h*w, dim)."""
    if dim % 4 != 0:
        raise ValueError("positional dim must be divisible by 4")
    quarter = dim // 4
    omega = 1.0 / (100.0 ** (torch.arange(quarter, dtype=torch.float32) / quarter))
    ys = torch.arange(h, dtype=torch.float32)[:, None] * omega[None]
    xs = torch.arange(w, dtype=torch.float32)[:, None] * omega[None]
    pe_y = torch.cat([torch.sin(ys), torch.cos(ys)], dim=1)  # (h, dim/2)
    pe_x = torch.cat([torch.sin(xs), torch.cos(xs)], dim=1)  # (w, dim/2)
    pe = torch.cat(
        [
            pe_y[:, None, :].expand(h, w, dim // 2),
            pe_x[None, :, :].expand(h, w, dim // 2),
        ],
        dim=2,
    )
    return pe.reshape(h * w, dim)


class Attention(nn.Module):
    """Plain multi-head attention with separate query/key/value inputs."""

    def __init__(self, dim: int, n_heads: int):
        super().__init__()
        self.n_heads = n_heads
        self.d_head = dim // n_heads
        self.q_proj = nn.Linear(dim, dim)
        self.k_proj = nn.Linear(dim, dim)
        self.v_proj = nn.Linear(dim, dim)
        self.o_proj = nn.Linear(dim, dim)

    def forward(self, q: torch.Tensor, k: torch.Tensor, v: torch.Tensor) -> torch.Tensor:
        nq, dim = q.shape
        nk = k.shape[0]
        qh = self.q_proj(q).view(nq, self.n_heads, self.d_head).transpose(0, 1)
        kh = self.k_proj(k).view(nk, self.n_heads, self.d_head).transpose(0, 1)
        vh = self.v_proj(v).view(nk, self.n_heads, self.d_head).transpose(0, 1)
        att = torch.softmax(qh @ kh.transpose(-2, -1) / math.sqrt(self.d_head), dim=-1)
        out = (att @ vh).transpose(0, 1).reshape(nq, dim)
        return self.o_proj(out)


class FrameEncoder(nn.Module):
    """3-layer conv stack, net stride 4 (stride-2, stride-2, stride-1)."""

    def __init__(self, cfg: SamConfig):
        super().__init__()
        c = cfg.channels
        self.net = nn.Sequential(
            nn.Conv2d(3, c // 2, 3, stride=2, padding=1),
            nn.ReLU(),
            nn.Conv2d(c // 2, c, 3, stride=2, padding=1),
            nn.ReLU(),
            nn.Conv2d(c, c, 3, stride=1, padding=1),
        )

    def forward(self, frame: torch.Tensor) -> torch.Tensor:
        return self.net(frame[None])[0]


class TwoWayBlock(nn.Module):
    """One round of token self-attention, token->image and image->token
    cross-attention with an MLP in between (SAM-style two-way decoding)."""

    def __init__(self, dim: int, n_heads: int):
        super().__init__()
        self.self_attn = Attention(dim, n_heads)
        self.ln_self = nn.LayerNorm(dim)
        self.t2i = Attention(dim, n_heads)
        self.ln_t2i = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(nn.Linear(dim, dim * 2), nn.GELU(), nn.Linear(dim * 2, dim))
        self.ln_mlp = nn.LayerNorm(dim)
        self.i2t = Attention(dim, n_heads)
        self.ln_i2t = nn.LayerNorm(dim)

    def forward(self, tokens, img, pe):
        tokens = self.ln_self(tokens + self.self_attn(tokens, tokens, tokens))
        tokens = self.ln_t2i(tokens + self.t2i(tokens, img + pe, img))
        tokens = self.ln_mlp(tokens + self.mlp(tokens))
        img = self.ln_i2t(img + self.i2t(img + pe, tokens, tokens))
        return tokens, img


class MaskDecoder(nn.Module):
    """Two-way attention between the prompt token and image features, then a
    per-pixel logit head. The mask weights are derived from the updated
    prompt token itself, so the output cannot become prompt-independent."""

    def __init__(self, cfg: SamConfig):
        super().__init__()
        c = cfg.channels
        self.cfg = cfg
        self.blocks = nn.ModuleList(
            TwoWayBlock(c, cfg.n_heads) for _ in range(cfg.decoder_rounds)
        )
        self.upscale = nn.Sequential(
            nn.ConvTranspose2d(c, c // 2, 2, stride=2),
            nn.GELU(),
            nn.ConvTranspose2d(c // 2, c // 4, 2, stride=2),
        )
        self.hyper = nn.Sequential(nn.Linear(c, c), nn.GELU(), nn.Linear(c, c // 4))
        self.register_buffer("pe", build_2d_sincos(cfg.grid, cfg.grid, c), persistent=False)

    def forward(self, fmap: torch.Tensor, prompt: torch.Tensor) -> torch.Tensor:
        """(C, h, w) features + (C,) prompt -> (H, W) mask logits."""
        c, h, w = fmap.shape
        img = fmap.reshape(c, h * w).T
        pe = self.pe if h * w == self.pe.shape[0] else build_2d_sincos(h, w, c)
        tokens = prompt[None]
        for block in self.blocks:
            tokens, img = block(tokens, img, pe)
        up = self.upscale(img.T.reshape(1, c, h, w))[0]  # (c/4, H, W)
        weights = self.hyper(tokens[0])
        return torch.einsum("chw,c->hw", up, weights)


class MemoryAttention(nn.Module):
    """Cross-attention of current frame features over mask-gated memory."""

    def __init__(self, cfg: SamConfig):
        super().__init__()
        c = cfg.channels
        self.cfg = cfg
        self.attn = Attention(c, cfg.n_heads)
        self.ln = nn.LayerNorm(c)
        self.track_token = nn.Parameter(torch.randn(c) * 0.02)
        self.register_buffer("pe", build_2d_sincos(cfg.grid, cfg.grid, c), persistent=False)

    def gated_entry(self, entry: MemoryEntry) -> torch.Tensor:
        """Entry features gated by its downsampled mask: (h*w, C)."""
        fmap = entry.features.fmap
        c, h, w = fmap.shape
        mask = torch.as_tensor(entry.mask, dtype=fmap.dtype)
        pooled = F.adaptive_max_pool2d(mask[None, None], (h, w))[0, 0]
        return (fmap * pooled[None]).reshape(c, h * w).T

    def fuse(self, features: FrameFeatures, bank: MemoryBank) -> torch.Tensor:
        if len(bank) == 0:
            raise RuntimeError("no memory to propagate from")
        fmap = features.fmap
        c, h, w = fmap.shape
        pe = self.pe if h * w == self.pe.shape[0] else build_2d_sincos(h, w, c)
        q = fmap.reshape(c, h * w).T
        keys = torch.cat([self.gated_entry(e) + pe for e in bank.entries], dim=0)
        vals = torch.cat([self.gated_entry(e) for e in bank.entries], dim=0)
        out = self.attn(q + pe, keys, vals)
        return self.ln(q + out).T.reshape(c, h, w)


class SegProjector(nn.Module):
    """Affine map from LM hidden size to decoder prompt space."""

    def __init__(self, cfg: SamConfig):
        super().__init__()
        self.linear = nn.Linear(cfg.lm_dim, cfg.channels)

    def forward(self, seg_hidden: torch.Tensor) -> torch.Tensor:
        return self.linear(seg_hidden)


class SamStack(nn.Module):
    """Encoder + SEG projector + mask decoder + memory, as one module so
    freeze policies and checkpoints can address the pieces by name."""

    def __init__(self, cfg: SamConfig):
        super().__init__()
        self.cfg = cfg
        self.encoder = FrameEncoder(cfg)
        self.projector = SegProjector(cfg)
        self.decoder = MaskDecoder(cfg)
        self.memory = MemoryAttention(cfg)

    def encode_frame(self, frame: np.ndarray) -> FrameFeatures:
        arr = resize_frame(np.asarray(frame), self.cfg.input_side).astype(np.float32) / 255.0
        tens = torch.from_numpy(arr.transpose(2, 0, 1)).to(
            next(self.encoder.parameters()).dtype
        )
        return FrameFeatures(self.encoder(tens), stride=self.cfg.stride)

    def project_seg(self, seg_hidden: torch.Tensor) -> torch.Tensor:
        return self.projector(seg_hidden)

    def decode_mask(self, features: FrameFeatures, prompt: torch.Tensor):
        """Prompt-driven decode -> (logits (H, W), binary mask (H, W))."""
        logits = self.decoder(features.fmap, prompt)
        return logits, (logits > 0).to(torch.uint8).cpu().numpy()

    def propagate_mask(self, features: FrameFeatures, bank: MemoryBank):
        """Memory-driven decode for non-keyframes."""
        fused = self.memory.fuse(features, bank)
        logits = self.decoder(fused, self.memory.track_token)
        return logits, (logits > 0).to(torch.uint8).cpu().numpy()
