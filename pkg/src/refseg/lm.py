"""Micro decoder-only language model with a patch-based visual front end.

Visual tokens are inserted into the token stream at placeholder positions
(LLaVA-style); there is no cross-attention path. The final-layer hidden
states (post final layer norm) are exposed so SEG-token states can be
projected into mask-decoder prompts. LoRA adapters wrap every attention
projection; with B initialized to zero they are an exact identity.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .tasks import KIND_VISUAL, KIND_VISUAL_PROMPT, TokenSequence, VisualInput, VisualPrompt


@dataclass
class LMConfig:
    vocab_size: int
    d_model: int = 128
    n_layers: int = 4
    n_heads: int = 4
    patch_size: int = 8
    image_side: int = 64
    max_len: int = 512
    lora_rank: int = 8

    def __post_init__(self):
        if self.d_model % self.n_heads != 0:
            raise ValueError("d_model must be divisible by n_heads")
        if self.image_side % self.patch_size != 0:
            raise ValueError("image_side must be divisible by patch_size")

    @property
    def patches_per_frame(self) -> int:
        return (self.image_side // self.patch_size) ** 2

    def to_dict(self) -> dict:
        return {
            "vocab_size": self.vocab_size,
            "d_model": self.d_model,
            "n_layers": self.n_layers,
            "n_heads": self.n_heads,
            "patch_size": self.patch_size,
            "image_side": self.image_side,
            "max_len": self.max_len,
            "lora_rank": self.lora_rank,
        }


class LoRALinear(nn.Module):
    """Linear layer with a low-rank residual adapter.

    effective weight = base + scaling * B @ A; adapter updates never touch
    the base weight, and B starts at zero so the adapter is an identity.
    """

    def __init__(self, d_in: int, d_out: int, rank: int, alpha: float | None = None):
        super().__init__()
        self.base = nn.Linear(d_in, d_out)
        self.rank = rank
        self.scaling = (alpha if alpha is not None else rank) / rank
        self.lora_a = nn.Parameter(torch.randn(rank, d_in) * 0.02)
        self.lora_b = nn.Parameter(torch.zeros(d_out, rank))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.base(x) + self.scaling * F.linear(F.linear(x, self.lora_a), self.lora_b)


class CausalSelfAttention(nn.Module):
    def __init__(self, cfg: LMConfig):
        super().__init__()
        self.n_heads = cfg.n_heads
        self.d_head = cfg.d_model // cfg.n_heads
        self.q_proj = LoRALinear(cfg.d_model, cfg.d_model, cfg.lora_rank)
        self.k_proj = LoRALinear(cfg.d_model, cfg.d_model, cfg.lora_rank)
        self.v_proj = LoRALinear(cfg.d_model, cfg.d_model, cfg.lora_rank)
        self.o_proj = LoRALinear(cfg.d_model, cfg.d_model, cfg.lora_rank)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        B, N, D = x.shape
        q = self.q_proj(x).view(B, N, self.n_heads, self.d_head).transpose(1, 2)
        k = self.k_proj(x).view(B, N, self.n_heads, self.d_head).transpose(1, 2)
        v = self.v_proj(x).view(B, N, self.n_heads, self.d_head).transpose(1, 2)
        att = (q @ k.transpose(-2, -1)) / math.sqrt(self.d_head)
        causal = torch.triu(torch.ones(N, N, dtype=torch.bool, device=x.device), diagonal=1)
        att = att.masked_fill(causal, float("-inf"))
        att = F.softmax(att, dim=-1)
        out = (att @ v).transpose(1, 2).contiguous().view(B, N, D)
        return self.o_proj(out)


class Block(nn.Module):
    """Pre-LN transformer block: x + attn(ln1(x)), then x + mlp(ln2(x))."""

    def __init__(self, cfg: LMConfig):
        super().__init__()
        self.ln1 = nn.LayerNorm(cfg.d_model)
        self.attn = CausalSelfAttention(cfg)
        self.ln2 = nn.LayerNorm(cfg.d_model)
        self.mlp = nn.Sequential(
            nn.Linear(cfg.d_model, 4 * cfg.d_model),
            nn.GELU(),
            nn.Linear(4 * cfg.d_model, cfg.d_model),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = x + self.attn(self.ln1(x))
        x = x + self.mlp(self.ln2(x))
        return x


def resize_frame(frame: np.ndarray, side: int) -> np.ndarray:
    """Nearest-neighbor resize of an H x W x 3 frame to side x side."""
    h, w = frame.shape[:2]
    if h == side and w == side:
        return frame
    rows = np.minimum((np.arange(side) * h / side).astype(int), h - 1)
    cols = np.minimum((np.arange(side) * w / side).astype(int), w - 1)
    return frame[rows][:, cols]


class MicroLM(nn.Module):
    def __init__(self, cfg: LMConfig):
        super().__init__()
        self.cfg = cfg
        self.tok_embed = nn.Embedding(cfg.vocab_size, cfg.d_model)
        self.pos_embed = nn.Embedding(cfg.max_len, cfg.d_model)
        self.patch_embed = nn.Linear(3 * cfg.patch_size**2, cfg.d_model)
        self.blocks = nn.ModuleList(Block(cfg) for _ in range(cfg.n_layers))
        self.ln_f = nn.LayerNorm(cfg.d_model)
        self.lm_head = nn.Linear(cfg.d_model, cfg.vocab_size)
        self.apply(self._init_weights)
        # re-zero LoRA B after the global init so adapters start as identity
        for module in self.modules():
            if isinstance(module, LoRALinear):
                nn.init.zeros_(module.lora_b)

    @staticmethod
    def _init_weights(module):
        if isinstance(module, (nn.Linear, nn.Embedding)):
            nn.init.normal_(module.weight, std=0.02)
            if isinstance(module, nn.Linear) and module.bias is not None:
                nn.init.zeros_(module.bias)

    # -- parameter groups ------------------------------------------------
    def lora_parameters(self):
        for name, p in self.named_parameters():
            if "lora_a" in name or "lora_b" in name:
                yield p

    def base_parameters(self):
        for name, p in self.named_parameters():
            if "lora_a" not in name and "lora_b" not in name:
                yield p

    # -- visual encoding --------------------------------------------------
    def _patchify(self, frame: np.ndarray) -> torch.Tensor:
        """side x side x 3 uint8 -> (n_patches, 3*P*P) float in [0,1]."""
        P = self.cfg.patch_size
        side = self.cfg.image_side
        arr = resize_frame(np.asarray(frame), side).astype(np.float32) / 255.0
        g = side // P
        patches = arr.reshape(g, P, g, P, 3).transpose(0, 2, 1, 3, 4).reshape(g * g, -1)
        return torch.from_numpy(patches).to(self.patch_embed.weight.dtype)

    def encode_visual(self, visual: VisualInput, keyframes) -> torch.Tensor:
        """Patch tokens for the given keyframes: (M * patches_per_frame, D)."""
        keyframes = list(keyframes)
        if not keyframes:
            raise ValueError("need at least one keyframe")
        chunks = [self.patch_embed(self._patchify(visual.frames[k])) for k in keyframes]
        return torch.cat(chunks, dim=0)

    def encode_visual_prompt(self, visual: VisualInput, prompt: VisualPrompt) -> torch.Tensor:
        """Mean pool of patch embeddings whose centers fall inside the prompt.

        Points pool their containing patch; a box that covers no patch center
        falls back to the patch nearest the box center.
        """
        P = self.cfg.patch_size
        side = self.cfg.image_side
        g = side // P
        tokens = self.patch_embed(self._patchify(visual.frames[prompt.frame_index]))
        centers = (np.arange(g) + 0.5) * P / side
        cx, cy = np.meshgrid(centers, centers)  # cx varies along columns
        cx, cy = cx.ravel(), cy.ravel()
        if prompt.kind == "point":
            x, y = prompt.coords
            col = min(int(x * side) // P, g - 1)
            row = min(int(y * side) // P, g - 1)
            return tokens[row * g + col]
        x0, y0, x1, y1 = prompt.coords
        inside = (cx >= x0) & (cx <= x1) & (cy >= y0) & (cy <= y1)
        if not inside.any():
            bx, by = (x0 + x1) / 2, (y0 + y1) / 2
            idx = int(np.argmin((cx - bx) ** 2 + (cy - by) ** 2))
            return tokens[idx]
        return tokens[torch.from_numpy(np.flatnonzero(inside))].mean(dim=0)

    # -- sequence model ----------------------------------------------------
    def embed_sequence(
        self,
        seq: TokenSequence,
        visual_tokens: torch.Tensor | None = None,
        prompt_tokens: torch.Tensor | None = None,
    ) -> torch.Tensor:
        """Token embeddings with visual/prompt placeholders filled in."""
        n_vis = seq.n_visual
        n_vp = seq.n_visual_prompts
        if n_vis and (visual_tokens is None or visual_tokens.shape[0] != n_vis):
            have = 0 if visual_tokens is None else visual_tokens.shape[0]
            raise ValueError(f"visual placeholder mismatch: sequence has {n_vis}, got {have}")
        if n_vp and (prompt_tokens is None or prompt_tokens.shape[0] != n_vp):
            have = 0 if prompt_tokens is None else prompt_tokens.shape[0]
            raise ValueError(f"visual prompt mismatch: sequence has {n_vp}, got {have}")
        ids = torch.tensor(seq.ids, dtype=torch.long)
        emb = self.tok_embed(ids)
        if n_vis:
            vis_idx = [i for i, k in enumerate(seq.kinds) if k == KIND_VISUAL]
            emb = emb.clone()
            emb[vis_idx] = visual_tokens.to(emb.dtype)
        if n_vp:
            vp_idx = [i for i, k in enumerate(seq.kinds) if k == KIND_VISUAL_PROMPT]
            if not n_vis:
                emb = emb.clone()
            emb[vp_idx] = prompt_tokens.to(emb.dtype)
        return emb

    def _run(self, emb: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        # emb: (B, N, D)
        N = emb.shape[1]
        if N > self.cfg.max_len:
            raise ValueError(f"sequence length {N} exceeds max_len {self.cfg.max_len}")
        pos = torch.arange(N)
        x = emb + self.pos_embed(pos)[None]
        for block in self.blocks:
            x = block(x)
        hidden = self.ln_f(x)
        logits = self.lm_head(hidden)
        return logits, hidden

    def forward(
        self,
        seq: TokenSequence,
        visual_tokens: torch.Tensor | None = None,
        prompt_tokens: torch.Tensor | None = None,
    ) -> tuple[torch.Tensor, torch.Tensor]:
        """Logits (N, vocab) and final hidden states (N, D) for one sequence."""
        emb = self.embed_sequence(seq, visual_tokens, prompt_tokens)
        logits, hidden = self._run(emb[None])
        return logits[0], hidden[0]

    def forward_embedded(self, emb_batch: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Batched forward over pre-built (B, N, D) embeddings (right padding
        is safe under the causal mask; padded logits are never read)."""
        return self._run(emb_batch)

    @torch.no_grad()
    def generate(
        self,
        prefix: TokenSequence,
        visual_tokens: torch.Tensor | None = None,
        prompt_tokens: torch.Tensor | None = None,
        max_new: int = 16,
        eos_id: int | None = None,
    ) -> list[int]:
        """Greedy decoding from the answer boundary; returns new ids only."""
        emb = self.embed_sequence(prefix, visual_tokens, prompt_tokens)
        out: list[int] = []
        for _ in range(max_new):
            logits, _ = self._run(emb[None])
            next_id = int(torch.argmax(logits[0, -1]).item())
            out.append(next_id)
            if eos_id is not None and next_id == eos_id:
                break
            if emb.shape[0] + 1 > self.cfg.max_len:
                break
            nxt = self.tok_embed(torch.tensor([next_id]))
            emb = torch.cat([emb, nxt], dim=0)
        return out

    def extract_seg_hidden(self, hidden: torch.Tensor, seg_positions) -> torch.Tensor:
        """Hidden vectors at SEG positions, in order: (n_seg, D)."""
        positions = list(seg_positions)
        for p in positions:
            if not 0 <= p < hidden.shape[0]:
                raise IndexError(f"seg position {p} out of range for length {hidden.shape[0]}")
        if not positions:
            return hidden.new_zeros((0, hidden.shape[1]))
        return hidden[positions]
