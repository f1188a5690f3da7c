"""Joint training losses: next-token text cross-entropy plus per-mask
binary cross-entropy and dice, summed unweighted by default."""

from __future__ import annotations

import torch
import torch.nn.functional as F

from .tasks import TokenSequence

DICE_EPS = 1.0


def text_loss(logits: torch.Tensor, seq: TokenSequence, return_count: bool = False):
    """Mean next-token cross-entropy over positions with loss_mask set,
    shifted by one: position i is predicted from logits at i-1.

    A sequence with no masked positions yields loss 0; request the count to
    detect that degenerate case.
    """
    targets = [i for i, m in enumerate(seq.loss_mask) if m and i > 0]
    if not targets:
        zero = logits.new_zeros(())
        return (zero, 0) if return_count else zero
    ids = torch.tensor([seq.ids[i] for i in targets], dtype=torch.long, device=logits.device)
    pred = logits[[i - 1 for i in targets]]
    loss = F.cross_entropy(pred, ids)
    return (loss, len(targets)) if return_count else loss


def _as_float_mask(gt, like: torch.Tensor) -> torch.Tensor:
    if isinstance(gt, torch.Tensor):
        return gt.to(like.dtype)
    return torch.as_tensor(gt, dtype=like.dtype)


def mask_ce_loss(logits: torch.Tensor, gt) -> torch.Tensor:
    """Mean per-pixel binary cross-entropy on sigmoid(logits)."""
    target = _as_float_mask(gt, logits)
    if target.shape != logits.shape:
        raise ValueError(f"shape mismatch: {tuple(logits.shape)} vs {tuple(target.shape)}")
    return F.binary_cross_entropy_with_logits(logits, target)


def dice_loss(logits: torch.Tensor, gt, eps: float = DICE_EPS) -> torch.Tensor:
    """1 - (2*sum(p*g) + eps) / (sum(p) + sum(g) + eps) with p = sigmoid."""
    target = _as_float_mask(gt, logits)
    if target.shape != logits.shape:
        raise ValueError(f"shape mismatch: {tuple(logits.shape)} vs {tuple(target.shape)}")
    p = torch.sigmoid(logits)
    num = 2.0 * (p * target).sum() + eps
    den = p.sum() + target.sum() + eps
    return 1.0 - num / den


def mask_loss(logits: torch.Tensor, gt) -> torch.Tensor:
    return mask_ce_loss(logits, gt) + dice_loss(logits, gt)


def total_loss(
    text_logits: torch.Tensor,
    seq: TokenSequence,
    mask_pairs=(),
    text_weight: float = 1.0,
    mask_weight: float = 1.0,
) -> torch.Tensor:
    """Per-sample joint loss: text CE plus the mean of (CE + dice) over the
    sample's decoded masks. Chat samples pass no mask pairs."""
    loss = text_weight * text_loss(text_logits, seq)
    mask_pairs = list(mask_pairs)
    if mask_pairs:
        per_mask = torch.stack([mask_loss(lg, gt) for lg, gt in mask_pairs])
        loss = loss + mask_weight * per_mask.mean()
    return loss
