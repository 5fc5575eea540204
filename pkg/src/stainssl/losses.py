"""Objective components for two-view semi-supervised training.

The batch loss is a sum of three parts: cross-entropy on (mixed) labeled
samples, a squared-L2 consistency term on (mixed) unlabeled samples scaled
by 1/C (less sensitive to wrong pseudo-labels than cross-entropy), and a
hinge contrastive term that pulls a sample's H and E features together
while pushing them away from another sample's E feature by a margin.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch

from .errors import InvalidInputError

PROB_FLOOR = 1e-12


@dataclass
class SslHyperParams:
    """Weights and knobs of the semi-supervised objective."""

    margin: float = 37.0
    temperature: float = 0.5
    num_augmentations: int = 2
    mixup_alpha: float = 2.0
    lambda_unlabeled: float = 7.5
    lambda_contrastive: float = 0.1

    def __post_init__(self):
        if self.margin < 0:
            raise InvalidInputError("margin must be non-negative")
        if self.temperature <= 0:
            raise InvalidInputError("temperature must be positive")
        if self.num_augmentations < 1:
            raise InvalidInputError("num_augmentations must be at least 1")
        if self.mixup_alpha <= 0:
            raise InvalidInputError("mixup_alpha must be positive")
        if self.lambda_unlabeled < 0 or self.lambda_contrastive < 0:
            raise InvalidInputError("loss weights must be non-negative")


def contrastive_loss(
    f_h_i: torch.Tensor, f_e_i: torch.Tensor, f_e_k: torch.Tensor, margin: float
) -> torch.Tensor:
    """Hinge on the positive-minus-negative feature distance gap.

    max(||f_h_i - f_e_i|| - ||f_h_i - f_e_k|| + margin, 0) where f_e_k is
    the E feature of a different sample.
    """
    if f_h_i.shape != f_e_i.shape or f_h_i.shape != f_e_k.shape:
        raise InvalidInputError(
            f"feature dimensions differ: {tuple(f_h_i.shape)}, "
            f"{tuple(f_e_i.shape)}, {tuple(f_e_k.shape)}"
        )
    pos = torch.sqrt(torch.sum((f_h_i - f_e_i) ** 2))
    neg = torch.sqrt(torch.sum((f_h_i - f_e_k) ** 2))
    return torch.clamp(pos - neg + margin, min=0.0)


def contrastive_terms(f_h: torch.Tensor, f_e: torch.Tensor, margin: float) -> torch.Tensor:
    """Per-sample contrastive terms over a batch.

    The negative for sample i is sample (i+1) mod B: one negative per
    anchor, deterministic given batch order.
    """
    if f_h.ndim != 2 or f_h.shape != f_e.shape:
        raise InvalidInputError(
            f"expected matching (batch, dim) features, got {tuple(f_h.shape)} and {tuple(f_e.shape)}"
        )
    f_e_neg = torch.roll(f_e, shifts=-1, dims=0)
    pos = torch.sqrt(torch.sum((f_h - f_e) ** 2, dim=1))
    neg = torch.sqrt(torch.sum((f_h - f_e_neg) ** 2, dim=1))
    return torch.clamp(pos - neg + margin, min=0.0)


def average_predictions(preds: torch.Tensor | list) -> torch.Tensor:
    """Elementwise mean of K softmax predictions; stays on the simplex."""
    if isinstance(preds, (list, tuple)):
        if len(preds) == 0:
            raise InvalidInputError("cannot average an empty prediction list")
        preds = torch.stack(list(preds))
    if preds.ndim != 2 or preds.shape[0] < 1:
        raise InvalidInputError(f"expected (K, C) predictions, got {tuple(preds.shape)}")
    return preds.mean(dim=0)


def sharpen(y: torch.Tensor, temperature: float) -> torch.Tensor:
    """Lower the entropy of a distribution: y**(1/T), renormalized.

    Zero entries stay exactly zero (the continuous limit of 0**(1/T)); the
    argmax never changes, and for T < 1 the entropy never increases.
    """
    if temperature <= 0:
        raise InvalidInputError("temperature must be positive")
    powered = y ** (1.0 / temperature)
    return powered / powered.sum(dim=-1, keepdim=True)


def mixup(x_i, x_j, y_i, y_j, lam_raw: float, i_is_labeled: bool = True):
    """Convex combination of two samples with the dominant-side coefficient.

    lam' = max(lam, 1 - lam) keeps the mix closer to x_i, so the mixed
    sample inherits x_i's labeled/unlabeled status.  The same lam' applies
    to every array in the sample (H and E images alike) and to the labels.
    """
    if not 0.0 <= lam_raw <= 1.0:
        raise InvalidInputError(f"lambda must be in [0, 1], got {lam_raw}")
    if x_i.shape != x_j.shape or y_i.shape != y_j.shape:
        raise InvalidInputError("mixup requires matching sample and label shapes")
    lam = max(lam_raw, 1.0 - lam_raw)
    x_mixed = lam * x_i + (1.0 - lam) * x_j
    y_mixed = lam * y_i + (1.0 - lam) * y_j
    return x_mixed, y_mixed, i_is_labeled


def total_loss(
    preds_labeled: torch.Tensor,
    targets_labeled: torch.Tensor,
    preds_unlabeled: torch.Tensor | None,
    targets_unlabeled: torch.Tensor | None,
    contrastive: torch.Tensor | None,
    params: SslHyperParams,
) -> tuple[torch.Tensor, dict]:
    """Combined batch loss with a per-term breakdown.

    cross-entropy over L' (natural log, probability floor 1e-12)
    + lambda_u * mean squared L2 over U' scaled by 1/C
    + lambda_c * sum of contrastive terms.
    """
    if preds_labeled is None or preds_labeled.numel() == 0:
        raise InvalidInputError("the labeled set of a batch must be non-empty")
    if preds_labeled.shape != targets_labeled.shape:
        raise InvalidInputError("labeled predictions/targets shape mismatch")
    ce = -(targets_labeled * torch.log(torch.clamp(preds_labeled, min=PROB_FLOOR))).sum(
        dim=1
    ).mean()
    if preds_unlabeled is not None and preds_unlabeled.numel() > 0:
        if preds_unlabeled.shape != targets_unlabeled.shape:
            raise InvalidInputError("unlabeled predictions/targets shape mismatch")
        n_classes = preds_unlabeled.shape[1]
        l2 = ((targets_unlabeled - preds_unlabeled) ** 2).sum(dim=1).mean() / n_classes
    else:
        l2 = torch.zeros((), dtype=preds_labeled.dtype)
    ct = (
        contrastive.sum()
        if contrastive is not None and contrastive.numel() > 0
        else torch.zeros((), dtype=preds_labeled.dtype)
    )
    total = ce + params.lambda_unlabeled * l2 + params.lambda_contrastive * ct
    breakdown = {
        "ce": float(ce.detach()),
        "l2": float(params.lambda_unlabeled * l2.detach()),
        "contrastive": float(params.lambda_contrastive * ct.detach()),
        "total": float(total.detach()),
    }
    return total, breakdown
