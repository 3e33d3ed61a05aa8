"""Patch scoring heads, patch weighting heads, and the final score.

Every spatial position of a branch feature map corresponds to one image
patch. A scoring head regresses one unbounded score per patch; a weighting
head produces per-patch attention in (0, 1) via a sigmoid. The final score
is the sum over branches of the weight-map-weighted mean of that branch's
score map.
"""

from __future__ import annotations

from typing import Optional, Tuple

import torch
import torch.nn as nn

from .datamodel import WEIGHT_SUM_EPS, BranchFeatures
from .errors import DegenerateWeightsError, ShapeMismatchError


class ScoringHead(nn.Module):
    """Per-patch score regression: conv3x3 -> ReLU -> conv3x3, one channel out.

    The final bias starts at 0.5 so an untrained model scores near the
    middle of the normalized MOS range.
    """

    def __init__(self, in_channels: int = 256, hidden: int = 64):
        super().__init__()
        self.conv1 = nn.Conv2d(in_channels, hidden, 3, padding=1)
        self.conv2 = nn.Conv2d(hidden, 1, 3, padding=1)
        with torch.no_grad():
            self.conv2.bias.fill_(0.5)

    def forward(self, feat: torch.Tensor) -> torch.Tensor:
        return self.conv2(torch.relu(self.conv1(feat)))

    def score_map(self, branch: BranchFeatures) -> torch.Tensor:
        """Per-patch scores (1xpxp) for one branch feature map."""
        return self.forward(branch.feat.unsqueeze(0)).squeeze(0)


class DualWeightingHead(nn.Module):
    """Joint patch weighting over both branches.

    The two branch feature maps are concatenated on the channel axis and
    mapped through conv3x3 -> ReLU -> conv1x1 -> sigmoid into a two-channel
    map: channel 0 weights the perception scores, channel 1 the fidelity
    scores.
    """

    def __init__(self, in_channels: int = 256, hidden: int = 64):
        super().__init__()
        self.conv3 = nn.Conv2d(2 * in_channels, hidden, 3, padding=1)
        self.conv1 = nn.Conv2d(hidden, 2, 1)

    def forward(self, perception_feat: torch.Tensor, fidelity_feat: torch.Tensor) -> torch.Tensor:
        if perception_feat.shape != fidelity_feat.shape:
            raise ShapeMismatchError(
                f"branch shapes differ: {tuple(perception_feat.shape)} vs {tuple(fidelity_feat.shape)}"
            )
        x = torch.cat([perception_feat, fidelity_feat], dim=-3)
        return torch.sigmoid(self.conv1(torch.relu(self.conv3(x))))

    def weight_maps(
        self, perception: BranchFeatures, fidelity: BranchFeatures
    ) -> Tuple[torch.Tensor, torch.Tensor]:
        """(perception weights, fidelity weights), each 1xpxp in (0, 1)."""
        w = self.forward(perception.feat.unsqueeze(0), fidelity.feat.unsqueeze(0)).squeeze(0)
        return w[0:1], w[1:2]


class SingleWeightingHead(nn.Module):
    """One-channel weighting variant for single-branch configurations."""

    def __init__(self, in_channels: int = 256, hidden: int = 64):
        super().__init__()
        self.conv3 = nn.Conv2d(in_channels, hidden, 3, padding=1)
        self.conv1 = nn.Conv2d(hidden, 1, 1)

    def forward(self, feat: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self.conv1(torch.relu(self.conv3(feat))))


def _weighted_mean_batched(scores: torch.Tensor, weights: torch.Tensor) -> torch.Tensor:
    if scores.shape != weights.shape:
        raise ShapeMismatchError(
            f"score map {tuple(scores.shape)} != weight map {tuple(weights.shape)}"
        )
    dims = tuple(range(1, scores.ndim))
    wsum = weights.sum(dim=dims)
    if bool((wsum <= WEIGHT_SUM_EPS).any()):
        raise DegenerateWeightsError(
            f"weight map sum {float(wsum.min())} <= {WEIGHT_SUM_EPS}; weighted mean undefined"
        )
    return (scores * weights).sum(dim=dims) / wsum


def final_score_batched(
    perception_scores: Optional[torch.Tensor],
    fidelity_scores: Optional[torch.Tensor],
    perception_weights: Optional[torch.Tensor],
    fidelity_weights: Optional[torch.Tensor],
) -> torch.Tensor:
    """Batched final score; a branch passes (None, None) when disabled."""
    total: Optional[torch.Tensor] = None
    for s, w in ((perception_scores, perception_weights), (fidelity_scores, fidelity_weights)):
        if (s is None) != (w is None):
            raise ShapeMismatchError("a branch must supply both maps or neither")
        if s is None:
            continue
        term = _weighted_mean_batched(s, w)
        total = term if total is None else total + term
    if total is None:
        raise ShapeMismatchError("at least one branch must contribute maps")
    return total


def final_score(
    s_perception: torch.Tensor,
    s_fidelity: torch.Tensor,
    w_perception: torch.Tensor,
    w_fidelity: torch.Tensor,
) -> float:
    """Sum of the two weighted patch-score means for one sample.

    Each term divides the Hadamard product's sum by its weight-map sum, so
    rescaling a weight map by any positive constant leaves its term
    unchanged. Raises :class:`DegenerateWeightsError` when a weight map sum
    falls below the 1e-8 guard (impossible for true sigmoid outputs; guards
    imported maps).
    """
    return float(
        final_score_batched(
            s_perception.unsqueeze(0),
            s_fidelity.unsqueeze(0),
            w_perception.unsqueeze(0),
            w_fidelity.unsqueeze(0),
        ).squeeze(0)
    )
