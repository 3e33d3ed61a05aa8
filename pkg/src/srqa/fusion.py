"""Adaptive fusion of global/local features plus scale-factor conditioning.

Each assessment branch owns one fusion module instance with independent
parameters. The module merges the branch's global and local feature maps
into a single 256-channel map, embeds the scalar upscaling factor into a
one-channel spatial map, concatenates it, and refines the result with a
small conv stack.

Fusion comes in four modes:

- ``adaptive``: the two maps are stacked along a new axis and collapsed by
  a learned 2->1 linear map (weights shared across channels and positions
  by default; a per-channel variant is available) followed by ReLU.
- ``concat``: channel concatenation followed by a learned 1x1 reduction
  and ReLU.
- ``vit_only``: only the global map is used; it passes through a learned
  scalar affine (the 2->1 map restricted to its remaining input) and ReLU.
- ``resnet_only``: only the local map is used, through a plain ReLU bypass.

The two single-source modes are deliberately not mirror images (one keeps
the degenerate learned map, the other drops it) so that every fusion mode
has a distinct trainable-parameter count.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import torch
import torch.nn as nn

from .datamodel import FUSION_MODES, BranchFeatures, FeatureBundle
from .errors import RangeError, ShapeMismatchError


@dataclass(frozen=True)
class ScaleEmbedding:
    """One-channel spatial map derived from the scalar upscaling factor."""

    feat: torch.Tensor

    def __post_init__(self) -> None:
        if self.feat.ndim != 3 or self.feat.shape[0] != 1 or self.feat.shape[1] != self.feat.shape[2]:
            raise ShapeMismatchError(f"scale embedding must be 1xpxp, got {tuple(self.feat.shape)}")
        if not torch.isfinite(self.feat).all():
            raise RangeError("scale embedding contains non-finite values")


class PairFusion(nn.Module):
    """Learned 2->1 collapse of stacked global/local maps, then ReLU.

    With ``per_channel=False`` a single (w_g, w_l, b) triple is shared by
    every channel and position; with ``per_channel=True`` each channel owns
    its own triple. Initialized to an equal 0.5/0.5 blend with zero bias.
    """

    def __init__(self, channels: int, per_channel: bool = False):
        super().__init__()
        self.per_channel = per_channel
        if per_channel:
            self.weight = nn.Parameter(torch.full((channels, 2), 0.5))
            self.bias = nn.Parameter(torch.zeros(channels))
        else:
            self.weight = nn.Parameter(torch.full((2,), 0.5))
            self.bias = nn.Parameter(torch.zeros(1))

    def forward(self, global_feat: torch.Tensor, local_feat: torch.Tensor) -> torch.Tensor:
        if global_feat.shape != local_feat.shape:
            raise ShapeMismatchError(
                f"global {tuple(global_feat.shape)} != local {tuple(local_feat.shape)}"
            )
        if self.per_channel:
            w = self.weight[:, :, None, None]
            b = self.bias[:, None, None]
            z = w[:, 0] * global_feat + w[:, 1] * local_feat + b
        else:
            z = self.weight[0] * global_feat + self.weight[1] * local_feat + self.bias
        return torch.relu(z)


class ConcatFusion(nn.Module):
    """Channel concatenation followed by a learned 1x1 reduction and ReLU."""

    def __init__(self, channels: int):
        super().__init__()
        self.reduce = nn.Conv2d(2 * channels, channels, 1)

    def forward(self, global_feat: torch.Tensor, local_feat: torch.Tensor) -> torch.Tensor:
        if global_feat.shape != local_feat.shape:
            raise ShapeMismatchError(
                f"global {tuple(global_feat.shape)} != local {tuple(local_feat.shape)}"
            )
        return torch.relu(self.reduce(torch.cat([global_feat, local_feat], dim=-3)))


class GlobalOnlyFusion(nn.Module):
    """Retained-path calibration for vit_only mode: ReLU(w*x + b)."""

    def __init__(self):
        super().__init__()
        self.weight = nn.Parameter(torch.ones(1))
        self.bias = nn.Parameter(torch.zeros(1))

    def forward(self, global_feat: torch.Tensor, local_feat: Optional[torch.Tensor]) -> torch.Tensor:
        return torch.relu(self.weight * global_feat + self.bias)


class LocalOnlyFusion(nn.Module):
    """Plain bypass for resnet_only mode: ReLU(x), no parameters."""

    def forward(self, global_feat: Optional[torch.Tensor], local_feat: torch.Tensor) -> torch.Tensor:
        return torch.relu(local_feat)


class ScaleEmbedder(nn.Module):
    """Scalar scale factor -> dense -> ReLU -> dense -> 1xpxp map.

    The raw factor is fed unnormalized; the two dense layers can absorb any
    affine rescaling.
    """

    def __init__(self, spatial: int = 28, hidden: int = 256):
        super().__init__()
        self.spatial = spatial
        self.fc1 = nn.Linear(1, hidden)
        self.fc2 = nn.Linear(hidden, spatial * spatial)

    def forward(self, scales: torch.Tensor) -> torch.Tensor:
        if scales.ndim != 1:
            raise ShapeMismatchError(f"expected a 1-D batch of scale factors, got {tuple(scales.shape)}")
        if bool((scales <= 0).any()):
            raise RangeError("scale factors must be positive")
        z = torch.relu(self.fc1(scales.reshape(-1, 1)))
        z = self.fc2(z)
        return z.reshape(-1, 1, self.spatial, self.spatial)


class AdaptiveFusionModule(nn.Module):
    """One branch's fusion stack: merge features, inject scale, refine.

    ``forward`` takes the branch's (possibly absent) global and local maps
    plus the batch of scale factors and produces the branch feature map
    consumed by the regression heads.
    """

    def __init__(
        self,
        mode: str = "adaptive",
        use_scale: bool = True,
        channels: int = 256,
        spatial: int = 28,
        scale_hidden: int = 256,
        per_channel: bool = False,
    ):
        super().__init__()
        if mode not in FUSION_MODES:
            raise ValueError(f"fusion mode must be one of {FUSION_MODES}, got {mode!r}")
        self.mode = mode
        self.use_scale = use_scale
        self.channels = channels
        self.spatial = spatial
        if mode == "adaptive":
            self.fusion: nn.Module = PairFusion(channels, per_channel=per_channel)
        elif mode == "concat":
            self.fusion = ConcatFusion(channels)
        elif mode == "vit_only":
            self.fusion = GlobalOnlyFusion()
        else:
            self.fusion = LocalOnlyFusion()
        self.embedder = ScaleEmbedder(spatial, scale_hidden) if use_scale else None
        in_ch = channels + 1 if use_scale else channels
        self.conv1 = nn.Conv2d(in_ch, channels, 3, padding=1)
        self.conv2 = nn.Conv2d(channels, channels, 3, padding=1)

    def fuse(self, global_feat: Optional[torch.Tensor], local_feat: Optional[torch.Tensor]) -> torch.Tensor:
        if self.mode in ("adaptive", "concat") and (global_feat is None or local_feat is None):
            raise ShapeMismatchError(f"{self.mode} fusion requires both feature maps")
        if self.mode == "vit_only" and global_feat is None:
            raise ShapeMismatchError("vit_only fusion requires the global map")
        if self.mode == "resnet_only" and local_feat is None:
            raise ShapeMismatchError("resnet_only fusion requires the local map")
        return self.fusion(global_feat, local_feat)

    def condition(self, fused: torch.Tensor, scales: Optional[torch.Tensor]) -> torch.Tensor:
        if self.use_scale:
            if scales is None:
                raise ShapeMismatchError("scale conditioning is enabled but no scales were given")
            emb = self.embedder(scales)
            if emb.shape[-2:] != fused.shape[-2:]:
                raise ShapeMismatchError(
                    f"embedding spatial {tuple(emb.shape[-2:])} != features {tuple(fused.shape[-2:])}"
                )
            fused = torch.cat([fused, emb], dim=-3)
        return self.conv2(torch.relu(self.conv1(fused)))

    def forward(
        self,
        global_feat: Optional[torch.Tensor],
        local_feat: Optional[torch.Tensor],
        scales: Optional[torch.Tensor],
    ) -> torch.Tensor:
        return self.condition(self.fuse(global_feat, local_feat), scales)

    # ---- single-sample contract surface -------------------------------------

    def fuse_global_local(self, bundle: FeatureBundle) -> torch.Tensor:
        """Merge one bundle's global and local maps into a 256xpxp map."""
        return self.fuse(bundle.global_feat.unsqueeze(0), bundle.local_feat.unsqueeze(0)).squeeze(0)

    def embed_scale(self, scale_factor: float) -> ScaleEmbedding:
        """Embed one positive scale factor into a 1xpxp map."""
        if self.embedder is None:
            raise ShapeMismatchError("this module was built without scale conditioning")
        if not scale_factor > 0:
            raise RangeError(f"scale factor must be positive, got {scale_factor}")
        feat = self.embedder(torch.tensor([float(scale_factor)]))
        return ScaleEmbedding(feat=feat.squeeze(0))

    def condition_on_scale(
        self, fused: torch.Tensor, emb: Optional[ScaleEmbedding], branch_tag: str
    ) -> BranchFeatures:
        """Concatenate the scale map (when enabled) and refine with convs."""
        x = fused.unsqueeze(0)
        if self.use_scale:
            if emb is None:
                raise ShapeMismatchError("scale conditioning is enabled but no embedding was given")
            if emb.feat.shape[-2:] != fused.shape[-2:]:
                raise ShapeMismatchError(
                    f"embedding spatial {tuple(emb.feat.shape[-2:])} != features {tuple(fused.shape[-2:])}"
                )
            x = torch.cat([x, emb.feat.unsqueeze(0)], dim=1)
        out = self.conv2(torch.relu(self.conv1(x)))
        return BranchFeatures(feat=out.squeeze(0), branch_tag=branch_tag)
