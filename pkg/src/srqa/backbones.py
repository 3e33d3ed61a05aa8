"""Frozen pretrained feature extractors and the channel-reduction stage.

Two backbone families produce multi-stage feature maps for a 224x224 input:
a ViT-B/8-style transformer yielding five 768x28x28 stage maps, and a
ResNet-50-style CNN yielding four stage maps at its native channel counts
and resolutions. A fixture mode swaps in small randomly-initialized
networks with identical output shapes so tests run fast on CPU.

SR and LR images pass through the same backbone instances; the reduction
convolutions are likewise shared between the two images (the extraction
process is one and the same for both).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional, Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from .datamodel import FeatureBundle
from .errors import ShapeMismatchError, WeightLoadError

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)

INPUT_SIZE = 224
PATCH_GRID = 28  # 224 / 8
VIT_STAGE_CHANNELS = 768
N_VIT_STAGES = 5
RESNET_STAGE_CHANNELS = (256, 512, 1024, 2048)
RESNET_STAGE_SIZES = (56, 28, 14, 7)
REDUCED_CHANNELS = 256
CONCAT_CHANNELS = 3840  # 5 * 768 == 256 + 512 + 1024 + 2048

assert N_VIT_STAGES * VIT_STAGE_CHANNELS == CONCAT_CHANNELS
assert sum(RESNET_STAGE_CHANNELS) == CONCAT_CHANNELS


@dataclass(frozen=True)
class BackboneOutputs:
    """Raw stage maps for one image: 5 ViT stages and 4 ResNet stages."""

    vit_stages: List[torch.Tensor]
    resnet_stages: List[torch.Tensor]

    def __post_init__(self) -> None:
        if len(self.vit_stages) != N_VIT_STAGES:
            raise ShapeMismatchError(f"expected {N_VIT_STAGES} ViT stages, got {len(self.vit_stages)}")
        for i, t in enumerate(self.vit_stages):
            if t.shape != (VIT_STAGE_CHANNELS, PATCH_GRID, PATCH_GRID):
                raise ShapeMismatchError(f"ViT stage {i} has shape {tuple(t.shape)}")
        if len(self.resnet_stages) != len(RESNET_STAGE_CHANNELS):
            raise ShapeMismatchError(
                f"expected {len(RESNET_STAGE_CHANNELS)} ResNet stages, got {len(self.resnet_stages)}"
            )
        for i, (t, c, s) in enumerate(
            zip(self.resnet_stages, RESNET_STAGE_CHANNELS, RESNET_STAGE_SIZES)
        ):
            if t.shape != (c, s, s):
                raise ShapeMismatchError(
                    f"ResNet stage {i} has shape {tuple(t.shape)}, expected {(c, s, s)}"
                )


def _check_input(images: torch.Tensor) -> None:
    if images.ndim != 4 or images.shape[1] != 3:
        raise ShapeMismatchError(f"expected Bx3xHxW input, got {tuple(images.shape)}")
    if images.shape[2] != INPUT_SIZE or images.shape[3] != INPUT_SIZE:
        raise ShapeMismatchError(
            f"backbones require {INPUT_SIZE}x{INPUT_SIZE} input, got "
            f"{images.shape[2]}x{images.shape[3]}"
        )


class FixtureViTBackbone(nn.Module):
    """Small stand-in with the exact stage output shapes of ViT-B/8.

    A strided stem tokenizes the image onto the 28x28 grid at a narrow
    internal width; cheap conv blocks stand in for transformer blocks and
    per-stage projections lift tapped blocks to 768 channels.
    """

    def __init__(self, stage_indices: Sequence[int], width: int = 16):
        super().__init__()
        self.stage_indices = tuple(stage_indices)
        n_blocks = max(self.stage_indices) + 1
        self.stem = nn.Conv2d(3, width, kernel_size=8, stride=8)
        self.blocks = nn.ModuleList(
            nn.Sequential(nn.Conv2d(width, width, 3, padding=1), nn.ReLU())
            for _ in range(n_blocks)
        )
        self.projections = nn.ModuleList(
            nn.Conv2d(width, VIT_STAGE_CHANNELS, 1) for _ in self.stage_indices
        )

    def forward(self, images: torch.Tensor) -> List[torch.Tensor]:
        _check_input(images)
        x = self.stem(images)
        taps = {idx: k for k, idx in enumerate(self.stage_indices)}
        out: List[torch.Tensor] = [None] * len(self.stage_indices)  # type: ignore[list-item]
        for i, block in enumerate(self.blocks):
            x = block(x)
            if i in taps:
                out[taps[i]] = self.projections[taps[i]](x)
        return out


class FixtureResNetBackbone(nn.Module):
    """Small stand-in with the exact stage output shapes of ResNet-50."""

    def __init__(self, width: int = 16):
        super().__init__()
        self.stem = nn.Sequential(nn.Conv2d(3, width, kernel_size=4, stride=4), nn.ReLU())
        strides = (1, 2, 2, 2)
        self.stages = nn.ModuleList(
            nn.Sequential(nn.Conv2d(width, width, 3, stride=s, padding=1), nn.ReLU())
            for s in strides
        )
        self.projections = nn.ModuleList(
            nn.Conv2d(width, c, 1) for c in RESNET_STAGE_CHANNELS
        )

    def forward(self, images: torch.Tensor) -> List[torch.Tensor]:
        _check_input(images)
        x = self.stem(images)
        out = []
        for stage, proj in zip(self.stages, self.projections):
            x = stage(x)
            out.append(proj(x))
        return out


class ViTStageBackbone(nn.Module):
    """ViT-B/8 wrapper returning spatial maps from selected encoder blocks.

    The class token is dropped and the remaining tokens are reshaped onto
    the 28x28 patch grid.
    """

    def __init__(self, stage_indices: Sequence[int], checkpoint: Optional[str] = None):
        super().__init__()
        from torchvision.models import VisionTransformer

        self.stage_indices = tuple(stage_indices)
        self.vit = VisionTransformer(
            image_size=INPUT_SIZE,
            patch_size=8,
            num_layers=12,
            num_heads=12,
            hidden_dim=VIT_STAGE_CHANNELS,
            mlp_dim=3072,
        )
        if max(self.stage_indices) >= 12:
            raise ValueError(f"stage indices {self.stage_indices} exceed 12 encoder blocks")
        if checkpoint is not None:
            try:
                state = torch.load(checkpoint, map_location="cpu", weights_only=True)
                self.vit.load_state_dict(state)
            except Exception as e:
                raise WeightLoadError(f"failed to load ViT weights from {checkpoint}: {e}") from e

    def forward(self, images: torch.Tensor) -> List[torch.Tensor]:
        _check_input(images)
        b = images.shape[0]
        x = self.vit._process_input(images)
        cls = self.vit.class_token.expand(b, -1, -1)
        x = torch.cat([cls, x], dim=1)
        enc = self.vit.encoder
        x = enc.dropout(x + enc.pos_embedding)
        taps = {idx: k for k, idx in enumerate(self.stage_indices)}
        out: List[torch.Tensor] = [None] * len(self.stage_indices)  # type: ignore[list-item]
        for i, layer in enumerate(enc.layers):
            x = layer(x)
            if i in taps:
                grid = x[:, 1:, :]  # drop the class token
                grid = grid.reshape(b, PATCH_GRID, PATCH_GRID, VIT_STAGE_CHANNELS)
                out[taps[i]] = grid.permute(0, 3, 1, 2).contiguous()
        return out


class ResNetStageBackbone(nn.Module):
    """ResNet-50 wrapper returning the four residual stage outputs."""

    def __init__(self, checkpoint: Optional[str] = None):
        super().__init__()
        from torchvision.models import resnet50

        self.resnet = resnet50(weights=None)
        if checkpoint is not None:
            try:
                state = torch.load(checkpoint, map_location="cpu", weights_only=True)
                self.resnet.load_state_dict(state)
            except Exception as e:
                raise WeightLoadError(f"failed to load ResNet weights from {checkpoint}: {e}") from e

    def forward(self, images: torch.Tensor) -> List[torch.Tensor]:
        _check_input(images)
        r = self.resnet
        x = r.maxpool(r.relu(r.bn1(r.conv1(images))))
        out = []
        for layer in (r.layer1, r.layer2, r.layer3, r.layer4):
            x = layer(x)
            out.append(x)
        return out


def build_vit_backbone(
    mode: str, stage_indices: Sequence[int], checkpoint: Optional[str] = None
) -> nn.Module:
    if len(tuple(stage_indices)) != N_VIT_STAGES:
        raise ValueError(f"exactly {N_VIT_STAGES} ViT stage indices required, got {stage_indices}")
    if mode == "fixture":
        return FixtureViTBackbone(stage_indices)
    if mode == "pretrained":
        return ViTStageBackbone(stage_indices, checkpoint)
    raise ValueError(f"unknown backbone mode {mode!r}")


def build_resnet_backbone(mode: str, checkpoint: Optional[str] = None) -> nn.Module:
    if mode == "fixture":
        return FixtureResNetBackbone()
    if mode == "pretrained":
        return ResNetStageBackbone(checkpoint)
    raise ValueError(f"unknown backbone mode {mode!r}")


def set_frozen(module: nn.Module, frozen: bool) -> None:
    """Freeze or unfreeze every parameter of a module."""
    for p in module.parameters():
        p.requires_grad_(not frozen)


class FeatureExtractor(nn.Module):
    """Backbones plus learned channel reduction, producing feature bundles.

    The five ViT stage maps are concatenated on the channel axis (3840
    channels) and reduced to 256 by a learned convolution; the four ResNet
    stage maps are bilinearly resized to the 28x28 grid, concatenated
    (3840 channels again) and reduced by a second, independently
    parameterized convolution. Either path can be omitted for the
    single-backbone fusion modes.
    """

    def __init__(
        self,
        vit: Optional[nn.Module],
        resnet: Optional[nn.Module],
        reduction_kernel_size: int = 1,
    ):
        super().__init__()
        if vit is None and resnet is None:
            raise ValueError("at least one backbone is required")
        if reduction_kernel_size % 2 != 1:
            raise ValueError(f"reduction kernel size must be odd, got {reduction_kernel_size}")
        pad = (reduction_kernel_size - 1) // 2
        self.vit = vit
        self.resnet = resnet
        self.reduce_global_conv = (
            nn.Conv2d(CONCAT_CHANNELS, REDUCED_CHANNELS, reduction_kernel_size, padding=pad)
            if vit is not None
            else None
        )
        self.reduce_local_conv = (
            nn.Conv2d(CONCAT_CHANNELS, REDUCED_CHANNELS, reduction_kernel_size, padding=pad)
            if resnet is not None
            else None
        )

    # ---- batched internals -------------------------------------------------

    def vit_concat(self, images: torch.Tensor) -> torch.Tensor:
        """Concatenated ViT stage maps, Bx3840x28x28."""
        if self.vit is None:
            raise ShapeMismatchError("this extractor was built without a ViT path")
        return torch.cat(self.vit(images), dim=1)

    def resnet_concat(self, images: torch.Tensor) -> torch.Tensor:
        """ResNet stage maps resized to the patch grid and concatenated."""
        if self.resnet is None:
            raise ShapeMismatchError("this extractor was built without a ResNet path")
        stages = self.resnet(images)
        resized = [
            s
            if s.shape[2:] == (PATCH_GRID, PATCH_GRID)
            else F.interpolate(s, size=(PATCH_GRID, PATCH_GRID), mode="bilinear", align_corners=False)
            for s in stages
        ]
        return torch.cat(resized, dim=1)

    def reduce_global_batched(self, vit_cat: torch.Tensor) -> torch.Tensor:
        if vit_cat.shape[1] != CONCAT_CHANNELS:
            raise ShapeMismatchError(f"expected {CONCAT_CHANNELS} channels, got {vit_cat.shape[1]}")
        return self.reduce_global_conv(vit_cat)

    def reduce_local_batched(self, resnet_cat: torch.Tensor) -> torch.Tensor:
        if resnet_cat.shape[1] != CONCAT_CHANNELS:
            raise ShapeMismatchError(f"expected {CONCAT_CHANNELS} channels, got {resnet_cat.shape[1]}")
        return self.reduce_local_conv(resnet_cat)

    def bundles_batched(self, images: torch.Tensor) -> tuple:
        """(global, local) reduced maps for a batch; None for an absent path."""
        g = self.reduce_global_batched(self.vit_concat(images)) if self.vit is not None else None
        l = self.reduce_local_batched(self.resnet_concat(images)) if self.resnet is not None else None
        return g, l

    # ---- single-sample contract surface -------------------------------------

    def extract_stages(self, image: torch.Tensor) -> BackboneOutputs:
        """Raw stage maps for one channel-normalized 3x224x224 image."""
        if image.ndim != 3:
            raise ShapeMismatchError(f"expected a 3xHxW image, got {tuple(image.shape)}")
        if self.vit is None or self.resnet is None:
            raise ShapeMismatchError("extract_stages requires both backbone paths")
        batch = image.unsqueeze(0)
        vit_stages = [t.squeeze(0) for t in self.vit(batch)]
        resnet_stages = [t.squeeze(0) for t in self.resnet(batch)]
        return BackboneOutputs(vit_stages=vit_stages, resnet_stages=resnet_stages)

    def reduce_global(self, vit_stages: Sequence[torch.Tensor]) -> torch.Tensor:
        """Concatenate 5 ViT stage maps and reduce to 256x28x28."""
        if len(vit_stages) != N_VIT_STAGES:
            raise ShapeMismatchError(f"expected {N_VIT_STAGES} stages, got {len(vit_stages)}")
        for t in vit_stages:
            if t.shape != (VIT_STAGE_CHANNELS, PATCH_GRID, PATCH_GRID):
                raise ShapeMismatchError(f"bad ViT stage shape {tuple(t.shape)}")
        cat = torch.cat([t.unsqueeze(0) for t in vit_stages], dim=1)
        return self.reduce_global_batched(cat).squeeze(0)

    def reduce_local(self, resnet_stages: Sequence[torch.Tensor]) -> torch.Tensor:
        """Resize 4 ResNet stage maps to the grid, concatenate, reduce."""
        if len(resnet_stages) != len(RESNET_STAGE_CHANNELS):
            raise ShapeMismatchError(
                f"expected {len(RESNET_STAGE_CHANNELS)} stages, got {len(resnet_stages)}"
            )
        for t, c in zip(resnet_stages, RESNET_STAGE_CHANNELS):
            if t.ndim != 3 or t.shape[0] != c:
                raise ShapeMismatchError(f"bad ResNet stage shape {tuple(t.shape)}")
        resized = [
            t.unsqueeze(0)
            if t.shape[1:] == (PATCH_GRID, PATCH_GRID)
            else F.interpolate(
                t.unsqueeze(0), size=(PATCH_GRID, PATCH_GRID), mode="bilinear", align_corners=False
            )
            for t in resnet_stages
        ]
        return self.reduce_local_batched(torch.cat(resized, dim=1)).squeeze(0)

    def extract_bundle(self, image: torch.Tensor) -> FeatureBundle:
        """Full single-image pipeline: stages -> reductions -> FeatureBundle."""
        outputs = self.extract_stages(image)
        return FeatureBundle(
            global_feat=self.reduce_global(outputs.vit_stages),
            local_feat=self.reduce_local(outputs.resnet_stages),
        )


def difference_bundle(sr_bundle: FeatureBundle, lr_bundle: FeatureBundle) -> FeatureBundle:
    """Elementwise difference of two feature bundles (SR minus LR)."""
    if sr_bundle.global_feat.shape != lr_bundle.global_feat.shape:
        raise ShapeMismatchError("bundle shapes differ")
    return FeatureBundle(
        global_feat=sr_bundle.global_feat - lr_bundle.global_feat,
        local_feat=sr_bundle.local_feat - lr_bundle.local_feat,
    )
