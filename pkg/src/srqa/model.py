"""The assembled dual-branch quality network.

The perception branch scores the SR image from its own features; the
fidelity branch scores the agreement between SR and LR from the difference
of their features. Each branch has its own fusion module and scoring head;
a shared weighting head turns both branches' features into per-patch
attention. Branches, scale conditioning, fusion mode, and backbone
fine-tuning are all switchable to support the ablation axes.
"""

from __future__ import annotations

import hashlib
from typing import Dict, Optional

import torch
import torch.nn as nn

from . import backbones as bb
from .datamodel import ExperimentConfig, QualityPrediction
from .errors import ShapeMismatchError
from .fusion import AdaptiveFusionModule
from .regression import DualWeightingHead, ScoringHead, SingleWeightingHead, final_score_batched


def parameter_checksum(module: nn.Module) -> str:
    """SHA-256 over all parameter names and exact byte contents."""
    h = hashlib.sha256()
    for name, p in sorted(module.named_parameters(), key=lambda kv: kv[0]):
        h.update(name.encode("utf-8"))
        h.update(p.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


class PerceptionFidelityModel(nn.Module):
    """Dual-branch reduced-reference quality network."""

    def __init__(self, config: ExperimentConfig):
        super().__init__()
        self.config = config
        use_vit = config.fusion_mode != "resnet_only"
        use_resnet = config.fusion_mode != "vit_only"

        vit = (
            bb.build_vit_backbone(config.backbone_mode, config.vit_stage_indices, config.vit_checkpoint)
            if use_vit
            else None
        )
        resnet = (
            bb.build_resnet_backbone(config.backbone_mode, config.resnet_checkpoint)
            if use_resnet
            else None
        )
        self.vit_trainable = use_vit and config.backbone_trainable in ("vit", "both")
        self.resnet_trainable = use_resnet and config.backbone_trainable in ("resnet", "both")
        if vit is not None:
            bb.set_frozen(vit, not self.vit_trainable)
        if resnet is not None:
            bb.set_frozen(resnet, not self.resnet_trainable)

        self.extractor = bb.FeatureExtractor(vit, resnet, config.reduction_kernel_size)

        def make_afm() -> AdaptiveFusionModule:
            return AdaptiveFusionModule(
                mode=config.fusion_mode,
                use_scale=config.enable_scale_factor,
                channels=bb.REDUCED_CHANNELS,
                spatial=bb.PATCH_GRID,
                scale_hidden=config.scale_hidden_dim,
                per_channel=config.per_channel_fusion,
            )

        hidden = config.head_hidden_dim
        ch = bb.REDUCED_CHANNELS
        self.perception_afm = make_afm() if config.enable_perception_branch else None
        self.fidelity_afm = make_afm() if config.enable_fidelity_branch else None
        self.perception_scoring = ScoringHead(ch, hidden) if config.enable_perception_branch else None
        self.fidelity_scoring = ScoringHead(ch, hidden) if config.enable_fidelity_branch else None
        self.dual_branch = config.enable_perception_branch and config.enable_fidelity_branch
        if self.dual_branch:
            self.weighting: nn.Module = DualWeightingHead(ch, hidden)
        else:
            self.weighting = SingleWeightingHead(ch, hidden)
        self._set_backbone_mode()

    # ---- training-mode plumbing ---------------------------------------------

    def _set_backbone_mode(self) -> None:
        # Frozen backbones stay in inference mode even while the heads train.
        if self.extractor.vit is not None and not self.vit_trainable:
            self.extractor.vit.eval()
        if self.extractor.resnet is not None and not self.resnet_trainable:
            self.extractor.resnet.eval()

    def train(self, mode: bool = True) -> "PerceptionFidelityModel":
        super().train(mode)
        self._set_backbone_mode()
        return self

    def trainable_parameter_count(self) -> int:
        return sum(p.numel() for p in self.parameters() if p.requires_grad)

    # ---- feature plumbing ----------------------------------------------------

    def _image_features(self, images: torch.Tensor):
        """(global, local) reduced maps; backbone passes skip autograd when frozen."""
        g = l = None
        if self.extractor.vit is not None:
            if self.vit_trainable:
                cat = self.extractor.vit_concat(images)
            else:
                with torch.no_grad():
                    cat = self.extractor.vit_concat(images)
            g = self.extractor.reduce_global_batched(cat)
        if self.extractor.resnet is not None:
            if self.resnet_trainable:
                cat = self.extractor.resnet_concat(images)
            else:
                with torch.no_grad():
                    cat = self.extractor.resnet_concat(images)
            l = self.extractor.reduce_local_batched(cat)
        return g, l

    def forward(
        self,
        sr: torch.Tensor,
        lr: Optional[torch.Tensor],
        scales: Optional[torch.Tensor] = None,
    ) -> Dict[str, Optional[torch.Tensor]]:
        """Score a batch of normalized SR/LR image pairs.

        ``lr`` may be None only when the fidelity branch is disabled.
        Returns a dict with the batched final score, per-branch score and
        weight maps, and the fidelity branch's difference features.
        """
        cfg = self.config
        if cfg.enable_fidelity_branch:
            if lr is None:
                raise ShapeMismatchError("the fidelity branch requires LR images")
            if lr.shape != sr.shape:
                raise ShapeMismatchError(f"SR {tuple(sr.shape)} != LR {tuple(lr.shape)}")
        if cfg.enable_scale_factor:
            if scales is None:
                raise ShapeMismatchError("scale conditioning is enabled but no scales were given")
            scales = scales.reshape(-1)
            if scales.shape[0] != sr.shape[0]:
                raise ShapeMismatchError("one scale factor per batch item is required")
        else:
            scales = None

        sr_g, sr_l = self._image_features(sr)
        diff_g = diff_l = None
        if cfg.enable_fidelity_branch:
            lr_g, lr_l = self._image_features(lr)
            diff_g = sr_g - lr_g if sr_g is not None else None
            diff_l = sr_l - lr_l if sr_l is not None else None

        p_feat = f_feat = None
        if cfg.enable_perception_branch:
            p_feat = self.perception_afm(sr_g, sr_l, scales)
        if cfg.enable_fidelity_branch:
            f_feat = self.fidelity_afm(diff_g, diff_l, scales)

        s_p = self.perception_scoring(p_feat) if p_feat is not None else None
        s_f = self.fidelity_scoring(f_feat) if f_feat is not None else None

        if self.dual_branch:
            w = self.weighting(p_feat, f_feat)
            w_p, w_f = w[:, 0:1], w[:, 1:2]
        elif cfg.enable_perception_branch:
            w_p, w_f = self.weighting(p_feat), None
        else:
            w_p, w_f = None, self.weighting(f_feat)

        score = final_score_batched(s_p, s_f, w_p, w_f)
        return {
            "score": score,
            "perception_score_map": s_p,
            "fidelity_score_map": s_f,
            "perception_weight_map": w_p,
            "fidelity_weight_map": w_f,
            "diff_global": diff_g,
            "diff_local": diff_l,
        }

    @torch.no_grad()
    def predict(
        self, sr: torch.Tensor, lr: Optional[torch.Tensor], scale_factor: float
    ) -> QualityPrediction:
        """Score one normalized 3x224x224 pair and return typed maps."""
        scales = torch.tensor([float(scale_factor)], dtype=sr.dtype)
        out = self.forward(sr.unsqueeze(0), None if lr is None else lr.unsqueeze(0), scales)

        def one(key: str) -> Optional[torch.Tensor]:
            t = out[key]
            return None if t is None else t.squeeze(0)

        return QualityPrediction(
            final_score=float(out["score"].squeeze(0)),
            perception_score_map=one("perception_score_map"),
            fidelity_score_map=one("fidelity_score_map"),
            perception_weight_map=one("perception_weight_map"),
            fidelity_weight_map=one("fidelity_weight_map"),
        )


def build_model(config: ExperimentConfig, seed: Optional[int] = None) -> PerceptionFidelityModel:
    """Construct a model with a reproducible parameter initialization."""
    if seed is not None:
        torch.manual_seed(seed)
    return PerceptionFidelityModel(config)
