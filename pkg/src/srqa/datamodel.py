"""Core domain types shared by every other module.

All types are immutable value objects after construction and safe to share
across parallel workers. Images live in ``[0, 1]`` float arrays; channel
normalization for the backbones happens downstream so the raw pixels stay
usable for PSNR/SSIM.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import torch
import yaml

from .errors import DataError, RangeError, ShapeMismatchError

FUSION_MODES = ("adaptive", "concat", "vit_only", "resnet_only")
BACKBONE_TRAINABLE_MODES = ("none", "vit", "resnet", "both")
BACKBONE_MODES = ("fixture", "pretrained")
BRANCH_TAGS = ("perception", "fidelity")

# Tolerance used when checking that a stored final score matches the
# recombination of its four maps.
SCORE_CONSISTENCY_TOL = 1e-6
WEIGHT_SUM_EPS = 1e-8


@dataclass(frozen=True)
class Sample:
    """One assessment unit: an SR image, its paired LR image, and metadata.

    ``lr_image_upsampled`` is the LR image already resized (bilinearly) to
    the SR resolution, so both arrays share spatial dimensions.
    """

    sr_image: np.ndarray
    lr_image_upsampled: np.ndarray
    scale_factor: float
    mos: Optional[float] = None
    dataset_id: str = ""
    content_id: str = ""
    method_id: str = ""


def _check_image(name: str, img: np.ndarray) -> None:
    if not isinstance(img, np.ndarray) or img.ndim != 3 or img.shape[2] != 3:
        raise ShapeMismatchError(f"{name} must be an HxWx3 array, got {getattr(img, 'shape', None)}")
    if not np.isfinite(img).all():
        raise RangeError(f"{name} contains non-finite values")
    lo, hi = float(img.min()), float(img.max())
    if lo < 0.0 or hi > 1.0:
        raise RangeError(f"{name} pixel values outside [0, 1]: min={lo}, max={hi}")


def validate_sample(s: Sample) -> Sample:
    """Check all :class:`Sample` invariants and return the sample unchanged.

    Raises :class:`ShapeMismatchError` when SR/LR dimensions differ and
    :class:`RangeError` when pixels, MOS, or the scale factor are out of
    range. Idempotent: validating twice is the same as validating once.
    """
    _check_image("sr_image", s.sr_image)
    _check_image("lr_image_upsampled", s.lr_image_upsampled)
    if s.sr_image.shape != s.lr_image_upsampled.shape:
        raise ShapeMismatchError(
            f"SR shape {s.sr_image.shape} != LR shape {s.lr_image_upsampled.shape}"
        )
    if not (s.scale_factor > 1.0):
        raise RangeError(f"scale_factor must be > 1, got {s.scale_factor}")
    if s.mos is not None and not (0.0 <= s.mos <= 1.0):
        raise RangeError(f"mos must lie in [0, 1], got {s.mos}")
    return s


@dataclass(frozen=True)
class FeatureBundle:
    """Global (transformer-derived) and local (CNN-derived) feature maps.

    Both tensors are ``256 x p x p`` with matching spatial size; ``p`` is 28
    for a 224x224 input.
    """

    global_feat: torch.Tensor
    local_feat: torch.Tensor

    def __post_init__(self) -> None:
        for name, t in (("global_feat", self.global_feat), ("local_feat", self.local_feat)):
            if t.ndim != 3 or t.shape[0] != 256 or t.shape[1] != t.shape[2]:
                raise ShapeMismatchError(f"{name} must be 256xpxp, got {tuple(t.shape)}")
            if not torch.isfinite(t).all():
                raise RangeError(f"{name} contains non-finite values")
        if self.global_feat.shape != self.local_feat.shape:
            raise ShapeMismatchError(
                f"global {tuple(self.global_feat.shape)} != local {tuple(self.local_feat.shape)}"
            )


@dataclass(frozen=True)
class BranchFeatures:
    """Scale-conditioned fused feature map for one assessment branch."""

    feat: torch.Tensor
    branch_tag: str

    def __post_init__(self) -> None:
        if self.branch_tag not in BRANCH_TAGS:
            raise ValueError(f"branch_tag must be one of {BRANCH_TAGS}, got {self.branch_tag!r}")
        if self.feat.ndim != 3 or self.feat.shape[1:] != (28, 28):
            raise ShapeMismatchError(f"branch features must be Cx28x28, got {tuple(self.feat.shape)}")
        if not torch.isfinite(self.feat).all():
            raise RangeError("branch features contain non-finite values")


def _weighted_mean(scores: torch.Tensor, weights: torch.Tensor) -> float:
    wsum = float(weights.sum())
    if wsum <= WEIGHT_SUM_EPS:
        from .errors import DegenerateWeightsError

        raise DegenerateWeightsError(f"weight map sums to {wsum} <= {WEIGHT_SUM_EPS}")
    return float((scores * weights).sum()) / wsum


@dataclass(frozen=True)
class QualityPrediction:
    """Per-patch score/weight maps for each branch plus the final score.

    Maps are ``1 x 28 x 28``; a disabled branch leaves its pair of maps as
    ``None``. The final score is the sum over enabled branches of the
    weight-map-weighted mean of the branch's score map.
    """

    final_score: float
    perception_score_map: Optional[torch.Tensor] = None
    fidelity_score_map: Optional[torch.Tensor] = None
    perception_weight_map: Optional[torch.Tensor] = None
    fidelity_weight_map: Optional[torch.Tensor] = None

    def __post_init__(self) -> None:
        pairs = [
            ("perception", self.perception_score_map, self.perception_weight_map),
            ("fidelity", self.fidelity_score_map, self.fidelity_weight_map),
        ]
        total = 0.0
        any_branch = False
        for name, smap, wmap in pairs:
            if (smap is None) != (wmap is None):
                raise ValueError(f"{name} branch must provide both maps or neither")
            if smap is None:
                continue
            any_branch = True
            for mname, m in ((f"{name} score map", smap), (f"{name} weight map", wmap)):
                if m.shape != (1, 28, 28):
                    raise ShapeMismatchError(f"{mname} must be 1x28x28, got {tuple(m.shape)}")
                if not torch.isfinite(m).all():
                    raise RangeError(f"{mname} contains non-finite values")
            if not bool(((wmap > 0.0) & (wmap < 1.0)).all()):
                raise RangeError(f"{name} weight map entries must lie strictly in (0, 1)")
            total += _weighted_mean(smap, wmap)
        if not any_branch:
            raise ValueError("at least one branch must contribute maps")
        if not math.isfinite(self.final_score) or abs(total - self.final_score) > SCORE_CONSISTENCY_TOL:
            raise RangeError(
                f"final_score {self.final_score} inconsistent with maps (expected {total})"
            )

    def to_record(self, include_maps: bool = True) -> dict:
        """Plain serializable record: scalar mandatory, maps optional."""
        rec: dict = {"final_score": self.final_score}
        if include_maps:
            for key in (
                "perception_score_map",
                "fidelity_score_map",
                "perception_weight_map",
                "fidelity_weight_map",
            ):
                t = getattr(self, key)
                rec[key] = None if t is None else t.detach().cpu().numpy().tolist()
        return rec


@dataclass(frozen=True)
class DatasetSpec:
    """Where a dataset lives and how to interpret it.

    ``format`` is ``"manifest"`` for an on-disk root with a manifest file, or
    ``"synthetic"`` for a procedurally generated corpus described by the
    remaining fields. ``label_ascending`` is False for rank-style labels
    where a smaller raw value means better quality.
    """

    root: str = ""
    format: str = "manifest"
    label_ascending: bool = True
    n_contents: int = 8
    scale_factors: tuple = (2.0, 4.0)
    methods_per_content: int = 1
    image_size: int = 224
    synth_seed: int = 0


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything needed to reproduce one experiment, fully serializable."""

    dataset: DatasetSpec = field(default_factory=DatasetSpec)

    # Split protocol
    split_seed: int = 0
    n_repeats: int = 5
    split_ratio: float = 0.8
    group_by_content: bool = True

    # Ablation axes
    enable_perception_branch: bool = True
    enable_fidelity_branch: bool = True
    enable_scale_factor: bool = True
    fusion_mode: str = "adaptive"
    backbone_trainable: str = "none"

    # Model
    backbone_mode: str = "fixture"
    vit_checkpoint: Optional[str] = None
    resnet_checkpoint: Optional[str] = None
    vit_stage_indices: tuple = (1, 3, 5, 7, 9)
    reduction_kernel_size: int = 1
    scale_hidden_dim: int = 256
    head_hidden_dim: int = 64
    per_channel_fusion: bool = False

    # Optimizer
    learning_rate: float = 1e-4
    weight_decay: float = 1e-2
    batch_size: int = 4
    max_epochs: int = 200
    lr_schedule: str = "cosine"
    lr_min: float = 1e-6

    # Preprocessing / misc
    crop_size: int = 224
    augment: bool = True
    seed: int = 0
    device: str = "cpu"

    def __post_init__(self) -> None:
        if not (self.enable_perception_branch or self.enable_fidelity_branch):
            raise ValueError("at least one assessment branch must be enabled")
        if self.fusion_mode not in FUSION_MODES:
            raise ValueError(f"fusion_mode must be one of {FUSION_MODES}, got {self.fusion_mode!r}")
        if self.backbone_trainable not in BACKBONE_TRAINABLE_MODES:
            raise ValueError(
                f"backbone_trainable must be one of {BACKBONE_TRAINABLE_MODES}, "
                f"got {self.backbone_trainable!r}"
            )
        if self.backbone_mode not in BACKBONE_MODES:
            raise ValueError(f"backbone_mode must be one of {BACKBONE_MODES}, got {self.backbone_mode!r}")
        positive = {
            "batch_size": self.batch_size,
            "max_epochs": self.max_epochs,
            "crop_size": self.crop_size,
            "n_repeats": self.n_repeats,
            "scale_hidden_dim": self.scale_hidden_dim,
            "head_hidden_dim": self.head_hidden_dim,
            "reduction_kernel_size": self.reduction_kernel_size,
        }
        for name, value in positive.items():
            if not (value > 0):
                raise ValueError(f"{name} must be positive, got {value}")
        # Zero is allowed for the rate-style knobs so degenerate diagnostic
        # runs (e.g. lr 0 leaving parameters untouched) stay expressible.
        for name, value in (
            ("learning_rate", self.learning_rate),
            ("weight_decay", self.weight_decay),
            ("lr_min", self.lr_min),
        ):
            if value < 0:
                raise ValueError(f"{name} must be nonnegative, got {value}")
        if not (0.0 < self.split_ratio < 1.0):
            raise ValueError(f"split_ratio must lie in (0, 1), got {self.split_ratio}")

    def replace(self, **kwargs) -> "ExperimentConfig":
        """Return a copy with the given fields replaced."""
        return dataclasses.replace(self, **kwargs)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["dataset"]["scale_factors"] = list(self.dataset.scale_factors)
        d["vit_stage_indices"] = list(self.vit_stage_indices)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d)
        ds = dict(d.pop("dataset", {}))
        if "scale_factors" in ds:
            ds["scale_factors"] = tuple(float(s) for s in ds["scale_factors"])
        if "vit_stage_indices" in d:
            d["vit_stage_indices"] = tuple(int(i) for i in d["vit_stage_indices"])
        known = {f.name for f in dataclasses.fields(cls)} - {"dataset"}
        unknown = set(d) - known
        if unknown:
            raise DataError(f"unknown config keys: {sorted(unknown)}")
        ds_known = {f.name for f in dataclasses.fields(DatasetSpec)}
        ds_unknown = set(ds) - ds_known
        if ds_unknown:
            raise DataError(f"unknown dataset config keys: {sorted(ds_unknown)}")
        return cls(dataset=DatasetSpec(**ds), **d)

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=True)

    @classmethod
    def from_yaml(cls, text: str) -> "ExperimentConfig":
        d = yaml.safe_load(text)
        if not isinstance(d, dict):
            raise DataError("config file must contain a mapping")
        return cls.from_dict(d)

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as f:
            f.write(self.to_yaml())

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        try:
            with open(path, "r", encoding="utf-8") as f:
                return cls.from_yaml(f.read())
        except FileNotFoundError as e:
            raise DataError(f"config file not found: {path}") from e
        except yaml.YAMLError as e:
            raise DataError(f"config file is not valid YAML: {path}: {e}") from e

    def content_hash(self) -> str:
        """Stable short hash of the config contents, used to name run dirs."""
        canon = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode("utf-8")).hexdigest()[:8]
