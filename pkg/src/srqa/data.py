"""Dataset ingestion, split protocol, preprocessing, and synthetic corpora.

Datasets live under a root directory with a tab-separated ``manifest.tsv``,
one record per line::

    sr_path <TAB> lr_path <TAB> scale <TAB> label <TAB> content_id <TAB> method_id

Paths are relative to the root; lines starting with ``#`` are comments.
Images are 8-bit RGB raster files decoded to [0, 1]. Raw labels are
min-max normalized to [0, 1] per dataset at load time; rank-style labels
(smaller value = better) are flipped via ``label_ascending=False`` on the
dataset spec.

A synthetic corpus generator produces desk-scale datasets with known
monotone quality ordering for tests and smoke runs.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from .backbones import IMAGENET_MEAN, IMAGENET_STD
from .datamodel import DatasetSpec, Sample, validate_sample
from .errors import DataError, ShapeMismatchError

MANIFEST_NAME = "manifest.tsv"
_MANIFEST_FIELDS = 6


# ---- image primitives --------------------------------------------------------


def load_image(path) -> np.ndarray:
    """Decode an image file to an HxWx3 float32 array in [0, 1]."""
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.float32)
    except FileNotFoundError as e:
        raise DataError(f"missing image file: {path}") from e
    except Exception as e:
        raise DataError(f"failed to decode image {path}: {e}") from e
    return arr / 255.0


def save_image(path, img: np.ndarray) -> None:
    """Write an HxWx3 [0, 1] array as an 8-bit PNG."""
    arr = np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0)
    Image.fromarray((arr * 255.0 + 0.5).astype(np.uint8)).save(path)


def bilinear_resize(img: np.ndarray, height: int, width: int) -> np.ndarray:
    """Bilinearly resize an HxWx3 array to the given spatial size."""
    t = torch.from_numpy(np.ascontiguousarray(img, dtype=np.float32)).permute(2, 0, 1).unsqueeze(0)
    out = F.interpolate(t, size=(height, width), mode="bilinear", align_corners=False)
    return out.squeeze(0).permute(1, 2, 0).numpy()


def normalize_image(img: np.ndarray) -> torch.Tensor:
    """HxWx3 [0, 1] array -> channel-normalized 3xHxW float tensor."""
    t = torch.from_numpy(np.ascontiguousarray(img, dtype=np.float32)).permute(2, 0, 1)
    mean = torch.tensor(IMAGENET_MEAN).reshape(3, 1, 1)
    std = torch.tensor(IMAGENET_STD).reshape(3, 1, 1)
    return (t - mean) / std


# ---- dataset loading -----------------------------------------------------------


def _normalize_labels(raw: Sequence[float], ascending: bool) -> List[float]:
    v = np.asarray(raw, dtype=np.float64)
    lo, hi = float(v.min()), float(v.max())
    if hi == lo:
        raise DataError("all labels are identical; cannot min-max normalize")
    norm = (v - lo) / (hi - lo)
    if not ascending:
        norm = 1.0 - norm
    return [float(x) for x in norm]


def load_dataset(spec: DatasetSpec) -> List[Sample]:
    """Load and validate every sample described by a dataset spec.

    LR images are bilinearly upsampled to the SR resolution; labels are
    min-max normalized to [0, 1] over the whole dataset.
    """
    if spec.format == "synthetic":
        rng = np.random.default_rng(spec.synth_seed)
        return synthesize_corpus(
            n_contents=spec.n_contents,
            scales=spec.scale_factors,
            rng=rng,
            methods_per_content=spec.methods_per_content,
            image_size=spec.image_size,
        )
    if spec.format != "manifest":
        raise DataError(f"unknown dataset format {spec.format!r}")

    manifest = os.path.join(spec.root, MANIFEST_NAME)
    if not os.path.isfile(manifest):
        raise DataError(f"missing file: {manifest}")
    records = []
    with open(manifest, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.rstrip("\n")
            if not line or line.startswith("#"):
                continue
            fields = line.split("\t")
            if len(fields) != _MANIFEST_FIELDS:
                raise DataError(
                    f"{manifest}:{lineno}: expected {_MANIFEST_FIELDS} tab-separated fields, "
                    f"got {len(fields)}"
                )
            sr_rel, lr_rel, scale_s, label_s, content_id, method_id = fields
            try:
                scale = float(scale_s)
                label = float(label_s)
            except ValueError as e:
                raise DataError(f"{manifest}:{lineno}: unparseable number: {e}") from e
            records.append((sr_rel, lr_rel, scale, label, content_id, method_id))
    if not records:
        raise DataError(f"{manifest}: no samples listed")

    mos = _normalize_labels([r[3] for r in records], spec.label_ascending)
    dataset_id = os.path.basename(os.path.normpath(spec.root)) or "dataset"
    samples = []
    for (sr_rel, lr_rel, scale, _label, content_id, method_id), m in zip(records, mos):
        sr = load_image(os.path.join(spec.root, sr_rel))
        lr = load_image(os.path.join(spec.root, lr_rel))
        if lr.shape != sr.shape:
            lr = bilinear_resize(lr, sr.shape[0], sr.shape[1])
        samples.append(
            validate_sample(
                Sample(
                    sr_image=sr,
                    lr_image_upsampled=lr,
                    scale_factor=scale,
                    mos=m,
                    dataset_id=dataset_id,
                    content_id=content_id,
                    method_id=method_id,
                )
            )
        )
    return samples


# ---- split protocol -------------------------------------------------------------


def make_splits(
    samples: Sequence[Sample],
    seed: int,
    ratio: float = 0.8,
    n_repeats: int = 5,
    group_by_content: bool = True,
) -> List[Tuple[List[Sample], List[Sample]]]:
    """Random train/test partitions, repeated ``n_repeats`` times.

    With ``group_by_content`` (the default) the split unit is the content
    id, so no source content contributes to both sides of one split. A
    plain per-sample split is available for literal protocol reproduction.
    Deterministic for a fixed seed.
    """
    if not samples:
        raise DataError("cannot split an empty sample list")
    if group_by_content:
        units = sorted({s.content_id for s in samples})
    else:
        units = list(range(len(samples)))
    if len(units) < 5:
        raise DataError(f"need at least 5 split units, got {len(units)}")

    n_train = int(round(ratio * len(units)))
    n_train = min(max(n_train, 1), len(units) - 1)
    splits = []
    for rep in range(n_repeats):
        rng = np.random.default_rng([seed, rep])
        perm = rng.permutation(len(units))
        chosen = {units[i] for i in perm[:n_train]}
        if group_by_content:
            train = [s for s in samples if s.content_id in chosen]
            test = [s for s in samples if s.content_id not in chosen]
        else:
            train = [samples[i] for i in sorted(perm[:n_train])]
            test = [samples[i] for i in sorted(perm[n_train:])]
        splits.append((train, test))
    return splits


# ---- preprocessing ---------------------------------------------------------------


@dataclass(frozen=True)
class TransformedSample:
    """Model-ready pair of normalized tensors plus targets."""

    sr: torch.Tensor
    lr: torch.Tensor
    scale_factor: float
    mos: Optional[float]


def _check_crop(s: Sample, crop: int) -> Tuple[int, int]:
    h, w = s.sr_image.shape[:2]
    if h < crop or w < crop:
        raise DataError(f"image {h}x{w} smaller than the {crop}x{crop} crop")
    return h, w


def _crop_pair(s: Sample, top: int, left: int, crop: int, flip: bool) -> TransformedSample:
    sr = s.sr_image[top : top + crop, left : left + crop]
    lr = s.lr_image_upsampled[top : top + crop, left : left + crop]
    if flip:
        sr = sr[:, ::-1]
        lr = lr[:, ::-1]
    return TransformedSample(
        sr=normalize_image(sr),
        lr=normalize_image(lr),
        scale_factor=s.scale_factor,
        mos=s.mos,
    )


def train_transform(s: Sample, rng: np.random.Generator, crop: int = 224) -> TransformedSample:
    """Random crop plus random horizontal flip, identical for SR and LR.

    The crop window and the flip decision are drawn once and applied to
    both images so their spatial correspondence is preserved.
    """
    h, w = _check_crop(s, crop)
    top = int(rng.integers(0, h - crop + 1))
    left = int(rng.integers(0, w - crop + 1))
    flip = bool(rng.random() < 0.5)
    return _crop_pair(s, top, left, crop, flip)


def center_transform(s: Sample, crop: int = 224) -> TransformedSample:
    """Deterministic center crop without flipping."""
    h, w = _check_crop(s, crop)
    return _crop_pair(s, (h - crop) // 2, (w - crop) // 2, crop, flip=False)


def eval_crop_offsets(height: int, width: int, crop: int) -> List[Tuple[int, int]]:
    """(top, left) offsets of the four corner crops and the center crop."""
    return [
        (0, 0),
        (0, width - crop),
        (height - crop, 0),
        (height - crop, width - crop),
        ((height - crop) // 2, (width - crop) // 2),
    ]


def eval_crops(s: Sample, crop: int = 224) -> List[TransformedSample]:
    """The deterministic five-crop set used at test time.

    Downstream scores over the five crops are averaged by the caller.
    """
    h, w = _check_crop(s, crop)
    return [_crop_pair(s, top, left, crop, flip=False) for top, left in eval_crop_offsets(h, w, crop)]


# ---- synthetic corpus -------------------------------------------------------------


def _base_texture(rng: np.random.Generator, size: int) -> np.ndarray:
    """Procedural HR-like texture: band-limited noise plus smooth gradients."""
    from scipy.ndimage import gaussian_filter

    img = np.zeros((size, size, 3), dtype=np.float64)
    yy, xx = np.mgrid[0:size, 0:size] / float(size)
    for c in range(3):
        noise = gaussian_filter(rng.standard_normal((size, size)), sigma=3.0)
        fx, fy = rng.uniform(2.0, 8.0, size=2)
        phase = rng.uniform(0.0, 2.0 * np.pi)
        waves = 0.5 * np.sin(2.0 * np.pi * (fx * xx + fy * yy) + phase)
        grad = rng.uniform(-1.0, 1.0) * xx + rng.uniform(-1.0, 1.0) * yy
        img[:, :, c] = noise + waves + grad
    lo, hi = img.min(), img.max()
    return ((img - lo) / (hi - lo + 1e-12)).astype(np.float32)


def _degrade(img: np.ndarray, strength: float, rng: np.random.Generator) -> np.ndarray:
    """Blur-plus-noise degradation; strength 0 returns the input unchanged."""
    from scipy.ndimage import gaussian_filter

    if strength == 0.0:
        return img
    out = np.empty_like(img)
    for c in range(3):
        out[:, :, c] = gaussian_filter(img[:, :, c], sigma=2.0 * strength)
    out = out + rng.normal(0.0, 0.05 * strength, size=img.shape).astype(np.float32)
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def synthesize_corpus(
    n_contents: int,
    scales: Sequence[float],
    rng: np.random.Generator,
    methods_per_content: int = 1,
    image_size: int = 224,
) -> List[Sample]:
    """Generate a labeled corpus with a known monotone quality ordering.

    Each content is a procedural texture; its LR image is a downsampled
    copy and each SR surrogate re-upsamples the LR image and degrades it
    with strength ``d``. The pseudo-MOS is ``1 - d`` with the ``d`` values
    spread evenly over [0, 1] across the corpus, so less degradation
    always means a higher label.
    """
    if n_contents < 1:
        raise DataError(f"n_contents must be >= 1, got {n_contents}")
    scales = tuple(float(s) for s in scales)
    n_slots = n_contents * len(scales) * methods_per_content
    strengths = np.linspace(0.0, 1.0, n_slots) if n_slots > 1 else np.array([0.0])

    samples = []
    slot = 0
    for i in range(n_contents):
        base = _base_texture(rng, image_size)
        for scale in scales:
            small = max(8, int(round(image_size / scale)))
            lr_small = bilinear_resize(base, small, small)
            lr_up = bilinear_resize(lr_small, image_size, image_size)
            lr_up = np.clip(lr_up, 0.0, 1.0).astype(np.float32)
            for j in range(methods_per_content):
                d = float(strengths[slot])
                slot += 1
                sr = _degrade(lr_up, d, rng)
                samples.append(
                    validate_sample(
                        Sample(
                            sr_image=sr,
                            lr_image_upsampled=lr_up,
                            scale_factor=scale,
                            mos=1.0 - d,
                            dataset_id="synthetic",
                            content_id=f"content{i:04d}",
                            method_id=f"method{j:02d}",
                        )
                    )
                )
    return samples


def write_corpus(samples: Sequence[Sample], root) -> None:
    """Write samples as PNG files plus a manifest under a dataset root."""
    os.makedirs(root, exist_ok=True)
    lines = ["# sr_path\tlr_path\tscale\tlabel\tcontent_id\tmethod_id"]
    for k, s in enumerate(samples):
        if s.mos is None:
            raise DataError("corpus samples must carry labels")
        sr_rel = f"sr_{k:05d}.png"
        lr_rel = f"lr_{k:05d}.png"
        save_image(os.path.join(root, sr_rel), s.sr_image)
        save_image(os.path.join(root, lr_rel), s.lr_image_upsampled)
        lines.append(
            f"{sr_rel}\t{lr_rel}\t{s.scale_factor!r}\t{s.mos!r}\t{s.content_id}\t{s.method_id}"
        )
    with open(os.path.join(root, MANIFEST_NAME), "w", encoding="utf-8") as f:
        f.write("\n".join(lines) + "\n")
