"""Training, evaluation, the repeated-split protocol, and ablation suites.

Training minimizes the squared error between the predicted score and the
normalized MOS with AdamW (batch size 4, up to 200 epochs, optional cosine
learning-rate decay). Frozen backbones never enter the optimizer. All
randomness (initialization, shuffling, augmentation) derives from explicit
seeds, so a full protocol run is reproducible bit for bit.
"""

from __future__ import annotations

import hashlib
import os
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np
import torch

from .data import center_transform, eval_crops, make_splits, train_transform
from .datamodel import ExperimentConfig, Sample
from .errors import DataError, NumericError
from .metrics import EvalReport, ProtocolReport, plcc, srcc, write_scatter
from .model import PerceptionFidelityModel, build_model

CHECKPOINT_VERSION = 1


def derive_seed(*parts) -> int:
    """Stable 63-bit seed derived from arbitrary labeled parts."""
    digest = hashlib.sha256(repr(parts).encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little") % (2**63)


@dataclass
class TrainResult:
    model: PerceptionFidelityModel
    history: List[dict] = field(default_factory=list)


def _make_optimizer(config: ExperimentConfig, params) -> torch.optim.Optimizer:
    try:
        return torch.optim.AdamW(
            params, lr=config.learning_rate, weight_decay=config.weight_decay, fused=True
        )
    except (RuntimeError, TypeError, ValueError):
        return torch.optim.AdamW(params, lr=config.learning_rate, weight_decay=config.weight_decay)


def _batch_tensors(
    samples: Sequence[Sample],
    indices: Sequence[int],
    config: ExperimentConfig,
    seed: int,
    epoch: int,
) -> Tuple[torch.Tensor, torch.Tensor, torch.Tensor, torch.Tensor]:
    srs, lrs, scales, targets = [], [], [], []
    for idx in indices:
        s = samples[idx]
        if s.mos is None:
            raise DataError("training samples must carry MOS labels")
        if config.augment:
            rng = np.random.default_rng([seed, epoch, idx])
            t = train_transform(s, rng, config.crop_size)
        else:
            t = center_transform(s, config.crop_size)
        srs.append(t.sr)
        lrs.append(t.lr)
        scales.append(t.scale_factor)
        targets.append(t.mos)
    return (
        torch.stack(srs),
        torch.stack(lrs),
        torch.tensor(scales, dtype=torch.float32),
        torch.tensor(targets, dtype=torch.float32),
    )


def train(
    config: ExperimentConfig,
    train_samples: Sequence[Sample],
    seed: Optional[int] = None,
    log_path: Optional[str] = None,
) -> TrainResult:
    """Train a model on the given split and return it with its history.

    Aborts with :class:`NumericError` on the first non-finite loss rather
    than skipping batches, so numeric bugs surface immediately.
    """
    if not train_samples:
        raise DataError("training split is empty")
    seed = config.seed if seed is None else seed
    model = build_model(config, seed=derive_seed(seed, "init"))
    model.train()
    trainable = [p for p in model.parameters() if p.requires_grad]
    optimizer = _make_optimizer(config, trainable)
    scheduler = None
    if config.lr_schedule == "cosine":
        scheduler = torch.optim.lr_scheduler.CosineAnnealingLR(
            optimizer, T_max=config.max_epochs, eta_min=config.lr_min
        )
    elif config.lr_schedule != "constant":
        raise ValueError(f"unknown lr_schedule {config.lr_schedule!r}")

    needs_lr = config.enable_fidelity_branch
    history: List[dict] = []
    log_file = open(log_path, "a", encoding="utf-8") if log_path else None
    try:
        n = len(train_samples)
        for epoch in range(config.max_epochs):
            order = np.random.default_rng([seed, epoch]).permutation(n)
            epoch_losses = []
            for start in range(0, n, config.batch_size):
                chunk = [int(i) for i in order[start : start + config.batch_size]]
                sr, lr, scales, targets = _batch_tensors(train_samples, chunk, config, seed, epoch)
                out = model(sr, lr if needs_lr else None, scales)
                loss = torch.mean((out["score"] - targets) ** 2)
                if not torch.isfinite(loss):
                    raise NumericError(
                        f"non-finite loss {float(loss)} at epoch {epoch}, batch start {start}, "
                        f"lr={optimizer.param_groups[0]['lr']}"
                    )
                optimizer.zero_grad(set_to_none=True)
                loss.backward()
                optimizer.step()
                epoch_losses.append(float(loss))
            if scheduler is not None:
                scheduler.step()
            record = {
                "epoch": epoch,
                "loss": float(np.mean(epoch_losses)),
                "lr": float(optimizer.param_groups[0]["lr"]),
            }
            history.append(record)
            if log_file is not None:
                log_file.write(f"{record['epoch']}\t{record['loss']!r}\t{record['lr']!r}\n")
                log_file.flush()
    finally:
        if log_file is not None:
            log_file.close()
    model.eval()
    return TrainResult(model=model, history=history)


# ---- inference helpers ------------------------------------------------------------


@torch.no_grad()
def predict_sample(model: PerceptionFidelityModel, sample: Sample) -> Tuple[float, List[float]]:
    """Five-crop averaged score for one sample; also returns per-crop scores."""
    model.eval()
    config = model.config
    crops = eval_crops(sample, config.crop_size)
    sr = torch.stack([c.sr for c in crops])
    lr = torch.stack([c.lr for c in crops]) if config.enable_fidelity_branch else None
    scales = torch.full((len(crops),), float(sample.scale_factor))
    scores = model(sr, lr, scales)["score"]
    per_crop = [float(v) for v in scores]
    return float(np.mean(per_crop)), per_crop


@torch.no_grad()
def predictions(model: PerceptionFidelityModel, samples: Sequence[Sample]) -> List[float]:
    return [predict_sample(model, s)[0] for s in samples]


def evaluate(
    model: PerceptionFidelityModel, test_samples: Sequence[Sample]
) -> Tuple[EvalReport, List[float], List[float]]:
    """Score a test split (five-crop averaging) and correlate against MOS."""
    if any(s.mos is None for s in test_samples):
        raise DataError("evaluation samples must carry MOS labels")
    preds = predictions(model, test_samples)
    targets = [float(s.mos) for s in test_samples]
    report = EvalReport(plcc=plcc(preds, targets), srcc=srcc(preds, targets), n_samples=len(preds))
    return report, preds, targets


@torch.no_grad()
def training_mse(model: PerceptionFidelityModel, samples: Sequence[Sample]) -> float:
    """Mean squared error on a split under the deterministic center crop."""
    model.eval()
    config = model.config
    errs = []
    for s in samples:
        if s.mos is None:
            raise DataError("samples must carry MOS labels")
        t = center_transform(s, config.crop_size)
        lr = t.lr.unsqueeze(0) if config.enable_fidelity_branch else None
        score = model(t.sr.unsqueeze(0), lr, torch.tensor([t.scale_factor]))["score"]
        errs.append((float(score) - float(s.mos)) ** 2)
    return float(np.mean(errs))


# ---- checkpointing ------------------------------------------------------------------


def save_checkpoint(model: PerceptionFidelityModel, path, epoch: Optional[int] = None) -> None:
    """Persist parameters, the config snapshot, RNG state, and the epoch."""
    payload = {
        "version": CHECKPOINT_VERSION,
        "config": model.config.to_dict(),
        "model_state": model.state_dict(),
        "epoch": epoch,
        "torch_rng": torch.get_rng_state(),
    }
    torch.save(payload, path)


def load_checkpoint(path) -> Tuple[PerceptionFidelityModel, Optional[int]]:
    """Rebuild a model from a checkpoint file."""
    if not os.path.isfile(path):
        raise DataError(f"missing checkpoint file: {path}")
    try:
        payload = torch.load(path, map_location="cpu", weights_only=True)
    except Exception as e:
        raise DataError(f"failed to read checkpoint {path}: {e}") from e
    if not isinstance(payload, dict) or "config" not in payload or "model_state" not in payload:
        raise DataError(f"{path} is not a model checkpoint")
    config = ExperimentConfig.from_dict(payload["config"])
    model = PerceptionFidelityModel(config)
    try:
        model.load_state_dict(payload["model_state"])
    except Exception as e:
        raise DataError(f"checkpoint/config mismatch in {path}: {e}") from e
    model.eval()
    return model, payload.get("epoch")


# ---- protocol ------------------------------------------------------------------------


def run_protocol(
    config: ExperimentConfig,
    samples: Sequence[Sample],
    run_dir: Optional[str] = None,
    emit_scatter: bool = False,
    save_checkpoints: bool = False,
) -> ProtocolReport:
    """Train and evaluate once per repeated split; report per-repeat and mean.

    When ``run_dir`` is given, per-repeat training logs and optional
    checkpoints/scatter files are written there.
    """
    splits = make_splits(
        samples,
        config.split_seed,
        ratio=config.split_ratio,
        n_repeats=config.n_repeats,
        group_by_content=config.group_by_content,
    )
    if run_dir is not None:
        os.makedirs(run_dir, exist_ok=True)
    reports = []
    for rep, (train_split, test_split) in enumerate(splits):
        log_path = os.path.join(run_dir, f"train_rep{rep}.log") if run_dir else None
        result = train(config, train_split, seed=derive_seed(config.seed, "repeat", rep), log_path=log_path)
        report, preds, targets = evaluate(result.model, test_split)
        reports.append(report)
        if run_dir is not None and emit_scatter:
            write_scatter(os.path.join(run_dir, f"scatter_rep{rep}.tsv"), preds, targets)
        if run_dir is not None and save_checkpoints:
            save_checkpoint(
                result.model, os.path.join(run_dir, f"checkpoint_rep{rep}.pt"), epoch=config.max_epochs
            )
    return ProtocolReport.from_repeats(reports)


# ---- ablation suites --------------------------------------------------------------------


@dataclass(frozen=True)
class AblationRow:
    label: str
    config: ExperimentConfig
    report: ProtocolReport
    trainable_params: int


@dataclass(frozen=True)
class AblationTable:
    axis: str
    rows: tuple

    def to_text_table(self) -> str:
        lines = [f"axis: {self.axis}", "row\tplcc\tsrcc\ttrainable_params"]
        for r in self.rows:
            lines.append(
                f"{r.label}\t{r.report.plcc_mean:.6f}\t{r.report.srcc_mean:.6f}\t{r.trainable_params}"
            )
        return "\n".join(lines) + "\n"

    def to_dict(self) -> dict:
        return {
            "axis": self.axis,
            "rows": [
                {
                    "label": r.label,
                    "plcc_mean": r.report.plcc_mean,
                    "srcc_mean": r.report.srcc_mean,
                    "trainable_params": r.trainable_params,
                    "repeats": [x.to_dict() for x in r.report.repeats],
                }
                for r in self.rows
            ],
        }


ABLATION_AXES = ("branches", "fusion", "finetune")


def ablation_configs(base: ExperimentConfig, axis: str) -> List[Tuple[str, ExperimentConfig]]:
    """The labeled config rows for one ablation axis."""
    if axis == "branches":
        return [
            (
                "(a) perception",
                base.replace(
                    enable_perception_branch=True,
                    enable_fidelity_branch=False,
                    enable_scale_factor=False,
                ),
            ),
            (
                "(b) fidelity",
                base.replace(
                    enable_perception_branch=False,
                    enable_fidelity_branch=True,
                    enable_scale_factor=False,
                ),
            ),
            (
                "(c) perception+fidelity",
                base.replace(
                    enable_perception_branch=True,
                    enable_fidelity_branch=True,
                    enable_scale_factor=False,
                ),
            ),
            (
                "(d) perception+fidelity+scale",
                base.replace(
                    enable_perception_branch=True,
                    enable_fidelity_branch=True,
                    enable_scale_factor=True,
                ),
            ),
        ]
    if axis == "fusion":
        return [
            ("ResNet-only", base.replace(fusion_mode="resnet_only")),
            ("ViT-only", base.replace(fusion_mode="vit_only")),
            ("Concatenation", base.replace(fusion_mode="concat")),
            ("Adaptive Fusion", base.replace(fusion_mode="adaptive")),
        ]
    if axis == "finetune":
        return [
            ("(a) update ResNet", base.replace(backbone_trainable="resnet")),
            ("(b) update ViT", base.replace(backbone_trainable="vit")),
            ("(c) update both", base.replace(backbone_trainable="both")),
            ("(d) frozen backbones", base.replace(backbone_trainable="none")),
        ]
    raise ValueError(f"unknown ablation axis {axis!r}; expected one of {ABLATION_AXES}")


def run_ablation_suite(
    base_config: ExperimentConfig, samples: Sequence[Sample], axis: str
) -> AblationTable:
    """Run the full protocol for every row of one ablation axis."""
    rows = []
    for label, cfg in ablation_configs(base_config, axis):
        params = build_model(cfg, seed=derive_seed(cfg.seed, "count")).trainable_parameter_count()
        report = run_protocol(cfg, samples)
        rows.append(AblationRow(label=label, config=cfg, report=report, trainable_params=params))
    if axis == "fusion":
        counts = [r.trainable_params for r in rows]
        if len(set(counts)) != len(counts):
            raise ValueError(f"fusion modes must have pairwise-distinct parameter counts, got {counts}")
    return AblationTable(axis=axis, rows=tuple(rows))
