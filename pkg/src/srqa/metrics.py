"""Evaluation metrics and report aggregation.

Correlation metrics follow the usual IQA protocol: PLCC measures the
linear agreement between predictions and MOS, SRCC their rank agreement
(average ranks for ties). PSNR and SSIM serve as the classical
full-reference baselines. All functions are pure and safe to call from
parallel workers.

No logistic remapping is applied before PLCC by default; the standard
four-parameter fit is available as an explicit option.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Sequence, Tuple

import numpy as np
from scipy import signal, stats

from .errors import ConstantInputError, NumericError, ShapeMismatchError

_CORR_BOUND_TOL = 1e-9


def _as_vector_pair(pred, mos) -> Tuple[np.ndarray, np.ndarray]:
    p = np.asarray(pred, dtype=np.float64).ravel()
    m = np.asarray(mos, dtype=np.float64).ravel()
    if p.shape != m.shape:
        raise ShapeMismatchError(f"length mismatch: {p.shape[0]} vs {m.shape[0]}")
    if p.shape[0] < 3:
        raise ShapeMismatchError(f"correlations need at least 3 samples, got {p.shape[0]}")
    for name, v in (("pred", p), ("mos", m)):
        if np.ptp(v) == 0.0:
            raise ConstantInputError(f"{name} vector is constant; correlation undefined")
    return p, m


def plcc(pred: Sequence[float], mos: Sequence[float]) -> float:
    """Pearson linear correlation between predictions and MOS."""
    p, m = _as_vector_pair(pred, mos)
    return float(stats.pearsonr(p, m).statistic)


def srcc(pred: Sequence[float], mos: Sequence[float]) -> float:
    """Spearman rank-order correlation, with average ranks for ties."""
    p, m = _as_vector_pair(pred, mos)
    return float(stats.spearmanr(p, m).statistic)


def four_param_logistic_fit(pred: Sequence[float], mos: Sequence[float]) -> np.ndarray:
    """Map predictions through a fitted 4-parameter logistic curve.

    Optional preprocessing some IQA protocols apply before PLCC. Returns
    the remapped predictions.
    """
    from scipy.optimize import curve_fit

    p, m = _as_vector_pair(pred, mos)

    def logistic(x, b1, b2, b3, b4):
        return (b1 - b2) / (1.0 + np.exp(-(x - b3) / abs(b4))) + b2

    p0 = [float(m.max()), float(m.min()), float(p.mean()), float(p.std() or 1.0)]
    try:
        popt, _ = curve_fit(logistic, p, m, p0=p0, maxfev=20000)
    except Exception as e:
        raise NumericError(f"logistic fit failed: {e}") from e
    return logistic(p, *popt)


def plcc_logistic(pred: Sequence[float], mos: Sequence[float]) -> float:
    """PLCC computed after the four-parameter logistic remapping."""
    return plcc(four_param_logistic_fit(pred, mos), mos)


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """Peak signal-to-noise ratio in dB for images in [0, 1].

    Returns ``math.inf`` for identical images (zero MSE).
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeMismatchError(f"image shapes differ: {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)


def _gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    half = (size - 1) / 2.0
    coords = np.arange(size) - half
    g = np.exp(-(coords**2) / (2.0 * sigma**2))
    w = np.outer(g, g)
    return w / w.sum()


def to_grayscale(img: np.ndarray) -> np.ndarray:
    """HxWx3 -> HxW luminance (ITU-R BT.601 weights)."""
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 2:
        return img
    if img.ndim == 3 and img.shape[2] == 3:
        return img @ np.array([0.299, 0.587, 0.114])
    raise ShapeMismatchError(f"expected HxW or HxWx3, got {img.shape}")


def ssim(
    a: np.ndarray,
    b: np.ndarray,
    window_size: int = 11,
    sigma: float = 1.5,
    k1: float = 0.01,
    k2: float = 0.03,
) -> float:
    """Mean local structural similarity for grayscale images in [0, 1].

    Uses the standard single-scale formulation: Gaussian-weighted local
    statistics over an 11x11 window (sigma 1.5), stabilizers derived from
    k1/k2 against a unit dynamic range, averaged over valid positions.
    HxWx3 inputs are converted to luminance first.
    """
    a = to_grayscale(a)
    b = to_grayscale(b)
    if a.shape != b.shape:
        raise ShapeMismatchError(f"image shapes differ: {a.shape} vs {b.shape}")
    if min(a.shape) < window_size:
        raise ShapeMismatchError(
            f"image {a.shape} smaller than the {window_size}x{window_size} window"
        )
    w = _gaussian_window(window_size, sigma)
    c1 = k1**2
    c2 = k2**2

    def filt(x: np.ndarray) -> np.ndarray:
        return signal.correlate2d(x, w, mode="valid")

    mu_a = filt(a)
    mu_b = filt(b)
    var_a = filt(a * a) - mu_a**2
    var_b = filt(b * b) - mu_b**2
    cov = filt(a * b) - mu_a * mu_b
    num = (2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2)
    den = (mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


@dataclass(frozen=True)
class EvalReport:
    """PLCC/SRCC of one evaluation pass over a test split."""

    plcc: float
    srcc: float
    n_samples: int

    def __post_init__(self) -> None:
        if self.n_samples < 3:
            raise ValueError(f"correlations need at least 3 samples, got {self.n_samples}")
        for name, v in (("plcc", self.plcc), ("srcc", self.srcc)):
            if not math.isfinite(v) or abs(v) > 1.0 + _CORR_BOUND_TOL:
                raise ValueError(f"{name}={v} outside [-1, 1]")

    def to_dict(self) -> dict:
        return {"plcc": self.plcc, "srcc": self.srcc, "n_samples": self.n_samples}


@dataclass(frozen=True)
class ProtocolReport:
    """Per-repeat reports plus their mean, the protocol's headline numbers."""

    repeats: tuple
    plcc_mean: float
    srcc_mean: float

    @classmethod
    def from_repeats(cls, repeats: Sequence[EvalReport]) -> "ProtocolReport":
        if not repeats:
            raise ValueError("at least one repeat is required")
        return cls(
            repeats=tuple(repeats),
            plcc_mean=float(np.mean([r.plcc for r in repeats])),
            srcc_mean=float(np.mean([r.srcc for r in repeats])),
        )

    def to_dict(self) -> dict:
        return {
            "repeats": [r.to_dict() for r in self.repeats],
            "plcc_mean": self.plcc_mean,
            "srcc_mean": self.srcc_mean,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"

    def to_text_table(self) -> str:
        lines = ["repeat\tplcc\tsrcc\tn_samples"]
        for i, r in enumerate(self.repeats):
            lines.append(f"{i}\t{r.plcc:.6f}\t{r.srcc:.6f}\t{r.n_samples}")
        lines.append(f"mean\t{self.plcc_mean:.6f}\t{self.srcc_mean:.6f}\t-")
        return "\n".join(lines) + "\n"


def write_scatter(path, pred: Sequence[float], mos: Sequence[float]) -> None:
    """Write (prediction, MOS) pairs as a TSV file for external plotting."""
    p = np.asarray(pred, dtype=np.float64).ravel()
    m = np.asarray(mos, dtype=np.float64).ravel()
    if p.shape != m.shape:
        raise ShapeMismatchError(f"length mismatch: {p.shape[0]} vs {m.shape[0]}")
    with open(path, "w", encoding="utf-8") as f:
        f.write("# pred\tmos\n")
        for pi, mi in zip(p, m):
            f.write(f"{pi!r}\t{mi!r}\n")
