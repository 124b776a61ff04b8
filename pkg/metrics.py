"""
Reconstruction quality metrics and the evaluation report.
"""

import json
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Sequence, Tuple

import numpy as np

from errors import DimensionError

PSNR_CAP = 100.0
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """10·log10(1/MSE) for images in [0, 1], capped at 100 dB."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionError(f"psnr shapes differ: {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse < 1e-10:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * np.log10(1.0 / mse))


def ssim(a: np.ndarray, b: np.ndarray) -> float:
    """Global single-window SSIM with C1 = 0.01², C2 = 0.03²."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionError(f"ssim shapes differ: {a.shape} vs {b.shape}")
    mu_a, mu_b = a.mean(), b.mean()
    var_a, var_b = a.var(), b.var()
    covariance = ((a - mu_a) * (b - mu_b)).mean()
    numerator = (2 * mu_a * mu_b + SSIM_C1) * (2 * covariance + SSIM_C2)
    denominator = (mu_a ** 2 + mu_b ** 2 + SSIM_C1) * (var_a + var_b + SSIM_C2)
    return float(numerator / denominator)


def mean_and_ci95(values: Sequence[float]) -> Tuple[float, float]:
    """Mean and 1.96·std/√n half-width."""
    values = np.asarray(values, dtype=np.float64)
    if values.size == 0:
        return 0.0, 0.0
    return float(values.mean()), float(1.96 * values.std() / np.sqrt(values.size))


@dataclass
class MetricsReport:
    accuracy_mean: float = 0.0
    accuracy_ci95: float = 0.0
    episodes: int = 0
    reconstruction: Dict[str, Dict[str, float]] = field(default_factory=dict)
    loss_curves: List[Dict[str, float]] = field(default_factory=list)

    def to_dict(self, include_curves: bool = False) -> Dict:
        payload = asdict(self)
        if not include_curves:
            payload.pop('loss_curves')
        return payload

    def to_json(self, include_curves: bool = False) -> str:
        return json.dumps(self.to_dict(include_curves), indent=2, sort_keys=True)

    def write(self, path: str, include_curves: bool = False):
        with open(path, 'w', encoding='utf-8') as handle:
            handle.write(self.to_json(include_curves) + '\n')
