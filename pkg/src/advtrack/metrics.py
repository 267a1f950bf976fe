"""Perturbation diagnostics: SSIM, L1 and super-perturbed counting."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from advtrack.grad import DimensionError

WIN = 11
SIGMA = 1.5
C1 = (0.01 * 255) ** 2
C2 = (0.03 * 255) ** 2
SUPER_PERTURBED_BELOW = 0.5


def _gauss1d(size: int = WIN, sigma: float = SIGMA) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2
    g = np.exp(-(x**2) / (2 * sigma**2))
    return g / g.sum()


_G = _gauss1d()


def _filter_valid(x: np.ndarray) -> np.ndarray:
    """Separable Gaussian filtering of ``H x W`` without padding."""
    rows = sliding_window_view(x, WIN, axis=0) @ _G
    return sliding_window_view(rows, WIN, axis=1) @ _G


def _ssim_channel(a: np.ndarray, b: np.ndarray) -> float:
    mu_a, mu_b = _filter_valid(a), _filter_valid(b)
    var_a = _filter_valid(a * a) - mu_a**2
    var_b = _filter_valid(b * b) - mu_b**2
    cov = _filter_valid(a * b) - mu_a * mu_b
    num = (2 * mu_a * mu_b + C1) * (2 * cov + C2)
    den = (mu_a**2 + mu_b**2 + C1) * (var_a + var_b + C2)
    return float(np.mean(num / den))


def ssim(a, b) -> float:
    """Mean local SSIM (11x11 Gaussian window, sigma 1.5), averaged over channels.

    Inputs are ``H x W`` or ``H x W x C`` arrays on the 0..255 scale.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionError(f"ssim extents differ: {a.shape} vs {b.shape}")
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    if a.shape[0] < WIN or a.shape[1] < WIN:
        raise DimensionError(f"ssim needs at least {WIN}x{WIN} pixels, got {a.shape[:2]}")
    return float(np.mean([_ssim_channel(a[..., c], b[..., c]) for c in range(a.shape[2])]))


def l1_norm(p) -> float:
    values = getattr(p, "values", p)
    return float(np.sum(np.abs(np.asarray(values, dtype=np.float64))))


@dataclass(frozen=True)
class PerturbDiagnostics:
    ssim: float
    l1: float

    @property
    def super_perturbed(self) -> bool:
        return self.ssim < SUPER_PERTURBED_BELOW


def diagnose(clean, adversarial) -> PerturbDiagnostics:
    clean = np.asarray(clean, dtype=np.float64)
    adversarial = np.asarray(adversarial, dtype=np.float64)
    return PerturbDiagnostics(ssim(clean, adversarial), l1_norm(adversarial - clean))


def count_super_perturbed(diags) -> int:
    """Entries whose SSIM falls strictly below 0.5 (accepts diagnostics or raw SSIM values)."""
    return sum(1 for d in diags if getattr(d, "ssim", d) < SUPER_PERTURBED_BELOW)
