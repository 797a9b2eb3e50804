#!/usr/bin/env python3
"""
Periodic banding noise (PBN) estimation and removal.

Vertical banding is a column-wise square wave of amplitude kappa. Within a row,
pixels period/2 apart share a Bayer phase and sit on opposite halves of the
wave, so on flat regions the second difference
|I(i-h) + I(i+h) - 2 I(i)| equals 4 kappa (h = period/2). Flat pixels are
selected by thresholding |I(i+h) - I(i-h)|.
"""

import json
import logging
from dataclasses import dataclass, field
from typing import Dict, Optional, Tuple

import numpy as np

from config import Config
from errors import ArgumentError, PbnEstimationError
from raw_core import Frame, FloatFrame, as_float

logger = logging.getLogger(__name__)


def square_wave(width: int, period: int, phase: int) -> np.ndarray:
    """+1 where ((x - phase) mod period) < period/2, else -1"""
    x = np.arange(width)
    return np.where(((x - phase) % period) < period // 2, 1.0, -1.0)


def default_theta(expected_sigma: float = 0.0) -> float:
    """Flatness threshold: a multiple of the expected noise sigma, floored"""
    return max(Config.PBN_THETA_FLOOR, Config.PBN_THETA_SIGMA_MULT * float(expected_sigma))


def temporal_sigma(cube: np.ndarray) -> float:
    """Median per-pixel temporal std of a (frames, height, width) cube; 0 for one frame"""
    if cube.shape[0] < 2:
        return 0.0
    variance = np.var(cube.astype(np.float64), axis=0, ddof=1)
    return float(np.sqrt(np.median(variance)))


@dataclass(frozen=True)
class PbnEstimate:
    """Amplitude and phase of the banding square wave in one frame"""
    kappa: float
    phase: int
    period: int
    per_row_kappa: Tuple[Optional[float], ...] = field(default_factory=tuple)
    rows_used: int = 0
    flat_fraction: float = 0.0
    theta: float = 0.0

    @classmethod
    def zero(cls, period: int = Config.PBN_PERIOD, height: int = 0) -> 'PbnEstimate':
        """Estimate that removes nothing (fallback when estimation fails)"""
        return cls(kappa=0.0, phase=0, period=period, per_row_kappa=(None,) * height)

    def to_dict(self) -> Dict:
        return {
            'kappa': self.kappa,
            'phase': self.phase,
            'period': self.period,
            'per_row_kappa': list(self.per_row_kappa),
            'rows_used': self.rows_used,
            'flat_fraction': self.flat_fraction,
            'theta': self.theta,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, data: Dict) -> 'PbnEstimate':
        return cls(
            kappa=float(data['kappa']),
            phase=int(data['phase']),
            period=int(data['period']),
            per_row_kappa=tuple(None if v is None else float(v) for v in data.get('per_row_kappa', [])),
            rows_used=int(data.get('rows_used', 0)),
            flat_fraction=float(data.get('flat_fraction', 0.0)),
            theta=float(data.get('theta', 0.0)),
        )


def estimate_pbn(frame: Frame, theta: Optional[float] = None, period: int = Config.PBN_PERIOD,
                 expected_sigma: Optional[float] = None,
                 min_flat_pixels: Optional[int] = None) -> PbnEstimate:
    """
    Estimate banding amplitude and phase from a single frame.

    Args:
        frame: raw or float frame (black level irrelevant, only differences are used)
        theta: flatness threshold in DN; derived from expected_sigma when omitted
        period: square-wave period in pixels, a multiple of 4
        expected_sigma: noise sigma used to derive theta
        min_flat_pixels: rows with fewer flat pixels are skipped

    Raises:
        ArgumentError: theta <= 0, period not a multiple of 4, frame too narrow
        PbnEstimationError: no row kept enough flat pixels
    """
    values = as_float(frame).samples
    height, width = values.shape

    if period < 4 or period % 4:
        raise ArgumentError(f"period must be a multiple of 4 so i +/- period/2 share a Bayer phase, got {period}")
    if width < 2 * period:
        raise ArgumentError(f"frame width {width} is below 2*period ({2 * period})")
    if theta is None:
        theta = default_theta(expected_sigma or 0.0)
    if not theta > 0:
        raise ArgumentError(f"theta must be positive, got {theta}")
    if min_flat_pixels is None:
        min_flat_pixels = max(Config.PBN_MIN_FLAT_PIXELS, width // 16)

    half = period // 2
    left = values[:, :-2 * half]     # I(i - h)
    center = values[:, half:-half]   # I(i)
    right = values[:, 2 * half:]     # I(i + h)

    flat = np.abs(right - left) < theta
    second = np.abs(left + right - 2.0 * center)
    counts = flat.sum(axis=1)
    sums = np.where(flat, second, 0.0).sum(axis=1)

    keep = counts >= min_flat_pixels
    if not keep.any():
        raise PbnEstimationError(
            f"no row kept {min_flat_pixels} flat pixels at theta={theta:.2f} "
            f"(best row had {int(counts.max())})"
        )

    row_kappa = np.full(height, np.nan)
    row_kappa[keep] = sums[keep] / (4.0 * counts[keep])
    kappa = float(np.mean(row_kappa[keep]))

    # Phase vote: on the wave, I(i+h) - I(i) = -2 kappa s(i)
    votes_mask = flat & keep[:, None]
    implied = -np.sign(right - center)
    columns = np.arange(half, width - half)
    class_votes = np.zeros(period)
    np.add.at(class_votes, columns % period, np.where(votes_mask, implied, 0.0).sum(axis=0))
    scores = [float(np.dot(square_wave(period, period, p), class_votes)) for p in range(period)]
    phase = int(np.argmax(scores))  # first maximum, so ties go to the lowest phase

    per_row = tuple(None if np.isnan(k) else float(k) for k in row_kappa)
    estimate = PbnEstimate(
        kappa=kappa,
        phase=phase,
        period=period,
        per_row_kappa=per_row,
        rows_used=int(keep.sum()),
        flat_fraction=float(flat.mean()),
        theta=float(theta),
    )
    logger.debug(
        f"PBN estimate: kappa={kappa:.3f} phase={phase} rows={estimate.rows_used}/{height} "
        f"flat={estimate.flat_fraction:.2%}"
    )
    return estimate


def subtract_banding(frame: Frame, kappa: float, phase: int, period: int) -> FloatFrame:
    """Subtract kappa * s(x) from every row"""
    float_frame = as_float(frame)
    pattern = kappa * square_wave(float_frame.width, period, phase)
    return float_frame.with_samples(float_frame.samples - pattern[None, :], 'pbn_removed')


def remove_pbn(frame: Frame, estimate: PbnEstimate) -> FloatFrame:
    """Invert the banding model with an estimate from estimate_pbn"""
    return subtract_banding(frame, estimate.kappa, estimate.phase, estimate.period)
