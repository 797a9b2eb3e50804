#!/usr/bin/env python3
"""
Fixed-pattern noise (FPN) calibration and removal.

Per pixel, the dark level is modeled as K(x, y) * gain * t + B(x, y).
Calibration fits that line by ordinary least squares against u = gain * t
over several temporally averaged, PBN-corrected dark sets.
"""

import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np

from errors import ArgumentError, FrameFormatError, PbnEstimationError, RankDeficiencyError
from pbn_removal import default_theta, estimate_pbn, remove_pbn, temporal_sigma
from raw_core import Frame, FloatFrame, FrameStack, as_float

logger = logging.getLogger(__name__)

FPN_MAGIC = b'FPNMAP01'
# maps that were not fitted carry these nominal calibration points
NOMINAL_POINTS = ((1.0, 1.0), (1.0, 2.0))


def _distinct_products(points: Sequence[Tuple[float, float]]) -> int:
    return len({float(g) * float(t) for g, t in points})


@dataclass(frozen=True, eq=False)
class FpnMap:
    """Per-pixel slope K (DN per gain*ms) and offset B (DN)"""
    K: np.ndarray
    B: np.ndarray
    fit_residual_rms: float = 0.0
    calibration_points: Tuple[Tuple[float, float], ...] = field(default_factory=lambda: NOMINAL_POINTS)
    sensor_id: str = ''

    def __post_init__(self):
        # float32 storage makes the .fpn round trip bit-exact
        K = np.array(self.K, dtype=np.float32, copy=True)
        B = np.array(self.B, dtype=np.float32, copy=True)
        if K.ndim != 2 or K.shape != B.shape:
            raise ArgumentError(f"K {K.shape} and B {B.shape} must be 2-D grids of the same shape")
        if not (np.all(np.isfinite(K)) and np.all(np.isfinite(B))):
            raise ArgumentError("FPN map contains NaN or Inf")
        points = tuple((float(g), float(t)) for g, t in self.calibration_points)
        if _distinct_products(points) < 2:
            raise ArgumentError(f"calibration_points need >= 2 distinct gain*t values, got {points}")
        if self.fit_residual_rms < 0:
            raise ArgumentError(f"fit_residual_rms must be >= 0, got {self.fit_residual_rms}")
        K.setflags(write=False)
        B.setflags(write=False)
        object.__setattr__(self, 'K', K)
        object.__setattr__(self, 'B', B)
        object.__setattr__(self, 'calibration_points', points)
        object.__setattr__(self, 'fit_residual_rms', float(self.fit_residual_rms))

    @classmethod
    def zeros(cls, width: int, height: int, sensor_id: str = '') -> 'FpnMap':
        return cls(K=np.zeros((height, width)), B=np.zeros((height, width)), sensor_id=sensor_id)

    @property
    def width(self) -> int:
        return self.K.shape[1]

    @property
    def height(self) -> int:
        return self.K.shape[0]

    @property
    def shape(self):
        return self.K.shape

    def predict_array(self, gain: float, t: float) -> np.ndarray:
        return self.K.astype(np.float64) * (float(gain) * float(t)) + self.B.astype(np.float64)


def predict_fpn(fpn: FpnMap, gain: float, t: float) -> FloatFrame:
    """K * gain * t + B at every pixel"""
    if not gain >= 1.0:
        raise ArgumentError(f"gain must be >= 1, got {gain}")
    if not t > 0:
        raise ArgumentError(f"exposure time must be > 0, got {t}")
    return FloatFrame(
        samples=fpn.predict_array(gain, t),
        provenance='fpn_prediction',
        analog_gain=gain,
        exposure_time=t,
        sensor_id=fpn.sensor_id,
    )


def remove_fpn(frame: Frame, fpn: FpnMap, gain: Optional[float] = None,
               t: Optional[float] = None) -> FloatFrame:
    """Subtract the predicted FPN; gain and t default to the frame's metadata"""
    float_frame = as_float(frame)
    if float_frame.samples.shape != fpn.shape:
        raise ArgumentError(
            f"frame shape {float_frame.samples.shape} does not match FPN map shape {fpn.shape}"
        )
    gain = float_frame.analog_gain if gain is None else gain
    t = float_frame.exposure_time if t is None else t
    predicted = predict_fpn(fpn, gain, t).samples
    return float_frame.with_samples(float_frame.samples - predicted, 'fpn_removed')


def fit_fpn_lines(means: Sequence[np.ndarray], products: Sequence[float]):
    """
    Closed-form per-pixel OLS of dark means against u = gain * t.

    Returns:
        (K, B, residual_rms)
    """
    u = np.asarray(products, dtype=np.float64)
    if len(set(u.tolist())) < 2:
        raise RankDeficiencyError(
            f"FPN calibration needs at least 2 distinct gain*t values, got {sorted(set(u.tolist()))}"
        )
    Y = np.stack([np.asarray(m, dtype=np.float64) for m in means])
    u_centered = u - u.mean()
    s_uu = float(np.dot(u_centered, u_centered))
    Y_mean = Y.mean(axis=0)
    K = np.tensordot(u_centered, Y - Y_mean, axes=(0, 0)) / s_uu
    B = Y_mean - K * u.mean()
    residual = Y - (K[None] * u[:, None, None] + B[None])
    rms = float(np.sqrt(np.mean(residual ** 2)))
    return K, B, rms


def corrected_dark_mean(stack: FrameStack, theta: Optional[float] = None,
                        set_index: Optional[int] = None) -> np.ndarray:
    """
    Temporal mean of a dark stack after per-frame PBN removal.

    Without an explicit theta, the flatness threshold follows the stack's own
    temporal noise.
    """
    if theta is None:
        theta = default_theta(temporal_sigma(stack.array()))
    total = np.zeros(stack.shape, dtype=np.float64)
    for frame in stack:
        try:
            estimate = estimate_pbn(frame, theta=theta)
        except PbnEstimationError as e:
            raise PbnEstimationError(str(e), set_index=set_index) from e
        total += remove_pbn(frame, estimate).samples
    return total / len(stack)


def calibrate_fpn_from_means(means: Sequence[np.ndarray], points: Sequence[Tuple[float, float]],
                             sensor_id: str = '') -> FpnMap:
    """Fit an FpnMap from already averaged, PBN-corrected dark means"""
    if len(means) != len(points):
        raise ArgumentError(f"{len(means)} means but {len(points)} calibration points")
    if len({np.shape(m) for m in means}) > 1:
        raise ArgumentError("dark means do not share one shape")
    K, B, rms = fit_fpn_lines(means, [g * t for g, t in points])
    return FpnMap(K=K, B=B, fit_residual_rms=rms,
                  calibration_points=tuple(points), sensor_id=sensor_id)


def calibrate_fpn(dark_sets: Sequence[Tuple[FrameStack, float, float]],
                  theta: Optional[float] = None) -> FpnMap:
    """
    Calibrate per-pixel FPN slope and offset from dark-frame sets.

    Args:
        dark_sets: (stack, analog_gain, exposure_time_ms) per set
        theta: PBN flatness threshold (default derived per set from its temporal noise)

    Raises:
        RankDeficiencyError: fewer than 2 distinct gain*t products
        ArgumentError: stacks of different shapes
        PbnEstimationError: PBN estimation failed; carries the set index
    """
    dark_sets = list(dark_sets)
    points = [(float(g), float(t)) for _, g, t in dark_sets]
    if _distinct_products(points) < 2:
        raise RankDeficiencyError(
            f"FPN calibration needs at least 2 dark sets with distinct gain*t, got {points}"
        )
    shapes = {stack.shape for stack, _, _ in dark_sets}
    if len(shapes) > 1:
        raise ArgumentError(f"dark stacks have mismatched shapes: {sorted(shapes)}")

    means: List[np.ndarray] = []
    for index, (stack, gain, t) in enumerate(dark_sets):
        first = stack.first
        if (first.analog_gain, first.exposure_time) != (gain, t):
            logger.warning(
                f"Dark set {index}: frame metadata gain={first.analog_gain} t={first.exposure_time} "
                f"differs from declared gain={gain} t={t}; using declared values"
            )
        means.append(corrected_dark_mean(stack, theta=theta, set_index=index))
        logger.debug(f"Dark set {index}: {len(stack)} frames at u={gain * t:g}")

    sensor_id = dark_sets[0][0].first.sensor_id
    fpn = calibrate_fpn_from_means(means, points, sensor_id=sensor_id)
    logger.info(
        f"FPN calibrated from {len(dark_sets)} sets ({fpn.width}x{fpn.height}): "
        f"mean K={float(fpn.K.mean()):.4f}, mean B={float(fpn.B.mean()):.3f}, "
        f"residual RMS={fpn.fit_residual_rms:.4f} DN"
    )
    return fpn


# ---------------------------------------------------------------- .fpn files

def save_fpn_map(fpn: FpnMap, path: Union[str, Path]):
    """Magic, LE uint32 header length, JSON header, K plane, B plane (LE float32)"""
    header = json.dumps({
        'width': fpn.width,
        'height': fpn.height,
        'calibration_points': [list(p) for p in fpn.calibration_points],
        'fit_residual_rms': fpn.fit_residual_rms,
        'sensor_id': fpn.sensor_id,
        'dtype': '<f4',
    }, sort_keys=True).encode('utf-8')
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, 'wb') as f:
            f.write(FPN_MAGIC)
            f.write(struct.pack('<I', len(header)))
            f.write(header)
            f.write(fpn.K.astype('<f4').tobytes())
            f.write(fpn.B.astype('<f4').tobytes())
    except OSError as e:
        logger.error(f"Cannot write FPN map to {path}: {e}")
        raise


def load_fpn_map(path: Union[str, Path]) -> FpnMap:
    path = Path(path)
    try:
        data = path.read_bytes()
    except FileNotFoundError as e:
        raise FrameFormatError(f"{path}: FPN map not found") from e
    if data[:8] != FPN_MAGIC:
        raise FrameFormatError(f"{path}: not an FPN map (bad magic {data[:8]!r})")
    try:
        (header_length,) = struct.unpack('<I', data[8:12])
    except struct.error as e:
        raise FrameFormatError(f"{path}: truncated FPN header ({len(data)} bytes)") from e
    if len(data) < 12 + header_length:
        raise FrameFormatError(f"{path}: truncated FPN header, expected {header_length} bytes of JSON")
    try:
        header = json.loads(data[12:12 + header_length].decode('utf-8'))
        width, height = int(header['width']), int(header['height'])
        fit_residual_rms = float(header['fit_residual_rms'])
        calibration_points = tuple(tuple(p) for p in header['calibration_points'])
        sensor_id = str(header.get('sensor_id', ''))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise FrameFormatError(f"{path}: corrupt FPN header: {e}") from e
    except (KeyError, TypeError, ValueError, AttributeError) as e:
        raise FrameFormatError(f"{path}: FPN header is missing or has a bad field: {e!r}") from e
    if width <= 0 or height <= 0:
        raise FrameFormatError(f"{path}: bad FPN map size {width}x{height}")

    plane = width * height * 4
    body = data[12 + header_length:]
    if len(body) != 2 * plane:
        raise FrameFormatError(f"{path}: expected {2 * plane} bytes of K/B planes, got {len(body)}")
    K = np.frombuffer(body[:plane], dtype='<f4').reshape(height, width)
    B = np.frombuffer(body[plane:], dtype='<f4').reshape(height, width)
    return FpnMap(
        K=K,
        B=B,
        fit_residual_rms=fit_residual_rms,
        calibration_points=calibration_points,
        sensor_id=sensor_id,
    )
