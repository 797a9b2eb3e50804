#!/usr/bin/env python3
"""
Residual Poisson-Gaussian denoising and the full correction pipeline.

After banding and fixed-pattern removal the remaining noise follows
var = a * mean + b. A generalized Anscombe transform makes it roughly
unit-variance, a Gaussian or non-local-means smoother runs in that domain
(per Bayer phase by default) and the algebraic inverse maps back to DN.
"""

import logging
import threading
import time
from collections import OrderedDict
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Dict, List, Optional, Tuple, Union

import numpy as np
from scipy import ndimage
from skimage.restoration import denoise_nl_means

from config import Config
from errors import ArgumentError, ExternalDenoiserTimeout, FrameFormatError, PbnEstimationError
from fpn_calib import FpnMap
from pbn_removal import PbnEstimate, default_theta, estimate_pbn, subtract_banding
from pg_calib import PgParams
from raw_core import Frame, FloatFrame, RawFrame, as_float, read_pgm_samples, save_frame

logger = logging.getLogger(__name__)

SMOOTHERS = ('gaussian', 'nlm')
# stage names passed to a pipeline hook, in execution order
HOOK_STAGES = (
    'input', 'pbn_params', 'pbn_removed', 'fpn_slope', 'fpn_offset',
    'fpn_removed', 'vst', 'smoothed', 'denoised',
)
# Rows of the ablation table
PIPELINE_STAGES = ('noisy', 'pbn_removed', 'fpn_removed', 'denoised')

StageHook = Callable[[str, np.ndarray], np.ndarray]


@dataclass(frozen=True)
class DenoiseConfig:
    """
    Residual denoiser settings.

    pg is the (a, b) line used by the transform; the pipeline fills it from
    the calibrated PgParams at the frame's gain. A gaussian smoother with
    gaussian_sigma 0 is the identity.
    """
    pg: Optional[Tuple[float, float]] = None
    smoother: str = Config.DENOISE_SMOOTHER
    strength: float = Config.DENOISE_STRENGTH
    nlm_patch_radius: int = Config.DENOISE_NLM_PATCH_RADIUS
    nlm_search_radius: int = Config.DENOISE_NLM_SEARCH_RADIUS
    gaussian_sigma: float = Config.DENOISE_GAUSSIAN_SIGMA
    process_per_bayer_phase: bool = Config.DENOISE_PER_BAYER_PHASE

    def __post_init__(self):
        if self.smoother not in SMOOTHERS:
            raise ArgumentError(f"smoother must be one of {SMOOTHERS}, got {self.smoother!r}")
        if not self.strength > 0:
            raise ArgumentError(f"strength must be > 0, got {self.strength}")
        if self.nlm_patch_radius < 1 or self.nlm_search_radius < 1:
            raise ArgumentError(
                f"NLM radii must be positive, got patch={self.nlm_patch_radius}, "
                f"search={self.nlm_search_radius}"
            )
        if not self.gaussian_sigma >= 0:
            raise ArgumentError(f"gaussian_sigma must be >= 0, got {self.gaussian_sigma}")
        if self.pg is not None:
            a, b = self.pg
            if not (a >= 0 and b >= 0):
                raise ArgumentError(f"pg entry must be non-negative, got {self.pg}")
            object.__setattr__(self, 'pg', (float(a), float(b)))

    @classmethod
    def identity(cls) -> 'DenoiseConfig':
        return cls(smoother='gaussian', gaussian_sigma=0.0)

    @property
    def is_identity(self) -> bool:
        return self.smoother == 'gaussian' and self.gaussian_sigma == 0

    def to_dict(self) -> Dict:
        return {
            'pg': list(self.pg) if self.pg else None,
            'smoother': self.smoother,
            'strength': self.strength,
            'nlm_patch_radius': self.nlm_patch_radius,
            'nlm_search_radius': self.nlm_search_radius,
            'gaussian_sigma': self.gaussian_sigma,
            'process_per_bayer_phase': self.process_per_bayer_phase,
        }

    @classmethod
    def from_dict(cls, data: Dict) -> 'DenoiseConfig':
        defaults = cls()
        pg = data.get('pg')
        return cls(
            pg=tuple(pg) if pg else None,
            smoother=str(data.get('smoother', defaults.smoother)).lower(),
            strength=float(data.get('strength', defaults.strength)),
            nlm_patch_radius=int(data.get('nlm_patch_radius', defaults.nlm_patch_radius)),
            nlm_search_radius=int(data.get('nlm_search_radius', defaults.nlm_search_radius)),
            gaussian_sigma=float(data.get('gaussian_sigma', defaults.gaussian_sigma)),
            process_per_bayer_phase=bool(data.get('process_per_bayer_phase',
                                                  defaults.process_per_bayer_phase)),
        )


# ------------------------------------------------------------------- VST

def _check_shot_gain(a: float):
    if not a > 0:
        raise ArgumentError(f"VST needs a > 0, got a={a}")


def anscombe_forward(values: np.ndarray, a: float, b: float) -> np.ndarray:
    _check_shot_gain(a)
    if not b >= 0:
        raise ArgumentError(f"VST needs b >= 0, got b={b}")
    argument = a * np.asarray(values, dtype=np.float64) + 0.375 * a * a + b
    return (2.0 / a) * np.sqrt(np.maximum(argument, 0.0))


def anscombe_inverse(values: np.ndarray, a: float, b: float) -> np.ndarray:
    _check_shot_gain(a)
    z = np.asarray(values, dtype=np.float64)
    return (a / 4.0) * z * z - 0.375 * a - b / a


def vst_forward(frame: FloatFrame, a: float, b: float) -> FloatFrame:
    """Generalized Anscombe transform: noise std close to 1 when var = a * mean + b"""
    frame = as_float(frame)
    return frame.with_samples(anscombe_forward(frame.samples, a, b), 'vst')


def vst_inverse(frame: FloatFrame, a: float, b: float) -> FloatFrame:
    """Algebraic inverse of vst_forward"""
    frame = as_float(frame)
    return frame.with_samples(anscombe_inverse(frame.samples, a, b), 'vst_inverse')


# -------------------------------------------------------------- smoothing

def _smooth_plane(z: np.ndarray, config: DenoiseConfig) -> np.ndarray:
    if config.smoother == 'gaussian':
        return ndimage.gaussian_filter(z, sigma=config.gaussian_sigma * config.strength, mode='mirror')
    return denoise_nl_means(
        z,
        patch_size=2 * config.nlm_patch_radius + 1,
        patch_distance=config.nlm_search_radius,
        h=0.8 * config.strength,
        sigma=config.strength,
        fast_mode=True,
        channel_axis=None,
    )


def _smooth(z: np.ndarray, config: DenoiseConfig) -> np.ndarray:
    if not config.process_per_bayer_phase:
        return _smooth_plane(z, config)
    out = np.empty_like(z)
    for dy in (0, 1):
        for dx in (0, 1):
            out[dy::2, dx::2] = _smooth_plane(np.ascontiguousarray(z[dy::2, dx::2]), config)
    return out


def _apply(hook: Optional[StageHook], stage: str, values: np.ndarray) -> np.ndarray:
    if hook is None:
        return values
    return np.asarray(hook(stage, values), dtype=np.float64)


def denoise_residual(frame: Frame, config: DenoiseConfig, hook: Optional[StageHook] = None) -> FloatFrame:
    """
    Smooth residual Poisson-Gaussian noise in the stabilized domain.

    The identity smoother returns the input unchanged. Otherwise config.pg
    must be set and the output is clamped below at -black_level. With a = 0
    the noise is already homoscedastic: the frame is scaled by 1/sqrt(b)
    instead of transformed, and a = b = 0 leaves it unchanged.
    """
    frame = as_float(frame)
    if config.is_identity:
        return frame.with_samples(frame.samples, 'residual_denoised')
    if config.pg is None:
        raise ArgumentError("denoise_residual needs config.pg = (a, b)")
    a, b = config.pg

    if a > 0:
        # VST is pointwise, so transforming the whole mosaic equals transforming each phase
        z = _apply(hook, 'vst', anscombe_forward(frame.samples, a, b))
        smoothed = _apply(hook, 'smoothed', _smooth(z, config))
        values = anscombe_inverse(smoothed, a, b)
    elif b > 0:
        scale = float(np.sqrt(b))
        z = _apply(hook, 'vst', frame.samples / scale)
        smoothed = _apply(hook, 'smoothed', _smooth(z, config))
        values = smoothed * scale
    else:
        logger.debug("PG entry is (0, 0); nothing to smooth")
        return frame.with_samples(frame.samples, 'residual_denoised')
    values = np.maximum(values, -float(frame.black_level))
    return frame.with_samples(values, 'residual_denoised')


# ------------------------------------------------------- external denoiser

class ExternalDenoiser:
    """
    Directory hook for a separately run denoiser.

    Each call writes NNNN_input.pgm (black level added back, clamped to the
    container) and waits for NNNN_output.pgm of the same shape.
    """

    def __init__(self, exchange_dir: Union[str, Path],
                 timeout: float = Config.EXTERNAL_DENOISER_TIMEOUT,
                 poll_interval: float = Config.EXTERNAL_DENOISER_POLL_INTERVAL,
                 start_index: int = 0):
        if not timeout > 0 or not poll_interval > 0:
            raise ArgumentError(f"timeout and poll_interval must be positive, got {timeout}, {poll_interval}")
        self.exchange_dir = Path(exchange_dir)
        self.exchange_dir.mkdir(parents=True, exist_ok=True)
        self.timeout = timeout
        self.poll_interval = poll_interval
        self._next_index = start_index
        self._lock = threading.Lock()

    def _claim_index(self) -> int:
        with self._lock:
            index = self._next_index
            self._next_index += 1
            return index

    def __call__(self, frame: FloatFrame) -> FloatFrame:
        index = self._claim_index()
        input_path = self.exchange_dir / f"{index:04d}_input.pgm"
        output_path = self.exchange_dir / f"{index:04d}_output.pgm"

        samples = np.clip(np.rint(frame.samples + frame.black_level), 0, frame.full_scale)
        save_frame(RawFrame(samples=samples, bit_depth=frame.bit_depth, bayer_pattern=frame.bayer_pattern,
                            black_level=frame.black_level, analog_gain=frame.analog_gain,
                            exposure_time=frame.exposure_time, sensor_id=frame.sensor_id,
                            frame_index=index), input_path)
        logger.debug(f"Wrote {input_path}, waiting up to {self.timeout:.1f}s for {output_path.name}")

        deadline = time.monotonic() + self.timeout
        while True:
            if output_path.exists():
                try:
                    output = read_pgm_samples(output_path)
                except FrameFormatError as e:
                    # may still be mid-write
                    logger.debug(f"Output {output_path.name} not readable yet: {e}")
                else:
                    if output.shape != frame.samples.shape:
                        raise ArgumentError(
                            f"{output_path}: shape {output.shape} differs from input {frame.samples.shape}"
                        )
                    values = output.astype(np.float64) - frame.black_level
                    return frame.with_samples(values, 'external_denoised')
            if time.monotonic() >= deadline:
                logger.warning(f"External denoiser produced no {output_path.name} within {self.timeout:.1f}s")
                raise ExternalDenoiserTimeout(f"no {output_path} after {self.timeout:.1f}s")
            time.sleep(self.poll_interval)


# ---------------------------------------------------------------- pipeline

@dataclass
class PipelineResult:
    """Output of run_pipeline with the retained stage frames"""
    output: FloatFrame
    stages: Dict[str, FloatFrame] = field(default_factory=OrderedDict)
    pbn: Optional[PbnEstimate] = None
    pg_entry: Optional[Tuple[float, float]] = None
    theta: float = 0.0
    warnings: List[str] = field(default_factory=list)


def pipeline_theta(values: np.ndarray, black_level: float,
                   pg_entry: Optional[Tuple[float, float]]) -> float:
    """Flatness threshold from the variance line at the frame's median signal"""
    if pg_entry is None:
        return default_theta(0.0)
    a, b = pg_entry
    signal = max(float(np.median(values)) - black_level, 0.0)
    return default_theta(np.sqrt(a * signal + b))


def _check_calibration(frame: FloatFrame, fpn: FpnMap):
    if fpn.shape != frame.samples.shape:
        raise ArgumentError(f"FPN map shape {fpn.shape} does not match frame {frame.samples.shape}")
    if fpn.sensor_id and frame.sensor_id and fpn.sensor_id != frame.sensor_id:
        raise ArgumentError(f"FPN map belongs to sensor '{fpn.sensor_id}', frame to '{frame.sensor_id}'")


def run_pipeline(raw: Frame, fpn: FpnMap, pg: Optional[PgParams], config: Optional[DenoiseConfig] = None,
                 denoiser: Optional[Callable[[FloatFrame], FloatFrame]] = None,
                 hook: Optional[StageHook] = None, period: int = Config.PBN_PERIOD) -> PipelineResult:
    """
    Banding removal, FPN removal and residual denoising of one frame.

    A banding estimation failure falls back to kappa = 0 with a warning.
    hook(stage, values) may replace the values flowing through each stage.
    """
    config = config or DenoiseConfig()
    frame = as_float(raw, 'noisy')
    _check_calibration(frame, fpn)
    warnings: List[str] = []

    pg_entry = pg.entry(frame.analog_gain) if pg is not None and pg.entries else None
    noisy = frame.with_samples(_apply(hook, 'input', frame.samples), 'noisy')

    theta = pipeline_theta(noisy.samples, frame.black_level, pg_entry)
    try:
        estimate = estimate_pbn(noisy, theta=theta, period=period)
    except PbnEstimationError as e:
        message = f"PBN estimation failed, continuing with kappa=0: {e}"
        logger.warning(message)
        warnings.append(message)
        estimate = PbnEstimate.zero(period, frame.height)
    if hook is not None:
        kappa = float(_apply(hook, 'pbn_params', np.array([estimate.kappa]))[0])
        estimate = replace(estimate, kappa=kappa)

    pbn_removed = subtract_banding(noisy, estimate.kappa, estimate.phase, estimate.period)
    pbn_removed = pbn_removed.with_samples(_apply(hook, 'pbn_removed', pbn_removed.samples), 'pbn_removed')

    if hook is not None:
        fpn = replace(fpn, K=_apply(hook, 'fpn_slope', fpn.K.astype(np.float64)),
                      B=_apply(hook, 'fpn_offset', fpn.B.astype(np.float64)))
    predicted = fpn.predict_array(frame.analog_gain, frame.exposure_time)
    fpn_removed = pbn_removed.with_samples(
        _apply(hook, 'fpn_removed', pbn_removed.samples - predicted), 'fpn_removed'
    )

    if denoiser is not None:
        denoised = denoiser(fpn_removed)
    else:
        stage_config = config if pg_entry is None else replace(config, pg=pg_entry)
        denoised = denoise_residual(fpn_removed, stage_config, hook=hook)
    denoised = denoised.with_samples(_apply(hook, 'denoised', denoised.samples), denoised.provenance)

    stages = OrderedDict(zip(PIPELINE_STAGES, (noisy, pbn_removed, fpn_removed, denoised)))
    return PipelineResult(output=denoised, stages=stages, pbn=estimate, pg_entry=pg_entry,
                          theta=theta, warnings=warnings)


def denoise_pipeline(raw: Frame, fpn: FpnMap, pg: Optional[PgParams],
                     config: Optional[DenoiseConfig] = None, **kwargs) -> FloatFrame:
    """Full correction chain; returns only the final frame"""
    return run_pipeline(raw, fpn, pg, config, **kwargs).output
