#!/usr/bin/env python3
"""
Forward sensor noise model.

A noisy raw frame is produced from a clean DN-valued frame as

    a * Poisson(I / a) + N(0, sigma^2) + U(-lambda/2, lambda/2)
        + K * gain * t + B + pbn_pattern + black_level

then rounded and clamped to the ADC range. Random numbers come from Philox
streams keyed by (seed, frame_index, row_block), so generating row blocks in
parallel yields the same frame as generating them in order.
"""

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Optional, Union

import numpy as np

from config import Config
from errors import ArgumentError, MetadataError
from fpn_calib import FpnMap, load_fpn_map
from pbn_removal import square_wave
from raw_core import (
    SUPPORTED_BIT_DEPTHS, Frame, FloatFrame, FrameStack, RawFrame, as_float, bayer_masks,
)

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class PbnParams:
    """Square-wave banding: amplitude kappa, period and phase in pixels"""
    kappa: float
    period: int = 4
    phase: int = 0

    def __post_init__(self):
        if self.period < 2 or self.period % 2:
            raise ArgumentError(f"PBN period must be even and >= 2, got {self.period}")
        if not self.kappa >= 0:
            raise ArgumentError(f"PBN kappa must be >= 0, got {self.kappa}")
        if not 0 <= self.phase < self.period:
            raise ArgumentError(f"PBN phase must be in [0, {self.period}), got {self.phase}")

    def to_dict(self) -> Dict:
        return {'kappa': self.kappa, 'period': self.period, 'phase': self.phase}

    @classmethod
    def from_dict(cls, data: Dict) -> 'PbnParams':
        return cls(kappa=float(data['kappa']), period=int(data.get('period', 4)),
                   phase=int(data.get('phase', 0)))


def pbn_pattern(width: int, pbn: PbnParams) -> np.ndarray:
    """Per-column banding offsets in DN, shared by every row"""
    if width <= 0:
        raise ArgumentError(f"width must be positive, got {width}")
    return pbn.kappa * square_wave(width, pbn.period, pbn.phase)


@dataclass(frozen=True, eq=False)
class NoiseModelParams:
    """
    Parameters of the forward noise model.

    shot_gain_a: DN per photo-event; 0 disables shot noise
    read_sigma: Gaussian read noise std (DN)
    quant_step: width of the uniform quantization term (DN); 0 disables it
    black_level: pedestal added before clamping, recorded in the frame metadata
    """
    shot_gain_a: float = 1.0
    read_sigma: float = 0.0
    quant_step: float = Config.NOISE_QUANT_STEP
    fpn: Optional[FpnMap] = None
    pbn: Optional[PbnParams] = None
    seed: int = 0
    black_level: int = 0
    bit_depth: int = 16
    fpn_path: Optional[str] = None

    def __post_init__(self):
        if not self.shot_gain_a >= 0:
            raise ArgumentError(f"shot_gain_a must be >= 0, got {self.shot_gain_a}")
        if not self.read_sigma >= 0:
            raise ArgumentError(f"read_sigma must be >= 0, got {self.read_sigma}")
        if not self.quant_step >= 0:
            raise ArgumentError(f"quant_step must be >= 0, got {self.quant_step}")
        if self.bit_depth not in SUPPORTED_BIT_DEPTHS:
            raise ArgumentError(f"bit_depth must be one of {SUPPORTED_BIT_DEPTHS}, got {self.bit_depth}")
        if not 0 <= self.black_level < 2 ** self.bit_depth:
            raise ArgumentError(f"black_level {self.black_level} outside [0, 2^{self.bit_depth})")
        if not 0 <= int(self.seed) < 2 ** 64:
            raise ArgumentError(f"seed must be a 64-bit unsigned integer, got {self.seed}")

    @property
    def full_scale(self) -> int:
        return 2 ** self.bit_depth - 1

    def to_dict(self) -> Dict:
        return {
            'shot_gain_a': self.shot_gain_a,
            'read_sigma': self.read_sigma,
            'quant_step': self.quant_step,
            'black_level': self.black_level,
            'bit_depth': self.bit_depth,
            'seed': int(self.seed),
            'pbn': self.pbn.to_dict() if self.pbn else None,
            'fpn_path': self.fpn_path,
            'generator': Config.NOISE_GENERATOR_NAME,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, data: Dict, base_dir: Optional[Path] = None) -> 'NoiseModelParams':
        """Build params from JSON; fpn_path is resolved against base_dir"""
        try:
            fpn_path = data.get('fpn_path')
            fpn = None
            if fpn_path:
                resolved = Path(fpn_path)
                if base_dir is not None and not resolved.is_absolute():
                    resolved = Path(base_dir) / resolved
                fpn = load_fpn_map(resolved)
            return cls(
                shot_gain_a=float(data['shot_gain_a']),
                read_sigma=float(data['read_sigma']),
                quant_step=float(data.get('quant_step', Config.NOISE_QUANT_STEP)),
                black_level=int(data.get('black_level', 0)),
                bit_depth=int(data.get('bit_depth', 16)),
                seed=int(data.get('seed', 0)),
                pbn=PbnParams.from_dict(data['pbn']) if data.get('pbn') else None,
                fpn=fpn,
                fpn_path=fpn_path,
            )
        except KeyError as e:
            raise MetadataError(f"noise parameters missing field {e}") from e


def load_noise_params(path: Union[str, Path]) -> NoiseModelParams:
    path = Path(path)
    try:
        with open(path, 'r', encoding='utf-8') as f:
            data = json.load(f)
    except json.JSONDecodeError as e:
        raise MetadataError(f"{path}: noise parameters are not valid JSON: {e}") from e
    return NoiseModelParams.from_dict(data, base_dir=path.parent)


def save_noise_params(params: NoiseModelParams, path: Union[str, Path]):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(params.to_json() + '\n', encoding='utf-8')


def noise_generator(seed: int, *spawn_key: int) -> np.random.Generator:
    """Philox stream for one (seed, key...) cell"""
    sequence = np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in spawn_key))
    return np.random.Generator(np.random.Philox(sequence))


def add_sensor_noise(rng: np.random.Generator, values: np.ndarray, shot_gain_a: float,
                     read_sigma: float, quant_step: float) -> np.ndarray:
    """Shot, read and quantization noise on non-negative DN values (no rounding)"""
    values = np.asarray(values, dtype=np.float64)
    if shot_gain_a > 0:
        noisy = shot_gain_a * rng.poisson(values / shot_gain_a)
    else:
        noisy = values.copy()
    if read_sigma > 0:
        noisy = noisy + rng.normal(0.0, read_sigma, size=values.shape)
    if quant_step > 0:
        noisy = noisy + rng.uniform(-quant_step / 2.0, quant_step / 2.0, size=values.shape)
    return noisy


def _stochastic_terms(values: np.ndarray, params: NoiseModelParams, frame_index: int,
                      row_block: int) -> np.ndarray:
    out = np.empty_like(values)
    for block, start in enumerate(range(0, values.shape[0], row_block)):
        rows = slice(start, start + row_block)
        rng = noise_generator(params.seed, frame_index, block)
        out[rows] = add_sensor_noise(rng, values[rows], params.shot_gain_a,
                                     params.read_sigma, params.quant_step)
    return out


def synthesize_noise(clean: Frame, params: NoiseModelParams, gain: float, t: float,
                     frame_index: int = 0, sensor_id: Optional[str] = None,
                     row_block: int = Config.NOISE_ROW_BLOCK) -> RawFrame:
    """
    Turn a clean frame into a noisy raw capture at the given gain and exposure.

    Raises:
        ArgumentError: negative clean values, FPN shape mismatch, gain < 1 or t <= 0
    """
    clean = as_float(clean, 'clean')
    values = clean.samples
    if values.size and values.min() < 0:
        raise ArgumentError(f"clean frame has negative value {values.min():.3f}")
    if not gain >= 1.0:
        raise ArgumentError(f"gain must be >= 1, got {gain}")
    if not t > 0:
        raise ArgumentError(f"exposure time must be > 0, got {t}")
    if params.fpn is not None and params.fpn.shape != values.shape:
        raise ArgumentError(f"FPN map shape {params.fpn.shape} does not match frame {values.shape}")
    if row_block < 1:
        raise ArgumentError(f"row_block must be >= 1, got {row_block}")

    noisy = _stochastic_terms(values, params, frame_index, row_block)
    if params.fpn is not None:
        noisy += params.fpn.predict_array(gain, t)
    if params.pbn is not None:
        noisy += pbn_pattern(clean.width, params.pbn)[None, :]
    noisy += params.black_level

    samples = np.clip(np.rint(noisy), 0, params.full_scale).astype(np.uint16)
    return RawFrame(
        samples=samples,
        bit_depth=params.bit_depth,
        bayer_pattern=clean.bayer_pattern,
        black_level=params.black_level,
        analog_gain=gain,
        exposure_time=t,
        sensor_id=clean.sensor_id if sensor_id is None else sensor_id,
        frame_index=frame_index,
        provenance=(f"synthesized generator={Config.NOISE_GENERATOR_NAME} seed={params.seed} "
                    f"frame_index={frame_index} row_block={row_block}"),
    )


def synthesize_stack(clean: Frame, params: NoiseModelParams, gain: float, t: float,
                     count: int, first_index: int = 0,
                     sensor_id: Optional[str] = None) -> FrameStack:
    """count noisy captures of one scene, frame indices first_index .. first_index+count-1"""
    if count < 1:
        raise ArgumentError(f"count must be >= 1, got {count}")
    frames = [
        synthesize_noise(clean, params, gain, t, frame_index=first_index + k, sensor_id=sensor_id)
        for k in range(count)
    ]
    logger.debug(f"Synthesized {count} frames at gain={gain} t={t}ms (seed {params.seed})")
    return FrameStack(frames)


# Channel response relative to red for tissue-like scenes
SCENE_COLOR_RATIOS = {'R': 1.0, 'G': 0.8, 'B': 0.55}


def synthetic_scene(height: int, width: int, level: float, seed: int,
                    bayer_pattern: str = Config.DEFAULT_BAYER_PATTERN,
                    bit_depth: int = 16, vessel_count: int = 2,
                    blob_count: int = 4) -> FloatFrame:
    """
    Smooth endoscope-like clean scene in DN (no black level).

    Light falls off toward the corners, soft blobs modulate brightness and a
    few thin dark curves stand in for vessels. Each Bayer site is scaled by a
    fixed color ratio.
    """
    if height <= 0 or width <= 0 or height % 2 or width % 2:
        raise ArgumentError(f"scene size must be even and positive, got {width}x{height}")
    if not level >= 0:
        raise ArgumentError(f"level must be >= 0, got {level}")

    rng = noise_generator(seed)
    yy, xx = np.mgrid[0:height, 0:width].astype(np.float64)
    ny = (yy - (height - 1) / 2.0) / (height / 2.0)
    nx = (xx - (width - 1) / 2.0) / (width / 2.0)
    vignette = np.clip(1.0 - 0.35 * (nx ** 2 + ny ** 2), 0.2, 1.0)

    blobs = np.zeros((height, width))
    for _ in range(blob_count):
        cy, cx = rng.uniform(0, height), rng.uniform(0, width)
        radius = rng.uniform(0.15, 0.3) * min(height, width)
        amplitude = rng.uniform(-0.15, 0.15)
        blobs += amplitude * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2.0 * radius ** 2))

    vessels = np.zeros((height, width))
    for _ in range(vessel_count):
        y0 = rng.uniform(0.2, 0.8) * height
        swing = rng.uniform(0.05, 0.2) * height
        wavelength = rng.uniform(0.8, 2.0) * width
        offset = rng.uniform(0, 2 * np.pi)
        centre = y0 + swing * np.sin(2 * np.pi * xx / wavelength + offset)
        # about 4 px wide
        vessels = np.maximum(vessels, 0.1 * np.exp(-((yy - centre) ** 2) / (2.0 * 2.0 ** 2)))

    luminance = level * vignette * (1.0 + blobs) * (1.0 - vessels)
    ratios = np.zeros((height, width))
    for channel, mask in bayer_masks(bayer_pattern, (height, width)).items():
        ratios[mask] = SCENE_COLOR_RATIOS[channel]

    return FloatFrame(
        samples=np.clip(luminance * ratios, 0.0, None),
        provenance='synthetic_scene',
        bit_depth=bit_depth,
        bayer_pattern=bayer_pattern,
    )
