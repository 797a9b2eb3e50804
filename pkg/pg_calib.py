#!/usr/bin/env python3
"""
Poisson-Gaussian noise calibration and synthetic training-pair generation.

The residual noise after PBN/FPN removal follows var = a * mean + b. The
line is fitted on per-pixel temporal (mean, variance) samples pooled over
flat-field stacks at several illumination levels and one analog gain.
"""

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from config import Config
from errors import (
    ArgumentError, CalibrationQualityError, MetadataError, PbnEstimationError, RankDeficiencyError,
)
from fpn_calib import FpnMap, corrected_dark_mean
from noise_synth import add_sensor_noise, noise_generator
from pbn_removal import default_theta, estimate_pbn, square_wave
from raw_core import FloatFrame, FrameStack, RawFrame, load_frame, save_frame

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class PgEntry:
    """Variance line var = a * mean + b at one analog gain"""
    analog_gain: float
    a: float
    b: float

    def __post_init__(self):
        if not self.analog_gain >= 1.0:
            raise ArgumentError(f"analog_gain must be >= 1, got {self.analog_gain}")
        if not (self.a >= 0 and self.b >= 0):
            raise ArgumentError(f"PG parameters must be non-negative, got a={self.a}, b={self.b}")

    def to_dict(self) -> Dict:
        return {'analog_gain': self.analog_gain, 'a': self.a, 'b': self.b}


@dataclass(frozen=True)
class PgParams:
    """Calibrated (a, b) per analog gain"""
    entries: Tuple[PgEntry, ...] = field(default_factory=tuple)
    source: str = ''

    def __post_init__(self):
        by_gain = {}
        for entry in self.entries:
            by_gain[float(entry.analog_gain)] = entry
        object.__setattr__(self, 'entries', tuple(by_gain[g] for g in sorted(by_gain)))

    @classmethod
    def single(cls, gain: float, a: float, b: float, source: str = 'manual') -> 'PgParams':
        return cls(entries=(PgEntry(gain, a, b),), source=source)

    @property
    def gains(self) -> List[float]:
        return [entry.analog_gain for entry in self.entries]

    def entry(self, gain: float, interpolate: bool = True) -> Tuple[float, float]:
        """
        (a, b) at an analog gain.

        Exact entries are returned as stored. Otherwise the line parameters are
        interpolated between the bracketing gains, or extrapolated from the two
        nearest ones, and clamped at 0.

        Raises:
            ArgumentError: no usable entry (empty, single non-matching entry,
                or interpolation disabled)
        """
        gain = float(gain)
        for e in self.entries:
            if e.analog_gain == gain:
                return e.a, e.b
        if not interpolate:
            raise ArgumentError(f"no PG entry at gain {gain} (have {self.gains}) and interpolation is disabled")
        if len(self.entries) < 2:
            raise ArgumentError(f"cannot interpolate PG parameters at gain {gain} from {self.gains}")

        gains = np.array(self.gains)
        upper = int(np.searchsorted(gains, gain))
        upper = min(max(upper, 1), len(gains) - 1)
        lo, hi = self.entries[upper - 1], self.entries[upper]
        weight = (gain - lo.analog_gain) / (hi.analog_gain - lo.analog_gain)
        a = lo.a + weight * (hi.a - lo.a)
        b = lo.b + weight * (hi.b - lo.b)
        return max(a, 0.0), max(b, 0.0)

    def merge(self, other: 'PgParams') -> 'PgParams':
        """Union of entries; other's entry wins on a shared gain"""
        sources = '; '.join(s for s in (self.source, other.source) if s)
        return PgParams(entries=self.entries + other.entries, source=sources)

    def to_dict(self) -> Dict:
        return {'source': self.source, 'entries': [e.to_dict() for e in self.entries]}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, data: Dict) -> 'PgParams':
        try:
            entries = tuple(
                PgEntry(float(e['analog_gain']), float(e['a']), float(e['b'])) for e in data['entries']
            )
        except (KeyError, TypeError) as e:
            raise MetadataError(f"PG parameters are malformed: {e}") from e
        return cls(entries=entries, source=str(data.get('source', '')))


def save_pg_params(params: PgParams, path: Union[str, Path]):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(params.to_json() + '\n', encoding='utf-8')


def load_pg_params(path: Union[str, Path]) -> PgParams:
    path = Path(path)
    try:
        with open(path, 'r', encoding='utf-8') as f:
            return PgParams.from_dict(json.load(f))
    except json.JSONDecodeError as e:
        raise MetadataError(f"{path}: PG parameters are not valid JSON: {e}") from e


def fit_variance_line(means: np.ndarray, variances: np.ndarray) -> Tuple[float, float]:
    """Least-squares (a, b) of variances = a * means + b"""
    a, b = np.polyfit(np.asarray(means, dtype=np.float64), np.asarray(variances, dtype=np.float64), 1)
    return float(a), float(b)


def _set_statistics(stack: FrameStack, offset: np.ndarray, theta: Optional[float],
                    set_index: int):
    """
    Per-pixel temporal mean and unbiased variance after PBN and offset removal.

    Banding is estimated once on the set's temporal average, where random
    noise is already down by sqrt(N), and the same pattern is removed from
    every frame. Returns (mean, variance, raw mean before offset removal).
    """
    cube = stack.array().astype(np.float64)
    count = cube.shape[0]
    average = cube.mean(axis=0)
    if theta is None:
        variance_guess = float(np.median(np.var(cube, axis=0, ddof=1)))
        theta = default_theta(np.sqrt(variance_guess / count))
    try:
        estimate = estimate_pbn(stack.first.to_float().with_samples(average, 'temporal_average'),
                                theta=theta)
    except PbnEstimationError as e:
        raise PbnEstimationError(str(e), set_index=set_index) from e
    banding = estimate.kappa * square_wave(cube.shape[2], estimate.period, estimate.phase)

    corrected = cube - banding[None, None, :]
    raw_mean = corrected.mean(axis=0)
    variance = corrected.var(axis=0, ddof=1)
    return raw_mean - offset, variance, raw_mean


def calibrate_pg(flat_sets: Sequence[FrameStack], fpn: Optional[FpnMap] = None,
                 pbn_theta: Optional[float] = None, dark_reference: Optional[FrameStack] = None,
                 saturation_margin: float = Config.PG_SATURATION_MARGIN,
                 negative_slope_tolerance: float = Config.PG_NEGATIVE_SLOPE_TOLERANCE,
                 min_frames: int = Config.PG_MIN_STACK_FRAMES) -> PgParams:
    """
    Fit the variance line from flat-field stacks at one analog gain.

    The dark offset removed from each set is the FPN prediction when a map is
    given, else the PBN-corrected mean of dark_reference, else the black level.

    Raises:
        RankDeficiencyError: fewer than 2 distinct illumination levels
        CalibrationQualityError: fitted slope below -negative_slope_tolerance
        ArgumentError: mixed gains, short stacks, shape mismatches
    """
    flat_sets = list(flat_sets)
    if len(flat_sets) < 2:
        raise RankDeficiencyError(f"PG calibration needs at least 2 illumination levels, got {len(flat_sets)}")
    gains = {stack.first.analog_gain for stack in flat_sets}
    if len(gains) != 1:
        raise ArgumentError(f"flat sets must share one analog gain, got {sorted(gains)}")
    gain = gains.pop()
    shapes = {stack.shape for stack in flat_sets}
    if len(shapes) != 1:
        raise ArgumentError(f"flat stacks have mismatched shapes: {sorted(shapes)}")
    shape = shapes.pop()
    for index, stack in enumerate(flat_sets):
        if len(stack) < min_frames:
            raise ArgumentError(f"flat set {index} has {len(stack)} frames, need at least {min_frames}")
    if fpn is not None and fpn.shape != shape:
        raise ArgumentError(f"FPN map shape {fpn.shape} does not match flats {shape}")

    dark_mean = None
    if fpn is None and dark_reference is not None:
        if dark_reference.shape != shape:
            raise ArgumentError(f"dark reference shape {dark_reference.shape} does not match flats {shape}")
        dark_mean = corrected_dark_mean(dark_reference, theta=pbn_theta)

    full_scale = flat_sets[0].first.full_scale
    saturation = (1.0 - saturation_margin) * full_scale
    pooled_means, pooled_vars, level_means, level_errors = [], [], [], []
    for index, stack in enumerate(flat_sets):
        first = stack.first
        if fpn is not None:
            offset = fpn.predict_array(first.analog_gain, first.exposure_time)
        elif dark_mean is not None:
            offset = dark_mean
        else:
            offset = np.full(shape, float(first.black_level))

        mean, variance, raw_mean = _set_statistics(stack, offset, pbn_theta, index)
        keep = raw_mean < saturation
        dropped = int(keep.size - keep.sum())
        if dropped:
            logger.warning(f"Flat set {index}: discarded {dropped} pixels within "
                           f"{saturation_margin:.0%} of full scale")
        if not keep.any():
            continue
        pooled_means.append(mean[keep])
        pooled_vars.append(variance[keep])
        level_means.append(float(mean[keep].mean()))
        level_errors.append(float(mean[keep].std()) / np.sqrt(keep.sum()))
        logger.debug(f"Flat set {index}: mean={level_means[-1]:.2f} "
                     f"median var={float(np.median(variance[keep])):.2f}")

    spread = (max(level_means) - min(level_means)) if level_means else 0.0
    if len(level_means) < 2 or spread <= max(1e-9, 3.0 * max(level_errors)):
        raise RankDeficiencyError(
            f"PG calibration needs at least 2 distinct illumination levels, got means {level_means}"
        )

    a, b = fit_variance_line(np.concatenate(pooled_means), np.concatenate(pooled_vars))
    if a < -negative_slope_tolerance:
        raise CalibrationQualityError(f"fitted shot slope a={a:.4f} is negative beyond tolerance "
                                      f"{negative_slope_tolerance}")

    reference = 'fpn' if fpn is not None else ('dark_reference' if dark_mean is not None else 'black_level')
    source = f"calibrate_pg gain={gain:g} levels={len(level_means)} offset={reference}"
    clamped = [name for name, value in (('a', a), ('b', b)) if value < 0]
    if clamped:
        logger.warning(f"PG fit at gain {gain:g} dipped negative (a={a:.4f}, b={b:.4f}); clamping to 0")
        source += f" clamped={','.join(clamped)}"
    a, b = max(a, 0.0), max(b, 0.0)

    logger.info(f"PG calibrated at gain {gain:g}: a={a:.4f} b={b:.3f} from {len(level_means)} levels")
    return PgParams(entries=(PgEntry(gain, a, b),), source=source)


# ------------------------------------------------------------ training pairs

def load_clean_directory(directory: Union[str, Path]) -> List[FloatFrame]:
    """Black-level-subtracted clean frames from every *.pgm, lexicographic order"""
    directory = Path(directory)
    paths = sorted(p for p in directory.glob('*.pgm') if p.is_file())
    if not paths:
        raise ArgumentError(f"no clean PGM frames found in {directory}")
    frames = []
    for path in paths:
        raw = load_frame(path)
        clean = np.clip(raw.samples.astype(np.float64) - raw.black_level, 0.0, None)
        frames.append(raw.to_float('clean').with_samples(clean, 'clean'))
    logger.info(f"Loaded {len(frames)} clean frames from {directory}")
    return frames


def _augment(values: np.ndarray, bayer_pattern: str, flip_h: bool, flip_v: bool, rotations: int):
    """Apply flips and 90 degree rotations; returns (values, new Bayer pattern)"""
    labels = np.tile(np.array(list(bayer_pattern)).reshape(2, 2), (values.shape[0] // 2, values.shape[1] // 2))
    for transform in (
        (lambda a: a[:, ::-1]) if flip_h else None,
        (lambda a: a[::-1, :]) if flip_v else None,
        (lambda a: np.rot90(a, rotations)) if rotations else None,
    ):
        if transform is not None:
            values = transform(values)
            labels = transform(labels)
    return np.ascontiguousarray(values), ''.join(labels[:2, :2].ravel())


def make_training_pairs(clean_frames: Sequence[FloatFrame], params: PgParams, gain: float,
                        count: int, seed: int, output_dir: Union[str, Path],
                        crop_size: int = Config.TRAINING_CROP_SIZE,
                        contrast_range: Tuple[float, float] = (Config.AUGMENT_CONTRAST_MIN,
                                                               Config.AUGMENT_CONTRAST_MAX),
                        interpolate: bool = True) -> Dict:
    """
    Write count (noisy, clean) pairs plus manifest.json to output_dir.

    Each pair draws a source frame, an even-aligned square crop, flips, a
    rotation by a multiple of 90 degrees and a global contrast scale from its
    own Philox stream (seed, pair index), then adds shot noise with slope a
    and Gaussian noise with variance b. Returns the manifest.
    """
    if count < 0:
        raise ArgumentError(f"count must be >= 0, got {count}")
    a, b = params.entry(gain, interpolate=interpolate)
    if crop_size < 2 or crop_size % 2:
        raise ArgumentError(f"crop_size must be even and >= 2, got {crop_size}")
    low, high = contrast_range
    if not 0 < low <= high:
        raise ArgumentError(f"invalid contrast range {contrast_range}")
    clean_frames = list(clean_frames)
    if count and not clean_frames:
        raise ArgumentError("no clean frames supplied")
    for frame in clean_frames:
        if frame.samples.min() < 0:
            raise ArgumentError(f"clean frame '{frame.provenance}' has negative values")
        if min(frame.height, frame.width) < crop_size:
            raise ArgumentError(f"clean frame {frame.width}x{frame.height} is smaller than crop {crop_size}")

    output_dir = Path(output_dir)
    output_dir.mkdir(parents=True, exist_ok=True)
    pairs = []
    for k in range(count):
        rng = noise_generator(seed, k)
        source_index = int(rng.integers(len(clean_frames)))
        source = clean_frames[source_index]
        top = 2 * int(rng.integers((source.height - crop_size) // 2 + 1))
        left = 2 * int(rng.integers((source.width - crop_size) // 2 + 1))
        flip_h, flip_v = bool(rng.integers(2)), bool(rng.integers(2))
        rotations = int(rng.integers(4))
        contrast = float(rng.uniform(low, high))

        crop = source.samples[top:top + crop_size, left:left + crop_size]
        values, pattern = _augment(crop, source.bayer_pattern, flip_h, flip_v, rotations)
        values = values * contrast
        full_scale = source.full_scale
        noisy = add_sensor_noise(rng, values, a, float(np.sqrt(b)), 0.0)

        meta = dict(bit_depth=source.bit_depth, bayer_pattern=pattern, analog_gain=gain,
                    exposure_time=source.exposure_time, sensor_id=source.sensor_id, frame_index=k)
        clean_raw = RawFrame(samples=np.clip(np.rint(values), 0, full_scale), **meta)
        noisy_raw = RawFrame(samples=np.clip(np.rint(noisy), 0, full_scale), **meta)
        clean_name, noisy_name = f"pair_{k:04d}_clean.pgm", f"pair_{k:04d}_noisy.pgm"
        save_frame(clean_raw, output_dir / clean_name)
        save_frame(noisy_raw, output_dir / noisy_name)
        pairs.append({
            'index': k,
            'clean_path': clean_name,
            'noisy_path': noisy_name,
            'source_index': source_index,
            'crop': {'top': top, 'left': left, 'size': crop_size},
            'augmentation': {'flip_horizontal': flip_h, 'flip_vertical': flip_v,
                             'rot90': rotations, 'contrast': contrast, 'bayer_pattern': pattern},
        })

    manifest = {
        'seed': int(seed),
        'gain': float(gain),
        'a': a,
        'b': b,
        'count': count,
        'crop_size': crop_size,
        'contrast_range': [low, high],
        'generator': Config.NOISE_GENERATOR_NAME,
        'pairs': pairs,
    }
    with open(output_dir / 'manifest.json', 'w', encoding='utf-8') as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write('\n')
    logger.info(f"Wrote {count} training pairs to {output_dir} (gain {gain:g}, a={a:.4f}, b={b:.3f})")
    return manifest
