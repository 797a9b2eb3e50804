#!/usr/bin/env python3
"""
Image quality metrics, paired test sets and the per-stage ablation report.

Ground truth for a test pair is the difference of the temporal averages of a
lit stack and a dark stack captured under the same settings. Metrics are
computed on the raw mosaic; stages that still carry the black level are
scored after subtracting it.
"""

import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from skimage.metrics import structural_similarity

from config import Config
from errors import ArgumentError, MetadataError
from fpn_calib import FpnMap
from pg_calib import PgParams
from raw_core import (
    Frame, FloatFrame, FrameStack, RawFrame, as_float, load_float_frame, load_frame,
    same_capture_settings, save_float_frame, save_frame, temporal_average,
)
from residual_denoise import PIPELINE_STAGES, DenoiseConfig, run_pipeline

logger = logging.getLogger(__name__)

GAIN_CLASSES = ('Low', 'Medium', 'Large')
STAGE_LABELS = {
    'noisy': 'Noisy',
    'pbn_removed': 'w/o PBN',
    'fpn_removed': 'w/o PBN, FPN',
    'denoised': 'Ours',
}
# stages still holding the pedestal
BLACK_LEVEL_STAGES = ('noisy', 'pbn_removed')
SSIM_K1 = 0.01
SSIM_K2 = 0.03


def _values(frame: Union[Frame, np.ndarray]) -> np.ndarray:
    if isinstance(frame, np.ndarray):
        return frame.astype(np.float64)
    return as_float(frame).samples


def _resolve_peak(reference, peak: Optional[float]) -> float:
    if peak is None:
        if isinstance(reference, np.ndarray):
            raise ArgumentError("peak is required when comparing bare arrays")
        peak = as_float(reference).full_scale
    if not peak > 0:
        raise ArgumentError(f"peak must be > 0, got {peak}")
    return float(peak)


def _pair_values(reference, test):
    x, y = _values(reference), _values(test)
    if x.shape != y.shape:
        raise ArgumentError(f"frame shapes differ: {x.shape} vs {y.shape}")
    return x, y


def psnr(reference: Frame, test: Frame, peak: Optional[float] = None) -> float:
    """
    10 * log10(peak^2 / MSE) in dB; math.inf when the frames are identical.

    peak defaults to 2^bit_depth - 1 of the reference container.
    """
    x, y = _pair_values(reference, test)
    peak = _resolve_peak(reference, peak)
    mse = float(np.mean((x - y) ** 2))
    if mse == 0:
        return math.inf
    return 10.0 * math.log10(peak * peak / mse)


def gaussian_window_size(gaussian_sigma: float) -> int:
    """Side of the truncated gaussian SSIM window (3.5 sigma each way)"""
    return 2 * int(3.5 * gaussian_sigma + 0.5) + 1


def ssim(reference: Frame, test: Frame, peak: Optional[float] = None,
         window: str = Config.SSIM_WINDOW, window_size: int = Config.SSIM_WINDOW_SIZE,
         gaussian_sigma: float = Config.SSIM_GAUSSIAN_SIGMA) -> float:
    """
    Mean local SSIM.

    The uniform window slides window_size x window_size with stride 1 over
    valid positions and uses population statistics. The gaussian window is
    skimage's gaussian-weighted SSIM with population statistics; its size
    follows from gaussian_sigma and window_size is ignored.
    """
    x, y = _pair_values(reference, test)
    peak = _resolve_peak(reference, peak)

    if window == 'gaussian':
        if not gaussian_sigma > 0:
            raise ArgumentError(f"gaussian_sigma must be positive, got {gaussian_sigma}")
        size = gaussian_window_size(gaussian_sigma)
        if min(x.shape) < size:
            raise ArgumentError(f"frame {x.shape} is smaller than the {size}x{size} gaussian SSIM window")
        return float(structural_similarity(
            x, y, data_range=peak, gaussian_weights=True, sigma=gaussian_sigma,
            use_sample_covariance=False, K1=SSIM_K1, K2=SSIM_K2,
        ))
    if window != 'uniform':
        raise ArgumentError(f"unknown SSIM window {window!r}")

    if min(x.shape) < window_size:
        raise ArgumentError(f"frame {x.shape} is smaller than the {window_size}x{window_size} SSIM window")
    c1 = (SSIM_K1 * peak) ** 2
    c2 = (SSIM_K2 * peak) ** 2
    shape = (window_size, window_size)
    wx, wy = sliding_window_view(x, shape), sliding_window_view(y, shape)
    mu_x = wx.mean(axis=(-2, -1))
    mu_y = wy.mean(axis=(-2, -1))
    dx = wx - mu_x[..., None, None]
    dy = wy - mu_y[..., None, None]
    var_x = (dx * dx).mean(axis=(-2, -1))
    var_y = (dy * dy).mean(axis=(-2, -1))
    cov = (dx * dy).mean(axis=(-2, -1))

    numerator = (2 * mu_x * mu_y + c1) * (2 * cov + c2)
    denominator = (mu_x * mu_x + mu_y * mu_y + c1) * (var_x + var_y + c2)
    return float(np.mean(numerator / denominator))


def classify_gain(gain: float, low_max: float = Config.GAIN_CLASS_LOW_MAX,
                  medium_max: float = Config.GAIN_CLASS_MEDIUM_MAX) -> str:
    if gain < low_max:
        return 'Low'
    if gain < medium_max:
        return 'Medium'
    return 'Large'


# ---------------------------------------------------------------- test pairs

@dataclass(frozen=True, eq=False)
class TestPair:
    """One noisy capture and its averaged ground truth"""
    __test__ = False  # not a pytest class

    noisy: RawFrame
    clean: FloatFrame
    gain_class: str
    pair_id: str = ''
    dark_count: int = 0
    lit_count: int = 0

    def __post_init__(self):
        if self.noisy.samples.shape != self.clean.samples.shape:
            raise ArgumentError(
                f"test pair {self.pair_id!r}: noisy {self.noisy.samples.shape} vs clean {self.clean.samples.shape}"
            )
        if self.gain_class not in GAIN_CLASSES:
            raise ArgumentError(f"gain_class must be one of {GAIN_CLASSES}, got {self.gain_class!r}")


def build_test_pair(dark_stack: FrameStack, lit_stack: FrameStack, sample_index: int,
                    pair_id: Optional[str] = None,
                    low_max: float = Config.GAIN_CLASS_LOW_MAX,
                    medium_max: float = Config.GAIN_CLASS_MEDIUM_MAX) -> TestPair:
    """clean = mean(lit) - mean(dark); noisy = lit_stack[sample_index]"""
    dark, lit = dark_stack.first, lit_stack.first
    if not same_capture_settings(dark, lit):
        raise ArgumentError(
            f"dark and lit stacks differ in capture settings (gain {dark.analog_gain}/{lit.analog_gain}, "
            f"t {dark.exposure_time}/{lit.exposure_time}, shape {dark.samples.shape}/{lit.samples.shape})"
        )
    if dark.sensor_id != lit.sensor_id:
        raise ArgumentError(f"dark stack from sensor '{dark.sensor_id}', lit stack from '{lit.sensor_id}'")
    if not 0 <= sample_index < len(lit_stack):
        raise ArgumentError(f"sample_index {sample_index} outside lit stack of {len(lit_stack)} frames")

    lit_mean = temporal_average(lit_stack)
    dark_mean = temporal_average(dark_stack)
    provenance = f"lit_mean[{len(lit_stack)}] - dark_mean[{len(dark_stack)}]"
    clean = replace(lit_mean, samples=lit_mean.samples - dark_mean.samples,
                    provenance=provenance, black_level=0)
    noisy = lit_stack[sample_index]
    return TestPair(
        noisy=noisy,
        clean=clean,
        gain_class=classify_gain(noisy.analog_gain, low_max, medium_max),
        pair_id=pair_id if pair_id is not None else f"{noisy.sensor_id or 'pair'}_{noisy.frame_index:04d}",
        dark_count=len(dark_stack),
        lit_count=len(lit_stack),
    )


def save_test_pairs(pairs: Sequence[TestPair], directory: Union[str, Path]) -> Path:
    """pairs.json plus noisy PGM/sidecar and clean .npy/sidecar per pair"""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = []
    for position, pair in enumerate(pairs):
        stem = f"pair_{position:04d}"
        save_frame(pair.noisy, directory / f"{stem}_noisy.pgm")
        save_float_frame(pair.clean, directory / f"{stem}_clean.npy")
        entries.append({
            'pair_id': pair.pair_id,
            'gain_class': pair.gain_class,
            'noisy_path': f"{stem}_noisy.pgm",
            'clean_path': f"{stem}_clean.npy",
            'dark_count': pair.dark_count,
            'lit_count': pair.lit_count,
        })
    manifest = directory / 'pairs.json'
    with open(manifest, 'w', encoding='utf-8') as f:
        json.dump({'pairs': entries}, f, indent=2, sort_keys=True)
        f.write('\n')
    logger.info(f"Saved {len(entries)} test pairs to {directory}")
    return manifest


def load_test_pairs(directory: Union[str, Path]) -> List[TestPair]:
    directory = Path(directory)
    manifest = directory / 'pairs.json'
    try:
        with open(manifest, 'r', encoding='utf-8') as f:
            entries = json.load(f)['pairs']
    except FileNotFoundError as e:
        raise MetadataError(f"{manifest} not found") from e
    except (json.JSONDecodeError, KeyError) as e:
        raise MetadataError(f"{manifest} is malformed: {e}") from e

    pairs = []
    for entry in entries:
        pairs.append(TestPair(
            noisy=load_frame(directory / entry['noisy_path']),
            clean=load_float_frame(directory / entry['clean_path']),
            gain_class=entry['gain_class'],
            pair_id=entry.get('pair_id', ''),
            dark_count=int(entry.get('dark_count', 0)),
            lit_count=int(entry.get('lit_count', 0)),
        ))
    return pairs


# ------------------------------------------------------------ ablation report

def _serialize(value: float):
    return 'inf' if math.isinf(value) else value


def _mean(values: Sequence[float]) -> float:
    return math.fsum(values) / len(values)


@dataclass
class AblationReport:
    """Mean PSNR/SSIM per stage for every gain class present plus 'All'"""
    pairs: int
    classes: Dict[str, Dict[str, Dict[str, float]]]
    class_counts: Dict[str, int]
    per_pair: List[Dict] = field(default_factory=list)
    metrics: Dict = field(default_factory=dict)
    warnings: List[str] = field(default_factory=list)

    def to_dict(self) -> Dict:
        return {
            'pairs': self.pairs,
            'classes': {
                name: {stage: {k: _serialize(v) for k, v in values.items()} for stage, values in stages.items()}
                for name, stages in self.classes.items()
            },
            'class_counts': dict(self.class_counts),
            'per_pair': [
                {**entry, 'stages': {s: {k: _serialize(v) for k, v in m.items()}
                                     for s, m in entry['stages'].items()}}
                for entry in self.per_pair
            ],
            'metrics': self.metrics,
            'warnings': list(self.warnings),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def to_table(self) -> str:
        """Aligned text: one row per stage, PSNR/SSIM columns per gain class"""
        columns = list(GAIN_CLASSES) + ['All']
        header = f"{'Stage':<14}" + ''.join(f"{c + ' PSNR':>13}{c + ' SSIM':>13}" for c in columns)
        lines = [header, '-' * len(header)]
        for stage in PIPELINE_STAGES:
            cells = []
            for name in columns:
                values = self.classes.get(name, {}).get(stage)
                if values is None:
                    cells.append(f"{'-':>13}{'-':>13}")
                else:
                    cells.append(f"{values['psnr_mean']:>13.2f}{values['ssim_mean']:>13.4f}")
            lines.append(f"{STAGE_LABELS[stage]:<14}" + ''.join(cells))
        lines.append(f"pairs: {self.pairs} " + ' '.join(
            f"{name}={self.class_counts[name]}" for name in GAIN_CLASSES if name in self.class_counts
        ))
        return '\n'.join(lines)


def score_stages(pair: TestPair, stages: Dict[str, FloatFrame], peak: Optional[float] = None,
                 window: str = Config.SSIM_WINDOW) -> Dict[str, Dict[str, float]]:
    """PSNR/SSIM of every retained stage against the pair's ground truth"""
    peak = pair.clean.full_scale if peak is None else peak
    scores = {}
    for stage in PIPELINE_STAGES:
        frame = stages[stage]
        values = frame.samples
        if stage in BLACK_LEVEL_STAGES:
            values = values - frame.black_level
        scores[stage] = {
            'psnr': psnr(pair.clean, values, peak=peak),
            'ssim': ssim(pair.clean, values, peak=peak, window=window),
        }
    return scores


def evaluate_suite(pairs: Sequence[TestPair], fpn: FpnMap, pg: Optional[PgParams],
                   config: Optional[DenoiseConfig] = None, workers: int = Config.EVAL_WORKERS,
                   denoiser: Optional[Callable[[FloatFrame], FloatFrame]] = None,
                   peak: Optional[float] = None, window: str = Config.SSIM_WINDOW) -> AblationReport:
    """
    Run the pipeline on every pair and aggregate per-stage metric means.

    Aggregation uses exactly rounded sums over pairs sorted by id, so the
    report does not depend on pair order or worker count.
    """
    pairs = list(pairs)
    if not pairs:
        raise ArgumentError("evaluate_suite needs at least one test pair")
    config = config or DenoiseConfig()
    if denoiser is not None and workers > 1:
        logger.info("External denoiser in use; evaluating pairs sequentially")
        workers = 1

    def evaluate(pair: TestPair):
        result = run_pipeline(pair.noisy, fpn, pg, config, denoiser=denoiser)
        return score_stages(pair, result.stages, peak=peak, window=window), result.warnings

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            outcomes = list(pool.map(evaluate, pairs))
    else:
        outcomes = [evaluate(pair) for pair in pairs]

    per_pair = sorted(
        ({'pair_id': pair.pair_id, 'gain_class': pair.gain_class, 'stages': scores}
         for pair, (scores, _) in zip(pairs, outcomes)),
        key=lambda entry: (entry['pair_id'], entry['gain_class']),
    )
    warnings = sorted(f"{pair.pair_id}: {w}" for pair, (_, ws) in zip(pairs, outcomes) for w in ws)

    groups = {name: [e for e in per_pair if e['gain_class'] == name] for name in GAIN_CLASSES}
    groups = {name: members for name, members in groups.items() if members}
    groups['All'] = per_pair

    classes = {}
    for name, members in groups.items():
        classes[name] = {
            stage: {
                'psnr_mean': _mean([m['stages'][stage]['psnr'] for m in members]),
                'ssim_mean': _mean([m['stages'][stage]['ssim'] for m in members]),
            }
            for stage in PIPELINE_STAGES
        }
    report = AblationReport(
        pairs=len(per_pair),
        classes=classes,
        class_counts={name: len(members) for name, members in groups.items()},
        per_pair=per_pair,
        metrics={
            'peak': 'full_scale' if peak is None else peak,
            'ssim_window': window,
            'ssim_window_size': (gaussian_window_size(Config.SSIM_GAUSSIAN_SIGMA) if window == 'gaussian'
                                 else Config.SSIM_WINDOW_SIZE),
            'ssim_k1': SSIM_K1,
            'ssim_k2': SSIM_K2,
            'black_level_subtracted_stages': list(BLACK_LEVEL_STAGES),
            'denoise_config': config.to_dict(),
        },
        warnings=warnings,
    )
    overall = classes['All']
    logger.info(
        f"Evaluated {report.pairs} pairs: " + ', '.join(
            f"{STAGE_LABELS[s]} {overall[s]['psnr_mean']:.2f} dB" for s in PIPELINE_STAGES
        )
    )
    return report
