#!/usr/bin/env python3
"""
12-bit fixed-point simulation of the correction pipeline.

Every value that flows through a pipeline stage (inputs, banding amplitude,
FPN slope and offset, intermediate frames, stabilized-domain values) is
rounded to its stage's Q-format grid with round-half-even and saturation.
Arithmetic itself stays in floating point.
"""

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from config import Config
from errors import ArgumentError, MetadataError
from fpn_calib import FpnMap
from metrics_eval import psnr
from pg_calib import PgParams
from raw_core import Frame, FloatFrame, RawFrame, as_float
from residual_denoise import HOOK_STAGES, DenoiseConfig, run_pipeline

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class QFormat:
    """Fixed-point format: total_bits with frac_bits after the binary point"""
    frac_bits: int
    signed: bool = True
    total_bits: int = Config.FIXEDPOINT_TOTAL_BITS

    def __post_init__(self):
        if not 2 <= self.total_bits <= 32:
            raise ArgumentError(f"total_bits must be between 2 and 32, got {self.total_bits}")
        if not 0 <= self.frac_bits <= self.total_bits - 1:
            raise ArgumentError(f"frac_bits must be in [0, {self.total_bits - 1}], got {self.frac_bits}")

    @property
    def step(self) -> float:
        return 2.0 ** -self.frac_bits

    @property
    def max_code(self) -> int:
        return 2 ** (self.total_bits - int(self.signed)) - 1

    @property
    def min_code(self) -> int:
        return -(2 ** (self.total_bits - 1)) if self.signed else 0

    @property
    def max_value(self) -> float:
        return self.max_code * self.step

    @property
    def min_value(self) -> float:
        return self.min_code * self.step

    def to_dict(self) -> Dict:
        return {'frac_bits': self.frac_bits, 'signed': self.signed, 'total_bits': self.total_bits}


def quantize_array(values: np.ndarray, q: QFormat) -> Tuple[np.ndarray, np.ndarray]:
    """(integer codes, dequantized values); round half to even, saturate at the range ends"""
    scaled = np.asarray(values, dtype=np.float64) * (2.0 ** q.frac_bits)
    codes = np.clip(np.rint(scaled), q.min_code, q.max_code).astype(np.int64)
    return codes, codes.astype(np.float64) * q.step


def quantize_value(x: float, q: QFormat) -> Tuple[int, float]:
    codes, values = quantize_array(np.array([x]), q)
    return int(codes[0]), float(values[0])


@dataclass(frozen=True)
class QPlan:
    """QFormat per pipeline hook stage"""
    formats: Mapping[str, QFormat]

    def __post_init__(self):
        missing = [stage for stage in HOOK_STAGES if stage not in self.formats]
        if missing:
            raise ArgumentError(f"qplan has no format for stage(s) {missing}")
        unknown = sorted(set(self.formats) - set(HOOK_STAGES))
        if unknown:
            raise ArgumentError(f"qplan names unknown stage(s) {unknown}")
        object.__setattr__(self, 'formats', dict(self.formats))

    def __getitem__(self, stage: str) -> QFormat:
        return self.formats[stage]

    def with_format(self, stage: str, q: QFormat) -> 'QPlan':
        return QPlan({**self.formats, stage: q})

    def to_dict(self) -> Dict:
        return {stage: self.formats[stage].to_dict() for stage in HOOK_STAGES}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, data: Mapping) -> 'QPlan':
        try:
            return cls({
                stage: QFormat(frac_bits=int(spec['frac_bits']), signed=bool(spec.get('signed', True)),
                               total_bits=int(spec.get('total_bits', Config.FIXEDPOINT_TOTAL_BITS)))
                for stage, spec in data.items()
            })
        except (KeyError, TypeError, AttributeError) as e:
            raise MetadataError(f"qplan is malformed: {e}") from e


def save_qplan(plan: QPlan, path: Union[str, Path]):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(plan.to_json() + '\n', encoding='utf-8')


def load_qplan(path: Union[str, Path]) -> QPlan:
    path = Path(path)
    try:
        with open(path, 'r', encoding='utf-8') as f:
            return QPlan.from_dict(json.load(f))
    except json.JSONDecodeError as e:
        raise MetadataError(f"{path}: qplan is not valid JSON: {e}") from e


def frac_bits_for_range(max_abs: float, signed: bool, total_bits: int = Config.FIXEDPOINT_TOTAL_BITS) -> int:
    """Largest frac_bits whose range still covers max_abs"""
    if max_abs <= 0:
        return total_bits - 1
    capacity = 2 ** (total_bits - int(signed)) - 1
    bits = math.floor(math.log2(capacity / max_abs))
    return int(min(max(bits, 0), total_bits - 1))


class _RangeProfiler:
    def __init__(self):
        self.max_abs: Dict[str, float] = {}
        self.negative: Dict[str, bool] = {}

    def __call__(self, stage: str, values: np.ndarray) -> np.ndarray:
        values = np.asarray(values, dtype=np.float64)
        if values.size:
            self.max_abs[stage] = max(self.max_abs.get(stage, 0.0), float(np.max(np.abs(values))))
            self.negative[stage] = self.negative.get(stage, False) or bool(np.min(values) < 0)
        return values


def profile_qplan(frames: Union[Frame, Sequence[Frame]], fpn: FpnMap, pg: Optional[PgParams],
                  config: Optional[DenoiseConfig] = None,
                  total_bits: int = Config.FIXEDPOINT_TOTAL_BITS) -> QPlan:
    """
    Range-profiling pass: run the float pipeline and pick, per stage, the
    largest frac_bits that covers the observed maximum magnitude. Stages
    with negative values get signed formats.
    """
    if isinstance(frames, (RawFrame, FloatFrame)):
        frames = [frames]
    profiler = _RangeProfiler()
    for frame in frames:
        run_pipeline(frame, fpn, pg, config, hook=profiler)

    formats = {}
    for stage in HOOK_STAGES:
        signed = profiler.negative.get(stage, False)
        formats[stage] = QFormat(
            frac_bits=frac_bits_for_range(profiler.max_abs.get(stage, 0.0), signed, total_bits),
            signed=signed,
            total_bits=total_bits,
        )
    plan = QPlan(formats)
    logger.debug("Profiled qplan: " + ', '.join(
        f"{s}=Q{plan[s].total_bits - plan[s].frac_bits}.{plan[s].frac_bits}{'s' if plan[s].signed else 'u'}"
        for s in HOOK_STAGES
    ))
    return plan


@dataclass
class FixedPointResult:
    output: FloatFrame
    float_output: FloatFrame
    psnr_vs_float: float
    max_abs_error: Dict[str, float] = field(default_factory=dict)


class _Quantizer:
    def __init__(self, plan: QPlan):
        self.plan = plan
        self.max_abs_error: Dict[str, float] = {}

    def __call__(self, stage: str, values: np.ndarray) -> np.ndarray:
        _, quantized = quantize_array(values, self.plan[stage])
        if quantized.size:
            error = float(np.max(np.abs(quantized - values)))
            self.max_abs_error[stage] = max(self.max_abs_error.get(stage, 0.0), error)
        return quantized


def run_pipeline_fixed(raw: Frame, fpn: FpnMap, pg: Optional[PgParams], config: Optional[DenoiseConfig],
                       qplan: QPlan) -> FixedPointResult:
    """Run the pipeline in float and in simulated fixed point and compare the outputs"""
    if not isinstance(qplan, QPlan):
        qplan = QPlan(qplan)
    float_output = run_pipeline(raw, fpn, pg, config).output
    quantizer = _Quantizer(qplan)
    fixed_output = run_pipeline(raw, fpn, pg, config, hook=quantizer).output
    peak = as_float(raw).full_scale
    return FixedPointResult(
        output=fixed_output,
        float_output=float_output,
        psnr_vs_float=psnr(float_output, fixed_output, peak=peak),
        max_abs_error=quantizer.max_abs_error,
    )


def quantize_check(frames: Sequence[Frame], fpn: FpnMap, pg: Optional[PgParams],
                   config: Optional[DenoiseConfig], qplan: QPlan) -> Dict:
    """Fixed-vs-float comparison over a set of frames"""
    frames = list(frames)
    if not frames:
        raise ArgumentError("quantize_check needs at least one frame")
    values: List[float] = []
    worst: Dict[str, float] = {}
    for frame in frames:
        result = run_pipeline_fixed(frame, fpn, pg, config, qplan)
        values.append(result.psnr_vs_float)
        for stage, error in result.max_abs_error.items():
            worst[stage] = max(worst.get(stage, 0.0), error)
    psnr_min = min(values)
    psnr_mean = math.fsum(values) / len(values)
    report = {
        'frames': len(values),
        'psnr_min': 'inf' if math.isinf(psnr_min) else psnr_min,
        'psnr_mean': 'inf' if math.isinf(psnr_mean) else psnr_mean,
        'identical_frames': sum(1 for v in values if math.isinf(v)),
        'max_abs_error': {stage: worst[stage] for stage in HOOK_STAGES if stage in worst},
        'qplan': qplan.to_dict(),
    }
    logger.info(f"Fixed vs float over {len(values)} frames: min PSNR {report['psnr_min']}")
    return report
