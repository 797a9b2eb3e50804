#!/usr/bin/env python3
"""
Desk-scale synthetic capture campaign.

Builds everything a real sensor session would deliver (dark sets for FPN
calibration, flat fields per gain for PG calibration, and dark/lit stacks
turned into test pairs for three gain classes) from the forward noise model
with a known ground truth.
"""

import json
import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Tuple, Union

import numpy as np

from errors import ArgumentError
from fpn_calib import FpnMap, calibrate_fpn, save_fpn_map
from metrics_eval import GAIN_CLASSES, TestPair, build_test_pair, save_test_pairs
from noise_synth import NoiseModelParams, PbnParams, noise_generator, synthesize_stack, synthetic_scene
from pg_calib import PgParams, calibrate_pg
from raw_core import FloatFrame, FrameStack, save_float_frame, save_stack

logger = logging.getLogger(__name__)


def derive_seed(seed: int, *key: int) -> int:
    """Independent 64-bit seed for one purpose/item of a campaign"""
    state = np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in key)).generate_state(1, np.uint64)
    return int(state[0])


# seed purposes
_FPN_TRUTH, _CAL_DARK, _CAL_FLAT, _CLASS_DARK, _SCENE, _LIT, _LEVEL = range(7)


@dataclass(frozen=True)
class SuiteSpec:
    """Geometry, noise scaling and campaign sizes of a synthetic suite"""
    width: int = 64
    height: int = 64
    bit_depth: int = 10
    black_level: int = 128
    bayer_pattern: str = 'RGGB'
    sensor_id: str = 'synthetic-0'
    exposure_time: float = 10.0  # ms
    frames_per_stack: int = 128
    pairs_per_class: int = 100
    class_gains: Tuple[Tuple[str, float], ...] = (('Low', 2.0), ('Medium', 4.0), ('Large', 8.0))
    # noise grows with analog gain
    shot_gain_per_gain: float = 0.25
    read_sigma_per_gain: float = 1.0
    kappa_base: float = 8.0
    kappa_per_gain: float = 4.0
    quant_step: float = 1.0
    pbn_period: int = 4
    pbn_phase: int = 1
    # ground-truth FPN ranges
    fpn_k_max: float = 0.1  # DN per gain*ms
    fpn_b_max: float = 8.0  # DN
    dark_gains: Tuple[float, ...] = (1.0, 2.0, 4.0, 8.0)
    dark_frames: int = 64
    flat_levels: Tuple[float, ...] = (100.0, 250.0, 500.0)
    flat_frames: int = 32
    scene_level_range: Tuple[float, float] = (120.0, 280.0)
    seed: int = 2024

    def __post_init__(self):
        names = [name for name, _ in self.class_gains]
        if any(name not in GAIN_CLASSES for name in names) or len(set(names)) != len(names):
            raise ArgumentError(f"class_gains must name distinct classes from {GAIN_CLASSES}, got {names}")
        if self.frames_per_stack < 1 or self.pairs_per_class < 0:
            raise ArgumentError("frames_per_stack must be >= 1 and pairs_per_class >= 0")
        if len({g * self.exposure_time for g in self.dark_gains}) < 2:
            raise ArgumentError("dark_gains need at least 2 distinct values")
        if len(set(self.flat_levels)) < 2:
            raise ArgumentError("flat_levels need at least 2 distinct values")

    def noise_params(self, gain: float, seed: int, fpn: FpnMap) -> NoiseModelParams:
        return NoiseModelParams(
            shot_gain_a=self.shot_gain_per_gain * gain,
            read_sigma=self.read_sigma_per_gain * gain,
            quant_step=self.quant_step,
            fpn=fpn,
            pbn=PbnParams(kappa=self.kappa_base + self.kappa_per_gain * gain,
                          period=self.pbn_period, phase=self.pbn_phase),
            seed=seed,
            black_level=self.black_level,
            bit_depth=self.bit_depth,
        )

    def to_dict(self) -> Dict:
        data = asdict(self)
        data['class_gains'] = {name: gain for name, gain in self.class_gains}
        return data

    @classmethod
    def from_dict(cls, data: Dict) -> 'SuiteSpec':
        data = dict(data)
        if isinstance(data.get('class_gains'), dict):
            data['class_gains'] = tuple((k, float(v)) for k, v in data['class_gains'].items())
        for name in ('dark_gains', 'flat_levels', 'scene_level_range'):
            if name in data:
                data[name] = tuple(float(v) for v in data[name])
        if 'class_gains' in data:
            data['class_gains'] = tuple((str(k), float(v)) for k, v in data['class_gains'])
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise ArgumentError(f"unknown suite settings: {sorted(unknown)}")
        return cls(**data)


@dataclass
class SyntheticSuite:
    spec: SuiteSpec
    fpn_truth: FpnMap
    dark_sets: List[Tuple[FrameStack, float, float]]
    flat_sets: Dict[str, List[FrameStack]]
    pairs: List[TestPair] = field(default_factory=list)
    true_clean: List[FloatFrame] = field(default_factory=list)


def build_synthetic_suite(spec: SuiteSpec = SuiteSpec()) -> SyntheticSuite:
    """Generate calibration sets and per-class test pairs from the forward model"""
    shape = (spec.height, spec.width)
    t = spec.exposure_time

    truth_rng = noise_generator(derive_seed(spec.seed, _FPN_TRUTH))
    fpn_truth = FpnMap(
        K=truth_rng.uniform(0.0, spec.fpn_k_max, shape),
        B=truth_rng.uniform(0.0, spec.fpn_b_max, shape),
        sensor_id=spec.sensor_id,
    )
    dark_scene = FloatFrame(samples=np.zeros(shape), provenance='dark', bit_depth=spec.bit_depth,
                            bayer_pattern=spec.bayer_pattern, sensor_id=spec.sensor_id)

    dark_sets = []
    for index, gain in enumerate(spec.dark_gains):
        params = spec.noise_params(gain, derive_seed(spec.seed, _CAL_DARK, index), fpn_truth)
        dark_sets.append((synthesize_stack(dark_scene, params, gain, t, spec.dark_frames), gain, t))

    flat_sets: Dict[str, List[FrameStack]] = {}
    pairs: List[TestPair] = []
    true_clean: List[FloatFrame] = []
    for class_index, (name, gain) in enumerate(spec.class_gains):
        stacks = []
        for level_index, level in enumerate(spec.flat_levels):
            flat = dark_scene.with_samples(np.full(shape, float(level)), 'flat')
            params = spec.noise_params(gain, derive_seed(spec.seed, _CAL_FLAT, class_index, level_index),
                                       fpn_truth)
            stacks.append(synthesize_stack(flat, params, gain, t, spec.flat_frames))
        flat_sets[name] = stacks

        if not spec.pairs_per_class:
            continue
        dark_params = spec.noise_params(gain, derive_seed(spec.seed, _CLASS_DARK, class_index), fpn_truth)
        dark_stack = synthesize_stack(dark_scene, dark_params, gain, t, spec.frames_per_stack)
        level_rng = noise_generator(derive_seed(spec.seed, _LEVEL, class_index))
        for k in range(spec.pairs_per_class):
            level = float(level_rng.uniform(*spec.scene_level_range))
            scene = synthetic_scene(spec.height, spec.width, level,
                                    seed=derive_seed(spec.seed, _SCENE, class_index, k),
                                    bayer_pattern=spec.bayer_pattern, bit_depth=spec.bit_depth)
            scene = scene.with_samples(scene.samples, 'true_clean')
            lit_params = spec.noise_params(gain, derive_seed(spec.seed, _LIT, class_index, k), fpn_truth)
            lit_stack = synthesize_stack(scene, lit_params, gain, t, spec.frames_per_stack,
                                         sensor_id=spec.sensor_id)
            pair = build_test_pair(dark_stack, lit_stack, 0, pair_id=f"{name}_{k:04d}")
            # the class is defined by the campaign, not by gain thresholds
            pairs.append(replace(pair, gain_class=name))
            true_clean.append(scene)
        logger.info(f"Synthetic class {name} (gain {gain:g}): {spec.pairs_per_class} pairs")

    return SyntheticSuite(spec=spec, fpn_truth=fpn_truth, dark_sets=dark_sets,
                          flat_sets=flat_sets, pairs=pairs, true_clean=true_clean)


def calibrate_suite(suite: SyntheticSuite) -> Tuple[FpnMap, PgParams]:
    """FPN from the dark sets, then one PG entry per class gain"""
    fpn = calibrate_fpn(suite.dark_sets)
    pg = PgParams(source='synthetic suite')
    for name, stacks in suite.flat_sets.items():
        pg = pg.merge(calibrate_pg(stacks, fpn=fpn))
    return fpn, pg


def write_suite(suite: SyntheticSuite, directory: Union[str, Path]) -> Path:
    """
    Lay the suite out on disk:

        suite.json
        fpn_truth.fpn
        darks/set_NN/frame_NNNN.pgm
        flats/<class>/level_NN/frame_NNNN.pgm
        pairs/pairs.json (+ pair files)
        truth/<pair_id>.npy
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    save_fpn_map(suite.fpn_truth, directory / 'fpn_truth.fpn')
    for index, (stack, _, _) in enumerate(suite.dark_sets):
        save_stack(stack, directory / 'darks' / f"set_{index:02d}")
    for name, stacks in suite.flat_sets.items():
        for index, stack in enumerate(stacks):
            save_stack(stack, directory / 'flats' / name / f"level_{index:02d}")
    if suite.pairs:
        save_test_pairs(suite.pairs, directory / 'pairs')
    for pair, clean in zip(suite.pairs, suite.true_clean):
        save_float_frame(clean, directory / 'truth' / f"{pair.pair_id}.npy")

    manifest = directory / 'suite.json'
    with open(manifest, 'w', encoding='utf-8') as f:
        json.dump({'spec': suite.spec.to_dict(), 'pairs': len(suite.pairs)}, f, indent=2, sort_keys=True)
        f.write('\n')
    logger.info(f"Wrote synthetic suite ({len(suite.pairs)} pairs) to {directory}")
    return manifest
