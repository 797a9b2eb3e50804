#!/usr/bin/env python3
"""
Command-line entry point.

    python cli.py <subcommand> [flags]

Logs go to stderr, data goes to files (or stdout where noted). On failure a
single machine-parseable line is printed to stderr:

    error=<ErrorClass> message="<text>"
"""

import argparse
import json
import logging
import sys
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence

from config import Config
from errors import ArgumentError, EndoNoiseError, MetadataError
from fixedpoint import load_qplan, profile_qplan, quantize_check, save_qplan
from fpn_calib import FpnMap, calibrate_fpn, load_fpn_map, save_fpn_map
from metrics_eval import build_test_pair, evaluate_suite, load_test_pairs, save_test_pairs
from noise_synth import load_noise_params, synthesize_stack
from pbn_removal import estimate_pbn
from pg_calib import PgParams, calibrate_pg, load_clean_directory, load_pg_params, make_training_pairs, save_pg_params
from raw_core import demosaic_preview, load_frame, load_stack, save_float_frame, save_frame, save_preview
from residual_denoise import DenoiseConfig, ExternalDenoiser, run_pipeline
from synthetic_suite import SuiteSpec, build_synthetic_suite, calibrate_suite, write_suite

logger = logging.getLogger(__name__)

LOG_FORMAT = '%(asctime)s - %(name)s - %(levelname)s - %(message)s'

# "paths" keys of the run configuration; each fills the flag of the same name when it is not given
INPUT_PATH_KEYS = ('fpn', 'pg', 'dark_reference', 'pairs_dir')
OUTPUT_PATH_KEYS = ('external_dir',)


@dataclass
class SuiteConfig:
    """JSON run configuration; command-line flags override its values"""
    seed: Optional[int] = None
    suite: Dict = field(default_factory=dict)
    denoise: Dict = field(default_factory=dict)
    gain_classes: Dict = field(default_factory=lambda: {
        'low_max': Config.GAIN_CLASS_LOW_MAX, 'medium_max': Config.GAIN_CLASS_MEDIUM_MAX,
    })
    paths: Dict = field(default_factory=dict)
    qplan: Optional[str] = None

    @classmethod
    def load(cls, path: Optional[str]) -> 'SuiteConfig':
        if not path:
            return cls()
        config_path = Path(path)
        if not config_path.exists():
            raise ArgumentError(f"config file {config_path} does not exist")
        try:
            with open(config_path, 'r', encoding='utf-8') as f:
                data = json.load(f)
        except json.JSONDecodeError as e:
            raise MetadataError(f"{config_path} is not valid JSON: {e}") from e
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise ArgumentError(f"unknown config keys in {config_path}: {sorted(unknown)}")
        config = cls(**data)
        if config.seed is not None and not isinstance(config.seed, int):
            raise ArgumentError(f"config seed must be an integer, got {config.seed!r}")
        unknown = set(config.paths) - set(INPUT_PATH_KEYS) - set(OUTPUT_PATH_KEYS)
        if unknown:
            raise ArgumentError(f"unknown config paths in {config_path}: {sorted(unknown)}")
        for name in INPUT_PATH_KEYS:
            value = config.paths.get(name)
            if value is not None and not Path(value).exists():
                raise ArgumentError(f"config path {name}={value} does not exist")
        return config

    def apply_paths(self, args):
        """Fill path flags the command has but was not given"""
        for name, value in self.paths.items():
            if value is not None and hasattr(args, name) and getattr(args, name) is None:
                logger.debug(f"Using config path {name}={value}")
                setattr(args, name, str(value))

    def resolve_seed(self, args, default: Optional[int] = None) -> Optional[int]:
        """--seed, then the config seed, then default"""
        if getattr(args, 'seed', None) is not None:
            return args.seed
        return self.seed if self.seed is not None else default

    def suite_spec(self, args) -> SuiteSpec:
        data = dict(self.suite)
        if self.seed is not None:
            data.setdefault('seed', self.seed)
        for flag in ('pairs_per_class', 'frames_per_stack'):
            value = getattr(args, flag, None)
            if value is not None:
                data[flag] = value
        if getattr(args, 'seed', None) is not None:
            data['seed'] = args.seed
        return SuiteSpec.from_dict(data)

    def denoise_config(self, args) -> DenoiseConfig:
        data = dict(self.denoise)
        overrides = {
            'smoother': getattr(args, 'smoother', None),
            'strength': getattr(args, 'strength', None),
            'gaussian_sigma': getattr(args, 'gaussian_sigma', None),
            'nlm_patch_radius': getattr(args, 'nlm_patch_radius', None),
            'nlm_search_radius': getattr(args, 'nlm_search_radius', None),
        }
        data.update({k: v for k, v in overrides.items() if v is not None})
        if getattr(args, 'no_per_phase', False):
            data['process_per_bayer_phase'] = False
        return DenoiseConfig.from_dict(data)


# ---------------------------------------------------------------- helpers

def _write_json(data: Dict, path: Optional[str]):
    text = json.dumps(data, indent=2, sort_keys=True) + '\n'
    if path:
        target = Path(path)
        target.parent.mkdir(parents=True, exist_ok=True)
        target.write_text(text, encoding='utf-8')
    else:
        sys.stdout.write(text)


def _subdirectories(directory: str) -> List[Path]:
    """Sorted subdirectories holding PGM files, or the directory itself"""
    root = Path(directory)
    if not root.is_dir():
        raise ArgumentError(f"{root} is not a directory")
    subdirs = sorted(p for p in root.iterdir() if p.is_dir() and any(p.glob('*.pgm')))
    return subdirs or [root]


def _load_fpn(path: Optional[str], frame) -> FpnMap:
    if path:
        return load_fpn_map(path)
    logger.info("No FPN map given; using a zero map")
    return FpnMap.zeros(frame.width, frame.height, sensor_id=frame.sensor_id)


def _load_pg(path: Optional[str]) -> Optional[PgParams]:
    return load_pg_params(path) if path else None


def _inputs(path: str) -> List[Path]:
    target = Path(path)
    if target.is_dir():
        frames = sorted(target.glob('*.pgm'))
        if not frames:
            raise ArgumentError(f"no PGM frames in {target}")
        return frames
    if not target.exists():
        raise ArgumentError(f"input {target} does not exist")
    return [target]


# ------------------------------------------------------------- subcommands

def cmd_simulate(args, config: SuiteConfig) -> int:
    params = load_noise_params(args.noise_params)
    seed = config.resolve_seed(args)
    if seed is not None:
        params = replace(params, seed=seed)
    output_dir = Path(args.output_dir)
    manifest = {'noise_params': params.to_dict(), 'gain': args.gain, 'exposure_ms': args.exposure_ms,
                'frames_per_input': args.frames_per_input, 'inputs': []}
    for input_index, clean in enumerate(load_clean_directory(args.clean_dir)):
        stack = synthesize_stack(clean, params, args.gain, args.exposure_ms, args.frames_per_input,
                                 first_index=input_index * args.frames_per_input)
        outputs = []
        for k, frame in enumerate(stack):
            name = f"noisy_{input_index:04d}_{k:04d}.pgm"
            save_frame(frame, output_dir / name)
            outputs.append(name)
        manifest['inputs'].append({'index': input_index, 'outputs': outputs})
    _write_json(manifest, str(output_dir / 'manifest.json'))
    logger.info(f"Simulated {len(manifest['inputs'])} inputs into {output_dir}")
    return 0


def cmd_calibrate_fpn(args, config: SuiteConfig) -> int:
    dark_sets = []
    for directory in args.dark_dir:
        for subdir in _subdirectories(directory):
            stack = load_stack(subdir)
            dark_sets.append((stack, stack.first.analog_gain, stack.first.exposure_time))
    fpn = calibrate_fpn(dark_sets, theta=args.theta)
    save_fpn_map(fpn, args.output)
    logger.info(f"Wrote FPN map to {args.output}")
    return 0


def cmd_calibrate_pg(args, config: SuiteConfig) -> int:
    flat_sets = [load_stack(subdir) for directory in args.flat_dir for subdir in _subdirectories(directory)]
    fpn = load_fpn_map(args.fpn) if args.fpn else None
    dark_reference = load_stack(args.dark_reference) if args.dark_reference else None
    params = calibrate_pg(flat_sets, fpn=fpn, pbn_theta=args.theta, dark_reference=dark_reference)
    if args.merge_into and Path(args.merge_into).exists():
        params = load_pg_params(args.merge_into).merge(params)
    save_pg_params(params, args.output)
    return 0


def cmd_estimate_pbn(args, config: SuiteConfig) -> int:
    estimate = estimate_pbn(load_frame(args.frame), theta=args.theta, period=args.period)
    _write_json(estimate.to_dict(), args.output)
    return 0


def cmd_denoise(args, config: SuiteConfig) -> int:
    paths = _inputs(args.input)
    denoise_config = config.denoise_config(args)
    pg = _load_pg(args.pg)
    denoiser = ExternalDenoiser(args.external_dir, timeout=args.timeout) if args.external_dir else None
    output_dir = Path(args.output_dir)
    fpn = None
    for path in paths:
        raw = load_frame(path)
        fpn = fpn or _load_fpn(args.fpn, raw)
        result = run_pipeline(raw, fpn, pg, denoise_config, denoiser=denoiser)
        save_float_frame(result.output, output_dir / f"{path.stem}_denoised.npy")
        if args.stages:
            for stage, frame in result.stages.items():
                save_float_frame(frame, output_dir / 'stages' / f"{path.stem}_{stage}.npy")
            _write_json(result.pbn.to_dict(), str(output_dir / 'stages' / f"{path.stem}_pbn.json"))
        logger.info(f"Denoised {path.name} (kappa={result.pbn.kappa:.2f})")
    return 0


def cmd_build_dataset(args, config: SuiteConfig) -> int:
    if args.synthetic:
        suite = build_synthetic_suite(config.suite_spec(args))
        save_test_pairs(suite.pairs, args.output_dir)
        return 0
    if not args.dark_dir or not args.lit_dir or len(args.dark_dir) != len(args.lit_dir):
        raise ArgumentError("build-dataset needs matching --dark-dir/--lit-dir pairs (or --synthetic)")
    thresholds = config.gain_classes
    pairs = []
    for index, (dark_dir, lit_dir) in enumerate(zip(args.dark_dir, args.lit_dir)):
        dark, lit = load_stack(dark_dir), load_stack(lit_dir)
        for sample in range(min(args.samples, len(lit))):
            pairs.append(build_test_pair(dark, lit, sample, pair_id=f"set{index:02d}_{sample:04d}",
                                         low_max=thresholds['low_max'], medium_max=thresholds['medium_max']))
    save_test_pairs(pairs, args.output_dir)
    return 0


def cmd_make_training_pairs(args, config: SuiteConfig) -> int:
    seed = config.resolve_seed(args, default=0)
    clean_frames = load_clean_directory(args.clean_dir)
    make_training_pairs(clean_frames, load_pg_params(args.pg), args.gain, args.count, seed,
                        args.output_dir, crop_size=args.crop_size, interpolate=not args.no_interpolate)
    return 0


def _calibrated_suite(args, config: SuiteConfig):
    suite = build_synthetic_suite(config.suite_spec(args))
    fpn, pg = calibrate_suite(suite)
    return suite.pairs, fpn, pg


def _stored_pairs(args):
    if not args.pairs_dir:
        raise ArgumentError("--pairs-dir is required without --synthetic")
    pairs = load_test_pairs(args.pairs_dir)
    if not pairs:
        raise ArgumentError(f"no test pairs in {args.pairs_dir}")
    return pairs, _load_fpn(args.fpn, pairs[0].noisy), _load_pg(args.pg)


def cmd_evaluate(args, config: SuiteConfig) -> int:
    pairs, fpn, pg = _calibrated_suite(args, config) if args.synthetic else _stored_pairs(args)
    denoiser = ExternalDenoiser(args.external_dir, timeout=args.timeout) if args.external_dir else None
    report = evaluate_suite(pairs, fpn, pg, config.denoise_config(args), workers=args.workers,
                            denoiser=denoiser)
    if args.output:
        Path(args.output).parent.mkdir(parents=True, exist_ok=True)
        Path(args.output).write_text(report.to_json() + '\n', encoding='utf-8')
    if args.table or not args.output:
        sys.stdout.write(report.to_table() + '\n')
    return 0


def cmd_quantize_check(args, config: SuiteConfig) -> int:
    pairs, fpn, pg = _calibrated_suite(args, config) if args.synthetic else _stored_pairs(args)
    denoise_config = config.denoise_config(args)
    frames = [pair.noisy for pair in pairs]
    qplan_path = args.qplan or config.qplan
    plan = load_qplan(qplan_path) if qplan_path else profile_qplan(frames, fpn, pg, denoise_config)
    if args.save_qplan:
        save_qplan(plan, args.save_qplan)
    _write_json(quantize_check(frames, fpn, pg, denoise_config, plan), args.output)
    return 0


def cmd_synth_suite(args, config: SuiteConfig) -> int:
    write_suite(build_synthetic_suite(config.suite_spec(args)), args.output_dir)
    return 0


def cmd_preview(args, config: SuiteConfig) -> int:
    save_preview(demosaic_preview(load_frame(args.frame)), args.output)
    return 0


# ------------------------------------------------------------------ parser

def _add_denoise_flags(parser):
    parser.add_argument('--smoother', choices=('gaussian', 'nlm'), help='residual smoother')
    parser.add_argument('--strength', type=float, help='smoothing strength in stabilized noise std units')
    parser.add_argument('--gaussian-sigma', type=float, help='Gaussian kernel sigma (0 = identity smoother)')
    parser.add_argument('--nlm-patch-radius', type=int, help='NLM patch radius in pixels')
    parser.add_argument('--nlm-search-radius', type=int, help='NLM search radius in pixels')
    parser.add_argument('--no-per-phase', action='store_true', help='smooth the whole mosaic instead of each Bayer phase')


def _add_calibration_flags(parser):
    parser.add_argument('--fpn', help='.fpn map (default: zero map)')
    parser.add_argument('--pg', help='PG parameters JSON')


def _add_external_flags(parser):
    parser.add_argument('--external-dir', help='exchange directory of an external denoiser')
    parser.add_argument('--timeout', type=float, default=Config.EXTERNAL_DENOISER_TIMEOUT,
                        help='seconds to wait for each external output')


def _add_suite_flags(parser):
    parser.add_argument('--synthetic', action='store_true', help='build and calibrate a synthetic suite in memory')
    parser.add_argument('--pairs-per-class', type=int, help='synthetic pairs per gain class')
    parser.add_argument('--frames-per-stack', type=int, help='synthetic frames per dark/lit stack')


def build_arg_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('--config', help='JSON run configuration (flags override it)')
    common.add_argument('--seed', type=int, help='random seed (overrides the config)')
    common.add_argument('--verbose', '-v', action='store_true', help='debug logging')

    parser = argparse.ArgumentParser(prog='endonoise', description='Raw endoscope sensor noise toolkit')
    sub = parser.add_subparsers(dest='cmd', required=True)

    p = sub.add_parser('simulate', parents=[common], help='add modeled sensor noise to clean frames')
    p.add_argument('--clean-dir', required=True, help='directory of clean 16-bit PGM frames')
    p.add_argument('--output-dir', required=True, help='directory for noisy frames and manifest.json')
    p.add_argument('--noise-params', required=True, help='NoiseModelParams JSON')
    p.add_argument('--gain', type=float, default=1.0, help='analog gain')
    p.add_argument('--exposure-ms', type=float, default=1.0, help='exposure time in ms')
    p.add_argument('--frames-per-input', type=int, default=1, help='noisy frames per clean frame')
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser('calibrate-fpn', parents=[common], help='fit per-pixel FPN from dark sets')
    p.add_argument('--dark-dir', action='append', required=True,
                   help='dark set directory, or a parent of set directories (repeatable)')
    p.add_argument('--theta', type=float, help='PBN flatness threshold in DN')
    p.add_argument('--output', required=True, help='output .fpn file')
    p.set_defaults(func=cmd_calibrate_fpn)

    p = sub.add_parser('calibrate-pg', parents=[common], help='fit the variance line from flat fields')
    p.add_argument('--flat-dir', action='append', required=True,
                   help='flat set directory, or a parent of level directories (repeatable)')
    p.add_argument('--fpn', help='.fpn map used as dark offset')
    p.add_argument('--dark-reference', help='dark stack directory used as offset when no map is given')
    p.add_argument('--theta', type=float, help='PBN flatness threshold in DN')
    p.add_argument('--merge-into', help='existing PG JSON to merge the new entry into')
    p.add_argument('--output', required=True, help='output PG JSON')
    p.set_defaults(func=cmd_calibrate_pg)

    p = sub.add_parser('estimate-pbn', parents=[common], help='estimate banding of one frame')
    p.add_argument('--frame', required=True, help='PGM frame')
    p.add_argument('--theta', type=float, help='flatness threshold in DN')
    p.add_argument('--period', type=int, default=Config.PBN_PERIOD, help='banding period in pixels')
    p.add_argument('--output', help='output JSON (default: stdout)')
    p.set_defaults(func=cmd_estimate_pbn)

    p = sub.add_parser('denoise', parents=[common], help='run the correction pipeline')
    p.add_argument('--input', required=True, help='PGM frame or directory of frames')
    p.add_argument('--output-dir', required=True, help='directory for denoised .npy frames')
    p.add_argument('--stages', action='store_true', help='also write every intermediate stage')
    _add_calibration_flags(p)
    _add_denoise_flags(p)
    _add_external_flags(p)
    p.set_defaults(func=cmd_denoise)

    p = sub.add_parser('build-dataset', parents=[common], help='build test pairs from dark/lit stacks')
    p.add_argument('--dark-dir', action='append', help='dark stack directory (repeatable, paired with --lit-dir)')
    p.add_argument('--lit-dir', action='append', help='lit stack directory (repeatable)')
    p.add_argument('--samples', type=int, default=1, help='pairs drawn from each lit stack')
    p.add_argument('--output-dir', required=True, help='directory for pairs.json and pair files')
    _add_suite_flags(p)
    p.set_defaults(func=cmd_build_dataset)

    p = sub.add_parser('make-training-pairs', parents=[common], help='generate synthetic training pairs')
    p.add_argument('--clean-dir', required=True, help='directory of clean 16-bit PGM frames')
    p.add_argument('--pg', required=True, help='PG parameters JSON')
    p.add_argument('--gain', type=float, required=True, help='analog gain of the generated noise')
    p.add_argument('--count', type=int, required=True, help='number of pairs')
    p.add_argument('--crop-size', type=int, default=Config.TRAINING_CROP_SIZE, help='square crop size (even)')
    p.add_argument('--no-interpolate', action='store_true', help='require an exact PG entry at --gain')
    p.add_argument('--output-dir', required=True, help='dataset directory')
    p.set_defaults(func=cmd_make_training_pairs)

    p = sub.add_parser('evaluate', parents=[common], help='per-stage PSNR/SSIM ablation report')
    p.add_argument('--pairs-dir', help='directory written by build-dataset')
    p.add_argument('--workers', type=int, default=Config.EVAL_WORKERS, help='parallel pair evaluations')
    p.add_argument('--output', help='report JSON path')
    p.add_argument('--table', action='store_true', help='print the text table to stdout')
    _add_calibration_flags(p)
    _add_denoise_flags(p)
    _add_external_flags(p)
    _add_suite_flags(p)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser('quantize-check', parents=[common], help='fixed-point vs float comparison')
    p.add_argument('--qplan', help='qplan JSON (default: profiled from the frames)')
    p.add_argument('--save-qplan', help='write the qplan in use to this path')
    p.add_argument('--pairs-dir', help='directory written by build-dataset')
    p.add_argument('--output', help='report JSON (default: stdout)')
    _add_calibration_flags(p)
    _add_denoise_flags(p)
    _add_suite_flags(p)
    p.set_defaults(func=cmd_quantize_check)

    p = sub.add_parser('synth-suite', parents=[common], help='write a synthetic capture campaign to disk')
    p.add_argument('--output-dir', required=True, help='suite directory')
    p.add_argument('--pairs-per-class', type=int, help='synthetic pairs per gain class')
    p.add_argument('--frames-per-stack', type=int, help='synthetic frames per dark/lit stack')
    p.set_defaults(func=cmd_synth_suite)

    p = sub.add_parser('preview', parents=[common], help='bilinear demosaic preview as PPM')
    p.add_argument('--frame', required=True, help='PGM frame')
    p.add_argument('--output', required=True, help='output .ppm')
    p.set_defaults(func=cmd_preview)

    return parser


def _error_line(error: BaseException) -> str:
    message = str(error).replace('\\', '\\\\').replace('"', '\\"').replace('\n', ' ')
    return f'error={type(error).__name__} message="{message}"'


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_arg_parser()
    args = parser.parse_args(argv)

    logging.basicConfig(
        level=logging.DEBUG if args.verbose else getattr(logging, Config.LOG_LEVEL, logging.INFO),
        format=LOG_FORMAT,
        stream=sys.stderr,
    )
    try:
        config = SuiteConfig.load(args.config)
        config.apply_paths(args)
        return int(args.func(args, config))
    except (EndoNoiseError, OSError) as e:
        logger.debug("Command failed", exc_info=True)
        sys.stderr.write(_error_line(e) + '\n')
        return 1
    except Exception as e:
        logger.exception(f"Unexpected error in {args.cmd}")
        sys.stderr.write(_error_line(e) + '\n')
        return 1


if __name__ == '__main__':
    raise SystemExit(main())
