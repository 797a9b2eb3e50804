#!/usr/bin/env python3
"""
Tests for Poisson-Gaussian calibration and training-pair generation
"""

import json
import os
import sys
import tempfile
import unittest
from pathlib import Path

import numpy as np
import pytest

# Add the parent directory to the path to import modules
sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from errors import ArgumentError, CalibrationQualityError, MetadataError, RankDeficiencyError
from noise_synth import NoiseModelParams, synthesize_stack
from pg_calib import (
    PgEntry, PgParams, _augment, calibrate_pg, fit_variance_line, load_clean_directory, load_pg_params,
    make_training_pairs, save_pg_params,
)
from raw_core import FloatFrame, RawFrame, load_frame, save_frame


def flat_stack(level, a, sigma, frames, seed, shape=(64, 64), gain=1.0, bit_depth=16, black_level=64):
    clean = FloatFrame(samples=np.full(shape, float(level)), provenance='flat')
    params = NoiseModelParams(shot_gain_a=a, read_sigma=sigma, quant_step=0.0, seed=seed,
                              black_level=black_level, bit_depth=bit_depth)
    return synthesize_stack(clean, params, gain, 1.0, frames)


class TestPgParams(unittest.TestCase):
    """Lookup, interpolation and persistence of (a, b) per gain"""

    def setUp(self):
        self.params = PgParams(entries=(PgEntry(4.0, 2.0, 20.0), PgEntry(2.0, 1.0, 10.0)), source='test')

    def test_entries_sorted_by_gain(self):
        self.assertEqual(self.params.gains, [2.0, 4.0])

    def test_exact_entry(self):
        self.assertEqual(self.params.entry(4.0), (2.0, 20.0))

    def test_interpolation_and_extrapolation(self):
        a, b = self.params.entry(3.0)
        self.assertAlmostEqual(a, 1.5)
        self.assertAlmostEqual(b, 15.0)
        a, b = self.params.entry(6.0)
        self.assertAlmostEqual(a, 3.0)
        self.assertAlmostEqual(b, 30.0)

    def test_extrapolation_clamps_at_zero(self):
        params = PgParams(entries=(PgEntry(2.0, 1.0, 1.0), PgEntry(4.0, 3.0, 5.0)))
        self.assertEqual(params.entry(1.0), (0.0, 0.0))

    def test_missing_entry_errors(self):
        with self.assertRaises(ArgumentError):
            self.params.entry(3.0, interpolate=False)
        with self.assertRaises(ArgumentError):
            PgParams.single(2.0, 1.0, 1.0).entry(3.0)
        with self.assertRaises(ArgumentError):
            PgParams().entry(1.0)

    def test_merge_prefers_other(self):
        merged = self.params.merge(PgParams.single(4.0, 5.0, 50.0, source='new'))
        self.assertEqual(merged.entry(4.0), (5.0, 50.0))
        self.assertEqual(merged.entry(2.0), (1.0, 10.0))
        self.assertEqual(merged.source, 'test; new')

    def test_negative_entry_rejected(self):
        with self.assertRaises(ArgumentError):
            PgEntry(1.0, -0.1, 1.0)

    def test_json_persistence(self):
        with tempfile.TemporaryDirectory() as temp_dir:
            path = Path(temp_dir) / 'pg.json'
            save_pg_params(self.params, path)
            self.assertEqual(load_pg_params(path), self.params)
            path.write_text(json.dumps({'entries': [{'analog_gain': 1.0}]}))
            with self.assertRaises(MetadataError):
                load_pg_params(path)

    def test_fit_variance_line(self):
        means = np.array([10.0, 20.0, 40.0])
        a, b = fit_variance_line(means, 1.5 * means + 25.0)
        self.assertAlmostEqual(a, 1.5)
        self.assertAlmostEqual(b, 25.0)


class TestCalibratePg(unittest.TestCase):
    """Flat-field mean-variance fits"""

    def test_recovers_known_line(self):
        stacks = [flat_stack(level, 1.5, 5.0, 64, seed) for seed, level in enumerate((100, 400, 1600))]
        params = calibrate_pg(stacks)
        a, b = params.entry(1.0)
        self.assertLess(abs(a / 1.5 - 1.0), 0.05)
        self.assertLess(abs(b / 25.0 - 1.0), 0.2)
        self.assertIn('offset=black_level', params.source)

    def test_dark_reference_offset(self):
        stacks = [flat_stack(level, 1.5, 5.0, 32, seed) for seed, level in enumerate((100, 400, 1600))]
        dark = flat_stack(0, 1.5, 5.0, 32, seed=9)
        params = calibrate_pg(stacks, dark_reference=dark)
        a, _ = params.entry(1.0)
        self.assertLess(abs(a / 1.5 - 1.0), 0.1)
        self.assertIn('offset=dark_reference', params.source)

    def test_single_level_is_rank_deficient(self):
        with self.assertRaises(RankDeficiencyError):
            calibrate_pg([flat_stack(100, 1.0, 2.0, 16, 0, shape=(16, 32))])

    def test_identical_levels_are_rank_deficient(self):
        stack = flat_stack(100, 1.0, 2.0, 16, 0, shape=(16, 32))
        with self.assertRaises(RankDeficiencyError):
            calibrate_pg([stack, stack])

    def test_mixed_gains_rejected(self):
        low = flat_stack(100, 1.0, 2.0, 16, 0, shape=(16, 32), gain=1.0)
        high = flat_stack(400, 1.0, 2.0, 16, 1, shape=(16, 32), gain=2.0)
        with self.assertRaises(ArgumentError):
            calibrate_pg([low, high])

    def test_short_stack_rejected(self):
        stacks = [flat_stack(level, 1.0, 2.0, 4, seed, shape=(16, 32)) for seed, level in enumerate((100, 400))]
        with self.assertRaises(ArgumentError):
            calibrate_pg(stacks)

    def test_negative_slope_rejected(self):
        noisy_dim = flat_stack(100, 0.0, 10.0, 32, 0, shape=(32, 32))
        quiet_bright = flat_stack(400, 0.0, 2.0, 32, 1, shape=(32, 32))
        with self.assertRaises(CalibrationQualityError):
            calibrate_pg([noisy_dim, quiet_bright])

    def test_saturated_level_discarded(self):
        stacks = [
            flat_stack(level, 1.0, 2.0, 16, seed, shape=(32, 32), bit_depth=10, black_level=0)
            for seed, level in enumerate((100, 300, 1040))
        ]
        with self.assertLogs('pg_calib', level='WARNING') as logs:
            params = calibrate_pg(stacks)
        self.assertTrue(any('full scale' in line for line in logs.output))
        a, _ = params.entry(1.0)
        self.assertGreater(a, 0.8)


class TestAugmentation(unittest.TestCase):

    def test_bayer_pattern_follows_transform(self):
        values = np.zeros((4, 4))
        test_cases = [
            ((False, False, 0), 'RGGB'),
            ((True, False, 0), 'GRBG'),
            ((False, True, 0), 'GBRG'),
            ((True, True, 0), 'BGGR'),
            ((False, False, 1), 'GBRG'),
            ((False, False, 2), 'BGGR'),
        ]
        for (flip_h, flip_v, rotations), expected in test_cases:
            with self.subTest(flip_h=flip_h, flip_v=flip_v, rotations=rotations):
                _, pattern = _augment(values, 'RGGB', flip_h, flip_v, rotations)
                self.assertEqual(pattern, expected)


class TestTrainingPairs:
    """Synthetic (noisy, clean) pairs on disk"""

    @pytest.fixture
    def clean_frames(self):
        rng = np.random.default_rng(8)
        return [
            FloatFrame(samples=rng.uniform(50, 500, (48, 64)), provenance='clean', bit_depth=12)
            for _ in range(2)
        ]

    def test_manifest_is_deterministic(self, tmp_path, clean_frames):
        params = PgParams.single(2.0, 1.0, 4.0)
        first = make_training_pairs(clean_frames, params, 2.0, 3, seed=17, output_dir=tmp_path / 'a',
                                    crop_size=16)
        second = make_training_pairs(clean_frames, params, 2.0, 3, seed=17, output_dir=tmp_path / 'b',
                                     crop_size=16)
        assert first == second
        assert (tmp_path / 'a' / 'manifest.json').read_bytes() == (tmp_path / 'b' / 'manifest.json').read_bytes()
        for name in ('pair_0002_clean.pgm', 'pair_0002_noisy.pgm'):
            assert (tmp_path / 'a' / name).read_bytes() == (tmp_path / 'b' / name).read_bytes()

    def test_pairs_follow_manifest(self, tmp_path, clean_frames):
        params = PgParams.single(2.0, 1.0, 4.0)
        manifest = make_training_pairs(clean_frames, params, 2.0, 4, seed=3, output_dir=tmp_path,
                                       crop_size=16)
        assert manifest['count'] == 4
        assert (manifest['a'], manifest['b']) == (1.0, 4.0)
        for entry in manifest['pairs']:
            clean = load_frame(tmp_path / entry['clean_path'])
            noisy = load_frame(tmp_path / entry['noisy_path'])
            assert clean.samples.shape == (16, 16)
            assert clean.bayer_pattern == entry['augmentation']['bayer_pattern']
            assert entry['crop']['top'] % 2 == 0 and entry['crop']['left'] % 2 == 0
            assert noisy.analog_gain == 2.0
            assert not np.array_equal(clean.samples, noisy.samples)

    def test_interpolated_gain(self, tmp_path, clean_frames):
        params = PgParams(entries=(PgEntry(1.0, 1.0, 2.0), PgEntry(4.0, 4.0, 8.0)))
        manifest = make_training_pairs(clean_frames, params, 2.0, 1, seed=0, output_dir=tmp_path,
                                       crop_size=16)
        assert manifest['a'] == pytest.approx(2.0)
        assert manifest['b'] == pytest.approx(4.0)
        with pytest.raises(ArgumentError):
            make_training_pairs(clean_frames, params, 2.0, 1, seed=0, output_dir=tmp_path,
                                crop_size=16, interpolate=False)

    def test_argument_errors(self, tmp_path, clean_frames):
        params = PgParams.single(1.0, 1.0, 1.0)
        with pytest.raises(ArgumentError):
            make_training_pairs(clean_frames, params, 1.0, 1, seed=0, output_dir=tmp_path, crop_size=128)
        with pytest.raises(ArgumentError):
            make_training_pairs(clean_frames, params, 1.0, 1, seed=0, output_dir=tmp_path, crop_size=15)
        with pytest.raises(ArgumentError):
            make_training_pairs([], params, 1.0, 1, seed=0, output_dir=tmp_path, crop_size=16)

    def test_load_clean_directory_subtracts_black_level(self, tmp_path):
        save_frame(RawFrame(samples=np.full((4, 4), 100), black_level=64), tmp_path / 'b.pgm')
        save_frame(RawFrame(samples=np.full((4, 4), 30), black_level=64), tmp_path / 'a.pgm')
        frames = load_clean_directory(tmp_path)
        assert [float(f.samples[0, 0]) for f in frames] == [0.0, 36.0]


if __name__ == '__main__':
    unittest.main()
