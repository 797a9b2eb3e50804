#!/usr/bin/env python3
"""
Tests for PSNR/SSIM, paired test sets and the ablation report
"""

import json
import math
import os
import sys
import unittest

import numpy as np
import pytest
from skimage.metrics import structural_similarity

# Add the parent directory to the path to import modules
sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from errors import ArgumentError, MetadataError
from fpn_calib import FpnMap
from metrics_eval import (
    GAIN_CLASSES, AblationReport, TestPair, build_test_pair, classify_gain, evaluate_suite, gaussian_window_size,
    load_test_pairs, psnr, save_test_pairs, ssim,
)
from noise_synth import NoiseModelParams, synthesize_stack
from pg_calib import PgParams
from raw_core import FloatFrame, FrameStack, RawFrame
from residual_denoise import PIPELINE_STAGES, DenoiseConfig


def constant_stack(value, count, gain=2.0, shape=(16, 32), black_level=0):
    return FrameStack([
        RawFrame(samples=np.full(shape, value), analog_gain=gain, exposure_time=1.0,
                 black_level=black_level, frame_index=i)
        for i in range(count)
    ])


def brute_force_ssim(x, y, peak, size):
    c1, c2 = (0.01 * peak) ** 2, (0.03 * peak) ** 2
    values = []
    for i in range(x.shape[0] - size + 1):
        for j in range(x.shape[1] - size + 1):
            a = x[i:i + size, j:j + size]
            b = y[i:i + size, j:j + size]
            mu_a, mu_b = a.mean(), b.mean()
            cov = ((a - mu_a) * (b - mu_b)).mean()
            values.append((2 * mu_a * mu_b + c1) * (2 * cov + c2)
                          / ((mu_a ** 2 + mu_b ** 2 + c1) * (a.var() + b.var() + c2)))
    return float(np.mean(values))


class TestPsnr(unittest.TestCase):

    def test_known_offset(self):
        clean = np.zeros((8, 8))
        self.assertAlmostEqual(psnr(clean, clean + 16, peak=255), 24.0484, places=4)

    def test_identical_frames(self):
        frame = FloatFrame(samples=np.full((4, 4), 7.0))
        self.assertEqual(psnr(frame, frame), math.inf)

    def test_peak_defaults_to_container_full_scale(self):
        reference = FloatFrame(samples=np.zeros((4, 4)), bit_depth=10)
        self.assertAlmostEqual(psnr(reference, np.ones((4, 4))), 20 * math.log10(1023))

    def test_argument_errors(self):
        with self.assertRaises(ArgumentError):
            psnr(np.zeros((4, 4)), np.zeros((4, 4)))
        with self.assertRaises(ArgumentError):
            psnr(np.zeros((4, 4)), np.zeros((4, 6)), peak=1.0)
        with self.assertRaises(ArgumentError):
            psnr(np.zeros((4, 4)), np.ones((4, 4)), peak=0.0)


class TestSsim(unittest.TestCase):
    """Windowed structural similarity"""

    def test_identical_frames_score_one(self):
        x = np.random.default_rng(0).uniform(0, 255, (24, 24))
        for window in ('uniform', 'gaussian'):
            with self.subTest(window=window):
                self.assertAlmostEqual(ssim(x, x, peak=255, window=window), 1.0, places=12)

    def test_uniform_window_matches_direct_definition(self):
        rng = np.random.default_rng(1)
        for trial in range(20):
            with self.subTest(trial=trial):
                x = rng.uniform(0, 255, (16, 16))
                y = x + rng.normal(0, 20, (16, 16))
                self.assertAlmostEqual(ssim(x, y, peak=255, window_size=8),
                                       brute_force_ssim(x, y, 255, 8), delta=1e-9)

    def test_noise_lowers_score(self):
        rng = np.random.default_rng(2)
        x = rng.uniform(0, 255, (32, 32))
        slight = ssim(x, x + rng.normal(0, 2, x.shape), peak=255)
        heavy = ssim(x, x + rng.normal(0, 40, x.shape), peak=255)
        self.assertGreater(slight, heavy)
        self.assertLess(heavy, 1.0)

    def test_gaussian_window_matches_skimage(self):
        rng = np.random.default_rng(3)
        for sigma in (1.0, 1.5):
            with self.subTest(sigma=sigma):
                x = rng.uniform(0, 4095, (40, 48))
                y = np.clip(x + rng.normal(0, 60, x.shape), 0, 4095)
                expected = structural_similarity(x, y, data_range=4095, gaussian_weights=True, sigma=sigma,
                                                 use_sample_covariance=False)
                self.assertAlmostEqual(ssim(x, y, peak=4095, window='gaussian', gaussian_sigma=sigma),
                                       expected, delta=1e-12)

    def test_gaussian_window_needs_room(self):
        self.assertEqual(gaussian_window_size(1.5), 11)
        x = np.random.default_rng(4).uniform(0, 255, (10, 40))
        with self.assertRaises(ArgumentError):
            ssim(x, x, peak=255, window='gaussian')
        self.assertAlmostEqual(ssim(x, x, peak=255, window='gaussian', gaussian_sigma=1.0), 1.0, places=12)

    def test_argument_errors(self):
        with self.assertRaises(ArgumentError):
            ssim(np.zeros((4, 4)), np.zeros((4, 4)), peak=1.0, window_size=8)
        with self.assertRaises(ArgumentError):
            ssim(np.zeros((8, 8)), np.zeros((8, 8)), peak=1.0, window='box')
        with self.assertRaises(ArgumentError):
            ssim(np.zeros((8, 8)), np.zeros((8, 8)))


class TestTestPairs(unittest.TestCase):

    def test_classify_gain(self):
        test_cases = [(1.0, 'Low'), (2.9, 'Low'), (3.0, 'Medium'), (5.9, 'Medium'), (6.0, 'Large'), (16.0, 'Large')]
        for gain, expected in test_cases:
            with self.subTest(gain=gain):
                self.assertEqual(classify_gain(gain), expected)
        self.assertEqual(classify_gain(2.0, low_max=1.5, medium_max=2.5), 'Medium')

    def test_clean_is_difference_of_means(self):
        dark = constant_stack(64, 4, black_level=64)
        lit = FrameStack([
            RawFrame(samples=np.full((16, 32), value), analog_gain=2.0, exposure_time=1.0, black_level=64,
                     frame_index=i)
            for i, value in enumerate((160, 170, 150, 180))
        ])
        pair = build_test_pair(dark, lit, 2, pair_id='p0')
        self.assertTrue(np.allclose(pair.clean.samples, 101.0))
        self.assertEqual(pair.clean.black_level, 0)
        self.assertTrue(np.all(pair.noisy.samples == 150))
        self.assertEqual((pair.gain_class, pair.dark_count, pair.lit_count), ('Low', 4, 4))

    def test_mismatched_stacks(self):
        with self.assertRaises(ArgumentError):
            build_test_pair(constant_stack(0, 2, gain=1.0), constant_stack(100, 2, gain=2.0), 0)
        with self.assertRaises(ArgumentError):
            build_test_pair(constant_stack(0, 2), constant_stack(100, 2), 5)

    def test_pair_validation(self):
        noisy = RawFrame(samples=np.zeros((4, 4)))
        with self.assertRaises(ArgumentError):
            TestPair(noisy=noisy, clean=FloatFrame(samples=np.zeros((4, 6))), gain_class='Low')
        with self.assertRaises(ArgumentError):
            TestPair(noisy=noisy, clean=FloatFrame(samples=np.zeros((4, 4))), gain_class='Huge')


class TestPairPersistence:

    def test_round_trip(self, tmp_path):
        pair = build_test_pair(constant_stack(0, 2), constant_stack(100, 3), 1, pair_id='scope_1')
        save_test_pairs([pair], tmp_path)
        manifest = json.loads((tmp_path / 'pairs.json').read_text())
        assert manifest['pairs'][0]['pair_id'] == 'scope_1'

        loaded = load_test_pairs(tmp_path)
        assert len(loaded) == 1
        assert loaded[0].gain_class == 'Low'
        assert np.array_equal(loaded[0].noisy.samples, pair.noisy.samples)
        assert np.array_equal(loaded[0].clean.samples, pair.clean.samples)
        assert loaded[0].lit_count == 3

    def test_missing_manifest(self, tmp_path):
        with pytest.raises(MetadataError):
            load_test_pairs(tmp_path)


class TestEvaluateSuite:
    """Per-stage ablation over paired test sets"""

    @pytest.fixture
    def noisy_pairs(self):
        clean = FloatFrame(samples=np.full((32, 32), 150.0))
        pairs = []
        for index, gain in enumerate((1.0, 4.0, 4.0)):
            params = NoiseModelParams(shot_gain_a=0.5 * gain, read_sigma=gain, seed=index)
            lit = synthesize_stack(clean, params, gain, 1.0, 8)
            dark = constant_stack(0, 2, gain=gain, shape=(32, 32))
            pairs.append(build_test_pair(dark, lit, 0, pair_id=f"pair_{index}"))
        return pairs

    def test_zero_noise_scores_infinite(self):
        pair = build_test_pair(constant_stack(0, 2), constant_stack(100, 2), 0, pair_id='flat')
        report = evaluate_suite([pair], FpnMap.zeros(32, 16), None, DenoiseConfig.identity())
        for stage in PIPELINE_STAGES:
            assert report.classes['Low'][stage]['psnr_mean'] == math.inf
            assert report.classes['All'][stage]['ssim_mean'] == pytest.approx(1.0)
        assert '"inf"' in report.to_json()

    def test_independent_of_workers_and_order(self, noisy_pairs):
        pg = PgParams.single(1.0, 0.5, 1.0).merge(PgParams.single(4.0, 2.0, 16.0))
        fpn = FpnMap.zeros(32, 32)
        sequential = evaluate_suite(noisy_pairs, fpn, pg, workers=1)
        threaded = evaluate_suite(list(reversed(noisy_pairs)), fpn, pg, workers=2)
        assert sequential.to_json() == threaded.to_json()
        assert sequential.class_counts == {'Low': 1, 'Medium': 2, 'All': 3}

    def test_denoising_improves_noisy_stage(self, noisy_pairs):
        pg = PgParams.single(1.0, 0.5, 1.0).merge(PgParams.single(4.0, 2.0, 16.0))
        report = evaluate_suite(noisy_pairs, FpnMap.zeros(32, 32), pg, DenoiseConfig(gaussian_sigma=1.5))
        overall = report.classes['All']
        assert overall['denoised']['psnr_mean'] > overall['noisy']['psnr_mean']

    def test_table_marks_missing_classes(self, noisy_pairs):
        report = evaluate_suite(noisy_pairs, FpnMap.zeros(32, 32), None, DenoiseConfig.identity())
        table = report.to_table()
        lines = table.splitlines()
        assert lines[0].startswith('Stage')
        assert any(line.startswith('Ours') for line in lines)
        assert lines[2].split().count('-') == 2
        assert isinstance(report, AblationReport)
        assert set(report.classes) == {'Low', 'Medium', 'All'}
        assert 'Large' not in report.class_counts

    def test_empty_suite(self):
        with pytest.raises(ArgumentError):
            evaluate_suite([], FpnMap.zeros(4, 4), None)

    def test_gain_class_names(self):
        assert GAIN_CLASSES == ('Low', 'Medium', 'Large')


if __name__ == '__main__':
    unittest.main()
