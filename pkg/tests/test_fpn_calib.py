#!/usr/bin/env python3
"""
Tests for fixed-pattern noise calibration, prediction and the .fpn format
"""

import json
import os
import struct
import sys
import tempfile
import unittest
from pathlib import Path

import numpy as np

# Add the parent directory to the path to import modules
sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from errors import ArgumentError, EndoNoiseError, FrameFormatError, PbnEstimationError, RankDeficiencyError
from fpn_calib import (
    FPN_MAGIC, FpnMap, calibrate_fpn, calibrate_fpn_from_means, corrected_dark_mean, fit_fpn_lines,
    load_fpn_map, predict_fpn, remove_fpn, save_fpn_map,
)
from noise_synth import NoiseModelParams, PbnParams, synthesize_stack
from raw_core import FloatFrame, FrameStack, RawFrame


def dark_sets_from(fpn, exposures, frames, sigma, kappa, black_level, seed, shape):
    dark = FloatFrame(samples=np.zeros(shape), provenance='dark')
    sets = []
    for index, t in enumerate(exposures):
        params = NoiseModelParams(shot_gain_a=1.0, read_sigma=sigma, fpn=fpn,
                                  pbn=PbnParams(kappa=kappa, period=4, phase=1),
                                  seed=seed + index, black_level=black_level)
        sets.append((synthesize_stack(dark, params, 1.0, t, frames), 1.0, t))
    return sets


class TestFpnMap(unittest.TestCase):

    def test_predict(self):
        fpn = FpnMap(K=np.full((4, 4), 0.25), B=np.full((4, 4), 2.0), sensor_id='s')
        predicted = predict_fpn(fpn, 2.0, 8.0)
        self.assertTrue(np.allclose(predicted.samples, 6.0))
        self.assertEqual(predicted.provenance, 'fpn_prediction')

    def test_predict_argument_errors(self):
        fpn = FpnMap.zeros(4, 4)
        with self.assertRaises(ArgumentError):
            predict_fpn(fpn, 0.9, 1.0)
        with self.assertRaises(ArgumentError):
            predict_fpn(fpn, 1.0, 0.0)

    def test_remove_uses_frame_metadata(self):
        fpn = FpnMap(K=np.full((4, 4), 1.0), B=np.full((4, 4), 10.0))
        frame = RawFrame(samples=np.full((4, 4), 50), analog_gain=2.0, exposure_time=4.0)
        removed = remove_fpn(frame, fpn)
        self.assertTrue(np.allclose(removed.samples, 32.0))
        self.assertEqual(removed.provenance, 'fpn_removed')
        self.assertTrue(np.allclose(remove_fpn(frame, fpn, gain=1.0, t=1.0).samples, 39.0))

    def test_remove_shape_mismatch(self):
        with self.assertRaises(ArgumentError):
            remove_fpn(RawFrame(samples=np.zeros((4, 6))), FpnMap.zeros(4, 4))

    def test_calibration_points_need_two_products(self):
        with self.assertRaises(ArgumentError):
            FpnMap(K=np.zeros((2, 2)), B=np.zeros((2, 2)), calibration_points=((1.0, 4.0), (2.0, 2.0)))


class TestFitFpnLines(unittest.TestCase):
    """Closed-form per-pixel regression"""

    def test_exact_lines(self):
        rng = np.random.default_rng(0)
        K = rng.uniform(0, 4, (6, 8))
        B = rng.uniform(0, 16, (6, 8))
        products = [1.0, 2.0, 4.0, 8.0]
        means = [K * u + B for u in products]
        K_fit, B_fit, rms = fit_fpn_lines(means, products)
        self.assertTrue(np.allclose(K_fit, K, atol=1e-9))
        self.assertTrue(np.allclose(B_fit, B, atol=1e-9))
        self.assertLess(rms, 1e-9)

    def test_rank_deficiency(self):
        with self.assertRaises(RankDeficiencyError):
            fit_fpn_lines([np.zeros((2, 2)), np.ones((2, 2))], [4.0, 4.0])

    def test_from_means(self):
        means = [np.full((2, 2), 3.0), np.full((2, 2), 5.0)]
        fpn = calibrate_fpn_from_means(means, [(1.0, 1.0), (1.0, 2.0)], sensor_id='x')
        self.assertTrue(np.allclose(fpn.K, 2.0))
        self.assertTrue(np.allclose(fpn.B, 1.0))
        self.assertEqual(fpn.sensor_id, 'x')


class TestCalibrateFpn(unittest.TestCase):

    def test_single_set_is_rank_deficient(self):
        stack = FrameStack([RawFrame(samples=np.full((8, 32), 10))])
        with self.assertRaises(RankDeficiencyError):
            calibrate_fpn([(stack, 1.0, 1.0)])

    def test_equal_products_are_rank_deficient(self):
        a = FrameStack([RawFrame(samples=np.full((8, 32), 10), analog_gain=1.0, exposure_time=4.0)])
        b = FrameStack([RawFrame(samples=np.full((8, 32), 10), analog_gain=2.0, exposure_time=2.0)])
        with self.assertRaises(RankDeficiencyError):
            calibrate_fpn([(a, 1.0, 4.0), (b, 2.0, 2.0)])

    def test_pbn_failure_names_the_set(self):
        flat = FrameStack([RawFrame(samples=np.full((8, 32), 10), exposure_time=1.0)])
        ramp = np.tile(np.arange(32) * 50, (8, 1))
        steep = FrameStack([RawFrame(samples=ramp, exposure_time=2.0)])
        with self.assertRaises(PbnEstimationError) as context:
            calibrate_fpn([(flat, 1.0, 1.0), (steep, 1.0, 2.0)], theta=8.0)
        self.assertEqual(context.exception.set_index, 1)
        self.assertIn('set 1', str(context.exception))

    def test_declared_values_win_over_metadata(self):
        a = FrameStack([RawFrame(samples=np.full((8, 32), 10), exposure_time=1.0)])
        b = FrameStack([RawFrame(samples=np.full((8, 32), 20), exposure_time=1.0)])
        with self.assertLogs('fpn_calib', level='WARNING'):
            fpn = calibrate_fpn([(a, 1.0, 1.0), (b, 1.0, 2.0)])
        self.assertTrue(np.allclose(fpn.K, 10.0))
        self.assertTrue(np.allclose(fpn.B, 0.0))

    def test_corrected_dark_mean_removes_banding(self):
        dark = FloatFrame(samples=np.zeros((16, 32)))
        params = NoiseModelParams(shot_gain_a=0.0, read_sigma=0.0, quant_step=0.0,
                                  pbn=PbnParams(kappa=10.0, period=4, phase=2), black_level=50)
        stack = synthesize_stack(dark, params, 1.0, 1.0, 3)
        self.assertTrue(np.allclose(corrected_dark_mean(stack), 50.0))

    def test_recovers_known_map(self):
        """Seeded closure on a small sensor with banding"""
        rng = np.random.default_rng(42)
        shape = (32, 32)
        truth = FpnMap(K=rng.uniform(0, 4, shape), B=rng.uniform(0, 16, shape))
        sets = dark_sets_from(truth, (1.0, 2.0, 4.0, 8.0), frames=64, sigma=2.0, kappa=16.0,
                              black_level=64, seed=100, shape=shape)
        fpn = calibrate_fpn(sets, theta=16.0)

        k_error = np.sqrt(np.mean((fpn.K - truth.K) ** 2)) / np.sqrt(np.mean(truth.K ** 2))
        b_error = np.sqrt(np.mean((fpn.B - 64.0 - truth.B) ** 2))
        self.assertLess(k_error, 0.05)
        self.assertLess(b_error, 0.5)
        self.assertEqual(fpn.calibration_points, ((1.0, 1.0), (1.0, 2.0), (1.0, 4.0), (1.0, 8.0)))


class TestFpnFile(unittest.TestCase):
    """.fpn persistence"""

    def setUp(self):
        self.temp_dir = tempfile.TemporaryDirectory()
        self.path = Path(self.temp_dir.name) / 'map.fpn'

    def tearDown(self):
        self.temp_dir.cleanup()

    def test_bit_exact_round_trip(self):
        rng = np.random.default_rng(3)
        fpn = FpnMap(K=rng.normal(0, 1, (6, 10)), B=rng.normal(20, 5, (6, 10)), fit_residual_rms=0.125,
                     calibration_points=((1.0, 2.0), (4.0, 8.0)), sensor_id='scope-b')
        save_fpn_map(fpn, self.path)
        loaded = load_fpn_map(self.path)
        self.assertTrue(np.array_equal(loaded.K, fpn.K))
        self.assertTrue(np.array_equal(loaded.B, fpn.B))
        self.assertEqual(loaded.calibration_points, fpn.calibration_points)
        self.assertEqual((loaded.fit_residual_rms, loaded.sensor_id), (0.125, 'scope-b'))
        self.assertTrue(self.path.read_bytes().startswith(FPN_MAGIC))

    def test_bad_magic(self):
        self.path.write_bytes(b'NOTAMAP0' + struct.pack('<I', 2) + b'{}')
        with self.assertRaises(FrameFormatError):
            load_fpn_map(self.path)

    def test_truncated_planes(self):
        save_fpn_map(FpnMap.zeros(4, 4), self.path)
        data = self.path.read_bytes()
        header = json.dumps({'height': 4, 'fit_residual_rms': 0.0, 'calibration_points': []}).encode()
        test_cases = [
            ('planes', data[:-8]),
            ('length field', FPN_MAGIC + b'\x05'),
            ('header body', FPN_MAGIC + struct.pack('<I', 64) + b'{"width"'),
            ('missing width', FPN_MAGIC + struct.pack('<I', len(header)) + header + bytes(128)),
            ('non-object header', FPN_MAGIC + struct.pack('<I', 2) + b'[]'),
        ]
        for name, payload in test_cases:
            with self.subTest(truncated=name):
                self.path.write_bytes(payload)
                with self.assertRaises(FrameFormatError) as cm:
                    load_fpn_map(self.path)
                self.assertIsInstance(cm.exception, EndoNoiseError)
                self.assertIn(str(self.path), str(cm.exception))

    def test_missing_file(self):
        with self.assertRaises(FrameFormatError):
            load_fpn_map(self.path)


if __name__ == '__main__':
    unittest.main()
