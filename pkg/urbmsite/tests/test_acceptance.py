"""
End-to-end accuracy checks against the exact oracles. These take minutes to
hours, so they only run with URBM_DYN_LONG_TESTS=1.
"""
import json
import os
import tempfile
import unittest
from io import StringIO

import numpy as np
from django.core.cache import cache
from django.core.management import call_command
from django.test import SimpleTestCase, TestCase, override_settings

from dynamics.services.lattice_models import build_tfi
from dynamics.services.rbm_ansatz import RbmParams, all_configs, log_amplitudes, log_derivative_matrix
from dynamics.services.spinstate import apply_array
from dynamics.services.tvmc import build_system_exact

LONG_TESTS = os.getenv("URBM_DYN_LONG_TESTS") == "1"

TEST_CACHES = {
    "default": {
        "BACKEND": "django.core.cache.backends.locmem.LocMemCache",
        "LOCATION": "test-urbm-dyn-acceptance",
    }
}


@unittest.skipUnless(LONG_TESTS, "set URBM_DYN_LONG_TESTS=1 to run the acceptance suite")
@override_settings(CACHES=TEST_CACHES)
class AcceptanceTests(TestCase):
    def setUp(self):
        cache.clear()
        self.tmp = tempfile.TemporaryDirectory()
        self.addCleanup(self.tmp.cleanup)

    def run_experiment(self, experiment, *overrides):
        out = os.path.join(self.tmp.name, experiment)
        args = [experiment, "--out", out, "--no-progress"]
        for pair in overrides:
            args += ["--set", pair]
        call_command("urbm_dyn", *args, stdout=StringIO(), stderr=StringIO())
        with open(os.path.join(out, "metadata.json"), encoding="utf-8") as fh:
            return json.load(fh)

    def test_tfi_quench(self):
        metadata = self.run_experiment("quench")
        self.assertLessEqual(metadata["max_deviation"]["sx1"], 0.02)
        self.assertLessEqual(metadata["max_deviation"]["sxsx"], 0.02)

    def test_heisenberg_quench(self):
        metadata = self.run_experiment("quench", "model=heisenberg", "integrator.t_max=1.0")
        self.assertLessEqual(metadata["max_deviation"]["mz"], 0.02)
        self.assertLessEqual(metadata["max_deviation"]["sxsx"], 0.02)

    def test_triangular_quench(self):
        metadata = self.run_experiment("quench", "model=tafi2d", "integrator.t_max=1.5")
        self.assertEqual(metadata["config"]["model.N"], 12)
        self.assertLessEqual(metadata["max_deviation"]["sx1"], 0.03)
        self.assertLessEqual(metadata["max_deviation"]["sxsx"], 0.03)

    def test_open_system_trajectories(self):
        metadata = self.run_experiment("open")
        for name in ("sx1", "sxsx"):
            self.assertLessEqual(metadata["max_z_score"][name], 3.0)
            self.assertLessEqual(metadata["max_z_score_exact"][name], 3.0)
        self.assertLess(metadata["oracle"]["max_trace_drift"], 1e-8)

    def test_imaginary_time_ground_states(self):
        for model in ("tfi", "heisenberg"):
            with self.subTest(model=model):
                cache.clear()
                metadata = self.run_experiment("ite", f"model={model}")
                self.assertLessEqual(abs(metadata["energy_error"]), 1e-2)
                self.assertEqual(metadata["ite_descent_violations"], 0)

    def test_circuit_equivalence(self):
        metadata = self.run_experiment("circuit_check")
        self.assertGreaterEqual(metadata["min_fidelity"], 1 - 1e-10)
        self.assertLessEqual(metadata["max_ensemble_residual"], 1e-10)
        self.assertLessEqual(metadata["max_kernel_direction_error"], 1e-12)
        self.assertLessEqual(metadata["max_kernel_error"], 1e-12)

    def test_gradients_do_not_vanish_exponentially(self):
        metadata = self.run_experiment("gradient_scan")
        self.assertGreater(metadata["force_slope"], -0.3)

    def test_noise_ordering(self):
        metadata = self.run_experiment("noise_scan")
        self.assertLessEqual(metadata["max_deviation"]["0.0001"], 0.05)
        self.assertGreater(metadata["max_deviation"]["0.01"], 0.05)

    def test_autocorrelation_grows_with_size(self):
        metadata = self.run_experiment("autocorr")
        self.assertTrue(metadata["tau_int_increasing"])


def _finite_difference_O(params, eps=1e-5):
    idx = all_configs(params.N)
    vec = params.to_vector()
    O = np.empty((idx.size, vec.size), dtype=complex)
    for n in range(vec.size):
        step = np.zeros_like(vec)
        step[n] = eps
        up = log_amplitudes(RbmParams.from_vector(vec + step, params.N, params.M, params.urbm), idx)
        down = log_amplitudes(RbmParams.from_vector(vec - step, params.N, params.M, params.urbm), idx)
        O[:, n] = (up - down) / (2 * eps)
    return O


@unittest.skipUnless(LONG_TESTS, "set URBM_DYN_LONG_TESTS=1 to run the acceptance suite")
class DerivativeAcceptanceTests(SimpleTestCase):
    def test_log_derivatives_all_blocks(self):
        rng = np.random.default_rng(0)
        for urbm in (True, False):
            params = RbmParams.random(4, 3, rng, variance=0.1, urbm=urbm)
            exact = log_derivative_matrix(params, all_configs(4))
            np.testing.assert_allclose(exact, _finite_difference_O(params), rtol=1e-6, atol=1e-6)

    def test_system_against_numeric_derivatives(self):
        rng = np.random.default_rng(1)
        for draw in range(20):
            N, M = int(rng.integers(2, 4)), int(rng.integers(1, 3))
            params = RbmParams.random(N, M, rng, variance=0.1)
            H = build_tfi(N, 0.7, boundary="open")
            system = build_system_exact(params, H)

            psi = np.exp(log_amplitudes(params, all_configs(N)))
            psi /= np.linalg.norm(psi)
            p = np.abs(psi) ** 2
            h_weighted = np.conj(psi) * apply_array(H, psi)
            energy = h_weighted.sum()
            O = _finite_difference_O(params)
            mean = p @ O
            A = ((O.conj().T * p) @ O).real - np.outer(mean.real, mean.real)
            f = O.conj().T @ h_weighted - mean.real * energy
            with self.subTest(draw=draw, N=N, M=M):
                np.testing.assert_allclose(system.A, A, rtol=0, atol=1e-8)
                np.testing.assert_allclose(system.f, f, rtol=0, atol=1e-8)
