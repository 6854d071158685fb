import numpy as np
from django.test import SimpleTestCase

from dynamics.services.errors import ContractViolation, DegenerateStateError, GuardViolation
from dynamics.services.rbm_ansatz import (
    RbmParams,
    build_statevector,
    dense_projection_oracle,
    ensemble_decompose,
    entangler_unitary,
    hidden_count,
    log_amplitudes,
    log_cosh,
    log_derivative_matrix,
    n_var,
    param_labels,
    prepare_recycled,
    realW_coupling,
    real_coupling_angles,
    reconstruct_ensemble,
    rotation_gate,
)
from dynamics.services.spinstate import StateVector, fidelity


def random_params(N, M, seed=0, variance=0.1, urbm=True):
    return RbmParams.random(N, M, np.random.default_rng(seed), variance=variance, urbm=urbm)


class RbmParamsTests(SimpleTestCase):
    def test_hidden_count(self):
        self.assertEqual(hidden_count(14, 8), 112)
        self.assertEqual(hidden_count(6, 0.5), 3)
        with self.assertRaises(ContractViolation):
            hidden_count(3, 0.5)

    def test_urbm_rejects_real_couplings(self):
        with self.assertRaises(ContractViolation):
            RbmParams(np.zeros(2), np.zeros(1), np.full((2, 1), 0.1 + 0.2j))
        RbmParams(np.zeros(2), np.zeros(1), np.full((2, 1), 0.1 + 0.2j), urbm=False)

    def test_vector_layout(self):
        self.assertEqual(n_var(3, 2), 16)
        self.assertEqual(n_var(3, 2, urbm=False), 22)
        labels = param_labels(2, 2)
        self.assertEqual(labels[:2], ["b_re[0]", "b_re[1]"])
        self.assertEqual(labels[-4:], ["W_im[0,0]", "W_im[1,0]", "W_im[0,1]", "W_im[1,1]"])

        params = RbmParams.from_vector(np.arange(n_var(2, 2), dtype=float), 2, 2)
        self.assertEqual(params.b[1], 1 + 3j)
        self.assertEqual(params.m[0], 4 + 6j)
        self.assertEqual(params.W[1, 0], 9j)
        self.assertEqual(params.W[0, 1], 10j)
        np.testing.assert_array_equal(params.to_vector(), np.arange(12))

    def test_wrong_vector_length(self):
        with self.assertRaises(ContractViolation):
            RbmParams.from_vector(np.zeros(5), 2, 2)

    def test_json_is_lossless(self):
        params = random_params(3, 2, seed=4)
        restored = RbmParams.from_json(params.to_json())
        np.testing.assert_array_equal(restored.to_vector(), params.to_vector())
        self.assertTrue(restored.urbm)


class AmplitudeTests(SimpleTestCase):
    def test_zero_params_give_plus_state(self):
        state = build_statevector(RbmParams.zeros(3, 2))
        np.testing.assert_allclose(state.amplitudes, StateVector.plus(3).amplitudes, atol=1e-14)

    def test_imaginary_bias_is_a_phase(self):
        params = RbmParams(np.array([1j * np.pi / 4]), np.zeros(0), np.zeros((1, 0)))
        expected = np.array([np.exp(1j * np.pi / 4), np.exp(-1j * np.pi / 4)]) / np.sqrt(2)
        np.testing.assert_allclose(build_statevector(params).amplitudes, expected, atol=1e-14)

    def test_log_cosh_is_stable(self):
        x = np.array([800.0 + 0.3j, -800.0 + 0.3j, 0.2 - 0.1j])
        out = log_cosh(x)
        self.assertTrue(np.all(np.isfinite(out)))
        self.assertAlmostEqual(out[2], np.log(np.cosh(x[2])), places=12)
        self.assertAlmostEqual(out[0].real, 800.0 - np.log(2.0), places=10)

    def test_large_biases_do_not_overflow(self):
        params = RbmParams(np.array([400.0, 0.0]), np.array([300.0 + 0.1j]), np.zeros((2, 1)))
        state = build_statevector(params)
        self.assertAlmostEqual(state.probabilities()[0] + state.probabilities()[2], 1.0)

    def test_vanishing_amplitudes_raise(self):
        params = RbmParams(np.zeros(1), np.array([1j * np.pi / 2]), np.zeros((1, 1)))
        with self.assertRaises(DegenerateStateError):
            build_statevector(params)

    def test_guard(self):
        with self.assertRaises(GuardViolation):
            build_statevector(RbmParams.zeros(25, 0))

    def test_log_derivatives_match_finite_differences(self):
        params = random_params(3, 2, seed=7, urbm=False)
        idx = np.arange(8)
        O = log_derivative_matrix(params, idx)
        vec = params.to_vector()
        eps = 1e-6
        for n in range(vec.size):
            step = np.zeros_like(vec)
            step[n] = eps
            up = log_amplitudes(RbmParams.from_vector(vec + step, 3, 2, False), idx)
            down = log_amplitudes(RbmParams.from_vector(vec - step, 3, 2, False), idx)
            np.testing.assert_allclose(O[:, n], (up - down) / (2 * eps), atol=1e-7)

    def test_imaginary_bias_shift_is_a_site_phase(self):
        params = random_params(4, 3, seed=11, variance=0.3)
        idx = np.arange(16)
        z0 = 1 - 2 * (idx & 1)
        phi = 0.37
        shifted = RbmParams(params.b + np.array([1j * phi, 0, 0, 0]), params.m, params.W)
        np.testing.assert_allclose(
            np.exp(log_amplitudes(shifted, idx)),
            np.exp(log_amplitudes(params, idx)) * np.exp(1j * phi * z0),
            atol=1e-12,
        )
        column = param_labels(4, 3).index("b_im[0]")
        np.testing.assert_allclose(log_derivative_matrix(params, idx)[:, column], 1j * z0, atol=1e-14)


class CircuitEmulationTests(SimpleTestCase):
    def test_rotation_gate_prepares_biased_plus(self):
        for bias in (0.0, 0.3, 0.25j, -0.7 + 0.4j):
            gate, c = rotation_gate(bias)
            expected = np.exp(bias * np.array([1.0, -1.0])) / np.sqrt(2) / c
            np.testing.assert_allclose(gate.matrix[:, 0], expected, atol=1e-14)
            np.testing.assert_allclose(gate.matrix.conj().T @ gate.matrix, np.eye(2), atol=1e-14)

    def test_rotation_normalization(self):
        self.assertEqual(rotation_gate(0.0)[1], 1.0)
        self.assertAlmostEqual(rotation_gate(0.8j)[1], 1.0)
        self.assertAlmostEqual(rotation_gate(0.3)[1], np.sqrt(np.cosh(0.6)))

    def test_entangler_diagonal(self):
        d = entangler_unitary([1j * np.pi / 4])
        phase = np.exp(1j * np.pi / 4)
        np.testing.assert_allclose(d, [phase, phase.conjugate(), phase.conjugate(), phase], atol=1e-14)
        with self.assertRaises(ContractViolation):
            entangler_unitary([0.1 + 0j])

    def test_zero_params_always_succeed(self):
        report = prepare_recycled(RbmParams.zeros(3, 2))
        np.testing.assert_allclose(report.ancilla_success_probs, [1.0, 1.0])
        self.assertAlmostEqual(report.total_success, 1.0)

    def test_circuit_matches_amplitudes_and_oracle(self):
        params = random_params(3, 3, seed=11, variance=0.5)
        report = prepare_recycled(params)
        self.assertGreater(fidelity(report.state, build_statevector(params)), 1 - 1e-10)
        oracle_state, oracle_success = dense_projection_oracle(params)
        self.assertGreater(fidelity(oracle_state, report.state), 1 - 1e-10)
        self.assertAlmostEqual(oracle_success, report.total_success, places=10)

    def test_circuit_needs_urbm(self):
        with self.assertRaises(ContractViolation):
            prepare_recycled(RbmParams.zeros(2, 1, urbm=False))

    def test_oracle_guard(self):
        with self.assertRaises(GuardViolation):
            dense_projection_oracle(RbmParams.zeros(8, 5))


class RealCouplingTests(SimpleTestCase):
    def test_zero_coupling_is_identity(self):
        report = realW_coupling(0.0)
        self.assertAlmostEqual(report.theta1, np.pi)
        self.assertAlmostEqual(report.theta2, np.pi)
        np.testing.assert_allclose(report.kernel, np.eye(4), atol=1e-14)
        self.assertAlmostEqual(report.success_probability, 1.0)

    def test_kernel_matches_coupling_factors(self):
        zz = np.array([1.0, -1.0, -1.0, 1.0])
        for wR in (-1.3, -0.5, -0.05, 0.05, 0.5, 1.3):
            with self.subTest(wR=wR):
                report = realW_coupling(wR)
                np.testing.assert_allclose(report.kernel, np.diag(np.exp(wR * zz - abs(wR))), atol=1e-12)

    def test_success_probability_on_plus_pair(self):
        report = realW_coupling(0.5)
        self.assertAlmostEqual(report.success_probability, 0.5 * (1 + np.exp(-2.0)), places=12)
        # the same probability follows from the kernel itself
        plus2 = np.full(4, 0.5)
        self.assertAlmostEqual(report.success_probability, np.sum(np.abs(report.kernel @ plus2) ** 2), places=12)

    def test_sign_swaps_angles(self):
        t1, t2 = real_coupling_angles(0.7)
        s1, s2 = real_coupling_angles(-0.7)
        self.assertAlmostEqual(t1, s2)
        self.assertAlmostEqual(t2, s1)


class EnsembleTests(SimpleTestCase):
    def test_no_hidden_units(self):
        terms = ensemble_decompose(RbmParams(np.array([0.2, -0.1j]), np.zeros(0), np.zeros((2, 0))))
        self.assertEqual(len(terms), 1)
        self.assertAlmostEqual(terms[0][0], 1.0)

    def test_reconstruction(self):
        params = random_params(3, 3, seed=2, variance=0.4)
        terms = ensemble_decompose(params)
        self.assertEqual(len(terms), 8)
        np.testing.assert_allclose(reconstruct_ensemble(terms), build_statevector(params).amplitudes, atol=1e-12)
        for _, state in terms:
            if state.norm() > 0:
                self.assertAlmostEqual(state.norm(), 1.0)

    def test_zero_hidden_bias_drops_odd_terms(self):
        terms = ensemble_decompose(RbmParams.zeros(2, 1))
        self.assertEqual(terms[1][0], 0j)
        self.assertEqual(terms[1][1].norm(), 0.0)

    def test_vanishing_components_keep_their_slot(self):
        params = RbmParams(np.array([0.1, -0.2j]), np.array([0.3j, 0.4 + 0.1j]), np.array([[0.2j, -0.1j], [0.5j, 0.3j]]))
        terms = ensemble_decompose(params)
        self.assertEqual(len(terms), 4)
        for weight, state in terms:
            if weight == 0:
                self.assertEqual(state.norm(), 0.0)
            else:
                self.assertAlmostEqual(state.norm(), 1.0, places=12)
        # m^R_0 = 0, so both outcomes with s_0 = − vanish
        self.assertEqual([w == 0 for w, _ in terms], [False, False, True, True])
        np.testing.assert_allclose(reconstruct_ensemble(terms), build_statevector(params).amplitudes, atol=1e-12)

    def test_guard(self):
        with self.assertRaises(GuardViolation):
            ensemble_decompose(RbmParams.zeros(2, 13))
