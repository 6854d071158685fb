import numpy as np
from django.test import SimpleTestCase

from dynamics.services.errors import ContractViolation, DegenerateStateError, GuardViolation
from dynamics.services.lattice_models import build_heisenberg, build_tfi
from dynamics.services.spinstate import (
    BasisConfig,
    PauliTerm,
    SparseHamiltonian,
    StateVector,
    apply_array,
    apply_operator,
    connected_states,
    expectation,
    fidelity,
    ground_state,
    local_values,
    magnetization,
    pauli_operator,
    product_observable,
    propagate_dense,
    propagate_exact,
    propagate_nonhermitian,
    sigma,
)

_PAULI = {
    "I": np.eye(2),
    # bit 0 is z = +1
    "X": np.array([[0, 1], [1, 0]], dtype=complex),
    "Y": np.array([[0, -1j], [1j, 0]], dtype=complex),
    "Z": np.diag([1.0, -1.0]).astype(complex),
}


def kron_oracle(N, terms):
    """Dense matrix by Kronecker products, site 0 as the least significant bit."""
    dim = 1 << N
    total = np.zeros((dim, dim), dtype=complex)
    for coeff, ops in terms:
        mat = np.array([[1.0 + 0j]])
        for site in reversed(range(N)):
            mat = np.kron(mat, _PAULI[ops.get(site, "I")])
        total += coeff * mat
    return total


def random_hamiltonian(N, n_terms, seed):
    """Real-coefficient Pauli strings on random site subsets; hermitian by construction."""
    rng = np.random.default_rng(seed)
    terms = []
    for _ in range(n_terms):
        sites = rng.choice(N, size=int(rng.integers(1, N + 1)), replace=False)
        ops = {int(s): "XYZ"[int(rng.integers(3))] for s in sites}
        terms.append((float(rng.normal(0.0, 0.5)), ops))
    return SparseHamiltonian(N, [PauliTerm(c, ops) for c, ops in terms]), terms


def random_state(N, rng):
    return StateVector.from_array(rng.normal(size=1 << N) + 1j * rng.normal(size=1 << N))


class BasisConfigTests(SimpleTestCase):
    def test_index_round_trip_and_z(self):
        z = BasisConfig.from_index(5, 3)
        self.assertEqual(z.bits, (1, 0, 1))
        self.assertEqual(z.index, 5)
        np.testing.assert_array_equal(z.z, [-1, 1, -1])
        self.assertEqual(BasisConfig.from_z([-1, 1, -1]), z)

    def test_flipped(self):
        self.assertEqual(BasisConfig.from_index(0, 2).flipped(1).index, 2)

    def test_invalid_bits_rejected(self):
        with self.assertRaises(ContractViolation):
            BasisConfig((0, 2))
        with self.assertRaises(ContractViolation):
            BasisConfig.from_index(8, 3)


class StateVectorTests(SimpleTestCase):
    def test_amplitudes_are_read_only(self):
        psi = StateVector.plus(2)
        with self.assertRaises(ValueError):
            psi.amplitudes[0] = 0.0

    def test_normalize_zero_state_raises(self):
        with self.assertRaises(DegenerateStateError):
            StateVector(np.zeros(4), 2).normalize()

    def test_wrong_length_rejected(self):
        with self.assertRaises(ContractViolation):
            StateVector(np.ones(3), 2)
        with self.assertRaises(ContractViolation):
            StateVector.from_array(np.ones(6))

    def test_guard(self):
        with self.assertRaises(GuardViolation):
            StateVector(np.ones(2), 25)

    def test_fidelity_ignores_global_phase(self):
        psi = StateVector.from_array([1.0, 1j, 0.5, -0.25])
        phi = StateVector(np.exp(0.7j) * psi.amplitudes, 2)
        self.assertAlmostEqual(fidelity(psi, phi), 1.0, places=12)
        aligned = phi.phase_aligned(psi)
        np.testing.assert_allclose(aligned.amplitudes, psi.amplitudes, atol=1e-12)


class SparseHamiltonianTests(SimpleTestCase):
    def test_terms_are_merged_and_small_terms_dropped(self):
        H = SparseHamiltonian(2, [PauliTerm(1.0, {0: "Z"}), PauliTerm(0.5, {0: "z"}), PauliTerm(1e-16, {1: "X"})])
        self.assertEqual(len(H.terms), 1)
        self.assertEqual(H.terms[0].coefficient, 1.5)

    def test_hermitian_flag_is_derived(self):
        self.assertTrue(build_tfi(3, 1.0).hermitian)
        self.assertFalse(SparseHamiltonian(1, [PauliTerm(1j, {0: "Z"})]).hermitian)

    def test_repeated_site_rejected(self):
        with self.assertRaises(ContractViolation):
            PauliTerm(1.0, [(0, "X"), (0, "Z")])

    def test_site_out_of_range_rejected(self):
        with self.assertRaises(ContractViolation):
            SparseHamiltonian(2, [PauliTerm(1.0, {2: "X"})])

    def test_product_table(self):
        X, Y, Z = (pauli_operator(1, {0: p}) for p in "XYZ")
        np.testing.assert_allclose((X @ Y).to_dense(), (1j * Z).to_dense())
        np.testing.assert_allclose((X @ X).to_dense(), np.eye(2))

    def test_dense_matches_kronecker_oracle(self):
        terms = [(0.3, {0: "X", 2: "Y"}), (-1.1, {1: "Z"}), (0.7j, {0: "Y", 1: "Y", 2: "Z"})]
        H = SparseHamiltonian(3, [PauliTerm(c, ops) for c, ops in terms])
        np.testing.assert_allclose(H.to_dense(), kron_oracle(3, terms), atol=1e-14)

    def test_fingerprint_is_stable(self):
        self.assertEqual(build_tfi(4, 0.5).fingerprint(), build_tfi(4, 0.5).fingerprint())
        self.assertNotEqual(build_tfi(4, 0.5).fingerprint(), build_tfi(4, 1.0).fingerprint())


class ApplyAndExpectationTests(SimpleTestCase):
    def test_z_eigenstate(self):
        out = apply_operator(sigma("Z", 0, 1), StateVector.basis(1, 0))
        np.testing.assert_allclose(out.amplitudes, [1, 0])

    def test_x_flips_bit(self):
        out = apply_operator(sigma("X", 0, 1), StateVector.basis(1, 0))
        np.testing.assert_allclose(out.amplitudes, [0, 1])

    def test_tfi_on_all_up(self):
        out = apply_operator(build_tfi(3, 1.0), StateVector.basis(3, 0))
        expected = np.zeros(8)
        expected[0] = -3
        expected[[1, 2, 4]] = -1
        np.testing.assert_allclose(out.amplitudes, expected, atol=1e-14)

    def test_tfi_matches_kronecker_oracle(self):
        H = build_tfi(3, 0.7)
        terms = [(-0.7, {i: "X"}) for i in range(3)] + [(-1.0, {i: "Z", j: "Z"}) for i, j in ((0, 1), (1, 2), (0, 2))]
        np.testing.assert_allclose(H.to_dense(), kron_oracle(3, terms), atol=1e-14)

    def test_apply_array_on_matrix_is_columnwise(self):
        H = build_heisenberg(3, 0.5, 0.3)
        rng = np.random.default_rng(1)
        rho = rng.normal(size=(8, 8)) + 1j * rng.normal(size=(8, 8))
        np.testing.assert_allclose(apply_array(H, rho), H.to_dense() @ rho, atol=1e-12)

    def test_expectations(self):
        plus = StateVector.plus(1)
        self.assertAlmostEqual(expectation(plus, sigma("Z", 0, 1)).real, 0.0)
        self.assertAlmostEqual(expectation(plus, sigma("X", 0, 1)).real, 1.0)
        self.assertAlmostEqual(expectation(StateVector.basis(2, 0), build_tfi(2, 0.5, boundary="open")).real, -1.0)

    def test_observable_builders(self):
        N = 3
        psi = StateVector.basis(N, 0)
        self.assertAlmostEqual(expectation(psi, magnetization(N)).real, 1.0)
        self.assertAlmostEqual(expectation(StateVector.plus(N), product_observable(N, ("X", 0), ("X", 1))).real, 1.0)

    def test_apply_operator_is_linear(self):
        rng = np.random.default_rng(5)
        for seed in range(4):
            H, _ = random_hamiltonian(4, 6, seed)
            psi, phi = random_state(4, rng), random_state(4, rng)
            a, b = 0.3 - 1.2j, -0.7 + 0.4j
            combined = StateVector(a * psi.amplitudes + b * phi.amplitudes, 4)
            np.testing.assert_allclose(
                apply_operator(H, combined).amplitudes,
                a * apply_operator(H, psi).amplitudes + b * apply_operator(H, phi).amplitudes,
                atol=1e-12,
            )


class ConnectedStatesTests(SimpleTestCase):
    def test_tfi_row(self):
        row = connected_states(build_tfi(3, 1.0), BasisConfig.from_index(0, 3))
        self.assertEqual([str(z) for z, _ in row], ["000", "100", "010", "001"])
        np.testing.assert_allclose([v for _, v in row], [-3, -1, -1, -1])

    def test_diagonal_operator_single_entry(self):
        H = SparseHamiltonian(3, [PauliTerm(1.0, {0: "Z", 1: "Z"}), PauliTerm(1.0, {1: "Z", 2: "Z"})])
        row = connected_states(H, BasisConfig((0, 1, 1)))
        self.assertEqual(len(row), 1)
        self.assertEqual(row[0][0], BasisConfig((0, 1, 1)))
        self.assertAlmostEqual(row[0][1].real, 0.0)

    def test_single_flip(self):
        row = connected_states(sigma("X", 0, 2), BasisConfig((0, 1)))
        self.assertEqual(row, [(BasisConfig((1, 1)), 1 + 0j)])

    def test_local_values_match_dense_ratio(self):
        H = build_heisenberg(3, 0.5, 0.2)
        rng = np.random.default_rng(3)
        psi = rng.normal(size=8) + 1j * rng.normal(size=8)
        loc = local_values(H, np.arange(8), lambda idx: np.log(psi[idx]))
        np.testing.assert_allclose(loc, (H.to_dense() @ psi) / psi, atol=1e-10)

    def test_rows_match_dense_matrix(self):
        for seed in range(5):
            N = 2 + seed % 3
            H, terms = random_hamiltonian(N, 7, seed)
            dense = kron_oracle(N, terms)
            for x in range(1 << N):
                with self.subTest(seed=seed, x=x):
                    row = connected_states(H, BasisConfig.from_index(x, N))
                    got = {z.index: v for z, v in row}
                    expected = {y: dense[x, y] for y in np.flatnonzero(np.abs(dense[x]) > 1e-12)}
                    self.assertEqual(len(got), len(row))
                    self.assertEqual(set(got) - {x}, set(expected) - {x})
                    for y, value in got.items():
                        self.assertAlmostEqual(value, dense[x, y], places=12)


class PropagationTests(SimpleTestCase):
    def test_zero_hamiltonian_is_stationary(self):
        psi0 = StateVector.from_array([1.0, 2.0, 0.5j, -1.0])
        prop = propagate_exact(SparseHamiltonian.zero(2), psi0, 0.1, 0.01)
        for state in prop.states:
            np.testing.assert_allclose(state.amplitudes, psi0.amplitudes, atol=1e-14)

    def test_rabi_flip(self):
        H = pauli_operator(1, {0: "X"}, np.pi / 2)
        final = propagate_exact(H, StateVector.basis(1, 0), 1.0, 0.001).final
        self.assertAlmostEqual(fidelity(final, StateVector.basis(1, 1)), 1.0, places=10)

    def test_rk4_matches_eigendecomposition(self):
        H = build_tfi(4, 0.8)
        psi0 = StateVector.basis(4, 3)
        prop = propagate_exact(H, psi0, 0.5, 0.001, record_every=100)
        dense = propagate_dense(H, psi0, prop.times)
        for a, b in zip(prop.states, dense):
            self.assertGreater(fidelity(a, b), 1 - 1e-10)

    def test_observable_series(self):
        H = build_tfi(2, 1.0, boundary="open")
        prop = propagate_exact(H, StateVector.basis(2, 0), 0.2, 0.01, record_every=5, observables={"mz": magnetization(2)}, keep_states=False)
        self.assertEqual(len(prop.series["mz"]), len(prop.times))
        self.assertAlmostEqual(prop.series["mz"][0], 1.0)
        self.assertEqual(prop.states, [])

    def test_step_limit_and_hermiticity_enforced(self):
        with self.assertRaises(ContractViolation):
            propagate_exact(build_tfi(3, 1.0), StateVector.plus(3), 1.0, 0.05)
        with self.assertRaises(ContractViolation):
            propagate_exact(SparseHamiltonian(1, [PauliTerm(-0.5j, {})]), StateVector.plus(1), 1.0, 0.01)

    def test_nonhermitian_norm_decay(self):
        # H = −(i/2)γ|0⟩⟨0| on one site: the |0⟩ amplitude decays as e^{−γt/2}
        gamma = 0.4
        H = SparseHamiltonian(1, [PauliTerm(-0.25j * gamma, {}), PauliTerm(-0.25j * gamma, {0: "Z"})])
        prop = propagate_nonhermitian(H, StateVector.basis(1, 0), 1.0, 0.001, renormalize=False)
        self.assertAlmostEqual(prop.final.norm() ** 2, np.exp(-gamma), places=9)

    def test_energy_is_conserved(self):
        H, _ = random_hamiltonian(3, 6, seed=21)
        psi0 = random_state(3, np.random.default_rng(21))
        prop = propagate_exact(H, psi0, 2.0, 0.001, record_every=100, observables={"energy": H}, keep_states=False)
        energies = np.asarray(prop.series["energy"])
        self.assertEqual(len(energies), 21)
        np.testing.assert_allclose(energies, energies[0], atol=1e-6)


class GroundStateTests(SimpleTestCase):
    def test_heisenberg_dimer_spectrum(self):
        H = build_heisenberg(2, 1.0, 0.0, boundary="open")
        np.testing.assert_allclose(np.linalg.eigvalsh(H.to_dense()), [-3, 1, 1, 1], atol=1e-12)
        energy, state = ground_state(H)
        self.assertAlmostEqual(energy, -3.0, places=12)
        self.assertAlmostEqual(expectation(state, H).real, -3.0, places=10)

    def test_phase_fixed(self):
        _, state = ground_state(build_tfi(4, 0.5))
        pivot = state.amplitudes[np.argmax(np.abs(state.amplitudes))]
        self.assertAlmostEqual(pivot.imag, 0.0, places=12)
        self.assertGreater(pivot.real, 0.0)

    def test_lanczos_path_matches_dense(self):
        H = build_tfi(11, 0.9)
        energy, _ = ground_state(H)
        evals = np.linalg.eigvalsh(H.to_dense())
        self.assertAlmostEqual(energy, evals[0], places=8)
