"""
RBM / unitary-coupled RBM variational state.

ψ̃(z) = exp(Σ_i b_i z_i) · Π_j cosh(m_j + Σ_i W_ij z_i), evaluated in the log
domain. Besides the analytic amplitudes this module emulates the circuit that
prepares the state with one recycled ancilla, the probabilistic real-coupling
gadget and the ancilla-free ensemble decomposition.
"""
import json
import logging
from dataclasses import dataclass
from itertools import product
from typing import List, Sequence, Tuple

import numpy as np

from dynamics.helper import json_float_array
from dynamics.services.errors import ContractViolation, DegenerateStateError, GuardViolation
from dynamics.services.spinstate import BasisConfig, StateVector, spins_from_indices

logger = logging.getLogger(__name__)

STATEVECTOR_MAX_SITES = 24
ENSEMBLE_MAX_HIDDEN = 12
ORACLE_MAX_QUBITS = 12
DEGENERATE_LOG_RATIO = np.log(1e-10)
_LOG2 = np.log(2.0)
_SQRT_HALF = np.sqrt(0.5)


def log_cosh(x):
    """log cosh(x) for complex x without overflow: s·x − log 2 + log1p(e^{−2 s x}), s = sign(Re x)."""
    x = np.asarray(x, dtype=np.complex128)
    s = np.where(x.real >= 0, 1.0, -1.0)
    return s * x - _LOG2 + np.log1p(np.exp(-2.0 * s * x))


def _log_cosh_real(a):
    a = np.abs(np.asarray(a, dtype=np.float64))
    return a - _LOG2 + np.log1p(np.exp(-2.0 * a))


def hidden_count(N: int, alpha: float) -> int:
    M = alpha * N
    if abs(M - round(M)) > 1e-9:
        raise ContractViolation(f"alpha*N must be an integer, got {alpha}*{N}")
    return int(round(M))


# ---------- parameters ----------
@dataclass(frozen=True, eq=False)
class RbmParams:
    """
    Visible biases b (N), hidden biases m (M) and couplings W (N × M).
    With `urbm` set the couplings must be purely imaginary.

    The real parameter vector is laid out as
    [b^R, b^I, m^R, m^I, W^I, (W^R)] with W flattened i-fastest.
    """

    b: np.ndarray
    m: np.ndarray
    W: np.ndarray
    urbm: bool = True

    def __post_init__(self):
        b = np.array(self.b, dtype=np.complex128).reshape(-1)
        m = np.array(self.m, dtype=np.complex128).reshape(-1)
        W = np.array(self.W, dtype=np.complex128).reshape(b.size, m.size)
        if b.size < 1:
            raise ContractViolation("an RBM needs at least one visible spin")
        if self.urbm and np.any(W.real != 0.0):
            raise ContractViolation("uRBM couplings must have Re(W) == 0 exactly")
        for arr in (b, m, W):
            arr.flags.writeable = False
        object.__setattr__(self, "b", b)
        object.__setattr__(self, "m", m)
        object.__setattr__(self, "W", W)

    @property
    def N(self) -> int:
        return self.b.size

    @property
    def M(self) -> int:
        return self.m.size

    @property
    def n_var(self) -> int:
        return n_var(self.N, self.M, self.urbm)

    @classmethod
    def zeros(cls, N: int, M: int, urbm: bool = True) -> "RbmParams":
        return cls(np.zeros(N), np.zeros(M), np.zeros((N, M)), urbm)

    @classmethod
    def random(
        cls, N: int, M: int, rng: np.random.Generator, variance: float = 0.01, urbm: bool = True
    ) -> "RbmParams":
        """Every real degree of freedom drawn from N(0, variance)."""
        vec = rng.normal(0.0, np.sqrt(variance), n_var(N, M, urbm))
        return cls.from_vector(vec, N, M, urbm)

    # ---------- flattening ----------
    def to_vector(self) -> np.ndarray:
        blocks = [
            self.b.real, self.b.imag, self.m.real, self.m.imag,
            self.W.imag.reshape(-1, order="F"),
        ]
        if not self.urbm:
            blocks.append(self.W.real.reshape(-1, order="F"))
        return np.concatenate(blocks).astype(np.float64)

    @classmethod
    def from_vector(cls, vec: Sequence[float], N: int, M: int, urbm: bool = True) -> "RbmParams":
        vec = np.asarray(vec, dtype=np.float64)
        if vec.size != n_var(N, M, urbm):
            raise ContractViolation(
                f"parameter vector has {vec.size} entries, expected {n_var(N, M, urbm)}"
            )
        o = np.cumsum([0, N, N, M, M, N * M])
        b = vec[o[0]:o[1]] + 1j * vec[o[1]:o[2]]
        m = vec[o[2]:o[3]] + 1j * vec[o[3]:o[4]]
        W = 1j * vec[o[4]:o[5]].reshape((N, M), order="F")
        if not urbm:
            W = W + vec[o[5]:].reshape((N, M), order="F")
        return cls(b, m, W, urbm)

    def shifted(self, delta: np.ndarray) -> "RbmParams":
        return RbmParams.from_vector(self.to_vector() + delta, self.N, self.M, self.urbm)

    # ---------- serialization ----------
    def to_json(self) -> str:
        fields = [
            ("N", str(self.N)),
            ("M", str(self.M)),
            ("urbm", "true" if self.urbm else "false"),
            ("b_re", json_float_array(self.b.real)),
            ("b_im", json_float_array(self.b.imag)),
            ("m_re", json_float_array(self.m.real)),
            ("m_im", json_float_array(self.m.imag)),
            ("W_re", json_float_array(self.W.real)),
            ("W_im", json_float_array(self.W.imag)),
        ]
        return "{" + ", ".join(f'"{k}": {v}' for k, v in fields) + "}"

    @classmethod
    def from_json(cls, text: str) -> "RbmParams":
        data = json.loads(text)
        N, M = int(data["N"]), int(data["M"])
        W_re = np.array(data["W_re"], dtype=np.float64).reshape(N, M)
        W_im = np.array(data["W_im"], dtype=np.float64).reshape(N, M)
        return cls(
            np.array(data["b_re"], dtype=np.float64) + 1j * np.array(data["b_im"], dtype=np.float64),
            np.array(data["m_re"], dtype=np.float64) + 1j * np.array(data["m_im"], dtype=np.float64),
            W_re + 1j * W_im,
            bool(data["urbm"]),
        )


def n_var(N: int, M: int, urbm: bool = True) -> int:
    return 2 * N + 2 * M + (1 if urbm else 2) * N * M


def param_labels(N: int, M: int, urbm: bool = True) -> List[str]:
    labels = [f"b_re[{i}]" for i in range(N)] + [f"b_im[{i}]" for i in range(N)]
    labels += [f"m_re[{j}]" for j in range(M)] + [f"m_im[{j}]" for j in range(M)]
    pairs = [(i, j) for j in range(M) for i in range(N)]
    labels += [f"W_im[{i},{j}]" for i, j in pairs]
    if not urbm:
        labels += [f"W_re[{i},{j}]" for i, j in pairs]
    return labels


# ---------- amplitudes ----------
def all_configs(N: int) -> np.ndarray:
    if N > STATEVECTOR_MAX_SITES:
        raise GuardViolation(f"N={N} exceeds the enumeration guard of {STATEVECTOR_MAX_SITES}")
    return np.arange(1 << N, dtype=np.int64)


def _thetas(params: RbmParams, z: np.ndarray) -> np.ndarray:
    return params.m + z @ params.W


def log_amplitudes(params: RbmParams, indices) -> np.ndarray:
    """log ψ̃ for each basis index (defined modulo 2πi)."""
    z = spins_from_indices(indices, params.N)
    return z @ params.b + log_cosh(_thetas(params, z)).sum(axis=1)


def log_amplitude(params: RbmParams, z: BasisConfig) -> complex:
    if z.N != params.N:
        raise ContractViolation(f"config has {z.N} sites, ansatz has {params.N}")
    return complex(log_amplitudes(params, [z.index])[0])


def amplitude(params: RbmParams, z: BasisConfig) -> complex:
    """Unnormalized ψ̃(z); the 2^{−(N+M)/2} prefactor is dropped."""
    return complex(np.exp(log_amplitude(params, z)))


def _cancellation(params: RbmParams, z: np.ndarray) -> np.ndarray:
    """Σ_j log(|cosh θ_j| / cosh Re θ_j) per config; very negative means ψ̃ ≈ 0."""
    theta = _thetas(params, z)
    return (log_cosh(theta).real - _log_cosh_real(theta.real)).sum(axis=1)


def build_statevector(params: RbmParams) -> StateVector:
    """ψ̃(z)/‖ψ̃‖ over all 2^N configurations."""
    if params.N > STATEVECTOR_MAX_SITES:
        raise GuardViolation(
            f"N={params.N} exceeds the statevector guard of {STATEVECTOR_MAX_SITES}"
        )
    idx = all_configs(params.N)
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        lp = log_amplitudes(params, idx)
        if params.M:
            cancel = _cancellation(params, spins_from_indices(idx, params.N))
            if not np.any(np.isfinite(cancel)) or np.nanmax(cancel) < DEGENERATE_LOG_RATIO:
                raise DegenerateStateError("RBM amplitudes vanish on every configuration")
        if np.any(np.isnan(lp)) or np.any(lp.real == np.inf):
            raise DegenerateStateError("non-finite RBM log-amplitudes")
        shift = np.max(lp.real)
        amps = np.exp(lp - shift)
    norm = np.linalg.norm(amps)
    if not np.isfinite(norm) or norm == 0.0:
        raise DegenerateStateError("RBM state has zero norm")
    return StateVector(amps / norm, params.N)


def log_derivative_matrix(params: RbmParams, indices) -> np.ndarray:
    """
    O_n(z) = ∂ log ψ̃(z) / ∂θ_n, one row per configuration, columns in
    parameter-vector order.
    """
    z = spins_from_indices(indices, params.N)
    t = np.tanh(_thetas(params, z))
    n = z.shape[0]
    zt = np.einsum("ki,kj->kji", z, t).reshape(n, params.N * params.M)
    blocks = [z.astype(np.complex128), 1j * z, t, 1j * t, 1j * zt]
    if not params.urbm:
        blocks.append(zt)
    return np.concatenate(blocks, axis=1)


def log_derivatives(params: RbmParams, z: BasisConfig) -> np.ndarray:
    if z.N != params.N:
        raise ContractViolation(f"config has {z.N} sites, ansatz has {params.N}")
    return log_derivative_matrix(params, [z.index])[0]


# ---------- circuit emulation ----------
def apply_single_qubit(state: np.ndarray, gate: np.ndarray, qubit: int, n_qubits: int) -> np.ndarray:
    psi = np.asarray(state).reshape(1 << (n_qubits - qubit - 1), 2, 1 << qubit)
    return np.einsum("ab,xby->xay", gate, psi).reshape(-1)


def project_top_qubit(state: np.ndarray, ket: np.ndarray) -> Tuple[np.ndarray, float]:
    """Project the most significant qubit onto `ket`; returns (reduced state, probability)."""
    rows = np.asarray(state).reshape(2, -1)
    reduced = np.conj(ket) @ rows
    return reduced, float(np.vdot(reduced, reduced).real)


@dataclass(frozen=True)
class GateSpec:
    """G = Rz(phase) · Ry(angle)."""

    angle: float
    phase: float
    matrix: np.ndarray


def _ry(angle: float) -> np.ndarray:
    c, s = np.cos(angle / 2), np.sin(angle / 2)
    return np.array([[c, -s], [s, c]], dtype=np.complex128)


def _rz(phase: float) -> np.ndarray:
    return np.diag([np.exp(-0.5j * phase), np.exp(0.5j * phase)])


def rotation_gate(bias: complex) -> Tuple[GateSpec, float]:
    """
    Single-qubit gate with G|0⟩ = e^{bias·Z}|+⟩ / c, c = √cosh(2 Re bias).
    """
    bias = complex(bias)
    br, bi = bias.real, bias.imag
    angle = 2.0 * float(np.arctan2(np.exp(-br - abs(br)), np.exp(br - abs(br))))
    phase = -2.0 * bi
    c = float(np.sqrt(np.cosh(2.0 * br)))
    return GateSpec(angle, phase, _rz(phase) @ _ry(angle)), c


def entangler_unitary(w_column) -> np.ndarray:
    """
    Diagonal of exp(i Σ_i W^I_i z_i h) over N visible sites plus the ancilla
    as the most significant qubit.
    """
    w = np.asarray(w_column, dtype=np.complex128).reshape(-1)
    if np.any(w.real != 0.0):
        raise ContractViolation("entangler couplings must be purely imaginary")
    N = w.size
    idx = np.arange(1 << (N + 1))
    z = spins_from_indices(idx, N + 1)
    return np.exp(1j * (z[:, :N] @ w.imag) * z[:, N])


@dataclass(frozen=True)
class PreparationReport:
    state: StateVector
    ancilla_success_probs: np.ndarray
    total_success: float


def prepare_recycled(params: RbmParams) -> PreparationReport:
    """
    Emulate the (N+1)-qubit preparation circuit: rotation gates on the visible
    register, then for each hidden unit rotate the ancilla, entangle, project
    the ancilla onto |+⟩ and recycle it.
    """
    if not params.urbm:
        raise ContractViolation("circuit preparation needs a uRBM")
    N = params.N
    zero = np.array([1.0, 0.0], dtype=np.complex128)
    plus = np.array([_SQRT_HALF, _SQRT_HALF], dtype=np.complex128)

    visible = np.zeros(1 << N, dtype=np.complex128)
    visible[0] = 1.0
    for i in range(N):
        gate, _ = rotation_gate(params.b[i])
        visible = apply_single_qubit(visible, gate.matrix, i, N)

    probs = []
    for j in range(params.M):
        gate, _ = rotation_gate(params.m[j])
        full = np.kron(gate.matrix @ zero, visible)
        full = full * entangler_unitary(params.W[:, j])
        visible, p = project_top_qubit(full, plus)
        if not p > 0.0:
            raise DegenerateStateError("ancilla projection has zero probability", context=f"hidden {j}")
        visible = visible / np.sqrt(p)
        probs.append(p)
        logger.debug("hidden unit %s projected with p=%.6g", j, p)

    probs = np.array(probs)
    return PreparationReport(StateVector(visible, N), probs, float(np.prod(probs)))


def dense_projection_oracle(params: RbmParams) -> Tuple[StateVector, float]:
    """
    Build e^{H_RBM}|+…+⟩ over all N + M qubits, project the hidden register
    onto |+…+⟩. Returns the normalized visible state and the probability of
    that projection for the normalized joint state.
    """
    N, M = params.N, params.M
    if N + M > ORACLE_MAX_QUBITS:
        raise GuardViolation(f"N+M={N + M} exceeds the dense oracle guard of {ORACLE_MAX_QUBITS}")
    zv = spins_from_indices(np.arange(1 << N), N)
    zh = spins_from_indices(np.arange(1 << M), M) if M else np.zeros((1, 0))
    # exponent[v, h] of the bipartite Ising form
    exponent = (zv @ params.b)[:, None] + (zh @ params.m)[None, :] + zv @ params.W @ zh.T
    joint = np.exp(exponent) / np.sqrt(2.0 ** (N + M))
    joint_norm2 = float(np.sum(np.abs(joint) ** 2))
    projected = joint.sum(axis=1) / np.sqrt(2.0 ** M)
    success = float(np.sum(np.abs(projected) ** 2)) / joint_norm2
    return StateVector(projected, N).normalize(), success


@dataclass(frozen=True)
class RealCouplingReport:
    theta1: float
    theta2: float
    kernel: np.ndarray
    success_probability: float


def real_coupling_angles(wR: float) -> Tuple[float, float]:
    wR = float(wR)
    theta1 = 2.0 * float(np.arcsin(np.sqrt(np.exp(wR - abs(wR)))))
    theta2 = 2.0 * float(np.arcsin(np.sqrt(np.exp(-wR - abs(wR)))))
    return theta1, theta2


def realW_coupling(wR: float) -> RealCouplingReport:
    """
    Emulate the probabilistic e^{wR z_v z_h} gadget on (visible, hidden,
    ancilla). The ancilla is rotated by Ry(θ1) when z_v z_h = +1 and Ry(θ2)
    otherwise, then post-selected on |1⟩. One pass scales amplitudes by
    e^{(wR z z − |wR|)/2}, so the gadget runs twice. The kernel is the
    unrenormalized amplitude map of the two passes, read off column by column
    from the four pair basis states.
    """
    theta1, theta2 = real_coupling_angles(wR)
    one = np.array([0.0, 1.0], dtype=np.complex128)
    pair = np.arange(4)
    parity_even = ((pair & 1) ^ (pair >> 1)) == 0
    angles = np.where(parity_even, theta1, theta2)

    def run(pair_state: np.ndarray, renormalize: bool = True) -> Tuple[np.ndarray, float]:
        state, prob = pair_state, 1.0
        for _ in range(2):
            ancilla = np.stack([_ry(a) @ np.array([1.0, 0.0]) for a in angles], axis=1)
            full = (ancilla * state[None, :]).reshape(-1)
            state, p = project_top_qubit(full, one)
            prob *= p
            if renormalize and p > 0:
                state = state / np.sqrt(p)
        return state, prob

    basis = np.eye(4, dtype=np.complex128)
    kernel = np.stack([run(basis[k], renormalize=False)[0] for k in range(4)], axis=1)
    plus2 = np.full(4, 0.5, dtype=np.complex128)
    _, success = run(plus2)
    return RealCouplingReport(theta1, theta2, kernel, success)


# ---------- ensemble decomposition ----------
def ensemble_decompose(params: RbmParams) -> List[Tuple[complex, StateVector]]:
    """
    Split the projected state over hidden outcomes s ∈ {+,−}^M:
    |Ψ_v⟩ = Σ_s (Π_j R_{s_j}(m^R_j)) · N_s/N_v · |Ψ_v^s⟩ with
    R_+ = cosh m^R, R_− = sinh m^R and
    ⟨+|e^{iφh}|+⟩ = cos φ, ⟨−|e^{iφh}|+⟩ = i sin φ.
    Always returns 2^M (weight, state) pairs in hidden-outcome order. Every
    member with a nonzero weight is normalized; a component that vanishes
    (e.g. a − outcome when m^R_j = 0) is kept as weight 0 with the zero
    vector, so positions stay aligned with the outcomes.
    """
    if not params.urbm:
        raise ContractViolation("ensemble decomposition needs a uRBM")
    if params.M > ENSEMBLE_MAX_HIDDEN:
        raise GuardViolation(f"M={params.M} exceeds the ensemble guard of {ENSEMBLE_MAX_HIDDEN}")
    N = params.N
    z = spins_from_indices(all_configs(N), N)
    visible_log = z @ params.b
    visible = np.exp(visible_log - visible_log.real.max())
    phi = params.m.imag + z @ params.W.imag
    factors = {+1: np.cos(phi), -1: 1j * np.sin(phi)}
    r = {+1: np.cosh(params.m.real), -1: np.sinh(params.m.real)}

    unnorm_total = visible * np.prod(np.cosh(params.m.real + 1j * phi), axis=1)
    n_v = np.linalg.norm(unnorm_total)
    if not np.isfinite(n_v) or n_v == 0.0:
        raise DegenerateStateError("RBM state has zero norm")

    terms = []
    for signs in product((+1, -1), repeat=params.M):
        comp = visible.copy()
        weight = 1.0 + 0j
        for j, s in enumerate(signs):
            comp = comp * factors[s][:, j]
            weight *= r[s][j]
        n_s = np.linalg.norm(comp)
        if n_s == 0.0 or weight == 0.0:
            terms.append((0j, StateVector(np.zeros(1 << N), N)))
            continue
        terms.append((complex(weight * n_s / n_v), StateVector(comp / n_s, N)))
    logger.debug("ensemble of %s components for N=%s", len(terms), N)
    return terms


def reconstruct_ensemble(terms: List[Tuple[complex, StateVector]]) -> np.ndarray:
    return sum(w * s.amplitudes for w, s in terms)
