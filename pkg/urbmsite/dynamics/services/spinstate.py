"""
Statevector engine and sparse Pauli-operator algebra over N spin-1/2 sites.

Conventions used everywhere in the app:
  - basis index x = Σ_i bits[i]·2^i (site 0 is the least-significant bit)
  - z_i = 1 − 2·bits[i], so bit 0 is the +1 eigenstate of Pauli-Z
  - a Pauli string acts on |x⟩ as  c · i^{nY} · (−1)^{popcount(x & zy)} |x ^ flip⟩
    where `flip` marks X/Y sites and `zy` marks Z/Y sites.
"""
import hashlib
import logging
from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable, Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np
from scipy.sparse.linalg import LinearOperator, eigsh

from dynamics.services.errors import ContractViolation, DegenerateStateError, GuardViolation

logger = logging.getLogger(__name__)

MAX_SITES = 24
DENSE_MAX_SITES = 12
EIG_MAX_SITES = 10
COEFF_ATOL = 1e-15
CONNECTED_ATOL = 1e-14

_PAULI_LETTERS = ("X", "Y", "Z")
_I_POWERS = (1, 1j, -1, -1j)

# single-site product table: (a, b) -> (phase, result); result None is identity
_PAULI_PRODUCT = {
    ("X", "X"): (1, None), ("Y", "Y"): (1, None), ("Z", "Z"): (1, None),
    ("X", "Y"): (1j, "Z"), ("Y", "X"): (-1j, "Z"),
    ("Y", "Z"): (1j, "X"), ("Z", "Y"): (-1j, "X"),
    ("Z", "X"): (1j, "Y"), ("X", "Z"): (-1j, "Y"),
}


def parity(values) -> np.ndarray:
    """Popcount parity (0/1) of each non-negative integer in `values`."""
    v = np.array(values, dtype=np.uint64, copy=True)
    for shift in (32, 16, 8, 4, 2, 1):
        v ^= v >> np.uint64(shift)
    return (v & np.uint64(1)).astype(np.int8)


def spins_from_indices(indices, N: int) -> np.ndarray:
    """Rows of z values (±1, float) for each basis index."""
    idx = np.asarray(indices, dtype=np.int64).reshape(-1, 1)
    bits = (idx >> np.arange(N, dtype=np.int64)) & 1
    return 1.0 - 2.0 * bits


def _check_sites(N: int, limit: int = MAX_SITES) -> None:
    if N < 1:
        raise ContractViolation(f"site count must be positive, got {N}")
    if N > limit:
        raise GuardViolation(f"N={N} exceeds the statevector guard of {limit} sites")


# ---------- basis configurations ----------
@dataclass(frozen=True)
class BasisConfig:
    bits: Tuple[int, ...]

    def __post_init__(self):
        bits = tuple(int(b) for b in self.bits)
        if not bits or any(b not in (0, 1) for b in bits):
            raise ContractViolation(f"bits must be a non-empty 0/1 sequence, got {self.bits!r}")
        object.__setattr__(self, "bits", bits)

    @property
    def N(self) -> int:
        return len(self.bits)

    @property
    def z(self) -> np.ndarray:
        return 1 - 2 * np.array(self.bits, dtype=np.int64)

    @property
    def index(self) -> int:
        return sum(b << i for i, b in enumerate(self.bits))

    @classmethod
    def from_index(cls, index: int, N: int) -> "BasisConfig":
        if not 0 <= index < (1 << N):
            raise ContractViolation(f"index {index} out of range for N={N}")
        return cls(tuple((index >> i) & 1 for i in range(N)))

    @classmethod
    def from_z(cls, z: Sequence[int]) -> "BasisConfig":
        return cls(tuple(0 if int(s) == 1 else 1 for s in z))

    def flipped(self, site: int) -> "BasisConfig":
        bits = list(self.bits)
        bits[site] ^= 1
        return BasisConfig(tuple(bits))

    def __str__(self):
        return "".join(str(b) for b in self.bits)


# ---------- statevectors ----------
@dataclass(frozen=True, eq=False)
class StateVector:
    """Complex amplitudes over the 2^N basis. The array is stored read-only."""

    amplitudes: np.ndarray
    N: int

    def __post_init__(self):
        _check_sites(self.N)
        amps = np.array(self.amplitudes, dtype=np.complex128).reshape(-1)
        if amps.size != (1 << self.N):
            raise ContractViolation(
                f"amplitude array has {amps.size} entries, expected 2^{self.N}"
            )
        amps.flags.writeable = False
        object.__setattr__(self, "amplitudes", amps)

    @classmethod
    def from_array(cls, arr, normalize: bool = True) -> "StateVector":
        arr = np.asarray(arr, dtype=np.complex128).reshape(-1)
        N = int(arr.size).bit_length() - 1
        if arr.size == 0 or (1 << N) != arr.size:
            raise ContractViolation(f"length {arr.size} is not a power of two")
        state = cls(arr, N)
        return state.normalize() if normalize else state

    @classmethod
    def basis(cls, N: int, index: int) -> "StateVector":
        amps = np.zeros(1 << N, dtype=np.complex128)
        amps[index] = 1.0
        return cls(amps, N)

    @classmethod
    def plus(cls, N: int) -> "StateVector":
        return cls(np.full(1 << N, (1 << N) ** -0.5, dtype=np.complex128), N)

    def norm(self) -> float:
        return float(np.linalg.norm(self.amplitudes))

    def normalize(self) -> "StateVector":
        n = self.norm()
        if not np.isfinite(n) or n == 0.0:
            raise DegenerateStateError("cannot normalize a zero or non-finite state")
        return StateVector(self.amplitudes / n, self.N)

    def probabilities(self) -> np.ndarray:
        return np.abs(self.amplitudes) ** 2

    def inner(self, other: "StateVector") -> complex:
        _same_size(self.N, other.N)
        return complex(np.vdot(self.amplitudes, other.amplitudes))

    def phase_aligned(self, reference: "StateVector") -> "StateVector":
        """Copy with the global phase rotated so ⟨reference|self⟩ is real positive."""
        ov = reference.inner(self)
        if abs(ov) == 0.0:
            return self
        return StateVector(self.amplitudes * (abs(ov) / ov), self.N)


def fidelity(psi: StateVector, phi: StateVector) -> float:
    """|⟨ψ|φ⟩|² with both states normalized; insensitive to global phase."""
    ov = psi.inner(phi)
    return float(abs(ov) ** 2 / (psi.norm() ** 2 * phi.norm() ** 2))


def _same_size(a: int, b: int) -> None:
    if a != b:
        raise ContractViolation(f"dimension mismatch: N={a} vs N={b}")


# ---------- Pauli strings ----------
@dataclass(frozen=True)
class PauliTerm:
    coefficient: complex
    ops: Tuple[Tuple[int, str], ...] = ()

    def __post_init__(self):
        raw = self.ops.items() if isinstance(self.ops, Mapping) else self.ops
        ops = tuple(sorted((int(s), str(p).upper()) for s, p in raw))
        sites = [s for s, _ in ops]
        if len(set(sites)) != len(sites):
            raise ContractViolation(f"repeated site in Pauli string {ops}")
        for s, p in ops:
            if s < 0 or p not in _PAULI_LETTERS:
                raise ContractViolation(f"invalid Pauli factor {p}{s}")
        object.__setattr__(self, "ops", ops)
        object.__setattr__(self, "coefficient", complex(self.coefficient))

    @property
    def flip_mask(self) -> int:
        return sum(1 << s for s, p in self.ops if p in ("X", "Y"))

    @property
    def z_mask(self) -> int:
        return sum(1 << s for s, p in self.ops if p in ("Y", "Z"))

    @property
    def n_y(self) -> int:
        return sum(1 for _, p in self.ops if p == "Y")

    @property
    def max_site(self) -> int:
        return max((s for s, _ in self.ops), default=-1)

    def label(self) -> str:
        return " ".join(f"{p}{s}" for s, p in self.ops) or "I"


def _multiply_strings(a: Tuple[Tuple[int, str], ...], b: Tuple[Tuple[int, str], ...]):
    phase = 1 + 0j
    ops = dict(a)
    for site, p in b:
        if site not in ops:
            ops[site] = p
            continue
        ph, res = _PAULI_PRODUCT[(ops[site], p)]
        phase *= ph
        if res is None:
            del ops[site]
        else:
            ops[site] = res
    return phase, tuple(sorted(ops.items()))


# ---------- operators ----------
class SparseHamiltonian:
    """
    Weighted sum of Pauli strings on N sites.

    Terms are merged on construction (same Pauli string -> coefficients summed,
    |c| <= 1e-15 dropped) so every instance has one canonical form.
    `hermitian` is derived from that form: all merged coefficients real.
    """

    def __init__(self, N: int, terms: Iterable[PauliTerm] = ()):
        if N < 1:
            raise ContractViolation(f"site count must be positive, got {N}")
        merged: Dict[Tuple[Tuple[int, str], ...], complex] = {}
        for term in terms:
            if term.max_site >= N:
                raise ContractViolation(
                    f"term {term.label()} acts on site {term.max_site} >= N={N}"
                )
            merged[term.ops] = merged.get(term.ops, 0j) + term.coefficient
        self.N = N
        self.terms: Tuple[PauliTerm, ...] = tuple(
            PauliTerm(c, ops) for ops, c in sorted(merged.items()) if abs(c) > COEFF_ATOL
        )

    @classmethod
    def zero(cls, N: int) -> "SparseHamiltonian":
        return cls(N)

    @classmethod
    def identity(cls, N: int, coefficient: complex = 1.0) -> "SparseHamiltonian":
        return cls(N, [PauliTerm(coefficient, ())])

    @property
    def hermitian(self) -> bool:
        return all(abs(t.coefficient.imag) <= 1e-14 for t in self.terms)

    @property
    def is_zero(self) -> bool:
        return not self.terms

    @property
    def is_diagonal(self) -> bool:
        return all(t.flip_mask == 0 for t in self.terms)

    # ---------- algebra ----------
    def __add__(self, other: "SparseHamiltonian") -> "SparseHamiltonian":
        _same_size(self.N, other.N)
        return SparseHamiltonian(self.N, self.terms + other.terms)

    def __sub__(self, other: "SparseHamiltonian") -> "SparseHamiltonian":
        return self + (-1.0) * other

    def __mul__(self, scalar) -> "SparseHamiltonian":
        return SparseHamiltonian(
            self.N, [PauliTerm(t.coefficient * scalar, t.ops) for t in self.terms]
        )

    __rmul__ = __mul__

    def __neg__(self) -> "SparseHamiltonian":
        return self * -1.0

    def __matmul__(self, other: "SparseHamiltonian") -> "SparseHamiltonian":
        _same_size(self.N, other.N)
        products = []
        for a in self.terms:
            for b in other.terms:
                phase, ops = _multiply_strings(a.ops, b.ops)
                products.append(PauliTerm(a.coefficient * b.coefficient * phase, ops))
        return SparseHamiltonian(self.N, products)

    def dagger(self) -> "SparseHamiltonian":
        return SparseHamiltonian(
            self.N, [PauliTerm(t.coefficient.conjugate(), t.ops) for t in self.terms]
        )

    def fingerprint(self) -> str:
        payload = f"{self.N}|" + ";".join(
            f"{t.label()}:{t.coefficient.real!r}:{t.coefficient.imag!r}" for t in self.terms
        )
        return hashlib.sha256(payload.encode()).hexdigest()[:32]

    def __repr__(self):
        return f"SparseHamiltonian(N={self.N}, terms={len(self.terms)})"

    # ---------- matrix elements ----------
    @cached_property
    def flip_groups(self) -> Dict[int, Tuple[np.ndarray, np.ndarray]]:
        """flip mask -> (coefficients · i^{nY}, z/y masks) for every term with that flip."""
        groups: Dict[int, List[Tuple[complex, int]]] = {}
        for t in self.terms:
            groups.setdefault(t.flip_mask, []).append(
                (t.coefficient * _I_POWERS[t.n_y % 4], t.z_mask)
            )
        return {
            f: (
                np.array([c for c, _ in items], dtype=np.complex128),
                np.array([m for _, m in items], dtype=np.uint64),
            )
            for f, items in sorted(groups.items())
        }

    def group_values(self, flip: int, indices) -> np.ndarray:
        """⟨x ^ flip|H|x⟩ for each x in `indices`."""
        coeffs, masks = self.flip_groups[flip]
        x = np.asarray(indices, dtype=np.uint64).reshape(-1, 1)
        signs = 1.0 - 2.0 * parity(x & masks.reshape(1, -1))
        return signs @ coeffs

    @cached_property
    def _full_groups(self) -> Tuple[Tuple[int, np.ndarray], ...]:
        _check_sites(self.N)
        idx = np.arange(1 << self.N, dtype=np.uint64)
        return tuple((f, self.group_values(f, idx)) for f in self.flip_groups)

    def to_dense(self) -> np.ndarray:
        _check_sites(self.N, DENSE_MAX_SITES)
        dim = 1 << self.N
        mat = np.zeros((dim, dim), dtype=np.complex128)
        cols = np.arange(dim)
        for f, values in self._full_groups:
            mat[cols ^ f, cols] += values
        return mat


def pauli_operator(N: int, ops: Mapping[int, str], coefficient: complex = 1.0) -> SparseHamiltonian:
    return SparseHamiltonian(N, [PauliTerm(coefficient, ops)])


def sigma(op: str, site: int, N: int) -> SparseHamiltonian:
    return pauli_operator(N, {site: op})


def product_observable(N: int, *factors: Tuple[str, int]) -> SparseHamiltonian:
    """product_observable(N, ("X", 0), ("X", 1)) -> σ^x_0 σ^x_1."""
    return pauli_operator(N, {site: op for op, site in factors})


def magnetization(N: int) -> SparseHamiltonian:
    """(1/N) Σ_i σ^z_i."""
    return SparseHamiltonian(N, [PauliTerm(1.0 / N, {i: "Z"}) for i in range(N)])


# ---------- operations ----------
def apply_array(H: SparseHamiltonian, psi: np.ndarray) -> np.ndarray:
    """H applied along axis 0 of a vector or a matrix (column by column)."""
    psi = np.asarray(psi, dtype=np.complex128)
    out = np.zeros_like(psi)
    idx = np.arange(psi.shape[0])
    for f, values in H._full_groups:
        if psi.ndim == 2:
            values = values[:, None]
        if f == 0:
            out += values * psi
        else:
            out += (values * psi)[idx ^ f]
    return out


def apply_operator(H: SparseHamiltonian, psi: StateVector) -> StateVector:
    """H|ψ⟩ (unnormalized). The input state is untouched."""
    _same_size(H.N, psi.N)
    return StateVector(apply_array(H, psi.amplitudes), psi.N)


def expectation(psi: StateVector, O: SparseHamiltonian) -> complex:
    _same_size(O.N, psi.N)
    return complex(np.vdot(psi.amplitudes, apply_array(O, psi.amplitudes)))


def connected_states(H: SparseHamiltonian, z: BasisConfig) -> List[Tuple[BasisConfig, complex]]:
    """
    Nonzero elements ⟨z|H|z′⟩ of one row: the diagonal entry first, then
    ascending basis index of z′.
    """
    _same_size(H.N, z.N)
    x = z.index
    entries = []
    for f in H.flip_groups:
        value = complex(H.group_values(f, [x ^ f])[0])
        if abs(value) > CONNECTED_ATOL:
            entries.append((x ^ f, value))
    entries.sort(key=lambda e: (e[0] != x, e[0]))
    return [(BasisConfig.from_index(i, H.N), v) for i, v in entries]


def local_values(
    H: SparseHamiltonian,
    indices: np.ndarray,
    log_psi: Callable[[np.ndarray], np.ndarray],
    log_psi_at: Optional[np.ndarray] = None,
) -> np.ndarray:
    """
    O_loc(z) = Σ_{z′} ⟨z|H|z′⟩ ψ(z′)/ψ(z) for each basis index z.

    `log_psi` maps an index array to log ψ̃ at those indices; ratios are taken
    in the log domain so unnormalized amplitudes are fine.
    """
    idx = np.asarray(indices, dtype=np.int64)
    base = log_psi(idx) if log_psi_at is None else log_psi_at
    total = np.zeros(idx.size, dtype=np.complex128)
    for f in H.flip_groups:
        partner = idx ^ f
        values = H.group_values(f, partner)
        if f == 0:
            total += values
        else:
            total += values * np.exp(log_psi(partner) - base)
    return total


# ---------- propagation ----------
def rk4_step(rhs: Callable[[np.ndarray], np.ndarray], y: np.ndarray, dt: float) -> np.ndarray:
    k1 = rhs(y)
    k2 = rhs(y + 0.5 * dt * k1)
    k3 = rhs(y + 0.5 * dt * k2)
    k4 = rhs(y + dt * k3)
    return y + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


@dataclass
class Propagation:
    times: np.ndarray
    states: List[StateVector] = field(default_factory=list)
    series: Dict[str, np.ndarray] = field(default_factory=dict)
    max_norm_drift: float = 0.0

    @property
    def final(self) -> StateVector:
        return self.states[-1]


def _step_count(t_max: float, dt: float) -> int:
    if dt <= 0:
        raise ContractViolation(f"dt must be positive, got {dt}")
    if t_max < 0:
        raise ContractViolation(f"t_max must be non-negative, got {t_max}")
    return int(round(t_max / dt))


def _propagate(
    H: SparseHamiltonian,
    psi0: StateVector,
    t_max: float,
    dt: float,
    record_every: int,
    observables: Optional[Mapping[str, SparseHamiltonian]],
    keep_states: bool,
    renormalize: bool,
) -> Propagation:
    _same_size(H.N, psi0.N)
    steps = _step_count(t_max, dt)
    record_every = max(1, int(record_every))
    observables = dict(observables or {})
    for O in observables.values():
        _same_size(O.N, psi0.N)

    def rhs(y):
        return -1j * apply_array(H, y)

    times, states = [], []
    series: Dict[str, List[float]] = {name: [] for name in observables}

    def record(step, y):
        times.append(step * dt)
        state = StateVector(y, psi0.N)
        if keep_states:
            states.append(state)
        norm2 = float(np.vdot(y, y).real)
        for name, O in observables.items():
            series[name].append(float(np.vdot(y, apply_array(O, y)).real / norm2))

    y = np.array(psi0.amplitudes)
    record(0, y)
    drift = 0.0
    for step in range(1, steps + 1):
        y = rk4_step(rhs, y, dt)
        n = float(np.linalg.norm(y))
        if not np.isfinite(n) or n == 0.0:
            raise DegenerateStateError("state norm collapsed during propagation", step=step)
        if renormalize:
            drift = max(drift, abs(n - 1.0))
            y = y / n
        if step % record_every == 0 or step == steps:
            record(step, y)
    return Propagation(
        times=np.array(times),
        states=states,
        series={k: np.array(v) for k, v in series.items()},
        max_norm_drift=drift,
    )


def propagate_exact(
    H: SparseHamiltonian,
    psi0: StateVector,
    t_max: float,
    dt: float,
    record_every: int = 1,
    observables: Optional[Mapping[str, SparseHamiltonian]] = None,
    keep_states: bool = True,
) -> Propagation:
    """
    RK4 integration of i∂ψ/∂t = Hψ with renormalization after every step.
    This is the exact-dynamics oracle for closed systems.
    """
    if not H.hermitian:
        raise ContractViolation("propagate_exact requires a hermitian operator")
    if dt > 0.01:
        raise ContractViolation(f"dt={dt} exceeds the oracle step limit of 0.01")
    return _propagate(H, psi0, t_max, dt, record_every, observables, keep_states, True)


def propagate_nonhermitian(
    H: SparseHamiltonian,
    psi0: StateVector,
    t_max: float,
    dt: float,
    renormalize: bool = True,
    record_every: int = 1,
    keep_states: bool = True,
) -> Propagation:
    return _propagate(H, psi0, t_max, dt, record_every, None, keep_states, renormalize)


def propagate_dense(H: SparseHamiltonian, psi0: StateVector, times: Sequence[float]) -> List[StateVector]:
    """Eigendecomposition cross-check of propagate_exact for small systems."""
    _same_size(H.N, psi0.N)
    _check_sites(H.N, EIG_MAX_SITES)
    if not H.hermitian:
        raise ContractViolation("propagate_dense requires a hermitian operator")
    evals, evecs = np.linalg.eigh(H.to_dense())
    coeffs = evecs.conj().T @ psi0.amplitudes
    return [StateVector(evecs @ (np.exp(-1j * evals * t) * coeffs), H.N) for t in times]


def imaginary_time_exact(H: SparseHamiltonian, psi0: StateVector, tau: float, dtau: float) -> StateVector:
    """Normalized e^{−τH}|ψ0⟩ by RK4 with renormalization."""
    _same_size(H.N, psi0.N)
    y = np.array(psi0.amplitudes)
    for _ in range(_step_count(tau, dtau)):
        y = rk4_step(lambda v: -apply_array(H, v), y, dtau)
        n = np.linalg.norm(y)
        if n == 0.0:
            raise DegenerateStateError("imaginary-time state vanished")
        y = y / n
    return StateVector(y, H.N)


def ground_state(H: SparseHamiltonian) -> Tuple[float, StateVector]:
    """
    Lowest eigenpair of a hermitian H: dense eigh up to EIG_MAX_SITES sites,
    Lanczos (eigsh) on a matrix-free LinearOperator beyond that.
    The phase is fixed so the largest-magnitude amplitude is real positive.
    """
    if not H.hermitian:
        raise ContractViolation("ground_state requires a hermitian operator")
    _check_sites(H.N)
    if H.N <= EIG_MAX_SITES:
        evals, evecs = np.linalg.eigh(H.to_dense())
        energy, vec = float(evals[0]), evecs[:, 0]
    else:
        dim = 1 << H.N
        op = LinearOperator(
            (dim, dim), matvec=lambda v: apply_array(H, np.ravel(v)), dtype=np.complex128
        )
        evals, evecs = eigsh(op, k=1, which="SA", v0=np.ones(dim, dtype=np.complex128), tol=1e-12)
        energy, vec = float(evals[0]), evecs[:, 0]
    pivot = vec[np.argmax(np.abs(vec))]
    vec = vec * (abs(pivot) / pivot)
    logger.debug("ground state N=%s E0=%.12f", H.N, energy)
    return energy, StateVector(vec / np.linalg.norm(vec), H.N)
