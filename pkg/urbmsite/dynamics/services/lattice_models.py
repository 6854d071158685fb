"""
Lattice geometries, the spin Hamiltonians built on them, the Lindblad
operator set of the open TFI chain and the classical TAFI energy.
"""
import json
import logging
from dataclasses import dataclass
from functools import cached_property
from typing import List, Optional, Sequence, Tuple

import numpy as np

from dynamics.services.errors import ContractViolation
from dynamics.services.spinstate import BasisConfig, PauliTerm, SparseHamiltonian

logger = logging.getLogger(__name__)

CHAIN = "chain"
TRIANGULAR = "triangular"
OPEN = "open"
PERIODIC = "periodic"

Bond = Tuple[int, int]


@dataclass(frozen=True)
class LatticeSpec:
    """
    Site/bond layout.

    Triangular lattices are Lx × Ly tori with site index s = x + Lx·y and
    bonds to the right, down and down-right neighbours. Wrap-around can map
    two raw bonds onto the same pair (Lx or Ly equal to 2); those are
    deduplicated, or rejected when `strict` is set.
    """

    kind: str
    sites: int
    boundary: str = OPEN
    dims: Optional[Tuple[int, int]] = None
    strict: bool = False

    def __post_init__(self):
        if self.kind == CHAIN:
            if self.boundary not in (OPEN, PERIODIC):
                raise ContractViolation(f"unknown boundary {self.boundary!r}")
            if self.sites < 2:
                raise ContractViolation(f"a chain needs at least 2 sites, got {self.sites}")
            if self.boundary == PERIODIC and self.sites < 3:
                raise ContractViolation(
                    "periodic chain with N=2 would count the same bond twice"
                )
        elif self.kind == TRIANGULAR:
            if self.dims is None or len(self.dims) != 2:
                raise ContractViolation("triangular lattice needs dims=(Lx, Ly)")
            lx, ly = self.dims
            if lx < 2 or ly < 2:
                raise ContractViolation(f"triangular lattice needs Lx, Ly >= 2, got {lx}x{ly}")
            if self.sites != lx * ly:
                raise ContractViolation(f"sites={self.sites} does not equal Lx*Ly={lx * ly}")
            if self.boundary != PERIODIC:
                raise ContractViolation("triangular lattices are periodic")
            object.__setattr__(self, "dims", (int(lx), int(ly)))
        else:
            raise ContractViolation(f"unknown lattice kind {self.kind!r}")

    @classmethod
    def chain(cls, N: int, boundary: str = PERIODIC) -> "LatticeSpec":
        return cls(CHAIN, N, boundary)

    @classmethod
    def triangular(cls, Lx: int, Ly: int, strict: bool = False) -> "LatticeSpec":
        return cls(TRIANGULAR, Lx * Ly, PERIODIC, (Lx, Ly), strict)

    def site(self, x: int, y: int) -> int:
        lx, ly = self.dims
        return (x % lx) + lx * (y % ly)

    def _raw_bonds(self) -> List[Bond]:
        N = self.sites
        if self.kind == CHAIN:
            raw = [(i, i + 1) for i in range(N - 1)]
            if self.boundary == PERIODIC:
                raw.append((N - 1, 0))
            return raw
        lx, ly = self.dims
        raw = []
        for y in range(ly):
            for x in range(lx):
                s = self.site(x, y)
                raw.append((s, self.site(x + 1, y)))
                raw.append((s, self.site(x, y + 1)))
                raw.append((s, self.site(x + 1, y + 1)))
        return raw

    @property
    def raw_bond_count(self) -> int:
        return len(self._raw_bonds())

    @cached_property
    def _bonds(self) -> Tuple[Bond, ...]:
        unique = sorted({(min(i, j), max(i, j)) for i, j in self._raw_bonds()})
        dropped = self.raw_bond_count - len(unique)
        if dropped:
            if self.strict:
                raise ContractViolation(
                    f"{self.dims[0]}x{self.dims[1]} wrap-around duplicates {dropped} bonds"
                )
            logger.debug("lattice %s: %s duplicate bonds merged", self.dims, dropped)
        return tuple(unique)

    def bonds(self) -> List[Bond]:
        return list(self._bonds)

    def neighbors(self, site: int) -> List[int]:
        return sorted({j for i, j in self._bonds if i == site} | {i for i, j in self._bonds if j == site})

    def neighbor_table(self) -> np.ndarray:
        """(N, max_degree) int array of neighbours, padded with −1."""
        rows = [self.neighbors(s) for s in range(self.sites)]
        width = max(len(r) for r in rows)
        table = np.full((self.sites, width), -1, dtype=np.int64)
        for s, r in enumerate(rows):
            table[s, : len(r)] = r
        return table

    def triangles(self) -> List[Tuple[int, int, int]]:
        if self.kind != TRIANGULAR:
            raise ContractViolation("triangles are defined on triangular lattices only")
        lx, ly = self.dims
        tris = set()
        for y in range(ly):
            for x in range(lx):
                s, dr = self.site(x, y), self.site(x + 1, y + 1)
                tris.add(tuple(sorted((s, self.site(x + 1, y), dr))))
                tris.add(tuple(sorted((s, self.site(x, y + 1), dr))))
        return sorted(tris)

    def to_json(self) -> str:
        return json.dumps([[i, j] for i, j in self._bonds])


@dataclass(frozen=True)
class LindbladSpec:
    operators: Tuple[Tuple[int, SparseHamiltonian], ...]
    gamma: float

    @property
    def N(self) -> int:
        return self.operators[0][1].N if self.operators else 0

    @property
    def sites(self) -> Tuple[int, ...]:
        return tuple(k for k, _ in self.operators)

    @cached_property
    def jump_products(self) -> Tuple[SparseHamiltonian, ...]:
        """L_k† L_k per channel, in channel order."""
        return tuple(L.dagger() @ L for _, L in self.operators)

    def decay_operator(self) -> Optional[SparseHamiltonian]:
        """Σ_k L_k† L_k, or None for an empty channel set."""
        total = None
        for term in self.jump_products:
            total = term if total is None else total + term
        return total


# ---------- builders ----------
def _field_terms(N: int, op: str, strengths: Sequence[float]) -> List[PauliTerm]:
    return [PauliTerm(-s, {i: op}) for i, s in enumerate(strengths)]


def build_tfi(N: int, h: float, boundary: str = PERIODIC) -> SparseHamiltonian:
    """H = −h Σ σ^x_i − Σ_⟨ij⟩ σ^z_i σ^z_j."""
    lattice = LatticeSpec.chain(N, boundary)
    terms = _field_terms(N, "X", [h] * N)
    terms += [PauliTerm(-1.0, {i: "Z", j: "Z"}) for i, j in lattice.bonds()]
    return SparseHamiltonian(N, terms)


def build_heisenberg(
    N: int,
    Jz: float,
    hz: float,
    boundary: str = PERIODIC,
    fields: Optional[Sequence[float]] = None,
) -> SparseHamiltonian:
    """
    H = −Σ h_i σ^z_i + Σ_⟨ij⟩ (Jz σ^zσ^z + σ^xσ^x + σ^yσ^y).
    `fields` overrides the uniform hz with one z-field per site.
    """
    lattice = LatticeSpec.chain(N, boundary)
    if fields is None:
        fields = [hz] * N
    elif len(fields) != N:
        raise ContractViolation(f"expected {N} site fields, got {len(fields)}")
    terms = _field_terms(N, "Z", fields)
    for i, j in lattice.bonds():
        terms.append(PauliTerm(Jz, {i: "Z", j: "Z"}))
        terms.append(PauliTerm(1.0, {i: "X", j: "X"}))
        terms.append(PauliTerm(1.0, {i: "Y", j: "Y"}))
    return SparseHamiltonian(N, terms)


def build_tafi_2d(Lx: int, Ly: int, h: float, strict: bool = False) -> SparseHamiltonian:
    """H = −h Σ σ^x + Σ_⟨ij⟩ σ^z σ^z on the periodic triangular lattice."""
    lattice = LatticeSpec.triangular(Lx, Ly, strict=strict)
    N = lattice.sites
    terms = _field_terms(N, "X", [h] * N)
    terms += [PauliTerm(1.0, {i: "Z", j: "Z"}) for i, j in lattice.bonds()]
    return SparseHamiltonian(N, terms)


def build_lindblad_raising(N: int, gamma: float) -> LindbladSpec:
    """
    L_k = √γ σ^+_k with σ^+ = |1⟩⟨0| = (X − iY)/2 in the bit convention of
    spinstate, so L_k† L_k = γ |0⟩⟨0|_k.
    """
    if gamma < 0:
        raise ContractViolation(f"gamma must be non-negative, got {gamma}")
    amp = float(np.sqrt(gamma))
    ops = tuple(
        (k, SparseHamiltonian(N, [PauliTerm(amp / 2, {k: "X"}), PauliTerm(-1j * amp / 2, {k: "Y"})]))
        for k in range(N)
    )
    return LindbladSpec(operators=ops, gamma=float(gamma))


def classical_tafi_energy(config: BasisConfig, lattice: LatticeSpec) -> float:
    if lattice.kind != TRIANGULAR:
        raise ContractViolation("classical TAFI energy needs a triangular lattice")
    if config.N != lattice.sites:
        raise ContractViolation(f"config has {config.N} sites, lattice has {lattice.sites}")
    z = config.z
    return float(sum(z[i] * z[j] for i, j in lattice.bonds()))


def tafi_flip_delta(z: Sequence[int], site: int, lattice: LatticeSpec) -> float:
    """Energy change of flipping `site`: −2 z_site Σ_nbr z_nbr."""
    z = np.asarray(z)
    return float(-2 * z[site] * sum(z[j] for j in lattice.neighbors(site)))


def build_model(
    model: str,
    *,
    N: Optional[int] = None,
    L: Optional[Sequence[int]] = None,
    boundary: str = PERIODIC,
    h: float = 1.0,
    Jz: float = 1.0,
    hz: float = 0.0,
    fields: Optional[Sequence[float]] = None,
) -> SparseHamiltonian:
    if model == "tfi":
        return build_tfi(N, h, boundary)
    if model == "heisenberg":
        return build_heisenberg(N, Jz, hz, boundary, fields=fields)
    if model == "tafi2d":
        if L is None or len(L) != 2:
            raise ContractViolation("tafi2d needs L=(Lx, Ly)")
        return build_tafi_2d(int(L[0]), int(L[1]), h)
    raise ContractViolation(f"unknown model {model!r}")
