"""
Measurement emulation: direct sampling of |Ψ|², Metropolis chains over the
RBM amplitudes and the classical TAFI, Monte Carlo estimators of A and f,
and autocorrelation analysis.
"""
import cmath
import logging
import math
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from numba import njit

from dynamics.services.errors import ContractViolation, GuardViolation, ZeroVarianceError
from dynamics.services.lattice_models import LatticeSpec
from dynamics.services.rbm_ansatz import RbmParams, build_statevector, log_amplitudes, log_derivative_matrix
from dynamics.services.spinstate import BasisConfig, SparseHamiltonian, local_values, spins_from_indices
from dynamics.services.tvmc import EXACT_MAX_SITES, TvmcLinearSystem, assemble_system

logger = logging.getLogger(__name__)

DEFAULT_TAFI_TEMPERATURE = 0.3
_MOMENT_CHUNK = 4096
_TAFI_BLOCK_SWEEPS = 500


@dataclass(frozen=True, eq=False)
class SampleBatch:
    indices: np.ndarray
    N: int
    seed: Optional[int] = None
    weights: Optional[np.ndarray] = None
    acceptance_rate: Optional[float] = None

    def __post_init__(self):
        idx = np.asarray(self.indices, dtype=np.int64).reshape(-1)
        if idx.size == 0:
            raise ContractViolation("a sample batch needs at least one configuration")
        object.__setattr__(self, "indices", idx)
        if self.weights is not None:
            w = np.asarray(self.weights, dtype=np.float64).reshape(-1)
            if w.size != idx.size or np.any(w < 0) or w.sum() <= 0:
                raise ContractViolation("weights must be non-negative, one per sample")
            object.__setattr__(self, "weights", w / w.sum())

    @property
    def n_exp(self) -> int:
        return self.indices.size

    @property
    def configs(self) -> List[BasisConfig]:
        return [BasisConfig.from_index(int(i), self.N) for i in self.indices]

    @property
    def z(self) -> np.ndarray:
        return spins_from_indices(self.indices, self.N)

    def probability_weights(self) -> np.ndarray:
        if self.weights is not None:
            return self.weights
        return np.full(self.n_exp, 1.0 / self.n_exp)

    def histogram(self) -> np.ndarray:
        return np.bincount(self.indices, weights=self.weights, minlength=1 << self.N) / (
            1.0 if self.weights is not None else self.n_exp
        )


@dataclass(frozen=True)
class AutocorrSeries:
    lags: np.ndarray
    values: np.ndarray
    tau_int: float


# ---------- direct sampling ----------
def sample_exact(params: RbmParams, n: int, seed: int) -> SampleBatch:
    """Inverse-CDF draws from p(z) = |⟨z|Ψ⟩|²."""
    if params.N > EXACT_MAX_SITES:
        raise GuardViolation(f"N={params.N} exceeds the exact sampling guard of {EXACT_MAX_SITES}")
    if n < 1:
        raise ContractViolation(f"sample count must be positive, got {n}")
    cdf = np.cumsum(build_statevector(params).probabilities())
    rng = np.random.default_rng(seed)
    idx = np.searchsorted(cdf, rng.random(n) * cdf[-1], side="right")
    return SampleBatch(np.minimum(idx, cdf.size - 1), params.N, seed=seed)


def full_enumeration(params: RbmParams) -> SampleBatch:
    """Every configuration once, weighted by its exact probability."""
    probs = build_statevector(params).probabilities()
    return SampleBatch(np.arange(probs.size), params.N, weights=probs)


# ---------- Metropolis over RBM amplitudes ----------
@njit(cache=True)
def _log_cosh(x):
    if x.real < 0:
        x = -x
    return x - math.log(2.0) + cmath.log(1.0 + cmath.exp(-2.0 * x))


@njit(cache=True)
def _rbm_chain(bits, b, m, W, sites, uniforms, record_every, skip):
    N = bits.size
    M = m.size
    theta = m.copy()
    index = 0
    for i in range(N):
        s = 1.0 - 2.0 * bits[i]
        index |= bits[i] << i
        for j in range(M):
            theta[j] += W[i, j] * s
    n_out = (sites.size - skip) // record_every
    out = np.empty(n_out, dtype=np.int64)
    accepted = 0
    k = 0
    for t in range(sites.size):
        i = sites[t]
        s = 1.0 - 2.0 * bits[i]
        log_ratio = -2.0 * b[i] * s
        for j in range(M):
            log_ratio += _log_cosh(theta[j] - 2.0 * W[i, j] * s) - _log_cosh(theta[j])
        if uniforms[t] < math.exp(min(0.0, 2.0 * log_ratio.real)):
            bits[i] = 1 - bits[i]
            index ^= 1 << i
            for j in range(M):
                theta[j] -= 2.0 * W[i, j] * s
            accepted += 1
        if t >= skip and (t - skip + 1) % record_every == 0 and k < n_out:
            out[k] = index
            k += 1
    return out, accepted


def metropolis_quantum(
    params: RbmParams, n: int, burn_in: int, seed: int, thin: Optional[int] = None
) -> SampleBatch:
    """
    Single-site-flip Metropolis chain accepting with min(1, |ψ̃(z′)/ψ̃(z)|²).
    `burn_in` is counted in sweeps of N proposals; one sample is kept every
    `thin` proposals (default one sweep).
    """
    if n < 1:
        raise ContractViolation(f"sample count must be positive, got {n}")
    N = params.N
    thin = N if thin is None else int(thin)
    rng = np.random.default_rng(seed)
    bits = rng.integers(0, 2, N).astype(np.int64)
    skip = burn_in * N
    total = skip + n * thin
    sites = rng.integers(0, N, total).astype(np.int64)
    uniforms = rng.random(total)
    out, accepted = _rbm_chain(
        bits,
        np.ascontiguousarray(params.b),
        np.ascontiguousarray(params.m),
        np.ascontiguousarray(params.W),
        sites, uniforms, thin, skip,
    )
    rate = accepted / total
    logger.debug("metropolis chain N=%s n=%s acceptance=%.4f", N, n, rate)
    return SampleBatch(out, N, seed=seed, acceptance_rate=rate)


def quantum_transition_matrix(params: RbmParams) -> np.ndarray:
    """Single-site-flip Metropolis kernel P[x, y] with uniform site choice."""
    p = build_statevector(params).probabilities()
    N = params.N
    dim = p.size
    P = np.zeros((dim, dim))
    rows = np.arange(dim)
    with np.errstate(divide="ignore", invalid="ignore"):
        for k in range(N):
            partner = rows ^ (1 << k)
            ratio = np.where(p > 0, p[partner] / p, 1.0)
            P[rows, partner] += np.minimum(1.0, ratio) / N
    P[rows, rows] = 1.0 - P.sum(axis=1)
    return P


# ---------- estimators ----------
def _chunked_stderr(c: np.ndarray, e: np.ndarray):
    """Standard errors of the per-sample A and f contributions (i.i.d. samples)."""
    n, k = c.shape
    s1 = np.zeros((k, k))
    s2 = np.zeros((k, k))
    g1 = np.zeros(k, dtype=np.complex128)
    g2_re = np.zeros(k)
    g2_im = np.zeros(k)
    for start in range(0, n, _MOMENT_CHUNK):
        cc = c[start:start + _MOMENT_CHUNK]
        y = np.einsum("kn,km->knm", cc.conj(), cc).real
        s1 += y.sum(axis=0)
        s2 += (y ** 2).sum(axis=0)
        g = cc.conj() * e[start:start + _MOMENT_CHUNK, None]
        g1 += g.sum(axis=0)
        g2_re += (g.real ** 2).sum(axis=0)
        g2_im += (g.imag ** 2).sum(axis=0)
    denom = max(n - 1, 1)
    var_a = np.maximum(s2 - s1 ** 2 / n, 0.0) / denom
    var_re = np.maximum(g2_re - g1.real ** 2 / n, 0.0) / denom
    var_im = np.maximum(g2_im - g1.imag ** 2 / n, 0.0) / denom
    return np.sqrt(var_a / n), np.sqrt(var_re / n) + 1j * np.sqrt(var_im / n)


def estimate_system_mc(
    params: RbmParams, H: SparseHamiltonian, batch: SampleBatch, with_stderr: bool = False
) -> TvmcLinearSystem:
    """
    Â_nm = mean[Re(O_n* O_m)] − Re(mean O_n) Re(mean O_m)
    f̂_m  = mean[O_m* E_loc] − Re(mean O_m) mean[E_loc]
    with sample weights when the batch carries them.
    """
    if batch.N != params.N or H.N != params.N:
        raise ContractViolation("batch, ansatz and Hamiltonian must share N")
    idx = batch.indices
    O = log_derivative_matrix(params, idx)
    e_loc = local_values(H, idx, lambda i: log_amplitudes(params, i))
    w = batch.probability_weights()
    energy = complex(w @ e_loc)
    system = assemble_system(O, w, w * e_loc, energy)
    A_err = f_err = None
    if with_stderr and batch.weights is None:
        A_err, f_err = _chunked_stderr(O - system.mean_O.real, e_loc)
    return TvmcLinearSystem(
        A=system.A, f=system.f, energy=energy, mean_O=system.mean_O,
        A_stderr=A_err, f_stderr=f_err, n_samples=batch.n_exp,
    )


def estimate_observable_mc(params: RbmParams, O: SparseHamiltonian, batch: SampleBatch) -> Tuple[float, float]:
    """Mean and standard error of the local estimator O_loc(z)."""
    values = local_values(O, batch.indices, lambda i: log_amplitudes(params, i)).real
    w = batch.probability_weights()
    mean = float(w @ values)
    if batch.weights is not None or batch.n_exp < 2:
        return mean, 0.0
    return mean, float(values.std(ddof=1) / np.sqrt(batch.n_exp))


def mc_system_builder(n_exp: int, seed: int, sampler: str = "direct", burn_in: int = 100) -> Callable:
    """
    System builder for TvmcIntegrator drawing a fresh batch every call.
    Call k uses seed [seed, k] so a run is reproducible.
    """
    counter = {"k": 0}

    def build(params: RbmParams, H: SparseHamiltonian) -> TvmcLinearSystem:
        call_seed = int(np.random.SeedSequence([seed, counter["k"]]).generate_state(1)[0])
        counter["k"] += 1
        if sampler == "metropolis":
            batch = metropolis_quantum(params, n_exp, burn_in, call_seed)
        else:
            batch = sample_exact(params, n_exp, call_seed)
        return estimate_system_mc(params, H, batch)

    return build


# ---------- classical TAFI ----------
@njit(cache=True)
def _tafi_sweeps(z, neighbors, sites, uniforms, beta, n_sweeps, obs_a, obs_b):
    N = z.size
    series = np.empty(n_sweeps, dtype=np.float64)
    t = 0
    for sweep in range(n_sweeps):
        for _ in range(N):
            i = sites[t]
            local = 0
            for q in range(neighbors.shape[1]):
                nb = neighbors[i, q]
                if nb >= 0:
                    local += z[nb]
            delta = -2.0 * z[i] * local
            if delta <= 0.0 or uniforms[t] < math.exp(-beta * delta):
                z[i] = -z[i]
            t += 1
        series[sweep] = z[obs_a] * z[obs_b]
    return series


def metropolis_classical_tafi(
    L: int, temperature: float = DEFAULT_TAFI_TEMPERATURE, n_sweeps: int = 100000, seed: int = 0
) -> np.ndarray:
    """
    Single-spin-flip Metropolis on the classical TAFI (L × L torus) at
    temperature T; zero-energy moves are always accepted. Returns
    O = z(0,0)·z(L/2,L/2) after every sweep of N proposals.
    """
    if L < 4 or L % 2:
        raise ContractViolation(f"L must be even and at least 4, got {L}")
    if temperature <= 0:
        raise ContractViolation(f"temperature must be positive, got {temperature}")
    lattice = LatticeSpec.triangular(L, L)
    neighbors = lattice.neighbor_table()
    N = lattice.sites
    rng = np.random.default_rng(seed)
    z = (1 - 2 * rng.integers(0, 2, N)).astype(np.int64)
    obs_a, obs_b = lattice.site(0, 0), lattice.site(L // 2, L // 2)
    beta = 1.0 / temperature
    blocks = []
    remaining = n_sweeps
    while remaining > 0:
        block = min(remaining, _TAFI_BLOCK_SWEEPS)
        sites = rng.integers(0, N, block * N).astype(np.int64)
        uniforms = rng.random(block * N)
        blocks.append(_tafi_sweeps(z, neighbors, sites, uniforms, beta, block, obs_a, obs_b))
        remaining -= block
    return np.concatenate(blocks)


def tafi_transition_matrix(lattice: LatticeSpec, temperature: float) -> Tuple[np.ndarray, np.ndarray]:
    """Metropolis kernel over all 2^N classical configurations and its Boltzmann weights."""
    N = lattice.sites
    dim = 1 << N
    z = spins_from_indices(np.arange(dim), N)
    bonds = np.array(lattice.bonds())
    energies = (z[:, bonds[:, 0]] * z[:, bonds[:, 1]]).sum(axis=1)
    P = np.zeros((dim, dim))
    rows = np.arange(dim)
    for k in range(N):
        partner = rows ^ (1 << k)
        delta = energies[partner] - energies
        P[rows, partner] += np.minimum(1.0, np.exp(-delta / temperature)) / N
    P[rows, rows] = 1.0 - P.sum(axis=1)
    boltzmann = np.exp(-(energies - energies.min()) / temperature)
    return P, boltzmann / boltzmann.sum()


# ---------- autocorrelation ----------
def autocorrelation(series: Sequence[float], max_lag: int) -> AutocorrSeries:
    """
    C(τ)/C(0) with C(τ) = mean[(O_t − Ō)(O_{t+τ} − Ō)] and
    τ_int = 1 + 2 Σ_{τ≥1} C(τ) truncated at the first negative C.
    """
    x = np.asarray(series, dtype=np.float64)
    if max_lag < 1:
        raise ContractViolation(f"max_lag must be positive, got {max_lag}")
    if x.size < 10 * max_lag:
        raise ContractViolation(
            f"series of length {x.size} is too short for max_lag={max_lag} (need {10 * max_lag})"
        )
    d = x - x.mean()
    c0 = float(np.dot(d, d) / x.size)
    if c0 == 0.0:
        raise ZeroVarianceError("autocorrelation of a constant series: C(0) = 0, cannot normalize")
    values = np.empty(max_lag + 1)
    values[0] = 1.0
    for tau in range(1, max_lag + 1):
        values[tau] = np.dot(d[:-tau], d[tau:]) / (x.size - tau) / c0
    tau_int = 1.0
    for c in values[1:]:
        if c < 0:
            break
        tau_int += 2.0 * c
    return AutocorrSeries(np.arange(max_lag + 1), values, tau_int)


def _autocorr_task(task) -> Tuple[int, int, np.ndarray, AutocorrSeries]:
    L, temperature, n_sweeps, seed, max_lag = task
    series = metropolis_classical_tafi(L, temperature, n_sweeps, seed)
    return L, seed, series, autocorrelation(series, max_lag)


def run_autocorr_study(
    L_list: Sequence[int],
    temperature: float,
    n_sweeps: int,
    seeds: Sequence[int],
    max_lag: Optional[int] = None,
    map_fn: Callable = map,
) -> Dict[int, List[Tuple[int, np.ndarray, AutocorrSeries]]]:
    """Chains for every (L, seed); results keyed by L in seed order."""
    max_lag = max_lag or max(1, min(1000, n_sweeps // 10))
    tasks = [(L, temperature, n_sweeps, s, max_lag) for L in L_list for s in seeds]
    results: Dict[int, List] = {L: [] for L in L_list}
    for L, seed, series, acf in map_fn(_autocorr_task, tasks):
        results[L].append((seed, series, acf))
    for L in L_list:
        med = float(np.median([acf.tau_int for _, _, acf in results[L]]))
        logger.info("TAFI L=%s T=%s median tau_int=%.3f", L, temperature, med)
    return results
