"""
Time-dependent variational Monte Carlo for the RBM ansatz.

Builds the covariance matrix A and force vector f

    A_nm = Re⟨O_n* O_m⟩ − Re⟨O_n⟩ Re⟨O_m⟩
    f_m  = ⟨O_m* H⟩ − Re⟨O_m⟩ ⟨H⟩

and steps the parameter vector with explicit Euler updates:
real time θ += δt · A⁻¹ Im f, imaginary time θ += s · δτ · A⁻¹ Re f with the
sign s chosen so the energy decreases.
"""
import logging
import os
from collections import Counter
from dataclasses import dataclass, field, replace
from typing import Callable, Dict, Iterator, List, Mapping, Optional, Sequence

import numpy as np
import scipy.linalg
from tqdm import tqdm

from dynamics.services.errors import ContractViolation, GuardViolation, SolverError
from dynamics.services.lattice_models import build_model
from dynamics.services.rbm_ansatz import RbmParams, all_configs, build_statevector, log_derivative_matrix, n_var
from dynamics.services.spinstate import SparseHamiltonian, apply_operator, expectation

logger = logging.getLogger(__name__)

EXACT_MAX_SITES = int(os.getenv("URBM_DYN_EXACT_MAX_SITES", "16"))
REAL_TIME = "real_time"
IMAGINARY_TIME = "imaginary_time"
DESCENT_CHECK_AFTER = 50
DESCENT_TOLERANCE = 1e-9


@dataclass(frozen=True)
class TvmcLinearSystem:
    A: np.ndarray
    f: np.ndarray
    energy: complex = 0j
    mean_O: Optional[np.ndarray] = None
    A_stderr: Optional[np.ndarray] = None
    f_stderr: Optional[np.ndarray] = None
    n_samples: Optional[int] = None

    @property
    def n_var(self) -> int:
        return self.f.size

    def eigenvalues(self) -> np.ndarray:
        return np.linalg.eigvalsh(self.A)

    def condition_number(self) -> float:
        w = self.eigenvalues()
        return float(w[-1] / w[0]) if w[0] > 0 else float("inf")


@dataclass(frozen=True)
class IntegratorConfig:
    dt: float
    mode: str = REAL_TIME
    ridge: float = 1e-6
    svd_cutoff: float = 1e-8
    t_max: float = 1.0
    record_every: int = 20
    global_phase: bool = True
    ite_sign: Optional[int] = None

    def __post_init__(self):
        if not self.dt > 0:
            raise ContractViolation(f"dt must be positive, got {self.dt}")
        if self.ridge < 0 or self.svd_cutoff < 0:
            raise ContractViolation("regularization constants must be non-negative")
        if self.mode not in (REAL_TIME, IMAGINARY_TIME):
            raise ContractViolation(f"unknown integration mode {self.mode!r}")
        if self.ite_sign not in (None, 1, -1):
            raise ContractViolation(f"ite_sign must be +1 or -1, got {self.ite_sign}")
        if self.record_every < 1:
            raise ContractViolation("record_every must be at least 1")

    @property
    def steps(self) -> int:
        return int(round(self.t_max / self.dt))


@dataclass(frozen=True)
class NoiseConfig:
    delta: float
    seed: int = 0

    def __post_init__(self):
        if self.delta < 0:
            raise ContractViolation(f"noise delta must be non-negative, got {self.delta}")


@dataclass(frozen=True)
class SolveResult:
    x: np.ndarray
    path: str
    min_eigenvalue_estimate: float


@dataclass(frozen=True)
class StepReport:
    step: int
    t: float
    energy_re: float
    energy_im: float
    force_norm: float
    solver_path: str
    min_eigenvalue_estimate: float

    FIELDS = ("step", "t", "energy_re", "energy_im", "force_norm", "solver_path", "min_eigenvalue_estimate")

    def row(self) -> list:
        return [getattr(self, f) for f in self.FIELDS]


# ---------- assembly ----------
def assemble_system(O: np.ndarray, weights: np.ndarray, h_weighted: np.ndarray, energy: complex) -> TvmcLinearSystem:
    """
    Weighted Gram products of the derivative matrix O (configs × n_var).
    `h_weighted[k]` carries p(z_k)·E_loc(z_k); weights are p(z_k).
    """
    mean_O = weights @ O
    gram = (O.conj().T * weights) @ O
    A = gram.real - np.outer(mean_O.real, mean_O.real)
    A = 0.5 * (A + A.T)
    f = O.conj().T @ h_weighted - mean_O.real * energy
    return TvmcLinearSystem(A=A, f=f, energy=complex(energy), mean_O=mean_O)


def build_system_exact(params: RbmParams, H: SparseHamiltonian) -> TvmcLinearSystem:
    """A and f as exact sums over P(z) = |⟨z|Ψ⟩|²."""
    if params.N > EXACT_MAX_SITES:
        raise GuardViolation(f"N={params.N} exceeds the exact-enumeration guard of {EXACT_MAX_SITES}")
    if H.N != params.N:
        raise ContractViolation(f"Hamiltonian has {H.N} sites, ansatz has {params.N}")
    state = build_statevector(params)
    psi = state.amplitudes
    h_psi = apply_operator(H, state).amplitudes
    O = log_derivative_matrix(params, all_configs(params.N))
    weights = np.abs(psi) ** 2
    h_weighted = np.conj(psi) * h_psi  # p(z)·E_loc(z) without dividing by ψ(z)
    energy = complex(np.sum(h_weighted))
    return assemble_system(O, weights, h_weighted, energy)


def augment_global_phase(system: TvmcLinearSystem) -> TvmcLinearSystem:
    """Append a free global-phase parameter with O_φ = i."""
    if system.mean_O is None:
        raise ContractViolation("global-phase augmentation needs ⟨O⟩")
    n = system.n_var
    A = np.empty((n + 1, n + 1))
    A[:n, :n] = system.A
    A[n, :n] = A[:n, n] = system.mean_O.imag
    A[n, n] = 1.0
    f = np.append(system.f, -1j * system.energy)
    return replace(system, A=A, f=f, mean_O=np.append(system.mean_O, 1j))


# ---------- solving ----------
def solve_regularized(
    system: TvmcLinearSystem, rhs: np.ndarray, ridge: float = 1e-6, svd_cutoff: float = 1e-8
) -> SolveResult:
    """
    Solve (A + εI) x = rhs by Cholesky; if the factorization fails fall back
    to an eigendecomposition pseudo-inverse dropping eigenvalues below
    svd_cutoff · λ_max.
    """
    A = np.asarray(system.A, dtype=np.float64)
    rhs = np.asarray(rhs, dtype=np.float64)
    if rhs.shape != (A.shape[0],):
        raise ContractViolation(f"rhs has shape {rhs.shape}, expected ({A.shape[0]},)")
    if not (np.all(np.isfinite(A)) and np.all(np.isfinite(rhs))):
        raise SolverError("non-finite entries in the linear system")
    A_reg = A + ridge * np.eye(A.shape[0])
    try:
        factor = scipy.linalg.cho_factor(A_reg, lower=True, check_finite=False)
        x = scipy.linalg.cho_solve(factor, rhs, check_finite=False)
        if np.all(np.isfinite(x)):
            min_diag = float(np.min(np.abs(np.diag(factor[0])))) if A.size else 0.0
            return SolveResult(x, "cholesky", min_diag ** 2 - ridge)
    except np.linalg.LinAlgError:
        logger.debug("Cholesky failed; using eigendecomposition pseudo-inverse")
    try:
        w, V = np.linalg.eigh(A_reg)
    except np.linalg.LinAlgError as e:
        raise SolverError(f"eigendecomposition failed: {e}") from e
    lam_max = w[-1] if w.size else 0.0
    keep = w > svd_cutoff * lam_max if lam_max > 0 else np.zeros_like(w, dtype=bool)
    coeffs = np.zeros_like(w)
    coeffs[keep] = (V[:, keep].T @ rhs) / w[keep]
    x = V @ coeffs
    if not np.all(np.isfinite(x)):
        raise SolverError("pseudo-inverse produced non-finite values")
    return SolveResult(x, "eigh_pinv", float(w[0] - ridge) if w.size else 0.0)


def inject_noise(system: TvmcLinearSystem, noise: NoiseConfig, rng: np.random.Generator) -> TvmcLinearSystem:
    """
    Add N(0, δ²) to every upper-triangle element of A (mirrored) and
    independently to Re and Im of every f element.
    """
    if noise.delta == 0.0:
        return system
    n = system.n_var
    rows, cols = np.triu_indices(n)
    upper = np.zeros((n, n))
    upper[rows, cols] = rng.normal(0.0, noise.delta, rows.size)
    sym = upper + np.triu(upper, 1).T
    f_noise = rng.normal(0.0, noise.delta, n) + 1j * rng.normal(0.0, noise.delta, n)
    return replace(system, A=system.A + sym, f=system.f + f_noise)


# ---------- stepping ----------
def _direction(system: TvmcLinearSystem, cfg: IntegratorConfig, sign: int) -> SolveResult:
    if cfg.global_phase:
        system = augment_global_phase(system)
    rhs = system.f.imag if cfg.mode == REAL_TIME else system.f.real
    res = solve_regularized(system, rhs, cfg.ridge, cfg.svd_cutoff)
    x = res.x[:-1] if cfg.global_phase else res.x
    if cfg.mode == IMAGINARY_TIME:
        x = sign * x
    return replace(res, x=x)


def evolve_step(
    params: RbmParams,
    H: SparseHamiltonian,
    cfg: IntegratorConfig,
    *,
    step: int = 0,
    sign: int = -1,
    noise: Optional[NoiseConfig] = None,
    rng: Optional[np.random.Generator] = None,
    system_builder: Callable[[RbmParams, SparseHamiltonian], TvmcLinearSystem] = build_system_exact,
):
    """One Euler step. Returns (new params, StepReport for the pre-step state)."""
    try:
        system = system_builder(params, H)
        if noise is not None and noise.delta > 0:
            system = inject_noise(system, noise, rng)
        res = _direction(system, cfg, sign)
    except SolverError as exc:
        raise SolverError(str(exc), step=step) from exc
    new_params = params.shifted(cfg.dt * res.x)
    report = StepReport(
        step=step,
        t=step * cfg.dt,
        energy_re=system.energy.real,
        energy_im=system.energy.imag,
        force_norm=float(np.linalg.norm(system.f)),
        solver_path=res.path,
        min_eigenvalue_estimate=res.min_eigenvalue_estimate,
    )
    return new_params, report


def step_real(params: RbmParams, H: SparseHamiltonian, cfg: IntegratorConfig, **kwargs) -> RbmParams:
    if cfg.mode != REAL_TIME:
        raise ContractViolation("step_real needs mode=real_time")
    return evolve_step(params, H, cfg, **kwargs)[0]


def step_imag(params: RbmParams, H: SparseHamiltonian, cfg: IntegratorConfig, sign: Optional[int] = None, **kwargs) -> RbmParams:
    if cfg.mode != IMAGINARY_TIME:
        raise ContractViolation("step_imag needs mode=imaginary_time")
    if sign is None:
        sign = cfg.ite_sign or resolve_descent_sign(params, H, cfg)
    return evolve_step(params, H, cfg, sign=sign, **kwargs)[0]


def variational_energy(params: RbmParams, H: SparseHamiltonian) -> float:
    return expectation(build_statevector(params), H).real


def resolve_descent_sign(params: RbmParams, H: SparseHamiltonian, cfg: IntegratorConfig) -> int:
    """Probe one imaginary-time step with each sign and keep the one that lowers ⟨H⟩."""
    probe = replace(cfg, mode=IMAGINARY_TIME)
    res = _direction(build_system_exact(params, H), probe, 1)
    if not np.any(res.x):
        return -1
    e_plus = variational_energy(params.shifted(cfg.dt * res.x), H)
    e_minus = variational_energy(params.shifted(-cfg.dt * res.x), H)
    return 1 if e_plus < e_minus else -1


# ---------- integrator ----------
@dataclass
class IntegrationResult:
    params: RbmParams
    reports: List[StepReport] = field(default_factory=list)
    times: List[float] = field(default_factory=list)
    series: Dict[str, List[float]] = field(default_factory=dict)
    solver_paths: Dict[str, int] = field(default_factory=dict)
    descent_sign: Optional[int] = None
    descent_violations: int = 0

    @property
    def energies(self) -> np.ndarray:
        return np.array([r.energy_re for r in self.reports])


class TvmcIntegrator:
    """
    Single-threaded state machine stepping one parameter set through
    `cfg.steps` Euler updates. Observables are evaluated on the exact
    statevector every `cfg.record_every` steps.
    """

    def __init__(
        self,
        params: RbmParams,
        H: SparseHamiltonian,
        cfg: IntegratorConfig,
        noise: Optional[NoiseConfig] = None,
        observables: Optional[Mapping[str, SparseHamiltonian]] = None,
        system_builder: Callable[[RbmParams, SparseHamiltonian], TvmcLinearSystem] = build_system_exact,
    ):
        self.params = params
        self.H = H
        self.cfg = cfg
        self.noise = noise
        self.observables = dict(observables or {})
        self.system_builder = system_builder
        self.rng = np.random.default_rng(noise.seed) if noise is not None else None
        self.sign = -1
        if cfg.mode == IMAGINARY_TIME:
            self.sign = cfg.ite_sign or resolve_descent_sign(params, H, cfg)
            logger.info("imaginary-time update sign resolved to %+d", self.sign)
        self.result = IntegrationResult(
            params=params,
            series={name: [] for name in self.observables},
            descent_sign=self.sign if cfg.mode == IMAGINARY_TIME else None,
        )
        self._counts: Counter = Counter()

    def _record(self, step: int) -> None:
        self.result.times.append(step * self.cfg.dt)
        if not self.observables:
            return
        state = build_statevector(self.params)
        for name, O in self.observables.items():
            self.result.series[name].append(expectation(state, O).real)

    def iter_steps(self) -> Iterator[StepReport]:
        cfg = self.cfg
        steps = cfg.steps
        self._record(0)
        previous = None
        for step in range(steps):
            self.params, report = evolve_step(
                self.params, self.H, cfg,
                step=step, sign=self.sign, noise=self.noise, rng=self.rng,
                system_builder=self.system_builder,
            )
            self._counts[report.solver_path] += 1
            if (
                cfg.mode == IMAGINARY_TIME
                and previous is not None
                and step > DESCENT_CHECK_AFTER
                and report.energy_re > previous + DESCENT_TOLERANCE
            ):
                self.result.descent_violations += 1
                logger.warning(
                    "energy increased at step %s: %.12g -> %.12g", step, previous, report.energy_re
                )
            previous = report.energy_re
            self.result.reports.append(report)
            if (step + 1) % cfg.record_every == 0 or step + 1 == steps:
                self._record(step + 1)
            yield report

    @property
    def solver_paths(self) -> Dict[str, int]:
        return dict(self._counts)

    def run(self, show_progress: bool = False, desc: str = "t-VMC") -> IntegrationResult:
        iterator = self.iter_steps()
        if show_progress:
            iterator = tqdm(iterator, total=self.cfg.steps, desc=desc)
        for _ in iterator:
            pass
        self.result.params = self.params
        self.result.solver_paths = self.solver_paths
        return self.result


# ---------- gradient scan ----------
def _force_and_update_norms(system: TvmcLinearSystem, ridge: float, svd_cutoff: float):
    x_re = solve_regularized(system, system.f.real, ridge, svd_cutoff).x
    x_im = solve_regularized(system, system.f.imag, ridge, svd_cutoff).x
    n = system.n_var
    return float(np.linalg.norm(system.f)) / n, float(np.linalg.norm(x_re + 1j * x_im)) / n


def _gradient_sample(task) -> tuple:
    model, N, M, k, seed, model_params, variance = task
    rng = np.random.default_rng([seed, N, k])
    params = RbmParams.random(N, M, rng, variance=variance)
    H = build_model(model, N=N, **model_params)
    return _force_and_update_norms(build_system_exact(params, H), 1e-6, 1e-8)


@dataclass
class GradientRow:
    N: int
    n_var: int
    mean_f: float
    min_f: float
    mean_grad: float
    min_grad: float

    FIELDS = ("N", "n_var", "mean_f", "min_f", "mean_grad", "min_grad")

    def row(self) -> list:
        return [getattr(self, f) for f in self.FIELDS]


def gradient_scan(
    model: str,
    N_list: Sequence[int],
    M: int,
    n_init: int,
    seed: int,
    model_params: Optional[Mapping] = None,
    variance: float = 0.01,
    map_fn: Callable = map,
    show_progress: bool = False,
):
    """
    For each N draw n_init Gaussian parameter sets (rng seeded by
    [seed, N, k]) and report mean/min of ‖f‖/N_var and ‖A⁻¹f‖/N_var.
    Returns (rows, fitted slope of log(mean ‖f‖/N_var) vs N).
    """
    model_params = dict(model_params or {})
    for N in N_list:
        if N > EXACT_MAX_SITES:
            raise GuardViolation(f"N={N} exceeds the exact-enumeration guard of {EXACT_MAX_SITES}")
    tasks = [(model, N, M, k, seed, model_params, variance) for N in N_list for k in range(n_init)]
    results = map_fn(_gradient_sample, tasks)
    if show_progress:
        results = tqdm(results, total=len(tasks), desc="gradient scan")
    results = list(results)

    rows = []
    for i, N in enumerate(N_list):
        chunk = np.array(results[i * n_init:(i + 1) * n_init])
        rows.append(GradientRow(
            N=N, n_var=n_var(N, M),
            mean_f=float(chunk[:, 0].mean()), min_f=float(chunk[:, 0].min()),
            mean_grad=float(chunk[:, 1].mean()), min_grad=float(chunk[:, 1].min()),
        ))
    slope = float("nan")
    if len(rows) >= 2:
        slope = float(np.polyfit([r.N for r in rows], np.log([r.mean_f for r in rows]), 1)[0])
    logger.info("gradient scan %s: slope of log mean |f|/N_var = %.4f", model, slope)
    return rows, slope
