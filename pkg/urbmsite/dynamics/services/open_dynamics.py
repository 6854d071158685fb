"""
Open-system dynamics by quantum-jump trajectories.

Between jumps a trajectory follows the effective Hamiltonian
H_eff = H − (i/2) Σ_k L_k† L_k; at each step a jump on channel k happens with
probability p_k = δt ⟨L_k† L_k⟩. The variational engine performs a σ⁺ jump
as a π/2 real-time rotation under σ^x_k followed by imaginary-time
projection under |0⟩⟨0|_k. The exact engine applies L_k to the statevector
directly, and `lindblad_oracle` integrates the master equation for ρ.
"""
import json
import logging
import os
from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.integrate import trapezoid
from tqdm import tqdm

from dynamics.services.errors import (
    ContractViolation,
    DegenerateStateError,
    DynamicsError,
    GuardViolation,
    JumpError,
    TraceDriftError,
)
from dynamics.services.lattice_models import LindbladSpec
from dynamics.services.rbm_ansatz import RbmParams, build_statevector
from dynamics.services.spinstate import (
    PauliTerm,
    SparseHamiltonian,
    StateVector,
    apply_array,
    expectation,
    fidelity,
    pauli_operator,
    rk4_step,
)
from dynamics.services.tvmc import IMAGINARY_TIME, REAL_TIME, IntegratorConfig, evolve_step, resolve_descent_sign

logger = logging.getLogger(__name__)

LINDBLAD_MAX_SITES = int(os.getenv("URBM_DYN_LINDBLAD_MAX_SITES", "8"))
JUMP_PROBABILITY_WARN = 0.1
TRACE_TOLERANCE = 1e-6
JUMP_FIDELITY_MAX_SITES = 6
VARIATIONAL = "variational"
EXACT = "exact"


@dataclass(frozen=True)
class EffectiveHamiltonian:
    hermitian_part: SparseHamiltonian
    decay_part: SparseHamiltonian

    @cached_property
    def total(self) -> SparseHamiltonian:
        return self.hermitian_part + self.decay_part


def effective_hamiltonian(H: SparseHamiltonian, lindblad: LindbladSpec) -> EffectiveHamiltonian:
    decay = lindblad.decay_operator()
    if decay is None:
        return EffectiveHamiltonian(H, SparseHamiltonian.zero(H.N))
    if decay.N != H.N:
        raise ContractViolation(f"Lindblad operators act on {decay.N} sites, H on {H.N}")
    return EffectiveHamiltonian(H, decay * (-0.5j))


def jump_probabilities(
    state: Union[StateVector, RbmParams], lindblad: LindbladSpec, dt: float
) -> np.ndarray:
    """p_k = δt ⟨ψ|L_k† L_k|ψ⟩ for a normalized ψ, one entry per channel."""
    if isinstance(state, RbmParams):
        state = build_statevector(state)
    p = np.array([expectation(state, LL).real for LL in lindblad.jump_products]) * dt
    if np.any(p < 0):
        logger.warning("negative jump probability %.3e clipped to zero", p.min())
        p = np.clip(p, 0.0, None)
    return p


def apply_jump_exact(state: StateVector, L: SparseHamiltonian) -> StateVector:
    out = apply_array(L, state.amplitudes)
    if np.linalg.norm(out) <= 1e-14:
        raise DegenerateStateError("jump operator annihilates the state")
    return StateVector.from_array(out)


@dataclass(frozen=True)
class JumpConfig:
    """Integration settings for a variational σ⁺ jump."""

    flip_dt: float = 0.0005
    tau: float = 20.0
    dtau: float = 0.01
    ridge: float = 1e-6
    svd_cutoff: float = 1e-8
    ite_sign: Optional[int] = None

    def __post_init__(self):
        if not (self.flip_dt > 0 and self.dtau > 0 and self.tau >= 0):
            raise ContractViolation("jump step sizes must be positive")


def _projector_zero(N: int, site: int) -> SparseHamiltonian:
    """|0⟩⟨0|_site = (I + σ^z_site)/2."""
    return SparseHamiltonian(N, [PauliTerm(0.5, {}), PauliTerm(0.5, {site: "Z"})])


def apply_jump_variational(params: RbmParams, site: int, jump: JumpConfig = JumpConfig()) -> RbmParams:
    """
    Variational σ⁺ on `site`: rotate for t = π/2 under σ^x (e^{−iπ/2 σ^x} = −iσ^x),
    then project the site onto |1⟩ by imaginary time under |0⟩⟨0| for τ.
    """
    N = params.N
    if not 0 <= site < N:
        raise ContractViolation(f"jump site {site} out of range for N={N}")
    flip_steps = int(np.ceil((np.pi / 2) / jump.flip_dt))
    flip_cfg = IntegratorConfig(
        dt=(np.pi / 2) / flip_steps, mode=REAL_TIME, t_max=np.pi / 2,
        ridge=jump.ridge, svd_cutoff=jump.svd_cutoff,
    )
    project_cfg = IntegratorConfig(
        dt=jump.dtau, mode=IMAGINARY_TIME, t_max=jump.tau,
        ridge=jump.ridge, svd_cutoff=jump.svd_cutoff, ite_sign=jump.ite_sign,
    )
    X = pauli_operator(N, {site: "X"})
    P0 = _projector_zero(N, site)
    try:
        for step in range(flip_steps):
            params, _ = evolve_step(params, X, flip_cfg, step=step)
        sign = project_cfg.ite_sign or resolve_descent_sign(params, P0, project_cfg)
        for step in range(project_cfg.steps):
            params, _ = evolve_step(params, P0, project_cfg, step=step, sign=sign)
    except DynamicsError as exc:
        raise JumpError(str(exc), context=f"jump on site {site}") from exc
    return params


# ---------- trajectories ----------
@dataclass
class TrajectoryRecord:
    seed: int
    engine: str
    times: List[float] = field(default_factory=list)
    series: Dict[str, List[float]] = field(default_factory=dict)
    jumps: List[Tuple[float, int]] = field(default_factory=list)
    jump_fidelities: List[float] = field(default_factory=list)

    def __post_init__(self):
        jump_times = [t for t, _ in self.jumps]
        if any(b <= a for a, b in zip(jump_times, jump_times[1:])):
            raise ContractViolation("jump times must be strictly increasing")

    @property
    def jump_count(self) -> int:
        return len(self.jumps)

    def to_json_line(self) -> str:
        return json.dumps(
            {
                "seed": self.seed,
                "engine": self.engine,
                "jumps": [[t, k] for t, k in self.jumps],
                "jump_fidelities": self.jump_fidelities,
                "times": self.times,
                "series": self.series,
            },
            sort_keys=True,
        )


def _draw_jump(rng: np.random.Generator, p: np.ndarray) -> Optional[int]:
    """One uniform per step; the channel is picked from the same draw."""
    u = rng.random()
    cumulative = np.cumsum(p)
    if p.size == 0 or u >= cumulative[-1]:
        return None
    return int(np.searchsorted(cumulative, u, side="right"))


class _TrajectoryLoop:
    """Bookkeeping shared by the variational and the exact trajectory engines."""

    def __init__(self, lindblad, cfg, seed, engine, observables):
        self.lindblad = lindblad
        self.cfg = cfg
        self.rng = np.random.default_rng(seed)
        self.observables = dict(observables or {})
        self.record = TrajectoryRecord(seed=seed, engine=engine, series={k: [] for k in self.observables})
        self._warned = False

    def probabilities(self, state: StateVector) -> np.ndarray:
        p = jump_probabilities(state, self.lindblad, self.cfg.dt)
        if not self._warned and p.sum() >= JUMP_PROBABILITY_WARN:
            logger.warning(
                "jump probability per step %.3f >= %.1f; reduce dt (seed %s)",
                p.sum(), JUMP_PROBABILITY_WARN, self.record.seed,
            )
            self._warned = True
        return p

    def observe(self, step: int, state: StateVector) -> None:
        self.record.times.append(step * self.cfg.dt)
        for name, O in self.observables.items():
            self.record.series[name].append(expectation(state, O).real)

    def should_record(self, step: int) -> bool:
        return step % self.cfg.record_every == 0 or step == self.cfg.steps


def run_trajectory(
    params0: RbmParams,
    H: SparseHamiltonian,
    lindblad: LindbladSpec,
    cfg: IntegratorConfig,
    seed: int,
    observables: Optional[Mapping[str, SparseHamiltonian]] = None,
    jump: JumpConfig = JumpConfig(),
    check_jump_fidelity: bool = False,
) -> TrajectoryRecord:
    """
    One variational trajectory. Per step a uniform u is drawn; u below
    Σp_k triggers a jump on the channel it selects, otherwise the parameters
    take one t-VMC step under H_eff.
    """
    if cfg.mode != REAL_TIME:
        raise ContractViolation("trajectories integrate in real time")
    H_eff = effective_hamiltonian(H, lindblad).total
    loop = _TrajectoryLoop(lindblad, cfg, seed, VARIATIONAL, observables)
    check_jump_fidelity = check_jump_fidelity and params0.N <= JUMP_FIDELITY_MAX_SITES
    params = params0
    state = build_statevector(params)
    loop.observe(0, state)
    for step in range(cfg.steps):
        k = _draw_jump(loop.rng, loop.probabilities(state))
        if k is None:
            params, _ = evolve_step(params, H_eff, cfg, step=step)
        else:
            site, L = lindblad.operators[k]
            target = apply_jump_exact(state, L) if check_jump_fidelity else None
            params = apply_jump_variational(params, site, jump)
            loop.record.jumps.append((step * cfg.dt, site))
            logger.debug("seed %s: jump on site %s at t=%.4f", seed, site, step * cfg.dt)
            if target is not None:
                loop.record.jump_fidelities.append(fidelity(build_statevector(params), target))
        state = build_statevector(params)
        if loop.should_record(step + 1):
            loop.observe(step + 1, state)
    return loop.record


def run_trajectory_exact(
    psi0: StateVector,
    H: SparseHamiltonian,
    lindblad: LindbladSpec,
    cfg: IntegratorConfig,
    seed: int,
    observables: Optional[Mapping[str, SparseHamiltonian]] = None,
) -> TrajectoryRecord:
    """Statevector trajectory: RK4 under H_eff with renormalization, same draw order."""
    H_eff = effective_hamiltonian(H, lindblad).total
    loop = _TrajectoryLoop(lindblad, cfg, seed, EXACT, observables)
    y = np.array(psi0.amplitudes)
    state = psi0
    loop.observe(0, state)
    for step in range(cfg.steps):
        k = _draw_jump(loop.rng, loop.probabilities(state))
        if k is None:
            y = rk4_step(lambda v: -1j * apply_array(H_eff, v), y, cfg.dt)
            n = np.linalg.norm(y)
            if n == 0.0 or not np.isfinite(n):
                raise DegenerateStateError("trajectory norm collapsed", step=step)
            y = y / n
        else:
            site, L = lindblad.operators[k]
            y = np.array(apply_jump_exact(StateVector(y, psi0.N), L).amplitudes)
            loop.record.jumps.append((step * cfg.dt, site))
        state = StateVector(y, psi0.N)
        if loop.should_record(step + 1):
            loop.observe(step + 1, state)
    return loop.record


@dataclass
class EnsembleResult:
    times: np.ndarray
    mean: Dict[str, np.ndarray]
    stderr: Dict[str, np.ndarray]
    n_traj: int
    stderr_defined: bool
    mean_jumps: float


def average_ensemble(records: Sequence[TrajectoryRecord]) -> EnsembleResult:
    """Mean and standard error (sample std / √n) of every recorded observable."""
    if not records:
        raise ContractViolation("cannot average an empty ensemble")
    times = np.asarray(records[0].times)
    for r in records[1:]:
        if len(r.times) != len(times) or not np.allclose(r.times, times):
            raise ContractViolation(f"trajectory {r.seed} has a different time grid")
    n = len(records)
    mean, stderr = {}, {}
    for name in records[0].series:
        data = np.array([r.series[name] for r in records])
        mean[name] = data.mean(axis=0)
        if n > 1:
            stderr[name] = data.std(axis=0, ddof=1) / np.sqrt(n)
        else:
            stderr[name] = np.zeros(len(times))
    if n == 1:
        logger.warning("single-trajectory ensemble: standard error is undefined")
    return EnsembleResult(
        times=times,
        mean=mean,
        stderr=stderr,
        n_traj=n,
        stderr_defined=n > 1,
        mean_jumps=float(np.mean([r.jump_count for r in records])),
    )


def _trajectory_task(task) -> TrajectoryRecord:
    engine, initial, H, lindblad, cfg, seed, observables, jump, check = task
    if engine == EXACT:
        return run_trajectory_exact(initial, H, lindblad, cfg, seed, observables)
    return run_trajectory(initial, H, lindblad, cfg, seed, observables, jump, check)


def run_ensemble(
    initial: Union[RbmParams, StateVector],
    H: SparseHamiltonian,
    lindblad: LindbladSpec,
    cfg: IntegratorConfig,
    n_traj: int,
    seed_base: int = 0,
    observables: Optional[Mapping[str, SparseHamiltonian]] = None,
    jump: JumpConfig = JumpConfig(),
    check_jump_fidelity: bool = False,
    map_fn: Callable = map,
    show_progress: bool = False,
) -> List[TrajectoryRecord]:
    """
    Trajectory i uses seed seed_base + i. `map_fn` must preserve order
    (builtin map or Executor.map), so results do not depend on worker count.
    """
    if n_traj < 1:
        raise ContractViolation(f"n_traj must be at least 1, got {n_traj}")
    engine = EXACT if isinstance(initial, StateVector) else VARIATIONAL
    observables = dict(observables or {})
    tasks = [
        (engine, initial, H, lindblad, cfg, seed_base + i, observables, jump, check_jump_fidelity)
        for i in range(n_traj)
    ]
    results = map_fn(_trajectory_task, tasks)
    if show_progress:
        results = tqdm(results, total=n_traj, desc=f"{engine} trajectories")
    return list(results)


# ---------- master equation ----------
@dataclass
class OracleResult:
    times: np.ndarray
    series: Dict[str, np.ndarray]
    states: List[np.ndarray]
    max_trace_drift: float
    max_hermiticity_error: float
    min_eigenvalue: float


def density_matrix(state: StateVector) -> np.ndarray:
    a = state.amplitudes
    return np.outer(a, a.conj())


def _sandwich(L: SparseHamiltonian, rho: np.ndarray) -> np.ndarray:
    """L ρ L† from two sparse applications."""
    return apply_array(L, apply_array(L, rho).conj().T).conj().T


def lindblad_oracle(
    rho0: np.ndarray,
    H: SparseHamiltonian,
    lindblad: LindbladSpec,
    t_max: float,
    dt: float,
    record_every: int = 1,
    observables: Optional[Mapping[str, SparseHamiltonian]] = None,
    keep_states: bool = False,
    jump_rates: bool = False,
) -> OracleResult:
    """
    RK4 integration of dρ/dt = −i(H_eff ρ − ρ H_eff†) + Σ_k L_k ρ L_k†.
    Trace drift above TRACE_TOLERANCE raises TraceDriftError. With
    `jump_rates` the series also hold rate[k] = tr(L_k† L_k ρ).
    """
    N = H.N
    if N > LINDBLAD_MAX_SITES:
        raise GuardViolation(f"N={N} exceeds the Lindblad guard of {LINDBLAD_MAX_SITES}")
    rho = np.array(rho0, dtype=np.complex128)
    if rho.shape != (2 ** N, 2 ** N):
        raise ContractViolation(f"rho0 must be {2 ** N}x{2 ** N}, got {rho.shape}")
    if dt <= 0:
        raise ContractViolation(f"dt must be positive, got {dt}")
    H_eff = effective_hamiltonian(H, lindblad).total
    channels = [L for _, L in lindblad.operators]
    observables = dict(observables or {})
    if jump_rates:
        for k, LL in enumerate(lindblad.jump_products):
            observables[f"rate[{k}]"] = LL

    def rhs(r):
        # ρ H_eff† = (H_eff ρ†)†
        out = -1j * (apply_array(H_eff, r) - apply_array(H_eff, r.conj().T).conj().T)
        for L in channels:
            out += _sandwich(L, r)
        return out

    steps = int(round(t_max / dt))
    record_every = max(1, int(record_every))
    times, states = [], []
    series: Dict[str, List[float]] = {name: [] for name in observables}
    drift_max = herm_max = 0.0
    min_eig = np.inf

    def record(step, r):
        nonlocal herm_max, min_eig
        times.append(step * dt)
        if keep_states:
            states.append(r.copy())
        herm_max = max(herm_max, float(np.abs(r - r.conj().T).max()))
        min_eig = min(min_eig, float(np.linalg.eigvalsh(0.5 * (r + r.conj().T))[0]))
        for name, O in observables.items():
            series[name].append(float(np.trace(apply_array(O, r)).real))

    record(0, rho)
    for step in range(1, steps + 1):
        rho = rk4_step(rhs, rho, dt)
        drift = abs(np.trace(rho).real - 1.0)
        drift_max = max(drift_max, drift)
        if drift > TRACE_TOLERANCE:
            raise TraceDriftError(f"trace drifted by {drift:.3e}", step=step)
        if step % record_every == 0 or step == steps:
            record(step, rho)
    if min_eig < -1e-8:
        logger.warning("density matrix eigenvalue %.3e below zero", min_eig)
    return OracleResult(
        times=np.array(times),
        series={k: np.array(v) for k, v in series.items()},
        states=states,
        max_trace_drift=drift_max,
        max_hermiticity_error=herm_max,
        min_eigenvalue=min_eig,
    )


def expected_jump_counts(result: OracleResult) -> np.ndarray:
    """∫ tr(L_k† L_k ρ) dt per channel; needs an oracle run with jump_rates."""
    keys = sorted((k for k in result.series if k.startswith("rate[")), key=lambda k: int(k[5:-1]))
    if not keys:
        raise ContractViolation("oracle result carries no jump rates")
    return np.array([trapezoid(result.series[k], result.times) for k in keys])
