"""
Experiment runners behind the urbm_dyn command.

Each runner fills an ExperimentResult in place (so a numerical failure still
leaves the rows produced so far for the writer) and co-computes the matching
exact oracle whenever the system size allows it.
"""
import logging
import platform
import time
from concurrent.futures import ProcessPoolExecutor
from concurrent.futures.process import BrokenProcessPool
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Optional, Tuple

import numba
import numpy as np
import scipy
from django.conf import settings
from django.core.cache import cache
from tqdm import tqdm

import dynamics
from dynamics.services import spinstate
from dynamics.services.config_loader import ExperimentConfig
from dynamics.services.errors import ContractViolation, DynamicsError, GuardViolation
from dynamics.services.lattice_models import build_lindblad_raising, build_model
from dynamics.services.open_dynamics import (
    LINDBLAD_MAX_SITES,
    JumpConfig,
    average_ensemble,
    density_matrix,
    expected_jump_counts,
    lindblad_oracle,
    run_ensemble,
)
from dynamics.services.outputs import ExperimentResult, Table, write_outputs
from dynamics.services.rbm_ansatz import (
    RbmParams,
    build_statevector,
    dense_projection_oracle,
    ensemble_decompose,
    prepare_recycled,
    realW_coupling,
    reconstruct_ensemble,
)
from dynamics.services.run_registry import RunRegistry
from dynamics.services.sampler import mc_system_builder, run_autocorr_study
from dynamics.services.spinstate import (
    SparseHamiltonian,
    StateVector,
    fidelity,
    ground_state,
    magnetization,
    product_observable,
    propagate_exact,
    sigma,
)
from dynamics.services.tvmc import (
    EXACT_MAX_SITES,
    IMAGINARY_TIME,
    REAL_TIME,
    GradientRow,
    IntegratorConfig,
    NoiseConfig,
    StepReport,
    TvmcIntegrator,
    build_system_exact,
    gradient_scan,
    variational_energy,
)

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_NUMERICAL = 1
EXIT_USAGE = 2

GROUND_STATE_CACHE_PREFIX = "ground_state:"
CIRCUIT_PARAM_VARIANCE = 0.25
REALW_SAMPLES = (-1.0, -0.5, 0.0, 0.5, 1.0)


# ---------- shared helpers ----------
@dataclass
class RunContext:
    map_fn: Callable = map
    show_progress: bool = False


@contextmanager
def worker_map(workers: int):
    """builtin map for one worker, otherwise an order-preserving process pool map."""
    if workers <= 1:
        yield map
        return
    with ProcessPoolExecutor(max_workers=workers) as pool:
        yield pool.map


def resolve_workers(workers: Optional[int]) -> int:
    if workers is None:
        workers = getattr(settings, "URBM_DYN_WORKERS", 1)
    workers = int(workers)
    if workers < 1:
        raise ContractViolation(f"workers must be at least 1, got {workers}")
    return workers


def cached_ground_state(H: SparseHamiltonian) -> Tuple[float, StateVector]:
    """ground_state memoized in the Django cache under the Hamiltonian fingerprint."""
    key = GROUND_STATE_CACHE_PREFIX + H.fingerprint()
    hit = cache.get(key)
    if hit is not None:
        energy, amps = hit
        return energy, StateVector(amps, H.N)
    energy, state = ground_state(H)
    cache.set(key, (energy, np.array(state.amplitudes)), timeout=None)
    logger.debug("ground state cached under %s (E0=%.12g)", key, energy)
    return energy, state


def chain_observables(config: ExperimentConfig) -> Dict[str, SparseHamiltonian]:
    N = config.N
    observables = {
        "sx1": sigma("X", 0, N),
        "sxsx": product_observable(N, ("X", 0), ("X", 1)),
    }
    if config.model == "heisenberg":
        observables["mz"] = magnetization(N)
    return observables


def _check_variational_size(config: ExperimentConfig) -> None:
    limit = EXACT_MAX_SITES if config["sampling.mode"] == "exact" else spinstate.MAX_SITES
    if config.N > limit:
        raise GuardViolation(
            f"N={config.N} exceeds the {config['sampling.mode']}-mode guard of {limit}"
        )


def _system_builder(config: ExperimentConfig):
    if config["sampling.mode"] == "mc":
        return mc_system_builder(
            config["sampling.n_exp"], config.seed,
            sampler=config["sampling.sampler"], burn_in=config["sampling.burn_in"],
        )
    return build_system_exact


def _integrator_config(config: ExperimentConfig, mode: str) -> IntegratorConfig:
    if mode == IMAGINARY_TIME:
        dt, t_max, record_every = config["integrator.dtau"], config["integrator.dtau"] * config["integrator.steps"], 1
    else:
        dt, t_max, record_every = config["integrator.dt"], config["integrator.t_max"], config["integrator.record_every"]
    return IntegratorConfig(
        dt=dt,
        mode=mode,
        ridge=config["integrator.ridge"],
        svd_cutoff=config["integrator.svd_cutoff"],
        t_max=t_max,
        record_every=record_every,
        global_phase=config["integrator.global_phase"],
    )


def _initial_params(config: ExperimentConfig, rng: np.random.Generator, variance: Optional[float] = None) -> RbmParams:
    if variance is None:
        variance = config["ansatz.init_variance"]
    return RbmParams.random(config.N, config.M, rng, variance=variance)


def _record_solver_paths(result: ExperimentResult, counts: Dict[str, int]) -> None:
    paths = result.metadata.setdefault("solver_paths", {})
    for path, n in counts.items():
        paths[path] = paths.get(path, 0) + n


def _prepare_ground_params(config: ExperimentConfig, H: SparseHamiltonian, result: ExperimentResult, ctx: RunContext):
    """ITE from a Gaussian draw; returns the integration result."""
    rng = np.random.default_rng(config.seed)
    integrator = TvmcIntegrator(
        _initial_params(config, rng), H, _integrator_config(config, IMAGINARY_TIME),
        system_builder=_system_builder(config),
    )
    ite = integrator.run(show_progress=ctx.show_progress, desc="imaginary time")
    result.metadata["ite_sign"] = ite.descent_sign
    result.metadata["ite_descent_violations"] = ite.descent_violations
    _record_solver_paths(result, ite.solver_paths)
    return ite


# ---------- runners ----------
def run_ite(config: ExperimentConfig, result: ExperimentResult, ctx: RunContext) -> None:
    _check_variational_size(config)
    H = build_model(config.model, **config.model_kwargs("i"))
    exact_energy, _ = cached_ground_state(H)
    table = result.tables.setdefault("ite.csv", Table(["step", "tau", "energy", "exact_energy"]))
    ite = _prepare_ground_params(config, H, result, ctx)
    dtau = config["integrator.dtau"]
    for report in ite.reports:
        table.rows.append([report.step, report.step * dtau, report.energy_re, exact_energy])
    final_energy = variational_energy(ite.params, H)
    table.rows.append([len(ite.reports), len(ite.reports) * dtau, final_energy, exact_energy])
    result.metadata.update({
        "final_energy": final_energy,
        "exact_energy": exact_energy,
        "energy_error": final_energy - exact_energy,
    })


def _series_table(times, urbm: Dict[str, List[float]], exact: Optional[Dict[str, Any]]) -> Table:
    names = list(urbm)
    header = ["t"]
    for name in names:
        header.append(f"{name}_urbm")
        if exact is not None:
            header.append(f"{name}_exact")
    rows = []
    for i, t in enumerate(times):
        row = [t]
        for name in names:
            row.append(urbm[name][i])
            if exact is not None:
                row.append(exact[name][i])
        rows.append(row)
    return Table(header, rows)


def _max_deviation(a, b) -> float:
    return float(np.max(np.abs(np.asarray(a) - np.asarray(b)))) if len(a) else 0.0


def run_quench(config: ExperimentConfig, result: ExperimentResult, ctx: RunContext) -> None:
    """
    Prepare the initial-coupling ground state by ITE, then evolve under the
    final couplings. The oracle starts from the exact initial ground state.
    """
    _check_variational_size(config)
    H_i = build_model(config.model, **config.model_kwargs("i"))
    H_f = build_model(config.model, **config.model_kwargs("f"))
    observables = chain_observables(config)

    ite = _prepare_ground_params(config, H_i, result, ctx)
    e0, psi0 = cached_ground_state(H_i)
    result.metadata["initial_fidelity"] = fidelity(build_statevector(ite.params), psi0)
    result.metadata["initial_exact_energy"] = e0

    cfg = _integrator_config(config, REAL_TIME)
    diagnostics = result.tables.setdefault("diagnostics.csv", Table(list(StepReport.FIELDS)))
    integrator = TvmcIntegrator(ite.params, H_f, cfg, observables=observables, system_builder=_system_builder(config))
    steps = integrator.iter_steps()
    if ctx.show_progress:
        steps = tqdm(steps, total=cfg.steps, desc="real time")
    for report in steps:
        diagnostics.rows.append(report.row())
    _record_solver_paths(result, integrator.solver_paths)

    exact = propagate_exact(
        H_f, psi0, cfg.t_max, cfg.dt, record_every=cfg.record_every,
        observables=observables, keep_states=False,
    )
    urbm = integrator.result.series
    result.tables["series.csv"] = _series_table(integrator.result.times, urbm, exact.series)
    result.metadata["max_deviation"] = {
        name: _max_deviation(urbm[name], exact.series[name]) for name in observables
    }
    result.metadata["oracle_max_norm_drift"] = exact.max_norm_drift


def _ensemble_table(ens) -> Table:
    names = list(ens.mean)
    header = ["t"] + [f"{n}_{s}" for n in names for s in ("mean", "stderr")]
    rows = [
        [t] + [v for n in names for v in (ens.mean[n][i], ens.stderr[n][i])]
        for i, t in enumerate(ens.times)
    ]
    return Table(header, rows)


def _z_scores(ens, oracle) -> Dict[str, float]:
    """Largest |mean − oracle| / stderr per observable."""
    out = {}
    for name, mean in ens.mean.items():
        err = np.asarray(ens.stderr[name])
        dev = np.abs(np.asarray(mean) - oracle.series[name])
        with np.errstate(divide="ignore", invalid="ignore"):
            z = np.where(err > 0, dev / err, np.where(dev > 0, np.inf, 0.0))
        out[name] = float(z.max())
    return out


def run_open(config: ExperimentConfig, result: ExperimentResult, ctx: RunContext) -> None:
    _check_variational_size(config)
    N = config.N
    H = build_model(config.model, **config.model_kwargs("i"))
    lindblad = build_lindblad_raising(N, config["model.gamma"])
    observables = chain_observables(config)
    cfg = _integrator_config(config, REAL_TIME)
    jump = JumpConfig(
        flip_dt=cfg.dt, tau=config["open.jump_tau"], dtau=config["open.jump_dtau"],
        ridge=cfg.ridge, svd_cutoff=cfg.svd_cutoff,
    )
    # zero couplings are stationary for the entangling directions
    scale = config["open.init_scale"]
    params0 = _initial_params(config, np.random.default_rng(config.seed), variance=scale ** 2)
    psi0 = build_statevector(params0)
    result.metadata["initial_plus_fidelity"] = fidelity(psi0, StateVector.plus(N))

    records = run_ensemble(
        params0, H, lindblad, cfg, config["open.n_traj"], seed_base=config.seed,
        observables=observables, jump=jump, check_jump_fidelity=config["open.check_jump_fidelity"],
        map_fn=ctx.map_fn, show_progress=ctx.show_progress,
    )
    lines = result.jsonl.setdefault("trajectories.jsonl", [])
    lines.extend(r.to_json_line() for r in records)
    ens = average_ensemble(records)
    result.tables["ensemble.csv"] = _ensemble_table(ens)
    result.metadata["mean_jumps"] = ens.mean_jumps
    result.metadata["stderr_defined"] = ens.stderr_defined

    ens_exact = None
    if config["open.exact_trajectories"]:
        exact_records = run_ensemble(
            psi0, H, lindblad, cfg, config["open.n_traj"], seed_base=config.seed,
            observables=observables, map_fn=ctx.map_fn, show_progress=ctx.show_progress,
        )
        lines.extend(r.to_json_line() for r in exact_records)
        ens_exact = average_ensemble(exact_records)
        result.tables["ensemble_exact.csv"] = _ensemble_table(ens_exact)
        result.metadata["mean_jumps_exact"] = ens_exact.mean_jumps

    if N > LINDBLAD_MAX_SITES:
        logger.warning("N=%s above the Lindblad guard of %s: oracle skipped", N, LINDBLAD_MAX_SITES)
        return
    oracle = lindblad_oracle(
        density_matrix(psi0), H, lindblad, cfg.t_max, cfg.dt,
        record_every=cfg.record_every, observables=observables, jump_rates=True,
    )
    names = list(observables)
    result.tables["oracle.csv"] = Table(
        ["t"] + names,
        [[t] + [oracle.series[n][i] for n in names] for i, t in enumerate(oracle.times)],
    )
    result.metadata["expected_jumps"] = float(expected_jump_counts(oracle).sum())
    result.metadata["oracle"] = {
        "max_trace_drift": oracle.max_trace_drift,
        "max_hermiticity_error": oracle.max_hermiticity_error,
        "min_eigenvalue": oracle.min_eigenvalue,
    }
    if ens.stderr_defined:
        result.metadata["max_z_score"] = _z_scores(ens, oracle)
        if ens_exact is not None:
            result.metadata["max_z_score_exact"] = _z_scores(ens_exact, oracle)


def run_gradient_scan(config: ExperimentConfig, result: ExperimentResult, ctx: RunContext) -> None:
    if config.model == "tafi2d":
        raise ContractViolation("gradient_scan runs on chain models")
    kwargs = config.model_kwargs("i")
    model_params = {k: kwargs[k] for k in ("boundary", "h", "Jz", "hz")}
    rows, slope = gradient_scan(
        config.model,
        config["gradient.N_list"],
        config.M,
        config["gradient.n_init"],
        config.seed,
        model_params=model_params,
        variance=config["ansatz.init_variance"],
        map_fn=ctx.map_fn,
        show_progress=ctx.show_progress,
    )
    result.tables["gradients.csv"] = Table(list(GradientRow.FIELDS), [r.row() for r in rows])
    grad_slope = float("nan")
    if len(rows) >= 2:
        grad_slope = float(np.polyfit([r.N for r in rows], np.log([r.mean_grad for r in rows]), 1)[0])
    result.metadata["force_slope"] = slope
    result.metadata["update_slope"] = grad_slope


def run_noise_scan(config: ExperimentConfig, result: ExperimentResult, ctx: RunContext) -> None:
    """One real-time quench per noise level δ (δ = 0 included) against the exact curve."""
    _check_variational_size(config)
    H_i = build_model(config.model, **config.model_kwargs("i"))
    H_f = build_model(config.model, **config.model_kwargs("f"))
    N = config.N
    observable = {"sx1": sigma("X", 0, N)}
    ite = _prepare_ground_params(config, H_i, result, ctx)
    _, psi0 = cached_ground_state(H_i)
    cfg = _integrator_config(config, REAL_TIME)
    exact = propagate_exact(
        H_f, psi0, cfg.t_max, cfg.dt, record_every=cfg.record_every,
        observables=observable, keep_states=False,
    )
    deltas = [0.0] + [d for d in config["noise.deltas"] if d > 0]
    columns = {"sx1_exact": exact.series["sx1"]}
    deviations = {}
    for delta in deltas:
        integrator = TvmcIntegrator(
            ite.params, H_f, cfg, noise=NoiseConfig(delta, seed=config.seed),
            observables=observable, system_builder=_system_builder(config),
        )
        run = integrator.run(show_progress=ctx.show_progress, desc=f"delta={delta:g}")
        _record_solver_paths(result, run.solver_paths)
        name = f"sx1_delta_{delta:g}"
        columns[name] = run.series["sx1"]
        deviations[f"{delta:g}"] = _max_deviation(run.series["sx1"], exact.series["sx1"])
    header = ["t"] + list(columns)
    result.tables["noise.csv"] = Table(
        header, [[t] + [columns[c][i] for c in columns] for i, t in enumerate(exact.times)]
    )
    result.metadata["max_deviation"] = deviations


def run_autocorr(config: ExperimentConfig, result: ExperimentResult, ctx: RunContext) -> None:
    seeds = [config.seed + i for i in range(config["autocorr.n_seeds"])]
    study = run_autocorr_study(
        config["autocorr.L_list"],
        config["autocorr.temperature"],
        config["autocorr.sweeps"],
        seeds,
        max_lag=config["autocorr.max_lag"],
        map_fn=ctx.map_fn,
    )
    tau_table = result.tables.setdefault("tau_int.csv", Table(["L", "seed", "tau_int"]))
    medians = {}
    for L, runs in study.items():
        for seed, series, acf in runs:
            result.tables[f"autocorr_L{L}_seed{seed}.csv"] = Table(
                ["lag", "C"], [[int(lag), c] for lag, c in zip(acf.lags, acf.values)]
            )
            result.tables[f"series_L{L}_seed{seed}.csv"] = Table(
                ["sweep", "O"], [[i, v] for i, v in enumerate(series)]
            )
            tau_table.rows.append([L, seed, acf.tau_int])
        medians[str(L)] = float(np.median([acf.tau_int for _, _, acf in runs]))
    result.metadata["median_tau_int"] = medians
    values = [medians[str(L)] for L in config["autocorr.L_list"]]
    result.metadata["tau_int_increasing"] = all(b > a for a, b in zip(values, values[1:]))


def run_circuit_check(config: ExperimentConfig, result: ExperimentResult, ctx: RunContext) -> None:
    """Recycled-circuit, dense-projection and ensemble paths against analytic amplitudes."""
    rng = np.random.default_rng(config.seed)
    table = result.tables.setdefault(
        "circuit.csv",
        Table(["draw", "N", "M", "fidelity", "total_success", "oracle_success", "ensemble_residual"]),
    )
    draws = range(config["circuit.draws"])
    if ctx.show_progress:
        draws = tqdm(draws, desc="circuit draws")
    for d in draws:
        N = int(rng.integers(1, config["circuit.max_N"] + 1))
        M = int(rng.integers(1, config["circuit.max_M"] + 1))
        params = RbmParams.random(N, M, rng, variance=CIRCUIT_PARAM_VARIANCE)
        analytic = build_statevector(params)
        report = prepare_recycled(params)
        _, oracle_success = dense_projection_oracle(params)
        ensemble = reconstruct_ensemble(ensemble_decompose(params))
        residual = float(np.linalg.norm(ensemble - analytic.amplitudes))
        table.rows.append([d, N, M, fidelity(report.state, analytic), report.total_success, oracle_success, residual])

    realw = result.tables.setdefault(
        "realw.csv", Table(["wR", "theta1", "theta2", "kernel_direction_error", "kernel_error", "success_probability"])
    )
    zz = np.array([1.0, -1.0, -1.0, 1.0])
    for wR in REALW_SAMPLES:
        rep = realW_coupling(wR)
        k = np.real(np.diag(rep.kernel))
        target = np.exp(wR * zz)
        err = float(np.linalg.norm(k / np.linalg.norm(k) - target / np.linalg.norm(target)))
        kernel_err = float(np.max(np.abs(rep.kernel - np.diag(np.exp(wR * zz - abs(wR))))))
        realw.rows.append([wR, rep.theta1, rep.theta2, err, kernel_err, rep.success_probability])

    fidelities = [row[3] for row in table.rows]
    residuals = [row[6] for row in table.rows]
    result.metadata.update({
        "min_fidelity": float(min(fidelities)),
        "max_ensemble_residual": float(max(residuals)),
        "max_kernel_direction_error": float(max(row[3] for row in realw.rows)),
        "max_kernel_error": float(max(row[4] for row in realw.rows)),
    })


RUNNERS: Dict[str, Callable[[ExperimentConfig, ExperimentResult, RunContext], None]] = {
    "ite": run_ite,
    "quench": run_quench,
    "open": run_open,
    "gradient_scan": run_gradient_scan,
    "noise_scan": run_noise_scan,
    "autocorr": run_autocorr,
    "circuit_check": run_circuit_check,
}


# ---------- dispatch ----------
@dataclass
class DispatchOutcome:
    exit_code: int
    manifest: List[Dict[str, Any]] = field(default_factory=list)
    metadata: Dict[str, Any] = field(default_factory=dict)
    error: Optional[str] = None


def build_metadata(config: ExperimentConfig, workers: int) -> Dict[str, Any]:
    return {
        "config": config.to_dict(),
        "code_version": dynamics.__version__,
        "versions": {
            "python": platform.python_version(),
            "numpy": np.__version__,
            "scipy": scipy.__version__,
            "numba": numba.__version__,
        },
        "rng": {
            "bit_generator": "PCG64",
            "seed": config.seed,
            "trajectory_seeds": "seed + i",
        },
        "workers": workers,
    }


def dispatch(
    config: ExperimentConfig,
    out_dir: str,
    workers: Optional[int] = None,
    show_progress: bool = False,
) -> DispatchOutcome:
    """
    Run the configured experiment and write its outputs. Size guards and
    contract violations exit with 2, numerical failures with 1; in both cases
    the rows produced so far are written.
    """
    workers = resolve_workers(workers)
    result = ExperimentResult(experiment=config.experiment)
    result.metadata.update(build_metadata(config, workers))
    run = RunRegistry.start_run(config.experiment, config.to_dict(), config.seed, out_dir)
    outcome = DispatchOutcome(exit_code=EXIT_OK)

    start = time.perf_counter()
    try:
        with worker_map(workers) as map_fn:
            RUNNERS[config.experiment](config, result, RunContext(map_fn, show_progress))
    except ContractViolation as e:
        logger.error("%s rejected: %s", config.experiment, e)
        outcome.exit_code, outcome.error = EXIT_USAGE, str(e)
    except DynamicsError as e:
        logger.error("%s failed: %s", config.experiment, e)
        outcome.exit_code, outcome.error = EXIT_NUMERICAL, str(e)
    except (np.linalg.LinAlgError, ArithmeticError, BrokenProcessPool) as e:
        logger.exception("%s failed outside the dynamics services", config.experiment)
        outcome.exit_code, outcome.error = EXIT_NUMERICAL, f"{type(e).__name__}: {e}"
    wall = time.perf_counter() - start

    result.metadata.update({
        "wall_time_s": wall,
        "status": "ok" if outcome.exit_code == EXIT_OK else "failed",
        "error": outcome.error,
    })
    outcome.metadata = result.metadata
    try:
        outcome.manifest = write_outputs(result, out_dir)
    except (OSError, ValueError) as e:
        logger.exception("writing outputs to %s failed", out_dir)
        outcome.exit_code = EXIT_NUMERICAL
        outcome.error = f"output error: {e}"
    RunRegistry.finish_run(run, outcome.exit_code, wall, result.metadata, outcome.manifest)
    return outcome
