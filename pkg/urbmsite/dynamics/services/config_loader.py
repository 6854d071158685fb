import json
import logging
from dataclasses import dataclass
from typing import Any, Dict, Mapping, Optional

from dynamics.helper import flatten_dotted
from dynamics.validators import CONFIG_FIELDS, ExperimentConfigForm

logger = logging.getLogger(__name__)


class ExperimentConfigError(Exception):
    """Raised when an experiment config fails validation. `field` names the key."""

    def __init__(self, field: str, message: str):
        self.field = field
        super().__init__(f"{field}: {message}")


# Settings shared by every experiment.
COMMON_DEFAULTS: Dict[str, Any] = {
    "seed": 0,
    "model.boundary": "periodic",
    "model.h_i": 0.5,
    "model.h_f": 1.0,
    "model.Jz_i": 1.0,
    "model.Jz_f": 0.5,
    "model.hz": 1.0,
    "model.gamma": 0.05,
    "ansatz.init_variance": 0.01,
    "integrator.dtau": 0.01,
    "integrator.steps": 2500,
    "integrator.t_max": 2.0,
    "integrator.record_every": 20,
    "integrator.ridge": 1e-6,
    "integrator.svd_cutoff": 1e-8,
    "integrator.global_phase": True,
    "sampling.mode": "exact",
    "sampling.n_exp": 10000,
    "sampling.sampler": "direct",
    "sampling.burn_in": 100,
    "open.n_traj": 2000,
    "open.exact_trajectories": True,
    "open.init_scale": 1e-3,
    "open.jump_tau": 20.0,
    "open.jump_dtau": 0.01,
    "open.check_jump_fidelity": False,
    "gradient.N_list": [6, 8, 10, 12],
    "gradient.n_init": 100,
    "noise.deltas": [1e-4, 1e-3, 1e-2],
    "autocorr.L_list": [6, 12],
    "autocorr.temperature": 0.3,
    "autocorr.sweeps": 100000,
    "autocorr.n_seeds": 5,
    "circuit.draws": 50,
    "circuit.max_N": 5,
    "circuit.max_M": 4,
}

# Per-experiment overrides of COMMON_DEFAULTS.
EXPERIMENT_DEFAULTS: Dict[str, Dict[str, Any]] = {
    "ite": {"model.name": "tfi", "model.N": 6, "ansatz.alpha": 2},
    "quench": {"model.name": "tfi", "model.N": 8, "ansatz.alpha": 4},
    "open": {
        "model.name": "tfi",
        "model.N": 6,
        "model.boundary": "open",
        "model.h_i": 1.0,
        "ansatz.alpha": 6,
    },
    "gradient_scan": {"model.name": "tfi", "model.h_i": 1.0, "ansatz.M": 6},
    "noise_scan": {"model.name": "tfi", "model.N": 6, "ansatz.alpha": 2},
    "autocorr": {},
    "circuit_check": {},
}

# Real-time step per model.
MODEL_DT = {"tfi": 0.0005, "heisenberg": 0.0002, "tafi2d": 0.0005}
TAFI_DEFAULT_L = [4, 3]

# Bare leaf names accepted in place of the dotted key.
_LEAF_ALIASES: Dict[str, str] = {}
for _key in CONFIG_FIELDS:
    _leaf = _key.rsplit(".", 1)[-1]
    if _leaf != _key:
        _LEAF_ALIASES[_leaf] = None if _leaf in _LEAF_ALIASES else _key
_LEAF_ALIASES = {leaf: key for leaf, key in _LEAF_ALIASES.items() if key is not None}
_LEAF_ALIASES["model"] = "model.name"


@dataclass(frozen=True)
class ExperimentConfig:
    """Validated experiment config; `values` holds every dotted key with defaults filled."""

    experiment: str
    values: Mapping[str, Any]

    def __getitem__(self, key: str) -> Any:
        return self.values[key]

    def get(self, key: str, default: Any = None) -> Any:
        return self.values.get(key, default)

    @property
    def seed(self) -> int:
        return int(self.values["seed"])

    @property
    def model(self) -> str:
        return self.values.get("model.name")

    @property
    def N(self) -> Optional[int]:
        return self.values.get("model.N")

    @property
    def M(self) -> Optional[int]:
        M = self.values.get("ansatz.M")
        if M is not None:
            return int(M)
        alpha, N = self.values.get("ansatz.alpha"), self.N
        if alpha is None or N is None:
            return None
        return int(round(alpha * N))

    def model_kwargs(self, phase: str = "i") -> Dict[str, Any]:
        """build_model keyword arguments at the initial ('i') or final ('f') couplings."""
        v = self.values
        return {
            "N": self.N,
            "L": v.get("model.L"),
            "boundary": v["model.boundary"],
            "h": v[f"model.h_{phase}"],
            "Jz": v[f"model.Jz_{phase}"],
            "hz": v["model.hz"],
        }

    def to_dict(self) -> Dict[str, Any]:
        return {"experiment": self.experiment, **{k: self.values[k] for k in sorted(self.values)}}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


class ConfigLoader:
    """
    Turns a JSON config file plus `--set` overrides into an ExperimentConfig.
    Nested objects are flattened to dotted keys, bare leaf names are mapped to
    their dotted key, and unknown keys are rejected.
    """

    @staticmethod
    def load_file(path: str) -> Dict[str, Any]:
        try:
            with open(path, encoding="utf-8") as fh:
                data = json.load(fh)
        except FileNotFoundError:
            raise ExperimentConfigError("config", f"file not found: {path}")
        except json.JSONDecodeError as e:
            raise ExperimentConfigError("config", f"invalid JSON in {path}: {e}")
        if not isinstance(data, dict):
            raise ExperimentConfigError("config", "top level must be a JSON object")
        return data

    @staticmethod
    def normalize_keys(data: Mapping[str, Any]) -> Dict[str, Any]:
        flat = flatten_dotted(data)
        normalized: Dict[str, Any] = {}
        for key, value in flat.items():
            full = key if key in CONFIG_FIELDS else _LEAF_ALIASES.get(key)
            if full is None:
                raise ExperimentConfigError(key, "unknown config key")
            if full in normalized:
                raise ExperimentConfigError(full, f"given twice (as {key!r})")
            normalized[full] = value
        return normalized

    @staticmethod
    def apply_defaults(values: Dict[str, Any]) -> Dict[str, Any]:
        experiment = values["experiment"]
        merged = dict(COMMON_DEFAULTS)
        per_experiment = dict(EXPERIMENT_DEFAULTS[experiment])
        if values.get("ansatz.M") is not None or values.get("ansatz.alpha") is not None:
            per_experiment.pop("ansatz.M", None)
            per_experiment.pop("ansatz.alpha", None)
        merged.update(per_experiment)
        merged.update({k: v for k, v in values.items() if v is not None})

        model = merged.get("model.name")
        if model == "tafi2d":
            L = merged.setdefault("model.L", list(TAFI_DEFAULT_L))
            if values.get("model.N") is not None and values["model.N"] != L[0] * L[1]:
                raise ExperimentConfigError("model.N", f"tafi2d with L={L} has {L[0] * L[1]} sites")
            merged["model.N"] = L[0] * L[1]
        if model is not None and "integrator.dt" not in merged:
            merged["integrator.dt"] = MODEL_DT[model]
        if merged.get("autocorr.max_lag") is None:
            merged["autocorr.max_lag"] = min(1000, merged["autocorr.sweeps"] // 10)
        return merged

    @staticmethod
    def validate(values: Mapping[str, Any]) -> ExperimentConfig:
        form = ExperimentConfigForm(data=dict(values))
        if not form.is_valid():
            logger.debug("config form errors: %s", form.errors.as_json())
            field, errors = next(iter(form.errors.items()))
            raise ExperimentConfigError(field, "; ".join(errors))

        cleaned = {k: v for k, v in form.cleaned_data.items() if v not in (None, "")}
        merged = ConfigLoader.apply_defaults(cleaned)
        config = ExperimentConfig(experiment=merged.pop("experiment"), values=merged)

        if config.experiment == "gradient_scan" and merged.get("ansatz.alpha") is not None:
            raise ExperimentConfigError("ansatz.alpha", "gradient_scan needs a fixed ansatz.M")
        if config.experiment in ("ite", "quench", "open", "noise_scan"):
            M, alpha = merged.get("ansatz.M"), merged.get("ansatz.alpha")
            if M is None and abs(alpha * config.N - round(alpha * config.N)) > 1e-9:
                raise ExperimentConfigError("ansatz.alpha", f"alpha*N = {alpha * config.N} is not an integer")
        return config


def parse_config(
    path: Optional[str] = None,
    overrides: Optional[Mapping[str, Any]] = None,
    experiment: Optional[str] = None,
    seed: Optional[int] = None,
) -> ExperimentConfig:
    """
    Precedence (lowest first): defaults, config file, `--set` overrides,
    explicit command arguments (experiment, --seed).
    """
    values: Dict[str, Any] = {}
    if path:
        values.update(ConfigLoader.normalize_keys(ConfigLoader.load_file(path)))
    if overrides:
        values.update(ConfigLoader.normalize_keys(overrides))
    if experiment is not None:
        values["experiment"] = experiment
    if seed is not None:
        values["seed"] = seed
    if not values.get("experiment"):
        raise ExperimentConfigError("experiment", "no experiment given")
    config = ConfigLoader.validate(values)
    logger.info("config resolved for %s (seed %s)", config.experiment, config.seed)
    return config