import json
import logging

from django import forms
from django.core.exceptions import ValidationError

logger = logging.getLogger(__name__)

EXPERIMENTS = ("ite", "quench", "open", "gradient_scan", "noise_scan", "autocorr", "circuit_check")
MODELS = ("tfi", "heisenberg", "tafi2d")


def _choices(values):
    return [(v, v) for v in values]


# --- Shared fields ---
class NumberListField(forms.Field):
    """
    Accepts a JSON list, a comma-separated string ("6,8,10") or a single number.
    Returns a list of ints when `integer` is set, floats otherwise.
    """

    def __init__(self, *, integer: bool = False, min_value=None, **kwargs):
        self.integer = integer
        self.min_value = min_value
        kwargs.setdefault("required", False)
        super().__init__(**kwargs)

    def to_python(self, value):
        if value in (None, "", []):
            return None
        if isinstance(value, str):
            text = value.strip()
            if text.startswith("["):
                try:
                    value = json.loads(text)
                except json.JSONDecodeError:
                    raise ValidationError("must be a JSON list of numbers.")
            else:
                value = [v for v in text.split(",") if v.strip()]
        elif not isinstance(value, (list, tuple)):
            value = [value]
        cast = int if self.integer else float
        out = []
        for item in value:
            try:
                number = float(item)
            except (TypeError, ValueError):
                raise ValidationError(f"{item!r} is not a number.")
            if self.integer and number != int(number):
                raise ValidationError(f"{item!r} is not an integer.")
            out.append(cast(number))
        return out

    def validate(self, value):
        super().validate(value)
        if value and self.min_value is not None and min(value) < self.min_value:
            raise ValidationError(f"entries must be >= {self.min_value}.")


def _positive(**kwargs):
    return forms.FloatField(required=False, **kwargs)


# =========================
# Experiment configuration
# =========================
# dotted key -> form field; a missing value leaves the default to the loader.
CONFIG_FIELDS = {
    "experiment": lambda: forms.ChoiceField(choices=_choices(EXPERIMENTS)),
    "seed": lambda: forms.IntegerField(required=False, min_value=0),
    "model.name": lambda: forms.ChoiceField(choices=_choices(MODELS), required=False),
    "model.N": lambda: forms.IntegerField(required=False, min_value=1),
    "model.L": lambda: NumberListField(integer=True, min_value=2),
    "model.boundary": lambda: forms.ChoiceField(
        choices=_choices(("open", "periodic")), required=False
    ),
    "model.h_i": lambda: forms.FloatField(required=False),
    "model.h_f": lambda: forms.FloatField(required=False),
    "model.Jz_i": lambda: forms.FloatField(required=False),
    "model.Jz_f": lambda: forms.FloatField(required=False),
    "model.hz": lambda: forms.FloatField(required=False),
    "model.gamma": lambda: forms.FloatField(required=False, min_value=0),
    "ansatz.M": lambda: forms.IntegerField(required=False, min_value=1),
    "ansatz.alpha": lambda: forms.FloatField(required=False),
    "ansatz.init_variance": lambda: forms.FloatField(required=False, min_value=0),
    "integrator.dt": lambda: _positive(),
    "integrator.dtau": lambda: _positive(),
    "integrator.steps": lambda: forms.IntegerField(required=False, min_value=1),
    "integrator.t_max": lambda: forms.FloatField(required=False, min_value=0),
    "integrator.record_every": lambda: forms.IntegerField(required=False, min_value=1),
    "integrator.ridge": lambda: forms.FloatField(required=False, min_value=0),
    "integrator.svd_cutoff": lambda: forms.FloatField(required=False, min_value=0),
    "integrator.global_phase": lambda: forms.NullBooleanField(required=False),
    "sampling.mode": lambda: forms.ChoiceField(choices=_choices(("exact", "mc")), required=False),
    "sampling.n_exp": lambda: forms.IntegerField(required=False, min_value=1),
    "sampling.sampler": lambda: forms.ChoiceField(
        choices=_choices(("direct", "metropolis")), required=False
    ),
    "sampling.burn_in": lambda: forms.IntegerField(required=False, min_value=0),
    "open.n_traj": lambda: forms.IntegerField(required=False, min_value=1),
    "open.exact_trajectories": lambda: forms.NullBooleanField(required=False),
    "open.init_scale": lambda: forms.FloatField(required=False, min_value=0),
    "open.jump_tau": lambda: forms.FloatField(required=False, min_value=0),
    "open.jump_dtau": lambda: _positive(),
    "open.check_jump_fidelity": lambda: forms.NullBooleanField(required=False),
    "gradient.N_list": lambda: NumberListField(integer=True, min_value=1),
    "gradient.n_init": lambda: forms.IntegerField(required=False, min_value=1),
    "noise.deltas": lambda: NumberListField(min_value=0),
    "autocorr.L_list": lambda: NumberListField(integer=True, min_value=2),
    "autocorr.temperature": lambda: _positive(),
    "autocorr.sweeps": lambda: forms.IntegerField(required=False, min_value=1),
    "autocorr.n_seeds": lambda: forms.IntegerField(required=False, min_value=1),
    "autocorr.max_lag": lambda: forms.IntegerField(required=False, min_value=1),
    "circuit.draws": lambda: forms.IntegerField(required=False, min_value=1),
    "circuit.max_N": lambda: forms.IntegerField(required=False, min_value=1),
    "circuit.max_M": lambda: forms.IntegerField(required=False, min_value=1),
}

_STRICTLY_POSITIVE = ("integrator.dt", "integrator.dtau", "open.jump_dtau", "autocorr.temperature")


class ExperimentConfigForm(forms.Form):
    """
    Field-level validation of a flattened experiment config. Field names are
    the dotted config keys, so `errors` name the offending key directly.
    """

    def __init__(self, *args, **kwargs):
        super().__init__(*args, **kwargs)
        for key, make in CONFIG_FIELDS.items():
            self.fields[key] = make()

    def clean(self):
        cleaned = super().clean()
        for key in _STRICTLY_POSITIVE:
            value = cleaned.get(key)
            if value is not None and not value > 0:
                self.add_error(key, "must be positive.")

        M, alpha = cleaned.get("ansatz.M"), cleaned.get("ansatz.alpha")
        if M is not None and alpha is not None:
            self.add_error("ansatz.alpha", "set exactly one of ansatz.M and ansatz.alpha.")
        elif alpha is not None:
            if not alpha > 0:
                self.add_error("ansatz.alpha", "must be positive.")
            N = cleaned.get("model.N")
            if N is not None and abs(alpha * N - round(alpha * N)) > 1e-9:
                self.add_error("ansatz.alpha", f"alpha*N = {alpha * N} is not an integer.")

        L = cleaned.get("model.L")
        if L is not None and len(L) != 2:
            self.add_error("model.L", "must be [Lx, Ly].")
        return cleaned


def parse_overrides(pairs):
    """
    Split repeated `key=value` flags into a dict. Values stay strings; the
    form coerces them. Raises ValidationError on a pair without '='.
    """
    overrides = {}
    for pair in pairs or ():
        key, sep, value = pair.partition("=")
        if not sep or not key.strip():
            raise ValidationError(f"--set expects key=value, got {pair!r}")
        overrides[key.strip()] = value.strip()
    return overrides
