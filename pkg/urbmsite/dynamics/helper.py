from typing import Any, Dict, Iterable, Mapping


def format_float(value: float) -> str:
    """Decimal text with 17 significant digits (round-trips every double)."""
    return format(float(value), ".17g")


def json_float_array(values: Iterable) -> str:
    """
    JSON array of floats written with format_float. Nested iterables become
    nested arrays.
    """
    parts = []
    for v in values:
        if hasattr(v, "__iter__"):
            parts.append(json_float_array(v))
        else:
            parts.append(format_float(v))
    return "[" + ", ".join(parts) + "]"


def flatten_dotted(data: Mapping[str, Any], prefix: str = "") -> Dict[str, Any]:
    """
    Flatten nested mappings into dotted keys:
    {"model": {"h_i": 0.5}} -> {"model.h_i": 0.5}. Lists are leaves.
    """
    flat: Dict[str, Any] = {}
    for key, value in data.items():
        full = f"{prefix}.{key}" if prefix else str(key)
        if isinstance(value, Mapping):
            flat.update(flatten_dotted(value, full))
        else:
            flat[full] = value
    return flat
