"""Per-domain configurations (window geometry, training schedule, architecture)."""

from copy import deepcopy

from .errors import ConfigurationError

PRESETS = {
    "ran": {
        "window": {"L": 24, "H": 7, "S": 17},
        "train": {"batch_size": 100, "epochs": 30, "patience": 10},
        "model": {
            "gamma": 1.0, "kernel_size": 4, "use_gatv2": True,
            "gru_layers": 1, "gru_hidden": 580,
            "forecast_layers": 3, "forecast_hidden": 400,
            "recon_layers": 1, "recon_hidden": 400,
            "dropout": 0.07, "lr": 2.487e-4,
        },
        "calibration": {"p": 0.99},
        "cadence_minutes": 60,
        "group_column": "local_area",
    },
    "epc": {
        "window": {"L": 101, "H": 53, "S": 89},
        "train": {"batch_size": 30, "epochs": 200, "patience": 10},
        "model": {
            "gamma": 1.0, "kernel_size": 4, "use_gatv2": True,
            "gru_layers": 1, "gru_hidden": 780,
            "forecast_layers": 1, "forecast_hidden": 350,
            "recon_layers": 5, "recon_hidden": 800,
            "dropout": 0.10, "lr": 2.488e-4,
        },
        "calibration": {"p": 0.999},
        "cadence_minutes": 5,
        "group_column": "host",
    },
    "telco": {
        "window": {"L": 577, "H": 257, "S": 31},
        "train": {"batch_size": 30, "epochs": 150, "patience": 10},
        "model": {
            "gamma": 1.0, "kernel_size": 18, "use_gatv2": True,
            "gru_layers": 1, "gru_hidden": 820,
            "forecast_layers": 4, "forecast_hidden": 150,
            "recon_layers": 1, "recon_hidden": 150,
            "dropout": 0.04, "lr": 1.728e-4,
        },
        "calibration": {"p": 0.999},
        "cadence_minutes": 5,
        "group_column": None,
    },
}


def get_preset(name):
    """A deep copy of the named preset."""
    key = str(name).lower()
    if key not in PRESETS:
        raise ConfigurationError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    return deepcopy(PRESETS[key])


def deep_merge(base, override):
    """Recursive dict merge; values in ``override`` win."""
    out = deepcopy(base)
    for key, val in (override or {}).items():
        if isinstance(val, dict) and isinstance(out.get(key), dict):
            out[key] = deep_merge(out[key], val)
        else:
            out[key] = deepcopy(val)
    return out
