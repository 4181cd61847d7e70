"""Built-in problem definitions, expressed as run-config documents."""
from __future__ import annotations

from .errors import UsageError

# control weight calibrated so that the discretized solution reaches x'(T) near 3.2
# while the tightened program stays feasible down to 50 covering points
PENDULUM_LAMBDA_U = 0.75
PENDULUM_LAMBDA_T = 1e6


def pendulum(lambda_u: float = PENDULUM_LAMBDA_U, lambda_T: float = PENDULUM_LAMBDA_T,
             n_points: int = 200, T: float = 1.0) -> dict:
    """Spring-driven oscillator ``x'' = -10 x + w`` with actuator ``w' = u``.

    State ``[x, x', w]`` starts at ``[0.5, 0, 0]``, must pass ``x = 0.5`` at
    ``T/3`` and stop at ``x = 0`` at ``T`` while keeping ``x' >= -3`` and
    ``|w| <= 10``. The cost rewards terminal velocity with weight ``lambda_T``
    and charges ``lambda_u * |u|^2``.
    """
    return {
        "system": {
            "A": [[0.0, 1.0, 0.0], [-10.0, 0.0, 1.0], [0.0, 0.0, 0.0]],
            "B": [[0.0], [0.0], [1.0]],
            "R": [[float(lambda_u)]],
            "T": T,
            "state_names": ["x", "xdot", "w"],
        },
        "constraints": {
            "C": [[0.0, -1.0, 0.0], [0.0, 0.0, 1.0], [0.0, 0.0, -1.0]],
            "d": [3.0, 10.0, 10.0],
            "labels": ["xdot_min", "w_max", "w_min"],
        },
        "covering": {"n_points": int(n_points)},
        "x0": [0.5, 0.0, 0.0],
        "loss_points": [
            {"t": T / 3.0, "c": [1.0, 0.0, 0.0], "kind": "equality", "value": 0.5},
            {"t": T, "c": [1.0, 0.0, 0.0], "kind": "equality", "value": 0.0},
            {"t": T, "c": [0.0, 1.0, 0.0], "kind": "linear", "weight": -float(lambda_T)},
        ],
        "eta": {"study_families": ["w_max", "w_min"]},
    }


def infeasible(T: float = 1.0) -> dict:
    """Scalar integrator pinned at ``x(0) = 0`` but required to satisfy ``x(0) >= 1``."""
    return {
        "system": {"A": [[0.0]], "B": [[1.0]], "T": T},
        "constraints": {"C": [[-1.0]], "d": [-1.0], "labels": ["x_min"]},
        "covering": {"centers": [0.0], "radii": [0.0]},
        "x0": [0.0],
        "loss_points": [],
    }


def scalar(q: float = 0.0, T: float = 1.0) -> dict:
    """``x' = u`` with unit control weight and optional state weight ``q``."""
    doc = {
        "system": {"A": [[0.0]], "B": [[1.0]], "T": T},
        "x0": [0.0],
        "loss_points": [{"t": T, "c": [1.0], "kind": "equality", "value": 1.0}],
    }
    if q:
        doc["system"]["Q"] = [[float(q)]]
    return doc


def double_integrator(target=(1.0, 0.0), T: float = 1.0) -> dict:
    """Steer ``x'' = u`` from rest at the origin to ``target`` at ``T``."""
    return {
        "system": {"A": [[0.0, 1.0], [0.0, 0.0]], "B": [[0.0], [1.0]], "T": T,
                   "state_names": ["p", "v"]},
        "x0": [0.0, 0.0],
        "loss_points": [
            {"t": T, "c": [1.0, 0.0], "kind": "equality", "value": float(target[0])},
            {"t": T, "c": [0.0, 1.0], "kind": "equality", "value": float(target[1])},
        ],
    }


PRESETS = {
    "pendulum": pendulum,
    "infeasible": infeasible,
    "scalar": scalar,
    "double_integrator": double_integrator,
}


def preset_document(name: str, **options) -> dict:
    try:
        build = PRESETS[name]
    except KeyError:
        raise UsageError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None
    try:
        return build(**options)
    except TypeError as exc:
        raise UsageError(f"bad options for preset {name!r}: {exc}") from None
