"""Run configuration: TOML text in, ``SimConfig`` plus task list out.

Layout (every key optional, omitted keys take the ``paper`` preset values)::

    preset = "paper"
    delta = 0.1          # sampling step [s]
    horizon = 3.0        # prediction horizon [s]
    m = 4                # steps per control period
    eta = 0.02           # total disturbance bound used by the tube
    q = 0.1              # scalar, diagonal (5) or full 5x5
    r = 0.01             # scalar, diagonal (3) or full 3x3
    seeds = 10           # count (seeds 0..n-1) or explicit list
    tasks = ["position", "trajectory"]
    controllers = ["optimal", "delayed", "smooth"]

    [manipulator]
    lengths = [2.236, 2.236, 3.162]
    ...

    [position]
    target = [2.0, 6.0]

    [trajectory]
    center = [2.0, 4.0]
"""
from __future__ import annotations

import difflib
import hashlib
import json
import math
import os
from dataclasses import dataclass, replace

import numpy as np
import tomli_w

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .manipulator import NU, NX, ManipulatorParams, paper_initial_theta
from .simulation import ControllerKind, PositionTask, SimConfig, TrajectoryTask

ENV_VAR = "TUBEMPC_CONFIG"
PRESETS = ("paper",)


class ConfigError(ValueError):
    pass


def _paper_defaults() -> dict:
    p = ManipulatorParams.paper()
    pos, traj = PositionTask(), TrajectoryTask()
    return {
        "preset": "paper",
        "delta": 0.1,
        "horizon": 3.0,
        "m": 4,
        "eta": 0.02,
        "q": [0.1] * NX,
        "r": [0.01] * NU,
        "seed": 0,
        "seeds": list(range(10)),
        "tasks": ["position", "trajectory"],
        "controllers": [c.value for c in ControllerKind],
        "theorem2_policy": "warn",
        "cost_mask": True,
        "epsilon": "auto",
        "initial_theta": [float(v) for v in paper_initial_theta()],
        "rho_accept": 0.999,
        "min_input_authority": 0.25,
        "sqp_max_rounds": 10,
        "qp_tol": 1e-8,
        "manipulator": {
            "lengths": list(p.lengths),
            "theta_lo": list(p.theta_lo),
            "theta_hi": list(p.theta_hi),
            "omega_max": list(p.omega_max),
            "eta1": p.eta1,
        },
        "position": {"target": list(pos.target), "duration": pos.duration},
        "trajectory": {
            "center": list(traj.center),
            "radius": traj.radius,
            "start_angle": traj.start_angle,
            "end_angle": traj.end_angle,
            "line_end": list(traj.line_end),
            "arc_fraction": traj.arc_fraction,
            "duration": traj.duration,
        },
    }


@dataclass(frozen=True)
class ResolvedConfig:
    """Everything a run needs, plus the flat dict it was built from."""

    sim: SimConfig
    tasks: tuple
    controllers: tuple
    seeds: tuple
    data: dict
    task_table: dict

    def task(self, name: str):
        """The configured task of that name, whether or not it is in ``tasks``."""
        try:
            return self.task_table[name]
        except KeyError:
            raise ConfigError(f"unknown task '{name}'") from None

    @property
    def config_hash(self) -> str:
        return config_hash(self.data)

    def with_seed(self, seed: int) -> SimConfig:
        return replace(self.sim, seed=int(seed))

    def dumps(self) -> str:
        return tomli_w.dumps(self.data)


def config_hash(data: dict) -> str:
    blob = json.dumps(data, sort_keys=True, separators=(",", ":"), allow_nan=False)
    return hashlib.sha256(blob.encode()).hexdigest()


def _check_keys(given: dict, allowed: dict, where: str):
    for key in given:
        if key not in allowed:
            close = difflib.get_close_matches(key, list(allowed), n=1)
            hint = f"; did you mean '{close[0]}'?" if close else ""
            raise ConfigError(f"unknown key '{where}{key}'{hint}")


def _merge(base: dict, over: dict, where: str = "") -> dict:
    _check_keys(over, base, where)
    out = dict(base)
    for key, val in over.items():
        if isinstance(base[key], dict):
            if not isinstance(val, dict):
                raise ConfigError(f"'{where}{key}' must be a table")
            out[key] = _merge(base[key], val, f"{where}{key}.")
        else:
            if isinstance(val, dict):
                raise ConfigError(f"'{where}{key}' must not be a table")
            out[key] = val
    return out


def _weight(value, n: int, name: str) -> list:
    """Scalar, diagonal or full matrix, normalized to a nested list."""
    arr = np.asarray(value, dtype=float)
    if arr.ndim == 0:
        arr = float(arr) * np.eye(n)
    elif arr.shape == (n,):
        arr = np.diag(arr)
    elif arr.shape != (n, n):
        raise ConfigError(f"'{name}' must be a scalar, {n} diagonal entries or a {n}x{n} matrix")
    if not np.all(np.isfinite(arr)):
        raise ConfigError(f"'{name}' must be finite")
    return arr


def _vec(value, n: int, name: str) -> tuple:
    try:
        arr = np.asarray(value, dtype=float)
    except (TypeError, ValueError):
        raise ConfigError(f"'{name}' must be a list of {n} numbers") from None
    if arr.shape != (n,):
        raise ConfigError(f"'{name}' must be a list of {n} numbers")
    return tuple(float(v) for v in arr)


_INT_KEYS = {"m", "seed", "seeds", "sqp_max_rounds"}


def _canonical(v, key=None):
    """Normalize numeric types so equal configs hash equal."""
    if isinstance(v, dict):
        return {k: _canonical(x, k) for k, x in v.items()}
    if isinstance(v, list):
        return [_canonical(x, key) for x in v]
    if isinstance(v, (bool, str)):
        return v
    return int(v) if key in _INT_KEYS else float(v)


def resolve(data: dict) -> ResolvedConfig:
    """Merge user keys over the preset and validate every invariant."""
    preset = data.get("preset", "paper")
    if preset not in PRESETS:
        close = difflib.get_close_matches(str(preset), PRESETS, n=1)
        hint = f"; did you mean '{close[0]}'?" if close else ""
        raise ConfigError(f"unknown preset '{preset}'{hint}")
    d = _merge(_paper_defaults(), data)

    seeds = d["seeds"]
    if isinstance(seeds, bool) or not isinstance(seeds, (int, list)):
        raise ConfigError("'seeds' must be a count or a list of integers")
    if isinstance(seeds, int):
        if seeds < 1:
            raise ConfigError("rule 'seeds >= 1' violated")
        seeds = list(range(seeds))
    if not all(isinstance(s, int) and not isinstance(s, bool) and s >= 0 for s in seeds) or not seeds:
        raise ConfigError("'seeds' must be non-negative integers")
    d["seeds"] = list(seeds)

    for key in ("m", "seed", "sqp_max_rounds"):
        if not isinstance(d[key], int) or isinstance(d[key], bool):
            raise ConfigError(f"'{key}' must be an integer")
    for key in ("delta", "horizon", "eta", "rho_accept", "min_input_authority", "qp_tol"):
        if isinstance(d[key], bool) or not isinstance(d[key], (int, float)) or not math.isfinite(d[key]):
            raise ConfigError(f"'{key}' must be a finite number")
    if not d["delta"] > 0:
        raise ConfigError("rule 'delta > 0' violated")
    if d["m"] < 1:
        raise ConfigError("rule 'm >= 1' violated")
    if d["m"] * d["delta"] > d["horizon"] * (1 + 1e-12):
        raise ConfigError(f"rule 'm * delta <= horizon' violated ({d['m']} * {d['delta']} > {d['horizon']})")
    if abs(d["horizon"] / d["delta"] - round(d["horizon"] / d["delta"])) > 1e-9:
        raise ConfigError("rule 'horizon is a multiple of delta' violated")
    if not d["eta"] >= 0:
        raise ConfigError("rule 'eta >= 0' violated")
    if not 0 < d["rho_accept"] < 1:
        raise ConfigError("rule '0 < rho_accept < 1' violated")
    if d["theorem2_policy"] not in ("warn", "abort"):
        raise ConfigError("'theorem2_policy' must be 'warn' or 'abort'")
    if not isinstance(d["cost_mask"], bool):
        raise ConfigError("'cost_mask' must be true or false")
    eps = d["epsilon"]
    if eps != "auto" and (isinstance(eps, bool) or not isinstance(eps, (int, float)) or not eps > 0):
        raise ConfigError("'epsilon' must be \"auto\" or a positive number")

    for name in d["tasks"]:
        if name not in ("position", "trajectory"):
            raise ConfigError(f"unknown task '{name}'")
    kinds = [k.value for k in ControllerKind]
    for c in d["controllers"]:
        if c not in kinds:
            close = difflib.get_close_matches(str(c), kinds, n=1)
            hint = f"; did you mean '{close[0]}'?" if close else ""
            raise ConfigError(f"unknown controller '{c}'{hint}")

    Q = _weight(d["q"], NX, "q")
    R = _weight(d["r"], NU, "r")
    if np.min(np.linalg.eigvalsh(0.5 * (R + R.T))) <= 0:
        raise ConfigError("rule 'r positive definite' violated")
    if np.min(np.linalg.eigvalsh(0.5 * (Q + Q.T))) < 0:
        raise ConfigError("rule 'q positive semidefinite' violated")
    d["q"] = np.diag(Q).tolist() if np.count_nonzero(Q - np.diag(np.diag(Q))) == 0 else Q.tolist()
    d["r"] = np.diag(R).tolist() if np.count_nonzero(R - np.diag(np.diag(R))) == 0 else R.tolist()

    man = d["manipulator"]
    try:
        params = ManipulatorParams(
            lengths=_vec(man["lengths"], 3, "manipulator.lengths"),
            theta_lo=_vec(man["theta_lo"], 3, "manipulator.theta_lo"),
            theta_hi=_vec(man["theta_hi"], 3, "manipulator.theta_hi"),
            omega_max=_vec(man["omega_max"], 3, "manipulator.omega_max"),
            eta1=float(man["eta1"]),
        )
        theta0 = _vec(d["initial_theta"], 3, "initial_theta")
        pt, tt = d["position"], d["trajectory"]
        by_name = {
            "position": PositionTask(target=_vec(pt["target"], 2, "position.target"),
                                     duration=float(pt["duration"])),
            "trajectory": TrajectoryTask(
                center=_vec(tt["center"], 2, "trajectory.center"), radius=float(tt["radius"]),
                start_angle=float(tt["start_angle"]), end_angle=float(tt["end_angle"]),
                line_end=_vec(tt["line_end"], 2, "trajectory.line_end"),
                arc_fraction=float(tt["arc_fraction"]), duration=float(tt["duration"])),
        }
        if params.eta1 > d["eta"]:
            raise ConfigError("rule 'manipulator.eta1 <= eta' violated")
        lo, hi = np.asarray(params.theta_lo), np.asarray(params.theta_hi)
        if np.any(np.asarray(theta0) < lo) or np.any(np.asarray(theta0) > hi):
            raise ConfigError("rule 'initial_theta inside the joint box' violated")
        sim = SimConfig(
            params=params, delta=float(d["delta"]), horizon=float(d["horizon"]), m=d["m"], Q=Q, R=R,
            eta=float(d["eta"]), seed=d["seed"], theorem2_policy=d["theorem2_policy"],
            cost_mask=d["cost_mask"], epsilon=None if eps == "auto" else float(eps),
            initial_theta=theta0, rho_accept=float(d["rho_accept"]),
            min_input_authority=float(d["min_input_authority"]), sqp_max_rounds=d["sqp_max_rounds"],
            qp_tol=float(d["qp_tol"]),
        )
    except ConfigError:
        raise
    except (ValueError, TypeError) as exc:
        raise ConfigError(str(exc)) from exc
    tasks = tuple(by_name[n] for n in d["tasks"])
    d = _canonical(d)
    return ResolvedConfig(sim=sim, tasks=tasks, controllers=tuple(d["controllers"]),
                          seeds=tuple(int(s) for s in d["seeds"]), data=d, task_table=by_name)


def parse_config(text: str) -> ResolvedConfig:
    """Parse TOML text; syntax errors carry line and column."""
    try:
        data = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"parse error: {exc}") from exc
    return resolve(data)


def load_config(path=None) -> ResolvedConfig:
    """Read ``path``, else the file named by ``$TUBEMPC_CONFIG``, else the preset."""
    if path is None:
        path = os.environ.get(ENV_VAR) or None
    if path is None:
        return resolve({})
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from exc
    try:
        return parse_config(text)
    except ConfigError as exc:
        raise ConfigError(f"{path}: {exc}") from exc


def preset(name: str = "paper") -> ResolvedConfig:
    return resolve({"preset": name})
