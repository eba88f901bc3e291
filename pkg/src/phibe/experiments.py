"""Experiment configuration, runners, and persisted results.

A single JSON config format drives four studies: per-case policy-iteration
runs, dt order sweeps (analytic or sampled), batch-size studies, and analytic
error atlases over system parameters.  Every results.csv row carries the
config hash and master seed, and rerunning from the echoed config reproduces
the file byte for byte.  Wall-clock times live in summary.json only, so they
never break that determinism.
"""

import hashlib
import json
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import stats

from .basis import (
    merton_q_basis,
    merton_value_basis,
    quadratic_state_action_basis,
    quadratic_state_basis,
)
from .environments import LqrSystem, MertonMarket
from .errors import ConfigError, NumericalError
from .oracles import (
    be_optimal,
    be_optimal_1d,
    lqr_error_oracle,
    lqr_optimal,
    lqr_optimal_1d,
    merton_error_oracle,
    phibe_effective_dynamics,
    phibe_optimal,
)
from .policy_iteration import (
    BatchPlan,
    LinearPolicy,
    optimal_be_pi,
    optimal_phibe_pi,
)

SCHEMA_VERSION = 1

DEFAULT_DT_GRID = (5e-3, 1e-2, 5e-2, 1e-1, 1.0)
DEFAULT_ATLAS_SWEEPS = {
    "beta": [0.0, 0.25, 0.5, 0.75, 1.0, 1.5, 2.0, 3.0, 4.0, 6.0, 8.0, 12.0, 16.0, 20.0],
    "q_over_r": [0.25, 0.5, 1.0, 2.0, 4.0, 8.0, 16.0],
    "A": [-4.0, -2.0, -1.0, -0.5, 0.5, 1.0, 2.0, 4.0],
    "B": [0.1, 0.25, 0.5, 1.0, 2.0, 4.0],
    "dt": list(DEFAULT_DT_GRID),
    "dt_undiscounted": list(DEFAULT_DT_GRID),
}
_MAX_WORKERS = 8

_TOP_KEYS = {
    "schema_version", "name", "kind", "environment", "dt", "algorithm",
    "order", "q_method", "discount_choice", "batch", "bases", "pi0",
    "iterations", "repetitions", "seed", "eval_box", "exact_expectation",
    "out", "dts", "mode", "sizes", "sweeps",
}
_LQR_ENV_KEYS = {"A", "B", "Q", "R", "sigma", "beta"}
_MERTON_ENV_KEYS = {"r", "r_b", "mu", "sigma", "gamma_risk", "beta"}
_BATCH_KEYS = {"q_num_traj", "q_steps", "pi_num_traj", "pi_steps",
               "init_box", "action_box", "application"}
_BASIS_KEYS = {"family", "include_constant", "power"}
_PI0_KEYS = {"K", "offset", "constant", "allocation"}


def _reject_unknown(d: dict, allowed: set, where: str) -> None:
    unknown = sorted(set(d) - allowed)
    if unknown:
        raise ConfigError(f"unknown keys in {where}: {', '.join(unknown)}")


def _require(d: dict, key: str, where: str):
    if key not in d:
        raise ConfigError(f"missing required key {key!r} in {where}")
    return d[key]


def _as_float(value, name: str) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigError(f"{name} must be a number, got {value!r}")
    return float(value)


def _as_int(value, name: str, minimum: int = 0) -> int:
    if isinstance(value, bool) or not isinstance(value, int):
        raise ConfigError(f"{name} must be an integer, got {value!r}")
    if value < minimum:
        raise ConfigError(f"{name} must be >= {minimum}, got {value}")
    return int(value)


def _as_box(value, name: str) -> tuple[float, float]:
    if (not isinstance(value, (list, tuple)) or len(value) != 2):
        raise ConfigError(f"{name} must be a [low, high] pair, got {value!r}")
    lo, hi = (_as_float(v, name) for v in value)
    if not hi > lo:
        raise ConfigError(f"{name} must satisfy low < high, got {value!r}")
    return (lo, hi)


def _canonical(obj):
    """Round-trip through floats so 1 and 1.0 hash identically."""
    if isinstance(obj, dict):
        return {k: _canonical(obj[k]) for k in sorted(obj)}
    if isinstance(obj, (list, tuple)):
        return [_canonical(v) for v in obj]
    if isinstance(obj, bool) or obj is None or isinstance(obj, str):
        return obj
    if isinstance(obj, (int, float)):
        f = float(obj)
        return int(f) if f.is_integer() else f
    raise ConfigError(f"unsupported config value {obj!r}")


def canonical_json(d: dict) -> str:
    return json.dumps(_canonical(d), sort_keys=True, separators=(",", ":"))


@dataclass(frozen=True)
class ExperimentConfig:
    """Validated experiment description, kept as a normalized plain dict.

    The hash covers every semantic field (the output directory is excluded),
    so identical hashes mean identical runs given the same master seed.
    """

    data: dict = field(repr=False)

    def __post_init__(self):
        d = self.data
        if not isinstance(d, dict):
            raise ConfigError("config must be a JSON object")
        _reject_unknown(d, _TOP_KEYS, "config")
        version = _require(d, "schema_version", "config")
        if version != SCHEMA_VERSION:
            raise ConfigError(
                f"unsupported schema_version {version!r}, expected {SCHEMA_VERSION}")
        name = _require(d, "name", "config")
        if not isinstance(name, str) or not name:
            raise ConfigError("name must be a nonempty string")
        kind = _require(d, "kind", "config")
        if kind not in ("lqr", "merton"):
            raise ConfigError(f"kind must be 'lqr' or 'merton', got {kind!r}")
        env = _require(d, "environment", "config")
        if not isinstance(env, dict):
            raise ConfigError("environment must be an object")
        if kind == "lqr":
            _reject_unknown(env, _LQR_ENV_KEYS, "environment")
            for key in ("A", "B", "Q", "R"):
                _require(env, key, "environment")
        else:
            _reject_unknown(env, _MERTON_ENV_KEYS, "environment")
            for key in sorted(_MERTON_ENV_KEYS):
                _as_float(_require(env, key, "environment"), f"environment.{key}")
        if _as_float(_require(d, "dt", "config"), "dt") <= 0.0:
            raise ConfigError(f"dt must be positive, got {d['dt']}")
        algorithm = d.get("algorithm", "phibe_pi")
        if algorithm not in ("phibe_pi", "be_pi"):
            raise ConfigError(
                f"algorithm must be 'phibe_pi' or 'be_pi', got {algorithm!r}")
        if algorithm == "be_pi":
            for key in ("order", "q_method", "exact_expectation"):
                if key in d:
                    raise ConfigError(f"{key} only applies to phibe_pi")
        else:
            if "discount_choice" in d:
                raise ConfigError("discount_choice only applies to be_pi")
        if "order" in d and _as_int(d["order"], "order", 1) > 3:
            raise ConfigError(f"order must be 1, 2, or 3, got {d['order']}")
        if d.get("q_method", "galerkin") not in ("galerkin", "gradient_descent"):
            raise ConfigError(f"unknown q_method {d['q_method']!r}")
        if d.get("discount_choice", "exp") not in ("exp", "optimal"):
            raise ConfigError(f"unknown discount_choice {d['discount_choice']!r}")
        if "batch" in d:
            if not isinstance(d["batch"], dict):
                raise ConfigError("batch must be an object")
            _reject_unknown(d["batch"], _BATCH_KEYS, "batch")
            for key in ("q_num_traj", "q_steps", "pi_num_traj", "pi_steps"):
                _as_int(_require(d["batch"], key, "batch"), f"batch.{key}", 1)
            for key in ("init_box", "action_box"):
                if key in d["batch"]:
                    _as_box(d["batch"][key], f"batch.{key}")
        if "bases" in d:
            if not isinstance(d["bases"], dict):
                raise ConfigError("bases must be an object")
            _reject_unknown(d["bases"], {"value", "q"}, "bases")
            for slot, spec in d["bases"].items():
                if not isinstance(spec, dict):
                    raise ConfigError(f"bases.{slot} must be an object")
                _reject_unknown(spec, _BASIS_KEYS, f"bases.{slot}")
                family = _require(spec, "family", f"bases.{slot}")
                if family not in ("quadratic", "merton"):
                    raise ConfigError(f"unknown basis family {family!r}")
        if "pi0" in d:
            if not isinstance(d["pi0"], dict):
                raise ConfigError("pi0 must be an object")
            _reject_unknown(d["pi0"], _PI0_KEYS, "pi0")
        _as_int(d.get("iterations", 15), "iterations", 1)
        _as_int(d.get("repetitions", 10), "repetitions", 1)
        _as_int(d.get("seed", 0), "seed", 0)
        if "eval_box" in d:
            _as_box(d["eval_box"], "eval_box")
        if "exact_expectation" in d and not isinstance(d["exact_expectation"], bool):
            raise ConfigError("exact_expectation must be a boolean")
        if "out" in d and not isinstance(d["out"], str):
            raise ConfigError("out must be a string path")
        if "dts" in d:
            if not isinstance(d["dts"], list) or not d["dts"]:
                raise ConfigError("dts must be a nonempty list")
            for v in d["dts"]:
                if _as_float(v, "dts entry") <= 0.0:
                    raise ConfigError(f"dts entries must be positive, got {v}")
        if "mode" in d and d["mode"] not in ("oracle", "sampled"):
            raise ConfigError(f"mode must be 'oracle' or 'sampled', got {d['mode']!r}")
        if "sizes" in d:
            if not isinstance(d["sizes"], list) or not d["sizes"]:
                raise ConfigError("sizes must be a nonempty list")
            for v in d["sizes"]:
                _as_int(v, "sizes entry", 1)
        if "sweeps" in d:
            if not isinstance(d["sweeps"], dict):
                raise ConfigError("sweeps must be an object")
            _reject_unknown(d["sweeps"], set(DEFAULT_ATLAS_SWEEPS), "sweeps")
            for panel, grid in d["sweeps"].items():
                if not isinstance(grid, list) or len(grid) < 2:
                    raise ConfigError(f"sweeps.{panel} needs at least two points")
        # materialize the environment once; its own checks run here
        self.build_environment()
        object.__setattr__(self, "data", _canonical(d))

    # --- accessors -----------------------------------------------------
    @property
    def name(self) -> str:
        return self.data["name"]

    @property
    def kind(self) -> str:
        return self.data["kind"]

    @property
    def dt(self) -> float:
        return float(self.data["dt"])

    @property
    def algorithm(self) -> str:
        return self.data.get("algorithm", "phibe_pi")

    @property
    def order(self) -> int:
        return int(self.data.get("order", 1))

    @property
    def iterations(self) -> int:
        return int(self.data.get("iterations", 15))

    @property
    def repetitions(self) -> int:
        return int(self.data.get("repetitions", 10))

    @property
    def seed(self) -> int:
        return int(self.data.get("seed", 0))

    @property
    def eval_box(self) -> tuple[float, float]:
        return _as_box(self.data.get("eval_box", [-3.0, 3.0]), "eval_box")

    @property
    def out(self):
        return self.data.get("out")

    def config_hash(self) -> str:
        semantic = {k: v for k, v in self.data.items() if k != "out"}
        return hashlib.sha256(canonical_json(semantic).encode()).hexdigest()[:12]

    # --- builders ------------------------------------------------------
    def build_environment(self):
        env = self.data["environment"]
        if self.kind == "merton":
            return MertonMarket(**{k: float(env[k]) for k in sorted(_MERTON_ENV_KEYS)})
        return LqrSystem(
            A=np.asarray(env["A"], dtype=float),
            B=np.asarray(env["B"], dtype=float),
            Q=np.asarray(env["Q"], dtype=float),
            R=np.asarray(env["R"], dtype=float),
            sigma=float(env.get("sigma", 0.0)),
            beta=float(env.get("beta", 0.0)),
        )

    def build_plan(self, sizes_override: tuple[int, int] = None) -> BatchPlan:
        batch = dict(self.data.get("batch", {}))
        if sizes_override is not None:
            num_traj, steps = sizes_override
            batch.update(q_num_traj=num_traj, q_steps=steps,
                         pi_num_traj=num_traj, pi_steps=steps)
        for key in ("q_num_traj", "q_steps", "pi_num_traj", "pi_steps"):
            if key not in batch:
                raise ConfigError(f"batch.{key} is required for sampled runs")
        kwargs = {}
        for key in ("init_box", "action_box"):
            if key in batch:
                kwargs[key] = _as_box(batch[key], f"batch.{key}")
        if "application" in batch:
            kwargs["application"] = batch["application"]
        return BatchPlan(
            q_num_traj=int(batch["q_num_traj"]), q_steps=int(batch["q_steps"]),
            pi_num_traj=int(batch["pi_num_traj"]), pi_steps=int(batch["pi_steps"]),
            **kwargs,
        )

    def build_bases(self, env):
        specs = self.data.get("bases", {})
        if self.kind == "merton":
            power = float(specs.get("value", {}).get("power", 1.0 - env.gamma_risk))
            return merton_value_basis(power), merton_q_basis(power)
        d, m = env.state_dim, env.action_dim
        with_const = bool(env.sigma > 0.0)
        value_spec = specs.get("value", {"family": "quadratic"})
        q_spec = specs.get("q", {"family": "quadratic"})
        Phi = quadratic_state_basis(
            d, include_constant=bool(value_spec.get("include_constant", with_const)))
        Psi = quadratic_state_action_basis(
            d, m, include_constant=bool(q_spec.get("include_constant", with_const)))
        return Phi, Psi

    def build_pi0(self, env) -> LinearPolicy:
        spec = self.data.get("pi0", {})
        if self.kind == "merton":
            return LinearPolicy.constant(float(spec.get("allocation", 0.5)))
        if "allocation" in spec:
            raise ConfigError("pi0.allocation only applies to merton configs")
        if "K" in spec:
            K = np.asarray(spec["K"], dtype=float)
            offset = spec.get("offset")
            if offset is not None:
                return LinearPolicy(K=K, offset=np.asarray(offset, dtype=float))
            return LinearPolicy(K=K)
        if "constant" in spec:
            return LinearPolicy.constant(float(spec["constant"]),
                                         state_dim=env.state_dim)
        return LinearPolicy(K=np.zeros((env.action_dim, env.state_dim)))

    # --- serialization -------------------------------------------------
    def with_overrides(self, **overrides) -> "ExperimentConfig":
        d = dict(self.data)
        for key, value in overrides.items():
            if value is not None:
                d[key] = value
        return ExperimentConfig(d)

    def echo(self) -> dict:
        return _canonical(self.data)

    @classmethod
    def from_json(cls, path) -> "ExperimentConfig":
        try:
            raw = json.loads(Path(path).read_text())
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
        return cls(raw)


def load_config(path) -> ExperimentConfig:
    return ExperimentConfig.from_json(path)


@dataclass
class ResultRecord:
    """Tidy rows plus aggregates from one experiment runner.

    Rows become results.csv; the normalized config becomes config.echo.json;
    aggregates and wall time become summary.json.
    """

    runner: str
    config_hash: str
    columns: list
    rows: list
    aggregates: dict
    echo: dict
    wall_time_s: float = 0.0

    def csv_text(self) -> str:
        lines = [",".join(self.columns)]
        for row in self.rows:
            lines.append(",".join(_format_cell(v) for v in row))
        return "\n".join(lines) + "\n"

    def summary(self) -> dict:
        return {
            "runner": self.runner,
            "config_hash": self.config_hash,
            "schema_version": SCHEMA_VERSION,
            "aggregates": self.aggregates,
            "wall_time_s": self.wall_time_s,
        }

    def write(self, out_dir) -> dict:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        paths = {
            "results": out / "results.csv",
            "echo": out / "config.echo.json",
            "summary": out / "summary.json",
        }
        paths["results"].write_text(self.csv_text())
        paths["echo"].write_text(json.dumps(self.echo, indent=2, sort_keys=True) + "\n")
        paths["summary"].write_text(
            json.dumps(_jsonable(self.summary()), indent=2, sort_keys=True) + "\n")
        return paths


def _format_cell(value) -> str:
    if isinstance(value, float):
        return repr(float(value))
    return str(value)


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.generic):
        return float(obj)
    if isinstance(obj, float) and not np.isfinite(obj):
        return repr(obj)
    return obj


def _pool_map(fn, items):
    if len(items) <= 1:
        return [fn(item) for item in items]
    workers = min(_MAX_WORKERS, os.cpu_count() or 1, len(items))
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def _stats(values) -> dict:
    arr = np.asarray(values, dtype=float)
    finite = arr[np.isfinite(arr)]
    if finite.size == 0:
        return {"mean": float("inf"), "min": float("inf"),
                "max": float("inf"), "median": float("inf")}
    return {"mean": float(np.mean(arr)), "min": float(np.min(arr)),
            "max": float(np.max(arr)), "median": float(np.median(arr))}


def _data_points(plan: BatchPlan) -> int:
    return plan.q_num_traj * (plan.q_steps + 1)


def _make_oracle(config: ExperimentConfig, env):
    if config.kind == "merton":
        return merton_error_oracle(env)
    return lqr_error_oracle(env, box=config.eval_box)


def _run_driver(config: ExperimentConfig, env, plan, seed: int):
    Phi, Psi = config.build_bases(env)
    pi0 = config.build_pi0(env)
    oracle = _make_oracle(config, env)
    common = dict(batch_plan=plan, iterations=config.iterations,
                  seed=seed, oracle=oracle)
    if config.algorithm == "be_pi":
        policy, value, trace = optimal_be_pi(
            env, config.dt, Phi, Psi, pi0,
            discount_choice=config.data.get("discount_choice", "exp"), **common)
    else:
        policy, value, trace = optimal_phibe_pi(
            env, config.dt, Phi, Psi, pi0, order=config.order,
            q_method=config.data.get("q_method", "galerkin"),
            exact_expectation=bool(config.data.get("exact_expectation", False)),
            **common)
    final_errors = oracle(policy, value)
    return policy, value, trace, final_errors


def _rep_seed(master: int, rep: int) -> int:
    # repetitions get distinct but reproducible seeds
    return int(master) * 100003 + rep


def run_case(config: ExperimentConfig, out_dir=None, seed=None, reps=None) -> ResultRecord:
    """Run the configured driver `repetitions` times and persist error curves.

    Rows: one per (repetition, iteration, metric) from the per-iteration
    oracle errors, plus `final` rows with the converged policy entries, value
    coefficients, and final oracle errors.
    """
    config = config.with_overrides(seed=seed, repetitions=reps)
    env = config.build_environment()
    plan = config.build_plan()
    chash = config.config_hash()
    master = config.seed
    t0 = time.perf_counter()

    def one_rep(rep: int):
        rep_seed = _rep_seed(master, rep)
        policy, value, trace, final_errors = _run_driver(config, env, plan, rep_seed)
        rows = []
        for record in trace.records:
            for metric in sorted(record["errors"]):
                rows.append((rep, str(record["iteration"]), metric,
                             float(record["errors"][metric]), master, chash))
        K = np.atleast_2d(policy.K)
        for i in range(K.shape[0]):
            for j in range(K.shape[1]):
                rows.append((rep, "final", f"policy_K_{i}_{j}", float(K[i, j]),
                             master, chash))
        for i, v in enumerate(np.atleast_1d(policy.offset)):
            rows.append((rep, "final", f"policy_offset_{i}", float(v), master, chash))
        if value is not None:
            for i, w in enumerate(np.asarray(value.coeffs.weights).ravel()):
                rows.append((rep, "final", f"value_coeff_{i}", float(w), master, chash))
        for metric in sorted(final_errors):
            rows.append((rep, "final", metric, float(final_errors[metric]),
                         master, chash))
        return rows, {m: float(v) for m, v in final_errors.items()}

    results = _pool_map(one_rep, list(range(config.repetitions)))
    rows = [row for rep_rows, _ in results for row in rep_rows]
    finals = [errors for _, errors in results]

    aggregates = {
        "name": config.name,
        "algorithm": config.algorithm,
        "repetitions": config.repetitions,
        "iterations": config.iterations,
        "data_points_per_iteration": _data_points(plan),
        "final_errors": {
            metric: _stats([f[metric] for f in finals])
            for metric in sorted(finals[0])
        },
        "per_repetition_final": finals,
    }
    return _finish(ResultRecord(
        runner="run_case", config_hash=chash,
        columns=["repetition", "iteration", "metric", "value", "seed", "config_hash"],
        rows=rows, aggregates=aggregates, echo=config.echo(),
        wall_time_s=time.perf_counter() - t0,
    ), out_dir)


def _finish(record: ResultRecord, out_dir) -> ResultRecord:
    if out_dir is not None:
        record.write(out_dir)
    return record


def _gain_error_metrics(env, dt: float) -> dict:
    """Analytic gaps between the discrete-data optimizers and the true gain."""
    if env.state_dim == 1:
        k_true = lqr_optimal_1d(env).K
        k_be = be_optimal_1d(env, dt).K
    else:
        k_true = lqr_optimal(env)[0].K
        k_be = be_optimal(env, dt).K
    out = {}
    for order in (1, 2):
        k_hat = phibe_optimal(env, dt, order=order).K
        out[f"gain_error_phibe{order}"] = float(np.linalg.norm(k_hat - k_true))
    out["gain_error_be"] = float(np.linalg.norm(k_be - k_true))
    return out


def dt_sweep(config: ExperimentConfig, out_dir=None, seed=None, mode=None,
             reps=None) -> ResultRecord:
    """Gain error versus dt, analytically (oracle) or via full sampled PI.

    Oracle mode touches no randomness, so its rows are identical for every
    master seed; sampled mode runs the configured algorithm per dt with
    derived seeds.  Slopes are least-squares fits of log error against log dt
    and are skipped when the list has a single dt.
    """
    config = config.with_overrides(seed=seed, mode=mode, repetitions=reps)
    env = config.build_environment()
    if config.kind != "lqr":
        raise ConfigError("dt_sweep only applies to lqr configs")
    dts = [float(v) for v in config.data.get("dts", DEFAULT_DT_GRID)]
    run_mode = config.data.get("mode", "oracle")
    chash = config.config_hash()
    master = config.seed
    t0 = time.perf_counter()
    rows = []
    means = {}

    if run_mode == "oracle":
        for dt in dts:
            metrics = _gain_error_metrics(env, dt)
            for metric in sorted(metrics):
                rows.append((float(dt), 0, metric, metrics[metric], master, chash))
                means.setdefault(metric, []).append(metrics[metric])
    else:
        plan = config.build_plan()

        def one_unit(unit):
            dt, rep = unit
            _, _, _, final_errors = _run_driver(
                config.with_overrides(dt=dt), env, plan, _rep_seed(master, rep))
            return dt, rep, float(final_errors["policy_gap"])

        units = [(dt, rep) for dt in dts for rep in range(config.repetitions)]
        metric = f"gain_error_{'be' if config.algorithm == 'be_pi' else 'phibe%d' % config.order}"
        per_dt = {dt: [] for dt in dts}
        for dt, rep, err in _pool_map(one_unit, units):
            rows.append((float(dt), rep, metric, err, master, chash))
            per_dt[dt].append(err)
        means[metric] = [float(np.mean(per_dt[dt])) for dt in dts]

    rows.sort(key=lambda r: (r[0], r[1], r[2]))
    slopes = {}
    if len(dts) >= 2:
        log_dt = np.log(np.asarray(dts))
        for metric, errs in means.items():
            arr = np.asarray(errs)
            if np.all(arr > 0.0):
                slopes[metric] = float(np.polyfit(log_dt, np.log(arr), 1)[0])
            else:
                slopes[metric] = None
    aggregates = {
        "name": config.name,
        "mode": run_mode,
        "dts": dts,
        "means": means,
        "slopes": slopes,
    }
    return _finish(ResultRecord(
        runner="dt_sweep", config_hash=chash,
        columns=["dt", "repetition", "metric", "value", "seed", "config_hash"],
        rows=rows, aggregates=aggregates, echo=config.echo(),
        wall_time_s=time.perf_counter() - t0,
    ), out_dir)


def batch_sweep(config: ExperimentConfig, out_dir=None, seed=None,
                reps=None) -> ResultRecord:
    """Final value error versus data volume D (⌊D/4⌋ trajectories, 4 points).

    Each (size, repetition) unit runs the configured driver on a batch of
    ⌊D/4⌋ trajectories with 3 transitions each.  A unit whose Galerkin system
    is singular (D below the basis size) is marked failed, not raised.
    """
    config = config.with_overrides(seed=seed, repetitions=reps)
    env = config.build_environment()
    if config.kind != "lqr":
        raise ConfigError("batch_sweep only applies to lqr configs")
    sizes = [int(v) for v in config.data.get("sizes", [128, 512, 2048, 8192])]
    chash = config.config_hash()
    master = config.seed
    t0 = time.perf_counter()

    def one_unit(unit):
        size, rep = unit
        num_traj = max(size // 4, 1)
        plan = config.build_plan(sizes_override=(num_traj, 3))
        try:
            _, _, _, final_errors = _run_driver(
                config, env, plan, _rep_seed(master, 101 * size + rep))
        except NumericalError as exc:
            return size, rep, None, str(exc)
        return size, rep, {m: float(v) for m, v in final_errors.items()}, None

    units = [(size, rep) for size in sizes for rep in range(config.repetitions)]
    rows = []
    per_size = {size: {} for size in sizes}
    failures = []
    for size, rep, errors, message in _pool_map(one_unit, units):
        if errors is None:
            rows.append((size, rep, "failed", 1.0, master, chash))
            failures.append({"size": size, "repetition": rep, "message": message})
            continue
        for metric in sorted(errors):
            rows.append((size, rep, metric, errors[metric], master, chash))
            per_size[size].setdefault(metric, []).append(errors[metric])
    rows.sort(key=lambda r: (r[0], r[1], r[2]))

    by_size = {
        str(size): {metric: _stats(vals) for metric, vals in metrics.items()}
        for size, metrics in per_size.items()
    }
    trend = {}
    ok_sizes = [s for s in sizes if per_size[s]]
    for metric in ("value_error_policy", "value_error_estimate"):
        mean_curve = [by_size[str(s)][metric]["mean"] for s in ok_sizes
                      if metric in by_size[str(s)]]
        if len(mean_curve) == len(ok_sizes) and len(ok_sizes) >= 2:
            rho = stats.spearmanr(ok_sizes, mean_curve).statistic
            trend[metric] = float(rho)
    aggregates = {
        "name": config.name,
        "algorithm": config.algorithm,
        "sizes": sizes,
        "repetitions": config.repetitions,
        "by_size": by_size,
        "spearman_mean_vs_size": trend,
        "failed_runs": failures,
    }
    return _finish(ResultRecord(
        runner="batch_sweep", config_hash=chash,
        columns=["size", "repetition", "metric", "value", "seed", "config_hash"],
        rows=rows, aggregates=aggregates, echo=config.echo(),
        wall_time_s=time.perf_counter() - t0,
    ), out_dir)


def _scalar_gain_errors(A, B, Q, R, beta, dt) -> dict:
    """Per-point atlas errors for a 1D system, with the exact-zero shortcut.

    At beta = 0 the order-i effective pair is (cA, cB) for a scalar c, and any
    c > 0 rescaling leaves the undiscounted optimal gain unchanged, so the gap
    is identically zero rather than solver roundoff.  The shortcut is skipped
    when c <= 0 (large positive A dt flips the order-2 sign) and the honest
    nonzero gap is reported.
    """
    sys = LqrSystem(A=A, B=B, Q=Q, R=R, sigma=0.0, beta=beta)
    k_true = float(lqr_optimal_1d(sys).K[0, 0])
    out = {}
    for order in (1, 2):
        if beta == 0.0:
            eff = phibe_effective_dynamics(sys, dt, order=order)
            a_hat = float(eff.A_hat[0, 0])
            if abs(float(A)) < 1e-12 or a_hat / float(A) > 0.0:
                out[f"gain_error_phibe{order}"] = 0.0
                continue
        k_hat = float(phibe_optimal(sys, dt, order=order).K[0, 0])
        out[f"gain_error_phibe{order}"] = abs(k_hat - k_true)
    k_be = float(be_optimal_1d(sys, dt).K[0, 0])
    out["gain_error_be"] = abs(k_be - k_true)
    return out


def error_atlas(config: ExperimentConfig, out_dir=None) -> ResultRecord:
    """Analytic gain-error grids over system-parameter sweeps (1D only).

    Panels: beta (discount sweep), q_over_r (reward-ratio sweep at beta = 0),
    A and B (dynamics sweeps at beta = 0), dt (step sweep at the config's
    beta), and dt_undiscounted (step sweep at beta = 0).  All values come from
    closed-form oracles; no randomness is consumed.
    """
    env = config.build_environment()
    if config.kind != "lqr" or env.state_dim != 1:
        raise ConfigError("error_atlas only applies to 1D lqr configs")
    base_A = float(env.A[0, 0])
    base_B = float(env.B[0, 0])
    base_Q = float(env.Q[0, 0])
    base_R = float(env.R[0, 0])
    base_beta = float(env.beta)
    dt = config.dt
    sweeps = dict(DEFAULT_ATLAS_SWEEPS)
    sweeps.update(config.data.get("sweeps", {}))
    chash = config.config_hash()
    master = config.seed
    t0 = time.perf_counter()

    def point(panel: str, value: float) -> dict:
        if panel == "beta":
            return _scalar_gain_errors(base_A, base_B, base_Q, base_R, value, dt)
        if panel == "q_over_r":
            return _scalar_gain_errors(base_A, base_B, -abs(base_R) * value,
                                       base_R, 0.0, dt)
        if panel == "A":
            return _scalar_gain_errors(value, base_B, base_Q, base_R, 0.0, dt)
        if panel == "B":
            return _scalar_gain_errors(base_A, value, base_Q, base_R, 0.0, dt)
        if panel == "dt":
            return _scalar_gain_errors(base_A, base_B, base_Q, base_R,
                                       base_beta, value)
        return _scalar_gain_errors(base_A, base_B, base_Q, base_R, 0.0, value)

    rows = []
    curves = {}
    for panel in sorted(sweeps):
        grid = [float(v) for v in sweeps[panel]]
        curves[panel] = {"grid": grid}
        per_metric = {}
        for value in grid:
            metrics = point(panel, value)
            for metric in sorted(metrics):
                rows.append((panel, float(value), metric, metrics[metric],
                             master, chash))
                per_metric.setdefault(metric, []).append(metrics[metric])
        curves[panel].update(per_metric)

    shape_checks = _atlas_shape_checks(curves)
    aggregates = {"name": config.name, "panels": curves, "shape_checks": shape_checks}
    return _finish(ResultRecord(
        runner="error_atlas", config_hash=chash,
        columns=["panel", "param", "metric", "value", "seed", "config_hash"],
        rows=rows, aggregates=aggregates, echo=config.echo(),
        wall_time_s=time.perf_counter() - t0,
    ), out_dir)


def _atlas_shape_checks(curves: dict) -> dict:
    """Qualitative curve shapes the analytic theory predicts."""
    checks = {}
    beta_panel = curves.get("beta")
    if beta_panel and 0.0 in beta_panel["grid"]:
        i0 = beta_panel["grid"].index(0.0)
        p1 = np.asarray(beta_panel["gain_error_phibe1"])
        imax = int(np.argmax(p1))
        checks["phibe1_zero_at_beta0"] = bool(p1[i0] == 0.0)
        checks["phibe1_rises_then_falls"] = bool(0 < imax < len(p1) - 1
                                                 and p1[-1] < p1[imax])
        be = np.asarray(beta_panel["gain_error_be"])
        checks["be_relative_range_over_beta"] = float((be.max() - be.min()) / be.max())
    qr_panel = curves.get("q_over_r")
    if qr_panel:
        be = np.asarray(qr_panel["gain_error_be"])
        p1 = np.asarray(qr_panel["gain_error_phibe1"])
        checks["be_strictly_increasing_in_q_over_r"] = bool(np.all(np.diff(be) > 0.0))
        checks["phibe1_variation_over_q_over_r"] = float(p1.max() - p1.min())
    return checks


def oracle_report(A, B, Q, R, sigma=0.0, beta=0.0, dt=0.1, orders=(1, 2),
                  discount_choice="exp") -> dict:
    """Closed-form quantities for a 1D system: K, P, each K-hat, and K-tilde."""
    sys = LqrSystem(A=A, B=B, Q=Q, R=R, sigma=sigma, beta=beta)
    if sys.state_dim != 1:
        raise ConfigError("oracle_report takes scalar system parameters")
    policy, value = lqr_optimal(sys)
    out = {
        "K": float(policy.K[0, 0]),
        "P": float(value.P[0, 0]),
        "value_constant": float(value.constant),
    }
    for order in orders:
        out[f"K_hat_{int(order)}"] = float(phibe_optimal(sys, dt, order=int(order)).K[0, 0])
    out["K_tilde"] = float(be_optimal_1d(sys, dt, discount_choice).K[0, 0])
    return out
