import copy
import itertools
import logging
from dataclasses import dataclass, field
from typing import Any

import numpy as np
import yaml

from core.helpers.dynamics import DynamicsModel
from core.helpers.measurement_process import MeasurementOperator
from core.helpers.sampler import SamplerConfig
from core.helpers.schedule import Schedule
from core.helpers.score_net import TrainConfig

logger = logging.getLogger(__name__)

METHODS = ("masf", "enkf")
ENSEMBLE_INIT = ("perturbed_draw", "perturbed_truth", "standard_normal")
LARGE_DIM = 512


class ConfigError(ValueError):
    pass


class BudgetError(ConfigError):
    pass


NONE = type(None)

# section -> key -> (accepted types, default)
_SCHEMA: dict[str, dict[str, tuple[tuple[type, ...], Any]]] = {
    "filter": {
        "method": ((str,), "masf"),
        "n_members": ((int,), 100),
        "n_steps": ((int,), 2500),
        "gap": ((int, NONE), 100),
        "measurement_steps": ((list, NONE), None),
        "eval_window": ((list,), [2000, 2500]),
        "enkf_inflation": ((float,), 1.0),
        "init_perturbation": ((float,), 0.1),
        "ensemble_init": ((str,), "perturbed_draw"),
        "retrain_each_step": ((bool,), False),
        "save_checkpoints": ((bool,), False),
    },
    "schedule": {
        "kind": ((str,), "cosine"),
        "t_terminal": ((float,), 0.992),
        "beta_min": ((float,), 0.1),
        "beta_max": ((float,), 40.0),
    },
    "measurement": {
        "kind": ((str,), "identity"),
        "sigma": ((float,), 1.0),
        "dim": ((int, NONE), None),
        "mask": ((list, NONE), None),
        "matrix": ((list, NONE), None),
    },
    "dynamics": {
        "kind": ((str,), "lorenz63"),
        "dim": ((int,), 3),
        "dt": ((float,), 0.01),
        "process_noise": ((float,), 0.0),
        "sigma": ((float,), 10.0),
        "rho": ((float,), 28.0),
        "beta": ((float,), 8.0 / 3.0),
        "forcing": ((float,), 8.0),
    },
    "score_net": {
        "hidden_width": ((int,), 64),
        "depth": ((int,), 3),
        "time_embed_dim": ((int,), 16),
        "activation": ((str,), "silu"),
    },
    "training": {
        "epochs": ((int,), 500),
        "batch_size": ((int,), 32),
        "learning_rate": ((float,), 3e-4),
        "t_min": ((float,), 1e-3),
        "loss_weighting": ((str,), "score"),
        "t_sampling": ((str,), "per_example"),
        "finetune_layers": ((int, NONE), 2),
        "finetune_epochs": ((int, NONE), None),
        "validation_split": ((float,), 0.2),
        "epoch_mode": ((str,), "single_batch"),
    },
    "sampler": {
        "nfe": ((int,), 500),
        "eps": ((float,), 0.008),
        "guidance_scale": ((float,), 1.0),
        "final_denoise": ((bool,), True),
    },
    "experiment": {
        "seeds": ((list,), [0, 1, 2, 3, 4]),
        "methods": ((list,), ["masf", "enkf"]),
        "sweep": ((dict,), {}),
        "output_dir": ((str,), "runs"),
        "budget": ((float,), 5e10),
        "allow_large": ((bool,), False),
        "jobs": ((int,), 1),
    },
}

# Per-system settings from the Lorenz-63 / Lorenz-96 experiment configurations.
_SYSTEM_DEFAULTS: dict[str, dict[str, dict[str, Any]]] = {
    "lorenz63": {
        "dynamics": {"dim": 3},
        "filter": {"n_steps": 2500, "gap": 100, "eval_window": [2000, 2500], "init_perturbation": 0.1},
        "training": {"validation_split": 0.2},
    },
    "lorenz96": {
        "dynamics": {"dim": 64},
        "filter": {"n_steps": 100, "gap": 5, "eval_window": [25, 100], "init_perturbation": 1.0},
        "training": {"validation_split": 0.1},
        "score_net": {"hidden_width": 256, "depth": 4},
    },
}

FILTER_SECTIONS = ("filter", "schedule", "measurement", "dynamics", "score_net", "training", "sampler")


@dataclass(frozen=True)
class NetConfig:
    hidden_width: int = 64
    depth: int = 3
    time_embed_dim: int = 16
    activation: str = "silu"


@dataclass(frozen=True)
class FilterConfig:
    schedule: Schedule
    measurement: MeasurementOperator
    dynamics: DynamicsModel
    score_net: NetConfig = field(default_factory=NetConfig)
    training: TrainConfig = field(default_factory=TrainConfig)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    method: str = "masf"
    n_members: int = 100
    n_steps: int = 2500
    gap: int | None = 100
    measurement_steps: tuple[int, ...] | None = None
    eval_window: tuple[int, int] = (2000, 2500)
    enkf_inflation: float = 1.0
    init_perturbation: float = 0.1
    ensemble_init: str = "perturbed_draw"
    retrain_each_step: bool = False
    save_checkpoints: bool = False
    resolved: dict[str, Any] = field(default_factory=dict, compare=False, repr=False)

    @property
    def measurement_set(self) -> tuple[int, ...]:
        """Steps r in 1..R that receive a measurement update."""
        if self.measurement_steps is not None:
            steps = set(self.measurement_steps)
        else:
            steps = set(range(self.gap, self.n_steps + 1, self.gap))
        return tuple(sorted(r for r in steps if 1 <= r <= self.n_steps))

    @property
    def deviations(self) -> list[str]:
        notes = []
        if self.dynamics.kind == "lorenz96" and self.method == "masf":
            notes.append("score model is an MLP instead of a 1D U-Net for Lorenz-96")
        if self.method == "masf" and self.training.epoch_mode == "full_pass":
            notes.append("each training epoch is a full minibatch pass instead of one Adam update")
        if self.ensemble_init == "perturbed_truth":
            notes.append("initial ensemble is centred on the true initial state")
        return notes


@dataclass(frozen=True)
class ExperimentSpec:
    base: FilterConfig
    raw: dict[str, Any]
    sweep: tuple[tuple[str, tuple[Any, ...]], ...] = ()
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    methods: tuple[str, ...] = ("masf", "enkf")
    output_dir: str = "runs"
    budget: float = 5e10
    allow_large: bool = False
    jobs: int = 1

    def sweep_points(self) -> list[dict[str, Any]]:
        if not self.sweep:
            return [{}]
        paths = [p for p, _ in self.sweep]
        return [dict(zip(paths, combo)) for combo in itertools.product(*(v for _, v in self.sweep))]

    def build(self, overrides: dict[str, Any], method: str) -> FilterConfig:
        raw = apply_overrides(self.raw, {**overrides, "filter.method": method})
        return build_filter_config(raw)


def _type_ok(value: Any, kinds: tuple[type, ...]) -> bool:
    if isinstance(value, bool):
        return bool in kinds
    if isinstance(value, int) and float in kinds:
        return True
    return isinstance(value, kinds)


def _check_section(name: str, section: Any) -> dict[str, Any]:
    if section is None:
        return {}
    if not isinstance(section, dict):
        raise ConfigError(f"section '{name}' must be a mapping")
    schema = _SCHEMA[name]
    for key, value in section.items():
        if key not in schema:
            raise ConfigError(f"unknown key '{name}.{key}'")
        kinds, _ = schema[key]
        if not _type_ok(value, kinds):
            expected = " or ".join("null" if k is NONE else k.__name__ for k in kinds)
            raise ConfigError(f"'{name}.{key}' must be {expected}, got {type(value).__name__}")
    return section


def resolve(raw: dict[str, Any]) -> dict[str, Any]:
    """Validate keys/types and fill defaults: schema defaults < system defaults < file."""
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a mapping of sections")
    unknown = set(raw) - set(_SCHEMA)
    if unknown:
        raise ConfigError(f"unknown section(s): {', '.join(sorted(unknown))}")

    user = {name: _check_section(name, raw.get(name)) for name in _SCHEMA}
    if "gap" in user["filter"] and "measurement_steps" in user["filter"]:
        raise ConfigError("'filter.gap' and 'filter.measurement_steps' are mutually exclusive")

    kind = user["dynamics"].get("kind", _SCHEMA["dynamics"]["kind"][1])
    system = _SYSTEM_DEFAULTS.get(kind, {})
    resolved: dict[str, Any] = {}
    for name, schema in _SCHEMA.items():
        section = {key: copy.deepcopy(default) for key, (_, default) in schema.items()}
        section.update(copy.deepcopy(system.get(name, {})))
        section.update(copy.deepcopy(user[name]))
        resolved[name] = section
    if "measurement_steps" in user["filter"]:
        resolved["filter"]["gap"] = None
    return resolved


def build_filter_config(raw: dict[str, Any]) -> FilterConfig:
    res = resolve(raw)
    f, sch, meas, dyn = res["filter"], res["schedule"], res["measurement"], res["dynamics"]
    try:
        schedule = Schedule(
            kind=sch["kind"],
            params={"beta_min": float(sch["beta_min"]), "beta_max": float(sch["beta_max"])},
            t_terminal=float(sch["t_terminal"]),
        )
    except ValueError as e:
        raise ConfigError(f"schedule: {e}") from e
    try:
        dynamics = DynamicsModel(**{k: (float(v) if k not in ("kind", "dim") else v) for k, v in dyn.items()})
    except ValueError as e:
        raise ConfigError(f"dynamics: {e}") from e

    dim = meas["dim"] if meas["dim"] is not None else dynamics.dim
    if dim != dynamics.dim:
        raise ConfigError(f"measurement.dim={dim} does not match dynamics.dim={dynamics.dim}")
    try:
        measurement = MeasurementOperator(
            kind=meas["kind"],
            dim=dim,
            sigma=float(meas["sigma"]),
            mask=tuple(meas["mask"]) if meas["mask"] is not None else None,
            matrix=np.array(meas["matrix"], dtype=float) if meas["matrix"] is not None else None,
        )
    except (ValueError, TypeError) as e:
        raise ConfigError(f"measurement: {e}") from e

    try:
        net = NetConfig(**res["score_net"])
        training = TrainConfig(**{**res["training"], "learning_rate": float(res["training"]["learning_rate"])})
        sampler = SamplerConfig(**{**res["sampler"], "eps": float(res["sampler"]["eps"])})
    except ValueError as e:
        raise ConfigError(str(e)) from e
    if sampler.t_start > schedule.t_terminal + 1e-12:
        raise ConfigError(
            f"sampler.eps={sampler.eps} starts sampling beyond schedule.t_terminal={schedule.t_terminal}"
        )

    if f["method"] not in METHODS:
        raise ConfigError(f"'filter.method' must be one of {METHODS}")
    if f["ensemble_init"] not in ENSEMBLE_INIT:
        raise ConfigError(f"'filter.ensemble_init' must be one of {ENSEMBLE_INIT}")
    if f["n_members"] < 2:
        raise ConfigError("'filter.n_members' must be >= 2")
    if f["n_steps"] < 0:
        raise ConfigError("'filter.n_steps' must be >= 0")
    if f["gap"] is not None and f["gap"] < 1:
        raise ConfigError("'filter.gap' must be >= 1")
    if f["gap"] is None and f["measurement_steps"] is None:
        raise ConfigError("one of 'filter.gap' or 'filter.measurement_steps' is required")
    if f["enkf_inflation"] < 1.0:
        raise ConfigError("'filter.enkf_inflation' must be >= 1")
    steps = f["measurement_steps"]
    if steps is not None:
        if any(not isinstance(r, int) or isinstance(r, bool) or not 0 <= r <= f["n_steps"] for r in steps):
            raise ConfigError(f"'filter.measurement_steps' must be integers within [0, {f['n_steps']}]")
        if 0 in steps:
            logger.warning("measurement at step 0 is ignored; updates start at step 1")
    window = f["eval_window"]
    if len(window) != 2 or not 0 <= window[0] <= window[1] <= f["n_steps"]:
        raise ConfigError(f"'filter.eval_window' must be [start, end] within [0, {f['n_steps']}]")

    return FilterConfig(
        schedule=schedule,
        measurement=measurement,
        dynamics=dynamics,
        score_net=net,
        training=training,
        sampler=sampler,
        method=f["method"],
        n_members=f["n_members"],
        n_steps=f["n_steps"],
        gap=f["gap"],
        measurement_steps=tuple(steps) if steps is not None else None,
        eval_window=(int(window[0]), int(window[1])),
        enkf_inflation=float(f["enkf_inflation"]),
        init_perturbation=float(f["init_perturbation"]),
        ensemble_init=f["ensemble_init"],
        retrain_each_step=f["retrain_each_step"],
        save_checkpoints=f["save_checkpoints"],
        resolved={name: res[name] for name in FILTER_SECTIONS},
    )


def apply_overrides(raw: dict[str, Any], overrides: dict[str, Any]) -> dict[str, Any]:
    out = copy.deepcopy(raw)
    for path, value in overrides.items():
        section, _, key = path.partition(".")
        if section not in FILTER_SECTIONS or key not in _SCHEMA[section]:
            raise ConfigError(f"sweep path '{path}' does not name a config field")
        out.setdefault(section, {})
        if out[section] is None:
            out[section] = {}
        out[section][key] = value
        if path == "filter.gap":
            out[section].pop("measurement_steps", None)
    return out


def estimate_cost(cfg: FilterConfig) -> float:
    per_step = cfg.n_members * cfg.dynamics.dim
    cost = per_step * cfg.n_steps
    if cfg.method == "masf":
        cost += per_step * cfg.sampler.nfe * len(cfg.measurement_set)
    return float(cost)


def parse_experiment(raw: dict[str, Any]) -> ExperimentSpec:
    base = build_filter_config(raw)
    exp = resolve(raw)["experiment"]

    sweep = []
    for path, values in exp["sweep"].items():
        if not isinstance(values, list) or not values:
            raise ConfigError(f"sweep '{path}' must be a non-empty list")
        apply_overrides({}, {path: values[0]})
        sweep.append((path, tuple(values)))

    methods = tuple(exp["methods"])
    if not methods or any(m not in METHODS for m in methods):
        raise ConfigError(f"'experiment.methods' must be a non-empty subset of {METHODS}")
    seeds = tuple(exp["seeds"])
    if not seeds or any(not isinstance(s, int) or isinstance(s, bool) or s < 0 for s in seeds):
        raise ConfigError("'experiment.seeds' must be non-negative integers")
    if exp["jobs"] < 1:
        raise ConfigError("'experiment.jobs' must be >= 1")

    spec = ExperimentSpec(
        base=base,
        raw=copy.deepcopy(raw),
        sweep=tuple(sweep),
        seeds=seeds,
        methods=methods,
        output_dir=exp["output_dir"],
        budget=float(exp["budget"]),
        allow_large=exp["allow_large"],
        jobs=exp["jobs"],
    )
    check_budget(spec)
    return spec


def check_budget(spec: ExperimentSpec) -> float:
    total = 0.0
    for point in spec.sweep_points():
        for method in spec.methods:
            try:
                cfg = spec.build(point, method)
            except ConfigError as e:
                raise ConfigError(f"sweep point {point}: {e}") from e
            if cfg.dynamics.dim > LARGE_DIM and not spec.allow_large:
                raise BudgetError(
                    f"dimension {cfg.dynamics.dim} exceeds {LARGE_DIM}; set 'experiment.allow_large: true'"
                )
            total += estimate_cost(cfg) * len(spec.seeds)
    if total > spec.budget:
        raise BudgetError(f"estimated sweep cost {total:.3g} exceeds budget {spec.budget:.3g}")
    return total


def load_config(path: str) -> ExperimentSpec:
    try:
        with open(path) as fh:
            raw = yaml.safe_load(fh)
    except FileNotFoundError as e:
        raise ConfigError(f"config file not found: {path}") from e
    except yaml.YAMLError as e:
        mark = getattr(e, "problem_mark", None)
        where = f" at line {mark.line + 1}, column {mark.column + 1}" if mark else ""
        raise ConfigError(f"could not parse {path}{where}: {getattr(e, 'problem', e)}") from e
    return parse_experiment(raw or {})


def resolved_config(cfg: FilterConfig) -> dict[str, Any]:
    return copy.deepcopy(cfg.resolved)
