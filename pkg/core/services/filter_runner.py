import asyncio
import json
import logging
import os
import time
from dataclasses import dataclass, field
from typing import Any

import numpy as np

from core.helpers import artifacts
from core.helpers.config import FilterConfig, resolved_config
from core.helpers.dynamics import DynamicsModel, cached_simulate, config_hash
from core.helpers.measurement_process import ForwardProcess
from core.helpers.rng import stream
from core.interfaces.measurement_updater_interface import MeasurementUpdater
from core.services.enkf_updater import EnKFMeasurementUpdater
from core.services.masf_updater import MASFMeasurementUpdater

logger = logging.getLogger(__name__)

ENSEMBLE_KINDS = ("prior", "posterior")


@dataclass
class Ensemble:
    members: np.ndarray
    step_index: int = 0
    kind: str = "prior"

    def __post_init__(self) -> None:
        self.members = np.asarray(self.members, dtype=float)
        if self.members.ndim != 2 or self.members.shape[0] < 1:
            raise ValueError(f"ensemble members must be an (N, d) array, got {self.members.shape}")
        if self.kind not in ENSEMBLE_KINDS:
            raise ValueError(f"ensemble kind must be one of {ENSEMBLE_KINDS}")
        if not np.all(np.isfinite(self.members)):
            raise ValueError("ensemble members must be finite")

    @property
    def size(self) -> int:
        return self.members.shape[0]

    def mean(self) -> np.ndarray:
        return self.members.mean(axis=0)

    def spread(self) -> float:
        """Root of the mean per-coordinate sample variance."""
        if self.size < 2:
            return 0.0
        return float(np.sqrt(self.members.var(axis=0, ddof=1).mean()))


@dataclass
class FilterState:
    """Everything needed to resume a run after `step`."""

    step: int
    members: np.ndarray
    kind: str
    updater: dict[str, Any]

    def save(self, path: str) -> str:
        arrays = {"members": self.members}
        for i, w in enumerate(self.updater.get("weights", [])):
            arrays[f"weight_{i}"] = w
        for i, b in enumerate(self.updater.get("biases", [])):
            arrays[f"bias_{i}"] = b
        meta = {k: v for k, v in self.updater.items() if k not in ("weights", "biases")}
        meta["n_layers"] = len(self.updater.get("weights", []))
        header = json.dumps({"step": self.step, "kind": self.kind, "updater": meta})
        with open(path, "wb") as fh:
            np.savez(fh, header=np.array(header), **arrays)
        return path

    @classmethod
    def load(cls, path: str) -> "FilterState":
        with np.load(path) as data:
            header = json.loads(str(data["header"]))
            meta = header["updater"]
            n_layers = meta.pop("n_layers")
            updater = {
                **meta,
                "weights": [data[f"weight_{i}"] for i in range(n_layers)],
                "biases": [data[f"bias_{i}"] for i in range(n_layers)],
            }
            return cls(step=header["step"], members=data["members"], kind=header["kind"], updater=updater)


@dataclass
class FilterRun:
    seed: int
    method: str
    steps: list[int] = field(default_factory=list)
    estimates: list[np.ndarray] = field(default_factory=list)
    rmse_series: list[float] = field(default_factory=list)
    spread_series: list[float] = field(default_factory=list)
    is_measurement: list[bool] = field(default_factory=list)
    timings: dict[str, float] = field(default_factory=lambda: {"time_update": 0.0, "measurement_update": 0.0})
    deviations: list[str] = field(default_factory=list)
    state: FilterState | None = None

    def record(self, step: int, ens: Ensemble, truth: np.ndarray, measured: bool) -> None:
        mean = ens.mean()
        self.steps.append(step)
        self.estimates.append(mean)
        self.rmse_series.append(float(np.sqrt(np.mean((mean - truth) ** 2))))
        self.spread_series.append(ens.spread())
        self.is_measurement.append(measured)

    def window_rmse(self, window: tuple[int, int]) -> float:
        """Time average of the per-step RMSE over steps in [start, end]."""
        values = [e for r, e in zip(self.steps, self.rmse_series) if window[0] <= r <= window[1]]
        if not values:
            return float("nan")
        return float(np.mean(values))

    def estimate_array(self) -> np.ndarray:
        return np.array(self.estimates)


def time_update(ens: Ensemble, model: DynamicsModel, n_steps: int, rng: np.random.Generator | None) -> Ensemble:
    if n_steps < 1:
        raise ValueError("n_steps must be >= 1")
    members = model.simulate_ensemble(ens.members, n_steps, rng, start_index=ens.step_index)
    return Ensemble(members, ens.step_index + n_steps, "prior")


def generate_truth(cfg: FilterConfig, seed: int, cache_dir: str | None = None) -> np.ndarray:
    """(R + 1, d) truth trajectory started from N(0, I)."""
    x0 = stream(seed, "truth").standard_normal(cfg.dynamics.dim)
    rng = stream(seed, "truth", 1)
    if cache_dir is None:
        return cfg.dynamics.simulate(x0, cfg.n_steps, rng)
    return cached_simulate(cfg.dynamics, x0, cfg.n_steps, cache_dir, {"seed": seed}, rng)


def generate_measurements(cfg: FilterConfig, truth: np.ndarray, seed: int) -> dict[int, np.ndarray]:
    return {
        r: cfg.measurement.measure(truth[r], stream(seed, "measurements", r))
        for r in cfg.measurement_set
    }


class FilterRunner:
    """
    Runs the filtering recursion for one config and seed: time update every
    step, measurement update on the measurement set, ensemble mean recorded
    at every step.
    """

    class RunError(Exception):
        def __init__(self, message: str, step: int, partial: FilterRun) -> None:
            super().__init__(message)
            self.step = step
            self.partial = partial

    def __init__(
        self,
        cfg: FilterConfig,
        seed: int,
        updater: MeasurementUpdater | None = None,
        out_dir: str | None = None,
        trace: bool = False,
    ) -> None:
        self.cfg = cfg
        self.seed = seed
        self.out_dir = out_dir
        self.fp = ForwardProcess(cfg.measurement, cfg.schedule)
        self.updater = updater or self._build_updater(trace)

    def _build_updater(self, trace: bool) -> MeasurementUpdater:
        cfg = self.cfg
        if cfg.method == "enkf":
            return EnKFMeasurementUpdater(cfg.measurement, inflation=cfg.enkf_inflation)
        checkpoint_dir = trace_dir = None
        if self.out_dir is not None:
            if cfg.save_checkpoints:
                checkpoint_dir = os.path.join(self.out_dir, "checkpoints")
            if trace:
                trace_dir = os.path.join(self.out_dir, "trace")
        return MASFMeasurementUpdater(
            self.fp,
            self.seed,
            net_cfg=cfg.score_net,
            train_cfg=cfg.training,
            sampler_cfg=cfg.sampler,
            retrain_each_step=cfg.retrain_each_step,
            checkpoint_dir=checkpoint_dir,
            trace_dir=trace_dir,
        )

    def init_ensemble(self, truth0: np.ndarray) -> Ensemble:
        """
        Initial prior ensemble. The default centres a perturbed cloud on its own
        N(0, I) draw, independent of the truth; `perturbed_truth` centres it on truth0.
        """
        rng = stream(self.seed, "ensemble_init")
        shape = (self.cfg.n_members, self.cfg.dynamics.dim)
        if self.cfg.ensemble_init == "standard_normal":
            return Ensemble(rng.standard_normal(shape), 0, "prior")
        centre = truth0 if self.cfg.ensemble_init == "perturbed_truth" else rng.standard_normal(shape[1])
        return Ensemble(centre + self.cfg.init_perturbation * rng.standard_normal(shape), 0, "prior")

    def _update_rng(self, step: int) -> np.random.Generator:
        label = "enkf" if self.cfg.method == "enkf" else "sampling"
        return stream(self.seed, label, step)

    def run(
        self,
        truth: np.ndarray,
        measurements: dict[int, np.ndarray],
        state: FilterState | None = None,
        stop_at: int | None = None,
    ) -> FilterRun:
        cfg = self.cfg
        stop = cfg.n_steps if stop_at is None else stop_at
        if not 0 <= stop <= cfg.n_steps:
            raise ValueError(f"stop_at must lie in [0, {cfg.n_steps}]")
        if truth.shape[0] < stop + 1:
            raise ValueError(f"truth has {truth.shape[0]} rows, need {stop + 1}")
        missing = [r for r in cfg.measurement_set if r <= stop and r not in measurements]
        if missing:
            raise ValueError(f"no measurement supplied for steps {missing[:5]}")
        measured = set(cfg.measurement_set)

        run = FilterRun(seed=self.seed, method=cfg.method, deviations=cfg.deviations)
        if state is None:
            ens = self.init_ensemble(truth[0])
            run.record(0, ens, truth[0], False)
        else:
            ens = Ensemble(state.members, state.step, state.kind)
            self.updater.load_state_dict(state.updater)

        r = ens.step_index
        try:
            while r < stop:
                r += 1
                started = time.perf_counter()
                ens = time_update(ens, cfg.dynamics, 1, stream(self.seed, "time_update", r))
                run.timings["time_update"] += time.perf_counter() - started

                if r in measured:
                    started = time.perf_counter()
                    posterior = self.updater.update(ens.members, measurements[r], r, self._update_rng(r))
                    ens = Ensemble(posterior, r, "posterior")
                    run.timings["measurement_update"] += time.perf_counter() - started
                    logger.debug("step %d: posterior spread %.4g", r, ens.spread())
                run.record(r, ens, truth[r], r in measured)
        except Exception as e:
            run.state = FilterState(ens.step_index, ens.members.copy(), ens.kind, self.updater.state_dict())
            if self.out_dir is not None:
                write_run(self.out_dir, cfg, run, status="failed", error=str(e))
            raise self.RunError(f"filter run failed at step {r}: {e}", step=r, partial=run) from e

        run.state = FilterState(ens.step_index, ens.members.copy(), ens.kind, self.updater.state_dict())
        return run

    async def async_run(
        self,
        truth: np.ndarray,
        measurements: dict[int, np.ndarray],
        state: FilterState | None = None,
        stop_at: int | None = None,
    ) -> FilterRun:
        return await asyncio.to_thread(self.run, truth, measurements, state, stop_at)


def run_filter(
    cfg: FilterConfig,
    truth: np.ndarray,
    measurements: dict[int, np.ndarray],
    seed: int,
    state: FilterState | None = None,
    stop_at: int | None = None,
    updater: MeasurementUpdater | None = None,
) -> FilterRun:
    return FilterRunner(cfg, seed, updater=updater).run(truth, measurements, state=state, stop_at=stop_at)


async def async_run_filter(
    cfg: FilterConfig,
    truth: np.ndarray,
    measurements: dict[int, np.ndarray],
    seed: int,
) -> FilterRun:
    return await FilterRunner(cfg, seed).async_run(truth, measurements)


def run_hash(cfg: FilterConfig, seed: int) -> str:
    return config_hash({"config": resolved_config(cfg), "seed": seed})


def write_run(
    out_dir: str,
    cfg: FilterConfig,
    run: FilterRun,
    status: str = "completed",
    error: str | None = None,
    extra: dict[str, Any] | None = None,
) -> dict[str, Any]:
    os.makedirs(out_dir, exist_ok=True)
    artifacts.write_metrics(
        os.path.join(out_dir, artifacts.METRICS), run.steps, run.rmse_series, run.spread_series, run.is_measurement
    )
    estimates = run.estimate_array().reshape(len(run.steps), cfg.dynamics.dim)
    artifacts.write_states(os.path.join(out_dir, artifacts.ESTIMATES), run.steps, estimates)
    manifest = {
        "status": status,
        "error": error,
        "method": cfg.method,
        "seed": run.seed,
        "config_hash": run_hash(cfg, run.seed),
        "code_version": artifacts.code_version(),
        "resolved_config": resolved_config(cfg),
        "measurement_steps": list(cfg.measurement_set),
        "eval_window": list(cfg.eval_window),
        "rmse": run.window_rmse(cfg.eval_window) if status == "completed" else None,
        "timings": run.timings,
        "deviations": run.deviations,
        **(extra or {}),
    }
    artifacts.write_json(os.path.join(out_dir, artifacts.MANIFEST), manifest)
    return manifest
