import asyncio
import logging
import os
import time
from typing import Any

import numpy as np

from core.helpers.config import NetConfig
from core.helpers.measurement_process import ForwardProcess
from core.helpers.rng import stream
from core.helpers.sampler import ReverseSampler, SamplerConfig
from core.helpers.score_net import ScoreNet, TrainConfig, TrainingHistory, finetune, save_checkpoint, train
from core.interfaces.measurement_updater_interface import MeasurementUpdater
from core.interfaces.score_model_interface import ScoreModel

logger = logging.getLogger(__name__)


class MASFMeasurementUpdater(MeasurementUpdater):
    """
    Measurement update by score-based posterior sampling. The prior score net is
    trained on the first update and fine-tuned afterwards (or retrained from
    scratch every time with `retrain_each_step`). A fixed `prior_model` skips
    training altogether.
    """

    def __init__(
        self,
        fp: ForwardProcess,
        seed: int,
        net_cfg: NetConfig | None = None,
        train_cfg: TrainConfig | None = None,
        sampler_cfg: SamplerConfig | None = None,
        retrain_each_step: bool = False,
        prior_model: ScoreModel | None = None,
        checkpoint_dir: str | None = None,
        trace_dir: str | None = None,
    ) -> None:
        self.fp = fp
        self.seed = seed
        self.net_cfg = net_cfg or NetConfig()
        self.train_cfg = train_cfg or TrainConfig()
        self.sampler_cfg = sampler_cfg or SamplerConfig()
        self.retrain_each_step = retrain_each_step
        self.prior_model = prior_model
        self.checkpoint_dir = checkpoint_dir
        self.trace_dir = trace_dir
        self.net: ScoreNet | None = None
        self.n_updates = 0
        self.histories: dict[int, TrainingHistory] = {}
        self.train_seconds = 0.0
        self.sample_seconds = 0.0

    def _new_net(self, rng: np.random.Generator) -> ScoreNet:
        return ScoreNet(
            self.fp.dim,
            hidden_width=self.net_cfg.hidden_width,
            depth=self.net_cfg.depth,
            time_embed_dim=self.net_cfg.time_embed_dim,
            activation=self.net_cfg.activation,
            rng=rng,
        )

    def fit_prior(self, members: np.ndarray, step_index: int) -> ScoreModel:
        if self.prior_model is not None:
            return self.prior_model
        rng = stream(self.seed, "training", step_index)
        started = time.perf_counter()
        if self.net is None or self.retrain_each_step:
            logger.info("step %d: training score net for %d epochs", step_index, self.train_cfg.epochs)
            self.net, history = train(self._new_net(rng), members, self.fp, self.train_cfg, rng)
        else:
            logger.info("step %d: fine-tuning score net", step_index)
            self.net, history = finetune(self.net, members, self.fp, self.train_cfg, rng)
        self.train_seconds += time.perf_counter() - started
        self.histories[step_index] = history
        return self.net

    def update(
        self,
        members: np.ndarray,
        z: np.ndarray,
        step_index: int,
        rng: np.random.Generator,
    ) -> np.ndarray:
        members = np.asarray(members, dtype=float)
        model = self.fit_prior(members, step_index)

        started = time.perf_counter()
        sampler = ReverseSampler(model, self.fp, self.sampler_cfg, trace=self.trace_dir is not None)
        posterior = sampler.sample(members, z, rng)
        self.sample_seconds += time.perf_counter() - started
        self.n_updates += 1

        if self.trace_dir is not None:
            os.makedirs(self.trace_dir, exist_ok=True)
            sampler.write_trace(os.path.join(self.trace_dir, f"trace_step_{step_index:06d}.csv"))
        if self.checkpoint_dir is not None and self.net is not None:
            os.makedirs(self.checkpoint_dir, exist_ok=True)
            save_checkpoint(
                self.net,
                os.path.join(self.checkpoint_dir, f"score_net_step_{step_index:06d}.bin"),
                extra={"step": step_index, "seed": self.seed},
            )
        return posterior

    async def async_update(
        self,
        members: np.ndarray,
        z: np.ndarray,
        step_index: int,
        rng: np.random.Generator,
    ) -> np.ndarray:
        return await asyncio.to_thread(self.update, members, z, step_index, rng)

    def state_dict(self) -> dict[str, Any]:
        state: dict[str, Any] = {"method": "masf", "n_updates": self.n_updates, "weights": [], "biases": []}
        if self.net is not None:
            state["weights"] = [w.copy() for w, _ in self.net.layers]
            state["biases"] = [b.copy() for _, b in self.net.layers]
        return state

    def load_state_dict(self, state: dict[str, Any]) -> None:
        if state.get("method") != "masf":
            raise ValueError(f"state belongs to '{state.get('method')}', not masf")
        self.n_updates = int(state["n_updates"])
        if not state["weights"]:
            self.net = None
            return
        layers = [(np.array(w, dtype=float), np.array(b, dtype=float)) for w, b in zip(state["weights"], state["biases"])]
        self.net = ScoreNet(
            self.fp.dim,
            hidden_width=self.net_cfg.hidden_width,
            depth=self.net_cfg.depth,
            time_embed_dim=self.net_cfg.time_embed_dim,
            activation=self.net_cfg.activation,
            layers=layers,
        )
