import asyncio
import logging
from typing import Any

import numpy as np
from scipy import linalg

from core.helpers.measurement_process import MeasurementOperator
from core.interfaces.measurement_updater_interface import MeasurementUpdater

logger = logging.getLogger(__name__)


class EnKFMeasurementUpdater(MeasurementUpdater):
    """
    Stochastic EnKF with perturbed observations:
    K = P A^T (A P A^T + sigma^2 I)^{-1}, x_i <- x_i + K (z + sigma eps_i - A x_i),
    with P the (optionally inflated) sample covariance of the prior members.
    """

    class InnovationError(Exception):
        pass

    def __init__(self, operator: MeasurementOperator, inflation: float = 1.0, jitter: float = 0.0) -> None:
        if inflation < 1.0:
            raise ValueError("inflation must be >= 1")
        if jitter < 0.0:
            raise ValueError("jitter must be >= 0")
        self.operator = operator
        self.inflation = inflation
        self.jitter = jitter
        self.n_updates = 0

    def gain(self, members: np.ndarray) -> np.ndarray:
        n = members.shape[0]
        anomalies = members - members.mean(axis=0)
        cov = anomalies.T @ anomalies / (n - 1)
        a = self.operator.as_matrix()
        innovation = a @ cov @ a.T + (self.operator.sigma**2 + self.jitter) * np.eye(self.operator.dim)
        try:
            factor = linalg.cho_factor(innovation)
        except linalg.LinAlgError as e:
            raise self.InnovationError(
                "innovation covariance is singular; increase the inflation factor or add jitter"
            ) from e
        return linalg.cho_solve(factor, a @ cov).T

    def update(
        self,
        members: np.ndarray,
        z: np.ndarray,
        step_index: int,
        rng: np.random.Generator,
    ) -> np.ndarray:
        members = np.asarray(members, dtype=float)
        if members.ndim != 2 or members.shape[0] < 2:
            raise ValueError("EnKF needs an (N, d) ensemble with N >= 2")
        if self.inflation != 1.0:
            mean = members.mean(axis=0)
            members = mean + np.sqrt(self.inflation) * (members - mean)

        k = self.gain(members)
        perturbed = np.asarray(z, dtype=float) + self.operator.sigma * rng.standard_normal(members.shape)
        innovations = perturbed - self.operator.apply(members)
        posterior = members + innovations @ k.T
        self.n_updates += 1
        logger.debug("enkf update at step %d: mean |K| %.3g", step_index, float(np.abs(k).mean()))
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
        return {"method": "enkf", "n_updates": self.n_updates}

    def load_state_dict(self, state: dict[str, Any]) -> None:
        if state.get("method") != "enkf":
            raise ValueError(f"state belongs to '{state.get('method')}', not enkf")
        self.n_updates = int(state["n_updates"])
