from abc import ABC, abstractmethod
from typing import Any

import numpy as np


class MeasurementUpdater(ABC):

    @abstractmethod
    def update(
        self,
        members: np.ndarray,
        z: np.ndarray,
        step_index: int,
        rng: np.random.Generator,
    ) -> np.ndarray:
        pass

    @abstractmethod
    async def async_update(
        self,
        members: np.ndarray,
        z: np.ndarray,
        step_index: int,
        rng: np.random.Generator,
    ) -> np.ndarray:
        pass

    @abstractmethod
    def state_dict(self) -> dict[str, Any]:
        pass

    @abstractmethod
    def load_state_dict(self, state: dict[str, Any]) -> None:
        pass
